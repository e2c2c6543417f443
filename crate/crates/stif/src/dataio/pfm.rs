//! Grayscale PFM (portable float map) reader and writer.
//!
//! Header `Pf`, dimensions, scale (negative scale means little-endian), then
//! 32-bit float rows stored bottom-to-top per the PFM convention. Depth maps
//! are written little-endian with scale -1.0.

use crate::error::{Error, Result};
use std::io::Read;
use std::path::Path;

pub fn write_pfm(path: &Path, width: usize, height: usize, rows_top_down: &[f32]) -> Result<()> {
    if rows_top_down.len() != width * height {
        return Err(Error::Contract(format!(
            "pfm buffer is {} values, expected {width}x{height}",
            rows_top_down.len()
        )));
    }
    let mut out = Vec::with_capacity(32 + 4 * rows_top_down.len());
    out.extend_from_slice(format!("Pf\n{width} {height}\n-1.0\n").as_bytes());
    for j in (0..height).rev() {
        for v in &rows_top_down[j * width..(j + 1) * width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let bad = |what: &str| Error::Data(format!("{}: invalid pfm: {what}", path.display()));

    // Three whitespace-terminated header tokens after the magic line.
    let mut pos = 0usize;
    let mut token = |raw: &[u8]| -> Result<String> {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data(format!("{}: truncated pfm header", path.display())));
        }
        let t = String::from_utf8_lossy(&raw[start..pos]).into_owned();
        pos += 1; // single whitespace terminator
        Ok(t)
    };
    if token(&raw)? != "Pf" {
        return Err(bad("not a grayscale `Pf` file"));
    }
    let width: usize = token(&raw)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&raw)?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = token(&raw)?.parse().map_err(|_| bad("bad scale"))?;
    let little_endian = scale < 0.0;

    let data = &raw[pos..];
    if data.len() != width * height * 4 {
        return Err(bad(&format!("payload is {} bytes, expected {}", data.len(), width * height * 4)));
    }
    let mut values = vec![0f32; width * height];
    for (k, chunk) in data.chunks_exact(4).enumerate() {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian { f32::from_le_bytes(bytes) } else { f32::from_be_bytes(bytes) };
        // Bottom-up storage order.
        let j = height - 1 - k / width;
        let i = k % width;
        values[j * width + i] = v;
    }
    Ok((width, height, values))
}

/// Writer used for predicted-depth outputs.
pub fn write_pfm_f64(path: &Path, width: usize, height: usize, rows_top_down: &[f64]) -> Result<()> {
    let as_f32: Vec<f32> = rows_top_down.iter().map(|&v| v as f32).collect();
    write_pfm(path, width, height, &as_f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.pfm");
        let values: Vec<f32> = (0..12).map(|i| 0.5 + i as f32 * 0.25).collect();
        write_pfm(&path, 4, 3, &values).unwrap();
        let (w, h, back) = read_pfm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, values);
        // Idempotent bytes.
        let first = std::fs::read(&path).unwrap();
        write_pfm(&path, 4, 3, &back).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pfm");
        std::fs::write(&path, b"Pf\n4 3\n-1.0\n\x00\x00").unwrap();
        assert!(read_pfm(&path).is_err());
    }

    #[test]
    fn rejects_color_pfm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.pfm");
        std::fs::write(&path, b"PF\n1 1\n-1.0\n\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(read_pfm(&path).is_err());
    }
}

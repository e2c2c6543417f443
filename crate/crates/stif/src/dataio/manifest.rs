//! Dataset directory format: `manifest.json` plus per-frame image files.
//!
//! Color frames are 8-bit PNG, or binary PPM (P6) when the manifest names a
//! `.ppm` file. Depth frames are grayscale PFM in meters. Poses are row-major
//! 4x4 world-from-camera matrices.

use super::pfm::{read_pfm, write_pfm};
use super::{Frame, RgbdDataset};
use crate::camera::CameraCalib;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Intrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameEntry {
    color: String,
    depth: String,
    world_from_camera: [[f64; 4]; 4],
    time_index: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    intrinsics: Option<Intrinsics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    width: usize,
    height: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    intrinsics: Option<Intrinsics>,
    frames: Vec<FrameEntry>,
}

fn read_color(path: &Path, width: usize, height: usize) -> Result<Vec<u8>> {
    let data = if path.extension().and_then(|e| e.to_str()) == Some("ppm") {
        read_ppm(path, width, height)?
    } else {
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("{}: cannot read image: {e}", path.display())))?
            .to_rgb8();
        if (img.width() as usize, img.height() as usize) != (width, height) {
            return Err(Error::Data(format!(
                "{}: image is {}x{}, manifest says {width}x{height}",
                path.display(),
                img.width(),
                img.height()
            )));
        }
        img.into_raw()
    };
    Ok(data)
}

fn write_color(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if path.extension().and_then(|e| e.to_str()) == Some("ppm") {
        let mut out = Vec::with_capacity(20 + rgb.len());
        out.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
        out.extend_from_slice(rgb);
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    } else {
        let img = image::RgbImage::from_raw(width as u32, height as u32, rgb.to_vec())
            .ok_or_else(|| Error::Contract("color buffer size mismatch".into()))?;
        img.save(path).map_err(|e| Error::Data(format!("{}: cannot write image: {e}", path.display())))
    }
}

fn read_ppm(path: &Path, width: usize, height: usize) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let header_err = || Error::Data(format!("{}: invalid ppm header", path.display()));
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
            return Err(header_err());
        }
        let t = String::from_utf8_lossy(&raw[start..pos]).into_owned();
        pos += 1;
        Ok(t)
    };
    if token(&raw)? != "P6" {
        return Err(header_err());
    }
    let w: usize = token(&raw)?.parse().map_err(|_| header_err())?;
    let h: usize = token(&raw)?.parse().map_err(|_| header_err())?;
    let maxval: usize = token(&raw)?.parse().map_err(|_| header_err())?;
    if (w, h) != (width, height) || maxval != 255 {
        return Err(Error::Data(format!(
            "{}: ppm is {w}x{h} maxval {maxval}, expected {width}x{height} maxval 255",
            path.display()
        )));
    }
    let data = &raw[pos..];
    if data.len() != w * h * 3 {
        return Err(Error::Data(format!("{}: ppm payload truncated", path.display())));
    }
    Ok(data.to_vec())
}

/// Loads a dataset directory, validating resolution, depth positivity, and
/// pose orthonormality.
pub fn load_dataset(dir: &Path) -> Result<RgbdDataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (idx, entry) in manifest.frames.iter().enumerate() {
        let intr = entry
            .intrinsics
            .or(manifest.intrinsics)
            .ok_or_else(|| Error::Data(format!("frame {idx}: no intrinsics (shared or per-frame)")))?;
        let calib = CameraCalib::new(
            intr.fx,
            intr.fy,
            intr.cx,
            intr.cy,
            manifest.width,
            manifest.height,
            entry.world_from_camera,
        )
        .map_err(|e| Error::Data(format!("frame {idx}: {e}")))?;

        let color = read_color(&dir.join(&entry.color), manifest.width, manifest.height)?;
        let (dw, dh, depth) = read_pfm(&dir.join(&entry.depth))?;
        if (dw, dh) != (manifest.width, manifest.height) {
            return Err(Error::Data(format!(
                "frame {idx}: depth is {dw}x{dh}, manifest says {}x{}",
                manifest.width, manifest.height
            )));
        }
        let mask = match &entry.mask {
            Some(name) => {
                let path = dir.join(name);
                let img = image::open(&path)
                    .map_err(|e| Error::Data(format!("{}: cannot read mask: {e}", path.display())))?
                    .to_luma8();
                if (img.width() as usize, img.height() as usize) != (manifest.width, manifest.height) {
                    return Err(Error::Data(format!("frame {idx}: mask resolution mismatch")));
                }
                Some(img.into_raw().iter().map(|&v| v >= 128).collect())
            }
            None => None,
        };
        frames.push(Frame { color, depth, calib, time_index: entry.time_index, mask });
    }
    RgbdDataset::assemble(frames)
}

/// Writes a dataset directory in the manifest format. Frame files are named
/// `frame_###.png` / `frame_###.pfm` (and `mask_###.png` when present).
pub fn save_dataset(dir: &Path, ds: &RgbdDataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.n_frames());
    for (idx, f) in ds.frames().iter().enumerate() {
        let color_name = format!("frame_{idx:03}.png");
        let depth_name = format!("frame_{idx:03}.pfm");
        write_color(&dir.join(&color_name), ds.width(), ds.height(), &f.color)?;
        write_pfm(&dir.join(&depth_name), ds.width(), ds.height(), &f.depth)?;
        let mask = match &f.mask {
            Some(m) => {
                let name = format!("mask_{idx:03}.png");
                let buf: Vec<u8> = m.iter().map(|&b| if b { 255u8 } else { 0 }).collect();
                let img = image::GrayImage::from_raw(ds.width() as u32, ds.height() as u32, buf)
                    .ok_or_else(|| Error::Contract("mask buffer size mismatch".into()))?;
                img.save(dir.join(&name))
                    .map_err(|e| Error::Data(format!("cannot write mask {name}: {e}")))?;
                Some(name)
            }
            None => None,
        };
        entries.push(FrameEntry {
            color: color_name,
            depth: depth_name,
            world_from_camera: f.calib.world_from_camera(),
            time_index: f.time_index,
            intrinsics: Some(Intrinsics { fx: f.calib.fx, fy: f.calib.fy, cx: f.calib.cx, cy: f.calib.cy }),
            mask,
        });
    }
    let manifest = Manifest { width: ds.width(), height: ds.height(), intrinsics: None, frames: entries };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Vec3;

    fn sample_dataset() -> RgbdDataset {
        let calib = CameraCalib::axis_aligned(6.0, 6.0, 3.0, 3.0, 6, 5, Vec3::new(0.1, 0.2, -0.4));
        let frames = (0..2)
            .map(|k| Frame {
                color: (0..6 * 5 * 3).map(|i| ((i * 7 + k * 31) % 256) as u8).collect(),
                depth: (0..30).map(|i| 1.5 + 0.03 * i as f32 + k as f32 * 0.2).collect(),
                calib: calib.clone(),
                time_index: k as i64 * 2,
                mask: (k == 1).then(|| (0..30).map(|i| i % 3 == 0).collect()),
            })
            .collect();
        RgbdDataset::assemble(frames).unwrap()
    }

    #[test]
    fn directory_round_trip_preserves_contents() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_dataset();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.n_frames(), 2);
        for k in 0..2 {
            assert_eq!(back.frames()[k].color, ds.frames()[k].color);
            assert_eq!(back.frames()[k].depth, ds.frames()[k].depth, "depth must be exact");
            assert_eq!(back.frames()[k].time_index, ds.frames()[k].time_index);
            assert_eq!(back.frames()[k].mask, ds.frames()[k].mask);
            assert_eq!(back.frames()[k].calib, ds.frames()[k].calib);
        }
        assert_eq!(back.content_hash(), ds.content_hash());
    }

    #[test]
    fn corrupt_rotation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_dataset();
        save_dataset(dir.path(), &ds).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap();
        // Mirror the z axis: determinant -1.
        let bad = text.replacen("[0.0,0.0,1.0,", "[0.0,0.0,-1.0,", 1);
        let bad = if bad == text {
            text.replace(
                "[\n          0.0,\n          0.0,\n          1.0,",
                "[\n          0.0,\n          0.0,\n          -1.0,",
            )
        } else {
            bad
        };
        assert_ne!(bad, text, "test fixture must alter the pose");
        std::fs::write(&path, bad).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("determinant"), "{err}");
    }

    #[test]
    fn missing_file_is_reported_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_dataset();
        save_dataset(dir.path(), &ds).unwrap();
        std::fs::remove_file(dir.path().join("frame_001.pfm")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("frame_001.pfm"), "{err}");
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_dataset();
        save_dataset(dir.path(), &ds).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap().replacen("\"width\"", "\"wdith\"", 1);
        std::fs::write(&path, text).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn ppm_fallback_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        let path = dir.path().join("frame.ppm");
        write_color(&path, 2, 2, &rgb).unwrap();
        assert_eq!(read_color(&path, 2, 2, ).unwrap(), rgb);
    }
}

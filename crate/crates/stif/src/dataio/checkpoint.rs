//! Checkpoint files: magic `STIF`, a format version, then length-prefixed
//! named sections (a JSON metadata blob plus flat f64 parameter and
//! optimizer-moment arrays). Round trips are bit-exact.

use super::hex_digest;
use crate::error::{Error, Result};
use crate::field::FieldArch;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"STIF";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam moment buffers aligned with the concatenated coarse-then-fine
/// parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSnapshot {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Full trainer state at one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: FieldArch,
    pub iteration: u64,
    pub config_hash: String,
    /// Run seed; together with the iteration this reproduces every derived
    /// random stream, so resuming continues bit-exactly.
    pub seed: u64,
    pub time_indices: Vec<i64>,
    pub times: Vec<f64>,
    pub z_near: f64,
    pub z_far: f64,
    pub coarse_params: Vec<Vec<f64>>,
    pub fine_params: Vec<Vec<f64>>,
    pub adam: AdamSnapshot,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    arch: FieldArch,
    iteration: u64,
    config_hash: String,
    seed: u64,
    time_indices: Vec<i64>,
    times: Vec<f64>,
    z_near: f64,
    z_far: f64,
    adam_step: u64,
}

impl Checkpoint {
    /// Rejects restores into a different architecture, printing both
    /// descriptors.
    pub fn ensure_arch(&self, expected: &FieldArch) -> Result<()> {
        if &self.arch != expected {
            return Err(Error::Incompatible(format!(
                "checkpoint architecture {} does not match configured {}",
                serde_json::to_string(&self.arch).unwrap_or_default(),
                serde_json::to_string(expected).unwrap_or_default(),
            )));
        }
        Ok(())
    }
}

fn push_entry(out: &mut Vec<u8>, name: &str, kind: u8, payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(kind);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let layout = ckpt.arch.param_layout();
    let expect = |params: &[Vec<f64>], what: &str| -> Result<()> {
        if params.len() != layout.len() {
            return Err(Error::Contract(format!(
                "{what}: {} arrays, architecture expects {}",
                params.len(),
                layout.len()
            )));
        }
        Ok(())
    };
    expect(&ckpt.coarse_params, "coarse params")?;
    expect(&ckpt.fine_params, "fine params")?;
    if ckpt.adam.m.len() != 2 * layout.len() || ckpt.adam.v.len() != 2 * layout.len() {
        return Err(Error::Contract("adam buffers must cover both networks".into()));
    }

    let meta = Meta {
        arch: ckpt.arch.clone(),
        iteration: ckpt.iteration,
        config_hash: ckpt.config_hash.clone(),
        seed: ckpt.seed,
        time_indices: ckpt.time_indices.clone(),
        times: ckpt.times.clone(),
        z_near: ckpt.z_near,
        z_far: ckpt.z_far,
        adam_step: ckpt.adam.step,
    };
    let meta_json =
        serde_json::to_vec(&meta).map_err(|e| Error::Data(format!("checkpoint meta: {e}")))?;

    let mut body = Vec::new();
    push_entry(&mut body, "meta", 1, &meta_json);
    for (net, params) in [("coarse", &ckpt.coarse_params), ("fine", &ckpt.fine_params)] {
        for ((name, numel), values) in layout.iter().zip(params.iter()) {
            if values.len() != *numel {
                return Err(Error::Contract(format!(
                    "{net}.{name}: {} values, architecture expects {numel}",
                    values.len()
                )));
            }
            push_entry(&mut body, &format!("{net}.{name}"), 0, &f64s_to_bytes(values));
        }
    }
    for (buf_name, buffers) in [("m", &ckpt.adam.m), ("v", &ckpt.adam.v)] {
        for (idx, values) in buffers.iter().enumerate() {
            let (net, slot) = if idx < layout.len() { ("coarse", idx) } else { ("fine", idx - layout.len()) };
            push_entry(
                &mut body,
                &format!("adam.{buf_name}.{net}.{}", layout[slot].0),
                0,
                &f64s_to_bytes(values),
            );
        }
    }

    let mut out = Vec::with_capacity(body.len() + 16);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&body);

    // Write via a temp file so a crash never leaves a truncated checkpoint
    // under the final name.
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&out).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Incompatible(format!(
                "{}: truncated checkpoint (wanted {n} bytes at offset {})",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos >= self.data.len()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { data: &data, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Incompatible(format!("{}: not a checkpoint file", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "{}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}",
            path.display()
        )));
    }

    let mut meta: Option<Meta> = None;
    let mut arrays: Vec<(String, Vec<f64>)> = Vec::new();
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let kind = r.take(1)?[0];
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?;
        match kind {
            1 if name == "meta" => {
                meta = Some(
                    serde_json::from_slice(payload)
                        .map_err(|e| Error::Incompatible(format!("{}: bad meta: {e}", path.display())))?,
                );
            }
            0 => arrays.push((name, bytes_to_f64s(payload))),
            _ => {
                return Err(Error::Incompatible(format!(
                    "{}: unknown section kind {kind} for {name}",
                    path.display()
                )))
            }
        }
    }
    let meta = meta.ok_or_else(|| Error::Incompatible(format!("{}: missing meta", path.display())))?;
    let layout = meta.arch.param_layout();

    let find = |wanted: String| -> Result<Vec<f64>> {
        arrays
            .iter()
            .find(|(n, _)| *n == wanted)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::Incompatible(format!("{}: missing array {wanted}", path.display())))
    };
    let mut coarse_params = Vec::with_capacity(layout.len());
    let mut fine_params = Vec::with_capacity(layout.len());
    let mut adam_m = Vec::with_capacity(2 * layout.len());
    let mut adam_v = Vec::with_capacity(2 * layout.len());
    for net in ["coarse", "fine"] {
        for (name, numel) in &layout {
            let values = find(format!("{net}.{name}"))?;
            if values.len() != *numel {
                return Err(Error::Incompatible(format!(
                    "{}: {net}.{name} has {} values, architecture expects {numel}",
                    path.display(),
                    values.len()
                )));
            }
            if net == "coarse" {
                coarse_params.push(values);
            } else {
                fine_params.push(values);
            }
        }
    }
    for buf in ["m", "v"] {
        for net in ["coarse", "fine"] {
            for (name, _) in &layout {
                let values = find(format!("adam.{buf}.{net}.{name}"))?;
                if buf == "m" {
                    adam_m.push(values);
                } else {
                    adam_v.push(values);
                }
            }
        }
    }

    Ok(Checkpoint {
        arch: meta.arch,
        iteration: meta.iteration,
        config_hash: meta.config_hash,
        seed: meta.seed,
        time_indices: meta.time_indices,
        times: meta.times,
        z_near: meta.z_near,
        z_far: meta.z_far,
        coarse_params,
        fine_params,
        adam: AdamSnapshot { step: meta.adam_step, m: adam_m, v: adam_v },
    })
}

/// Digest of a resolved configuration, stored in checkpoints so resumes can
/// verify they continue the same run.
pub fn config_digest(resolved_json: &str) -> String {
    let mut h = Sha256::new();
    h.update(resolved_json.as_bytes());
    hex_digest(&h.finalize())[..16].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(arch: &FieldArch) -> Checkpoint {
        let layout = arch.param_layout();
        let fill = |offset: f64| -> Vec<Vec<f64>> {
            layout
                .iter()
                .enumerate()
                .map(|(i, (_, n))| (0..*n).map(|k| offset + i as f64 + k as f64 * 0.001).collect())
                .collect()
        };
        let mut m = fill(100.0);
        m.extend(fill(200.0));
        let mut v = fill(300.0);
        v.extend(fill(400.0));
        Checkpoint {
            arch: arch.clone(),
            iteration: 42,
            config_hash: "deadbeef".into(),
            seed: 7,
            time_indices: vec![0, 3, 9],
            times: vec![-1.0, -0.333, 1.0],
            z_near: 1.9,
            z_far: 5.2,
            coarse_params: fill(0.0),
            fine_params: fill(50.0),
            adam: AdamSnapshot { step: 42, m, v },
        }
    }

    #[test]
    fn round_trip_is_bit_exact_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let ckpt = sample(&FieldArch::new(8, 2));
        save_checkpoint(&path, &ckpt).unwrap();
        let first_bytes = std::fs::read(&path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        save_checkpoint(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first_bytes);
    }

    #[test]
    fn truncated_checkpoint_errors_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_checkpoint(&path, &sample(&FieldArch::new(8, 2))).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated") || err.to_string().contains("missing"), "{err}");
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        std::fs::write(&path, b"NOPExxxx").unwrap();
        assert!(load_checkpoint(&path).is_err());

        save_checkpoint(&path, &sample(&FieldArch::new(8, 2))).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // version
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn cross_architecture_restore_prints_both() {
        let ckpt = sample(&FieldArch::new(8, 2));
        let other = FieldArch::new(16, 2);
        let err = ckpt.ensure_arch(&other).unwrap_err().to_string();
        assert!(err.contains("\"width\":8") && err.contains("\"width\":16"), "{err}");
    }
}

//! Dataset model, file formats, checkpointing, and the synthetic scene
//! generator.
//!
//! A dataset directory holds `manifest.json`, 8-bit PNG (or binary PPM) color
//! frames, and PFM depth frames in meters. Checkpoints are a little-endian
//! binary with magic `STIF`.

mod checkpoint;
mod manifest;
mod pfm;
mod toyscene;

pub use checkpoint::{config_digest, load_checkpoint, save_checkpoint, AdamSnapshot, Checkpoint, CHECKPOINT_VERSION};
pub use manifest::{load_dataset, save_dataset};
pub use pfm::{read_pfm, write_pfm, write_pfm_f64};
pub use toyscene::{gen_toy_scene, ToySceneSpec};

use crate::camera::{CameraCalib, Ray, Vec3};
use crate::error::{Error, Result};
use sha2::{Digest, Sha256};

/// Relative padding applied to the global depth range so observed surfaces
/// stay interior to `[z_near, z_far]`.
pub const DEPTH_RANGE_PADDING: f64 = 0.01;

/// One RGB-D video frame.
#[derive(Clone, Debug)]
pub struct Frame {
    /// Row-major RGB8.
    pub color: Vec<u8>,
    /// Row-major depth in meters; format-native f32.
    pub depth: Vec<f32>,
    pub calib: CameraCalib,
    /// Raw time index from the capture; strictly increasing across frames.
    pub time_index: i64,
    /// Optional exact disocclusion mask (held-out datasets), row-major.
    pub mask: Option<Vec<bool>>,
}

/// A posed RGB-D video with derived quantities: normalized times, the padded
/// global depth range, and the world-space bounding box of all view frusta.
#[derive(Clone, Debug)]
pub struct RgbdDataset {
    frames: Vec<Frame>,
    width: usize,
    height: usize,
    times: Vec<f64>,
    z_near: f64,
    z_far: f64,
    world_min: [f64; 3],
    world_max: [f64; 3],
}

impl RgbdDataset {
    /// Validates frames and computes the derived quantities.
    pub fn assemble(frames: Vec<Frame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Data("dataset has no frames".into()));
        }
        let width = frames[0].calib.width;
        let height = frames[0].calib.height;
        let mut z_min = f64::INFINITY;
        let mut z_max = f64::NEG_INFINITY;
        for (idx, f) in frames.iter().enumerate() {
            if f.calib.width != width || f.calib.height != height {
                return Err(Error::Data(format!(
                    "frame {idx}: resolution {}x{} differs from {}x{}",
                    f.calib.width, f.calib.height, width, height
                )));
            }
            if f.color.len() != width * height * 3 {
                return Err(Error::Data(format!("frame {idx}: color buffer size mismatch")));
            }
            if f.depth.len() != width * height {
                return Err(Error::Data(format!("frame {idx}: depth buffer size mismatch")));
            }
            if let Some(m) = &f.mask {
                if m.len() != width * height {
                    return Err(Error::Data(format!("frame {idx}: mask size mismatch")));
                }
            }
            for (k, &d) in f.depth.iter().enumerate() {
                if !(d.is_finite() && d > 0.0) {
                    return Err(Error::Data(format!(
                        "frame {idx}: non-positive depth {d} at pixel {k}"
                    )));
                }
                z_min = z_min.min(d as f64);
                z_max = z_max.max(d as f64);
            }
            if idx > 0 && frames[idx - 1].time_index >= f.time_index {
                return Err(Error::Data(format!(
                    "time indices must strictly increase: {} then {}",
                    frames[idx - 1].time_index,
                    f.time_index
                )));
            }
        }

        let z_near = z_min * (1.0 - DEPTH_RANGE_PADDING);
        let z_far = z_max * (1.0 + DEPTH_RANGE_PADDING);

        // Affine map of raw indices onto [-1, 1]; a single frame maps to 0.
        let first = frames[0].time_index as f64;
        let last = frames[frames.len() - 1].time_index as f64;
        let times: Vec<f64> = frames
            .iter()
            .map(|f| {
                if last > first {
                    2.0 * (f.time_index as f64 - first) / (last - first) - 1.0
                } else {
                    0.0
                }
            })
            .collect();

        // Frustum corners of every frame at the padded depth bounds.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for f in &frames {
            for (u, v) in [
                (0.0, 0.0),
                (width as f64, 0.0),
                (0.0, height as f64),
                (width as f64, height as f64),
            ] {
                let ray = f.calib.ray_for_pixel(u, v, 0.0)?;
                for s in [z_near, z_far] {
                    let p = ray.at(s);
                    for (axis, val) in [p.x, p.y, p.z].into_iter().enumerate() {
                        lo[axis] = lo[axis].min(val);
                        hi[axis] = hi[axis].max(val);
                    }
                }
            }
        }

        Ok(RgbdDataset { frames, width, height, times, z_near, z_far, world_min: lo, world_max: hi })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Normalized time of a frame, in [-1, 1].
    pub fn time(&self, frame: usize) -> f64 {
        self.times[frame]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn z_near(&self) -> f64 {
        self.z_near
    }

    pub fn z_far(&self) -> f64 {
        self.z_far
    }

    pub fn world_min(&self) -> [f64; 3] {
        self.world_min
    }

    pub fn world_max(&self) -> [f64; 3] {
        self.world_max
    }

    /// Color at integer pixel, as floats in [0, 1].
    pub fn color_at(&self, frame: usize, i: usize, j: usize) -> [f64; 3] {
        let base = (j * self.width + i) * 3;
        let c = &self.frames[frame].color;
        [c[base] as f64 / 255.0, c[base + 1] as f64 / 255.0, c[base + 2] as f64 / 255.0]
    }

    /// Depth at integer pixel, meters.
    pub fn depth_at(&self, frame: usize, i: usize, j: usize) -> f64 {
        self.frames[frame].depth[j * self.width + i] as f64
    }

    /// Ray through the center of pixel `(i, j)` of a frame, carrying the
    /// frame's normalized time.
    pub fn ray_for(&self, frame: usize, i: usize, j: usize) -> Result<Ray> {
        self.frames[frame].calib.ray_for_pixel_center(i, j, self.times[frame])
    }

    /// Content digest used to invalidate cached derived data.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        for f in &self.frames {
            h.update(f.time_index.to_le_bytes());
            h.update(&f.color);
            for d in &f.depth {
                h.update(d.to_le_bytes());
            }
            for row in f.calib.world_from_camera() {
                for v in row {
                    h.update(v.to_le_bytes());
                }
            }
            for v in [f.calib.fx, f.calib.fy, f.calib.cx, f.calib.cy] {
                h.update(v.to_le_bytes());
            }
        }
        hex_digest(&h.finalize())
    }

    /// World AABB corners as vectors.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        (
            Vec3::new(self.world_min[0], self.world_min[1], self.world_min[2]),
            Vec3::new(self.world_max[0], self.world_max[1], self.world_max[2]),
        )
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

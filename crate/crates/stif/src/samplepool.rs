//! Off-surface sample pool for the static-scene loss.
//!
//! The pool is the union of stratified sample positions along (strided) rays
//! of all frames, minus every point that lies within the surface margin of
//! any frame's observed depth. Batches drawn from it pair each point's
//! provenance time with a second, rejection-tested time.

use crate::camera::Vec3;
use crate::dataio::RgbdDataset;
use crate::error::{Error, Result};
use crate::losses::empty_space_margin;
use crate::render::{stratified_samples, RenderConfig};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const POOL_MAGIC: [u8; 4] = *b"STPL";
const POOL_VERSION: u32 = 1;

/// Pool construction knobs.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    /// Take every n-th pixel per axis when seeding rays.
    pub pixel_stride: usize,
    /// Take every n-th frame.
    pub frame_stride: usize,
    /// Jitter radius as a fraction of the depth range.
    pub jitter_frac: f64,
    /// Re-test the jittered point against its provenance time as well.
    pub retest_provenance_time: bool,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig { pixel_stride: 4, frame_stride: 1, jitter_frac: 0.01, retest_provenance_time: false }
    }
}

/// A stored sample position with its provenance.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct PoolPoint {
    pub position: Vec3,
    pub frame: usize,
    pub pixel: (u32, u32),
}

/// World points far from every observed surface, with draw metadata.
#[derive(Clone, Debug)]
pub struct StaticSamplePool {
    points: Vec<PoolPoint>,
    epsilon: f64,
    jitter_radius: f64,
    dataset_hash: String,
}

/// A drawn static batch: `(jittered position, t, t')` triples plus the count
/// of draws dropped after exhausting rejection retries.
#[derive(Clone, Debug)]
pub struct StaticBatch {
    pub samples: Vec<(Vec3, f64, f64)>,
    pub dropped: usize,
}

/// True iff the point projects into the frame's view and its camera depth is
/// within `epsilon` of the observed depth at the nearest pixel. Points
/// outside the frustum are unobserved, hence not near a visible surface.
pub fn near_surface(x: Vec3, frame: usize, dataset: &RgbdDataset, epsilon: f64) -> bool {
    let calib = &dataset.frames()[frame].calib;
    let proj = calib.project(x);
    if !proj.in_frustum {
        return false;
    }
    let (i, j) = calib.nearest_pixel(&proj);
    (proj.z - dataset.depth_at(frame, i, j)).abs() <= epsilon
}

impl StaticSamplePool {
    /// Builds the pool from strided rays of all frames, excluding points near
    /// any frame's surface. Deterministic given the seed.
    pub fn build(
        dataset: &RgbdDataset,
        render_cfg: &RenderConfig,
        pool_cfg: &PoolConfig,
        seed: u64,
    ) -> Result<Self> {
        if pool_cfg.pixel_stride == 0 || pool_cfg.frame_stride == 0 {
            return Err(Error::Config("pool strides must be >= 1".into()));
        }
        let epsilon = empty_space_margin(render_cfg.z_near, render_cfg.z_far);
        let jitter_radius = pool_cfg.jitter_frac * (render_cfg.z_far - render_cfg.z_near);

        let mut points = Vec::new();
        for frame in (0..dataset.n_frames()).step_by(pool_cfg.frame_stride) {
            for j in (0..dataset.height()).step_by(pool_cfg.pixel_stride) {
                for i in (0..dataset.width()).step_by(pool_cfg.pixel_stride) {
                    let ray = dataset.ray_for(frame, i, j)?;
                    let mut r = rng::stream(seed, "pool", &[frame as u64, (j * dataset.width() + i) as u64]);
                    for s in stratified_samples(render_cfg, &mut r) {
                        let x = ray.at(s);
                        let near_any =
                            (0..dataset.n_frames()).any(|f| near_surface(x, f, dataset, epsilon));
                        if !near_any {
                            points.push(PoolPoint { position: x, frame, pixel: (i as u32, j as u32) });
                        }
                    }
                }
            }
        }
        // Union semantics: identical positions from different rays collapse.
        points.sort_by(|a, b| {
            let ka = (a.position.x.to_bits(), a.position.y.to_bits(), a.position.z.to_bits());
            let kb = (b.position.x.to_bits(), b.position.y.to_bits(), b.position.z.to_bits());
            ka.cmp(&kb).then(a.frame.cmp(&b.frame))
        });
        points.dedup_by(|a, b| a.position == b.position);

        if points.is_empty() {
            return Err(Error::Config(format!(
                "static sample pool is empty: every candidate was within epsilon = {epsilon} of a surface"
            )));
        }
        Ok(StaticSamplePool { points, epsilon, jitter_radius, dataset_hash: dataset.content_hash() })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn jitter_radius(&self) -> f64 {
        self.jitter_radius
    }

    pub fn points(&self) -> &[PoolPoint] {
        &self.points
    }

    /// Draws `n` jittered samples without replacement (cycling if `n`
    /// exceeds the pool), pairing each with a rejection-tested second time.
    /// A draw whose 16 candidate times all fail is dropped and redrawn.
    pub fn draw(
        &self,
        n: usize,
        dataset: &RgbdDataset,
        pool_cfg: &PoolConfig,
        rng: &mut impl Rng,
    ) -> Result<StaticBatch> {
        if dataset.n_frames() < 2 {
            return Err(Error::Contract("static batches need at least two frames".into()));
        }
        // Partial Fisher-Yates over pool indices: without replacement until
        // the pool is exhausted, then a fresh pass.
        let mut order: Vec<u32> = (0..self.points.len() as u32).collect();
        let mut cursor = 0usize;
        let mut take_index = |rng: &mut dyn rand::RngCore| -> usize {
            if cursor == order.len() {
                cursor = 0;
            }
            let swap_with = cursor + (rng.next_u64() as usize % (order.len() - cursor));
            order.swap(cursor, swap_with);
            let idx = order[cursor] as usize;
            cursor += 1;
            idx
        };

        let mut samples = Vec::with_capacity(n);
        let mut dropped = 0usize;
        let mut guard = 0usize;
        while samples.len() < n {
            guard += 1;
            if guard > 64 * n + 1024 {
                return Err(Error::Contract(
                    "static batch rejection never converges; epsilon or jitter too aggressive".into(),
                ));
            }
            let point = &self.points[take_index(rng)];
            let jitter = Vec3::new(
                rng.gen_range(-1.0..=1.0) * self.jitter_radius,
                rng.gen_range(-1.0..=1.0) * self.jitter_radius,
                rng.gen_range(-1.0..=1.0) * self.jitter_radius,
            );
            let x = point.position + jitter;
            if pool_cfg.retest_provenance_time && near_surface(x, point.frame, dataset, self.epsilon) {
                dropped += 1;
                continue;
            }
            let t = dataset.time(point.frame);
            let mut chosen = None;
            for _ in 0..16 {
                let candidate = rng.gen_range(0..dataset.n_frames() - 1);
                let other = if candidate >= point.frame { candidate + 1 } else { candidate };
                if !near_surface(x, other, dataset, self.epsilon) {
                    chosen = Some(dataset.time(other));
                    break;
                }
            }
            match chosen {
                Some(t2) => samples.push((x, t, t2)),
                None => dropped += 1,
            }
        }
        Ok(StaticBatch { samples, dropped })
    }

    /// Versioned binary cache, invalidated by the dataset content hash.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(32 + self.points.len() * 36);
        out.extend_from_slice(&POOL_MAGIC);
        out.extend_from_slice(&POOL_VERSION.to_le_bytes());
        let hash = self.dataset_hash.as_bytes();
        out.extend_from_slice(&(hash.len() as u32).to_le_bytes());
        out.extend_from_slice(hash);
        out.extend_from_slice(&self.epsilon.to_le_bytes());
        out.extend_from_slice(&self.jitter_radius.to_le_bytes());
        out.extend_from_slice(&(self.points.len() as u64).to_le_bytes());
        for p in &self.points {
            for v in [p.position.x, p.position.y, p.position.z] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(p.frame as u32).to_le_bytes());
            out.extend_from_slice(&p.pixel.0.to_le_bytes());
            out.extend_from_slice(&p.pixel.1.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load_cache(path: &Path, dataset: &RgbdDataset) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let fail = |what: &str| Error::Incompatible(format!("{}: {what}", path.display()));
        if data.len() < 16 || data[..4] != POOL_MAGIC {
            return Err(fail("not a pool cache"));
        }
        let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
        if version != POOL_VERSION {
            return Err(fail(&format!("cache version {version}, expected {POOL_VERSION}")));
        }
        let hash_len = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
        let mut pos = 12;
        let stored_hash = String::from_utf8_lossy(&data[pos..pos + hash_len]).into_owned();
        pos += hash_len;
        if stored_hash != dataset.content_hash() {
            return Err(fail("cache was built from a different dataset"));
        }
        let f64_at = |p: usize| f64::from_le_bytes(data[p..p + 8].try_into().unwrap());
        let epsilon = f64_at(pos);
        let jitter_radius = f64_at(pos + 8);
        let count = u64::from_le_bytes(data[pos + 16..pos + 24].try_into().unwrap()) as usize;
        pos += 24;
        if data.len() != pos + count * 36 {
            return Err(fail("truncated pool cache"));
        }
        let mut points = Vec::with_capacity(count);
        for k in 0..count {
            let base = pos + k * 36;
            let x = f64::from_le_bytes(data[base..base + 8].try_into().unwrap());
            let y = f64::from_le_bytes(data[base + 8..base + 16].try_into().unwrap());
            let z = f64::from_le_bytes(data[base + 16..base + 24].try_into().unwrap());
            let frame = u32::from_le_bytes(data[base + 24..base + 28].try_into().unwrap()) as usize;
            let px = u32::from_le_bytes(data[base + 28..base + 32].try_into().unwrap());
            let py = u32::from_le_bytes(data[base + 32..base + 36].try_into().unwrap());
            points.push(PoolPoint { position: Vec3::new(x, y, z), frame, pixel: (px, py) });
        }
        Ok(StaticSamplePool { points, epsilon, jitter_radius, dataset_hash: stored_hash })
    }
}

//! The four training losses and their weighted total.
//!
//! Color, depth, and empty-space losses operate on the composited ray batch
//! and average over rays and over the coarse/fine network pair. The static
//! loss compares field outputs at the same location and two distinct times.
//! Setting all three auxiliary weights to zero reproduces the time-only
//! baseline trained with the color loss alone.

use crate::autodiff::{Tape, Value};
use crate::camera::Ray;
use crate::error::{Error, Result};
use crate::field::{FieldLeaves, FieldNetwork};
use crate::render::CompositedBatch;
use serde::{Deserialize, Serialize};

/// Fraction of the depth range used as the empty-space margin:
/// `epsilon = 0.05 * (s_far - s_near)`.
pub const EMPTY_MARGIN_FRAC: f64 = 0.05;

/// Default depth floor for the inverse-depth loss, as a fraction of z_far.
pub const DEPTH_FLOOR_FRAC: f64 = 1e-3;

/// Margin below observed surfaces within which density is penalized.
pub fn empty_space_margin(z_near: f64, z_far: f64) -> f64 {
    EMPTY_MARGIN_FRAC * (z_far - z_near)
}

/// Weights of the total loss `L = L_color + alpha L_depth + beta L_empty +
/// gamma L_static`, plus the density-term scale inside the static loss.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Relative weight of the density gap against the color gap in the
    /// static loss.
    pub sigma_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 100.0, gamma: 10.0, sigma_scale: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 || self.sigma_scale < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A batch of rays from one source frame with their ground-truth colors and
/// depths.
#[derive(Clone, Debug)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub target_colors: Vec<[f64; 3]>,
    pub target_depths: Vec<f64>,
    pub frame_index: usize,
}

impl RayBatch {
    pub fn validate(&self) -> Result<()> {
        if self.rays.len() != self.target_colors.len() || self.rays.len() != self.target_depths.len() {
            return Err(Error::Contract("ray batch arrays must have equal lengths".into()));
        }
        if self.target_depths.iter().any(|d| *d <= 0.0) {
            return Err(Error::Contract("ground-truth depths must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

fn per_network_mean(tape: &mut Tape, sums: [Value; 2], count: usize) -> Result<Value> {
    let both = tape.add(sums[0], sums[1])?;
    tape.scale(both, 1.0 / (2.0 * count as f64))
}

/// Mean over rays and networks of the squared color error.
pub fn color_loss(
    tape: &mut Tape,
    coarse: &CompositedBatch,
    fine: &CompositedBatch,
    batch: &RayBatch,
) -> Result<Value> {
    batch.validate()?;
    let r = batch.len();
    if coarse.n_rays != r || fine.n_rays != r {
        return Err(Error::Contract(format!(
            "result batches ({}, {}) do not match ray batch {r}",
            coarse.n_rays, fine.n_rays
        )));
    }
    let flat: Vec<f64> = batch.target_colors.iter().flatten().copied().collect();
    let target = tape.constant(vec![r, 3], flat)?;
    let mut sums = Vec::with_capacity(2);
    for net in [coarse, fine] {
        let diff = tape.sub(net.color, target)?;
        let sq = tape.square(diff)?;
        sums.push(tape.sum(sq)?);
    }
    per_network_mean(tape, [sums[0], sums[1]], r)
}

/// Mean over rays and networks of the squared inverse-depth error.
/// Predicted depths are clamped below at `d_floor` so an all-empty ray
/// (composited depth 0) keeps the loss finite.
pub fn depth_loss(
    tape: &mut Tape,
    coarse: &CompositedBatch,
    fine: &CompositedBatch,
    batch: &RayBatch,
    d_floor: f64,
) -> Result<Value> {
    batch.validate()?;
    if d_floor <= 0.0 {
        return Err(Error::Config(format!("d_floor must be positive, got {d_floor}")));
    }
    let r = batch.len();
    let inv_target: Vec<f64> = batch.target_depths.iter().map(|d| 1.0 / d).collect();
    let target = tape.constant(vec![r, 1], inv_target)?;
    let floor = tape.constant(vec![r, 1], vec![d_floor; r])?;
    let mut sums = Vec::with_capacity(2);
    for net in [coarse, fine] {
        // max(depth, floor) = relu(depth - floor) + floor
        let shifted = tape.sub(net.depth, floor)?;
        let relu = tape.relu(shifted)?;
        let clamped = tape.add(relu, floor)?;
        let inv = tape.reciprocal(clamped)?;
        let diff = tape.sub(inv, target)?;
        let sq = tape.square(diff)?;
        sums.push(tape.sum(sq)?);
    }
    per_network_mean(tape, [sums[0], sums[1]], r)
}

/// Mean over rays and networks of the pre-surface density quadrature
/// `sum_{i : s_i < D(r) - epsilon} sigma_i delta_i`, where `D(r)` is the
/// input depth for the ray's pixel.
pub fn empty_space_loss(
    tape: &mut Tape,
    coarse: &CompositedBatch,
    fine: &CompositedBatch,
    batch: &RayBatch,
    epsilon: f64,
) -> Result<Value> {
    batch.validate()?;
    let r = batch.len();
    let mut sums = Vec::with_capacity(2);
    for net in [coarse, fine] {
        let n = net.n_samples;
        let s = net.sample_depths.values();
        let d = net.deltas.values();
        let mut mask = vec![0.0; r * n];
        for ray in 0..r {
            let bound = batch.target_depths[ray] - epsilon;
            for i in 0..n {
                if s[ray * n + i] < bound {
                    mask[ray * n + i] = d[ray * n + i];
                }
            }
        }
        let mask_c = tape.constant(vec![r, n], mask)?;
        let masked = tape.mul(net.sigma, mask_c)?;
        sums.push(tape.sum(masked)?);
    }
    per_network_mean(tape, [sums[0], sums[1]], r)
}

/// Field outputs at a batch of static-loss sample pairs, for one network:
/// row-aligned evaluations at `(x, t)` and `(x, t')`.
pub struct StaticBatchEval {
    pub color_a: Value,
    pub color_b: Value,
    pub sigma_a: Value,
    pub sigma_b: Value,
    pub n: usize,
}

/// Evaluates one network at the sample pairs `(x, t)` and `(x, t')` in a
/// single forward pass, keeping gradients flowing to both evaluations.
pub fn eval_static_on_tape(
    tape: &mut Tape,
    net: &FieldNetwork,
    leaves: &FieldLeaves,
    samples: &[(crate::camera::Vec3, f64, f64)],
) -> Result<StaticBatchEval> {
    let n = samples.len();
    let mut points = Vec::with_capacity(2 * n);
    let mut times = Vec::with_capacity(2 * n);
    for (x, t, _) in samples {
        points.push(*x);
        times.push(*t);
    }
    for (x, _, t2) in samples {
        points.push(*x);
        times.push(*t2);
    }
    let encoded = net.encode_inputs(&points, &times)?;
    let enc = tape.leaf(&encoded);
    let (color, sigma) = net.forward_on_tape(tape, leaves, enc)?;
    Ok(StaticBatchEval {
        color_a: tape.slice(color, 0, 0, n)?,
        color_b: tape.slice(color, 0, n, 2 * n)?,
        sigma_a: tape.slice(sigma, 0, 0, n)?,
        sigma_b: tape.slice(sigma, 0, n, 2 * n)?,
        n,
    })
}

/// Mean over samples and networks of
/// `||c(x,t) - c(x,t')||^2 + sigma_scale * (sigma(x,t) - sigma(x,t'))^2`.
pub fn static_loss(
    tape: &mut Tape,
    coarse: &StaticBatchEval,
    fine: &StaticBatchEval,
    sigma_scale: f64,
) -> Result<Value> {
    if coarse.n != fine.n || coarse.n == 0 {
        return Err(Error::Contract(format!(
            "static batches must be equal and non-empty, got {} and {}",
            coarse.n, fine.n
        )));
    }
    let mut sums = Vec::with_capacity(2);
    for net in [coarse, fine] {
        let cdiff = tape.sub(net.color_a, net.color_b)?;
        let csq = tape.square(cdiff)?;
        let csum = tape.sum(csq)?;
        let sdiff = tape.sub(net.sigma_a, net.sigma_b)?;
        let ssq = tape.square(sdiff)?;
        let ssum = tape.sum(ssq)?;
        let scaled = tape.scale(ssum, sigma_scale)?;
        sums.push(tape.add(csum, scaled)?);
    }
    per_network_mean(tape, [sums[0], sums[1]], coarse.n)
}

/// Per-step loss components as plain numbers.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub color: f64,
    pub depth: f64,
    pub empty: f64,
    pub static_scene: f64,
    pub total: f64,
}

impl LossValues {
    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            (self.color, "color loss"),
            (self.depth, "depth loss"),
            (self.empty, "empty-space loss"),
            (self.static_scene, "static loss"),
            (self.total, "total loss"),
        ]
        .into_iter()
        .find(|(v, _)| !v.is_finite())
        .map(|(_, name)| name)
    }
}

/// Weighted total of the component values:
/// `L = color + alpha depth + beta empty + gamma static`.
pub fn total_of(color: f64, depth: f64, empty: f64, static_scene: f64, w: &LossWeights) -> f64 {
    color + w.alpha * depth + w.beta * empty + w.gamma * static_scene
}

/// Tape-level weighted total; the returned scalar is the backward root.
/// Errors if any part is non-finite, naming the offending loss.
pub fn total_loss(
    tape: &mut Tape,
    color: Value,
    depth: Value,
    empty: Value,
    static_scene: Option<Value>,
    weights: &LossWeights,
) -> Result<Value> {
    let parts = [
        (color, "color loss"),
        (depth, "depth loss"),
        (empty, "empty-space loss"),
    ];
    for (v, name) in parts {
        if !tape.scalar_value(v).is_finite() {
            return Err(Error::NonFinite { component: name.into(), iteration: 0 });
        }
    }
    if let Some(s) = static_scene {
        if !tape.scalar_value(s).is_finite() {
            return Err(Error::NonFinite { component: "static loss".into(), iteration: 0 });
        }
    }
    let ad = tape.scale(depth, weights.alpha)?;
    let be = tape.scale(empty, weights.beta)?;
    let mut total = tape.add(color, ad)?;
    total = tape.add(total, be)?;
    if let Some(s) = static_scene {
        let gs = tape.scale(s, weights.gamma)?;
        total = tape.add(total, gs)?;
    }
    Ok(total)
}

//! Discrete volume rendering.
//!
//! Rays are sampled stratified-uniformly in inverse depth, evaluated through
//! the field, and composited with the usual quadrature: per-interval opacity
//! `alpha_i = 1 - exp(-sigma_i * delta_i)`, transmittance
//! `T_i = prod_{j<i} (1 - alpha_j)`, weights `w_i = T_i * alpha_i`, color
//! `sum w_i c_i` and depth `sum w_i s_i`. A second fine pass re-samples
//! proportionally to the coarse weights and evaluates the merged depths. The
//! last interval is closed at the far bound, so composited depth stays within
//! the configured range; rays that exit with residual transmittance
//! composite against black.

use crate::autodiff::{Tape, Tensor, Value};
use crate::camera::Ray;
use crate::error::{Error, Result};
use crate::field::SceneField;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Weight floor added to coarse weights before building the resampling CDF,
/// so all-zero weights degrade to uniform sampling.
pub const ETA_FLOOR: f64 = 1e-5;

/// Sampling configuration for one render pass.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Near depth bound in meters.
    pub z_near: f64,
    /// Far depth bound in meters.
    pub z_far: f64,
    pub stratified_jitter: bool,
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_near > 0.0 && self.z_near < self.z_far) {
            return Err(Error::Config(format!(
                "need 0 < z_near < z_far, got [{}, {}]",
                self.z_near, self.z_far
            )));
        }
        if self.n_coarse < 2 {
            return Err(Error::Config(format!("n_coarse must be >= 2, got {}", self.n_coarse)));
        }
        Ok(())
    }
}

/// Everything computed while compositing one ray.
#[derive(Clone, Debug)]
pub struct RenderResult {
    pub depths: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub deltas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub transmittances: Vec<f64>,
    pub weights: Vec<f64>,
    /// Composited color.
    pub color: [f64; 3],
    /// Composited depth.
    pub depth: f64,
}

impl RenderResult {
    /// Transmittance monotonicity and the weight-sum bound; checked on every
    /// composited ray.
    fn check_invariants(&self) -> Result<()> {
        if (self.transmittances[0] - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("T_1 must be 1, got {}", self.transmittances[0])));
        }
        for pair in self.transmittances.windows(2) {
            if pair[1] > pair[0] + 1e-12 {
                return Err(Error::Contract(format!(
                    "transmittance increased: {} -> {}",
                    pair[0], pair[1]
                )));
            }
        }
        let total: f64 = self.weights.iter().sum();
        if total > 1.0 + 1e-9 {
            return Err(Error::Contract(format!("weight sum {total} exceeds 1")));
        }
        if self.weights.iter().any(|w| !(0.0..=1.0 + 1e-12).contains(w)) {
            return Err(Error::Contract("weight outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Depths stratified uniformly in inverse depth over `[z_near, z_far]`,
/// returned in increasing depth order. Without jitter, bin midpoints.
pub fn stratified_samples(cfg: &RenderConfig, rng: &mut impl Rng) -> Vec<f64> {
    let n = cfg.n_coarse;
    let inv_near = 1.0 / cfg.z_near;
    let inv_far = 1.0 / cfg.z_far;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let xi = if cfg.stratified_jitter { rng.gen_range(0.0..1.0) } else { 0.5 };
        let u = (i as f64 + xi) / n as f64;
        let inv = inv_near + u * (inv_far - inv_near);
        out.push(1.0 / inv);
    }
    out
}

fn validate_composite_inputs(depths: &[f64], sigmas: &[f64], colors: &[[f64; 3]], s_far: f64) -> Result<()> {
    if depths.is_empty() || depths.len() != sigmas.len() || depths.len() != colors.len() {
        return Err(Error::Contract(format!(
            "composite arrays must be equal non-zero lengths: {} depths, {} sigmas, {} colors",
            depths.len(),
            sigmas.len(),
            colors.len()
        )));
    }
    for pair in depths.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Contract(format!(
                "sample depths must strictly increase: {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if *depths.last().unwrap() > s_far {
        return Err(Error::Contract(format!(
            "last sample {} beyond far bound {s_far}",
            depths.last().unwrap()
        )));
    }
    if sigmas.iter().any(|s| *s < 0.0 || !s.is_finite()) {
        return Err(Error::Contract("densities must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Composites one ray from per-sample depths, densities, and colors.
pub fn composite(depths: &[f64], sigmas: &[f64], colors: &[[f64; 3]], s_far: f64) -> Result<RenderResult> {
    validate_composite_inputs(depths, sigmas, colors, s_far)?;
    let n = depths.len();
    let mut deltas = Vec::with_capacity(n);
    for i in 0..n - 1 {
        deltas.push(depths[i + 1] - depths[i]);
    }
    deltas.push(s_far - depths[n - 1]);

    let mut transmittances = Vec::with_capacity(n);
    let mut alphas = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut accumulated = 0.0f64; // integral of sigma so far
    for i in 0..n {
        let t = (-accumulated).exp();
        let alpha = 1.0 - (-sigmas[i] * deltas[i]).exp();
        let w = t * alpha;
        transmittances.push(t);
        alphas.push(alpha);
        weights.push(w);
        for (c, ci) in color.iter_mut().zip(&colors[i]) {
            *c += w * ci;
        }
        depth += w * depths[i];
        accumulated += sigmas[i] * deltas[i];
    }

    let result = RenderResult {
        depths: depths.to_vec(),
        sigmas: sigmas.to_vec(),
        colors: colors.to_vec(),
        deltas,
        alphas,
        transmittances,
        weights,
        color,
        depth,
    };
    result.check_invariants()?;
    Ok(result)
}

/// Draws `n_fine` depths by inverse-CDF sampling of the piecewise-constant
/// density proportional to `w_i + ETA_FLOOR` over the coarse bins. Bin edges
/// are the midpoints between coarse depths, closed at the depth bounds.
/// Output is sorted.
pub fn hierarchical_resample(
    weights: &[f64],
    depths: &[f64],
    n_fine: usize,
    z_near: f64,
    z_far: f64,
    rng: &mut impl Rng,
    jitter: bool,
) -> Result<Vec<f64>> {
    let n = weights.len();
    if n < 2 || depths.len() != n {
        return Err(Error::Contract(format!(
            "resampling needs >= 2 equal-length bins, got {n} weights and {} depths",
            depths.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Contract("resampling weights must be nonnegative".into()));
    }
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(z_near);
    for pair in depths.windows(2) {
        edges.push(0.5 * (pair[0] + pair[1]));
    }
    edges.push(z_far);

    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    let mut total = 0.0;
    for w in weights {
        total += w + ETA_FLOOR;
        cdf.push(total);
    }
    for c in cdf.iter_mut() {
        *c /= total;
    }

    let mut out = Vec::with_capacity(n_fine);
    for k in 0..n_fine {
        let xi = if jitter { rng.gen_range(0.0..1.0) } else { 0.5 };
        let u = (k as f64 + xi) / n_fine as f64;
        // Find the bin with cdf[b] <= u < cdf[b+1].
        let b = match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(idx) => idx.min(n - 1),
            Err(idx) => idx - 1,
        }
        .min(n - 1);
        let span = cdf[b + 1] - cdf[b];
        let frac = if span > 0.0 { (u - cdf[b]) / span } else { 0.5 };
        out.push(edges[b] + frac * (edges[b + 1] - edges[b]));
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(out)
}

/// Merges two sorted depth lists, keeping every entry. Exact ties are nudged
/// upward by a depth-scaled epsilon so the result is strictly increasing and
/// every ray keeps the same sample count.
pub fn merge_depths(a: &[f64], b: &[f64], z_far: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = if j >= b.len() || (i < a.len() && a[i] <= b[j]) {
            let v = a[i];
            i += 1;
            v
        } else {
            let v = b[j];
            j += 1;
            v
        };
        out.push(next);
    }
    let eps = 1e-12 * z_far;
    for k in 1..out.len() {
        if out[k] <= out[k - 1] {
            out[k] = out[k - 1] + eps;
        }
    }
    out
}

/// Renders one ray through a coarse/fine field pair: a stratified coarse pass,
/// then a fine pass over the coarse depths merged with weight-guided resamples.
pub fn render_ray<C: SceneField, F: SceneField>(
    coarse_field: &C,
    fine_field: &F,
    ray: &Ray,
    cfg: &RenderConfig,
    rng: &mut impl Rng,
) -> Result<(RenderResult, RenderResult)> {
    cfg.validate()?;
    let coarse_depths = stratified_samples(cfg, rng);
    let coarse = render_at_depths(coarse_field, ray, &coarse_depths, cfg.z_far)?;

    let resampled = hierarchical_resample(
        &coarse.weights,
        &coarse_depths,
        cfg.n_fine,
        cfg.z_near,
        cfg.z_far,
        rng,
        cfg.stratified_jitter,
    )?;
    let merged = merge_depths(&coarse_depths, &resampled, cfg.z_far);
    let fine = render_at_depths(fine_field, ray, &merged, cfg.z_far)?;
    Ok((coarse, fine))
}

/// Queries a field along a ray at fixed depths and composites the result.
pub fn render_at_depths<F: SceneField>(
    field: &F,
    ray: &Ray,
    depths: &[f64],
    s_far: f64,
) -> Result<RenderResult> {
    let points: Vec<_> = depths.iter().map(|&s| ray.at(s)).collect();
    let times = vec![ray.t; depths.len()];
    let (colors, sigmas) = field.query(&points, &times)?;
    composite(depths, &sigmas, &colors, s_far)
}

// ── Batched differentiable compositor ───────────────────────────────

/// Composited quantities for a batch of rays, live on a tape.
pub struct CompositedBatch {
    /// `[R, 3]` composited colors.
    pub color: Value,
    /// `[R, 1]` composited depths.
    pub depth: Value,
    /// `[R, N]` per-sample densities (pre-compositing).
    pub sigma: Value,
    /// `[R, N]` per-sample weights.
    pub weights: Value,
    /// Constant `[R, N]` sample depths.
    pub sample_depths: Tensor,
    /// Constant `[R, N]` interval lengths.
    pub deltas: Tensor,
    pub n_rays: usize,
    pub n_samples: usize,
}

/// Builds the interval lengths for a batch of per-ray sample depths.
pub fn batch_deltas(sample_depths: &Tensor, s_far: f64) -> Tensor {
    let [r, n] = [sample_depths.shape()[0], sample_depths.shape()[1]];
    let mut deltas = vec![0.0; r * n];
    let d = sample_depths.values();
    for ray in 0..r {
        let row = &d[ray * n..(ray + 1) * n];
        let out = &mut deltas[ray * n..(ray + 1) * n];
        for i in 0..n - 1 {
            out[i] = row[i + 1] - row[i];
        }
        out[n - 1] = s_far - row[n - 1];
    }
    Tensor::new(vec![r, n], deltas).expect("shape by construction")
}

/// Differentiable batched compositing. `sigma` is `[R, N]`, `colors` is
/// `[R*N, 3]` in ray-major order, `sample_depths` the constant depth matrix.
/// Gradients flow to the densities and colors; sample positions are constants.
pub fn composite_batch(
    tape: &mut Tape,
    sample_depths: &Tensor,
    sigma: Value,
    colors: Value,
    s_far: f64,
) -> Result<CompositedBatch> {
    let (r, n) = (sample_depths.shape()[0], sample_depths.shape()[1]);
    if tape.shape(sigma) != [r, n] {
        return Err(Error::Contract(format!(
            "sigma shape {:?} does not match {r}x{n} samples",
            tape.shape(sigma)
        )));
    }
    if tape.shape(colors) != [r * n, 3] {
        return Err(Error::Contract(format!(
            "colors shape {:?} does not match {}x3",
            tape.shape(colors),
            r * n
        )));
    }
    let deltas = batch_deltas(sample_depths, s_far);
    let delta_c = tape.leaf(&deltas);
    let sig_delta = tape.mul(sigma, delta_c)?;

    // Exclusive prefix sums along the sample axis via a strictly upper
    // triangular ones matrix: out[r, i] = sum_{j < i} x[r, j]. Then
    // T_i = exp(-cumsum) equals the product of (1 - alpha_j) exactly.
    let mut tri = vec![0.0; n * n];
    for j in 0..n {
        for i in j + 1..n {
            tri[j * n + i] = 1.0;
        }
    }
    let tri_c = tape.constant(vec![n, n], tri)?;
    let cum = tape.matmul(sig_delta, tri_c)?;
    let neg_cum = tape.neg(cum)?;
    let trans = tape.exp(neg_cum)?;

    let neg_sd = tape.neg(sig_delta)?;
    let exp_sd = tape.exp(neg_sd)?;
    let ones = tape.constant(vec![r, n], vec![1.0; r * n])?;
    let alpha = tape.sub(ones, exp_sd)?;
    let weights = tape.mul(trans, alpha)?;

    let ones_col = tape.constant(vec![n, 1], vec![1.0; n])?;
    let mut channel_sums = Vec::with_capacity(3);
    for ch in 0..3 {
        let col = tape.slice(colors, 1, ch, ch + 1)?;
        let mat = tape.reshape(col, vec![r, n])?;
        let weighted = tape.mul(weights, mat)?;
        channel_sums.push(tape.matmul(weighted, ones_col)?);
    }
    let color = tape.concat(1, &channel_sums)?;

    let depth_c = tape.leaf(sample_depths);
    let weighted_depth = tape.mul(weights, depth_c)?;
    let depth = tape.matmul(weighted_depth, ones_col)?;

    // Invariants hold per rendered ray, every step.
    {
        let t = tape.values(trans);
        let w = tape.values(weights);
        for ray in 0..r {
            let trow = &t[ray * n..(ray + 1) * n];
            let wrow = &w[ray * n..(ray + 1) * n];
            if (trow[0] - 1.0).abs() > 1e-12 {
                return Err(Error::Contract(format!("T_1 must be 1, got {}", trow[0])));
            }
            if trow.windows(2).any(|p| p[1] > p[0] + 1e-12) {
                return Err(Error::Contract("transmittance not monotone".into()));
            }
            let sum: f64 = wrow.iter().sum();
            if sum > 1.0 + 1e-9 {
                return Err(Error::Contract(format!("weight sum {sum} exceeds 1")));
            }
        }
    }

    Ok(CompositedBatch {
        color,
        depth,
        sigma,
        weights,
        sample_depths: sample_depths.clone(),
        deltas,
        n_rays: r,
        n_samples: n,
    })
}

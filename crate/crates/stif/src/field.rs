//! The space-time field MLP mapping `(x, t)` to emitted color and density.
//!
//! One trunk of relu layers with an optional encoded-input skip connection,
//! then two heads: a sigmoid color head (range `[0,1]^3`) and a softplus
//! density head (nonnegative). There is no view-direction input. Two
//! independent instances form the coarse/fine pair used by rendering.

use crate::autodiff::{Tape, Tensor, Value};
use crate::camera::Vec3;
use crate::encoding::{encode_into, EncodingConfig};
use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Architecture and input-normalization descriptor.
///
/// The world bounding box is part of the function definition: spatial
/// coordinates are affinely mapped into `[-1, 1]^3` before encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldArch {
    pub width: usize,
    pub depth: usize,
    /// Hidden layer whose input is `[h, encoded]` instead of `h`.
    pub skip_layer: Option<usize>,
    pub encoding: EncodingConfig,
    pub world_min: [f64; 3],
    pub world_max: [f64; 3],
}

impl FieldArch {
    pub fn new(width: usize, depth: usize) -> Self {
        FieldArch {
            width,
            depth,
            skip_layer: (depth > 4).then_some(4),
            encoding: EncodingConfig::default(),
            world_min: [-1.0; 3],
            world_max: [1.0; 3],
        }
    }

    pub fn with_bounds(mut self, world_min: [f64; 3], world_max: [f64; 3]) -> Self {
        self.world_min = world_min;
        self.world_max = world_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 {
            return Err(Error::Config(format!("field width must be >= 8, got {}", self.width)));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!("field depth must be >= 2, got {}", self.depth)));
        }
        if let Some(s) = self.skip_layer {
            if s == 0 || s >= self.depth {
                return Err(Error::Config(format!(
                    "skip layer {s} outside hidden range 1..{}",
                    self.depth
                )));
            }
        }
        self.encoding.validate()
    }

    pub fn input_width(&self) -> usize {
        self.encoding.input_width()
    }

    /// (fan_in, fan_out) of every dense layer, trunk then heads.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let enc = self.input_width();
        let mut dims = Vec::with_capacity(self.depth + 2);
        for i in 0..self.depth {
            let fan_in = if i == 0 {
                enc
            } else if self.skip_layer == Some(i) {
                self.width + enc
            } else {
                self.width
            };
            dims.push((fan_in, self.width));
        }
        dims.push((self.width, 1)); // density head
        dims.push((self.width, 3)); // color head
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Canonical parameter layout: `(name, element count)` in the order used
    /// by optimizers and checkpoints.
    pub fn param_layout(&self) -> Vec<(String, usize)> {
        let dims = self.layer_dims();
        let mut out = Vec::with_capacity(2 * dims.len());
        let names = ["sigma", "color"];
        for (idx, (fan_in, fan_out)) in dims.iter().enumerate() {
            let base = if idx < self.depth {
                format!("layer{idx}")
            } else {
                names[idx - self.depth].to_string()
            };
            out.push((format!("{base}.weight"), fan_in * fan_out));
            out.push((format!("{base}.bias"), *fan_out));
        }
        out
    }
}

#[derive(Clone, Debug)]
struct Dense {
    weight: Tensor, // [fan_in, fan_out]
    bias: Tensor,   // [fan_out]
}

/// One MLP instance with its parameters.
#[derive(Clone, Debug)]
pub struct FieldNetwork {
    arch: FieldArch,
    trunk: Vec<Dense>,
    sigma_head: Dense,
    color_head: Dense,
}

/// Tape handles for one network's parameters, in parameter order.
pub struct FieldLeaves {
    values: Vec<Value>,
}

impl FieldNetwork {
    /// Initializes parameters with a fan-in-scaled uniform draw
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, deterministic in `seed`.
    pub fn init(arch: FieldArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut dense = Vec::new();
        for (idx, (fan_in, fan_out)) in arch.layer_dims().into_iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut r = rng::stream(seed, "field-init", &[idx as u64]);
            let weight: Vec<f64> = (0..fan_in * fan_out).map(|_| r.gen_range(-bound..bound)).collect();
            let bias: Vec<f64> = (0..fan_out).map(|_| r.gen_range(-bound..bound)).collect();
            dense.push(Dense {
                weight: Tensor::new(vec![fan_in, fan_out], weight)?.with_grad(),
                bias: Tensor::new(vec![fan_out], bias)?.with_grad(),
            });
        }
        let color_head = dense.pop().unwrap();
        let sigma_head = dense.pop().unwrap();
        Ok(FieldNetwork { arch, trunk: dense, sigma_head, color_head })
    }

    pub fn arch(&self) -> &FieldArch {
        &self.arch
    }

    /// Parameters in a fixed, documented order: trunk layers (weight, bias)
    /// then the density head and the color head.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * (self.trunk.len() + 2));
        for d in &self.trunk {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        out.push(&self.sigma_head.weight);
        out.push(&self.sigma_head.bias);
        out.push(&self.color_head.weight);
        out.push(&self.color_head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * (self.trunk.len() + 2));
        for d in &mut self.trunk {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out.push(&mut self.sigma_head.weight);
        out.push(&mut self.sigma_head.bias);
        out.push(&mut self.color_head.weight);
        out.push(&mut self.color_head.bias);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.trunk.len() {
            out.push(format!("layer{i}.weight"));
            out.push(format!("layer{i}.bias"));
        }
        out.push("sigma.weight".into());
        out.push("sigma.bias".into());
        out.push("color.weight".into());
        out.push("color.bias".into());
        out
    }

    /// Registers every parameter on the tape; forward passes reuse the handles.
    pub fn bind(&self, tape: &mut Tape) -> FieldLeaves {
        FieldLeaves { values: self.params().iter().map(|p| tape.leaf(p)).collect() }
    }

    /// Pulls accumulated leaf gradients off a differentiated tape, in
    /// parameter order.
    pub fn leaf_grads(&self, tape: &Tape, leaves: &FieldLeaves) -> Vec<Vec<f64>> {
        self.params()
            .iter()
            .zip(&leaves.values)
            .map(|(p, v)| tape.grad(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect()
    }

    /// Snapshots parameter values in canonical order.
    pub fn param_values(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|p| p.values().to_vec()).collect()
    }

    /// Overwrites parameters from a canonical-order snapshot.
    pub fn load_param_values(&mut self, values: &[Vec<f64>]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter arrays, got {}",
                params.len(),
                values.len()
            )));
        }
        for (param, vals) in params.iter_mut().zip(values) {
            if param.numel() != vals.len() {
                return Err(Error::Incompatible(format!(
                    "parameter length {} does not match stored {}",
                    param.numel(),
                    vals.len()
                )));
            }
            param.values_mut().copy_from_slice(vals);
        }
        Ok(())
    }

    fn normalize(&self, p: Vec3) -> [f64; 3] {
        let lo = self.arch.world_min;
        let hi = self.arch.world_max;
        let map = |v: f64, lo: f64, hi: f64| {
            if hi > lo {
                2.0 * (v - lo) / (hi - lo) - 1.0
            } else {
                0.0
            }
        };
        [map(p.x, lo[0], hi[0]), map(p.y, lo[1], hi[1]), map(p.z, lo[2], hi[2])]
    }

    /// Encodes a batch of spacetime inputs into the MLP input matrix.
    pub fn encode_inputs(&self, points: &[Vec3], times: &[f64]) -> Result<Tensor> {
        if points.len() != times.len() {
            return Err(Error::Contract(format!(
                "batch sizes differ: {} points vs {} times",
                points.len(),
                times.len()
            )));
        }
        let enc = &self.arch.encoding;
        let width = self.arch.input_width();
        let mut rows = Vec::with_capacity(points.len() * width);
        for (p, &t) in points.iter().zip(times) {
            if !(-1.0..=1.0).contains(&t) {
                return Err(Error::Domain(format!("time {t} outside [-1, 1]")));
            }
            let xyz = self.normalize(*p);
            if xyz.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("non-finite point {p:?}")));
            }
            encode_into(&xyz, enc.spatial_bands, enc.include_raw, &mut rows);
            encode_into(&[t], enc.time_bands, enc.include_raw, &mut rows);
        }
        Tensor::new(vec![points.len(), width], rows)
    }

    /// Runs the MLP on already-encoded inputs, recording onto `tape`.
    /// Returns `(colors [B,3], densities [B,1])`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        leaves: &FieldLeaves,
        encoded: Value,
    ) -> Result<(Value, Value)> {
        use crate::autodiff::Activation;
        let mut h = encoded;
        for (i, _) in self.trunk.iter().enumerate() {
            if self.arch.skip_layer == Some(i) {
                h = tape.concat(1, &[h, encoded])?;
            }
            h = tape.dense(h, leaves.values[2 * i], leaves.values[2 * i + 1], Activation::Relu)?;
        }
        let nl = self.trunk.len();
        let sigma = tape.dense(h, leaves.values[2 * nl], leaves.values[2 * nl + 1], Activation::Softplus)?;
        let color =
            tape.dense(h, leaves.values[2 * nl + 2], leaves.values[2 * nl + 3], Activation::Sigmoid)?;
        Ok((color, sigma))
    }

    /// Convenience forward pass for rendering and evaluation: encodes,
    /// evaluates, and extracts plain values.
    pub fn eval(&self, points: &[Vec3], times: &[f64]) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
        let encoded = self.encode_inputs(points, times)?;
        let mut tape = Tape::new();
        let leaves = self.bind(&mut tape);
        let enc = tape.leaf(&encoded);
        let (color, sigma) = self.forward_on_tape(&mut tape, &leaves, enc)?;
        let c = tape.values(color);
        let colors = c.chunks_exact(3).map(|rgb| [rgb[0], rgb[1], rgb[2]]).collect();
        Ok((colors, tape.values(sigma).to_vec()))
    }
}

/// Anything that can be queried for color and density along rays; lets tests
/// substitute analytic media for a trained network.
pub trait SceneField {
    fn query(&self, points: &[Vec3], times: &[f64]) -> Result<(Vec<[f64; 3]>, Vec<f64>)>;
}

impl SceneField for FieldNetwork {
    fn query(&self, points: &[Vec3], times: &[f64]) -> Result<(Vec<[f64; 3]>, Vec<f64>)> {
        self.eval(points, times)
    }
}

/// Independent coarse and fine networks of identical architecture.
#[derive(Clone, Debug)]
pub struct FieldPair {
    pub coarse: FieldNetwork,
    pub fine: FieldNetwork,
}

impl FieldPair {
    pub fn init(arch: FieldArch, seed: u64) -> Result<Self> {
        let coarse_seed = rng::stream(seed, "coarse-net", &[]).gen();
        let fine_seed = rng::stream(seed, "fine-net", &[]).gen();
        Ok(FieldPair {
            coarse: FieldNetwork::init(arch.clone(), coarse_seed)?,
            fine: FieldNetwork::init(arch, fine_seed)?,
        })
    }

    pub fn arch(&self) -> &FieldArch {
        self.coarse.arch()
    }

    pub fn zero_grads(&mut self) {
        for p in self.coarse.params_mut() {
            p.zero_grad();
        }
        for p in self.fine.params_mut() {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> FieldArch {
        FieldArch::new(8, 2)
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = FieldNetwork::init(small_arch(), 11).unwrap();
        let b = FieldNetwork::init(small_arch(), 11).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.values(), pb.values());
        }
        let c = FieldNetwork::init(small_arch(), 12).unwrap();
        assert_ne!(a.params()[0].values(), c.params()[0].values());
    }

    #[test]
    fn parameter_count_matches_layer_arithmetic() {
        let arch = FieldArch::new(1024, 8);
        let enc = arch.input_width();
        assert_eq!(enc, 72); // 3*(2*10+1) + (2*4+1)
        let expected = (enc * 1024 + 1024)
            + 3 * (1024 * 1024 + 1024)          // layers 1..4
            + ((1024 + enc) * 1024 + 1024)      // skip layer 4
            + 3 * (1024 * 1024 + 1024)          // layers 5..8
            + (1024 + 1)
            + (1024 * 3 + 3);
        assert_eq!(arch.param_count(), expected);
        let net = FieldNetwork::init(arch, 0).unwrap();
        let total: usize = net.params().iter().map(|p| p.numel()).sum();
        assert_eq!(total, expected);
    }

    #[test]
    fn zero_input_is_finite() {
        let net = FieldNetwork::init(small_arch(), 3).unwrap();
        let (colors, sigmas) = net.eval(&[Vec3::default()], &[0.0]).unwrap();
        assert!(colors[0].iter().all(|c| c.is_finite()));
        assert!(sigmas[0].is_finite() && sigmas[0] >= 0.0);
    }

    #[test]
    fn outputs_respect_ranges_on_random_inputs() {
        let net = FieldNetwork::init(FieldArch::new(16, 3), 5).unwrap();
        let mut r = crate::rng::stream(9, "inputs", &[]);
        use rand::Rng;
        let points: Vec<Vec3> = (0..64)
            .map(|_| Vec3::new(r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)))
            .collect();
        let times: Vec<f64> = (0..64).map(|_| r.gen_range(-1.0..1.0)).collect();
        let (colors, sigmas) = net.eval(&points, &times).unwrap();
        for c in &colors {
            assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(sigmas.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn rejects_time_outside_range() {
        let net = FieldNetwork::init(small_arch(), 3).unwrap();
        assert!(net.eval(&[Vec3::default()], &[1.5]).is_err());
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let net = FieldNetwork::init(FieldArch::new(16, 3), 21).unwrap();
        let p = Vec3::new(0.3, -0.2, 0.8);
        let (colors, sigmas) = net.eval(&[p, p], &[0.25, 0.25]).unwrap();
        assert_eq!(colors[0], colors[1]);
        assert_eq!(sigmas[0], sigmas[1]);
    }

    #[test]
    fn permuting_rows_permutes_outputs() {
        let net = FieldNetwork::init(FieldArch::new(16, 3), 21).unwrap();
        let pts = [Vec3::new(0.1, 0.2, 0.3), Vec3::new(-0.5, 0.4, 0.9), Vec3::new(0.0, -0.9, 0.2)];
        let times = [0.0, 0.5, -0.5];
        let (c1, s1) = net.eval(&pts, &times).unwrap();
        let (c2, s2) = net.eval(&[pts[2], pts[0], pts[1]], &[times[2], times[0], times[1]]).unwrap();
        assert_eq!(c1[0], c2[1]);
        assert_eq!(c1[1], c2[2]);
        assert_eq!(c1[2], c2[0]);
        assert_eq!(s1[0], s2[1]);
        assert_eq!(s1[2], s2[0]);
    }

    #[test]
    fn pair_networks_are_independent() {
        let pair = FieldPair::init(small_arch(), 7).unwrap();
        assert_ne!(pair.coarse.params()[0].values(), pair.fine.params()[0].values());
    }

    #[test]
    fn mean_density_gradient_matches_finite_differences() {
        let mut net = FieldNetwork::init(small_arch(), 13).unwrap();
        let points = vec![Vec3::new(0.2, -0.1, 0.4), Vec3::new(-0.6, 0.3, 0.1)];
        let times = vec![0.1, -0.7];
        let encoded = net.encode_inputs(&points, &times).unwrap();

        // Analytic gradient of mean(sigma) w.r.t. the first-layer weights.
        let mut tape = Tape::new();
        let leaves = net.bind(&mut tape);
        let enc = tape.leaf(&encoded);
        let (_c, sigma) = net.forward_on_tape(&mut tape, &leaves, enc).unwrap();
        let root = tape.mean(sigma).unwrap();
        tape.backward(root).unwrap();
        let analytic = net.leaf_grads(&tape, &leaves)[0].clone();

        let eval_mean_sigma = |net: &FieldNetwork| -> f64 {
            let (_c, s) = net.eval(&points, &times).unwrap();
            s.iter().sum::<f64>() / s.len() as f64
        };

        let h = 1e-4;
        let n_check = analytic.len();
        for i in 0..n_check {
            let orig = net.params()[0].values()[i];
            net.params_mut()[0].values_mut()[i] = orig + h;
            let plus = eval_mean_sigma(&net);
            net.params_mut()[0].values_mut()[i] = orig - h;
            let minus = eval_mean_sigma(&net);
            net.params_mut()[0].values_mut()[i] = orig;
            let central = (plus - minus) / (2.0 * h);
            let rel = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + 1e-12);
            assert!(rel < 1e-4, "param {i}: analytic {} vs fd {central}", analytic[i]);
        }
    }
}

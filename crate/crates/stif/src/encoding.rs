//! Sinusoidal positional encoding of spatial coordinates and time.

use crate::error::{Error, Result};
use std::f64::consts::PI;

/// Frequency-band configuration for the field inputs.
///
/// Spatial coordinates are expected pre-scaled into `[-1, 1]^3` and time
/// pre-normalized into `[-1, 1]` before encoding.
#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncodingConfig {
    pub spatial_bands: usize,
    pub time_bands: usize,
    pub include_raw: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig { spatial_bands: 10, time_bands: 4, include_raw: true }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_bands == 0 || self.time_bands == 0 {
            return Err(Error::Config("encoding bands must be >= 1".into()));
        }
        Ok(())
    }

    /// Encoded width of one (x, t) input row: 3 spatial components plus time.
    pub fn input_width(&self) -> usize {
        3 * encoded_len(1, self.spatial_bands, self.include_raw)
            + encoded_len(1, self.time_bands, self.include_raw)
    }
}

/// Output length of [`encode`] for a `dim`-component input.
pub fn encoded_len(dim: usize, bands: usize, include_raw: bool) -> usize {
    dim * (2 * bands + usize::from(include_raw))
}

/// Encodes a coordinate vector as raw components (optional) followed by
/// per-component sin/cos pairs of ascending frequency `2^k π`.
pub fn encode(p: &[f64], bands: usize, include_raw: bool) -> Result<Vec<f64>> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("encode: non-finite input {p:?}")));
    }
    let mut out = Vec::with_capacity(encoded_len(p.len(), bands, include_raw));
    encode_into(p, bands, include_raw, &mut out);
    Ok(out)
}

/// Appends the encoding of `p` to `out` without validation; callers on the
/// hot path have already checked finiteness.
pub(crate) fn encode_into(p: &[f64], bands: usize, include_raw: bool, out: &mut Vec<f64>) {
    if include_raw {
        out.extend_from_slice(p);
    }
    for &v in p {
        let mut freq = PI;
        for _ in 0..bands {
            let (s, c) = (freq * v).sin_cos();
            out.push(s);
            out.push(c);
            freq *= 2.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_encodes_to_alternating_sin_cos() {
        let out = encode(&[0.0], 2, false).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn one_at_single_band() {
        let out = encode(&[1.0], 1, false).unwrap();
        assert!(out[0].abs() < 1e-15, "sin(pi) ~ 0, got {}", out[0]);
        assert!((out[1] + 1.0).abs() < 1e-15, "cos(pi) = -1, got {}", out[1]);
    }

    #[test]
    fn spatial_width_with_raw() {
        assert_eq!(encoded_len(3, 10, true), 63);
        let out = encode(&[0.1, -0.2, 0.9], 10, true).unwrap();
        assert_eq!(out.len(), 63);
        assert_eq!(&out[..3], &[0.1, -0.2, 0.9]);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(encode(&[f64::NAN], 2, true).is_err());
        assert!(encode(&[f64::INFINITY], 2, false).is_err());
    }

    #[test]
    fn derivative_matches_band_frequency() {
        // d/dv sin(2^k π v) = 2^k π cos(2^k π v), and the cosine component
        // mirrors it with a sign flip.
        let h = 1e-6;
        for &v in &[0.13, -0.77, 0.5] {
            for bands in [1usize, 4, 10] {
                let plus = encode(&[v + h], bands, false).unwrap();
                let minus = encode(&[v - h], bands, false).unwrap();
                for k in 0..bands {
                    let freq = 2f64.powi(k as i32) * std::f64::consts::PI;
                    let fd_sin = (plus[2 * k] - minus[2 * k]) / (2.0 * h);
                    let fd_cos = (plus[2 * k + 1] - minus[2 * k + 1]) / (2.0 * h);
                    let scale = freq.max(1.0);
                    assert!((fd_sin - freq * (freq * v).cos()).abs() / scale < 1e-6);
                    assert!((fd_cos + freq * (freq * v).sin()).abs() / scale < 1e-6);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn length_formula_holds(dim in 1usize..5, bands in 1usize..12, raw: bool) {
            let p = vec![0.25; dim];
            let out = encode(&p, bands, raw).unwrap();
            prop_assert_eq!(out.len(), encoded_len(dim, bands, raw));
        }

        #[test]
        fn deterministic(v in -1.0f64..1.0) {
            prop_assert_eq!(encode(&[v], 6, true).unwrap(), encode(&[v], 6, true).unwrap());
        }
    }
}

//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Everything trainable in this crate (the field MLPs, the losses) is built
//! from the primitives recorded on a [`Tape`]. Training is 64-bit throughout.

mod tape;
mod tensor;

pub use tape::{Activation, Primitive, Tape, Value};
pub use tensor::Tensor;



use crate::error::Result;

/// Compares the analytic gradient of a scalar-valued function against central
/// finite differences with step `h`.
///
/// Returns the maximum over coordinates of
/// `|analytic − central| / (|analytic| + |central| + 1e-12)`.
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Value) -> Result<Value>,
{
    assert!(h > 0.0, "finite-difference step must be positive");

    let leaf_tensor = Tensor::new(theta.shape().to_vec(), theta.values().to_vec())?.with_grad();
    let mut tape = Tape::new();
    let leaf = tape.leaf(&leaf_tensor);
    let root = f(&mut tape, leaf)?;
    tape.backward(root)?;
    let analytic: Vec<f64> = match tape.grad(leaf) {
        Some(g) => g.to_vec(),
        None => vec![0.0; theta.numel()],
    };

    let eval = |values: &[f64]| -> Result<f64> {
        let t = Tensor::new(theta.shape().to_vec(), values.to_vec())?;
        let mut tape = Tape::new();
        let leaf = tape.leaf(&t);
        let root = f(&mut tape, leaf)?;
        Ok(tape.scalar_value(root))
    };

    let mut probe = theta.values().to_vec();
    let mut worst = 0.0f64;
    for i in 0..probe.len() {
        let original = probe[i];
        probe[i] = original + h;
        let plus = eval(&probe)?;
        probe[i] = original - h;
        let minus = eval(&probe)?;
        probe[i] = original;
        let central = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let theta = Tensor::new(vec![5], vec![0.4, -1.1, 2.0, 0.0, 3.3]).unwrap();
        let err = grad_check(
            |tape, x| {
                let sq = tape.square(x)?;
                tape.sum(sq)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "got {err}");
    }

    #[test]
    fn constant_function_reports_zero_error() {
        let theta = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(|tape, _x| Ok(tape.scalar(4.0)), &theta, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn additive_composition_accumulates() {
        // grad of f(x)+g(x) equals grad f + grad g.
        let theta = Tensor::new(vec![3], vec![0.2, 0.6, -0.4]).unwrap().with_grad();

        let grad_of = |build: &dyn Fn(&mut Tape, Value) -> Value| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(&theta);
            let root = build(&mut tape, x);
            tape.backward(root).unwrap();
            tape.grad(x).unwrap().to_vec()
        };

        let f = |tape: &mut Tape, x: Value| {
            let s = tape.square(x).unwrap();
            tape.sum(s).unwrap()
        };
        let g = |tape: &mut Tape, x: Value| {
            let s = tape.sin(x).unwrap();
            tape.sum(s).unwrap()
        };
        let combined = grad_of(&|tape, x| {
            let a = f(tape, x);
            let b = g(tape, x);
            tape.add(a, b).unwrap()
        });
        let separate: Vec<f64> = grad_of(&f).iter().zip(grad_of(&g)).map(|(a, b)| a + b).collect();
        for (c, s) in combined.iter().zip(&separate) {
            assert!((c - s).abs() < 1e-15);
        }
    }
}

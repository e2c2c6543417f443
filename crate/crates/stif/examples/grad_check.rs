//! Gradient checking: verifies the reverse-mode tape against central finite
//! differences, from single primitives up to differentiable compositing.
//!
//! ```bash
//! cargo run --release --example grad_check
//! ```

use stif::autodiff::{grad_check, Tensor};
use stif::render::composite_batch;

fn main() -> stif::Result<()> {
    // A quadratic has an exact analytic gradient.
    let theta = Tensor::new(vec![6], vec![0.4, -1.1, 2.0, 0.7, -0.2, 1.3])?;
    let err = grad_check(
        |tape, x| {
            let sq = tape.square(x)?;
            tape.sum(sq)
        },
        &theta,
        1e-5,
    )?;
    println!("sum(theta^2):            max relative error {err:.3e}");

    // A trig composition exercises several primitives at once.
    let err = grad_check(
        |tape, x| {
            let s = tape.sin(x)?;
            let e = tape.exp(s)?;
            let c = tape.cos(e)?;
            tape.mean(c)
        },
        &theta,
        1e-5,
    )?;
    println!("mean(cos(exp(sin(x)))):  max relative error {err:.3e}");

    // Volume rendering differentiated with respect to per-sample densities:
    // theta holds the densities of two rays with four samples each.
    let sample_depths = Tensor::new(vec![2, 4], vec![0.6, 1.1, 1.9, 2.5, 0.7, 1.0, 1.4, 2.8])?;
    let colors: Vec<f64> = (0..24).map(|i| (i as f64 * 0.13).sin().abs()).collect();
    let sigmas = Tensor::new(vec![2, 4], vec![0.4, 1.2, 0.05, 2.2, 0.1, 0.8, 1.5, 0.3])?;
    let err = grad_check(
        |tape, sigma| {
            let c = tape.constant(vec![8, 3], colors.clone())?;
            let out = composite_batch(tape, &sample_depths, sigma, c, 3.0)?;
            let color_sq = tape.square(out.color)?;
            let a = tape.sum(color_sq)?;
            let depth_sq = tape.square(out.depth)?;
            let b = tape.sum(depth_sq)?;
            tape.add(a, b)
        },
        &sigmas,
        1e-5,
    )?;
    println!("composited color+depth:  max relative error {err:.3e}");
    Ok(())
}

//! Volume rendering on an analytic homogeneous medium: quadrature error
//! against the closed-form integral, and weight-guided resampling.
//!
//! ```bash
//! cargo run --release --example volume_rendering
//! ```

use stif::render::{composite, hierarchical_resample, stratified_samples, RenderConfig};

fn main() -> stif::Result<()> {
    let (sigma, color, s_near, s_far) = (2.0, [0.3, 0.6, 0.9], 0.5, 1.5);
    let span = s_far - s_near;
    let absorbed = 1.0 - (-sigma * span as f64).exp();
    let analytic_color = color.map(|c| c * absorbed);
    let analytic_depth = (s_near + 1.0 / sigma) - (s_far + 1.0 / sigma) * (-sigma * span).exp();

    println!("homogeneous medium, sigma = {sigma}, depth range [{s_near}, {s_far}]");
    println!("analytic color {analytic_color:?}, analytic depth {analytic_depth:.6}");
    for n in [64usize, 256, 1024, 4096] {
        let depths: Vec<f64> =
            (0..n).map(|i| s_near + (i as f64 + 0.5) * span / n as f64).collect();
        let result = composite(&depths, &vec![sigma; n], &vec![color; n], s_far)?;
        let c_err = result
            .color
            .iter()
            .zip(&analytic_color)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        println!(
            "  N = {n:>4}: color error {c_err:.2e}, depth error {:.2e}, sum(w) = {:.6}",
            (result.depth - analytic_depth).abs(),
            result.weights.iter().sum::<f64>()
        );
    }

    // Inverse-depth stratification and resampling around a surface.
    let cfg = RenderConfig { n_coarse: 16, n_fine: 64, z_near: 1.0, z_far: 8.0, stratified_jitter: false };
    let coarse = stratified_samples(&cfg, &mut stif::rng::stream(0, "demo", &[]));
    println!("\ninverse-depth coarse samples (first 4): {:?}", &coarse[..4]);

    // Pretend the coarse pass found a surface around 3 meters.
    let weights: Vec<f64> =
        coarse.iter().map(|&s| (-(s - 3.0f64) * (s - 3.0) * 4.0).exp()).collect();
    let fine = hierarchical_resample(
        &weights,
        &coarse,
        cfg.n_fine,
        cfg.z_near,
        cfg.z_far,
        &mut stif::rng::stream(0, "demo-fine", &[]),
        true,
    )?;
    let near_surface = fine.iter().filter(|s| (2.5..3.5).contains(*s)).count();
    println!(
        "resampled {} fine depths; {near_surface}/{} fall within half a meter of the surface",
        fine.len(),
        fine.len()
    );
    Ok(())
}

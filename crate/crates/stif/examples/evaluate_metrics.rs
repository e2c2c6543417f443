//! The evaluation toolkit on known inputs: PSNR behavior under noise, SSIM,
//! and disocclusion masks from forward warping versus exact visibility.
//!
//! ```bash
//! cargo run --release --example evaluate_metrics
//! ```

use stif::dataio::{gen_toy_scene, ToySceneSpec};
use stif::eval::{disocclusion_mask, psnr, ssim, ImageBuf};

fn main() -> stif::Result<()> {
    let spec = ToySceneSpec::wide_baseline();
    let (train, heldout) = gen_toy_scene(&spec)?;
    let truth = ImageBuf::from_dataset(&heldout, 0);

    println!("PSNR of the ground-truth image against noisy copies:");
    for amplitude in [0.0, 0.005, 0.02, 0.08] {
        let noisy = ImageBuf {
            width: truth.width,
            height: truth.height,
            pixels: truth
                .pixels
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let n = amplitude * if k % 2 == 0 { 1.0 } else { -1.0 };
                    [p[0] + n, p[1] - n, p[2] + n]
                })
                .collect(),
        };
        println!(
            "  amplitude {amplitude:.3}: psnr {:6.2} dB, ssim {:.4}",
            psnr(&truth, &noisy, None)?.unwrap(),
            ssim(&truth, &noisy)?
        );
    }

    // Warped disocclusion mask vs the generator's exact visibility mask.
    let train_depth: Vec<f64> = train.frames()[0].depth.iter().map(|&v| v as f64).collect();
    let warped = disocclusion_mask(&train_depth, &train.frames()[0].calib, &heldout.frames()[0].calib)?;
    let exact = heldout.frames()[0].mask.as_ref().expect("held-out frames carry masks");
    let (mut inter, mut union) = (0usize, 0usize);
    for (w, e) in warped.iter().zip(exact) {
        inter += usize::from(*w && *e);
        union += usize::from(*w || *e);
    }
    println!(
        "\ndisocclusion: warped {} px, exact {} px, IoU {:.3}",
        warped.iter().filter(|&&b| b).count(),
        exact.iter().filter(|&&b| b).count(),
        inter as f64 / union as f64
    );
    Ok(())
}

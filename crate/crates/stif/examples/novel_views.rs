//! Renders novel viewpoints from a quickly trained field: sweeps the camera
//! laterally at one observed time step and reports how the view changes.
//!
//! ```bash
//! cargo run --release --example novel_views
//! ```

use stif::camera::{CameraCalib, Vec3};
use stif::dataio::{gen_toy_scene, ToySceneSpec};
use stif::eval::render_view;
use stif::field::FieldArch;
use stif::samplepool::StaticSamplePool;
use stif::trainer::{train_step, AdamState, TrainConfig};

fn main() -> stif::Result<()> {
    let spec = ToySceneSpec { width: 24, height: 24, frames: 4, ..Default::default() };
    let (ds, _) = gen_toy_scene(&spec)?;

    let mut cfg = TrainConfig::desk_defaults(ds.z_near(), ds.z_far());
    cfg.n_rays = 48;
    cfg.n_static = 32;
    cfg.render.n_coarse = 12;
    cfg.render.n_fine = 24;
    let arch = FieldArch::new(32, 4).with_bounds(ds.world_min(), ds.world_max());
    let pool = StaticSamplePool::build(&ds, &cfg.render, &cfg.pool, cfg.seed)?;
    let mut fields = stif::field::FieldPair::init(arch, cfg.seed)?;
    let sizes: Vec<usize> =
        fields.coarse.params().iter().chain(fields.fine.params().iter()).map(|p| p.numel()).collect();
    let mut adam = AdamState::new(&sizes, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_hat);
    print!("training 600 steps");
    for iter in 1..=600 {
        train_step(&mut fields, &ds, Some(&pool), &cfg, &mut adam, iter)?;
        if iter % 150 == 0 {
            print!(".");
            use std::io::Write;
            std::io::stdout().flush().ok();
        }
    }
    println!(" done");

    // Lateral sweep at the time of frame 1; novel views are rendered at
    // observed time steps only.
    let t = ds.time(1);
    let out = std::env::temp_dir().join("stif-novel-views");
    std::fs::create_dir_all(&out).expect("temp dir is writable");
    for (k, offset) in [-0.3f64, 0.0, 0.3].into_iter().enumerate() {
        let cam = CameraCalib::axis_aligned(
            spec.focal,
            spec.focal,
            spec.width as f64 / 2.0,
            spec.height as f64 / 2.0,
            spec.width,
            spec.height,
            Vec3::new(offset, 0.0, 0.0),
        );
        let (image, depth) = render_view(&fields, &cam, t, &cfg.render, 9)?;
        let mean_depth: f64 = depth.iter().sum::<f64>() / depth.len() as f64;
        let rgb: Vec<u8> = image
            .pixels
            .iter()
            .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        let path = out.join(format!("view_{k}.png"));
        image::RgbImage::from_raw(spec.width as u32, spec.height as u32, rgb)
            .expect("buffer matches dimensions")
            .save(&path)
            .expect("png encodes");
        println!("offset {offset:+.1}: mean composited depth {mean_depth:.3} m -> {}", path.display());
    }
    Ok(())
}

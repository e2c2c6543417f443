//! Short end-to-end training run on a small toy scene: builds the static
//! sample pool, optimizes all four losses, and writes a resumable checkpoint
//! plus a metrics log.
//!
//! ```bash
//! cargo run --release --example train_toy
//! ```

use stif::dataio::{gen_toy_scene, ToySceneSpec};
use stif::field::FieldArch;
use stif::trainer::{train, TrainConfig};

fn main() -> stif::Result<()> {
    let spec = ToySceneSpec { width: 24, height: 24, frames: 4, ..Default::default() };
    let (train_ds, _heldout) = gen_toy_scene(&spec)?;

    let mut cfg = TrainConfig::desk_defaults(train_ds.z_near(), train_ds.z_far());
    cfg.iterations = 400;
    cfg.n_rays = 32;
    cfg.n_static = 32;
    cfg.render.n_coarse = 12;
    cfg.render.n_fine = 24;
    cfg.checkpoint_every = 200;
    cfg.log_every = 100;
    let arch = FieldArch::new(32, 4).with_bounds(train_ds.world_min(), train_ds.world_max());

    let out = std::env::temp_dir().join("stif-train-toy");
    let outcome = train(&cfg, &arch, &train_ds, &out, false)?;
    let last = outcome.last.expect("ran at least one step");
    println!(
        "finished {} iterations: color {:.5}, depth {:.5}, empty {:.5}, static {:.5}",
        outcome.iterations, last.color, last.depth, last.empty, last.static_scene
    );
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("metrics:    {}", outcome.metrics_path.display());

    // Resuming with a higher iteration target continues the same trajectory.
    cfg.iterations = 500;
    let resumed = train(&cfg, &arch, &train_ds, &out, true)?;
    println!("resumed to {} iterations; total {:.5}", resumed.iterations, resumed.last.unwrap().total);
    Ok(())
}

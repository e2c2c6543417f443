//! Trains the default toy scene and reports held-out PSNR at milestones.
use stif::dataio::{gen_toy_scene, ToySceneSpec};
use stif::eval::{evaluate, MaskSource};
use stif::field::{FieldArch, FieldPair};
use stif::samplepool::StaticSamplePool;
use stif::trainer::{train_step, AdamState, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_rays: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let iters: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let (ds, heldout) = gen_toy_scene(&ToySceneSpec::default()).unwrap();
    let mut cfg = TrainConfig::desk_defaults(ds.z_near(), ds.z_far());
    cfg.n_rays = n_rays;
    cfg.n_static = n_rays;
    let arch = FieldArch::new(128, 8).with_bounds(ds.world_min(), ds.world_max());
    let pool = StaticSamplePool::build(&ds, &cfg.render, &cfg.pool, cfg.seed).unwrap();
    let mut fields = FieldPair::init(arch, cfg.seed).unwrap();
    let sizes: Vec<usize> =
        fields.coarse.params().iter().chain(fields.fine.params().iter()).map(|p| p.numel()).collect();
    let mut adam = AdamState::new(&sizes, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_hat);
    let t0 = std::time::Instant::now();
    for iter in 1..=iters {
        let v = train_step(&mut fields, &ds, Some(&pool), &cfg, &mut adam, iter).unwrap();
        if iter % 250 == 0 || iter == iters {
            let report =
                evaluate(&fields, &heldout, Some(&ds), &cfg.render, MaskSource::Generator, 1).unwrap();
            println!(
                "iter {iter} ({:.0}s): total {:.5} -> psnr_all {:.2} psnr_occ {:.2} ssim {:.3} depth_rmse {:.4}",
                t0.elapsed().as_secs_f64(),
                v.total,
                report.psnr_all,
                report.psnr_occ.unwrap_or(-1.0),
                report.ssim_all,
                report.depth_rmse
            );
        }
    }
}

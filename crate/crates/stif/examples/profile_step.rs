//! Rough per-step timing at the default desk configuration.
use stif::dataio::{gen_toy_scene, ToySceneSpec};
use stif::field::{FieldArch, FieldPair};
use stif::samplepool::StaticSamplePool;
use stif::trainer::{train_step, AdamState, TrainConfig};

fn main() {
    let (ds, _) = gen_toy_scene(&ToySceneSpec::default()).unwrap();
    let cfg = TrainConfig::desk_defaults(ds.z_near(), ds.z_far());
    let arch = FieldArch::new(128, 8).with_bounds(ds.world_min(), ds.world_max());
    let pool = StaticSamplePool::build(&ds, &cfg.render, &cfg.pool, cfg.seed).unwrap();
    let mut fields = FieldPair::init(arch, cfg.seed).unwrap();
    let sizes: Vec<usize> =
        fields.coarse.params().iter().chain(fields.fine.params().iter()).map(|p| p.numel()).collect();
    let mut adam = AdamState::new(&sizes, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_hat);
    train_step(&mut fields, &ds, Some(&pool), &cfg, &mut adam, 1).unwrap();
    let t = std::time::Instant::now();
    let n = 8;
    for iter in 2..2 + n {
        train_step(&mut fields, &ds, Some(&pool), &cfg, &mut adam, iter).unwrap();
    }
    println!("{:.3} s/step", t.elapsed().as_secs_f64() / n as f64);
}

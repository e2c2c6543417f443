//! Command-line surface: dataset generation, training, rendering, and
//! evaluation. Every command is deterministic given `--seed`, never mutates
//! its input dataset, and archives its resolved configuration next to its
//! outputs.

use crate::camera::CameraCalib;
use crate::dataio::{
    gen_toy_scene, load_checkpoint, load_dataset, save_dataset, write_pfm_f64, ToySceneSpec,
};
use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_view, MaskSource};
use crate::field::FieldArch;
use crate::losses::{LossWeights, DEPTH_FLOOR_FRAC};
use crate::render::RenderConfig;
use crate::samplepool::PoolConfig;
use crate::trainer::{fields_from_checkpoint, train, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Flat run configuration: every tunable knob in one place, loadable from a
/// JSON file with flag overrides. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    // Field network.
    pub width: usize,
    pub depth: usize,
    pub skip_layer: Option<usize>,
    pub spatial_bands: usize,
    pub time_bands: usize,
    pub include_raw: bool,
    // Ray sampling.
    pub n_coarse: usize,
    pub n_fine: usize,
    pub stratified_jitter: bool,
    // Optimization.
    pub n_rays: usize,
    pub n_static: usize,
    pub iterations: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma_scale: f64,
    /// Inverse-depth clamp as a fraction of z_far.
    pub d_floor_frac: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    // Static sample pool.
    pub pool_pixel_stride: usize,
    pub pool_frame_stride: usize,
    pub pool_jitter_frac: f64,
    pub pool_retest_provenance: bool,
    /// Worker threads (0 = rayon default). Results do not depend on this.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        RunConfig {
            seed: 0,
            width: 128,
            depth: 8,
            skip_layer: Some(4),
            spatial_bands: 10,
            time_bands: 4,
            include_raw: true,
            n_coarse: 32,
            n_fine: 64,
            stratified_jitter: true,
            n_rays: 64,
            n_static: 64,
            iterations: 20_000,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            sigma_scale: w.sigma_scale,
            d_floor_frac: DEPTH_FLOOR_FRAC,
            checkpoint_every: 1000,
            log_every: 500,
            pool_pixel_stride: 4,
            pool_frame_stride: 1,
            pool_jitter_frac: 0.01,
            pool_retest_provenance: false,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta, gamma: self.gamma, sigma_scale: self.sigma_scale }
    }

    pub fn arch(&self, world_min: [f64; 3], world_max: [f64; 3]) -> FieldArch {
        FieldArch {
            width: self.width,
            depth: self.depth,
            skip_layer: self.skip_layer,
            encoding: EncodingConfig {
                spatial_bands: self.spatial_bands,
                time_bands: self.time_bands,
                include_raw: self.include_raw,
            },
            world_min,
            world_max,
        }
    }

    pub fn render_config(&self, z_near: f64, z_far: f64) -> RenderConfig {
        RenderConfig {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            z_near,
            z_far,
            stratified_jitter: self.stratified_jitter,
        }
    }

    pub fn train_config(&self, z_near: f64, z_far: f64) -> TrainConfig {
        TrainConfig {
            n_rays: self.n_rays,
            n_static: self.n_static,
            iterations: self.iterations,
            seed: self.seed,
            weights: self.weights(),
            render: self.render_config(z_near, z_far),
            pool: PoolConfig {
                pixel_stride: self.pool_pixel_stride,
                frame_stride: self.pool_frame_stride,
                jitter_frac: self.pool_jitter_frac,
                retest_provenance_time: self.pool_retest_provenance,
            },
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps_hat: self.eps_hat,
            d_floor: self.d_floor_frac * z_far,
            checkpoint_every: self.checkpoint_every,
            log_every: self.log_every,
        }
    }

    /// Archives the resolved configuration beside a command's outputs.
    pub fn archive(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join("config.json");
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Space-time irradiance fields: learn `F(x, t) -> (color, density)` from a
/// posed RGB-D video and render novel viewpoints at observed times.
#[derive(Parser, Debug)]
#[command(name = "stif", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic train/heldout RGB-D datasets.
    GenData(GenDataArgs),
    /// Train a field pair on an RGB-D dataset directory.
    Train(TrainArgs),
    /// Render a trained checkpoint along a camera path.
    Render(RenderArgs),
    /// Evaluate a trained checkpoint against a held-out dataset.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory; writes train/ and heldout/ inside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Scene spec JSON; defaults are used when omitted.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Texture seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frame count override.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Square resolution override.
    #[arg(long)]
    pub res: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints, metrics, and the resolved config.
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<u64>,
    /// Loss weights alpha,beta,gamma (e.g. `0,0,0` for the time-only baseline).
    #[arg(long, value_name = "A,B,G")]
    pub loss_weights: Option<String>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub n_rays: Option<usize>,
    /// Resume from the run directory's checkpoint.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Camera path JSON (poses plus observed time indices).
    #[arg(long)]
    pub path: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Held-out dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Paired training dataset, required for warped masks.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "warped")]
    pub mask_source: MaskSourceArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(clap::ValueEnum, Copy, Clone, Debug)]
pub enum MaskSourceArg {
    Warped,
    Generator,
    None,
}

impl From<MaskSourceArg> for MaskSource {
    fn from(v: MaskSourceArg) -> MaskSource {
        match v {
            MaskSourceArg::Warped => MaskSource::Warped,
            MaskSourceArg::Generator => MaskSource::Generator,
            MaskSourceArg::None => MaskSource::None,
        }
    }
}

fn setup_threads(threads: Option<usize>, cfg: &RunConfig) {
    let n = threads.unwrap_or(cfg.threads);
    if n > 0 {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut spec = match &args.scene {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<ToySceneSpec>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => ToySceneSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(frames) = args.frames {
        spec.frames = frames;
    }
    if let Some(res) = args.res {
        spec.width = res;
        spec.height = res;
        spec.focal = res as f64;
        spec.heldout_focal = res as f64 * 1.25;
    }
    let (train, heldout) = gen_toy_scene(&spec)?;
    save_dataset(&args.out.join("train"), &train)?;
    save_dataset(&args.out.join("heldout"), &heldout)?;
    let spec_path = args.out.join("scene.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&spec).expect("spec serializes"))
        .map_err(|e| Error::io(&spec_path, e))?;
    println!(
        "wrote {} frames at {}x{} to {}",
        spec.frames,
        spec.width,
        spec.height,
        args.out.display()
    );
    Ok(())
}

fn parse_loss_weights(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("--loss-weights: {e}")))?;
    let [a, b, g] = parts[..] else {
        return Err(Error::Config(format!(
            "--loss-weights expects three comma-separated values, got {}",
            parts.len()
        )));
    };
    Ok((a, b, g))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_ref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(iters) = args.iters {
        cfg.iterations = iters;
    }
    if let Some(w) = &args.loss_weights {
        (cfg.alpha, cfg.beta, cfg.gamma) = parse_loss_weights(w)?;
    }
    if let Some(width) = args.width {
        cfg.width = width;
    }
    if let Some(n) = args.n_rays {
        cfg.n_rays = n;
    }
    setup_threads(args.threads, &cfg);

    let dataset = load_dataset(&args.data)?;
    let train_cfg = cfg.train_config(dataset.z_near(), dataset.z_far());
    let arch = cfg.arch(dataset.world_min(), dataset.world_max());
    cfg.archive(&args.out)?;
    let outcome = train(&train_cfg, &arch, &dataset, &args.out, args.resume)?;
    if let Some(last) = outcome.last {
        println!(
            "trained {} iterations; final total loss {:.6}; checkpoint at {}",
            outcome.iterations,
            last.total,
            outcome.checkpoint_path.display()
        );
    } else {
        println!("nothing to do: checkpoint already at {} iterations", outcome.iterations);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathPose {
    world_from_camera: [[f64; 4]; 4],
    /// Raw time index; must be one of the observed indices.
    time_index: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    intrinsics: Option<PathIntrinsics>,
}

/// Camera path file: the manifest's pose schema without image files.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraPath {
    width: usize,
    height: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    intrinsics: Option<PathIntrinsics>,
    frames: Vec<PathPose>,
}

pub fn cmd_render(args: &RenderArgs) -> Result<()> {
    let cfg = load_config(args.config.as_ref())?;
    setup_threads(args.threads, &cfg);
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let fields = fields_from_checkpoint(&ckpt)?;
    let render_cfg = cfg.render_config(ckpt.z_near, ckpt.z_far);

    let text = std::fs::read_to_string(&args.path).map_err(|e| Error::io(&args.path, e))?;
    let path: CameraPath = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", args.path.display())))?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    cfg.archive(&args.out)?;
    for (k, pose) in path.frames.iter().enumerate() {
        // Novel views are rendered at observed time steps only.
        let slot = ckpt
            .time_indices
            .iter()
            .position(|&ti| ti == pose.time_index)
            .ok_or_else(|| {
                Error::Config(format!(
                    "pose {k}: time index {} was never observed (valid: {:?})",
                    pose.time_index, ckpt.time_indices
                ))
            })?;
        let t = ckpt.times[slot];
        let intr = pose
            .intrinsics
            .or(path.intrinsics)
            .ok_or_else(|| Error::Config(format!("pose {k}: no intrinsics (shared or per-pose)")))?;
        let cam = CameraCalib::new(
            intr.fx,
            intr.fy,
            intr.cx,
            intr.cy,
            path.width,
            path.height,
            pose.world_from_camera,
        )
        .map_err(|e| Error::Config(format!("pose {k}: {e}")))?;

        let (image, depth) = render_view(&fields, &cam, t, &render_cfg, cfg.seed)?;
        let rgb: Vec<u8> = image
            .pixels
            .iter()
            .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        let img = image::RgbImage::from_raw(path.width as u32, path.height as u32, rgb)
            .expect("buffer matches dimensions");
        let color_path = args.out.join(format!("frame_{k:03}.png"));
        img.save(&color_path)
            .map_err(|e| Error::Data(format!("{}: cannot write image: {e}", color_path.display())))?;
        write_pfm_f64(&args.out.join(format!("depth_{k:03}.pfm")), path.width, path.height, &depth)?;
    }
    println!("rendered {} poses to {}", path.frames.len(), args.out.display());
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(args.config.as_ref())?;
    setup_threads(args.threads, &cfg);
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let fields = fields_from_checkpoint(&ckpt)?;
    let heldout = load_dataset(&args.data)?;
    let train_ds = match &args.train_data {
        Some(p) => Some(load_dataset(p)?),
        None => None,
    };
    let render_cfg = cfg.render_config(ckpt.z_near, ckpt.z_far);
    let report = evaluate(
        &fields,
        &heldout,
        train_ds.as_ref(),
        &render_cfg,
        args.mask_source.into(),
        cfg.seed,
    )?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    cfg.archive(&args.out)?;
    let json_path = args.out.join("report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(|e| Error::io(&json_path, e))?;
    let table = report.table();
    let table_path = args.out.join("report.txt");
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    print!("{table}");
    Ok(())
}

/// Maps errors onto the documented exit codes: 2 config, 3 data, 4 numerical
/// divergence.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Domain(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Incompatible(_) => 3,
        Error::NonFinite { .. } => 4,
        Error::Shape { .. } | Error::Contract(_) => 1,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Render(args) => cmd_render(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

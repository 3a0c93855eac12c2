//! `dkn`: train, run and evaluate deformable kernel networks for guided
//! depth upsampling.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dkn_core::filtering::bicubic_resize;
use dkn_core::gradcheck;
use dkn_core::inference::{upsample, UpsampleRequest};
use dkn_core::io::{load_scene, read_image, scan_dataset, write_image, write_scene};
use dkn_core::metrics::{evaluate, Protocol};
use dkn_core::model::{ModelConfig, Network, Variant};
use dkn_core::parallel;
use dkn_core::tensor::Tensor;
use dkn_core::training::{
    generate_scene, load_checkpoint, save_checkpoint, ScenePair, TrainConfig, TrainSet, Trainer,
};

#[derive(Parser)]
#[command(name = "dkn", version, about = "Guided depth upsampling with deformable kernel networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Upsample one depth map with a trained model.
    Upsample(UpsampleArgs),
    /// Evaluate a checkpoint against bicubic interpolation.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write synthetic colour/depth pairs.
    Synth(SynthArgs),
    /// Time DKN and FDKN inference.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Dkn,
    Fdkn,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Dkn => Variant::Dkn,
            VariantArg::Fdkn => Variant::Fdkn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Nyu,
    Scaled255,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "dkn")]
    variant: VariantArg,
    #[arg(long, default_value_t = 4, value_parser = parse_scale)]
    scale: usize,
    #[arg(long)]
    unguided: bool,
    #[arg(long)]
    no_residual: bool,
    /// Keep sampling offsets at zero (regular grid).
    #[arg(long)]
    fixed_offsets: bool,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// Directory of `<name>.color.*` / `<name>.depth.*` pairs.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Train on N generated scenes instead of files.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Side of generated scenes.
    #[arg(long, default_value_t = 96)]
    scene_size: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 40_000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 96)]
    crop: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 10_000)]
    decay_every: usize,
    /// Write the checkpoint every N iterations as well as at the end.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct UpsampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    guide: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the scale the model was trained for.
    #[arg(long, value_parser = parse_scale)]
    scale: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Evaluate on N generated scenes (seeds starting at --seed).
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 1_000_000)]
    seed: u64,
    #[arg(long, default_value_t = 96)]
    scene_size: usize,
    #[arg(long, value_parser = parse_scale)]
    scale: Option<usize>,
    #[arg(long, value_enum, default_value = "scaled255")]
    protocol: ProtocolArg,
    /// Centimetres per normalised depth unit for the nyu protocol.
    #[arg(long, default_value_t = dkn_core::metrics::NYU_CM_PER_UNIT)]
    cm_per_unit: f64,
    /// Exclude this many pixels at each border from the RMSE.
    #[arg(long, default_value_t = 0)]
    border: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value = "96x96", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Use this checkpoint's configuration; the other variant is built fresh.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value = "128x128", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value_t = 3)]
    repeats: usize,
}

fn parse_scale(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(r @ (4 | 8 | 16)) => Ok(r),
        _ => Err(format!("scale must be 4, 8 or 16, got {s}")),
    }
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s}"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in {s}"))?;
    Ok((h, w))
}

fn synthetic_scenes(n: usize, seed: u64, side: usize) -> Result<Vec<ScenePair>> {
    (0..n as u64).map(|i| Ok(generate_scene(seed + i, side, side)?)).collect()
}

fn dataset_scenes(dir: &Path) -> Result<Vec<ScenePair>> {
    let entries = scan_dataset(dir)?;
    entries.iter().map(|e| load_scene(e).with_context(|| format!("loading {}", e.name))).collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        iterations: a.iters,
        batch_size: a.batch,
        base_lr: a.lr,
        decay_every: a.decay_every,
        crop: a.crop,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).with_context(|| format!("resuming from {}", path.display()))?;
            log::info!("resuming at iteration {}", ckpt.iteration);
            Trainer::resume(ckpt, config)?
        }
        None => {
            let model = ModelConfig {
                variant: a.variant.into(),
                kernel_size: a.kernel,
                guided: !a.unguided,
                residual: !a.no_residual,
                learn_offsets: !a.fixed_offsets,
                scale: a.scale,
                guidance_channels: 3,
            };
            Trainer::new(Network::new(model, a.seed)?, config)?
        }
    };
    let scenes = match (&a.data, a.synthetic) {
        (Some(dir), _) => dataset_scenes(dir)?,
        (None, Some(n)) => synthetic_scenes(n, a.seed, a.scene_size)?,
        (None, None) => bail!("--data or --synthetic is required"),
    };
    let model = *trainer.network.config();
    log::info!(
        "training {} ({} parameters) on {} scenes for {} iterations",
        model.variant.name(),
        trainer.network.num_parameters(),
        scenes.len(),
        a.iters
    );
    let set = TrainSet::new(&scenes, model.scale, model.variant)?;
    let start = Instant::now();
    trainer.run(&set, |t| {
        let it = t.iteration;
        if it % 100 == 0 || it == t.config.iterations {
            let recent = &t.history[t.history.len().saturating_sub(100)..];
            let mean = recent.iter().sum::<f64>() / recent.len() as f64;
            log::info!("iteration {it}: mean L1 {mean:.5} ({:.1}s)", start.elapsed().as_secs_f64());
        }
        if a.checkpoint_every.is_some_and(|n| n > 0 && it % n == 0) {
            save_checkpoint(&t.checkpoint(), &a.out)?;
        }
        Ok(())
    })?;
    save_checkpoint(&trainer.checkpoint(), &a.out)?;
    println!("wrote {} after {} iterations", a.out.display(), trainer.iteration);
    Ok(())
}

fn load_network(path: &Path) -> Result<Network<f32>> {
    Ok(load_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))?.network)
}

fn upsample_cmd(a: UpsampleArgs) -> Result<()> {
    let net = load_network(&a.ckpt)?;
    let depth = read_image(&a.depth)?;
    let guide = match &a.guide {
        Some(p) => Some(read_image(p)?),
        None => None,
    };
    let scale = a.scale.unwrap_or(net.config().scale);
    let req = UpsampleRequest { lr_depth: &depth, hr_guidance: guide.as_ref(), scale };
    let out = upsample(&net, &req)?;
    write_image(&out, &a.out)?;
    println!("wrote {} ({}x{})", a.out.display(), out.h(), out.w());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let net = load_network(&a.ckpt)?;
    let scale = a.scale.unwrap_or(net.config().scale);
    let scenes = match (&a.data, a.synthetic) {
        (Some(dir), _) => dataset_scenes(dir)?,
        (None, Some(n)) => synthetic_scenes(n, a.seed, a.scene_size)?,
        (None, None) => bail!("--data or --synthetic is required"),
    };
    let protocol = match a.protocol {
        ProtocolArg::Scaled255 => Protocol::Scaled255,
        ProtocolArg::Nyu => Protocol::Centimeters { cm_per_unit: a.cm_per_unit },
    };
    let report = evaluate(&net, &scenes, scale, protocol, a.border)?;
    let text = report.render();
    print!("{text}");
    if let Some(path) = &a.report {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn gradcheck_cmd(seed: u64) -> Result<()> {
    let (reports, seconds) = gradcheck::full_suite(seed)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed, {seconds:.1}s", reports.len());
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for i in 0..a.n as u64 {
        let scene = generate_scene(a.seed + i, a.size.0, a.size.1)?;
        write_scene(&a.out, &format!("scene{:04}", a.seed + i), &scene)?;
    }
    println!("wrote {} scenes to {}", a.n, a.out.display());
    Ok(())
}

fn time_upsample(net: &Network<f32>, lr: &Tensor<f32>, guide: &Tensor<f32>, repeats: usize) -> Result<f64> {
    let req = UpsampleRequest { lr_depth: lr, hr_guidance: Some(guide), scale: net.config().scale };
    upsample(net, &req)?;
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        upsample(net, &req)?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let base = match &a.ckpt {
        Some(p) => *load_network(p)?.config(),
        None => ModelConfig::dkn(),
    };
    let (h, w) = a.size;
    let r = base.scale;
    if h % r != 0 || w % r != 0 {
        bail!("size {h}x{w} is not divisible by the scale {r}");
    }
    let scene = generate_scene(1, h.max(64), w.max(64))?;
    let guide = scene.color.crop(0, 0, h, w)?;
    let lr = bicubic_resize(&scene.depth.crop(0, 0, h, w)?, h / r, w / r);
    let mut times = Vec::new();
    for variant in [Variant::Dkn, Variant::Fdkn] {
        let cfg = ModelConfig { variant, ..base };
        let net = match &a.ckpt {
            Some(p) if base.variant == variant => load_network(p)?,
            _ => Network::new(cfg, 0)?,
        };
        let t = time_upsample(&net, &lr, &guide, a.repeats)?;
        println!("{:<5} {h}x{w}: {:.4}s", variant.name(), t);
        times.push(t);
    }
    println!("fdkn speed-up: {:.1}x ({} mode)", times[0] / times[1], parallel::MODE);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Upsample(a) => upsample_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck { seed } => gradcheck_cmd(seed),
        Command::Synth(a) => synth_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    parallel::init_from_env();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

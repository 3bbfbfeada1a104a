use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ddit::checkpoint::{read_index, Checkpoint, TENSOR_FILE};
use ddit::conditioning::Modality;
use ddit::config::{Preset, RunConfig};
use ddit::dit::{count_parameters, Bound, DiT};
use ddit::metrics;
use ddit::objectives::{NoiseSchedule, Objective};
use ddit::raster::{LabelRaster, RgbImage};
use ddit::samplers::{self, SampleRequest, SamplerConfig, SamplerKind};
use ddit::toydata::{self, parse_caption};
use ddit::trainer::{self, condition_latent, TrainOptions, NULL_CAPTION};
use ddit::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ddit", version, about = "Dual-stream diffusion transformer on a procedural toy corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a procedural dataset (images, masks, sketches, manifest)
    GenData(GenDataArgs),
    /// Train a model on a dataset's training split
    Train(TrainArgs),
    /// Generate images from a checkpoint and a spatial condition
    Sample(SampleArgs),
    /// Score generations on the held-out split
    Eval(EvalArgs),
    /// Print parameter count, configuration, step and tensor shapes
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Number of samples
    #[arg(long, default_value_t = 1024)]
    n: u64,
    /// Dataset seed
    #[arg(long, env = "DDIT_SEED", default_value_t = 7)]
    seed: u64,
    /// Image side length (32 or 64)
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Named preset (toy or paper-profile)
    #[arg(long, default_value = "toy")]
    preset: String,
    /// TOML file overriding preset fields
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let preset: Preset = self.preset.parse()?;
        match &self.config {
            Some(p) => RunConfig::load(p, preset),
            None => Ok(RunConfig::preset(preset)),
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training objective (ddpm or rfm); overrides the config
    #[arg(long)]
    objective: Option<String>,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Run directory for checkpoints and the loss log
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory to continue from
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Optimizer steps; overrides the config
    #[arg(long)]
    max_steps: Option<usize>,
    /// Batch size; overrides the config
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate; overrides the config
    #[arg(long)]
    lr: Option<f64>,
    /// Training seed; overrides the config
    #[arg(long, env = "DDIT_SEED")]
    seed: Option<u64>,
    /// Stop after this step without changing the schedule
    #[arg(long)]
    stop_at: Option<u64>,
    /// Print a progress line every this many steps (0 disables)
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args, Debug)]
struct SamplingArgs {
    /// Guidance scale
    #[arg(long, default_value_t = 4.0)]
    cfg_scale: f64,
    /// Sampling steps
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Sampler (ddpm, ddim or euler); defaults to the checkpoint's objective
    #[arg(long)]
    sampler: Option<String>,
    /// DDIM stochasticity
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    /// Sampling seed
    #[arg(long, env = "DDIT_SEED", default_value_t = 0)]
    seed: u64,
    /// Also drop the spatial condition in the unconditional branch
    #[arg(long)]
    null_condition: bool,
    /// Use raw weights instead of the EMA
    #[arg(long)]
    raw: bool,
}

impl SamplingArgs {
    fn resolve(&self, trained: Objective) -> Result<(SamplerConfig, samplers::GuidanceConfig)> {
        let kind = match &self.sampler {
            Some(s) => s.parse()?,
            None => SamplerKind::default_for(trained),
        };
        kind.check_objective(trained)?;
        let sampler = SamplerConfig {
            kind,
            steps: self.steps,
            eta: self.eta,
            seed: self.seed,
        };
        let mut guidance = samplers::GuidanceConfig::with_omega(self.cfg_scale);
        guidance.null_condition = self.null_condition;
        Ok((sampler, guidance))
    }
}

#[derive(Args, Debug)]
struct SampleArgs {
    /// Checkpoint directory
    #[arg(long)]
    ckpt: PathBuf,
    /// Condition PNG (palette mask or bilevel sketch)
    #[arg(long)]
    condition: PathBuf,
    /// Condition modality (mask or sketch)
    #[arg(long, default_value = "mask")]
    modality: String,
    /// Caption tokens, space separated; empty means unconditional
    #[arg(long, default_value = "")]
    caption: String,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Number of samples tiled side by side
    #[arg(long, default_value_t = 1)]
    grid: usize,
    /// Output PNG
    #[arg(long, default_value = "sample.png")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint directory
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Held-out samples to generate
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Report directory; defaults to the checkpoint directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct InspectArgs {
    /// Checkpoint directory
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Untrained preset (toy or paper-profile)
    #[arg(long)]
    preset: Option<String>,
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let summary = toydata::write_dataset(a.n, a.seed, a.size, &a.out)?;
    println!("wrote {} samples to {}", a.n, a.out.display());
    println!("{summary:?}");
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(o) = &a.objective {
        cfg.train.objective = o.parse()?;
    }
    if let Some(v) = a.max_steps {
        cfg.train.max_steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.base_lr = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    cfg.validate_for_training()?;
    let every = a.log_every;
    let mut log = |r: &trainer::StepRecord| {
        if every > 0 && r.step % every == 0 {
            println!("step {} lr {:.3e} loss {:.5} grad_norm {:.4}", r.step, r.lr, r.loss, r.grad_norm);
        }
    };
    let opts = TrainOptions {
        resume: a.resume.clone(),
        stop_at: a.stop_at,
        on_step: Some(&mut log),
    };
    let out = trainer::train(&cfg.train, &cfg.model, &cfg.codec, &a.data, &a.out, opts)?;
    println!(
        "finished at step {} (smoothed loss {:.5}); checkpoint {}",
        out.checkpoint.meta.step,
        out.checkpoint.meta.smoothed_loss,
        out.final_dir.display()
    );
    Ok(())
}

fn read_condition(path: &Path, modality: Modality) -> Result<LabelRaster> {
    match modality {
        Modality::Mask => LabelRaster::read_paletted_png(path),
        Modality::Sketch => LabelRaster::read_bilevel_png(path),
    }
}

fn sample(a: &SampleArgs) -> Result<()> {
    if a.grid == 0 {
        return Err(Error::Usage("--grid must be at least 1".into()));
    }
    let modality: Modality = a.modality.parse()?;
    let caption = if a.caption.trim().is_empty() {
        NULL_CAPTION.to_vec()
    } else {
        parse_caption(&a.caption)?
    };
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (sampler, guidance) = a.sampling.resolve(ckpt.meta.train.objective)?;
    let raster = read_condition(&a.condition, modality)?;
    let z_c = condition_latent::<f32>(&ckpt.meta.codec, modality, &raster, &raster)?;
    let model = DiT::new(ckpt.meta.model.clone())?;
    let params = if a.sampling.raw { &ckpt.params } else { &ckpt.ema };
    let reqs: Vec<_> = (0..a.grid)
        .map(|_| SampleRequest {
            z_c: &z_c,
            caption: &caption,
            modality,
        })
        .collect();
    let bound = Bound { model: &model, params };
    let latents = samplers::sample(&bound, &reqs, &guidance, &sampler, &NoiseSchedule::default())?;
    let tiles: Vec<RgbImage> = latents
        .iter()
        .map(|z| ckpt.meta.codec.decode(z)?.to_rgb())
        .collect::<Result<_>>()?;
    let image = if tiles.len() == 1 { tiles.into_iter().next().expect("one tile") } else { RgbImage::hstack(&tiles)? };
    image.write_png(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (sampler, guidance) = a.sampling.resolve(ckpt.meta.train.objective)?;
    let report = metrics::evaluate(&ckpt, &a.data, &sampler, &guidance, a.n, !a.sampling.raw)?;
    let dir = a.out.clone().unwrap_or_else(|| a.ckpt.clone());
    report.write(&dir)?;
    println!("ssim {:.4}", report.ssim);
    println!("pixel_accuracy {:.4}", report.pixel_accuracy);
    println!("miou {:.4}", report.miou);
    println!("report written to {}", dir.join(metrics::REPORT_FILE).display());
    Ok(())
}

fn print_shapes(entries: impl Iterator<Item = (String, Vec<usize>)>) {
    println!("tensors:");
    for (name, shape) in entries {
        println!("  {name} {shape:?}");
    }
}

fn inspect(a: &InspectArgs) -> Result<()> {
    if let Some(dir) = &a.ckpt {
        let meta = Checkpoint::read_meta(dir)?;
        println!("parameters: {}", count_parameters(&meta.model));
        println!("step: {}", meta.step);
        println!("smoothed_loss: {}", meta.smoothed_loss);
        println!("{}", toml::to_string(&meta).map_err(|e| Error::State(e.to_string()))?);
        let index = read_index(&dir.join(TENSOR_FILE))?;
        print_shapes(
            index
                .into_iter()
                .filter_map(|e| e.name.strip_prefix("model/").map(|n| (n.to_string(), e.shape.clone()))),
        );
    } else if let Some(p) = &a.preset {
        let cfg = RunConfig::preset(p.parse()?);
        println!("parameters: {}", count_parameters(&cfg.model));
        println!("step: untrained");
        println!("{}", cfg.to_toml()?);
        let model = DiT::new(cfg.model.clone())?;
        print_shapes(model.layout.entries.iter().map(|s| (s.name.clone(), s.shape.clone())));
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        Error::Shape(_) | Error::Input(_) | Error::State(_) | Error::Io { .. } | Error::Format { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

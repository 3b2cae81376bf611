//! `m3l`: train, evaluate and inspect visuo-tactile insertion agents.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use m3l::config::{Modalities, RunConfig, Split, TrainMode};
use m3l::eval::{ablate_frame_stack, dump_reconstructions, evaluate, EvalOptions};
use m3l::gradcheck::{self, GradcheckOptions};
use m3l::trainer::{list_checkpoints, CycleReport, Trainer, CONFIG_FILE};

/// Environment variable naming the directory that holds run directories.
const OUTPUT_ROOT_ENV: &str = "M3L_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "m3l", version, about = "Masked multimodal learning for visuo-tactile insertion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent.
    Train(TrainArgs),
    /// Evaluate the last checkpoints of a run.
    Eval(EvalArgs),
    /// Write masked-reconstruction images from a checkpoint.
    Reconstruct(ReconstructArgs),
    /// Compare analytic and finite-difference gradients of every loss.
    Gradcheck(GradcheckArgs),
    /// Train one run per frame-stack size and plot the curves.
    AblateStack(AblateArgs),
}

/// Config sources, lowest precedence first: preset, config file, `--set`, dedicated flags.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// `desk` or `paper`.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// TOML config file; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `trainer.rollout_length=512`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    total_env_steps: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str::<RunConfig>(&text).map_err(|e| anyhow::anyhow!("invalid config {}: {e}", path.display()))?
            }
            None => RunConfig::preset(&self.preset)?,
        };
        for item in &self.overrides {
            let (key, value) = item.split_once('=').with_context(|| format!("`--set {item}` must look like KEY=VALUE"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(steps) = self.total_env_steps {
            cfg.trainer.total_env_steps = steps;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory name under the output root (default `<preset>_<mode>_s<seed>`).
    #[arg(long)]
    name: Option<String>,
    /// Continue from the newest checkpoint of an existing run directory.
    #[arg(long, conflicts_with = "name")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding `checkpoints/`.
    run: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Policy input, e.g. `vision` or `vision,touch` (default: as trained).
    #[arg(long)]
    modalities: Option<Modalities>,
    /// Episodes per checkpoint (default from the run config).
    #[arg(long)]
    episodes: Option<usize>,
    /// How many of the newest checkpoints to evaluate (default from the run config).
    #[arg(long)]
    checkpoints: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path (default `<run>/eval_<split>_<modalities>.toml`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Run directory (newest checkpoint) or a checkpoint file.
    source: PathBuf,
    #[arg(long, default_value_t = 4)]
    samples: usize,
    /// Masking ratio (default from the checkpoint config).
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (default `<run>/reconstructions`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check in double precision against the tighter tolerance.
    #[arg(long)]
    double: bool,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Corrupt the analytic gradients; the check must then fail.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Frame-stack sizes to compare.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    k: Vec<usize>,
    /// Directory name under the output root (default `ablate_stack_<mode>_s<seed>`).
    #[arg(long)]
    name: Option<String>,
}

fn output_root(cfg: &RunConfig) -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(&cfg.output_dir))
}

fn log_cycle(r: &CycleReport) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
    eprintln!(
        "cycle {:>4}  steps {:>9}  return {:>9}  success {:>5}  l_rep {:.4}  l_ppo {:.4}",
        r.cycle,
        r.env_steps,
        fmt(r.episode_return_mean()),
        fmt(r.success_rate()),
        r.update.breakdown.l_rep,
        r.update.breakdown.l_ppo
    );
}

fn train(args: TrainArgs) -> Result<()> {
    let (mut trainer, dir) = match &args.resume {
        Some(dir) => {
            let mut t = Trainer::resume(dir)?;
            if let Some(steps) = args.config.total_env_steps {
                t.set_total_env_steps(steps);
            }
            eprintln!("resuming {} at {} env steps", dir.display(), t.env_steps());
            (t, dir.clone())
        }
        None => {
            let mut cfg = args.config.resolve()?;
            let name = args.name.clone().unwrap_or_else(|| format!("{}_{}_s{}", cfg.preset, cfg.mode, cfg.seed));
            let dir = output_root(&cfg).join(name);
            cfg.output_dir = dir.display().to_string();
            if dir.join(CONFIG_FILE).exists() {
                bail!("{} already holds a run; pass --resume to continue it or --name to start another", dir.display());
            }
            (Trainer::new(cfg)?, dir)
        }
    };
    trainer.train(&dir, log_cycle)?;
    println!("{}", dir.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.run.join(CONFIG_FILE))?;
    let all = list_checkpoints(&args.run)?;
    if all.is_empty() {
        bail!("no checkpoints under {}", args.run.display());
    }
    let n = args.checkpoints.unwrap_or(cfg.eval.checkpoints);
    let chosen = all[all.len().saturating_sub(n)..].to_vec();
    let mut opts = EvalOptions::from_config(&cfg);
    opts.split = args.split;
    opts.modalities = args.modalities;
    opts.model_config = Some(cfg.clone());
    if let Some(e) = args.episodes {
        opts.episodes_per_checkpoint = e;
    }
    if let Some(s) = args.seed {
        opts.seed = s;
    }
    let report = evaluate(&chosen, &opts)?;
    let out = args.out.unwrap_or_else(|| args.run.join(format!("eval_{}_{}.toml", report.split, report.modalities.replace(',', "+"))));
    std::fs::write(&out, report.to_toml()).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{} episodes on {}: success {:.3} (se {:.3}), mean return {:.1} -> {}",
        report.episodes,
        report.split,
        report.success_rate,
        report.success_std_error,
        report.mean_return,
        out.display()
    );
    Ok(())
}

fn reconstruct(args: ReconstructArgs) -> Result<()> {
    let (ckpt, run_dir) = if args.source.is_dir() {
        let newest = list_checkpoints(&args.source)?.pop().with_context(|| format!("no checkpoints under {}", args.source.display()))?;
        (newest, args.source.clone())
    } else {
        let parent = args.source.parent().and_then(Path::parent).unwrap_or(Path::new(".")).to_path_buf();
        (args.source.clone(), parent)
    };
    let out = args.out.unwrap_or_else(|| run_dir.join("reconstructions"));
    let dump = dump_reconstructions(&ckpt, args.samples, args.mask_ratio, args.seed, &out)?;
    for path in dump.vision.iter().chain(&dump.touch) {
        println!("{}", path.display());
    }
    eprintln!("mse_pixels {:.5}  mse_taxels {:.5}", dump.mse_pixels, dump.mse_taxels);
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<bool> {
    let report = gradcheck::run(&GradcheckOptions { double: args.double, inject_fault: args.inject_fault, seed: args.seed })?;
    for c in &report.components {
        println!(
            "{:<9} max_rel_error {:.3e}  tolerance {:.0e}  {}  (worst: {})",
            c.name,
            c.max_rel_error,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" },
            c.worst
        );
    }
    Ok(report.passed())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let name = args.name.clone().unwrap_or_else(|| format!("ablate_stack_{}_s{}", cfg.mode, cfg.seed));
    let root = output_root(&cfg).join(name);
    let result = ablate_frame_stack(&cfg, &args.k, &root, |k, r| {
        eprint!("k={k}  ");
        log_cycle(r);
    })?;
    println!("{}", result.curves.display());
    println!("{}", result.success_plot.display());
    println!("{}", result.return_plot.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Reconstruct(a) => reconstruct(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::AblateStack(a) => ablate(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

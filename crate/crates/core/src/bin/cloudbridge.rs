use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cloudbridge::commands::{
    cmd_eval, cmd_infer, cmd_make_data, cmd_train, EvalOptions, InferOptions, SceneSelection,
};
use cloudbridge::config::RunConfig;
use cloudbridge::data::Split;
use cloudbridge::inference::SamplerMode;
use cloudbridge::{Error, Result};

/// Cloud removal with a SAR-guided diffusion bridge.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset directory (default: $CLOUDBRIDGE_DATA_ROOT or ./data).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Directory for checkpoints, logs and reports.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    MakeData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Scene height and width.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the restorer.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train with stochastic mixing at this beta peak.
        #[arg(long)]
        sde_beta_max: Option<f64>,
        /// Continue from <run-dir>/last.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Restore scenes and write images.
    Infer {
        #[command(flatten)]
        sampler: SamplerArgs,
        /// A single scene directory (scenes/<id>).
        #[arg(long, conflicts_with_all = ["split", "limit"])]
        scene: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the state before every restorer call.
        #[arg(long)]
        trace: bool,
        /// Also write cloudy | restored | reference panels.
        #[arg(long)]
        grid: bool,
    },
    /// Score a split and write metric reports.
    Eval {
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value = "test")]
        split: String,
        /// Add the NFE sweep and the ODE/SDE comparison.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SamplerArgs {
    /// Defaults to <run-dir>/best.ckpt.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of restorer calls; must divide T.
    #[arg(long)]
    nfe: Option<usize>,
    /// `ode` or `sde`.
    #[arg(long)]
    mode: Option<String>,
    /// Noise seed for `sde` sampling.
    #[arg(long)]
    sampler_seed: Option<u64>,
}

impl SamplerArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(n) = self.nfe {
            cfg.infer.nfe = n;
        }
        if let Some(m) = &self.mode {
            cfg.infer.mode = SamplerMode::parse(m)?;
        }
        if let Some(s) = self.sampler_seed {
            cfg.infer.seed = s;
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = cli.data_dir {
        cfg.paths.data_dir = d;
    }
    if let Some(d) = cli.run_dir {
        cfg.paths.run_dir = d;
    }
    match cli.command {
        Command::MakeData { count, seed, size } => {
            if let Some(n) = count {
                cfg.data.count = n;
            }
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            if let Some(s) = size {
                cfg.data.height = s;
                cfg.data.width = s;
            }
            let m = cmd_make_data(&cfg)?;
            println!("{} scenes, manifest sha256 {}", m.entries.len(), m.hash);
        }
        Command::Train { epochs, batch_size, lr, seed, sde_beta_max, resume } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(l) = lr {
                cfg.train.learning_rate = l;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if sde_beta_max.is_some() {
                cfg.train.sde_beta_max = sde_beta_max;
            }
            let s = cmd_train(&cfg, resume)?;
            let f = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.3}"));
            println!(
                "{} steps in {:.0}s; val PSNR {} -> {} (best {})",
                s.steps,
                s.seconds,
                f(s.initial_val_psnr),
                f(s.final_val_psnr),
                f(s.best_val_psnr)
            );
        }
        Command::Infer { sampler, scene, split, limit, out, trace, grid } => {
            sampler.apply(&mut cfg)?;
            let scenes = match scene {
                Some(dir) => SceneSelection::Dir(dir),
                None => SceneSelection::Split { split: Split::parse(&split)?, limit },
            };
            let opts = InferOptions { checkpoint: sampler.checkpoint, scenes, out_dir: out, trace, grid };
            let s = cmd_infer(&cfg, &opts)?;
            println!(
                "{} restored images, {} trace frames, {} grids",
                s.restored.len(),
                s.frames.len(),
                s.grids.len()
            );
        }
        Command::Eval { sampler, split, sweep, out } => {
            sampler.apply(&mut cfg)?;
            let opts = EvalOptions { checkpoint: sampler.checkpoint, split: Split::parse(&split)?, sweep, out_dir: out };
            let s = cmd_eval(&cfg, &opts)?;
            let (r, b) = (&s.report.overall.mean, &s.baseline.overall.mean);
            println!(
                "{} scenes: PSNR {:.3} (cloudy {:.3}), SSIM {:.4}, MAE {:.4}",
                s.report.overall.count, r.psnr, b.psnr, r.ssim, r.mae
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}

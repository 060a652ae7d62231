//! Trains on a small synthetic dataset through the library API and shows
//! the loss curve and validation PSNR per epoch.
//!
//! cargo run --release --example train_small -- [run_dir] [scenes] [epochs]

use std::path::PathBuf;

use cloudbridge::commands::{cmd_make_data, cmd_train};
use cloudbridge::config::RunConfig;

fn main() -> cloudbridge::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let root = PathBuf::from(args.next().unwrap_or_else(|| "runs/train_small".into()));
    let count: usize = args.next().map_or(80, |a| a.parse().expect("scene count"));
    let epochs: usize = args.next().map_or(3, |a| a.parse().expect("epochs"));

    let mut cfg = RunConfig::default();
    cfg.paths.data_dir = root.join("data");
    cfg.paths.run_dir = root.join("run");
    cfg.data.count = count;
    cfg.train.epochs = epochs;

    let manifest = cmd_make_data(&cfg)?;
    println!("dataset: {} scenes in {}", manifest.entries.len(), cfg.paths.data_dir.display());

    let s = cmd_train(&cfg, false)?;
    let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2} dB"));
    println!(
        "{} steps over {} epochs in {:.0}s; val PSNR {} -> {} (best {})",
        s.steps,
        s.epochs,
        s.seconds,
        show(s.initial_val_psnr),
        show(s.final_val_psnr),
        show(s.best_val_psnr)
    );
    println!("checkpoints and loss.log are in {}", cfg.paths.run_dir.display());
    Ok(())
}

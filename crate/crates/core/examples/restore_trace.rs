//! Restores one test scene with a checkpoint and writes the state before
//! every restorer call, for several NFE settings.
//!
//! cargo run --release --example restore_trace -- <run_dir> [out_dir]
//!
//! `run_dir` is a directory produced by the `train_small` example or by
//! `cloudbridge train` (its `config.toml` and `best.ckpt` are used).

use std::path::PathBuf;

use cloudbridge::checkpoint::load_checkpoint;
use cloudbridge::commands::BEST_CHECKPOINT;
use cloudbridge::config::RunConfig;
use cloudbridge::data::load_dataset;
use cloudbridge::inference::{run_inference_traced, InferenceConfig};
use cloudbridge::metrics::psnr;
use cloudbridge::raster::write_grid;

fn main() -> cloudbridge::Result<()> {
    let mut args = std::env::args().skip(1);
    let run = PathBuf::from(args.next().expect("usage: restore_trace <run_dir> [out_dir]"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "trace_preview".into()));
    std::fs::create_dir_all(&out).expect("cannot create output directory");

    let cfg = RunConfig::load(&run.join("config.toml"))?;
    let ck = load_checkpoint(&run.join(BEST_CHECKPOINT))?;
    let data = load_dataset(&cfg.paths.data_dir)?;
    let scene = data.splits.test.first().expect("empty test split");
    println!(
        "{}: cloud fraction {:.2}, cloudy PSNR {:.2} dB",
        scene.scene_id,
        scene.cloud_fraction,
        psnr(&scene.y, &scene.x0, 1.0)?
    );

    for nfe in [1, 2, 5, 10] {
        let icfg = InferenceConfig { nfe, ..Default::default() };
        let traj = run_inference_traced(&scene.y, &scene.z, &ck.model, &ck.schedule, &icfg)?;
        let restored = traj.output.clamped();
        let mut panels: Vec<_> = traj.frames.iter().map(|(_, img)| img).collect();
        panels.push(&restored);
        panels.push(&scene.x0);
        let path = out.join(format!("{}_nfe{nfe:02}.png", scene.scene_id));
        write_grid(&path, &panels, cfg.report.rgb_bands, &[("nfe", &nfe.to_string())])?;
        let ts: Vec<usize> = traj.frames.iter().map(|(t, _)| *t).collect();
        println!(
            "NFE {nfe:>2}: calls at t = {ts:?}, PSNR {:.2} dB -> {}",
            psnr(&restored, &scene.x0, 1.0)?,
            path.display()
        );
    }
    Ok(())
}

//! The four command-line workflows, callable as library functions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};

use crate::backbone::Backbone;
use crate::checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint, Progress};
use crate::config::RunConfig;
use crate::data::{load_dataset, load_scene, write_dataset, DatasetManifest, ImageTriplet, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::inference::{batch_inference, run_inference_traced, InferenceConfig, SamplerMode};
use crate::metrics::{
    comparison_table, stratified_report, write_comparison_csv, ComparisonRow, ImageMetrics, MetricsReport,
};
use crate::raster;
use crate::rawio;
use crate::training::{train_loop, validation_psnr, LossRecord, TrainState};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOSS_LOG: &str = "loss.log";

/// Generates the synthetic dataset into `paths.data_dir`.
pub fn cmd_make_data(cfg: &RunConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let splits = cfg.data.generate()?;
    let manifest = write_dataset(&cfg.paths.data_dir, &splits, &cfg.data)?;
    log::info!(
        "wrote {} scenes to {} (manifest {})",
        manifest.entries.len(),
        cfg.paths.data_dir.display(),
        &manifest.hash[..12]
    );
    Ok(manifest)
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub initial_val_psnr: Option<f64>,
    pub final_val_psnr: Option<f64>,
    pub best_val_psnr: Option<f64>,
    pub config_hash: String,
    pub seconds: f64,
}

fn write_loss_log(path: &Path, run_hash: &str, history: &[LossRecord]) -> Result<()> {
    let mut s = format!("# run_config_hash={run_hash}\nstep\tt\tloss\n");
    for r in history {
        let ts: Vec<String> = r.ts.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(s, "{}\t{}\t{}", r.step, ts.join(","), r.loss);
    }
    rawio::write_text(path, &s)
}

/// Trains on the dataset in `paths.data_dir`, writing `last.ckpt`,
/// `best.ckpt` and `loss.log` into `paths.run_dir` after every epoch.
/// With `resume`, continues from an existing `last.ckpt`.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let started = Instant::now();
    let data = load_dataset(&cfg.paths.data_dir)?;
    let run = &cfg.paths.run_dir;
    rawio::create_dir(run)?;
    let run_hash = cfg.hash()?;
    rawio::write_text(&run.join("config.toml"), &cfg.to_toml()?)?;
    let sched = cfg.train.schedule()?;
    let hash = config_hash(&cfg.model, &sched);
    let last = run.join(LAST_CHECKPOINT);

    let mut state = if resume && last.exists() {
        let ck = load_checkpoint(&last)?;
        if ck.config_hash() != hash {
            return Err(Error::Config(format!(
                "{} was trained with a different model/schedule configuration",
                last.display()
            )));
        }
        log::info!("resuming from step {} (epoch {})", ck.progress.step, ck.progress.epoch);
        ck.into_train_state(cfg.train.learning_rate)
    } else {
        let model = Backbone::new(&cfg.model, cfg.train.steps, DType::F32, &Device::Cpu, cfg.train.seed)?;
        TrainState::new(model, cfg.train.learning_rate)
    };

    let initial_val_psnr = if data.splits.val.is_empty() || state.step > 0 {
        None
    } else {
        Some(validation_psnr(&state.model, &sched, &data.splits.val)?)
    };
    let mut final_val_psnr = None;
    let progress = |st: &TrainState| Progress {
        step: st.step,
        epoch: st.epoch,
        seed: cfg.train.seed,
        best_val_psnr: st.best_val_psnr,
    };
    train_loop(&mut state, &data.splits.train, &data.splits.val, &cfg.train, |report, st| {
        final_val_psnr = report.val_psnr;
        let p = progress(st);
        save_checkpoint(&last, &st.model, &sched, &p, Some(&st.optimizer), &st.loss_history)?;
        if report.improved || report.val_psnr.is_none() {
            save_checkpoint(&run.join(BEST_CHECKPOINT), &st.model, &sched, &p, None, &st.loss_history)?;
        }
        write_loss_log(&run.join(LOSS_LOG), &run_hash, &st.loss_history)
    })?;
    let summary = TrainSummary {
        steps: state.step,
        epochs: state.epoch,
        initial_val_psnr,
        final_val_psnr,
        best_val_psnr: state.best_val_psnr,
        config_hash: hash,
        seconds: started.elapsed().as_secs_f64(),
    };
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    rawio::write_text(
        &run.join("train_summary.txt"),
        &format!(
            "config_hash={}\nrun_config_hash={run_hash}\nsteps={}\nepochs={}\ninitial_val_psnr={}\nfinal_val_psnr={}\nbest_val_psnr={}\nseconds={:.1}\n",
            summary.config_hash,
            summary.steps,
            summary.epochs,
            opt(summary.initial_val_psnr),
            opt(summary.final_val_psnr),
            opt(summary.best_val_psnr),
            summary.seconds
        ),
    )?;
    Ok(summary)
}

/// Which scenes `infer` processes.
#[derive(Debug, Clone, PartialEq)]
pub enum SceneSelection {
    /// A single `scenes/<id>` directory.
    Dir(PathBuf),
    /// The first `limit` scenes of a dataset split (all when `None`).
    Split { split: Split, limit: Option<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOptions {
    /// Defaults to `<run_dir>/best.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub scenes: SceneSelection,
    /// Defaults to `<run_dir>/infer`.
    pub out_dir: Option<PathBuf>,
    pub trace: bool,
    pub grid: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            checkpoint: None,
            scenes: SceneSelection::Split {
                split: Split::Test,
                limit: None,
            },
            out_dir: None,
            trace: false,
            grid: false,
        }
    }
}

/// Files written by `infer`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InferSummary {
    pub restored: Vec<PathBuf>,
    pub frames: Vec<PathBuf>,
    pub grids: Vec<PathBuf>,
}

fn open_checkpoint(cfg: &RunConfig, explicit: Option<&Path>) -> Result<Checkpoint> {
    let path = explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.run_dir.join(BEST_CHECKPOINT));
    load_checkpoint(&path)
}

fn check_scenes(ck: &Checkpoint, scenes: &[ImageTriplet]) -> Result<()> {
    let m = ck.model.config();
    for s in scenes {
        if s.y.channels() != m.opt_channels {
            return Err(Error::invalid(format!(
                "scene {}: tensor `opt_intro.weight` expects {} optical bands, got {}",
                s.scene_id,
                m.opt_channels,
                s.y.channels()
            )));
        }
        if s.z.channels() != m.sar_channels {
            return Err(Error::invalid(format!(
                "scene {}: tensor `sar_intro.weight` expects {} SAR channels, got {}",
                s.scene_id,
                m.sar_channels,
                s.z.channels()
            )));
        }
        let k = m.size_multiple();
        if s.y.height() % k != 0 || s.y.width() % k != 0 {
            return Err(Error::invalid(format!(
                "scene {}: size {}x{} is not a multiple of {k}",
                s.scene_id,
                s.y.height(),
                s.y.width()
            )));
        }
    }
    Ok(())
}

fn select_scenes(cfg: &RunConfig, sel: &SceneSelection) -> Result<Vec<ImageTriplet>> {
    match sel {
        SceneSelection::Dir(dir) => Ok(vec![load_scene(dir)?]),
        SceneSelection::Split { split, limit } => {
            let data = load_dataset(&cfg.paths.data_dir)?;
            let mut scenes = data.splits.get(*split).to_vec();
            if let Some(n) = limit {
                scenes.truncate(*n);
            }
            if scenes.is_empty() {
                return Err(Error::invalid(format!("split `{}` has no scenes", split.name())));
            }
            Ok(scenes)
        }
    }
}

fn icfg_text(icfg: &InferenceConfig) -> String {
    format!("nfe={} mode={} seed={}", icfg.nfe, icfg.mode.name(), icfg.seed)
}

/// Restores the selected scenes, writing PNG and raw outputs, optional
/// per-step trajectory frames and comparison grids.
pub fn cmd_infer(cfg: &RunConfig, opts: &InferOptions) -> Result<InferSummary> {
    cfg.validate()?;
    let ck = open_checkpoint(cfg, opts.checkpoint.as_deref())?;
    let scenes = select_scenes(cfg, &opts.scenes)?;
    check_scenes(&ck, &scenes)?;
    let out = opts.out_dir.clone().unwrap_or_else(|| cfg.paths.run_dir.join("infer"));
    rawio::create_dir(&out)?;
    let hash = ck.config_hash();
    let settings = icfg_text(&cfg.infer);
    let meta = [("config_hash", hash.as_str()), ("sampler", settings.as_str())];
    let bands = cfg.report.rgb_bands;
    let mut summary = InferSummary::default();
    for (i, s) in scenes.iter().enumerate() {
        let tr = run_inference_traced(&s.y, &s.z, &ck.model, &ck.schedule, &cfg.infer).map_err(|e| Error::Item {
            index: i,
            source: Box::new(e),
        })?;
        let restored = out.join(format!("{}_restored.png", s.scene_id));
        raster::write_rgb_png(&restored, &tr.output, bands, &meta)?;
        raster::write_raw(&out, &format!("{}_restored", s.scene_id), &tr.output, &hash)?;
        summary.restored.push(restored);
        if opts.trace {
            for (k, (t, frame)) in tr.frames.iter().enumerate() {
                let p = out.join(format!("{}_trace_{k:02}_t{t:04}.png", s.scene_id));
                raster::write_rgb_png(&p, frame, bands, &meta)?;
                summary.frames.push(p);
            }
            let p = out.join(format!("{}_trace_final.png", s.scene_id));
            raster::write_rgb_png(&p, &tr.output, bands, &meta)?;
            summary.frames.push(p);
        }
        if opts.grid {
            let p = out.join(format!("{}_grid.png", s.scene_id));
            raster::write_grid(&p, &[&s.y, &tr.output, &s.x0], bands, &meta)?;
            summary.grids.push(p);
        }
    }
    log::info!("restored {} scenes into {}", scenes.len(), out.display());
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    /// Also run the NFE sweep and the ODE/SDE comparison.
    pub sweep: bool,
    /// Defaults to `<run_dir>/eval`.
    pub out_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            checkpoint: None,
            split: Split::Test,
            sweep: false,
            out_dir: None,
        }
    }
}

/// Reports produced by `eval`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub report: MetricsReport,
    /// Cloudy input scored against the reference.
    pub baseline: MetricsReport,
    pub nfe_sweep: Vec<ComparisonRow>,
    pub ode_sde: Vec<ComparisonRow>,
}

fn score(scenes: &[ImageTriplet], outputs: &[Image]) -> Result<MetricsReport> {
    let rows = scenes
        .iter()
        .zip(outputs)
        .map(|(s, o)| ImageMetrics::compute(&s.scene_id, &o.clamped(), &s.x0, s.cloud_fraction as f64))
        .collect::<Result<Vec<_>>>()?;
    stratified_report(rows)
}

fn restore_all(ck: &Checkpoint, scenes: &[ImageTriplet], icfg: &InferenceConfig) -> Result<MetricsReport> {
    let pairs: Vec<_> = scenes.iter().map(|s| (&s.y, &s.z)).collect();
    let outputs = batch_inference(&pairs, &ck.model, &ck.schedule, icfg)?;
    score(scenes, &outputs)
}

/// Scores a split, writing `report.txt`/`report.csv` and, with `sweep`,
/// `nfe_sweep.*` and `ode_sde.*` comparison tables. The ODE/SDE table
/// covers the multi-step settings of the sweep.
pub fn cmd_eval(cfg: &RunConfig, opts: &EvalOptions) -> Result<EvalSummary> {
    cfg.validate()?;
    let ck = open_checkpoint(cfg, opts.checkpoint.as_deref())?;
    let scenes = select_scenes(
        cfg,
        &SceneSelection::Split {
            split: opts.split,
            limit: None,
        },
    )?;
    check_scenes(&ck, &scenes)?;
    let out = opts.out_dir.clone().unwrap_or_else(|| cfg.paths.run_dir.join("eval"));
    rawio::create_dir(&out)?;
    let prov = format!(
        "config_hash={} split={} step={} {}",
        ck.config_hash(),
        opts.split.name(),
        ck.progress.step,
        icfg_text(&cfg.infer)
    );

    let report = restore_all(&ck, &scenes, &cfg.infer)?;
    let inputs: Vec<Image> = scenes.iter().map(|s| s.y.clone()).collect();
    let baseline = score(&scenes, &inputs)?;
    let title = format!("restored vs reference ({} scenes)", scenes.len());
    rawio::write_text(&out.join("report.txt"), &report.to_table(&title, &prov))?;
    report.write_csv(&out.join("report.csv"), &prov)?;
    rawio::write_text(
        &out.join("baseline.txt"),
        &baseline.to_table("cloudy input vs reference", &prov),
    )?;
    baseline.write_csv(&out.join("baseline.csv"), &prov)?;

    let (mut nfe_sweep, mut ode_sde) = (Vec::new(), Vec::new());
    if opts.sweep {
        let baseline_row = ComparisonRow {
            label: "cloudy input".into(),
            summary: baseline.overall.clone(),
        };
        nfe_sweep.push(baseline_row.clone());
        ode_sde.push(baseline_row);
        // With a single call no noise is ever injected, so the samplers are
        // compared at the multi-step settings only.
        let mut multi: Vec<usize> = cfg.report.nfe_sweep.iter().copied().filter(|&n| n > 1).collect();
        if multi.is_empty() {
            multi.push(cfg.infer.nfe);
        }
        let run = |nfe: usize, mode: SamplerMode| -> Result<ComparisonRow> {
            let icfg = InferenceConfig { nfe, mode, ..cfg.infer };
            Ok(ComparisonRow {
                label: format!("{} nfe={nfe}", mode.name()),
                summary: restore_all(&ck, &scenes, &icfg)?.overall,
            })
        };
        for &nfe in &cfg.report.nfe_sweep {
            nfe_sweep.push(run(nfe, SamplerMode::Ode)?);
        }
        for nfe in multi {
            let ode = match cfg.report.nfe_sweep.iter().position(|&n| n == nfe) {
                Some(i) => nfe_sweep[i + 1].clone(),
                None => run(nfe, SamplerMode::Ode)?,
            };
            ode_sde.push(ode);
            ode_sde.push(run(nfe, SamplerMode::Sde)?);
        }
        rawio::write_text(
            &out.join("nfe_sweep.txt"),
            &comparison_table("mean metrics by number of restorer calls", &prov, &nfe_sweep),
        )?;
        write_comparison_csv(&out.join("nfe_sweep.csv"), &prov, &nfe_sweep)?;
        rawio::write_text(
            &out.join("ode_sde.txt"),
            &comparison_table("deterministic vs stochastic sampling", &prov, &ode_sde),
        )?;
        write_comparison_csv(&out.join("ode_sde.csv"), &prov, &ode_sde)?;
    }
    Ok(EvalSummary {
        report,
        baseline,
        nfe_sweep,
        ode_sde,
    })
}

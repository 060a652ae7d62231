//! The four commands end to end on small synthetic data.

use std::fs;
use std::path::Path;

use cloudbridge::checkpoint::load_checkpoint;
use cloudbridge::commands::{
    cmd_eval, cmd_infer, cmd_make_data, cmd_train, EvalOptions, InferOptions, SceneSelection,
    BEST_CHECKPOINT, LAST_CHECKPOINT, LOSS_LOG,
};
use cloudbridge::config::RunConfig;
use cloudbridge::data::Split;
use cloudbridge::Error;

fn small(root: &Path, count: usize, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.paths.data_dir = root.join("data");
    cfg.paths.run_dir = root.join("run");
    cfg.data.count = count;
    cfg.data.height = 16;
    cfg.data.width = 16;
    cfg.model = cloudbridge::backbone::BackboneConfig::tiny(13);
    cfg.train.epochs = epochs;
    cfg
}

fn loss_rows(run: &Path) -> Vec<String> {
    fs::read_to_string(run.join(LOSS_LOG))
        .unwrap()
        .lines()
        .skip(2)
        .map(str::to_string)
        .collect()
}

#[test]
fn smoke_train_writes_checkpoints_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 10, 2);
    let manifest = cmd_make_data(&cfg).unwrap();
    assert_eq!(manifest.entries.len(), 10);
    let s = cmd_train(&cfg, false).unwrap();
    // 8 training scenes, batch 4.
    assert_eq!((s.steps, s.epochs), (4, 2));
    let run = &cfg.paths.run_dir;
    for f in [LAST_CHECKPOINT, BEST_CHECKPOINT, "config.toml", "train_summary.txt"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let rows = loss_rows(run);
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("1\t"));
    let last = load_checkpoint(&run.join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(last.progress.step, 4);
    assert!(last.optimizer.is_some());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let full = small(a.path(), 10, 2);
    cmd_make_data(&full).unwrap();
    cmd_train(&full, false).unwrap();

    let b = tempfile::tempdir().unwrap();
    let first = small(b.path(), 10, 1);
    cmd_make_data(&first).unwrap();
    cmd_train(&first, false).unwrap();
    assert_eq!(loss_rows(&first.paths.run_dir).len(), 2);
    let second = small(b.path(), 10, 2);
    let s = cmd_train(&second, true).unwrap();
    assert_eq!(s.steps, 4);

    let resumed = loss_rows(&second.paths.run_dir);
    assert!(resumed[2].starts_with("3\t"));
    assert_eq!(resumed, loss_rows(&full.paths.run_dir));
    let x = load_checkpoint(&full.paths.run_dir.join(LAST_CHECKPOINT)).unwrap();
    let y = load_checkpoint(&second.paths.run_dir.join(LAST_CHECKPOINT)).unwrap();
    for ((n, v), (_, w)) in x.model.params().vars().zip(y.model.params().vars()) {
        let (v, w) = (v.flatten_all().unwrap().to_vec1::<f32>().unwrap(), w.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_eq!(v, w, "{n}");
    }
}

#[test]
fn resume_rejects_changed_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 10, 1);
    cmd_make_data(&cfg).unwrap();
    cmd_train(&cfg, false).unwrap();
    let mut other = small(dir.path(), 10, 2);
    other.model.time_embed_dim = 12;
    assert!(matches!(cmd_train(&other, true), Err(Error::Config(_))));
}

#[test]
fn infer_writes_trace_frames_and_grids() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), 10, 1);
    cmd_make_data(&cfg).unwrap();
    cmd_train(&cfg, false).unwrap();
    cfg.infer.nfe = 5;
    let opts = InferOptions {
        scenes: SceneSelection::Split { split: Split::Test, limit: Some(1) },
        trace: true,
        grid: true,
        ..Default::default()
    };
    let s = cmd_infer(&cfg, &opts).unwrap();
    assert_eq!((s.restored.len(), s.frames.len(), s.grids.len()), (1, 6, 1));
    let names: Vec<String> = s
        .frames
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert!(names[0].ends_with("_trace_00_t1000.png"));
    assert!(names[4].ends_with("_trace_04_t0200.png"));
    assert!(names[5].ends_with("_trace_final.png"));
    let raw = s.restored[0].with_extension("bin");
    assert_eq!(fs::metadata(raw).unwrap().len(), 4 * 13 * 16 * 16);

    let scene_dir = cfg.paths.data_dir.join("scenes").join(
        names[0].split("_trace").next().unwrap(),
    );
    let single = InferOptions {
        scenes: SceneSelection::Dir(scene_dir),
        out_dir: Some(dir.path().join("single")),
        ..Default::default()
    };
    assert_eq!(cmd_infer(&cfg, &single).unwrap().restored.len(), 1);
}

#[test]
fn infer_rejects_mismatched_band_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 10, 1);
    cmd_make_data(&cfg).unwrap();
    cmd_train(&cfg, false).unwrap();
    let mut other = small(&dir.path().join("b"), 10, 1);
    other.data.opt_channels = 4;
    other.model.opt_channels = 4;
    other.report.rgb_bands = [2, 1, 0];
    cmd_make_data(&other).unwrap();
    let opts = InferOptions {
        checkpoint: Some(cfg.paths.run_dir.join(BEST_CHECKPOINT)),
        ..Default::default()
    };
    let err = cmd_infer(&other, &opts).unwrap_err();
    assert!(err.to_string().contains("opt_intro.weight"), "{err}");
}

#[test]
fn eval_reports_are_complete_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 320, 1);
    cmd_make_data(&cfg).unwrap();
    cmd_train(&cfg, false).unwrap();
    let opts = EvalOptions { sweep: true, ..Default::default() };
    let s = cmd_eval(&cfg, &opts).unwrap();
    assert_eq!(s.report.per_image.len(), 32);
    assert_eq!(s.report.strata.len(), 5);
    assert_eq!(s.report.strata.iter().map(|s| s.count()).sum::<usize>(), 32);
    let labels: Vec<&str> = s.nfe_sweep.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["cloudy input", "ode nfe=1", "ode nfe=5", "ode nfe=10"]);
    let labels: Vec<&str> = s.ode_sde.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["cloudy input", "ode nfe=5", "sde nfe=5", "ode nfe=10", "sde nfe=10"]);

    let out = cfg.paths.run_dir.join("eval");
    let first: Vec<Vec<u8>> = ["report.csv", "report.txt", "nfe_sweep.csv", "ode_sde.csv"]
        .iter()
        .map(|f| fs::read(out.join(f)).unwrap())
        .collect();
    let again = cmd_eval(&cfg, &opts).unwrap();
    assert_eq!(again, s);
    for (f, bytes) in ["report.csv", "report.txt", "nfe_sweep.csv", "ode_sde.csv"].iter().zip(first) {
        assert_eq!(fs::read(out.join(f)).unwrap(), bytes, "{f}");
    }
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 10, 1);
    cmd_make_data(&cfg).unwrap();
    let err = cmd_eval(&cfg, &EvalOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
    assert_eq!(err.exit_code(), 4);
}

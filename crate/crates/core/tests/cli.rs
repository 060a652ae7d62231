//! The `cloudbridge` binary: subcommands, flag overrides and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cloudbridge"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &str = "[data]\ncount = 10\nheight = 16\nwidth = 16\n\n[model]\nwidths = [8, 16]\nenc_blocks = [1, 1]\ndec_blocks = [1, 1]\nfusion_heads = [1, 2]\ntime_embed_dim = 8\n\n[train]\nepochs = 3\n";

#[test]
fn make_data_train_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("small.toml"), SMALL).unwrap();
    let common = ["--config", "small.toml", "--data-dir", "d", "--run-dir", "r"];
    let with = |extra: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
        v.extend(common.iter().map(|s| s.to_string()));
        v
    };
    let call = |extra: &[&str]| {
        let args = with(extra);
        run(&args.iter().map(String::as_str).collect::<Vec<_>>(), root)
    };

    assert!(ok(&call(&["make-data"])).starts_with("10 scenes"));
    assert!(root.join("d/manifest.txt").is_file());

    // --epochs overrides the file's 3.
    assert!(ok(&call(&["train", "--epochs", "1"])).starts_with("2 steps"));
    assert!(root.join("r/best.ckpt").is_file());

    let out = ok(&call(&["infer", "--nfe", "5", "--trace", "--grid", "--limit", "1"]));
    assert_eq!(out.trim(), "1 restored images, 6 trace frames, 1 grids");

    let out = ok(&call(&["eval", "--split", "val", "--sweep"]));
    assert!(out.starts_with("1 scenes"), "{out}");
    assert!(root.join("r/eval/nfe_sweep.csv").is_file());
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("bad.toml"), "[train]\nepochz = 1\n").unwrap();
    assert_eq!(run(&["--config", "bad.toml", "make-data"], root).status.code(), Some(2));
    assert_eq!(run(&["infer", "--nfe", "3", "--data-dir", "d"], root).status.code(), Some(2));
    let out = run(&["eval", "--data-dir", "missing", "--run-dir", "r"], root);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("best.ckpt"));
}

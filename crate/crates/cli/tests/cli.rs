use std::path::Path;
use std::process::{Command, Output};

fn qflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qflow")).args(args).output().expect("run qflow")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn error_json(o: &Output) -> serde_json::Value {
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "one error line expected, got {err:?}");
    serde_json::from_str(lines[0]).expect("error line is JSON")
}

fn gen(root: &Path) {
    let o = qflow(&[
        "gen-data",
        "--out",
        root.to_str().unwrap(),
        "--seed",
        "1",
        "--train",
        "3",
        "--test",
        "2",
        "--size",
        "32",
        "--scales",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn help_lists_every_subcommand() {
    let o = qflow(&["--help"]);
    assert!(o.status.success());
    for sub in ["gen-data", "train", "eval", "ablate", "gradcheck", "export-png"] {
        assert!(stdout(&o).contains(sub), "{sub}");
    }
}

#[test]
fn usage_errors_are_one_json_line() {
    let o = qflow(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "usage");
}

#[test]
fn missing_dataset_is_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = qflow(&["eval", "--data", dir.path().join("none").to_str().unwrap(), "--mode", "bicubic"]);
    assert_eq!(o.status.code(), Some(1));
    let j = error_json(&o);
    assert_eq!(j["error"], "dataset");
    assert!(j["message"].as_str().unwrap().contains("not found"));
}

#[test]
fn bad_config_value_is_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let data = dir.path().to_str().unwrap();
    let out = dir.path().join("run");
    let o = qflow(&["train", "--data", data, "--out", out.to_str().unwrap(), "--conv", "wavy"]);
    assert_eq!(error_json(&o)["error"], "config");
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "colour=blue\n").unwrap();
    let o = qflow(&["train", "--data", data, "--out", out.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(error_json(&o)["error"], "config");
}

#[test]
fn gen_train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let data = dir.path().to_str().unwrap();
    assert!(dir.path().join("train/manifest.txt").exists());
    assert!(dir.path().join("test/test0001_lr2.fld").exists());

    // flags override the config file
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "iterations=50\nlr_crop=8\nbatch=2\n").unwrap();
    let run = dir.path().join("run");
    let o = qflow(&[
        "train",
        "--profile",
        "micro",
        "--data",
        data,
        "--out",
        run.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--iterations",
        "3",
        "--eval-every",
        "0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("steps 3"));
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let ck = run.join("checkpoint");
    let saved = std::fs::read_to_string(ck.join("config.txt")).unwrap();
    assert!(saved.contains("lr_crop=8") && saved.contains("iterations=3"));

    let o = qflow(&["train", "--data", data, "--out", run.to_str().unwrap(), "--resume", "--iterations", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(run.join("train.log")).unwrap().lines().count(), 5);

    for extra in [&[][..], &["--ema"][..]] {
        let mut args = vec!["eval", "--data", data, "--checkpoint", ck.to_str().unwrap(), "--csv"];
        args.extend_from_slice(extra);
        let o = qflow(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_eq!(stdout(&o).lines().count(), 4);
    }
    let o = qflow(&["eval", "--data", data, "--mode", "oracle"]);
    assert!(stdout(&o).contains('*'));

    let png = dir.path().join("hr.png");
    let hr = dir.path().join("test/test0000_hr.fld");
    let o = qflow(&["export-png", "--input", hr.to_str().unwrap(), "--out", png.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(png.exists());
    let pngs = dir.path().join("pngs");
    let o = qflow(&[
        "export-png",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        data,
        "--sample",
        "test0001",
        "--out",
        pngs.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for part in ["lr", "bicubic", "sr", "hr"] {
        assert!(pngs.join(format!("test0001_{part}.png")).exists(), "{part}");
    }
}

#[test]
fn corrupt_fld_export_names_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("x.fld");
    std::fs::write(&f, b"XXXX\x01\x01\x00\x00\x00\x01\x00\x00\x00\x00").unwrap();
    let o = qflow(&["export-png", "--input", f.to_str().unwrap(), "--out", dir.path().join("x.png").to_str().unwrap()]);
    assert_eq!(error_json(&o)["error"], "bad_magic");
}

#[test]
fn gradcheck_filter_runs_a_subset() {
    let o = qflow(&["gradcheck", "--filter", "pixel_shuffle", "--seeds", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("PASS"));
    let o = qflow(&["gradcheck", "--filter", "no-such-case"]);
    assert_eq!(error_json(&o)["error"], "cli");
}

#[test]
fn ablation_runs_a_reduced_table() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let o = qflow(&[
        "ablate",
        "--profile",
        "micro",
        "--data",
        dir.path().to_str().unwrap(),
        "--tables",
        "components",
        "--variants",
        "none",
        "--iterations",
        "2",
        "--lr-crop",
        "8",
        "--batch",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("Baseline+QSM") && !out.contains("Ours"), "{out}");
}

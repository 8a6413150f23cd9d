use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use odeformer::report::read_report_csv;
use odeformer::Dataset;
use tempfile::TempDir;

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json")
}

/// Runs the binary inside `dir` with the tiny config plus `args`.
fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odeformer"))
        .current_dir(dir)
        .arg("--config")
        .arg(tiny_config())
        .args(["--threads", "2"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn hold_is_exact_on_a_static_channel() {
    let dir = TempDir::new().unwrap();
    assert_ok(&run(dir.path(), &["--set", "scene.speed=0", "gen-data"]));
    let o = run(dir.path(), &["--set", "scene.speed=0", "eval", "--predictor", "hold"]);
    assert_ok(&o);
    let rows = read_report_csv(&dir.path().join("run/tiny/report.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].predictor, "hold");
    assert_eq!(rows[0].mean_nmse, 0.0);
    assert_eq!(rows[0].n_samples, 32);
    let cdf: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("run/tiny/cdf.json")).unwrap()).unwrap();
    assert_eq!(cdf[0]["points"].as_array().unwrap().len(), 32);
}

#[test]
fn predict_at_last_input_echoes_it_under_hold() {
    let dir = TempDir::new().unwrap();
    assert_ok(&run(dir.path(), &["gen-data", "--split", "test"]));
    let data = Dataset::load(&dir.path().join("run/tiny/test.csiq")).unwrap();
    let seq = &data.sequences[3];
    let last_t = *seq.timestamps().last().unwrap();
    let o = run(
        dir.path(),
        &[
            "predict",
            "--input",
            "run/tiny/test.csiq",
            "--index",
            "3",
            "--target-time",
            &format!("{last_t:e}"),
            "--predictor",
            "hold",
        ],
    );
    assert_ok(&o);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["predictor"], "hold");
    let last = seq.inputs().last().unwrap();
    for a in 0..2 {
        for s in 0..2 {
            assert_eq!(v["re"][a][s].as_f64().unwrap(), last.get(a, s).re);
            assert_eq!(v["im"][a][s].as_f64().unwrap(), last.get(a, s).im);
        }
    }
}

#[test]
fn train_eval_sweep_pipeline() {
    let dir = TempDir::new().unwrap();
    assert_ok(&run(dir.path(), &["gen-data"]));
    assert!(!dir.path().join("run/tiny/val.csiq").exists());
    let o = run(dir.path(), &["--set", "train.checkpoint_every=2", "train"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("epoch 2 train"));
    assert!(dir.path().join("run/tiny/model-epoch0002.ckpt").exists());
    let loss = fs::read_to_string(dir.path().join("run/tiny/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
    assert!(loss.starts_with("epoch,train_nmse,val_nmse\n0,"));

    assert_ok(&run(dir.path(), &["eval"]));
    let rows = read_report_csv(&dir.path().join("run/tiny/report.csv")).unwrap();
    let names: Vec<_> = rows.iter().map(|r| r.predictor.as_str()).collect();
    assert_eq!(names, ["hold", "linear", "ode_former"]);
    assert!(rows.iter().all(|r| r.interval_pattern == "1/1:1" && r.mean_nmse.is_finite()));

    let o = run(dir.path(), &["predict", "--input", "run/tiny/test.csiq"]);
    assert_ok(&o);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["predictor"], "ode_former");
    assert_eq!(v["n_ant"], 2);

    assert_ok(&run(dir.path(), &["sweep"]));
    let rows = read_report_csv(&dir.path().join("run/tiny/report.csv")).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[3].interval_pattern, "2/2:2");
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for d in [&a, &b] {
        assert_ok(&run(d.path(), &["gen-data", "--split", "train"]));
        assert_ok(&run(d.path(), &["--set", "train.epochs=2", "train"]));
    }
    let read = |d: &TempDir| fs::read(d.path().join("run/tiny/model.ckpt")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn grad_check_reports_relative_error() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["grad-check", "--tolerance", "1e-3"]);
    assert_ok(&o);
    let out = stdout(&o);
    let value: f64 = out
        .split_whitespace()
        .nth(1)
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("unparsable output {out:?}"));
    assert!(out.starts_with("max_rel_err "));
    assert!(value < 1e-3, "{value}");
    let o = run(dir.path(), &["grad-check", "--tolerance", "1e-30"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let missing_cfg = Command::new(env!("CARGO_BIN_EXE_odeformer"))
        .current_dir(dir.path())
        .args(["--config", "nope.json", "gen-data"])
        .output()
        .unwrap();
    assert_eq!(missing_cfg.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&missing_cfg.stderr);
    assert_eq!(stderr.lines().count(), 1, "{stderr}");

    assert_eq!(run(dir.path(), &["eval", "--predictor", "hold"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["--set", "scene.colour=3", "gen-data"]).status.code(), Some(3));
    assert_eq!(run(dir.path(), &["--set", "model.n_ant=3", "gen-data"]).status.code(), Some(3));
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(3));

    fs::create_dir_all(dir.path().join("run/tiny")).unwrap();
    fs::write(dir.path().join("run/tiny/test.csiq"), b"NOPE not a dataset at all").unwrap();
    let o = run(dir.path(), &["eval", "--predictor", "hold"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad magic"));

    assert_ok(&run(dir.path(), &["gen-data", "--split", "train"]));
    let o = run(dir.path(), &["--set", "train.learning_rate=1e200", "train"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite loss at epoch"));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn neurove(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurove"))
        .args(args)
        .env_remove("NEUROVE_THREADS")
        .output()
        .expect("spawn neurove")
}

fn ok(args: &[&str]) -> Output {
    let out = neurove(args);
    assert!(
        out.status.success(),
        "neurove {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: PathBuf) -> String {
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn json(p: PathBuf) -> serde_json::Value {
    serde_json::from_str(&read(p)).unwrap()
}

const TINY_SINE: &[&str] = &[
    "--set",
    "sine.model.layers=1",
    "--set",
    "sine.model.hidden=4",
    "--set",
    "sine.train.chunk=100",
    // resume compares runs with different epoch budgets, so keep the lr flat
    "--set",
    "sine.train.cosine=false",
];

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<(PathBuf, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    files.sort();
    files
}

fn tiny_velocity(extra: &[&'static str]) -> Vec<&'static str> {
    let mut v = vec![
        "--set",
        "velocity.data.clips=6",
        "--set",
        "velocity.data.train=4",
        "--set",
        "velocity.data.val=2",
        "--set",
        "velocity.data.scene.sensor_w=16",
        "--set",
        "velocity.data.scene.sensor_h=16",
        "--set",
        "velocity.data.scene.focal=15.0",
        "--set",
        "velocity.data.scene.sim_dt=0.002",
        "--set",
        "velocity.data.window.sensor_h=16",
        "--set",
        "velocity.data.window.sensor_w=16",
        "--set",
        "velocity.data.window.t_steps=2",
        "--set",
        "velocity.data.window.n_bins=2",
        "--set",
        "velocity.data.window.window_duration=0.02",
        "--set",
        "velocity.model.extractor.blocks=[{out_channels=4,kernel=3,stride=2,padding=1}]",
        "--set",
        "velocity.model.estimator.hidden=8",
        "--set",
        "velocity.train.batch=2",
        "--set",
        "velocity.train.epochs=2",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn gen_sine_writes_every_sequence_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["gen-data", "sine", "--out", s(&a), "--seed", "5"]);
    ok(&["gen-data", "sine", "--out", s(&b), "--seed", "5"]);
    let csvs = std::fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("seq_"))
        .count();
    assert_eq!(csvs, 100);
    assert!(a.join("split.csv").exists());
    for entry in std::fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap(),
            "{name:?} differs"
        );
    }
    let receipt = read(a.join("config.resolved.toml"));
    assert!(receipt.lines().any(|l| l == "seed = 5"));
}

#[test]
fn unwritable_output_fails_without_partial_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    let res = neurove(&["gen-data", "sine", "--out", s(&out)]);
    assert!(!res.status.success());
    assert!(!out.join("split.csv").exists());
    assert!(String::from_utf8_lossy(&res.stderr).contains("error"));
    let res = neurove(&["gen-data", "synthetic-events", "--out", s(&out)]);
    assert!(!res.status.success());
    assert!(!out.join("manifest.toml").exists());
}

#[test]
fn analyze_neurons_writes_three_traces_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["analyze-neurons", "--out", s(&a), "--seed", "9"]);
    ok(&["analyze-neurons", "--out", s(&b), "--seed", "9"]);
    for f in ["input.csv", "lif.csv", "alif.csv", "firing_summary.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(read(a.join("input.csv")), read(b.join("input.csv")));
    let summary = json(a.join("firing_summary.json"));
    let lif = summary["lif_rate"].as_f64().unwrap();
    let alif = summary["alif_rate"].as_f64().unwrap();
    assert!(alif >= lif, "alif {alif} < lif {lif}");
    assert_eq!(read(a.join("lif.csv")).lines().count(), 1 + 1000 * 16);
}

#[test]
fn sine_train_eval_predict_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen-data", "sine", "--out", s(&data)]);
    let pristine = snapshot(&data);
    let mut args = vec![
        "train",
        "sine",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--set",
        "sine.train.epochs=2",
    ];
    args.extend_from_slice(TINY_SINE);
    ok(&args);
    let log = read(run.join("epochs.ndjson"));
    assert_eq!(log.lines().count(), 2);
    for f in ["best.ckpt", "last.ckpt", "report.json", "config.resolved.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let report = json(run.join("report.json"));
    assert_eq!(report["cell"], "aslstm");
    assert_eq!(report["firing_rates"].as_array().unwrap().len(), 1);

    // a resumed run reproduces the uninterrupted one
    let full = dir.path().join("full");
    let mut args = vec![
        "train",
        "sine",
        "--data",
        s(&data),
        "--out",
        s(&full),
        "--set",
        "sine.train.epochs=3",
    ];
    args.extend_from_slice(TINY_SINE);
    ok(&args);
    let last = run.join("last.ckpt");
    let mut args = vec![
        "train",
        "sine",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--set",
        "sine.train.epochs=3",
        "--resume",
        s(&last),
    ];
    args.extend_from_slice(TINY_SINE);
    ok(&args);
    let resumed: Vec<serde_json::Value> = read(run.join("epochs.ndjson"))
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let straight: Vec<serde_json::Value> = read(full.join("epochs.ndjson"))
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(resumed.len(), 3);
    let (a, b) = (
        resumed[2]["train_loss"].as_f64().unwrap(),
        straight[2]["train_loss"].as_f64().unwrap(),
    );
    assert!((a - b).abs() <= 0.01 * b.abs(), "resumed {a} vs straight {b}");

    let ev = dir.path().join("eval");
    ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--data",
        s(&data),
        "--out",
        s(&ev),
    ]);
    let metrics = json(ev.join("metrics.json"));
    assert_eq!(metrics["per_sequence_fit_rmse"].as_array().unwrap().len(), 3);
    let rmse = metrics["fit"]["rmse"]["value"].as_f64().unwrap();
    let dagger = metrics["fit"]["rmse_dagger"]["value"].as_f64().unwrap();
    assert!((dagger - rmse * 1000.0).abs() <= 1e-12 * dagger.abs());
    let curve = std::fs::read_dir(&ev)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("sine_curve_"))
        .expect("curve csv");
    let text = read(curve);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,gt,pred,phase");
    assert_eq!(lines.len(), 1 + 2000);
    assert!(lines[1000].ends_with(",fit"));
    assert!(lines[1001].starts_with("1000,") && lines[1001].ends_with(",forecast"));

    let input = dir.path().join("series.csv");
    std::fs::copy(data.join("seq_000.csv"), &input).unwrap();
    let pred = dir.path().join("pred");
    ok(&[
        "predict",
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--input",
        s(&input),
        "--horizon",
        "10",
        "--out",
        s(&pred),
    ]);
    let rows = read(pred.join("predictions.csv"));
    assert_eq!(rows.lines().count(), 1 + 1999 + 10);
    assert!(snapshot(&data) == pristine, "a command modified the dataset");
}

#[test]
fn slstm_baseline_is_selected_by_flag() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec![
        "train",
        "sine",
        "--baseline",
        "slstm",
        "--out",
        s(&run),
        "--set",
        "sine.train.epochs=1",
        "--set",
        "sine.data.steps=100",
        "--set",
        "sine.data.forecast_steps=100",
    ];
    args.extend_from_slice(TINY_SINE);
    ok(&args);
    assert_eq!(json(run.join("report.json"))["cell"], "slstm");
    assert!(read(run.join("config.resolved.toml")).contains("sine.model.cell = \"slstm\""));
}

#[test]
fn missing_checkpoint_and_bad_config_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let res = neurove(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("none.ckpt")),
        "--out",
        s(&out),
    ]);
    assert!(!res.status.success());
    let res = neurove(&["analyze-neurons", "--set", "analyze.nope=1", "--out", s(&out)]);
    assert!(!res.status.success());
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "sine.train.epochs = \"many\"\n").unwrap();
    let res = neurove(&["analyze-neurons", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!res.status.success());
    let res = Command::new(env!("CARGO_BIN_EXE_neurove"))
        .args(["analyze-neurons", "--out", s(&out)])
        .env("NEUROVE_THREADS", "0")
        .output()
        .unwrap();
    assert!(!res.status.success());
}

#[test]
fn config_file_and_flags_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 3\nanalyze.steps = 50\nanalyze.neurons = 2\n").unwrap();
    let out = dir.path().join("o");
    ok(&[
        "analyze-neurons",
        "--config",
        s(&cfg),
        "--set",
        "analyze.neurons=3",
        "--seed",
        "11",
        "--out",
        s(&out),
    ]);
    let receipt = read(out.join("config.resolved.toml"));
    assert!(receipt.contains("seed = 11\n"));
    assert!(receipt.contains("analyze.steps = 50\n"));
    assert!(receipt.contains("analyze.neurons = 3\n"));
    assert_eq!(read(out.join("input.csv")).lines().count(), 1 + 50 * 3);
}

#[test]
fn divergence_exits_nonzero_with_recent_losses() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let mut args = vec![
        "train",
        "sine",
        "--out",
        s(&out),
        "--set",
        "sine.train.epochs=5",
        "--set",
        "sine.train.lr=1e300",
        "--set",
        "sine.train.clip_norm=0",
        "--set",
        "sine.data.steps=100",
        "--set",
        "sine.data.forecast_steps=10",
    ];
    args.extend_from_slice(TINY_SINE);
    let res = neurove(&args);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("diverged"), "{err}");
}

#[test]
fn velocity_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let mut a = vec!["gen-data", "synthetic-events", "--out", s(&data)];
    a.extend(tiny_velocity(&[]));
    ok(&a);
    assert!(data.join("manifest.toml").exists());
    let mut a = vec!["train", "velocity", "--data", s(&data), "--out", s(&run)];
    a.extend(tiny_velocity(&[]));
    ok(&a);
    let report = json(run.join("report.json"));
    assert_eq!(report["output_shape"], serde_json::json!([2, 2, 6]));
    assert_eq!(read(run.join("epochs.ndjson")).lines().count(), 2);

    let ev = dir.path().join("eval");
    let best = run.join("best.ckpt");
    let mut a = vec!["eval", "--checkpoint", s(&best), "--data", s(&data), "--out", s(&ev)];
    a.extend(tiny_velocity(&[]));
    ok(&a);
    let preds = read(ev.join("velocity_predictions.csv"));
    assert_eq!(preds.lines().count(), 1 + 2 * 2);
    assert!(json(ev.join("metrics.json"))["metrics"]["rmse"]["linear"].is_number());

    // evaluating with a different window is a configuration mismatch
    let mut a = vec!["eval", "--checkpoint", s(&best), "--data", s(&data), "--out", s(&ev)];
    a.extend(tiny_velocity(&["--set", "velocity.data.window.n_bins=3"]));
    assert!(!neurove(&a).status.success());

    let manifest = read(data.join("manifest.toml"));
    let events = manifest
        .lines()
        .find_map(|l| l.strip_prefix("events = \""))
        .map(|l| l.trim_end_matches('"').to_string())
        .expect("event file entry");
    let pred = dir.path().join("pred");
    ok(&[
        "predict",
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--input",
        s(&data.join(events)),
        "--out",
        s(&pred),
    ]);
    let rows = read(pred.join("predictions.csv"));
    assert!(rows.lines().count() > 1);
    assert!(rows.starts_with("sample,bin,t_s,vx,vy,vz,wx,wy,wz\n"));
}

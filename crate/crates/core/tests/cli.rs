//! End-to-end runs of the `hawkes-online` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hawkes-online"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulate a small two-actor stream into `dir` and return the events path.
fn simulated(dir: &Path) -> String {
    write(dir, "W.csv", "0.5,0.1\n0.0,0.4\n");
    let sim = write(dir, "sim.cfg", "T = 400\nkernel = exponential alpha=0.5\nW = W.csv\nmu_bar = 0.2, 0.3\n");
    let events = dir.join("events.csv");
    let out = ok(&["simulate", "--config", &sim, "--seed", "7", "--out", s(&events)]);
    assert!(out.starts_with("events "), "{out}");
    s(&events).to_string()
}

#[test]
fn track_learn_batch_forecast_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let events = simulated(dir);
    let text = fs::read_to_string(&events).unwrap();
    assert!(text.starts_with("time,actor\n"));

    let track_cfg = write(
        dir,
        "track.cfg",
        "delta = 0.5\nkernel = exponential alpha=0.5\nW = W.csv\nmu_bar = 0.2, 0.3\nwindow = 20\nT = 400\n",
    );
    let out = dir.join("track");
    ok(&["track", "--config", &track_cfg, "--events", &events, "--out", s(&out), "--emit-forecasts"]);
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 800);
    let forecasts = fs::read_to_string(out.join("forecasts.csv")).unwrap();
    let rows: Vec<&str> = forecasts.lines().collect();
    assert_eq!(rows[0], "t,lambda_0,lambda_1");
    assert_eq!(rows.len(), 1 + 801);
    // the first forecast is the baseline
    assert_eq!(rows[1], "1,0.2,0.3");

    // the forecast command reports the row emitted after the last bin
    let fc = ok(&["forecast", "--config", &track_cfg, "--events", &events]);
    let last = rows.last().unwrap().split_once(',').unwrap().1;
    assert_eq!(fc.trim(), last);

    let learn_cfg = write(
        dir,
        "learn.cfg",
        "delta = 0.5\nkernel = exponential alpha=0.5\nmu_bar = 0.2, 0.3\nT = 400\nrho0 = 0.5\nsnapshot_every = 200\nfeasible_set = l1:5\n",
    );
    let out = dir.join("learn");
    ok(&["learn", "--config", &learn_cfg, "--events", &events, "--out", s(&out)]);
    let w = fs::read_to_string(out.join("W_final.csv")).unwrap();
    assert_eq!(w.lines().count(), 2);
    let snaps = fs::read_dir(out.join("snapshots")).unwrap().count();
    assert_eq!(snaps, 4);

    let ogd_cfg = write(dir, "ogd.cfg", &(fs::read_to_string(&learn_cfg).unwrap() + "method = ogd\n"));
    ok(&["learn", "--config", &ogd_cfg, "--events", &events, "--out", s(&dir.join("ogd"))]);

    let batch_cfg = write(dir, "batch.cfg", "delta = 0.5\nkernel = exponential alpha=0.5\nmu_bar = 0.2, 0.3\nT = 400\n");
    let w_out = dir.join("W_batch.csv");
    let trace = dir.join("trace.csv");
    let out = ok(&["batch", "--config", &batch_cfg, "--events", &events, "--out", s(&w_out), "--trace", s(&trace)]);
    assert!(out.starts_with("objective "));
    let objs: Vec<f64> = fs::read_to_string(&trace)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(objs.windows(2).all(|w| w[1] <= w[0] + 1e-12), "objective must not increase");
}

#[test]
fn jsonl_round_trip_matches_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let events = simulated(dir);
    write(dir, "W.csv", "0.5,0.1\n0.0,0.4\n");
    let sim = write(dir, "sim.cfg", "T = 400\nkernel = exponential alpha=0.5\nW = W.csv\nmu_bar = 0.2, 0.3\n");
    let jsonl = dir.join("events.jsonl");
    ok(&["simulate", "--config", &sim, "--seed", "7", "--out", s(&jsonl)]);
    let cfg = write(dir, "track.cfg", "delta = 0.5\nkernel = exponential alpha=0.5\nW = W.csv\nmu_bar = 0.2, 0.3\nT = 400\n");
    let a = ok(&["forecast", "--config", &cfg, "--events", &events]);
    let b = ok(&["forecast", "--config", &cfg, "--events", s(&jsonl)]);
    assert_eq!(a, b);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let events = simulated(dir);
    let code = |args: &[&str]| run(args).status.code().unwrap();

    // unknown key
    let cfg = write(dir, "bad.cfg", "delta = 0.5\nkernel = exponential alpha=0.5\nW = W.csv\nmu_bar = 0.2\nspeed = 3\n");
    let out = run(&["track", "--config", &cfg, "--events", &events, "--out", s(&dir.join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key `speed`"));

    // step size outside [0, 1]
    let cfg = write(dir, "eta.cfg", "delta = 0.5\nkernel = exponential alpha=0.5\nW = W.csv\nmu_bar = 0.2\neta0 = 1e6\n");
    assert_eq!(code(&["track", "--config", &cfg, "--events", &events, "--out", s(&dir.join("o"))]), 2);

    // malformed events
    let bad_events = write(dir, "bad.csv", "time,actor\n1.0,0\nsoon,1\n");
    let cfg = write(dir, "ok.cfg", "delta = 0.5\nkernel = exponential alpha=0.5\nW = W.csv\nmu_bar = 0.2\n");
    assert_eq!(code(&["track", "--config", &cfg, "--events", &bad_events, "--out", s(&dir.join("o"))]), 3);
    // missing events file
    assert_eq!(code(&["track", "--config", &cfg, "--events", s(&dir.join("nope.csv")), "--out", s(&dir.join("o"))]), 3);

    // rates pinned near the largest double overflow the cumulative loss
    write(dir, "huge.csv", "1e308,1e308\n1e308,1e308\n");
    let cfg = write(dir, "huge.cfg", "delta = 1\nkernel = exponential alpha=0.5\nW = huge.csv\nmu_bar = 0.2\nlambda_max = 1.7e308\n");
    let out = run(&["track", "--config", &cfg, "--events", &events, "--out", s(&dir.join("o"))]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(code(&["replicate", "no_such_profile", "--out", s(&dir.join("r"))]), 2);
}

#[test]
fn replicate_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let out = ok(&["replicate", "mismatch_exp", "--trials", "3", "--scale", "0.05", "--out", s(&runs)]);
    assert!(out.contains("tracked below direct in"), "{out}");
    for i in 0..3 {
        let t = runs.join(format!("trial_{i:03}"));
        for f in ["events.csv", "W_true.csv", "loss_direct.csv", "loss_tracked.csv"] {
            assert!(t.join(f).exists(), "{f} missing in trial {i}");
        }
    }
    let manifest = fs::read_to_string(runs.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"mismatch_exp\""));

    let agg = tmp.path().join("agg");
    ok(&["eval", "--runs", s(&runs), "--out", s(&agg), "--points", "50"]);
    for f in ["regret.csv", "percentiles.csv"] {
        let text = fs::read_to_string(agg.join(f)).unwrap();
        assert!(text.lines().count() > 1, "{f} is empty");
    }

    // replaying the manifest reproduces the per-trial losses exactly
    let again = tmp.path().join("again");
    ok(&["replicate", "--replay", s(&runs), "--out", s(&again)]);
    let a = fs::read_to_string(runs.join("trial_001/loss_tracked.csv")).unwrap();
    let b = fs::read_to_string(again.join("trial_001/loss_tracked.csv")).unwrap();
    assert_eq!(a, b);
}

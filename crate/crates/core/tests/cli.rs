use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qspike::ann::NetworkDescription;
use qspike::eval::EvalReport;
use qspike::harness::{read_report, read_scales, Manifest};
use qspike::weights_io::save_weights;

fn qspike(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qspike"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn qspike")
}

fn ok(args: &[&str]) -> String {
    let out = qspike(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn weights(dir: &Path) -> std::path::PathBuf {
    let w = dir.join("weights.json");
    save_weights(&NetworkDescription::shallow(16, 4, 5), &w).unwrap();
    w
}

#[test]
fn convert_then_evaluate_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path());
    let conv = dir.path().join("conv");
    ok(&["convert", "--weights", p(&w), "--samples", "50", "--out", p(&conv)]);
    let scales = conv.join("scales.json");
    assert_eq!(read_scales(&scales).unwrap().scales.len(), 2);

    let ev = dir.path().join("ev");
    let line = ok(&[
        "evaluate", "--weights", p(&w), "--network", "snn", "--scales", p(&scales), "--nt", "20",
        "--episodes", "3", "--out", p(&ev),
    ]);
    assert!(line.contains('±'), "{line}");
    let report = read_report(&ev.join("report.json")).unwrap();
    assert_eq!(report.rewards.len(), 3);
    let csv = fs::read_to_string(ev.join("episodes.csv")).unwrap();
    let eps = EvalReport::read_episodes_csv(&csv).unwrap();
    let back = EvalReport::from_episodes(&eps, report.policy, report.network, report.input_mode);
    assert_eq!(back, report);
    assert!(ev.join("histogram.csv").exists());
    let m = Manifest::read(&ev.join("manifest.json")).unwrap();
    assert_eq!(m.command, "evaluate");
}

#[test]
fn greedy_ann_on_one_seed_has_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path());
    let out = dir.path().join("ev");
    ok(&["evaluate", "--weights", p(&w), "--policy", "greedy", "--episodes", "1", "--out", p(&out)]);
    let r = read_report(&out.join("report.json")).unwrap();
    assert_eq!(r.rewards.len(), 1);
    assert_eq!(r.std, 0.0);
}

#[test]
fn rerun_reproduces_episodes_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["evaluate", "--weights", p(&w), "--episodes", "4", "--seed", "9", "--out", p(&a)]);
    ok(&["rerun", p(&a.join("manifest.json")), "--out", p(&b)]);
    assert_eq!(
        fs::read(a.join("episodes.csv")).unwrap(),
        fs::read(b.join("episodes.csv")).unwrap()
    );
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "episodes = 5\nseed = 3\n").unwrap();
    let out = dir.path().join("o");
    ok(&["baseline", "--config", p(&cfg), "--episodes", "2", "--out", p(&out)]);
    let m = Manifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(m.seed, 3);
    assert_eq!(m.settings["episodes"], 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path());
    let out = dir.path().join("o");

    let r = qspike(&["evaluate", "--weights", p(&w), "--network", "snn", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));

    let r = qspike(&["evaluate", "--no-such-flag"]);
    assert_eq!(r.status.code(), Some(2));

    let r = qspike(&["optimize", "--weights", p(&w), "--dims", "3", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let r = qspike(&["evaluate", "--weights", p(&bad), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn train_writes_weights_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, "replay_capacity = 300\nreplay_warmup = 100\nhidden = 8\n").unwrap();
    ok(&["train", "--config", p(&cfg), "--episodes", "2", "--out", p(&out)]);
    assert!(out.join("weights.json").exists());
    let log = fs::read_to_string(out.join("training.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn optimize_infers_dims_from_network() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path());
    let out = dir.path().join("o");
    ok(&[
        "optimize", "--weights", p(&w), "--dims-from", "network", "--iterations", "1", "--swarm-size", "3",
        "--fitness-episodes", "1", "--nt", "10", "--samples", "20", "--out", p(&out),
    ]);
    let s = read_scales(&out.join("scales.json")).unwrap();
    assert_eq!(s.scales.len(), 2);
    assert!(s.fitness.is_some());
}

#[test]
fn robustness_compare_emits_both_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let w = weights(dir.path());
    let conv = dir.path().join("c");
    ok(&["convert", "--weights", p(&w), "--method", "unit", "--out", p(&conv)]);
    let out = dir.path().join("r");
    ok(&[
        "robustness", "--weights", p(&w), "--scales", p(&conv.join("scales.json")), "--compare", "--nt", "5",
        "--episodes-per-position", "1", "--policy", "greedy", "--out", p(&out),
    ]);
    for f in ["sweep.csv", "sweep_ann.csv", "sweep_snn.csv"] {
        assert_eq!(fs::read_to_string(out.join(f)).unwrap().lines().count(), 78, "{f}");
    }
    let cmp = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert!(cmp.starts_with("bar_bottom,ann_mean,ann_std,snn_mean,snn_std"));
    assert_eq!(cmp.lines().count(), 78);
}

#[test]
fn paper_scale_flag_sets_replay_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    ok(&["train", "--paper-scale", "--episodes", "0", "--hidden", "4", "--out", p(&out)]);
    let m = Manifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(m.settings["replay_capacity"], 200_000);
    assert_eq!(m.settings["replay_warmup"], 50_000);
}

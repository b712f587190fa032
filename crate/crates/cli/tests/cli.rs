use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use dmcr_cli::presets;
use dmcr_cli::RunManifest;

fn dmcr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmcr")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The iid desk preset shortened to a handful of rounds.
fn small_config(dir: &Path, rounds: usize, extra_eval: &str) -> PathBuf {
    let text = presets::text("synthetic-desk-iid").unwrap().replace("rounds = 300", &format!("rounds = {rounds}"));
    let text = text.replace("[eval]\n", &format!("[eval]\n{extra_eval}"));
    let file = dir.join("small.toml");
    std::fs::write(&file, text).unwrap();
    file
}

fn manifest(dir: &Path, name: &str) -> RunManifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

#[test]
fn parse_and_validation_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    let text = presets::text("synthetic-desk-iid").unwrap().replace("rho = 0.1", "rho_step = 0.1");
    std::fs::write(&bad, text).unwrap();
    let out = dmcr(&["--config", path(&bad), "--out", path(&dir.path().join("r")), "train-iid"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("rho_step"), "{stderr}");

    let noplan = dir.path().join("noplan.toml");
    let text = presets::text("synthetic-desk-noniid").unwrap().replace("plan = \"auto\"", "");
    std::fs::write(&noplan, text).unwrap();
    let out = dmcr(&["--config", path(&noplan), "--out", path(&dir.path().join("r2")), "train-noniid"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("noniid.plan"));
}

#[test]
fn unknown_preset_is_a_config_error() {
    let out = dmcr(&["--config", "no-such-preset", "train-iid"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 20, "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = dmcr(&["--quiet", "--config", path(&cfg), "--out", path(out), "train-iid"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["loss.csv", "consensus.csv", "comm_bytes.csv", "geometry.json", "cosine.csv", "params.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert_eq!(manifest(&a, "manifest.json").config_hash, manifest(&b, "manifest.json").config_hash);

    let c = dir.path().join("c");
    dmcr(&["--quiet", "--config", path(&cfg), "--out", path(&c), "--seed", "8", "train-iid"]);
    assert_ne!(std::fs::read(a.join("loss.csv")).unwrap(), std::fs::read(c.join("loss.csv")).unwrap());
}

#[test]
fn unmet_bounds_exit_with_4_under_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 5, "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("min_accuracy = 0.9", "min_accuracy = 1.01");
    std::fs::write(&cfg, text).unwrap();
    let out = dmcr(&["--quiet", "--check", "--config", path(&cfg), "--out", path(&dir.path().join("r")), "train-iid"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("accuracy"));
}

#[test]
fn failed_stage_leaves_partial_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("idx.toml");
    let text = presets::text("mnist-iid-desk").unwrap();
    let text = text.split("[partition]").nth(1).unwrap();
    let text = format!(
        "seed = 1\nalgorithm = \"iid\"\n[data]\nsource = \"idx\"\ntrain_images = \"missing/a\"\ntrain_labels = \"missing/b\"\ntest_images = \"missing/c\"\ntest_labels = \"missing/d\"\n[partition]{text}"
    );
    std::fs::write(&cfg, text).unwrap();
    let run = dir.path().join("r");
    let out = dmcr(&["--quiet", "--config", path(&cfg), "--out", path(&run), "train-iid"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!run.join("manifest.json").exists());
    let m = manifest(&run, "manifest.json.partial");
    assert_eq!(m.status, "failed");
    assert_eq!(m.failure.unwrap().stage, "data");
    assert!(run.join("config.toml.partial").exists());
}

#[test]
fn desk_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("desk");
    let start = Instant::now();
    let out = dmcr(&["--quiet", "--check", "--config", "synthetic-desk-iid", "--out", path(&run), "train-iid"]);
    assert!(start.elapsed() < Duration::from_secs(120));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let m = manifest(&run, "manifest.json");
    assert_eq!(m.status, "ok");
    assert_eq!(m.algorithm, "iid");
    for f in ["config.toml", "params.json", "loss.csv", "consensus.csv", "comm_bytes.csv", "geometry.json", "cosine.svg", "spectra.csv", "partition.csv"] {
        assert!(m.files.iter().any(|x| x == f), "{f} not recorded");
        assert!(run.join(f).is_file(), "{f} missing");
    }

    let geometry: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("geometry.json")).unwrap()).unwrap();
    for key in ["wccr", "iidr", "accuracy", "tau", "structure"] {
        assert!(geometry.get(key).is_some(), "geometry.json lacks {key}");
    }

    let cosine = std::fs::read_to_string(run.join("cosine.csv")).unwrap();
    let side = cosine.lines().count();
    let svg = std::fs::read_to_string(run.join("cosine.svg")).unwrap();
    assert_eq!(svg.matches("<rect").count(), side * side);

    let loss = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 301 * 4);

    let bytes: u64 = std::fs::read_to_string(run.join("comm_bytes.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .sum();
    assert!(bytes > 0);
    assert_eq!(Some(&(bytes as f64)), m.summary.get("total_bytes"));

    let again = dmcr(&["--quiet", "--out", path(&run), "report"]);
    assert_eq!(again.status.code(), Some(0));
    let reeval = dmcr(&["--quiet", "--out", path(&run), "eval"]);
    assert_eq!(reeval.status.code(), Some(0), "{}", String::from_utf8_lossy(&reeval.stderr));
}

#[test]
fn noniid_run_traces_cluster_passes() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("n");
    let out = dmcr(&["--quiet", "--config", "synthetic-desk-noniid", "--out", path(&run), "train-noniid"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(run.join("cluster_trace.csv")).unwrap();
    assert!(trace.starts_with("round,cluster,position,node,peer,peer_round,fresh,substituted_classes"));
    assert!(trace.lines().skip(1).any(|l| l.split(',').nth(6) == Some("1")));
    assert!(trace.lines().skip(1).any(|l| l.split(',').nth(6) == Some("0")));
    let plan: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("plan.json")).unwrap()).unwrap();
    assert!(plan["clusters"].is_array());
}

#[test]
fn cluster_plan_prints_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmcr(&["--config", "synthetic-desk-noniid", "--out", path(dir.path()), "cluster-plan"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("cluster 0: agents"), "{stdout}");
    assert!(dir.path().join("plan.json").is_file());

    let out = dmcr(&["--config", "synthetic-desk-iid", "--out", path(dir.path()), "cluster-plan"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn presets_are_listed() {
    let out = dmcr(&["presets"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in presets::names() {
        assert!(stdout.contains(name));
    }
}

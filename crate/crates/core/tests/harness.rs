use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use shieldlab::agent::Mode;
use shieldlab::error::Error;
use shieldlab::harness::{self, ExperimentConfig};
use shieldlab::solver::QFunction;

const SMALL: &[&str] = &[
    "encoder.steps=30",
    "encoder.tasks=lava:9:1:0,wall:9:1:0",
    "prior.rounds=2",
    "prior.epochs=5",
    "agent.total_steps=2000",
];

fn small_cfg(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(SMALL).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn cli(out: &Path, args: &[&str]) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_shieldlab"));
    cmd.arg("--out").arg(out);
    for kv in SMALL {
        cmd.args(["--set", kv]);
    }
    cmd.args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen", "--size", "9", "--crossings", "1", "--seed", "0"];
    assert!(cli(dir.path(), &args).status.success());
    let first = snapshot(dir.path());
    assert_eq!(first.len(), 1);
    assert!(cli(dir.path(), &args).status.success());
    assert_eq!(first, snapshot(dir.path()));
}

#[test]
fn pipeline_writes_every_run_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let steps: [&[&str]; 6] = [&["gen"], &["solve"], &["priors"], &["train-encoder"], &["run"], &["report"]];
    for args in steps {
        let out = cli(dir.path(), args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let first = snapshot(dir.path());
    let metrics: Vec<_> = first.keys().filter(|p| p.ends_with("metrics.csv")).collect();
    assert_eq!(metrics.len(), 9);
    for name in ["encoder/encoder.ckpt", "encoder/loss.csv", "encoder/embeddings.tsv", "encoder/eval.csv", "priors/qp.q", "report.csv"] {
        assert!(first.contains_key(Path::new(name)), "missing {name}");
    }
    let cfg = small_cfg(dir.path());
    let rows = harness::parse_metrics(&String::from_utf8_lossy(&first[Path::new("runs/vanilla-seed0/metrics.csv")])).unwrap();
    assert!(!rows.is_empty());

    for args in steps {
        assert!(cli(dir.path(), args).status.success());
    }
    let second = snapshot(dir.path());
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (path, bytes) in &first {
        assert!(bytes == &second[path], "{} changed on re-run", path.display());
    }
    let summary = harness::summarize(&cfg).unwrap();
    assert_eq!(summary.len(), 3);
}

#[test]
fn missing_artifacts_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg(dir.path());
    assert!(matches!(harness::cmd_priors(&cfg), Err(Error::MissingArtifact(_))));
    harness::cmd_gen(&cfg, &harness::all_tasks(&cfg)).unwrap();
    assert!(matches!(harness::cmd_run(&cfg), Err(Error::MissingArtifact(_))));
    let out = cli(dir.path(), &["report"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn threshold_one_selects_nothing() {
    let dir = tempfile::tempdir().unwrap();
    for fit in ["network", "table"] {
        let mut cfg = small_cfg(dir.path());
        cfg.apply_overrides(&["prior.threshold=1.0".to_string(), format!("prior.fit={fit}")]).unwrap();
        harness::cmd_gen(&cfg, &harness::all_tasks(&cfg)).unwrap();
        let art = harness::build_prior(&cfg).unwrap();
        assert!(art.transitions.is_empty());
        assert!(art.q_p.values.iter().all(|&v| v == 0.0), "{fit}");
        harness::cmd_priors(&cfg).unwrap();
        let (q, _) = QFunction::from_text(&fs::read_to_string(harness::prior_q_path(&cfg)).unwrap()).unwrap();
        assert!(q.values.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn vanilla_only_needs_no_prior() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg(dir.path());
    cfg.modes = vec![Mode::Vanilla];
    harness::cmd_gen(&cfg, &harness::all_tasks(&cfg)).unwrap();
    let written = harness::cmd_run(&cfg).unwrap();
    assert_eq!(written.iter().filter(|p| p.ends_with("metrics.csv")).count(), 3);
}

#[test]
fn config_text_round_trips() {
    let cfg = small_cfg(Path::new("somewhere"));
    let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(back.pairs(), cfg.pairs());
    let mut bad = ExperimentConfig::default();
    assert!(bad.apply_overrides(&["shield.rho=2"]).and_then(|_| bad.validate()).is_err());
    assert!(bad.apply_overrides(&["no.such.key=1"]).is_err());
}

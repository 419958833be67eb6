use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn mfdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfdiff"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        cmd,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    mfdiff(&args)
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

fn sha256(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const QUADRATIC_PRIOR: &str =
    r#"{"problem": {"name": "quadratic"}, "prior_grid": {"spacing": [0.2]}, "seed": 3}"#;

const AMORTIZED: &str = r#"{
  "problem": {"name": "quadratic"},
  "prior_grid": {"spacing": [0.2]},
  "label_count": 100,
  "train": {"epochs": 300, "learning_rate": 0.01},
  "observations": [
    {"tag": "y1", "y": [1.0], "kl_grid": {"lo": [-2.0], "hi": [2.0], "counts": [200]}}
  ],
  "reference": "analytic",
  "seed": 1
}"#;

#[test]
fn quadratic_prior_has_101_rows_and_reruns_identically() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "q.json", QUADRATIC_PRIOR);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run("generate-prior", &cfg, out, &[]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(data_rows(&a.join("prior.csv")), 101);
    assert_eq!(sha256(&a.join("prior.csv")), sha256(&b.join("prior.csv")));
    let manifest = json(&a.join("manifest.json"));
    assert_eq!(manifest["command"], "generate-prior");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(
        manifest["files"]["prior.csv"],
        sha256(&a.join("prior.csv")).as_str()
    );
    assert!(manifest["version"].as_str().is_some_and(|v| !v.is_empty()));
}

#[test]
fn lorenz_paper_grid_has_6561_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "l.json",
        r#"{"problem": {"name": "lorenz63"}, "prior_grid": {"counts": [81, 81]}}"#,
    );
    let out = dir.path().join("run");
    let o = run("generate-prior", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(data_rows(&out.join("prior.csv")), 6561);
}

#[test]
fn amortized_mode_stops_after_the_low_fidelity_draw() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "a.json", AMORTIZED);
    let out = dir.path().join("run");
    let o = run("pipeline", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "prior.csv",
        "labels.csv",
        "model_low.json",
        "samples_low_y1.csv",
        "density_y1.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    for f in [
        "refined_y1.csv",
        "model_high_y1.json",
        "samples_high_y1.csv",
    ] {
        assert!(!out.join(f).exists(), "unexpected {f}");
    }
    assert_eq!(data_rows(&out.join("labels.csv")), 100);
    assert_eq!(data_rows(&out.join("samples_low_y1.csv")), 10_000);
    let m = json(&out.join("metrics.json"));
    let obs = &m["observations"][0];
    assert!(obs["kl_low"]
        .as_f64()
        .is_some_and(|k| k.is_finite() && k >= 0.0));
    assert!(obs["kl_high"].is_null());
    for stage in ["generate_prior", "label_generation", "train_low"] {
        assert!(
            m["timings"][stage].as_f64().is_some_and(|t| t >= 0.0),
            "{stage}"
        );
    }
}

#[test]
fn seed_changes_samples_but_not_schema_and_reruns_are_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "a.json", AMORTIZED);
    let runs: Vec<PathBuf> = ["s1", "s1b", "s2"]
        .iter()
        .map(|s| dir.path().join(s))
        .collect();
    for (out, seed) in runs.iter().zip(["1", "1", "2"]) {
        let o = run("pipeline", &cfg, out, &["--seed", seed]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let f = "samples_low_y1.csv";
    assert_eq!(sha256(&runs[0].join(f)), sha256(&runs[1].join(f)));
    assert_eq!(
        sha256(&runs[0].join("labels.csv")),
        sha256(&runs[1].join("labels.csv"))
    );
    assert_ne!(sha256(&runs[0].join(f)), sha256(&runs[2].join(f)));
    let header = |p: &Path| {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(header(&runs[0].join(f)), header(&runs[2].join(f)));
    let keys = |p: &Path| {
        let m = json(&p.join("metrics.json"));
        m["observations"][0]
            .as_object()
            .unwrap()
            .keys()
            .cloned()
            .collect::<Vec<_>>()
    };
    assert_eq!(keys(&runs[0]), keys(&runs[2]));
    assert_eq!(json(&runs[2].join("manifest.json"))["seed"], 2);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = TempDir::new().unwrap();
    let bad = write_config(
        dir.path(),
        "bad.json",
        r#"{"problem": {"name": "heat"}, "prior_grid": {"counts": [3]}}"#,
    );
    assert_eq!(
        run("generate-prior", &bad, &dir.path().join("o"), &[])
            .status
            .code(),
        Some(2)
    );

    let zero = write_config(
        dir.path(),
        "zero.json",
        r#"{"problem": {"name": "quadratic"}, "prior_grid": {"counts": [101]}, "label_count": 0}"#,
    );
    assert_eq!(
        run("pipeline", &zero, &dir.path().join("o"), &[])
            .status
            .code(),
        Some(2)
    );

    let no_out = write_config(dir.path(), "q.json", QUADRATIC_PRIOR);
    let o = mfdiff(&["generate-prior", "--config", no_out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let ou = write_config(
        dir.path(),
        "ou.json",
        r#"{"problem": {"name": "ou_sde"}, "prior_grid": {"counts": [3, 3]},
            "observations": [{"tag": "y1", "y": [3.081, 0.658]}]}"#,
    );
    assert_eq!(
        run("mcmc", &ou, &dir.path().join("o"), &[]).status.code(),
        Some(2)
    );
}

#[test]
fn simulation_failure_exits_with_3_and_leaves_no_partial_prior() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "s.json",
        r#"{"problem": {"name": "lorenz63", "prior": {"lo": [-5.0, 1e6], "hi": [5.0, 2e6]}},
            "prior_grid": {"counts": [3, 3]}}"#,
    );
    let out = dir.path().join("run");
    let o = run("generate-prior", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("generate_prior"));
    assert!(!out.join("prior.csv").exists());
}

#[test]
fn training_divergence_exits_with_4_and_keeps_earlier_stages() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "d.json",
        r#"{"problem": {"name": "quadratic"}, "prior_grid": {"spacing": [0.2]},
            "label_count": 50, "train": {"learning_rate": 1e300, "epochs": 50}}"#,
    );
    let out = dir.path().join("run");
    let o = run("pipeline", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train_low"));
    assert!(out.join("prior.csv").exists());
    assert_eq!(data_rows(&out.join("labels.csv")), 50);
    assert!(!out.join("model_low.json").exists());
}

#[test]
fn burgers_reference_mcmc_writes_10k_samples_with_timing() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "b.json",
        r#"{"problem": {"name": "burgers"}, "prior_grid": {"counts": [101]},
            "observations": [{"tag": "nu005", "theta": [0.05]}], "seed": 2}"#,
    );
    let out = dir.path().join("run");
    let o = run("mcmc", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(data_rows(&out.join("samples_mcmc_nu005.csv")), 10_000);
    let m = json(&out.join("mcmc_metrics.json"));
    let r = &m["runs"][0];
    assert!(r["seconds"].as_f64().is_some_and(|s| s > 0.0));
    assert_eq!(r["n_samples"], 10_000);
    let acc = r["acceptance_rate"].as_f64().unwrap();
    assert!(acc > 0.0 && acc < 1.0, "acceptance {acc}");
}

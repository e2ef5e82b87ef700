use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn difflocal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_difflocal"))
        .args(args)
        .output()
        .unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("difflocal-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let desk = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../configs/desk.toml"
    ))
    .unwrap();
    let text = desk
        .replace("blocks = 20000", "blocks = 300")
        .replace("repetitions = 5", "repetitions = 2")
        + extra;
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn simulate_writes_trajectory_and_summary() {
    let dir = scratch("simulate");
    let cfg = small_config(&dir, "");
    let out = dir.join("out");
    let o = difflocal(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["blocks"], 300);
    assert!(summary["theory"]["msd"].as_f64().unwrap() > 0.0);
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("block,msd,msd_db,fourth_moment,pattern_digest"));
}

#[test]
fn seed_override_changes_the_run_and_is_reproducible() {
    let dir = scratch("seed");
    let cfg = small_config(&dir, "");
    let run = |seed: &str, name: &str| {
        let out = dir.join(name);
        let o = difflocal(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
            "--theory-mode",
            "exact",
        ]);
        assert!(o.status.success());
        std::fs::read_to_string(out.join("trajectory.csv")).unwrap()
    };
    let a = run("3", "a");
    assert_eq!(a, run("3", "b"));
    assert_ne!(a, run("4", "c"));
}

#[test]
fn theory_honours_mode_and_sample_overrides() {
    let dir = scratch("theory");
    let out = dir.join("out");
    let o = difflocal(&[
        "theory",
        "--out",
        out.to_str().unwrap(),
        "--theory-mode",
        "monte-carlo",
        "--samples",
        "500",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("theory.json")).unwrap()).unwrap();
    assert_eq!(t["monte_carlo"], true);
    assert_eq!(t["patterns"], 500);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = scratch("config");
    let bad = dir.join("bad.toml");
    std::fs::write(&bad, "seed = 1\nnot_a_field = 3\n").unwrap();
    let o = difflocal(&["simulate", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = difflocal(&[
        "simulate",
        "--config",
        dir.join("missing.toml").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = difflocal(&["theory", "--theory-mode", "guess"]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = small_config(&dir, "");
    let o = difflocal(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three() {
    let dir = scratch("diverge");
    let cfg = small_config(&dir, "");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("mu = 0.01", "mu = 50.0");
    std::fs::write(&cfg, text).unwrap();
    let o = difflocal(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("o").to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn sweep_and_figure_write_curves() {
    let dir = scratch("sweep");
    let cfg = small_config(&dir, "\n[sweep]\naxis = \"mu\"\nvalues = [0.01, 0.02]\n");
    let out = dir.join("out");
    let o = difflocal(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("sweep_curves.csv")).unwrap();
    assert!(csv
        .lines()
        .next()
        .unwrap()
        .starts_with("block,mu=0.01_db,mu=0.02_db"));

    let o = difflocal(&[
        "reproduce-fig2",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("fig2.csv").exists() && out.join("fig2.json").exists());
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use statrs::distribution::{ContinuousCDF, Normal};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_degenhedge"))
        .args(args)
        .env("DEGENHEDGE_LOG", "error")
        .output()
        .expect("binary runs")
}

fn payload(path: &Path) -> serde_json::Value {
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    doc["payload"].clone()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(&[
        "validate",
        "--config",
        s(&config("black_scholes.toml")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(payload(&dir.path().join("validate.json"))["report"]["arbitrage_ok"]
        .as_bool()
        .unwrap());

    let bad = run(&[
        "validate",
        "--config",
        s(&config("delta_zero_arbitrage.toml")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&bad.stdout);
    assert!(stdout.contains("outside range(sigma)"), "{stdout}");

    let broken = dir.path().join("broken.toml");
    fs::write(&broken, "[model]\nn = \"two\"\n").unwrap();
    let out = run(&["validate", "--config", s(&broken), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema error"));
}

#[test]
fn pricing_refuses_an_arbitrage_market() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(config("delta_zero_arbitrage.toml")).unwrap()
        + "\n[payoff]\nkind = \"exchange\"\nassets = [1, 2]\n\n[run]\npaths = 1000\nsteps = 8\nseed = 3\n";
    let cfg = dir.path().join("arb.toml");
    fs::write(&cfg, text).unwrap();
    let out = run(&["price", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn price_matches_black_scholes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "price",
        "--config",
        s(&config("black_scholes.toml")),
        "--out",
        s(dir.path()),
        "--paths",
        "50000",
        "--steps",
        "32",
        "--seed",
        "17",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let p = payload(&dir.path().join("price.json"));
    let v0 = p["price"]["v0"].as_f64().unwrap();
    let se = p["price"]["standard_error"].as_f64().unwrap();
    assert_eq!(p["seed"].as_u64(), Some(17));
    let n = Normal::standard();
    let d1 = (0.03 + 0.02) / 0.2;
    let bs = 100.0 * n.cdf(d1) - 100.0 * (-0.03f64).exp() * n.cdf(d1 - 0.2);
    assert!((v0 - bs).abs() <= 3.0 * se, "{v0} +- {se} vs {bs}");
    let csv = fs::read_to_string(dir.path().join("price.csv")).unwrap();
    assert!(csv.starts_with("v0,standard_error,n_paths,steps,seed\n"));
}

#[test]
fn backtest_contract() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("black_scholes.toml");
    let common = [
        "--config",
        s(&cfg),
        "--out",
        s(dir.path()),
        "--paths",
        "4000",
        "--steps",
        "16",
    ];
    let hedge = run(&[&["hedge"], &common[..], &["--seed", "5"]].concat());
    assert_eq!(
        hedge.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&hedge.stderr)
    );
    let plan = dir.path().join("plan.json");

    let same = run(&[&["backtest", "--plan", s(&plan)], &common[..], &["--seed", "5"]].concat());
    assert_eq!(same.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&same.stderr).contains("fresh seed"));

    let fresh = run(&[&["backtest", "--plan", s(&plan)], &common[..], &["--seed", "6"]].concat());
    assert_eq!(
        fresh.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&fresh.stderr)
    );
    let report = payload(&dir.path().join("backtest.json"));
    assert_eq!(report["training_seed"].as_u64(), Some(5));
    assert!(report["report"]["replication_rmse"].as_f64().unwrap() > 0.0);
    let errors = fs::read_to_string(dir.path().join("backtest_errors.csv")).unwrap();
    assert_eq!(errors.lines().count(), 4001);

    let other_grid = run(&[
        "backtest",
        "--plan",
        s(&plan),
        "--config",
        s(&cfg),
        "--out",
        s(dir.path()),
        "--steps",
        "32",
    ]);
    assert_eq!(other_grid.status.code(), Some(6));

    let other = run(&[
        "backtest",
        "--plan",
        s(&plan),
        "--config",
        s(&config("embedding.toml")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(other.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&other.stderr).contains("model hash mismatch"));
}

#[test]
fn threshold_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(config("black_scholes.toml"))
        .unwrap()
        .replace("max_replication_error = 0.2", "max_replication_error = 0.001");
    let cfg = dir.path().join("strict.toml");
    fs::write(&cfg, text).unwrap();
    let common = [
        "--config",
        s(&cfg),
        "--out",
        s(dir.path()),
        "--paths",
        "2000",
        "--steps",
        "8",
    ];
    assert_eq!(run(&[&["hedge"], &common[..]].concat()).status.code(), Some(0));
    let plan = dir.path().join("plan.json");
    let out = run(&[&["backtest", "--plan", s(&plan)], &common[..]].concat());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn embedding_plan_holds_no_bank_asset() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "hedge",
        "--config",
        s(&config("embedding.toml")),
        "--out",
        s(dir.path()),
        "--paths",
        "4000",
        "--steps",
        "16",
        "--format",
        "csv",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("plan.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "theta_2").unwrap();
    let mut rows = 0;
    for line in lines {
        let v: f64 = line.split(',').nth(col).unwrap().parse().unwrap();
        assert_eq!(v, 0.0);
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn payloads_do_not_depend_on_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("delta_zero_exchange.toml");
    let mut seen = Vec::new();
    for workers in ["1", "3"] {
        let out_dir = dir.path().join(format!("w{workers}"));
        let common = [
            "--config",
            s(&cfg),
            "--out",
            s(&out_dir),
            "--paths",
            "3000",
            "--steps",
            "16",
            "--workers",
            workers,
            "--format",
            "both",
        ];
        for cmd in ["price", "hedge"] {
            let out = run(&[&[cmd], &common[..]].concat());
            assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        }
        let plan = out_dir.join("plan.json");
        let out = run(&[&["backtest", "--plan", s(&plan)], &common[..]].concat());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        seen.push(out_dir);
    }
    for name in ["price.json", "plan.json", "backtest.json"] {
        let a = serde_json::to_string(&payload(&seen[0].join(name))).unwrap();
        let b = serde_json::to_string(&payload(&seen[1].join(name))).unwrap();
        assert_eq!(a, b, "{name}");
    }
    for name in ["price.csv", "plan.csv", "backtest_errors.csv", "backtest_steps.csv"] {
        assert_eq!(
            fs::read(seen[0].join(name)).unwrap(),
            fs::read(seen[1].join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn simulate_writes_states_and_increments() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "simulate",
        "--config",
        s(&config("smooth_asian.toml")),
        "--out",
        s(dir.path()),
        "--paths",
        "100",
        "--steps",
        "4",
        "--measure",
        "q",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let states = fs::read_to_string(dir.path().join("states.csv")).unwrap();
    assert!(states.starts_with("path_id,time,X_1,X_2\n"));
    assert_eq!(states.lines().count(), 1 + 100 * 5);
    let incs = fs::read_to_string(dir.path().join("increments.csv")).unwrap();
    assert_eq!(incs.lines().count(), 1 + 100 * 4);
    let p = payload(&dir.path().join("simulate.json"));
    assert_eq!(p["measure"], "Q");
}

#[test]
fn help_documents_flags_and_logging() {
    let out = run(&["price", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--config",
        "--out",
        "--seed",
        "--paths",
        "--steps",
        "--workers",
        "--format",
    ] {
        assert!(text.contains(flag), "{flag}");
    }
    let top = String::from_utf8_lossy(&run(&["--help"]).stdout).to_string();
    assert!(top.contains("DEGENHEDGE_LOG"));
}

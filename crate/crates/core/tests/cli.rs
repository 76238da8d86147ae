mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::repo_path;

fn nkscopf(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nkscopf"))
        .args(args)
        .env("NKSCOPF_OUT_DIR", out)
        .output()
        .unwrap()
}

fn case14() -> String {
    repo_path("cases/case14.m").display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// case14 with every load multiplied by `factor`.
fn scaled_case(dir: &Path, factor: f64) -> String {
    let text = std::fs::read_to_string(repo_path("cases/case14.m")).unwrap();
    let mut out = String::new();
    let mut in_bus = false;
    for line in text.lines() {
        if line.starts_with("mpc.bus") {
            in_bus = true;
        } else if in_bus && line.starts_with("];") {
            in_bus = false;
        } else if in_bus {
            let mut f: Vec<String> = line.split_whitespace().map(String::from).collect();
            for c in [2, 3] {
                f[c] = (f[c].parse::<f64>().unwrap() * factor).to_string();
            }
            out += &format!("\t{}\n", f.join("\t"));
            continue;
        }
        out += line;
        out += "\n";
    }
    let path = dir.join(format!("scaled_{factor}.m"));
    std::fs::write(&path, out).unwrap();
    path.display().to_string()
}

#[test]
fn powerflow_writes_state_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = nkscopf(&["powerflow", &case14()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let pf: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("powerflow.json")).unwrap()).unwrap();
    assert_eq!(pf["manifest"], "powerflow_manifest.json");
    assert!(pf["residual"].as_f64().unwrap() <= 1e-8);
    let m: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("powerflow_manifest.json")).unwrap()).unwrap();
    assert_eq!(m["exit_code"], 0);
    assert_eq!(m["case_digest"].as_str().unwrap().len(), 64);
    assert_eq!(m["outputs"][0], "powerflow.json");
    assert!(String::from_utf8_lossy(&o.stdout).contains("MW"));
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.m");
    std::fs::write(&bad, "mpc.bus = [ 1 2 ;\n").unwrap();
    let o = nkscopf(&["powerflow", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let heavy = scaled_case(dir.path(), 8.0);
    let o = nkscopf(&["powerflow", &heavy], dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));

    let over = scaled_case(dir.path(), 4.0);
    let o = nkscopf(&["opf", &over], dir.path());
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));

    let o = nkscopf(&["attack", &case14(), "--k", "2"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = nkscopf(&["attack", &case14(), "--k", "2", "--dispatch", "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = nkscopf(&["bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_problems_are_listed_before_solving() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"k": 0, "loss_window": 1, "attack": {"tol": -1}}"#).unwrap();
    let o = nkscopf(&["run", &case14(), "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for needle in ["k must be at least 1", "loss_window", "attack.tol"] {
        assert!(err.contains(needle), "{err}");
    }
    std::fs::write(&cfg, r#"{"k": 1, "unknown": 3}"#).unwrap();
    let o = nkscopf(&["run", &case14(), "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(!dir.path().join("history.csv").exists());
}

#[test]
fn attack_clamps_budget_and_ranks_devices() {
    let dir = tempfile::tempdir().unwrap();
    let o = nkscopf(&["opf", &case14()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let dispatch = dir.path().join("dispatch.json");
    let o = nkscopf(
        &["attack", &case14(), "--dispatch", dispatch.to_str().unwrap(), "--k", "40", "--top", "4"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning: k = 40"));
    let ranking = std::fs::read_to_string(dir.path().join("attack_ranking.csv")).unwrap();
    let rows: Vec<&str> = ranking.lines().collect();
    assert_eq!(rows[0], "# manifest: attack_manifest.json");
    assert_eq!(rows[1], "rank,device,label,y");
    assert_eq!(rows.len(), 6);
    let ys: Vec<f64> = rows[2..].iter().map(|r| r.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(ys.windows(2).all(|w| w[0] >= w[1]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("attack.json")).unwrap()).unwrap();
    assert_eq!(report["k"], 25);
    assert!(report["attack_loss"].as_f64() > report["zero_attack_loss"].as_f64());
}

#[test]
fn shipped_configs_run_and_flush_history() {
    for k in 1..=3 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = repo_path(&format!("configs/case14_k{k}.json"));
        let o = nkscopf(&["run", &case14(), "--config", cfg.to_str().unwrap()], dir.path());
        assert_eq!(o.status.code(), Some(0), "k = {k}: {}", stderr(&o));
        let csv = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
        let history: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("history.json")).unwrap()).unwrap();
        let records = history["records"].as_array().unwrap().len();
        assert_eq!(csv.lines().count(), records + 2);
        assert!(records >= 1);
        assert!(dir.path().join("dispatch.json").exists());
        let m: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("run_manifest.json")).unwrap()).unwrap();
        assert_eq!(m["seed"], 0);
        assert_eq!(m["config_digest"].as_str().unwrap().len(), 64);
        assert_eq!(m["details"]["timings"].as_array().unwrap().len(), records);
    }
}

#[test]
fn evaluate_reports_one_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(nkscopf(&["opf", &case14()], dir.path()).status.code(), Some(0));
    let dispatch = dir.path().join("dispatch.json");
    let d = dispatch.to_str().unwrap();
    let o = nkscopf(&["evaluate", &case14(), "--dispatch", d, "--counts", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = nkscopf(
        &["evaluate", &case14(), "--dispatch", d, "--sizes", "1,2,3", "--counts", "5", "--parallelism", "2"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("evaluation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        assert!(r.starts_with(&format!("{},5,", i + 1)), "{r}");
    }
    let first = std::fs::read(dir.path().join("evaluation.json")).unwrap();
    nkscopf(
        &["evaluate", &case14(), "--dispatch", d, "--sizes", "1,2,3", "--counts", "5"],
        dir.path(),
    );
    assert_eq!(first, std::fs::read(dir.path().join("evaluation.json")).unwrap());
}

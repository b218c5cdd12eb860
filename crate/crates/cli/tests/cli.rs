use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_voicescreen"));
    c.env_remove("VOICESCREEN_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Small cohort: 5 per class, 20 s each.
fn cohort(dir: &Path) -> String {
    let out = run(&[
        "simulate", "--n", "5", "--effect", "1.0", "--seed", "7", "--duration", "20", "--out",
        dir.to_str().unwrap(),
    ]);
    ok(&out);
    dir.join("manifest.json").to_str().unwrap().to_string()
}

const SMALL: [&str; 8] = ["--t", "5", "--n", "3", "--epochs", "60", "--k", "5"];

#[test]
fn simulate_cv_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = cohort(dir.path());
    let sim = read_json(&dir.path().join("simulation.json"));
    assert_eq!(sim["seed"], 7);
    assert_eq!(sim["participants"], 10);
    assert!(dir.path().join("s001.wav").exists());

    let r1 = dir.path().join("r1.json");
    let r2 = dir.path().join("r2.json");
    let audit = dir.path().join("audit.json");
    let mut args = vec!["cv", "--manifest", &manifest, "--feature", "egemaps-lite", "--model", "mlp", "--seed", "13"];
    args.extend(SMALL);
    let r1s = r1.to_str().unwrap();
    let r2s = r2.to_str().unwrap();
    let audits = audit.to_str().unwrap();
    let mut a1 = args.clone();
    a1.extend(["--jobs", "1", "--out", r1s, "--audit", audits]);
    ok(&run(&a1));
    let mut a2 = args.clone();
    a2.extend(["--jobs", "3", "--out", r2s]);
    ok(&run(&a2));
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());

    let report = read_json(&r1);
    assert_eq!(report["version"], 1);
    assert_eq!(report["seed"], 13);
    assert_eq!(report["config"]["T"], 5.0);
    assert_eq!(report["config"]["N"], 3);
    assert_eq!(report["config"]["feature_set"], "egemaps-lite");
    assert_eq!(report["config"]["model"], "mlp");
    assert_eq!(report["reproducibility"]["pipeline"]["seed"], 13);
    assert_eq!(report["per_fold"].as_array().unwrap().len(), 5);
    let c = &report["counts"];
    let total: u64 = ["tp", "fn", "tn", "fp"].iter().map(|k| c[k].as_u64().unwrap()).sum();
    assert_eq!(total, 10);

    let entries = read_json(&audit);
    assert_eq!(entries.as_array().unwrap().len(), 10);

    let table = run(&["report", "--input", r1s, "--format", "csv"]);
    ok(&table);
    let text = String::from_utf8(table.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "Interactive mode,Duration,#Audio clips,Feature,Accuracy,Sensitivity(Recall),Specificity,Precision"
    );
    assert!(lines.next().unwrap().starts_with("all,5s,3,egemaps-lite,"));

    // rerunning from the embedded config block reproduces the report
    let cfg_path = dir.path().join("pipeline.json");
    std::fs::write(&cfg_path, report["reproducibility"]["pipeline"].to_string()).unwrap();
    let r3 = dir.path().join("r3.json");
    ok(&run(&[
        "cv", "--manifest", &manifest, "--config", cfg_path.to_str().unwrap(), "--out",
        r3.to_str().unwrap(),
    ]));
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r3).unwrap());
}

#[test]
fn env_seed_applies_and_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = cohort(dir.path());
    let inv = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join(name);
        let mut c = bin();
        c.args(["segment", "--manifest", &manifest, "--t", "5", "--n", "2", "--out", out.to_str().unwrap()]);
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        if let Some(e) = env {
            c.env("VOICESCREEN_SEED", e);
        }
        ok(&c.output().unwrap());
        read_json(&out)
    };
    assert_eq!(inv("a.json", Some("21"), None)["seed"], 21);
    assert_eq!(inv("b.json", Some("21"), Some("4"))["seed"], 4);
    let c = inv("c.json", None, None);
    assert_eq!(c["seed"], 0);
    assert_eq!(c["clips"].as_array().unwrap().len(), 20);

    let mut bad = bin();
    bad.args(["segment", "--manifest", &manifest]).env("VOICESCREEN_SEED", "minus one");
    assert_eq!(bad.output().unwrap().status.code(), Some(1));
}

#[test]
fn sweep_and_extract() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = cohort(dir.path());
    let grid = dir.path().join("grid.json");
    ok(&run(&[
        "sweep", "--manifest", &manifest, "--ts", "5,10", "--ns", "1,3", "--epochs", "40", "--seed", "2",
        "--out", grid.to_str().unwrap(),
    ]));
    let g = read_json(&grid);
    let cells = g["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4);
    assert!(cells.iter().all(|c| c["status"] == "ok"));
    let md = run(&["report", "--input", grid.to_str().unwrap()]);
    ok(&md);
    assert_eq!(String::from_utf8(md.stdout).unwrap().lines().count(), 6);

    let feats = dir.path().join("f.json");
    ok(&run(&[
        "extract", "--manifest", &manifest, "--feature", "is09", "--t", "5", "--n", "1", "--out",
        feats.to_str().unwrap(),
    ]));
    let f = read_json(&feats);
    let ps = f["participants"].as_array().unwrap();
    assert_eq!(ps.len(), 10);
    assert_eq!(ps[0]["clips"][0]["values"].as_array().unwrap().len(), 384);

    let one = run(&["extract", "--wav", dir.path().join("s002.wav").to_str().unwrap()]);
    ok(&one);
    let v: Value = serde_json::from_slice(&one.stdout).unwrap();
    assert_eq!(v["dims"], 68);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let usage = run(&["cv", "--feature", "egemaps-lite"]);
    assert_eq!(usage.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&usage.stderr).contains("--manifest"));

    let missing = dir.path().join("nope.json");
    assert_eq!(run(&["cv", "--manifest", missing.to_str().unwrap()]).status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"version":1,"participants":[{"id":"a","label":"unknown","scenario":"reading","recordings":["a.wav"]}]}"#,
    )
    .unwrap();
    let out = run(&["cv", "--manifest", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown label"));

    // valid manifest whose audio cannot be decoded: every participant is
    // excluded, so the run fails at runtime
    std::fs::write(dir.path().join("a.wav"), b"not a wav").unwrap();
    let mut ps = Vec::new();
    for (i, label) in ["depressed", "healthy"].iter().cycle().take(4).enumerate() {
        ps.push(format!(r#"{{"id":"p{i}","label":"{label}","scenario":"reading","recordings":["a.wav"]}}"#));
    }
    let m = dir.path().join("m.json");
    std::fs::write(&m, format!(r#"{{"version":1,"participants":[{}]}}"#, ps.join(","))).unwrap();
    let out = run(&["cv", "--manifest", m.to_str().unwrap(), "--k", "2"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const TINY: &str = "\
[model]
hidden_width = 8
trend_blocks = 1
seasonality_blocks = 1
generic_blocks = 2

[training]
max_epochs = 3
batch_size = 32

[synthetic]
patients = 12
episodes_per_patient = 2
";

fn nbeats(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nbeats"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = nbeats(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(dir.path(), &["synth", "--config", "tiny.toml", "--seed", "3", "--out", "data"]);
    dir
}

fn train(dir: &Path, configuration: &str, out: &str) {
    let config = format!("{configuration}.toml");
    fs::write(
        dir.join(&config),
        TINY.replace("[model]", &format!("[model]\nconfiguration = \"{configuration}\"")),
    )
    .unwrap();
    ok(dir, &["train", "--config", &config, "--seed", "3", "--data", "data", "--out", out]);
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbeats(dir.path(), &["train", "--out", "m.bin"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));
    assert_eq!(nbeats(dir.path(), &["bogus"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbeats(dir.path(), &["train", "--data", "nowhere", "--out", "m.bin"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn train_is_reproducible_and_writes_loss_history() {
    let dir = setup();
    let d = dir.path();
    train(d, "interpretable", "a.bin");
    train(d, "interpretable", "b.bin");
    assert_eq!(sha(&d.join("a.bin")), sha(&d.join("b.bin")));
    let history = fs::read_to_string(d.join("a.bin.loss.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next(), Some("epoch,train_mse,valid_mse"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.len() == 3 && r[1].is_finite() && r[2].is_finite()));
}

#[test]
fn evaluate_analyze_plot_pipeline() {
    let dir = setup();
    let d = dir.path();
    train(d, "interpretable", "interp.bin");
    train(d, "generic", "generic.bin");
    let inputs: Vec<u8> = ["series.csv", "diagnoses.csv", "events.csv", "outcomes.csv"]
        .iter()
        .flat_map(|f| fs::read(d.join("data").join(f)).unwrap())
        .collect();

    ok(
        d,
        &[
            "evaluate", "--config", "tiny.toml", "--seed", "3", "--data", "data", "--model", "generic.bin", "--model",
            "interp.bin", "--out", "eval",
        ],
    );
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    let names: Vec<&str> = json["rows"].as_array().unwrap().iter().map(|r| r["model"].as_str().unwrap()).collect();
    assert_eq!(names, ["Persistence", "Generic", "Interpretable"]);
    let table = fs::read_to_string(d.join("eval.txt")).unwrap();
    assert!(table.contains("Model Configuration") && table.contains("1e-4"));

    ok(d, &["forecast", "--config", "tiny.toml", "--seed", "3", "--data", "data", "--model", "interp.bin", "--out", "f.csv"]);
    let forecast = fs::read_to_string(d.join("f.csv")).unwrap();
    assert!(forecast.starts_with("window_id,step,actual,forecast,trend,seasonality\n"));

    let analyze = |model: &str, prefix: &str, events: bool| {
        let mut args = vec!["analyze", "--config", "tiny.toml", "--seed", "3", "--data", "data", "--model", model];
        if events {
            args.extend(["--events", "data/events.csv", "--outcomes", "data/outcomes.csv"]);
        }
        args.extend(["--out", prefix]);
        nbeats(d, &args)
    };
    let generic = analyze("generic.bin", "g", true);
    assert_eq!(generic.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&generic.stderr).contains("interpretable"));

    assert!(analyze("interp.bin", "bare", false).status.success());
    let bare: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("bare.json")).unwrap()).unwrap();
    assert!(bare["records"].as_array().unwrap().iter().all(|r| r["drug_events"].as_array().unwrap().is_empty()));
    assert!(bare["mortality"].is_null());

    assert!(analyze("interp.bin", "an", true).status.success());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("an.json")).unwrap()).unwrap();
    let records = report["records"].as_array().unwrap();
    let flagged = records.iter().filter(|r| r["in_top_quartile"] == true).count();
    assert_eq!(flagged, (records.len() as f64 * 0.25).ceil() as usize);
    assert!(fs::read_to_string(d.join("an.txt")).unwrap().contains("mortality"));

    let id = records[0]["window_id"].as_str().unwrap();
    ok(d, &["plot", "--analysis", "an.json", "--record", id, "--out", "one.svg"]);
    ok(d, &["plot", "--analysis", "an.json", "--record", id, "--out", "again.svg"]);
    let svg = fs::read_to_string(d.join("one.svg")).unwrap();
    assert_eq!(svg, fs::read_to_string(d.join("again.svg")).unwrap());
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let classes: Vec<&str> = doc.descendants().filter_map(|n| n.attribute("class")).collect();
    for element in ["observed", "forecast-trend", "cutoff"] {
        assert!(classes.contains(&element), "{element} missing");
    }
    let has_events = !records[0]["drug_events"].as_array().unwrap().is_empty();
    assert_eq!(classes.contains(&"drug-interval"), has_events);

    let no_events = records.iter().find(|r| r["drug_events"].as_array().unwrap().is_empty()).unwrap();
    ok(d, &["plot", "--analysis", "an.json", "--record", no_events["window_id"].as_str().unwrap(), "--out", "plain.svg"]);
    assert!(!fs::read_to_string(d.join("plain.svg")).unwrap().contains("drug-interval"));

    ok(d, &["plot", "--analysis", "an.json", "--out", "figs"]);
    assert_eq!(fs::read_dir(d.join("figs")).unwrap().count(), flagged);

    let unknown = nbeats(d, &["plot", "--analysis", "an.json", "--record", "nobody@0", "--out", "x.svg"]);
    assert_eq!(unknown.status.code(), Some(1));

    let after: Vec<u8> = ["series.csv", "diagnoses.csv", "events.csv", "outcomes.csv"]
        .iter()
        .flat_map(|f| fs::read(d.join("data").join(f)).unwrap())
        .collect();
    assert_eq!(inputs, after);
}

#[test]
fn incompatible_model_is_rejected() {
    let dir = setup();
    let d = dir.path();
    train(d, "interpretable", "m.bin");
    fs::write(
        d.join("short.toml"),
        "[model]\nlookback = 60\n[pipeline]\nlookback_steps = 60\n[synthetic]\nwindow_steps = 96\n",
    )
    .unwrap();
    let out = nbeats(d, &["evaluate", "--config", "short.toml", "--data", "data", "--model", "m.bin", "--out", "e"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible"));
}

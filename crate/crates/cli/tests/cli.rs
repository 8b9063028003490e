use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn arena(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arena"))
        .args(args)
        .env_remove("ARENA_SEED")
        .output()
        .expect("spawn arena")
}

fn ok(args: &[&str]) -> Value {
    let out = arena(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json summary on stdout")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_exits_with_usage() {
    let out = arena(&["gen-listops", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn listops_generation_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.tsv");
    let b = dir.path().join("b.tsv");
    let summary = ok(&["gen-listops", "--n", "1000", "--max-len", "2000", "--seed", "7", "--out", s(&a)]);
    ok(&["gen-listops", "--n", "1000", "--max-len", "2000", "--seed", "7", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let hist: Vec<u64> = serde_json::from_value(summary["label_histogram"].clone()).unwrap();
    assert_eq!(hist.len(), 10);
    assert_eq!(hist.iter().sum::<u64>(), 1000);
    assert!(dir.path().join("a.tsv.json").exists());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.tsv");
    let b = dir.path().join("b.tsv");
    let run = |out: &Path, env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_arena"));
        c.args(["gen-listops", "--n", "20", "--max-len", "64", "--out", s(out)]);
        match env {
            Some(v) => c.env("ARENA_SEED", v),
            None => c.env_remove("ARENA_SEED"),
        };
        assert!(c.output().unwrap().status.success());
    };
    run(&a, Some("11"));
    ok(&["gen-listops", "--n", "20", "--max-len", "64", "--seed", "11", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn pathfinder_records_have_expected_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("pf.bin");
    let big = dir.path().join("px.bin");
    ok(&["gen-pathfinder", "--n", "10", "--size", "32", "--seed", "1", "--out", s(&small)]);
    ok(&["gen-pathfinder", "--n", "2", "--size", "128", "--seed", "1", "--out", s(&big)]);
    assert_eq!(fs::read(&small).unwrap().len(), 10 * (4 + 1024 + 1));
    assert_eq!(fs::read(&big).unwrap().len(), 2 * (4 + 16384 + 1));
    let sidecar: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("px.bin.json")).unwrap()).unwrap();
    assert_eq!(sidecar["config"]["size"], 128);
    assert_eq!(sidecar["seed"], 1);
}

#[test]
fn cifar_ingestion_writes_grayscale_records() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("batch.bin");
    let mut bytes = vec![3u8];
    bytes.extend(std::iter::repeat_n(255u8, 1024));
    bytes.extend(std::iter::repeat_n(0u8, 2048));
    fs::write(&input, &bytes).unwrap();
    let out = dir.path().join("gray.bin");
    let summary = ok(&["ingest-cifar", "--input", s(&input), "--out", s(&out)]);
    assert_eq!(summary["records"], 1);
    let rec = fs::read(&out).unwrap();
    assert_eq!(&rec[..4], &[32, 0, 32, 0]);
    assert!(rec[4..4 + 1024].iter().all(|&p| p == 76));
    assert_eq!(rec[4 + 1024], 3);
}

#[test]
fn cifar_trailing_bytes_reported_as_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.bin");
    fs::write(&input, vec![0u8; 3073 + 5]).unwrap();
    let out = arena(&["ingest-cifar", "--input", s(&input), "--json-errors"]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"], "format");
    assert!(err["message"].as_str().unwrap().contains("5 trailing"));
}

fn tiny_listops_run(dir: &Path, attention: &str) -> std::path::PathBuf {
    let data = dir.join("lo.tsv");
    ok(&["gen-listops", "--n", "40", "--max-len", "60", "--max-depth", "3", "--seed", "2", "--out", s(&data)]);
    let cfg = dir.join("train.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"preset": "listops_desk", "attention": {attention},
                "train": {{"steps": 3, "batch_size": 4, "learning_rate": 0.001, "warmup_steps": 1}},
                "train_data": {{"format": "listops", "path": "{}"}},
                "eval_data": {{"format": "listops", "path": "{}", "limit": 10}}}}"#,
            s(&data),
            s(&data)
        ),
    )
    .unwrap();
    let run = dir.join("run");
    let summary = ok(&["train", "--config", s(&cfg), "--seed", "5", "--out", s(&run)]);
    assert_eq!(summary["steps"], 3);
    assert!(summary["accuracy"].as_f64().is_some());
    data
}

#[test]
fn train_then_eval_and_span() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_listops_run(dir.path(), r#"{"kind": "full"}"#);
    let ckpt = dir.path().join("run/checkpoint.bin");
    let ev = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--format", "listops", "--limit", "10"]);
    assert_eq!(ev["examples"], 10);
    let acc = ev["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let sp = ok(&["span", "--checkpoint", s(&ckpt), "--data", s(&data), "--format", "listops", "--samples", "5"]);
    assert!(sp["span"]["aggregate"].as_f64().unwrap() >= 0.0);
}

#[test]
fn span_on_weight_free_mechanism_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_listops_run(dir.path(), r#"{"kind": "linformer", "rank": 16}"#);
    let ckpt = dir.path().join("run/checkpoint.bin");
    let out = arena(&["span", "--checkpoint", s(&ckpt), "--data", s(&data), "--format", "listops", "--json-errors"]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"], "unsupported_mechanism");
}

/// Checks the subset of JSON Schema used by the shipped report schema.
fn conforms(schema: &Value, v: &Value, at: &str) -> Result<(), String> {
    if let Some(c) = schema.get("const") {
        if c != v {
            return Err(format!("{at}: expected {c}"));
        }
    }
    if let Some(t) = schema.get("type") {
        let types: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
            _ => vec![],
        };
        let matches = |ty: &str| match ty {
            "object" => v.is_object(),
            "array" => v.is_array(),
            "string" => v.is_string(),
            "integer" => v.is_u64() || v.is_i64(),
            "number" => v.is_number(),
            "null" => v.is_null(),
            "boolean" => v.is_boolean(),
            _ => false,
        };
        if !types.iter().any(|ty| matches(ty)) {
            return Err(format!("{at}: {v} is not {types:?}"));
        }
    }
    if let (Some(obj), Some(props)) = (v.as_object(), schema.get("properties").and_then(Value::as_object)) {
        for req in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            let k = req.as_str().unwrap();
            if !obj.contains_key(k) {
                return Err(format!("{at}: missing {k}"));
            }
        }
        for (k, val) in obj {
            match props.get(k) {
                Some(sub) => conforms(sub, val, &format!("{at}.{k}"))?,
                None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    return Err(format!("{at}: unexpected key {k}"))
                }
                None => {}
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), v.as_array()) {
        for (i, x) in arr.iter().enumerate() {
            conforms(items, x, &format!("{at}[{i}]"))?;
        }
    }
    Ok(())
}

#[test]
fn bench_writes_schema_conforming_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let summary = ok(&[
        "bench",
        "--config",
        concat!(env!("CARGO_MANIFEST_DIR"), "/../../presets/table2_desk.json"),
        "--lengths",
        "64,128",
        "--warmup-steps",
        "0",
        "--measured-steps",
        "1",
        "--seed",
        "4",
        "--out",
        s(&out),
    ]);
    assert_eq!(summary["failures"], false);
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let schema: Value = serde_json::from_str(arena::bench::REPORT_SCHEMA).unwrap();
    conforms(&schema, &report, "$").unwrap();
    let rows = report["rows"].as_array().unwrap();
    let excluded = report["excluded"].as_array().unwrap();
    assert_eq!(rows.len() + excluded.len(), 11 * 2);
    assert_eq!(excluded.len(), 4 * 2);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), arena::bench::CSV_COLUMNS.join(","));
    assert_eq!(csv.lines().count(), rows.len() + 1);

    let metrics = dir.path().join("metrics.json");
    fs::write(&metrics, r#"[{"mechanism": "linformer", "task": "bench_desk", "accuracy": 0.5}]"#).unwrap();
    let merged = ok(&["report", "--input", s(&out.join("report.json")), "--metrics", s(&metrics)]);
    assert_eq!(merged["fig3_rows"], 1);
    let fig3 = fs::read_to_string(out.join("fig3.csv")).unwrap();
    assert!(fig3.lines().nth(1).unwrap().starts_with("linformer,bench_desk,128,0.5,"));
}

#[test]
fn bench_without_mechanisms_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.json");
    fs::write(&cfg, r#"{"mechanisms": []}"#).unwrap();
    let out = arena(&["bench", "--config", s(&cfg), "--json-errors"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"], "config");
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use promptpack::samples;
use serde_json::Value;

struct Scratch {
    dir: PathBuf,
}

impl Scratch {
    fn new(name: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("promptpack-cli-{}-{name}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        Self { dir }
    }

    fn file(&self, name: &str, contents: &str) -> String {
        let p = self.dir.join(name);
        std::fs::write(&p, contents).unwrap();
        p.to_str().unwrap().to_string()
    }

    fn path(&self, name: &str) -> String {
        self.dir.join(name).to_str().unwrap().to_string()
    }

    fn samples(&self) -> (String, String, String) {
        (
            self.file("prompt.txt", samples::PROMPT),
            self.file("report.txt", samples::REPORT),
            self.file("table.csv", samples::TABLE),
        )
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

fn run(args: &[&str]) -> Output {
    run_env(args, &[])
}

fn run_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_promptpack"));
    cmd.args(args).env_remove("SCORER_ENDPOINT").env_remove("SCORER_TOKEN").env_remove("EMBEDDER_ENDPOINT");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

#[test]
fn missing_prompt_is_a_usage_error() {
    let out = run(&["compress"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--prompt"));
    assert!(out.stdout.is_empty());
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn unreadable_prompt_is_a_data_error() {
    let s = Scratch::new("unreadable");
    assert_eq!(run(&["compress", "--prompt", &s.path("nope.txt")]).status.code(), Some(2));
}

#[test]
fn invalid_settings_are_usage_errors() {
    let s = Scratch::new("invalid");
    let (prompt, _, _) = s.samples();
    assert_eq!(run(&["compress", "--prompt", &prompt, "--budget", "1.5"]).status.code(), Some(1));
    assert_eq!(run(&["compress", "--prompt", &prompt, "--ngram", "1"]).status.code(), Some(1));
    assert_eq!(run(&["compress", "--prompt", &prompt, "--model", "nope"]).status.code(), Some(1));
    let bad = s.file("bad.json", "{\"budget\": 3");
    assert_eq!(run(&["compress", "--prompt", &prompt, "--config", &bad]).status.code(), Some(1));
}

#[test]
fn report_has_the_documented_shape() {
    let s = Scratch::new("report");
    let (prompt, report, table) = s.samples();
    let out_dir = s.path("bundle");
    let out = run(&["compress", "--prompt", &prompt, "--attach", &report, "--attach", &table, "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = stdout_json(&out);
    assert!(summary["ratio"].as_f64().unwrap() >= 1.0);
    assert!(summary["estSavings"].is_number());

    let report: Value = serde_json::from_str(&std::fs::read_to_string(Path::new(&out_dir).join("report.json")).unwrap()).unwrap();
    for key in ["originalTokens", "compressedTokens", "ratio", "estSavings", "fidelity", "dictionary", "stageTimings"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    let ratio = report["originalTokens"].as_f64().unwrap() / report["compressedTokens"].as_f64().unwrap();
    assert_eq!(report["ratio"].as_f64().unwrap(), ratio);
    assert!(report["fidelity"]["pairs"].as_array().unwrap().iter().all(|p| p["id"].is_string() && p["cos"].is_number()));
    assert_eq!(report["stageTimings"].as_array().unwrap().len(), 8);

    let bundle: Value = serde_json::from_str(&std::fs::read_to_string(Path::new(&out_dir).join("bundle.json")).unwrap()).unwrap();
    for key in ["compressedPrompt", "attachments", "dictionary", "quantParams", "report"] {
        assert!(bundle.get(key).is_some(), "bundle lacks {key}");
    }
    let quant = &bundle["quantParams"][0];
    assert_eq!(quant["attachment"], "table.csv");
    assert_eq!(quant["columns"][0]["params"]["type"], "uniform");
}

#[test]
fn bundle_goes_to_stdout_without_out_dir() {
    let s = Scratch::new("stdout");
    let (prompt, report, _) = s.samples();
    let out = run(&["compress", "--prompt", &prompt, "--attach", &report, "--topk", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["bundle"]["dictionary"][0]["entries"].as_array().unwrap().len(), 2);
}

#[test]
fn tables_expand_within_error_bound() {
    let s = Scratch::new("table");
    let (prompt, _, table) = s.samples();
    let out_dir = s.path("bundle");
    let out = run(&["compress", "--prompt", &prompt, "--attach", &table, "--bits", "6", "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(0));
    let restored = s.path("restored.csv");
    let out = run(&["expand", "--in", &out_dir, "--out", &restored]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let original = promptpack::table::Table::parse(samples::TABLE).unwrap();
    let back = promptpack::table::Table::parse(&std::fs::read_to_string(&restored).unwrap()).unwrap();
    let sidecar: Value = serde_json::from_str(&std::fs::read_to_string(Path::new(&out_dir).join("quant/table.csv.json")).unwrap()).unwrap();
    for col in sidecar["columns"].as_array().unwrap() {
        let j = col["index"].as_u64().unwrap() as usize;
        let (min, max) = (col["params"]["min"].as_f64().unwrap(), col["params"]["max"].as_f64().unwrap());
        let eps = (max - min) / 63.0;
        for (a, b) in original.rows.iter().zip(&back.rows) {
            let x: f64 = a[j].parse().unwrap();
            let y: f64 = b[j].parse().unwrap();
            assert!((x - y).abs() <= eps);
        }
    }
}

#[test]
fn expand_error_paths() {
    let s = Scratch::new("expand");
    let (prompt, report, table) = s.samples();
    let out_dir = s.path("bundle");
    assert_eq!(
        run(&["compress", "--prompt", &prompt, "--attach", &report, "--attach", &table, "--out", &out_dir]).status.code(),
        Some(0)
    );
    let target = s.path("x.txt");
    // two attachments and no --attachment
    assert_eq!(run(&["expand", "--in", &out_dir, "--out", &target]).status.code(), Some(1));
    assert_eq!(
        run(&["expand", "--in", &out_dir, "--attachment", "other.txt", "--out", &target]).status.code(),
        Some(1)
    );
    std::fs::remove_file(Path::new(&out_dir).join("dictionaries/report.txt.json")).unwrap();
    assert_eq!(
        run(&["expand", "--in", &out_dir, "--attachment", "report.txt", "--out", &target]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["expand", "--in", &s.path("missing"), "--out", &target]).status.code(), Some(2));
}

#[test]
fn grid_emits_one_line_per_cell() {
    let s = Scratch::new("grid");
    let (prompt, report, _) = s.samples();
    let out = run(&["grid", "--prompt", &prompt, "--attach", &report]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 12);
    assert_eq!(run(&["grid", "--prompt", &prompt, "--attach", &report]).stdout, out.stdout);

    let cell = lines.iter().find(|c| c["t"] == 3 && c["g"] == 2).unwrap();
    let direct = run(&["compress", "--prompt", &prompt, "--attach", &report, "--topk", "3", "--ngram", "2"]);
    let mut direct_report = stdout_json(&direct)["bundle"]["report"].clone();
    direct_report["stageTimings"] = Value::Array(vec![]);
    assert_eq!(cell["report"], direct_report);

    let out = run(&["grid", "--prompt", &prompt, "--attach", &report, "--t", "1,2", "--g", "2"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
}

#[test]
fn unreachable_scorer_exits_with_provider_code() {
    let s = Scratch::new("provider");
    let (prompt, _, _) = s.samples();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    drop(listener);
    let out = run_env(&["compress", "--prompt", &prompt], &[("SCORER_ENDPOINT", &url)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("token-probability"));
}

#[test]
fn exemplars_are_prepended() {
    let s = Scratch::new("exemplars");
    let (prompt, _, _) = s.samples();
    let pool = s.file("pool.txt", samples::EXEMPLARS);
    let out = run(&[
        "compress", "--prompt", &prompt, "--exemplars", &pool, "--exemplar-mode", "representative", "--seed", "3",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    let chosen = v["bundle"]["report"]["selectedExemplars"].as_array().unwrap();
    assert_eq!(chosen.len(), 3);
    let first = chosen[0]["text"].as_str().unwrap();
    assert!(v["bundle"]["compressedPrompt"].as_str().unwrap().starts_with(first));
}

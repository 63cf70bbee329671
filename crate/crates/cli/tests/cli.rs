use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn mesa(out: &Path, args: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mesa"));
    cmd.env_clear().arg("--out").arg(out).args(args);
    cmd
}

fn ok(mut cmd: Command) -> Value {
    let output = cmd.output().unwrap();
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    serde_json::from_slice(&output.stdout).unwrap()
}

fn error_record(output: &Output) -> (i32, String) {
    let record: Value = serde_json::from_slice(&output.stderr).unwrap();
    let kind = record["error"]["kind"].as_str().unwrap().to_string();
    assert!(record["error"]["message"].as_str().is_some());
    (output.status.code().unwrap(), kind)
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden").join(name)
}

#[test]
fn verify_theory_crosses_at_m() {
    let dir = TempDir::new().unwrap();
    let summary = ok(mesa(dir.path(), &["verify-theory", "--theorem", "1", "--M", "8", "--H", "0"]));
    assert_eq!(summary["crossing"], 8);
    let csv = fs::read_to_string(dir.path().join("theorem1_M8_H0.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "t,observed,predicted,alpha_bos,verdict");
    assert_eq!(rows.len(), 701);
    assert!(rows[7].starts_with("7,") && rows[7].ends_with("success"));
    assert!(rows[8].starts_with("8,") && rows[8].ends_with("boundary"));
    assert!(rows[9].ends_with("failure"));
}

#[test]
fn gen_positions_matches_golden() {
    let dir = TempDir::new().unwrap();
    ok(mesa(dir.path(), &["gen-positions", "--scheme", "stair", "--n", "10", "--N", "4", "--E", "2"]));
    let got = fs::read(dir.path().join("positions_stair_n10.csv")).unwrap();
    assert_eq!(got, fs::read(golden("stair_n10_N4_E2.csv")).unwrap());

    ok(mesa(dir.path(), &["gen-positions", "--scheme", "approx-alibi", "--n", "10"]));
    let got = fs::read(dir.path().join("positions_approx-alibi_n10.csv")).unwrap();
    assert_eq!(got, fs::read(golden("approx_alibi_n10.csv")).unwrap());
}

#[test]
fn gen_positions_json_carries_metadata() {
    let dir = TempDir::new().unwrap();
    ok(mesa(dir.path(), &["gen-positions", "--scheme", "rerope", "--n", "6", "--N", "2", "--format", "json"]));
    let doc: Value = serde_json::from_slice(&fs::read(dir.path().join("positions_rerope_n6.json")).unwrap()).unwrap();
    assert_eq!(doc["params"]["scheme"], "rerope");
    assert_eq!(doc["params"]["N"], 2);
    assert_eq!(doc["rows"][5], serde_json::json!([2.0, 2.0, 2.0, 2.0, 1.0, 0.0]));
}

#[test]
fn plan_echoes_quotient_and_width() {
    let dir = TempDir::new().unwrap();
    let plan = ok(mesa(dir.path(), &["plan", "--I", "9000", "--T", "4096"]));
    assert_eq!((plan["N"].as_u64(), plan["C"].as_u64()), (Some(2), Some(2796)));
    assert_eq!(plan["spans"][0], serde_json::json!([0, 100]));
    assert_eq!(plan["spans"].as_array().unwrap().last().unwrap(), &serde_json::json!([8488, 9000]));
    let saved: Value = serde_json::from_slice(&fs::read(dir.path().join("plan.json")).unwrap()).unwrap();
    assert_eq!(saved, plan);
}

#[test]
fn e_without_stair_is_an_error_record() {
    let dir = TempDir::new().unwrap();
    let output = mesa(dir.path(), &["gen-positions", "--scheme", "rerope", "--n", "4", "--E", "2"])
        .output()
        .unwrap();
    assert_eq!(error_record(&output), (2, "invalid_combination".to_string()));
    assert!(output.stdout.is_empty());

    let output = mesa(dir.path(), &["verify-theory", "--theorem", "3", "--E", "2"]).output().unwrap();
    assert_eq!(error_record(&output), (2, "invalid_combination".to_string()));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let output = mesa(dir.path(), &["plan", "--I", "9000", "--bogus"]).output().unwrap();
    assert_eq!(error_record(&output), (2, "usage".to_string()));
}

#[test]
fn library_errors_keep_their_kind() {
    let dir = TempDir::new().unwrap();
    let output = mesa(dir.path(), &["plan", "--I", "500"]).output().unwrap();
    assert_eq!(error_record(&output), (1, "input_too_short".to_string()));
    let output = mesa(dir.path(), &["gen-positions", "--scheme", "xpos", "--n", "4"]).output().unwrap();
    assert_eq!(error_record(&output), (1, "invalid_parameter".to_string()));
}

#[test]
fn help_exits_cleanly() {
    let dir = TempDir::new().unwrap();
    let output = mesa(dir.path(), &["--help"]).output().unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    for sub in ["gen-positions", "plan", "verify-theory", "run", "passkey", "bench"] {
        assert!(text.contains(sub), "{sub}");
    }
}

#[test]
fn flag_beats_env_beats_config() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("mesa.toml");
    fs::write(&config, "scheme = \"stair\"\nN = 3\nE = 2\nn = 8\n").unwrap();
    let n_of = |cmd: &mut Command| -> u64 {
        let output = cmd.output().unwrap();
        assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
        let doc: Value =
            serde_json::from_slice(&fs::read(dir.path().join("positions_stair_n8.json")).unwrap()).unwrap();
        doc["params"]["N"].as_u64().unwrap()
    };
    let cfg = config.to_str().unwrap();
    let base = ["--config", cfg, "gen-positions", "--format", "json"];
    assert_eq!(n_of(&mut mesa(dir.path(), &base)), 3);
    assert_eq!(n_of(mesa(dir.path(), &base).env("MESA_N", "5")), 5);
    let mut with_flag = base.to_vec();
    with_flag.extend(["--N", "7"]);
    assert_eq!(n_of(mesa(dir.path(), &with_flag).env("MESA_N", "5")), 7);
}

#[test]
fn config_rejects_unknown_keys() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "NN = 3\n").unwrap();
    let output = mesa(dir.path(), &["--config", config.to_str().unwrap(), "plan", "--I", "9000"])
        .output()
        .unwrap();
    assert_eq!(error_record(&output), (2, "config".to_string()));
}

fn outputs(dir: &Path, names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|n| fs::read(dir.join(n)).unwrap()).collect()
}

#[test]
fn identical_invocations_write_identical_files() {
    let small = ["--T", "64", "--F", "8", "--L", "16", "--M-max", "4", "--N", "16", "--E", "4"];
    let runs: Vec<Vec<&str>> = vec![
        [&["run", "--I", "300", "--max-new", "5"][..], &small].concat(),
        vec!["passkey", "--targets", "64,128", "--samples", "2"],
        [&["bench", "--n", "256,512", "--cells-only"][..], &small].concat(),
        vec!["verify-theory", "--theorem", "c", "--M", "16", "--N", "4", "--E", "2"],
        vec!["gen-positions", "--scheme", "leaky-rerope", "--n", "12", "--N", "4", "--k-inv", "0.5"],
    ];
    let files = [
        "run.json",
        "passkey.jsonl",
        "cells.csv",
        "corollary_M16_H0.csv",
        "positions_leaky-rerope_n12.csv",
    ];
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for dir in [&a, &b] {
        for args in &runs {
            let mut cmd = mesa(dir.path(), &["--seed", "11"]);
            cmd.args(args);
            ok(cmd);
        }
    }
    assert_eq!(outputs(a.path(), &files), outputs(b.path(), &files));

    let c = TempDir::new().unwrap();
    let mut cmd = mesa(c.path(), &["--seed", "12"]);
    cmd.args(&runs[1]);
    ok(cmd);
    assert_ne!(outputs(a.path(), &["passkey.jsonl"]), outputs(c.path(), &["passkey.jsonl"]));
}

#[test]
fn run_report_covers_the_whole_input() {
    let dir = TempDir::new().unwrap();
    let args = [
        "run", "--I", "300", "--max-new", "3", "--T", "64", "--F", "8", "--L", "16", "--M-max", "4", "--N", "16", "--E",
        "4", "--exec", "sequential",
    ];
    ok(mesa(dir.path(), &args));
    let run: Value = serde_json::from_slice(&fs::read(dir.path().join("run.json")).unwrap()).unwrap();
    let report = &run["report"];
    assert_eq!(report["mode"], "chunked");
    assert_eq!(report["input_tokens"], 301);
    assert_eq!(report["generated"].as_array().unwrap().len(), 3);
    assert_eq!(report["cache_tokens"], 301 + 2);
    assert_eq!(report["plan"]["last_span"][1], 301);
    let timings: Value = serde_json::from_slice(&fs::read(dir.path().join("timings.json")).unwrap()).unwrap();
    for key in ["first_ms", "middle_ms", "last_ms", "decode_ms"] {
        assert!(timings[key].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn run_reads_text_input() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("input.txt");
    fs::write(&input, "the sky is blue ".repeat(20)).unwrap();
    ok(mesa(dir.path(), &["run", "--input", input.to_str().unwrap(), "--max-new", "2", "--T", "128", "--N", "16", "--E", "4"]));
    let run: Value = serde_json::from_slice(&fs::read(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(run["report"]["mode"], "vanilla");
    assert_eq!(run["report"]["input_tokens"], 81);
    assert_eq!(run["text"].as_str().unwrap().split_whitespace().count(), 2);
}

#[test]
fn bench_writes_cells_and_timings() {
    let dir = TempDir::new().unwrap();
    let args = [
        "bench", "--method", "vanilla,mesa,rerope_dual", "--n", "128,256", "--T", "64", "--F", "8", "--L", "16",
        "--M-max", "4", "--N", "16", "--E", "4", "--decode-tokens", "1", "--d", "8", "--head-dim", "4",
    ];
    ok(mesa(dir.path(), &args));
    let cells = fs::read_to_string(dir.path().join("cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 1 + 3 * 2);
    assert!(cells.contains("vanilla,128,8256\n"));
    assert!(cells.contains("rerope_dual,128,16512\n"));
    let timings = fs::read_to_string(dir.path().join("timings.csv")).unwrap();
    let rows: Vec<&str> = timings.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 2);
    assert!(rows.iter().all(|r| !r.starts_with("rerope_dual")));
    // peak_bytes comes from the counting allocator
    assert!(rows.iter().all(|r| r.rsplit(',').next().unwrap().parse::<usize>().unwrap() > 0));
}

#[test]
fn passkey_evaluation_scores_every_sample() {
    let dir = TempDir::new().unwrap();
    let args = [
        "passkey", "--targets", "64,96", "--samples", "2", "--evaluate", "--max-new", "3", "--T", "256", "--N", "32",
        "--E", "4",
    ];
    let summary = ok(mesa(dir.path(), &args));
    assert_eq!(summary["samples"], 4);
    let lines = fs::read_to_string(dir.path().join("passkey.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
    let scores = fs::read_to_string(dir.path().join("passkey_scores.csv")).unwrap();
    assert_eq!(scores.lines().next().unwrap(), "target_length,key,key_position,generated,retrieved");
    assert_eq!(scores.lines().count(), 5);
}

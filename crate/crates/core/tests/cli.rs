use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specstream")).current_dir(dir).args(args).output().unwrap()
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn init(dir: &Path) {
    let cfg = r#"{"vocab_size":12,"hidden_size":8,"num_heads":2,"num_layers":2,"msa_layers":1,
                  "num_streams":3,"prune_rank":2,"max_seq_len":24}"#;
    fs::write(dir.join("cfg.json"), cfg).unwrap();
    let doc = ok_json(dir, &["init", "--config", "cfg.json", "--seed", "3", "--out", "m"]);
    assert_eq!(doc["schema_version"], 1);
    assert!(dir.join("m/model.bin").exists());
}

#[test]
fn init_train_decode() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    init(dir);
    let doc = ok_json(
        dir,
        &[
            "train",
            "--model",
            "m/model.manifest.json",
            "--steps",
            "5",
            "--seq-len",
            "8",
            "--out",
            "t",
            "--curve",
            "c.csv",
        ],
    );
    assert_eq!(doc["steps"], 5);
    assert!(fs::read_to_string(dir.join("c.csv")).unwrap().starts_with("step,loss,main_nll,stream_1_nll"));

    let doc = ok_json(
        dir,
        &[
            "decode",
            "--model",
            "t/model.manifest.json",
            "--prompt",
            "1, 2 3",
            "--gamma",
            "3",
            "--k",
            "2",
            "--max-new",
            "7",
            "--compare",
            "--dump-trees",
            "trees.json",
        ],
    );
    assert_eq!(doc["match"], true);
    assert_eq!(doc["tokens"].as_array().unwrap().len(), 7);
    assert_eq!(doc["tokens"], doc["reference"]);
    let trees: Value = serde_json::from_slice(&fs::read(dir.join("trees.json")).unwrap()).unwrap();
    let calls = doc["metrics"]["target_calls"].as_u64().unwrap();
    // the last pass issues no further draft
    assert_eq!(trees["trees"].as_array().unwrap().len() as u64, calls - 1);
}

#[test]
fn decode_writes_to_out_and_reads_prompt_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    init(dir);
    fs::write(dir.join("p.json"), r#"{"prompt": [4, 5]}"#).unwrap();
    let out = run(
        dir,
        &[
            "decode",
            "--model",
            "m/model.manifest.json",
            "--prompt-file",
            "p.json",
            "--gamma",
            "2",
            "--max-new",
            "5",
            "--out",
            "d.json",
        ],
    );
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let doc: Value = serde_json::from_slice(&fs::read(dir.join("d.json")).unwrap()).unwrap();
    assert_eq!(doc["prompt"], serde_json::json!([4, 5]));
}

#[test]
fn bench_csv_has_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    init(dir);
    let out = run(
        dir,
        &[
            "bench",
            "--model",
            "m/model.manifest.json",
            "--gammas",
            "1,3",
            "--ks",
            "1,2",
            "--num-prompts",
            "3",
            "--max-new",
            "6",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "gamma,k,tau,cr_ratio,mean_verified_tree,flops_per_token,pruned_nodes,matches_reference");
    assert_eq!(lines.len(), 1 + 2 * 2 * 3);
    assert!(lines[1..].iter().all(|l| l.ends_with(",true")));
}

#[test]
fn perf_point_and_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = ok_json(tmp.path(), &["perf", "--gamma", "4", "--ratio", "10", "--zeta-over-beta", "1.4"]);
    assert_eq!(doc["parity_zeta_over_beta"], 1.4);
    assert_eq!(doc["speedup"], 1.0);
    let out = run(tmp.path(), &["perf", "--out", "g.csv"]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(tmp.path().join("g.csv")).unwrap().lines().count(), 1 + 19 * 16);
}

#[test]
fn check_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = ok_json(tmp.path(), &["check", "--cases", "12", "--seed", "40"]);
    assert_eq!(doc["matched"], 12);
}

#[test]
fn failures_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    init(dir);
    for args in [
        &["decode", "--model", "missing.json", "--prompt", "1"][..],
        &["decode", "--model", "m/model.manifest.json", "--prompt", "1 x"],
        &["decode", "--model", "m/model.manifest.json", "--prompt", "1", "--gamma", "4"],
        &["decode", "--model", "m/model.manifest.json", "--prompt", "1", "--compare", "--temperature", "1"],
        &["train", "--model", "m/model.manifest.json", "--optimizer", "lion", "--out", "x"],
        &["perf", "--ratio", "10", "--zeta-over-beta", "9"],
        &["nonsense"],
    ] {
        let out = run(dir, args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn init_is_deterministic_and_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    init(dir);
    let first = fs::read(dir.join("m/model.bin")).unwrap();
    ok_json(dir, &["init", "--config", "cfg.json", "--seed", "3", "--out", "m2"]);
    assert_eq!(first, fs::read(dir.join("m2/model.bin")).unwrap());

    let manifest: Value = serde_json::from_slice(&fs::read(dir.join("m/model.manifest.json")).unwrap()).unwrap();
    let names: Vec<&str> = manifest["tensors"].as_array().unwrap().iter().map(|t| t["name"].as_str().unwrap()).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("stream_embedding")).count(), 3);

    let bad = r#"{"vocab_size":12,"hidden_size":8,"num_heads":2,"num_layers":2,"msa_layers":2,
                  "num_streams":3,"prune_rank":2,"max_seq_len":24}"#;
    fs::write(dir.join("bad.json"), bad).unwrap();
    let out = run(dir, &["init", "--config", "bad.json", "--out", "b"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("msa_layers"));
}

#[test]
fn gamma_zero_is_plain_decoding() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    init(dir);
    let doc = ok_json(dir, &["decode", "--model", "m/model.manifest.json", "--prompt", "3", "--gamma", "0", "--max-new", "9"]);
    assert_eq!(doc["cr_ratio"], 1.0);
    assert_eq!(doc["metrics"]["target_calls"], 9);
}

fn bench_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn bench_rows_on_a_trained_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = r#"{"vocab_size":16,"hidden_size":16,"num_heads":2,"num_layers":2,"msa_layers":1,
                  "num_streams":4,"prune_rank":4,"max_seq_len":24}"#;
    fs::write(dir.join("cfg.json"), cfg).unwrap();
    ok_json(dir, &["init", "--config", "cfg.json", "--seed", "1", "--out", "m"]);
    ok_json(
        dir,
        &[
            "train", "--model", "m/model.manifest.json", "--language", "keyed-lookup", "--language-seed", "5",
            "--steps", "100", "--optimizer", "adam", "--out", "t",
        ],
    );
    let out = run(
        dir,
        &[
            "bench", "--model", "t/model.manifest.json", "--language", "keyed-lookup", "--language-seed", "5",
            "--taus", "0,0.05", "--max-new", "20",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = bench_rows(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows.len(), 4 * 3 * 2);
    let f = |r: &Vec<String>, i: usize| r[i].parse::<f64>().unwrap();
    let find = |g: &str, k: &str, t: &str| rows.iter().find(|r| r[0] == g && r[1] == k && r[2] == t).unwrap();
    for r in &rows {
        assert_eq!(r[7], "true");
        if r[1] == "1" {
            assert!(f(r, 4) <= f(r, 0) + 1.0);
        }
    }
    for g in ["1", "2", "3", "4"] {
        let unpruned = find(g, "3", "0");
        let pruned = find(g, "3", "0.05");
        assert!(f(pruned, 4) < f(unpruned, 4), "γ={g}: pruning kept every node");
        assert!(f(pruned, 6) > 0.0);
    }
    let flops: Vec<f64> = ["1", "2", "3"].iter().map(|k| f(find("4", k, "0"), 5)).collect();
    assert!(flops.windows(2).all(|w| w[1] > w[0]), "{flops:?}");
}

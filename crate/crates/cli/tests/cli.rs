use std::path::Path;
use std::process::{Command, Output};

fn focus_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_focus-lab")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn small_verify(out: &Path, extra: &[&str]) -> Output {
    let o = out.to_str().unwrap();
    let cfg = out.join("grid.json");
    std::fs::create_dir_all(out).unwrap();
    std::fs::write(&cfg, r#"{"T": [8, 33], "K": [2, 4], "windows": [1, 5], "seeds": 2}"#).unwrap();
    let mut args = vec!["verify", "--config", cfg.to_str().unwrap(), "--out", o];
    args.extend_from_slice(extra);
    focus_lab(&args)
}

#[test]
fn unknown_flags_and_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for args in [
        vec!["verify", "--out", d, "--frobnicate"],
        vec!["bench", "--out", d, "--format", "xml"],
        vec!["train", "--out", d, "--normalization", "entmax"],
        vec!["verify", "--out", d, "--topk", "zero"],
        vec!["nonsense"],
    ] {
        let o = focus_lab(&args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn config_with_unknown_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"T": [8], "typo": 1}"#).unwrap();
    let o = focus_lab(&["verify", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("typo"), "{}", stderr(&o));

    let missing = focus_lab(&["train", "--config", "/definitely/missing.json", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn verify_report_carries_config_and_cases() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_verify(dir.path(), &["--seed", "9"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&dir.path().join("verify.json"));
    assert_eq!(r["format_version"], 1);
    assert_eq!(r["config"]["seed"], 9);
    assert_eq!(r["status"], "PASS");
    // T × K × w × distinct k per K, times 2 seeds.
    assert_eq!(r["cases"].as_array().unwrap().len(), 2 * 2 * 2 * (2 + 3));
    let c = &r["cases"][0];
    for key in ["T", "K", "k", "w", "max_abs_err", "min_row_cosine", "pairs_A", "pairs_B", "disjoint_ok"] {
        assert!(!c[key].is_null(), "missing {key}");
    }
}

#[test]
fn verify_fault_names_the_broken_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_verify(dir.path(), &["--fault", "double-count"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("disjoint_cover"), "{}", stderr(&o));
    assert_eq!(json(&dir.path().join("verify.json"))["status"], "FAIL");
}

#[test]
fn verify_csv_has_header_and_one_row_per_case() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_verify(dir.path(), &["--format", "csv", "--K", "4", "--topk", "K"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("verify.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "T,K,k,w,seed_index,max_abs_err,min_row_cosine,pairs_A,pairs_B,disjoint_ok,pass"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * 2 * 2);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("4")));
}

#[test]
fn bench_reports_ratios_and_separates_timings() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = focus_lab(&["bench", "--out", d, "--T", "512,1024", "--K", "4", "--window", "16"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&dir.path().join("bench.json"));
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[1]["pair_ratio"].as_f64().unwrap() > rows[0]["pair_ratio"].as_f64().unwrap());
    assert!(r.get("threads").is_none(), "timing data leaked into the reproducible report");
    let t = json(&dir.path().join("bench_timings.json"));
    let timed = &t["rows"][0];
    assert!(timed["focus_ms"].as_f64().unwrap() > 0.0);
    assert!(timed["max_abs_err"].as_f64().unwrap() < 1e-10);
    assert!((0.0..1.0).contains(&timed["sort_fraction"].as_f64().unwrap()));
}

#[test]
fn bench_rejects_topk_above_groups() {
    let dir = tempfile::tempdir().unwrap();
    let o = focus_lab(&["bench", "--out", dir.path().to_str().unwrap(), "--K", "4", "--topk", "5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_then_inspect_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let run = root.join("run");
    let cfg = root.join("lab.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 4, "model": {"d": 16, "heads": 2, "ffn_dim": 16, "layers": 1, "T": 32, "w": 4, "K": 4, "d_g": 8},
            "train": {"pretrain_steps": 10, "centroid_steps": 20, "full_steps": 10, "eval_every": 10, "eval_sequences": 2},
            "corpus": {"train_bytes": 4000, "eval_bytes": 400}}"#,
    )
    .unwrap();
    let o = focus_lab(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap(), "--normalization", "softmax"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = json(&run.join("train_report.json"));
    assert_eq!(report["config"]["model"]["normalization"], "softmax_with_balance_loss");
    // Step counting restarts after pretraining.
    assert_eq!(report["final_step"], 30);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,loss,dominance,stability,balance_minmax");
    assert_eq!(metrics.lines().count(), 1 + 4);

    let corpus = root.join("text.txt");
    std::fs::write(&corpus, "Anna saw the (red) boat, \"again\". ".repeat(20)).unwrap();
    let ck = run.join("checkpoint");
    let out = root.join("inspect");
    let args = |ck: &Path, corpus: &Path| {
        vec![
            "inspect-groups".to_string(),
            "--checkpoint".into(),
            ck.to_str().unwrap().into(),
            "--corpus".into(),
            corpus.to_str().unwrap().into(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--windows".into(),
            "3".into(),
        ]
    };
    let ok = Command::new(env!("CARGO_BIN_EXE_focus-lab")).args(args(&ck, &corpus)).output().unwrap();
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("top tokens"));
    let g = json(&out.join("group_report.json"));
    assert_eq!(g["layers"][0]["report"]["tokens"], 3 * 32);

    let missing = Command::new(env!("CARGO_BIN_EXE_focus-lab")).args(args(&ck, &root.join("absent.txt"))).output().unwrap();
    assert_eq!(code(&missing), 2);
    assert!(stderr(&missing).contains("absent.txt"));

    let bad = root.join("bad");
    std::fs::create_dir_all(&bad).unwrap();
    for f in ["model.ftns", "model.json"] {
        std::fs::copy(ck.join(f), bad.join(f)).unwrap();
    }
    let meta = std::fs::read_to_string(bad.join("model.json")).unwrap();
    std::fs::write(bad.join("model.json"), meta.replacen("\"format_version\": 1", "\"format_version\": 7", 1)).unwrap();
    let corrupt = Command::new(env!("CARGO_BIN_EXE_focus-lab")).args(args(&bad, &corpus)).output().unwrap();
    assert_eq!(code(&corrupt), 2);
    assert!(stderr(&corrupt).contains("format_version"), "{}", stderr(&corrupt));

    let bytes = std::fs::read(ck.join("model.ftns")).unwrap();
    std::fs::write(bad.join("model.json"), &meta).unwrap();
    std::fs::write(bad.join("model.ftns"), &bytes[..bytes.len() / 2]).unwrap();
    let truncated = Command::new(env!("CARGO_BIN_EXE_focus-lab")).args(args(&bad, &corpus)).output().unwrap();
    assert_eq!(code(&truncated), 2, "{}", stderr(&truncated));
    assert!(stderr(&truncated).contains("model.ftns"), "{}", stderr(&truncated));
}

#[test]
fn sinkhorn_train_violation_exits_one_after_writing_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = dir.path().join("lab.json");
    // One Sinkhorn round at a low temperature leave columns unbalanced.
    std::fs::write(
        &cfg,
        r#"{"model": {"d": 16, "heads": 2, "ffn_dim": 16, "layers": 1, "T": 32, "w": 4, "K": 4, "d_g": 8, "tau": 0.02, "N": 1},
            "train": {"pretrain_steps": 5, "centroid_steps": 10, "full_steps": 0, "eval_every": 5, "eval_sequences": 2},
            "corpus": {"train_bytes": 4000, "eval_bytes": 400}}"#,
    )
    .unwrap();
    let o = focus_lab(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("sinkhorn_column_balance"));
    assert!(run.join("metrics.csv").is_file() && run.join("checkpoint/model.json").is_file());
    let r = json(&run.join("train_report.json"));
    assert_eq!(r["invariants"][0]["ok"], false);
}

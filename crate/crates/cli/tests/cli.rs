mod common;

use std::fs;

use common::*;
use salienteye::synth::{self, TextureFamily};

#[test]
fn label_prints_summary_and_writes_jsonl() {
    let fx = Fixture::new();
    let out = fx.path().join("out");
    let o = fx.run(&["label", s(&fx.manifest), "--out", s(&out)]);
    assert_ok(&o);
    let line = stdout(&o);
    assert!(
        line.starts_with("High: ")
            && line.contains(" Low: ")
            && line.contains(" Average: ")
            && line.contains(" Unlabeled: "),
        "{line}"
    );
    let rows = fs::read_to_string(out.join("labeled.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 30);
    let first: serde_json::Value = serde_json::from_str(rows.lines().next().unwrap()).unwrap();
    assert!(first["label"].is_string() && first["cohort"]["size"].is_number());
}

#[test]
fn label_warns_about_missing_images() {
    let fx = Fixture::new();
    fs::remove_file(fx.photos().join("acct_003.png")).unwrap();
    fs::remove_file(fx.photos().join("acct_004.png")).unwrap();
    let o = fx.run(&["label", s(&fx.manifest), "--out", s(&fx.path().join("out"))]);
    assert_ok(&o);
    assert_eq!(stderr(&o).matches("warning:").count(), 2, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("High: "));
}

#[test]
fn malformed_manifest_exits_2_with_line_number() {
    let fx = Fixture::new();
    let text = fs::read_to_string(&fx.manifest).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "{\"post_id\": \"broken\"";
    let bad = fx.path().join("bad.jsonl");
    fs::write(&bad, lines.join("\n")).unwrap();
    let o = fx.run(&["label", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.jsonl:3:"), "{}", stderr(&o));
}

#[test]
fn train_is_deterministic_and_records_history() {
    let fx = Fixture::new();
    let out = fx.path().join("out");
    assert_ok(&fx.run(&["label", s(&fx.manifest), "--out", s(&out)]));
    let labeled = out.join("labeled.jsonl");
    let a = fx.path().join("a");
    let b = fx.path().join("b");
    let o = fx.run(&["train", s(&labeled), "--out", s(&a), "--seed", "3"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("macro F1"));
    assert_ok(&fx.run(&["train", s(&labeled), "--out", s(&b), "--seed", "3"]));
    let head_a = fs::read(a.join("head.json")).unwrap();
    assert_eq!(head_a, fs::read(b.join("head.json")).unwrap());
    let head: serde_json::Value = serde_json::from_slice(&head_a).unwrap();
    assert_eq!(head["history"].as_array().unwrap().len(), 3);
    assert_eq!(head["config"]["seed"], 3);
    assert_eq!(head["train_config"]["seed"], 3);

    let c = fx.path().join("c");
    assert_ok(&fx.run(&["train", s(&labeled), "--out", s(&c), "--seed", "4"]));
    assert_ne!(head_a, fs::read(c.join("head.json")).unwrap());
}

#[test]
fn train_exit_codes() {
    let fx = Fixture::new();
    let out = fx.path().join("out");
    assert_ok(&fx.run(&["label", s(&fx.manifest), "--out", s(&out)]));
    let text = fs::read_to_string(out.join("labeled.jsonl")).unwrap();
    let only_high: Vec<&str> = text.lines().filter(|l| l.contains("\"label\":\"High\"")).collect();
    assert!(!only_high.is_empty());
    let high = fx.path().join("high.jsonl");
    fs::write(&high, only_high.join("\n")).unwrap();
    assert_eq!(code(&fx.run(&["train", s(&high), "--out", s(&out)])), 3);

    let broken = fx.path().join("broken.json");
    fs::write(&broken, "{\"model_path\": \"nowhere.onnx\"}").unwrap();
    let o = bin(&[
        "train",
        s(&out.join("labeled.jsonl")),
        "--backbone",
        s(&broken),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let o = bin(&["train", s(&out.join("labeled.jsonl")), "--out", s(&out)]);
    assert_eq!(code(&o), 2, "no backbone given");
}

#[test]
fn profile_shortfall_and_determinism() {
    let fx = Fixture::new();
    let o = fx.run(&["profile", s(&fx.manifest), "--out", s(&fx.path().join("p"))]);
    assert_ok(&o);
    let cfg = fx.path().join("big.json");
    fs::write(&cfg, r#"{"style": {"k": 3, "n_ref": 45}}"#).unwrap();
    let o = bin(&[
        "profile",
        s(&fx.manifest),
        "--config",
        s(&cfg),
        "--backbone",
        s(&fx.backbone),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("short by 15"), "{}", stderr(&o));

    assert_ok(&fx.run(&["profile", s(&fx.manifest), "--out", s(&fx.path().join("q"))]));
    let side = |d: &str| fs::read(fx.path().join(d).join("profile.bin")).unwrap();
    assert_eq!(side("p"), side("q"));
    let index: serde_json::Value =
        serde_json::from_slice(&fs::read(fx.path().join("p/profile.json")).unwrap()).unwrap();
    assert_eq!(index["refs"].as_array().unwrap().len(), 10);
    assert_eq!(index["k"], 3);
}

fn trained(fx: &Fixture) -> std::path::PathBuf {
    let out = fx.path().join("artifacts");
    let base = pipeline(fx, &out, &[]);
    assert!(!base.is_empty());
    out
}

#[test]
fn rank_single_photo_and_modes() {
    let fx = Fixture::new();
    let art = trained(&fx);
    let head = art.join("head.json");
    let profile = art.join("profile.json");
    let one = fx.photos().join("acct_000.png");
    let out = fx.path().join("one");
    let o = fx.run(&[
        "rank",
        s(&one),
        "--head",
        s(&head),
        "--profile",
        s(&profile),
        "--out",
        s(&out),
    ]);
    assert_ok(&o);
    assert!(stdout(&o).contains("acct_000.png"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["candidates"][0]["rank"], 1);
    assert_eq!(report["candidates"][0]["style_norm"], 0.0);
    assert!(out.join("report.html").is_file());

    let full: serde_json::Value = serde_json::from_slice(&fs::read(art.join("report.json")).unwrap()).unwrap();
    assert_eq!(full["candidates"].as_array().unwrap().len(), 30);
    assert_eq!(full["mode"], "combined");

    let pareto = fx.path().join("pareto");
    let o = fx.run(&[
        "rank",
        s(&fx.photos()),
        "--head",
        s(&head),
        "--profile",
        s(&profile),
        "--out",
        s(&pareto),
        "--mode",
        "pareto",
    ]);
    assert_ok(&o);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(pareto.join("report.json")).unwrap()).unwrap();
    let front = report["candidates"].as_array().unwrap();
    assert!(!front.is_empty() && front.len() <= 30);
    let all = full["candidates"].as_array().unwrap();
    for c in front {
        let dominated = all.iter().any(|o| {
            o["p_high"].as_f64() > c["p_high"].as_f64() && o["style_dist"].as_f64() < c["style_dist"].as_f64()
        });
        assert!(!dominated);
    }

    let bad = fx.run(&[
        "rank",
        s(&one),
        "--head",
        s(&head),
        "--profile",
        s(&profile),
        "--alpha",
        "2",
    ]);
    assert_eq!(code(&bad), 2);
    let bad = fx.run(&[
        "rank",
        s(&one),
        "--head",
        s(&head),
        "--profile",
        s(&profile),
        "--mode",
        "best",
    ]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn rank_rejects_mismatched_artifacts() {
    let fx = Fixture::new();
    let art = trained(&fx);
    let one = fx.photos().join("acct_000.png");
    let other = fx.path().join("other");
    synth::write_texture_backbone(&other, 99).unwrap();
    let o = bin(&[
        "rank",
        s(&one),
        "--head",
        s(&art.join("head.json")),
        "--profile",
        s(&art.join("profile.json")),
        "--backbone",
        s(&other.join("texture.json")),
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let garbage = fx.path().join("garbage.json");
    fs::write(&garbage, "{\"version\": 1}").unwrap();
    let o = fx.run(&[
        "rank",
        s(&one),
        "--head",
        s(&garbage),
        "--profile",
        s(&art.join("profile.json")),
    ]);
    assert_eq!(code(&o), 4);
}

#[test]
fn cache_env_fallback_is_used_and_does_not_change_outputs() {
    let fx = Fixture::new();
    let plain = pipeline(&fx, &fx.path().join("plain"), &[]);
    let cache = fx.path().join("env-cache");
    let o = std::process::Command::new(BIN)
        .args(["profile", s(&fx.manifest), "--out", s(&fx.path().join("envrun"))])
        .arg("--config")
        .arg(&fx.config)
        .arg("--backbone")
        .arg(&fx.backbone)
        .env("SALIENTEYE_CACHE", &cache)
        .output()
        .unwrap();
    assert_ok(&o);
    assert!(fs::read_dir(&cache).unwrap().next().is_some());
    let cached = pipeline(
        &fx,
        &fx.path().join("cached"),
        &["--cache", s(&fx.path().join("flag-cache"))],
    );
    assert_eq!(plain, cached);
}

fn eval_fixture(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    TextureFamily::ALL
        .iter()
        .enumerate()
        .map(|(i, &f)| synth::write_texture_corpus(dir, f.name(), &[f], 40, 100 + i as u64).unwrap())
        .collect()
}

#[test]
fn eval_texture_accounts() {
    let fx = Fixture::new();
    let manifests = eval_fixture(fx.path());
    let cfg = fx.path().join("eval.json");
    let accounts: Vec<serde_json::Value> = manifests
        .iter()
        .map(|m| serde_json::json!({"manifests": [m]}))
        .collect();
    let body = serde_json::json!({
        "backbone": fx.backbone,
        "style": {"k": 6, "n_ref": 20},
        "eval": {"accounts": accounts, "n_test": 20},
    });
    fs::write(&cfg, body.to_string()).unwrap();
    let out = fx.path().join("eval-out");
    let o = bin(&["eval", "--config", s(&cfg), "--out", s(&out)]);
    assert_ok(&o);
    let csv = fs::read_to_string(out.join("confusion.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], vec!["true\\predicted", "stripes", "checkerboard", "noise"]);
    for i in 1..=3 {
        let counts: Vec<u32> = rows[i][1..].iter().map(|c| c.parse().unwrap()).collect();
        assert_eq!(counts.iter().sum::<u32>(), 20);
        assert!(counts[i - 1] >= 18, "{csv}");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("eval.json")).unwrap()).unwrap();
    assert!(report["attribution"]["row_percent"].is_array());
    assert_eq!(report["config"]["style"]["k"], 6);
}

#[test]
fn eval_errors_and_merging() {
    let fx = Fixture::new();
    let manifests = eval_fixture(fx.path());
    let cfg = fx.path().join("eval.json");
    let write = |accounts: serde_json::Value, extra: serde_json::Value| {
        let mut body = serde_json::json!({
            "backbone": fx.backbone,
            "style": {"k": 3, "n_ref": 10},
            "eval": {"accounts": accounts, "n_test": 10},
        });
        for (k, v) in extra.as_object().unwrap() {
            body["eval"][k] = v.clone();
        }
        fs::write(&cfg, body.to_string()).unwrap();
    };

    write(
        serde_json::json!([{"name": "ghost", "manifests": [fx.path().join("ghost.jsonl")]}, {"manifests": [manifests[0]]}]),
        serde_json::json!({}),
    );
    let o = bin(&["eval", "--config", s(&cfg), "--out", s(&fx.path().join("e1"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("account ghost"), "{}", stderr(&o));

    write(
        serde_json::json!([{"name": "patterned", "manifests": [manifests[0], manifests[1]]}, {"manifests": [manifests[2]]}]),
        serde_json::json!({}),
    );
    let out = fx.path().join("e2");
    assert_ok(&bin(&["eval", "--config", s(&cfg), "--out", s(&out)]));
    let csv = fs::read_to_string(out.join("confusion.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("true\\predicted,patterned,noise\n"), "{csv}");

    write(
        serde_json::json!([{"manifests": [manifests[0]]}]),
        serde_json::json!({}),
    );
    assert_eq!(code(&bin(&["eval", "--config", s(&cfg)])), 3);

    write(
        serde_json::json!([{"manifests": [manifests[0]]}, {"manifests": [manifests[1]]}]),
        serde_json::json!({"n_test": 35}),
    );
    assert_eq!(
        code(&bin(&["eval", "--config", s(&cfg), "--out", s(&fx.path().join("e3"))])),
        3
    );
}

#[test]
fn eval_date_split() {
    let fx = Fixture::new();
    let cfg = fx.path().join("split.json");
    let body = serde_json::json!({
        "backbone": fx.backbone,
        "train": {"epochs": 2},
        "eval": {"accounts": [{"manifests": [fx.manifest]}], "cutoff": "2024-01-21T00:00:00Z"},
    });
    fs::write(&cfg, body.to_string()).unwrap();
    let out = fx.path().join("split-out");
    let o = bin(&["eval", "--config", s(&cfg), "--out", s(&out)]);
    assert_ok(&o);
    assert!(stdout(&o).contains("engagement acct: test macro F1"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("eval.json")).unwrap()).unwrap();
    let f1 = report["engagement"][0]["test"]["macro_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert_eq!(report["engagement"][0]["cutoff"], "2024-01-21T00:00:00Z");

    fs::write(&cfg, body.to_string().replace("2024-01-21T00:00:00Z", "yesterday")).unwrap();
    assert_eq!(code(&bin(&["eval", "--config", s(&cfg)])), 2);
}

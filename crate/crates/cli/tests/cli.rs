//! End-to-end runs of the `semrec` binary on a small synthetic corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = "\
[quantizer]
epochs = 5
[training]
epochs = 2
[scaling]
max_epochs = 2
";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.path("small.toml"), SMALL).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_semrec"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg("small.toml")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    fn code(&self, args: &[&str]) -> (i32, String) {
        let out = self.run(args);
        (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.path(name)).unwrap()).unwrap()
    }

    /// synthesize → embed → train-tokenizer → tokenize → train.
    fn pipeline() -> Self {
        let ws = Self::new();
        ws.ok(&["synthesize", "--out-dir", "data", "--items-per-domain", "40", "--users-per-domain", "100"]);
        ws.ok(&["embed", "--items", "data/items.tsv", "--out", "emb.txt"]);
        ws.ok(&["train-tokenizer", "--embeddings", "emb.txt", "--out", "cb.bin"]);
        ws.ok(&["tokenize", "--codebook", "cb.bin", "--embeddings", "emb.txt", "--out", "tok.txt"]);
        ws.ok(&[
            "train", "--tokens", "tok.txt", "--embeddings", "emb.txt", "--dataset", "data/alpha.txt", "--out",
            "model.bin",
        ]);
        ws
    }

    fn evaluate(&self, out: &str, extra: &[&str]) -> (i32, String) {
        let mut args = vec![
            "evaluate", "--model", "model.bin", "--codebook", "cb.bin", "--embeddings", "emb.txt", "--catalog",
            "data/beta.items", "--dataset", "data/beta.txt", "--protocol", "zero-shot", "--out", out,
        ];
        args.extend_from_slice(extra);
        self.code(&args)
    }
}

fn sha256(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

#[test]
fn pipeline_writes_manifests_that_match_outputs() {
    let ws = Workspace::pipeline();
    for (artifact, role) in [
        ("emb.txt", "embeddings"),
        ("cb.bin", "codebook"),
        ("tok.txt", "tokens"),
        ("model.bin", "model"),
        ("data/items.tsv", "items"),
    ] {
        let m = ws.json(&format!("{artifact}.manifest.json"));
        assert_eq!(m["outputs"][role]["sha256"], sha256(&ws.path(artifact)), "{artifact}");
        assert!(m["machine"]["cpus"].as_u64().unwrap() >= 1);
        assert_eq!(m["config"]["profile"], "desk");
    }
    let cb = sha256(&ws.path("cb.bin"));
    assert_eq!(ws.json("tok.txt.manifest.json")["lineage"]["codebook"], cb);
    assert_eq!(ws.json("model.bin.manifest.json")["lineage"]["codebook"], cb);

    let trace = std::fs::read_to_string(ws.path("model.bin.trace")).unwrap();
    assert_eq!(trace.lines().count(), 3, "initial entry plus two epochs");
    let summary = &ws.json("model.bin.manifest.json")["summary"];
    assert!(summary["final_train_loss"].as_f64().unwrap() < summary["initial_train_loss"].as_f64().unwrap());
}

#[test]
fn evaluation_is_deterministic_and_recommends_catalog_items() {
    let ws = Workspace::pipeline();
    assert_eq!(ws.evaluate("a.json", &[]).0, 0);
    assert_eq!(ws.evaluate("b.json", &[]).0, 0);
    assert_eq!(
        std::fs::read(ws.path("a.json")).unwrap(),
        std::fs::read(ws.path("b.json")).unwrap()
    );
    let report = ws.json("a.json");
    assert_eq!(report["metrics"]["n_cases"], 100);
    for n in ["1", "3", "5", "10"] {
        let hit = report["metrics"]["hit"][n].as_f64().unwrap();
        let ndcg = report["metrics"]["ndcg"][n].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&hit) && ndcg <= hit + 1e-12);
    }
    assert_eq!(report["manifest"]["command"], "evaluate");

    assert_eq!(ws.evaluate("c.json", &["--recommendations", "recs.txt"]).0, 0);
    let catalog = std::fs::read_to_string(ws.path("data/beta.items")).unwrap();
    let catalog: std::collections::HashSet<&str> = catalog.lines().collect();
    let recs = std::fs::read_to_string(ws.path("recs.txt")).unwrap();
    assert_eq!(recs.lines().count(), 100 * 10);
    for line in recs.lines() {
        let item = line.split_whitespace().nth(2).unwrap();
        assert!(catalog.contains(item), "{item} is not a beta item");
    }
}

#[test]
fn cold_start_protocol_honours_seed() {
    let ws = Workspace::pipeline();
    let cold = |out: &str, seed: &str| {
        ws.code(&[
            "evaluate", "--model", "model.bin", "--codebook", "cb.bin", "--embeddings", "emb.txt", "--catalog",
            "data/beta.items", "--dataset", "data/beta.txt", "--protocol", "cold-start", "--seed", seed, "--out", out,
        ])
    };
    assert_eq!(cold("s1.json", "1").0, 0);
    assert_eq!(cold("s1b.json", "1").0, 0);
    assert_eq!(ws.json("s1.json"), ws.json("s1b.json"));
    assert_eq!(ws.json("s1.json")["metrics"]["protocol"], "cold-start");
    assert_eq!(ws.json("s1.json")["manifest"]["config"]["eval"]["seed"], 1);
}

#[test]
fn modified_artifact_is_stale() {
    let ws = Workspace::pipeline();
    let mut tokens = std::fs::read_to_string(ws.path("tok.txt")).unwrap();
    tokens.push('\n');
    std::fs::write(ws.path("tok.txt"), tokens).unwrap();
    let (code, err) = ws.code(&[
        "train", "--tokens", "tok.txt", "--embeddings", "emb.txt", "--dataset", "data/alpha.txt", "--out", "m2.bin",
    ]);
    assert_eq!(code, 3);
    assert!(err.contains("stale"), "{err}");
}

#[test]
fn model_with_a_different_codebook_is_stale() {
    let ws = Workspace::pipeline();
    ws.ok(&["train-tokenizer", "--embeddings", "emb.txt", "--out", "cb2.bin", "--seed", "99"]);
    let (code, err) = ws.code(&[
        "evaluate", "--model", "model.bin", "--codebook", "cb2.bin", "--embeddings", "emb.txt", "--dataset",
        "data/beta.txt", "--protocol", "zero-shot", "--out", "r.json",
    ]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("codebook"), "{err}");
}

#[test]
fn unknown_dataset_item_is_named() {
    let ws = Workspace::pipeline();
    std::fs::write(ws.path("bad.txt"), "u1 alpha-0000 alpha-0001\nu2 alpha-0002 ghost-item alpha-0003\n").unwrap();
    let (code, err) = ws.code(&[
        "train", "--tokens", "tok.txt", "--embeddings", "emb.txt", "--dataset", "bad.txt", "--out", "m.bin",
    ]);
    assert_eq!(code, 3);
    assert!(err.contains("ghost-item"), "{err}");
}

#[test]
fn tokenize_missing_item_is_named() {
    let ws = Workspace::pipeline();
    std::fs::write(ws.path("ids.txt"), "alpha-0000\nno-such-item\n").unwrap();
    let (code, err) = ws.code(&[
        "tokenize", "--codebook", "cb.bin", "--embeddings", "emb.txt", "--items", "ids.txt", "--out", "t.txt",
    ]);
    assert_eq!(code, 3);
    assert!(err.contains("no-such-item"), "{err}");
}

#[test]
fn config_errors_exit_2() {
    let ws = Workspace::new();
    std::fs::write(ws.path("items.tsv"), "a\tred shoe\nb\tblue hat\n").unwrap();
    std::fs::write(ws.path("typo.toml"), "[training]\nepoch = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_semrec"))
        .current_dir(ws.dir.path())
        .args(["--config", "typo.toml", "embed", "--items", "items.tsv", "--out", "e.txt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // embeddings of width 16 against a configured width of 64
    ws.ok(&["embed", "--items", "items.tsv", "--out", "e16.txt", "--dim", "16"]);
    let (code, err) = ws.code(&["train-tokenizer", "--embeddings", "e16.txt", "--out", "cb.bin"]);
    assert_eq!(code, 2);
    assert!(err.contains("16") && err.contains("64"), "{err}");
}

#[test]
fn malformed_items_file_exits_3() {
    let ws = Workspace::new();
    std::fs::write(ws.path("items.tsv"), "a\tred shoe\nno tab here\n").unwrap();
    let (code, err) = ws.code(&["embed", "--items", "items.tsv", "--out", "e.txt"]);
    assert_eq!(code, 3);
    assert!(err.contains("row 2"), "{err}");
}

#[test]
fn resumed_model_reproduces_its_loss() {
    let ws = Workspace::pipeline();
    ws.ok(&[
        "train", "--tokens", "tok.txt", "--embeddings", "emb.txt", "--dataset", "data/alpha.txt", "--out",
        "again.bin", "--resume", "model.bin", "--epochs", "0",
    ]);
    let before = ws.json("model.bin.manifest.json")["summary"]["final_train_loss"].as_f64().unwrap();
    let after = ws.json("again.bin.manifest.json")["summary"]["initial_train_loss"].as_f64().unwrap();
    assert!((before - after).abs() <= 1e-6, "{before} vs {after}");
    assert_eq!(std::fs::read(ws.path("model.bin")).unwrap(), std::fs::read(ws.path("again.bin")).unwrap());
}

#[test]
fn scaling_default_fractions_and_a_diverged_fraction() {
    let ws = Workspace::pipeline();
    let scaling = |out: &str, extra: &[&str]| {
        let mut args = vec![
            "scaling", "--tokens", "tok.txt", "--embeddings", "emb.txt", "--dataset", "data/alpha.txt", "--out", out,
        ];
        args.extend_from_slice(extra);
        ws.code(&args).0
    };
    let fractions = |name: &str| -> Vec<f64> {
        ws.json(&format!("{name}.manifest.json"))["summary"]["records"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r["fraction"].as_f64().unwrap())
            .collect()
    };

    assert_eq!(scaling("all.txt", &[]), 0);
    assert_eq!(fractions("all.txt"), vec![0.05, 0.1, 0.25, 0.5, 1.0]);
    let summary = &ws.json("all.txt.manifest.json")["summary"];
    assert_eq!(summary["fit"]["status"], "fitted", "{}", summary["fit"]);
    let text = std::fs::read_to_string(ws.path("all.txt")).unwrap();
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 5);
    assert!(text.contains("# fit a="), "{text}");

    assert_eq!(scaling("div.txt", &["--inject-divergence", "0.25"]), 4);
    assert_eq!(fractions("div.txt"), vec![0.05, 0.1, 0.5, 1.0]);
    let summary = &ws.json("div.txt.manifest.json")["summary"];
    assert_eq!(summary["failures"][0]["fraction"], 0.25);
    let text = std::fs::read_to_string(ws.path("div.txt")).unwrap();
    assert!(text.contains("# failed 0.25"), "{text}");

    assert_eq!(scaling("one.txt", &["--fractions", "1.0"]), 0);
    assert_eq!(ws.json("one.txt.manifest.json")["summary"]["fit"]["status"], "insufficient_points");
}

#[test]
fn diverging_tokenizer_exits_4() {
    let ws = Workspace::new();
    ws.ok(&["synthesize", "--out-dir", "data", "--items-per-domain", "20", "--users-per-domain", "10"]);
    ws.ok(&["embed", "--items", "data/items.tsv", "--out", "emb.txt"]);
    let (code, err) = ws.code(&["train-tokenizer", "--embeddings", "emb.txt", "--out", "cb.bin", "--learning-rate", "1e12"]);
    assert_eq!(code, 4, "{err}");
    assert!(err.contains("diverged"), "{err}");
}

#[test]
fn embed_and_tokenize_reruns_are_byte_identical() {
    let ws = Workspace::pipeline();
    ws.ok(&["embed", "--items", "data/items.tsv", "--out", "emb2.txt"]);
    assert_eq!(std::fs::read(ws.path("emb.txt")).unwrap(), std::fs::read(ws.path("emb2.txt")).unwrap());
    let header = std::fs::read_to_string(ws.path("emb.txt")).unwrap();
    assert_eq!(header.lines().next().unwrap(), "80 64");
    ws.ok(&["tokenize", "--codebook", "cb.bin", "--embeddings", "emb.txt", "--out", "tok2.txt"]);
    assert_eq!(std::fs::read(ws.path("tok.txt")).unwrap(), std::fs::read(ws.path("tok2.txt")).unwrap());
    let tokens = std::fs::read_to_string(ws.path("tok.txt")).unwrap();
    for line in tokens.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 1 + 4);
        assert!(fields[1..].iter().all(|t| t.parse::<u32>().unwrap() < 960));
    }
}

#[test]
fn missing_input_and_missing_protocol_are_reported() {
    let ws = Workspace::new();
    let (code, err) = ws.code(&["embed", "--items", "nowhere.tsv", "--out", "e.txt"]);
    assert_eq!(code, 3);
    assert!(err.contains("nowhere.tsv"), "{err}");
    let (code, err) = ws.code(&[
        "evaluate", "--model", "m", "--codebook", "c", "--embeddings", "e", "--dataset", "d", "--out", "r",
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("--protocol"), "{err}");
}

#[test]
fn cold_start_on_two_item_sequences_uses_one_item() {
    let ws = Workspace::pipeline();
    let data = std::fs::read_to_string(ws.path("data/beta.txt")).unwrap();
    let short: String = data
        .lines()
        .map(|l| l.split_whitespace().take(3).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    std::fs::write(ws.path("short.txt"), short).unwrap();
    let (code, err) = ws.code(&[
        "evaluate", "--model", "model.bin", "--codebook", "cb.bin", "--embeddings", "emb.txt", "--catalog",
        "data/beta.items", "--dataset", "short.txt", "--protocol", "cold-start", "--out", "r.json",
    ]);
    assert_eq!(code, 0, "{err}");
    let counts = &ws.json("r.json")["manifest"]["summary"]["history_length_counts"];
    assert_eq!(counts, &serde_json::json!({ "1": 100 }));
}

#[test]
fn planted_power_law_is_recovered() {
    let ws = Workspace::new();
    ws.ok(&["scaling", "--planted-self-test", "--out", "planted.json"]);
    let report = ws.json("planted.json");
    assert_eq!(report["pass"], true);
    assert!((report["fit"]["b"].as_f64().unwrap() - 0.3).abs() < 0.03);
}

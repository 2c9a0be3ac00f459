use std::path::Path;
use std::process::{Command, Output};

fn llm2ir(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_llm2ir"))
        .current_dir(dir)
        .env("LLM2IR_CONFIG", dir.join("cfg.toml"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = llm2ir(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = r#"
[model]
d_model = 16
n_heads = 2
n_layers = 1
d_ff = 32
max_context = 48

[augment]
anchor_len = 8
passage_len = 32

[train]
batch_size = 8
lr = 1e-3
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    std::fs::write(
        dir.path().join("spec.toml"),
        "[corpus]\nn_topics = 3\ndocs_per_topic = 5\ndoc_len = 24\n[queries]\nquery_len = 8\n",
    )
    .unwrap();
    dir
}

#[test]
fn pipeline_end_to_end() {
    let ws = workspace();
    let d = ws.path();
    ok(d, &["synth", "--spec", "spec.toml", "--out", "st"]);
    ok(d, &["index", "st"]);
    ok(d, &["mine", "st", "--k", "3", "--out", "neg.jsonl"]);
    ok(d, &["train", "st", "--negatives", "neg.jsonl", "--k", "3", "--seed", "1", "--out", "m.ckpt"]);
    assert!(d.join("m.ckpt.loss.csv").exists() && d.join("m.ckpt.config.toml").exists());

    ok(d, &["eval", "m.ckpt", "st", "st/queries.jsonl", "st/qrels.tsv", "--out", "e1"]);
    ok(d, &["eval", "m.ckpt", "st", "st/queries.jsonl", "st/qrels.tsv", "--out", "e2"]);
    assert_eq!(std::fs::read(d.join("e1/run.trec")).unwrap(), std::fs::read(d.join("e2/run.trec")).unwrap());
    assert!(d.join("e1/config.toml").exists());

    ok(d, &["embed", "m.ckpt", "st", "--out", "idx.json"]);
    let docs = std::fs::read_to_string(d.join("st/documents.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(docs.lines().next().unwrap()).unwrap();
    let text = first["text"].as_str().unwrap();
    let hits = ok(d, &["search", "idx.json", "--ckpt", "m.ckpt", "--store", "st", "--query", text, "--k", "3"]);
    let top = hits.lines().next().unwrap();
    assert!(top.starts_with(&format!("1\t{}\t", first["id"].as_str().unwrap())), "{hits}");

    ok(d, &["bm25-eval", "st", "st/queries.jsonl", "st/qrels.tsv", "--out", "b"]);
    let table = ok(d, &["report", "."]);
    assert!(table.contains("bm25") && table.contains("nDCG@k"));
}

#[test]
fn same_seed_same_checkpoint() {
    let ws = workspace();
    let d = ws.path();
    ok(d, &["synth", "--spec", "spec.toml", "--out", "st"]);
    for out in ["a.ckpt", "b.ckpt"] {
        ok(d, &["train", "st", "--k", "2", "--seed", "3", "--out", out]);
    }
    assert_eq!(std::fs::read(d.join("a.ckpt")).unwrap(), std::fs::read(d.join("b.ckpt")).unwrap());
}

#[test]
fn help_lists_the_documented_defaults() {
    let ws = workspace();
    let help = ok(ws.path(), &["train", "--help"]);
    for needle in ["--tau", "[default: 0.05]", "--k", "[default: 7]", "--lr", "[default: 1e-4]", "--mode", "--lora", "--attn", "--negatives-scope"] {
        assert!(help.contains(needle), "missing {needle}");
    }
    assert!(ok(ws.path(), &["mine", "--help"]).contains("[default: 7]"));
    assert!(ok(ws.path(), &["grad-check", "--help"]).contains("[default: 0.00001]") || ok(ws.path(), &["grad-check", "--help"]).contains("1e-5"));
}

#[test]
fn grad_check_on_a_random_model_succeeds() {
    let ws = workspace();
    let out = ok(ws.path(), &["grad-check", "random", "--tol", "1e-5"]);
    assert!(out.contains("pipeline"));
}

#[test]
fn failures_map_to_exit_codes_with_one_line_errors() {
    let ws = workspace();
    let d = ws.path();
    let usage = llm2ir(d, &["train", "--no-such-flag"]);
    assert_eq!(usage.status.code(), Some(1));
    let data = llm2ir(d, &["eval", "x.ckpt", "nowhere", "q.jsonl", "q.tsv", "--out", "o"]);
    assert_eq!(data.status.code(), Some(2));
    let numerical = llm2ir(d, &["grad-check", "random", "--tol", "1e-30"]);
    assert_eq!(numerical.status.code(), Some(3));
    for out in [usage, data, numerical] {
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        let re = regex::Regex::new(r#"^error kind=[a-z_]+ code=[123] msg=".*"$"#).unwrap();
        assert!(re.is_match(err.trim_end()), "{err}");
    }
    std::fs::write(d.join("cfg.toml"), "[train]\ntemperature = 1\n").unwrap();
    assert_eq!(llm2ir(d, &["synth", "--out", "s"]).status.code(), Some(1));
}

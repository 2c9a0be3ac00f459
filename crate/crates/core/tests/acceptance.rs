//! The acceptance suite: one PASS/FAIL line per criterion, nonzero exit on
//! any failure. Runs in a few minutes on one core with an optimized build.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::*;
use llm2ir::augment::{AugMode, AugmentationConfig};
use llm2ir::corpus::{Document, DocumentStore, TokenSequence, Vocabulary};
use llm2ir::dense::{ndcg_at_k, Qrels, RetrievalRun};
use llm2ir::experiments::{desk_setup, evaluate_init, run_context_pair, run_setup, ContextPairConfig, Setup};
use llm2ir::model::{checkpoint, with_eos, AttnMode, ForwardMode, LoraConfig, Model, ModelConfig};
use llm2ir::sparse::{idf_value, Bm25Params, InvertedIndex};
use llm2ir::tensor::gradcheck::{primitive_checks, GradCheckOptions};
use llm2ir::tensor::{Tape, Tensor};
use llm2ir::train::{
    info_nce_from_similarities, info_nce_loss, pipeline_grad_check, tiny_check_model, ContrastiveBatch, NegativesScope, TrainConfig,
    TrainOutputs,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn bm25_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for c in 0..20 {
        let n_docs = rng.random_range(1..=200);
        let (store, vocab) = random_corpus(&mut rng, n_docs, 50, 60);
        let params = Bm25Params::default();
        let index = InvertedIndex::build(&store, &vocab, params).map_err(|e| e.to_string())?;
        for _ in 0..10 {
            let q: Vec<String> = (0..rng.random_range(1..6)).map(|_| format!("w{}", rng.random_range(0..70))).collect();
            let q = q.join(" ");
            let got = index.search(&vocab.tokenize(&q), usize::MAX);
            let want = brute_bm25(&store, &vocab, &q, params);
            check(got.len() == want.len(), format!("corpus {c} query {q:?}: {} vs {} hits", got.len(), want.len()))?;
            for ((gd, gs), (wd, ws)) in got.iter().zip(&want) {
                check(gd == wd, format!("corpus {c} query {q:?}: order differs at {gd} / {wd}"))?;
                worst = worst.max((gs - ws).abs());
            }
        }
    }
    check(worst < 1e-9, format!("max score diff {worst:e}"))?;
    Ok(format!("200 queries, max score diff {worst:.1e}"))
}

fn closed_forms() -> Outcome {
    let idf = idf_value(10, 0);
    check((idf - 22f64.ln()).abs() < 1e-9, format!("idf(10, 0) = {idf}"))?;
    let store = DocumentStore::from_documents([Document::new("d", "a b")]).map_err(|e| e.to_string())?;
    let vocab = Vocabulary::build(&store, usize::MAX, 1).map_err(|e| e.to_string())?;
    let index = InvertedIndex::build(&store, &vocab, Bm25Params::default()).map_err(|e| e.to_string())?;
    let a = vocab.id("a").ok_or("no id for a")?;
    let s = index.score(&vocab.tokenize("a"), "d").map_err(|e| e.to_string())?;
    check((s - index.idf(a)).abs() < 1e-9, format!("single-doc score {s} vs idf {}", index.idf(a)))?;
    let mut run = RetrievalRun::new();
    run.insert("q", vec![("x".into(), 2.0), ("y".into(), 1.0)]);
    let mut qrels = Qrels::new();
    qrels.insert("q", "y", 1);
    let n = ndcg_at_k(&run, &qrels, 10).map_err(|e| e.to_string())?.mean;
    check((n - 1.0 / 3f64.log2()).abs() < 1e-9, format!("nDCG {n}"))?;
    Ok(format!("idf {idf:.9}, nDCG {n:.9}"))
}

fn gradients() -> Outcome {
    let tol = 1e-5;
    let mut worst = 0.0f64;
    let mut count = 0;
    for seed in 0..3 {
        let opts = GradCheckOptions { seed, ..Default::default() };
        for (name, r) in primitive_checks(opts).map_err(|e| e.to_string())? {
            check(r.passes(tol), format!("{name}: rel error {:e}", r.max_rel_error()))?;
            worst = worst.max(r.max_rel_error());
            count += 1;
        }
    }
    let model = tiny_check_model(3).map_err(|e| e.to_string())?;
    let r = pipeline_grad_check(&model, 0.05, GradCheckOptions::default()).map_err(|e| e.to_string())?;
    check(r.passes(tol), format!("pipeline: rel error {:e}", r.max_rel_error()))?;
    Ok(format!(
        "{count} primitive checks max rel {worst:.1e}; pipeline over {} weights rel {:.1e}",
        r.inputs.len(),
        r.max_rel_error()
    ))
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let single = ContrastiveBatch { anchors: unit_rows(&mut rng, 1, 8), positives: unit_rows(&mut rng, 1, 8), negatives: Tensor::zeros(&[0, 8]), k: 0 };
    let l1 = info_nce_loss(&single, 0.05, NegativesScope::Batch).map_err(|e| e.to_string())?;
    check(l1 == 0.0, format!("N=1, K=0 loss {l1:e}"))?;

    let tape = Tape::new();
    let l2 = info_nce_from_similarities(tape.constant(Tensor::<f64>::full(&[2, 2], 0.3)), 0, 0.05, NegativesScope::Batch)
        .map_err(|e| e.to_string())?
        .item();
    check((l2 - 2f64.ln()).abs() < 1e-9, format!("uniform N=2 loss {l2}"))?;

    let mut shift_err = 0.0f64;
    let mut oracle_err = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..7);
        let k = rng.random_range(0..5);
        let tau = rng.random_range(0.02..1.0);
        let own = rng.random_bool(0.5);
        let scope = if own { NegativesScope::Own } else { NegativesScope::Batch };
        let batch = ContrastiveBatch {
            anchors: unit_rows(&mut rng, n, 12),
            positives: unit_rows(&mut rng, n, 12),
            negatives: unit_rows(&mut rng, n * k, 12),
            k,
        };
        let got = info_nce_loss(&batch, tau, scope).map_err(|e| e.to_string())?;
        let want = naive_info_nce(&batch.anchors, &batch.positives, &batch.negatives, k, tau, own);
        oracle_err = oracle_err.max((got - want).abs() / want.abs().max(1.0));

        let cols = n + n * k;
        let sims = Tensor::from_rows(&(0..n).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<Vec<f64>>>())
            .map_err(|e| e.to_string())?;
        let shift = rng.random_range(-5.0..5.0);
        let tape = Tape::new();
        let base = info_nce_from_similarities(tape.constant(sims.clone()), k, tau, scope).map_err(|e| e.to_string())?.item();
        let moved = info_nce_from_similarities(tape.constant(sims.map(|x| x + shift)), k, tau, scope).map_err(|e| e.to_string())?.item();
        shift_err = shift_err.max((base - moved).abs());
    }
    check(shift_err < 1e-8, format!("shift error {shift_err:e}"))?;
    check(oracle_err < 1e-10, format!("oracle error {oracle_err:e}"))?;
    Ok(format!("ln2 error {:.1e}, shift error {shift_err:.1e}, oracle error {oracle_err:.1e}", (l2 - 2f64.ln()).abs()))
}

fn causality() -> Outcome {
    let cfg = ModelConfig { vocab_size: 40, d_model: 16, n_heads: 2, n_layers: 2, d_ff: 32, max_context: 24, ..Default::default() };
    let causal = Model::<f64>::new(cfg.clone(), 9).map_err(|e| e.to_string())?;
    let bidir = Model::<f64>::new(ModelConfig { attn_mode: AttnMode::Bidirectional, ..cfg }, 9).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut broken = 0;
    for pair in 0..50 {
        let len = rng.random_range(2..20);
        let a: Vec<u32> = (0..len).map(|_| rng.random_range(4..40)).collect();
        let i = rng.random_range(0..len - 1);
        let mut b = a.clone();
        for t in &mut b[i + 1..] {
            *t = 4 + (*t - 4 + rng.random_range(1..36)) % 36;
        }
        let (sa, sb) = (TokenSequence::new(a), TokenSequence::new(b));
        let ha = causal.hidden_states(&sa, ForwardMode::Infer).map_err(|e| e.to_string())?;
        let hb = causal.hidden_states(&sb, ForwardMode::Infer).map_err(|e| e.to_string())?;
        for r in 0..=i {
            check(ha.row(r) == hb.row(r), format!("pair {pair}: position {r} <= {i} changed"))?;
        }
        let ba = bidir.hidden_states(&sa, ForwardMode::Infer).map_err(|e| e.to_string())?;
        let bb = bidir.hidden_states(&sb, ForwardMode::Infer).map_err(|e| e.to_string())?;
        if (0..=i).any(|r| ba.row(r) != bb.row(r)) {
            broken += 1;
        }
    }
    check(broken == 50, format!("bidirectional prefix changed in only {broken}/50 pairs"))?;
    Ok("50/50 causal prefixes identical; bidirectional differs in 50/50".into())
}

/// Criteria 6 to 8 share one corpus and one set of trained runs.
struct Desk {
    init: f64,
    k7: Result<(f64, Vec<f64>), String>,
    k0: Result<(f64, Vec<f64>), String>,
    dropout: Result<f64, String>,
}

fn desk_runs() -> Result<Desk, String> {
    let setup = desk_setup();
    let prep = setup.prepare().map_err(|e| e.to_string())?;
    let init = evaluate_init(&setup, &prep).map_err(|e| e.to_string())?.report.ndcg;
    let run = |label: &str, s: &Setup| {
        let t = Instant::now();
        let r = run_setup(label, s, &prep, &TrainOutputs::default()).map_err(|e| e.to_string());
        eprintln!("  {label}: {:.1}s", t.elapsed().as_secs_f64());
        r.map(|r| (r.report.eval.ndcg, r.report.train.losses()))
    };
    let k7 = run("k7", &setup);
    let k0 = run("k0", &Setup { train: TrainConfig { k: 0, ..setup.train.clone() }, ..setup.clone() });
    let dropout = run(
        "dropout",
        &Setup { augment: AugmentationConfig { mode: AugMode::Dropout, ..setup.augment.clone() }, ..setup.clone() },
    )
    .map(|r| r.0);
    Ok(Desk { init, k7, k0, dropout })
}

fn end_to_end(d: &Desk) -> Outcome {
    let (ndcg, _) = d.k7.clone()?;
    check(ndcg >= 0.60, format!("nDCG@10 {ndcg:.4} < 0.60"))?;
    check(ndcg - d.init >= 0.30, format!("gain over random init {:.4} < 0.30", ndcg - d.init))?;
    Ok(format!("nDCG@10 {ndcg:.4}, random init {:.4}", d.init))
}

fn hard_negatives(d: &Desk) -> Outcome {
    let (k7, _) = d.k7.clone()?;
    let (k0, losses) = d.k0.clone()?;
    let first = losses.iter().take(10).position(|&l| l < 0.05);
    check(first.is_some(), format!("K=0 losses over first 10 steps {:?}", &losses[..losses.len().min(10)]))?;
    check(k7 >= k0, format!("K=7 nDCG {k7:.4} < K=0 nDCG {k0:.4}"))?;
    Ok(format!("K=0 loss < 0.05 at step {}; nDCG K=7 {k7:.4} vs K=0 {k0:.4}", first.unwrap() + 1))
}

fn augmentation(d: &Desk) -> Outcome {
    let (crop, _) = d.k7.clone()?;
    let dropout = d.dropout.clone()?;
    check(crop > dropout, format!("crop {crop:.4} <= dropout {dropout:.4}"))?;
    Ok(format!("crop {crop:.4} vs dropout {dropout:.4}"))
}

fn context_length() -> Outcome {
    let run = run_context_pair(&ContextPairConfig::default()).map_err(|e| e.to_string())?;
    let r = &run.report;
    let sweep = r.fill_sweep.as_ref().ok_or("no fill sweep")?;
    let full = sweep.at(1.0).ok_or("no fill 1.0")?.accuracy_at_1;
    let half = sweep.at(0.5).ok_or("no fill 0.5")?.accuracy_at_1;
    check(r.long.eval.ndcg >= r.short.eval.ndcg, format!("long {:.4} < short {:.4}", r.long.eval.ndcg, r.short.eval.ndcg))?;
    check(full <= half, format!("passkey acc@1 fill 1.0 {full:.3} > fill 0.5 {half:.3}"))?;
    Ok(format!(
        "(a) nDCG long {:.4} vs short {:.4}; (b) passkey acc@1 fill 1.0 {full:.3} vs 0.5 {half:.3} (chance {:.3})",
        r.long.eval.ndcg, r.short.eval.ndcg, sweep.chance
    ))
}

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_llm2ir"))
        .current_dir(dir)
        .env_remove("LLM2IR_CONFIG")
        .args(["--config", "cfg.toml"])
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    let write = |name: &str, text: &str| std::fs::write(d.join(name), text).map_err(|e| e.to_string());
    write("cfg.toml", "[model]\nd_model = 16\nn_heads = 2\nn_layers = 1\nd_ff = 32\nmax_context = 48\n[augment]\nanchor_len = 8\npassage_len = 32\n[train]\nbatch_size = 8\n")?;
    write("spec.toml", "[corpus]\nn_topics = 3\ndocs_per_topic = 5\ndoc_len = 24\n")?;
    cli(d, &["synth", "--spec", "spec.toml", "--out", "st"])?;
    cli(d, &["train", "st", "--k", "2", "--out", "m.ckpt"])?;
    for out in ["e1", "e2"] {
        cli(d, &["eval", "m.ckpt", "st", "st/queries.jsonl", "st/qrels.tsv", "--out", out])?;
    }
    let read = |p: &str| std::fs::read(d.join(p)).map_err(|e| e.to_string());
    let trec = read("e1/run.trec")?;
    check(!trec.is_empty() && trec == read("e2/run.trec")?, "TREC runs differ")?;

    let trained = checkpoint::load(d.join("m.ckpt")).map_err(|e| e.to_string())?;
    checkpoint::save(&trained, d.join("again.ckpt")).map_err(|e| e.to_string())?;
    check(read("again.ckpt")? == read("m.ckpt")?, "checkpoint bytes differ after a round trip")?;
    check(checkpoint::load(d.join("again.ckpt")).map_err(|e| e.to_string())? == trained, "reloaded model differs")?;

    let cfg = ModelConfig { vocab_size: 40, d_model: 16, n_heads: 2, n_layers: 2, d_ff: 32, max_context: 32, ..Default::default() };
    let mut model = Model::<f64>::new(cfg, 2).map_err(|e| e.to_string())?;
    model.attach_lora(LoraConfig::default(), 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (_, pair) in model.lora.as_mut().ok_or("no adapters")?.layers.iter_mut().flatten() {
        pair.b = Tensor::randn(pair.b.shape(), 0.1, &mut rng);
    }
    let mut merged = model.clone();
    merged.merge_lora().map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for len in [3, 9, 20] {
        let seq = with_eos((0..len).map(|_| rng.random_range(4..40)).collect());
        let a = model.hidden_states(&seq, ForwardMode::Infer).map_err(|e| e.to_string())?;
        let b = merged.hidden_states(&seq, ForwardMode::Infer).map_err(|e| e.to_string())?;
        worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    check(worst < 1e-10, format!("LoRA apply vs merge {worst:e}"))?;
    Ok(format!("TREC runs identical ({} bytes), checkpoint bit-exact, LoRA merge diff {worst:.1e}", trec.len()))
}

fn guarded<F: FnOnce() -> Outcome>(f: F) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let mut results: BTreeMap<usize, (&str, Outcome, f64)> = BTreeMap::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let r = guarded(f);
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &r {
            Ok(s) => ("PASS", s.as_str()),
            Err(s) => ("FAIL", s.as_str()),
        };
        println!("{tag} {n:>2} {name} [{secs:.1}s]: {detail}");
        results.insert(n, (name, r, secs));
    };
    record(1, "bm25-oracle", &bm25_oracle);
    record(2, "closed-forms", &closed_forms);
    record(3, "gradients", &gradients);
    record(4, "loss-identities", &loss_identities);
    record(5, "causality", &causality);

    let t = Instant::now();
    let desk = catch_unwind(AssertUnwindSafe(desk_runs)).unwrap_or_else(|_| Err("desk runs panicked".into()));
    let shared = t.elapsed().as_secs_f64();
    eprintln!("  desk runs: {shared:.1}s");
    let with_desk = |f: fn(&Desk) -> Outcome| -> Outcome { desk.as_ref().map_err(|e| e.clone()).and_then(f) };
    record(6, "end-to-end", &|| with_desk(end_to_end));
    record(7, "hard-negatives", &|| with_desk(hard_negatives));
    record(8, "augmentation", &|| with_desk(augmentation));
    record(9, "context-length", &context_length);
    record(10, "determinism", &determinism);

    let failed: Vec<usize> = results.iter().filter(|(_, (_, r, _))| r.is_err()).map(|(n, _)| *n).collect();
    println!("acceptance: {}/{} passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

//! The end-to-end desk run: synthetic clustered corpus, next-token
//! pretraining, one epoch of contrastive training with mined negatives, and
//! dense retrieval scored against the BM25 baseline.
//!
//! `cargo run --release --example train_and_evaluate`

use llm2ir::dense::bm25_evaluate;
use llm2ir::experiments::{base_model, desk_setup, evaluate_init, run_setup};
use llm2ir::sparse::{Bm25Params, InvertedIndex};
use llm2ir::train::TrainOutputs;

fn main() -> llm2ir::Result<()> {
    env_logger::init();
    let setup = desk_setup();
    let prep = setup.prepare()?;
    println!("{} documents, {} queries, vocabulary {}", prep.corpus.store.len(), prep.queries.len(), prep.vocab.len());

    let init = evaluate_init(&setup, &prep)?;
    let pretrained = base_model(&setup, &prep)?;
    let lm = llm2ir::dense::evaluate(&pretrained, &prep.corpus.store, &prep.vocab, &prep.queries, &prep.qrels, &setup.eval_config())?;
    let run = run_setup("llm2ir", &setup, &prep, &TrainOutputs::default())?;
    let index = InvertedIndex::build(&prep.corpus.store, &prep.vocab, Bm25Params::default())?;
    let bm25 = bm25_evaluate(&index, &prep.vocab, &prep.queries, &prep.qrels, &setup.eval_config())?;

    for (name, r) in [("random init", &init.report), ("LM only", &lm.report), ("contrastive", &run.report.eval), ("bm25", &bm25.report)] {
        println!("{name:<12} nDCG@10 {:.4}  MRR {:.4}  acc@1 {:.4}", r.ndcg, r.mrr, r.accuracy_at_1);
    }
    let losses = run.report.train.losses();
    println!("{} steps, loss {:.3} -> {:.3}", losses.len(), losses[0], losses[losses.len() - 1]);
    Ok(())
}

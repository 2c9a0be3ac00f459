//! Embed a corpus with the pretrained base model, search it exactly and
//! score the run with nDCG, recall and MRR; the run is printed in TREC format.

use llm2ir::dense::{dense_run, embed_corpus, ndcg_at_k, mrr, recall_at_k};
use llm2ir::experiments::{base_model, desk_setup};

fn main() -> llm2ir::Result<()> {
    let setup = desk_setup();
    let prep = setup.prepare()?;
    let model = base_model(&setup, &prep)?;
    let cfg = setup.eval_config();
    let index = embed_corpus(&model, &prep.corpus.store, &prep.vocab, &cfg.passage_prefix, model.config.max_context)?;
    println!("index: {} x {}, model {}", index.len(), index.dim, &index.model_fingerprint[..12]);

    let run = dense_run(&model, &index, &prep.vocab, &prep.queries[..5], &cfg)?;
    println!("{}", run.to_trec("demo").lines().take(3).collect::<Vec<_>>().join("\n"));
    println!("nDCG@10 {:.4}", ndcg_at_k(&run, &prep.qrels, 10)?.mean);
    println!("recall@100 {:.4}", recall_at_k(&run, &prep.qrels, 100)?.mean);
    println!("MRR {:.4}", mrr(&run, &prep.qrels, 100)?.mean);
    Ok(())
}

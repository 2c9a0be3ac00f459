//! The two generated corpora: topic-clustered documents with held-out crop
//! queries, and passkey documents, with BM25 as a sanity baseline on both.

use llm2ir::dense::{bm25_evaluate, EvalConfig};
use llm2ir::experiments::{
    build_vocab, generate_passkey_corpus, generate_synthetic_corpus, held_out_queries, PasskeySpec, SyntheticCorpusSpec,
};
use llm2ir::sparse::{Bm25Params, InvertedIndex};

fn main() -> llm2ir::Result<()> {
    let spec = SyntheticCorpusSpec::default();
    let corpus = generate_synthetic_corpus(&spec)?;
    let (queries, qrels) = held_out_queries(&corpus, &spec, 10, 16, 99)?;
    let vocab = build_vocab(&[&corpus.store])?;
    let index = InvertedIndex::build(&corpus.store, &vocab, Bm25Params::default())?;
    let e = bm25_evaluate(&index, &vocab, &queries, &qrels, &EvalConfig::default())?;
    println!("{}: {}...", corpus.store.get(0).unwrap().id, &corpus.store.get(0).unwrap().text[..60]);
    println!("topic corpus, BM25 nDCG@10 {:.4} acc@1 {:.4}", e.report.ndcg, e.report.accuracy_at_1);

    let pk = generate_passkey_corpus(&PasskeySpec::default())?;
    let vocab = build_vocab(&[&pk.store])?;
    let index = InvertedIndex::build(&pk.store, &vocab, Bm25Params::default())?;
    let e = bm25_evaluate(&index, &vocab, &pk.queries, &pk.qrels, &EvalConfig::default())?;
    println!("{} -> {}", pk.queries[0].text, pk.qrels.get(&pk.queries[0].id).unwrap().keys().next().unwrap());
    println!("passkey corpus, BM25 acc@1 {:.4}", e.report.accuracy_at_1);
    Ok(())
}

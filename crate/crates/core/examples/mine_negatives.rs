//! Mine BM25 hard negatives for every document of a synthetic corpus and
//! count how many share the source document's topic.

use llm2ir::experiments::{build_vocab, generate_synthetic_corpus, SyntheticCorpusSpec};
use llm2ir::sparse::{Bm25Params, HardNegativeMiner, InvertedIndex};

fn main() -> llm2ir::Result<()> {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec::default())?;
    let vocab = build_vocab(&[&corpus.store])?;
    let index = InvertedIndex::build(&corpus.store, &vocab, Bm25Params::default())?;
    let entries = HardNegativeMiner::new(&index, &vocab, 7, 48).mine_all(&corpus.store, 11)?;

    let topic = |id: &str| corpus.labels[corpus.store.index_of(id).expect("mined id is in the store")];
    let (mut same, mut total) = (0, 0);
    for e in &entries {
        for n in &e.negatives {
            same += usize::from(topic(n) == topic(&e.id));
            total += 1;
        }
    }
    println!("{}: {:?}", entries[0].id, entries[0].negatives);
    println!("{same}/{total} mined negatives share the source topic");
    Ok(())
}

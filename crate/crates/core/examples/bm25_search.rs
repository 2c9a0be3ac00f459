//! Build a vocabulary and a BM25 index over a handful of documents, then rank
//! them for a few queries.

use llm2ir::corpus::{Document, DocumentStore, Vocabulary};
use llm2ir::sparse::{Bm25Params, InvertedIndex};

fn main() -> llm2ir::Result<()> {
    let store = DocumentStore::from_documents([
        Document::new("rope", "rotary position embeddings rotate query and key vectors"),
        Document::new("lora", "low rank adapters add a trainable update to frozen weights"),
        Document::new("bm25", "bm25 ranks documents by term frequency and inverse document frequency"),
        Document::new("infonce", "the contrastive loss pulls a query towards its positive document"),
    ])?;
    let vocab = Vocabulary::build(&store, usize::MAX, 1)?;
    let index = InvertedIndex::build(&store, &vocab, Bm25Params::default())?;
    println!("{} documents, {} tokens, avgdl {:.2}", index.num_docs(), vocab.len(), index.avgdl());

    for q in ["document frequency", "frozen weights", "query vectors"] {
        println!("\nquery: {q}");
        for (id, score) in index.search(&vocab.tokenize(q), 3) {
            println!("  {id:<8} {score:.4}");
        }
    }
    Ok(())
}

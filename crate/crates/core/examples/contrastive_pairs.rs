//! Build training pairs in crop and dropout mode and show what the model
//! would see: prefixed anchor, positive and mined negatives.

use llm2ir::augment::{AugMode, AugmentationConfig, PairBuilder};
use llm2ir::experiments::{build_vocab, generate_synthetic_corpus, mine_negatives, SyntheticCorpusSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> llm2ir::Result<()> {
    let corpus = generate_synthetic_corpus(&SyntheticCorpusSpec::default())?;
    let vocab = build_vocab(&[&corpus.store])?;
    let negatives = mine_negatives(&corpus.store, &vocab, 2, 48, 0)?;
    for mode in [AugMode::Crop, AugMode::Dropout] {
        let cfg = AugmentationConfig { mode, anchor_len: 8, passage_len: 16, k: 2, ..Default::default() };
        let builder = PairBuilder::new(&corpus.store, &vocab, &negatives, &cfg)?;
        let pair = builder.make_pair(0, &mut ChaCha8Rng::seed_from_u64(1))?;
        println!("{mode:?} pair from {}", pair.source_id);
        println!("  anchor   {}", vocab.detokenize(&pair.anchor));
        println!("  positive {}", vocab.detokenize(&pair.positive));
        for g in &pair.negatives {
            println!("  negative {}", vocab.detokenize(g));
        }
    }
    Ok(())
}

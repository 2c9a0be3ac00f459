//! Contrastive training pairs from unlabeled documents.
//!
//! Crop mode draws the anchor and the positive as two independent random
//! crops of the same document. Dropout mode feeds the same passage twice and
//! relies on dropout inside the model for the perturbation.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DocumentStore, TokenId, TokenSequence, Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::sparse::NegativesEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AugMode {
    Crop,
    Dropout,
}

/// How the positive view is cut in crop mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PositiveView {
    /// An independent random crop of up to `passage_len` tokens.
    Crop,
    /// The document head truncated to `passage_len`.
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub mode: AugMode,
    pub anchor_len: usize,
    pub passage_len: usize,
    pub k: usize,
    pub query_prefix: String,
    pub passage_prefix: String,
    pub seed: u64,
    pub dropout_p: f64,
    pub positive_view: PositiveView,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            mode: AugMode::Crop,
            anchor_len: 64,
            passage_len: 512,
            k: 7,
            query_prefix: "Query: ".into(),
            passage_prefix: "Passage: ".into(),
            seed: 0,
            dropout_p: 0.1,
            positive_view: PositiveView::Crop,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchor_len == 0 {
            return Err(Error::Config("anchor_len must be ≥ 1".into()));
        }
        if self.passage_len < self.anchor_len {
            return Err(Error::Config(format!(
                "passage_len {} is shorter than anchor_len {}",
                self.passage_len, self.anchor_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p must lie in [0,1), got {}", self.dropout_p)));
        }
        Ok(())
    }

    /// Dropout mode without dropout makes both views identical, so the
    /// positive is trivially matched.
    pub fn is_degenerate(&self) -> bool {
        self.mode == AugMode::Dropout && self.dropout_p == 0.0
    }
}

/// Anchor, positive and `k` negatives, each already prefixed and ending in EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub source_id: String,
    pub anchor: TokenSequence,
    pub positive: TokenSequence,
    pub negatives: Vec<TokenSequence>,
}

/// A contiguous span of `len` content tokens with EOS appended. Documents with
/// fewer than `len` content tokens are returned whole.
pub fn random_crop(doc: &TokenSequence, len: usize, rng: &mut impl Rng) -> TokenSequence {
    let content = doc.content();
    let len = len.max(1);
    let span = if content.len() <= len {
        content
    } else {
        let start = rng.random_range(0..=content.len() - len);
        &content[start..start + len]
    };
    let mut ids = Vec::with_capacity(span.len() + 1);
    ids.extend_from_slice(span);
    ids.push(EOS);
    TokenSequence::new(ids)
}

/// Tokenized corpus plus everything needed to turn a document into a pair.
pub struct PairBuilder<'a> {
    store: &'a DocumentStore,
    cfg: &'a AugmentationConfig,
    tokens: Vec<TokenSequence>,
    negatives: HashMap<&'a str, &'a [String]>,
    query_prefix: Vec<TokenId>,
    passage_prefix: Vec<TokenId>,
}

impl<'a> PairBuilder<'a> {
    pub fn new(
        store: &'a DocumentStore,
        vocab: &Vocabulary,
        negatives: &'a [NegativesEntry],
        cfg: &'a AugmentationConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let tokens: Vec<TokenSequence> = store.iter().map(|d| vocab.tokenize(&d.text)).collect();
        let short = tokens.iter().filter(|t| t.content().len() < cfg.anchor_len).count();
        if short > 0 {
            log::info!("{short} documents are shorter than anchor_len={} and are used whole", cfg.anchor_len);
        }
        Ok(Self {
            store,
            cfg,
            tokens,
            negatives: negatives
                .iter()
                .map(|e| (e.id.as_str(), e.negatives.as_slice()))
                .collect(),
            query_prefix: vocab.encode_words(&cfg.query_prefix),
            passage_prefix: vocab.encode_words(&cfg.passage_prefix),
        })
    }

    pub fn tokens(&self, doc: usize) -> &TokenSequence {
        &self.tokens[doc]
    }

    pub fn query_prefix(&self) -> &[TokenId] {
        &self.query_prefix
    }

    pub fn passage_prefix(&self) -> &[TokenId] {
        &self.passage_prefix
    }

    pub fn make_pair(&self, doc: usize, rng: &mut impl Rng) -> Result<TrainingPair> {
        let cfg = self.cfg;
        let source = self
            .store
            .get(doc)
            .ok_or_else(|| Error::InvalidInput(format!("no document at position {doc}")))?;
        let tokens = &self.tokens[doc];
        if tokens.content().is_empty() {
            return Err(Error::InvalidInput(format!("document {:?} has no tokens", source.id)));
        }
        let passage = |seq: TokenSequence| seq.truncate(cfg.passage_len).with_prefix(&self.passage_prefix);

        let (anchor, positive) = match cfg.mode {
            AugMode::Crop => {
                let anchor = random_crop(tokens, cfg.anchor_len, rng).with_prefix(&self.query_prefix);
                let positive = match cfg.positive_view {
                    PositiveView::Crop => random_crop(tokens, cfg.passage_len.saturating_sub(1), rng),
                    PositiveView::Head => tokens.clone(),
                };
                (anchor, passage(positive))
            }
            AugMode::Dropout => {
                let view = passage(tokens.clone());
                (view.clone(), view)
            }
        };

        let mined = self.negatives.get(source.id.as_str()).copied().unwrap_or(&[]);
        if mined.len() < cfg.k {
            return Err(Error::InvalidInput(format!(
                "document {:?} has {} mined negatives, need {}",
                source.id,
                mined.len(),
                cfg.k
            )));
        }
        let negatives = mined[..cfg.k]
            .iter()
            .map(|id| {
                let pos = self
                    .store
                    .index_of(id)
                    .ok_or_else(|| Error::UnknownDocument(id.clone()))?;
                Ok(passage(self.tokens[pos].clone()))
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(TrainingPair {
            source_id: source.id.clone(),
            anchor,
            positive,
            negatives,
        })
    }

    /// One epoch: documents shuffled by `rng`, chunked into batches of
    /// `batch_size`, the final short batch included.
    pub fn epoch_batches(&self, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<TrainingPair>>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        let mut order: Vec<usize> = (0..self.store.len()).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size)
            .map(|chunk| chunk.iter().map(|&d| self.make_pair(d, rng)).collect())
            .collect()
    }
}

/// Sizes of the batches an epoch over `n_docs` documents produces.
pub fn batch_sizes(n_docs: usize, batch_size: usize) -> Vec<usize> {
    let mut out = vec![batch_size; n_docs / batch_size];
    if n_docs % batch_size != 0 {
        out.push(n_docs % batch_size);
    }
    out
}

#[derive(Serialize)]
struct PairRecord<'a> {
    anchor: &'a [TokenId],
    positive: &'a [TokenId],
    negatives: Vec<&'a [TokenId]>,
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[TrainingPair]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        let rec = PairRecord {
            anchor: p.anchor.ids(),
            positive: p.positive.ids(),
            negatives: p.negatives.iter().map(TokenSequence::ids).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(n: u32) -> TokenSequence {
        TokenSequence::new((10..10 + n).chain([EOS]).collect())
    }

    #[test]
    fn crop_exact_length_is_whole_doc() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = seq(64);
        assert_eq!(random_crop(&d, 64, &mut rng), d);
    }

    #[test]
    fn crop_short_doc_is_whole_doc() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_crop(&seq(10), 64, &mut rng);
        assert_eq!(c.len(), 11);
        assert!(c.ends_with_eos());
    }

    #[test]
    fn crop_is_contiguous_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = seq(100);
        for _ in 0..50 {
            let c = random_crop(&d, 17, &mut rng);
            assert_eq!(c.len(), 18);
            let start = c.ids()[0] as usize - 10;
            assert_eq!(c.content(), &d.content()[start..start + 17]);
        }
    }

    fn tiny() -> (DocumentStore, Vocabulary, Vec<NegativesEntry>) {
        let store = DocumentStore::from_documents([
            Document::new("a", "x y"),
            Document::new("b", "p q r s"),
            Document::new("c", "u v w"),
        ])
        .unwrap();
        let vocab = Vocabulary::build_with(&store, 100, 1, &["Query: ", "Passage: "]).unwrap();
        let negs = vec![
            NegativesEntry { id: "a".into(), negatives: vec!["b".into(), "c".into()] },
            NegativesEntry { id: "b".into(), negatives: vec!["a".into(), "c".into()] },
            NegativesEntry { id: "c".into(), negatives: vec!["a".into(), "b".into()] },
        ];
        (store, vocab, negs)
    }

    #[test]
    fn degenerate_two_token_doc() {
        let (store, vocab, negs) = tiny();
        let cfg = AugmentationConfig { anchor_len: 4, passage_len: 8, k: 1, ..Default::default() };
        let b = PairBuilder::new(&store, &vocab, &negs, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = b.make_pair(0, &mut rng).unwrap();
        assert_eq!(&p.anchor.ids()[1..], &p.positive.ids()[1..]);
        assert_eq!(p.anchor.ids()[0], vocab.id("query").unwrap());
        assert_eq!(p.positive.ids()[0], vocab.id("passage").unwrap());
        assert_eq!(p.negatives.len(), 1);
    }

    #[test]
    fn zero_negatives() {
        let (store, vocab, negs) = tiny();
        let cfg = AugmentationConfig { anchor_len: 2, passage_len: 8, k: 0, ..Default::default() };
        let b = PairBuilder::new(&store, &vocab, &negs, &cfg).unwrap();
        let p = b.make_pair(1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(p.negatives.is_empty());
    }

    #[test]
    fn insufficient_negatives_rejected() {
        let (store, vocab, negs) = tiny();
        let cfg = AugmentationConfig { anchor_len: 2, passage_len: 8, k: 3, ..Default::default() };
        let b = PairBuilder::new(&store, &vocab, &negs, &cfg).unwrap();
        assert!(b.make_pair(0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn dropout_mode_views_identical() {
        let (store, vocab, negs) = tiny();
        let cfg = AugmentationConfig {
            mode: AugMode::Dropout,
            anchor_len: 2,
            passage_len: 8,
            k: 1,
            dropout_p: 0.0,
            ..Default::default()
        };
        assert!(cfg.is_degenerate());
        let b = PairBuilder::new(&store, &vocab, &negs, &cfg).unwrap();
        let p = b.make_pair(1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.anchor, p.positive);
    }

    #[test]
    fn batch_size_arithmetic() {
        assert_eq!(batch_sizes(10, 4), vec![4, 4, 2]);
        assert_eq!(batch_sizes(8, 4), vec![4, 4]);
    }

    #[test]
    fn config_validation() {
        let bad = AugmentationConfig { anchor_len: 10, passage_len: 5, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(AugmentationConfig::default().validate().is_ok());
    }
}

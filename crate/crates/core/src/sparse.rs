//! Okapi BM25 over an inverted index, plus hard-negative mining.
//!
//! ```text
//! BM25(q, d) = Σ_{t∈q} IDF(t) · f(t,d)(k1+1) / (f(t,d) + k1(1 − b + b|d|/avgdl))
//! IDF(t)     = ln((N − n_t + 0.5)/(n_t + 0.5) + 1)
//! ```
//!
//! Reserved ids (PAD/UNK/BOS/EOS) are never indexed and are ignored in queries.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DocumentStore, TokenId, TokenSequence, Vocabulary, NUM_RESERVED};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0) {
            return Err(Error::Config(format!("k1 must be > 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!("b must lie in [0,1], got {}", self.b)));
        }
        Ok(())
    }
}

/// One (document, term frequency) entry. `doc` is the document's position in
/// the store the index was built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvertedIndex {
    postings: HashMap<TokenId, Vec<Posting>>,
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    avgdl: f64,
    params: Bm25Params,
}

fn indexable(id: TokenId) -> bool {
    id as usize >= NUM_RESERVED
}

/// IDF as a function of corpus size and document frequency.
pub fn idf_value(n_docs: usize, doc_freq: usize) -> f64 {
    let n = n_docs as f64;
    let nt = doc_freq as f64;
    ((n - nt + 0.5) / (nt + 0.5) + 1.0).ln()
}

impl InvertedIndex {
    pub fn build(store: &DocumentStore, vocab: &Vocabulary, params: Bm25Params) -> Result<Self> {
        let seqs: Vec<TokenSequence> = store.iter().map(|d| vocab.tokenize(&d.text)).collect();
        let ids = store.iter().map(|d| d.id.clone()).collect();
        Self::from_sequences(ids, &seqs, params)
    }

    /// Build from pre-tokenized documents; `doc_ids[i]` names `seqs[i]`.
    pub fn from_sequences(
        doc_ids: Vec<String>,
        seqs: &[TokenSequence],
        params: Bm25Params,
    ) -> Result<Self> {
        params.validate()?;
        if seqs.is_empty() {
            return Err(Error::InvalidInput("cannot index an empty corpus".into()));
        }
        if doc_ids.len() != seqs.len() {
            return Err(Error::InvalidInput("doc id count does not match documents".into()));
        }
        let mut postings: HashMap<TokenId, Vec<Posting>> = HashMap::new();
        let mut doc_len = Vec::with_capacity(seqs.len());
        for (doc, seq) in seqs.iter().enumerate() {
            let mut tf: HashMap<TokenId, u32> = HashMap::new();
            let mut len = 0u32;
            for &t in seq.ids().iter().filter(|&&t| indexable(t)) {
                *tf.entry(t).or_default() += 1;
                len += 1;
            }
            doc_len.push(len);
            for (t, tf) in tf {
                postings.entry(t).or_default().push(Posting {
                    doc: doc as u32,
                    tf,
                });
            }
        }
        // Documents are visited in order, so every list is already sorted.
        let avgdl = doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64;
        Ok(Self {
            postings,
            doc_ids,
            doc_len,
            avgdl,
            params,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_len(&self, doc: usize) -> usize {
        self.doc_len[doc] as usize
    }

    pub fn postings(&self, term: TokenId) -> &[Posting] {
        self.postings.get(&term).map_or(&[], Vec::as_slice)
    }

    pub fn doc_freq(&self, term: TokenId) -> usize {
        self.postings(term).len()
    }

    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids.iter().position(|d| d == doc_id)
    }

    pub fn idf(&self, term: TokenId) -> f64 {
        idf_value(self.num_docs(), self.doc_freq(term))
    }

    fn term_weight(&self, idf: f64, tf: u32, doc: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = 1.0 - b + b * self.doc_len[doc] as f64 / self.avgdl;
        idf * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// BM25 of `query` against the document named `doc_id`.
    pub fn score(&self, query: &TokenSequence, doc_id: &str) -> Result<f64> {
        let doc = self
            .position(doc_id)
            .ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))?;
        Ok(self.score_position(query, doc))
    }

    pub fn score_position(&self, query: &TokenSequence, doc: usize) -> f64 {
        let mut score = 0.0;
        for &t in query.ids().iter().filter(|&&t| indexable(t)) {
            let list = self.postings(t);
            if let Ok(i) = list.binary_search_by_key(&(doc as u32), |p| p.doc) {
                score += self.term_weight(self.idf(t), list[i].tf, doc);
            }
        }
        score
    }

    /// Positive-scoring documents by descending score, ties by doc id,
    /// at most `top_k` of them.
    pub fn search(&self, query: &TokenSequence, top_k: usize) -> Vec<(String, f64)> {
        self.search_positions(query, top_k, None)
            .into_iter()
            .map(|(d, s)| (self.doc_ids[d].clone(), s))
            .collect()
    }

    fn search_positions(
        &self,
        query: &TokenSequence,
        top_k: usize,
        exclude: Option<usize>,
    ) -> Vec<(usize, f64)> {
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for &t in query.ids().iter().filter(|&&t| indexable(t)) {
            let list = self.postings(t);
            if list.is_empty() {
                continue;
            }
            let idf = self.idf(t);
            for p in list {
                let doc = p.doc as usize;
                *acc.entry(doc).or_insert(0.0) += self.term_weight(idf, p.tf, doc);
            }
        }
        let mut hits: Vec<(usize, f64)> = acc
            .into_iter()
            .filter(|&(d, s)| s > 0.0 && Some(d) != exclude)
            .collect();
        hits.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.doc_ids[a.0].cmp(&self.doc_ids[b.0]))
        });
        hits.truncate(top_k);
        hits
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Mined negatives for one anchor document, as persisted in JSONL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativesEntry {
    pub id: String,
    pub negatives: Vec<String>,
}

/// Mines BM25 hard negatives using each document's own text as the query.
pub struct HardNegativeMiner<'a> {
    index: &'a InvertedIndex,
    vocab: &'a Vocabulary,
    k: usize,
    query_len: usize,
}

impl<'a> HardNegativeMiner<'a> {
    /// `query_len` caps the tokenized document used as the query.
    pub fn new(index: &'a InvertedIndex, vocab: &'a Vocabulary, k: usize, query_len: usize) -> Self {
        Self {
            index,
            vocab,
            k,
            query_len,
        }
    }

    /// Top-`k` BM25 neighbours of `doc_id` (itself excluded), padded with
    /// random other documents when fewer than `k` score above zero.
    pub fn mine(&self, doc_id: &str, text: &str, rng: &mut impl Rng) -> Result<Vec<String>> {
        let n = self.index.num_docs();
        if n <= self.k {
            return Err(Error::InvalidInput(format!(
                "corpus of {n} documents cannot supply {} negatives",
                self.k
            )));
        }
        let me = self
            .index
            .position(doc_id)
            .ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))?;
        let query = self.vocab.tokenize(text).truncate(self.query_len);
        let mut picked: Vec<usize> = self
            .index
            .search_positions(&query, self.k, Some(me))
            .into_iter()
            .map(|(d, _)| d)
            .collect();
        if picked.len() < self.k {
            let pool: Vec<usize> = (0..n).filter(|d| *d != me && !picked.contains(d)).collect();
            let need = self.k - picked.len();
            picked.extend(pool.choose_multiple(rng, need).copied());
        }
        Ok(picked
            .into_iter()
            .map(|d| self.index.doc_ids[d].clone())
            .collect())
    }

    /// Mine every document of `store` in order. Each document draws its
    /// padding from its own generator seeded by `(seed, position)`.
    pub fn mine_all(&self, store: &DocumentStore, seed: u64) -> Result<Vec<NegativesEntry>> {
        store
            .iter()
            .enumerate()
            .map(|(i, doc)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                Ok(NegativesEntry {
                    id: doc.id.clone(),
                    negatives: self.mine(&doc.id, &doc.text, &mut rng)?,
                })
            })
            .collect()
    }
}

pub fn write_negatives(path: impl AsRef<Path>, entries: &[NegativesEntry]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_negatives(path: impl AsRef<Path>) -> Result<Vec<NegativesEntry>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;

    fn setup(texts: &[&str]) -> (DocumentStore, Vocabulary, InvertedIndex) {
        let store = DocumentStore::from_documents(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Document::new(format!("d{i}"), *t)),
        )
        .unwrap();
        let vocab = Vocabulary::build(&store, 1000, 1).unwrap();
        let index = InvertedIndex::build(&store, &vocab, Bm25Params::default()).unwrap();
        (store, vocab, index)
    }

    #[test]
    fn single_doc_postings() {
        let (_, vocab, index) = setup(&["a b a"]);
        let a = vocab.id("a").unwrap();
        let b = vocab.id("b").unwrap();
        assert_eq!(index.postings(a), &[Posting { doc: 0, tf: 2 }]);
        assert_eq!(index.postings(b), &[Posting { doc: 0, tf: 1 }]);
        assert_eq!(index.avgdl(), 3.0);
        assert_eq!(index.num_docs(), 1);
    }

    #[test]
    fn identical_docs_share_df() {
        let (_, vocab, index) = setup(&["x y", "x y", "x y"]);
        for w in ["x", "y"] {
            assert_eq!(index.doc_freq(vocab.id(w).unwrap()), 3);
        }
    }

    #[test]
    fn empty_store_rejected() {
        let vocab = Vocabulary::from_tokens(["a"]);
        assert!(InvertedIndex::build(&DocumentStore::new(), &vocab, Bm25Params::default()).is_err());
    }

    #[test]
    fn idf_closed_forms() {
        assert!((idf_value(10, 10) - 0.046520).abs() < 1e-6);
        assert!((idf_value(10, 0) - 22f64.ln()).abs() < 1e-12);
        assert!((idf_value(10, 0) - 3.091042).abs() < 1e-6);
    }

    #[test]
    fn single_doc_score_equals_idf() {
        let (_, vocab, index) = setup(&["a b"]);
        let q = vocab.tokenize("a");
        let s = index.score(&q, "d0").unwrap();
        assert!((s - index.idf(vocab.id("a").unwrap())).abs() < 1e-12);
    }

    #[test]
    fn no_overlap_scores_zero() {
        let (_, vocab, index) = setup(&["a b", "c d"]);
        assert_eq!(index.score(&vocab.tokenize("c"), "d0").unwrap(), 0.0);
        assert!(index.score(&vocab.tokenize("c"), "zz").is_err());
    }

    #[test]
    fn search_edge_cases() {
        let (_, vocab, index) = setup(&["a b", "c d", "e f"]);
        assert!(index.search(&vocab.tokenize("qqq"), 5).is_empty());
        let hits = index.search(&vocab.tokenize("c"), 5);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, "d1");
    }

    #[test]
    fn duplicate_query_terms_count_twice() {
        let (_, vocab, index) = setup(&["a b", "c d"]);
        let once = index.score(&vocab.tokenize("a"), "d0").unwrap();
        let twice = index.score(&vocab.tokenize("a a"), "d0").unwrap();
        assert!((twice - 2.0 * once).abs() < 1e-12);
    }

    #[test]
    fn mining_two_docs() {
        let (store, vocab, index) = setup(&["a b", "c d"]);
        let miner = HardNegativeMiner::new(&index, &vocab, 1, 512);
        let all = miner.mine_all(&store, 0).unwrap();
        assert_eq!(all[0].negatives, vec!["d1"]);
        assert_eq!(all[1].negatives, vec!["d0"]);
    }

    #[test]
    fn mining_needs_more_docs_than_k() {
        let (store, vocab, index) = setup(&["a b", "c d"]);
        let miner = HardNegativeMiner::new(&index, &vocab, 2, 512);
        assert!(miner.mine_all(&store, 0).is_err());
    }

    #[test]
    fn negatives_file_roundtrip() {
        let entries = vec![NegativesEntry {
            id: "a".into(),
            negatives: vec!["b".into(), "c".into()],
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("neg.jsonl");
        write_negatives(&p, &entries).unwrap();
        assert_eq!(read_negatives(&p).unwrap(), entries);
    }
}

//! Synthetic corpora: topic-clustered documents and passkey haystacks.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, DocumentStore};
use crate::dense::{Qrels, Query};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub n_topics: usize,
    pub docs_per_topic: usize,
    /// Words per document.
    pub doc_len: usize,
    pub topic_vocab_size: usize,
    pub shared_vocab_size: usize,
    /// Probability that a word is drawn from the document's topic.
    pub topic_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            n_topics: 10,
            docs_per_topic: 10,
            doc_len: 48,
            topic_vocab_size: 20,
            shared_vocab_size: 200,
            topic_fraction: 0.35,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.n_topics,
            self.docs_per_topic,
            self.doc_len,
            self.topic_vocab_size,
            self.shared_vocab_size,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config("synthetic corpus sizes must all be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.topic_fraction) {
            return Err(Error::Config(format!("topic_fraction {} outside [0,1]", self.topic_fraction)));
        }
        Ok(())
    }

    pub fn n_docs(&self) -> usize {
        self.n_topics * self.docs_per_topic
    }
}

/// A generated corpus with the hidden topic of every document.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub store: DocumentStore,
    /// `labels[i]` is the topic of the `i`-th document.
    pub labels: Vec<usize>,
}

pub fn topic_word(topic: usize, j: usize) -> String {
    format!("t{topic}w{j}")
}

pub fn filler_word(j: usize) -> String {
    format!("f{j}")
}

/// Zipf-distributed filler ranks in `0..n`.
fn filler_sampler(n: usize) -> Zipf<f64> {
    Zipf::new(n as f64, 1.0).expect("n ≥ 1")
}

/// Documents `doc{topic}_{i}`: each word comes from the topic's own vocabulary
/// (uniformly) with probability `topic_fraction`, otherwise from the shared
/// Zipfian filler vocabulary.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let zipf = filler_sampler(spec.shared_vocab_size);
    let mut docs = Vec::with_capacity(spec.n_docs());
    let mut labels = Vec::with_capacity(spec.n_docs());
    for t in 0..spec.n_topics {
        for i in 0..spec.docs_per_topic {
            let words: Vec<String> = (0..spec.doc_len)
                .map(|_| {
                    if rng.random_bool(spec.topic_fraction) {
                        topic_word(t, rng.random_range(0..spec.topic_vocab_size))
                    } else {
                        filler_word(zipf.sample(&mut rng) as usize - 1)
                    }
                })
                .collect();
            docs.push(Document::new(format!("doc{t}_{i}"), words.join(" ")));
            labels.push(t);
        }
    }
    Ok(SyntheticCorpus {
        store: DocumentStore::from_documents(docs)?,
        labels,
    })
}

/// Crop queries: `per_doc` random spans of `query_len` words from every
/// document. Graded qrels: the source document 2, its topic mates 1.
pub fn crop_queries(
    corpus: &SyntheticCorpus,
    per_doc: usize,
    query_len: usize,
    seed: u64,
) -> Result<(Vec<Query>, Qrels)> {
    if query_len == 0 {
        return Err(Error::Config("query_len must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::new();
    let mut qrels = Qrels::new();
    for (i, doc) in corpus.store.iter().enumerate() {
        let words: Vec<&str> = doc.text.split_whitespace().collect();
        for r in 0..per_doc {
            let len = query_len.min(words.len());
            let start = rng.random_range(0..=words.len() - len);
            let qid = format!("q{}_{r}", doc.id);
            queries.push(Query::new(qid.clone(), words[start..start + len].join(" ")));
            for (j, other) in corpus.store.iter().enumerate() {
                if j == i {
                    qrels.insert(qid.clone(), other.id.clone(), 2);
                } else if corpus.labels[j] == corpus.labels[i] {
                    qrels.insert(qid.clone(), other.id.clone(), 1);
                }
            }
        }
    }
    Ok((queries, qrels))
}

/// Crop queries from fresh documents of the same topics, drawn with `seed`
/// and never indexed: `per_topic` queries of `query_len` words per topic,
/// each relevant (grade 1) to every corpus document of its topic.
pub fn held_out_queries(
    corpus: &SyntheticCorpus,
    spec: &SyntheticCorpusSpec,
    per_topic: usize,
    query_len: usize,
    seed: u64,
) -> Result<(Vec<Query>, Qrels)> {
    if query_len == 0 {
        return Err(Error::Config("query_len must be ≥ 1".into()));
    }
    let fresh = generate_synthetic_corpus(&SyntheticCorpusSpec {
        docs_per_topic: per_topic,
        seed,
        ..spec.clone()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut queries = Vec::new();
    let mut qrels = Qrels::new();
    for (doc, &topic) in fresh.store.iter().zip(&fresh.labels) {
        let words: Vec<&str> = doc.text.split_whitespace().collect();
        let len = query_len.min(words.len());
        let start = rng.random_range(0..=words.len() - len);
        let qid = format!("h{}", doc.id);
        queries.push(Query::new(qid.clone(), words[start..start + len].join(" ")));
        for (other, &t) in corpus.store.iter().zip(&corpus.labels) {
            if t == topic {
                qrels.insert(qid.clone(), other.id.clone(), 1);
            }
        }
    }
    Ok((queries, qrels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PasskeySpec {
    pub n_docs: usize,
    /// Words per document, the key sentence included.
    pub doc_len: usize,
    /// Fractional position of the key sentence in `[0, 1]`.
    pub depth: f64,
    /// Digits per key.
    pub key_len: usize,
    pub filler_vocab_size: usize,
    pub seed: u64,
}

impl Default for PasskeySpec {
    fn default() -> Self {
        Self {
            n_docs: 20,
            doc_len: 64,
            depth: 0.5,
            key_len: 5,
            filler_vocab_size: 200,
            seed: 0,
        }
    }
}

pub const KEY_SENTENCE: [&str; 4] = ["the", "pass", "key", "is"];

/// Words in the key sentence, the key itself counting as one.
pub const KEY_SENTENCE_LEN: usize = KEY_SENTENCE.len() + 1;

impl PasskeySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_docs == 0 || self.key_len == 0 || self.filler_vocab_size == 0 {
            return Err(Error::Config("passkey sizes must be positive".into()));
        }
        if self.doc_len < KEY_SENTENCE_LEN {
            return Err(Error::InvalidInput(format!(
                "doc_len {} cannot hold the {KEY_SENTENCE_LEN}-word key sentence",
                self.doc_len
            )));
        }
        if !(0.0..=1.0).contains(&self.depth) {
            return Err(Error::Config(format!("depth {} outside [0,1]", self.depth)));
        }
        let space = 9.0 * 10f64.powi(self.key_len as i32 - 1);
        if (self.n_docs as f64) > space {
            return Err(Error::Config(format!("{} unique {}-digit keys do not exist", self.n_docs, self.key_len)));
        }
        Ok(())
    }

    /// Word offset of the key sentence.
    pub fn key_offset(&self) -> usize {
        (self.depth * (self.doc_len - KEY_SENTENCE_LEN) as f64).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct PasskeyCorpus {
    pub store: DocumentStore,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
    pub keys: Vec<String>,
}

/// Filler documents with "the pass key is <digits>" inserted at the spec's
/// depth; query `i` is "pass key <digits_i>" and matches document `i` only.
pub fn generate_passkey_corpus(spec: &PasskeySpec) -> Result<PasskeyCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lo = 10u64.pow(spec.key_len as u32 - 1);
    let hi = 10u64.pow(spec.key_len as u32);
    let mut seen = BTreeSet::new();
    let mut keys = Vec::with_capacity(spec.n_docs);
    while keys.len() < spec.n_docs {
        let k = rng.random_range(lo..hi).to_string();
        if seen.insert(k.clone()) {
            keys.push(k);
        }
    }
    let zipf = filler_sampler(spec.filler_vocab_size);
    let offset = spec.key_offset();
    let n_filler = spec.doc_len - KEY_SENTENCE_LEN;
    let mut docs = Vec::with_capacity(spec.n_docs);
    let mut queries = Vec::with_capacity(spec.n_docs);
    let mut qrels = Qrels::new();
    for (i, key) in keys.iter().enumerate() {
        let filler: Vec<String> = (0..n_filler)
            .map(|_| filler_word(zipf.sample(&mut rng) as usize - 1))
            .collect();
        let mut words: Vec<&str> = filler[..offset].iter().map(String::as_str).collect();
        words.extend(KEY_SENTENCE);
        words.push(key);
        words.extend(filler[offset..].iter().map(String::as_str));
        let id = format!("pk{i}");
        docs.push(Document::new(id.clone(), words.join(" ")));
        let qid = format!("qpk{i}");
        queries.push(Query::new(qid.clone(), format!("pass key {key}")));
        qrels.insert(qid, id, 1);
    }
    Ok(PasskeyCorpus {
        store: DocumentStore::from_documents(docs)?,
        queries,
        qrels,
        keys,
    })
}

/// Shuffle a store's documents deterministically (used to interleave corpora).
pub fn shuffled(store: &DocumentStore, seed: u64) -> Result<DocumentStore> {
    let mut docs = store.documents().to_vec();
    docs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    DocumentStore::from_documents(docs)
}

/// Concatenate stores; ids must stay unique.
pub fn concat_stores(stores: &[&DocumentStore]) -> Result<DocumentStore> {
    DocumentStore::from_documents(stores.iter().flat_map(|s| s.documents().iter().cloned()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_by_ten() {
        let c = generate_synthetic_corpus(&SyntheticCorpusSpec::default()).unwrap();
        assert_eq!(c.store.len(), 100);
        for t in 0..10 {
            assert_eq!(c.labels.iter().filter(|&&l| l == t).count(), 10);
        }
        let again = generate_synthetic_corpus(&SyntheticCorpusSpec::default()).unwrap();
        assert_eq!(c.store, again.store);
        assert!(c.store.iter().all(|d| d.text.split_whitespace().count() == 48));
    }

    #[test]
    fn crop_query_qrels_graded() {
        let spec = SyntheticCorpusSpec { n_topics: 2, docs_per_topic: 3, ..Default::default() };
        let c = generate_synthetic_corpus(&spec).unwrap();
        let (qs, qrels) = crop_queries(&c, 1, 8, 1).unwrap();
        assert_eq!(qs.len(), 6);
        let q0 = qrels.get(&qs[0].id).unwrap();
        assert_eq!(q0.len(), 3);
        assert_eq!(q0["doc0_0"], 2);
        assert_eq!(q0["doc0_1"], 1);
        assert!(c.store.get(0).unwrap().text.contains(&qs[0].text));
    }

    #[test]
    fn passkey_boundaries() {
        let spec = PasskeySpec { depth: 0.0, n_docs: 3, doc_len: 20, ..Default::default() };
        let c = generate_passkey_corpus(&spec).unwrap();
        let words: Vec<&str> = c.store.get(0).unwrap().text.split(' ').collect();
        assert_eq!(words.len(), 20);
        assert_eq!(&words[..4], &KEY_SENTENCE);
        assert_eq!(words[4], c.keys[0]);

        let spec = PasskeySpec { depth: 1.0, ..spec };
        let c = generate_passkey_corpus(&spec).unwrap();
        let words: Vec<&str> = c.store.get(1).unwrap().text.split(' ').collect();
        assert_eq!(words[19], c.keys[1]);
        assert_eq!(&words[15..19], &KEY_SENTENCE);

        assert!(generate_passkey_corpus(&PasskeySpec { doc_len: 4, ..Default::default() }).is_err());
    }

    #[test]
    fn passkey_keys_unique_and_matching() {
        let c = generate_passkey_corpus(&PasskeySpec { n_docs: 50, ..Default::default() }).unwrap();
        let set: BTreeSet<_> = c.keys.iter().collect();
        assert_eq!(set.len(), 50);
        for (q, k) in c.queries.iter().zip(&c.keys) {
            assert_eq!(q.text, format!("pass key {k}"));
            assert_eq!(c.qrels.get(&q.id).unwrap().len(), 1);
        }
    }
}

//! Dense retrieval: corpus embedding, exact cosine search and evaluation.

mod io;
pub mod metrics;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{DocumentStore, TokenId, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{checkpoint, Model};
use crate::sparse::InvertedIndex;
use crate::tensor::Real;

pub use io::{read_queries, write_queries, Qrels, Query, RetrievalRun};
pub use metrics::{accuracy_at_1, mrr, ndcg_at_k, recall_at_k, MetricResult};

/// `prefix ++ tokenize(text)`, cut to `max_len` ids with EOS kept last.
pub fn encode(vocab: &Vocabulary, prefix: &[TokenId], text: &str, max_len: usize) -> TokenSequence {
    vocab.tokenize(text).with_prefix(prefix).truncate(max_len)
}

/// Unit-norm document vectors aligned with `doc_ids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingIndex {
    pub doc_ids: Vec<String>,
    pub dim: usize,
    /// Row-major `[N × dim]`.
    pub vectors: Vec<f32>,
    /// Fingerprint of the model that produced the vectors.
    pub model_fingerprint: String,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.vectors.len() != self.doc_ids.len() * self.dim {
            return Err(Error::Shape(format!(
                "{} vectors of dim {} for {} ids",
                self.vectors.len() / self.dim.max(1),
                self.dim,
                self.doc_ids.len()
            )));
        }
        for i in 0..self.len() {
            let norm = self.row(i).iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Numerical(format!("row {i} has norm {norm}")));
            }
        }
        Ok(())
    }

    /// Exact top-`k` by dot product, ties by doc id ascending. `k` is clamped
    /// to the corpus size.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<(String, f64)>> {
        if query.len() != self.dim {
            return Err(Error::Shape(format!("query of dim {} for index of dim {}", query.len(), self.dim)));
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .map(|i| {
                let s = self.row(i).iter().zip(query).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
                (i, s)
            })
            .collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.doc_ids[a.0].cmp(&self.doc_ids[b.0]))
        };
        let k = k.min(scored.len());
        if k < scored.len() && k > 0 {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        scored.truncate(k);
        Ok(scored.into_iter().map(|(i, s)| (self.doc_ids[i].clone(), s)).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let idx: Self = serde_json::from_reader(std::io::BufReader::new(f))?;
        idx.validate()?;
        Ok(idx)
    }

    /// SHA-256 over ids and vector bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.doc_ids {
            h.update(id.as_bytes());
            h.update([0]);
        }
        for x in &self.vectors {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn to_f32<T: Real>(v: Vec<T>) -> Vec<f32> {
    v.into_iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()
}

/// Unit-norm embedding of a query or passage in inference mode.
pub fn embed_text<T: Real>(
    model: &Model<T>,
    vocab: &Vocabulary,
    prefix: &str,
    text: &str,
    max_len: usize,
) -> Result<Vec<f32>> {
    let seq = encode(vocab, &vocab.encode_words(prefix), text, max_len);
    let mut v = to_f32(model.embed(&seq)?);
    // re-normalize after the cast so the stored rows meet the 1e-6 bound
    let norm = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt() as f32;
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Embed every document as `passage_prefix ++ text`, truncated to `max_len`.
pub fn embed_corpus<T: Real>(
    model: &Model<T>,
    store: &DocumentStore,
    vocab: &Vocabulary,
    passage_prefix: &str,
    max_len: usize,
) -> Result<EmbeddingIndex> {
    if max_len > model.config.max_context {
        return Err(Error::Config(format!(
            "max_len {max_len} exceeds the model's max_context {}",
            model.config.max_context
        )));
    }
    let mut vectors = Vec::with_capacity(store.len() * model.config.d_model);
    for doc in store.iter() {
        vectors.extend(embed_text(model, vocab, passage_prefix, &doc.text, max_len)?);
    }
    Ok(EmbeddingIndex {
        doc_ids: store.iter().map(|d| d.id.clone()).collect(),
        dim: model.config.d_model,
        vectors,
        model_fingerprint: checkpoint::fingerprint(model),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Token budget per input, prefix and EOS included; `None` means the
    /// model's max_context.
    pub max_len: Option<usize>,
    /// Documents kept per query in the run.
    pub depth: usize,
    pub ndcg_k: usize,
    pub recall_k: usize,
    pub query_prefix: String,
    pub passage_prefix: String,
    pub tag: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_len: None,
            depth: 100,
            ndcg_k: 10,
            recall_k: 100,
            query_prefix: "Query: ".into(),
            passage_prefix: "Passage: ".into(),
            tag: "llm2ir".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub ndcg: f64,
    pub recall: f64,
    pub rr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub n_queries: usize,
    pub ndcg_k: usize,
    pub recall_k: usize,
    pub ndcg: f64,
    pub recall: f64,
    pub mrr: f64,
    pub accuracy_at_1: f64,
    /// Queries without any relevant document, left out of the means.
    pub excluded: Vec<String>,
    pub per_query: BTreeMap<String, QueryMetrics>,
}

impl EvalReport {
    pub fn from_run(system: &str, run: &RetrievalRun, qrels: &Qrels, cfg: &EvalConfig) -> Result<Self> {
        let n = ndcg_at_k(run, qrels, cfg.ndcg_k)?;
        let r = recall_at_k(run, qrels, cfg.recall_k)?;
        let m = mrr(run, qrels, cfg.depth)?;
        let a = accuracy_at_1(run, qrels)?;
        let per_query = n
            .per_query
            .iter()
            .map(|(q, &ndcg)| {
                let qm = QueryMetrics {
                    ndcg,
                    recall: r.per_query[q],
                    rr: m.per_query[q],
                };
                (q.clone(), qm)
            })
            .collect();
        Ok(Self {
            system: system.to_string(),
            n_queries: run.len(),
            ndcg_k: cfg.ndcg_k,
            recall_k: cfg.recall_k,
            ndcg: n.mean,
            recall: r.mean,
            mrr: m.mean,
            accuracy_at_1: a.mean,
            excluded: n.excluded,
            per_query,
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub struct Evaluation {
    pub report: EvalReport,
    pub run: RetrievalRun,
}

impl Evaluation {
    /// `run.trec` and `report.json` in `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, tag: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.run.write_trec(dir.join("run.trec"), tag)?;
        self.report.write_json(dir.join("report.json"))
    }
}

fn check_queries(queries: &[Query], qrels: &Qrels) -> Result<()> {
    match queries.iter().find(|q| qrels.get(&q.id).is_none()) {
        Some(q) => Err(Error::InvalidInput(format!("query {} has no qrels", q.id))),
        None => Ok(()),
    }
}

/// Dense run over a prebuilt index.
pub fn dense_run<T: Real>(
    model: &Model<T>,
    index: &EmbeddingIndex,
    vocab: &Vocabulary,
    queries: &[Query],
    cfg: &EvalConfig,
) -> Result<RetrievalRun> {
    let max_len = cfg.max_len.unwrap_or(model.config.max_context);
    let mut run = RetrievalRun::new();
    for q in queries {
        let v = embed_text(model, vocab, &cfg.query_prefix, &q.text, max_len)?;
        run.insert(q.id.clone(), index.search(&v, cfg.depth)?);
    }
    Ok(run)
}

/// Embed the corpus, embed and search every query, score the run.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    store: &DocumentStore,
    vocab: &Vocabulary,
    queries: &[Query],
    qrels: &Qrels,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    check_queries(queries, qrels)?;
    let max_len = cfg.max_len.unwrap_or(model.config.max_context);
    let index = embed_corpus(model, store, vocab, &cfg.passage_prefix, max_len)?;
    let run = dense_run(model, &index, vocab, queries, cfg)?;
    let report = EvalReport::from_run(&cfg.tag, &run, qrels, cfg)?;
    Ok(Evaluation { report, run })
}

/// The lexical baseline: BM25 over the raw query text.
pub fn bm25_evaluate(
    index: &InvertedIndex,
    vocab: &Vocabulary,
    queries: &[Query],
    qrels: &Qrels,
    cfg: &EvalConfig,
) -> Result<Evaluation> {
    check_queries(queries, qrels)?;
    let mut run = RetrievalRun::new();
    for q in queries {
        run.insert(q.id.clone(), index.search(&vocab.tokenize(&q.text), cfg.depth));
    }
    let report = EvalReport::from_run("bm25", &run, qrels, cfg)?;
    Ok(Evaluation { report, run })
}

//! Independent reference implementations the library is checked against.
#![allow(dead_code)]

use std::collections::BTreeMap;

use llm2ir::corpus::{Document, DocumentStore, TokenId, Vocabulary, NUM_RESERVED};
use llm2ir::sparse::Bm25Params;
use llm2ir::tensor::Tensor;
use rand::Rng;

/// A store of `n_docs` documents of 1..=max_len words drawn from `n_words`
/// distinct words, with a vocabulary over it.
pub fn random_corpus(rng: &mut impl Rng, n_docs: usize, max_len: usize, n_words: usize) -> (DocumentStore, Vocabulary) {
    let docs = (0..n_docs).map(|i| {
        let len = rng.random_range(1..=max_len);
        let text: Vec<String> = (0..len).map(|_| format!("w{}", rng.random_range(0..n_words))).collect();
        Document::new(format!("d{i:03}"), text.join(" "))
    });
    let store = DocumentStore::from_documents(docs).unwrap();
    let vocab = Vocabulary::build(&store, usize::MAX, 1).unwrap();
    (store, vocab)
}

/// BM25 by a direct double loop over (query term, document), no index.
pub fn brute_bm25(store: &DocumentStore, vocab: &Vocabulary, query: &str, params: Bm25Params) -> Vec<(String, f64)> {
    let docs: Vec<Vec<TokenId>> = store
        .iter()
        .map(|d| vocab.tokenize(&d.text).ids().iter().copied().filter(|&t| t as usize >= NUM_RESERVED).collect())
        .collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let q: Vec<TokenId> = vocab.tokenize(query).ids().iter().copied().filter(|&t| t as usize >= NUM_RESERVED).collect();
    let mut out = Vec::new();
    for (d, doc) in store.iter().zip(&docs) {
        let mut score = 0.0;
        for &t in &q {
            let tf = doc.iter().filter(|&&x| x == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = docs.iter().filter(|x| x.contains(&t)).count() as f64;
            let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
            let norm = 1.0 - params.b + params.b * doc.len() as f64 / avgdl;
            score += idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm);
        }
        if score > 0.0 {
            out.push((d.id.clone(), score));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `rows` random unit vectors of dimension `d`.
pub fn unit_rows(rng: &mut impl Rng, rows: usize, d: usize) -> Tensor<f64> {
    let data: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = dot(&v, &v).sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    if rows == 0 {
        return Tensor::zeros(&[0, d]);
    }
    Tensor::from_rows(&data).unwrap()
}

/// InfoNCE by direct summation: anchor `i` against every positive and, with
/// `own_only`, just its own `k` negatives, otherwise all of them.
pub fn naive_info_nce(a: &Tensor<f64>, p: &Tensor<f64>, g: &Tensor<f64>, k: usize, tau: f64, own_only: bool) -> f64 {
    let n = a.rows();
    let mut total = 0.0;
    for i in 0..n {
        let pos = (dot(a.row(i), p.row(i)) / tau).exp();
        let mut denom: f64 = (0..n).map(|j| (dot(a.row(i), p.row(j)) / tau).exp()).sum();
        for r in 0..n * k {
            if !own_only || r / k == i {
                denom += (dot(a.row(i), g.row(r)) / tau).exp();
            }
        }
        total += -(pos / denom).ln();
    }
    total / n as f64
}

/// nDCG@k written out from the textbook definition.
pub fn reference_ndcg(ranked: &[&str], rel: &BTreeMap<&str, u32>, k: usize) -> f64 {
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| {
            let g = *rel.get(d).unwrap_or(&0) as f64;
            (2f64.powf(g) - 1.0) / (i as f64 + 2.0).log2()
        })
        .sum();
    let mut grades: Vec<u32> = rel.values().copied().collect();
    grades.sort_by(|a, b| b.cmp(a));
    let idcg: f64 = grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| (2f64.powf(g as f64) - 1.0) / (i as f64 + 2.0).log2())
        .sum();
    dcg / idcg
}

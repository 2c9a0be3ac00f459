//! nDCG, recall and reciprocal rank in the trec_eval convention.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Qrels, RetrievalRun};
use crate::error::{Error, Result};

/// Per-query values and their mean over queries with at least one relevant
/// document; the others are listed in `excluded`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    pub excluded: Vec<String>,
}

fn judged<'a>(run: &'a RetrievalRun, qrels: &'a Qrels) -> Result<Vec<(&'a str, &'a [(String, f64)], &'a BTreeMap<String, u32>)>> {
    run.0
        .iter()
        .map(|(q, ranked)| {
            let rel = qrels
                .get(q)
                .ok_or_else(|| Error::InvalidInput(format!("no qrels for query {q}")))?;
            Ok((q.as_str(), ranked.as_slice(), rel))
        })
        .collect()
}

fn aggregate(
    run: &RetrievalRun,
    qrels: &Qrels,
    f: impl Fn(&[(String, f64)], &BTreeMap<String, u32>) -> f64,
) -> Result<MetricResult> {
    let mut out = MetricResult::default();
    for (q, ranked, rel) in judged(run, qrels)? {
        if rel.values().all(|&g| g == 0) {
            out.excluded.push(q.to_string());
            continue;
        }
        out.per_query.insert(q.to_string(), f(ranked, rel));
    }
    if !out.per_query.is_empty() {
        out.mean = out.per_query.values().sum::<f64>() / out.per_query.len() as f64;
    }
    Ok(out)
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// `DCG@k / IDCG@k` with gain `2^rel − 1` and discount `1/log2(rank + 1)`.
pub fn ndcg_at_k(run: &RetrievalRun, qrels: &Qrels, k: usize) -> Result<MetricResult> {
    aggregate(run, qrels, |ranked, rel| {
        let dcg: f64 = ranked
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, (d, _))| gain(rel.get(d).copied().unwrap_or(0)) * discount(i + 1))
            .sum();
        let mut ideal: Vec<u32> = rel.values().copied().filter(|&g| g > 0).collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &g)| gain(g) * discount(i + 1)).sum();
        dcg / idcg
    })
}

/// Fraction of relevant documents (grade > 0) found in the top `k`.
pub fn recall_at_k(run: &RetrievalRun, qrels: &Qrels, k: usize) -> Result<MetricResult> {
    aggregate(run, qrels, |ranked, rel| {
        let relevant = rel.values().filter(|&&g| g > 0).count();
        let found = ranked
            .iter()
            .take(k)
            .filter(|(d, _)| rel.get(d).is_some_and(|&g| g > 0))
            .count();
        found as f64 / relevant as f64
    })
}

/// Reciprocal rank of the first relevant document within the top `k`.
pub fn mrr(run: &RetrievalRun, qrels: &Qrels, k: usize) -> Result<MetricResult> {
    aggregate(run, qrels, |ranked, rel| {
        ranked
            .iter()
            .take(k)
            .position(|(d, _)| rel.get(d).is_some_and(|&g| g > 0))
            .map_or(0.0, |p| 1.0 / (p + 1) as f64)
    })
}

/// Share of queries whose top-ranked document is relevant.
pub fn accuracy_at_1(run: &RetrievalRun, qrels: &Qrels) -> Result<MetricResult> {
    aggregate(run, qrels, |ranked, rel| {
        let hit = ranked.first().is_some_and(|(d, _)| rel.get(d).is_some_and(|&g| g > 0));
        f64::from(u8::from(hit))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_of(ids: &[&str]) -> RetrievalRun {
        let mut r = RetrievalRun::new();
        let n = ids.len() as f64;
        r.insert("q", ids.iter().enumerate().map(|(i, d)| (d.to_string(), n - i as f64)).collect());
        r
    }

    fn qrels_of(rel: &[(&str, u32)]) -> Qrels {
        let mut q = Qrels::new();
        for (d, g) in rel {
            q.insert("q", *d, *g);
        }
        q
    }

    #[test]
    fn perfect_ranking_is_one() {
        let q = qrels_of(&[("a", 2), ("b", 1)]);
        let r = ndcg_at_k(&run_of(&["a", "b", "c"]), &q, 10).unwrap();
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn single_relevant_at_rank_two() {
        let q = qrels_of(&[("b", 1)]);
        let r = ndcg_at_k(&run_of(&["a", "b", "c"]), &q, 10).unwrap();
        assert!((r.mean - 1.0 / 3f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn recall_and_rr() {
        let q = qrels_of(&[("d", 1), ("e", 1)]);
        let run = run_of(&["a", "b", "c", "d", "e"]);
        assert_eq!(mrr(&run, &q, 10).unwrap().mean, 0.25);
        assert_eq!(recall_at_k(&run, &q, 10).unwrap().mean, 1.0);
        assert_eq!(recall_at_k(&run, &q, 4).unwrap().mean, 0.5);
        assert_eq!(mrr(&run, &q, 3).unwrap().mean, 0.0);
    }

    #[test]
    fn unjudged_queries() {
        let q = qrels_of(&[("a", 0)]);
        let r = ndcg_at_k(&run_of(&["a"]), &q, 10).unwrap();
        assert_eq!(r.excluded, vec!["q".to_string()]);
        assert!(r.per_query.is_empty());
        assert!(ndcg_at_k(&run_of(&["a"]), &Qrels::new(), 10).is_err());
    }
}

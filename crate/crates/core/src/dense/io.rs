//! Qrels, TREC run files and query files.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `query_id → doc_id → grade`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels(pub BTreeMap<String, BTreeMap<String, u32>>);

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: impl Into<String>, doc: impl Into<String>, grade: u32) {
        self.0.entry(query.into()).or_default().insert(doc.into(), grade);
    }

    pub fn get(&self, query: &str) -> Option<&BTreeMap<String, u32>> {
        self.0.get(query)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Tab-separated `query_id doc_id grade` lines. Blank lines are skipped.
    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut q = Self::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
            if cols.len() != 3 {
                return Err(parse_err(format!("expected 3 tab-separated columns, got {}", cols.len())));
            }
            let grade: u32 = cols[2]
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("grade {:?} is not a non-negative integer", cols[2])))?;
            q.insert(cols[0], cols[1], grade);
        }
        Ok(q)
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for (q, docs) in &self.0 {
            for (d, g) in docs {
                writeln!(w, "{q}\t{d}\t{g}").map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `query_id → [(doc_id, score)]` in rank order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRun(pub BTreeMap<String, Vec<(String, f64)>>);

impl RetrievalRun {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: impl Into<String>, ranked: Vec<(String, f64)>) {
        self.0.insert(query.into(), ranked);
    }

    pub fn get(&self, query: &str) -> Option<&[(String, f64)]> {
        self.0.get(query).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Scores non-increasing and no duplicate documents within a query.
    pub fn validate(&self) -> Result<()> {
        for (q, ranked) in &self.0 {
            let mut seen = HashSet::new();
            for (i, (d, s)) in ranked.iter().enumerate() {
                if !seen.insert(d.as_str()) {
                    return Err(Error::InvalidInput(format!("query {q}: document {d} ranked twice")));
                }
                if i > 0 && *s > ranked[i - 1].1 {
                    return Err(Error::InvalidInput(format!("query {q}: scores increase at rank {}", i + 1)));
                }
            }
        }
        Ok(())
    }

    /// TREC format: `qid Q0 docid rank score tag`, ranks from 1.
    pub fn to_trec(&self, tag: &str) -> String {
        let mut out = String::new();
        for (q, ranked) in &self.0 {
            for (i, (d, s)) in ranked.iter().enumerate() {
                out.push_str(&format!("{q} Q0 {d} {} {s} {tag}\n", i + 1));
            }
        }
        out
    }

    pub fn write_trec(&self, path: impl AsRef<Path>, tag: &str) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_trec(tag)).map_err(|e| Error::io(path, e))
    }

    pub fn read_trec(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let parse_err = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
            if cols.len() != 6 {
                return Err(parse_err("expected 6 columns: qid Q0 docid rank score tag"));
            }
            let rank = cols[3].parse().map_err(|_| parse_err("bad rank"))?;
            let score = cols[4].parse().map_err(|_| parse_err("bad score"))?;
            rows.entry(cols[0].to_string()).or_default().push((rank, cols[2].to_string(), score));
        }
        let mut run = Self::new();
        for (q, mut r) in rows {
            r.sort_by_key(|x| x.0);
            if r.iter().enumerate().any(|(i, x)| x.0 != i + 1) {
                return Err(Error::InvalidInput(format!("query {q}: ranks are not contiguous from 1")));
            }
            run.insert(q, r.into_iter().map(|(_, d, s)| (d, s)).collect());
        }
        Ok(run)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

pub fn read_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let q: Query = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if !seen.insert(q.id.clone()) {
            return Err(Error::DuplicateId(q.id));
        }
        out.push(q);
    }
    Ok(out)
}

pub fn write_queries(path: impl AsRef<Path>, queries: &[Query]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for q in queries {
        serde_json::to_writer(&mut w, q)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qrels_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.tsv");
        let mut q = Qrels::new();
        q.insert("q1", "d1", 1);
        q.insert("q1", "d2", 0);
        q.insert("q2", "d9", 2);
        q.write_tsv(&p).unwrap();
        assert_eq!(Qrels::read_tsv(&p).unwrap(), q);
        std::fs::write(&p, "q1\td1\t1\nq1\td2\n").unwrap();
        assert!(matches!(Qrels::read_tsv(&p), Err(Error::Parse { line: 2, .. })));
        std::fs::write(&p, "q1\td1\t-1\n").unwrap();
        assert!(Qrels::read_tsv(&p).is_err());
    }

    #[test]
    fn trec_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.trec");
        let mut run = RetrievalRun::new();
        run.insert("q1", vec![("d3".into(), 0.9), ("d1".into(), 0.1 + 0.2)]);
        run.insert("q2", vec![]);
        run.write_trec(&p, "tag").unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "q1 Q0 d3 1 0.9 tag");
        let back = RetrievalRun::read_trec(&p).unwrap();
        assert_eq!(back.get("q1"), run.get("q1"));
    }

    #[test]
    fn run_validation() {
        let mut run = RetrievalRun::new();
        run.insert("q", vec![("a".into(), 0.1), ("b".into(), 0.5)]);
        assert!(run.validate().is_err());
        let mut run = RetrievalRun::new();
        run.insert("q", vec![("a".into(), 0.5), ("a".into(), 0.1)]);
        assert!(run.validate().is_err());
    }

    #[test]
    fn queries_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.jsonl");
        let qs = vec![Query::new("a", "hello world"), Query::new("b", "x")];
        write_queries(&p, &qs).unwrap();
        assert_eq!(read_queries(&p).unwrap(), qs);
    }
}

//! Plain-text tables rendered from the JSON reports the drivers write.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{ContextPairReport, PairedReport};
use crate::dense::EvalReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(title: impl Into<String>, headers: &[&str]) -> Self {
        Self {
            title: title.into(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    /// First column left-aligned, the rest right-aligned.
    pub fn render(&self) -> String {
        let cols = self.headers.len();
        let mut width = vec![0; cols];
        for row in std::iter::once(&self.headers).chain(&self.rows) {
            for (w, cell) in width.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |row: &[String]| {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = width[i]) } else { format!("{c:>w$}", w = width[i]) })
                .collect();
            cells.join("  ").trim_end().to_string()
        };
        let mut out = String::new();
        if !self.title.is_empty() {
            let _ = writeln!(out, "{}", self.title);
        }
        let _ = writeln!(out, "{}", line(&self.headers));
        let total: usize = width.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
        let _ = writeln!(out, "{}", "-".repeat(total));
        for r in &self.rows {
            let _ = writeln!(out, "{}", line(r));
        }
        out
    }
}

fn f(x: f64) -> String {
    format!("{:.4}", x)
}

fn eval_row(name: &str, e: &EvalReport) -> Vec<String> {
    vec![
        name.to_string(),
        e.n_queries.to_string(),
        f(e.ndcg),
        f(e.recall),
        f(e.mrr),
        f(e.accuracy_at_1),
    ]
}

const EVAL_HEADERS: [&str; 6] = ["system", "queries", "nDCG@k", "recall@k", "MRR", "acc@1"];

pub fn eval_table(title: &str, e: &EvalReport) -> Table {
    let mut t = Table::new(title, &EVAL_HEADERS);
    t.push(eval_row(&e.system, e));
    t
}

pub fn paired_table(r: &PairedReport) -> Table {
    let mut t = Table::new(format!("{} ({})", r.experiment, r.note), &[&EVAL_HEADERS[..], &["final loss"]].concat());
    if let Some(b) = &r.baseline {
        let mut row = eval_row("random init", b);
        row.push("-".into());
        t.push(row);
    }
    for run in &r.runs {
        let mut row = eval_row(&run.label, &run.eval);
        row.push(run.train.final_loss().map_or("-".into(), f));
        t.push(row);
    }
    t
}

pub fn context_tables(r: &ContextPairReport) -> Vec<Table> {
    let mut t = Table::new(
        format!("context-pair, inputs cut to {} tokens ({})", r.truncate_to, r.note),
        &["twin", "max_context", "rope_theta", "nDCG long docs", "nDCG control"],
    );
    for tw in [&r.long, &r.short] {
        t.push(vec![
            tw.label.clone(),
            tw.max_context.to_string(),
            tw.rope_theta.to_string(),
            f(tw.eval.ndcg),
            f(tw.control.ndcg),
        ]);
    }
    t.push(vec!["long - short".into(), "".into(), "".into(), f(r.delta), f(r.control_delta)]);
    let mut out = vec![t];
    if let Some(s) = &r.fill_sweep {
        let mut t = Table::new(
            format!("passkey fill sweep, window {} tokens, chance {:.3}", s.max_context, s.chance),
            &["fill", "doc words", "acc@1", "nDCG@k", "MRR"],
        );
        for p in &s.points {
            t.push(vec![p.fill.to_string(), p.doc_len.to_string(), f(p.accuracy_at_1), f(p.ndcg), f(p.mrr)]);
        }
        out.push(t);
    }
    out
}

/// Tables for one JSON report of any of the known shapes.
pub fn render_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let tables = if value.get("runs").is_some() {
        vec![paired_table(&serde_json::from_value(value)?)]
    } else if value.get("long").is_some() {
        context_tables(&serde_json::from_value(value)?)
    } else if value.get("system").is_some() {
        vec![eval_table("evaluation", &serde_json::from_value(value)?)]
    } else {
        return Err(Error::Format(format!("{}: not a known report", path.display())));
    };
    Ok(tables.iter().map(Table::render).collect::<Vec<_>>().join("\n"))
}

fn reports_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            reports_under(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "report.json") {
            out.push(p);
        }
    }
    Ok(())
}

/// Every `report.json` below `dir` (or `dir` itself when it is a file),
/// rendered in path order.
pub fn render_dir(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    if dir.is_file() {
        return render_file(dir);
    }
    let mut files = Vec::new();
    reports_under(dir, &mut files)?;
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no report.json under {}", dir.display())));
    }
    let mut out = String::new();
    for p in files {
        let _ = writeln!(out, "== {}", p.display());
        out.push_str(&render_file(&p)?);
        out.push('\n');
    }
    Ok(out)
}

//! Context-length twins and the passkey fill-fraction sweep.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    desk_setup, generate_passkey_corpus, generate_synthetic_corpus, held_out_queries, run_setup, PasskeyCorpus,
    PasskeySpec, Setup, SyntheticCorpusSpec, KEY_SENTENCE_LEN,
};
use crate::corpus::{split_words, DocumentStore, Vocabulary};
use crate::dense::{encode, evaluate, EvalConfig, EvalReport, Query};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::train::{TrainOutputs, TrainReport};

pub const FILL_FRACTIONS: [f64; 5] = [0.25, 0.5, 0.75, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FillSweepConfig {
    /// `doc_len` is replaced at every fill fraction.
    pub passkey: PasskeySpec,
    pub fills: Vec<f64>,
    pub query_prefix: String,
    pub passage_prefix: String,
}

impl Default for FillSweepConfig {
    fn default() -> Self {
        Self {
            passkey: PasskeySpec { seed: 5, ..Default::default() },
            fills: FILL_FRACTIONS.to_vec(),
            query_prefix: "Query: ".into(),
            passage_prefix: "Passage: ".into(),
        }
    }
}

/// Words per passkey document so that prefix, document and EOS fill
/// `fill · max_context` tokens.
pub fn fill_doc_len(fill: f64, max_context: usize, prefix_len: usize) -> Result<usize> {
    if !(fill > 0.0 && fill <= 1.0) {
        return Err(Error::Config(format!("fill fraction {fill} must lie in (0, 1]")));
    }
    let tokens = (fill * max_context as f64).round() as usize;
    let len = tokens.saturating_sub(prefix_len + 1);
    if len < KEY_SENTENCE_LEN {
        return Err(Error::Config(format!(
            "fill {fill} of a {max_context}-token window leaves {len} words, too few for the key sentence"
        )));
    }
    Ok(len)
}

impl FillSweepConfig {
    fn prefix_len(&self) -> usize {
        split_words(&self.passage_prefix).count()
    }

    /// The passkey corpus at every fill fraction.
    pub fn corpora(&self, max_context: usize) -> Result<Vec<(f64, PasskeyCorpus)>> {
        self.fills
            .iter()
            .map(|&fill| {
                let spec = PasskeySpec {
                    doc_len: fill_doc_len(fill, max_context, self.prefix_len())?,
                    ..self.passkey.clone()
                };
                Ok((fill, generate_passkey_corpus(&spec)?))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillPoint {
    pub fill: f64,
    pub doc_len: usize,
    pub accuracy_at_1: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillSweepReport {
    pub max_context: usize,
    pub n_docs: usize,
    pub chance: f64,
    pub points: Vec<FillPoint>,
}

impl FillSweepReport {
    pub fn at(&self, fill: f64) -> Option<&FillPoint> {
        self.points.iter().find(|p| (p.fill - fill).abs() < 1e-12)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(w, "fill,doc_len,accuracy_at_1,ndcg,mrr").map_err(io)?;
        for p in &self.points {
            writeln!(w, "{},{},{:.6},{:.6},{:.6}", p.fill, p.doc_len, p.accuracy_at_1, p.ndcg, p.mrr).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Passkey retrieval accuracy of `model` as documents grow to fill its window.
pub fn run_fill_fraction_sweep(model: &Model<f32>, vocab: &Vocabulary, cfg: &FillSweepConfig) -> Result<FillSweepReport> {
    let max_context = model.config.max_context;
    let eval = EvalConfig {
        max_len: Some(max_context),
        query_prefix: cfg.query_prefix.clone(),
        passage_prefix: cfg.passage_prefix.clone(),
        ..Default::default()
    };
    let mut points = Vec::new();
    for (fill, pk) in cfg.corpora(max_context)? {
        let e = evaluate(model, &pk.store, vocab, &pk.queries, &pk.qrels, &eval)?;
        log::info!("fill {fill}: accuracy@1 {:.3}", e.report.accuracy_at_1);
        points.push(FillPoint {
            fill,
            doc_len: pk.store.get(0).map_or(0, |d| d.text.split_whitespace().count()),
            accuracy_at_1: e.report.accuracy_at_1,
            ndcg: e.report.ndcg,
            mrr: e.report.mrr,
        });
    }
    Ok(FillSweepReport {
        max_context,
        n_docs: cfg.passkey.n_docs,
        chance: 1.0 / cfg.passkey.n_docs as f64,
        points,
    })
}

/// Twin models that differ only in context window (and optionally RoPE base),
/// trained on the same data with the same seeds and compared on inputs cut to
/// the shorter window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextPairConfig {
    /// Shared corpus, pretraining, training and evaluation settings; its
    /// `model` is replaced by each twin's config.
    pub setup: Setup,
    pub config_long: ModelConfig,
    pub config_short: ModelConfig,
    /// Document length of the control corpus, well inside both windows.
    pub control_doc_len: usize,
    pub sweep: FillSweepConfig,
}

impl Default for ContextPairConfig {
    fn default() -> Self {
        let mut setup = desk_setup();
        setup.corpus.doc_len = 200;
        setup.augment.passage_len = 256;
        let config_long = ModelConfig { max_context: 256, ..setup.model.clone() };
        let config_short = ModelConfig { max_context: 64, ..setup.model.clone() };
        Self {
            setup,
            config_long,
            config_short,
            control_doc_len: 24,
            sweep: FillSweepConfig::default(),
        }
    }
}

impl ContextPairConfig {
    pub fn truncate_to(&self) -> usize {
        self.config_long.max_context.min(self.config_short.max_context)
    }

    pub fn validate(&self) -> Result<()> {
        self.config_long.validate()?;
        self.config_short.validate()?;
        let aligned = ModelConfig {
            max_context: self.config_short.max_context,
            rope_theta: self.config_short.rope_theta,
            ..self.config_long.clone()
        };
        if aligned != self.config_short {
            return Err(Error::Config("context twins may differ only in max_context and rope_theta".into()));
        }
        if self.control_doc_len == 0 {
            return Err(Error::Config("control_doc_len must be ≥ 1".into()));
        }
        Ok(())
    }

    /// The shared setup specialised to one twin: its model config, training
    /// passages capped by its window and evaluation cut to `truncate_to`.
    pub fn twin_setup(&self, config: &ModelConfig) -> Setup {
        let mut s = self.setup.clone();
        s.model = config.clone();
        let prefix = split_words(&s.augment.passage_prefix).count();
        s.augment.passage_len = s.augment.passage_len.min(config.max_context - prefix);
        s.augment.anchor_len = s.augment.anchor_len.min(s.augment.passage_len);
        s.eval.max_len = Some(self.truncate_to());
        s
    }

    fn control_spec(&self) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            doc_len: self.control_doc_len,
            seed: self.setup.corpus.seed ^ 0x00c0_ffee,
            ..self.setup.corpus.clone()
        }
    }
}

/// SHA-256 over the token ids fed to a model at evaluation time.
pub fn eval_input_hash(
    vocab: &Vocabulary,
    store: &DocumentStore,
    queries: &[Query],
    cfg: &EvalConfig,
    max_len: usize,
) -> String {
    let mut h = Sha256::new();
    let mut feed = |prefix: &str, text: &str| {
        let seq = encode(vocab, &vocab.encode_words(prefix), text, max_len);
        for id in seq.ids() {
            h.update(id.to_le_bytes());
        }
        h.update(u32::MAX.to_le_bytes());
    };
    for q in queries {
        feed(&cfg.query_prefix, &q.text);
    }
    for d in store.iter() {
        feed(&cfg.passage_prefix, &d.text);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwinReport {
    pub label: String,
    pub max_context: usize,
    pub rope_theta: f64,
    pub train: TrainReport,
    /// Long documents, inputs cut to the shorter window.
    pub eval: EvalReport,
    /// Documents shorter than both windows.
    pub control: EvalReport,
    pub input_hash: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextPairReport {
    pub note: String,
    pub truncate_to: usize,
    pub long: TwinReport,
    pub short: TwinReport,
    /// Long minus short nDCG on the long documents.
    pub delta: f64,
    pub control_delta: f64,
    pub fill_sweep: Option<FillSweepReport>,
}

impl ContextPairReport {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("report.json");
        std::fs::write(&p, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&p, e))?;
        for t in [&self.long, &self.short] {
            t.train.write_csv(dir.join(format!("{}_loss.csv", t.label)))?;
        }
        if let Some(s) = &self.fill_sweep {
            s.write_csv(dir.join("fill_sweep.csv"))?;
        }
        Ok(())
    }
}

pub struct ContextPairRun {
    pub report: ContextPairReport,
    pub long_model: Model<f32>,
    pub short_model: Model<f32>,
    pub vocab: Vocabulary,
}

/// Train both twins, evaluate them on identical truncated inputs, then sweep
/// passkey fill fractions on the long twin.
pub fn run_context_pair(cfg: &ContextPairConfig) -> Result<ContextPairRun> {
    cfg.validate()?;
    let passkeys = cfg.sweep.corpora(cfg.config_long.max_context)?;
    let control = generate_synthetic_corpus(&cfg.control_spec())?;
    let mut extra: Vec<&DocumentStore> = passkeys.iter().map(|(_, pk)| &pk.store).collect();
    extra.push(&control.store);
    let prep = cfg.setup.prepare_with(&extra, &[])?;
    let q = &cfg.setup.queries;
    let per_topic = q.per_doc * cfg.setup.corpus.docs_per_topic;
    let (control_queries, control_qrels) =
        held_out_queries(&control, &cfg.control_spec(), per_topic, q.query_len, q.seed)?;

    let mut twins = Vec::new();
    for (label, config) in [("long", &cfg.config_long), ("short", &cfg.config_short)] {
        let setup = cfg.twin_setup(config);
        let start = Instant::now();
        let run = run_setup(label, &setup, &prep, &TrainOutputs::default())?;
        let eval_cfg = setup.eval_config();
        let max_len = eval_cfg.max_len.unwrap_or(config.max_context);
        let input_hash = eval_input_hash(&prep.vocab, &prep.corpus.store, &prep.queries, &eval_cfg, max_len);
        let control = evaluate(&run.model, &control.store, &prep.vocab, &control_queries, &control_qrels, &eval_cfg)?;
        let report = TwinReport {
            label: label.into(),
            max_context: config.max_context,
            rope_theta: config.rope_theta,
            train: run.report.train,
            eval: run.report.eval,
            control: control.report,
            input_hash,
            seconds: start.elapsed().as_secs_f64(),
        };
        twins.push((report, run.model));
    }
    let (short, short_model) = twins.pop().expect("two twins");
    let (long, long_model) = twins.pop().expect("two twins");
    if long.input_hash != short.input_hash {
        return Err(Error::InvalidInput("the twins were evaluated on different inputs".into()));
    }
    let fill_sweep = run_fill_fraction_sweep(&long_model, &prep.vocab, &cfg.sweep)?;
    let report = ContextPairReport {
        note: "both twins start from the same initialization; no context-extension fine-tuning".into(),
        truncate_to: cfg.truncate_to(),
        delta: long.eval.ndcg - short.eval.ndcg,
        control_delta: long.control.ndcg - short.control.ndcg,
        long,
        short,
        fill_sweep: Some(fill_sweep),
    };
    Ok(ContextPairRun {
        report,
        long_model,
        short_model,
        vocab: prep.vocab,
    })
}

//! Desk-scale studies: end-to-end training on a synthetic clustered corpus,
//! the hard-negative ablation, crop vs dropout augmentation, and the
//! context-length twins with the passkey fill sweep.

mod context;
pub mod report;
mod synth;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{AugMode, AugmentationConfig};
use crate::corpus::{Document, DocumentStore, Vocabulary};
use crate::dense::{evaluate, EvalConfig, EvalReport, Evaluation, Qrels, Query};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::sparse::{Bm25Params, HardNegativeMiner, InvertedIndex, NegativesEntry};
use crate::train::{pretrain_lm, train, LmConfig, TrainConfig, TrainOutputs, TrainReport};

pub use context::{
    fill_doc_len, run_context_pair, run_fill_fraction_sweep, ContextPairConfig, ContextPairReport, ContextPairRun, FillPoint,
    FillSweepConfig, FillSweepReport, TwinReport, FILL_FRACTIONS,
};
pub use synth::{
    concat_stores, crop_queries, filler_word, held_out_queries, generate_passkey_corpus, generate_synthetic_corpus, shuffled,
    topic_word, PasskeyCorpus, PasskeySpec, SyntheticCorpus, SyntheticCorpusSpec, KEY_SENTENCE, KEY_SENTENCE_LEN,
};

/// Words every vocabulary carries regardless of frequency: the instruction
/// prefixes.
pub const PREFIX_WORDS: [&str; 2] = ["query", "passage"];

/// Vocabulary over the union of `stores`, with the prefix words forced in.
/// Document ids may repeat across stores.
pub fn build_vocab(stores: &[&DocumentStore]) -> Result<Vocabulary> {
    let all = DocumentStore::from_documents(stores.iter().enumerate().flat_map(|(i, s)| {
        s.iter().map(move |d| Document::new(format!("{i}/{}", d.id), d.text.clone()))
    }))?;
    Vocabulary::build_with(&all, usize::MAX, 1, &PREFIX_WORDS)
}

/// Mined BM25 negatives for every document of `store`.
pub fn mine_negatives(
    store: &DocumentStore,
    vocab: &Vocabulary,
    k: usize,
    query_len: usize,
    seed: u64,
) -> Result<Vec<NegativesEntry>> {
    let index = InvertedIndex::build(store, vocab, Bm25Params::default())?;
    HardNegativeMiner::new(&index, vocab, k, query_len).mine_all(store, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuerySpec {
    pub held_out: bool,
    /// Queries per corpus document (or per topic document when held out).
    pub per_doc: usize,
    /// Words per crop query.
    pub query_len: usize,
    pub seed: u64,
}

impl Default for QuerySpec {
    fn default() -> Self {
        Self {
            held_out: true,
            per_doc: 1,
            query_len: 16,
            seed: 1_000_003,
        }
    }
}

/// Everything one training-and-evaluation run needs. `model.vocab_size` is
/// replaced by the size of the vocabulary built from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Setup {
    pub corpus: SyntheticCorpusSpec,
    pub queries: QuerySpec,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub pretrain: LmConfig,
    pub augment: AugmentationConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub mining_seed: u64,
}

impl Default for Setup {
    fn default() -> Self {
        desk_setup()
    }
}

/// The desk-scale defaults used throughout the studies.
pub fn desk_setup() -> Setup {
    Setup {
        corpus: SyntheticCorpusSpec::default(),
        queries: QuerySpec::default(),
        model: ModelConfig::default(),
        model_seed: 7,
        augment: AugmentationConfig {
            anchor_len: 16,
            passage_len: 48,
            ..Default::default()
        },
        pretrain: LmConfig {
            epochs: 20,
            ..Default::default()
        },
        train: TrainConfig {
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 0.01,
            ..Default::default()
        },
        eval: EvalConfig::default(),
        mining_seed: 11,
    }
}

/// Corpus, vocabulary, negatives and evaluation queries of a setup.
/// Training runs over `train_store`, the corpus plus any extra unlabeled
/// documents; evaluation searches the corpus alone.
pub struct Prepared {
    pub corpus: SyntheticCorpus,
    pub train_store: DocumentStore,
    pub vocab: Vocabulary,
    pub negatives: Vec<NegativesEntry>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
}

impl Setup {
    pub fn prepare(&self) -> Result<Prepared> {
        self.prepare_with(&[], &[])
    }

    /// Like [`Setup::prepare`], with `extra_vocab` stores folded into the
    /// vocabulary and `extra_train` documents added to the training corpus.
    pub fn prepare_with(&self, extra_vocab: &[&DocumentStore], extra_train: &[&DocumentStore]) -> Result<Prepared> {
        let corpus = generate_synthetic_corpus(&self.corpus)?;
        let mut train_stores = vec![&corpus.store];
        train_stores.extend_from_slice(extra_train);
        let train_store = concat_stores(&train_stores)?;
        let mut stores = vec![&train_store];
        stores.extend_from_slice(extra_vocab);
        let vocab = build_vocab(&stores)?;
        let k = self.train.k.max(1).min(train_store.len() - 1);
        let negatives = mine_negatives(&train_store, &vocab, k, self.augment.passage_len, self.mining_seed)?;
        let q = &self.queries;
        let (queries, qrels) = if q.held_out {
            let per_topic = q.per_doc * self.corpus.docs_per_topic;
            held_out_queries(&corpus, &self.corpus, per_topic, q.query_len, q.seed)?
        } else {
            crop_queries(&corpus, q.per_doc, q.query_len, q.seed)?
        };
        Ok(Prepared {
            corpus,
            train_store,
            vocab,
            negatives,
            queries,
            qrels,
        })
    }

    pub fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.len(),
            ..self.model.clone()
        }
    }

    /// Token budget of an evaluation input.
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            query_prefix: self.augment.query_prefix.clone(),
            passage_prefix: self.augment.passage_prefix.clone(),
            ..self.eval.clone()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub setup: Setup,
    pub train: TrainReport,
    pub eval: EvalReport,
    pub seconds: f64,
}

/// A trained model with its run report.
pub struct TrainedRun {
    pub model: Model<f32>,
    pub report: RunReport,
    pub evaluation: Evaluation,
}

/// Random-init model of a setup.
pub fn init_model(setup: &Setup, vocab: &Vocabulary) -> Result<Model<f32>> {
    Model::new(setup.model_config(vocab), setup.model_seed)
}

/// The starting point of contrastive training: the random-init model after
/// the setup's LM pretraining (none when `pretrain.epochs` is 0).
pub fn base_model(setup: &Setup, prep: &Prepared) -> Result<Model<f32>> {
    let mut model = init_model(setup, &prep.vocab)?;
    if setup.pretrain.epochs > 0 {
        pretrain_lm(&mut model, &prep.train_store, &prep.vocab, &setup.pretrain)?;
    }
    Ok(model)
}

/// Evaluate the untrained model.
pub fn evaluate_init(setup: &Setup, prep: &Prepared) -> Result<Evaluation> {
    let model = init_model(setup, &prep.vocab)?;
    evaluate(&model, &prep.corpus.store, &prep.vocab, &prep.queries, &prep.qrels, &setup.eval_config())
}

/// Train a fresh model on the setup's corpus and evaluate it.
pub fn run_setup(label: &str, setup: &Setup, prep: &Prepared, outputs: &TrainOutputs) -> Result<TrainedRun> {
    let start = Instant::now();
    let mut model = base_model(setup, prep)?;
    let train_report = train(
        &mut model,
        &prep.train_store,
        &prep.vocab,
        &prep.negatives,
        &setup.augment,
        &setup.train,
        outputs,
    )?;
    let mut cfg = setup.eval_config();
    cfg.tag = label.to_string();
    let evaluation = evaluate(&model, &prep.corpus.store, &prep.vocab, &prep.queries, &prep.qrels, &cfg)?;
    let report = RunReport {
        label: label.to_string(),
        setup: setup.clone(),
        train: train_report,
        eval: evaluation.report.clone(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(TrainedRun {
        model,
        report,
        evaluation,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedReport {
    pub experiment: String,
    pub note: String,
    pub baseline: Option<EvalReport>,
    pub runs: Vec<RunReport>,
}

impl PairedReport {
    pub fn run(&self, label: &str) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.label == label)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("report.json");
        std::fs::write(&p, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&p, e))?;
        for r in &self.runs {
            r.train.write_csv(dir.join(format!("{}_loss.csv", r.label)))?;
        }
        Ok(())
    }
}

/// Twin runs with `K` hard negatives and with none, everything else equal.
pub fn run_ablation_hard_negatives(setup: &Setup) -> Result<PairedReport> {
    let prep = setup.prepare()?;
    let with = Setup {
        train: TrainConfig { k: setup.train.k.max(1), ..setup.train.clone() },
        ..setup.clone()
    };
    let without = Setup {
        train: TrainConfig { k: 0, ..setup.train.clone() },
        ..setup.clone()
    };
    let a = run_setup(&format!("k{}", with.train.k), &with, &prep, &TrainOutputs::default())?;
    let b = run_setup("k0", &without, &prep, &TrainOutputs::default())?;
    Ok(PairedReport {
        experiment: "ablate-negatives".into(),
        note: "identical seeds, corpus and model; only the number of mined negatives differs".into(),
        baseline: Some(evaluate_init(setup, &prep)?.report),
        runs: vec![a.report, b.report],
    })
}

/// Twin runs with crop and dropout augmentation, same seeds.
pub fn run_augmentation_comparison(setup: &Setup) -> Result<PairedReport> {
    let prep = setup.prepare()?;
    let crop = Setup {
        augment: AugmentationConfig { mode: AugMode::Crop, ..setup.augment.clone() },
        ..setup.clone()
    };
    let dropout = Setup {
        augment: AugmentationConfig { mode: AugMode::Dropout, ..setup.augment.clone() },
        ..setup.clone()
    };
    let a = run_setup("crop", &crop, &prep, &TrainOutputs::default())?;
    let b = run_setup("dropout", &dropout, &prep, &TrainOutputs::default())?;
    let note = if dropout.augment.is_degenerate() {
        "dropout_p = 0: dropout views are identical, the run is degenerate"
    } else {
        "identical seeds; only the positive construction differs"
    };
    Ok(PairedReport {
        experiment: "compare-aug".into(),
        note: note.into(),
        baseline: Some(evaluate_init(setup, &prep)?.report),
        runs: vec![a.report, b.report],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Setup {
        let mut s = desk_setup();
        s.corpus = SyntheticCorpusSpec { n_topics: 3, docs_per_topic: 4, doc_len: 20, ..Default::default() };
        s.model = ModelConfig { d_model: 16, n_heads: 2, n_layers: 1, d_ff: 32, max_context: 64, ..Default::default() };
        s.train = TrainConfig { k: 2, batch_size: 4, lr: 1e-2, ..Default::default() };
        s.augment.anchor_len = 6;
        s.augment.passage_len = 24;
        s.queries.query_len = 6;
        s
    }

    #[test]
    fn run_is_deterministic() {
        let s = small();
        let prep = s.prepare().unwrap();
        let a = run_setup("a", &s, &prep, &TrainOutputs::default()).unwrap();
        let b = run_setup("a", &s, &prep, &TrainOutputs::default()).unwrap();
        assert_eq!(a.report.train.losses(), b.report.train.losses());
        assert_eq!(a.evaluation.run, b.evaluation.run);
        assert_eq!(a.report.train.steps.len(), 3);
    }

    #[test]
    fn setup_toml_roundtrip() {
        let s = desk_setup();
        let text = toml::to_string(&s).unwrap();
        let back: Setup = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert!(toml::from_str::<Setup>("bogus = 1").is_err());
    }
}

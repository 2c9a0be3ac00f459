//! Unsupervised contrastive training: InfoNCE over crop pairs, in-batch
//! positives and mined hard negatives, optimized with AdamW.

mod adamw;
mod check;
mod loss;
mod pretrain;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugMode, AugmentationConfig, PairBuilder, TrainingPair};
use crate::corpus::{DocumentStore, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{checkpoint, is_gain, Bound, ForwardMode, LoraConfig, Model, Trainable};
use crate::sparse::NegativesEntry;
use crate::tensor::{Real, Tape, Tensor, Var};

pub use adamw::{clip_grad_norm, global_norm, AdamW, AdamWConfig, ParamUpdate};
pub use check::{pipeline_grad_check, tiny_check_model};
pub use pretrain::{pretrain_lm, LmConfig};
pub use loss::{info_nce, info_nce_from_similarities, info_nce_loss, scope_mask, ContrastiveBatch, NegativesScope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Softmax temperature.
    pub tau: f64,
    pub batch_size: usize,
    /// Hard negatives per anchor; overrides the augmentation setting.
    pub k: usize,
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Train LoRA adapters only, base weights frozen.
    pub use_lora: bool,
    pub lora: LoraConfig,
    pub grad_clip: Option<f64>,
    /// Linear warmup length in steps; 0 disables warmup.
    pub warmup_steps: usize,
    pub negatives_scope: NegativesScope,
    /// Stop after this many steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            batch_size: 64,
            k: 7,
            lr: 1e-4,
            epochs: 1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            use_lora: false,
            lora: LoraConfig::default(),
            grad_clip: None,
            warmup_steps: 0,
            negatives_scope: NegativesScope::Batch,
            max_steps: None,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be ≥ 1".into());
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return fail(format!("bad lr {} / weight_decay {}", self.lr, self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return fail("betas must lie in [0,1) and eps must be positive".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return fail("grad_clip must be positive".into());
        }
        if self.use_lora {
            self.lora.validate()?;
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Learning rate at 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub trainable_params: usize,
    /// Set when the positive view is an exact copy of the anchor.
    pub degenerate: bool,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let io = |e| Error::io(path, e);
        writeln!(w, "step,loss,lr,seconds").map_err(io)?;
        for s in &self.steps {
            writeln!(w, "{},{},{},{:.3}", s.step, s.loss, s.lr, s.seconds).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Where the loop writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub metrics_csv: Option<PathBuf>,
}

/// Embed anchors, positives and negatives of a batch on one tape and return
/// the InfoNCE loss. Each sequence gets its own dropout seed from `rng`.
pub fn batch_loss<'t, T: Real>(
    bound: &Bound<'t, T>,
    batch: &[TrainingPair],
    k: usize,
    tau: f64,
    scope: NegativesScope,
    dropout_p: f64,
    rng: &mut impl Rng,
) -> Result<Var<'t, T>> {
    let tape = bound.tape();
    let mut embed = |seq| {
        let mode = ForwardMode::Train {
            dropout_p,
            seed: rng.random(),
        };
        bound.embed_eos(seq, mode)
    };
    let mut anchors = Vec::with_capacity(batch.len());
    let mut positives = Vec::with_capacity(batch.len());
    let mut negatives = Vec::with_capacity(batch.len() * k);
    for pair in batch {
        if pair.negatives.len() != k {
            return Err(Error::InvalidInput(format!(
                "pair from {:?} has {} negatives, expected {k}",
                pair.source_id,
                pair.negatives.len()
            )));
        }
        anchors.push(embed(&pair.anchor)?);
        positives.push(embed(&pair.positive)?);
        for g in &pair.negatives {
            negatives.push(embed(g)?);
        }
    }
    let a = tape.concat_rows(&anchors)?;
    let p = tape.concat_rows(&positives)?;
    let g = if k > 0 { Some(tape.concat_rows(&negatives)?) } else { None };
    info_nce(a, p, g, k, tau, scope)
}

/// Gradients of every trainable parameter, by name, in canonical order.
fn collect_grads<T: Real>(bound: &Bound<'_, T>, trainable: Trainable, loss: Var<'_, T>) -> Result<Vec<(String, Tensor<T>)>> {
    let grads = bound.tape().backward(loss)?;
    let pick = |name: String, v: &Var<'_, T>| {
        let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()));
        (name, g)
    };
    let mut out = Vec::new();
    if trainable == Trainable::All {
        out.extend(bound.weights.named().into_iter().map(|(n, v)| pick(n, v)));
    }
    if trainable != Trainable::Nothing {
        if let Some(l) = &bound.lora {
            out.extend(l.named().into_iter().map(|(n, v)| pick(n, v)));
        }
    }
    Ok(out)
}

fn apply_update<T: Real>(
    model: &mut Model<T>,
    trainable: Trainable,
    grads: &[(String, Tensor<T>)],
    opt: &mut AdamW<T>,
    lr: f64,
) -> Result<()> {
    let mut slots: Vec<(String, &mut Tensor<T>)> = Vec::new();
    if trainable == Trainable::All {
        slots.extend(model.weights.named_mut());
    }
    if let Some(l) = model.lora.as_mut() {
        slots.extend(l.named_mut());
    }
    let mut updates = Vec::with_capacity(grads.len());
    for (name, value) in slots.iter_mut() {
        if let Some((_, g)) = grads.iter().find(|(n, _)| n == name) {
            updates.push(ParamUpdate {
                name,
                decay: !is_gain(name),
                value,
                grad: g,
            });
        }
    }
    opt.step(&mut updates, lr)
}

/// Train `model` in place for `cfg.epochs` epochs over `store`.
///
/// Every step builds one tape holding all `N·(2 + K)` forward passes, so
/// gradients reach the parameters through anchors, positives and negatives.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Real>(
    model: &mut Model<T>,
    store: &DocumentStore,
    vocab: &Vocabulary,
    negatives: &[NegativesEntry],
    aug: &AugmentationConfig,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    cfg.validate()?;
    if store.len() <= cfg.k {
        return Err(Error::InvalidInput(format!(
            "corpus of {} documents cannot supply {} negatives",
            store.len(),
            cfg.k
        )));
    }
    let aug = AugmentationConfig { k: cfg.k, ..aug.clone() };
    let builder = PairBuilder::new(store, vocab, negatives, &aug)?;
    if cfg.use_lora && model.lora.is_none() {
        model.attach_lora(cfg.lora.clone(), cfg.seed ^ 0x4c6f_5241)?;
    }
    let trainable = if cfg.use_lora { Trainable::AdaptersOnly } else { Trainable::All };
    let dropout_p = match aug.mode {
        AugMode::Dropout => aug.dropout_p,
        AugMode::Crop => model.config.dropout_p,
    };
    let degenerate = aug.is_degenerate();
    if degenerate {
        log::warn!("dropout mode with p=0: positives equal anchors, the loss is trivially minimized");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.adamw());
    let start = Instant::now();
    let mut steps = Vec::new();
    'epochs: for epoch in 0..cfg.epochs {
        for batch in builder.epoch_batches(cfg.batch_size, &mut rng)? {
            let step = steps.len() + 1;
            if cfg.max_steps.is_some_and(|m| step > m) {
                break 'epochs;
            }
            let (loss, mut grads) = {
                let tape = Tape::new();
                let bound = model.bind(&tape, trainable);
                let loss = batch_loss(&bound, &batch, cfg.k, cfg.tau, cfg.negatives_scope, dropout_p, &mut rng)?;
                let value = loss.item().to_f64().unwrap_or(f64::NAN);
                if !value.is_finite() {
                    return Err(Error::Numerical(format!("loss is {value} at step {step}")));
                }
                (value, collect_grads(&bound, trainable, loss)?)
            };
            if let Some(max) = cfg.grad_clip {
                let mut ts: Vec<Tensor<T>> = grads.iter().map(|(_, g)| g.clone()).collect();
                clip_grad_norm(&mut ts, max);
                for ((_, g), t) in grads.iter_mut().zip(ts) {
                    *g = t;
                }
            }
            let lr = cfg.lr_at(step);
            apply_update(model, trainable, &grads, &mut opt, lr)?;
            let seconds = start.elapsed().as_secs_f64();
            if cfg.log_every > 0 && (step == 1 || step % cfg.log_every == 0) {
                log::info!("epoch {epoch} step {step} loss {loss:.5} lr {lr:.2e} {seconds:.1}s");
            }
            steps.push(StepLog { step, loss, lr, seconds });
        }
    }

    let report = TrainReport {
        steps,
        trainable_params: model.num_trainable(trainable),
        degenerate,
    };
    if let Some(p) = &outputs.metrics_csv {
        report.write_csv(p)?;
    }
    if let Some(p) = &outputs.checkpoint {
        checkpoint::save(model, p)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::model::ModelConfig;
    use crate::sparse::{Bm25Params, HardNegativeMiner, InvertedIndex};

    fn setup() -> (DocumentStore, Vocabulary, Vec<NegativesEntry>) {
        let topics = [
            "apple banana cherry grape melon",
            "engine piston wheel brake clutch",
            "violin cello piano flute drum",
        ];
        let docs = (0..9).map(|i| {
            let t = topics[i % 3];
            Document::new(format!("d{i}"), format!("{t} {t} item{i} the of and"))
        });
        let store = DocumentStore::from_documents(docs).unwrap();
        let vocab = Vocabulary::build_with(&store, 200, 1, &["query", "passage"]).unwrap();
        let index = InvertedIndex::build(&store, &vocab, Bm25Params::default()).unwrap();
        let negs = HardNegativeMiner::new(&index, &vocab, 2, 32).mine_all(&store, 1).unwrap();
        (store, vocab, negs)
    }

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            max_context: 32,
            ..Default::default()
        }
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 3,
            k: 2,
            lr: 1e-2,
            epochs: 2,
            seed: 5,
            ..Default::default()
        }
    }

    fn aug() -> AugmentationConfig {
        AugmentationConfig {
            anchor_len: 4,
            passage_len: 16,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (store, vocab, negs) = setup();
        let run = || {
            let mut m = Model::<f64>::new(tiny(vocab.len()), 1).unwrap();
            let r = train(&mut m, &store, &vocab, &negs, &aug(), &cfg(), &TrainOutputs::default()).unwrap();
            (r.losses(), m)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn lora_freezes_base() {
        let (store, vocab, negs) = setup();
        let mut m = Model::<f64>::new(tiny(vocab.len()), 1).unwrap();
        let base = m.weights.clone();
        let c = TrainConfig { use_lora: true, lora: LoraConfig { rank: 2, ..Default::default() }, ..cfg() };
        train(&mut m, &store, &vocab, &negs, &aug(), &c, &TrainOutputs::default()).unwrap();
        assert_eq!(m.weights, base);
        let lora = m.lora.as_ref().unwrap();
        assert!(lora.named().iter().any(|(n, t)| n.ends_with(".b") && t.data().iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn writes_csv_and_checkpoint() {
        let (store, vocab, negs) = setup();
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutputs {
            checkpoint: Some(dir.path().join("m.ckpt")),
            metrics_csv: Some(dir.path().join("m.csv")),
        };
        let mut m = Model::<f32>::new(tiny(vocab.len()), 1).unwrap();
        let c = TrainConfig { max_steps: Some(2), ..cfg() };
        let r = train(&mut m, &store, &vocab, &negs, &aug(), &c, &out).unwrap();
        assert_eq!(r.steps.len(), 2);
        let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert!(csv.starts_with("step,loss,lr,seconds\n1,"));
        assert_eq!(checkpoint::load(dir.path().join("m.ckpt")).unwrap(), m);
    }

    #[test]
    fn corpus_must_exceed_k() {
        let (store, vocab, negs) = setup();
        let mut m = Model::<f64>::new(tiny(vocab.len()), 1).unwrap();
        let c = TrainConfig { k: 9, ..cfg() };
        assert!(train(&mut m, &store, &vocab, &negs, &aug(), &c, &TrainOutputs::default()).is_err());
    }

    #[test]
    fn warmup_schedule() {
        let c = TrainConfig { warmup_steps: 10, lr: 1.0, ..Default::default() };
        assert_eq!(c.lr_at(5), 0.5);
        assert_eq!(c.lr_at(20), 1.0);
        assert_eq!(TrainConfig::default().lr_at(1), 1e-4);
    }
}

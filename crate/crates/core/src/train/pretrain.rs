use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_update, AdamW, AdamWConfig, StepLog};
use crate::corpus::{DocumentStore, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, Trainable};
use crate::tensor::{Real, Tape};

/// Next-token pretraining, the stand-in for the pretrained backbone the
/// contrastive stage starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Tokens per training sequence, EOS included.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            epochs: 0,
            batch_size: 8,
            lr: 3e-3,
            weight_decay: 0.01,
            max_len: 256,
            seed: 0,
        }
    }
}

/// Train `model` with the mean next-token loss over every document.
pub fn pretrain_lm<T: Real>(
    model: &mut Model<T>,
    store: &DocumentStore,
    vocab: &Vocabulary,
    cfg: &LmConfig,
) -> Result<Vec<StepLog>> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("LM pretraining needs batch_size ≥ 1 and lr > 0".into()));
    }
    let max_len = cfg.max_len.min(model.config.max_context);
    let seqs: Vec<_> = store
        .iter()
        .map(|d| vocab.tokenize(&d.text).truncate(max_len))
        .filter(|s| s.len() >= 2)
        .collect();
    if seqs.is_empty() {
        return Err(Error::InvalidInput("no document has two tokens to predict from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut log = Vec::new();
    let start = std::time::Instant::now();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grads) = {
                let tape = Tape::new();
                let bound = model.bind(&tape, Trainable::All);
                let losses = chunk
                    .iter()
                    .map(|&i| bound.lm_loss(&seqs[i]))
                    .collect::<Result<Vec<_>>>()?;
                let mut total = losses[0];
                for l in &losses[1..] {
                    total = total.add(*l)?;
                }
                let loss = total.scale(1.0 / losses.len() as f64);
                let value = loss.item().to_f64().unwrap_or(f64::NAN);
                (value, super::collect_grads(&bound, Trainable::All, loss)?)
            };
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("LM loss is {loss}")));
            }
            apply_update(model, Trainable::All, &grads, &mut opt, cfg.lr)?;
            log.push(StepLog {
                step: log.len() + 1,
                loss,
                lr: cfg.lr,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(log)
}

//! Tiny decoder-only transformer: pre-norm residual blocks with rotary
//! multi-head attention and a GELU feed-forward, tied LM head, EOS pooling
//! for sequence embeddings and optional LoRA adapters.

pub mod checkpoint;
mod config;
mod lora;
mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{TokenId, TokenSequence, EOS};
use crate::error::{Error, Result};
use crate::tensor::{cst, Real, Tape, Tensor, Var, NEG_INF};

pub use config::{AttnMode, ModelConfig};
pub use lora::{LoraAdapter, LoraConfig, LoraPair, LoraTarget};
pub use weights::{is_gain, LayerWeights, Weights};

/// Additive attention mask: 0 where attention is allowed, the −∞ sentinel
/// above the diagonal in causal mode.
pub fn causal_mask<T: Real>(n: usize, mode: AttnMode) -> Tensor<T> {
    let mut m = Tensor::zeros(&[n, n]);
    if mode == AttnMode::Causal {
        for i in 0..n {
            for j in i + 1..n {
                m.data_mut()[i * n + j] = cst(NEG_INF);
            }
        }
    }
    m
}

/// `softmax(Q·Kᵀ/√d_k + M)·V`
pub fn attention<'t, T: Real>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    mask: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let dk = q.shape().last().copied().unwrap_or(1);
    q.matmul_t(k)?
        .scale(1.0 / (dk as f64).sqrt())
        .add(mask)?
        .softmax_rows()?
        .matmul(v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    Infer,
    /// Dropout with probability `dropout_p`, masks drawn from `seed`.
    Train { dropout_p: f64, seed: u64 },
}

/// Which parameters receive gradients when bound to a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    All,
    AdaptersOnly,
    Nothing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub weights: Weights<Tensor<T>>,
    pub lora: Option<LoraAdapter<Tensor<T>>>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Weights::init(&config, &mut rng);
        Ok(Self {
            config,
            weights,
            lora: None,
        })
    }

    /// Attach a fresh adapter (B = 0, so outputs are unchanged).
    pub fn attach_lora(&mut self, config: LoraConfig, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.lora = Some(LoraAdapter::new(config, &self.config, &mut rng)?);
        Ok(())
    }

    /// Fold the adapter into the base weights and drop it.
    pub fn merge_lora(&mut self) -> Result<()> {
        if let Some(adapter) = self.lora.take() {
            self.weights = adapter.merged_into(&self.weights)?;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.weights.num_params() + self.lora.as_ref().map_or(0, |l| l.num_params())
    }

    pub fn num_trainable(&self, trainable: Trainable) -> usize {
        match trainable {
            Trainable::All => self.num_params(),
            Trainable::AdaptersOnly => self.lora.as_ref().map_or(0, |l| l.num_params()),
            Trainable::Nothing => 0,
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            weights: self.weights.cast(),
            lora: self.lora.as_ref().map(|l| l.cast()),
        }
    }

    /// Record every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: Trainable) -> Bound<'t, T> {
        let base_grad = trainable == Trainable::All;
        let lora_grad = trainable != Trainable::Nothing;
        let leaf = |grad: bool, t: &Tensor<T>| {
            if grad {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Bound {
            config: self.config.clone(),
            weights: self.weights.map(|_, t| leaf(base_grad, t)),
            lora: self.lora.as_ref().map(|l| l.map(|_, t| leaf(lora_grad, t))),
            tape,
        }
    }

    pub fn hidden_states(&self, seq: &TokenSequence, mode: ForwardMode) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, Trainable::Nothing);
        Ok(bound.hidden_states(seq.ids(), mode)?.value())
    }

    /// Unit-norm EOS embedding in inference mode.
    pub fn embed(&self, seq: &TokenSequence) -> Result<Vec<T>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, Trainable::Nothing);
        Ok(bound.embed_eos(seq, ForwardMode::Infer)?.value().into_data())
    }

    pub fn lm_loss(&self, seq: &TokenSequence) -> Result<T> {
        let tape = Tape::new();
        let bound = self.bind(&tape, Trainable::Nothing);
        Ok(bound.lm_loss(seq)?.item())
    }
}

/// A model whose parameters live on a tape.
pub struct Bound<'t, T: Real> {
    pub config: ModelConfig,
    pub weights: Weights<Var<'t, T>>,
    pub lora: Option<LoraAdapter<Var<'t, T>>>,
    tape: &'t Tape<T>,
}

impl<'t, T: Real> Bound<'t, T> {
    /// Assemble from variables already on `tape`, e.g. inputs of a gradient check.
    pub fn from_parts(
        config: ModelConfig,
        weights: Weights<Var<'t, T>>,
        lora: Option<LoraAdapter<Var<'t, T>>>,
        tape: &'t Tape<T>,
    ) -> Self {
        Self {
            config,
            weights,
            lora,
            tape,
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// `x·W`, plus `(α/r)·(x·A)·B` when an adapter targets this matrix.
    fn project(&self, x: Var<'t, T>, layer: usize, target: LoraTarget) -> Result<Var<'t, T>> {
        let w = *target.weight(&self.weights.layers[layer]);
        let y = x.matmul(w)?;
        match self.lora.as_ref().and_then(|l| l.get(layer, target).map(|p| (l, p))) {
            Some((l, pair)) => y.add(x.matmul(pair.a)?.matmul(pair.b)?.scale(l.config.scaling())),
            None => Ok(y),
        }
    }

    /// Per-head projections, rotary positions on queries and keys,
    /// attention, concatenation and the output projection.
    pub fn multi_head(&self, x: Var<'t, T>, layer: usize, mask: Var<'t, T>, positions: &[usize]) -> Result<Var<'t, T>> {
        let dk = self.config.head_dim();
        let theta = self.config.rope_theta;
        let q = self.project(x, layer, LoraTarget::Q)?;
        let k = self.project(x, layer, LoraTarget::K)?;
        let v = self.project(x, layer, LoraTarget::V)?;
        let heads = (0..self.config.n_heads)
            .map(|h| {
                let cols = h * dk..(h + 1) * dk;
                let qh = q.slice_cols(cols.start, cols.end)?.rope(positions, theta)?;
                let kh = k.slice_cols(cols.start, cols.end)?.rope(positions, theta)?;
                let vh = v.slice_cols(cols.start, cols.end)?;
                attention(qh, kh, vh, mask)
            })
            .collect::<Result<Vec<_>>>()?;
        let concat = if heads.len() == 1 {
            heads[0]
        } else {
            self.tape.concat_cols(&heads)?
        };
        self.project(concat, layer, LoraTarget::O)
    }

    /// Hidden states `[n × d_model]` after the final norm.
    pub fn hidden_states(&self, ids: &[TokenId], mode: ForwardMode) -> Result<Var<'t, T>> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::InvalidInput("cannot run the model on an empty sequence".into()));
        }
        if n > self.config.max_context {
            return Err(Error::ContextOverflow {
                len: n,
                max: self.config.max_context,
            });
        }
        let (p, mut rng) = match mode {
            ForwardMode::Infer => (0.0, ChaCha8Rng::seed_from_u64(0)),
            ForwardMode::Train { dropout_p, seed } => (dropout_p, ChaCha8Rng::seed_from_u64(seed)),
        };
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let mask = self.tape.constant(causal_mask(n, self.config.attn_mode));
        let eps = self.config.norm_eps;

        let mut x = self.tape.embedding(self.weights.tok_emb, &ids)?;
        for (l, lw) in self.weights.layers.iter().enumerate() {
            let h = x.rms_norm(lw.attn_norm, eps)?;
            let a = self.multi_head(h, l, mask, &positions)?.dropout(p, &mut rng);
            x = x.add(a)?;
            let h = x.rms_norm(lw.ffn_norm, eps)?;
            let f = h.matmul(lw.w_in)?.gelu().matmul(lw.w_out)?.dropout(p, &mut rng);
            x = x.add(f)?;
        }
        x.rms_norm(self.weights.final_norm, eps)
    }

    /// L2-normalized hidden state at the final position, `[1 × d_model]`.
    pub fn embed_eos(&self, seq: &TokenSequence, mode: ForwardMode) -> Result<Var<'t, T>> {
        if !seq.ends_with_eos() {
            return Err(Error::InvalidInput("sequence must end in EOS to be pooled".into()));
        }
        let n = seq.len();
        self.hidden_states(seq.ids(), mode)?
            .slice_rows(n - 1, n)?
            .l2_normalize_rows()
    }

    /// Mean next-token negative log-likelihood with the tied LM head.
    pub fn lm_loss(&self, seq: &TokenSequence) -> Result<Var<'t, T>> {
        let n = seq.len();
        if n < 2 {
            return Err(Error::InvalidInput("lm_loss needs at least two tokens".into()));
        }
        let h = self.hidden_states(seq.ids(), ForwardMode::Infer)?;
        let logits = h.slice_rows(0, n - 1)?.matmul_t(self.weights.tok_emb)?;
        let targets: Vec<usize> = seq.ids()[1..].iter().map(|&t| t as usize).collect();
        logits.cross_entropy(&targets)
    }
}

/// Convenience: a token sequence ending in EOS from raw content ids.
pub fn with_eos(mut ids: Vec<TokenId>) -> TokenSequence {
    ids.push(EOS);
    TokenSequence::new(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_context: 16,
            ..Default::default()
        }
    }

    #[test]
    fn mask_shapes() {
        let m1: Tensor<f64> = causal_mask(1, AttnMode::Causal);
        assert_eq!(m1.data(), &[0.0]);
        let m3: Tensor<f64> = causal_mask(3, AttnMode::Causal);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if j <= i { 0.0 } else { NEG_INF };
                assert_eq!(m3.at(i, j), expect);
            }
        }
        let b: Tensor<f64> = causal_mask(3, AttnMode::Bidirectional);
        assert!(b.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_token_attention_returns_value() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap());
        let k = tape.constant(Tensor::from_rows(&[vec![0.5, 2.0]]).unwrap());
        let v = tape.constant(Tensor::from_rows(&[vec![7.0, 9.0]]).unwrap());
        let m = tape.constant(causal_mask(1, AttnMode::Causal));
        assert_eq!(attention(q, k, v, m).unwrap().value().data(), &[7.0, 9.0]);
    }

    #[test]
    fn forward_shape_and_overflow() {
        let model = Model::<f64>::new(tiny(), 1).unwrap();
        let seq = with_eos(vec![5, 6, 7]);
        let h = model.hidden_states(&seq, ForwardMode::Infer).unwrap();
        assert_eq!(h.shape(), &[4, 8]);
        assert!(h.all_finite());
        let long = with_eos(vec![5; 16]);
        assert!(matches!(
            model.hidden_states(&long, ForwardMode::Infer),
            Err(Error::ContextOverflow { len: 17, max: 16 })
        ));
    }

    #[test]
    fn embed_requires_eos_and_is_unit() {
        let model = Model::<f64>::new(tiny(), 2).unwrap();
        assert!(model.embed(&TokenSequence::new(vec![5, 6])).is_err());
        let e = model.embed(&with_eos(vec![5, 6])).unwrap();
        let norm: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(e, model.embed(&with_eos(vec![5, 6])).unwrap());
    }

    #[test]
    fn lm_loss_needs_two_tokens() {
        let model = Model::<f64>::new(tiny(), 3).unwrap();
        assert!(model.lm_loss(&TokenSequence::new(vec![EOS])).is_err());
        assert!(model.lm_loss(&with_eos(vec![4])).unwrap() >= 0.0);
    }

    #[test]
    fn single_head_matches_manual() {
        let cfg = ModelConfig { n_heads: 1, ..tiny() };
        let model = Model::<f64>::new(cfg, 4).unwrap();
        let tape = Tape::new();
        let b = model.bind(&tape, Trainable::Nothing);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = tape.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let mask = tape.constant(causal_mask(3, AttnMode::Causal));
        let out = b.multi_head(x, 0, mask, &[0, 1, 2]).unwrap().value();
        let lw = &b.weights.layers[0];
        let q = x.matmul(lw.wq).unwrap().rope(&[0, 1, 2], 10_000.0).unwrap();
        let k = x.matmul(lw.wk).unwrap().rope(&[0, 1, 2], 10_000.0).unwrap();
        let v = x.matmul(lw.wv).unwrap();
        let manual = attention(q, k, v, mask).unwrap().matmul(lw.wo).unwrap().value();
        assert_eq!(out, manual);
        assert!(rng.random::<f64>() >= 0.0);
    }

    #[test]
    fn dropout_changes_train_forward_only() {
        let cfg = tiny();
        let model = Model::<f64>::new(cfg, 5).unwrap();
        let seq = with_eos(vec![4, 9, 11]);
        let a = model.hidden_states(&seq, ForwardMode::Infer).unwrap();
        let b = model.hidden_states(&seq, ForwardMode::Train { dropout_p: 0.0, seed: 1 }).unwrap();
        let c = model.hidden_states(&seq, ForwardMode::Train { dropout_p: 0.5, seed: 1 }).unwrap();
        let d = model.hidden_states(&seq, ForwardMode::Train { dropout_p: 0.5, seed: 1 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(c, d);
    }
}

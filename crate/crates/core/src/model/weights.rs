use rand::Rng;

use super::ModelConfig;
use crate::tensor::{Real, Tensor};

/// Learnable matrices of one pre-norm decoder block. Attention projections
/// are fused across heads: head `i` owns columns `i·d_k .. (i+1)·d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<P> {
    pub attn_norm: P,
    pub wq: P,
    pub wk: P,
    pub wv: P,
    pub wo: P,
    pub ffn_norm: P,
    pub w_in: P,
    pub w_out: P,
}

/// All parameters of the decoder. The LM head is tied to `tok_emb`.
///
/// Generic over the slot type so the same layout holds tensors, tape
/// variables, optimizer moments or gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<P> {
    pub tok_emb: P,
    pub layers: Vec<LayerWeights<P>>,
    pub final_norm: P,
}

const LAYER_SLOTS: [&str; 8] = ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_in", "w_out"];

impl<P> LayerWeights<P> {
    fn slots(&self) -> [&P; 8] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_in,
            &self.w_out,
        ]
    }

    fn slots_mut(&mut self) -> [&mut P; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_in,
            &mut self.w_out,
        ]
    }
}

impl<P> Weights<P> {
    /// `(name, slot)` in the canonical order used by checkpoints and optimizers.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (slot, p) in LAYER_SLOTS.iter().zip(layer.slots()) {
                out.push((format!("layers.{i}.{slot}"), p));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out = vec![("tok_emb".to_string(), &mut self.tok_emb)];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (slot, p) in LAYER_SLOTS.iter().zip(layer.slots_mut()) {
                out.push((format!("layers.{i}.{slot}"), p));
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> Weights<Q> {
        let tok_emb = f("tok_emb", &self.tok_emb);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut g = |slot: &str, p: &P| f(&format!("layers.{i}.{slot}"), p);
                LayerWeights {
                    attn_norm: g("attn_norm", &l.attn_norm),
                    wq: g("wq", &l.wq),
                    wk: g("wk", &l.wk),
                    wv: g("wv", &l.wv),
                    wo: g("wo", &l.wo),
                    ffn_norm: g("ffn_norm", &l.ffn_norm),
                    w_in: g("w_in", &l.w_in),
                    w_out: g("w_out", &l.w_out),
                }
            })
            .collect();
        let final_norm = f("final_norm", &self.final_norm);
        Weights {
            tok_emb,
            layers,
            final_norm,
        }
    }
}

/// Whether a parameter is a normalization gain (no weight decay).
pub fn is_gain(name: &str) -> bool {
    name.ends_with("_norm")
}

impl<T: Real> Weights<Tensor<T>> {
    /// Gaussian init with standard deviation `init_std`; residual output
    /// projections are scaled down by `sqrt(2·n_layers)`. Gains start at one.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let std = cfg.init_std;
        let resid_std = std / ((2 * cfg.n_layers) as f64).sqrt();
        let ones = || Tensor::full(&[d], T::one());
        let tok_emb = Tensor::randn(&[cfg.vocab_size, d], std, rng);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                attn_norm: ones(),
                wq: Tensor::randn(&[d, d], std, rng),
                wk: Tensor::randn(&[d, d], std, rng),
                wv: Tensor::randn(&[d, d], std, rng),
                wo: Tensor::randn(&[d, d], resid_std, rng),
                ffn_norm: ones(),
                w_in: Tensor::randn(&[d, cfg.d_ff], std, rng),
                w_out: Tensor::randn(&[cfg.d_ff, d], resid_std, rng),
            })
            .collect();
        Self {
            tok_emb,
            layers,
            final_norm: ones(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> Weights<Tensor<U>> {
        self.map(|_, t| t.cast())
    }
}

impl<T: Real> Weights<Tensor<T>> {
    /// All-zero parameters with the shapes `cfg` prescribes.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let z = |s: &[usize]| Tensor::zeros(s);
        Self {
            tok_emb: z(&[cfg.vocab_size, d]),
            layers: (0..cfg.n_layers)
                .map(|_| LayerWeights {
                    attn_norm: z(&[d]),
                    wq: z(&[d, d]),
                    wk: z(&[d, d]),
                    wv: z(&[d, d]),
                    wo: z(&[d, d]),
                    ffn_norm: z(&[d]),
                    w_in: z(&[d, cfg.d_ff]),
                    w_out: z(&[cfg.d_ff, d]),
                })
                .collect(),
            final_norm: z(&[d]),
        }
    }
}

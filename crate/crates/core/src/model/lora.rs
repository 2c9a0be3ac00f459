use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
}

impl LoraTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            LoraTarget::Q => "wq",
            LoraTarget::K => "wk",
            LoraTarget::V => "wv",
            LoraTarget::O => "wo",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "wq" | "q" => Ok(LoraTarget::Q),
            "wk" | "k" => Ok(LoraTarget::K),
            "wv" | "v" => Ok(LoraTarget::V),
            "wo" | "o" => Ok(LoraTarget::O),
            _ => Err(Error::Config(format!("unknown LoRA target {s:?}"))),
        }
    }

    pub(crate) fn weight<P>(self, layer: &super::LayerWeights<P>) -> &P {
        match self {
            LoraTarget::Q => &layer.wq,
            LoraTarget::K => &layer.wk,
            LoraTarget::V => &layer.wv,
            LoraTarget::O => &layer.wo,
        }
    }

    pub(crate) fn weight_mut<P>(self, layer: &mut super::LayerWeights<P>) -> &mut P {
        match self {
            LoraTarget::Q => &mut layer.wq,
            LoraTarget::K => &mut layer.wk,
            LoraTarget::V => &mut layer.wv,
            LoraTarget::O => &mut layer.wo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: vec![LoraTarget::Q, LoraTarget::V],
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be ≥ 1".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target".into()));
        }
        Ok(())
    }

    pub(crate) fn to_kv(&self) -> String {
        let targets: Vec<&str> = self.targets.iter().map(|t| t.as_str()).collect();
        format!(
            "lora_rank={}\nlora_alpha={:?}\nlora_targets={}\n",
            self.rank,
            self.alpha,
            targets.join(",")
        )
    }

    pub(crate) fn set_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Format(format!("bad value {value:?} for {key}"));
        match key {
            "lora_rank" => self.rank = value.parse().map_err(|_| bad())?,
            "lora_alpha" => self.alpha = value.parse().map_err(|_| bad())?,
            "lora_targets" => {
                self.targets = value.split(',').map(LoraTarget::parse).collect::<Result<_>>()?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Low-rank update `A·B` for one weight matrix, `A: d_in×r`, `B: r×d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<P> {
    pub a: P,
    pub b: P,
}

/// Adapters for every layer; `layers[i]` lists `(target, pair)` in config order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<P> {
    pub config: LoraConfig,
    pub layers: Vec<Vec<(LoraTarget, LoraPair<P>)>>,
}

impl<P> LoraAdapter<P> {
    pub fn get(&self, layer: usize, target: LoraTarget) -> Option<&LoraPair<P>> {
        self.layers
            .get(layer)?
            .iter()
            .find(|(t, _)| *t == target)
            .map(|(_, p)| p)
    }

    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (t, pair) in layer {
                out.push((format!("lora.layers.{i}.{}.a", t.as_str()), &pair.a));
                out.push((format!("lora.layers.{i}.{}.b", t.as_str()), &pair.b));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (t, pair) in layer {
                out.push((format!("lora.layers.{i}.{}.a", t.as_str()), &mut pair.a));
                out.push((format!("lora.layers.{i}.{}.b", t.as_str()), &mut pair.b));
            }
        }
        out
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> LoraAdapter<Q> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                layer
                    .iter()
                    .map(|(t, pair)| {
                        let a = f(&format!("lora.layers.{i}.{}.a", t.as_str()), &pair.a);
                        let b = f(&format!("lora.layers.{i}.{}.b", t.as_str()), &pair.b);
                        (*t, LoraPair { a, b })
                    })
                    .collect()
            })
            .collect();
        LoraAdapter {
            config: self.config.clone(),
            layers,
        }
    }
}

impl<T: Real> LoraAdapter<Tensor<T>> {
    /// Fresh adapter: `A ~ N(0, 1/d_in)`, `B = 0`, so the adapted model
    /// starts out identical to the base model.
    pub fn new(config: LoraConfig, model: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = model.d_model;
        let r = config.rank;
        let layers = (0..model.n_layers)
            .map(|_| {
                config
                    .targets
                    .iter()
                    .map(|&t| {
                        let pair = LoraPair {
                            a: Tensor::randn(&[d, r], 1.0 / (d as f64).sqrt(), rng),
                            b: Tensor::zeros(&[r, d]),
                        };
                        (t, pair)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// All-zero adapter with the shapes `config` prescribes.
    pub fn zeros(config: LoraConfig, model: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, r) = (model.d_model, config.rank);
        let layers = (0..model.n_layers)
            .map(|_| {
                config
                    .targets
                    .iter()
                    .map(|&t| {
                        let pair = LoraPair {
                            a: Tensor::zeros(&[d, r]),
                            b: Tensor::zeros(&[r, d]),
                        };
                        (t, pair)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn check_shapes(&self, weights: &Weights<Tensor<T>>) -> Result<()> {
        if self.layers.len() != weights.layers.len() {
            return Err(Error::Shape(format!(
                "adapter has {} layers, model has {}",
                self.layers.len(),
                weights.layers.len()
            )));
        }
        for (i, (adapter, layer)) in self.layers.iter().zip(&weights.layers).enumerate() {
            for (t, pair) in adapter {
                let w = t.weight(layer);
                let (din, dout) = w.dims2()?;
                let (ar, ac) = pair.a.dims2()?;
                let (br, bc) = pair.b.dims2()?;
                if ar != din || bc != dout || ac != br {
                    return Err(Error::Shape(format!(
                        "layer {i} {}: W {:?}, A {:?}, B {:?}",
                        t.as_str(),
                        w.shape(),
                        pair.a.shape(),
                        pair.b.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    /// `W + (α/r)·A·B` for every adapted matrix, leaving the input untouched.
    pub fn merged_into(&self, weights: &Weights<Tensor<T>>) -> Result<Weights<Tensor<T>>> {
        self.check_shapes(weights)?;
        let mut out = weights.clone();
        let s = T::from_f64_lossy(self.config.scaling());
        for (adapter, layer) in self.layers.iter().zip(out.layers.iter_mut()) {
            for (t, pair) in adapter {
                let delta = pair.a.matmul(&pair.b)?;
                let w = t.weight_mut(layer);
                for (w, d) in w.data_mut().iter_mut().zip(delta.data()) {
                    *w += s * *d;
                }
            }
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> LoraAdapter<Tensor<U>> {
        self.map(|_, t| t.cast())
    }
}

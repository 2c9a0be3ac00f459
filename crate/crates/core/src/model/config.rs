use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AttnMode {
    Causal,
    Bidirectional,
}

impl AttnMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttnMode::Causal => "causal",
            AttnMode::Bidirectional => "bidirectional",
        }
    }
}

impl std::str::FromStr for AttnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(AttnMode::Causal),
            "bidirectional" => Ok(AttnMode::Bidirectional),
            other => Err(Error::Config(format!("unknown attention mode {other:?}"))),
        }
    }
}

/// Shape and hyperparameters of the decoder. Defaults are the desk-scale
/// configuration: 2 layers, 4 heads, width 64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub rope_theta: f64,
    pub attn_mode: AttnMode,
    pub dropout_p: f64,
    pub init_std: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8192,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_context: 256,
            rope_theta: 10_000.0,
            attn_mode: AttnMode::Causal,
            dropout_p: 0.0,
            init_std: 0.02,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < crate::corpus::NUM_RESERVED {
            return fail(format!("vocab_size {} cannot hold the reserved tokens", self.vocab_size));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head_dim {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.max_context < 2 {
            return fail("max_context must be ≥ 2".into());
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return fail("n_layers and d_ff must be positive".into());
        }
        if !(self.rope_theta > 1.0) {
            return fail(format!("rope_theta must exceed 1, got {}", self.rope_theta));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p must lie in [0,1), got {}", self.dropout_p));
        }
        Ok(())
    }

    /// `key=value` lines, the text block of a checkpoint.
    pub fn to_kv(&self) -> String {
        format!(
            "vocab_size={}\nd_model={}\nn_heads={}\nn_layers={}\nd_ff={}\nmax_context={}\nrope_theta={:?}\nattn_mode={}\ndropout_p={:?}\ninit_std={:?}\nnorm_eps={:?}\n",
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.d_ff,
            self.max_context,
            self.rope_theta,
            self.attn_mode.as_str(),
            self.dropout_p,
            self.init_std,
            self.norm_eps,
        )
    }

    /// Apply one `key=value` entry; returns `false` for keys this type does
    /// not own.
    pub(crate) fn set_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Format(format!("bad value {v:?} for {k}")))
        }
        match key {
            "vocab_size" => self.vocab_size = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "n_layers" => self.n_layers = num(key, value)?,
            "d_ff" => self.d_ff = num(key, value)?,
            "max_context" => self.max_context = num(key, value)?,
            "rope_theta" => self.rope_theta = num(key, value)?,
            "attn_mode" => self.attn_mode = value.parse()?,
            "dropout_p" => self.dropout_p = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            "norm_eps" => self.norm_eps = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(ModelConfig::default().head_dim(), 16);
    }

    #[test]
    fn odd_head_dim_rejected() {
        let c = ModelConfig { d_model: 12, n_heads: 4, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { d_model: 10, n_heads: 4, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_roundtrip() {
        let c = ModelConfig { rope_theta: 500_000.0, attn_mode: AttnMode::Bidirectional, ..Default::default() };
        let mut back = ModelConfig::default();
        for line in c.to_kv().lines() {
            let (k, v) = line.split_once('=').unwrap();
            assert!(back.set_kv(k, v).unwrap());
        }
        assert_eq!(back, c);
    }
}

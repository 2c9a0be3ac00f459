use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{info_nce, NegativesScope};
use crate::corpus::{TokenSequence, EOS, NUM_RESERVED};
use crate::error::{Error, Result};
use crate::model::{Bound, ForwardMode, Model, ModelConfig};
use crate::tensor::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use crate::tensor::Tensor;

/// A model small enough to check every parameter entry, with weights large
/// enough that gradients stand well above finite-difference noise.
pub fn tiny_check_model(seed: u64) -> Result<Model<f64>> {
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 16,
        max_context: 16,
        init_std: 0.3,
        ..Default::default()
    };
    Model::new(cfg, seed)
}

/// Finite-difference check of model → EOS embedding → InfoNCE on a batch of
/// two random (anchor, positive) pairs, with respect to every base weight.
pub fn pipeline_grad_check(model: &Model<f64>, tau: f64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = model.config.clone();
    if cfg.vocab_size <= NUM_RESERVED {
        return Err(Error::Config("vocabulary has no ordinary tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let max_len = cfg.max_context.clamp(2, 8);
    let seqs: Vec<TokenSequence> = (0..4)
        .map(|_| {
            let len = rng.random_range(1..max_len);
            let mut ids: Vec<u32> = (0..len)
                .map(|_| rng.random_range(NUM_RESERVED..cfg.vocab_size) as u32)
                .collect();
            ids.push(EOS);
            TokenSequence::new(ids)
        })
        .collect();
    let named = model.weights.named();
    let names: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
    let inputs: Vec<Tensor<f64>> = named.iter().map(|(_, t)| (*t).clone()).collect();
    check_gradients(&names, &inputs, opts, |tape, vars| {
        let mut next = vars.iter().copied();
        let weights = model.weights.map(|_, _| next.next().expect("one var per weight"));
        let bound = Bound::from_parts(cfg.clone(), weights, None, tape);
        let e = seqs
            .iter()
            .map(|s| bound.embed_eos(s, ForwardMode::Infer))
            .collect::<Result<Vec<_>>>()?;
        let a = tape.concat_rows(&e[0..2])?;
        let p = tape.concat_rows(&e[2..4])?;
        info_nce(a, p, None, 0, tau, NegativesScope::Batch)
    })
}


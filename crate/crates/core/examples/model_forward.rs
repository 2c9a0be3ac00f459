//! Run the decoder: hidden states, the causal prefix property, EOS-pooled
//! embeddings and a LoRA adapter merged into the base weights.

use llm2ir::corpus::TokenSequence;
use llm2ir::model::{with_eos, ForwardMode, LoraConfig, Model, ModelConfig};
use llm2ir::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> llm2ir::Result<()> {
    let cfg = ModelConfig { vocab_size: 50, d_model: 32, n_heads: 4, n_layers: 2, d_ff: 64, max_context: 32, ..Default::default() };
    let mut model = Model::<f64>::new(cfg, 0)?;
    println!("{} parameters", model.num_params());

    let a = TokenSequence::new(vec![10, 11, 12, 13, 14]);
    let b = TokenSequence::new(vec![10, 11, 12, 40, 41]);
    let ha = model.hidden_states(&a, ForwardMode::Infer)?;
    let hb = model.hidden_states(&b, ForwardMode::Infer)?;
    let same_prefix = (0..3).all(|i| ha.row(i) == hb.row(i));
    println!("first three positions identical under causal attention: {same_prefix}");

    let e = model.embed(&with_eos(vec![10, 11, 12]))?;
    println!("embedding norm {:.6}", e.iter().map(|x| x * x).sum::<f64>().sqrt());

    model.attach_lora(LoraConfig::default(), 1)?;
    // B starts at zero; give it values so the adapter changes the output
    for (_, pair) in model.lora.as_mut().unwrap().layers.iter_mut().flatten() {
        pair.b = Tensor::randn(pair.b.shape(), 0.05, &mut ChaCha8Rng::seed_from_u64(2));
    }
    let before = model.embed(&with_eos(vec![20, 21]))?;
    model.merge_lora()?;
    let after = model.embed(&with_eos(vec![20, 21]))?;
    let diff = before.iter().zip(&after).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!("adapter vs merged max difference {diff:.2e}");
    Ok(())
}

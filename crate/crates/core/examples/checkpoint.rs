//! Save a model, load it back and compare fingerprints.

use llm2ir::model::{checkpoint, Model, ModelConfig};

fn main() -> llm2ir::Result<()> {
    let cfg = ModelConfig { vocab_size: 100, d_model: 16, n_heads: 2, n_layers: 1, d_ff: 32, max_context: 32, ..Default::default() };
    let model = Model::<f32>::new(cfg, 42)?;
    let dir = std::env::temp_dir().join("llm2ir-checkpoint-example");
    let path = dir.join("model.ckpt");
    checkpoint::save(&model, &path)?;
    let back = checkpoint::load(&path)?;
    println!("{} bytes written to {}", std::fs::metadata(&path).map_or(0, |m| m.len()), path.display());
    println!("fingerprint   {}", checkpoint::fingerprint(&model));
    println!("round trip    {}", checkpoint::fingerprint(&back));
    println!("identical: {}", back.weights == model.weights);
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

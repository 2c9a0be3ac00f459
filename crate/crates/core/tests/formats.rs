use llm2ir::corpus::TokenSequence;
use llm2ir::dense::{RetrievalRun};
use llm2ir::model::{checkpoint, with_eos, ForwardMode, LoraConfig, Model, ModelConfig};
use llm2ir::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig { vocab_size: 40, d_model: 16, n_heads: 2, n_layers: 2, d_ff: 32, max_context: 32, ..Default::default() }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::<f32>::new(small(), 3).unwrap();
    model.attach_lora(LoraConfig::default(), 4).unwrap();
    let path = dir.path().join("nested/m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(checkpoint::to_bytes(&back), std::fs::read(&path).unwrap());
}

#[test]
fn lora_adapter_and_merged_weights_agree() {
    let mut model = Model::<f64>::new(small(), 5).unwrap();
    model.attach_lora(LoraConfig::default(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (_, pair) in model.lora.as_mut().unwrap().layers.iter_mut().flatten() {
        pair.b = Tensor::randn(pair.b.shape(), 0.1, &mut rng);
    }
    let seq = with_eos(vec![5, 9, 11, 30, 7]);
    let before = model.hidden_states(&seq, ForwardMode::Infer).unwrap();
    let mut merged = model.clone();
    merged.merge_lora().unwrap();
    assert!(merged.lora.is_none());
    let after = merged.hidden_states(&seq, ForwardMode::Infer).unwrap();
    let diff = before.data().iter().zip(after.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-10, "{diff}");
    let base = Model { lora: None, ..model.clone() }.hidden_states(&seq, ForwardMode::Infer).unwrap();
    assert_ne!(base, before);
}

#[test]
fn trec_run_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = RetrievalRun::new();
    run.insert("q1", vec![("a".into(), 0.5), ("b".into(), 0.25)]);
    run.insert("q2", vec![("c".into(), -1.0)]);
    let p = dir.path().join("run.trec");
    run.write_trec(&p, "t").unwrap();
    assert_eq!(RetrievalRun::read_trec(&p).unwrap(), run);
}

#[test]
fn context_overflow_is_an_error() {
    let model = Model::<f32>::new(small(), 0).unwrap();
    let long = TokenSequence::new(vec![5; 33]);
    assert!(model.hidden_states(&long, ForwardMode::Infer).is_err());
}

use llm2ir::model::{attention, causal_mask, AttnMode};
use llm2ir::tensor::gradcheck::{check_gradients, primitive_checks, GradCheckOptions};
use llm2ir::tensor::Tensor;
use llm2ir::train::{pipeline_grad_check, tiny_check_model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..3 {
        for (name, r) in primitive_checks(GradCheckOptions { seed, ..Default::default() }).unwrap() {
            assert!(r.passes(1e-5), "{name}: {:?}", r.inputs);
        }
    }
}

#[test]
fn masked_attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[5, 4], 1.0, &mut rng)).collect();
    let r = check_gradients(&["q", "k", "v"], &inputs, GradCheckOptions::default(), |tape, v| {
        let mask = tape.constant(causal_mask::<f64>(5, AttnMode::Causal));
        Ok(attention(v[0], v[1], v[2], mask)?.sum())
    })
    .unwrap();
    assert!(r.passes(1e-5), "{:?}", r.inputs);
}

#[test]
fn model_embedding_and_loss_compose_correctly() {
    for seed in [0, 1] {
        let model = tiny_check_model(seed).unwrap();
        let r = pipeline_grad_check(&model, 0.05, GradCheckOptions { seed, ..Default::default() }).unwrap();
        assert!(r.passes(1e-5), "max rel error {}", r.max_rel_error());
        assert!(r.inputs.iter().map(|c| c.checked).sum::<usize>() == model.num_params());
    }
}

//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen entries per input (all if `None`).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: None,
            seed: 0,
        }
    }
}

/// Agreement between analytic and numeric gradients for one input.
#[derive(Debug, Clone, Serialize)]
pub struct InputCheck {
    pub name: String,
    pub checked: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over checked entries.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.inputs.iter().all(|c| c.rel_error < tol)
    }
}

/// Compare gradients of the scalar `f(inputs)` against central differences.
///
/// `f` is rebuilt on a fresh tape for every evaluation, so it must be a pure
/// function of its inputs.
pub fn check_gradients<F>(
    names: &[&str],
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let entries: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => {
                let mut e = sample(&mut rng, n, m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
        for &e in &entries {
            let orig = input.data()[e];
            probe[idx].data_mut()[e] = orig + opts.step;
            let plus = eval(&probe)?;
            probe[idx].data_mut()[e] = orig - opts.step;
            let minus = eval(&probe)?;
            probe[idx].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[idx].data()[e];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
        report.push(InputCheck {
            name: names.get(idx).map_or_else(|| format!("input{idx}"), |s| s.to_string()),
            checked: entries.len(),
            rel_error,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport { inputs: report })
}

/// Reduce `out` to a scalar with fixed weights so every entry gets a
/// distinct upstream gradient.
fn weighted_sum<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = Tensor::randn(&out.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    out.mul(tape.constant(w))
        .map(|v| v.sum())
}

type Primitive = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

/// Every tape primitive with the inputs it is checked on.
fn primitives(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Primitive)> {
    let mut r = |rows, cols| Tensor::<f64>::randn(&[rows, cols], 1.0, rng);
    let positive = {
        let t = r(3, 4);
        t.map(|x| x.abs() + 0.5)
    };
    vec![
        ("add", vec![r(3, 4), r(3, 4)], |_, v| v[0].add(v[1])),
        ("sub", vec![r(3, 4), r(3, 4)], |_, v| v[0].sub(v[1])),
        ("mul", vec![r(3, 4), r(3, 4)], |_, v| v[0].mul(v[1])),
        ("scale", vec![r(3, 4)], |_, v| Ok(v[0].scale(-1.7))),
        ("exp", vec![r(3, 4)], |_, v| Ok(v[0].exp())),
        ("log", vec![positive], |_, v| Ok(v[0].log())),
        ("gelu", vec![r(3, 4)], |_, v| Ok(v[0].gelu())),
        ("matmul", vec![r(3, 4), r(4, 5)], |_, v| v[0].matmul(v[1])),
        ("matmul_t", vec![r(3, 4), r(5, 4)], |_, v| v[0].matmul_t(v[1])),
        ("transpose", vec![r(3, 4)], |_, v| v[0].transpose()),
        ("sum", vec![r(3, 4)], |_, v| Ok(v[0].sum())),
        ("mean", vec![r(3, 4)], |_, v| Ok(v[0].mean())),
        ("softmax_rows", vec![r(3, 5)], |_, v| v[0].softmax_rows()),
        ("slice_rows", vec![r(5, 3)], |_, v| v[0].slice_rows(1, 4)),
        ("slice_cols", vec![r(3, 5)], |_, v| v[0].slice_cols(2, 5)),
        ("concat_rows", vec![r(2, 3), r(1, 3)], |t, v| t.concat_rows(v)),
        ("concat_cols", vec![r(3, 2), r(3, 1)], |t, v| t.concat_cols(v)),
        ("embedding", vec![r(6, 4)], |t, v| t.embedding(v[0], &[4, 0, 4, 2])),
        ("rms_norm", vec![r(3, 4), r(1, 4)], |_, v| v[0].rms_norm(v[1], 1e-6)),
        ("rope", vec![r(4, 6)], |_, v| v[0].rope(&[0, 1, 5, 9], 10_000.0)),
        ("l2_normalize_rows", vec![r(3, 4)], |_, v| v[0].l2_normalize_rows()),
        ("cosine_rows", vec![r(3, 4), r(3, 4)], |_, v| v[0].cosine_rows(v[1])),
        ("cross_entropy", vec![r(3, 5)], |_, v| v[0].cross_entropy(&[1, 4, 0])),
        ("dropout", vec![r(3, 4)], |_, v| Ok(v[0].dropout(0.3, &mut ChaCha8Rng::seed_from_u64(9)))),
    ]
}

/// Finite-difference check of every tape primitive on small random inputs.
pub fn primitive_checks(opts: GradCheckOptions) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    primitives(&mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, op))| {
            let names: Vec<String> = (0..inputs.len()).map(|j| format!("{name}.{j}")).collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let reduce_seed = opts.seed ^ (i as u64 + 1);
            let report = check_gradients(&names, &inputs, opts, |tape, vars| {
                let out = op(tape, vars)?;
                weighted_sum(tape, out, reduce_seed)
            })?;
            Ok((name.to_string(), report))
        })
        .collect()
}

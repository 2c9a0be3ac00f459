use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var, NEG_INF};

/// Which hard negatives enter an anchor's denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum NegativesScope {
    /// The mined negatives of every batch element.
    #[default]
    Batch,
    /// Only the anchor's own mined negatives.
    Own,
}

/// Unit-normalized embeddings of one batch: `anchors` and `positives` are
/// `[N × d]`, `negatives` is `[N·K × d]` with element `i`'s negatives in rows
/// `i·K .. (i+1)·K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch<T> {
    pub anchors: Tensor<T>,
    pub positives: Tensor<T>,
    pub negatives: Tensor<T>,
    pub k: usize,
}

impl<T: Real> ContrastiveBatch<T> {
    pub fn n(&self) -> usize {
        self.anchors.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.anchors.dims2()?;
        let (pn, pd) = self.positives.dims2()?;
        let (gn, gd) = if self.k == 0 { (0, d) } else { self.negatives.dims2()? };
        if pn != n || pd != d || gn != n * self.k || gd != d {
            return Err(Error::Shape(format!(
                "contrastive batch: anchors {:?}, positives {:?}, negatives {:?}, k={}",
                self.anchors.shape(),
                self.positives.shape(),
                self.negatives.shape(),
                self.k
            )));
        }
        for (what, t) in [("anchor", &self.anchors), ("positive", &self.positives), ("negative", &self.negatives)] {
            if t.numel() == 0 {
                continue;
            }
            for i in 0..t.rows() {
                let norm = t.row(i).iter().map(|&x| x * x).sum::<T>().sqrt();
                let dev = (norm - T::one()).abs().to_f64().unwrap_or(f64::INFINITY);
                if dev > 1e-6 {
                    return Err(Error::InvalidInput(format!("{what} row {i} has norm {norm}")));
                }
            }
        }
        Ok(())
    }
}

/// Additive mask over the `[N × (N + N·K)]` logits hiding other elements'
/// negatives; `None` when nothing is hidden.
pub fn scope_mask<T: Real>(n: usize, k: usize, scope: NegativesScope) -> Option<Tensor<T>> {
    if scope == NegativesScope::Batch || k == 0 || n == 1 {
        return None;
    }
    let cols = n + n * k;
    let mut m = Tensor::zeros(&[n, cols]);
    for i in 0..n {
        for j in 0..n {
            if j != i {
                for c in 0..k {
                    m.data_mut()[i * cols + n + j * k + c] = T::from_f64_lossy(NEG_INF);
                }
            }
        }
    }
    Some(m)
}

/// The loss from a similarity matrix `[N × (N + N·K)]`: columns `0..N` hold
/// `sim(aᵢ, p_j)`, the rest `sim(aᵢ, g_{j,k})`. Row `i`'s target is column `i`.
pub fn info_nce_from_similarities<'t, T: Real>(
    sims: Var<'t, T>,
    k: usize,
    tau: f64,
    scope: NegativesScope,
) -> Result<Var<'t, T>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let shape = sims.shape();
    let n = shape.first().copied().unwrap_or(0);
    if shape.len() != 2 || shape[1] != n + n * k || n == 0 {
        return Err(Error::Shape(format!("similarities {shape:?} for k={k}")));
    }
    let mut logits = sims.scale(1.0 / tau);
    if let Some(mask) = scope_mask(n, k, scope) {
        logits = logits.add(sims.tape().constant(mask))?;
    }
    let targets: Vec<usize> = (0..n).collect();
    logits.cross_entropy(&targets)
}

/// InfoNCE over unit embeddings on a tape: cosine similarity is the dot
/// product, so the logits are `[A·Pᵀ | A·Gᵀ] / τ`.
pub fn info_nce<'t, T: Real>(
    anchors: Var<'t, T>,
    positives: Var<'t, T>,
    negatives: Option<Var<'t, T>>,
    k: usize,
    tau: f64,
    scope: NegativesScope,
) -> Result<Var<'t, T>> {
    let tape = anchors.tape();
    let pos = anchors.matmul_t(positives)?;
    let sims = match (negatives, k) {
        (_, 0) => pos,
        (Some(g), _) => tape.concat_cols(&[pos, anchors.matmul_t(g)?])?,
        (None, _) => return Err(Error::Shape(format!("k={k} but no negatives given"))),
    };
    info_nce_from_similarities(sims, k, tau, scope)
}

/// Loss value of a batch of precomputed embeddings.
pub fn info_nce_loss<T: Real>(batch: &ContrastiveBatch<T>, tau: f64, scope: NegativesScope) -> Result<T> {
    batch.validate()?;
    let tape = Tape::new();
    let a = tape.constant(batch.anchors.clone());
    let p = tape.constant(batch.positives.clone());
    let g = (batch.k > 0).then(|| tape.constant(batch.negatives.clone()));
    Ok(info_nce(a, p, g, batch.k, tau, scope)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: usize, d: usize, seed: u64) -> Tensor<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f64>::randn(&[rows, d], 1.0, &mut rng);
        let tape = Tape::new();
        tape.constant(t).l2_normalize_rows().unwrap().value()
    }

    #[test]
    fn single_pair_no_negatives_is_zero() {
        let a = unit_rows(1, 4, 1);
        let b = ContrastiveBatch {
            anchors: a.clone(),
            positives: unit_rows(1, 4, 2),
            negatives: Tensor::zeros(&[0, 4]),
            k: 0,
        };
        assert_eq!(info_nce_loss(&b, 0.05, NegativesScope::Batch).unwrap(), 0.0);
    }

    #[test]
    fn nonpositive_tau_rejected() {
        let b = ContrastiveBatch {
            anchors: unit_rows(1, 4, 1),
            positives: unit_rows(1, 4, 2),
            negatives: Tensor::zeros(&[0, 4]),
            k: 0,
        };
        assert!(info_nce_loss(&b, 0.0, NegativesScope::Batch).is_err());
        assert!(info_nce_loss(&b, -1.0, NegativesScope::Batch).is_err());
    }

    #[test]
    fn own_scope_masks_other_negatives() {
        let m: Tensor<f64> = scope_mask(2, 1, NegativesScope::Own).unwrap();
        assert_eq!(m.row(0), &[0.0, 0.0, 0.0, NEG_INF]);
        assert_eq!(m.row(1), &[0.0, 0.0, NEG_INF, 0.0]);
        assert!(scope_mask::<f64>(2, 1, NegativesScope::Batch).is_none());
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let b = ContrastiveBatch {
            anchors: Tensor::full(&[1, 2], 1.0),
            positives: unit_rows(1, 2, 2),
            negatives: Tensor::zeros(&[0, 2]),
            k: 0,
        };
        assert!(info_nce_loss(&b, 0.05, NegativesScope::Batch).is_err());
    }
}

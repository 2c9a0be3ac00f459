use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// A parameter handed to the optimizer: its name, whether weight decay
/// applies, the value and its gradient.
pub struct ParamUpdate<'a, T> {
    pub name: &'a str,
    pub decay: bool,
    pub value: &'a mut Tensor<T>,
    pub grad: &'a Tensor<T>,
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: HashMap<String, Tensor<T>>,
    v: HashMap<String, Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.v.get(name)
    }

    /// One update at learning rate `lr`. Every gradient is checked before any
    /// parameter moves, so a NaN leaves the model untouched.
    pub fn step(&mut self, params: &mut [ParamUpdate<'_, T>], lr: f64) -> Result<()> {
        for p in params.iter() {
            if p.grad.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {} of shape {:?}",
                    p.grad.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            if !p.grad.all_finite() {
                return Err(Error::NonFiniteGradient(p.name.to_string()));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(c.eps);
        for p in params.iter_mut() {
            let shape = p.value.shape().to_vec();
            let m = self.m.entry(p.name.to_string()).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(p.name.to_string()).or_insert_with(|| Tensor::zeros(&shape));
            let shrink = T::from_f64_lossy(if p.decay { 1.0 - lr * c.weight_decay } else { 1.0 });
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                *w = *w * shrink - step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a set of gradients.
pub fn global_norm<T: Real>(grads: &[&Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(&grads.iter().collect::<Vec<_>>());
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, w: &mut Tensor<f64>, g: &Tensor<f64>, opt: &mut AdamW<f64>, lr: f64) -> Result<()> {
        opt.step(
            &mut [ParamUpdate {
                name,
                decay: true,
                value: w,
                grad: g,
            }],
            lr,
        )
    }

    #[test]
    fn zero_gradient_fixed_point_without_decay() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut w = Tensor::from_rows(&[vec![0.3, -2.0]]).unwrap();
        let before = w.clone();
        one("w", &mut w, &Tensor::zeros(&[1, 2]), &mut opt, 0.1).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn zero_gradient_decay_shrinks() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..Default::default() });
        let mut w = Tensor::from_rows(&[vec![0.3, -2.0]]).unwrap();
        one("w", &mut w, &Tensor::zeros(&[1, 2]), &mut opt, 0.5).unwrap();
        let f = 1.0 - 0.5 * 0.1;
        assert!((w.data()[0] - 0.3 * f).abs() < 1e-15);
        assert!((w.data()[1] + 2.0 * f).abs() < 1e-15);
    }

    #[test]
    fn quadratic_converges() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let mut w = Tensor::scalar(1.0);
        let mut steps = None;
        for s in 1..=500 {
            let g = Tensor::scalar(2.0 * w.item());
            one("w", &mut w, &g, &mut opt, 0.05).unwrap();
            if w.item().abs() < 1e-3 {
                steps = Some(s);
                break;
            }
        }
        assert!(steps.is_some(), "w = {}", w.item());
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut w = Tensor::scalar(1.0);
        let err = one("layers.0.wq", &mut w, &Tensor::scalar(f64::NAN), &mut opt, 0.1).unwrap_err();
        assert!(err.to_string().contains("layers.0.wq"));
        assert_eq!(w.item(), 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g.iter().collect::<Vec<_>>()) - 1.0).abs() < 1e-12);
    }
}

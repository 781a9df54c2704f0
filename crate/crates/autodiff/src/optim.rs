//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::params::{Gradients, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer with per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    adam: AdamConfig,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self::with_adam(kind, AdamConfig::default())
    }

    pub fn with_adam(kind: OptimizerKind, adam: AdamConfig) -> Self {
        Self { kind, adam, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` to every trainable parameter
    /// that received a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }
        let ids: Vec<_> = params.trainable_ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let p = params.get_mut(id);
            if p.shape() != g.shape() {
                return Err(AutodiffError::ShapeMismatch(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    let lr = T::from_f64(lr);
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
                OptimizerKind::Adam => {
                    let AdamConfig { beta1, beta2, eps } = self.adam;
                    let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let bc1 = 1.0 - beta1.powi(self.step as i32);
                    let bc2 = 1.0 - beta2.powi(self.step as i32);
                    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
                    let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
                    for (((w, &d), mi), vi) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
                    {
                        *mi = b1 * *mi + one_b1 * d;
                        *vi = b2 * *vi + one_b2 * d * d;
                        let mhat = mi.as_f64() / bc1;
                        let vhat = vi.as_f64() / bc2;
                        *w -= T::from_f64(lr * mhat / (vhat.sqrt() + eps));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    fn scalar_store(w: f64) -> (ParamStore<f64>, crate::ParamId) {
        let mut p = ParamStore::new();
        let id = p.add("w", Tensor::scalar(w));
        (p, id)
    }

    fn grads_of(p: &ParamStore<f64>, id: crate::ParamId, g: f64) -> Gradients<f64> {
        let mut grads = Gradients::new(p.len());
        grads.accumulate(id, Tensor::scalar(g));
        grads
    }

    #[test]
    fn sgd_single_step() {
        let (mut p, id) = scalar_store(1.0);
        let g = grads_of(&p, id, 1.0);
        Optimizer::new(OptimizerKind::Sgd).step(&mut p, &g, 0.1).unwrap();
        assert!((p.get(id).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let (mut p, id) = scalar_store(0.37);
            let g = grads_of(&p, id, 0.0);
            let mut opt = Optimizer::new(kind);
            for _ in 0..5 {
                opt.step(&mut p, &g, 0.1).unwrap();
            }
            assert_eq!(p.get(id).data()[0], 0.37);
        }
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        // f(w) = sum_i c_i (w_i - t_i)^2, minimum at t.
        let target = [1.5, -2.0, 0.25];
        let curv = [1.0, 4.0, 0.5];
        let mut p = ParamStore::new();
        let id = p.add("w", Tensor::from_vec([3, 1, 1, 1], vec![0.0; 3]).unwrap());
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        for step in 0..500 {
            let w = p.get(id).data().to_vec();
            let g: Vec<f64> = (0..3).map(|i| 2.0 * curv[i] * (w[i] - target[i])).collect();
            let mut grads = Gradients::new(1);
            grads.accumulate(id, Tensor::from_vec([3, 1, 1, 1], g).unwrap());
            let lr = if step < 300 { 0.05 } else { 0.05 * 0.97f64.powi(step - 299) };
            opt.step(&mut p, &grads, lr).unwrap();
        }
        for (w, t) in p.get(id).data().iter().zip(target) {
            assert!((w - t).abs() < 1e-6, "{w} vs {t}");
        }
        let _ = Graph::new(&p, false);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (mut p, id) = scalar_store(1.0);
        let mut grads = Gradients::new(1);
        grads.accumulate(id, Tensor::zeros([2, 1, 1, 1]));
        assert!(Optimizer::new(OptimizerKind::Sgd).step(&mut p, &grads, 0.1).is_err());
    }
}

//! First-order optimizers over a flat parameter vector.

use serde::{Deserialize, Serialize};

use super::backprop::Gradients;
use super::model::MlpModel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    /// Adaptive moments with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    /// Default moment decay rates and epsilon (0.9, 0.98, 1e-6).
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    optimizer: Optimizer,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, num_params: usize) -> Self {
        let (m, v) = match optimizer {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam { .. } => (vec![0.0; num_params], vec![0.0; num_params]),
        };
        Self {
            optimizer,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != grads.len() {
            return Err(Error::Internal("gradient length does not match parameters".into()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged { epoch: None });
        }
        self.step += 1;
        match self.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                if self.m.len() != params.len() {
                    return Err(Error::Internal("optimizer state has the wrong size".into()));
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// One optimizer step on every weight and bias of `model`.
pub fn optimizer_step(
    model: &mut MlpModel,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let mut params = model.flat_params();
    state.update(&mut params, &grads.flat(), lr)?;
    model.set_flat_params(&params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{Activation, MlpSpec};
    use crate::rng::SeededRng;

    fn model() -> MlpModel {
        let mut rng = SeededRng::new(2);
        MlpModel::init(MlpSpec::new(vec![2, 3, 2], Activation::Relu).unwrap(), &mut rng).unwrap()
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut m = model();
        let before = m.flat_params();
        let mut g = Gradients::zeros_like(&m);
        for (i, w) in g.weights.iter_mut().flatten().enumerate() {
            *w = i as f64 * 0.01 - 0.05;
        }
        let flat_g = g.flat();
        let mut st = OptimizerState::new(Optimizer::Sgd, before.len());
        optimizer_step(&mut m, &g, &mut st, 0.1).unwrap();
        for ((a, b), gi) in m.flat_params().iter().zip(&before).zip(&flat_g) {
            assert_eq!(*a, b - 0.1 * gi);
        }
    }

    #[test]
    fn zero_gradient_leaves_model_unchanged() {
        for opt in [Optimizer::Sgd, Optimizer::adam()] {
            let mut m = model();
            let before = m.clone();
            let g = Gradients::zeros_like(&m);
            let mut st = OptimizerState::new(opt, m.spec().num_params());
            optimizer_step(&mut m, &g, &mut st, 0.5).unwrap();
            assert_eq!(m, before);
        }
    }

    #[test]
    fn adam_matches_hand_stepped_scalar() {
        // f(w) = w^2 from w = 1, gradients 2w, beta1 = 0.9, beta2 = 0.98, eps = 1e-6, lr = 0.1.
        // Step 1: g = 2, m = 0.2, v = 0.08, m_hat = 2, v_hat = 4, w = 1 - 0.1 * 2 / (2 + 1e-6)
        let (b1, b2, eps, lr) = (0.9_f64, 0.98_f64, 1e-6_f64, 0.1_f64);
        let mut w = 1.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            expected.push(w);
        }
        assert!((expected[0] - (1.0 - 0.1 * 2.0 / (2.0 + 1e-6))).abs() < 1e-15);

        let mut st = OptimizerState::new(Optimizer::adam(), 1);
        let mut p = [1.0_f64];
        for e in expected {
            let g = [2.0 * p[0]];
            st.update(&mut p, &g, lr).unwrap();
            assert_eq!(p[0], e);
        }
    }

    #[test]
    fn nan_gradient_is_divergence() {
        let mut st = OptimizerState::new(Optimizer::Sgd, 1);
        let mut p = [0.0];
        assert!(matches!(
            st.update(&mut p, &[f64::NAN], 0.1),
            Err(Error::TrainingDiverged { .. })
        ));
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let mut st = OptimizerState::new(Optimizer::Sgd, 1);
        assert!(st.update(&mut [0.0], &[1.0], 0.0).is_err());
    }
}

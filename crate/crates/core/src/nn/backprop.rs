//! Reverse-mode gradients through [`MlpModel`].

use super::model::{ForwardTrace, MlpModel};
use crate::{Error, Result};

/// Parameter and input gradients of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model.weights().iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: model.biases().iter().map(|b| vec![0.0; b.len()]).collect(),
            input: vec![0.0; model.input_dim()],
        }
    }

    /// Same layout as [`MlpModel::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        let pairs = self
            .weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .zip(other.weights.iter().chain(&other.biases));
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
        for (d, s) in self.input.iter_mut().zip(&other.input) {
            *d += scale * s;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self
            .weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .flatten()
            .chain(self.input.iter_mut())
        {
            *v *= factor;
        }
    }
}

/// Gradients of a loss whose derivative with respect to the output logits is
/// `d_logits`.
pub fn backward(model: &MlpModel, trace: &ForwardTrace, d_logits: [f64; 2]) -> Result<Gradients> {
    backward_with_hidden(model, trace, d_logits, &[])
}

/// Like [`backward`], with extra loss gradients injected at hidden activations.
///
/// Each entry of `hidden_grads` is `(hidden_layer, dL/d activation)`.
pub fn backward_with_hidden(
    model: &MlpModel,
    trace: &ForwardTrace,
    d_logits: [f64; 2],
    hidden_grads: &[(usize, &[f64])],
) -> Result<Gradients> {
    let depth = model.spec().depth();
    if trace.pre_activations.len() != depth || trace.input.len() != model.input_dim() {
        return Err(Error::Internal("trace does not belong to this model".into()));
    }
    for &(layer, g) in hidden_grads {
        match model.hidden_dim(layer) {
            Some(d) if d == g.len() => {}
            _ => {
                return Err(Error::Internal(format!(
                    "hidden gradient for layer {layer} has the wrong shape"
                )))
            }
        }
    }

    let act = model.spec().hidden_activation;
    let mut grads = Gradients::zeros_like(model);
    let mut delta = d_logits.to_vec();

    for l in (0..depth).rev() {
        let input: &[f64] = if l == 0 {
            &trace.input
        } else {
            &trace.activations[l - 1]
        };
        let cols = input.len();
        let w = &model.weights()[l];
        let gw = &mut grads.weights[l];
        for (i, &d) in delta.iter().enumerate() {
            for (j, &x) in input.iter().enumerate() {
                gw[i * cols + j] = d * x;
            }
        }
        grads.biases[l].copy_from_slice(&delta);

        let mut d_input = vec![0.0; cols];
        for (i, &d) in delta.iter().enumerate() {
            let row = &w[i * cols..(i + 1) * cols];
            for (di, &wij) in d_input.iter_mut().zip(row) {
                *di += wij * d;
            }
        }

        if l == 0 {
            grads.input = d_input;
        } else {
            for &(layer, g) in hidden_grads {
                if layer == l - 1 {
                    for (di, gi) in d_input.iter_mut().zip(g) {
                        *di += gi;
                    }
                }
            }
            let z = &trace.pre_activations[l - 1];
            delta = d_input
                .iter()
                .zip(z)
                .map(|(&d, &zi)| d * act.derivative(zi))
                .collect();
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss::{cross_entropy, cross_entropy_grad};
    use crate::nn::model::{Activation, MlpSpec};
    use crate::rng::SeededRng;

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradients() {
        let mut rng = SeededRng::new(1);
        let m = MlpModel::init(
            MlpSpec::new(vec![2, 5, 2], Activation::Tanh).unwrap(),
            &mut rng,
        )
        .unwrap();
        let t = m.forward(&[0.3, 0.7]).unwrap();
        let g = backward(&m, &t, [0.0, 0.0]).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_cross_entropy_logit_gradient_is_probs_minus_one_hot() {
        let probs = [0.3, 0.7];
        let g = cross_entropy_grad(probs, 0).unwrap();
        assert!((g[0] - (0.3 - 1.0)).abs() < 1e-15);
        assert!((g[1] - 0.7).abs() < 1e-15);

        // and by central differences on the logits
        let z = [0.2_f64, -0.4];
        let loss = |z: [f64; 2]| cross_entropy(crate::nn::model::softmax2(z), 1).unwrap();
        let p = crate::nn::model::softmax2(z);
        let g = cross_entropy_grad(p, 1).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            let mut zp = z;
            let mut zm = z;
            zp[k] += h;
            zm[k] -= h;
            let fd = (loss(zp) - loss(zm)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_foreign_trace() {
        let a = MlpModel::zeros(MlpSpec::new(vec![2, 3, 2], Activation::Relu).unwrap()).unwrap();
        let b = MlpModel::zeros(MlpSpec::new(vec![2, 2], Activation::Relu).unwrap()).unwrap();
        let t = b.forward(&[0.0, 0.0]).unwrap();
        assert!(backward(&a, &t, [1.0, 0.0]).is_err());
    }
}

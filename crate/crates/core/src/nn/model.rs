//! Dense feed-forward network with a two-way softmax head.
//!
//! Layer `l` computes `z = W x + b` with `W` stored row-major as
//! `(out_dim, in_dim)`; hidden layers apply the configured activation, the
//! last layer emits logits that go through a softmax.

use serde::{Deserialize, Serialize};

use crate::rng::SeededRng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at pre-activation `z`. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, hidden_activation: Activation) -> Result<Self> {
        let spec = Self {
            layer_sizes,
            hidden_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Validation(
                "an MLP needs at least an input and an output size".into(),
            ));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Validation("layer sizes must be positive".into()));
        }
        if *self.layer_sizes.last().unwrap() != 2 {
            return Err(Error::Validation(
                "the output layer must have exactly 2 classes".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    spec: MlpSpec,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Everything computed by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// `z` of every affine layer; the last entry holds the logits.
    pub pre_activations: Vec<Vec<f64>>,
    /// Activated outputs of the hidden layers, `activations[l] = act(pre_activations[l])`.
    pub activations: Vec<Vec<f64>>,
    pub probs: [f64; 2],
}

impl ForwardTrace {
    pub fn logits(&self) -> [f64; 2] {
        let z = self.pre_activations.last().unwrap();
        [z[0], z[1]]
    }

    /// Class-1 probability.
    pub fn p1(&self) -> f64 {
        self.probs[1]
    }

    pub fn predicted_class(&self) -> u8 {
        predicted_class(self.probs[1])
    }

    pub fn hidden(&self, layer: usize) -> Option<&[f64]> {
        self.activations.get(layer).map(Vec::as_slice)
    }
}

/// Class decision `1[p1 >= 0.5]`.
#[inline]
pub fn predicted_class(p1: f64) -> u8 {
    u8::from(p1 >= 0.5)
}

/// Numerically stable two-way softmax.
pub fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    layer_sizes: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl MlpModel {
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let weights = spec
            .layer_sizes
            .windows(2)
            .map(|w| vec![0.0; w[0] * w[1]])
            .collect();
        let biases = spec.layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases,
    /// drawn layer by layer: weights row-major, then biases.
    pub fn init(spec: MlpSpec, rng: &mut SeededRng) -> Result<Self> {
        let mut model = Self::zeros(spec)?;
        for l in 0..model.spec.depth() {
            let fan_in = model.spec.layer_sizes[l] as f64;
            let bound = (1.0 / fan_in).sqrt();
            for w in &mut model.weights[l] {
                *w = rng.uniform_range(-bound, bound);
            }
            for b in &mut model.biases[l] {
                *b = rng.uniform_range(-bound, bound);
            }
        }
        Ok(model)
    }

    pub fn from_parts(spec: MlpSpec, weights: Vec<Vec<f64>>, biases: Vec<Vec<f64>>) -> Result<Self> {
        spec.validate()?;
        let depth = spec.depth();
        if weights.len() != depth || biases.len() != depth {
            return Err(Error::Validation(format!(
                "expected {depth} weight and bias blocks, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for l in 0..depth {
            let (i, o) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
            if weights[l].len() != i * o || biases[l].len() != o {
                return Err(Error::Validation(format!(
                    "layer {l}: expected {o}x{i} weights and {o} biases"
                )));
            }
        }
        if weights.iter().chain(&biases).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("model parameters must be finite".into()));
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    /// Width of hidden layer `layer` (0-based), if it exists.
    pub fn hidden_dim(&self, layer: usize) -> Option<usize> {
        (layer + 1 < self.spec.depth()).then(|| self.spec.layer_sizes[layer + 1])
    }

    /// Index of the last hidden layer; `None` for a single affine layer.
    pub fn last_hidden(&self) -> Option<usize> {
        self.spec.depth().checked_sub(2)
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::InputShape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let depth = self.spec.depth();
        let mut pre_activations = Vec::with_capacity(depth);
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(depth - 1);
        for l in 0..depth {
            let input: &[f64] = if l == 0 { x } else { &activations[l - 1] };
            let z = affine(&self.weights[l], &self.biases[l], input);
            if l + 1 < depth {
                let act = self.spec.hidden_activation;
                activations.push(z.iter().map(|&v| act.apply(v)).collect());
            }
            pre_activations.push(z);
        }
        let z = pre_activations.last().unwrap();
        let probs = softmax2([z[0], z[1]]);
        Ok(ForwardTrace {
            input: x.to_vec(),
            pre_activations,
            activations,
            probs,
        })
    }

    /// Class-1 probability at `x`.
    pub fn prob1(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward(x)?.probs[1])
    }

    pub fn predict(&self, x: &[f64]) -> Result<u8> {
        Ok(predicted_class(self.prob1(x)?))
    }

    /// All parameters in layer order: weights then biases per layer.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.spec.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.spec.num_params() {
            return Err(Error::Internal(format!(
                "expected {} parameters, got {}",
                self.spec.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDoc {
            layer_sizes: self.spec.layer_sizes.clone(),
            activation: self.spec.hidden_activation,
            weights: self.weights.clone(),
            biases: self.biases.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(s)?;
        let spec = MlpSpec::new(doc.layer_sizes, doc.activation)?;
        Self::from_parts(spec, doc.weights, doc.biases)
    }
}

pub(crate) fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(i, &bi)| {
            let row = &w[i * cols..(i + 1) * cols];
            bi + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sizes: &[usize]) -> MlpSpec {
        MlpSpec::new(sizes.to_vec(), Activation::Relu).unwrap()
    }

    #[test]
    fn zero_single_layer_gives_uniform_probs() {
        let m = MlpModel::zeros(spec(&[2, 2])).unwrap();
        let t = m.forward(&[3.0, -7.5]).unwrap();
        assert_eq!(t.probs, [0.5, 0.5]);
    }

    #[test]
    fn zero_hidden_layer_activations_are_zero() {
        let m = MlpModel::zeros(spec(&[2, 4, 2])).unwrap();
        let t = m.forward(&[1.0, 2.0]).unwrap();
        assert_eq!(t.activations[0], vec![0.0; 4]);
    }

    #[test]
    fn forward_matches_straight_line_arithmetic() {
        let mut rng = SeededRng::new(11);
        let m = MlpModel::init(spec(&[2, 3, 2]), &mut rng).unwrap();
        let x = [0.4, -1.3];
        let t = m.forward(&x).unwrap();

        let w0 = &m.weights()[0];
        let b0 = &m.biases()[0];
        let w1 = &m.weights()[1];
        let b1 = &m.biases()[1];
        let h: Vec<f64> = (0..3)
            .map(|i| (w0[i * 2] * x[0] + w0[i * 2 + 1] * x[1] + b0[i]).max(0.0))
            .collect();
        let z0 = w1[0] * h[0] + w1[1] * h[1] + w1[2] * h[2] + b1[0];
        let z1 = w1[3] * h[0] + w1[4] * h[1] + w1[5] * h[2] + b1[1];
        let p1 = 1.0 / (1.0 + (z0 - z1).exp());
        assert!((t.probs[1] - p1).abs() < 1e-15);
        assert_eq!(t.activations[0], h);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let m = MlpModel::zeros(spec(&[2, 2])).unwrap();
        assert!(matches!(
            m.forward(&[1.0]),
            Err(Error::InputShape { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![2], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![2, 3], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![2, 0, 2], Activation::Relu).is_err());
        assert_eq!(spec(&[2, 5, 2]).num_params(), 2 * 5 + 5 + 5 * 2 + 2);
    }

    #[test]
    fn json_round_trip() {
        let mut rng = SeededRng::new(5);
        let m = MlpModel::init(
            MlpSpec::new(vec![2, 4, 3, 2], Activation::Tanh).unwrap(),
            &mut rng,
        )
        .unwrap();
        let s = m.to_json().unwrap();
        assert!(s.contains("\"activation\":\"tanh\""));
        let back = MlpModel::from_json(&s).unwrap();
        for (a, b) in m.flat_params().iter().zip(back.flat_params()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn json_rejects_inconsistent_shapes() {
        let s = r#"{"layer_sizes":[2,2],"activation":"relu","weights":[[1,2,3]],"biases":[[0,0]]}"#;
        assert!(MlpModel::from_json(s).is_err());
    }
}

//! The three terms of the distillation objective and their logit gradients.

use serde::{Deserialize, Serialize};

use super::model::ForwardTrace;
use crate::rng::SeededRng;
use crate::{Error, Result};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-9;

pub fn validate_simplex(p: [f64; 2]) -> Result<()> {
    let ok = p
        .iter()
        .all(|&v| v.is_finite() && (-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&v))
        && (p[0] + p[1] - 1.0).abs() <= SIMPLEX_TOL;
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(format!("{p:?} is not on the 2-simplex")))
    }
}

/// `KL(p || q) = sum_c p_c ln(p_c / q_c)` with `q_c` floored at [`PROB_FLOOR`]
/// and `0 ln 0 = 0`.
pub fn kl_div(p: [f64; 2], q: [f64; 2]) -> Result<f64> {
    validate_simplex(p)?;
    validate_simplex(q)?;
    let kl: f64 = p
        .iter()
        .zip(&q)
        .filter(|(&pc, _)| pc > 0.0)
        .map(|(&pc, &qc)| pc * (pc.ln() - qc.max(PROB_FLOOR).ln()))
        .sum();
    Ok(kl.max(0.0))
}

/// Gradient of `KL(p || softmax(z))` with respect to the logits `z`, given
/// `q = softmax(z)`. Equals `q - p` when no floor is active.
pub fn kl_grad(p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    let mut g = [0.0; 2];
    for (j, gj) in g.iter_mut().enumerate() {
        for c in 0..2 {
            if q[c] > PROB_FLOOR {
                let kron = if c == j { 1.0 } else { 0.0 };
                *gj -= p[c] * (kron - q[j]);
            }
        }
    }
    g
}

pub fn cross_entropy(probs: [f64; 2], label: u8) -> Result<f64> {
    validate_simplex(probs)?;
    let l = check_label(label)?;
    Ok(-probs[l].max(PROB_FLOOR).ln())
}

/// Gradient of `cross_entropy(softmax(z), label)` with respect to `z`:
/// `probs - one_hot(label)`.
pub fn cross_entropy_grad(probs: [f64; 2], label: u8) -> Result<[f64; 2]> {
    let l = check_label(label)?;
    if probs[l] <= PROB_FLOOR {
        return Ok([0.0, 0.0]);
    }
    let mut g = probs;
    g[l] -= 1.0;
    Ok(g)
}

fn check_label(label: u8) -> Result<usize> {
    match label {
        0 | 1 => Ok(label as usize),
        other => Err(Error::Validation(format!("label {other} is not 0 or 1"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Validation(format!(
                "loss weights must be nonnegative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    /// `hard + alpha * kd + beta * lwd`.
    pub fn combine(&self, hard: f64, kd: f64, lwd: f64) -> f64 {
        hard + self.alpha * kd + self.beta * lwd
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
        }
    }
}

/// Linear map from a student hidden layer into a teacher hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub out_dim: usize,
    pub in_dim: usize,
    /// Row-major `(out_dim, in_dim)`.
    pub weights: Vec<f64>,
}

impl Projection {
    pub fn identity(n: usize) -> Self {
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        Self {
            out_dim: n,
            in_dim: n,
            weights,
        }
    }

    pub fn init(out_dim: usize, in_dim: usize, rng: &mut SeededRng) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let weights = (0..out_dim * in_dim)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Self {
            out_dim,
            in_dim,
            weights,
        }
    }

    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|i| {
                self.weights[i * self.in_dim..(i + 1) * self.in_dim]
                    .iter()
                    .zip(h)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }
}

/// One aligned (teacher layer, student layer) pair of hidden activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LwdAlignment {
    pub teacher_layer: usize,
    pub student_layer: usize,
    /// Required when the two widths differ.
    pub projection: Option<Projection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LwdGrad {
    pub value: f64,
    /// `(student hidden layer, dL/d activation)`.
    pub student_hidden: Vec<(usize, Vec<f64>)>,
    /// Gradient of each alignment's projection weights, when it has one.
    pub projections: Vec<Option<Vec<f64>>>,
}

fn aligned<'a>(
    teacher: &'a ForwardTrace,
    student: &'a ForwardTrace,
    a: &LwdAlignment,
) -> Result<(&'a [f64], &'a [f64])> {
    let ht = teacher
        .hidden(a.teacher_layer)
        .ok_or_else(|| Error::Config(format!("teacher has no hidden layer {}", a.teacher_layer)))?;
    let hs = student
        .hidden(a.student_layer)
        .ok_or_else(|| Error::Config(format!("student has no hidden layer {}", a.student_layer)))?;
    match &a.projection {
        None if ht.len() != hs.len() => Err(Error::Config(format!(
            "hidden widths differ ({} vs {}) and no projection is configured",
            ht.len(),
            hs.len()
        ))),
        Some(p) if p.in_dim != hs.len() || p.out_dim != ht.len() => Err(Error::Config(format!(
            "projection is {}x{} but layers are {} and {} wide",
            p.out_dim,
            p.in_dim,
            ht.len(),
            hs.len()
        ))),
        _ => Ok((ht, hs)),
    }
}

/// Mean over aligned layers of `||h_t - P h_s||^2`; zero when nothing is aligned.
pub fn lwd_term(
    teacher: &ForwardTrace,
    student: &ForwardTrace,
    alignments: &[LwdAlignment],
) -> Result<f64> {
    Ok(lwd_backward(teacher, student, alignments)?.value)
}

pub fn lwd_backward(
    teacher: &ForwardTrace,
    student: &ForwardTrace,
    alignments: &[LwdAlignment],
) -> Result<LwdGrad> {
    let mut out = LwdGrad {
        value: 0.0,
        student_hidden: Vec::with_capacity(alignments.len()),
        projections: Vec::with_capacity(alignments.len()),
    };
    if alignments.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / alignments.len() as f64;
    for a in alignments {
        let (ht, hs) = aligned(teacher, student, a)?;
        let projected = match &a.projection {
            Some(p) => p.apply(hs),
            None => hs.to_vec(),
        };
        let resid: Vec<f64> = projected.iter().zip(ht).map(|(p, t)| p - t).collect();
        out.value += scale * resid.iter().map(|r| r * r).sum::<f64>();

        match &a.projection {
            Some(p) => {
                let mut dh = vec![0.0; p.in_dim];
                let mut dp = vec![0.0; p.out_dim * p.in_dim];
                for (i, &r) in resid.iter().enumerate() {
                    for j in 0..p.in_dim {
                        dp[i * p.in_dim + j] = 2.0 * scale * r * hs[j];
                        dh[j] += 2.0 * scale * r * p.weights[i * p.in_dim + j];
                    }
                }
                out.student_hidden.push((a.student_layer, dh));
                out.projections.push(Some(dp));
            }
            None => {
                let dh = resid.iter().map(|r| 2.0 * scale * r).collect();
                out.student_hidden.push((a.student_layer, dh));
                out.projections.push(None);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{Activation, MlpModel, MlpSpec};

    #[test]
    fn kl_examples() {
        assert_eq!(kl_div([0.3, 0.7], [0.3, 0.7]).unwrap(), 0.0);
        let ln2 = std::f64::consts::LN_2;
        assert!((kl_div([1.0, 0.0], [0.5, 0.5]).unwrap() - ln2).abs() < 1e-15);
        // 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75) = 0.5 ln 2 + 0.5 ln(2/3)
        let expected = 0.143_841_036_225_890_1;
        assert!((kl_div([0.5, 0.5], [0.25, 0.75]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_non_simplex() {
        assert!(kl_div([0.6, 0.6], [0.5, 0.5]).is_err());
        assert!(kl_div([0.5, 0.5], [f64::NAN, 0.5]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((cross_entropy([0.5, 0.5], 1).unwrap() - ln2).abs() < 1e-15);
        assert_eq!(cross_entropy([1.0, 0.0], 0).unwrap(), 0.0);
        let expected = 2.302_585_092_994_045_7; // -ln 0.1
        assert!((cross_entropy([0.9, 0.1], 1).unwrap() - expected).abs() < 1e-12);
        assert!(cross_entropy([0.5, 0.5], 2).is_err());
    }

    #[test]
    fn floor_keeps_saturated_losses_finite() {
        assert!(cross_entropy([1.0, 0.0], 1).unwrap().is_finite());
        assert!(kl_div([0.5, 0.5], [1.0, 0.0]).unwrap().is_finite());
    }

    #[test]
    fn kl_grad_matches_finite_differences() {
        let p = [0.2, 0.8];
        let z = [0.7_f64, -0.1];
        let f = |z: [f64; 2]| kl_div(p, crate::nn::model::softmax2(z)).unwrap();
        let g = kl_grad(p, crate::nn::model::softmax2(z));
        let h = 1e-6;
        for k in 0..2 {
            let mut zp = z;
            let mut zm = z;
            zp[k] += h;
            zm[k] -= h;
            assert!(((f(zp) - f(zm)) / (2.0 * h) - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn loss_weights_must_be_nonnegative() {
        assert!(LossWeights::new(-1.0, 0.0).is_err());
        assert!(LossWeights::new(0.0, f64::NAN).is_err());
        assert_eq!(LossWeights::new(2.0, 3.0).unwrap().combine(1.0, 1.0, 1.0), 6.0);
    }

    fn trace_with_hidden(h: Vec<f64>) -> ForwardTrace {
        ForwardTrace {
            input: vec![0.0],
            pre_activations: vec![h.clone(), vec![0.0, 0.0]],
            activations: vec![h],
            probs: [0.5, 0.5],
        }
    }

    #[test]
    fn lwd_examples() {
        let id = |n| LwdAlignment {
            teacher_layer: 0,
            student_layer: 0,
            projection: Some(Projection::identity(n)),
        };
        let a = trace_with_hidden(vec![0.3, -0.2, 1.0]);
        assert_eq!(lwd_term(&a, &a, &[id(3)]).unwrap(), 0.0);

        let t = trace_with_hidden(vec![1.0, 0.0]);
        let s = trace_with_hidden(vec![0.0, 0.0]);
        assert_eq!(lwd_term(&t, &s, &[id(2)]).unwrap(), 1.0);
    }

    #[test]
    fn lwd_requires_projection_when_widths_differ() {
        let t = trace_with_hidden(vec![1.0, 0.0, 0.0]);
        let s = trace_with_hidden(vec![0.0, 0.0]);
        let a = LwdAlignment {
            teacher_layer: 0,
            student_layer: 0,
            projection: None,
        };
        assert!(matches!(lwd_term(&t, &s, &[a]), Err(Error::Config(_))));
    }

    #[test]
    fn lwd_matches_scalar_sum_of_squares() {
        let mut rng = SeededRng::new(9);
        let teacher = MlpModel::init(
            MlpSpec::new(vec![2, 6, 2], Activation::Tanh).unwrap(),
            &mut rng,
        )
        .unwrap();
        let student = MlpModel::init(
            MlpSpec::new(vec![2, 3, 2], Activation::Tanh).unwrap(),
            &mut rng,
        )
        .unwrap();
        let proj = Projection::init(6, 3, &mut rng);
        let x = [0.25, -0.8];
        let tt = teacher.forward(&x).unwrap();
        let st = student.forward(&x).unwrap();
        let a = LwdAlignment {
            teacher_layer: 0,
            student_layer: 0,
            projection: Some(proj.clone()),
        };
        let got = lwd_term(&tt, &st, &[a]).unwrap();

        let mut expected = 0.0;
        for i in 0..6 {
            let mut ph = 0.0;
            for j in 0..3 {
                ph += proj.weights[i * 3 + j] * st.activations[0][j];
            }
            let d = tt.activations[0][i] - ph;
            expected += d * d;
        }
        assert!((got - expected).abs() < 1e-14);
    }
}

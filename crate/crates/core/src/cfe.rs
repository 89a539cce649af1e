//! Gradient-guided counterfactual explanations against a teacher MLP.
//!
//! Starting from `x`, the search climbs the teacher's logit margin
//! `m(x) = z_opposite(x) - z_current(x)` with unit-norm steps until the
//! predicted class flips, bisects the last step down to the 0.5 level set,
//! and finally pushes `overshoot_delta` past the crossing so the flip holds
//! strictly.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::nn::{backward, predicted_class, MlpModel};
use crate::rng::{splitmix64, SeededRng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfeConfig {
    pub step_size: f64,
    pub max_steps: usize,
    /// Distance pushed past the refined crossing, in data units.
    pub overshoot_delta: f64,
    /// Bisection stops once `|f(x) - 0.5|` is at most this.
    pub bisection_tol: f64,
    /// Jittered restarts tried after the first search fails.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for CfeConfig {
    fn default() -> Self {
        Self {
            step_size: 0.01,
            max_steps: 2000,
            overshoot_delta: 1e-3,
            bisection_tol: 1e-10,
            restarts: 3,
            seed: 0,
        }
    }
}

impl CfeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.step_size)
            || self.max_steps == 0
            || !positive(self.overshoot_delta)
            || !positive(self.bisection_tol)
        {
            return Err(Error::Config(format!("counterfactual settings must be positive: {self:?}")));
        }
        if self.overshoot_delta < self.bisection_tol {
            return Err(Error::Config("overshoot_delta must be at least bisection_tol".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfePair {
    pub x: Vec<f64>,
    pub x_cf: Vec<f64>,
    pub y: u8,
    pub y_cf: u8,
    pub perturbation_norm: f64,
    pub teacher_prob_at_cf: f64,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(p, q)| p + t * (q - p)).collect()
}

/// Bisects the segment between two points the teacher classifies
/// differently, returning a point with `|f(x) - 0.5| <= tol`.
///
/// The search runs on the segment parameter and stops after 200 halvings at
/// the latest, by which point the bracket has collapsed to adjacent floats.
pub fn refine_to_boundary(teacher: &MlpModel, a: &[f64], b: &[f64], tol: f64) -> Result<Vec<f64>> {
    let fa = teacher.prob1(a)? - 0.5;
    let fb = teacher.prob1(b)? - 0.5;
    let side = |g: f64| g >= 0.0;
    if side(fa) == side(fb) {
        return Err(Error::Orientation);
    }
    if fa.abs() <= tol {
        return Ok(a.to_vec());
    }
    if fb.abs() <= tol {
        return Ok(b.to_vec());
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut best = (fa.abs().min(fb.abs()), if fa.abs() < fb.abs() { 0.0 } else { 1.0 });
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let p = lerp(a, b, mid);
        let g = teacher.prob1(&p)? - 0.5;
        if g.abs() < best.0 {
            best = (g.abs(), mid);
        }
        if g.abs() <= tol {
            return Ok(p);
        }
        if side(g) == side(fa) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lerp(a, b, best.1))
}

/// Unit ascent direction of the margin toward `target` at `x`, or `None`
/// where the margin is flat.
fn margin_direction(teacher: &MlpModel, x: &[f64], target: u8) -> Result<Option<Vec<f64>>> {
    let trace = teacher.forward(x)?;
    let mut d_logits = [0.0; 2];
    d_logits[target as usize] = 1.0;
    d_logits[1 - target as usize] = -1.0;
    let g = backward(teacher, &trace, d_logits)?.input;
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Ok(None);
    }
    Ok(Some(g.into_iter().map(|v| v / n).collect()))
}

fn search_from(teacher: &MlpModel, x: &[f64], start: Vec<f64>, cfg: &CfeConfig) -> Result<Option<Vec<f64>>> {
    let current = teacher.predict(x)?;
    let target = 1 - current;
    let mut z = start;
    if teacher.predict(&z)? == target {
        return finish(teacher, x.to_vec(), z, target, cfg).map(Some);
    }
    for _ in 0..cfg.max_steps {
        let Some(dir) = margin_direction(teacher, &z, target)? else {
            return Ok(None);
        };
        let next: Vec<f64> = z.iter().zip(&dir).map(|(a, d)| a + cfg.step_size * d).collect();
        if teacher.predict(&next)? == target {
            return finish(teacher, z, next, target, cfg).map(Some);
        }
        z = next;
    }
    Ok(None)
}

/// Bisect `[inside, outside]` and push past the crossing along that segment.
fn finish(teacher: &MlpModel, inside: Vec<f64>, outside: Vec<f64>, target: u8, cfg: &CfeConfig) -> Result<Vec<f64>> {
    let crossing = refine_to_boundary(teacher, &inside, &outside, cfg.bisection_tol)?;
    let seg = distance(&inside, &outside);
    let dir: Vec<f64> = inside
        .iter()
        .zip(&outside)
        .map(|(a, b)| (b - a) / seg)
        .collect();
    let mut delta = cfg.overshoot_delta;
    for _ in 0..8 {
        let cand: Vec<f64> = crossing.iter().zip(&dir).map(|(c, d)| c + delta * d).collect();
        if teacher.predict(&cand)? == target {
            return Ok(cand);
        }
        delta *= 2.0;
    }
    Ok(outside)
}

fn point_seed(seed: u64, x: &[f64]) -> u64 {
    x.iter().fold(splitmix64(seed), |h, v| splitmix64(h ^ v.to_bits()))
}

/// Searches for a counterfactual of `(x, y)`; the teacher must predict `y` at `x`.
pub fn generate_cfe(teacher: &MlpModel, x: &[f64], y: u8, cfg: &CfeConfig) -> Result<CfePair> {
    cfg.validate()?;
    let trace = teacher.forward(x)?;
    if trace.predicted_class() != y {
        return Err(Error::Validation(format!(
            "teacher predicts {} at the original point, not {y}",
            trace.predicted_class()
        )));
    }
    let mut rng = SeededRng::new(point_seed(cfg.seed, x));
    for attempt in 0..=cfg.restarts {
        let start = if attempt == 0 {
            x.to_vec()
        } else {
            x.iter().map(|v| v + cfg.step_size * rng.normal()).collect()
        };
        if teacher.predict(&start)? != y {
            continue;
        }
        if let Some(x_cf) = search_from(teacher, x, start, cfg)? {
            let p = teacher.prob1(&x_cf)?;
            if predicted_class(p) == y {
                continue;
            }
            return Ok(CfePair {
                perturbation_norm: distance(x, &x_cf),
                x: x.to_vec(),
                x_cf,
                y,
                y_cf: 1 - y,
                teacher_prob_at_cf: p,
            });
        }
    }
    Err(Error::CfeNotFound {
        steps: cfg.max_steps,
        restarts: cfg.restarts,
    })
}

/// True iff the teacher's class at `x_cf` differs from its class at `x`.
pub fn validate_flip(teacher: &MlpModel, pair: &CfePair) -> bool {
    match (teacher.predict(&pair.x), teacher.predict(&pair.x_cf)) {
        (Ok(a), Ok(b)) => a != b,
        _ => false,
    }
}

#[derive(Debug, Clone)]
pub struct CfeBuild {
    /// Originals in input order, followed by one counterfactual per entry of `pairs`.
    pub train_set: Dataset,
    pub pairs: Vec<CfePair>,
    /// `(original row, counterfactual row)` in `train_set`, one per pair.
    pub pair_rows: Vec<(usize, usize)>,
    /// `(original row, reason)` for points without a counterfactual.
    pub failures: Vec<(usize, String)>,
}

/// Fraction of failed searches above which the build is rejected.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

/// Pairs every original with a counterfactual labelled `1 - y`.
pub fn build_cfe_dataset(teacher: &MlpModel, d_k: &Dataset, cfg: &CfeConfig) -> Result<CfeBuild> {
    cfg.validate()?;
    if d_k.is_empty() {
        return Ok(CfeBuild {
            train_set: d_k.clone(),
            pairs: Vec::new(),
            pair_rows: Vec::new(),
            failures: Vec::new(),
        });
    }
    let results: Vec<Result<CfePair>> = d_k
        .features()
        .par_iter()
        .zip(d_k.labels().par_iter())
        .map(|(x, &y)| generate_cfe(teacher, x, y, cfg))
        .collect();

    let mut train_set = d_k.clone();
    let mut pairs = Vec::new();
    let mut pair_rows = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(pair) => {
                pair_rows.push((i, train_set.len()));
                train_set.push(pair.x_cf.clone(), pair.y_cf)?;
                pairs.push(pair);
            }
            Err(e @ (Error::CfeNotFound { .. } | Error::Validation(_))) => failures.push((i, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * d_k.len() as f64 {
        return Err(Error::Generation(format!(
            "{} of {} counterfactual searches failed",
            failures.len(),
            d_k.len()
        )));
    }
    Ok(CfeBuild {
        train_set,
        pairs,
        pair_rows,
        failures,
    })
}

/// CSV with header `x1,...,xd,xcf1,...,xcfd,y,ycf,perturb_norm,prob_at_cf`.
pub fn write_pairs_csv<W: Write>(pairs: &[CfePair], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let d = pairs.first().map_or(0, |p| p.x.len());
    let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    header.extend((1..=d).map(|k| format!("xcf{k}")));
    header.extend(["y", "ycf", "perturb_norm", "prob_at_cf"].map(String::from));
    wtr.write_record(&header)?;
    for p in pairs {
        let mut rec: Vec<String> = p.x.iter().chain(&p.x_cf).map(|v| v.to_string()).collect();
        rec.push(p.y.to_string());
        rec.push(p.y_cf.to_string());
        rec.push(p.perturbation_norm.to_string());
        rec.push(p.teacher_prob_at_cf.to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, MlpSpec};

    /// Single affine layer whose logit margin (class 1 minus class 0) is `x1`.
    fn linear_teacher() -> MlpModel {
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu).unwrap();
        MlpModel::from_parts(spec, vec![vec![-0.5, 0.0, 0.5, 0.0]], vec![vec![0.0, 0.0]]).unwrap()
    }

    #[test]
    fn linear_boundary_projection() {
        let t = linear_teacher();
        let cfg = CfeConfig::default();
        let pair = generate_cfe(&t, &[-1.0, 0.0], 0, &cfg).unwrap();
        let dist_to_origin = pair.x_cf.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(dist_to_origin <= cfg.overshoot_delta + 1e-9, "{pair:?}");
        assert!(pair.x_cf[0] > 0.0);
        assert!(pair.x_cf[1].abs() < 1e-12);
        assert!(validate_flip(&t, &pair));
        assert_eq!(pair.y_cf, 1);
    }

    #[test]
    fn start_near_boundary_gives_tiny_perturbation() {
        let t = linear_teacher();
        let cfg = CfeConfig::default();
        let pair = generate_cfe(&t, &[-1e-7, 0.3], 0, &cfg).unwrap();
        assert!(pair.perturbation_norm <= 2.0 * (cfg.overshoot_delta + cfg.bisection_tol));
    }

    #[test]
    fn refine_finds_symmetric_crossing() {
        let t = linear_teacher();
        let x = refine_to_boundary(&t, &[-1.0, 0.0], &[1.0, 0.0], 1e-12).unwrap();
        assert!(x[0].abs() < 1e-11);
        assert!((t.prob1(&x).unwrap() - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn refine_rejects_same_side() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu).unwrap();
        // constant p1 = sigmoid(ln(7/3)) = 0.7
        let b = (0.7_f64 / 0.3).ln();
        let t = MlpModel::from_parts(spec, vec![vec![0.0; 4]], vec![vec![0.0, b]]).unwrap();
        assert!((t.prob1(&[0.0, 0.0]).unwrap() - 0.7).abs() < 1e-12);
        assert!(matches!(
            refine_to_boundary(&t, &[-1.0, 0.0], &[1.0, 0.0], 1e-9),
            Err(Error::Orientation)
        ));
    }

    #[test]
    fn identity_pair_is_not_a_flip() {
        let t = linear_teacher();
        let pair = CfePair {
            x: vec![-1.0, 0.0],
            x_cf: vec![-1.0, 0.0],
            y: 0,
            y_cf: 1,
            perturbation_norm: 0.0,
            teacher_prob_at_cf: 0.0,
        };
        assert!(!validate_flip(&t, &pair));
    }

    #[test]
    fn wrong_label_is_rejected() {
        let t = linear_teacher();
        assert!(matches!(
            generate_cfe(&t, &[-1.0, 0.0], 1, &CfeConfig::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn constant_teacher_has_no_counterfactual() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu).unwrap();
        let t = MlpModel::from_parts(spec, vec![vec![0.0; 4]], vec![vec![1.0, 0.0]]).unwrap();
        let cfg = CfeConfig {
            max_steps: 10,
            ..CfeConfig::default()
        };
        assert!(matches!(
            generate_cfe(&t, &[0.0, 0.0], 0, &cfg),
            Err(Error::CfeNotFound { .. })
        ));
    }

    #[test]
    fn empty_input_gives_empty_build() {
        let t = linear_teacher();
        let b = build_cfe_dataset(&t, &Dataset::empty(2, 0), &CfeConfig::default()).unwrap();
        assert!(b.train_set.is_empty() && b.pairs.is_empty());
    }

    #[test]
    fn build_labels_are_flipped() {
        let t = linear_teacher();
        let d = Dataset::new(
            vec![vec![-1.0, 0.0], vec![0.5, 1.0], vec![-0.3, -2.0], vec![2.0, 0.1]],
            vec![0, 1, 0, 1],
            0,
        )
        .unwrap();
        let b = build_cfe_dataset(&t, &d, &CfeConfig::default()).unwrap();
        assert_eq!(b.train_set.len(), 8);
        for (k, &(o, c)) in b.pair_rows.iter().enumerate() {
            assert_eq!(b.train_set.labels()[c], 1 - b.train_set.labels()[o]);
            assert_eq!(b.train_set.features()[c], b.pairs[k].x_cf);
        }
    }

    #[test]
    fn config_validation() {
        let bad = CfeConfig {
            overshoot_delta: 1e-12,
            bisection_tol: 1e-6,
            ..CfeConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(CfeConfig {
            step_size: 0.0,
            ..CfeConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn pairs_csv_header() {
        let t = linear_teacher();
        let pair = generate_cfe(&t, &[-1.0, 0.0], 0, &CfeConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_pairs_csv(&[pair], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x1,x2,xcf1,xcf2,y,ycf,perturb_norm,prob_at_cf\n"));
    }
}

//! Logistic-regression maximum likelihood, Fisher information, and the
//! Monte-Carlo study of how boundary-resident samples change estimation error.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{augment, gen_boundary_cfes, gen_logistic, second_moment_residual, sigmoid, Dataset, FeatureSampler, LogisticGroundTruth};
use crate::rng::{substream_seed, SeededRng};
use crate::{Error, Result};

/// Symmetric `(d+1) x (d+1)` matrix over augmented features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherMatrix {
    pub dim: usize,
    /// Row-major entries.
    pub m: Vec<f64>,
    pub n_points: usize,
}

impl FisherMatrix {
    pub fn from_matrix(m: &DMatrix<f64>, n_points: usize) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InputShape {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        let dim = m.nrows();
        let mut data = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                data.push(m[(i, j)]);
            }
        }
        Ok(Self { dim, m: data, n_points })
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.m)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i * self.dim + j]
    }

    pub fn frobenius(&self) -> f64 {
        self.m.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.to_matrix())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.dim).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

fn check_rows(w: &[f64], xs: &[Vec<f64>]) -> Result<()> {
    if let Some(bad) = xs.iter().find(|x| x.len() != w.len()) {
        return Err(Error::InputShape {
            expected: w.len(),
            got: bad.len(),
        });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mirror_upper(m: &mut [f64], d: usize) {
    for i in 0..d {
        for j in 0..i {
            m[i * d + j] = m[j * d + i];
        }
    }
}

/// `sum_i s(w.x_i) (1 - s(w.x_i)) x_i x_i^T` over augmented rows `x_i`.
pub fn logistic_fim(w: &[f64], xs: &[Vec<f64>]) -> Result<FisherMatrix> {
    check_rows(w, xs)?;
    let d = w.len();
    let mut m = vec![0.0; d * d];
    for x in xs {
        let z = dot(w, x);
        let c = sigmoid(z) * sigmoid(-z);
        for i in 0..d {
            for j in i..d {
                m[i * d + j] += c * x[i] * x[j];
            }
        }
    }
    mirror_upper(&mut m, d);
    Ok(FisherMatrix {
        dim: d,
        m,
        n_points: xs.len(),
    })
}

/// Mean outer product of the per-sample score `(y - s(w.x)) x` over labelled
/// augmented rows; an unbiased estimate of `logistic_fim(w, xs) / n` when the
/// labels are drawn from the model at `w`.
pub fn score_outer_product(w: &[f64], xs: &[Vec<f64>], ys: &[u8]) -> Result<FisherMatrix> {
    check_rows(w, xs)?;
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::Validation("score estimate needs one label per row".into()));
    }
    let d = w.len();
    let mut m = vec![0.0; d * d];
    for (x, &y) in xs.iter().zip(ys) {
        let r = f64::from(y) - sigmoid(dot(w, x));
        for i in 0..d {
            for j in i..d {
                m[i * d + j] += r * r * x[i] * x[j];
            }
        }
    }
    mirror_upper(&mut m, d);
    let n = xs.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    Ok(FisherMatrix {
        dim: d,
        m,
        n_points: xs.len(),
    })
}

/// `a - b` is positive semi-definite up to `tol`.
pub fn loewner_dominates(a: &FisherMatrix, b: &FisherMatrix, tol: f64) -> Result<bool> {
    if a.dim != b.dim {
        return Err(Error::InputShape {
            expected: a.dim,
            got: b.dim,
        });
    }
    Ok(min_eigenvalue(&(a.to_matrix() - b.to_matrix())) >= -tol)
}

/// `tr(A^{-1})` from a Cholesky factor: the squared Frobenius norm of `L^{-1}`.
pub fn trace_inverse(a: &FisherMatrix) -> Result<f64> {
    let m = a.to_matrix();
    let chol = m.cholesky().ok_or(Error::SingularMatrix)?;
    let l = chol.l();
    let scale = (0..a.dim).map(|i| l[(i, i)]).fold(0.0, f64::max);
    if (0..a.dim).any(|i| l[(i, i)] <= 1e-12 * scale) {
        return Err(Error::SingularMatrix);
    }
    let identity = DMatrix::<f64>::identity(a.dim, a.dim);
    let l_inv = l.solve_lower_triangular(&identity).ok_or(Error::SingularMatrix)?;
    let t = l_inv.iter().map(|v| v * v).sum::<f64>();
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::SingularMatrix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MleConfig {
    /// Stop once the norm of the mean per-row gradient is at most this.
    pub tol: f64,
    pub max_iter: usize,
    /// Weights beyond this norm are treated as separation.
    pub cap: f64,
    pub ridge: f64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            cap: 50.0,
            ridge: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleResult {
    pub w_hat: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Norm of the mean per-row gradient at `w_hat`.
    pub final_gradient_norm: f64,
    /// The iterate left the `cap` ball; `w_hat` is the last iterate.
    pub separated: bool,
}

fn log_likelihood(w: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let z = x * w;
    z.iter()
        .zip(y.iter())
        .map(|(&z, &y)| {
            // log s(z) = -log(1 + e^{-z}); log(1 - s(z)) = -log(1 + e^{z}).
            let softplus = |t: f64| if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
            -(y * softplus(-z) + (1.0 - y) * softplus(z))
        })
        .sum()
}

/// Newton-Raphson on the logistic log-likelihood of `ds` (raw features,
/// augmented internally), with step halving and a small ridge on the Hessian.
pub fn fit_mle(ds: &Dataset, cfg: &MleConfig) -> Result<MleResult> {
    if ds.is_empty() {
        return Err(Error::Validation("cannot fit an empty dataset".into()));
    }
    let d = ds.dim() + 1;
    let rows: Vec<f64> = ds.features().iter().flat_map(|x| augment(x)).collect();
    let x = DMatrix::from_row_slice(ds.len(), d, &rows);
    let y = DVector::from_iterator(ds.len(), ds.labels().iter().map(|&l| f64::from(l)));
    let n = ds.len() as f64;
    let mut w = DVector::<f64>::zeros(d);
    let mut ll = log_likelihood(&w, &x, &y);

    let finish = |w: &DVector<f64>, iterations: usize| {
        let z = &x * w;
        let grad_norm = (x.transpose() * (&y - z.map(sigmoid))).norm() / n;
        let separates = z.iter().zip(y.iter()).all(|(&z, &y)| (2.0 * y - 1.0) * z > 0.0);
        let separated = separates || w.norm() > cfg.cap;
        MleResult {
            w_hat: w.iter().copied().collect(),
            converged: !separated && grad_norm <= cfg.tol,
            iterations,
            final_gradient_norm: grad_norm,
            separated,
        }
    };

    for it in 0..cfg.max_iter {
        let p = (&x * &w).map(sigmoid);
        let grad = x.transpose() * (&y - &p);
        if grad.norm() / n <= cfg.tol {
            return Ok(finish(&w, it));
        }
        let weights = p.map(|v| v * (1.0 - v));
        let mut xw = x.clone();
        for (mut row, c) in xw.row_iter_mut().zip(weights.iter()) {
            row *= *c;
        }
        let h = x.transpose() * xw + DMatrix::<f64>::identity(d, d) * cfg.ridge;
        let step = h.cholesky().ok_or(Error::SingularMatrix)?.solve(&grad);
        let mut t = 1.0;
        let mut next = &w + &step * t;
        let mut next_ll = log_likelihood(&next, &x, &y);
        while next_ll < ll && t > 1e-10 {
            t *= 0.5;
            next = &w + &step * t;
            next_ll = log_likelihood(&next, &x, &y);
        }
        w = next;
        ll = next_ll;
        if w.norm() > cfg.cap {
            return Ok(finish(&w, it + 1));
        }
    }
    Ok(finish(&w, cfg.max_iter))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thm1Config {
    pub k: usize,
    /// Valid trials to collect.
    pub trials: usize,
    /// Share of the `k` samples replaced by boundary samples in the second arm.
    pub cf_fraction: f64,
    pub sampler: FeatureSampler,
    pub mle: MleConfig,
    pub bootstrap_resamples: usize,
    /// Largest tolerated share of attempts lost to separation.
    pub max_separation_rate: f64,
    pub seed: u64,
}

impl Default for Thm1Config {
    fn default() -> Self {
        Self {
            k: 16,
            trials: 500,
            cf_fraction: 0.5,
            sampler: FeatureSampler::IsotropicGaussian { dim: 2, std: 1.0 },
            mle: MleConfig::default(),
            bootstrap_resamples: 2000,
            max_separation_rate: 0.3,
            seed: 0,
        }
    }
}

impl Thm1Config {
    pub fn validate(&self, truth: &LogisticGroundTruth) -> Result<()> {
        truth.validate()?;
        self.sampler.validate()?;
        let d = truth.raw_dim();
        if self.sampler.dim() != d {
            return Err(Error::Config(format!("sampler dimension {} does not match {d}", self.sampler.dim())));
        }
        if self.k % 2 != 0 || self.k < 2 * (d + 1) {
            return Err(Error::Config(format!("k must be even and at least {}, got {}", 2 * (d + 1), self.k)));
        }
        if self.trials == 0 || self.bootstrap_resamples == 0 {
            return Err(Error::Config("trials and bootstrap_resamples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cf_fraction) || !(0.0..1.0).contains(&self.max_separation_rate) {
            return Err(Error::Config("cf_fraction must lie in [0, 1] and max_separation_rate in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn boundary_count(&self) -> usize {
        (self.k as f64 * self.cf_fraction).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thm1Trial {
    pub trial: usize,
    pub mse_std: f64,
    pub mse_cf: f64,
    pub trinv_std: f64,
    pub trinv_cf: f64,
    pub separated_std: bool,
    pub separated_cf: bool,
}

impl Thm1Trial {
    pub fn is_valid(&self) -> bool {
        !self.separated_std && !self.separated_cf && self.trinv_std.is_finite() && self.trinv_cf.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thm1Report {
    pub mse_standard: f64,
    pub mse_cf: f64,
    pub ratio: f64,
    /// Valid trials the means run over.
    pub trials: usize,
    pub attempts: usize,
    pub separated: usize,
    pub ci95_ratio: [f64; 2],
    pub trace_inv_standard: f64,
    pub trace_inv_cf: f64,
    /// Share of valid trials with `tr(I_cf^-1) < tr(I_std^-1)`.
    pub trace_win_fraction: f64,
    /// Relative Frobenius gap between the pooled second moments of the
    /// standard and boundary samples (augmented).
    pub second_moment_residual: f64,
    pub k: usize,
    pub boundary_samples: usize,
}

impl Thm1Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-attempt CSV: `trial,mse_std,mse_cf,trinv_std,trinv_cf,separated_std,separated_cf`.
pub fn write_trials_csv<W: Write>(trials: &[Thm1Trial], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["trial", "mse_std", "mse_cf", "trinv_std", "trinv_cf", "separated_std", "separated_cf"])?;
    for t in trials {
        wtr.write_record([
            t.trial.to_string(),
            t.mse_std.to_string(),
            t.mse_cf.to_string(),
            t.trinv_std.to_string(),
            t.trinv_cf.to_string(),
            t.separated_std.to_string(),
            t.separated_cf.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

fn sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn augmented(ds: &Dataset) -> Vec<Vec<f64>> {
    ds.features().iter().map(|x| augment(x)).collect()
}

/// Compares the MLE fitted on `k` draws from the logistic ground truth with
/// the MLE fitted on the same draws after their tail is swapped for boundary
/// samples.
///
/// Attempt `t` draws its standard sample from `substream(seed, 2t)` and its
/// boundary sample from `substream(seed, 2t + 1)`; the second arm keeps the
/// first `k - m` standard rows, `m = round(k * cf_fraction)`, and appends `m`
/// boundary rows. Attempts where either fit separates are excluded and
/// counted. Collection stops at `trials` valid attempts; if separation keeps
/// more than `max_separation_rate` of the attempts out, the run is invalid.
pub fn thm1_experiment(truth: &LogisticGroundTruth, cfg: &Thm1Config) -> Result<(Thm1Report, Vec<Thm1Trial>)> {
    cfg.validate(truth)?;
    let m = cfg.boundary_count();
    let max_attempts = (cfg.trials as f64 / (1.0 - cfg.max_separation_rate)).ceil() as usize;
    let mut log = Vec::new();
    let mut valid = Vec::new();
    let mut pooled_std = Vec::new();
    let mut pooled_cf = Vec::new();

    let mut attempt = 0;
    while valid.len() < cfg.trials && attempt < max_attempts {
        let standard = gen_logistic(truth, cfg.k, &cfg.sampler, substream_seed(cfg.seed, 2 * attempt as u64))?;
        let boundary = gen_boundary_cfes(truth, m, &cfg.sampler, substream_seed(cfg.seed, 2 * attempt as u64 + 1))?;
        let keep: Vec<usize> = (0..cfg.k - m).collect();
        let cf_arm = if m == 0 {
            standard.clone()
        } else if keep.is_empty() {
            boundary.dataset.clone()
        } else {
            standard.subset(&keep)?.concat(&boundary.dataset)?
        };

        let fit_std = fit_mle(&standard, &cfg.mle)?;
        let fit_cf = fit_mle(&cf_arm, &cfg.mle)?;
        let trinv = |ds: &Dataset| {
            logistic_fim(&truth.w, &augmented(ds)).and_then(|f| trace_inverse(&f)).or_else(|e| match e {
                Error::SingularMatrix => Ok(f64::INFINITY),
                other => Err(other),
            })
        };
        let trial = Thm1Trial {
            trial: attempt,
            mse_std: sq_err(&fit_std.w_hat, &truth.w),
            mse_cf: sq_err(&fit_cf.w_hat, &truth.w),
            trinv_std: trinv(&standard)?,
            trinv_cf: trinv(&cf_arm)?,
            separated_std: fit_std.separated,
            separated_cf: fit_cf.separated,
        };
        if trial.is_valid() {
            valid.push(trial);
            pooled_std.extend(standard.features().iter().cloned());
            pooled_cf.extend(boundary.dataset.features().iter().cloned());
        }
        log.push(trial);
        attempt += 1;
    }

    let separated = log.len() - valid.len();
    if valid.len() < cfg.trials {
        return Err(Error::ExperimentInvalid(format!(
            "{separated} of {} attempts separated or were degenerate; limit is {:.0}%",
            log.len(),
            100.0 * cfg.max_separation_rate
        )));
    }

    let n = valid.len() as f64;
    let mean = |f: fn(&Thm1Trial) -> f64| valid.iter().map(f).sum::<f64>() / n;
    let mse_standard = mean(|t| t.mse_std);
    let mse_cf = mean(|t| t.mse_cf);
    let ratio = mse_cf / mse_standard;
    let ci = bootstrap_ratio_ci(&valid, cfg.bootstrap_resamples, substream_seed(cfg.seed, u64::MAX));
    let wins = valid.iter().filter(|t| t.trinv_cf < t.trinv_std).count();
    let residual = if pooled_cf.is_empty() {
        0.0
    } else {
        second_moment_residual(&pooled_std, &pooled_cf)?
    };

    let report = Thm1Report {
        mse_standard,
        mse_cf,
        ratio,
        trials: valid.len(),
        attempts: log.len(),
        separated,
        ci95_ratio: ci,
        trace_inv_standard: mean(|t| t.trinv_std),
        trace_inv_cf: mean(|t| t.trinv_cf),
        trace_win_fraction: wins as f64 / n,
        second_moment_residual: residual,
        k: cfg.k,
        boundary_samples: m,
    };
    Ok((report, log))
}

/// Percentile bootstrap over trials for `mean(mse_cf) / mean(mse_std)`.
fn bootstrap_ratio_ci(trials: &[Thm1Trial], resamples: usize, seed: u64) -> [f64; 2] {
    let mut rng = SeededRng::new(seed);
    let n = trials.len();
    let mut ratios: Vec<f64> = (0..resamples)
        .map(|_| {
            let (mut s, mut c) = (0.0, 0.0);
            for _ in 0..n {
                let t = &trials[rng.below(n)];
                s += t.mse_std;
                c += t.mse_cf;
            }
            c / s
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let at = |q: f64| ratios[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    [at(0.025), at(0.975)]
}

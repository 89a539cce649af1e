//! Deterministic synthetic datasets and balanced few-shot subsampling.
//!
//! Every generator is a pure function of its parameters and seed; the draw
//! order is documented on each function so other implementations can
//! reproduce the output exactly from the same [`SeededRng`] stream.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::rng::SeededRng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<u8>,
    seed: u64,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<u8>, seed: u64) -> Result<Self> {
        let dim = features
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Validation("a dataset needs at least one point".into()))?;
        let ds = Self {
            dim,
            features,
            labels,
            seed,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// A dataset with no points; produced by pipelines that received no input.
    pub fn empty(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.features.len() != self.labels.len() {
            return Err(Error::Validation(format!(
                "{} feature rows but {} labels",
                self.features.len(),
                self.labels.len()
            )));
        }
        if self.dim == 0 {
            return Err(Error::Validation("feature dimension must be positive".into()));
        }
        for (i, row) in self.features.iter().enumerate() {
            if row.len() != self.dim {
                return Err(Error::Validation(format!(
                    "row {i} has {} features, expected {}",
                    row.len(),
                    self.dim
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("row {i} has a non-finite feature")));
            }
        }
        if let Some(l) = self.labels.iter().find(|&&l| l > 1) {
            return Err(Error::Validation(format!("label {l} is not 0 or 1")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], u8)> {
        self.features
            .iter()
            .map(Vec::as_slice)
            .zip(self.labels.iter().copied())
    }

    /// `[count of label 0, count of label 1]`.
    pub fn class_counts(&self) -> [usize; 2] {
        let ones = self.labels.iter().filter(|&&l| l == 1).count();
        [self.len() - ones, ones]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Validation(format!("index {i} out of range")));
            }
            features.push(self.features[i].clone());
            labels.push(self.labels[i]);
        }
        Ok(Dataset {
            dim: self.dim,
            features,
            labels,
            seed: self.seed,
        })
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim != other.dim {
            return Err(Error::Validation("cannot concatenate datasets of different dimension".into()));
        }
        let mut out = self.clone();
        out.features.extend(other.features.iter().cloned());
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    pub fn push(&mut self, x: Vec<f64>, label: u8) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::InputShape {
                expected: self.dim,
                got: x.len(),
            });
        }
        if label > 1 || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("invalid point".into()));
        }
        self.features.push(x);
        self.labels.push(label);
        Ok(())
    }

    /// Componentwise `(min, max)` over all points.
    pub fn bounding_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let first = self.features.first()?;
        let mut lo = first.clone();
        let mut hi = first.clone();
        for row in &self.features[1..] {
            for (k, &v) in row.iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        Some((lo, hi))
    }

    /// CSV with header `x1,...,xd,label`. Values use Rust's shortest
    /// round-trip decimal formatting, which is locale independent.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.dim).map(|k| format!("x{k}")).collect();
        header.push("label".into());
        wtr.write_record(&header)?;
        for (x, y) in self.iter() {
            let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, seed: u64) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let cols = headers.len();
        if cols < 2 || &headers[cols - 1] != "label" {
            return Err(Error::Validation("expected header x1,...,xd,label".into()));
        }
        for (k, h) in headers.iter().take(cols - 1).enumerate() {
            if h != format!("x{}", k + 1) {
                return Err(Error::Validation(format!("unexpected column name {h:?}")));
            }
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Validation(format!("bad number {s:?}: {e}")))
            };
            let x = rec.iter().take(cols - 1).map(parse).collect::<Result<Vec<_>>>()?;
            let y: u8 = rec[cols - 1]
                .trim()
                .parse()
                .map_err(|_| Error::Validation(format!("bad label {:?}", &rec[cols - 1])))?;
            features.push(x);
            labels.push(y);
        }
        Dataset::new(features, labels, seed)
    }
}

/// Two interleaving half circles.
///
/// Class 0 lies on `(cos t, sin t)`, class 1 on `(1 - cos t, 0.5 - sin t)`,
/// with `t` on the uniform grid of `n/2` points over `[0, pi]` (a single point
/// sits at `t = 0`). Rows are class 0 then class 1 in grid order. With
/// `noise > 0`, `noise * N(0,1)` is added to x then y of every row, in row
/// order.
pub fn gen_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::Validation(format!("moons needs a positive even n, got {n}")));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::Validation(format!("noise must be nonnegative, got {noise}")));
    }
    let half = n / 2;
    let grid = |i: usize| {
        if half == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (half - 1) as f64
        }
    };
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..half {
        let t = grid(i);
        features.push(vec![t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..half {
        let t = grid(i);
        features.push(vec![1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise > 0.0 {
        let mut rng = SeededRng::new(seed);
        for row in &mut features {
            for v in row.iter_mut() {
                *v += noise * rng.normal();
            }
        }
    }
    Dataset::new(features, labels, seed)
}

/// Logistic teacher `p(y=1|x) = sigma(w . [x; 1])`; the bias is the last entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticGroundTruth {
    pub w: Vec<f64>,
}

impl LogisticGroundTruth {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        let t = Self { w };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.len() < 2 {
            return Err(Error::Validation("ground truth needs a weight and a bias".into()));
        }
        if self.w.iter().any(|v| !v.is_finite()) || self.w.iter().all(|&v| v == 0.0) {
            return Err(Error::Validation("ground truth must be finite and nonzero".into()));
        }
        Ok(())
    }

    pub fn raw_dim(&self) -> usize {
        self.w.len() - 1
    }

    /// `w . [x; 1]`.
    pub fn logit(&self, raw: &[f64]) -> f64 {
        let d = self.raw_dim();
        self.w[..d].iter().zip(raw).map(|(a, b)| a * b).sum::<f64>() + self.w[d]
    }

    pub fn norm(&self) -> f64 {
        self.w.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `[x; 1]`.
pub fn augment(raw: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(raw.len() + 1);
    v.extend_from_slice(raw);
    v.push(1.0);
    v
}

/// Distribution of raw (unaugmented) feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSampler {
    /// `std * N(0, I_dim)`; draws `dim` normals in coordinate order.
    IsotropicGaussian { dim: usize, std: f64 },
    /// Equal mixture of `N(+center, std^2 I)` and `N(-center, std^2 I)`; draws
    /// one uniform for the sign (`< 0.5` picks `-center`), then `dim` normals.
    TwoCluster { center: Vec<f64>, std: f64 },
}

impl FeatureSampler {
    pub fn dim(&self) -> usize {
        match self {
            FeatureSampler::IsotropicGaussian { dim, .. } => *dim,
            FeatureSampler::TwoCluster { center, .. } => center.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let std = match self {
            FeatureSampler::IsotropicGaussian { std, .. } | FeatureSampler::TwoCluster { std, .. } => *std,
        };
        if self.dim() == 0 || !(std >= 0.0) || !std.is_finite() {
            return Err(Error::Validation(format!("invalid feature sampler {self:?}")));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
        match self {
            FeatureSampler::IsotropicGaussian { dim, std } => {
                (0..*dim).map(|_| std * rng.normal()).collect()
            }
            FeatureSampler::TwoCluster { center, std } => {
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                center.iter().map(|c| sign * c + std * rng.normal()).collect()
            }
        }
    }
}

fn check_sampler(truth: &LogisticGroundTruth, sampler: &FeatureSampler) -> Result<()> {
    truth.validate()?;
    sampler.validate()?;
    if sampler.dim() != truth.raw_dim() {
        return Err(Error::Validation(format!(
            "sampler draws {}-dim features but the ground truth expects {}",
            sampler.dim(),
            truth.raw_dim()
        )));
    }
    Ok(())
}

/// Labels drawn from the logistic teacher. Per point: the raw features, then
/// one uniform for the Bernoulli label.
pub fn gen_logistic(
    truth: &LogisticGroundTruth,
    n: usize,
    sampler: &FeatureSampler,
    seed: u64,
) -> Result<Dataset> {
    check_sampler(truth, sampler)?;
    let mut rng = SeededRng::new(seed);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sampler.sample(&mut rng);
        let p = sigmoid(truth.logit(&x));
        labels.push(u8::from(rng.bernoulli(p)));
        features.push(x);
    }
    if n == 0 {
        return Ok(Dataset::empty(truth.raw_dim(), seed));
    }
    Dataset::new(features, labels, seed)
}

/// Boundary-resident samples plus how far they ended up from the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySample {
    pub dataset: Dataset,
    /// Max of `|w . [x; 1]| / ||w||` right after projection.
    pub max_residual_projected: f64,
    /// The same after the norm-restoring rescale (nonzero only with a bias).
    pub max_residual_rescaled: f64,
}

/// Orthogonal projection of raw `x` onto the hyperplane `w . [x; 1] = 0`.
pub fn project_to_boundary(truth: &LogisticGroundTruth, x: &[f64]) -> Result<Vec<f64>> {
    let d = truth.raw_dim();
    let u = &truth.w[..d];
    let uu: f64 = u.iter().map(|v| v * v).sum();
    if uu == 0.0 {
        return Err(Error::Generation("ground truth has no raw-feature component; boundary is degenerate".into()));
    }
    let s = truth.logit(x) / uu;
    Ok(x.iter().zip(u).map(|(xi, ui)| xi - s * ui).collect())
}

/// Draws raw `x`, projects it onto the teacher hyperplane, then rescales the
/// projection to the pre-projection norm. Labels are Bernoulli(0.5). Per
/// point: the raw features, then one uniform for the label.
pub fn gen_boundary_cfes(
    truth: &LogisticGroundTruth,
    n: usize,
    sampler: &FeatureSampler,
    seed: u64,
) -> Result<BoundarySample> {
    check_sampler(truth, sampler)?;
    let norm_w = truth.norm();
    let mut rng = SeededRng::new(seed);
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut max_pre = 0.0_f64;
    let mut max_post = 0.0_f64;
    for _ in 0..n {
        let x = sampler.sample(&mut rng);
        let projected = project_to_boundary(truth, &x)?;
        max_pre = max_pre.max(truth.logit(&projected).abs() / norm_w);
        let target = l2(&x);
        let current = l2(&projected);
        let rescaled = if current > 0.0 {
            projected.iter().map(|v| v * target / current).collect()
        } else {
            projected
        };
        max_post = max_post.max(truth.logit(&rescaled).abs() / norm_w);
        labels.push(u8::from(rng.bernoulli(0.5)));
        features.push(rescaled);
    }
    let dataset = if n == 0 {
        Dataset::empty(truth.raw_dim(), seed)
    } else {
        Dataset::new(features, labels, seed)?
    };
    Ok(BoundarySample {
        dataset,
        max_residual_projected: max_pre,
        max_residual_rescaled: max_post,
    })
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `||E[x x^T] - E[c c^T]||_F / ||E[x x^T]||_F` over augmented vectors `[x; 1]`.
pub fn second_moment_residual(xs: &[Vec<f64>], cs: &[Vec<f64>]) -> Result<f64> {
    if xs.is_empty() || cs.is_empty() {
        return Err(Error::Validation("second moments need nonempty samples".into()));
    }
    let d = xs[0].len() + 1;
    let moment = |rows: &[Vec<f64>]| {
        let mut m = vec![0.0; d * d];
        for r in rows {
            let a = augment(r);
            for i in 0..d {
                for j in 0..d {
                    m[i * d + j] += a[i] * a[j];
                }
            }
        }
        let n = rows.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    };
    let mx = moment(xs);
    let mc = moment(cs);
    let num: f64 = mx.iter().zip(&mc).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = mx.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(num / den)
}

/// Row indices of a balanced `k`-shot draw: `k/2` per class without
/// replacement. Each class's indices (in dataset order) are shuffled with one
/// stream, class 0 first, and the first `k/2` kept.
pub fn few_shot_indices(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k % 2 != 0 {
        return Err(Error::Validation(format!("k must be a positive even number, got {k}")));
    }
    let per_class = k / 2;
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::with_capacity(k);
    for class in 0..2u8 {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if idx.len() < per_class {
            return Err(Error::Sampling(format!(
                "class {class} has {} points, {per_class} requested",
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        out.extend_from_slice(&idx[..per_class]);
    }
    Ok(out)
}

pub fn few_shot_sample(ds: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    let idx = few_shot_indices(ds, k, seed)?;
    let mut out = ds.subset(&idx)?;
    out.seed = seed;
    Ok(out)
}

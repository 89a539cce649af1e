//! Seeded, file-producing runs of the four studies.
//!
//! A run takes an [`ExperimentConfig`], fans its seeds out in parallel, and
//! writes everything under `output_dir`:
//!
//! ```text
//! summary.json        RunSummary (config echo, per-seed metrics, aggregates)
//! metrics.csv         one row per successful seed
//! manifest.json       config echo plus sha256 of every artifact
//! seed_<s>/...        per-seed CSV and JSON artifacts
//! ```
//!
//! Metric files depend only on the config, so reruns are byte-identical.

mod output;
mod studies;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfe::CfeConfig;
use crate::data::LogisticGroundTruth;
use crate::distill::{DistillConfig, SoftLabelMode, SupervisedConfig};
use crate::fisher::Thm1Config;
use crate::geometry::{DEFAULT_LEVEL_TOL, DEFAULT_RESOLUTION};
use crate::nn::{Activation, LossWeights, MlpSpec};
use crate::{Error, Result};

pub use output::{sha256_file, Manifest, ManifestEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Moons,
    Fisher,
    Bound,
    Ablation,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Moons => "moons",
            ExperimentKind::Fisher => "fisher",
            ExperimentKind::Bound => "bound",
            ExperimentKind::Ablation => "ablation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    /// Few-shot budget per arm.
    pub k: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 1000,
            noise: 0.2,
            k: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_sizes: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl ModelConfig {
    pub fn spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(self.layer_sizes.clone(), self.activation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub model: ModelConfig,
    pub train: SupervisedConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                layer_sizes: vec![2, 64, 64, 2],
                activation: Activation::Relu,
            },
            train: SupervisedConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub resolution: usize,
    pub level_tol: f64,
    pub a2_slack: f64,
    /// Emit `grid_<model>.csv` probability grids.
    pub write_grids: bool,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            level_tol: DEFAULT_LEVEL_TOL,
            a2_slack: 0.0,
            write_grids: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FisherConfig {
    /// Logistic ground truth, bias last.
    pub truth: Vec<f64>,
    pub experiment: Thm1Config,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            truth: vec![1.0, -1.0, 0.0],
            experiment: Thm1Config::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmsConfig {
    pub standard: bool,
    pub cod: bool,
}

impl Default for ArmsConfig {
    fn default() -> Self {
        Self {
            standard: true,
            cod: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub ks: Vec<usize>,
    pub modes: Vec<SoftLabelMode>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            ks: vec![8, 16, 32],
            modes: vec![SoftLabelMode::Teacher, SoftLabelMode::None, SoftLabelMode::Random],
        }
    }
}

/// Distillation settings the bound study uses in place of `distill`'s loss
/// weights and epoch count. The bound assumes the student reproduces the
/// teacher on every pair point, which plain `alpha = 1` cannot deliver: a
/// counterfactual's hard label pulls the student away from the teacher's
/// near-0.5 output there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundStudyConfig {
    pub loss_weights: LossWeights,
    pub epochs: usize,
}

impl Default for BoundStudyConfig {
    fn default() -> Self {
        Self {
            loss_weights: LossWeights { alpha: 49.0, beta: 0.0 },
            epochs: 1500,
        }
    }
}

/// One JSON document describing a run. Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: ModelConfig,
    pub cfe: CfeConfig,
    pub distill: DistillConfig,
    pub geometry: GeometryConfig,
    pub fisher: FisherConfig,
    pub arms: ArmsConfig,
    pub ablation: AblationConfig,
    pub bound: BoundStudyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::Moons,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            student: ModelConfig {
                layer_sizes: vec![2, 16, 2],
                activation: Activation::Relu,
            },
            cfe: CfeConfig::default(),
            distill: DistillConfig::default(),
            geometry: GeometryConfig::default(),
            fisher: FisherConfig::default(),
            arms: ArmsConfig::default(),
            ablation: AblationConfig::default(),
            bound: BoundStudyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `distill` with the bound study's loss weights and epochs.
    pub fn bound_distill(&self) -> DistillConfig {
        DistillConfig {
            loss_weights: self.bound.loss_weights,
            epochs: self.bound.epochs,
            ..self.distill.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        match self.experiment {
            ExperimentKind::Fisher => {
                let truth = LogisticGroundTruth::new(self.fisher.truth.clone())?;
                self.fisher.experiment.validate(&truth)
            }
            _ => {
                let d = &self.data;
                if d.k == 0 || d.k % 2 != 0 || d.n_train < 2 || d.n_test == 0 || !(d.noise >= 0.0) {
                    return Err(Error::Config(format!("invalid data settings: {d:?}")));
                }
                let t = self.teacher.model.spec()?;
                let s = self.student.spec()?;
                if t.input_dim() != 2 || s.input_dim() != 2 {
                    return Err(Error::Config("moons models take 2-D inputs".into()));
                }
                let needs_cod = self.arms.cod || self.experiment == ExperimentKind::Bound;
                if needs_cod && self.experiment != ExperimentKind::Ablation && d.k % 4 != 0 {
                    return Err(Error::Config(format!(
                        "the counterfactual arm splits k into k/2 balanced originals, so k must be a multiple of 4; got {}",
                        d.k
                    )));
                }
                self.cfe.validate()?;
                self.distill.validate()?;
                if self.experiment == ExperimentKind::Bound {
                    self.bound_distill().validate()?;
                }
                if self.geometry.resolution < 2 || !(self.geometry.level_tol > 0.0) || !(self.geometry.a2_slack >= 0.0) {
                    return Err(Error::Config(format!("invalid geometry settings: {:?}", self.geometry)));
                }
                if self.experiment == ExperimentKind::Ablation {
                    if self.ablation.ks.is_empty() || self.ablation.modes.is_empty() {
                        return Err(Error::Config("ablation needs at least one k and one mode".into()));
                    }
                    if let Some(k) = self.ablation.ks.iter().find(|&&k| k == 0 || k % 4 != 0) {
                        return Err(Error::Config(format!("ablation k must be a positive multiple of 4, got {k}")));
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedError {
    pub kind: String,
    pub message: String,
}

impl From<&Error> for SeedError {
    fn from(e: &Error) -> Self {
        Self {
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    /// Structured per-seed reports (bound checks, Monte-Carlo reports, ...).
    pub reports: BTreeMap<String, serde_json::Value>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub error: Option<SeedError>,
}

impl SeedEntry {
    fn new(seed: u64) -> Self {
        Self {
            seed,
            metrics: BTreeMap::new(),
            reports: BTreeMap::new(),
            artifacts: Vec::new(),
            error: None,
        }
    }

    fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    fn flag(&mut self, name: &str, value: bool) {
        self.metric(name, if value { 1.0 } else { 0.0 });
    }

    fn report<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.reports.insert(name.to_string(), serde_json::to_value(value)?);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
}

impl Aggregate {
    /// Mean and median of finite values; `None` when there are none.
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Some(Self {
            n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: ExperimentKind,
    pub config: ExperimentConfig,
    /// Sorted by seed.
    pub seeds: Vec<SeedEntry>,
    /// Per metric, over the seeds that finished.
    pub aggregates: BTreeMap<String, Aggregate>,
    pub artifacts: Vec<String>,
}

impl RunSummary {
    pub fn entry(&self, seed: u64) -> Option<&SeedEntry> {
        self.seeds.iter().find(|e| e.seed == seed)
    }

    /// Values of one metric over the finished seeds, in seed order.
    pub fn metric_values(&self, name: &str) -> Vec<f64> {
        self.seeds
            .iter()
            .filter(|e| e.error.is_none())
            .filter_map(|e| e.metrics.get(name).copied())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn aggregate_entries(entries: &[SeedEntry]) -> BTreeMap<String, Aggregate> {
    let names: BTreeSet<&String> = entries
        .iter()
        .filter(|e| e.error.is_none())
        .flat_map(|e| e.metrics.keys())
        .collect();
    names
        .into_iter()
        .filter_map(|name| {
            let values: Vec<f64> = entries
                .iter()
                .filter(|e| e.error.is_none())
                .filter_map(|e| e.metrics.get(name).copied())
                .collect();
            Aggregate::of(&values).map(|a| (name.clone(), a))
        })
        .collect()
}

/// Runs the configured study and writes its artifacts.
///
/// A failing seed is recorded in its entry and does not stop the others;
/// configuration and I/O problems abort the run.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out)?;

    let mut seeds = cfg.seeds.clone();
    seeds.sort_unstable();
    let entries: Vec<SeedEntry> = seeds
        .par_iter()
        .map(|&seed| {
            let mut entry = SeedEntry::new(seed);
            let dir = format!("seed_{seed}");
            let result = std::fs::create_dir_all(out.join(&dir))
                .map_err(Error::from)
                .and_then(|()| {
                    let mut sink = output::Sink::new(&out, &dir);
                    let r = match cfg.experiment {
                        ExperimentKind::Moons => studies::moons_seed(cfg, seed, &mut entry, &mut sink),
                        ExperimentKind::Fisher => studies::fisher_seed(cfg, seed, &mut entry, &mut sink),
                        ExperimentKind::Bound => studies::bound_seed(cfg, seed, &mut entry, &mut sink),
                        ExperimentKind::Ablation => studies::ablation_seed(cfg, seed, &mut entry, &mut sink),
                    };
                    entry.artifacts = sink.into_files();
                    r
                });
            if let Err(e) = result {
                if matches!(e, Error::Io(_)) {
                    return Err(e);
                }
                entry.metrics.clear();
                entry.error = Some(SeedError::from(&e));
            }
            Ok(entry)
        })
        .collect::<Result<_>>()?;

    output::finish(cfg, &out, entries)
}

/// Reads `summary.json` back from a run directory.
pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    RunSummary::from_json(&std::fs::read_to_string(dir.join("summary.json"))?)
}

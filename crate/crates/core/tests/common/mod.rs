#![allow(dead_code)]

use std::path::Path;

use cod_core::data::{gen_moons, Dataset};
use cod_core::distill::{train_supervised, SupervisedConfig};
use cod_core::experiments::{ExperimentConfig, ExperimentKind};
use cod_core::nn::{Activation, MlpModel, MlpSpec};
use cod_core::rng::SeededRng;

pub fn random_mlp(sizes: &[usize], act: Activation, seed: u64) -> MlpModel {
    let spec = MlpSpec::new(sizes.to_vec(), act).unwrap();
    MlpModel::init(spec, &mut SeededRng::new(seed)).unwrap()
}

/// A moons teacher trained briefly on a small sample; good enough for
/// geometry and counterfactual tests.
pub fn small_moons_teacher(seed: u64) -> (MlpModel, Dataset) {
    let ds = gen_moons(600, 0.2, seed).unwrap();
    let init = random_mlp(&[2, 32, 32, 2], Activation::Relu, seed ^ 0xabc);
    let cfg = SupervisedConfig {
        epochs: 40,
        seed,
        ..SupervisedConfig::default()
    };
    let (teacher, _) = train_supervised(&init, &ds, &cfg).unwrap();
    (teacher, ds)
}

/// A scaled-down config for exercising the harness end to end.
pub fn small_config(kind: ExperimentKind, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        experiment: kind,
        seeds: vec![3, 1],
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.data.n_train = 300;
    cfg.data.n_test = 200;
    cfg.data.k = 16;
    cfg.teacher.model.layer_sizes = vec![2, 16, 16, 2];
    cfg.teacher.train.epochs = 40;
    cfg.distill.epochs = 60;
    cfg.bound.epochs = 60;
    cfg.geometry.resolution = 40;
    cfg.ablation.ks = vec![8];
    cfg.fisher.experiment.trials = 40;
    cfg.fisher.experiment.bootstrap_resamples = 200;
    cfg
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// The teacher the moons study trains for `seed` under the default config.
pub fn default_moons_teacher(seed: u64) -> (MlpModel, Dataset) {
    use cod_core::rng::substream_seed;
    let cfg = ExperimentConfig::default();
    let ds = gen_moons(cfg.data.n_train, cfg.data.noise, substream_seed(seed, 1)).unwrap();
    let init = MlpModel::init(cfg.teacher.model.spec().unwrap(), &mut SeededRng::new(substream_seed(seed, 3))).unwrap();
    let tcfg = SupervisedConfig {
        seed: substream_seed(seed, 4),
        ..cfg.teacher.train.clone()
    };
    let (teacher, _) = train_supervised(&init, &ds, &tcfg).unwrap();
    (teacher, ds)
}

/// `p1 = sigmoid(x1)`: logits `[0, x1]`.
pub fn linear_teacher() -> MlpModel {
    let spec = MlpSpec::new(vec![2, 2], Activation::Relu).unwrap();
    MlpModel::from_parts(spec, vec![vec![0.0, 0.0, 1.0, 0.0]], vec![vec![0.0, 0.0]]).unwrap()
}

/// A model whose class-1 probability is `p` everywhere.
pub fn constant_model(p: f64) -> MlpModel {
    let spec = MlpSpec::new(vec![2, 2], Activation::Relu).unwrap();
    let logit = (p / (1.0 - p)).ln();
    MlpModel::from_parts(spec, vec![vec![0.0; 4]], vec![vec![0.0, logit]]).unwrap()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

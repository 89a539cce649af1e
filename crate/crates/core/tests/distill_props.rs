mod common;

use cod_core::cfe::{build_cfe_dataset, CfeConfig};
use cod_core::data::few_shot_sample;
use cod_core::distill::{distill, make_batches, soft_targets, DistillConfig, SoftLabelMode};
use cod_core::nn::{Activation, LossWeights, MlpModel};
use cod_core::rng::substream_seed;
use common::{random_mlp, small_moons_teacher};
use std::collections::HashSet;

fn param_bits(m: &MlpModel) -> Vec<u64> {
    m.flat_params().iter().map(|v| v.to_bits()).collect()
}

fn quick(alpha: f64, beta: f64, seed: u64) -> DistillConfig {
    DistillConfig {
        loss_weights: LossWeights { alpha, beta },
        epochs: 40,
        batch_size: 8,
        seed,
        ..DistillConfig::default()
    }
}

fn cod_fixture(seed: u64) -> (MlpModel, cod_core::cfe::CfeBuild) {
    let (teacher, ds) = small_moons_teacher(seed);
    let d_half = few_shot_sample(&ds, 10, seed).unwrap();
    let build = build_cfe_dataset(&teacher, &d_half, &CfeConfig::default()).unwrap();
    (teacher, build)
}

#[test]
fn teacher_parameters_are_untouched() {
    let (teacher, build) = cod_fixture(1);
    let before = param_bits(&teacher);
    let student = random_mlp(&[2, 16, 2], Activation::Relu, 9);
    distill(&teacher, &student, &build.train_set, &build.pair_rows, &quick(1.0, 0.5, 2)).unwrap();
    assert_eq!(before, param_bits(&teacher));
}

#[test]
fn identical_inputs_give_bitwise_identical_students() {
    let (teacher, build) = cod_fixture(2);
    let student = random_mlp(&[2, 16, 2], Activation::Relu, 4);
    let cfg = quick(1.0, 0.3, 7);
    let (a, ha) = distill(&teacher, &student, &build.train_set, &build.pair_rows, &cfg).unwrap();
    let (b, hb) = distill(&teacher, &student, &build.train_set, &build.pair_rows, &cfg).unwrap();
    assert_eq!(param_bits(&a), param_bits(&b));
    assert_eq!(ha, hb);
    let (c, _) = distill(&teacher, &student, &build.train_set, &build.pair_rows, &quick(1.0, 0.3, 8)).unwrap();
    assert_ne!(param_bits(&a), param_bits(&c));
}

#[test]
fn recorded_total_decomposes_into_weighted_terms() {
    let (teacher, build) = cod_fixture(3);
    let student = random_mlp(&[2, 16, 2], Activation::Tanh, 5);
    for (alpha, beta) in [(0.0, 0.0), (1.0, 0.0), (0.7, 0.2), (2.5, 1.5)] {
        let (_, h) = distill(&teacher, &student, &build.train_set, &build.pair_rows, &quick(alpha, beta, 1)).unwrap();
        for e in &h.epochs {
            let expect = e.hard + alpha * e.kd + beta * e.lwd;
            assert!((e.total - expect).abs() <= 1e-12, "alpha {alpha} beta {beta} epoch {}", e.epoch);
            if alpha == 0.0 && beta == 0.0 {
                assert!((e.total - e.hard).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn frozen_copy_of_the_teacher_has_no_kd_loss() {
    let (teacher, build) = cod_fixture(4);
    let cfg = DistillConfig {
        lr: 0.0,
        ..quick(1.0, 0.0, 3)
    };
    let (student, h) = distill(&teacher, &teacher, &build.train_set, &build.pair_rows, &cfg).unwrap();
    assert_eq!(param_bits(&student), param_bits(&teacher));
    let first = h.epochs[0].kd;
    assert!(first.abs() <= 1e-9);
    assert!(h.epochs.iter().all(|e| e.kd <= first + 1e-6));
    assert_eq!(h.max_prob_gap, 0.0);
}

#[test]
fn coupled_batches_keep_every_pair_together_in_every_epoch() {
    let (teacher, build) = cod_fixture(5);
    let cfg = quick(1.0, 0.0, 11);
    for epoch in 0..cfg.epochs {
        let batches = make_batches(
            build.train_set.len(),
            &build.pair_rows,
            cfg.batch_size,
            true,
            substream_seed(cfg.seed, epoch as u64),
        )
        .unwrap();
        let mut seen = HashSet::new();
        for b in &batches {
            assert!(b.len() <= cfg.batch_size);
            seen.extend(b.iter().copied());
            for &(o, c) in &build.pair_rows {
                assert_eq!(b.contains(&o), b.contains(&c), "epoch {epoch}: pair ({o}, {c}) split");
            }
        }
        assert_eq!(seen.len(), build.train_set.len());
    }
    let _ = teacher;
}

#[test]
fn counterfactual_labels_flip_the_originals() {
    let (_, build) = cod_fixture(6);
    let labels = build.train_set.labels();
    for &(o, c) in &build.pair_rows {
        assert_eq!(labels[c], 1 - labels[o]);
    }
}

#[test]
fn teacher_targets_equal_the_teacher_softmax_and_random_targets_are_stable() {
    let (teacher, ds) = small_moons_teacher(7);
    for x in ds.features().iter().take(50) {
        let t = soft_targets(&teacher, x, SoftLabelMode::Teacher, 0).unwrap();
        assert_eq!(t, teacher.forward(x).unwrap().probs);
        let r1 = soft_targets(&teacher, x, SoftLabelMode::Random, 3).unwrap();
        let r2 = soft_targets(&teacher, x, SoftLabelMode::Random, 3).unwrap();
        assert_eq!(r1, r2);
        assert!((r1[0] + r1[1] - 1.0).abs() < 1e-12 && r1[0] >= 0.0 && r1[1] >= 0.0);
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let (teacher, build) = cod_fixture(8);
    let student = random_mlp(&[2, 16, 2], Activation::Relu, 1);
    let odd = DistillConfig {
        batch_size: 5,
        ..quick(1.0, 0.0, 0)
    };
    let none_with_kd = DistillConfig {
        soft_label_mode: SoftLabelMode::None,
        ..quick(1.0, 0.0, 0)
    };
    for cfg in [odd, none_with_kd] {
        let err = distill(&teacher, &student, &build.train_set, &build.pair_rows, &cfg).unwrap_err();
        assert_eq!(err.kind(), "config");
    }
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let (teacher, build) = cod_fixture(9);
    let student = random_mlp(&[2, 16, 2], Activation::Relu, 1);
    let cfg = DistillConfig {
        lr: 1e300,
        optimizer: cod_core::nn::Optimizer::Sgd,
        ..quick(1.0, 0.0, 0)
    };
    match distill(&teacher, &student, &build.train_set, &build.pair_rows, &cfg) {
        Err(cod_core::Error::TrainingDiverged { epoch }) => assert!(epoch.is_some()),
        other => panic!("expected divergence, got {other:?}"),
    }
}

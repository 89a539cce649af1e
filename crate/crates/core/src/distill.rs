//! The distillation loop: hard-label cross-entropy, KL toward teacher soft
//! labels, and an optional hidden-state alignment, minimized jointly with
//! pair-coupled mini-batches.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::nn::{
    backward, backward_with_hidden, cross_entropy, cross_entropy_grad, kl_div, kl_grad,
    lwd_backward, ForwardTrace, Gradients, LossWeights, LwdAlignment, MlpModel, Optimizer,
    OptimizerState, Projection,
};
use crate::rng::{splitmix64, SeededRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftLabelMode {
    /// Teacher softmax.
    Teacher,
    /// No soft labels; requires `alpha = 0`.
    None,
    /// A uniform draw on the simplex, fixed per point for the whole run.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub loss_weights: LossWeights,
    /// Zero freezes the student; the loop still records losses.
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub pair_coupling: bool,
    pub soft_label_mode: SoftLabelMode,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            loss_weights: LossWeights::default(),
            lr: 0.05,
            epochs: 500,
            batch_size: 32,
            pair_coupling: true,
            soft_label_mode: SoftLabelMode::Teacher,
            optimizer: Optimizer::adam(),
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be nonnegative, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.pair_coupling && (self.batch_size < 2 || self.batch_size % 2 != 0) {
            return Err(Error::Config(format!(
                "pair coupling needs an even batch size of at least 2, got {}",
                self.batch_size
            )));
        }
        if self.soft_label_mode == SoftLabelMode::None && self.loss_weights.alpha > 0.0 {
            return Err(Error::Config("soft_label_mode none requires alpha = 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub hard: f64,
    pub kd: f64,
    pub lwd: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean per-point losses seen during each epoch, before that batch's update.
    pub epochs: Vec<EpochLosses>,
    /// Max over training points of `|f_s - f_t|` after the last epoch.
    pub max_prob_gap: f64,
}

impl TrainHistory {
    /// CSV with header `epoch,hard,kd,lwd,total`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["epoch", "hard", "kd", "lwd", "total"])?;
        for e in &self.epochs {
            wtr.write_record([
                e.epoch.to_string(),
                e.hard.to_string(),
                e.kd.to_string(),
                e.lwd.to_string(),
                e.total.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Splits `0..n` into batches for one epoch.
///
/// With coupling, each `(original, counterfactual)` row pair is an atomic unit
/// and rows not in any pair are singleton units; units are shuffled and packed
/// greedily so no pair straddles a batch. Without coupling, rows are shuffled
/// and chunked.
pub fn make_batches(
    n: usize,
    pair_rows: &[(usize, usize)],
    batch_size: usize,
    pair_coupling: bool,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = SeededRng::new(seed);
    if !pair_coupling {
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        return Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect());
    }
    if batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "pair coupling needs an even batch size, got {batch_size}"
        )));
    }
    let mut paired = vec![false; n];
    let mut units: Vec<Vec<usize>> = Vec::with_capacity(n);
    for &(a, b) in pair_rows {
        if a >= n || b >= n || paired[a] || paired[b] || a == b {
            return Err(Error::Validation(format!("invalid row pair ({a}, {b})")));
        }
        paired[a] = true;
        paired[b] = true;
        units.push(vec![a, b]);
    }
    units.extend((0..n).filter(|&i| !paired[i]).map(|i| vec![i]));
    rng.shuffle(&mut units);

    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::with_capacity(batch_size);
    for unit in units {
        if current.len() + unit.len() > batch_size {
            batches.push(std::mem::take(&mut current));
        }
        current.extend(unit);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// Soft target for one point. `Random` seeds a stream from `seed` and the
/// bits of `x`, so the same point always gets the same target.
pub fn soft_targets(teacher: &MlpModel, x: &[f64], mode: SoftLabelMode, seed: u64) -> Result<[f64; 2]> {
    match mode {
        SoftLabelMode::Teacher => Ok(teacher.forward(x)?.probs),
        SoftLabelMode::Random => {
            let s = x.iter().fold(splitmix64(seed), |h, v| splitmix64(h ^ v.to_bits()));
            let u = SeededRng::new(s).uniform();
            Ok([1.0 - u, u])
        }
        SoftLabelMode::None => Ok([0.5, 0.5]),
    }
}

struct Prepared {
    teacher_traces: Vec<ForwardTrace>,
    targets: Vec<[f64; 2]>,
}

fn prepare(teacher: &MlpModel, train: &Dataset, cfg: &DistillConfig) -> Result<Prepared> {
    let mut teacher_traces = Vec::with_capacity(train.len());
    let mut targets = Vec::with_capacity(train.len());
    for (x, _) in train.iter() {
        teacher_traces.push(teacher.forward(x)?);
        targets.push(soft_targets(teacher, x, cfg.soft_label_mode, cfg.seed)?);
    }
    Ok(Prepared {
        teacher_traces,
        targets,
    })
}

/// Hidden-state alignment between the last hidden layers, with a learned
/// projection initialized from `seed` (identity when the widths agree).
pub fn default_alignment(teacher: &MlpModel, student: &MlpModel, seed: u64) -> Result<LwdAlignment> {
    let (tl, sl) = match (teacher.last_hidden(), student.last_hidden()) {
        (Some(t), Some(s)) => (t, s),
        _ => return Err(Error::Config("layer-wise distillation needs hidden layers on both models".into())),
    };
    let td = teacher.hidden_dim(tl).unwrap();
    let sd = student.hidden_dim(sl).unwrap();
    let projection = if td == sd {
        Projection::identity(td)
    } else {
        Projection::init(td, sd, &mut SeededRng::substream(seed, 0x1d))
    };
    Ok(LwdAlignment {
        teacher_layer: tl,
        student_layer: sl,
        projection: Some(projection),
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct LossSums {
    hard: f64,
    kd: f64,
    lwd: f64,
    total: f64,
}

/// Per-point losses of the student on one row, plus gradients when asked.
fn point_loss(
    student: &MlpModel,
    x: &[f64],
    y: u8,
    teacher_trace: &ForwardTrace,
    target: [f64; 2],
    weights: LossWeights,
    alignment: Option<&LwdAlignment>,
    want_grads: bool,
) -> Result<(LossSums, Option<(Gradients, Option<Vec<f64>>)>)> {
    let trace = student.forward(x)?;
    if !trace.probs.iter().all(|p| p.is_finite()) {
        return Err(Error::TrainingDiverged { epoch: None });
    }
    let hard = cross_entropy(trace.probs, y)?;
    let kd = if weights.alpha > 0.0 {
        kl_div(target, trace.probs)?
    } else {
        0.0
    };
    let lwd_grad = match alignment {
        Some(a) if weights.beta > 0.0 => Some(lwd_backward(teacher_trace, &trace, std::slice::from_ref(a))?),
        _ => None,
    };
    let lwd = lwd_grad.as_ref().map_or(0.0, |g| g.value);
    let sums = LossSums {
        hard,
        kd,
        lwd,
        total: weights.combine(hard, kd, lwd),
    };
    if !want_grads {
        return Ok((sums, None));
    }
    let mut d_logits = cross_entropy_grad(trace.probs, y)?;
    if weights.alpha > 0.0 {
        let g = kl_grad(target, trace.probs);
        d_logits[0] += weights.alpha * g[0];
        d_logits[1] += weights.alpha * g[1];
    }
    let (grads, proj_grad) = match lwd_grad {
        Some(mut g) => {
            let hidden: Vec<(usize, Vec<f64>)> = g
                .student_hidden
                .drain(..)
                .map(|(l, v)| (l, v.into_iter().map(|d| weights.beta * d).collect()))
                .collect();
            let refs: Vec<(usize, &[f64])> = hidden.iter().map(|(l, v)| (*l, v.as_slice())).collect();
            let grads = backward_with_hidden(student, &trace, d_logits, &refs)?;
            let proj = g
                .projections
                .pop()
                .flatten()
                .map(|p| p.into_iter().map(|d| weights.beta * d).collect());
            (grads, proj)
        }
        None => (backward(student, &trace, d_logits)?, None),
    };
    Ok((sums, Some((grads, proj_grad))))
}

/// Trains `student` toward `teacher` on `train_set`; `pair_rows` links each
/// original row with its counterfactual row for batch coupling and may be empty.
///
/// The teacher is only read. Runs are bitwise reproducible for fixed inputs,
/// config, and seed.
pub fn distill(
    teacher: &MlpModel,
    student: &MlpModel,
    train_set: &Dataset,
    pair_rows: &[(usize, usize)],
    cfg: &DistillConfig,
) -> Result<(MlpModel, TrainHistory)> {
    cfg.validate()?;
    if teacher.input_dim() != student.input_dim() || train_set.dim() != student.input_dim() {
        return Err(Error::Config("teacher, student and data must share the input dimension".into()));
    }
    if train_set.is_empty() {
        return Err(Error::Validation("cannot distill on an empty training set".into()));
    }
    let mut student = student.clone();
    let mut alignment = if cfg.loss_weights.beta > 0.0 {
        Some(default_alignment(teacher, &student, cfg.seed)?)
    } else {
        None
    };
    let prepared = prepare(teacher, train_set, cfg)?;
    let mut opt = OptimizerState::new(cfg.optimizer, student.spec().num_params());
    let mut proj_opt = alignment
        .as_ref()
        .and_then(|a| a.projection.as_ref())
        .map(|p| OptimizerState::new(cfg.optimizer, p.weights.len()));

    let n = train_set.len();
    let features = train_set.features();
    let labels = train_set.labels();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let batches = make_batches(
            n,
            pair_rows,
            cfg.batch_size,
            cfg.pair_coupling,
            crate::rng::substream_seed(cfg.seed, epoch as u64),
        )?;
        let mut sums = LossSums::default();
        for batch in &batches {
            let scale = 1.0 / batch.len() as f64;
            let mut acc = Gradients::zeros_like(&student);
            let mut proj_acc: Option<Vec<f64>> = None;
            for &i in batch {
                let (l, g) = point_loss(
                    &student,
                    &features[i],
                    labels[i],
                    &prepared.teacher_traces[i],
                    prepared.targets[i],
                    cfg.loss_weights,
                    alignment.as_ref(),
                    cfg.lr > 0.0,
                )
                .map_err(|e| match e {
                    Error::TrainingDiverged { .. } => Error::TrainingDiverged { epoch: Some(epoch) },
                    other => other,
                })?;
                sums.hard += l.hard;
                sums.kd += l.kd;
                sums.lwd += l.lwd;
                sums.total += l.total;
                if let Some((g, pg)) = g {
                    acc.add_scaled(&g, scale);
                    if let Some(pg) = pg {
                        let dst = proj_acc.get_or_insert_with(|| vec![0.0; pg.len()]);
                        for (d, s) in dst.iter_mut().zip(&pg) {
                            *d += scale * s;
                        }
                    }
                }
            }
            if !sums.total.is_finite() {
                return Err(Error::TrainingDiverged { epoch: Some(epoch) });
            }
            if cfg.lr > 0.0 {
                crate::nn::optimizer_step(&mut student, &acc, &mut opt, cfg.lr).map_err(|e| match e {
                    Error::TrainingDiverged { .. } => Error::TrainingDiverged { epoch: Some(epoch) },
                    other => other,
                })?;
                if let (Some(pg), Some(st), Some(p)) = (
                    proj_acc,
                    proj_opt.as_mut(),
                    alignment.as_mut().and_then(|a| a.projection.as_mut()),
                ) {
                    st.update(&mut p.weights, &pg, cfg.lr)
                        .map_err(|_| Error::TrainingDiverged { epoch: Some(epoch) })?;
                }
            }
        }
        let inv = 1.0 / n as f64;
        history.push(EpochLosses {
            epoch,
            hard: sums.hard * inv,
            kd: sums.kd * inv,
            lwd: sums.lwd * inv,
            total: sums.total * inv,
        });
    }

    let mut max_prob_gap = 0.0_f64;
    for (i, (x, _)) in train_set.iter().enumerate() {
        let gap = (student.prob1(x)? - prepared.teacher_traces[i].probs[1]).abs();
        max_prob_gap = max_prob_gap.max(gap);
    }
    Ok((
        student,
        TrainHistory {
            epochs: history,
            max_prob_gap,
        },
    ))
}

/// Plain supervised training settings (used for teachers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 60,
            batch_size: 64,
            optimizer: Optimizer::adam(),
            seed: 0,
        }
    }
}

/// Cross-entropy training without a teacher; the same loop with `alpha = beta = 0`.
pub fn train_supervised(model: &MlpModel, ds: &Dataset, cfg: &SupervisedConfig) -> Result<(MlpModel, TrainHistory)> {
    let dcfg = DistillConfig {
        loss_weights: LossWeights { alpha: 0.0, beta: 0.0 },
        lr: cfg.lr,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        pair_coupling: false,
        soft_label_mode: SoftLabelMode::None,
        optimizer: cfg.optimizer,
        seed: cfg.seed,
    };
    distill(model, model, ds, &[], &dcfg)
}

pub fn accuracy(model: &MlpModel, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Validation("accuracy of an empty dataset".into()));
    }
    let mut correct = 0usize;
    for (x, y) in ds.iter() {
        if model.predict(x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

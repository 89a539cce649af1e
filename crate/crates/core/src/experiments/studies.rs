use serde::Serialize;

use super::output::Sink;
use super::{ExperimentConfig, SeedEntry};
use crate::cfe::{build_cfe_dataset, write_pairs_csv, CfeBuild, CfeConfig};
use crate::data::{few_shot_sample, gen_moons, Dataset, LogisticGroundTruth};
use crate::distill::{accuracy, distill, train_supervised, DistillConfig, SoftLabelMode, SupervisedConfig, TrainHistory};
use crate::fisher::{thm1_experiment, write_trials_csv, Thm1Config};
use crate::geometry::{bound_from_sets, extract_boundary, hausdorff_sets, write_probability_grid, BoundarySet, Region};
use crate::nn::MlpModel;
use crate::rng::{substream_seed, SeededRng};
use crate::Result;

const DATA: u64 = 1;
const TEST: u64 = 2;
const TEACHER_INIT: u64 = 3;
const TEACHER_TRAIN: u64 = 4;
const FEW_SHOT: u64 = 5;
const STUDENT_INIT: u64 = 6;
const DISTILL: u64 = 7;
const CFE: u64 = 8;

/// Largest `max |f_s - f_t|` over the training points for which a trained
/// student counts as matching its teacher.
pub const MATCH_RESIDUAL: f64 = 0.05;

struct Base {
    train: Dataset,
    test: Dataset,
    teacher: MlpModel,
    region: Region,
}

fn base(cfg: &ExperimentConfig, seed: u64, entry: &mut SeedEntry, sink: &mut Sink) -> Result<Base> {
    let d = &cfg.data;
    let train = gen_moons(d.n_train, d.noise, substream_seed(seed, DATA))?;
    let test = gen_moons(d.n_test, d.noise, substream_seed(seed, TEST))?;
    let init = MlpModel::init(cfg.teacher.model.spec()?, &mut SeededRng::new(substream_seed(seed, TEACHER_INIT)))?;
    let tcfg = SupervisedConfig {
        seed: substream_seed(seed, TEACHER_TRAIN),
        ..cfg.teacher.train.clone()
    };
    let (teacher, _) = train_supervised(&init, &train, &tcfg)?;
    entry.metric("teacher_accuracy", accuracy(&teacher, &test)?);
    let json = teacher.to_json()?;
    sink.write("teacher.json", |w| Ok(w.write_all(json.as_bytes())?))?;
    Ok(Base {
        region: Region::around(&train)?,
        train,
        test,
        teacher,
    })
}

fn student_init(cfg: &ExperimentConfig, seed: u64) -> Result<MlpModel> {
    MlpModel::init(cfg.student.spec()?, &mut SeededRng::new(substream_seed(seed, STUDENT_INIT)))
}

fn distill_cfg(template: &DistillConfig, seed: u64, mode: SoftLabelMode) -> DistillConfig {
    let mut d = DistillConfig {
        seed: substream_seed(seed, DISTILL),
        soft_label_mode: mode,
        ..template.clone()
    };
    if mode == SoftLabelMode::None {
        d.loss_weights.alpha = 0.0;
    }
    d
}

fn standard_arm(cfg: &ExperimentConfig, seed: u64, b: &Base, k: usize) -> Result<(MlpModel, TrainHistory)> {
    let d_k = few_shot_sample(&b.train, k, substream_seed(seed, FEW_SHOT))?;
    let dcfg = distill_cfg(&cfg.distill, seed, cfg.distill.soft_label_mode);
    distill(&b.teacher, &student_init(cfg, seed)?, &d_k, &[], &dcfg)
}

fn cod_arm(
    cfg: &ExperimentConfig,
    seed: u64,
    b: &Base,
    k: usize,
    template: &DistillConfig,
    mode: SoftLabelMode,
) -> Result<(MlpModel, TrainHistory, CfeBuild)> {
    let d_half = few_shot_sample(&b.train, k / 2, substream_seed(seed, FEW_SHOT))?;
    let ccfg = CfeConfig {
        seed: substream_seed(seed, CFE),
        ..cfg.cfe.clone()
    };
    let build = build_cfe_dataset(&b.teacher, &d_half, &ccfg)?;
    let dcfg = distill_cfg(template, seed, mode);
    let (student, history) = distill(&b.teacher, &student_init(cfg, seed)?, &build.train_set, &build.pair_rows, &dcfg)?;
    Ok((student, history, build))
}

fn boundary(cfg: &ExperimentConfig, model: &MlpModel, region: Region, id: &str) -> Result<BoundarySet> {
    extract_boundary(model, region, cfg.geometry.resolution, cfg.geometry.level_tol, id)
}

fn emit_model(cfg: &ExperimentConfig, sink: &mut Sink, name: &str, model: &MlpModel, set: &BoundarySet) -> Result<()> {
    sink.write(&format!("boundary_{name}.csv"), |w| set.write_csv(w))?;
    if cfg.geometry.write_grids {
        sink.write(&format!("grid_{name}.csv"), |w| {
            write_probability_grid(model, set.region, cfg.geometry.resolution, w)
        })?;
    }
    Ok(())
}

pub(super) fn moons_seed(cfg: &ExperimentConfig, seed: u64, entry: &mut SeedEntry, sink: &mut Sink) -> Result<()> {
    let b = base(cfg, seed, entry, sink)?;
    let k = cfg.data.k;
    let bt = boundary(cfg, &b.teacher, b.region, "teacher")?;
    emit_model(cfg, sink, "teacher", &b.teacher, &bt)?;

    if cfg.arms.standard {
        let (student, history) = standard_arm(cfg, seed, &b, k)?;
        let bs = boundary(cfg, &student, b.region, "standard")?;
        let h = hausdorff_sets(&bt, &bs)?;
        entry.metric("standard_accuracy", accuracy(&student, &b.test)?);
        entry.metric("hausdorff_standard", h.h);
        entry.metric("gap_standard", history.max_prob_gap);
        entry.report("hausdorff_standard", &h)?;
        sink.write("history_standard.csv", |w| history.write_csv(w))?;
        emit_model(cfg, sink, "standard", &student, &bs)?;
    }
    if cfg.arms.cod {
        let (student, history, build) = cod_arm(cfg, seed, &b, k, &cfg.distill, cfg.distill.soft_label_mode)?;
        let bs = boundary(cfg, &student, b.region, "cod")?;
        let h = hausdorff_sets(&bt, &bs)?;
        entry.metric("cod_accuracy", accuracy(&student, &b.test)?);
        entry.metric("hausdorff_cod", h.h);
        entry.metric("gap_cod", history.max_prob_gap);
        entry.metric("cod_pairs", build.pairs.len() as f64);
        entry.metric("cfe_failures", build.failures.len() as f64);
        entry.report("hausdorff_cod", &h)?;
        sink.write("history_cod.csv", |w| history.write_csv(w))?;
        sink.write("pairs.csv", |w| write_pairs_csv(&build.pairs, w))?;
        emit_model(cfg, sink, "cod", &student, &bs)?;
    }
    Ok(())
}

pub(super) fn fisher_seed(cfg: &ExperimentConfig, seed: u64, entry: &mut SeedEntry, sink: &mut Sink) -> Result<()> {
    let truth = LogisticGroundTruth::new(cfg.fisher.truth.clone())?;
    let tcfg = Thm1Config {
        seed,
        ..cfg.fisher.experiment.clone()
    };
    let (report, trials) = thm1_experiment(&truth, &tcfg)?;
    entry.metric("ratio", report.ratio);
    entry.metric("ci_low", report.ci95_ratio[0]);
    entry.metric("ci_high", report.ci95_ratio[1]);
    entry.flag("ci_excludes_one", report.ci95_ratio[1] < 1.0 || report.ci95_ratio[0] > 1.0);
    entry.metric("mse_standard", report.mse_standard);
    entry.metric("mse_cf", report.mse_cf);
    entry.metric("trace_inv_standard", report.trace_inv_standard);
    entry.metric("trace_inv_cf", report.trace_inv_cf);
    entry.metric("trace_win_fraction", report.trace_win_fraction);
    entry.metric("second_moment_residual", report.second_moment_residual);
    entry.metric("separated_rate", report.separated as f64 / report.attempts as f64);
    entry.report("thm1", &report)?;
    sink.json("thm1_report.json", &report)?;
    sink.write("trials.csv", |w| write_trials_csv(&trials, w))
}

pub(super) fn bound_seed(cfg: &ExperimentConfig, seed: u64, entry: &mut SeedEntry, sink: &mut Sink) -> Result<()> {
    let b = base(cfg, seed, entry, sink)?;
    let (student, history, build) = cod_arm(cfg, seed, &b, cfg.data.k, &cfg.bound_distill(), cfg.distill.soft_label_mode)?;
    let bt = boundary(cfg, &b.teacher, b.region, "teacher")?;
    let bs = boundary(cfg, &student, b.region, "student")?;

    let control = bound_from_sets(&b.teacher, &build.pairs, &bt, &bt, 0.0)?;
    let trained = bound_from_sets(&b.teacher, &build.pairs, &bt, &bs, cfg.geometry.a2_slack)?;
    entry.metric("control_h", control.h);
    entry.flag("control_satisfied", control.satisfied);
    entry.metric("alpha", trained.alpha);
    entry.metric("epsilon", trained.epsilon);
    entry.metric("h", trained.h);
    entry.metric("bound", trained.bound);
    entry.flag("satisfied", trained.satisfied);
    entry.metric("residual", history.max_prob_gap);
    entry.flag("residual_ok", history.max_prob_gap <= MATCH_RESIDUAL);
    entry.metric("student_accuracy", accuracy(&student, &b.test)?);
    entry.report("bound_control", &control)?;
    entry.report("bound_cod", &trained)?;

    sink.json("bound_control.json", &control)?;
    sink.json("bound_cod.json", &trained)?;
    sink.write("pairs.csv", |w| write_pairs_csv(&build.pairs, w))?;
    sink.write("history_cod.csv", |w| history.write_csv(w))?;
    emit_model(cfg, sink, "teacher", &b.teacher, &bt)?;
    emit_model(cfg, sink, "student", &student, &bs)
}

#[derive(Debug, Serialize)]
struct AblationCell {
    k: usize,
    mode: SoftLabelMode,
    accuracy: f64,
    gap: f64,
    pairs: usize,
}

fn mode_name(mode: SoftLabelMode) -> &'static str {
    match mode {
        SoftLabelMode::Teacher => "teacher",
        SoftLabelMode::None => "none",
        SoftLabelMode::Random => "random",
    }
}

pub(super) fn ablation_seed(cfg: &ExperimentConfig, seed: u64, entry: &mut SeedEntry, sink: &mut Sink) -> Result<()> {
    let b = base(cfg, seed, entry, sink)?;
    let mut cells = Vec::new();
    for &k in &cfg.ablation.ks {
        for &mode in &cfg.ablation.modes {
            let (student, history, build) = cod_arm(cfg, seed, &b, k, &cfg.distill, mode)?;
            let tag = format!("{}_k{k}", mode_name(mode));
            let acc = accuracy(&student, &b.test)?;
            entry.metric(&format!("accuracy_{tag}"), acc);
            entry.metric(&format!("gap_{tag}"), history.max_prob_gap);
            sink.write(&format!("history_{tag}.csv"), |w| history.write_csv(w))?;
            cells.push(AblationCell {
                k,
                mode,
                accuracy: acc,
                gap: history.max_prob_gap,
                pairs: build.pairs.len(),
            });
        }
    }
    entry.report("cells", &cells)?;
    sink.json("cells.json", &cells)
}

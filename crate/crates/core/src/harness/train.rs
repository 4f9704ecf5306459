//! Training and evaluation on synthetic scenes.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::shape_scale_l1_loss;
use crate::harness::config::{derive_seed, MatchingObjective, RunConfig};
use crate::harness::metrics::{eval_keypoint_precision, KeypointTally};
use crate::harness::optim::Optimizer;
use crate::harness::scene::{generate_scene, SyntheticScene};
use crate::losses::{match_queries, query_loss, total_loss, LossTerms, QueryPrediction};
use crate::model::{Detector, DetectorOutput};
use crate::msm::{generate_category_label, msm_loss, truth_from_box, CategoryLabel, ShapeScaleTruth};
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

/// One report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: usize,
    pub total_loss: f64,
    pub class_loss: f64,
    pub size2d_loss: f64,
    pub xy3d_loss: f64,
    pub giou_loss: f64,
    pub size3d_loss: f64,
    pub angle_loss: f64,
    pub depth_loss: f64,
    pub msm_loss: f64,
    pub matching_accuracy: Option<f64>,
    pub position_precision: Option<f64>,
    pub weighted_position_precision: Option<f64>,
}

/// Losses of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub terms: LossTerms,
    pub msm: f64,
}

/// Everything the backward pass needs from one supervised forward.
#[derive(Debug, Clone)]
pub struct Supervision {
    pub losses: StepLosses,
    pub matches: Vec<(usize, usize)>,
    pub labels: Vec<(usize, CategoryLabel)>,
    pub grad_predictions: Vec<QueryPrediction>,
    pub grad_logits: Vec<Tensor>,
}

/// Assigns targets, evaluates the full objective and its output gradients.
pub fn supervise(
    model: &Detector,
    cfg: &RunConfig,
    scene: &SyntheticScene,
    out: &DetectorOutput,
) -> Result<Supervision> {
    let queries = model.queries()?;
    let matches = match_queries(&queries, &scene.targets, &scene.map_v)?;
    let ql = query_loss(&matches, &out.predictions, &scene.targets, &scene.map_d, &cfg.loss)?;
    let mut truths: Vec<(usize, ShapeScaleTruth)> = Vec::with_capacity(matches.len());
    for &(q, t) in &matches {
        let [l, r, tp, b] = scene.targets[t].box_lrtb;
        truths.push((q, truth_from_box(l, r, tp, b)?));
    }
    let labels: Vec<(usize, CategoryLabel)> = truths
        .iter()
        .map(|&(q, t)| (q, generate_category_label(t, &model.presets, &cfg.msm)))
        .collect();

    let layers = out.matching.len() as f64;
    let lambda = cfg.lambda();
    let mut msm = 0.0;
    let mut grad_logits = Vec::with_capacity(out.matching.len());
    for p in &out.matching {
        let (value, grad) = match cfg.matching_objective {
            MatchingObjective::Classification => {
                let m = msm_loss(p, &labels, cfg.msm.gamma)?;
                (m.value, m.grad_logits)
            }
            MatchingObjective::ExpectedL1 => shape_scale_l1_loss(p, &truths, &model.presets)?,
        };
        msm += value / layers;
        grad_logits.push(grad.scale(lambda / layers));
    }
    Ok(Supervision {
        losses: StepLosses {
            total: total_loss(ql.total, msm, lambda),
            terms: ql.terms,
            msm,
        },
        matches,
        labels,
        grad_predictions: ql.grads,
        grad_logits,
    })
}

/// Forward, loss, backward and one optimizer update.
pub fn train_step(
    model: &mut Detector,
    optimizer: &mut Optimizer,
    cfg: &RunConfig,
    scene: &SyntheticScene,
    step: usize,
) -> Result<StepLosses> {
    let out = model.forward(&scene.map_v, &scene.map_d)?;
    let sup = supervise(model, cfg, scene, &out)?;
    if !sup.losses.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!(
                "scene seed {}, losses {:?}, targets {}",
                scene.seed,
                sup.losses,
                serde_json::to_string(&scene.targets)?
            ),
        });
    }
    model.backward(&scene.map_v, &out, &sup.grad_predictions, &sup.grad_logits)?;
    optimizer.step(model);
    Ok(sup.losses)
}

/// Aggregate figures over a set of scenes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub matched_queries: usize,
    pub correct_matches: usize,
    pub keypoints: KeypointTally,
    pub mean_loss: StepLosses,
}

impl EvalReport {
    pub fn matching_accuracy(&self) -> Option<f64> {
        (self.matched_queries > 0).then(|| self.correct_matches as f64 / self.matched_queries as f64)
    }

    pub fn position_precision(&self) -> Option<f64> {
        self.keypoints.position_precision()
    }

    pub fn weighted_position_precision(&self) -> Option<f64> {
        self.keypoints.weighted_position_precision()
    }
}

/// Seed of held-out scene `index` for a run.
pub fn eval_scene_seed(cfg: &RunConfig, index: usize) -> u64 {
    derive_seed(cfg.seed, EVAL_STREAM, index as u64)
}

pub fn evaluate_scene(model: &Detector, cfg: &RunConfig, scene: &SyntheticScene, report: &mut EvalReport) -> Result<()> {
    let out = model.forward(&scene.map_v, &scene.map_d)?;
    let sup = supervise(model, cfg, scene, &out)?;
    let p = out.final_matching();
    for (q, label) in &sup.labels {
        report.matched_queries += 1;
        report.correct_matches += usize::from(p.argmax(*q) == label.index);
    }
    let stride = scene.map_v.stride() as f64;
    report
        .keypoints
        .merge(&eval_keypoint_precision(&out.keypoints, &sup.matches, &scene.targets, stride));
    let n = report.scenes as f64;
    let m = &mut report.mean_loss;
    let blend = |a: f64, b: f64| (a * n + b) / (n + 1.0);
    m.total = blend(m.total, sup.losses.total);
    m.msm = blend(m.msm, sup.losses.msm);
    let terms: Vec<f64> = m
        .terms
        .as_array()
        .iter()
        .zip(sup.losses.terms.as_array())
        .map(|(&a, b)| blend(a, b))
        .collect();
    m.terms = LossTerms {
        class: terms[0],
        size2d: terms[1],
        xy3d: terms[2],
        giou: terms[3],
        size3d: terms[4],
        angle: terms[5],
        depth: terms[6],
    };
    report.scenes += 1;
    Ok(())
}

/// Scores `count` held-out scenes.
pub fn evaluate(model: &Detector, cfg: &RunConfig, count: usize) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for i in 0..count {
        let scene = generate_scene(cfg, eval_scene_seed(cfg, i))?;
        evaluate_scene(model, cfg, &scene, &mut report)?;
    }
    Ok(report)
}

pub fn init_model(cfg: &RunConfig) -> Result<Detector> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_STREAM, 0));
    Detector::new(cfg.model, cfg.presets()?, &mut rng)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Detector,
    pub rows: Vec<MetricsReport>,
    /// Per-step losses.
    pub trace: Vec<StepLosses>,
}

/// Full deterministic run: one scene per step, a report row every
/// `eval_interval` steps and at the last step.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = init_model(cfg)?;
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut rows = Vec::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut window: Vec<StepLosses> = Vec::new();
    let fixed = if cfg.fixed_scene {
        Some(generate_scene(cfg, derive_seed(cfg.seed, TRAIN_STREAM, 0))?)
    } else {
        None
    };
    for step in 1..=cfg.steps {
        let fresh;
        let scene = match &fixed {
            Some(s) => s,
            None => {
                fresh = generate_scene(cfg, derive_seed(cfg.seed, TRAIN_STREAM, step as u64))?;
                &fresh
            }
        };
        optimizer.schedule(step, cfg.steps);
        let losses = train_step(&mut model, &mut optimizer, cfg, scene, step)?;
        trace.push(losses);
        window.push(losses);
        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let eval = evaluate(&model, cfg, cfg.eval_scenes)?;
            rows.push(report_row(step, &window, &eval));
            log::info!(
                "step {step}: loss {:.4}, matching accuracy {:?}, precision {:?}",
                rows.last().map_or(0.0, |r| r.total_loss),
                eval.matching_accuracy(),
                eval.position_precision()
            );
            window.clear();
        }
    }
    if model.layers.iter().any(|l| l.fusion.excursions() > 0) {
        let n: usize = model.layers.iter().map(|l| l.fusion.excursions()).sum();
        log::warn!("{n} fusion weights left [0, 1] during training");
    }
    Ok(TrainOutcome { model, rows, trace })
}

fn report_row(step: usize, window: &[StepLosses], eval: &EvalReport) -> MetricsReport {
    let n = window.len().max(1) as f64;
    let mean = |f: &dyn Fn(&StepLosses) -> f64| window.iter().map(f).sum::<f64>() / n;
    MetricsReport {
        step,
        total_loss: mean(&|l| l.total),
        class_loss: mean(&|l| l.terms.class),
        size2d_loss: mean(&|l| l.terms.size2d),
        xy3d_loss: mean(&|l| l.terms.xy3d),
        giou_loss: mean(&|l| l.terms.giou),
        size3d_loss: mean(&|l| l.terms.size3d),
        angle_loss: mean(&|l| l.terms.angle),
        depth_loss: mean(&|l| l.terms.depth),
        msm_loss: mean(&|l| l.msm),
        matching_accuracy: eval.matching_accuracy(),
        position_precision: eval.position_precision(),
        weighted_position_precision: eval.weighted_position_precision(),
    }
}

pub fn write_report_csv(path: &Path, rows: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub const CSV_COLUMNS: [&str; 13] = [
    "step",
    "total_loss",
    "class_loss",
    "size2d_loss",
    "xy3d_loss",
    "giou_loss",
    "size3d_loss",
    "angle_loss",
    "depth_loss",
    "msm_loss",
    "matching_accuracy",
    "position_precision",
    "weighted_position_precision",
];

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// One trained run of a λ sweep, scored on held-out scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda: f64,
    pub seed: u64,
    pub matching_accuracy: Option<f64>,
    pub position_precision: Option<f64>,
    pub weighted_position_precision: Option<f64>,
    pub final_loss: f64,
}

/// Trains one model per `(λ, seed)` pair and scores each on
/// `held_out` scenes. Runs are independent and spread over the available
/// cores; rows come back in `(λ, seed)` order whatever the scheduling.
pub fn ablate_lambda(base: &RunConfig, lambdas: &[f64], seeds: &[u64], held_out: usize) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(f64, u64)> = lambdas.iter().flat_map(|&l| seeds.iter().map(move |&s| (l, s))).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len()).max(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<AblationRow>>>> =
        jobs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(&(lambda, seed)) = jobs.get(i) else {
                    break;
                };
                let row = ablation_run(base, lambda, seed, held_out);
                *slots[i].lock().expect("no panics while holding the lock") = Some(row);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("unpoisoned").expect("every job ran"))
        .collect()
}

fn ablation_run(base: &RunConfig, lambda: f64, seed: u64, held_out: usize) -> Result<AblationRow> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.set_lambda(lambda);
    cfg.eval_interval = cfg.steps.max(1);
    cfg.eval_scenes = 0;
    let outcome = train(&cfg)?;
    let eval = evaluate(&outcome.model, &cfg, held_out)?;
    log::info!("lambda {lambda} seed {seed}: accuracy {:?}", eval.matching_accuracy());
    Ok(AblationRow {
        lambda,
        seed,
        matching_accuracy: eval.matching_accuracy(),
        position_precision: eval.position_precision(),
        weighted_position_precision: eval.weighted_position_precision(),
        final_loss: outcome.trace.last().map_or(0.0, |l| l.total),
    })
}

/// Mean of `metric` over the rows with `lambda`, skipping missing values.
pub fn mean_metric(rows: &[AblationRow], lambda: f64, metric: impl Fn(&AblationRow) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.lambda == lambda).filter_map(&metric).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// λ with the highest mean matching accuracy; the smallest wins a tie.
pub fn best_lambda(rows: &[AblationRow]) -> Option<f64> {
    let mut lambdas: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let mut best: Option<(f64, f64)> = None;
    for l in lambdas {
        if let Some(acc) = mean_metric(rows, l, |r| r.matching_accuracy) {
            if best.is_none_or(|(_, b)| acc > b + 1e-12) {
                best = Some((l, acc));
            }
        }
    }
    best.map(|(l, _)| l)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{OptimizerConfig, OptimizerKind};

    fn row(lambda: f64, acc: f64) -> AblationRow {
        AblationRow {
            lambda,
            seed: 0,
            matching_accuracy: Some(acc),
            position_precision: None,
            weighted_position_precision: None,
            final_loss: 0.0,
        }
    }

    #[test]
    fn best_lambda_prefers_smallest_on_ties() {
        let rows = [row(0.0, 0.5), row(0.1, 0.9), row(0.2, 0.9), row(0.4, 0.9)];
        assert_eq!(best_lambda(&rows), Some(0.1));
        let rows = [row(0.0, 0.5), row(0.1, 0.8), row(0.1, 1.0), row(0.4, 0.91)];
        assert_eq!(best_lambda(&rows), Some(0.4));
        assert_eq!(best_lambda(&[]), None);
    }

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.channels = 16;
        cfg.model.heads = 4;
        cfg.model.ffn_hidden = 32;
        cfg.scene.channels = 16;
        cfg.steps = 10;
        cfg.eval_interval = 5;
        cfg.eval_scenes = 3;
        cfg
    }

    #[test]
    fn null_objective_changes_nothing() {
        let mut cfg = tiny();
        cfg.loss = crate::losses::LossWeights {
            class: 0.0,
            size2d: 0.0,
            xy3d: 0.0,
            giou: 0.0,
            size3d: 0.0,
            angle: 0.0,
            depth: 0.0,
            lambda_msm: 0.0,
        };
        cfg.msm.lambda_msm = 0.0;
        let before = init_model(&cfg).unwrap();
        let out = train(&cfg).unwrap();
        assert!(out.trace.iter().all(|l| l.total == 0.0));
        assert_eq!(out.model, before);
    }

    #[test]
    fn fixed_scene_loss_decreases() {
        let mut cfg = tiny();
        cfg.fixed_scene = true;
        cfg.optimizer = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 1e-3,
            momentum: 0.0,
            ..OptimizerConfig::default()
        };
        let out = train(&cfg).unwrap();
        for w in out.trace.windows(2) {
            assert!(w[1].total < w[0].total, "{:?}", out.trace.iter().map(|l| l.total).collect::<Vec<_>>());
        }
    }

    #[test]
    fn identical_runs_identical_traces() {
        let cfg = tiny();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.model, b.model);
    }
}

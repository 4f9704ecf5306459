use std::path::Path;

use s3da::harness::train::{init_model, supervise};
use s3da::harness::{evaluate, generate_scene, label_stats, load_labels, train, RunConfig};
use s3da::msm::MsmConfig;
use s3da::sampling::ShapeScalePreset;
use s3da::tensor::{Module, Tensor};

fn short(steps: usize) -> RunConfig {
    RunConfig {
        steps,
        eval_interval: steps,
        eval_scenes: 2,
        ..RunConfig::default()
    }
}

#[test]
fn keypoints_at_reference_points_are_all_inside() {
    let mut cfg = RunConfig::default();
    cfg.scene.anchor_jitter = 0.0;
    let mut model = init_model(&cfg).unwrap();
    for layer in &mut model.layers {
        let d = &mut layer.deformable;
        d.offset_head.weight.tensor = Tensor::zeros(d.offset_head.weight.shape());
        d.offset_head.bias.tensor = Tensor::zeros(d.offset_head.bias.shape());
    }
    let report = evaluate(&model, &cfg, 20).unwrap();
    assert_eq!(report.position_precision(), Some(1.0));
    assert_eq!(report.weighted_position_precision(), Some(1.0));
}

#[test]
fn uniform_attention_makes_both_precisions_equal() {
    let cfg = RunConfig::default();
    let model = init_model(&cfg).unwrap();
    let report = evaluate(&model, &cfg, 10).unwrap();
    let (p, w) = (report.position_precision().unwrap(), report.weighted_position_precision().unwrap());
    assert!((p - w).abs() < 1e-12, "{p} vs {w}");
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let cfg = short(150);
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.model, b.model);
    let mean = |s: &[s3da::harness::train::StepLosses]| s.iter().map(|l| l.total).sum::<f64>() / s.len() as f64;
    assert!(mean(&a.trace[120..]) < mean(&a.trace[..30]));
}

#[test]
fn zero_lambda_leaves_matching_head_to_query_loss_only() {
    let mut cfg = short(1);
    cfg.set_lambda(0.0);
    let model = init_model(&cfg).unwrap();
    let scene = generate_scene(&cfg, 5).unwrap();
    let out = model.forward(&scene.map_v, &scene.map_d).unwrap();
    let sup = supervise(&model, &cfg, &scene, &out).unwrap();
    assert!(sup.losses.msm > 0.0);
    assert!(sup.grad_logits.iter().all(|g| g.values().iter().all(|&v| v == 0.0)));
    assert!((sup.losses.total - sup.losses.terms.weighted(&cfg.loss)).abs() < 1e-12);
}

#[test]
fn saved_model_round_trips_exactly() {
    let out = train(&short(20)).unwrap();
    let text = serde_json::to_string(&out.model).unwrap();
    let back: s3da::model::Detector = serde_json::from_str(&text).unwrap();
    assert_eq!(back, out.model);
    let mut n = 0;
    back.visit_params(&mut |_| n += 1);
    assert!(n > 10);
}

#[test]
fn config_rejects_unknown_fields_and_disagreeing_lambdas() {
    assert!(serde_json::from_str::<RunConfig>(r#"{"scene": {"hieght": 9}}"#).is_err());
    let cfg: RunConfig = serde_json::from_str(r#"{"msm": {"lambda_msm": 0.3}}"#).unwrap();
    assert!(cfg.validate().is_err());
    let mut cfg = RunConfig::default();
    cfg.set_lambda(0.3);
    cfg.validate().unwrap();
    let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn fixture_preset_counts_cover_every_car() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/labels");
    let records = load_labels(&dir).unwrap();
    assert_eq!(records.len(), 14);
    let stats = label_stats(&records, "Car", &ShapeScalePreset::car(), &MsmConfig::default()).unwrap();
    let counts: Vec<usize> = stats.preset_counts.iter().map(|p| p.count).collect();
    assert_eq!(counts, vec![1, 3, 1, 2, 1, 1]);
    assert_eq!(counts.iter().sum::<usize>(), stats.records - stats.invalid_boxes);
    assert_eq!(stats.ties, 1);
    assert!((stats.width_in_range_fraction - 7.0 / 9.0).abs() < 1e-12);
    let ped = label_stats(&records, "pedestrian", &ShapeScalePreset::pedestrian(), &MsmConfig::default()).unwrap();
    assert_eq!(ped.records, 1);
}

//! Finite-difference checks over every differentiable operation, shared by
//! the `gradcheck` subcommand and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{
    augment_queries, augment_queries_backward, build_filter, build_filter_backward, decoder_forward,
    deformable_aggregate, deformable_aggregate_backward, AdaptiveFilterLayer, DecoderDims, DecoderLayer,
    DeformableAttention,
};
use crate::error::Result;
use crate::harness::train::supervise;
use crate::harness::{generate_scene, RunConfig};
use crate::model::{Detector, DetectorConfig};
use crate::fusion::{
    fuse_query_features, fuse_query_features_backward, predict_matching_distribution, shape_scale_l1_loss,
    MapReducer, MatchingDistribution, MatchingHead,
};
use crate::losses::{query_loss, LossWeights, ObjectTarget, QueryPrediction};
use crate::msm::{msm_loss, CategoryLabel, ShapeScaleTruth};
use crate::sampling::{
    bilinear_sample, bilinear_sample_backward, extract_local_features, extract_local_features_backward,
    FeatureMap, LocalFeatureStack, QuerySet, ShapeScalePreset, BASE_STRIDE,
};
use crate::tensor::{grad_check, softmax, softmax_backward, Conv2d, Linear, Module, SelfAttention, Tensor};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub seeds: usize,
    pub max_error: f64,
    pub passed: bool,
}

type Check = fn(u64) -> Result<f64>;

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(salt))
}

fn half_sq(out: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let g = out.zip_map(target, |a, b| a - b)?;
    Ok((g.values().iter().map(|v| 0.5 * v * v).sum(), g))
}

fn map(t: Tensor) -> Result<FeatureMap> {
    FeatureMap::new(t, BASE_STRIDE)
}

/// Coordinates a quarter pixel away from integer knots.
fn off_knot(r: &mut ChaCha8Rng, hi: usize) -> f64 {
    r.random_range(0..hi) as f64 + if r.random_bool(0.5) { 0.25 } else { 0.75 }
}

fn check_linear(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 1);
    let layer = Linear::new("l", 4, 3, &mut r);
    let x = Tensor::normal(&[5, 4], 1.0, &mut r);
    let target = Tensor::normal(&[5, 3], 1.0, &mut r);
    grad_check(
        |t| {
            let mut l = layer.clone();
            l.weight.tensor = t[1].clone();
            l.bias.tensor = t[2].clone();
            let (loss, g) = half_sq(&l.forward(&t[0])?, &target)?;
            let gx = l.backward(&t[0], &g)?;
            Ok((loss, vec![gx, Tensor::new(vec![4, 3], l.weight.grad())?, Tensor::new(vec![3], l.bias.grad())?]))
        },
        &[x, layer.weight.tensor.clone(), layer.bias.tensor.clone()],
        EPSILON,
    )
}

fn check_conv(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 2);
    let conv = Conv2d::new("c", 2, 3, &mut r);
    let x = Tensor::normal(&[5, 6, 2], 1.0, &mut r);
    let target = Tensor::normal(&[3, 3, 3], 1.0, &mut r);
    grad_check(
        |t| {
            let mut c = conv.clone();
            c.kernel.tensor = t[1].clone();
            let (loss, g) = half_sq(&c.forward(&t[0])?, &target)?;
            let gx = c.backward(&t[0], &g)?;
            Ok((loss, vec![gx, Tensor::new(c.kernel.shape().to_vec(), c.kernel.grad())?]))
        },
        &[x, conv.kernel.tensor.clone()],
        EPSILON,
    )
}

fn check_softmax(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 3);
    let x = Tensor::normal(&[3, 5], 1.0, &mut r);
    let target = Tensor::normal(&[3, 5], 0.3, &mut r);
    grad_check(
        |t| {
            let out = softmax(&t[0]);
            let (loss, g) = half_sq(&out, &target)?;
            Ok((loss, vec![softmax_backward(&out, &g)?]))
        },
        &[x],
        EPSILON,
    )
}

fn check_self_attention(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 4);
    let attn = SelfAttention::new("a", 4, 2, &mut r)?;
    let x = Tensor::normal(&[3, 4], 1.0, &mut r);
    let target = Tensor::normal(&[3, 4], 1.0, &mut r);
    grad_check(
        |t| {
            let mut a = attn.clone();
            a.query.weight.tensor = t[1].clone();
            let (out, cache) = a.forward(&t[0])?;
            let (loss, g) = half_sq(&out, &target)?;
            let gx = a.backward(&cache, &g)?;
            Ok((loss, vec![gx, Tensor::new(vec![4, 4], a.query.weight.grad())?]))
        },
        &[x, attn.query.weight.tensor.clone()],
        EPSILON,
    )
}

fn check_bilinear(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 5);
    let m = Tensor::normal(&[5, 6, 3], 1.0, &mut r);
    let coords: Vec<f64> = (0..4).flat_map(|_| [off_knot(&mut r, 5), off_knot(&mut r, 4)]).collect();
    let target = Tensor::normal(&[4, 3], 1.0, &mut r);
    grad_check(
        |t| {
            let fm = map(t[0].clone())?;
            let c: Vec<(f64, f64)> = t[1].values().chunks(2).map(|p| (p[0], p[1])).collect();
            let (loss, g) = half_sq(&bilinear_sample(&fm, &c)?, &target)?;
            let (gm, gc) = bilinear_sample_backward(&fm, &c, &g)?;
            let gc = gc.iter().flat_map(|&(x, y)| [x, y]).collect();
            Ok((loss, vec![gm, Tensor::new(vec![8], gc)?]))
        },
        &[m, Tensor::new(vec![8], coords)?],
        EPSILON,
    )
}

fn check_local_features(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 6);
    let m = Tensor::normal(&[8, 8, 2], 1.0, &mut r);
    let presets = ShapeScalePreset::from_pairs(&[(1.0, 2.0), (0.5, 4.0), (2.0, 1.0)])?;
    let q = QuerySet::new(Tensor::zeros(&[2, 2]), vec![(0.3, 0.6), (0.8, 0.2)])?;
    let target = Tensor::normal(&[2, 3, 2], 1.0, &mut r);
    grad_check(
        |t| {
            let fm = map(t[0].clone())?;
            let stack = extract_local_features(&fm, &q, &presets)?;
            let (loss, g) = half_sq(&stack.data, &target)?;
            Ok((loss, vec![extract_local_features_backward(&fm, &q, &presets, &g)?]))
        },
        &[m],
        EPSILON,
    )
}

fn check_map_reduction(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 7);
    let reducer = MapReducer::new("r", 2, &mut r);
    let m = Tensor::normal(&[7, 6, 2], 1.0, &mut r);
    let target = Tensor::normal(&[2, 2, 2], 1.0, &mut r);
    grad_check(
        |t| {
            let mut red = reducer.clone();
            let (out, cache) = red.forward(&map(t[0].clone())?)?;
            let (loss, g) = half_sq(out.data(), &target)?;
            Ok((loss, vec![red.backward(&cache, &g)?]))
        },
        &[m],
        EPSILON,
    )
}

fn check_fusion(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 8);
    let fv = Tensor::normal(&[3, 4], 1.0, &mut r);
    let fd = Tensor::normal(&[3, 4], 1.0, &mut r);
    let w = Tensor::uniform(&[3, 1], 1.0, &mut r);
    let target = Tensor::normal(&[3, 4], 1.0, &mut r);
    grad_check(
        |t| {
            let (loss, g) = half_sq(&fuse_query_features(&t[0], &t[1], &t[2])?, &target)?;
            let fg = fuse_query_features_backward(&t[0], &t[1], &t[2], &g)?;
            Ok((loss, vec![fg.visual, fg.depth, fg.weights]))
        },
        &[fv, fd, w],
        EPSILON,
    )
}

fn check_matching_head(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 9);
    let head = MatchingHead::new(4, 3, &mut r);
    let x = Tensor::normal(&[3, 4], 1.0, &mut r);
    let target = Tensor::normal(&[3, 3], 0.3, &mut r);
    grad_check(
        |t| {
            let mut h = head.clone();
            h.projection.weight.tensor = t[1].clone();
            let p = predict_matching_distribution(&t[0], &h)?;
            let (loss, g) = half_sq(p.probs(), &target)?;
            let gl = p.logits_grad(&g)?;
            let gx = h.projection.backward(&t[0], &gl)?;
            Ok((loss, vec![gx, Tensor::new(vec![4, 3], h.projection.weight.grad())?]))
        },
        &[x, head.projection.weight.tensor.clone()],
        EPSILON,
    )
}

fn check_expected_l1(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 10);
    let presets = ShapeScalePreset::car();
    let logits = Tensor::normal(&[3, 6], 1.0, &mut r);
    let truths: Vec<(usize, ShapeScaleTruth)> = (0..2)
        .map(|q| {
            (q, ShapeScaleTruth { ratio: r.random_range(0.3..1.5), width: r.random_range(1.0..9.0) })
        })
        .collect();
    grad_check(
        |t| {
            let p = MatchingDistribution::from_logits(t[0].clone())?;
            let (loss, g) = shape_scale_l1_loss(&p, &truths, &presets)?;
            Ok((loss, vec![g]))
        },
        &[logits],
        EPSILON,
    )
}

fn check_filter(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 11);
    let layer = AdaptiveFilterLayer::new(4, &mut r);
    let local = Tensor::normal(&[3, 3, 4], 1.0, &mut r);
    let logits = Tensor::normal(&[3, 3], 1.0, &mut r);
    let target = Tensor::normal(&[3, 4], 0.3, &mut r);
    grad_check(
        |t| {
            let stack = LocalFeatureStack::new(t[0].clone())?;
            let p = MatchingDistribution::from_logits(t[1].clone())?;
            let mut l = layer.clone();
            l.combine.weight.tensor = t[2].clone();
            let (f, cache) = build_filter(&stack, &p, &l)?;
            let (loss, g) = half_sq(&f, &target)?;
            let (gl, gp) = build_filter_backward(&stack, &p, &mut l, &cache, &g)?;
            Ok((loss, vec![gl, p.logits_grad(&gp)?, Tensor::new(vec![4, 4], l.combine.weight.grad())?]))
        },
        &[local, logits, layer.combine.weight.tensor.clone()],
        EPSILON,
    )
}

fn check_augment(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 12);
    let x = Tensor::normal(&[3, 4], 1.0, &mut r);
    let f = Tensor::uniform(&[3, 4], 1.0, &mut r);
    let target = Tensor::normal(&[3, 4], 1.0, &mut r);
    grad_check(
        |t| {
            let (loss, g) = half_sq(&augment_queries(&t[0], &t[1])?, &target)?;
            let (gx, gf) = augment_queries_backward(&t[0], &t[1], &g)?;
            Ok((loss, vec![gx, gf]))
        },
        &[x, f],
        EPSILON,
    )
}

fn check_deformable(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 13);
    let m = Tensor::normal(&[7, 8, 4], 1.0, &mut r);
    let q = QuerySet::new(Tensor::zeros(&[2, 4]), vec![(0.31, 0.52), (0.73, 0.27)])?;
    let mut cfg = DeformableAttention::new(4, 2, 2, &mut r)?;
    cfg.offset_head.weight.tensor = Tensor::normal(&[4, 8], 0.3, &mut r);
    cfg.weight_head.weight.tensor = Tensor::normal(&[4, 4], 1.0, &mut r);
    let aug = Tensor::normal(&[2, 4], 1.0, &mut r);
    let target = Tensor::normal(&[2, 4], 1.0, &mut r);
    grad_check(
        |t| {
            let fm = map(t[1].clone())?;
            let mut layer = cfg.clone();
            layer.offset_head.weight.tensor = t[2].clone();
            layer.weight_head.weight.tensor = t[3].clone();
            let (out, _, cache) = deformable_aggregate(&fm, &q, &t[0], &layer)?;
            let (loss, g) = half_sq(&out, &target)?;
            let (ga, gm) = deformable_aggregate_backward(&mut layer, &cache, &g)?;
            Ok((
                loss,
                vec![
                    ga,
                    gm,
                    Tensor::new(vec![4, 8], layer.offset_head.weight.grad())?,
                    Tensor::new(vec![4, 4], layer.weight_head.weight.grad())?,
                ],
            ))
        },
        &[aug, m, cfg.offset_head.weight.tensor.clone(), cfg.weight_head.weight.tensor.clone()],
        EPSILON,
    )
}

fn check_msm(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 14);
    let logits = Tensor::normal(&[4, 6], 1.5, &mut r);
    let labels: Vec<(usize, CategoryLabel)> =
        [(0, 2), (2, 5), (3, 0)].iter().map(|&(q, i)| (q, CategoryLabel::new(i, 6))).collect();
    grad_check(
        |t| {
            let p = MatchingDistribution::from_logits(t[0].clone())?;
            let m = msm_loss(&p, &labels, 2.0)?;
            Ok((m.value, vec![m.grad_logits]))
        },
        &[logits],
        EPSILON,
    )
}

fn loss_fixture(r: &mut ChaCha8Rng) -> (FeatureMap, Vec<ObjectTarget>, Vec<Tensor>) {
    let m = FeatureMap::new(Tensor::from_fn(&[8, 8, 1], |_| r.random_range(5.0..30.0)), BASE_STRIDE)
        .expect("valid map");
    let target = |class_id, c: [f64; 2], lrtb| ObjectTarget {
        class_id,
        box_lrtb: lrtb,
        center3d_proj: c,
        size3d: [1.5, 1.6, 3.9],
        depth: 20.0,
        angle: 0.4,
        focal_length: 700.0,
    };
    let targets = vec![
        target(0, [40.0, 50.0], [10.0, 14.0, 20.0, 12.0]),
        target(1, [90.0, 70.0], [6.0, 9.0, 8.0, 11.0]),
    ];
    let preds = (0..3)
        .map(|_| {
            let mut v: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            v.extend((0..4).map(|_| r.random_range(3.0..25.0)));
            v.extend((0..2).map(|_| r.random_range(20.0..100.0)));
            v.push(r.random_range(5.0..30.0));
            v.push(r.random_range(-1.0..1.0));
            v.extend((0..3).map(|_| r.random_range(0.5..4.0)));
            v.extend((0..2).map(|_| r.random_range(-1.0..1.0)));
            Tensor::new(vec![16], v).expect("16 entries")
        })
        .collect();
    (m, targets, preds)
}

/// Gradient of the query loss with only term `term` weighted.
fn check_loss_term(seed: u64, term: usize) -> Result<f64> {
    let mut r = rng(seed, 20 + term as u64);
    let (m, targets, preds) = loss_fixture(&mut r);
    let mut w = [0.0; 7];
    w[term] = 1.0;
    let weights = LossWeights {
        class: w[0],
        size2d: w[1],
        xy3d: w[2],
        giou: w[3],
        size3d: w[4],
        angle: w[5],
        depth: w[6],
        lambda_msm: 0.0,
    };
    let matches = [(0, 1), (2, 0)];
    grad_check(
        |x| {
            let p: Vec<QueryPrediction> =
                x.iter().map(|t| QueryPrediction::from_flat(t.values(), 3)).collect::<Result<_>>()?;
            let ql = query_loss(&matches, &p, &targets, &m, &weights)?;
            let g = ql.grads.iter().map(|g| Tensor::new(vec![16], g.to_flat())).collect::<Result<_>>()?;
            Ok((ql.total, g))
        },
        &preds,
        EPSILON,
    )
}

fn check_decoder(seed: u64) -> Result<f64> {
    let mut r = rng(seed, 30);
    let dims = DecoderDims {
        queries: 3,
        channels: 8,
        presets: 3,
        heads: 2,
        points: 2,
        ffn_hidden: 16,
    };
    let presets = ShapeScalePreset::from_pairs(&[(1.0, 2.0), (0.5, 4.0), (2.0, 1.0)])?;
    let mut layer = DecoderLayer::new(dims, &mut r)?;
    layer.deformable.offset_head.weight.tensor = Tensor::normal(&[8, 8], 0.2, &mut r);
    layer.deformable.weight_head.weight.tensor = Tensor::normal(&[8, 4], 0.5, &mut r);
    layer.fusion.w.tensor = Tensor::uniform(&[3, 1], 1.0, &mut r);
    let positions = vec![(0.3, 0.55), (0.62, 0.21), (0.81, 0.77)];
    let feats = Tensor::normal(&[3, 8], 1.0, &mut r);
    let mv = Tensor::normal(&[8, 8, 8], 1.0, &mut r);
    let md = Tensor::normal(&[8, 8, 8], 1.0, &mut r);
    let target = Tensor::normal(&[3, 8], 1.0, &mut r);
    let logit_weight = Tensor::normal(&[3, 3], 1.0, &mut r);
    let inputs = [
        feats,
        mv,
        md,
        layer.fusion.w.tensor.clone(),
        layer.matching.projection.weight.tensor.clone(),
        layer.filter.combine.weight.tensor.clone(),
        layer.deformable.offset_head.weight.tensor.clone(),
        layer.deformable.weight_head.weight.tensor.clone(),
        layer.ffn.expand.weight.tensor.clone(),
    ];
    grad_check(
        |t| {
            let mut l = layer.clone();
            l.fusion.w.tensor = t[3].clone();
            l.matching.projection.weight.tensor = t[4].clone();
            l.filter.combine.weight.tensor = t[5].clone();
            l.deformable.offset_head.weight.tensor = t[6].clone();
            l.deformable.weight_head.weight.tensor = t[7].clone();
            l.ffn.expand.weight.tensor = t[8].clone();
            l.zero_grad();
            let q = QuerySet::new(t[0].clone(), positions.clone())?;
            let (mv, md) = (map(t[1].clone())?, map(t[2].clone())?);
            let out = decoder_forward(&mv, &md, &q, &presets, &l)?;
            let (loss_f, g_f) = half_sq(&out.queries.features, &target)?;
            let loss_p: f64 = out.matching.logits().values().iter().zip(logit_weight.values()).map(|(a, b)| a * b).sum();
            let g = l.backward(&mv, &q, &presets, &out.matching, &out.cache, &g_f, &logit_weight)?;
            let pg = |p: &crate::tensor::Parameter| Tensor::new(p.shape().to_vec(), p.grad());
            Ok((
                loss_f + loss_p,
                vec![
                    g.queries,
                    g.map_visual,
                    g.map_depth,
                    pg(&l.fusion.w)?,
                    pg(&l.matching.projection.weight)?,
                    pg(&l.filter.combine.weight)?,
                    pg(&l.deformable.offset_head.weight)?,
                    pg(&l.deformable.weight_head.weight)?,
                    pg(&l.ffn.expand.weight)?,
                ],
            ))
        },
        &inputs,
        EPSILON,
    )
}

fn check_detector(seed: u64) -> Result<f64> {
    let mut cfg = RunConfig::default();
    cfg.model = DetectorConfig {
        queries: 4,
        channels: 12,
        heads: 2,
        points: 2,
        ffn_hidden: 16,
        layers: 2,
        classes: 1,
    };
    cfg.scene.height = 9;
    cfg.scene.width = 13;
    cfg.scene.channels = 12;
    cfg.scene.anchor_queries = 4;
    cfg.scene.max_objects = 3;
    cfg.set_lambda(0.5);
    let scene = generate_scene(&cfg, seed)?;
    let mut model = Detector::new(cfg.model, cfg.presets()?, &mut rng(seed, 40))?;
    for l in &mut model.layers {
        l.deformable.offset_head.weight.tensor = Tensor::normal(&[12, 8], 0.2, &mut rng(seed, 41));
    }
    let inputs = [
        model.query_embed.tensor.clone(),
        model.head.weight.tensor.clone(),
        model.layers[0].matching.projection.weight.tensor.clone(),
        model.layers[1].deformable.offset_head.weight.tensor.clone(),
    ];
    grad_check(
        |t| {
            let mut m = model.clone();
            m.query_embed.tensor = t[0].clone();
            m.head.weight.tensor = t[1].clone();
            m.layers[0].matching.projection.weight.tensor = t[2].clone();
            m.layers[1].deformable.offset_head.weight.tensor = t[3].clone();
            m.zero_grad();
            let out = m.forward(&scene.map_v, &scene.map_d)?;
            let sup = supervise(&m, &cfg, &scene, &out)?;
            m.backward(&scene.map_v, &out, &sup.grad_predictions, &sup.grad_logits)?;
            let pg = |p: &crate::tensor::Parameter| Tensor::new(p.shape().to_vec(), p.grad());
            Ok((
                sup.losses.total,
                vec![
                    pg(&m.query_embed)?,
                    pg(&m.head.weight)?,
                    pg(&m.layers[0].matching.projection.weight)?,
                    pg(&m.layers[1].deformable.offset_head.weight)?,
                ],
            ))
        },
        &inputs,
        EPSILON,
    )
}

/// The named checks in suite order.
pub fn checks() -> Vec<(&'static str, Check)> {
    vec![
        ("linear", check_linear as Check),
        ("conv2d_stride2", check_conv),
        ("softmax", check_softmax),
        ("self_attention", check_self_attention),
        ("bilinear_sample", check_bilinear),
        ("extract_local_features", check_local_features),
        ("reduce_feature_map", check_map_reduction),
        ("fuse_query_features", check_fusion),
        ("matching_head", check_matching_head),
        ("expected_shape_scale_l1", check_expected_l1),
        ("build_filter", check_filter),
        ("augment_queries", check_augment),
        ("deformable_aggregate", check_deformable),
        ("msm_loss", check_msm),
        ("loss_class", |s| check_loss_term(s, 0)),
        ("loss_2d_size", |s| check_loss_term(s, 1)),
        ("loss_xy3d", |s| check_loss_term(s, 2)),
        ("loss_giou", |s| check_loss_term(s, 3)),
        ("loss_3d_size", |s| check_loss_term(s, 4)),
        ("loss_angle", |s| check_loss_term(s, 5)),
        ("loss_depth", |s| check_loss_term(s, 6)),
        ("decoder_forward", check_decoder),
        ("detector_end_to_end", check_detector),
    ]
}

/// Runs every check over seeds `0..seeds`.
pub fn run_suite(seeds: usize) -> Result<Vec<CheckResult>> {
    checks()
        .into_iter()
        .map(|(name, check)| {
            let mut max_error: f64 = 0.0;
            for seed in 0..seeds as u64 {
                max_error = max_error.max(check(seed)?);
            }
            Ok(CheckResult {
                name: name.to_string(),
                seeds,
                max_error,
                passed: max_error < TOLERANCE,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_ten_seeds() {
        for r in run_suite(10).unwrap() {
            assert!(r.passed, "{} max error {:e}", r.name, r.max_error);
        }
    }
}

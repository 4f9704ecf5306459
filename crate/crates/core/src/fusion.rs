//! Query-level visual/depth fusion and the shape&scale matching distribution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msm::ShapeScaleTruth;
use crate::sampling::{FeatureMap, ShapeScalePreset, BASE_STRIDE, REDUCED_STRIDE};
use crate::tensor::{softmax, softmax_backward, Conv2d, Linear, Module, Parameter, Tensor};

/// Two chained stride-2 convolutions taking a stride-16 map to stride 64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReducer {
    pub first: Conv2d,
    pub second: Conv2d,
}

#[derive(Debug, Clone)]
pub struct ReduceCache {
    input: Tensor,
    mid: Tensor,
}

impl MapReducer {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            first: Conv2d::new(&format!("{name}.conv1"), channels, channels, rng),
            second: Conv2d::new(&format!("{name}.conv2"), channels, channels, rng),
        }
    }

    pub fn zeros(name: &str, channels: usize) -> Self {
        Self {
            first: Conv2d::zeros(&format!("{name}.conv1"), channels, channels),
            second: Conv2d::zeros(&format!("{name}.conv2"), channels, channels),
        }
    }

    pub fn forward(&self, map: &FeatureMap) -> Result<(FeatureMap, ReduceCache)> {
        reduce_feature_map(map, self)
    }

    /// Accumulates kernel gradients and returns the input-map gradient.
    pub fn backward(&mut self, cache: &ReduceCache, grad_out: &Tensor) -> Result<Tensor> {
        let g_mid = self.second.backward(&cache.mid, grad_out)?;
        self.first.backward(&cache.input, &g_mid)
    }
}

impl Module for MapReducer {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        self.first.visit_params(f);
        self.second.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.first.visit_params_mut(f);
        self.second.visit_params_mut(f);
    }
}

/// Compacts a stride-16 map to stride 64 with two stride-2 convolutions.
pub fn reduce_feature_map(map: &FeatureMap, reducer: &MapReducer) -> Result<(FeatureMap, ReduceCache)> {
    if map.stride() != BASE_STRIDE {
        return Err(Error::Config(format!(
            "map reduction expects stride {BASE_STRIDE}, got {}",
            map.stride()
        )));
    }
    let mid = reducer.first.forward(map.data())?;
    let out = reducer.second.forward(&mid)?;
    Ok((
        FeatureMap::new(out, REDUCED_STRIDE)?,
        ReduceCache {
            input: map.data().clone(),
            mid,
        },
    ))
}

/// Per-query fusion proportions `[N, 1]`, initialised to 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w: Parameter,
}

impl FusionWeights {
    pub fn new(queries: usize) -> Self {
        Self {
            w: Parameter::new("fusion.w", Tensor::full(&[queries, 1], 0.5)),
        }
    }

    /// Count of weights outside `[0, 1]`. The weights are unconstrained, so
    /// training may push them out of the convex range.
    pub fn excursions(&self) -> usize {
        self.w
            .values()
            .iter()
            .filter(|v| !(0.0..=1.0).contains(*v))
            .count()
    }
}

impl Module for FusionWeights {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.w);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.w);
    }
}

fn check_fusion(fv: &Tensor, fd: &Tensor, w: &Tensor) -> Result<()> {
    fv.expect_same_shape(fd, "fuse_query_features")?;
    if fv.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "fuse_query_features",
            left: fv.shape().to_vec(),
            right: vec![0, 0],
        });
    }
    w.expect_shape(&[fv.shape()[0], 1], "fuse_query_features weights")
}

/// `out[q] = w[q] * fv[q] + (1 - w[q]) * fd[q]`.
pub fn fuse_query_features(fv: &Tensor, fd: &Tensor, w: &Tensor) -> Result<Tensor> {
    check_fusion(fv, fd, w)?;
    let mut out = fv.clone();
    for q in 0..fv.rows() {
        let wq = w.values()[q];
        out.row_mut(q)
            .iter_mut()
            .zip(fd.row(q))
            .for_each(|(o, &d)| *o = wq * *o + (1.0 - wq) * d);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FusionGrads {
    pub visual: Tensor,
    pub depth: Tensor,
    pub weights: Tensor,
}

pub fn fuse_query_features_backward(
    fv: &Tensor,
    fd: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
) -> Result<FusionGrads> {
    check_fusion(fv, fd, w)?;
    grad_out.expect_same_shape(fv, "fuse_query_features_backward")?;
    let mut gv = grad_out.clone();
    let mut gd = grad_out.clone();
    let mut gw = vec![0.0; fv.rows()];
    for q in 0..fv.rows() {
        let wq = w.values()[q];
        gv.row_mut(q).iter_mut().for_each(|g| *g *= wq);
        gd.row_mut(q).iter_mut().for_each(|g| *g *= 1.0 - wq);
        gw[q] = grad_out
            .row(q)
            .iter()
            .zip(fv.row(q).iter().zip(fd.row(q)))
            .map(|(g, (v, d))| g * (v - d))
            .sum();
    }
    Ok(FusionGrads {
        visual: gv,
        depth: gd,
        weights: Tensor::new(vec![fv.rows(), 1], gw)?,
    })
}

/// Linear projection `C -> I` producing matching logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingHead {
    pub projection: Linear,
}

impl MatchingHead {
    pub fn new<R: Rng + ?Sized>(channels: usize, presets: usize, rng: &mut R) -> Self {
        Self {
            projection: Linear::new("matching", channels, presets, rng),
        }
    }

    pub fn zeros(channels: usize, presets: usize) -> Self {
        Self {
            projection: Linear::zeros("matching", channels, presets),
        }
    }

    pub fn presets(&self) -> usize {
        self.projection.out_features()
    }
}

impl Module for MatchingHead {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        self.projection.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.projection.visit_params_mut(f);
    }
}

/// Tolerance on row sums of a matching distribution.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// `[N, I]` row-stochastic shape&scale assignment, with its logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingDistribution {
    logits: Tensor,
    probs: Tensor,
}

impl MatchingDistribution {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        if logits.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "matching distribution",
                left: logits.shape().to_vec(),
                right: vec![0, 0],
            });
        }
        let probs = softmax(&logits);
        let dist = Self { logits, probs };
        dist.check_rows()?;
        Ok(dist)
    }

    fn check_rows(&self) -> Result<()> {
        for q in 0..self.probs.rows() {
            let row = self.probs.row(q);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::NumericalGuard(format!(
                    "matching distribution row {q} is not stochastic (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn queries(&self) -> usize {
        self.probs.rows()
    }

    pub fn presets(&self) -> usize {
        self.probs.cols()
    }

    pub fn row(&self, q: usize) -> &[f64] {
        self.probs.row(q)
    }

    /// Most probable preset for query `q`, lowest index on ties.
    pub fn argmax(&self, q: usize) -> usize {
        let row = self.row(q);
        let mut best = 0;
        for (i, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = i;
            }
        }
        best
    }

    /// Gradient w.r.t. logits given a gradient w.r.t. probabilities.
    pub fn logits_grad(&self, grad_probs: &Tensor) -> Result<Tensor> {
        softmax_backward(&self.probs, grad_probs)
    }
}

/// Linear projection followed by a row-wise softmax.
pub fn predict_matching_distribution(fused: &Tensor, head: &MatchingHead) -> Result<MatchingDistribution> {
    MatchingDistribution::from_logits(head.projection.forward(fused)?)
}

/// `S'[q] = sum_i p[q, i] * (r_i, w_i)`, an `[N, 2]` tensor.
pub fn expected_shape_scale(p: &MatchingDistribution, presets: &ShapeScalePreset) -> Result<Tensor> {
    if p.presets() != presets.len() {
        return Err(Error::Dimension {
            op: "expected_shape_scale",
            left: p.probs().shape().to_vec(),
            right: vec![presets.len()],
        });
    }
    let mut out = Vec::with_capacity(p.queries() * 2);
    for q in 0..p.queries() {
        let (mut r, mut w) = (0.0, 0.0);
        for (pi, e) in p.row(q).iter().zip(presets.entries()) {
            r += pi * e.ratio;
            w += pi * e.width;
        }
        out.extend([r, w]);
    }
    Tensor::new(vec![p.queries(), 2], out)
}

/// L1 regression of the expected shape&scale against the truth, averaged
/// over the supervised queries. Returns the loss and its logit gradient.
///
/// Kept as an alternative to the classification objective; it is not used
/// unless selected in the run configuration.
pub fn shape_scale_l1_loss(
    p: &MatchingDistribution,
    truths: &[(usize, ShapeScaleTruth)],
    presets: &ShapeScalePreset,
) -> Result<(f64, Tensor)> {
    let expected = expected_shape_scale(p, presets)?;
    let mut grad_probs = Tensor::zeros(p.probs().shape());
    if truths.is_empty() {
        return Ok((0.0, grad_probs));
    }
    let inv = 1.0 / truths.len() as f64;
    let mut loss = 0.0;
    for &(q, truth) in truths {
        if q >= p.queries() {
            return Err(Error::InvalidTarget(format!("query index {q} out of range")));
        }
        let dr = expected.row(q)[0] - truth.ratio;
        let dw = expected.row(q)[1] - truth.width;
        loss += (dr.abs() + dw.abs()) * inv;
        let (sr, sw) = (dr.signum() * inv, dw.signum() * inv);
        for (g, e) in grad_probs.row_mut(q).iter_mut().zip(presets.entries()) {
            *g += sr * e.ratio + sw * e.width;
        }
    }
    Ok((loss, p.logits_grad(&grad_probs)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d_stride2, grad_check};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn reduction_shape_contract() {
        let mut r = rng(0);
        let map = FeatureMap::new(Tensor::normal(&[64, 64, 8], 1.0, &mut r), BASE_STRIDE).unwrap();
        let reducer = MapReducer::new("v", 8, &mut r);
        let (out, _) = reducer.forward(&map).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (16, 16, 8));
        assert_eq!(out.stride(), REDUCED_STRIDE);
    }

    #[test]
    fn zero_kernels_give_bias_map() {
        let mut reducer = MapReducer::zeros("v", 3);
        reducer.second.bias.tensor = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let map = FeatureMap::constant(9, 7, 3, 5.0, BASE_STRIDE).unwrap();
        let (out, _) = reducer.forward(&map).unwrap();
        for p in 0..out.height() * out.width() {
            assert_eq!(out.data().row(p), &[0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn impulse_matches_two_pass_loop_oracle() {
        let mut r = rng(1);
        let reducer = MapReducer::new("v", 2, &mut r);
        let mut input = Tensor::zeros(&[8, 8, 2]);
        input.values_mut()[(5 * 8 + 3) * 2 + 1] = 1.0;
        let map = FeatureMap::new(input.clone(), BASE_STRIDE).unwrap();
        let (out, _) = reducer.forward(&map).unwrap();

        fn naive(x: &Tensor, k: &Tensor, b: &Tensor) -> Tensor {
            let (h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let co = k.shape()[3];
            let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
            Tensor::from_fn(&[ho, wo, co], |idx| {
                let (oy, ox, o) = (idx / (wo * co), (idx / co) % wo, idx % co);
                let mut s = b.values()[o];
                for ky in 0..3i64 {
                    for kx in 0..3i64 {
                        let iy = 2 * oy as i64 + ky - 1;
                        let ix = 2 * ox as i64 + kx - 1;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        for c in 0..ci {
                            let xv = x.values()[((iy as usize) * w + ix as usize) * ci + c];
                            let kv = k.values()[((ky as usize * 3 + kx as usize) * ci + c) * co + o];
                            s += xv * kv;
                        }
                    }
                }
                s
            })
        }
        let mid = naive(&input, &reducer.first.kernel.tensor, &reducer.first.bias.tensor);
        let expect = naive(&mid, &reducer.second.kernel.tensor, &reducer.second.bias.tensor);
        assert!(out.data().max_abs_diff(&expect) < 1e-12);
        let direct = conv2d_stride2(&mid, &reducer.second.kernel.tensor, &reducer.second.bias.tensor).unwrap();
        assert!(direct.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn fusion_examples() {
        let v = Tensor::full(&[2, 3], 1.25);
        let w = FusionWeights::new(2);
        let out = fuse_query_features(&v, &v, &w.w.tensor).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);

        let fv = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let fd = Tensor::new(vec![2, 2], vec![9.0, 9.0, 9.0, 9.0]).unwrap();
        let wt = Tensor::new(vec![2, 1], vec![1.0, 0.5]).unwrap();
        let out = fuse_query_features(&fv, &fd, &wt).unwrap();
        assert_eq!(out.row(0), fv.row(0));

        let out = fuse_query_features(
            &Tensor::full(&[1, 4], 1.0),
            &Tensor::full(&[1, 4], 2.0),
            &Tensor::full(&[1, 1], 0.3),
        )
        .unwrap();
        assert!(out.values().iter().all(|v| (v - 1.7).abs() < 1e-12));
        assert!(fuse_query_features(&fv, &Tensor::zeros(&[2, 3]), &wt).is_err());
    }

    #[test]
    fn fusion_grad_check() {
        for seed in 0..10 {
            let mut r = rng(seed);
            let fv = Tensor::normal(&[3, 4], 1.0, &mut r);
            let fd = Tensor::normal(&[3, 4], 1.0, &mut r);
            let w = Tensor::normal(&[3, 1], 0.5, &mut r);
            let target = Tensor::normal(&[3, 4], 1.0, &mut r);
            let err = grad_check(
                |t| {
                    let out = fuse_query_features(&t[0], &t[1], &t[2])?;
                    // smooth downstream loss: sum (out - target)^2 / 2 + sum sin(out)
                    let loss = out
                        .values()
                        .iter()
                        .zip(target.values())
                        .map(|(o, y)| 0.5 * (o - y).powi(2) + o.sin())
                        .sum();
                    let g = out.zip_map(&target, |o, y| o - y + o.cos())?;
                    let gr = fuse_query_features_backward(&t[0], &t[1], &t[2], &g)?;
                    Ok((loss, vec![gr.visual, gr.depth, gr.weights]))
                },
                &[fv, fd, w],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4);
        }
    }

    #[test]
    fn matching_distribution_examples() {
        let head = MatchingHead::zeros(4, 6);
        let p = predict_matching_distribution(&Tensor::full(&[3, 4], 0.7), &head).unwrap();
        assert!(p.probs().values().iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));

        let mut head = MatchingHead::zeros(4, 6);
        head.projection.bias.tensor.values_mut()[3] = 50.0;
        let p = predict_matching_distribution(&Tensor::full(&[2, 4], 0.7), &head).unwrap();
        assert!((p.row(1)[3] - 1.0).abs() < 1e-9);
        assert_eq!(p.argmax(0), 3);

        let mut r = rng(3);
        let head = MatchingHead::new(4, 5, &mut r);
        let x = Tensor::normal(&[3, 4], 1.0, &mut r);
        let p = predict_matching_distribution(&x, &head).unwrap();
        for q in 0..3 {
            let logits: Vec<f64> = (0..5)
                .map(|i| {
                    head.projection.bias.values()[i]
                        + (0..4)
                            .map(|c| x.row(q)[c] * head.projection.weight.values()[c * 5 + i])
                            .sum::<f64>()
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let sum: f64 = p.row(q).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for i in 0..5 {
                assert!((p.row(q)[i] - logits[i].exp() / z).abs() < 1e-12);
            }
        }
    }

    fn dist_from_rows(rows: &[Vec<f64>]) -> MatchingDistribution {
        // logits = ln p reproduces p exactly for strictly positive rows
        let flat: Vec<f64> = rows.iter().flatten().map(|p: &f64| p.max(1e-300).ln()).collect();
        MatchingDistribution::from_logits(Tensor::new(vec![rows.len(), rows[0].len()], flat).unwrap())
            .unwrap()
    }

    #[test]
    fn expected_shape_scale_examples() {
        let car = ShapeScalePreset::car();
        let mut onehot = vec![0.0; 6];
        onehot[4] = 1.0;
        let uniform = vec![1.0 / 6.0; 6];
        let pair = vec![0.0, 0.5, 0.0, 0.5, 0.0, 0.0];
        let p = dist_from_rows(&[onehot, uniform, pair]);
        let s = expected_shape_scale(&p, &car).unwrap();
        assert!((s.row(0)[0] - 0.5).abs() < 1e-12 && (s.row(0)[1] - 4.0).abs() < 1e-12);
        assert!((s.row(1)[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!((s.row(1)[1] - 25.0 / 6.0).abs() < 1e-12);
        assert!((s.row(2)[0] - 1.0).abs() < 1e-12 && (s.row(2)[1] - 4.0).abs() < 1e-12);
        assert!(expected_shape_scale(&p, &ShapeScalePreset::cyclist()).is_err());
    }

    #[test]
    fn l1_mode_gradient() {
        let car = ShapeScalePreset::car();
        for seed in 0..10 {
            let mut r = rng(seed);
            let logits = Tensor::normal(&[3, 6], 1.0, &mut r);
            let truths = vec![
                (0, ShapeScaleTruth { ratio: 0.8, width: 3.3 }),
                (2, ShapeScaleTruth { ratio: 0.45, width: 7.1 }),
            ];
            let err = grad_check(
                |t| {
                    let p = MatchingDistribution::from_logits(t[0].clone())?;
                    let (loss, g) = shape_scale_l1_loss(&p, &truths, &car)?;
                    Ok((loss, vec![g]))
                },
                &[logits],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4);
        }
    }
}

//! The shape&scale-perceptive decoder layer.
//!
//! One layer runs: self-attention over the queries, diverse local feature
//! extraction, query-level fusion and matching-distribution prediction, the
//! shape&scale-aware filter, deformable key-point aggregation and an FFN.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{
    fuse_query_features, fuse_query_features_backward, predict_matching_distribution,
    FusionWeights, MapReducer, MatchingDistribution, MatchingHead, ReduceCache,
};
use crate::sampling::{
    accumulate_sample, extract_local_features, extract_local_features_backward,
    require_stride16, sample_queries_from_map, sample_queries_from_map_backward, taps,
    FeatureMap, LocalFeatureStack, QuerySet, ShapeScalePreset,
};
use crate::tensor::{
    gelu, gelu_grad, sigmoid, softmax_backward, Linear, Module, Parameter, SelfAttention,
    SelfAttentionCache, Tensor,
};

/// Per-query `C -> C` map (a 1x1 convolution over the query axis) followed
/// by a sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveFilterLayer {
    pub combine: Linear,
}

impl AdaptiveFilterLayer {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self {
            combine: Linear::new("filter.combine", channels, channels, rng),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            combine: Linear::zeros("filter.combine", channels, channels),
        }
    }
}

impl Module for AdaptiveFilterLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        self.combine.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.combine.visit_params_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct FilterCache {
    context: Tensor,
    filter: Tensor,
}

/// Distribution-weighted local context gated through the adaptive layer:
/// `filter[q] = sigmoid(combine(sum_i p[q, i] * local[q, i]))`.
pub fn build_filter(
    local: &LocalFeatureStack,
    p: &MatchingDistribution,
    layer: &AdaptiveFilterLayer,
) -> Result<(Tensor, FilterCache)> {
    let (n, i, c) = (local.queries(), local.presets(), local.channels());
    if p.queries() != n || p.presets() != i {
        return Err(Error::Dimension {
            op: "build_filter",
            left: local.data.shape().to_vec(),
            right: p.probs().shape().to_vec(),
        });
    }
    let mut context = Tensor::zeros(&[n, c]);
    for q in 0..n {
        let row = context.row_mut(q);
        for (k, &w) in p.row(q).iter().enumerate() {
            row.iter_mut()
                .zip(local.feature(q, k))
                .for_each(|(a, &v)| *a += w * v);
        }
    }
    let filter = layer.combine.forward(&context)?.map(sigmoid);
    Ok((filter.clone(), FilterCache { context, filter }))
}

/// Returns gradients w.r.t. the local stack and the distribution
/// probabilities; the adaptive layer accumulates its own.
pub fn build_filter_backward(
    local: &LocalFeatureStack,
    p: &MatchingDistribution,
    layer: &mut AdaptiveFilterLayer,
    cache: &FilterCache,
    grad_filter: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g_pre = grad_filter.zip_map(&cache.filter, |g, f| g * f * (1.0 - f))?;
    let g_ctx = layer.combine.backward(&cache.context, &g_pre)?;
    let (n, i) = (local.queries(), local.presets());
    let mut g_local = Tensor::zeros(local.data.shape());
    let mut g_probs = Tensor::zeros(&[n, i]);
    for q in 0..n {
        let gc = g_ctx.row(q);
        for k in 0..i {
            let w = p.row(q)[k];
            g_local
                .row_mut(q * i + k)
                .iter_mut()
                .zip(gc)
                .for_each(|(a, &g)| *a = w * g);
            g_probs.row_mut(q)[k] = local.feature(q, k).iter().zip(gc).map(|(a, b)| a * b).sum();
        }
    }
    Ok((g_local, g_probs))
}

/// Element-wise product of query features and the filter.
pub fn augment_queries(features: &Tensor, filter: &Tensor) -> Result<Tensor> {
    features.zip_map(filter, |a, b| a * b)
}

pub fn augment_queries_backward(
    features: &Tensor,
    filter: &Tensor,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    Ok((grad.zip_map(filter, |g, f| g * f)?, grad.zip_map(features, |g, x| g * x)?))
}

/// Multi-head deformable attention with `points` sampling locations per head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformableAttention {
    pub heads: usize,
    pub points: usize,
    /// `C -> heads * points * 2` offsets in feature pixels.
    pub offset_head: Linear,
    /// `C -> heads * points` attention logits.
    pub weight_head: Linear,
    pub value_proj: Linear,
    pub output_proj: Linear,
}

impl DeformableAttention {
    /// Zero offset weights with biases spreading each head's points along
    /// its own direction at radii `1..=points`; uniform initial attention.
    pub fn new<R: Rng + ?Sized>(channels: usize, heads: usize, points: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "channel count {channels} is not divisible by head count {heads}"
            )));
        }
        if points == 0 {
            return Err(Error::Config("deformable attention needs at least one point".into()));
        }
        let mut offset_head = Linear::zeros("deform.offset", channels, heads * points * 2);
        let bias = offset_head.bias.tensor.values_mut();
        for h in 0..heads {
            let theta = 2.0 * PI * h as f64 / heads as f64;
            let (s, c) = theta.sin_cos();
            let norm = c.abs().max(s.abs());
            for k in 0..points {
                let radius = (k + 1) as f64;
                bias[(h * points + k) * 2] = c / norm * radius;
                bias[(h * points + k) * 2 + 1] = s / norm * radius;
            }
        }
        Ok(Self {
            heads,
            points,
            offset_head,
            weight_head: Linear::zeros("deform.weight", channels, heads * points),
            value_proj: Linear::new("deform.value", channels, channels, rng),
            output_proj: Linear::new("deform.output", channels, channels, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.value_proj.in_features()
    }
}

impl Module for DeformableAttention {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        self.offset_head.visit_params(f);
        self.weight_head.visit_params(f);
        self.value_proj.visit_params(f);
        self.output_proj.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.offset_head.visit_params_mut(f);
        self.weight_head.visit_params_mut(f);
        self.value_proj.visit_params_mut(f);
        self.output_proj.visit_params_mut(f);
    }
}

/// One sampled key point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyPointRecord {
    /// Sampling location in feature pixels, clamped to the map.
    pub position: (f64, f64),
    pub attention_weight: f64,
    pub head: usize,
    pub query: usize,
}

#[derive(Debug, Clone)]
pub struct DeformableCache {
    augmented: Tensor,
    /// Input map flattened to `[H*W, C]`.
    map_rows: Tensor,
    values: FeatureMap,
    /// Unclamped sampling positions, `(query, head, point)` order.
    positions: Vec<(f64, f64)>,
    /// Softmaxed weights, `[N * heads, points]`.
    weights: Tensor,
    head_out: Tensor,
}

/// Deformable aggregation around each query's reference point. Returns the
/// updated features (with residual) and every key point with its weight.
pub fn deformable_aggregate(
    map: &FeatureMap,
    queries: &QuerySet,
    augmented: &Tensor,
    cfg: &DeformableAttention,
) -> Result<(Tensor, Vec<KeyPointRecord>, DeformableCache)> {
    require_stride16(map, "deformable_aggregate")?;
    let (n, c) = (queries.count(), map.channels());
    augmented.expect_shape(&[n, c], "deformable_aggregate")?;
    let (heads, points) = (cfg.heads, cfg.points);
    let d = c / heads;
    let (h, w) = (map.height(), map.width());

    let map_rows = map.data().clone().reshape(vec![h * w, c])?;
    let values = FeatureMap::new(
        cfg.value_proj.forward(&map_rows)?.reshape(vec![h, w, c])?,
        map.stride(),
    )?;
    let offsets = cfg.offset_head.forward(augmented)?;
    let mut weights = cfg
        .weight_head
        .forward(augmented)?
        .reshape(vec![n * heads, points])?;
    for r in 0..weights.rows() {
        crate::tensor::softmax_in_place(weights.row_mut(r));
    }

    let mut positions = Vec::with_capacity(n * heads * points);
    let mut records = Vec::with_capacity(n * heads * points);
    let mut head_out = Tensor::zeros(&[n, c]);
    let mut sample = vec![0.0; c];
    for q in 0..n {
        let (rx, ry) = map.to_pixel(queries.positions()[q]);
        let off = offsets.row(q);
        for hd in 0..heads {
            let a = weights.row(q * heads + hd);
            for k in 0..points {
                let j = (hd * points + k) * 2;
                let (x, y) = (rx + off[j], ry + off[j + 1]);
                positions.push((x, y));
                records.push(KeyPointRecord {
                    position: (x.clamp(0.0, (w - 1) as f64), y.clamp(0.0, (h - 1) as f64)),
                    attention_weight: a[k],
                    head: hd,
                    query: q,
                });
                let t = taps(h, w, x, y);
                sample.iter_mut().for_each(|v| *v = 0.0);
                accumulate_sample(&values, &t, 1.0, &mut sample);
                head_out.row_mut(q)[hd * d..(hd + 1) * d]
                    .iter_mut()
                    .zip(&sample[hd * d..(hd + 1) * d])
                    .for_each(|(o, &s)| *o += a[k] * s);
            }
        }
    }
    let out = augmented.add(&cfg.output_proj.forward(&head_out)?)?;
    Ok((
        out,
        records,
        DeformableCache {
            augmented: augmented.clone(),
            map_rows,
            values,
            positions,
            weights,
            head_out,
        },
    ))
}

/// Accumulates parameter gradients; returns gradients w.r.t. the augmented
/// query features and the input map.
pub fn deformable_aggregate_backward(
    cfg: &mut DeformableAttention,
    cache: &DeformableCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (heads, points) = (cfg.heads, cfg.points);
    let values = &cache.values;
    let (h, w, c) = (values.height(), values.width(), values.channels());
    let n = cache.augmented.rows();
    let d = c / heads;

    let mut g_aug = grad_out.clone();
    let g_head = cfg.output_proj.backward(&cache.head_out, grad_out)?;
    let mut g_values = Tensor::zeros(&[h * w, c]);
    let mut g_weights = Tensor::zeros(&[n * heads, points]);
    let mut g_offsets = Tensor::zeros(&[n, heads * points * 2]);
    for q in 0..n {
        for hd in 0..heads {
            let a = cache.weights.row(q * heads + hd);
            let gh = &g_head.row(q)[hd * d..(hd + 1) * d];
            for k in 0..points {
                let (x, y) = cache.positions[(q * heads + hd) * points + k];
                let t = taps(h, w, x, y);
                let (mut gx, mut gy, mut ga) = (0.0, 0.0, 0.0);
                for tap in 0..4 {
                    let v = &values.data().row(t.pixels[tap])[hd * d..(hd + 1) * d];
                    let dot: f64 = v.iter().zip(gh).map(|(a, b)| a * b).sum();
                    ga += t.weights[tap] * dot;
                    gx += t.dx[tap] * dot * a[k];
                    gy += t.dy[tap] * dot * a[k];
                    let scale = t.weights[tap] * a[k];
                    if scale != 0.0 {
                        g_values.row_mut(t.pixels[tap])[hd * d..(hd + 1) * d]
                            .iter_mut()
                            .zip(gh)
                            .for_each(|(g, &u)| *g += scale * u);
                    }
                }
                g_weights.row_mut(q * heads + hd)[k] = ga;
                let j = (hd * points + k) * 2;
                g_offsets.row_mut(q)[j] = gx;
                g_offsets.row_mut(q)[j + 1] = gy;
            }
        }
    }
    let g_logits = softmax_backward(&cache.weights, &g_weights)?.reshape(vec![n, heads * points])?;
    g_aug.add_assign(&cfg.weight_head.backward(&cache.augmented, &g_logits)?)?;
    g_aug.add_assign(&cfg.offset_head.backward(&cache.augmented, &g_offsets)?)?;
    let g_map = cfg
        .value_proj
        .backward(&cache.map_rows, &g_values)?
        .reshape(vec![h, w, c])?;
    Ok((g_aug, g_map))
}

/// Two-layer feed-forward block with GELU, used with a residual connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub expand: Linear,
    pub contract: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            expand: Linear::new("ffn.expand", channels, hidden, rng),
            contract: Linear::new("ffn.contract", hidden, channels, rng),
        }
    }

    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            expand: Linear::zeros("ffn.expand", channels, hidden),
            contract: Linear::zeros("ffn.contract", hidden, channels),
        }
    }
}

impl Module for FeedForward {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        self.expand.visit_params(f);
        self.contract.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.expand.visit_params_mut(f);
        self.contract.visit_params_mut(f);
    }
}

/// Sizes of one decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderDims {
    pub queries: usize,
    pub channels: usize,
    pub presets: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_hidden: usize,
}

/// All learnable sub-layers of one decoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub self_attention: SelfAttention,
    pub reduce_visual: MapReducer,
    pub reduce_depth: MapReducer,
    pub fusion: FusionWeights,
    pub matching: MatchingHead,
    pub filter: AdaptiveFilterLayer,
    pub deformable: DeformableAttention,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(dims: DecoderDims, rng: &mut R) -> Result<Self> {
        let c = dims.channels;
        Ok(Self {
            self_attention: SelfAttention::new("self_attn", c, dims.heads, rng)?,
            reduce_visual: MapReducer::new("reduce_visual", c, rng),
            reduce_depth: MapReducer::new("reduce_depth", c, rng),
            fusion: FusionWeights::new(dims.queries),
            matching: MatchingHead::new(c, dims.presets, rng),
            filter: AdaptiveFilterLayer::new(c, rng),
            deformable: DeformableAttention::new(c, dims.heads, dims.points, rng)?,
            ffn: FeedForward::new(c, dims.ffn_hidden, rng),
        })
    }
}

impl Module for DecoderLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        self.self_attention.visit_params(f);
        self.reduce_visual.visit_params(f);
        self.reduce_depth.visit_params(f);
        self.fusion.visit_params(f);
        self.matching.visit_params(f);
        self.filter.visit_params(f);
        self.deformable.visit_params(f);
        self.ffn.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.self_attention.visit_params_mut(f);
        self.reduce_visual.visit_params_mut(f);
        self.reduce_depth.visit_params_mut(f);
        self.fusion.visit_params_mut(f);
        self.matching.visit_params_mut(f);
        self.filter.visit_params_mut(f);
        self.deformable.visit_params_mut(f);
        self.ffn.visit_params_mut(f);
    }
}

/// Intermediates of [`decoder_forward`] needed by the backward pass.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    attn: SelfAttentionCache,
    attended: Tensor,
    local: LocalFeatureStack,
    reduce_visual: ReduceCache,
    reduce_depth: ReduceCache,
    reduced_visual: FeatureMap,
    reduced_depth: FeatureMap,
    sampled_visual: Tensor,
    sampled_depth: Tensor,
    fused: Tensor,
    filter: FilterCache,
    deformable: DeformableCache,
    aggregated: Tensor,
    ffn_pre: Tensor,
    ffn_act: Tensor,
}

impl DecoderCache {
    pub fn filter(&self) -> &Tensor {
        &self.filter.filter
    }

    pub fn local_features(&self) -> &LocalFeatureStack {
        &self.local
    }

    pub fn fused(&self) -> &Tensor {
        &self.fused
    }
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub queries: QuerySet,
    pub matching: MatchingDistribution,
    pub keypoints: Vec<KeyPointRecord>,
    pub cache: DecoderCache,
}

/// Gradients flowing out of a decoder layer.
#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub queries: Tensor,
    pub map_visual: Tensor,
    pub map_depth: Tensor,
}

/// Runs one decoder layer.
pub fn decoder_forward(
    map_v: &FeatureMap,
    map_d: &FeatureMap,
    queries: &QuerySet,
    presets: &ShapeScalePreset,
    layer: &DecoderLayer,
) -> Result<DecoderOutput> {
    if map_v.data().shape() != map_d.data().shape() {
        return Err(Error::Dimension {
            op: "decoder_forward maps",
            left: map_v.data().shape().to_vec(),
            right: map_d.data().shape().to_vec(),
        });
    }
    let (attended, attn) = layer.self_attention.forward(&queries.features)?;
    let local = extract_local_features(map_v, queries, presets)?;

    let (reduced_visual, reduce_visual) = layer.reduce_visual.forward(map_v)?;
    let (reduced_depth, reduce_depth) = layer.reduce_depth.forward(map_d)?;
    let sampled_visual = sample_queries_from_map(&reduced_visual, queries)?;
    let sampled_depth = sample_queries_from_map(&reduced_depth, queries)?;
    let fused = fuse_query_features(&sampled_visual, &sampled_depth, &layer.fusion.w.tensor)?;
    let matching = predict_matching_distribution(&fused, &layer.matching)?;

    let (filter, filter_cache) = build_filter(&local, &matching, &layer.filter)?;
    let augmented = augment_queries(&attended, &filter)?;
    let (aggregated, keypoints, deformable) =
        deformable_aggregate(map_v, queries, &augmented, &layer.deformable)?;

    let ffn_pre = layer.ffn.expand.forward(&aggregated)?;
    let ffn_act = ffn_pre.map(gelu);
    let out = aggregated.add(&layer.ffn.contract.forward(&ffn_act)?)?;

    Ok(DecoderOutput {
        queries: queries.with_features(out)?,
        matching,
        keypoints,
        cache: DecoderCache {
            attn,
            attended,
            local,
            reduce_visual,
            reduce_depth,
            reduced_visual,
            reduced_depth,
            sampled_visual,
            sampled_depth,
            fused,
            filter: filter_cache,
            deformable,
            aggregated,
            ffn_pre,
            ffn_act,
        },
    })
}

impl DecoderLayer {
    /// Backward pass of [`decoder_forward`]. `grad_features` is the gradient
    /// w.r.t. the updated query features, `grad_logits` w.r.t. the matching
    /// logits. Parameter gradients accumulate in place.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &mut self,
        map_v: &FeatureMap,
        queries: &QuerySet,
        presets: &ShapeScalePreset,
        matching: &MatchingDistribution,
        cache: &DecoderCache,
        grad_features: &Tensor,
        grad_logits: &Tensor,
    ) -> Result<DecoderGrads> {
        // FFN with residual
        let g_act = self.ffn.contract.backward(&cache.ffn_act, grad_features)?;
        let g_pre = g_act.zip_map(&cache.ffn_pre, |g, x| g * gelu_grad(x))?;
        let mut g_aggr = grad_features.clone();
        g_aggr.add_assign(&self.ffn.expand.backward(&cache.aggregated, &g_pre)?)?;

        let (g_aug, mut g_map_v) = deformable_aggregate_backward(&mut self.deformable, &cache.deformable, &g_aggr)?;
        let (g_attended, g_filter) =
            augment_queries_backward(&cache.attended, &cache.filter.filter, &g_aug)?;

        let (g_local, g_probs) =
            build_filter_backward(&cache.local, matching, &mut self.filter, &cache.filter, &g_filter)?;
        g_map_v.add_assign(&extract_local_features_backward(map_v, queries, presets, &g_local)?)?;

        let mut g_logits = matching.logits_grad(&g_probs)?;
        g_logits.add_assign(grad_logits)?;
        let g_fused = self.matching.projection.backward(&cache.fused, &g_logits)?;
        let fg = fuse_query_features_backward(
            &cache.sampled_visual,
            &cache.sampled_depth,
            &self.fusion.w.tensor,
            &g_fused,
        )?;
        self.fusion.w.accumulate(fg.weights.values());
        let g_rv = sample_queries_from_map_backward(&cache.reduced_visual, queries, &fg.visual)?;
        let g_rd = sample_queries_from_map_backward(&cache.reduced_depth, queries, &fg.depth)?;
        g_map_v.add_assign(&self.reduce_visual.backward(&cache.reduce_visual, &g_rv)?)?;
        let g_map_d = self.reduce_depth.backward(&cache.reduce_depth, &g_rd)?;

        let g_queries = self.self_attention.backward(&cache.attn, &g_attended)?;
        Ok(DecoderGrads {
            queries: g_queries,
            map_visual: g_map_v,
            map_depth: g_map_d,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{bilinear_sample, BASE_STRIDE};
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_map(h: usize, w: usize, c: usize, r: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::new(Tensor::normal(&[h, w, c], 1.0, r), BASE_STRIDE).unwrap()
    }

    fn random_dist(n: usize, i: usize, r: &mut ChaCha8Rng) -> MatchingDistribution {
        MatchingDistribution::from_logits(Tensor::normal(&[n, i], 1.0, r)).unwrap()
    }

    #[test]
    fn filter_examples() {
        let mut r = rng(0);
        let local = LocalFeatureStack::new(Tensor::normal(&[2, 3, 4], 1.0, &mut r)).unwrap();
        let onehot = MatchingDistribution::from_logits(
            Tensor::new(vec![2, 3], vec![0.0, 800.0, 0.0, 800.0, 0.0, 0.0]).unwrap(),
        )
        .unwrap();
        let (_, cache) = build_filter(&local, &onehot, &AdaptiveFilterLayer::zeros(4)).unwrap();
        assert_eq!(cache.context.row(0), local.feature(0, 1));
        assert_eq!(cache.context.row(1), local.feature(1, 0));

        let (f, _) = build_filter(&local, &onehot, &AdaptiveFilterLayer::zeros(4)).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.5));

        let layer = AdaptiveFilterLayer::new(4, &mut r);
        let p = random_dist(2, 3, &mut r);
        let (f, _) = build_filter(&local, &p, &layer).unwrap();
        for q in 0..2 {
            let mut ctx = [0.0; 4];
            for k in 0..3 {
                for c in 0..4 {
                    ctx[c] += p.row(q)[k] * local.feature(q, k)[c];
                }
            }
            for o in 0..4 {
                let mut z = layer.combine.bias.values()[o];
                for c in 0..4 {
                    z += ctx[c] * layer.combine.weight.values()[c * 4 + o];
                }
                let expect = 1.0 / (1.0 + (-z).exp());
                assert!((f.row(q)[o] - expect).abs() < 1e-12);
                assert!(f.row(q)[o] > 0.0 && f.row(q)[o] < 1.0);
            }
        }
        assert!(build_filter(&local, &random_dist(3, 3, &mut r), &layer).is_err());
    }

    #[test]
    fn augment_examples() {
        let x = Tensor::full(&[2, 3], 2.0);
        assert_eq!(augment_queries(&x, &Tensor::full(&[2, 3], 1.0)).unwrap(), x);
        assert!(augment_queries(&x, &Tensor::zeros(&[2, 3])).unwrap().values().iter().all(|&v| v == 0.0));
        let y = augment_queries(&x, &Tensor::full(&[2, 3], 0.25)).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.5));
        assert!(augment_queries(&x, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn single_point_attention_reads_one_sample() {
        let mut r = rng(1);
        let map = random_map(6, 7, 4, &mut r);
        let q = QuerySet::new(Tensor::normal(&[2, 4], 1.0, &mut r), vec![(0.4, 0.3), (0.8, 0.9)]).unwrap();
        let mut cfg = DeformableAttention::new(4, 2, 1, &mut r).unwrap();
        cfg.offset_head.weight.tensor = Tensor::normal(&[4, 4], 0.3, &mut r);
        cfg.weight_head.weight.tensor = Tensor::normal(&[4, 2], 1.0, &mut r);
        let aug = q.features.clone();
        let (_, records, cache) = deformable_aggregate(&map, &q, &aug, &cfg).unwrap();
        assert!(records.iter().all(|k| k.attention_weight == 1.0));
        let offsets = cfg.offset_head.forward(&aug).unwrap();
        for qi in 0..2 {
            let (rx, ry) = map.to_pixel(q.positions()[qi]);
            for hd in 0..2 {
                let pos = (rx + offsets.row(qi)[hd * 2], ry + offsets.row(qi)[hd * 2 + 1]);
                let s = bilinear_sample(&cache.values, &[pos]).unwrap();
                for c in hd * 2..hd * 2 + 2 {
                    assert!((cache.head_out.row(qi)[c] - s.values()[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_map_with_zero_offsets_is_position_independent() {
        let mut r = rng(2);
        let map = FeatureMap::constant(6, 6, 4, 1.5, BASE_STRIDE).unwrap();
        let feats = Tensor::normal(&[1, 4], 1.0, &mut r);
        let mut cfg = DeformableAttention::new(4, 2, 3, &mut r).unwrap();
        cfg.offset_head = Linear::zeros("o", 4, 12);
        let a = QuerySet::new(feats.clone(), vec![(0.1, 0.2)]).unwrap();
        let b = QuerySet::new(feats.clone(), vec![(0.9, 0.6)]).unwrap();
        let (oa, ka, _) = deformable_aggregate(&map, &a, &feats, &cfg).unwrap();
        let (ob, _, _) = deformable_aggregate(&map, &b, &feats, &cfg).unwrap();
        assert!(oa.max_abs_diff(&ob) < 1e-12);
        let v = cfg.value_proj.forward(&Tensor::full(&[1, 4], 1.5)).unwrap();
        let expect = feats.add(&cfg.output_proj.forward(&v).unwrap()).unwrap();
        assert!(oa.max_abs_diff(&expect) < 1e-12);
        let reference = map.to_pixel((0.1, 0.2));
        assert!(ka.iter().all(|k| k.position == reference));
    }

    /// Literal (query, head, point, channel) loops over the raw parameters.
    fn aggregate_oracle(map: &FeatureMap, q: &QuerySet, aug: &Tensor, cfg: &DeformableAttention) -> Vec<f64> {
        let (n, c) = (q.count(), map.channels());
        let (heads, points) = (cfg.heads, cfg.points);
        let d = c / heads;
        let lin = |l: &Linear, x: &[f64], o: usize| -> f64 {
            let cout = l.out_features();
            l.bias.values()[o] + x.iter().enumerate().map(|(i, v)| v * l.weight.values()[i * cout + o]).sum::<f64>()
        };
        let value_at = |y: usize, x: usize, ch: usize| lin(&cfg.value_proj, map.pixel(y, x), ch);
        let mut head_out = vec![0.0; n * c];
        for qi in 0..n {
            let a = aug.row(qi);
            let (rx, ry) = map.to_pixel(q.positions()[qi]);
            for hd in 0..heads {
                let logits: Vec<f64> = (0..points).map(|k| lin(&cfg.weight_head, a, hd * points + k)).collect();
                let z: f64 = logits.iter().map(|v| v.exp()).sum();
                for k in 0..points {
                    let wk = logits[k].exp() / z;
                    let x = (rx + lin(&cfg.offset_head, a, (hd * points + k) * 2)).clamp(0.0, (map.width() - 1) as f64);
                    let y = (ry + lin(&cfg.offset_head, a, (hd * points + k) * 2 + 1)).clamp(0.0, (map.height() - 1) as f64);
                    let (x0, y0) = ((x.floor() as usize).min(map.width() - 2), (y.floor() as usize).min(map.height() - 2));
                    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
                    for ch in hd * d..(hd + 1) * d {
                        let s = (1.0 - fy) * (1.0 - fx) * value_at(y0, x0, ch)
                            + (1.0 - fy) * fx * value_at(y0, x0 + 1, ch)
                            + fy * (1.0 - fx) * value_at(y0 + 1, x0, ch)
                            + fy * fx * value_at(y0 + 1, x0 + 1, ch);
                        head_out[qi * c + ch] += wk * s;
                    }
                }
            }
        }
        let mut out = vec![0.0; n * c];
        for qi in 0..n {
            for o in 0..c {
                out[qi * c + o] = aug.row(qi)[o] + lin(&cfg.output_proj, &head_out[qi * c..(qi + 1) * c], o);
            }
        }
        out
    }

    #[test]
    fn aggregation_matches_loop_oracle() {
        let mut r = rng(3);
        let map = random_map(7, 8, 4, &mut r);
        let q = QuerySet::new(Tensor::normal(&[2, 4], 1.0, &mut r), vec![(0.3, 0.5), (0.75, 0.2)]).unwrap();
        let mut cfg = DeformableAttention::new(4, 2, 2, &mut r).unwrap();
        cfg.offset_head.weight.tensor = Tensor::normal(&[4, 8], 0.5, &mut r);
        cfg.weight_head.weight.tensor = Tensor::normal(&[4, 4], 1.0, &mut r);
        let (out, records, _) = deformable_aggregate(&map, &q, &q.features, &cfg).unwrap();
        for (a, b) in out.values().iter().zip(aggregate_oracle(&map, &q, &q.features, &cfg)) {
            assert!((a - b).abs() < 1e-12);
        }
        for qi in 0..2 {
            for hd in 0..2 {
                let s: f64 = records
                    .iter()
                    .filter(|k| k.query == qi && k.head == hd)
                    .map(|k| k.attention_weight)
                    .sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deformable_gradients() {
        for seed in 0..10 {
            let mut r = rng(10 + seed);
            let map = random_map(7, 8, 4, &mut r);
            let q = QuerySet::new(Tensor::zeros(&[2, 4]), vec![(0.31, 0.52), (0.73, 0.27)]).unwrap();
            let mut cfg = DeformableAttention::new(4, 2, 2, &mut r).unwrap();
            cfg.offset_head.weight.tensor = Tensor::normal(&[4, 8], 0.3, &mut r);
            cfg.weight_head.weight.tensor = Tensor::normal(&[4, 4], 1.0, &mut r);
            let aug = Tensor::normal(&[2, 4], 1.0, &mut r);
            let target = Tensor::normal(&[2, 4], 1.0, &mut r);
            let err = grad_check(
                |t| {
                    let m = FeatureMap::new(t[1].clone(), BASE_STRIDE)?;
                    let mut layer = cfg.clone();
                    let (out, _, cache) = deformable_aggregate(&m, &q, &t[0], &layer)?;
                    let loss = out.values().iter().zip(target.values()).map(|(a, b)| 0.5 * (a - b).powi(2)).sum();
                    let g = out.zip_map(&target, |a, b| a - b)?;
                    let (ga, gm) = deformable_aggregate_backward(&mut layer, &cache, &g)?;
                    Ok((loss, vec![ga, gm]))
                },
                &[aug, map.data().clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn filter_gradients() {
        for seed in 0..10 {
            let mut r = rng(30 + seed);
            let layer = AdaptiveFilterLayer::new(4, &mut r);
            let local = Tensor::normal(&[3, 3, 4], 1.0, &mut r);
            let logits = Tensor::normal(&[3, 3], 1.0, &mut r);
            let target = Tensor::normal(&[3, 4], 0.3, &mut r);
            let err = grad_check(
                |t| {
                    let stack = LocalFeatureStack::new(t[0].clone())?;
                    let p = MatchingDistribution::from_logits(t[1].clone())?;
                    let mut l = layer.clone();
                    let (f, cache) = build_filter(&stack, &p, &l)?;
                    let loss = f.values().iter().zip(target.values()).map(|(a, b)| 0.5 * (a - b).powi(2)).sum();
                    let g = f.zip_map(&target, |a, b| a - b)?;
                    let (gl, gp) = build_filter_backward(&stack, &p, &mut l, &cache, &g)?;
                    Ok((loss, vec![gl, p.logits_grad(&gp)?]))
                },
                &[local, logits],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}

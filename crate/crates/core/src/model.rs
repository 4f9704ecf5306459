//! Query embeddings, a stack of decoder layers and the prediction head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{decoder_forward, DecoderCache, DecoderDims, DecoderLayer, KeyPointRecord};
use crate::error::{Error, Result};
use crate::fusion::MatchingDistribution;
use crate::losses::QueryPrediction;
use crate::sampling::{FeatureMap, QuerySet, ShapeScalePreset};
use crate::tensor::{Linear, Module, Parameter, Tensor};

/// Reference scale of the regressed metric depth, meters.
pub const DEPTH_SCALE: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub queries: usize,
    pub channels: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_hidden: usize,
    pub layers: usize,
    /// Object classes, not counting background.
    pub classes: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            queries: 16,
            channels: 32,
            heads: 8,
            points: 4,
            ffn_hidden: 128,
            layers: 1,
            classes: 1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("queries", self.queries),
            ("channels", self.channels),
            ("heads", self.heads),
            ("points", self.points),
            ("ffn_hidden", self.ffn_hidden),
            ("layers", self.layers),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channel count {} is not divisible by head count {}",
                self.channels, self.heads
            )));
        }
        Ok(())
    }

    /// Width of the prediction head output.
    pub fn head_width(&self) -> usize {
        self.classes + 1 + QueryPrediction::REGRESSION_LEN
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub config: DetectorConfig,
    pub presets: ShapeScalePreset,
    pub query_embed: Parameter,
    pub positions: Vec<(f64, f64)>,
    pub layers: Vec<DecoderLayer>,
    pub head: Linear,
}

#[derive(Debug, Clone)]
struct DetectorCache {
    inputs: Vec<QuerySet>,
    layers: Vec<DecoderCache>,
    features: Tensor,
    raw: Tensor,
}

#[derive(Debug, Clone)]
pub struct DetectorOutput {
    pub predictions: Vec<QueryPrediction>,
    /// One distribution per decoder layer.
    pub matching: Vec<MatchingDistribution>,
    /// Key points of the last layer.
    pub keypoints: Vec<KeyPointRecord>,
    cache: DetectorCache,
}

impl DetectorOutput {
    pub fn final_matching(&self) -> &MatchingDistribution {
        self.matching.last().expect("at least one layer")
    }

    pub fn layer_cache(&self, layer: usize) -> &DecoderCache {
        &self.cache.layers[layer]
    }
}

impl Detector {
    pub fn new<R: Rng + ?Sized>(config: DetectorConfig, presets: ShapeScalePreset, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dims = DecoderDims {
            queries: config.queries,
            channels: config.channels,
            presets: presets.len(),
            heads: config.heads,
            points: config.points,
            ffn_hidden: config.ffn_hidden,
        };
        let query_embed = Parameter::new("query_embed", Tensor::normal(&[config.queries, config.channels], 1.0, rng));
        let layers = (0..config.layers)
            .map(|_| DecoderLayer::new(dims, rng))
            .collect::<Result<_>>()?;
        let mut head = Linear::new("head", config.channels, config.head_width(), rng);
        head.bias.tensor.values_mut().iter_mut().for_each(|b| *b = 0.0);
        Ok(Self {
            config,
            presets,
            query_embed,
            positions: QuerySet::grid_positions(config.queries),
            layers,
            head,
        })
    }

    pub fn queries(&self) -> Result<QuerySet> {
        QuerySet::new(self.query_embed.tensor.clone(), self.positions.clone())
    }

    fn reference_px(&self, map: &FeatureMap, q: usize) -> (f64, f64) {
        let (x, y) = map.to_pixel(self.positions[q]);
        let s = map.stride() as f64;
        (x * s, y * s)
    }

    /// Maps one raw head row to a prediction.
    fn decode(&self, raw: &[f64], reference: (f64, f64), stride: f64) -> Result<QueryPrediction> {
        let k = self.config.classes + 1;
        let mut p = QueryPrediction::from_flat(raw, k)?;
        p.box_lrtb = p.box_lrtb.map(|v| stride * v.exp());
        p.center3d_proj = [reference.0 + stride * raw[k + 4], reference.1 + stride * raw[k + 5]];
        p.d_reg = DEPTH_SCALE * raw[k + 6].exp();
        p.size3d = p.size3d.map(f64::exp);
        Ok(p)
    }

    /// Chain rule through [`Self::decode`].
    fn decode_backward(&self, pred: &QueryPrediction, grad: &QueryPrediction, stride: f64) -> Vec<f64> {
        let k = self.config.classes + 1;
        let mut g = grad.to_flat();
        for i in 0..4 {
            g[k + i] *= pred.box_lrtb[i];
        }
        g[k + 4] *= stride;
        g[k + 5] *= stride;
        g[k + 6] *= pred.d_reg;
        for i in 0..3 {
            g[k + 8 + i] *= pred.size3d[i];
        }
        g
    }

    pub fn forward(&self, map_v: &FeatureMap, map_d: &FeatureMap) -> Result<DetectorOutput> {
        let mut queries = self.queries()?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut matching = Vec::with_capacity(self.layers.len());
        let mut keypoints = Vec::new();
        for layer in &self.layers {
            let out = decoder_forward(map_v, map_d, &queries, &self.presets, layer)?;
            inputs.push(queries);
            queries = out.queries;
            caches.push(out.cache);
            matching.push(out.matching);
            keypoints = out.keypoints;
        }
        let raw = self.head.forward(&queries.features)?;
        let stride = map_v.stride() as f64;
        let predictions = (0..raw.rows())
            .map(|q| self.decode(raw.row(q), self.reference_px(map_v, q), stride))
            .collect::<Result<_>>()?;
        Ok(DetectorOutput {
            predictions,
            matching,
            keypoints,
            cache: DetectorCache {
                inputs,
                layers: caches,
                features: queries.features,
                raw,
            },
        })
    }

    /// Accumulates parameter gradients given gradients w.r.t. every
    /// prediction and every layer's matching logits. Returns the gradients
    /// w.r.t. the two input maps.
    pub fn backward(
        &mut self,
        map_v: &FeatureMap,
        output: &DetectorOutput,
        grad_predictions: &[QueryPrediction],
        grad_logits: &[Tensor],
    ) -> Result<(Tensor, Tensor)> {
        if grad_predictions.len() != self.config.queries || grad_logits.len() != self.layers.len() {
            return Err(Error::Dimension {
                op: "Detector::backward",
                left: vec![grad_predictions.len(), grad_logits.len()],
                right: vec![self.config.queries, self.layers.len()],
            });
        }
        let stride = map_v.stride() as f64;
        let width = self.config.head_width();
        let mut g_raw = Vec::with_capacity(self.config.queries * width);
        for (p, g) in output.predictions.iter().zip(grad_predictions) {
            g_raw.extend(self.decode_backward(p, g, stride));
        }
        let g_raw = Tensor::new(output.cache.raw.shape().to_vec(), g_raw)?;
        let mut g_features = self.head.backward(&output.cache.features, &g_raw)?;
        let mut g_map_v = Tensor::zeros(map_v.data().shape());
        let mut g_map_d = Tensor::zeros(map_v.data().shape());
        for l in (0..self.layers.len()).rev() {
            let grads = self.layers[l].backward(
                map_v,
                &output.cache.inputs[l],
                &self.presets,
                &output.matching[l],
                &output.cache.layers[l],
                &g_features,
                &grad_logits[l],
            )?;
            g_map_v.add_assign(&grads.map_visual)?;
            g_map_d.add_assign(&grads.map_depth)?;
            g_features = grads.queries;
        }
        self.query_embed.accumulate(g_features.values());
        Ok((g_map_v, g_map_d))
    }
}

impl Module for Detector {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.query_embed);
        for l in &self.layers {
            l.visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.query_embed);
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
    }
}

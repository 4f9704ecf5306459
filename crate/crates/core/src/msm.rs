//! Shape&scale category labels and the multi-class focal matching loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::MatchingDistribution;
use crate::sampling::{ShapeScale, ShapeScalePreset, BASE_STRIDE};
use crate::tensor::{log_softmax_row, Tensor};

/// Ground-truth aspect ratio and width (feature pixels) of an object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeScaleTruth {
    pub ratio: f64,
    pub width: f64,
}

impl From<ShapeScale> for ShapeScaleTruth {
    fn from(s: ShapeScale) -> Self {
        Self {
            ratio: s.ratio,
            width: s.width,
        }
    }
}

/// Shape&scale of a 2D box given as center-to-edge offsets in image pixels.
pub fn truth_from_box(l: f64, r: f64, t: f64, b: f64) -> Result<ShapeScaleTruth> {
    let width = l + r;
    let height = t + b;
    if !(width > 0.0 && height > 0.0) || !width.is_finite() || !height.is_finite() {
        return Err(Error::InvalidTarget(format!(
            "degenerate box (l={l}, r={r}, t={t}, b={b})"
        )));
    }
    Ok(ShapeScaleTruth {
        ratio: height / width,
        width: width / BASE_STRIDE as f64,
    })
}

/// Label weights, focal exponent and the weight of the matching loss in
/// the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsmConfig {
    /// Weight on the ratio distance.
    pub w1: f64,
    /// Weight on the width distance.
    pub w2: f64,
    pub gamma: f64,
    pub lambda_msm: f64,
}

impl Default for MsmConfig {
    fn default() -> Self {
        Self {
            w1: 2.0,
            w2: 1.0,
            gamma: 2.0,
            lambda_msm: 0.1,
        }
    }
}

impl MsmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 > 0.0 && self.w2 > 0.0) {
            return Err(Error::Config("w1 and w2 must be positive".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("gamma must be non-negative".into()));
        }
        if !(self.lambda_msm >= 0.0 && self.lambda_msm.is_finite()) {
            return Err(Error::Config("lambda_msm must be non-negative".into()));
        }
        Ok(())
    }
}

/// One-hot preset category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryLabel {
    pub index: usize,
    pub onehot: Vec<u8>,
}

impl CategoryLabel {
    pub fn new(index: usize, categories: usize) -> Self {
        let mut onehot = vec![0; categories];
        onehot[index] = 1;
        Self { index, onehot }
    }
}

/// `w1 * |r_hat - r_i| + w2 * |w_hat - w_i|`.
pub fn weighted_distance(truth: ShapeScaleTruth, preset: ShapeScale, cfg: &MsmConfig) -> f64 {
    cfg.w1 * (truth.ratio - preset.ratio).abs() + cfg.w2 * (truth.width - preset.width).abs()
}

/// Nearest preset by weighted distance; ties go to the lowest index.
pub fn generate_category_label(
    truth: ShapeScaleTruth,
    presets: &ShapeScalePreset,
    cfg: &MsmConfig,
) -> CategoryLabel {
    label_with_ties(truth, presets, cfg).0
}

/// Relative tolerance under which two weighted distances are tied.
pub const TIE_TOL: f64 = 1e-12;

/// Label plus whether another preset ties with the minimum.
pub fn label_with_ties(
    truth: ShapeScaleTruth,
    presets: &ShapeScalePreset,
    cfg: &MsmConfig,
) -> (CategoryLabel, bool) {
    let dists: Vec<f64> = presets
        .entries()
        .iter()
        .map(|&e| weighted_distance(truth, e, cfg))
        .collect();
    // distances equal up to rounding count as tied
    let tol = |d: f64| TIE_TOL * d.abs().max(1.0);
    let mut best = 0;
    for (i, &d) in dists.iter().enumerate() {
        if d < dists[best] - tol(dists[best]) {
            best = i;
        }
    }
    let tied = dists
        .iter()
        .enumerate()
        .any(|(i, &d)| i != best && (d - dists[best]).abs() <= tol(dists[best]));
    (CategoryLabel::new(best, presets.len()), tied)
}

/// Lower bound applied to the true-class probability before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalLoss {
    pub value: f64,
    /// The true-class probability hit [`PROB_FLOOR`].
    pub floored: bool,
}

/// `-(1 - p_t)^gamma * ln p_t` from a probability row.
pub fn focal_loss_multiclass(p_row: &[f64], label: &CategoryLabel, gamma: f64) -> Result<FocalLoss> {
    if label.index >= p_row.len() {
        return Err(Error::Dimension {
            op: "focal_loss_multiclass",
            left: vec![p_row.len()],
            right: vec![label.index],
        });
    }
    let sum: f64 = p_row.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::NumericalGuard(format!(
            "probabilities sum to {sum}, expected 1"
        )));
    }
    let p = p_row[label.index];
    let floored = p < PROB_FLOOR;
    let pt = p.max(PROB_FLOOR);
    let value = -(1.0 - pt).max(0.0).powf(gamma) * pt.ln();
    Ok(FocalLoss {
        value: value.max(0.0),
        floored,
    })
}

/// Focal loss and its gradient w.r.t. the logits, evaluated through
/// log-softmax.
pub fn focal_loss_from_logits(logits: &[f64], target: usize, gamma: f64) -> (f64, Vec<f64>) {
    let log_p = log_softmax_row(logits);
    let lpt = log_p[target];
    let pt = lpt.exp();
    let one_minus = (1.0 - pt).max(0.0);
    let modulator = one_minus.powf(gamma);
    let loss = -modulator * lpt;
    // dL/dp_t, then chain through dp_t/dz_j = p_t (delta_tj - p_j)
    let dmod = if gamma == 0.0 || one_minus == 0.0 {
        0.0
    } else {
        gamma * one_minus.powf(gamma - 1.0)
    };
    // dL/dz_j = p_t * dL/dp_t * (delta_tj - p_j), with
    // p_t * dL/dp_t = dmod * p_t * ln p_t - modulator
    let coeff = dmod * pt * lpt - modulator;
    let grad = log_p
        .iter()
        .enumerate()
        .map(|(j, &lp)| {
            let delta = if j == target { 1.0 } else { 0.0 };
            coeff * (delta - lp.exp())
        })
        .collect();
    (loss, grad)
}

/// Matching loss value and gradient.
#[derive(Debug, Clone)]
pub struct MsmLoss {
    pub value: f64,
    /// `[N, I]` gradient w.r.t. the matching logits.
    pub grad_logits: Tensor,
    pub supervised: usize,
}

/// Mean focal loss over the labelled (positive) queries. Unlabelled queries
/// contribute nothing; an empty label list yields zero.
pub fn msm_loss(p: &MatchingDistribution, labels: &[(usize, CategoryLabel)], gamma: f64) -> Result<MsmLoss> {
    let mut grad = Tensor::zeros(p.logits().shape());
    if labels.is_empty() {
        log::warn!("matching loss: no positive queries in batch");
        return Ok(MsmLoss {
            value: 0.0,
            grad_logits: grad,
            supervised: 0,
        });
    }
    let inv = 1.0 / labels.len() as f64;
    let mut value = 0.0;
    for (q, label) in labels {
        if *q >= p.queries() || label.index >= p.presets() {
            return Err(Error::InvalidTarget(format!(
                "label ({q}, {}) outside a {}x{} distribution",
                label.index,
                p.queries(),
                p.presets()
            )));
        }
        let (l, g) = focal_loss_from_logits(p.logits().row(*q), label.index, gamma);
        value += l * inv;
        grad.row_mut(*q)
            .iter_mut()
            .zip(g)
            .for_each(|(a, b)| *a += b * inv);
    }
    Ok(MsmLoss {
        value,
        grad_logits: grad,
        supervised: labels.len(),
    })
}

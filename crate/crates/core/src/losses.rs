//! Target assignment and the composite detection objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msm::focal_loss_from_logits;
use crate::sampling::{bilinear_sample, bilinear_sample_backward, FeatureMap, QuerySet};

/// Focal exponent of the classification term.
pub const CLASS_GAMMA: f64 = 2.0;

/// One ground-truth object. The 2D box is given as offsets from the
/// projected 3D center: `[x - l, x + r] x [y - t, y + b]` in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectTarget {
    pub class_id: usize,
    pub box_lrtb: [f64; 4],
    pub center3d_proj: [f64; 2],
    /// Height, width, length in meters.
    pub size3d: [f64; 3],
    pub depth: f64,
    pub angle: f64,
    pub focal_length: f64,
}

impl ObjectTarget {
    pub fn validate(&self) -> Result<()> {
        let [l, r, t, b] = self.box_lrtb;
        let ok = l + r > 0.0
            && t + b > 0.0
            && self.depth > 0.0
            && self.size3d.iter().all(|&s| s > 0.0)
            && self.focal_length > 0.0
            && self.angle.is_finite()
            && self.center3d_proj.iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::InvalidTarget(format!("{self:?}")));
        }
        Ok(())
    }

    /// `(left, top, right, bottom)` in image pixels.
    pub fn bbox(&self) -> [f64; 4] {
        let [l, r, t, b] = self.box_lrtb;
        let [x, y] = self.center3d_proj;
        [x - l, y - t, x + r, y + b]
    }

    pub fn center2d(&self) -> (f64, f64) {
        let [x0, y0, x1, y1] = self.bbox();
        (0.5 * (x0 + x1), 0.5 * (y0 + y1))
    }

    pub fn area(&self) -> f64 {
        let [l, r, t, b] = self.box_lrtb;
        (l + r) * (t + b)
    }

    pub fn contains(&self, (x, y): (f64, f64)) -> bool {
        let [x0, y0, x1, y1] = self.bbox();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }
}

/// Decoded outputs of one query. Also used as the container for gradients
/// w.r.t. each field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    /// Object classes followed by one background logit.
    pub class_logits: Vec<f64>,
    pub box_lrtb: [f64; 4],
    pub center3d_proj: [f64; 2],
    pub d_reg: f64,
    pub log_sigma: f64,
    pub size3d: [f64; 3],
    pub angle_sincos: [f64; 2],
}

impl QueryPrediction {
    pub fn zeros(class_logits: usize) -> Self {
        Self {
            class_logits: vec![0.0; class_logits],
            box_lrtb: [0.0; 4],
            center3d_proj: [0.0; 2],
            d_reg: 0.0,
            log_sigma: 0.0,
            size3d: [0.0; 3],
            angle_sincos: [0.0; 2],
        }
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    /// Number of scalars besides the class logits.
    pub const REGRESSION_LEN: usize = 13;

    pub fn flat_len(&self) -> usize {
        self.class_logits.len() + Self::REGRESSION_LEN
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.class_logits.clone();
        v.extend(self.box_lrtb);
        v.extend(self.center3d_proj);
        v.push(self.d_reg);
        v.push(self.log_sigma);
        v.extend(self.size3d);
        v.extend(self.angle_sincos);
        v
    }

    pub fn from_flat(v: &[f64], class_logits: usize) -> Result<Self> {
        if v.len() != class_logits + Self::REGRESSION_LEN {
            return Err(Error::Dimension {
                op: "QueryPrediction::from_flat",
                left: vec![v.len()],
                right: vec![class_logits + Self::REGRESSION_LEN],
            });
        }
        let r = &v[class_logits..];
        Ok(Self {
            class_logits: v[..class_logits].to_vec(),
            box_lrtb: [r[0], r[1], r[2], r[3]],
            center3d_proj: [r[4], r[5]],
            d_reg: r[6],
            log_sigma: r[7],
            size3d: [r[8], r[9], r[10]],
            angle_sincos: [r[11], r[12]],
        })
    }
}

/// Weights of the seven query-loss terms and of the matching loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub class: f64,
    pub size2d: f64,
    pub xy3d: f64,
    pub giou: f64,
    pub size3d: f64,
    pub angle: f64,
    pub depth: f64,
    pub lambda_msm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            size2d: 5.0,
            xy3d: 10.0,
            giou: 2.0,
            size3d: 1.0,
            angle: 1.0,
            depth: 1.0,
            lambda_msm: 0.1,
        }
    }
}

impl LossWeights {
    pub fn terms(&self) -> [f64; 7] {
        [
            self.class,
            self.size2d,
            self.xy3d,
            self.giou,
            self.size3d,
            self.angle,
            self.depth,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.terms().iter().chain([&self.lambda_msm]).enumerate() {
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::Config(format!("loss weight #{i} must be finite and nonnegative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Greedy one-to-one assignment: targets in descending area order each take
/// the nearest unclaimed query. Distances are measured in normalized
/// coordinates of `frame`; target centers are in image pixels.
pub fn match_queries(
    queries: &QuerySet,
    targets: &[ObjectTarget],
    frame: &FeatureMap,
) -> Result<Vec<(usize, usize)>> {
    if targets.len() > queries.count() {
        return Err(Error::Capacity {
            targets: targets.len(),
            queries: queries.count(),
        });
    }
    let mut order: Vec<usize> = (0..targets.len()).collect();
    // stable sort keeps input order among equal areas
    order.sort_by(|&a, &b| targets[b].area().total_cmp(&targets[a].area()));
    let stride = frame.stride() as f64;
    let mut claimed = vec![false; queries.count()];
    let mut out = Vec::with_capacity(targets.len());
    for t in order {
        let (cx, cy) = targets[t].center2d();
        let (nx, ny) = frame.to_normalized((cx / stride, cy / stride));
        let mut best: Option<(usize, f64)> = None;
        for (q, &(qx, qy)) in queries.positions().iter().enumerate() {
            if claimed[q] {
                continue;
            }
            let d = (qx - nx).hypot(qy - ny);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((q, d));
            }
        }
        let (q, _) = best.expect("capacity checked above");
        claimed[q] = true;
        out.push((q, t));
    }
    out.sort_unstable();
    Ok(out)
}

/// `1 - GIoU` of two boxes sharing a center, each given as `(l, r, t, b)`
/// offsets. Returns the loss and its gradient w.r.t. the predicted offsets.
pub fn giou_loss(pred: [f64; 4], target: [f64; 4]) -> Result<(f64, [f64; 4])> {
    let [lt, rt, tt, bt] = target;
    if !(lt + rt > 0.0 && tt + bt > 0.0) {
        return Err(Error::InvalidTarget(format!("degenerate target box {target:?}")));
    }
    let [lp, rp, tp, bp] = pred;
    let at = (lt + rt) * (tt + bt);

    // enclosing box
    let ew = rp.max(rt) + lp.max(lt);
    let eh = bp.max(bt) + tp.max(tt);
    let e = ew * eh;
    let dew = [f64::from(lp > lt), f64::from(rp > rt), 0.0, 0.0];
    let deh = [0.0, 0.0, f64::from(tp > tt), f64::from(bp > bt)];

    let (wp, hp) = (lp + rp, tp + bp);
    if wp <= 0.0 || hp <= 0.0 {
        // degenerate prediction: IoU counts as zero, union is the target
        let loss = 2.0 - at / e;
        let de = at / (e * e);
        let g = std::array::from_fn(|k| de * (dew[k] * eh + deh[k] * ew));
        return Ok((loss, g));
    }
    let ap = wp * hp;
    let iw = (rp.min(rt) + lp.min(lt)).max(0.0);
    let ih = (bp.min(bt) + tp.min(tt)).max(0.0);
    let i = iw * ih;
    let u = ap + at - i;
    let loss = 2.0 - i / u - u / e;

    let dl_di = -1.0 / u - i / (u * u) + 1.0 / e;
    let dl_dap = i / (u * u) - 1.0 / e;
    let dl_de = u / (e * e);
    let diw = if iw > 0.0 {
        [f64::from(lp <= lt), f64::from(rp <= rt), 0.0, 0.0]
    } else {
        [0.0; 4]
    };
    let dih = if ih > 0.0 {
        [0.0, 0.0, f64::from(tp <= tt), f64::from(bp <= bt)]
    } else {
        [0.0; 4]
    };
    let dap = [hp, hp, wp, wp];
    let g = std::array::from_fn(|k| {
        dl_di * (diw[k] * ih + dih[k] * iw) + dl_dap * dap[k] + dl_de * (dew[k] * eh + deh[k] * ew)
    });
    Ok((loss, g))
}

/// The three depth estimates and their mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthComponents {
    pub d_reg: f64,
    pub d_geo: f64,
    pub d_map: f64,
    pub d_pre: f64,
}

/// `d_geo = f * h3d / (t + b)`; `d_map` samples channel 0 of the depth map at
/// the predicted projected center.
pub fn depth_components(
    pred: &QueryPrediction,
    target: &ObjectTarget,
    depth_map: &FeatureMap,
) -> Result<DepthComponents> {
    let height = pred.box_lrtb[2] + pred.box_lrtb[3];
    if !(height > 0.0) {
        return Err(Error::NumericalGuard(format!(
            "predicted box height {height} is not positive"
        )));
    }
    let d_geo = target.focal_length * pred.size3d[0] / height;
    let d_map = bilinear_sample(&depth_map.channel(0)?, &[center_on_map(pred, depth_map)])?.values()[0];
    Ok(DepthComponents {
        d_reg: pred.d_reg,
        d_geo,
        d_map,
        d_pre: (pred.d_reg + d_geo + d_map) / 3.0,
    })
}

fn center_on_map(pred: &QueryPrediction, map: &FeatureMap) -> (f64, f64) {
    let s = map.stride() as f64;
    (pred.center3d_proj[0] / s, pred.center3d_proj[1] / s)
}

/// `(2 / sigma) |d_gt - d_pre| + log sigma` with `sigma = exp(log_sigma)`.
/// Returns the loss and its derivatives w.r.t. `d_pre` and `log_sigma`.
pub fn laplacian_depth_loss(d_pre: f64, d_gt: f64, log_sigma: f64) -> (f64, f64, f64) {
    let sigma = log_sigma.exp();
    let delta = d_gt - d_pre;
    let loss = 2.0 / sigma * delta.abs() + log_sigma;
    let g_pre = -2.0 / sigma * delta.signum();
    let g_log_sigma = 1.0 - 2.0 / sigma * delta.abs();
    (loss, g_pre, g_log_sigma)
}

/// Unweighted values of the seven query-loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub class: f64,
    pub size2d: f64,
    pub xy3d: f64,
    pub giou: f64,
    pub size3d: f64,
    pub angle: f64,
    pub depth: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 7] {
        [
            self.class,
            self.size2d,
            self.xy3d,
            self.giou,
            self.size3d,
            self.angle,
            self.depth,
        ]
    }

    pub fn weighted(&self, w: &LossWeights) -> f64 {
        self.as_array().iter().zip(w.terms()).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone)]
pub struct QueryLoss {
    pub total: f64,
    pub terms: LossTerms,
    /// Gradient of `total` w.r.t. every query's prediction.
    pub grads: Vec<QueryPrediction>,
}

/// The weighted seven-term objective. Classification is averaged over all
/// queries (unmatched ones target the trailing background logit); the
/// regression terms are averaged over matched queries. Box and center L1
/// residuals are divided by the image extent of `depth_map`.
pub fn query_loss(
    matches: &[(usize, usize)],
    preds: &[QueryPrediction],
    targets: &[ObjectTarget],
    depth_map: &FeatureMap,
    weights: &LossWeights,
) -> Result<QueryLoss> {
    let n = preds.len();
    if n == 0 {
        return Err(Error::Config("query loss needs at least one prediction".into()));
    }
    let classes = preds[0].class_logits.len();
    if classes < 2 || preds.iter().any(|p| p.class_logits.len() != classes) {
        return Err(Error::Config("class logits need a background entry and equal lengths".into()));
    }
    let mut terms = LossTerms::default();
    let mut grads: Vec<QueryPrediction> = (0..n).map(|_| QueryPrediction::zeros(classes)).collect();

    let mut class_target = vec![classes - 1; n];
    for &(q, t) in matches {
        let target = targets
            .get(t)
            .ok_or_else(|| Error::InvalidTarget(format!("target index {t} out of range")))?;
        if q >= n {
            return Err(Error::InvalidTarget(format!("query index {q} out of range")));
        }
        if target.class_id + 1 >= classes {
            return Err(Error::InvalidTarget(format!("class {} has no logit", target.class_id)));
        }
        class_target[q] = target.class_id;
    }
    let inv_n = 1.0 / n as f64;
    for q in 0..n {
        let (l, g) = focal_loss_from_logits(&preds[q].class_logits, class_target[q], CLASS_GAMMA);
        terms.class += l * inv_n;
        for (a, b) in grads[q].class_logits.iter_mut().zip(g) {
            *a += weights.class * b * inv_n;
        }
    }

    if !matches.is_empty() {
        let inv_m = 1.0 / matches.len() as f64;
        let (img_w, img_h) = depth_map.image_size();
        let box_scale = [img_w, img_w, img_h, img_h];
        let d_map_source = depth_map.channel(0)?;
        for &(q, t) in matches {
            let (p, tg) = (&preds[q], &targets[t]);
            let g = &mut grads[q];

            for k in 0..4 {
                let d = (p.box_lrtb[k] - tg.box_lrtb[k]) / box_scale[k];
                terms.size2d += d.abs() * inv_m;
                g.box_lrtb[k] += weights.size2d * d.signum() / box_scale[k] * inv_m;
            }
            for k in 0..2 {
                let s = box_scale[2 * k];
                let d = (p.center3d_proj[k] - tg.center3d_proj[k]) / s;
                terms.xy3d += d.abs() * inv_m;
                g.center3d_proj[k] += weights.xy3d * d.signum() / s * inv_m;
            }
            let (gl, gg) = giou_loss(p.box_lrtb, tg.box_lrtb)?;
            terms.giou += gl * inv_m;
            for k in 0..4 {
                g.box_lrtb[k] += weights.giou * gg[k] * inv_m;
            }
            for k in 0..3 {
                let d = p.size3d[k] - tg.size3d[k];
                terms.size3d += d.abs() * inv_m;
                g.size3d[k] += weights.size3d * d.signum() * inv_m;
            }
            let truth = [tg.angle.sin(), tg.angle.cos()];
            for k in 0..2 {
                let d = p.angle_sincos[k] - truth[k];
                terms.angle += d.abs() * inv_m;
                g.angle_sincos[k] += weights.angle * d.signum() * inv_m;
            }

            let dc = depth_components(p, tg, depth_map)?;
            let (ld, g_pre, g_ls) = laplacian_depth_loss(dc.d_pre, tg.depth, p.log_sigma);
            terms.depth += ld * inv_m;
            let s = weights.depth * inv_m;
            g.log_sigma += s * g_ls;
            let g_pre = s * g_pre / 3.0;
            g.d_reg += g_pre;
            let height = p.box_lrtb[2] + p.box_lrtb[3];
            g.size3d[0] += g_pre * tg.focal_length / height;
            let dh = -g_pre * dc.d_geo / height;
            g.box_lrtb[2] += dh;
            g.box_lrtb[3] += dh;
            let one = crate::tensor::Tensor::full(&[1, 1], 1.0);
            let (_, coord) = bilinear_sample_backward(&d_map_source, &[center_on_map(p, depth_map)], &one)?;
            let stride = depth_map.stride() as f64;
            g.center3d_proj[0] += g_pre * coord[0].0 / stride;
            g.center3d_proj[1] += g_pre * coord[0].1 / stride;
        }
    }
    Ok(QueryLoss {
        total: terms.weighted(weights),
        terms,
        grads,
    })
}

/// `L_query + lambda * L_msm`.
pub fn total_loss(query_loss_value: f64, msm_loss_value: f64, lambda_msm: f64) -> f64 {
    query_loss_value + lambda_msm * msm_loss_value
}

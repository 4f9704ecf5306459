//! Seeded synthetic scenes standing in for the backbone and encoders.
//!
//! Each object is an axis-aligned box whose interior is stamped into the
//! visual map (objectness, distances to the four box edges, a class
//! embedding and a per-instance vector) and into the depth map (metric
//! depth in channel 0, inverse and log depth in channels 1 and 2). Objects
//! are anchored near distinct query reference points.
//!
//! A wide receptive field is imitated by three more visual channels: over
//! the cell around each object's center (one anchor spacing in every
//! direction, nearest center wins) they hold a cell flag and the box
//! width and height in feature pixels.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{derive_seed, RunConfig};
use crate::losses::ObjectTarget;
use crate::sampling::{FeatureMap, QuerySet, ShapeScalePreset, BASE_STRIDE};
use crate::tensor::Tensor;

/// Visual channels with a fixed meaning; the rest carry embeddings.
pub const GEOMETRY_CHANNELS: usize = 8;
/// Seed of the per-class embeddings, shared by every scene.
const CLASS_EMBEDDING_SEED: u64 = 0x00C1_A55E;

/// Typical (h, w, l) in meters per class.
const CLASS_SIZES: [[f64; 3]; 3] = [[1.53, 1.63, 3.88], [1.76, 0.66, 0.84], [1.74, 0.60, 1.76]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Feature-map rows. Sizes of the form `4k - 3` align the stride-64
    /// reduced map exactly with the stride-16 grid; 33 also puts every
    /// query of a 4x4 grid on a reduced pixel.
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Fraction of objects drawn uniformly instead of near a preset.
    pub off_preset_fraction: f64,
    /// Log-normal spread of ratio and width around a preset.
    pub ratio_noise: f64,
    pub width_noise: f64,
    /// Uniform jitter of an object's center around its query, feature px.
    pub anchor_jitter: f64,
    pub noise_std: f64,
    pub focal_length: f64,
    pub background_depth: f64,
    /// Queries whose reference grid anchors the objects.
    pub anchor_queries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 33,
            width: 33,
            channels: 32,
            classes: 1,
            min_objects: 1,
            max_objects: 5,
            off_preset_fraction: 0.2,
            ratio_noise: 0.06,
            width_noise: 0.06,
            anchor_jitter: 0.5,
            noise_std: 0.1,
            focal_length: 700.0,
            background_depth: 120.0,
            anchor_queries: 16,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 3 || self.width < 3 {
            return Err(Error::Config("scene maps need at least 3x3 pixels".into()));
        }
        if self.channels < GEOMETRY_CHANNELS + 1 {
            return Err(Error::Config(format!(
                "scene.channels must be at least {}",
                GEOMETRY_CHANNELS + 1
            )));
        }
        if self.classes == 0 || self.classes > CLASS_SIZES.len() {
            return Err(Error::Config(format!("scene.classes must be in 1..={}", CLASS_SIZES.len())));
        }
        if self.min_objects > self.max_objects || self.max_objects > self.anchor_queries {
            return Err(Error::Config(
                "need min_objects <= max_objects <= anchor_queries".into(),
            ));
        }
        let nonneg = [
            self.off_preset_fraction,
            self.ratio_noise,
            self.width_noise,
            self.anchor_jitter,
            self.noise_std,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.off_preset_fraction > 1.0 {
            return Err(Error::Config("scene noise parameters must be finite and nonnegative".into()));
        }
        if !(self.focal_length > 0.0 && self.background_depth > 0.0) {
            return Err(Error::Config("focal_length and background_depth must be positive".into()));
        }
        Ok(())
    }

    /// Image size in pixels, `(width, height)`.
    pub fn image_size(&self) -> (f64, f64) {
        (
            (self.width * BASE_STRIDE) as f64,
            (self.height * BASE_STRIDE) as f64,
        )
    }
}

/// One object to render. Ratio is height / width, width is in feature
/// pixels, the center is the 2D box center in feature pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class_id: usize,
    pub ratio: f64,
    pub width: f64,
    pub center: (f64, f64),
    /// Projected 3D center relative to the box center, as fractions of the
    /// box width and height.
    pub center3d_shift: (f64, f64),
    pub size3d: [f64; 3],
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub map_v: FeatureMap,
    pub map_d: FeatureMap,
    pub targets: Vec<ObjectTarget>,
    pub seed: u64,
}

fn class_embedding(class_id: usize, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(CLASS_EMBEDDING_SEED, class_id as u64, 0));
    let normal = Normal::new(0.0, 0.5).expect("valid");
    (0..len).map(|_| normal.sample(&mut rng)).collect()
}

/// Distance between neighbouring anchors, feature px, `(x, y)`.
fn anchor_spacing(sc: &SceneConfig) -> (f64, f64) {
    let cols = (sc.anchor_queries as f64).sqrt().ceil().max(1.0);
    let rows = (sc.anchor_queries as f64 / cols).ceil().max(1.0);
    ((sc.width - 1) as f64 / cols, (sc.height - 1) as f64 / rows)
}

/// Draws 1 to `max_objects` objects and renders them.
pub fn generate_scene(cfg: &RunConfig, seed: u64) -> Result<SyntheticScene> {
    let sc = &cfg.scene;
    let presets = cfg.presets()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(sc.min_objects..=sc.max_objects);
    let specs = sample_objects(sc, &presets, count, &mut rng);
    render_scene(sc, &specs, rng.random())
}

fn sample_objects(sc: &SceneConfig, presets: &ShapeScalePreset, count: usize, rng: &mut ChaCha8Rng) -> Vec<ObjectSpec> {
    let anchors = QuerySet::grid_positions(sc.anchor_queries);
    let mut cells: Vec<usize> = (0..anchors.len()).collect();
    cells.shuffle(rng);
    let (ratio_n, width_n) = (
        Normal::new(0.0, sc.ratio_noise).expect("validated"),
        Normal::new(0.0, sc.width_noise).expect("validated"),
    );
    let max_w = (sc.width - 1) as f64;
    let max_h = (sc.height - 1) as f64;
    cells
        .into_iter()
        .take(count)
        .map(|cell| {
            let (ratio, width) = if rng.random_bool(sc.off_preset_fraction) {
                let lo = presets.entries().iter().map(|e| e.ratio).fold(f64::INFINITY, f64::min);
                let hi = presets.entries().iter().map(|e| e.ratio).fold(0.0, f64::max);
                let wmax = presets.entries().iter().map(|e| e.width).fold(0.0, f64::max);
                (rng.random_range(0.8 * lo..=1.2 * hi), rng.random_range(1.0..=wmax))
            } else {
                let e = presets.get(rng.random_range(0..presets.len()));
                (
                    e.ratio * ratio_n.sample(rng).exp(),
                    e.width * width_n.sample(rng).exp(),
                )
            };
            let width = width.clamp(1.0, max_w);
            let ratio = ratio.clamp(1.0 / width, max_h / width);
            let (ax, ay) = (anchors[cell].0 * max_w, anchors[cell].1 * max_h);
            let j = sc.anchor_jitter;
            let mut center = (ax + rng.random_range(-j..=j), ay + rng.random_range(-j..=j));
            // keep the box inside the image
            let (hw, hh) = (0.5 * width, 0.5 * ratio * width);
            center.0 = center.0.clamp(hw, sc.width as f64 - hw);
            center.1 = center.1.clamp(hh, sc.height as f64 - hh);
            let class_id = rng.random_range(0..sc.classes);
            let size = CLASS_SIZES[class_id].map(|s| s * (0.05 * rng.random_range(-1.0..=1.0f64)).exp());
            ObjectSpec {
                class_id,
                ratio,
                width,
                center,
                center3d_shift: (rng.random_range(-0.15..=0.15), rng.random_range(-0.15..=0.15)),
                size3d: size,
                angle: rng.random_range(-PI..PI),
            }
        })
        .collect()
}

/// Renders explicit objects over seeded background noise. Boxes measure
/// `16 * width` by `16 * ratio * width` image pixels.
pub fn render_scene(sc: &SceneConfig, objects: &[ObjectSpec], seed: u64) -> Result<SyntheticScene> {
    sc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (sc.height, sc.width, sc.channels);
    let s = BASE_STRIDE as f64;
    // scaled standard normals, so a zero deviation gives exact zeros
    let noise = |rng: &mut ChaCha8Rng| -> f64 { sc.noise_std * Distribution::<f64>::sample(&StandardNormal, rng) };
    let mut map_v = Tensor::from_fn(&[h, w, c], |_| noise(&mut rng));
    let mut map_d = Tensor::from_fn(&[h, w, c], |_| noise(&mut rng));
    let (img_w, img_h) = sc.image_size();

    let mut targets = Vec::with_capacity(objects.len());
    let mut boxes = Vec::with_capacity(objects.len());
    for o in objects {
        if o.class_id >= sc.classes {
            return Err(Error::InvalidTarget(format!("class {} outside the scene's classes", o.class_id)));
        }
        let (bw, bh) = (o.width * s, o.ratio * o.width * s);
        let (cx, cy) = (o.center.0 * s, o.center.1 * s);
        let (x0, y0, x1, y1) = (cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh);
        if !(bw > 0.0 && bh > 0.0) || x0 < -1e-9 || y0 < -1e-9 || x1 > img_w + 1e-9 || y1 > img_h + 1e-9 {
            return Err(Error::InvalidTarget(format!("object {o:?} leaves the image")));
        }
        let (px, py) = (cx + o.center3d_shift.0 * bw, cy + o.center3d_shift.1 * bh);
        let depth = sc.focal_length * o.size3d[0] / bh;
        let target = ObjectTarget {
            class_id: o.class_id,
            box_lrtb: [px - x0, x1 - px, py - y0, y1 - py],
            center3d_proj: [px, py],
            size3d: o.size3d,
            depth,
            angle: o.angle,
            focal_length: sc.focal_length,
        };
        target.validate()?;
        targets.push(target);
        boxes.push([x0 / s, y0 / s, x1 / s, y1 / s]);
    }

    // far objects first so nearer ones occlude them
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| targets[b].depth.total_cmp(&targets[a].depth));
    let instance_noise = Normal::new(0.0, 0.3).expect("valid");
    let instances: Vec<Vec<f64>> = objects
        .iter()
        .map(|_| (0..c - GEOMETRY_CHANNELS).map(|_| instance_noise.sample(&mut rng)).collect())
        .collect();
    let depth_noise: Vec<f64> = (0..h * w).map(|_| 1.0 + 0.01 * noise(&mut rng)).collect();
    let mut depth_at = vec![sc.background_depth; h * w];
    for &k in &order {
        let [x0, y0, x1, y1] = boxes[k];
        let embed = class_embedding(objects[k].class_id, c - GEOMETRY_CHANNELS);
        for y in (y0.ceil().max(0.0) as usize)..=(y1.floor() as usize).min(h - 1) {
            for x in (x0.ceil().max(0.0) as usize)..=(x1.floor() as usize).min(w - 1) {
                let (xf, yf) = (x as f64, y as f64);
                let p = map_v.row_mut(y * w + x);
                p[0] = 1.0;
                p[1] = (xf - x0) / 8.0;
                p[2] = (x1 - xf) / 8.0;
                p[3] = (yf - y0) / 8.0;
                p[4] = (y1 - yf) / 8.0;
                for (j, v) in p[GEOMETRY_CHANNELS..].iter_mut().enumerate() {
                    *v = embed[j] + instances[k][j];
                }
                depth_at[y * w + x] = targets[k].depth;
            }
        }
    }
    let (sx, sy) = anchor_spacing(sc);
    for y in 0..h {
        for x in 0..w {
            let nearest = objects
                .iter()
                .enumerate()
                .map(|(k, o)| (k, ((x as f64 - o.center.0) / sx).abs().max(((y as f64 - o.center.1) / sy).abs())))
                .filter(|&(_, d)| d <= 1.0)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((k, _)) = nearest {
                let p = map_v.row_mut(y * w + x);
                p[5] = 1.0;
                p[6] = objects[k].width;
                p[7] = objects[k].ratio * objects[k].width;
            }
        }
    }
    for (i, d) in depth_at.iter().enumerate() {
        let p = map_d.row_mut(i);
        p[0] = d * depth_noise[i];
        p[1] = 10.0 / d;
        p[2] = d.ln() / 4.0;
    }
    Ok(SyntheticScene {
        map_v: FeatureMap::new(map_v, BASE_STRIDE)?,
        map_d: FeatureMap::new(map_d, BASE_STRIDE)?,
        targets,
        seed,
    })
}

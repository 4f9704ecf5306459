//! Feature maps, query sets, mask lattices and bilinear sampling.
//!
//! Coordinates are `(x, y)` in feature-map pixels, `x` along the width.
//! Normalized query positions map onto a grid with `x = qx * (width - 1)`,
//! so `(0, 0)` and `(1, 1)` land on the corner pixels of any map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Image-to-feature stride of the full-resolution maps.
pub const BASE_STRIDE: usize = 16;
/// Stride of maps after two stride-2 reductions.
pub const REDUCED_STRIDE: usize = 64;

/// Dense `[height, width, channels]` feature grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    data: Tensor,
    stride_to_image: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, stride_to_image: usize) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::Dimension {
                op: "feature map",
                left: data.shape().to_vec(),
                right: vec![0, 0, 0],
            });
        }
        if stride_to_image != BASE_STRIDE && stride_to_image != REDUCED_STRIDE {
            return Err(Error::Config(format!(
                "feature map stride must be 16 or 64, got {stride_to_image}"
            )));
        }
        Ok(Self {
            data,
            stride_to_image,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64, stride: usize) -> Result<Self> {
        Self::new(Tensor::full(&[height, width, channels], value), stride)
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride_to_image
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Tensor {
        &mut self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        self.data.row(y * self.width() + x)
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let w = self.width();
        self.data.row_mut(y * w + x)
    }

    /// Normalized position to this map's pixel grid.
    pub fn to_pixel(&self, (qx, qy): (f64, f64)) -> (f64, f64) {
        (
            qx * (self.width() - 1) as f64,
            qy * (self.height() - 1) as f64,
        )
    }

    /// Pixel coordinate to normalized position (inverse of [`Self::to_pixel`]).
    pub fn to_normalized(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let nx = if self.width() > 1 { x / (self.width() - 1) as f64 } else { 0.0 };
        let ny = if self.height() > 1 { y / (self.height() - 1) as f64 } else { 0.0 };
        (nx, ny)
    }

    /// Image extent in pixels covered by this map.
    pub fn image_size(&self) -> (f64, f64) {
        (
            (self.width() * self.stride_to_image) as f64,
            (self.height() * self.stride_to_image) as f64,
        )
    }

    /// Single-channel map holding channel `c` of this one.
    pub fn channel(&self, c: usize) -> Result<FeatureMap> {
        if c >= self.channels() {
            return Err(Error::Dimension {
                op: "feature map channel",
                left: self.data.shape().to_vec(),
                right: vec![c],
            });
        }
        let values = (0..self.height() * self.width())
            .map(|p| self.data.row(p)[c])
            .collect();
        FeatureMap::new(
            Tensor::new(vec![self.height(), self.width(), 1], values)?,
            self.stride_to_image,
        )
    }
}

/// `N` object queries: features plus normalized reference positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub features: Tensor,
    positions: Vec<(f64, f64)>,
}

impl QuerySet {
    pub fn new(features: Tensor, positions: Vec<(f64, f64)>) -> Result<Self> {
        if features.shape().len() != 2 || features.shape()[0] != positions.len() {
            return Err(Error::Dimension {
                op: "query set",
                left: features.shape().to_vec(),
                right: vec![positions.len()],
            });
        }
        if let Some(p) = positions
            .iter()
            .find(|(x, y)| !(0.0..=1.0).contains(x) || !(0.0..=1.0).contains(y))
        {
            return Err(Error::Config(format!(
                "query position {p:?} outside the unit square"
            )));
        }
        if !features.is_finite() {
            return Err(Error::Config("query features must be finite".into()));
        }
        Ok(Self {
            features,
            positions,
        })
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn positions(&self) -> &[(f64, f64)] {
        &self.positions
    }

    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        Self::new(features, self.positions.clone())
    }

    /// `n` positions on a centred `ceil(sqrt(n))`-column grid, row-major.
    pub fn grid_positions(n: usize) -> Vec<(f64, f64)> {
        let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
        let rows = n.div_ceil(cols).max(1);
        (0..n)
            .map(|i| {
                let (r, c) = (i / cols, i % cols);
                (
                    (c as f64 + 0.5) / cols as f64,
                    (r as f64 + 0.5) / rows as f64,
                )
            })
            .collect()
    }
}

/// One preset mask geometry: aspect ratio (height / width) and width in
/// feature pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeScale {
    pub ratio: f64,
    pub width: f64,
}

impl ShapeScale {
    pub const fn new(ratio: f64, width: f64) -> Self {
        Self { ratio, width }
    }

    /// Lattice rows minus one (`r * w`), validated to be a positive integer.
    pub fn height_steps(&self) -> Result<usize> {
        validate_entry(self.ratio, self.width)?;
        Ok((self.ratio * self.width).round() as usize)
    }

    pub fn width_steps(&self) -> Result<usize> {
        validate_entry(self.ratio, self.width)?;
        Ok(self.width.round() as usize)
    }
}

const INTEGRAL_TOL: f64 = 1e-9;

fn is_integral(v: f64) -> bool {
    (v - v.round()).abs() < INTEGRAL_TOL
}

fn validate_entry(ratio: f64, width: f64) -> Result<()> {
    let fail = |reason| Err(Error::Preset { ratio, width, reason });
    if !(ratio > 0.0 && ratio.is_finite()) {
        return fail("ratio must be positive");
    }
    if !(width >= 1.0 && width.is_finite()) {
        return fail("width must be at least one pixel");
    }
    if !is_integral(width) {
        return fail("width must be a whole number of pixels");
    }
    let rows = ratio * width;
    if !is_integral(rows) || rows.round() < 1.0 {
        return fail("ratio * width must be a positive integer");
    }
    Ok(())
}

/// Ordered list of `I` shape&scale presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ShapeScale>", into = "Vec<ShapeScale>")]
pub struct ShapeScalePreset {
    entries: Vec<ShapeScale>,
}

impl TryFrom<Vec<ShapeScale>> for ShapeScalePreset {
    type Error = Error;

    fn try_from(entries: Vec<ShapeScale>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<ShapeScalePreset> for Vec<ShapeScale> {
    fn from(p: ShapeScalePreset) -> Self {
        p.entries
    }
}

impl ShapeScalePreset {
    pub fn new(entries: Vec<ShapeScale>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("preset list must not be empty".into()));
        }
        for e in &entries {
            validate_entry(e.ratio, e.width)?;
        }
        Ok(Self { entries })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|&(r, w)| ShapeScale::new(r, w)).collect())
    }

    pub fn car() -> Self {
        Self::from_pairs(&[(1.0, 1.0), (1.0, 2.0), (1.0, 4.0), (1.0, 6.0), (0.5, 4.0), (0.5, 8.0)])
            .expect("valid presets")
    }

    pub fn pedestrian() -> Self {
        Self::from_pairs(&[(2.0, 2.0), (2.0, 4.0), (3.0, 2.0)]).expect("valid presets")
    }

    pub fn cyclist() -> Self {
        Self::from_pairs(&[(1.0, 2.0), (1.0, 4.0), (2.0, 2.0)]).expect("valid presets")
    }

    /// Car presets extended for multi-category training.
    pub fn joint() -> Self {
        let mut entries = Self::car().entries;
        entries.extend([
            ShapeScale::new(2.0, 2.0),
            ShapeScale::new(3.0, 2.0),
            ShapeScale::new(2.0, 4.0),
        ]);
        Self::new(entries).expect("valid presets")
    }

    /// Preset table by category name (`Car`, `Pedestrian`, `Cyclist`, `joint`),
    /// case-insensitive. KITTI `Van` shares the car table.
    pub fn for_category(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "car" | "van" | "vehicle" => Some(Self::car()),
            "pedestrian" => Some(Self::pedestrian()),
            "cyclist" => Some(Self::cyclist()),
            "joint" => Some(Self::joint()),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ShapeScale] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> ShapeScale {
        self.entries[i]
    }
}

/// Unit-spaced `(r*w + 1) x (w + 1)` lattice centred on `center`, row-major
/// from the top-left. Vertical half-extent is `r*w / 2`, horizontal `w / 2`.
pub fn mask_lattice(ratio: f64, width: f64, center: (f64, f64)) -> Result<Vec<(f64, f64)>> {
    let entry = ShapeScale::new(ratio, width);
    let rows = entry.height_steps()?;
    let cols = entry.width_steps()?;
    let (cx, cy) = center;
    let top = cy - rows as f64 / 2.0;
    let left = cx - cols as f64 / 2.0;
    let mut points = Vec::with_capacity((rows + 1) * (cols + 1));
    for iy in 0..=rows {
        for ix in 0..=cols {
            points.push((left + ix as f64, top + iy as f64));
        }
    }
    Ok(points)
}

/// Bilinear taps for one sample point: four pixel indices, their weights
/// and the weights' derivatives w.r.t. the sample coordinates.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps {
    pub pixels: [usize; 4],
    pub weights: [f64; 4],
    pub dx: [f64; 4],
    pub dy: [f64; 4],
}

/// Clamp-to-edge bilinear taps on a `height x width` grid.
pub(crate) fn taps(height: usize, width: usize, x: f64, y: f64) -> Taps {
    let (x0, fx, gx) = axis(width, x);
    let (y0, fy, gy) = axis(height, y);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    Taps {
        pixels: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
        weights: [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ],
        dx: [-(1.0 - fy) * gx, (1.0 - fy) * gx, -fy * gx, fy * gx],
        dy: [-(1.0 - fx) * gy, -fx * gy, (1.0 - fx) * gy, fx * gy],
    }
}

/// Lower knot, fractional part and derivative gate for one axis.
fn axis(size: usize, v: f64) -> (usize, f64, f64) {
    if size == 1 {
        return (0, 0.0, 0.0);
    }
    let hi = (size - 1) as f64;
    let inside = (0.0..=hi).contains(&v);
    let c = v.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(size - 2);
    (i0, c - i0 as f64, if inside { 1.0 } else { 0.0 })
}

/// Accumulates `scale * sample(map, x, y)` into `out`.
pub(crate) fn accumulate_sample(map: &FeatureMap, t: &Taps, scale: f64, out: &mut [f64]) {
    for k in 0..4 {
        let w = t.weights[k] * scale;
        if w == 0.0 {
            continue;
        }
        let px = map.data.row(t.pixels[k]);
        out.iter_mut().zip(px).for_each(|(o, &v)| *o += w * v);
    }
}

/// Bilinear interpolation of `map` at each coordinate, `[K, C]` output.
pub fn bilinear_sample(map: &FeatureMap, coords: &[(f64, f64)]) -> Result<Tensor> {
    if coords.is_empty() {
        return Err(Error::EmptyLattice);
    }
    if let Some(p) = coords.iter().find(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NumericalGuard(format!("non-finite sample coordinate {p:?}")));
    }
    let c = map.channels();
    let mut out = vec![0.0; coords.len() * c];
    for (i, &(x, y)) in coords.iter().enumerate() {
        let t = taps(map.height(), map.width(), x, y);
        accumulate_sample(map, &t, 1.0, &mut out[i * c..(i + 1) * c]);
    }
    Tensor::new(vec![coords.len(), c], out)
}

/// Gradients of [`bilinear_sample`] w.r.t. the map values and each coordinate.
/// The coordinate gradient is zero along an axis where the point was clamped.
pub fn bilinear_sample_backward(
    map: &FeatureMap,
    coords: &[(f64, f64)],
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<(f64, f64)>)> {
    let c = map.channels();
    grad_out.expect_shape(&[coords.len(), c], "bilinear_sample_backward")?;
    let mut gmap = Tensor::zeros(map.data.shape());
    let mut gcoords = Vec::with_capacity(coords.len());
    for (i, &(x, y)) in coords.iter().enumerate() {
        let t = taps(map.height(), map.width(), x, y);
        let g = grad_out.row(i);
        let (mut gx, mut gy) = (0.0, 0.0);
        for k in 0..4 {
            let px = map.data.row(t.pixels[k]);
            let dot: f64 = px.iter().zip(g).map(|(a, b)| a * b).sum();
            gx += t.dx[k] * dot;
            gy += t.dy[k] * dot;
            let w = t.weights[k];
            if w != 0.0 {
                gmap.row_mut(t.pixels[k])
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, &b)| *a += w * b);
            }
        }
        gcoords.push((gx, gy));
    }
    Ok((gmap, gcoords))
}

/// Per-channel mean of `K` samples stored row-major in `samples`.
pub fn local_feature_average(samples: &[f64], channels: usize) -> Result<Vec<f64>> {
    if channels == 0 || samples.is_empty() {
        return Err(Error::EmptyLattice);
    }
    if samples.len() % channels != 0 {
        return Err(Error::Dimension {
            op: "local_feature_average",
            left: vec![samples.len()],
            right: vec![channels],
        });
    }
    let k = samples.len() / channels;
    let mut mean = vec![0.0; channels];
    for row in samples.chunks_exact(channels) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    Ok(mean)
}

/// `[N, I, C]` diverse local features.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureStack {
    pub data: Tensor,
}

impl LocalFeatureStack {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::Dimension {
                op: "local feature stack",
                left: data.shape().to_vec(),
                right: vec![0, 0, 0],
            });
        }
        Ok(Self { data })
    }

    pub fn queries(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn presets(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn feature(&self, q: usize, i: usize) -> &[f64] {
        self.data.row(q * self.presets() + i)
    }
}

pub(crate) fn require_stride16(map: &FeatureMap, op: &str) -> Result<()> {
    if map.stride() != BASE_STRIDE {
        return Err(Error::Config(format!(
            "{op} expects a stride-{BASE_STRIDE} map, got stride {}",
            map.stride()
        )));
    }
    Ok(())
}

/// Lattices for every (query, preset) pair, in that order.
fn query_lattices(
    map: &FeatureMap,
    queries: &QuerySet,
    presets: &ShapeScalePreset,
) -> Result<Vec<Vec<(f64, f64)>>> {
    let mut out = Vec::with_capacity(queries.count() * presets.len());
    for &pos in queries.positions() {
        let center = map.to_pixel(pos);
        for e in presets.entries() {
            out.push(mask_lattice(e.ratio, e.width, center)?);
        }
    }
    Ok(out)
}

/// Averaged lattice samples for every query and preset.
pub fn extract_local_features(
    map: &FeatureMap,
    queries: &QuerySet,
    presets: &ShapeScalePreset,
) -> Result<LocalFeatureStack> {
    require_stride16(map, "extract_local_features")?;
    let c = map.channels();
    let lattices = query_lattices(map, queries, presets)?;
    let mut data = Vec::with_capacity(lattices.len() * c);
    let mut acc = vec![0.0; c];
    for lattice in &lattices {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let inv = 1.0 / lattice.len() as f64;
        for &(x, y) in lattice {
            let t = taps(map.height(), map.width(), x, y);
            accumulate_sample(map, &t, inv, &mut acc);
        }
        data.extend_from_slice(&acc);
    }
    LocalFeatureStack::new(Tensor::new(vec![queries.count(), presets.len(), c], data)?)
}

/// Map gradient of [`extract_local_features`]; the op is linear in the map.
pub fn extract_local_features_backward(
    map: &FeatureMap,
    queries: &QuerySet,
    presets: &ShapeScalePreset,
    grad: &Tensor,
) -> Result<Tensor> {
    let c = map.channels();
    grad.expect_shape(&[queries.count(), presets.len(), c], "extract_local_features_backward")?;
    let lattices = query_lattices(map, queries, presets)?;
    let mut gmap = Tensor::zeros(map.data.shape());
    for (row, lattice) in lattices.iter().enumerate() {
        let g = grad.row(row);
        let inv = 1.0 / lattice.len() as f64;
        for &(x, y) in lattice {
            let t = taps(map.height(), map.width(), x, y);
            for k in 0..4 {
                let w = t.weights[k] * inv;
                if w != 0.0 {
                    gmap.row_mut(t.pixels[k])
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, &b)| *a += w * b);
                }
            }
        }
    }
    Ok(gmap)
}

/// One bilinear sample per query at its position on `map`'s own grid.
pub fn sample_queries_from_map(map: &FeatureMap, queries: &QuerySet) -> Result<Tensor> {
    let coords: Vec<_> = queries.positions().iter().map(|&p| map.to_pixel(p)).collect();
    bilinear_sample(map, &coords)
}

pub fn sample_queries_from_map_backward(
    map: &FeatureMap,
    queries: &QuerySet,
    grad: &Tensor,
) -> Result<Tensor> {
    let coords: Vec<_> = queries.positions().iter().map(|&p| map.to_pixel(p)).collect();
    Ok(bilinear_sample_backward(map, &coords, grad)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn affine_map(h: usize, w: usize, c: usize) -> FeatureMap {
        let data = Tensor::from_fn(&[h, w, c], |i| {
            let p = i / c;
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            2.0 * x + 3.0 * y
        });
        FeatureMap::new(data, BASE_STRIDE).unwrap()
    }

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(Tensor::normal(&[h, w, c], 1.0, &mut rng), BASE_STRIDE).unwrap()
    }

    #[test]
    fn lattice_sizes_and_points() {
        assert_eq!(mask_lattice(0.5, 8.0, (0.0, 0.0)).unwrap().len(), 45);
        let pts = mask_lattice(1.0, 1.0, (5.0, 5.0)).unwrap();
        assert_eq!(pts, vec![(4.5, 4.5), (5.5, 4.5), (4.5, 5.5), (5.5, 5.5)]);
        let pts = mask_lattice(1.0, 2.0, (0.0, 0.0)).unwrap();
        let mut expected = vec![];
        for y in [-1.0, 0.0, 1.0] {
            for x in [-1.0, 0.0, 1.0] {
                expected.push((x, y));
            }
        }
        assert_eq!(pts, expected);
    }

    #[test]
    fn lattice_rejects_fractional_rows() {
        assert!(matches!(mask_lattice(0.3, 4.0, (0.0, 0.0)), Err(Error::Preset { .. })));
        assert!(ShapeScalePreset::from_pairs(&[(0.5, 3.0)]).is_err());
        assert!(ShapeScalePreset::from_pairs(&[]).is_err());
    }

    #[test]
    fn lattice_size_for_every_preset_table() {
        for table in [
            ShapeScalePreset::car(),
            ShapeScalePreset::pedestrian(),
            ShapeScalePreset::cyclist(),
            ShapeScalePreset::joint(),
        ] {
            for e in table.entries() {
                let n = mask_lattice(e.ratio, e.width, (3.0, 3.0)).unwrap().len();
                assert_eq!(n as f64, (e.ratio * e.width + 1.0) * (e.width + 1.0));
            }
        }
    }

    #[test]
    fn sample_at_knots_affine_and_clamped() {
        let m = random_map(4, 5, 3, 1);
        let s = bilinear_sample(&m, &[(2.0, 1.0)]).unwrap();
        assert_eq!(s.values(), m.pixel(1, 2));
        let a = affine_map(5, 5, 2);
        let s = bilinear_sample(&a, &[(1.5, 2.5)]).unwrap();
        assert!(s.values().iter().all(|v| (v - 10.5).abs() < 1e-12));
        let s = bilinear_sample(&m, &[(-5.0, -5.0)]).unwrap();
        assert_eq!(s.values(), m.pixel(0, 0));
    }

    #[test]
    fn averages() {
        assert_eq!(local_feature_average(&[1.5, 1.5, 1.5], 1).unwrap(), vec![1.5]);
        assert_eq!(local_feature_average(&[0.0, 2.0], 1).unwrap(), vec![1.0]);
        assert!(matches!(local_feature_average(&[], 3), Err(Error::EmptyLattice)));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Tensor::normal(&[9, 3], 1.0, &mut rng);
        let mean = local_feature_average(s.values(), 3).unwrap();
        for c in 0..3 {
            let mut sum = 0.0;
            for k in 0..9 {
                sum += s.values()[k * 3 + c];
            }
            assert!((mean[c] - sum / 9.0).abs() < 1e-14);
        }
    }

    #[test]
    fn local_stack_shape_and_constant_field() {
        let m = FeatureMap::constant(12, 16, 256, 0.75, 16).unwrap();
        let q = QuerySet::new(Tensor::zeros(&[50, 256]), QuerySet::grid_positions(50)).unwrap();
        let s = extract_local_features(&m, &q, &ShapeScalePreset::car()).unwrap();
        assert_eq!(s.data.shape(), &[50, 6, 256]);
        assert!(s.data.values().iter().all(|&v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn affine_field_at_center_recovers_center_value() {
        let m = affine_map(21, 21, 2);
        let q = QuerySet::new(Tensor::zeros(&[1, 2]), vec![(0.5, 0.5)]).unwrap();
        let s = extract_local_features(&m, &q, &ShapeScalePreset::car()).unwrap();
        // centre pixel (10, 10) -> 2*10 + 3*10
        assert!(s.data.values().iter().all(|&v| (v - 50.0).abs() < 1e-12));
    }

    #[test]
    fn local_features_require_stride16() {
        let m = FeatureMap::constant(4, 4, 1, 0.0, 64).unwrap();
        let q = QuerySet::new(Tensor::zeros(&[1, 1]), vec![(0.5, 0.5)]).unwrap();
        assert!(extract_local_features(&m, &q, &ShapeScalePreset::car()).is_err());
    }

    #[test]
    fn query_samples() {
        let m = FeatureMap::constant(4, 4, 3, 2.5, 64).unwrap();
        let q = QuerySet::new(Tensor::zeros(&[2, 3]), vec![(0.1, 0.9), (0.7, 0.2)]).unwrap();
        let s = sample_queries_from_map(&m, &q).unwrap();
        assert!(s.values().iter().all(|&v| v == 2.5));

        let m = random_map(4, 4, 2, 9);
        let q = QuerySet::new(Tensor::zeros(&[2, 2]), vec![(0.0, 0.0), (0.5, 0.5)]).unwrap();
        let s = sample_queries_from_map(&m, &q).unwrap();
        assert_eq!(s.row(0), m.pixel(0, 0));
        for c in 0..2 {
            let blend = 0.25
                * (m.pixel(1, 1)[c] + m.pixel(1, 2)[c] + m.pixel(2, 1)[c] + m.pixel(2, 2)[c]);
            assert!((s.row(1)[c] - blend).abs() < 1e-12);
        }
    }

    #[test]
    fn query_positions_validated() {
        assert!(QuerySet::new(Tensor::zeros(&[1, 2]), vec![(1.2, 0.0)]).is_err());
        assert!(QuerySet::new(Tensor::zeros(&[2, 2]), vec![(0.2, 0.0)]).is_err());
    }

    #[test]
    fn sampler_gradients_pass_grad_check() {
        for seed in 0..10 {
            let m = random_map(5, 6, 2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let coords: Vec<(f64, f64)> = (0..5)
                .map(|_| {
                    (
                        rng.random_range(0..5) as f64 + 0.25,
                        rng.random_range(0..4) as f64 + 0.25 + if rng.random_bool(0.5) { 0.5 } else { 0.0 },
                    )
                })
                .collect();
            let weights = Tensor::normal(&[5, 2], 1.0, &mut rng);
            let flat: Vec<f64> = coords.iter().flat_map(|&(x, y)| [x, y]).collect();
            let inputs = [m.data().clone(), Tensor::new(vec![5, 2], flat).unwrap()];
            let err = grad_check(
                |t| {
                    let map = FeatureMap::new(t[0].clone(), BASE_STRIDE)?;
                    let cs: Vec<_> = t[1].values().chunks(2).map(|p| (p[0], p[1])).collect();
                    let s = bilinear_sample(&map, &cs)?;
                    let loss = s.values().iter().zip(weights.values()).map(|(a, b)| a * b).sum();
                    let (gm, gc) = bilinear_sample_backward(&map, &cs, &weights)?;
                    let gc = Tensor::new(vec![5, 2], gc.iter().flat_map(|&(x, y)| [x, y]).collect())?;
                    Ok((loss, vec![gm, gc]))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn local_feature_backward_is_adjoint() {
        let m = random_map(8, 8, 3, 2);
        let q = QuerySet::new(Tensor::zeros(&[2, 3]), vec![(0.3, 0.6), (0.9, 0.1)]).unwrap();
        let p = ShapeScalePreset::cyclist();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Tensor::normal(&[2, 3, 3], 1.0, &mut rng);
        let err = grad_check(
            |t| {
                let map = FeatureMap::new(t[0].clone(), BASE_STRIDE)?;
                let s = extract_local_features(&map, &q, &p)?;
                let loss = s.data.values().iter().zip(g.values()).map(|(a, b)| a * b).sum();
                Ok((loss, vec![extract_local_features_backward(&map, &q, &p, &g)?]))
            },
            &[m.data().clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    proptest! {
        #[test]
        fn sampling_is_linear_in_the_map(
            seed in 0u64..1000,
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
            x in -2.0f64..8.0,
            y in -2.0f64..7.0,
        ) {
            let a = random_map(5, 6, 2, seed);
            let b = random_map(5, 6, 2, seed + 1);
            let mix = FeatureMap::new(
                a.data().zip_map(b.data(), |u, v| alpha * u + beta * v).unwrap(),
                BASE_STRIDE,
            ).unwrap();
            let sa = bilinear_sample(&a, &[(x, y)]).unwrap();
            let sb = bilinear_sample(&b, &[(x, y)]).unwrap();
            let sm = bilinear_sample(&mix, &[(x, y)]).unwrap();
            for c in 0..2 {
                let expect = alpha * sa.values()[c] + beta * sb.values()[c];
                prop_assert!((sm.values()[c] - expect).abs() < 1e-12);
            }
        }

        #[test]
        fn translated_affine_field_shifts_average_by_gradient(
            dx in -2.0f64..2.0,
            dy in -2.0f64..2.0,
            cx in 9.0f64..11.0,
            cy in 9.0f64..11.0,
            preset in 0usize..6,
        ) {
            // f(x, y) = 2x + 3y + 1; sampling well inside the map keeps the
            // field affine, so the lattice mean moves by grad . delta.
            let e = ShapeScalePreset::car().get(preset);
            let field = |dxs: f64, dys: f64| {
                FeatureMap::new(
                    Tensor::from_fn(&[30, 30, 1], |p| {
                        let (yy, xx) = ((p / 30) as f64, (p % 30) as f64);
                        2.0 * (xx - dxs) + 3.0 * (yy - dys) + 1.0
                    }),
                    BASE_STRIDE,
                ).unwrap()
            };
            let mean_at = |map: &FeatureMap, c: (f64, f64)| {
                let pts = mask_lattice(e.ratio, e.width, c).unwrap();
                let s = bilinear_sample(map, &pts).unwrap();
                local_feature_average(s.values(), 1).unwrap()[0]
            };
            let base = mean_at(&field(0.0, 0.0), (cx, cy));
            prop_assert!((base - (2.0 * cx + 3.0 * cy + 1.0)).abs() < 1e-9);
            let shifted_center = mean_at(&field(0.0, 0.0), (cx + dx, cy + dy));
            prop_assert!((shifted_center - base - (2.0 * dx + 3.0 * dy)).abs() < 1e-9);
            // moving field and lattice together leaves the mean unchanged
            let both = mean_at(&field(dx, dy), (cx + dx, cy + dy));
            prop_assert!((both - base).abs() < 1e-9);
        }

        #[test]
        fn lattice_size_identity(w in 1u32..20, rows in 1u32..20) {
            let ratio = rows as f64 / w as f64;
            let pts = mask_lattice(ratio, w as f64, (0.0, 0.0)).unwrap();
            prop_assert_eq!(pts.len() as u32, (rows + 1) * (w + 1));
        }
    }
}

//! Shape and scale statistics of labelled boxes, and their preset assignment.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::kitti::KittiLabelRecord;
use crate::msm::{label_with_ties, truth_from_box, MsmConfig};
use crate::sampling::{ShapeScale, ShapeScalePreset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Lower bin edges; the last bin is open-ended.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn uniform(start: f64, step: f64, bins: usize) -> Self {
        Self {
            edges: (0..bins).map(|i| start + step * i as f64).collect(),
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, v: f64) {
        let bin = self.edges.iter().rposition(|&e| v >= e).unwrap_or(0);
        self.counts[bin] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetCount {
    pub preset: ShapeScale,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub category: String,
    /// Non-DontCare records of the category.
    pub records: usize,
    /// Records skipped for a degenerate box.
    pub invalid_boxes: usize,
    pub ratio_histogram: Histogram,
    pub width_histogram: Histogram,
    /// Fraction of valid records with width in `[1, 14]` feature pixels.
    pub width_in_range_fraction: f64,
    pub preset_counts: Vec<PresetCount>,
    pub ties: usize,
    pub w1: f64,
    pub w2: f64,
}

/// Statistics over the records whose type equals `category`
/// (case-insensitive). DontCare lines never count.
pub fn label_stats(
    records: &[KittiLabelRecord],
    category: &str,
    presets: &ShapeScalePreset,
    cfg: &MsmConfig,
) -> Result<LabelStats> {
    let mut ratio_histogram = Histogram::uniform(0.0, 0.25, 17);
    let mut width_histogram = Histogram::uniform(0.0, 1.0, 33);
    let mut counts = vec![0; presets.len()];
    let (mut n, mut invalid, mut in_range, mut ties) = (0, 0, 0, 0);
    for r in records
        .iter()
        .filter(|r| !r.dont_care && r.kind.eq_ignore_ascii_case(category))
    {
        n += 1;
        if !r.has_valid_box() {
            invalid += 1;
            continue;
        }
        let half_w = 0.5 * r.bbox_width();
        let half_h = 0.5 * r.bbox_height();
        let truth = truth_from_box(half_w, half_w, half_h, half_h)?;
        ratio_histogram.add(truth.ratio);
        width_histogram.add(truth.width);
        if (1.0..=14.0).contains(&truth.width) {
            in_range += 1;
        }
        let (label, tied) = label_with_ties(truth, presets, cfg);
        counts[label.index] += 1;
        ties += usize::from(tied);
    }
    let valid = n - invalid;
    Ok(LabelStats {
        category: category.to_string(),
        records: n,
        invalid_boxes: invalid,
        ratio_histogram,
        width_histogram,
        width_in_range_fraction: if valid == 0 { 0.0 } else { in_range as f64 / valid as f64 },
        preset_counts: presets
            .entries()
            .iter()
            .zip(counts)
            .map(|(&preset, count)| PresetCount { preset, count })
            .collect(),
        ties,
        w1: cfg.w1,
        w2: cfg.w2,
    })
}

impl LabelStats {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}: {} records ({} invalid), width in [1, 14]: {:.4}, ties: {}\n",
            self.category, self.records, self.invalid_boxes, self.width_in_range_fraction, self.ties
        );
        for p in &self.preset_counts {
            s.push_str(&format!("  [{}, {}]: {}\n", p.preset.ratio, p.preset.width, p.count));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::kitti::parse_kitti_str;
    use std::path::Path;

    #[test]
    fn single_car_goes_to_preset_one_by_two() {
        let recs = parse_kitti_str(
            "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59",
            Path::new("c.txt"),
        )
        .unwrap();
        let s = label_stats(&recs, "car", &ShapeScalePreset::car(), &MsmConfig::default()).unwrap();
        assert_eq!(s.records, 1);
        let counts: Vec<usize> = s.preset_counts.iter().map(|p| p.count).collect();
        assert_eq!(counts, vec![0, 1, 0, 0, 0, 0]);
        assert_eq!(s.width_in_range_fraction, 1.0);
        let t = truth_from_box(27.11 / 2.0, 27.11 / 2.0, 26.79 / 2.0, 26.79 / 2.0).unwrap();
        assert!((t.width - 1.694).abs() < 1e-3 && (t.ratio - 0.988).abs() < 1e-3);
    }

    #[test]
    fn histogram_bins() {
        let mut h = Histogram::uniform(0.0, 1.0, 3);
        for v in [0.2, 1.0, 1.5, 7.0, -1.0] {
            h.add(v);
        }
        assert_eq!(h.counts, vec![2, 2, 1]);
        assert_eq!(h.total(), 5);
    }
}

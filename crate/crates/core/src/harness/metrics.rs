//! Key-point position precision.

use serde::{Deserialize, Serialize};

use crate::decoder::KeyPointRecord;
use crate::losses::ObjectTarget;

/// Counts behind the two precision figures; sums across scenes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KeypointTally {
    pub inside_points: usize,
    pub total_points: usize,
    pub inside_weight: f64,
    pub total_weight: f64,
}

impl KeypointTally {
    pub fn merge(&mut self, other: &KeypointTally) {
        self.inside_points += other.inside_points;
        self.total_points += other.total_points;
        self.inside_weight += other.inside_weight;
        self.total_weight += other.total_weight;
    }

    /// `None` when no matched query contributed a key point.
    pub fn position_precision(&self) -> Option<f64> {
        (self.total_points > 0).then(|| self.inside_points as f64 / self.total_points as f64)
    }

    pub fn weighted_position_precision(&self) -> Option<f64> {
        (self.total_points > 0 && self.total_weight > 0.0).then(|| self.inside_weight / self.total_weight)
    }
}

/// Scores the key points of matched queries against the matched target's
/// 2D box. Positions are in feature pixels and scaled by `stride`.
pub fn eval_keypoint_precision(
    records: &[KeyPointRecord],
    matches: &[(usize, usize)],
    targets: &[ObjectTarget],
    stride: f64,
) -> KeypointTally {
    let mut tally = KeypointTally::default();
    for &(q, t) in matches {
        let target = &targets[t];
        for k in records.iter().filter(|k| k.query == q) {
            let inside = target.contains((k.position.0 * stride, k.position.1 * stride));
            tally.total_points += 1;
            tally.total_weight += k.attention_weight;
            if inside {
                tally.inside_points += 1;
                tally.inside_weight += k.attention_weight;
            }
        }
    }
    tally
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target() -> ObjectTarget {
        ObjectTarget {
            class_id: 0,
            box_lrtb: [32.0, 32.0, 32.0, 32.0],
            center3d_proj: [64.0, 64.0],
            size3d: [1.5, 1.6, 3.9],
            depth: 10.0,
            angle: 0.0,
            focal_length: 700.0,
        }
    }

    fn point(x: f64, y: f64, w: f64) -> KeyPointRecord {
        KeyPointRecord {
            position: (x, y),
            attention_weight: w,
            head: 0,
            query: 0,
        }
    }

    #[test]
    fn counting_examples() {
        let t = [target()];
        let pts = [point(4.0, 4.0, 0.25), point(3.0, 5.0, 0.25), point(5.0, 3.0, 0.25), point(9.0, 9.0, 0.25)];
        let r = eval_keypoint_precision(&pts, &[(0, 0)], &t, 16.0);
        assert_eq!(r.position_precision(), Some(0.75));
        assert_eq!(r.weighted_position_precision(), Some(0.75));

        let pts = [point(4.0, 4.0, 0.4), point(3.0, 5.0, 0.3), point(5.0, 3.0, 0.2), point(9.0, 9.0, 0.1)];
        let r = eval_keypoint_precision(&pts, &[(0, 0)], &t, 16.0);
        assert!((r.weighted_position_precision().unwrap() - 0.9).abs() < 1e-12);

        let r = eval_keypoint_precision(&pts[..3], &[(0, 0)], &t, 16.0);
        assert_eq!(r.position_precision(), Some(1.0));
        assert!((r.weighted_position_precision().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unmatched_queries_are_empty() {
        let r = eval_keypoint_precision(&[point(4.0, 4.0, 1.0)], &[], &[target()], 16.0);
        assert_eq!(r.position_precision(), None);
        assert_eq!(r.weighted_position_precision(), None);
    }
}

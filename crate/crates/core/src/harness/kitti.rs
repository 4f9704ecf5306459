//! KITTI object label files: 15 whitespace-separated fields per line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FIELD_COUNT: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KittiLabelRecord {
    #[serde(rename = "type")]
    pub kind: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    /// left, top, right, bottom in image pixels.
    pub bbox: [f64; 4],
    /// h, w, l in meters.
    pub dimensions: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub dont_care: bool,
}

impl KittiLabelRecord {
    pub fn bbox_width(&self) -> f64 {
        self.bbox[2] - self.bbox[0]
    }

    pub fn bbox_height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn has_valid_box(&self) -> bool {
        self.bbox_width() > 0.0 && self.bbox_height() > 0.0
    }
}

fn parse_line(line: &str, path: &Path, number: usize) -> Result<KittiLabelRecord> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: number,
        message,
    };
    if fields.len() != FIELD_COUNT {
        return Err(err(format!("expected {FIELD_COUNT} fields, found {}", fields.len())));
    }
    let num = |i: usize| -> Result<f64> {
        fields[i]
            .parse::<f64>()
            .map_err(|e| err(format!("field {} ({:?}): {e}", i + 1, fields[i])))
    };
    let occluded = fields[2]
        .parse::<i32>()
        .map_err(|e| err(format!("field 3 ({:?}): {e}", fields[2])))?;
    Ok(KittiLabelRecord {
        kind: fields[0].to_string(),
        truncated: num(1)?,
        occluded,
        alpha: num(3)?,
        bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
        dimensions: [num(8)?, num(9)?, num(10)?],
        location: [num(11)?, num(12)?, num(13)?],
        rotation_y: num(14)?,
        dont_care: fields[0] == "DontCare",
    })
}

/// Parses label text; `path` only labels error messages. Blank lines are
/// skipped but still counted for line numbers.
pub fn parse_kitti_str(text: &str, path: &Path) -> Result<Vec<KittiLabelRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, path, i + 1))
        .collect()
}

pub fn parse_kitti_labels(path: &Path) -> Result<Vec<KittiLabelRecord>> {
    let text = std::fs::read_to_string(path)?;
    parse_kitti_str(&text, path)
}

/// Label files under `path`: the file itself, or every `*.txt` in the
/// directory in name order.
pub fn label_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && p.extension().is_some_and(|e| e == "txt"));
    files.sort();
    Ok(files)
}

pub fn load_labels(path: &Path) -> Result<Vec<KittiLabelRecord>> {
    let mut out = Vec::new();
    for f in label_files(path)? {
        out.extend(parse_kitti_labels(&f)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAR: &str = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59";

    #[test]
    fn parses_car_line() {
        let r = parse_kitti_str(CAR, Path::new("x.txt")).unwrap();
        assert_eq!(r.len(), 1);
        let r = &r[0];
        assert_eq!(r.kind, "Car");
        assert!(!r.dont_care);
        assert_eq!(r.bbox, [587.01, 173.33, 614.12, 200.12]);
        assert!((r.bbox_width() - 27.11).abs() < 1e-9);
        assert_eq!(r.dimensions, [1.65, 1.67, 3.64]);
        assert_eq!(r.location, [-0.65, 1.71, 46.70]);
        assert_eq!(r.rotation_y, -1.59);
    }

    #[test]
    fn empty_and_short_lines() {
        assert!(parse_kitti_str("", Path::new("e.txt")).unwrap().is_empty());
        let text = format!("{CAR}\n\nCar 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70\n");
        match parse_kitti_str(&text, Path::new("s.txt")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let bad = CAR.replace("587.01", "abc");
        assert!(matches!(parse_kitti_str(&bad, Path::new("b.txt")), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn dont_care_is_flagged() {
        let r = parse_kitti_str(
            "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10",
            Path::new("d.txt"),
        )
        .unwrap();
        assert!(r[0].dont_care);
    }
}

//! Detections as JSON lines, one object per detection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::BBox;
use crate::error::{Error, Result};
use crate::postprocess::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub detector: usize,
}

impl DetectionRecord {
    pub fn from_detection(image: &str, det: &Detection) -> Self {
        DetectionRecord {
            image: image.to_string(),
            x1: det.bbox.x1,
            y1: det.bbox.y1,
            x2: det.bbox.x2,
            y2: det.bbox.y2,
            score: det.score,
            detector: det.detector,
        }
    }

    pub fn to_detection(&self) -> Detection {
        Detection {
            bbox: BBox::new(self.x1, self.y1, self.x2, self.y2),
            score: self.score,
            detector: self.detector,
        }
    }
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("detection record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", k + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

/// Groups records by image in the order given by `images`; records naming an
/// unlisted image are an error.
pub fn group_by_image(records: &[DetectionRecord], images: &[String]) -> Result<Vec<Vec<Detection>>> {
    use std::collections::HashMap;
    let index: HashMap<&str, usize> = images
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut grouped: Vec<Vec<Detection>> = vec![Vec::new(); images.len()];
    for r in records {
        let &i = index.get(r.image.as_str()).ok_or_else(|| {
            Error::Config(format!("detection names unknown image {}", r.image))
        })?;
        grouped[i].push(r.to_detection());
    }
    Ok(grouped)
}

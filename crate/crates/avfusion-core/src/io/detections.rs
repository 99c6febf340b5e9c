//! Detections file: JSON Lines, one record per sample.
//!
//! Each record is `{sample_id, detections: [{cx, cy, w, h, class,
//! confidence, class_scores}]}`. `class_scores` carries the full softmax
//! distribution so downstream ranking can use confidence times class
//! probability; readers accept records without it.

use serde::{Deserialize, Serialize};

use crate::boxes::{BoundingBox, Detection, VehicleClass, NUM_CLASSES};
use crate::error::{AvError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEntry {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class: VehicleClass,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_scores: Option<[f64; NUM_CLASSES]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub sample_id: String,
    pub detections: Vec<DetectionEntry>,
}

impl DetectionEntry {
    pub fn from_detection(d: &Detection) -> DetectionEntry {
        DetectionEntry {
            cx: d.bbox.cx,
            cy: d.bbox.cy,
            w: d.bbox.w,
            h: d.bbox.h,
            class: d.bbox.class,
            confidence: d.confidence,
            class_scores: Some(d.class_scores),
        }
    }

    /// Records without class scores behave as if the labeled class had
    /// probability 1.
    pub fn to_detection(&self) -> Detection {
        let class_scores = self.class_scores.unwrap_or_else(|| {
            let mut s = [0.0; NUM_CLASSES];
            s[self.class.index()] = 1.0;
            s
        });
        Detection {
            bbox: BoundingBox { cx: self.cx, cy: self.cy, w: self.w, h: self.h, class: self.class },
            confidence: self.confidence,
            class_scores,
        }
    }

    fn validate(&self, sample_id: &str) -> Result<()> {
        let fin = [self.cx, self.cy, self.w, self.h, self.confidence];
        if fin.iter().any(|v| !v.is_finite()) {
            return Err(AvError::Validation(format!(
                "detections for {sample_id:?}: non-finite fields"
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(AvError::Validation(format!(
                "detections for {sample_id:?}: confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        if let Some(scores) = &self.class_scores {
            if scores.iter().any(|s| !s.is_finite() || !(0.0..=1.0).contains(s)) {
                return Err(AvError::Validation(format!(
                    "detections for {sample_id:?}: class scores outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

pub fn write_jsonl(records: &[DetectionRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| AvError::Format(format!("detections record: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_jsonl(bytes: &[u8]) -> Result<Vec<DetectionRecord>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| AvError::Format("detections: not valid UTF-8".into()))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DetectionRecord = serde_json::from_str(line)
            .map_err(|e| AvError::Format(format!("detections line {}: {e}", lineno + 1)))?;
        for d in &record.detections {
            d.validate(&record.sample_id)?;
        }
        out.push(record);
    }
    Ok(out)
}

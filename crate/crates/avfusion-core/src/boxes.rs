//! Box geometry and the three vehicle states.

use crate::error::{AvError, Result};
use serde::{Deserialize, Serialize};

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleClass {
    Moving,
    Idling,
    EngineOff,
}

impl VehicleClass {
    pub const ALL: [VehicleClass; NUM_CLASSES] =
        [VehicleClass::Moving, VehicleClass::Idling, VehicleClass::EngineOff];

    pub fn index(self) -> usize {
        match self {
            VehicleClass::Moving => 0,
            VehicleClass::Idling => 1,
            VehicleClass::EngineOff => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<VehicleClass> {
        VehicleClass::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            VehicleClass::Moving => "moving",
            VehicleClass::Idling => "idling",
            VehicleClass::EngineOff => "engine_off",
        }
    }

    /// Whether the engine is running, i.e. the vehicle emits sound.
    pub fn emits_sound(self) -> bool {
        !matches!(self, VehicleClass::EngineOff)
    }
}

impl std::fmt::Display for VehicleClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for VehicleClass {
    type Err = AvError;

    fn from_str(s: &str) -> Result<VehicleClass> {
        match s {
            "moving" => Ok(VehicleClass::Moving),
            "idling" => Ok(VehicleClass::Idling),
            "engine_off" => Ok(VehicleClass::EngineOff),
            other => Err(AvError::Validation(format!("unknown class {other:?}"))),
        }
    }
}

/// Axis-aligned box in normalized image coordinates: center, width, height
/// all in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class: VehicleClass,
}

impl BoundingBox {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(AvError::Validation(format!(
                "box out of range: cx={} cy={} w={} h={}",
                self.cx, self.cy, self.w, self.h
            )))
        }
    }

    /// Corners clipped to the unit square, as used for IoU.
    pub fn corners_clipped(&self) -> (f64, f64, f64, f64) {
        let x1 = (self.cx - self.w / 2.0).max(0.0);
        let y1 = (self.cy - self.h / 2.0).max(0.0);
        let x2 = (self.cx + self.w / 2.0).min(1.0);
        let y2 = (self.cy + self.h / 2.0).min(1.0);
        (x1, y1, x2, y2)
    }
}

/// Intersection over union of two boxes, with extents clipped to the unit
/// square. Disjoint boxes score 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners_clipped();
    let (bx1, by1, bx2, by2) = b.corners_clipped();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area_a = (ax2 - ax1).max(0.0) * (ay2 - ay1).max(0.0);
    let area_b = (bx2 - bx1).max(0.0) * (by2 - by1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU of two origin-centered shapes (w, h), the distance kernel used for
/// anchor clustering.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    let union = a.0 * a.1 + b.0 * b.1 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One decoded prediction: a box, an objectness confidence in [0, 1], and a
/// softmax class distribution. `class` on the box is the argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub class_scores: [f64; NUM_CLASSES],
}

impl Detection {
    /// Score used to rank detections for average precision:
    /// confidence times the best class probability.
    pub fn ranking_score(&self) -> f64 {
        let best = self.class_scores.iter().cloned().fold(f64::MIN, f64::max);
        self.confidence * best
    }
}

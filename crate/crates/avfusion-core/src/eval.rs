//! Detection metrics: greedy matching, per-class average precision at
//! IoU 0.5, mAP, and trajectory export.
//!
//! Protocol: detections are pooled across the whole set and ranked by
//! confidence times best class probability (ties: lower sample id, then
//! lower index). In rank order each detection greedily claims the unmatched
//! same-class ground-truth box of highest IoU >= threshold in its own
//! sample; each ground truth is matchable once. AP is the area under the
//! monotone (all-point interpolated) precision-recall envelope.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoundingBox, Detection, VehicleClass};
use crate::error::{AvError, Result};
use crate::io::ReproStanza;

pub const DEFAULT_AP_IOU: f64 = 0.5;

/// Detections and ground truth for one sample.
#[derive(Debug, Clone)]
pub struct Scene {
    pub sample_id: String,
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    /// Absent when the class has no ground-truth boxes.
    pub ap: Option<f64>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub ground_truth_count: usize,
    pub pr_curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub iou_threshold: f64,
    pub per_class: Vec<ClassReport>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repro: Option<ReproStanza>,
}

/// Rank-ordered match outcomes for one class, the common core of AP and the
/// counting stats.
fn match_class(scenes: &[Scene], class: VehicleClass, iou_thresh: f64) -> (Vec<(f64, bool)>, usize) {
    // (scene idx, det idx, score)
    let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        for (di, d) in scene.detections.iter().enumerate() {
            if d.bbox.class == class {
                ranked.push((si, di, d.ranking_score()));
            }
        }
    }
    ranked.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("finite scores")
            .then_with(|| scenes[a.0].sample_id.cmp(&scenes[b.0].sample_id))
            .then(a.1.cmp(&b.1))
    });

    let n_gt: usize = scenes
        .iter()
        .map(|s| s.ground_truth.iter().filter(|g| g.class == class).count())
        .sum();

    let mut matched: Vec<Vec<bool>> =
        scenes.iter().map(|s| vec![false; s.ground_truth.len()]).collect();
    let mut outcomes = Vec::with_capacity(ranked.len());
    for (si, di, score) in ranked {
        let det = &scenes[si].detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in scenes[si].ground_truth.iter().enumerate() {
            if g.class != class || matched[si][gi] {
                continue;
            }
            let overlap = iou(&det.bbox, g);
            if overlap >= iou_thresh && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        let is_tp = if let Some((gi, _)) = best {
            matched[si][gi] = true;
            true
        } else {
            false
        };
        outcomes.push((score, is_tp));
    }
    (outcomes, n_gt)
}

/// Average precision for one class over a pooled set of scenes. `None` when
/// the class has no ground truth.
pub fn average_precision(scenes: &[Scene], class: VehicleClass, iou_thresh: f64) -> Option<f64> {
    let (outcomes, n_gt) = match_class(scenes, class, iou_thresh);
    if n_gt == 0 {
        return None;
    }
    Some(ap_from_outcomes(&outcomes, n_gt))
}

fn ap_from_outcomes(outcomes: &[(f64, bool)], n_gt: usize) -> f64 {
    let mut precisions = Vec::with_capacity(outcomes.len());
    let mut recalls = Vec::with_capacity(outcomes.len());
    let mut tp = 0usize;
    for (i, &(_, is_tp)) in outcomes.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (i + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // monotone envelope: max precision at any recall >= r
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..recalls.len() {
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * envelope[i];
            prev_recall = recalls[i];
        }
    }
    ap
}

/// Per-class AP at the given IoU threshold plus mAP across the classes that
/// have ground truth. Classes without ground truth are skipped with a
/// warning.
pub fn evaluate(scenes: &[Scene], iou_thresh: f64) -> EvalReport {
    let mut per_class = Vec::with_capacity(VehicleClass::ALL.len());
    let mut warnings = Vec::new();
    let mut ap_sum = 0.0;
    let mut ap_count = 0usize;
    for class in VehicleClass::ALL {
        let (outcomes, n_gt) = match_class(scenes, class, iou_thresh);
        let tp = outcomes.iter().filter(|(_, t)| *t).count();
        let fp = outcomes.len() - tp;
        let ap = if n_gt == 0 {
            warnings.push(format!(
                "class {} has no ground-truth boxes; excluded from mAP",
                class.name()
            ));
            None
        } else {
            let v = ap_from_outcomes(&outcomes, n_gt);
            ap_sum += v;
            ap_count += 1;
            Some(v)
        };
        let mut tp_run = 0usize;
        let pr_curve = outcomes
            .iter()
            .enumerate()
            .map(|(i, &(score, is_tp))| {
                if is_tp {
                    tp_run += 1;
                }
                PrPoint {
                    recall: if n_gt == 0 { 0.0 } else { tp_run as f64 / n_gt as f64 },
                    precision: tp_run as f64 / (i + 1) as f64,
                    score,
                }
            })
            .collect();
        per_class.push(ClassReport {
            class: class.name().to_string(),
            ap,
            true_positives: tp,
            false_positives: fp,
            false_negatives: n_gt - tp,
            ground_truth_count: n_gt,
            pr_curve,
        });
    }
    EvalReport {
        map: if ap_count == 0 { 0.0 } else { ap_sum / ap_count as f64 },
        iou_threshold: iou_thresh,
        per_class,
        warnings,
        repro: None,
    }
}

/// Detection centers over time as CSV, one row per kept detection:
/// `t_seconds,x_center,y_center,class,confidence`.
pub fn export_trajectory(per_frame: &[(usize, Vec<Detection>)], fps: f64) -> Result<String> {
    if fps <= 0.0 || !fps.is_finite() {
        return Err(AvError::Validation(format!("fps must be positive, got {fps}")));
    }
    let mut out = String::from("t_seconds,x_center,y_center,class,confidence\n");
    for (frame, dets) in per_frame {
        let t = *frame as f64 / fps;
        for d in dets {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                t,
                d.bbox.cx,
                d.bbox.cy,
                d.bbox.class.name(),
                d.confidence
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::NUM_CLASSES;

    fn gt(cx: f64, cy: f64, w: f64, h: f64, class: VehicleClass) -> BoundingBox {
        BoundingBox { cx, cy, w, h, class }
    }

    fn det(b: BoundingBox, conf: f64) -> Detection {
        let mut scores = [0.0; NUM_CLASSES];
        scores[b.class.index()] = 1.0;
        Detection { bbox: b, confidence: conf, class_scores: scores }
    }

    #[test]
    fn perfect_single_detection_has_ap_one() {
        let b = gt(0.5, 0.5, 0.2, 0.2, VehicleClass::Idling);
        let scenes = vec![Scene {
            sample_id: "s0".into(),
            detections: vec![det(b, 0.9)],
            ground_truth: vec![b],
        }];
        let ap = average_precision(&scenes, VehicleClass::Idling, 0.5).unwrap();
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranked_fp_then_tp_gives_half() {
        let b = gt(0.5, 0.5, 0.2, 0.2, VehicleClass::Moving);
        let fp_box = gt(0.1, 0.1, 0.05, 0.05, VehicleClass::Moving);
        let scenes = vec![Scene {
            sample_id: "s0".into(),
            detections: vec![det(fp_box, 0.9), det(b, 0.8)],
            ground_truth: vec![b],
        }];
        let ap = average_precision(&scenes, VehicleClass::Moving, 0.5).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn all_tps_ranked_first_always_give_ap_one() {
        let mut rng = crate::rng::DetRng::new(90);
        for _ in 0..50 {
            // two GT matched by high-scoring dets, plus lower-scoring FPs
            let b1 = gt(0.3, 0.3, 0.2, 0.2, VehicleClass::Moving);
            let b2 = gt(0.7, 0.7, 0.2, 0.2, VehicleClass::Moving);
            let hi1 = rng.range_f64(0.8, 1.0);
            let hi2 = rng.range_f64(0.8, 1.0);
            let mut dets = vec![det(b1, hi1), det(b2, hi2)];
            for _ in 0..5 {
                dets.push(det(
                    gt(rng.range_f64(0.0, 0.15), 0.9, 0.05, 0.05, VehicleClass::Moving),
                    rng.range_f64(0.1, 0.7),
                ));
            }
            // shuffle input order; ranking is score-based
            rng.shuffle(&mut dets);
            let scenes = vec![Scene {
                sample_id: "s".into(),
                detections: dets,
                ground_truth: vec![b1, b2],
            }];
            let ap = average_precision(&scenes, VehicleClass::Moving, 0.5).unwrap();
            assert!((ap - 1.0).abs() < 1e-12, "ap = {ap}");
        }
    }

    #[test]
    fn class_without_gt_is_excluded_with_warning() {
        let b = gt(0.5, 0.5, 0.2, 0.2, VehicleClass::Moving);
        let scenes = vec![Scene {
            sample_id: "s0".into(),
            detections: vec![det(b, 0.9)],
            ground_truth: vec![b],
        }];
        let report = evaluate(&scenes, 0.5);
        assert_eq!(report.per_class[VehicleClass::Idling.index()].ap, None);
        assert!(report.warnings.iter().any(|w| w.contains("idling")));
        assert!((report.map - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_detections_give_zero_ap_for_classes_with_gt() {
        let scenes = vec![Scene {
            sample_id: "s0".into(),
            detections: vec![],
            ground_truth: vec![gt(0.5, 0.5, 0.2, 0.2, VehicleClass::EngineOff)],
        }];
        let report = evaluate(&scenes, 0.5);
        assert_eq!(report.per_class[VehicleClass::EngineOff.index()].ap, Some(0.0));
    }

    #[test]
    fn removing_an_fp_never_lowers_ap() {
        let mut rng = crate::rng::DetRng::new(91);
        for _ in 0..50 {
            let b = gt(0.5, 0.5, 0.3, 0.3, VehicleClass::Idling);
            let mut dets = vec![det(b, rng.range_f64(0.3, 0.9))];
            for _ in 0..4 {
                dets.push(det(
                    gt(rng.range_f64(0.0, 0.1), 0.9, 0.05, 0.05, VehicleClass::Idling),
                    rng.range_f64(0.1, 1.0),
                ));
            }
            let scenes = |d: Vec<Detection>| {
                vec![Scene { sample_id: "s".into(), detections: d, ground_truth: vec![b] }]
            };
            let full = average_precision(&scenes(dets.clone()), VehicleClass::Idling, 0.5).unwrap();
            // drop one FP (index 1 is always an FP)
            let mut fewer = dets.clone();
            fewer.remove(1);
            let dropped = average_precision(&scenes(fewer), VehicleClass::Idling, 0.5).unwrap();
            assert!(dropped >= full - 1e-12);
            // dropping the TP never raises it
            let mut no_tp = dets.clone();
            no_tp.remove(0);
            let lower = average_precision(&scenes(no_tp), VehicleClass::Idling, 0.5).unwrap();
            assert!(lower <= full + 1e-12);
        }
    }

    #[test]
    fn scene_order_does_not_change_ap() {
        let b1 = gt(0.3, 0.3, 0.2, 0.2, VehicleClass::Moving);
        let b2 = gt(0.6, 0.6, 0.2, 0.2, VehicleClass::Moving);
        let s1 = Scene { sample_id: "a".into(), detections: vec![det(b1, 0.7)], ground_truth: vec![b1] };
        let s2 = Scene { sample_id: "b".into(), detections: vec![det(b2, 0.7)], ground_truth: vec![b2] };
        let ap1 = average_precision(&[s1.clone(), s2.clone()], VehicleClass::Moving, 0.5).unwrap();
        let ap2 = average_precision(&[s2, s1], VehicleClass::Moving, 0.5).unwrap();
        assert_eq!(ap1, ap2);
    }

    #[test]
    fn trajectory_rows_and_times() {
        let b = gt(0.42, 0.67, 0.2, 0.2, VehicleClass::Idling);
        let frames: Vec<(usize, Vec<Detection>)> =
            (0..10).map(|f| (f, vec![det(b, 0.8)])).collect();
        let csv = export_trajectory(&frames, 25.0).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 11); // header + 10 rows
        assert_eq!(lines[0], "t_seconds,x_center,y_center,class,confidence");
        assert!(lines[1].starts_with("0,0.42,0.67,idling,"));
        assert!(lines[10].starts_with("0.36,"));
        // empty sequence: header only
        let empty = export_trajectory(&[], 25.0).unwrap();
        assert_eq!(empty.lines().count(), 1);
    }
}

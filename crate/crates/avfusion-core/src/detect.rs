//! Detection head: anchor clustering, box decoding, non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, shape_iou, BoundingBox, Detection, VehicleClass, NUM_CLASSES};
use crate::error::{AvError, Result};
use crate::ops;
use crate::rng::DetRng;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_ANCHOR_COUNT: usize = 5;
pub const DEFAULT_CONF_THRESH: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.5;
/// Raw fields per anchor: tx, ty, tw, th, confidence, then class logits.
pub const BOX_FIELDS: usize = 5;

/// Prior box shapes in normalized image units, sorted by area ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    priors: Vec<(f64, f64)>,
}

impl AnchorSet {
    pub fn new(mut priors: Vec<(f64, f64)>) -> Result<AnchorSet> {
        if priors.is_empty() {
            return Err(AvError::Validation("anchor set must not be empty".into()));
        }
        if priors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite())) {
            return Err(AvError::Validation("anchor dimensions must be positive".into()));
        }
        priors.sort_by(|a, b| (a.0 * a.1).partial_cmp(&(b.0 * b.1)).expect("finite areas"));
        Ok(AnchorSet { priors })
    }

    pub fn priors(&self) -> &[(f64, f64)] {
        &self.priors
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }
}

/// Lloyd k-means over (w, h) shapes with distance 1 - IoU and seeded
/// k-means++ initialization. Centroid updates are coordinate means.
/// Stops on a stable assignment or after 100 iterations.
pub fn kmeans_anchors(boxes: &[(f64, f64)], k: usize, seed: u64) -> Result<AnchorSet> {
    Ok(kmeans_anchors_traced(boxes, k, seed)?.0)
}

/// Same as [`kmeans_anchors`] but also returns the clustering objective
/// (sum of distances to assigned centroids) measured after each assignment.
pub fn kmeans_anchors_traced(
    boxes: &[(f64, f64)],
    k: usize,
    seed: u64,
) -> Result<(AnchorSet, Vec<f64>)> {
    if k == 0 {
        return Err(AvError::Validation("k must be positive".into()));
    }
    let mut distinct: Vec<(f64, f64)> = Vec::new();
    for &b in boxes {
        if !(b.0 > 0.0 && b.1 > 0.0) {
            return Err(AvError::Validation(format!("non-positive box shape {b:?}")));
        }
        if !distinct.contains(&b) {
            distinct.push(b);
        }
    }
    if distinct.len() < k {
        return Err(AvError::Validation(format!(
            "need at least {k} distinct box shapes, got {}",
            distinct.len()
        )));
    }

    let dist = |b: (f64, f64), c: (f64, f64)| 1.0 - shape_iou(b, c);
    let mut rng = DetRng::with_streams(seed, &[0x6b6d]);

    // k-means++ style seeding over the full box list
    let mut centroids: Vec<(f64, f64)> = vec![boxes[rng.below(boxes.len())]];
    while centroids.len() < k {
        let weights: Vec<f64> = boxes
            .iter()
            .map(|&b| {
                let d = centroids.iter().map(|&c| dist(b, c)).fold(f64::MAX, f64::min);
                d * d
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            boxes[rng.weighted(&weights)]
        } else {
            // all boxes coincide with existing centroids; fall back to any
            // distinct shape not yet chosen
            *distinct
                .iter()
                .find(|b| !centroids.contains(b))
                .expect("distinct count checked above")
        };
        centroids.push(next);
    }

    let mut assignment = vec![usize::MAX; boxes.len()];
    let mut objective_trace: Vec<f64> = Vec::new();
    let mut prev_centroids = centroids.clone();
    for _ in 0..100 {
        // assignment step; ties break to the lower centroid index
        let mut changed = false;
        let mut objective = 0.0;
        for (i, &b) in boxes.iter().enumerate() {
            let mut best = 0;
            let mut best_d = dist(b, centroids[0]);
            for (j, &c) in centroids.iter().enumerate().skip(1) {
                let d = dist(b, c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            objective += best_d;
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        // the coordinate-mean update is not guaranteed to lower the IoU
        // objective; if it rose, keep the previous centroids and stop
        if objective_trace.last().is_some_and(|&last| objective > last) {
            centroids = prev_centroids;
            break;
        }
        objective_trace.push(objective);
        if !changed {
            break;
        }
        // update step: coordinate mean; empty clusters keep their centroid
        prev_centroids = centroids.clone();
        for (j, c) in centroids.iter_mut().enumerate() {
            let mut sw = 0.0;
            let mut sh = 0.0;
            let mut n = 0usize;
            for (i, &b) in boxes.iter().enumerate() {
                if assignment[i] == j {
                    sw += b.0;
                    sh += b.1;
                    n += 1;
                }
            }
            if n > 0 {
                *c = (sw / n as f64, sh / n as f64);
            }
        }
    }
    Ok((AnchorSet::new(centroids)?, objective_trace))
}

/// Decode a raw head output `[H,W,K,5+classes]` into detections.
///
/// Per cell (i, j) and anchor (pw, ph): center = (j + sigmoid(tx)) / W,
/// (i + sigmoid(ty)) / H; size = anchor * exp(tw, th), clamped to the unit
/// square; confidence = sigmoid(t_conf); class scores = softmax(logits).
pub fn decode_boxes<T: Scalar>(raw: &Tensor<T>, anchors: &AnchorSet) -> Result<Vec<Detection>> {
    let (h, w, k, fields) = match raw.shape() {
        [h, w, k, f] => (*h, *w, *k, *f),
        other => return Err(AvError::Shape(format!("decode expects rank 4, got {other:?}"))),
    };
    if k != anchors.len() || fields != BOX_FIELDS + NUM_CLASSES {
        return Err(AvError::Shape(format!(
            "raw head output {:?} does not match {} anchors x {} fields",
            raw.shape(),
            anchors.len(),
            BOX_FIELDS + NUM_CLASSES
        )));
    }
    let mut out = Vec::with_capacity(h * w * k);
    let rd = raw.data();
    for i in 0..h {
        for j in 0..w {
            for (a, &(pw, ph)) in anchors.priors().iter().enumerate() {
                let base = ((i * w + j) * k + a) * fields;
                let tx = rd[base].to_f64();
                let ty = rd[base + 1].to_f64();
                let tw = rd[base + 2].to_f64();
                let th = rd[base + 3].to_f64();
                let tconf = rd[base + 4].to_f64();
                let logits: Vec<f64> =
                    (0..NUM_CLASSES).map(|c| rd[base + BOX_FIELDS + c].to_f64()).collect();

                let cx = (j as f64 + sigmoid(tx)) / w as f64;
                let cy = (i as f64 + sigmoid(ty)) / h as f64;
                let bw = (pw * tw.exp()).min(1.0);
                let bh = (ph * th.exp()).min(1.0);
                let scores = softmax3(&logits);
                let best = scores
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.partial_cmp(y.1).expect("finite scores"))
                    .expect("three classes")
                    .0;
                out.push(Detection {
                    bbox: BoundingBox {
                        cx,
                        cy,
                        w: bw,
                        h: bh,
                        class: VehicleClass::from_index(best).expect("index < 3"),
                    },
                    confidence: sigmoid(tconf),
                    class_scores: scores,
                });
            }
        }
    }
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax3(logits: &[f64]) -> [f64; NUM_CLASSES] {
    let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
    let mut out = [0.0; NUM_CLASSES];
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - mx).exp();
        sum += *o;
    }
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Greedy per-class non-maximum suppression.
///
/// Detections below `conf_thresh` are dropped. Within each class, the
/// highest-confidence detection is kept and anything overlapping it with
/// IoU > `iou_thresh` is suppressed; ties break toward the earlier input
/// index. The result is sorted by confidence descending (same tie-break).
pub fn nms(dets: &[Detection], iou_thresh: f64, conf_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<(usize, &Detection)> = Vec::new();
    for class in VehicleClass::ALL {
        let mut candidates: Vec<(usize, &Detection)> = dets
            .iter()
            .enumerate()
            .filter(|(_, d)| d.bbox.class == class && d.confidence >= conf_thresh)
            .collect();
        candidates.sort_by(|a, b| {
            b.1.confidence
                .partial_cmp(&a.1.confidence)
                .expect("finite confidence")
                .then(a.0.cmp(&b.0))
        });
        let mut class_kept: Vec<(usize, &Detection)> = Vec::new();
        'outer: for (idx, det) in candidates {
            for (_, k) in &class_kept {
                if iou(&det.bbox, &k.bbox) > iou_thresh {
                    continue 'outer;
                }
            }
            class_kept.push((idx, det));
        }
        kept.extend(class_kept);
    }
    kept.sort_by(|a, b| {
        b.1.confidence
            .partial_cmp(&a.1.confidence)
            .expect("finite confidence")
            .then(a.0.cmp(&b.0))
    });
    kept.into_iter().map(|(_, d)| d.clone()).collect()
}

/// The region-proposal head: one 1x1 convolution over the fused map.
///
/// `fused[2D,H,W]` -> raw `[H,W,K,5+classes]`, unactivated.
pub fn rpn_forward<T: Scalar>(
    fused: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    k_anchors: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = match fused.shape() {
        [c, h, w] => (*c, *h, *w),
        other => return Err(AvError::Shape(format!("rpn expects rank 3, got {other:?}"))),
    };
    let fields = BOX_FIELDS + NUM_CLASSES;
    let out_ch = k_anchors * fields;
    if weight.shape() != [out_ch, c] {
        return Err(AvError::Shape(format!(
            "rpn weight {:?} does not match [{out_ch}, {c}]",
            weight.shape()
        )));
    }
    let n = h * w;
    let fused_mat = fused.clone().reshape(&[c, n])?;
    let mut out = ops::matmul(weight, &fused_mat)?; // [out_ch, n]
    ops::add_channel_bias(&mut out, bias)?;
    // reorder to [H, W, K, fields]
    let mut raw = Tensor::zeros(&[h, w, k_anchors, fields]);
    let od = out.data();
    let rd = raw.data_mut();
    for cell in 0..n {
        for a in 0..k_anchors {
            for f in 0..fields {
                rd[(cell * k_anchors + a) * fields + f] = od[(a * fields + f) * n + cell];
            }
        }
    }
    Ok(raw)
}

/// Gradients of [`rpn_forward`]: returns (d_fused, d_weight, d_bias).
pub fn rpn_backward<T: Scalar>(
    fused: &Tensor<T>,
    weight: &Tensor<T>,
    d_raw: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, h, w) = match fused.shape() {
        [c, h, w] => (*c, *h, *w),
        other => return Err(AvError::Shape(format!("rpn expects rank 3, got {other:?}"))),
    };
    let (out_ch, _) = (weight.shape()[0], weight.shape()[1]);
    let n = h * w;
    let fields = BOX_FIELDS + NUM_CLASSES;
    let k_anchors = out_ch / fields;
    // permute upstream back to [out_ch, n]
    let mut d_out = Tensor::zeros(&[out_ch, n]);
    let dd = d_raw.data();
    let dod = d_out.data_mut();
    for cell in 0..n {
        for a in 0..k_anchors {
            for f in 0..fields {
                dod[(a * fields + f) * n + cell] = dd[(cell * k_anchors + a) * fields + f];
            }
        }
    }
    let d_bias = ops::channel_bias_grad(&d_out);
    let fused_mat = fused.clone().reshape(&[c, n])?;
    let d_weight = ops::matmul_nt(&d_out, &fused_mat)?;
    let d_fused = ops::matmul_tn(weight, &d_out)?.reshape(&[c, h, w])?;
    Ok((d_fused, d_weight, d_bias))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_sorted_by_area() {
        let a = AnchorSet::new(vec![(0.5, 0.5), (0.1, 0.1), (0.3, 0.2)]).unwrap();
        assert_eq!(a.priors(), &[(0.1, 0.1), (0.3, 0.2), (0.5, 0.5)]);
        assert!(AnchorSet::new(vec![(0.0, 0.1)]).is_err());
    }

    #[test]
    fn kmeans_single_cluster_of_identical_boxes() {
        let boxes = vec![(0.2, 0.3); 10];
        let a = kmeans_anchors(&boxes, 1, 7).unwrap();
        assert_eq!(a.len(), 1);
        let (w, h) = a.priors()[0];
        assert!((w - 0.2).abs() < 1e-12 && (h - 0.3).abs() < 1e-12);
    }

    #[test]
    fn kmeans_recovers_two_tight_clusters() {
        let mut rng = DetRng::new(60);
        let mut boxes = Vec::new();
        let mut means = [(0.0, 0.0); 2];
        for (ci, center) in [(0.1, 0.1), (0.4, 0.5)].iter().enumerate() {
            let mut sw = 0.0;
            let mut sh = 0.0;
            for _ in 0..40 {
                let b = (
                    center.0 + rng.range_f64(-0.005, 0.005),
                    center.1 + rng.range_f64(-0.005, 0.005),
                );
                sw += b.0;
                sh += b.1;
                boxes.push(b);
            }
            means[ci] = (sw / 40.0, sh / 40.0);
        }
        let a = kmeans_anchors(&boxes, 2, 3).unwrap();
        // anchors are area-sorted, cluster means already are
        for (got, want) in a.priors().iter().zip(&means) {
            assert!((got.0 - want.0).abs() < 1e-3, "{got:?} vs {want:?}");
            assert!((got.1 - want.1).abs() < 1e-3, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn kmeans_objective_non_increasing_on_clustered_sets() {
        let mut rng = DetRng::new(61);
        for trial in 0..20 {
            let mut boxes = Vec::new();
            for center in [(0.08, 0.1), (0.25, 0.2), (0.45, 0.5)] {
                for _ in 0..30 {
                    boxes.push((
                        center.0 + rng.range_f64(-0.02, 0.02),
                        center.1 + rng.range_f64(-0.02, 0.02),
                    ));
                }
            }
            let (_, trace) = kmeans_anchors_traced(&boxes, 3, trial).unwrap();
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "objective rose: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = DetRng::new(62);
        let boxes: Vec<(f64, f64)> =
            (0..50).map(|_| (rng.range_f64(0.05, 0.5), rng.range_f64(0.05, 0.5))).collect();
        let a = kmeans_anchors(&boxes, 4, 9).unwrap();
        let b = kmeans_anchors(&boxes, 4, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kmeans_needs_k_distinct_boxes() {
        let boxes = vec![(0.2, 0.2), (0.2, 0.2), (0.3, 0.3)];
        assert!(kmeans_anchors(&boxes, 3, 1).is_err());
        assert!(kmeans_anchors(&boxes, 2, 1).is_ok());
    }

    #[test]
    fn decode_zero_offsets_center_the_anchor() {
        let anchors = AnchorSet::new(vec![(2.0 / 7.0, 1.0 / 7.0)]).unwrap();
        let raw = Tensor::<f64>::zeros(&[7, 7, 1, 8]);
        let dets = decode_boxes(&raw, &anchors).unwrap();
        let d = &dets[(2 * 7 + 3) * 1]; // cell (row 2, col 3)
        assert!((d.bbox.cx - 3.5 / 7.0).abs() < 1e-12);
        assert!((d.bbox.cy - 2.5 / 7.0).abs() < 1e-12);
        assert!((d.bbox.w - 2.0 / 7.0).abs() < 1e-12);
        assert!((d.bbox.h - 1.0 / 7.0).abs() < 1e-12);
        assert!((d.confidence - 0.5).abs() < 1e-12);
    }

    #[test]
    fn decode_exp_identity_doubles_width() {
        let anchors = AnchorSet::new(vec![(0.2, 0.2)]).unwrap();
        let mut raw = Tensor::<f64>::zeros(&[1, 1, 1, 8]);
        raw.data_mut()[2] = 2.0f64.ln(); // tw
        let dets = decode_boxes(&raw, &anchors).unwrap();
        assert!((dets[0].bbox.w - 0.4).abs() < 1e-12);
    }

    #[test]
    fn decoded_boxes_always_satisfy_invariants() {
        let anchors = AnchorSet::new(vec![(0.2, 0.3), (0.6, 0.4)]).unwrap();
        let mut rng = DetRng::new(63);
        for _ in 0..200 {
            let raw = Tensor::from_vec(
                &[3, 3, 2, 8],
                (0..3 * 3 * 2 * 8).map(|_| rng.range_f64(-6.0, 6.0)).collect(),
            )
            .unwrap();
            for d in decode_boxes(&raw, &anchors).unwrap() {
                d.bbox.validate().unwrap();
                assert!((0.0..=1.0).contains(&d.confidence));
                let s: f64 = d.class_scores.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    fn det(cx: f64, cy: f64, w: f64, h: f64, class: VehicleClass, conf: f64) -> Detection {
        let mut scores = [0.05; NUM_CLASSES];
        scores[class.index()] = 0.9;
        Detection { bbox: BoundingBox { cx, cy, w, h, class }, confidence: conf, class_scores: scores }
    }

    #[test]
    fn nms_keeps_disjoint_and_suppresses_overlap() {
        let a = det(0.3, 0.3, 0.2, 0.2, VehicleClass::Moving, 0.9);
        // IoU with a is 0.6: shared width 0.2*0.2 shifted... construct > 0.5
        let b = det(0.32, 0.3, 0.2, 0.2, VehicleClass::Moving, 0.8);
        let c = det(0.8, 0.8, 0.1, 0.1, VehicleClass::Moving, 0.7);
        assert!(iou(&a.bbox, &b.bbox) > 0.5);
        let kept = nms(&[a.clone(), b, c.clone()], 0.5, 0.25);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0], a);
        assert_eq!(kept[1], c);
    }

    #[test]
    fn nms_empty_input() {
        assert!(nms(&[], 0.5, 0.25).is_empty());
    }

    #[test]
    fn nms_never_suppresses_across_classes() {
        let a = det(0.5, 0.5, 0.2, 0.2, VehicleClass::Moving, 0.9);
        let b = det(0.5, 0.5, 0.2, 0.2, VehicleClass::Idling, 0.8);
        let kept = nms(&[a, b], 0.5, 0.25);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_drops_below_confidence_threshold() {
        let a = det(0.5, 0.5, 0.2, 0.2, VehicleClass::Moving, 0.2);
        assert!(nms(&[a], 0.5, 0.25).is_empty());
    }

    #[test]
    fn rpn_canonical_layout_is_7x7x5x8() {
        // 7x7 fused map with 128 channels, five anchors, 3 classes:
        // 40 raw channels reorganized per cell and anchor
        let fused = Tensor::<f64>::filled(&[128, 7, 7], 0.1);
        let weight = Tensor::<f64>::filled(&[5 * 8, 128], 0.01);
        let bias = Tensor::<f64>::zeros(&[5 * 8]);
        let raw = rpn_forward(&fused, &weight, &bias, 5).unwrap();
        assert_eq!(raw.shape(), &[7, 7, 5, 8]);
    }

    #[test]
    fn rpn_zero_weights_give_zero_output() {
        let fused = Tensor::<f64>::filled(&[4, 3, 3], 1.5);
        let weight = Tensor::<f64>::zeros(&[2 * 8, 4]);
        let bias = Tensor::<f64>::zeros(&[2 * 8]);
        let raw = rpn_forward(&fused, &weight, &bias, 2).unwrap();
        assert_eq!(raw.shape(), &[3, 3, 2, 8]);
        assert!(raw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rpn_layout_matches_manual_computation() {
        // 1x1 grid keeps the permutation easy to follow
        let fused = Tensor::<f64>::from_vec(&[2, 1, 1], vec![2.0, -1.0]).unwrap();
        let mut weight = Tensor::<f64>::zeros(&[8, 2]);
        weight.data_mut()[0] = 1.0; // out channel 0 reads fused channel 0
        weight.data_mut()[2 * 7 + 1] = 3.0; // out channel 7 reads fused channel 1
        let mut bias = Tensor::<f64>::zeros(&[8]);
        bias.data_mut()[4] = 0.5;
        let raw = rpn_forward(&fused, &weight, &bias, 1).unwrap();
        assert_eq!(raw.at(&[0, 0, 0, 0]), 2.0);
        assert_eq!(raw.at(&[0, 0, 0, 7]), -3.0);
        assert_eq!(raw.at(&[0, 0, 0, 4]), 0.5);
    }
}

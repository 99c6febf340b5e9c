//! Target assignment and the composite detection loss.
//!
//! Six terms, summed with unit weights: focal classification loss at
//! positive slots, smooth-L1 on the four box offsets at positive slots, and
//! MSE on the sigmoid confidence. The confidence term is balanced per slot
//! population, the mean over positive slots plus the mean over negative
//! slots; averaged jointly, the handful of positives in a grid of hundreds
//! of anchors drowns in the background gradient and the confidence output
//! collapses to zero.

use crate::boxes::{shape_iou, BoundingBox, NUM_CLASSES};
use crate::detect::{AnchorSet, BOX_FIELDS};
use crate::error::{AvError, Result};
use crate::tensor::{Scalar, Tensor};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    Positive,
    Ignore,
    Negative,
}

/// Per (cell, anchor) training targets for one sample.
#[derive(Debug, Clone)]
pub struct TargetGrid {
    pub grid: (usize, usize),
    pub k: usize,
    pub state: Vec<SlotState>,
    /// Encoded box targets, valid at positive slots: (ox, oy, sw, sh).
    pub box_targets: Vec<(f64, f64, f64, f64)>,
    pub class_idx: Vec<usize>,
    pub n_pos: usize,
}

impl TargetGrid {
    pub fn slot(&self, i: usize, j: usize, a: usize) -> usize {
        (i * self.grid.1 + j) * self.k + a
    }

    pub fn n_slots(&self) -> usize {
        self.grid.0 * self.grid.1 * self.k
    }
}

/// Assign each ground-truth box to the cell containing its center and the
/// free anchor with the best shape IoU. Non-best anchors in the same cell
/// with shape IoU above 0.5 against any of that cell's boxes become
/// `Ignore`; everything else is negative.
pub fn assign_targets(
    gt: &[BoundingBox],
    anchors: &AnchorSet,
    grid: (usize, usize),
) -> Result<TargetGrid> {
    let (gh, gw) = grid;
    let k = anchors.len();
    let n_slots = gh * gw * k;
    let mut tg = TargetGrid {
        grid,
        k,
        state: vec![SlotState::Negative; n_slots],
        box_targets: vec![(0.0, 0.0, 0.0, 0.0); n_slots],
        class_idx: vec![0; n_slots],
        n_pos: 0,
    };
    for b in gt {
        b.validate()?;
        if b.w * b.h <= 0.0 {
            return Err(AvError::Validation("ground-truth box with zero area".into()));
        }
        // cell containing the center; boxes centered exactly on 1.0 clamp in
        let j = ((b.cx * gw as f64).floor() as usize).min(gw - 1);
        let i = ((b.cy * gh as f64).floor() as usize).min(gh - 1);
        // anchor ranking by shape IoU, best first
        let mut ranked: Vec<(usize, f64)> = anchors
            .priors()
            .iter()
            .enumerate()
            .map(|(a, &p)| (a, shape_iou((b.w, b.h), p)))
            .collect();
        ranked.sort_by(|x, y| y.1.partial_cmp(&x.1).expect("finite iou").then(x.0.cmp(&y.0)));
        // best free anchor in this cell; a second box falling on the same
        // best anchor takes the next free one
        let chosen = ranked
            .iter()
            .find(|(a, _)| tg.state[tg.slot(i, j, *a)] != SlotState::Positive)
            .map(|(a, _)| *a);
        let Some(best_a) = chosen else {
            return Err(AvError::Validation(format!(
                "more ground-truth boxes than anchors in cell ({i}, {j})"
            )));
        };
        let slot = tg.slot(i, j, best_a);
        tg.state[slot] = SlotState::Positive;
        let (pw, ph) = anchors.priors()[best_a];
        tg.box_targets[slot] = (
            b.cx * gw as f64 - j as f64,
            b.cy * gh as f64 - i as f64,
            (b.w / pw).ln(),
            (b.h / ph).ln(),
        );
        tg.class_idx[slot] = b.class.index();
        tg.n_pos += 1;
        // shadow anchors that also match this box well
        for &(a, iou_a) in &ranked {
            let s = tg.slot(i, j, a);
            if a != best_a && iou_a > 0.5 && tg.state[s] == SlotState::Negative {
                tg.state[s] = SlotState::Ignore;
            }
        }
    }
    Ok(tg)
}

/// The six loss components. `total` is their unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub focal: f64,
    pub lx: f64,
    pub ly: f64,
    pub lw: f64,
    pub lh: f64,
    pub lconf: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.focal + self.lx + self.ly + self.lw + self.lh + self.lconf
    }
}

pub fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Focal term of a single slot: -alpha * (1 - p_t)^gamma * ln(p_t), with
/// p_t the softmax probability of the target class.
pub fn focal_term(logits: &[f64], target_class: usize, alpha: f64, gamma: f64) -> f64 {
    let p_t = softmax_prob(logits, target_class);
    -alpha * (1.0 - p_t).powf(gamma) * p_t.ln()
}

fn softmax_prob(logits: &[f64], target: usize) -> f64 {
    let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - mx).exp()).sum();
    (logits[target] - mx).exp() / sum
}

/// Focal classification loss over positive slots, mean-normalized by the
/// positive count. Zero when there are no positives.
pub fn focal_loss<T: Scalar>(raw: &Tensor<T>, targets: &TargetGrid, alpha: f64, gamma: f64) -> Result<f64> {
    Ok(detection_loss_impl(raw, targets, alpha, gamma, None)?.focal)
}

/// The five regression terms: smooth-L1 on box offsets over positives and
/// confidence MSE over non-ignored slots.
pub fn box_conf_losses<T: Scalar>(raw: &Tensor<T>, targets: &TargetGrid) -> Result<(f64, f64, f64, f64, f64)> {
    let t = detection_loss_impl(raw, targets, FOCAL_ALPHA, FOCAL_GAMMA, None)?;
    Ok((t.lx, t.ly, t.lw, t.lh, t.lconf))
}

/// Unweighted sum of all six terms.
pub fn total_loss<T: Scalar>(raw: &Tensor<T>, targets: &TargetGrid, alpha: f64, gamma: f64) -> Result<f64> {
    Ok(detection_loss_impl(raw, targets, alpha, gamma, None)?.total())
}

/// Loss terms plus the analytic gradient w.r.t. the raw head output.
pub fn detection_loss_grad<T: Scalar>(
    raw: &Tensor<T>,
    targets: &TargetGrid,
    alpha: f64,
    gamma: f64,
) -> Result<(LossTerms, Tensor<T>)> {
    let mut grad = Tensor::zeros(raw.shape());
    let terms = detection_loss_impl(raw, targets, alpha, gamma, Some(&mut grad))?;
    Ok((terms, grad))
}

fn detection_loss_impl<T: Scalar>(
    raw: &Tensor<T>,
    targets: &TargetGrid,
    alpha: f64,
    gamma: f64,
    mut grad: Option<&mut Tensor<T>>,
) -> Result<LossTerms> {
    let fields = BOX_FIELDS + NUM_CLASSES;
    let (gh, gw) = targets.grid;
    if raw.shape() != [gh, gw, targets.k, fields] {
        return Err(AvError::Shape(format!(
            "raw output {:?} does not match target grid {}x{}x{}x{}",
            raw.shape(),
            gh,
            gw,
            targets.k,
            fields
        )));
    }
    let rd = raw.data();
    let n_neg = targets
        .state
        .iter()
        .filter(|s| matches!(s, SlotState::Negative))
        .count()
        .max(1);
    let n_pos = targets.n_pos.max(1);

    let mut terms = LossTerms::default();
    for slot in 0..targets.n_slots() {
        let base = slot * fields;
        let state = targets.state[slot];
        if state == SlotState::Ignore {
            continue;
        }
        // confidence MSE, averaged within each slot population
        let t_conf = rd[base + 4].to_f64();
        let (conf_target, conf_norm) = if state == SlotState::Positive {
            (1.0, n_pos as f64)
        } else {
            (0.0, n_neg as f64)
        };
        let s_conf = 1.0 / (1.0 + (-t_conf).exp());
        let cd = s_conf - conf_target;
        terms.lconf += cd * cd / conf_norm;
        if let Some(g) = grad.as_deref_mut() {
            let d = 2.0 * cd * s_conf * (1.0 - s_conf) / conf_norm;
            g.data_mut()[base + 4] += T::from_f64(d);
        }

        if state != SlotState::Positive {
            continue;
        }
        let (ox, oy, sw, sh) = targets.box_targets[slot];
        let tx = rd[base].to_f64();
        let ty = rd[base + 1].to_f64();
        let tw = rd[base + 2].to_f64();
        let th = rd[base + 3].to_f64();
        let sx = 1.0 / (1.0 + (-tx).exp());
        let sy = 1.0 / (1.0 + (-ty).exp());
        terms.lx += smooth_l1(sx - ox) / n_pos as f64;
        terms.ly += smooth_l1(sy - oy) / n_pos as f64;
        terms.lw += smooth_l1(tw - sw) / n_pos as f64;
        terms.lh += smooth_l1(th - sh) / n_pos as f64;

        let logits: Vec<f64> = (0..NUM_CLASSES).map(|c| rd[base + BOX_FIELDS + c].to_f64()).collect();
        let target_class = targets.class_idx[slot];
        terms.focal += focal_term(&logits, target_class, alpha, gamma) / n_pos as f64;

        if let Some(g) = grad.as_deref_mut() {
            let gd = g.data_mut();
            gd[base] += T::from_f64(smooth_l1_grad(sx - ox) * sx * (1.0 - sx) / n_pos as f64);
            gd[base + 1] += T::from_f64(smooth_l1_grad(sy - oy) * sy * (1.0 - sy) / n_pos as f64);
            gd[base + 2] += T::from_f64(smooth_l1_grad(tw - sw) / n_pos as f64);
            gd[base + 3] += T::from_f64(smooth_l1_grad(th - sh) / n_pos as f64);

            // focal: dL/dp_t * dp_t/dlogit_j with dp_t/dlogit_j = p_t*(delta - p_j)
            let p_t = softmax_prob(&logits, target_class);
            let one_m = 1.0 - p_t;
            let dl_dpt = alpha * (gamma * one_m.powf(gamma - 1.0) * p_t.ln() - one_m.powf(gamma) / p_t);
            for (j, _) in logits.iter().enumerate() {
                let p_j = softmax_prob(&logits, j);
                let delta = if j == target_class { 1.0 } else { 0.0 };
                let d = dl_dpt * p_t * (delta - p_j) / n_pos as f64;
                gd[base + BOX_FIELDS + j] += T::from_f64(d);
            }
        }
    }
    if !terms.total().is_finite() {
        return Err(AvError::NonFinite("detection loss".into()));
    }
    Ok(terms)
}

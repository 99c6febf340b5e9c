//! Mini-batch training with adaptive-moment gradient descent.
//!
//! Epoch shuffles are seeded per epoch; per-sample gradients are computed in
//! parallel but reduced in batch order, so the final parameters are
//! bit-identical for any worker count.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{AvError, Result};
use crate::loss::{self, LossTerms};
use crate::model::Model;
use crate::rng::DetRng;
use crate::tensor::Tensor;
use crate::workers;

const SHUFFLE_STREAM: u64 = 0x5f5f;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Emit a checkpoint every N epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-4,
            epochs: 20,
            seed: 0,
            focal_alpha: loss::FOCAL_ALPHA,
            focal_gamma: loss::FOCAL_GAMMA,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.batch_size >= 1
            && self.learning_rate >= 0.0
            && self.epochs >= 1
            && self.focal_alpha > 0.0
            && self.focal_gamma >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(AvError::Validation("train config has non-positive values".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTraceRow {
    pub epoch: usize,
    pub step: u64,
    pub terms: LossTerms,
}

/// Adam state, one moment pair per parameter tensor.
pub struct Adam {
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(model: &Model<f32>, cfg: &TrainConfig) -> Adam {
        Adam {
            m: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, model: &mut Model<f32>, grads: &[Tensor<f32>], lr: f64) {
        self.t += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = (1.0 - self.beta1.powi(self.t as i32)) as f32;
        let bc2 = (1.0 - self.beta2.powi(self.t as i32)) as f32;
        let lr = lr as f32;
        let eps = self.eps as f32;
        for ((param, grad), (m, v)) in
            model.params_mut().into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((p, &g), (mm, vv)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mm = b1 * *mm + (1.0 - b1) * g;
                *vv = b2 * *vv + (1.0 - b2) * g * g;
                let m_hat = *mm / bc1;
                let v_hat = *vv / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Loss terms and parameter gradients for one sample.
pub fn sample_loss_grads(
    model: &Model<f32>,
    sample: &crate::data::PreparedSample,
    cfg: &TrainConfig,
) -> Result<(LossTerms, Vec<Tensor<f32>>)> {
    let grid = model.cfg.encoder.grid;
    let targets = loss::assign_targets(&sample.boxes, &model.cfg.anchors, grid)?;
    let fwd = model.forward(&sample.video, &sample.mel)?;
    let (terms, d_raw) =
        loss::detection_loss_grad(&fwd.raw, &targets, cfg.focal_alpha, cfg.focal_gamma)?;
    let grads = model.backward(&fwd, &d_raw)?;
    Ok((terms, grads))
}

/// Train in place. `on_epoch` runs after each epoch with the mean loss and
/// may persist checkpoints. Returns the per-step loss trace.
pub fn train(
    model: &mut Model<f32>,
    dataset: &dyn Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &Model<f32>, f64) -> Result<()>,
) -> Result<Vec<LossTraceRow>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(AvError::Validation("training dataset is empty".into()));
    }
    let mut adam = Adam::new(model, cfg);
    let mut trace = Vec::new();
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        DetRng::with_streams(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results = workers::try_parallel_map(batch.len(), |bi| {
                let sample = dataset.sample(batch[bi])?;
                sample_loss_grads(model, &sample, cfg).map_err(|e| match e {
                    AvError::NonFinite(what) => AvError::Diverged(format!(
                        "non-finite loss at epoch {epoch}, step {step}, sample {:?} ({what})",
                        dataset.id(batch[bi])
                    )),
                    other => other,
                })
            })?;
            // fixed-order reduction over the batch
            let mut mean_terms = LossTerms::default();
            let mut grads: Option<Vec<Tensor<f32>>> = None;
            let scale = 1.0 / batch.len() as f64;
            for (terms, g) in results {
                mean_terms.focal += terms.focal * scale;
                mean_terms.lx += terms.lx * scale;
                mean_terms.ly += terms.ly * scale;
                mean_terms.lw += terms.lw * scale;
                mean_terms.lh += terms.lh * scale;
                mean_terms.lconf += terms.lconf * scale;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            a.add_scaled(b, 1.0)?;
                        }
                    }
                }
            }
            let mut grads = grads.expect("non-empty batch");
            for g in &mut grads {
                g.scale(scale as f32);
            }
            if !mean_terms.total().is_finite() {
                return Err(AvError::Diverged(format!(
                    "non-finite mean loss at epoch {epoch}, step {step}"
                )));
            }
            adam.step(model, &grads, cfg.learning_rate);
            step += 1;
            epoch_loss += mean_terms.total();
            epoch_batches += 1;
            trace.push(LossTraceRow { epoch, step, terms: mean_terms });
        }
        on_epoch(epoch, model, epoch_loss / epoch_batches.max(1) as f64)?;
    }
    Ok(trace)
}

/// Mean loss per epoch from a step trace.
pub fn epoch_means(trace: &[LossTraceRow]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for row in trace {
        match out.last_mut() {
            Some((e, sum, n)) if *e == row.epoch => {
                *sum += row.terms.total();
                *n += 1;
            }
            _ => out.push((row.epoch, row.terms.total(), 1)),
        }
    }
    out.into_iter().map(|(e, sum, n)| (e, sum / n as f64)).collect()
}

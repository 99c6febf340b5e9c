//! Central-difference verification of analytic gradients.
//!
//! For an op with output y and a fixed probe u, the scalar L(x) = <y(x), u>
//! has dL/dx equal to the adjoint applied to u. Each input coordinate is
//! nudged by ±h and the numeric slope is compared against the analytic one
//! with relative error |a - n| / max(1e-8, |a| + |n|).

use crate::error::Result;
use crate::ops::DiffOp;
use crate::rng::DetRng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error between an analytic and a numeric derivative.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Maximum relative error of `op`'s backward over every input coordinate.
pub fn grad_check(op: &dyn DiffOp<f64>, inputs: &[&Tensor<f64>], h: f64) -> Result<f64> {
    let y = op.forward(inputs)?;
    let mut rng = DetRng::new(0x6_7ad);
    let probe = Tensor::from_vec(
        y.shape(),
        (0..y.numel()).map(|_| rng.range_f64(-1.0, 1.0)).collect(),
    )?;
    let analytic = op.backward(inputs, &probe)?;

    let mut owned: Vec<Tensor<f64>> = inputs.iter().map(|t| (*t).clone()).collect();
    let mut max_err = 0.0f64;
    for ti in 0..owned.len() {
        for ci in 0..owned[ti].numel() {
            let orig = owned[ti].data()[ci];
            owned[ti].data_mut()[ci] = orig + h;
            let lp = eval_probe(op, &owned, &probe)?;
            owned[ti].data_mut()[ci] = orig - h;
            let lm = eval_probe(op, &owned, &probe)?;
            owned[ti].data_mut()[ci] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic[ti].data()[ci], numeric));
        }
    }
    Ok(max_err)
}

fn eval_probe(op: &dyn DiffOp<f64>, inputs: &[Tensor<f64>], probe: &Tensor<f64>) -> Result<f64> {
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    op.forward(&refs)?.dot(probe)
}

/// Central-difference check for an arbitrary scalar function of a flat
/// parameter vector. Returns the max relative error against `analytic`.
pub fn grad_check_fn<F>(mut f: F, x: &mut [f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    assert_eq!(x.len(), analytic.len());
    let mut max_err = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let lp = f(x)?;
        x[i] = orig - h;
        let lm = f(x)?;
        x[i] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        max_err = max_err.max(rel_err(analytic[i], numeric));
    }
    Ok(max_err)
}

/// Numeric adjoint probe: checks <J v, u> == <v, J^T u> for one op on random
/// v and u, with J v estimated by central differences.
pub fn adjoint_gap(op: &dyn DiffOp<f64>, inputs: &[&Tensor<f64>], seed: u64) -> Result<f64> {
    let y = op.forward(inputs)?;
    let mut rng = DetRng::new(seed);
    let u = Tensor::from_vec(
        y.shape(),
        (0..y.numel()).map(|_| rng.range_f64(-1.0, 1.0)).collect(),
    )?;
    let vt: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| {
            Tensor::from_vec(
                t.shape(),
                (0..t.numel()).map(|_| rng.range_f64(-1.0, 1.0)).collect(),
            )
            .expect("shape known good")
        })
        .collect();

    // J v by central differences along direction v, all inputs at once
    let h = 1e-6;
    let plus: Vec<Tensor<f64>> = inputs
        .iter()
        .zip(&vt)
        .map(|(t, v)| {
            let mut p = (*t).clone();
            p.add_scaled(v, h).expect("same shape");
            p
        })
        .collect();
    let minus: Vec<Tensor<f64>> = inputs
        .iter()
        .zip(&vt)
        .map(|(t, v)| {
            let mut m = (*t).clone();
            m.add_scaled(v, -h).expect("same shape");
            m
        })
        .collect();
    let yp = op.forward(&plus.iter().collect::<Vec<_>>())?;
    let ym = op.forward(&minus.iter().collect::<Vec<_>>())?;
    let mut jv = yp;
    jv.add_scaled(&ym, -1.0)?;
    jv.scale(1.0 / (2.0 * h));

    let lhs = jv.dot(&u)?;
    let grads = op.backward(inputs, &u)?;
    let mut rhs = 0.0;
    for (g, v) in grads.iter().zip(&vt) {
        rhs += g.dot(v)?;
    }
    Ok((lhs - rhs).abs())
}

/// One row of the standard gradient-check table.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

fn random_tensor(shape: &[usize], rng: &mut DetRng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect())
        .expect("shape known good")
}

/// Check every differentiable op on fixed random instances, plus the full
/// encoder -> attention -> head -> loss pipeline on the tiny configuration.
/// All checks run in 64-bit precision at the default step.
pub fn standard_table() -> Result<Vec<GradCheckEntry>> {
    use crate::ops::{Conv2dOp, Conv3dOp, ConvTranspose2dOp, MatMul, Pointwise, PointwiseFn, SoftmaxRows};

    let mut rng = DetRng::new(0x9a16);
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| out.push(GradCheckEntry { name: name.into(), max_rel_err: err });

    let a = random_tensor(&[3, 3], &mut rng);
    let b = random_tensor(&[3, 3], &mut rng);
    push("matmul", grad_check(&MatMul, &[&a, &b], DEFAULT_STEP)?);

    let s = random_tensor(&[4, 4], &mut rng);
    push("softmax_rows", grad_check(&SoftmaxRows, &[&s], DEFAULT_STEP)?);

    let x2 = random_tensor(&[2, 9, 9], &mut rng);
    let k2 = random_tensor(&[3, 2, 3, 3], &mut rng);
    push(
        "conv2d",
        grad_check(&Conv2dOp { stride: (2, 2), padding: (1, 1) }, &[&x2, &k2], DEFAULT_STEP)?,
    );

    let x3 = random_tensor(&[2, 3, 6, 6], &mut rng);
    let k3 = random_tensor(&[2, 2, 2, 3, 3], &mut rng);
    push(
        "conv3d",
        grad_check(&Conv3dOp { stride: (1, 1, 1), padding: (0, 1, 1) }, &[&x3, &k3], DEFAULT_STEP)?,
    );

    let xt = random_tensor(&[2, 3, 3], &mut rng);
    let kt = random_tensor(&[2, 3, 3, 3], &mut rng);
    push(
        "conv_transpose2d",
        grad_check(&ConvTranspose2dOp { stride: (2, 2), padding: (1, 1) }, &[&xt, &kt], DEFAULT_STEP)?,
    );

    let p = random_tensor(&[3, 5], &mut rng);
    for f in [PointwiseFn::Sigmoid, PointwiseFn::LeakyRelu, PointwiseFn::Exp] {
        push(f.name(), grad_check(&Pointwise(f), &[&p], DEFAULT_STEP)?);
    }
    let pos = p.map(|v| v.abs() + 0.5);
    push("log_eps", grad_check(&Pointwise(PointwiseFn::LogEps(1e-10)), &[&pos], DEFAULT_STEP)?);

    let f_v = random_tensor(&[4, 2, 2], &mut rng);
    let f_a = random_tensor(&[4, 2, 2], &mut rng);
    let ga = Tensor::scalar(0.4);
    let gv = Tensor::scalar(-0.3);
    push(
        "fusion_attention",
        grad_check(&crate::attention::FusionAttentionOp, &[&f_v, &f_a, &ga, &gv], DEFAULT_STEP)?,
    );

    push("pipeline", pipeline_grad_check()?);
    Ok(out)
}

/// Central-difference check of the composed pipeline: tiny encoders,
/// attention, the detection head, and the full loss, differentiated with
/// respect to every parameter.
pub fn pipeline_grad_check() -> Result<f64> {
    use crate::boxes::{BoundingBox, VehicleClass};
    use crate::detect::AnchorSet;
    use crate::encoder::EncoderConfig;
    use crate::loss;
    use crate::model::{Model, ModelConfig};

    let cfg = ModelConfig {
        encoder: EncoderConfig::tiny(),
        anchors: AnchorSet::new(vec![(0.2, 0.25), (0.5, 0.4)])?,
    };
    let mut model = Model::<f64>::init(cfg, 0x9a17)?;
    // nonzero gammas so the attention path carries gradient
    model.gamma_a.data_mut()[0] = 0.3;
    model.gamma_v.data_mut()[0] = -0.2;

    let mut rng = DetRng::new(0x9a18);
    let (c, t, h, w) = model.video.input_shape();
    let clip = Tensor::from_vec(
        &[c, t, h, w],
        (0..c * t * h * w).map(|_| rng.uniform()).collect(),
    )?;
    let (ca, m, f) = model.audio.input_shape();
    let mel = Tensor::from_vec(
        &[ca, m, f],
        (0..ca * m * f).map(|_| rng.range_f64(-20.0, -2.0)).collect(),
    )?;
    let boxes = vec![
        BoundingBox { cx: 0.45, cy: 0.55, w: 0.22, h: 0.27, class: VehicleClass::Idling },
        BoundingBox { cx: 0.8, cy: 0.2, w: 0.45, h: 0.38, class: VehicleClass::Moving },
    ];
    let targets = loss::assign_targets(&boxes, &model.cfg.anchors, model.cfg.encoder.grid)?;

    let fwd = model.forward(&clip, &mel)?;
    let (_, d_raw) = loss::detection_loss_grad(&fwd.raw, &targets, loss::FOCAL_ALPHA, loss::FOCAL_GAMMA)?;
    let grads = model.backward(&fwd, &d_raw)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();

    let mut flat = model.flatten_params();
    grad_check_fn(
        |params| {
            model.unflatten_params(params)?;
            let fwd = model.forward(&clip, &mel)?;
            loss::total_loss(&fwd.raw, &targets, loss::FOCAL_ALPHA, loss::FOCAL_GAMMA)
        },
        &mut flat,
        &analytic,
        DEFAULT_STEP,
    )
}

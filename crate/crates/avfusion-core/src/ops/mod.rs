//! Differentiable tensor operations.
//!
//! Each operation is a pure function with an explicit adjoint. Summation
//! order is fixed (left-to-right over the reduction axis), so outputs are
//! bit-identical across runs regardless of worker count. Forward results are
//! checked for NaN/Inf; producing one on finite input is a contract
//! violation reported as an error.

mod conv;

pub use conv::{
    conv2d, conv2d_backward_input, conv2d_backward_kernel, conv3d, conv3d_backward_input,
    conv3d_backward_kernel, conv_out_dim, conv_transpose2d, conv_transpose2d_backward_input,
    conv_transpose2d_backward_kernel, deconv_out_dim, Conv2dOp, Conv3dOp, ConvTranspose2dOp,
};

use crate::error::{AvError, Result};
use crate::tensor::{Scalar, Tensor};

/// An operation with an exact adjoint: `forward` maps input tensors to one
/// output, `backward` pulls an upstream gradient back to one gradient per
/// input.
pub trait DiffOp<T: Scalar>: Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    fn backward(&self, inputs: &[&Tensor<T>], upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>>;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// `a[M,K] * b[K,N]`, accumulated left-to-right over K.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (kb, n) = dims2(b, "matmul rhs")?;
    if k != kb {
        return Err(AvError::Shape(format!(
            "matmul inner dims disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut od[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// `a[M,K] * b[N,K]^T` -> `[M,N]` (rows dotted with rows).
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul_nt lhs")?;
    let (n, kb) = dims2(b, "matmul_nt rhs")?;
    if k != kb {
        return Err(AvError::Shape(format!(
            "matmul_nt inner dims disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            od[i * n + j] = acc;
        }
    }
    out.ensure_finite("matmul_nt")?;
    Ok(out)
}

/// `a[K,M]^T * b[K,N]` -> `[M,N]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = dims2(a, "matmul_tn lhs")?;
    let (kb, n) = dims2(b, "matmul_tn rhs")?;
    if k != kb {
        return Err(AvError::Shape(format!(
            "matmul_tn inner dims disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for kk in 0..k {
        let arow = &ad[kk * m..(kk + 1) * m];
        let brow = &bd[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut od[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out.ensure_finite("matmul_tn")?;
    Ok(out)
}

pub struct MatMul;

impl<T: Scalar> DiffOp<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        expect_inputs(inputs, 2, "matmul")?;
        matmul(inputs[0], inputs[1])
    }

    fn backward(&self, inputs: &[&Tensor<T>], upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        expect_inputs(inputs, 2, "matmul")?;
        // dA = dY * B^T, dB = A^T * dY
        let da = matmul_nt(upstream, inputs[1])?;
        let db = matmul_tn(inputs[0], upstream)?;
        Ok(vec![da, db])
    }
}

// ---------------------------------------------------------------------------
// softmax over rows
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction. Every row of the output sums to 1.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = dims2(x, "softmax_rows")?;
    x.ensure_finite("softmax_rows input")?;
    let mut out = Tensor::zeros(&[r, c]);
    let xd = x.data();
    let od = out.data_mut();
    for i in 0..r {
        let row = &xd[i * c..(i + 1) * c];
        let orow = &mut od[i * c..(i + 1) * c];
        let mut mx = row[0];
        for &v in &row[1..] {
            mx = mx.maximum(v);
        }
        let mut sum = T::ZERO;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out.ensure_finite("softmax_rows")?;
    Ok(out)
}

/// Adjoint of [`softmax_rows`] given the forward output `y`.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != upstream.shape() {
        return Err(AvError::Shape(format!(
            "softmax backward shape mismatch: {:?} vs {:?}",
            y.shape(),
            upstream.shape()
        )));
    }
    let (r, c) = dims2(y, "softmax_rows_backward")?;
    let mut out = Tensor::zeros(&[r, c]);
    let yd = y.data();
    let ud = upstream.data();
    let od = out.data_mut();
    for i in 0..r {
        let yrow = &yd[i * c..(i + 1) * c];
        let urow = &ud[i * c..(i + 1) * c];
        let mut dot = T::ZERO;
        for (&yv, &uv) in yrow.iter().zip(urow) {
            dot += yv * uv;
        }
        for ((o, &yv), &uv) in od[i * c..(i + 1) * c].iter_mut().zip(yrow).zip(urow) {
            *o = yv * (uv - dot);
        }
    }
    Ok(out)
}

pub struct SoftmaxRows;

impl<T: Scalar> DiffOp<T> for SoftmaxRows {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        expect_inputs(inputs, 1, "softmax_rows")?;
        softmax_rows(inputs[0])
    }

    fn backward(&self, inputs: &[&Tensor<T>], upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        expect_inputs(inputs, 1, "softmax_rows")?;
        let y = softmax_rows(inputs[0])?;
        Ok(vec![softmax_rows_backward(&y, upstream)?])
    }
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities
// ---------------------------------------------------------------------------

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointwiseFn {
    Sigmoid,
    LeakyRelu,
    Exp,
    /// ln(x + eps); requires x >= 0.
    LogEps(f64),
}

impl PointwiseFn {
    pub fn name(self) -> &'static str {
        match self {
            PointwiseFn::Sigmoid => "sigmoid",
            PointwiseFn::LeakyRelu => "leaky_relu",
            PointwiseFn::Exp => "exp",
            PointwiseFn::LogEps(_) => "log_eps",
        }
    }
}

pub fn pointwise<T: Scalar>(x: &Tensor<T>, f: PointwiseFn) -> Result<Tensor<T>> {
    if let PointwiseFn::LogEps(_) = f {
        if x.data().iter().any(|&v| v < T::ZERO) {
            return Err(AvError::Domain("log_eps requires non-negative input".into()));
        }
    }
    let out = match f {
        PointwiseFn::Sigmoid => x.map(sigmoid_scalar),
        PointwiseFn::LeakyRelu => {
            let slope = T::from_f64(LEAKY_SLOPE);
            x.map(move |v| if v > T::ZERO { v } else { slope * v })
        }
        PointwiseFn::Exp => x.map(|v| v.exp()),
        PointwiseFn::LogEps(eps) => {
            let eps = T::from_f64(eps);
            x.map(move |v| (v + eps).ln())
        }
    };
    out.ensure_finite(f.name())?;
    Ok(out)
}

pub fn pointwise_backward<T: Scalar>(
    x: &Tensor<T>,
    f: PointwiseFn,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.shape() != upstream.shape() {
        return Err(AvError::Shape(format!(
            "pointwise backward shape mismatch: {:?} vs {:?}",
            x.shape(),
            upstream.shape()
        )));
    }
    let mut out = upstream.clone();
    match f {
        PointwiseFn::Sigmoid => {
            for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                let y = sigmoid_scalar(v);
                *o *= y * (T::ONE - y);
            }
        }
        PointwiseFn::LeakyRelu => {
            let slope = T::from_f64(LEAKY_SLOPE);
            for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                if v <= T::ZERO {
                    *o *= slope;
                }
            }
        }
        PointwiseFn::Exp => {
            for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                *o *= v.exp();
            }
        }
        PointwiseFn::LogEps(eps) => {
            let eps = T::from_f64(eps);
            for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                *o = *o / (v + eps);
            }
        }
    }
    Ok(out)
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    T::ONE / (T::ONE + (-v).exp())
}

pub struct Pointwise(pub PointwiseFn);

impl<T: Scalar> DiffOp<T> for Pointwise {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        expect_inputs(inputs, 1, self.0.name())?;
        pointwise(inputs[0], self.0)
    }

    fn backward(&self, inputs: &[&Tensor<T>], upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        expect_inputs(inputs, 1, self.0.name())?;
        Ok(vec![pointwise_backward(inputs[0], self.0, upstream)?])
    }
}

// ---------------------------------------------------------------------------
// channel bias
// ---------------------------------------------------------------------------

/// Add one bias value per leading-axis channel of `x`.
pub fn add_channel_bias<T: Scalar>(x: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let channels = x.shape()[0];
    if bias.shape() != [channels] {
        return Err(AvError::Shape(format!(
            "bias shape {:?} does not match {channels} channels",
            bias.shape()
        )));
    }
    let per = x.numel() / channels;
    let bd = bias.data().to_vec();
    for (c, &b) in bd.iter().enumerate() {
        for v in &mut x.data_mut()[c * per..(c + 1) * per] {
            *v += b;
        }
    }
    Ok(())
}

/// Gradient of [`add_channel_bias`] with respect to the bias.
pub fn channel_bias_grad<T: Scalar>(upstream: &Tensor<T>) -> Tensor<T> {
    let channels = upstream.shape()[0];
    let per = upstream.numel() / channels;
    let mut g = Tensor::zeros(&[channels]);
    let ud = upstream.data();
    for c in 0..channels {
        let mut acc = T::ZERO;
        for &v in &ud[c * per..(c + 1) * per] {
            acc += v;
        }
        g.data_mut()[c] = acc;
    }
    g
}

pub(crate) fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(AvError::Shape(format!("{what} expects a matrix, got {other:?}"))),
    }
}

pub(crate) fn expect_inputs<T: Scalar>(
    inputs: &[&Tensor<T>],
    n: usize,
    what: &str,
) -> Result<()> {
    if inputs.len() != n {
        return Err(AvError::Shape(format!(
            "{what} expects {n} inputs, got {}",
            inputs.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn random_tensor(shape: &[usize], rng: &mut DetRng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_cases() {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let diag = Tensor::from_vec(&[2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        assert_eq!(matmul(&eye, &diag).unwrap(), diag);
        // identity times a diagonal transposed is still the diagonal
        assert_eq!(matmul_nt(&eye, &diag).unwrap(), diag);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = DetRng::new(42);
        let a = random_tensor(&[5, 4], &mut rng);
        let b = random_tensor(&[4, 3], &mut rng);
        let got = matmul(&a, &b).unwrap();
        // oracle: naive triple loop, independent accumulation
        let mut want = vec![0.0f64; 5 * 3];
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.data()[i * 4 + k] * b.data()[k * 3 + j];
                }
                want[i * 3 + j] = acc;
            }
        }
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = softmax_rows(&x).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_scalar_formula() {
        let x = Tensor::from_vec(&[1, 2], vec![2.0, 0.0]).unwrap();
        let y = softmax_rows(&x).unwrap();
        let e2 = 2.0f64.exp();
        assert!((y.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((y.data()[1] - 1.0 / (e2 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = DetRng::new(3);
        let x = random_tensor(&[4, 6], &mut rng);
        let shifted = x.map(|v| v + 7.25);
        let a = softmax_rows(&x).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        for (&u, &v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = DetRng::new(8);
        let x = random_tensor(&[6, 6], &mut rng);
        let y = softmax_rows(&x).unwrap();
        for i in 0..6 {
            let s: f64 = y.data()[i * 6..(i + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pointwise_closed_forms() {
        let x = Tensor::from_vec(&[3], vec![0.0, -1.0, 2.0]).unwrap();
        let sig = pointwise(&x, PointwiseFn::Sigmoid).unwrap();
        assert!((sig.data()[0] - 0.5).abs() < 1e-15);
        let leaky = pointwise(&x, PointwiseFn::LeakyRelu).unwrap();
        assert!((leaky.data()[1] - (-0.1)).abs() < 1e-15);
        assert!((leaky.data()[2] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn exp_log_round_trip() {
        let x = Tensor::from_vec(&[4], vec![0.1, 0.9, 2.5, 7.0]).unwrap();
        let y = pointwise(&x, PointwiseFn::Exp).unwrap();
        let back = pointwise(&y, PointwiseFn::LogEps(0.0)).unwrap();
        for (&a, &b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_eps_rejects_negative() {
        let x = Tensor::from_vec(&[2], vec![0.5, -0.1]).unwrap();
        assert!(matches!(pointwise(&x, PointwiseFn::LogEps(1e-10)), Err(AvError::Domain(_))));
    }

    #[test]
    fn exp_overflow_is_reported() {
        let x = Tensor::from_vec(&[1], vec![1e10]).unwrap();
        assert!(matches!(pointwise(&x, PointwiseFn::Exp), Err(AvError::NonFinite(_))));
    }

    #[test]
    fn bias_add_and_grad() {
        let mut x = Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        add_channel_bias(&mut x, &b).unwrap();
        assert_eq!(x.data(), &[1.0, 1.0, 1.0, -2.0, -2.0, -2.0]);
        let g = channel_bias_grad(&x);
        assert_eq!(g.data(), &[3.0, -6.0]);
    }
}

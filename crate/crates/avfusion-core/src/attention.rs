//! Bidirectional audio-visual attention.
//!
//! Feature maps are stored channel-first `[D, H, W]`; the logical grid is
//! H x W with D features per cell. Flattening lists cells row-major, so grid
//! cell (r, c) becomes row r*W + c of an `[N, D]` matrix.
//!
//! The block computes the cross-modal gram matrix G = Fv_r * Fa_r^T, turns it
//! into two row-stochastic attention maps W_av = rowsoftmax(G) and
//! W_va = rowsoftmax(G^T), reweights each modality by the other, and applies
//! a learnable residual: out = gamma * reweighted + original. At gamma = 0
//! the block is exactly the identity.

use crate::error::{AvError, Result};
use crate::ops::{self, DiffOp};
use crate::tensor::{Scalar, Tensor};

/// Learned scalars plus the attention maps cached for inspection.
#[derive(Debug, Clone)]
pub struct AttentionState<T: Scalar> {
    pub gamma_a: T,
    pub gamma_v: T,
    pub w_av: Tensor<T>,
    pub w_va: Tensor<T>,
}

/// `[D,H,W]` -> `[N,D]`, N = H*W, cells row-major.
pub fn flatten_spatial<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, h, w) = match f.shape() {
        [d, h, w] => (*d, *h, *w),
        other => return Err(AvError::Shape(format!("flatten_spatial expects rank 3, got {other:?}"))),
    };
    let n = h * w;
    let mut out = Tensor::zeros(&[n, d]);
    let fd = f.data();
    let od = out.data_mut();
    for c in 0..d {
        let plane = &fd[c * n..(c + 1) * n];
        for (cell, &v) in plane.iter().enumerate() {
            od[cell * d + c] = v;
        }
    }
    Ok(out)
}

/// Inverse of [`flatten_spatial`]: `[N,D]` -> `[D,H,W]` with N = H*W.
pub fn unflatten_spatial<T: Scalar>(f: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, d) = match f.shape() {
        [n, d] => (*n, *d),
        other => return Err(AvError::Shape(format!("unflatten_spatial expects rank 2, got {other:?}"))),
    };
    if n != h * w {
        return Err(AvError::Shape(format!("cannot unflatten {n} cells to {h}x{w}")));
    }
    let mut out = Tensor::zeros(&[d, h, w]);
    let fd = f.data();
    let od = out.data_mut();
    for c in 0..d {
        let plane = &mut od[c * n..(c + 1) * n];
        for (cell, p) in plane.iter_mut().enumerate() {
            *p = fd[cell * d + c];
        }
    }
    Ok(out)
}

/// Everything the backward pass needs from a forward evaluation.
pub struct AttentionCache<T: Scalar> {
    pub h: usize,
    pub w: usize,
    pub fv_flat: Tensor<T>,
    pub fa_flat: Tensor<T>,
    pub w_av: Tensor<T>,
    pub w_va: Tensor<T>,
    pub fa_rw_flat: Tensor<T>,
    pub fv_rw_flat: Tensor<T>,
    pub gamma_a: T,
    pub gamma_v: T,
}

/// Forward pass. Returns the two reweighted maps and the cache.
pub fn bidir_attention<T: Scalar>(
    f_v: &Tensor<T>,
    f_a: &Tensor<T>,
    gamma_a: T,
    gamma_v: T,
) -> Result<(Tensor<T>, Tensor<T>, AttentionCache<T>)> {
    if f_v.shape() != f_a.shape() {
        return Err(AvError::Shape(format!(
            "attention expects equal shapes, got {:?} vs {:?}",
            f_v.shape(),
            f_a.shape()
        )));
    }
    let (h, w) = (f_v.shape()[1], f_v.shape()[2]);
    let fv_flat = flatten_spatial(f_v)?;
    let fa_flat = flatten_spatial(f_a)?;

    // G[i][j] = <visual cell i, audio cell j>
    let gram = ops::matmul_nt(&fv_flat, &fa_flat)?;
    let w_av = ops::softmax_rows(&gram)?;
    let gram_t = transpose(&gram);
    let w_va = ops::softmax_rows(&gram_t)?;

    let fa_prime = ops::matmul(&w_av, &fa_flat)?;
    let fv_prime = ops::matmul(&w_va, &fv_flat)?;

    let mut f_a_rw = unflatten_spatial(&fa_prime, h, w)?;
    f_a_rw.scale(gamma_a);
    f_a_rw.add_scaled(f_a, T::ONE)?;
    let mut f_v_rw = unflatten_spatial(&fv_prime, h, w)?;
    f_v_rw.scale(gamma_v);
    f_v_rw.add_scaled(f_v, T::ONE)?;

    let cache = AttentionCache {
        h,
        w,
        fv_flat,
        fa_flat,
        w_av,
        w_va,
        fa_rw_flat: fa_prime,
        fv_rw_flat: fv_prime,
        gamma_a,
        gamma_v,
    };
    Ok((f_v_rw, f_a_rw, cache))
}

/// Gradients of the block: upstream gradients for both outputs come back as
/// gradients for both inputs plus the two gamma scalars.
pub fn bidir_attention_backward<T: Scalar>(
    cache: &AttentionCache<T>,
    d_v_rw: &Tensor<T>,
    d_a_rw: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, T, T)> {
    let dv_flat = flatten_spatial(d_v_rw)?;
    let da_flat = flatten_spatial(d_a_rw)?;

    // residual: out_v = gamma_v * unflat(Fv') + f_v
    let d_gamma_v = dv_flat.dot(&cache.fv_rw_flat)?;
    let d_gamma_a = da_flat.dot(&cache.fa_rw_flat)?;

    let mut d_fv_prime = dv_flat.clone();
    d_fv_prime.scale(cache.gamma_v);
    let mut d_fa_prime = da_flat.clone();
    d_fa_prime.scale(cache.gamma_a);

    // Fa' = W_av * Fa_flat ; Fv' = W_va * Fv_flat
    let d_w_av = ops::matmul_nt(&d_fa_prime, &cache.fa_flat)?;
    let mut d_fa_flat = ops::matmul_tn(&cache.w_av, &d_fa_prime)?;
    let d_w_va = ops::matmul_nt(&d_fv_prime, &cache.fv_flat)?;
    let mut d_fv_flat = ops::matmul_tn(&cache.w_va, &d_fv_prime)?;

    // through the two softmaxes into the gram matrix
    let d_gram_av = ops::softmax_rows_backward(&cache.w_av, &d_w_av)?;
    let d_gram_t = ops::softmax_rows_backward(&cache.w_va, &d_w_va)?;
    let mut d_gram = d_gram_av;
    d_gram.add_scaled(&transpose(&d_gram_t), T::ONE)?;

    // G = Fv_flat * Fa_flat^T
    d_fv_flat.add_scaled(&ops::matmul(&d_gram, &cache.fa_flat)?, T::ONE)?;
    d_fa_flat.add_scaled(&ops::matmul_tn(&d_gram, &cache.fv_flat)?, T::ONE)?;

    let mut d_fv = unflatten_spatial(&d_fv_flat, cache.h, cache.w)?;
    d_fv.add_scaled(d_v_rw, T::ONE)?; // residual skip
    let mut d_fa = unflatten_spatial(&d_fa_flat, cache.h, cache.w)?;
    d_fa.add_scaled(d_a_rw, T::ONE)?;

    Ok((d_fv, d_fa, d_gamma_a, d_gamma_v))
}

/// `[D,H,W]` pair -> `[2D,H,W]`; visual channels first.
pub fn concat_features<T: Scalar>(f_v_rw: &Tensor<T>, f_a_rw: &Tensor<T>) -> Result<Tensor<T>> {
    if f_v_rw.shape() != f_a_rw.shape() {
        return Err(AvError::Shape(format!(
            "concat expects equal shapes, got {:?} vs {:?}",
            f_v_rw.shape(),
            f_a_rw.shape()
        )));
    }
    let (d, h, w) = (f_v_rw.shape()[0], f_v_rw.shape()[1], f_v_rw.shape()[2]);
    let mut out = Tensor::zeros(&[2 * d, h, w]);
    let plane = h * w;
    out.data_mut()[..d * plane].copy_from_slice(f_v_rw.data());
    out.data_mut()[d * plane..].copy_from_slice(f_a_rw.data());
    Ok(out)
}

/// Split an upstream gradient of the concatenation back into the two halves.
pub fn split_features<T: Scalar>(fused: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (d2, h, w) = match fused.shape() {
        [d2, h, w] if d2 % 2 == 0 => (*d2, *h, *w),
        other => return Err(AvError::Shape(format!("split expects even channels, got {other:?}"))),
    };
    let d = d2 / 2;
    let plane = h * w;
    let v = Tensor::from_vec(&[d, h, w], fused.data()[..d * plane].to_vec())?;
    let a = Tensor::from_vec(&[d, h, w], fused.data()[d * plane..].to_vec())?;
    Ok((v, a))
}

fn transpose<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    let md = m.data();
    let od = out.data_mut();
    for i in 0..r {
        for j in 0..c {
            od[j * r + i] = md[i * c + j];
        }
    }
    out
}

/// The whole block as a single checkable op: inputs are
/// `[f_v, f_a, gamma_a, gamma_v]` (gammas as 1-element tensors), output is
/// the concatenation of the two reweighted maps.
pub struct FusionAttentionOp;

impl<T: Scalar> DiffOp<T> for FusionAttentionOp {
    fn name(&self) -> &'static str {
        "fusion_attention"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        ops::expect_inputs(inputs, 4, "fusion_attention")?;
        let (v_rw, a_rw, _) =
            bidir_attention(inputs[0], inputs[1], inputs[2].data()[0], inputs[3].data()[0])?;
        concat_features(&v_rw, &a_rw)
    }

    fn backward(&self, inputs: &[&Tensor<T>], upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        ops::expect_inputs(inputs, 4, "fusion_attention")?;
        let (_, _, cache) =
            bidir_attention(inputs[0], inputs[1], inputs[2].data()[0], inputs[3].data()[0])?;
        let (d_v_rw, d_a_rw) = split_features(upstream)?;
        let (d_fv, d_fa, d_ga, d_gv) = bidir_attention_backward(&cache, &d_v_rw, &d_a_rw)?;
        Ok(vec![d_fv, d_fa, Tensor::scalar(d_ga), Tensor::scalar(d_gv)])
    }
}

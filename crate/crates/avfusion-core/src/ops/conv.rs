//! Convolutions: 2D, 3D, and transposed 2D.
//!
//! Cross-correlation convention (no kernel flip), zero padding. Forward
//! kernels are laid out `[C_out, C_in, k...]`; the transposed convolution
//! takes `[C_in, C_out, kh, kw]` and is implemented as the exact adjoint of
//! the forward pass with the same geometry.
//!
//! Internally a convolution is unfold + matrix product: the input is
//! unfolded into a `[taps, cells]` column matrix (zeros where a tap falls in
//! the padding) and each output element accumulates its taps in a fixed
//! lexicographic (c_in, kt, ky, kx) order. The reduction order never depends
//! on worker count or data, so results are bit-reproducible.

use super::{expect_inputs, DiffOp};
use crate::error::{AvError, Result};
use crate::tensor::{Scalar, Tensor};

/// Output extent of a strided convolution along one axis.
/// Errors unless `(input + 2*pad - k) / stride` is a non-negative integer.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(AvError::Shape("stride and kernel must be positive".into()));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(AvError::Shape(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    let span = padded - k;
    if !span.is_multiple_of(stride) {
        return Err(AvError::Shape(format!(
            "non-integer output size: ({input} + 2*{pad} - {k}) not divisible by {stride}"
        )));
    }
    Ok(span / stride + 1)
}

/// Output extent of a transposed convolution: `(input-1)*stride - 2*pad + k`.
pub fn deconv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(AvError::Shape("stride and kernel must be positive".into()));
    }
    let grown = (input - 1) * stride + k;
    if grown < 2 * pad + 1 {
        return Err(AvError::Shape(format!(
            "invalid transposed-conv geometry: ({input}-1)*{stride} + {k} <= 2*{pad}"
        )));
    }
    Ok(grown - 2 * pad)
}

/// Sixteen-lane dot product over two equal-length slices, collapsed in a
/// fixed tree order. The lane count is fixed, so results are reproducible;
/// the independent lanes let the reduction vectorize and pipeline.
#[inline]
fn lane_dot<T: Scalar>(xs: &[T], ys: &[T]) -> T {
    debug_assert_eq!(xs.len(), ys.len());
    const LANES: usize = 16;
    let mut lanes = [T::ZERO; LANES];
    let n = xs.len();
    let blocks = n / LANES;
    for b in 0..blocks {
        let xo = &xs[b * LANES..(b + 1) * LANES];
        let yo = &ys[b * LANES..(b + 1) * LANES];
        for j in 0..LANES {
            lanes[j] += xo[j] * yo[j];
        }
    }
    for (lane, i) in (blocks * LANES..n).enumerate() {
        lanes[lane] += xs[i] * ys[i];
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for j in 0..width {
            let hi = lanes[j + width];
            lanes[j] += hi;
        }
    }
    lanes[0]
}

#[derive(Clone, Copy)]
struct Geom3 {
    ci: usize,
    t: usize,
    h: usize,
    w: usize,
    co: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    st: usize,
    sh: usize,
    sw: usize,
    pt: usize,
    ph: usize,
    pw: usize,
    ot: usize,
    oh: usize,
    ow: usize,
}

impl Geom3 {
    fn taps(&self) -> usize {
        self.ci * self.kt * self.kh * self.kw
    }

    fn cells(&self) -> usize {
        self.ot * self.oh * self.ow
    }
}

fn geometry3(
    input_shape: (usize, usize, usize, usize),
    kernel_shape: (usize, usize, usize, usize, usize),
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
) -> Result<Geom3> {
    let (ci, t, h, w) = input_shape;
    let (co, cik, kt, kh, kw) = kernel_shape;
    if ci != cik {
        return Err(AvError::Shape(format!(
            "conv3d channel mismatch: input {ci}, kernel {cik}"
        )));
    }
    let (st, sh, sw) = stride;
    let (pt, ph, pw) = padding;
    Ok(Geom3 {
        ci,
        t,
        h,
        w,
        co,
        kt,
        kh,
        kw,
        st,
        sh,
        sw,
        pt,
        ph,
        pw,
        ot: conv_out_dim(t, kt, st, pt)?,
        oh: conv_out_dim(h, kh, sh, ph)?,
        ow: conv_out_dim(w, kw, sw, pw)?,
    })
}

// Valid tap range [lo, hi) such that base + tap lands in [0, limit), where
// base may be negative (an output position times stride minus padding).
fn tap_range(base: isize, k: usize, limit: usize) -> (usize, usize) {
    let lo = if base < 0 { (-base) as usize } else { 0 };
    let hi = if base >= limit as isize { 0 } else { k.min((limit as isize - base) as usize) };
    (lo.min(hi), hi)
}

/// Unfold the input into a cell-major `[cells, taps]` column matrix;
/// padding taps stay zero. Each (c_in, kt, ky) row of a cell is a contiguous
/// copy out of the input. The buffer is reused across calls; it only needs
/// re-zeroing when some taps fall in the padding.
fn unfold3_into<T: Scalar>(x: &[T], g: &Geom3, buf: &mut Vec<T>) {
    let taps = g.taps();
    let needed = g.cells() * taps;
    if buf.len() < needed {
        buf.resize(needed, T::ZERO);
    }
    let col = &mut buf[..needed];
    if g.pt > 0 || g.ph > 0 || g.pw > 0 {
        col.fill(T::ZERO);
    }
    let mut cell = 0usize;
    for otime in 0..g.ot {
        let it0 = (otime * g.st) as isize - g.pt as isize;
        let (kt_lo, kt_hi) = tap_range(it0, g.kt, g.t);
        for oy in 0..g.oh {
            let iy0 = (oy * g.sh) as isize - g.ph as isize;
            let (ky_lo, ky_hi) = tap_range(iy0, g.kh, g.h);
            for ox in 0..g.ow {
                let ix0 = (ox * g.sw) as isize - g.pw as isize;
                let (kx_lo, kx_hi) = tap_range(ix0, g.kw, g.w);
                let crow = &mut col[cell * taps..(cell + 1) * taps];
                cell += 1;
                if kx_lo >= kx_hi {
                    continue;
                }
                for c_in in 0..g.ci {
                    let xbase = c_in * g.t * g.h * g.w;
                    for ktap in kt_lo..kt_hi {
                        let it = (it0 + ktap as isize) as usize;
                        for ky in ky_lo..ky_hi {
                            let iy = (iy0 + ky as isize) as usize;
                            let src = xbase
                                + (it * g.h + iy) * g.w
                                + (ix0 + kx_lo as isize) as usize;
                            let dst = ((c_in * g.kt + ktap) * g.kh + ky) * g.kw;
                            crow[dst + kx_lo..dst + kx_hi]
                                .copy_from_slice(&x[src..src + (kx_hi - kx_lo)]);
                        }
                    }
                }
            }
        }
    }
}

/// Scatter a cell-major `[cells, taps]` gradient back onto the input.
fn fold3<T: Scalar>(dcol: &[T], g: &Geom3) -> Tensor<T> {
    let taps = g.taps();
    let mut dx = Tensor::zeros(&[g.ci, g.t, g.h, g.w]);
    let dxd = dx.data_mut();
    let mut cell = 0usize;
    for otime in 0..g.ot {
        let it0 = (otime * g.st) as isize - g.pt as isize;
        let (kt_lo, kt_hi) = tap_range(it0, g.kt, g.t);
        for oy in 0..g.oh {
            let iy0 = (oy * g.sh) as isize - g.ph as isize;
            let (ky_lo, ky_hi) = tap_range(iy0, g.kh, g.h);
            for ox in 0..g.ow {
                let ix0 = (ox * g.sw) as isize - g.pw as isize;
                let (kx_lo, kx_hi) = tap_range(ix0, g.kw, g.w);
                let crow = &dcol[cell * taps..(cell + 1) * taps];
                cell += 1;
                if kx_lo >= kx_hi {
                    continue;
                }
                for c_in in 0..g.ci {
                    let xbase = c_in * g.t * g.h * g.w;
                    for ktap in kt_lo..kt_hi {
                        let it = (it0 + ktap as isize) as usize;
                        for ky in ky_lo..ky_hi {
                            let iy = (iy0 + ky as isize) as usize;
                            let dst = xbase
                                + (it * g.h + iy) * g.w
                                + (ix0 + kx_lo as isize) as usize;
                            let src = ((c_in * g.kt + ktap) * g.kh + ky) * g.kw;
                            for (d, &v) in dxd[dst..dst + (kx_hi - kx_lo)]
                                .iter_mut()
                                .zip(&crow[src + kx_lo..src + kx_hi])
                            {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

/// `x[Ci,T,H,W] * k[Co,Ci,kt,kh,kw]` -> `[Co,OT,OH,OW]`, per-axis stride and
/// padding.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
) -> Result<Tensor<T>> {
    let g = geometry3(dims4(x, "conv3d input")?, dims5(k, "conv3d kernel")?, stride, padding)?;
    let cells = g.cells();
    let taps = g.taps();
    let mut out = Tensor::zeros(&[g.co, g.ot, g.oh, g.ow]);
    T::scratch().with(|scr| {
        let mut buf = scr.borrow_mut();
        unfold3_into(x.data(), &g, &mut buf);
        let col = &buf[..cells * taps];
        let od = out.data_mut();
        let kd = k.data();
        // cell-outer so the column matrix streams through once and the
        // kernel rows stay cached
        for cell in 0..cells {
            let crow = &col[cell * taps..(cell + 1) * taps];
            for c_out in 0..g.co {
                od[c_out * cells + cell] = lane_dot(&kd[c_out * taps..(c_out + 1) * taps], crow);
            }
        }
    });
    out.ensure_finite("conv3d")?;
    Ok(out)
}

/// Gradient of conv3d with respect to its input.
pub fn conv3d_backward_input<T: Scalar>(
    upstream: &Tensor<T>,
    k: &Tensor<T>,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
    input_shape: (usize, usize, usize, usize),
) -> Result<Tensor<T>> {
    let g = geometry3(input_shape, dims5(k, "conv3d kernel")?, stride, padding)?;
    check_upstream(upstream.shape(), &[g.co, g.ot, g.oh, g.ow], "conv3d")?;
    let cells = g.cells();
    let taps = g.taps();
    // dcol = K^T * upstream, accumulated over output channels in order
    let kd = k.data();
    let ud = upstream.data();
    let dx = T::scratch().with(|scr| {
        let mut buf = scr.borrow_mut();
        let needed = cells * taps;
        if buf.len() < needed {
            buf.resize(needed, T::ZERO);
        }
        let dcol = &mut buf[..needed];
        dcol.fill(T::ZERO);
        for cell in 0..cells {
            let drow = &mut dcol[cell * taps..(cell + 1) * taps];
            for c_out in 0..g.co {
                let u = ud[c_out * cells + cell];
                let krow = &kd[c_out * taps..(c_out + 1) * taps];
                for (d, &wgt) in drow.iter_mut().zip(krow) {
                    *d += wgt * u;
                }
            }
        }
        fold3(dcol, &g)
    });
    Ok(dx)
}

/// Gradient of conv3d with respect to its kernel.
pub fn conv3d_backward_kernel<T: Scalar>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
    kernel_shape: (usize, usize, usize, usize, usize),
) -> Result<Tensor<T>> {
    let g = geometry3(dims4(x, "conv3d input")?, kernel_shape, stride, padding)?;
    check_upstream(upstream.shape(), &[g.co, g.ot, g.oh, g.ow], "conv3d")?;
    let cells = g.cells();
    let taps = g.taps();
    let mut dk = Tensor::zeros(&[g.co, g.ci, g.kt, g.kh, g.kw]);
    T::scratch().with(|scr| {
        let mut buf = scr.borrow_mut();
        unfold3_into(x.data(), &g, &mut buf);
        let col = &buf[..cells * taps];
        let dkd = dk.data_mut();
        let ud = upstream.data();
        for cell in 0..cells {
            let crow = &col[cell * taps..(cell + 1) * taps];
            for c_out in 0..g.co {
                let u = ud[c_out * cells + cell];
                let krow = &mut dkd[c_out * taps..(c_out + 1) * taps];
                for (dst, &c) in krow.iter_mut().zip(crow) {
                    *dst += u * c;
                }
            }
        }
    });
    Ok(dk)
}

fn check_upstream(got: &[usize], want: &[usize], what: &str) -> Result<()> {
    if got != want {
        return Err(AvError::Shape(format!(
            "{what} upstream shape {got:?} does not match output {want:?}"
        )));
    }
    Ok(())
}

fn dims3<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        other => Err(AvError::Shape(format!("{what} expects rank 3, got {other:?}"))),
    }
}

fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        other => Err(AvError::Shape(format!("{what} expects rank 4, got {other:?}"))),
    }
}

fn dims5<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize, usize)> {
    match t.shape() {
        [a, b, c, d, e] => Ok((*a, *b, *c, *d, *e)),
        other => Err(AvError::Shape(format!("{what} expects rank 5, got {other:?}"))),
    }
}

// ---------------------------------------------------------------------------
// conv2d: the time-degenerate case of conv3d
// ---------------------------------------------------------------------------

fn lift2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = dims3(x, "conv2d input")?;
    x.clone().reshape(&[c, 1, h, w])
}

/// `x[Ci,H,W] * k[Co,Ci,kh,kw]` -> `[Co,OH,OW]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let (co, ci, kh, kw) = dims4(k, "conv2d kernel")?;
    let k3 = k.clone().reshape(&[co, ci, 1, kh, kw])?;
    let out = conv3d(&lift2(x)?, &k3, (1, stride.0, stride.1), (0, padding.0, padding.1))?;
    let s = out.shape().to_vec();
    out.reshape(&[s[0], s[2], s[3]])
}

pub fn conv2d_backward_input<T: Scalar>(
    upstream: &Tensor<T>,
    k: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
    input_shape: (usize, usize, usize),
) -> Result<Tensor<T>> {
    let (co, ci, kh, kw) = dims4(k, "conv2d kernel")?;
    let k3 = k.clone().reshape(&[co, ci, 1, kh, kw])?;
    let (uc, uh, uw) = dims3(upstream, "conv2d upstream")?;
    let up3 = upstream.clone().reshape(&[uc, 1, uh, uw])?;
    let (ic, ih, iw) = input_shape;
    let dx = conv3d_backward_input(
        &up3,
        &k3,
        (1, stride.0, stride.1),
        (0, padding.0, padding.1),
        (ic, 1, ih, iw),
    )?;
    dx.reshape(&[ic, ih, iw])
}

pub fn conv2d_backward_kernel<T: Scalar>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
    kernel_shape: (usize, usize, usize, usize),
) -> Result<Tensor<T>> {
    let (co, ci, kh, kw) = kernel_shape;
    let (uc, uh, uw) = dims3(upstream, "conv2d upstream")?;
    let up3 = upstream.clone().reshape(&[uc, 1, uh, uw])?;
    let dk = conv3d_backward_kernel(
        &up3,
        &lift2(x)?,
        (1, stride.0, stride.1),
        (0, padding.0, padding.1),
        (co, ci, 1, kh, kw),
    )?;
    dk.reshape(&[co, ci, kh, kw])
}

// ---------------------------------------------------------------------------
// transposed conv2d: the adjoint of conv2d with the same geometry
// ---------------------------------------------------------------------------

/// `x[Ci,H,W] * k[Ci,Co,kh,kw]` -> `[Co,OH,OW]` where
/// `OH = (H-1)*stride - 2*pad + kh`. With a forward-layout kernel
/// `[Co,Ci,kh,kw]` this computes the exact adjoint of [`conv2d`] with the
/// same stride and padding: scattering through the kernel is identical to
/// pulling a gradient back through the matching forward convolution.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let (ci, h, w) = dims3(x, "conv_transpose2d input")?;
    let (cik, co, kh, kw) = dims4(k, "conv_transpose2d kernel")?;
    if ci != cik {
        return Err(AvError::Shape(format!(
            "conv_transpose2d channel mismatch: input {ci}, kernel {cik}"
        )));
    }
    let oh = deconv_out_dim(h, kh, stride.0, padding.0)?;
    let ow = deconv_out_dim(w, kw, stride.1, padding.1)?;
    let out = conv2d_backward_input(x, k, stride, padding, (co, oh, ow))?;
    out.ensure_finite("conv_transpose2d")?;
    Ok(out)
}

/// Gradient of conv_transpose2d with respect to its input: the matching
/// forward convolution over the upstream gradient.
pub fn conv_transpose2d_backward_input<T: Scalar>(
    upstream: &Tensor<T>,
    k: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
    input_shape: (usize, usize, usize),
) -> Result<Tensor<T>> {
    let dx = conv2d(upstream, k, stride, padding)?;
    if dx.shape() != [input_shape.0, input_shape.1, input_shape.2] {
        return Err(AvError::Shape(format!(
            "conv_transpose2d backward: got {:?}, want {:?}",
            dx.shape(),
            input_shape
        )));
    }
    Ok(dx)
}

/// Gradient of conv_transpose2d with respect to its kernel.
pub fn conv_transpose2d_backward_kernel<T: Scalar>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
    kernel_shape: (usize, usize, usize, usize),
) -> Result<Tensor<T>> {
    // with roles swapped, dk for the transposed op is the forward op's dk
    conv2d_backward_kernel(x, upstream, stride, padding, kernel_shape)
}

// ---------------------------------------------------------------------------
// DiffOp wrappers
// ---------------------------------------------------------------------------

pub struct Conv2dOp {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl<T: Scalar> DiffOp<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        expect_inputs(inputs, 2, "conv2d")?;
        conv2d(inputs[0], inputs[1], self.stride, self.padding)
    }

    fn backward(&self, inputs: &[&Tensor<T>], upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        expect_inputs(inputs, 2, "conv2d")?;
        let (x, k) = (inputs[0], inputs[1]);
        let xs = x.shape();
        let ks = k.shape();
        let dx = conv2d_backward_input(upstream, k, self.stride, self.padding, (xs[0], xs[1], xs[2]))?;
        let dk = conv2d_backward_kernel(
            upstream,
            x,
            self.stride,
            self.padding,
            (ks[0], ks[1], ks[2], ks[3]),
        )?;
        Ok(vec![dx, dk])
    }
}

pub struct Conv3dOp {
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

impl<T: Scalar> DiffOp<T> for Conv3dOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        expect_inputs(inputs, 2, "conv3d")?;
        conv3d(inputs[0], inputs[1], self.stride, self.padding)
    }

    fn backward(&self, inputs: &[&Tensor<T>], upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        expect_inputs(inputs, 2, "conv3d")?;
        let (x, k) = (inputs[0], inputs[1]);
        let xs = x.shape();
        let ks = k.shape();
        let dx = conv3d_backward_input(
            upstream,
            k,
            self.stride,
            self.padding,
            (xs[0], xs[1], xs[2], xs[3]),
        )?;
        let dk = conv3d_backward_kernel(
            upstream,
            x,
            self.stride,
            self.padding,
            (ks[0], ks[1], ks[2], ks[3], ks[4]),
        )?;
        Ok(vec![dx, dk])
    }
}

pub struct ConvTranspose2dOp {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl<T: Scalar> DiffOp<T> for ConvTranspose2dOp {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        expect_inputs(inputs, 2, "conv_transpose2d")?;
        conv_transpose2d(inputs[0], inputs[1], self.stride, self.padding)
    }

    fn backward(&self, inputs: &[&Tensor<T>], upstream: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        expect_inputs(inputs, 2, "conv_transpose2d")?;
        let (x, k) = (inputs[0], inputs[1]);
        let xs = x.shape();
        let ks = k.shape();
        let dx = conv_transpose2d_backward_input(
            upstream,
            k,
            self.stride,
            self.padding,
            (xs[0], xs[1], xs[2]),
        )?;
        let dk = conv_transpose2d_backward_kernel(
            upstream,
            x,
            self.stride,
            self.padding,
            (ks[0], ks[1], ks[2], ks[3]),
        )?;
        Ok(vec![dx, dk])
    }
}

//! 2-D convolution and its transpose via im2col + GEMM.
//!
//! Padding is fixed at `(k - 1) / 2` on the leading edge, which gives "same"
//! output for odd kernels at stride 1 and `ceil(H / 2)` at stride 2. The
//! transposed convolution is the exact adjoint of the convolution whose
//! input is `stride` times larger than its own input.

use crate::autograd::Var;
use crate::error::{invalid, Result};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Spatial bookkeeping for one convolution (the "forward" direction).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(c_in: usize, h_in: usize, w_in: usize, kernel: usize, stride: usize) -> Result<Self> {
        if !(1..=2).contains(&stride) {
            return Err(invalid!("stride must be 1 or 2, got {stride}"));
        }
        if kernel == 0 {
            return Err(invalid!("kernel size must be positive"));
        }
        let pad = (kernel - 1) / 2;
        if h_in + 2 * pad < kernel || w_in + 2 * pad < kernel {
            return Err(invalid!("input {h_in}x{w_in} smaller than kernel {kernel}"));
        }
        Ok(Self {
            c_in,
            h_in,
            w_in,
            kernel,
            stride,
            pad,
            h_out: (h_in + 2 * pad - kernel) / stride + 1,
            w_out: (w_in + 2 * pad - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Input offsets hit by kernel tap `k` along one axis, as
    /// (first output index, last output index exclusive, first input index).
    fn tap_range(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize, isize) {
        let s = self.stride as isize;
        let first_in = k as isize - self.pad as isize;
        // smallest o with o*s + first_in >= 0
        let lo = if first_in >= 0 { 0 } else { ((-first_in) + s - 1) / s } as usize;
        // largest o with o*s + first_in <= n_in - 1
        let last = n_in as isize - 1 - first_in;
        let hi = if last < 0 { 0 } else { ((last / s) + 1).min(n_out as isize) as usize };
        (lo, hi.max(lo), first_in)
    }

    /// Unfolds one image `[c_in, h_in, w_in]` into `[c_in*k*k, h_out*w_out]`.
    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let k = self.kernel;
        let (ho, wo) = (self.h_out, self.w_out);
        let s = self.stride;
        cols.fill(T::zero());
        for c in 0..self.c_in {
            let plane = &img[c * self.h_in * self.w_in..(c + 1) * self.h_in * self.w_in];
            for ky in 0..k {
                let (oy0, oy1, iy0) = self.tap_range(ky, self.h_in, ho);
                for kx in 0..k {
                    let (ox0, ox1, ix0) = self.tap_range(kx, self.w_in, wo);
                    let row = ((c * k + ky) * k + kx) * ho * wo;
                    for oy in oy0..oy1 {
                        let iy = (oy * s) as isize + iy0;
                        let src = &plane[iy as usize * self.w_in..(iy as usize + 1) * self.w_in];
                        let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                        if s == 1 {
                            let ix = (ox0 as isize + ix0) as usize;
                            dst[ox0..ox1].copy_from_slice(&src[ix..ix + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                dst[ox] = src[((ox * s) as isize + ix0) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns into an image.
    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let k = self.kernel;
        let (ho, wo) = (self.h_out, self.w_out);
        let s = self.stride;
        for c in 0..self.c_in {
            let plane = &mut img[c * self.h_in * self.w_in..(c + 1) * self.h_in * self.w_in];
            for ky in 0..k {
                let (oy0, oy1, iy0) = self.tap_range(ky, self.h_in, ho);
                for kx in 0..k {
                    let (ox0, ox1, ix0) = self.tap_range(kx, self.w_in, wo);
                    let row = ((c * k + ky) * k + kx) * ho * wo;
                    for oy in oy0..oy1 {
                        let iy = ((oy * s) as isize + iy0) as usize;
                        let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                        let dst = &mut plane[iy * self.w_in..(iy + 1) * self.w_in];
                        for ox in ox0..ox1 {
                            dst[((ox * s) as isize + ix0) as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }

    /// `out[n] = W · im2col(x[n]) (+ bias)`; `w` is `[c_out, c_in*k*k]`.
    fn forward<T: Real>(&self, x: &[T], batch: usize, w: &[T], c_out: usize, bias: Option<&[T]>) -> Vec<T> {
        let (rows, ncols) = (self.col_rows(), self.col_cols());
        let in_sz = self.c_in * self.h_in * self.w_in;
        let mut out = vec![T::zero(); batch * c_out * ncols];
        let mut cols = vec![T::zero(); rows * ncols];
        for n in 0..batch {
            let dst = &mut out[n * c_out * ncols..(n + 1) * c_out * ncols];
            if let Some(b) = bias {
                for (co, chunk) in dst.chunks_mut(ncols).enumerate() {
                    chunk.fill(b[co]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            if self.is_identity_unfold() {
                gemm(c_out, rows, ncols, w, false, &x[n * in_sz..(n + 1) * in_sz], false, beta, dst);
            } else {
                self.im2col(&x[n * in_sz..(n + 1) * in_sz], &mut cols);
                gemm(c_out, rows, ncols, w, false, &cols, false, beta, dst);
            }
        }
        out
    }

    /// Input-space map of the adjoint: `x[n] = col2im(Wᵀ · y[n])`.
    fn adjoint<T: Real>(&self, y: &[T], batch: usize, w: &[T], c_out: usize) -> Vec<T> {
        let (rows, ncols) = (self.col_rows(), self.col_cols());
        let in_sz = self.c_in * self.h_in * self.w_in;
        let mut out = vec![T::zero(); batch * in_sz];
        let mut cols = vec![T::zero(); rows * ncols];
        for n in 0..batch {
            let yn = &y[n * c_out * ncols..(n + 1) * c_out * ncols];
            if self.is_identity_unfold() {
                gemm(rows, c_out, ncols, w, true, yn, false, T::zero(), &mut out[n * in_sz..(n + 1) * in_sz]);
            } else {
                gemm(rows, c_out, ncols, w, true, yn, false, T::zero(), &mut cols);
                self.col2im(&cols, &mut out[n * in_sz..(n + 1) * in_sz]);
            }
        }
        out
    }

    /// `dW += Σ_n y[n] · im2col(x[n])ᵀ`, the kernel gradient for either direction.
    fn kernel_grad<T: Real>(&self, x: &[T], y: &[T], batch: usize, c_out: usize) -> Vec<T> {
        let (rows, ncols) = (self.col_rows(), self.col_cols());
        let in_sz = self.c_in * self.h_in * self.w_in;
        let mut dw = vec![T::zero(); c_out * rows];
        let mut cols = vec![T::zero(); rows * ncols];
        for n in 0..batch {
            let yn = &y[n * c_out * ncols..(n + 1) * c_out * ncols];
            let xn = &x[n * in_sz..(n + 1) * in_sz];
            if self.is_identity_unfold() {
                gemm(c_out, ncols, rows, yn, false, xn, true, T::one(), &mut dw);
            } else {
                self.im2col(xn, &mut cols);
                gemm(c_out, ncols, rows, yn, false, &cols, true, T::one(), &mut dw);
            }
        }
        dw
    }

    fn is_identity_unfold(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }
}

fn bias_grad<T: Real>(g: &[T], batch: usize, c: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for n in 0..batch {
        for (ci, d) in db.iter_mut().enumerate() {
            let off = (n * c + ci) * plane;
            *d += g[off..off + plane].iter().copied().sum::<T>();
        }
    }
    db
}

/// Accepts `[C,H,W]` or `[N,C,H,W]`; returns `(batch, c, h, w, batched)`.
fn split_image_shape(shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        _ => Err(invalid!("expected [C,H,W] or [N,C,H,W], got {shape:?}")),
    }
}

fn out_shape(batched: bool, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if batched {
        vec![n, c, h, w]
    } else {
        vec![c, h, w]
    }
}

fn check_bias<T: Real>(bias: Option<&Var<T>>, c: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [c] {
            return Err(invalid!("bias shape {:?} does not match {c} channels", b.shape()));
        }
    }
    Ok(())
}

/// Cross-correlation of `input` with `kernel` (`[C_out, C_in, k, k]`, k odd).
pub fn conv2d<T: Real>(input: &Var<T>, kernel: &Var<T>, bias: Option<&Var<T>>, stride: usize) -> Result<Var<T>> {
    let (batch, c_in, h, w, batched) = split_image_shape(input.shape())?;
    let &[c_out, kc_in, kh, kw] = kernel.shape() else {
        return Err(invalid!("kernel must be [C_out,C_in,k,k], got {:?}", kernel.shape()));
    };
    if kc_in != c_in || kh != kw {
        return Err(invalid!("kernel {:?} incompatible with input {:?}", kernel.shape(), input.shape()));
    }
    if kh % 2 == 0 {
        return Err(invalid!("conv2d kernel size must be odd, got {kh}"));
    }
    check_bias(bias, c_out)?;
    input.value().ensure_finite("conv2d")?;
    let geo = ConvGeometry::new(c_in, h, w, kh, stride)?;

    let x = input.value().clone();
    let wt = kernel.value().clone();
    let y = geo.forward(x.data(), batch, wt.data(), c_out, bias.map(|b| b.value().data()));
    let y = Tensor::from_parts(out_shape(batched, batch, c_out, geo.h_out, geo.w_out), y);

    let mut parents = vec![input.clone(), kernel.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    let (x_shape, w_shape) = (x.shape().to_vec(), wt.shape().to_vec());
    let (want_x, want_w) = (input.requires_grad(), kernel.requires_grad());
    Ok(Var::from_op(
        y,
        parents,
        Box::new(move |g| {
            let gd = g.data();
            let dx = want_x.then(|| Tensor::from_parts(x_shape.clone(), geo.adjoint(gd, batch, wt.data(), c_out)));
            let dw = want_w.then(|| Tensor::from_parts(w_shape.clone(), geo.kernel_grad(x.data(), gd, batch, c_out)));
            let mut out = vec![dx, dw];
            if has_bias {
                let db = bias_grad(gd, batch, c_out, geo.h_out * geo.w_out);
                out.push(Some(Tensor::from_parts(vec![c_out], db)));
            }
            Ok(out)
        }),
    ))
}

/// Transposed convolution; `kernel` is `[C_in, C_out, k, k]` and the output
/// is `stride` times the input extent. Equal to the input-gradient map of
/// [`conv2d`] with the same kernel.
pub fn conv_transpose2d<T: Real>(
    input: &Var<T>,
    kernel: &Var<T>,
    bias: Option<&Var<T>>,
    stride: usize,
) -> Result<Var<T>> {
    let (batch, c_in, h, w, batched) = split_image_shape(input.shape())?;
    let &[kc_in, c_out, kh, kw] = kernel.shape() else {
        return Err(invalid!("kernel must be [C_in,C_out,k,k], got {:?}", kernel.shape()));
    };
    if kc_in != c_in || kh != kw {
        return Err(invalid!("kernel {:?} incompatible with input {:?}", kernel.shape(), input.shape()));
    }
    check_bias(bias, c_out)?;
    input.value().ensure_finite("conv_transpose2d")?;
    // Geometry of the conv this op is the adjoint of.
    let geo = ConvGeometry::new(c_out, h * stride, w * stride, kh, stride)?;
    if geo.h_out != h || geo.w_out != w {
        return Err(invalid!("kernel {kh} with stride {stride} cannot invert extent {h}x{w}"));
    }

    let x = input.value().clone();
    let wt = kernel.value().clone();
    let mut y = geo.adjoint(x.data(), batch, wt.data(), c_in);
    if let Some(b) = bias {
        let plane = geo.h_in * geo.w_in;
        for (i, chunk) in y.chunks_mut(plane).enumerate() {
            let bv = b.value().data()[i % c_out];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    let y = Tensor::from_parts(out_shape(batched, batch, c_out, geo.h_in, geo.w_in), y);

    let mut parents = vec![input.clone(), kernel.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    let (x_shape, w_shape) = (x.shape().to_vec(), wt.shape().to_vec());
    let (want_x, want_w) = (input.requires_grad(), kernel.requires_grad());
    Ok(Var::from_op(
        y,
        parents,
        Box::new(move |g| {
            let gd = g.data();
            let dx = want_x.then(|| Tensor::from_parts(x_shape.clone(), geo.forward(gd, batch, wt.data(), c_in, None)));
            let dw = want_w.then(|| Tensor::from_parts(w_shape.clone(), geo.kernel_grad(gd, x.data(), batch, c_in)));
            let mut out = vec![dx, dw];
            if has_bias {
                let db = bias_grad(gd, batch, c_out, geo.h_in * geo.w_in);
                out.push(Some(Tensor::from_parts(vec![c_out], db)));
            }
            Ok(out)
        }),
    ))
}

//! 2-D convolution over NCHW tensors.
//!
//! Depthwise convolution is the grouped case `groups == in == out`; there is
//! no separate kernel for it. Two execution paths exist: a sequential
//! reference path and an im2col + GEMM path.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gemm::{self, StridedMat};
use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Matrix, Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvParams {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    /// Zero padding added on each side.
    pub padding: (usize, usize),
    pub groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_bias: bool,
}

impl ConvParams {
    /// Dense square-kernel convolution without bias.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        ConvParams {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            groups: 1,
            in_channels,
            out_channels,
            has_bias: false,
        }
    }

    /// 1x1, stride 1, no padding.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1, 1, 0)
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvParams {
            groups: channels,
            ..Self::new(channels, channels, kernel, stride, padding)
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(config_err(format!(
                "kernel {:?} and stride {:?} must be >= 1",
                self.kernel, self.stride
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(config_err("convolution channel counts must be >= 1"));
        }
        if self.groups == 0
            || !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(config_err(format!(
                "groups={} must divide in_channels={} and out_channels={}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }

    /// Grouped convolution that is not depthwise (`1 < groups < in_channels`).
    pub fn is_partially_grouped(&self) -> bool {
        self.groups > 1 && self.groups < self.in_channels
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// `(out, in/groups, kh, kw)`
    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_per_group(),
            self.kernel.0,
            self.kernel.1,
        )
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().numel()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out = |len: usize, k: usize, s: usize, p: usize, axis: &str| {
            let padded = len + 2 * p;
            if padded < k {
                return Err(dim_err(format!(
                    "axis {axis}: padded extent {padded} smaller than kernel {k}"
                )));
            }
            Ok((padded - k) / s + 1)
        };
        Ok((
            out(h, self.kernel.0, self.stride.0, self.padding.0, "h")?,
            out(w, self.kernel.1, self.stride.1, self.padding.1, "w")?,
        ))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.in_channels {
            return Err(dim_err(format!(
                "axis c: input has {} channels, convolution expects {}",
                input.c, self.in_channels
            )));
        }
        let (ho, wo) = self.output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, self.out_channels, ho, wo))
    }
}

fn check_operands<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    p: &ConvParams,
) -> Result<Shape> {
    let out = p.output_shape(input.shape())?;
    let ws = weights.shape();
    let expect = p.weight_shape();
    for (axis, got, want) in [
        ("out_channels", ws.n, expect.n),
        ("in_channels/groups", ws.c, expect.c),
        ("kernel h", ws.h, expect.h),
        ("kernel w", ws.w, expect.w),
    ] {
        if got != want {
            return Err(dim_err(format!(
                "weight axis {axis}: got {got}, expected {want}"
            )));
        }
    }
    if let Some(b) = bias {
        if b.len() != p.out_channels {
            return Err(dim_err(format!(
                "bias length {} != out_channels {}",
                b.len(),
                p.out_channels
            )));
        }
    }
    Ok(out)
}

/// Reference convolution: sequential loops with a fixed accumulation order
/// (bias, then input channel, kernel row, kernel column).
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    p: &ConvParams,
) -> Result<Tensor<T>> {
    let os = check_operands(input, weights, bias, p)?;
    let is = input.shape();
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let (icg, ocg) = (p.in_per_group(), p.out_per_group());
    let x = input.data();
    let wt = weights.data();
    let mut out = Vec::with_capacity(os.numel());
    for b in 0..is.n {
        for oc in 0..os.c {
            let g = oc / ocg;
            let init = bias.map_or(T::zero(), |bv| bv[oc]);
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = init;
                    for icl in 0..icg {
                        let ic = g * icg + icl;
                        for ky in 0..kh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= is.h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= is.w as isize {
                                    continue;
                                }
                                let xv = x[is.index(b, ic, iy as usize, ix as usize)];
                                let wv = wt[((oc * icg + icl) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(os, out)
}

/// Unfolds receptive fields into a `(in_ch*kh*kw) x (n*h_out*w_out)` matrix.
/// Row `(ic*kh + ky)*kw + kx`, column `(b*h_out + oy)*w_out + ox`; padded taps are zero.
pub fn im2col<T: Scalar>(input: &Tensor<T>, p: &ConvParams) -> Result<Matrix<T>> {
    let os = p.output_shape(input.shape())?;
    let is = input.shape();
    let (kh, kw) = p.kernel;
    let rows = is.c * kh * kw;
    let cols = is.n * os.h * os.w;
    let mut data = vec![T::zero(); rows * cols];
    data.par_chunks_mut(cols).enumerate().for_each(|(r, row)| {
        let kx = r % kw;
        let ky = (r / kw) % kh;
        let ic = r / (kw * kh);
        fill_im2col_row(input, p, os, ic, ky, kx, row);
    });
    Matrix::new(rows, cols, data)
}

fn fill_im2col_row<T: Scalar>(
    input: &Tensor<T>,
    p: &ConvParams,
    os: Shape,
    ic: usize,
    ky: usize,
    kx: usize,
    row: &mut [T],
) {
    let is = input.shape();
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let x = input.data();
    for b in 0..is.n {
        let plane = is.index(b, ic, 0, 0);
        for oy in 0..os.h {
            let dst = &mut row[(b * os.h + oy) * os.w..(b * os.h + oy + 1) * os.w];
            let iy = (oy * sh + ky) as isize - ph as isize;
            if iy < 0 || iy >= is.h as isize {
                continue;
            }
            let src = &x[plane + iy as usize * is.w..plane + (iy as usize + 1) * is.w];
            for (ox, d) in dst.iter_mut().enumerate() {
                let ix = (ox * sw + kx) as isize - pw as isize;
                if ix >= 0 && ix < is.w as isize {
                    *d = src[ix as usize];
                }
            }
        }
    }
}

/// Folds a column matrix back onto the input grid, summing overlapping taps.
pub fn col2im<T: Scalar>(
    cols: &Matrix<T>,
    input_shape: Shape,
    p: &ConvParams,
) -> Result<Tensor<T>> {
    let os = p.output_shape(input_shape)?;
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let is = input_shape;
    if cols.rows != is.c * kh * kw || cols.cols != is.n * os.h * os.w {
        return Err(dim_err(format!(
            "column matrix {}x{} does not match input {is} with kernel {kh}x{kw}",
            cols.rows, cols.cols
        )));
    }
    let mut out = Tensor::zeros(is);
    // Each (b, ic) plane is written by its own rows only.
    let plane_len = is.plane();
    out.data_mut()
        .par_chunks_mut(plane_len)
        .enumerate()
        .for_each(|(bc, plane)| {
            let b = bc / is.c;
            let ic = bc % is.c;
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = cols.row((ic * kh + ky) * kw + kx);
                    for oy in 0..os.h {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= is.h as isize {
                            continue;
                        }
                        let src = &row[(b * os.h + oy) * os.w..(b * os.h + oy + 1) * os.w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix >= 0 && ix < is.w as isize {
                                plane[iy as usize * is.w + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Optimized convolution: im2col followed by one GEMM per group.
pub fn conv2d_gemm<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    p: &ConvParams,
) -> Result<Tensor<T>> {
    let os = check_operands(input, weights, bias, p)?;
    let cols = if is_identity_unfold(p) {
        None
    } else {
        Some(im2col(input, p)?)
    };
    let n_cols = os.n * os.h * os.w;
    let kg = p.in_per_group() * p.kernel.0 * p.kernel.1;
    let ocg = p.out_per_group();
    let mut out_mat = vec![T::zero(); os.c * n_cols];
    let batch_major;
    let b_data: &[T] = match &cols {
        Some(m) => &m.data,
        None => {
            batch_major = channel_major(input);
            &batch_major
        }
    };
    let w = weights.data();
    if p.groups == 1 {
        gemm::gemm(
            os.c,
            n_cols,
            kg,
            StridedMat::row_major(w, kg),
            b_data,
            &mut out_mat,
        );
    } else {
        out_mat
            .par_chunks_mut(ocg * n_cols)
            .enumerate()
            .for_each(|(g, c)| {
                let a = &w[g * ocg * kg..(g + 1) * ocg * kg];
                let b = &b_data[g * kg * n_cols..(g + 1) * kg * n_cols];
                gemm::gemm_serial(ocg, n_cols, kg, StridedMat::row_major(a, kg), b, c);
            });
    }
    let mut out = Tensor::zeros(os);
    scatter_channel_major(&out_mat, &mut out, bias);
    Ok(out)
}

/// 1x1, stride 1, unpadded: im2col is the channel-major view of the input.
fn is_identity_unfold(p: &ConvParams) -> bool {
    p.kernel == (1, 1) && p.stride == (1, 1) && p.padding == (0, 0)
}

/// `(n, c, h, w)` -> `(c, n*h*w)` row-major.
fn channel_major<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let s = t.shape();
    if s.n == 1 {
        return t.data().to_vec();
    }
    let plane = s.plane();
    let mut out = vec![T::zero(); t.len()];
    for c in 0..s.c {
        for b in 0..s.n {
            out[(c * s.n + b) * plane..(c * s.n + b + 1) * plane].copy_from_slice(t.plane(b, c));
        }
    }
    out
}

/// Inverse of [`channel_major`], adding an optional per-channel bias.
fn scatter_channel_major<T: Scalar>(mat: &[T], out: &mut Tensor<T>, bias: Option<&[T]>) {
    let s = out.shape();
    let plane = s.plane();
    for b in 0..s.n {
        for c in 0..s.c {
            let src = &mat[(c * s.n + b) * plane..(c * s.n + b + 1) * plane];
            let dst = out.plane_mut(b, c);
            match bias {
                Some(bv) => {
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = bv[c] + v;
                    }
                }
                None => dst.copy_from_slice(src),
            }
        }
    }
}

/// Gradients of a convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

fn check_grad_shape<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: &ConvParams,
) -> Result<Shape> {
    let os = p.output_shape(input.shape())?;
    if grad_out.shape() != os {
        return Err(dim_err(format!(
            "grad_out shape {} != conv output shape {os}",
            grad_out.shape()
        )));
    }
    Ok(os)
}

fn bias_grad<T: Scalar>(grad_out: &Tensor<T>, p: &ConvParams) -> Option<Vec<T>> {
    if !p.has_bias {
        return None;
    }
    let s = grad_out.shape();
    Some(
        (0..s.c)
            .map(|c| {
                let mut acc = T::zero();
                for b in 0..s.n {
                    for &v in grad_out.plane(b, c) {
                        acc += v;
                    }
                }
                acc
            })
            .collect(),
    )
}

/// Reference backward pass: every output gradient is routed back through the
/// same taps the forward pass read.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: &ConvParams,
) -> Result<ConvGrads<T>> {
    check_operands(input, weights, None, p)?;
    let os = check_grad_shape(input, grad_out, p)?;
    let is = input.shape();
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let (icg, ocg) = (p.in_per_group(), p.out_per_group());
    let x = input.data();
    let wt = weights.data();
    let gy = grad_out.data();
    let mut gx = vec![T::zero(); is.numel()];
    let mut gw = vec![T::zero(); wt.len()];
    for b in 0..is.n {
        for oc in 0..os.c {
            let g = oc / ocg;
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let go = gy[os.index(b, oc, oy, ox)];
                    for icl in 0..icg {
                        let ic = g * icg + icl;
                        for ky in 0..kh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= is.h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= is.w as isize {
                                    continue;
                                }
                                let xi = is.index(b, ic, iy as usize, ix as usize);
                                let wi = ((oc * icg + icl) * kh + ky) * kw + kx;
                                gx[xi] += wt[wi] * go;
                                gw[wi] += x[xi] * go;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(is, gx)?,
        weights: Tensor::new(weights.shape(), gw)?,
        bias: bias_grad(grad_out, p),
    })
}

/// Backward pass on the GEMM path: `dW = dY * cols^T`, `dcols = W^T * dY`, then col2im.
pub fn conv2d_backward_gemm<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    p: &ConvParams,
) -> Result<ConvGrads<T>> {
    check_operands(input, weights, None, p)?;
    let os = check_grad_shape(input, grad_out, p)?;
    let is = input.shape();
    let identity = is_identity_unfold(p);
    let cols_data = if identity {
        channel_major(input)
    } else {
        im2col(input, p)?.data
    };
    let n_cols = os.n * os.h * os.w;
    let kg = p.in_per_group() * p.kernel.0 * p.kernel.1;
    let ocg = p.out_per_group();
    let dy = channel_major(grad_out);
    let w = weights.data();

    let mut gw = vec![T::zero(); w.len()];
    let mut dcols = vec![T::zero(); is.c * p.kernel.0 * p.kernel.1 * n_cols];
    if p.groups == 1 {
        gemm::gemm_nt(os.c, kg, n_cols, &dy, &cols_data, &mut gw);
        gemm::gemm(
            kg,
            n_cols,
            os.c,
            StridedMat::transposed(w, kg),
            &dy,
            &mut dcols,
        );
    } else {
        gw.par_chunks_mut(ocg * kg)
            .zip(dcols.par_chunks_mut(kg * n_cols))
            .enumerate()
            .for_each(|(g, (gw_g, dcols_g))| {
                let dy_g = &dy[g * ocg * n_cols..(g + 1) * ocg * n_cols];
                let cols_g = &cols_data[g * kg * n_cols..(g + 1) * kg * n_cols];
                let w_g = &w[g * ocg * kg..(g + 1) * ocg * kg];
                gemm::gemm_nt_serial(ocg, kg, n_cols, dy_g, cols_g, gw_g);
                gemm::gemm_serial(
                    kg,
                    n_cols,
                    ocg,
                    StridedMat::transposed(w_g, kg),
                    dy_g,
                    dcols_g,
                );
            });
    }
    let input_grad = if identity {
        let mut t = Tensor::zeros(is);
        scatter_channel_major(&dcols, &mut t, None);
        t
    } else {
        col2im(
            &Matrix::new(is.c * p.kernel.0 * p.kernel.1, n_cols, dcols)?,
            is,
            p,
        )?
    };
    Ok(ConvGrads {
        input: input_grad,
        weights: Tensor::new(weights.shape(), gw)?,
        bias: bias_grad(grad_out, p),
    })
}

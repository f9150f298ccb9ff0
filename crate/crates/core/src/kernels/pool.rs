use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolParams {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl PoolParams {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolParams {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(dim_err(format!(
                "pool kernel {:?} / stride {:?} must be >= 1",
                self.kernel, self.stride
            )));
        }
        // A window lying wholly inside the padding would have no valid cell.
        if ph >= kh || pw >= kw {
            return Err(dim_err(format!(
                "pool padding {:?} >= kernel {:?}: some windows fall entirely in padding",
                self.padding, self.kernel
            )));
        }
        if input.h + 2 * ph < kh || input.w + 2 * pw < kw {
            return Err(dim_err(format!(
                "pool window {:?} larger than padded input {input}",
                self.kernel
            )));
        }
        Ok(Shape::new(
            input.n,
            input.c,
            (input.h + 2 * ph - kh) / sh + 1,
            (input.w + 2 * pw - kw) / sw + 1,
        ))
    }

    /// Valid (unpadded) input range covered by output cell `(oy, ox)`.
    #[inline]
    fn window(&self, input: Shape, oy: usize, ox: usize) -> (usize, usize, usize, usize) {
        let y0 = (oy * self.stride.0) as isize - self.padding.0 as isize;
        let x0 = (ox * self.stride.1) as isize - self.padding.1 as isize;
        let y1 = (y0 + self.kernel.0 as isize).min(input.h as isize) as usize;
        let x1 = (x0 + self.kernel.1 as isize).min(input.w as isize) as usize;
        (y0.max(0) as usize, y1, x0.max(0) as usize, x1)
    }
}

/// Max pooling. Padded cells act as negative infinity, so they never win.
/// Returns the output and, per output element, the flat input index of the
/// winning cell (first maximum in row-major window order).
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, p: &PoolParams) -> Result<(Tensor<T>, Vec<usize>)> {
    let is = input.shape();
    let os = p.output_shape(is)?;
    let x = input.data();
    let mut out = Vec::with_capacity(os.numel());
    let mut arg = Vec::with_capacity(os.numel());
    for b in 0..is.n {
        for c in 0..is.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let (y0, y1, x0, x1) = p.window(is, oy, ox);
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let idx = is.index(b, c, iy, ix);
                            if best_idx == usize::MAX || x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_idx);
                }
            }
        }
    }
    Ok((Tensor::new(os, out)?, arg))
}

/// Routes each output gradient to the input cell that won the forward max.
pub fn maxpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: Shape,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(dim_err(format!(
            "argmax map has {} entries, grad_out {}",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut gx = Tensor::zeros(input_shape);
    let g = gx.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        g[idx] += v;
    }
    Ok(gx)
}

/// Average pooling; the divisor is the number of non-padded cells in each window.
pub fn avgpool2d<T: Scalar>(input: &Tensor<T>, p: &PoolParams) -> Result<Tensor<T>> {
    let is = input.shape();
    let os = p.output_shape(is)?;
    let x = input.data();
    let mut out = Vec::with_capacity(os.numel());
    for b in 0..is.n {
        for c in 0..is.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let (y0, y1, x0, x1) = p.window(is, oy, ox);
                    let mut acc = T::zero();
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            acc += x[is.index(b, c, iy, ix)];
                        }
                    }
                    out.push(acc / T::from_usize((y1 - y0) * (x1 - x0)).unwrap());
                }
            }
        }
    }
    Tensor::new(os, out)
}

pub fn avgpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: Shape,
    p: &PoolParams,
) -> Result<Tensor<T>> {
    let os = p.output_shape(input_shape)?;
    if grad_out.shape() != os {
        return Err(dim_err(format!(
            "grad_out shape {} != pool output {os}",
            grad_out.shape()
        )));
    }
    let mut gx = Tensor::zeros(input_shape);
    let is = input_shape;
    for b in 0..is.n {
        for c in 0..is.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let (y0, y1, x0, x1) = p.window(is, oy, ox);
                    let share =
                        grad_out.at(b, c, oy, ox) / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                    let g = gx.data_mut();
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            g[is.index(b, c, iy, ix)] += share;
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

/// Spatial mean per channel: `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let denom = T::from_usize(s.plane()).unwrap();
    let data = (0..s.n)
        .flat_map(|b| (0..s.c).map(move |c| (b, c)))
        .map(|(b, c)| {
            let mut acc = T::zero();
            for &v in input.plane(b, c) {
                acc += v;
            }
            acc / denom
        })
        .collect();
    Tensor::new(Shape::new(s.n, s.c, 1, 1), data).expect("valid pooled shape")
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: Shape,
) -> Result<Tensor<T>> {
    let gs = grad_out.shape();
    if gs != Shape::new(input_shape.n, input_shape.c, 1, 1) {
        return Err(dim_err(format!(
            "grad_out shape {gs} does not match pooled {input_shape}"
        )));
    }
    let denom = T::from_usize(input_shape.plane()).unwrap();
    let mut gx = Tensor::zeros(input_shape);
    for b in 0..gs.n {
        for c in 0..gs.c {
            let v = grad_out.data()[b * gs.c + c] / denom;
            gx.plane_mut(b, c).fill(v);
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq3x3() -> Tensor<f64> {
        Tensor::from_f64(
            Shape::new(1, 1, 3, 3),
            &[1., 2., 3., 4., 5., 6., 7., 8., 9.],
        )
        .unwrap()
    }

    #[test]
    fn max_of_window() {
        let (y, arg) = maxpool2d(&seq3x3(), &PoolParams::new(3, 1, 0)).unwrap();
        assert_eq!(y.data(), &[9.0]);
        assert_eq!(arg, vec![8]);
    }

    #[test]
    fn stride_two_halves_resolution() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 4, 32, 32));
        let (y, _) = maxpool2d(&x, &PoolParams::new(3, 2, 1)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 16, 16));
    }

    #[test]
    fn constant_input_and_negative_values_with_padding() {
        let x = Tensor::<f64>::full(Shape::new(1, 2, 5, 5), -3.5);
        let (y, _) = maxpool2d(&x, &PoolParams::new(3, 2, 1)).unwrap();
        // padding never wins even though every real value is negative
        assert!(y.data().iter().all(|&v| v == -3.5));
        assert!(avgpool2d(&x, &PoolParams::new(3, 2, 1))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == -3.5));
    }

    #[test]
    fn window_entirely_in_padding_is_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4));
        assert!(maxpool2d(&x, &PoolParams::new(3, 1, 3)).is_err());
    }

    #[test]
    fn global_average() {
        let x = Tensor::<f64>::from_f64(Shape::new(1, 1, 2, 2), &[1., 2., 3., 4.]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[2.5]);
        let one =
            Tensor::<f64>::from_f64(Shape::new(2, 3, 1, 1), &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(global_avg_pool(&one), one);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let (_, arg) = maxpool2d(&seq3x3(), &PoolParams::new(2, 1, 0)).unwrap();
        let g = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), 1.0);
        let gx = maxpool2d_backward(&g, &arg, Shape::new(1, 1, 3, 3)).unwrap();
        assert_eq!(gx.data(), &[0., 0., 0., 0., 1., 1., 0., 1., 1.]);
    }
}

use crate::error::{dim_err, Result};
use crate::kernels::gemm::dot;
use crate::tensor::{Matrix, Scalar, Shape, Tensor};

/// Affine classifier: `(n, c, 1, 1) x [c, classes] + bias -> (n, classes, 1, 1)`.
pub fn fully_connected<T: Scalar>(
    input: &Tensor<T>,
    weights: &Matrix<T>,
    bias: &[T],
) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.h != 1 || s.w != 1 {
        return Err(dim_err(format!(
            "fully-connected input must be 1x1 spatially, got {s}"
        )));
    }
    if weights.rows != s.c {
        return Err(dim_err(format!(
            "axis c: input has {} features, weight matrix has {} rows",
            s.c, weights.rows
        )));
    }
    if bias.len() != weights.cols {
        return Err(dim_err(format!(
            "bias length {} != {} classes",
            bias.len(),
            weights.cols
        )));
    }
    let k = weights.cols;
    let mut out = Vec::with_capacity(s.n * k);
    for b in 0..s.n {
        let x = &input.data()[b * s.c..(b + 1) * s.c];
        for (j, &b0) in bias.iter().enumerate() {
            let mut acc = b0;
            for (i, &xv) in x.iter().enumerate() {
                acc += xv * weights.get(i, j);
            }
            out.push(acc);
        }
    }
    Tensor::new(Shape::new(s.n, k, 1, 1), out)
}

pub struct FcGrads<T> {
    pub input: Tensor<T>,
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

pub fn fully_connected_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Matrix<T>,
    grad_out: &Tensor<T>,
) -> Result<FcGrads<T>> {
    let s = input.shape();
    let k = weights.cols;
    if grad_out.shape() != Shape::new(s.n, k, 1, 1) {
        return Err(dim_err(format!(
            "grad_out shape {} != ({}, {k}, 1, 1)",
            grad_out.shape(),
            s.n
        )));
    }
    let x = input.data();
    let gy = grad_out.data();
    let mut gx = vec![T::zero(); s.n * s.c];
    for b in 0..s.n {
        let g = &gy[b * k..(b + 1) * k];
        for i in 0..s.c {
            gx[b * s.c + i] = dot(weights.row(i), g);
        }
    }
    let mut gw = Matrix::zeros(s.c, k);
    for b in 0..s.n {
        let g = &gy[b * k..(b + 1) * k];
        for i in 0..s.c {
            let xv = x[b * s.c + i];
            for (d, &gv) in gw.data[i * k..(i + 1) * k].iter_mut().zip(g) {
                *d += xv * gv;
            }
        }
    }
    let mut gb = vec![T::zero(); k];
    for b in 0..s.n {
        for (d, &gv) in gb.iter_mut().zip(&gy[b * k..(b + 1) * k]) {
            *d += gv;
        }
    }
    Ok(FcGrads {
        input: Tensor::new(s, gx)?,
        weights: gw,
        bias: gb,
    })
}

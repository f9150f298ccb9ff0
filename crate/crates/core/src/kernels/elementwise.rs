//! Activation, residual add, and channel-wise merge/permutation ops.

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(dim_err(format!(
            "relu grad shape {} != input {}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data)
}

pub fn eltwise_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!(
            "eltwise operands differ: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::new(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect(),
    )
}

/// Concatenates along the channel axis, parts in argument order.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.len() < 2 {
        return Err(dim_err(format!(
            "concat needs at least 2 parts, got {}",
            parts.len()
        )));
    }
    let first = parts[0].shape();
    for (i, p) in parts.iter().enumerate().skip(1) {
        let s = p.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(dim_err(format!(
                "concat part {i} has shape {s}, incompatible with part 0 shape {first}"
            )));
        }
    }
    let channels: usize = parts.iter().map(|p| p.shape().c).sum();
    let out_shape = first.with_channels(channels);
    let mut data = Vec::with_capacity(out_shape.numel());
    for b in 0..first.n {
        for p in parts {
            let per = p.shape().per_sample();
            data.extend_from_slice(&p.data()[b * per..(b + 1) * per]);
        }
    }
    Tensor::new(out_shape, data)
}

/// Splits a channel-concatenated gradient back into parts of the given widths.
pub fn concat_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    part_channels: &[usize],
) -> Result<Vec<Tensor<T>>> {
    let s = grad_out.shape();
    if part_channels.iter().sum::<usize>() != s.c {
        return Err(dim_err(format!(
            "concat parts {part_channels:?} do not sum to {} channels",
            s.c
        )));
    }
    let mut start = 0;
    part_channels
        .iter()
        .map(|&len| {
            let t = channel_slice(grad_out, start, len);
            start += len;
            t
        })
        .collect()
}

/// Channels `start..start+len` of the input.
pub fn channel_slice<T: Scalar>(input: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if len == 0 || start + len > s.c {
        return Err(dim_err(format!(
            "channel slice {start}..{} out of range for {} channels",
            start + len,
            s.c
        )));
    }
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * len * plane);
    for b in 0..s.n {
        let from = s.index(b, start, 0, 0);
        data.extend_from_slice(&input.data()[from..from + len * plane]);
    }
    Tensor::new(s.with_channels(len), data)
}

pub fn channel_slice_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: Shape,
    start: usize,
) -> Result<Tensor<T>> {
    let gs = grad_out.shape();
    if gs.n != input_shape.n
        || gs.h != input_shape.h
        || gs.w != input_shape.w
        || start + gs.c > input_shape.c
    {
        return Err(dim_err(format!(
            "slice grad {gs} does not fit input {input_shape} at channel {start}"
        )));
    }
    let mut gx = Tensor::zeros(input_shape);
    let plane = gs.plane();
    for b in 0..gs.n {
        let to = input_shape.index(b, start, 0, 0);
        let from = gs.index(b, 0, 0, 0);
        gx.data_mut()[to..to + gs.c * plane]
            .copy_from_slice(&grad_out.data()[from..from + gs.c * plane]);
    }
    Ok(gx)
}

/// Source channel feeding output channel `i`: view channels as a `(g, c/g)`
/// grid, transpose, flatten.
#[inline]
pub fn shuffle_source(i: usize, channels: usize, groups: usize) -> usize {
    (i % groups) * (channels / groups) + i / groups
}

pub fn channel_shuffle<T: Scalar>(input: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if groups == 0 || !s.c.is_multiple_of(groups) {
        return Err(config_err(format!(
            "channel shuffle: {} channels not divisible by {groups} groups",
            s.c
        )));
    }
    let mut out = Tensor::zeros(s);
    for b in 0..s.n {
        for i in 0..s.c {
            let src = input.plane(b, shuffle_source(i, s.c, groups)).to_vec();
            out.plane_mut(b, i).copy_from_slice(&src);
        }
    }
    Ok(out)
}

/// Shuffling with `g` groups is undone by shuffling with `c/g` groups.
pub fn channel_shuffle_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    groups: usize,
) -> Result<Tensor<T>> {
    let c = grad_out.shape().c;
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(config_err(format!(
            "channel shuffle: {c} channels not divisible by {groups} groups"
        )));
    }
    channel_shuffle(grad_out, c / groups)
}

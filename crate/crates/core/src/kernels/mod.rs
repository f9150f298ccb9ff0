//! Numeric primitives: forward and backward for every layer kind, plus a
//! uniform dispatch ([`op_forward`] / [`op_backward`]) used by graph execution.

pub mod conv;
pub mod elementwise;
pub mod fc;
pub mod gemm;
pub mod norm;
pub mod pool;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use conv::{
    col2im, conv2d_backward, conv2d_backward_gemm, conv2d_forward, conv2d_gemm, im2col, ConvGrads,
    ConvParams,
};
pub use elementwise::{
    channel_shuffle, channel_shuffle_backward, channel_slice, channel_slice_backward,
    concat_backward, concat_channels, eltwise_add, relu, relu_backward,
};
pub use fc::{fully_connected, fully_connected_backward};
pub use norm::{
    batch_norm, batch_norm_backward, batch_norm_forward, batch_norm_infer, BnCache, BnParams, Mode,
};
pub use pool::{
    avgpool2d, avgpool2d_backward, global_avg_pool, global_avg_pool_backward, maxpool2d,
    maxpool2d_backward, PoolParams,
};

use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{Matrix, Scalar, Shape, Tensor};

/// Which convolution implementation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelPath {
    /// Sequential reference loops; bitwise deterministic.
    Naive,
    /// im2col + GEMM, parallel over output rows.
    #[default]
    Gemm,
}

impl FromStr for KernelPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(KernelPath::Naive),
            "gemm" => Ok(KernelPath::Gemm),
            other => Err(config_err(format!(
                "unknown kernel path {other:?} (expected naive|gemm)"
            ))),
        }
    }
}

impl fmt::Display for KernelPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelPath::Naive => "naive",
            KernelPath::Gemm => "gemm",
        })
    }
}

/// A layer operation together with its structural hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerOp {
    Conv(ConvParams),
    MaxPool(PoolParams),
    AvgPool(PoolParams),
    GlobalAvgPool,
    BatchNorm {
        channels: usize,
    },
    Relu,
    Eltwise,
    Concat,
    Shuffle {
        groups: usize,
    },
    /// Channel range selection (the split of a ShuffleNetV2 unit).
    ChannelSlice {
        start: usize,
        len: usize,
    },
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
}

/// Node-kind histogram key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    Conv,
    DepthwiseConv,
    MaxPool,
    AvgPool,
    GlobalAvgPool,
    BatchNorm,
    Relu,
    Eltwise,
    Concat,
    Shuffle,
    ChannelSlice,
    FullyConnected,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Conv,
        OpKind::DepthwiseConv,
        OpKind::MaxPool,
        OpKind::AvgPool,
        OpKind::GlobalAvgPool,
        OpKind::BatchNorm,
        OpKind::Relu,
        OpKind::Eltwise,
        OpKind::Concat,
        OpKind::Shuffle,
        OpKind::ChannelSlice,
        OpKind::FullyConnected,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Conv => "conv",
            OpKind::DepthwiseConv => "depthwise-conv",
            OpKind::MaxPool => "maxpool",
            OpKind::AvgPool => "avgpool",
            OpKind::GlobalAvgPool => "global-avg-pool",
            OpKind::BatchNorm => "batch-norm",
            OpKind::Relu => "relu",
            OpKind::Eltwise => "eltwise",
            OpKind::Concat => "concat",
            OpKind::Shuffle => "shuffle",
            OpKind::ChannelSlice => "channel-slice",
            OpKind::FullyConnected => "fully-connected",
        }
    }

    /// Convolutions and fully-connected layers.
    pub fn is_weighted(self) -> bool {
        matches!(
            self,
            OpKind::Conv | OpKind::DepthwiseConv | OpKind::FullyConnected
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| config_err(format!("unknown layer kind {s:?}")))
    }
}

impl LayerOp {
    pub fn kind(&self) -> OpKind {
        match self {
            LayerOp::Conv(p) if p.is_depthwise() => OpKind::DepthwiseConv,
            LayerOp::Conv(_) => OpKind::Conv,
            LayerOp::MaxPool(_) => OpKind::MaxPool,
            LayerOp::AvgPool(_) => OpKind::AvgPool,
            LayerOp::GlobalAvgPool => OpKind::GlobalAvgPool,
            LayerOp::BatchNorm { .. } => OpKind::BatchNorm,
            LayerOp::Relu => OpKind::Relu,
            LayerOp::Eltwise => OpKind::Eltwise,
            LayerOp::Concat => OpKind::Concat,
            LayerOp::Shuffle { .. } => OpKind::Shuffle,
            LayerOp::ChannelSlice { .. } => OpKind::ChannelSlice,
            LayerOp::FullyConnected { .. } => OpKind::FullyConnected,
        }
    }

    /// Number of inputs the op consumes; `None` for variadic (concat).
    pub fn arity(&self) -> Option<usize> {
        match self {
            LayerOp::Eltwise => Some(2),
            LayerOp::Concat => None,
            _ => Some(1),
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerOp::Conv(_) | LayerOp::BatchNorm { .. } | LayerOp::FullyConnected { .. }
        )
    }

    /// Output shape for the given input shapes.
    pub fn output_shape(&self, inputs: &[Shape]) -> Result<Shape> {
        if let Some(a) = self.arity() {
            if inputs.len() != a {
                return Err(dim_err(format!(
                    "{} expects {a} input(s), got {}",
                    self.kind(),
                    inputs.len()
                )));
            }
        }
        let first = inputs
            .first()
            .copied()
            .ok_or_else(|| dim_err("operation has no inputs"))?;
        match self {
            LayerOp::Conv(p) => p.output_shape(first),
            LayerOp::MaxPool(p) | LayerOp::AvgPool(p) => p.output_shape(first),
            LayerOp::GlobalAvgPool => Ok(Shape::new(first.n, first.c, 1, 1)),
            LayerOp::BatchNorm { channels } => {
                if first.c != *channels {
                    return Err(dim_err(format!(
                        "axis c: batch-norm over {channels} channels got {}",
                        first.c
                    )));
                }
                Ok(first)
            }
            LayerOp::Relu => Ok(first),
            LayerOp::Eltwise => {
                if inputs[0] != inputs[1] {
                    return Err(dim_err(format!(
                        "eltwise operands differ: {} vs {}",
                        inputs[0], inputs[1]
                    )));
                }
                Ok(first)
            }
            LayerOp::Concat => {
                if inputs.len() < 2 {
                    return Err(dim_err("concat needs at least 2 inputs"));
                }
                for s in &inputs[1..] {
                    if s.n != first.n || s.h != first.h || s.w != first.w {
                        return Err(dim_err(format!(
                            "concat inputs {first} and {s} differ outside the channel axis"
                        )));
                    }
                }
                Ok(first.with_channels(inputs.iter().map(|s| s.c).sum()))
            }
            LayerOp::Shuffle { groups } => {
                if *groups == 0 || first.c % groups != 0 {
                    return Err(config_err(format!(
                        "shuffle: {} channels not divisible by {groups}",
                        first.c
                    )));
                }
                Ok(first)
            }
            LayerOp::ChannelSlice { start, len } => {
                if *len == 0 || start + len > first.c {
                    return Err(dim_err(format!(
                        "channel slice {start}..{} exceeds {} channels",
                        start + len,
                        first.c
                    )));
                }
                Ok(first.with_channels(*len))
            }
            LayerOp::FullyConnected {
                in_features,
                out_features,
            } => {
                if first.h != 1 || first.w != 1 || first.c != *in_features {
                    return Err(dim_err(format!(
                        "fully-connected expects (n, {in_features}, 1, 1), got {first}"
                    )));
                }
                Ok(Shape::new(first.n, *out_features, 1, 1))
            }
        }
    }
}

/// Learnable state owned by a node.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams<T = f32> {
    Conv {
        weight: Tensor<T>,
        bias: Option<Vec<T>>,
    },
    Fc {
        weight: Matrix<T>,
        bias: Vec<T>,
    },
    Norm(BnParams<T>),
}

impl<T: Scalar> LayerParams<T> {
    /// Zero-filled slots for `op`; `None` for parameter-free ops.
    pub fn allocate(op: &LayerOp) -> Option<Self> {
        match op {
            LayerOp::Conv(p) => Some(LayerParams::Conv {
                weight: Tensor::zeros(p.weight_shape()),
                bias: p.has_bias.then(|| vec![T::zero(); p.out_channels]),
            }),
            LayerOp::FullyConnected {
                in_features,
                out_features,
            } => Some(LayerParams::Fc {
                weight: Matrix::zeros(*in_features, *out_features),
                bias: vec![T::zero(); *out_features],
            }),
            LayerOp::BatchNorm { channels } => Some(LayerParams::Norm(BnParams::new(*channels))),
            _ => None,
        }
    }

    /// Trainable tensors in a fixed order: (weight, bias) or (gamma, beta).
    pub fn trainable(&self) -> Vec<(&'static str, &[T])> {
        match self {
            LayerParams::Conv { weight, bias } => {
                let mut v = vec![("weight", weight.data())];
                if let Some(b) = bias {
                    v.push(("bias", b.as_slice()));
                }
                v
            }
            LayerParams::Fc { weight, bias } => vec![
                ("weight", weight.data.as_slice()),
                ("bias", bias.as_slice()),
            ],
            LayerParams::Norm(bn) => {
                vec![("gamma", bn.gamma.as_slice()), ("beta", bn.beta.as_slice())]
            }
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        match self {
            LayerParams::Conv { weight, bias } => {
                let mut v = vec![("weight", weight.data_mut())];
                if let Some(b) = bias {
                    v.push(("bias", b.as_mut_slice()));
                }
                v
            }
            LayerParams::Fc { weight, bias } => {
                vec![
                    ("weight", weight.data.as_mut_slice()),
                    ("bias", bias.as_mut_slice()),
                ]
            }
            LayerParams::Norm(bn) => vec![
                ("gamma", bn.gamma.as_mut_slice()),
                ("beta", bn.beta.as_mut_slice()),
            ],
        }
    }

    /// Every persisted tensor: trainables followed by running statistics.
    pub fn persisted(&self) -> Vec<(&'static str, &[T])> {
        let mut v = self.trainable();
        if let LayerParams::Norm(bn) = self {
            v.push(("running_mean", bn.running_mean.as_slice()));
            v.push(("running_var", bn.running_var.as_slice()));
        }
        v
    }

    pub fn persisted_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        match self {
            LayerParams::Norm(bn) => vec![
                ("gamma", bn.gamma.as_mut_slice()),
                ("beta", bn.beta.as_mut_slice()),
                ("running_mean", bn.running_mean.as_mut_slice()),
                ("running_var", bn.running_var.as_mut_slice()),
            ],
            other => other.trainable_mut(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        match self {
            LayerParams::Conv { weight, bias } => LayerParams::Conv {
                weight: weight.cast(),
                bias: bias.as_ref().map(|b| {
                    b.iter()
                        .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                        .collect()
                }),
            },
            LayerParams::Fc { weight, bias } => LayerParams::Fc {
                weight: weight.cast(),
                bias: bias
                    .iter()
                    .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                    .collect(),
            },
            LayerParams::Norm(bn) => LayerParams::Norm(bn.cast()),
        }
    }
}

/// Values a forward invocation keeps for its backward pass.
#[derive(Debug, Clone)]
pub enum OpContext<T> {
    Conv {
        input: Tensor<T>,
    },
    MaxPool {
        input_shape: Shape,
        argmax: Vec<usize>,
    },
    AvgPool {
        input_shape: Shape,
    },
    GlobalAvgPool {
        input_shape: Shape,
    },
    BatchNorm(BnCache<T>),
    Relu {
        input: Tensor<T>,
    },
    Eltwise,
    Concat {
        part_channels: Vec<usize>,
    },
    Shuffle,
    ChannelSlice {
        input_shape: Shape,
    },
    Fc {
        input: Tensor<T>,
    },
}

/// Gradients produced by [`op_backward`].
#[derive(Debug, Clone)]
pub struct OpGrads<T> {
    /// One gradient per forward input, in input order.
    pub inputs: Vec<Tensor<T>>,
    /// Aligned with [`LayerParams::trainable`]; empty for parameter-free ops.
    pub params: Vec<Vec<T>>,
}

fn missing_params(op: &LayerOp) -> Error {
    Error::State(format!("{} node has no parameters attached", op.kind()))
}

/// Runs one op. BatchNorm reads its mode from `mode` (and updates running
/// statistics in training mode). When `keep_context` is false no backward
/// context is retained.
pub fn op_forward<T: Scalar>(
    op: &LayerOp,
    inputs: &[&Tensor<T>],
    params: Option<&mut LayerParams<T>>,
    mode: Mode,
    path: KernelPath,
    keep_context: bool,
) -> Result<(Tensor<T>, Option<OpContext<T>>)> {
    let shapes: Vec<Shape> = inputs.iter().map(|t| t.shape()).collect();
    op.output_shape(&shapes)?;
    let x = inputs[0];
    let keep = |ctx: OpContext<T>| keep_context.then_some(ctx);
    Ok(match op {
        LayerOp::Conv(_) => {
            let Some(p) = params else {
                return Err(missing_params(op));
            };
            let y = weighted_forward(op, inputs, p, path)?;
            (
                y,
                keep_context.then(|| OpContext::Conv { input: x.clone() }),
            )
        }
        LayerOp::MaxPool(p) => {
            let (y, argmax) = maxpool2d(x, p)?;
            (
                y,
                keep(OpContext::MaxPool {
                    input_shape: x.shape(),
                    argmax,
                }),
            )
        }
        LayerOp::AvgPool(p) => (
            avgpool2d(x, p)?,
            keep(OpContext::AvgPool {
                input_shape: x.shape(),
            }),
        ),
        LayerOp::GlobalAvgPool => (
            global_avg_pool(x),
            keep(OpContext::GlobalAvgPool {
                input_shape: x.shape(),
            }),
        ),
        LayerOp::BatchNorm { .. } => {
            let Some(LayerParams::Norm(bn)) = params else {
                return Err(missing_params(op));
            };
            bn.mode = mode;
            let (y, cache) = batch_norm_forward(x, bn)?;
            (y, keep(OpContext::BatchNorm(cache)))
        }
        LayerOp::Relu => (
            relu(x),
            keep_context.then(|| OpContext::Relu { input: x.clone() }),
        ),
        LayerOp::Eltwise => (eltwise_add(inputs[0], inputs[1])?, keep(OpContext::Eltwise)),
        LayerOp::Concat => (
            concat_channels(inputs)?,
            keep(OpContext::Concat {
                part_channels: shapes.iter().map(|s| s.c).collect(),
            }),
        ),
        LayerOp::Shuffle { groups } => (channel_shuffle(x, *groups)?, keep(OpContext::Shuffle)),
        LayerOp::ChannelSlice { start, len } => (
            channel_slice(x, *start, *len)?,
            keep(OpContext::ChannelSlice {
                input_shape: x.shape(),
            }),
        ),
        LayerOp::FullyConnected { .. } => {
            let Some(p) = params else {
                return Err(missing_params(op));
            };
            let y = weighted_forward(op, inputs, p, path)?;
            (y, keep_context.then(|| OpContext::Fc { input: x.clone() }))
        }
    })
}

/// Inference-only execution: batch-norm uses running statistics and no
/// parameter is mutated, so one parameter set can serve concurrent callers.
pub fn op_infer<T: Scalar>(
    op: &LayerOp,
    inputs: &[&Tensor<T>],
    params: Option<&LayerParams<T>>,
    path: KernelPath,
) -> Result<Tensor<T>> {
    match op {
        LayerOp::BatchNorm { .. } => {
            let Some(LayerParams::Norm(bn)) = params else {
                return Err(missing_params(op));
            };
            let shapes: Vec<Shape> = inputs.iter().map(|t| t.shape()).collect();
            op.output_shape(&shapes)?;
            batch_norm_infer(inputs[0], bn)
        }
        LayerOp::Conv(_) | LayerOp::FullyConnected { .. } => {
            let Some(p) = params else {
                return Err(missing_params(op));
            };
            weighted_forward(op, inputs, p, path)
        }
        _ => op_forward(op, inputs, None, Mode::Inference, path, false).map(|(y, _)| y),
    }
}

fn weighted_forward<T: Scalar>(
    op: &LayerOp,
    inputs: &[&Tensor<T>],
    params: &LayerParams<T>,
    path: KernelPath,
) -> Result<Tensor<T>> {
    let shapes: Vec<Shape> = inputs.iter().map(|t| t.shape()).collect();
    op.output_shape(&shapes)?;
    match (op, params) {
        (LayerOp::Conv(p), LayerParams::Conv { weight, bias }) => match path {
            KernelPath::Naive => conv2d_forward(inputs[0], weight, bias.as_deref(), p),
            KernelPath::Gemm => conv2d_gemm(inputs[0], weight, bias.as_deref(), p),
        },
        (LayerOp::FullyConnected { .. }, LayerParams::Fc { weight, bias }) => {
            fully_connected(inputs[0], weight, bias)
        }
        _ => Err(missing_params(op)),
    }
}

fn missing_context(op: &LayerOp) -> Error {
    Error::State(format!(
        "no cached forward context for {} backward",
        op.kind()
    ))
}

/// Exact analytic gradients for one op invocation, given its cached context.
pub fn op_backward<T: Scalar>(
    op: &LayerOp,
    params: Option<&LayerParams<T>>,
    ctx: Option<&OpContext<T>>,
    grad_out: &Tensor<T>,
    path: KernelPath,
) -> Result<OpGrads<T>> {
    let ctx = ctx.ok_or_else(|| missing_context(op))?;
    let single = |g: Tensor<T>| OpGrads {
        inputs: vec![g],
        params: Vec::new(),
    };
    match (op, ctx) {
        (LayerOp::Conv(p), OpContext::Conv { input }) => {
            let Some(LayerParams::Conv { weight, .. }) = params else {
                return Err(missing_params(op));
            };
            let g = match path {
                KernelPath::Naive => conv2d_backward(input, weight, grad_out, p)?,
                KernelPath::Gemm => conv2d_backward_gemm(input, weight, grad_out, p)?,
            };
            let mut pg = vec![g.weights.into_data()];
            if let Some(b) = g.bias {
                pg.push(b);
            }
            Ok(OpGrads {
                inputs: vec![g.input],
                params: pg,
            })
        }
        (
            LayerOp::MaxPool(_),
            OpContext::MaxPool {
                input_shape,
                argmax,
            },
        ) => Ok(single(maxpool2d_backward(grad_out, argmax, *input_shape)?)),
        (LayerOp::AvgPool(p), OpContext::AvgPool { input_shape }) => {
            Ok(single(avgpool2d_backward(grad_out, *input_shape, p)?))
        }
        (LayerOp::GlobalAvgPool, OpContext::GlobalAvgPool { input_shape }) => {
            Ok(single(global_avg_pool_backward(grad_out, *input_shape)?))
        }
        (LayerOp::BatchNorm { .. }, OpContext::BatchNorm(cache)) => {
            let g = batch_norm_backward(cache, grad_out)?;
            Ok(OpGrads {
                inputs: vec![g.input],
                params: vec![g.gamma, g.beta],
            })
        }
        (LayerOp::Relu, OpContext::Relu { input }) => Ok(single(relu_backward(input, grad_out)?)),
        (LayerOp::Eltwise, OpContext::Eltwise) => Ok(OpGrads {
            inputs: vec![grad_out.clone(), grad_out.clone()],
            params: Vec::new(),
        }),
        (LayerOp::Concat, OpContext::Concat { part_channels }) => Ok(OpGrads {
            inputs: concat_backward(grad_out, part_channels)?,
            params: Vec::new(),
        }),
        (LayerOp::Shuffle { groups }, OpContext::Shuffle) => {
            Ok(single(channel_shuffle_backward(grad_out, *groups)?))
        }
        (LayerOp::ChannelSlice { start, .. }, OpContext::ChannelSlice { input_shape }) => Ok(
            single(channel_slice_backward(grad_out, *input_shape, *start)?),
        ),
        (LayerOp::FullyConnected { .. }, OpContext::Fc { input }) => {
            let Some(LayerParams::Fc { weight, .. }) = params else {
                return Err(missing_params(op));
            };
            let g = fully_connected_backward(input, weight, grad_out)?;
            Ok(OpGrads {
                inputs: vec![g.input],
                params: vec![g.weights.data, g.bias],
            })
        }
        _ => Err(Error::State(format!(
            "forward context does not belong to a {} node",
            op.kind()
        ))),
    }
}

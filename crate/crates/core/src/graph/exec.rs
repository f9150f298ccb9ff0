use std::time::{Duration, Instant};

use super::{ModelGraph, NodeKind};
use crate::error::{dim_err, Error, Result};
use crate::kernels::{op_backward, op_forward, op_infer, KernelPath, Mode, OpContext};
use crate::tensor::{Scalar, Tensor};

/// Saved backward state per node; `None` for nodes that keep nothing.
type Contexts<T> = Vec<Option<OpContext<T>>>;

/// Forward contexts kept for a backward pass.
#[derive(Debug)]
pub struct Trace<T> {
    contexts: Vec<Option<OpContext<T>>>,
    input_shape: crate::tensor::Shape,
}

/// Gradients of every trainable tensor (aligned with
/// [`crate::kernels::LayerParams::trainable`]) and of the graph input.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Vec<Option<Vec<Vec<T>>>>,
    pub input: Tensor<T>,
}

impl<T: Scalar> ModelGraph<T> {
    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if !self.initialized {
            return Err(Error::State(format!(
                "graph '{}' has uninitialized parameters",
                self.name
            )));
        }
        let (got, want) = (input.shape(), self.input_shape());
        if got.n == 0 || got.c != want.c || got.h != want.h || got.w != want.w {
            return Err(dim_err(format!(
                "input shape {got} does not match graph input {}x{}x{}",
                want.c, want.h, want.w
            )));
        }
        Ok(())
    }

    /// For each node, the index of the last node reading it.
    fn last_use(&self) -> Vec<usize> {
        let mut last: Vec<usize> = (0..self.nodes.len()).collect();
        for node in &self.nodes {
            for i in &node.inputs {
                last[i.0] = last[i.0].max(node.id.0);
            }
        }
        last
    }

    /// Forward pass; in training mode batch-norm uses batch statistics and
    /// updates its running statistics.
    pub fn forward(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
        path: KernelPath,
    ) -> Result<Tensor<T>> {
        self.run(input, mode, path, false).map(|(y, _)| y)
    }

    /// Forward pass that keeps what [`ModelGraph::backward`] needs.
    pub fn forward_with_trace(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
        path: KernelPath,
    ) -> Result<(Tensor<T>, Trace<T>)> {
        let (y, contexts) = self.run(input, mode, path, true)?;
        Ok((
            y,
            Trace {
                contexts,
                input_shape: input.shape(),
            },
        ))
    }

    fn run(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
        path: KernelPath,
        keep: bool,
    ) -> Result<(Tensor<T>, Contexts<T>)> {
        self.check_input(input)?;
        let last = self.last_use();
        let n = self.nodes.len();
        let mut acts: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut contexts = Vec::with_capacity(if keep { n } else { 0 });
        acts[0] = Some(input.clone());
        if keep {
            contexts.push(None);
        }
        for i in 1..n {
            let node = &self.nodes[i];
            let NodeKind::Op(op) = &node.kind else {
                unreachable!("validated graph")
            };
            let ins: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|j| acts[j.0].as_ref().expect("live input"))
                .collect();
            let (y, ctx) = op_forward(op, &ins, self.params[i].as_mut(), mode, path, keep)
                .map_err(|e| annotate(e, i, &node.name))?;
            acts[i] = Some(y);
            if keep {
                contexts.push(ctx);
            }
            for j in &node.inputs {
                if last[j.0] == i {
                    acts[j.0] = None;
                }
            }
        }
        Ok((acts[n - 1].take().expect("output"), contexts))
    }

    /// Inference with running statistics; takes `&self` so one model can be
    /// shared by concurrent callers.
    pub fn infer(&self, input: &Tensor<T>, path: KernelPath) -> Result<Tensor<T>> {
        self.infer_inner(input, path, None)
    }

    /// Inference that also records the wall time spent in each node.
    pub fn infer_timed(
        &self,
        input: &Tensor<T>,
        path: KernelPath,
    ) -> Result<(Tensor<T>, Vec<Duration>)> {
        let mut times = vec![Duration::ZERO; self.nodes.len()];
        let y = self.infer_inner(input, path, Some(&mut times))?;
        Ok((y, times))
    }

    fn infer_inner(
        &self,
        input: &Tensor<T>,
        path: KernelPath,
        mut times: Option<&mut Vec<Duration>>,
    ) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let last = self.last_use();
        let n = self.nodes.len();
        let mut acts: Vec<Option<Tensor<T>>> = vec![None; n];
        acts[0] = Some(input.clone());
        for i in 1..n {
            let node = &self.nodes[i];
            let NodeKind::Op(op) = &node.kind else {
                unreachable!("validated graph")
            };
            let start = Instant::now();
            let y = {
                let ins: Vec<&Tensor<T>> = node
                    .inputs
                    .iter()
                    .map(|j| acts[j.0].as_ref().expect("live input"))
                    .collect();
                op_infer(op, &ins, self.params[i].as_ref(), path)
                    .map_err(|e| annotate(e, i, &node.name))?
            };
            acts[i] = Some(y);
            for j in &node.inputs {
                if last[j.0] == i {
                    acts[j.0] = None;
                }
            }
            if let Some(t) = times.as_deref_mut() {
                t[i] = start.elapsed();
            }
        }
        Ok(acts[n - 1].take().expect("output"))
    }

    /// Reverse pass over a trace, accumulating gradients where a tensor fans out.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad_out: &Tensor<T>,
        path: KernelPath,
    ) -> Result<Gradients<T>> {
        let n = self.nodes.len();
        if trace.contexts.len() != n {
            return Err(Error::State(
                "trace was recorded on a different graph".into(),
            ));
        }
        let out_shape = self.output_shape().with_batch(trace.input_shape.n);
        if grad_out.shape() != out_shape {
            return Err(dim_err(format!(
                "output gradient shape {} != output shape {out_shape}",
                grad_out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[n - 1] = Some(grad_out.clone());
        let mut params: Vec<Option<Vec<Vec<T>>>> = vec![None; n];
        for i in (1..n).rev() {
            let node = &self.nodes[i];
            let NodeKind::Op(op) = &node.kind else {
                unreachable!("validated graph")
            };
            let Some(g) = grads[i].take() else {
                return Err(Error::State(format!(
                    "node {} ({}) received no gradient",
                    node.id, node.name
                )));
            };
            let og = op_backward(
                op,
                self.params[i].as_ref(),
                trace.contexts[i].as_ref(),
                &g,
                path,
            )
            .map_err(|e| annotate(e, i, &node.name))?;
            for (src, gi) in node.inputs.iter().zip(og.inputs) {
                match &mut grads[src.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(gi),
                }
            }
            if self.params[i].is_some() {
                params[i] = Some(og.params);
            }
        }
        let input = grads[0]
            .take()
            .ok_or_else(|| Error::State("input received no gradient".into()))?;
        Ok(Gradients { params, input })
    }
}

fn annotate(e: Error, id: usize, name: &str) -> Error {
    match e {
        Error::Dimension(m) => Error::Dimension(format!("node #{id} ({name}): {m}")),
        Error::State(m) => Error::State(format!("node #{id} ({name}): {m}")),
        Error::Numeric(m) => Error::Numeric(format!("node #{id} ({name}): {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use crate::blocks::{make_lmb_s1, LmbConfig};
    use crate::graph::ModelGraph;
    use crate::kernels::{KernelPath, Mode};
    use crate::tensor::{Shape, Tensor};
    use crate::Error;

    #[test]
    fn uninitialized_forward_is_state_error() {
        let frag = make_lmb_s1(&LmbConfig::new(4, 1)).unwrap();
        let mut g = ModelGraph::from_fragment(&frag, Shape::new(1, 4, 5, 5)).unwrap();
        let x = Tensor::zeros(Shape::new(2, 4, 5, 5));
        assert!(matches!(
            g.forward(&x, Mode::Inference, KernelPath::Gemm),
            Err(Error::State(_))
        ));
        g.initialize(1);
        let y = g.forward(&x, Mode::Training, KernelPath::Gemm).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 4, 5, 5));
        assert!(g.infer(&x, KernelPath::Naive).is_ok());
        let bad = Tensor::zeros(Shape::new(2, 3, 5, 5));
        assert!(matches!(
            g.infer(&bad, KernelPath::Gemm),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn residual_fanout_accumulates() {
        let frag = make_lmb_s1(&LmbConfig::new(2, 1)).unwrap();
        let mut g = ModelGraph::from_fragment(&frag, Shape::new(1, 2, 3, 3))
            .unwrap()
            .cast::<f64>();
        g.initialize(3);
        let x = Tensor::<f64>::from_fn(Shape::new(2, 2, 3, 3), |n, c, h, w| {
            ((n + 2 * c + 3 * h + 5 * w) % 7) as f64 * 0.3 - 1.0
        });
        let (y, trace) = g
            .forward_with_trace(&x, Mode::Inference, KernelPath::Naive)
            .unwrap();
        let grads = g
            .backward(&trace, &Tensor::full(y.shape(), 1.0), KernelPath::Naive)
            .unwrap();
        assert_eq!(grads.input.shape(), x.shape());
        assert!(grads.params.iter().filter(|p| p.is_some()).count() > 0);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::graph::{Gradients, ModelGraph};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_epochs: usize,
    pub drop_epochs: Vec<usize>,
    pub drop_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 64,
            total_epochs: 320,
            drop_epochs: vec![150, 225],
            drop_factor: 10.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(config_err(format!(
                "lr0 must be finite and non-negative, got {}",
                self.lr0
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(config_err(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch size must be >= 1"));
        }
        if self.drop_factor.is_nan() || self.drop_factor < 1.0 {
            return Err(config_err(format!(
                "drop factor must be >= 1, got {}",
                self.drop_factor
            )));
        }
        let increasing = self.drop_epochs.windows(2).all(|w| w[0] < w[1]);
        if !increasing
            || self
                .drop_epochs
                .last()
                .is_some_and(|&e| e >= self.total_epochs)
        {
            return Err(config_err(
                "drop epochs must be strictly increasing and below total_epochs",
            ));
        }
        Ok(())
    }
}

/// Step schedule: `lr0 / drop_factor^(number of drop epochs <= e)`.
pub fn lr_at_epoch(e: usize, cfg: &OptimConfig) -> Result<f64> {
    if e >= cfg.total_epochs {
        return Err(config_err(format!(
            "epoch {e} outside [0, {})",
            cfg.total_epochs
        )));
    }
    let drops = cfg.drop_epochs.iter().filter(|&&d| d <= e).count();
    Ok(cfg.lr0 / cfg.drop_factor.powi(drops as i32))
}

/// Velocity buffers mirroring every trainable tensor of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub velocity: Vec<Option<Vec<Vec<T>>>>,
    pub epoch: usize,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(graph: &ModelGraph<T>) -> Self {
        let mut velocity = vec![None; graph.nodes().len()];
        for (id, p) in graph.param_entries() {
            velocity[id.0] = Some(
                p.trainable()
                    .iter()
                    .map(|(_, v)| vec![T::zero(); v.len()])
                    .collect(),
            );
        }
        OptimState { velocity, epoch: 0 }
    }
}

/// One tensor of the Nesterov update: with `g' = g + wd*theta`,
/// `v <- mu*v + g'` then `theta <- theta - lr*(g' + mu*v)`.
pub fn nag_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, mu, wd) = (
        T::from_f64_lossy(lr),
        T::from_f64_lossy(momentum),
        T::from_f64_lossy(weight_decay),
    );
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + wd * *t;
        *v = mu * *v + g;
        *t -= lr * (g + mu * *v);
    }
}

/// Applies [`nag_update`] to every trainable tensor (weights, biases and
/// norm affine parameters alike).
pub fn nag_step<T: Scalar>(
    graph: &mut ModelGraph<T>,
    grads: &Gradients<T>,
    state: &mut OptimState<T>,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<()> {
    let mismatch =
        |what: String| Error::State(format!("optimizer state does not match the graph: {what}"));
    if grads.params.len() != state.velocity.len() {
        return Err(mismatch(format!(
            "{} gradient slots, {} velocity slots",
            grads.params.len(),
            state.velocity.len()
        )));
    }
    for (id, params) in graph.param_entries_mut() {
        let (Some(g), Some(v)) = (&grads.params[id.0], &mut state.velocity[id.0]) else {
            return Err(mismatch(format!("node {id} lacks a gradient or velocity")));
        };
        let mut tensors = params.trainable_mut();
        if tensors.len() != g.len() || tensors.len() != v.len() {
            return Err(mismatch(format!("node {id} tensor count")));
        }
        for (((_, theta), g), v) in tensors.iter_mut().zip(g).zip(v.iter_mut()) {
            if theta.len() != g.len() || theta.len() != v.len() {
                return Err(mismatch(format!("node {id} tensor length")));
            }
            nag_update(theta, g, v, lr, cfg.momentum, cfg.weight_decay);
        }
    }
    Ok(())
}

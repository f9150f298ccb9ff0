//! Per-channel batch normalization.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_STAT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    /// Weight of the old running value: `running <- m*running + (1-m)*batch`.
    pub stat_momentum: f64,
    pub mode: Mode,
}

impl<T: Scalar> BnParams<T> {
    /// Unit scale, zero shift, running statistics of a standard normal.
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: DEFAULT_EPSILON,
            stat_momentum: DEFAULT_STAT_MOMENTUM,
            mode: Mode::Training,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(dim_err("batch-norm parameter vectors differ in length"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("batch-norm epsilon must be positive".into()));
        }
        if self.running_var.iter().any(|&v| v < T::zero()) {
            return Err(Error::Numeric("negative running variance".into()));
        }
        if !(self.stat_momentum > 0.0 && self.stat_momentum < 1.0) {
            return Err(Error::Config(
                "batch-norm stat_momentum must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> BnParams<U> {
        let conv = |v: &[T]| {
            v.iter()
                .map(|&x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect()
        };
        BnParams {
            gamma: conv(&self.gamma),
            beta: conv(&self.beta),
            running_mean: conv(&self.running_mean),
            running_var: conv(&self.running_var),
            epsilon: self.epsilon,
            stat_momentum: self.stat_momentum,
            mode: self.mode,
        }
    }
}

/// Values retained from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub gamma: Vec<T>,
    pub mode: Mode,
}

pub fn batch_norm<T: Scalar>(input: &Tensor<T>, bn: &mut BnParams<T>) -> Result<Tensor<T>> {
    batch_norm_forward(input, bn).map(|(y, _)| y)
}

/// Training mode normalizes with the batch statistics over `(n, h, w)` and
/// folds them into the running statistics (unbiased variance); inference mode
/// uses the running statistics.
pub fn batch_norm_forward<T: Scalar>(
    input: &Tensor<T>,
    bn: &mut BnParams<T>,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let s = input.shape();
    bn.validate()?;
    if bn.channels() != s.c {
        return Err(dim_err(format!(
            "axis c: input has {} channels, batch-norm has {}",
            s.c,
            bn.channels()
        )));
    }
    let count = s.n * s.plane();
    let (mean, inv_std): (Vec<T>, Vec<T>) = match bn.mode {
        Mode::Training => {
            if count < 2 {
                return Err(dim_err(format!(
                    "training-mode batch-norm needs n*h*w >= 2, got {count}"
                )));
            }
            let mut means = Vec::with_capacity(s.c);
            let mut inv = Vec::with_capacity(s.c);
            let keep = T::from_f64_lossy(bn.stat_momentum);
            let m = T::from_f64_lossy(1.0 - bn.stat_momentum);
            for c in 0..s.c {
                let mut sum = 0.0f64;
                for b in 0..s.n {
                    for &v in input.plane(b, c) {
                        sum += v.to_f64_lossy();
                    }
                }
                let mean = sum / count as f64;
                let mut sq = 0.0f64;
                for b in 0..s.n {
                    for &v in input.plane(b, c) {
                        let d = v.to_f64_lossy() - mean;
                        sq += d * d;
                    }
                }
                let var = sq / count as f64;
                let unbiased = sq / (count - 1) as f64;
                bn.running_mean[c] = keep * bn.running_mean[c] + m * T::from_f64_lossy(mean);
                bn.running_var[c] = keep * bn.running_var[c] + m * T::from_f64_lossy(unbiased);
                means.push(T::from_f64_lossy(mean));
                inv.push(T::from_f64_lossy(1.0 / (var + bn.epsilon).sqrt()));
            }
            (means, inv)
        }
        Mode::Inference => (
            bn.running_mean.clone(),
            bn.running_var
                .iter()
                .map(|&v| T::one() / (v + T::from_f64_lossy(bn.epsilon)).sqrt())
                .collect(),
        ),
    };
    let (out, normalized) = apply_affine(input, &mean, &inv_std, &bn.gamma, &bn.beta);
    let cache = BnCache {
        normalized,
        inv_std,
        gamma: bn.gamma.clone(),
        mode: bn.mode,
    };
    Ok((out, cache))
}

/// Inference-mode normalization with the running statistics; never mutates.
pub fn batch_norm_infer<T: Scalar>(input: &Tensor<T>, bn: &BnParams<T>) -> Result<Tensor<T>> {
    bn.validate()?;
    let s = input.shape();
    if bn.channels() != s.c {
        return Err(dim_err(format!(
            "axis c: input has {} channels, batch-norm has {}",
            s.c,
            bn.channels()
        )));
    }
    let inv_std: Vec<T> = bn
        .running_var
        .iter()
        .map(|&v| T::one() / (v + T::from_f64_lossy(bn.epsilon)).sqrt())
        .collect();
    Ok(apply_affine(input, &bn.running_mean, &inv_std, &bn.gamma, &bn.beta).0)
}

/// Returns `(gamma*xhat + beta, xhat)` with `xhat = (x - mean)*inv_std`.
fn apply_affine<T: Scalar>(
    input: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, Tensor<T>) {
    let s = input.shape();
    let mut normalized = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for b in 0..s.n {
        for c in 0..s.c {
            let (mu, is, g, be) = (mean[c], inv_std[c], gamma[c], beta[c]);
            let src = input.plane(b, c);
            let xh = normalized.plane_mut(b, c);
            let y = out.plane_mut(b, c);
            for i in 0..src.len() {
                xh[i] = (src[i] - mu) * is;
                y[i] = g * xh[i] + be;
            }
        }
    }
    (out, normalized)
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward pass. In training mode the batch mean and variance depend on the
/// input, giving `dx = g*inv_std/m * (m*dy - sum(dy) - xhat*sum(dy*xhat))`.
pub fn batch_norm_backward<T: Scalar>(
    cache: &BnCache<T>,
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let s = grad_out.shape();
    if s != cache.normalized.shape() {
        return Err(dim_err(format!(
            "grad_out shape {s} != cached shape {}",
            cache.normalized.shape()
        )));
    }
    let count = T::from_usize(s.n * s.plane()).unwrap();
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        for b in 0..s.n {
            for (&dy, &xh) in grad_out
                .plane(b, c)
                .iter()
                .zip(cache.normalized.plane(b, c))
            {
                dbeta[c] += dy;
                dgamma[c] += dy * xh;
            }
        }
    }
    let mut gx = Tensor::zeros(s);
    for b in 0..s.n {
        for c in 0..s.c {
            let scale = cache.gamma[c] * cache.inv_std[c];
            let xh = cache.normalized.plane(b, c);
            let dy = grad_out.plane(b, c);
            let dst = gx.plane_mut(b, c);
            match cache.mode {
                Mode::Training => {
                    for i in 0..dst.len() {
                        dst[i] = scale / count * (count * dy[i] - dbeta[c] - xh[i] * dgamma[c]);
                    }
                }
                Mode::Inference => {
                    for i in 0..dst.len() {
                        dst[i] = scale * dy[i];
                    }
                }
            }
        }
    }
    Ok(BnGrads {
        input: gx,
        gamma: dgamma,
        beta: dbeta,
    })
}

//! Parameter initialization.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::kernels::ConvParams;
use crate::tensor::{Scalar, Shape, Tensor};

/// Half-width of the Xavier-uniform interval.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Uniform samples in `±sqrt(6 / (fan_in + fan_out))`, deterministic per seed.
pub fn xavier_init<T: Scalar>(shape: Shape, fan_in: usize, fan_out: usize, seed: u64) -> Tensor<T> {
    let bound = xavier_bound(fan_in.max(1), fan_out.max(1));
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel())
        .map(|_| T::from_f64_lossy(dist.sample(&mut rng)))
        .collect();
    Tensor::new(shape, data).expect("sample count matches shape")
}

/// Xavier init for a conv weight: fans are `kh*kw*in/groups` and `kh*kw*out/groups`.
pub fn xavier_init_conv<T: Scalar>(p: &ConvParams, seed: u64) -> Tensor<T> {
    let taps = p.kernel.0 * p.kernel.1;
    xavier_init(
        p.weight_shape(),
        taps * p.in_per_group(),
        taps * p.out_per_group(),
        seed,
    )
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::ParamTensor;

/// Half-width of the Glorot uniform interval.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform tensor drawn from `rng`.
pub fn xavier_uniform<R: Rng + ?Sized>(
    name: impl Into<String>,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> ParamTensor {
    assert!(fan_in > 0 && fan_out > 0, "fans must be positive");
    let bound = xavier_bound(fan_in, fan_out);
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    ParamTensor::from_values(name, shape, values).expect("length matches shape")
}

/// Glorot-uniform tensor from its own seeded generator.
pub fn xavier_init(name: impl Into<String>, shape: &[usize], fan_in: usize, fan_out: usize, seed: u64) -> ParamTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    xavier_uniform(name, shape, fan_in, fan_out, &mut rng)
}

//! Deterministic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use turnkit::nnkit::{ParameterSet, Tensor};
use turnkit::{Model, ModelConfig};

/// Row-normalised `t x classes` log-probabilities.
pub fn log_probs(t: usize, classes: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(t * classes);
    for _ in 0..t {
        let row: Vec<f64> = (0..classes).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        data.extend(row.into_iter().map(|x| x - lse));
    }
    Tensor::matrix(t, classes, data)
}

/// A target of `len` labels in `1..classes` without a forced repeat.
pub fn target(len: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(1..classes)).collect()
}

pub fn features(t: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(t, dim, (0..t * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// The default engine with freshly initialised parameters.
pub fn engine(seed: u64) -> (Model, ParameterSet) {
    let model = Model::new(ModelConfig::default()).expect("default config is valid");
    let params = model.init_params(seed).expect("init");
    (model, params)
}

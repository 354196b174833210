#![allow(dead_code)]

pub mod reference;

use lpx_core::cnn::{init_params, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded parameters with non-zero biases, so every code path carries signal.
pub fn random_params(dim: usize, seed: u64) -> ModelParams<f32> {
    let mut p = init_params(dim, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for t in [&mut p.conv1_b, &mut p.conv2_b, &mut p.fc_b, &mut p.out_b] {
        for v in &mut t.data {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    p
}

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use lpx_core::linegen::generate_dataset;
use lpx_core::trainer::{train_model, TrainConfig};
use lpx_core::Dataset;

/// A converged model for `(dim, step)` with the default hyperparameters,
/// trained once per test binary.
pub fn trained(dim: usize, step: f64, seed: u64) -> (Dataset, ModelParams<f32>) {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64, u64), (Dataset, ModelParams<f32>)>>> = OnceLock::new();
    let key = (dim, step.to_bits(), seed);
    let mut cache = CACHE.get_or_init(Default::default).lock().unwrap();
    cache
        .entry(key)
        .or_insert_with(|| {
            let ds = generate_dataset(dim, step).unwrap();
            let run = train_model(&ds, &TrainConfig { seed, ..TrainConfig::default() }).unwrap();
            assert!(run.converged, "D={dim} step={step} seed={seed} did not converge");
            (ds, run.params)
        })
        .clone()
}

//! Fixtures shared by the benchmarks.

use ostlab::pipeline::{generate_calibration, RunConfig};
use ostlab::toy_model::{OstParams, ToyConfig, ToyModel};
use ostlab::{Rng, Tensor};

/// A random symmetric positive definite matrix with eigenvalues spread over
/// two decades.
pub fn random_spd(d: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let q = ostlab::transforms::random_orthogonal(d, &mut rng);
    let l: Vec<f64> = (0..d)
        .map(|i| 10f64.powf(2.0 * i as f64 / d.max(2) as f64 - 1.0))
        .collect();
    q.scale_columns(&l).matmul_t(&q).sym()
}

/// `n` Gaussian rows in `d` dimensions.
pub fn gaussian_rows(n: usize, d: usize, seed: u64) -> Tensor {
    Tensor::matrix(n, d, Rng::new(seed).normal_vec(n * d))
}

/// The default toy model, a random transform for it and one calibration
/// sequence.
pub struct ModelFixture {
    pub model: ToyModel,
    pub ost: OstParams,
    pub tokens: Vec<usize>,
}

impl ModelFixture {
    pub fn new(seed: u64) -> Self {
        let cfg = ToyConfig::default();
        let rng = Rng::new(seed);
        let model = ToyModel::init(&cfg, &rng.split(1))
            .expect("default config is valid")
            .fold_rmsnorm();
        let ost = OstParams::random(&cfg, &mut rng.split(2), 0.3);
        let run = RunConfig {
            seed,
            samples: 1,
            eval_samples: 1,
            ..RunConfig::default()
        };
        let (train, _) = generate_calibration(&run, &rng).expect("default config is valid");
        ModelFixture {
            model,
            ost,
            tokens: train[0].clone(),
        }
    }
}

//! Shared fixtures for the engine benchmarks.

use dael_core::dataset::{generate_synthetic, DomainDataset, SynthSpec};
use dael_core::model::{Arch, ModelParams};
use dael_core::rng::Stream;
use dael_core::tensor::Tensor;

/// Default-architecture parameters with K experts over C classes.
pub fn bench_params(k: usize, c: usize) -> ModelParams<f32> {
    ModelParams::init(Arch::default(), k, c, 7).expect("valid arch")
}

/// A random `[n, 3, 32, 32]` batch in `[0, 1]`.
pub fn bench_batch(n: usize, seed: u64) -> Tensor<f32> {
    let mut s = Stream::seed(seed);
    Tensor::from_vec(
        vec![n, 3, 32, 32],
        (0..n * 3 * 32 * 32).map(|_| s.next_f32()).collect(),
    )
}

/// A small synthetic benchmark dataset (one domain's train split).
pub fn bench_dataset() -> DomainDataset {
    let spec = SynthSpec {
        train_per_domain: 64,
        test_per_domain: 16,
        seed: 3,
        ..SynthSpec::default()
    };
    generate_synthetic(&spec).expect("valid spec").remove(0).0
}

//! Shared fixtures for the benchmarks.

use ccl_core::models::{train_supervised, Architecture, Classifier, TrainConfig};
use ccl_core::sampler::sample_us;
use ccl_core::synthgen::{build_world, generate_session, SessionSpec};
use ccl_core::{ClassId, Dataset, PredictionDistribution, PseudoSample};

/// `n` pseudo-samples on the `d`-simplex with one-hot targets cycling over
/// `c` classes.
pub fn pseudo_stream(n: usize, d: usize, c: usize, seed: u64) -> Vec<PseudoSample> {
    sample_us(n, d, seed)
        .expect("valid sampling parameters")
        .into_iter()
        .enumerate()
        .map(|(i, x)| PseudoSample {
            x,
            soft: PredictionDistribution::one_hot(ClassId(i % c), c).expect("class in range"),
        })
        .collect()
}

/// A supervised teacher over a fresh synthetic world, with its training set.
pub fn teacher(classes: usize, hidden: usize, seed: u64) -> (Classifier, Dataset) {
    let world = build_world(classes, classes, 60.0, seed).expect("valid world");
    let data = generate_session(&world, &SessionSpec::all_classes(&world, 0, 0.1, 10, seed)).expect("valid session");
    let cfg = TrainConfig {
        epochs: 30,
        seed,
        ..TrainConfig::default()
    };
    let model = train_supervised(&data, Architecture::new(classes, hidden, classes), &cfg).expect("trainable");
    (model, data)
}

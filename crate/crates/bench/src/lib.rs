//! Shared fixtures for the benchmark targets.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recall_core::dataset::{FeatureVector, LearnerSequence, SequenceStep};

/// A reproducible sequence with realistic feature ranges.
pub fn bench_sequence(steps: usize, n_features: usize, seed: u64) -> LearnerSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ts = 0i64;
    LearnerSequence {
        learner_id: format!("bench{seed}"),
        steps: (0..steps)
            .map(|_| {
                ts += rng.random_range(30_000..400_000);
                let delta: f64 = rng.random_range(0.0..8.0);
                let mut features: Vec<f64> = (0..n_features)
                    .map(|_| rng.random_range(0.0..1.5))
                    .collect();
                features[0] = delta.ln_1p();
                SequenceStep {
                    features: FeatureVector::new(features),
                    outcome: rng.random_range(0.0..1.0),
                    timestamp: ts,
                    delta_days: delta,
                }
            })
            .collect(),
    }
}

//! Synthetic corpora with known ground truth, used as recovery oracles.

use super::{features_from_counters, DatasetError, LearnerSequence, SequenceStep, SECONDS_PER_DAY};
use crate::equations::{BaselineModel, EquationForm};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Generator configuration. Outcomes are drawn as
/// `clamp(f_true(x, Δ) + N(0, noise_sd), 0, 1)` where `f_true` evaluates the
/// chosen form on descriptors `W·x`.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub learners: usize,
    pub items: usize,
    pub steps_per_learner: usize,
    pub form: EquationForm,
    /// One row of length n per descriptor; empty selects
    /// [`SynthConfig::default_weights`].
    pub true_weights: Vec<Vec<f64>>,
    pub noise_sd: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Fixed weight rows that give each form a sensible spread of recall
    /// probabilities over the simulated feature ranges.
    pub fn default_weights(form: EquationForm, n: usize) -> Vec<Vec<f64>> {
        let base: Vec<Vec<f64>> = match form {
            EquationForm::Hlr => vec![vec![0.5, 0.25, 0.3, -0.35, 0.4, 0.0, 0.2, -0.6]],
            EquationForm::Wickelgren => vec![
                vec![0.4, 0.2, 0.3, -0.4, 0.5, 0.0, 0.2, -0.5],
                vec![0.3, -0.2, 0.0, 0.2, -0.3, 0.1, 0.0, 0.3],
                vec![-0.2, 0.1, 0.2, -0.1, 0.0, 0.1, 0.1, 0.2],
            ],
            EquationForm::ActR => vec![
                vec![0.4, 0.3, 0.5, -0.5, 0.6, 0.0, 0.2, -0.8],
                vec![0.0, -0.1, -0.2, 0.3, -0.2, 0.1, 0.0, 0.5],
            ],
        };
        base.into_iter()
            .map(|mut row| {
                row.resize(n, 0.0);
                row
            })
            .collect()
    }
}

/// The hidden generator parameters, returned for oracle comparison.
#[derive(Clone, Debug)]
pub struct SynthTruth {
    pub form: EquationForm,
    pub weights: Vec<Vec<f64>>,
}

impl SynthTruth {
    /// Noise-free generator output for one step.
    pub fn predict_step(&self, features: &[f64], delta_days: f64) -> f64 {
        let d: Vec<f64> = self
            .weights
            .iter()
            .map(|row| row.iter().zip(features).map(|(w, x)| w * x).sum())
            .collect();
        self.form.evaluate(&d, delta_days)
    }

    /// View the truth as a baseline model (same parameterization).
    pub fn to_baseline(&self) -> BaselineModel {
        BaselineModel {
            form: self.form,
            weights: self.weights.clone(),
            meta: vec![("source".into(), "synthetic-truth".into())],
        }
    }
}

/// Simulate learner histories and draw outcomes from the configured truth.
/// Deterministic for a fixed seed; returns the sequences and the hidden
/// parameters.
pub fn synthesize(config: &SynthConfig) -> Result<(Vec<LearnerSequence>, SynthTruth), DatasetError> {
    if config.learners == 0 || config.items == 0 || config.steps_per_learner == 0 {
        return Err(DatasetError::DegenerateSynth(format!(
            "learners={}, items={}, steps_per_learner={} (all must be positive)",
            config.learners, config.items, config.steps_per_learner
        )));
    }
    if !(config.noise_sd >= 0.0) {
        return Err(DatasetError::DegenerateSynth(format!(
            "noise_sd={} must be nonnegative",
            config.noise_sd
        )));
    }
    let weights = if config.true_weights.is_empty() {
        SynthConfig::default_weights(config.form, 8)
    } else {
        config.true_weights.clone()
    };
    if weights.len() != config.form.descriptor_count() {
        return Err(DatasetError::DegenerateSynth(format!(
            "{} expects {} weight rows, got {}",
            config.form,
            config.form.descriptor_count(),
            weights.len()
        )));
    }
    let truth = SynthTruth {
        form: config.form,
        weights,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let difficulties: Vec<f64> = (0..config.items)
        .map(|_| rng.random_range(0.1..0.9))
        .collect();

    let mut sequences = Vec::with_capacity(config.learners);
    for learner in 0..config.learners {
        let mut last_ts: Vec<Option<i64>> = vec![None; config.items];
        let mut seen = vec![0u32; config.items];
        let mut correct = vec![0u32; config.items];
        let mut t: i64 = 0;
        let mut steps = Vec::with_capacity(config.steps_per_learner);
        for _ in 0..config.steps_per_learner {
            let item = rng.random_range(0..config.items);
            let gap_days: f64 = rng.random_range(0.25..8.0);
            t += (gap_days * SECONDS_PER_DAY) as i64;
            let delta_days = match last_ts[item] {
                Some(prev) => (t - prev) as f64 / SECONDS_PER_DAY,
                None => 0.0,
            };
            let session_seen = rng.random_range(1..=4u32);
            let session_correct = rng.random_range(0..=session_seen);
            let features = features_from_counters(
                delta_days,
                seen[item],
                correct[item],
                session_seen,
                session_correct,
                difficulties[item],
            );
            let clean = truth.predict_step(features.values(), delta_days);
            let outcome = if config.noise_sd > 0.0 {
                let eps: f64 = StandardNormal.sample(&mut rng);
                (clean + config.noise_sd * eps).clamp(0.0, 1.0)
            } else {
                clean
            };
            last_ts[item] = Some(t);
            seen[item] += 1;
            if outcome >= 0.5 {
                correct[item] += 1;
            }
            steps.push(SequenceStep {
                features,
                outcome,
                timestamp: t,
                delta_days,
            });
        }
        sequences.push(LearnerSequence {
            learner_id: format!("synth{learner:04}"),
            steps,
        });
    }
    Ok((sequences, truth))
}

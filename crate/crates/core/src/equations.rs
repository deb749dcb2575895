//! Closed-form memory equations and standalone gradient-fit baselines.
//!
//! Three preset forms map a small descriptor vector `d` and an elapsed time
//! `Δ` (days) to a recall probability:
//!
//! - half-life regression: `p = 2^(-Δ/h)` with `h = 2^(clamp(d1, ±10))`
//! - generalized power law: `p = λ·(1 + β·Δ)^(-ψ)` with `λ = σ(d1)`,
//!   `β = softplus(d2)`, `ψ = softplus(d3)`
//! - activation decay: `p = σ(d1 − softplus(d2)·ln(1 + Δ))`
//!
//! The sigmoid/softplus reparameterizations keep every output in `[0, 1]`
//! and every internal parameter in its valid range for any finite `d`, so
//! gradient descent cannot step outside the domain. The activation-decay
//! form is a two-descriptor summary rather than a trace sum over individual
//! exposures; per-exposure history is already folded into the feature
//! counters upstream.
//!
//! A [`BaselineModel`] is a linear map from an n-dimensional feature vector
//! to the form's descriptors, fitted by backtracking gradient descent on
//! mean squared error.

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::LearnerSequence;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Exponent clamp for the half-life form; keeps `h` within `[2^-10, 2^10]`
/// days and the power finite.
pub const HALF_LIFE_EXP_CLAMP: f64 = 10.0;

/// Preset equation form. `descriptor_count` is the length of `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EquationForm {
    Hlr,
    Wickelgren,
    ActR,
}

#[derive(Debug, Error)]
pub enum EquationError {
    #[error("unknown equation form '{0}' (expected hlr, wickelgren, or actr)")]
    UnknownForm(String),
    #[error("baseline fit diverged: loss became non-finite at epoch {epoch}; lower the learning rate (lr={lr})")]
    Diverged { epoch: usize, lr: f64 },
    #[error("baseline fit needs at least one sequence with at least one step")]
    EmptyData,
    #[error("model file is malformed: {0}")]
    MalformedModel(String),
}

impl EquationForm {
    pub fn descriptor_count(&self) -> usize {
        match self {
            EquationForm::Hlr => 1,
            EquationForm::Wickelgren => 3,
            EquationForm::ActR => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EquationForm::Hlr => "hlr",
            EquationForm::Wickelgren => "wickelgren",
            EquationForm::ActR => "actr",
        }
    }

    /// Recall probability for raw descriptors `d` at elapsed time
    /// `delta_days`. Panics if `d` has the wrong length or `delta_days` is
    /// negative.
    pub fn evaluate(&self, d: &[f64], delta_days: f64) -> f64 {
        assert_eq!(
            d.len(),
            self.descriptor_count(),
            "{} expects {} descriptors, got {}",
            self.name(),
            self.descriptor_count(),
            d.len()
        );
        assert!(
            delta_days >= 0.0,
            "elapsed time must be nonnegative, got {delta_days}"
        );
        match self {
            EquationForm::Hlr => {
                let h = d[0].clamp(-HALF_LIFE_EXP_CLAMP, HALF_LIFE_EXP_CLAMP).exp2();
                (-(delta_days / h)).exp2()
            }
            EquationForm::Wickelgren => {
                let lam = sigmoid(d[0]);
                let beta = softplus(d[1]);
                let psi = softplus(d[2]);
                lam * (1.0 + beta * delta_days).powf(-psi)
            }
            EquationForm::ActR => {
                let decay = softplus(d[1]);
                sigmoid(d[0] - decay * delta_days.ln_1p())
            }
        }
    }

    /// Tape-resident evaluation. Each descriptor is a scalar-or-vector var
    /// (all the same length), `delta_days` a nonnegative constant of the
    /// same length; returns per-element probabilities. This is the path the
    /// optimizers differentiate through.
    pub fn evaluate_vars<'t>(&self, tape: &'t Tape, d: &[Var<'t>], delta_days: Var<'t>) -> Var<'t> {
        assert_eq!(
            d.len(),
            self.descriptor_count(),
            "{} expects {} descriptors, got {}",
            self.name(),
            self.descriptor_count(),
            d.len()
        );
        let ln2 = std::f64::consts::LN_2;
        match self {
            EquationForm::Hlr => {
                // 2^(-Δ/h) = exp(-ln2 · Δ · 2^(-clamp(d1)))
                let inv_h = d[0]
                    .clamp(-HALF_LIFE_EXP_CLAMP, HALF_LIFE_EXP_CLAMP)
                    .mul_const(-ln2)
                    .exp();
                (delta_days * inv_h).mul_const(-ln2).exp()
            }
            EquationForm::Wickelgren => {
                let lam = d[0].sigmoid();
                let beta = d[1].softplus();
                let psi = d[2].softplus();
                let base = (beta * delta_days).add_const(1.0).log();
                lam * (psi * base).neg().exp()
            }
            EquationForm::ActR => {
                let decay = d[1].softplus();
                let log_age = delta_days.add_const(1.0).log();
                let _ = tape;
                (d[0] - decay * log_age).sigmoid()
            }
        }
    }
}

impl fmt::Display for EquationForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EquationForm {
    type Err = EquationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hlr" => Ok(EquationForm::Hlr),
            "wickelgren" | "wick" => Ok(EquationForm::Wickelgren),
            "actr" | "act-r" => Ok(EquationForm::ActR),
            other => Err(EquationError::UnknownForm(other.to_string())),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Hyperparameters for [`fit_baseline`].
#[derive(Clone, Copy, Debug)]
pub struct FitHyper {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FitHyper {
    fn default() -> Self {
        FitHyper {
            lr: 0.5,
            epochs: 500,
            seed: 0,
        }
    }
}

/// A preset form plus a per-descriptor linear map from features.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    pub form: EquationForm,
    /// One weight row of length n per descriptor.
    pub weights: Vec<Vec<f64>>,
    pub meta: Vec<(String, String)>,
}

impl BaselineModel {
    pub fn new(form: EquationForm, n_features: usize) -> Self {
        BaselineModel {
            form,
            weights: vec![vec![0.0; n_features]; form.descriptor_count()],
            meta: Vec::new(),
        }
    }

    pub fn n_features(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    fn descriptors(&self, features: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| row.iter().zip(features).map(|(w, x)| w * x).sum())
            .collect()
    }

    /// Pointwise prediction for every step of a sequence.
    pub fn predict(&self, sequence: &LearnerSequence) -> Vec<f64> {
        sequence
            .steps
            .iter()
            .map(|step| {
                let d = self.descriptors(step.features.values());
                self.form.evaluate(&d, step.delta_days)
            })
            .collect()
    }

    /// Serialize as a flat key=value text block.
    pub fn save(&self) -> String {
        let mut out = String::from("#equation v1\n");
        out.push_str(&format!("form={}\n", self.form.name()));
        out.push_str(&format!("z={}\n", self.form.descriptor_count()));
        out.push_str(&format!("n={}\n", self.n_features()));
        for (i, row) in self.weights.iter().enumerate() {
            let joined: Vec<String> = row.iter().map(|w| format!("{w:e}")).collect();
            out.push_str(&format!("weights.{i}={}\n", joined.join(",")));
        }
        for (k, v) in &self.meta {
            out.push_str(&format!("meta.{k}={v}\n"));
        }
        out
    }

    pub fn load(text: &str) -> Result<Self, EquationError> {
        let mut form = None;
        let mut n = None;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut meta = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| EquationError::MalformedModel(format!("no '=' in line '{line}'")))?;
            match key {
                "form" => form = Some(value.parse::<EquationForm>()?),
                "z" => {}
                "n" => {
                    n = Some(value.parse::<usize>().map_err(|e| {
                        EquationError::MalformedModel(format!("bad n '{value}': {e}"))
                    })?)
                }
                k if k.starts_with("weights.") => {
                    let idx: usize = k["weights.".len()..].parse().map_err(|e| {
                        EquationError::MalformedModel(format!("bad weight row key '{k}': {e}"))
                    })?;
                    let row: Result<Vec<f64>, _> =
                        value.split(',').map(|v| v.trim().parse::<f64>()).collect();
                    let row = row.map_err(|e| {
                        EquationError::MalformedModel(format!("bad weight value in row {idx}: {e}"))
                    })?;
                    rows.push((idx, row));
                }
                k if k.starts_with("meta.") => {
                    meta.push((k["meta.".len()..].to_string(), value.to_string()));
                }
                other => {
                    return Err(EquationError::MalformedModel(format!(
                        "unknown key '{other}'"
                    )))
                }
            }
        }
        let form = form.ok_or_else(|| EquationError::MalformedModel("missing form".into()))?;
        rows.sort_by_key(|(i, _)| *i);
        if rows.len() != form.descriptor_count() {
            return Err(EquationError::MalformedModel(format!(
                "expected {} weight rows, found {}",
                form.descriptor_count(),
                rows.len()
            )));
        }
        let weights: Vec<Vec<f64>> = rows.into_iter().map(|(_, r)| r).collect();
        if let Some(n) = n {
            if weights.iter().any(|r| r.len() != n) {
                return Err(EquationError::MalformedModel(
                    "weight row length does not match n".into(),
                ));
            }
        }
        Ok(BaselineModel {
            form,
            weights,
            meta,
        })
    }
}

/// Flatten sequences into a regression design: features row-major, elapsed
/// days, and targets.
fn flatten(sequences: &[LearnerSequence]) -> (Vec<f64>, Vec<f64>, Vec<f64>, usize, usize) {
    let n = sequences
        .iter()
        .flat_map(|s| s.steps.first())
        .map(|s| s.features.len())
        .next()
        .unwrap_or(0);
    let mut xs = Vec::new();
    let mut deltas = Vec::new();
    let mut ys = Vec::new();
    for seq in sequences {
        for step in &seq.steps {
            xs.extend_from_slice(step.features.values());
            deltas.push(step.delta_days);
            ys.push(step.outcome);
        }
    }
    let rows = ys.len();
    (xs, deltas, ys, rows, n)
}

/// Mean-squared-error of the form over a fixed design for a given weight
/// matrix; differentiable when the rows are leaves.
fn design_loss<'t>(
    tape: &'t Tape,
    form: EquationForm,
    x: Var<'t>,
    delta: Var<'t>,
    y: Var<'t>,
    weight_rows: &[Var<'t>],
) -> Var<'t> {
    let d: Vec<Var<'t>> = weight_rows.iter().map(|w| x.matmul(*w)).collect();
    let pred = form.evaluate_vars(tape, &d, delta);
    let err = y - pred;
    (err * err).mean()
}

/// Fit a [`BaselineModel`] by full-batch gradient descent with backtracking:
/// a step that raises the loss is retried at half the rate, so the epoch
/// loss trajectory is nonincreasing by construction. Deterministic for a
/// fixed seed.
pub fn fit_baseline(
    form: EquationForm,
    sequences: &[LearnerSequence],
    hyper: FitHyper,
) -> Result<BaselineModel, EquationError> {
    let (xs, deltas, ys, rows, n) = flatten(sequences);
    if rows == 0 || n == 0 {
        return Err(EquationError::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let bound = 1.0 / (n as f64).sqrt();
    let z = form.descriptor_count();
    let mut weights: Vec<Vec<f64>> = (0..z)
        .map(|_| (0..n).map(|_| rng.random_range(-bound..bound)).collect())
        .collect();

    let loss_at = |weights: &[Vec<f64>]| -> f64 {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(rows, n, xs.clone()));
        let delta = tape.constant(Tensor::vector(deltas.clone()));
        let y = tape.constant(Tensor::vector(ys.clone()));
        let rows_v: Vec<Var> = weights
            .iter()
            .map(|w| tape.constant(Tensor::vector(w.clone())))
            .collect();
        design_loss(&tape, form, x, delta, y, &rows_v).item()
    };

    let mut lr = hyper.lr;
    let mut last_loss = loss_at(&weights);
    for epoch in 0..hyper.epochs {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(rows, n, xs.clone()));
        let delta = tape.constant(Tensor::vector(deltas.clone()));
        let y = tape.constant(Tensor::vector(ys.clone()));
        let rows_v: Vec<Var> = weights
            .iter()
            .map(|w| tape.leaf(Tensor::vector(w.clone())))
            .collect();
        let loss = design_loss(&tape, form, x, delta, y, &rows_v);
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(EquationError::Diverged {
                epoch,
                lr: hyper.lr,
            });
        }
        let grads = tape.backward(loss);
        let grad_rows: Vec<Tensor> = rows_v.iter().map(|v| grads.wrt(*v)).collect();

        // Backtrack until the step does not increase the loss.
        let mut step = lr;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<Vec<f64>> = weights
                .iter()
                .zip(&grad_rows)
                .map(|(w, g)| {
                    w.iter()
                        .zip(g.data())
                        .map(|(wi, gi)| wi - step * gi)
                        .collect()
                })
                .collect();
            let trial_loss = loss_at(&trial);
            if trial_loss.is_finite() && trial_loss <= loss_value {
                weights = trial;
                last_loss = trial_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break; // no descent direction at any tried step: converged
        }
        // Let the rate recover slowly, capped at the configured value.
        lr = (step * 1.5).min(hyper.lr);
    }
    let _ = last_loss;

    Ok(BaselineModel {
        form,
        weights,
        meta: vec![
            ("fit.lr".into(), format!("{}", hyper.lr)),
            ("fit.epochs".into(), format!("{}", hyper.epochs)),
            ("fit.seed".into(), format!("{}", hyper.seed)),
        ],
    })
}

/// Per-step predictions, one vector per sequence.
pub fn predict_baseline(model: &BaselineModel, sequence: &LearnerSequence) -> Vec<f64> {
    model.predict(sequence)
}

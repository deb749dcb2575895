//! Differential sparse regression over augmented descriptors.
//!
//! Each step contributes a row `[x ; ∂ŷ/∂x]` — the raw features concatenated
//! with the network's input gradients — optionally extended with a constant
//! bias column so the descriptors can express intercepts. A coefficient
//! matrix `Λ` (one column per descriptor of the preset form) maps rows to
//! descriptors, and the preset equation turns descriptors plus elapsed time
//! into a predicted recall probability:
//!
//! ```text
//! d_row = row · Λ          ỹ_row = f(d_row, Δ_row)
//! loss  = mean((y - ỹ)²) + λ₁·‖Λ‖₁
//! ```
//!
//! Optimization is proximal gradient descent: one full-batch gradient step
//! on the squared-error term per epoch, then soft-thresholding with
//! shrinkage `lr·λ₁`, which produces exact zeros rather than merely small
//! entries. Entries still below `prune_tol` at the end are zeroed.

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::LearnerSequence;
use crate::equations::EquationForm;
use crate::predictor::{
    forward_states, input_gradients, input_gradients_fd, PredictorParameters,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SrError {
    #[error("sparse regression loss became non-finite at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("coefficient export is malformed: {0}")]
    MalformedExport(String),
}

/// How the gradient half of a descriptor row is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Reverse-mode `∂ŷ/∂x` (the frozen-network path).
    Exact,
    /// Central differences of decoder forward passes.
    Fd,
}

/// Row-major matrix of augmented descriptor rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDescriptorMatrix {
    width: usize,
    data: Vec<f64>,
    pub bias_column: bool,
}

impl AugmentedDescriptorMatrix {
    pub fn new(width: usize, bias_column: bool) -> Self {
        AugmentedDescriptorMatrix {
            width,
            data: Vec::new(),
            bias_column,
        }
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.width, "descriptor row width mismatch");
        self.data.extend_from_slice(row);
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.data.len() / self.width
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn rows_flat(&self) -> &[f64] {
        &self.data
    }
}

/// Descriptor rows plus the aligned targets, elapsed times, and a map back
/// to (sequence, step) indices in the source batch.
#[derive(Clone, Debug)]
pub struct DescriptorSet {
    pub matrix: AugmentedDescriptorMatrix,
    pub y: Vec<f64>,
    pub delta_days: Vec<f64>,
    pub index: Vec<(usize, usize)>,
}

/// Λ with shape (row width) x (descriptor count) plus the outer round that
/// produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseCoefficientMatrix {
    pub width: usize,
    pub z: usize,
    /// Row-major: `values[r * z + j]`.
    pub values: Vec<f64>,
    pub created_round: usize,
}

impl SparseCoefficientMatrix {
    pub fn zeros(width: usize, z: usize) -> Self {
        SparseCoefficientMatrix {
            width,
            z,
            values: vec![0.0; width * z],
            created_round: 0,
        }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.width).map(|r| self.values[r * self.z + j]).collect()
    }

    pub fn set_column(&mut self, j: usize, col: &[f64]) {
        assert_eq!(col.len(), self.width);
        for (r, v) in col.iter().enumerate() {
            self.values[r * self.z + j] = *v;
        }
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Column labels for a given feature naming: the features themselves,
    /// their gradient counterparts, then the bias when present.
    pub fn row_labels(feature_names: &[&str], bias_column: bool) -> Vec<String> {
        let mut labels: Vec<String> = feature_names.iter().map(|s| s.to_string()).collect();
        labels.extend(feature_names.iter().map(|s| format!("ddx_{s}")));
        if bias_column {
            labels.push("bias".to_string());
        }
        labels
    }

    /// Delimited export: one line per descriptor, columns named after the
    /// augmented row entries. Full float precision so a parse round-trips.
    pub fn export(&self, form: EquationForm, feature_names: &[&str], bias_column: bool) -> String {
        let labels = Self::row_labels(feature_names, bias_column);
        assert_eq!(
            labels.len(),
            self.width,
            "feature naming does not match coefficient width"
        );
        let mut out = String::from("#lambda v1\n");
        out.push_str(&format!("#form={}\n", form.name()));
        out.push_str(&format!("#bias={}\n", bias_column));
        out.push_str(&format!("#round={}\n", self.created_round));
        out.push_str("descriptor\t");
        out.push_str(&labels.join("\t"));
        out.push('\n');
        for j in 0..self.z {
            out.push_str(&format!("d{}", j + 1));
            for r in 0..self.width {
                out.push_str(&format!("\t{:e}", self.values[r * self.z + j]));
            }
            out.push('\n');
        }
        out
    }

    /// Parse an [`export`](Self::export) back into (form, labels, Λ).
    pub fn parse_export(text: &str) -> Result<(EquationForm, Vec<String>, Self), SrError> {
        let mut form = None;
        let mut bias = false;
        let mut round = 0usize;
        let mut labels: Vec<String> = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for line in text.lines() {
            if line.starts_with("#form=") {
                form = Some(
                    line["#form=".len()..]
                        .parse::<EquationForm>()
                        .map_err(|e| SrError::MalformedExport(e.to_string()))?,
                );
            } else if line.starts_with("#bias=") {
                bias = line["#bias=".len()..].trim() == "true";
            } else if line.starts_with("#round=") {
                round = line["#round=".len()..]
                    .trim()
                    .parse()
                    .map_err(|e| SrError::MalformedExport(format!("bad round: {e}")))?;
            } else if line.starts_with("descriptor\t") {
                labels = line.split('\t').skip(1).map(str::to_string).collect();
            } else if line.starts_with('d') && line.contains('\t') {
                let vals: Result<Vec<f64>, _> = line
                    .split('\t')
                    .skip(1)
                    .map(|v| v.trim().parse::<f64>())
                    .collect();
                rows.push(vals.map_err(|e| SrError::MalformedExport(format!("bad value: {e}")))?);
            }
        }
        let form = form.ok_or_else(|| SrError::MalformedExport("missing #form".into()))?;
        let _ = bias;
        if rows.is_empty() {
            return Err(SrError::MalformedExport("no descriptor rows".into()));
        }
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) || labels.len() != width {
            return Err(SrError::MalformedExport("ragged rows or header".into()));
        }
        let z = rows.len();
        let mut matrix = SparseCoefficientMatrix::zeros(width, z);
        matrix.created_round = round;
        for (j, row) in rows.iter().enumerate() {
            matrix.set_column(j, row);
        }
        Ok((form, labels, matrix))
    }
}

/// Hyperparameters for [`optimize_lambda`].
#[derive(Clone, Copy, Debug)]
pub struct SrHyper {
    pub lr: f64,
    pub epochs: usize,
    pub lambda1: f64,
    pub prune_tol: f64,
}

impl Default for SrHyper {
    fn default() -> Self {
        SrHyper {
            lr: 1e-2,
            epochs: 5,
            lambda1: 1e-3,
            prune_tol: 1e-3,
        }
    }
}

/// Row width for a feature count: features, their gradients, optional bias.
pub fn descriptor_width(n_features: usize, bias_column: bool) -> usize {
    2 * n_features + usize::from(bias_column)
}

/// Build the augmented descriptor matrix for a batch under frozen network
/// parameters. `fd_epsilon` is only used in [`GradMode::Fd`].
pub fn build_descriptors(
    params: &PredictorParameters,
    batch: &[LearnerSequence],
    mode: GradMode,
    bias_column: bool,
    fd_epsilon: f64,
) -> DescriptorSet {
    let n = params.dims.n_features;
    let width = descriptor_width(n, bias_column);
    let mut matrix = AugmentedDescriptorMatrix::new(width, bias_column);
    let mut y = Vec::new();
    let mut delta_days = Vec::new();
    let mut index = Vec::new();
    for (si, seq) in batch.iter().enumerate() {
        let states = forward_states(params, seq);
        for (ti, (step, state)) in seq.steps.iter().zip(&states).enumerate() {
            let grads = match mode {
                GradMode::Exact => input_gradients(params, &step.features, state),
                GradMode::Fd => input_gradients_fd(params, &step.features, state, fd_epsilon),
            };
            let mut row = Vec::with_capacity(width);
            row.extend_from_slice(step.features.values());
            row.extend_from_slice(&grads);
            if bias_column {
                row.push(1.0);
            }
            matrix.push_row(&row);
            y.push(step.outcome);
            delta_days.push(step.delta_days);
            index.push((si, ti));
        }
    }
    DescriptorSet {
        matrix,
        y,
        delta_days,
        index,
    }
}

/// Evaluate the preset form over `X̃·Λ` row-wise.
pub fn sr_predict(
    form: EquationForm,
    matrix: &AugmentedDescriptorMatrix,
    lambda: &SparseCoefficientMatrix,
    delta_days: &[f64],
) -> Vec<f64> {
    assert_eq!(
        matrix.width(),
        lambda.width,
        "descriptor width {} does not match coefficient width {}",
        matrix.width(),
        lambda.width
    );
    assert_eq!(
        lambda.z,
        form.descriptor_count(),
        "{} expects {} descriptors, Λ has {}",
        form.name(),
        form.descriptor_count(),
        lambda.z
    );
    assert_eq!(matrix.n_rows(), delta_days.len(), "row count mismatch");
    (0..matrix.n_rows())
        .map(|i| {
            let row = matrix.row(i);
            let d: Vec<f64> = (0..lambda.z)
                .map(|j| {
                    row.iter()
                        .enumerate()
                        .map(|(r, v)| v * lambda.values[r * lambda.z + j])
                        .sum()
                })
                .collect();
            form.evaluate(&d, delta_days[i])
        })
        .collect()
}

/// Mean squared error plus the L1 penalty on Λ.
pub fn sr_loss(y: &[f64], y_tilde: &[f64], lambda: &SparseCoefficientMatrix, lambda1: f64) -> f64 {
    assert_eq!(y.len(), y_tilde.len());
    assert!(lambda1 >= 0.0, "lambda1 must be nonnegative");
    assert!(!y.is_empty(), "sr_loss over zero rows");
    let mse = y
        .iter()
        .zip(y_tilde)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y.len() as f64;
    mse + lambda1 * lambda.l1_norm()
}

/// In-place soft-thresholding: `v ← sign(v)·max(|v| − t, 0)`.
pub fn soft_threshold(values: &mut [f64], t: f64) {
    for v in values.iter_mut() {
        let mag = (v.abs() - t).max(0.0);
        *v = v.signum() * mag;
    }
}

/// Proximal gradient descent on the sparse-regression objective with the
/// descriptor rows fixed. Zero epochs returns `lambda_init` unchanged.
/// Deterministic: no randomness anywhere in the loop.
pub fn optimize_lambda(
    form: EquationForm,
    set: &DescriptorSet,
    lambda_init: &SparseCoefficientMatrix,
    hyper: SrHyper,
) -> Result<SparseCoefficientMatrix, SrError> {
    if hyper.epochs == 0 {
        return Ok(lambda_init.clone());
    }
    let width = set.matrix.width();
    let z = form.descriptor_count();
    assert_eq!(lambda_init.width, width, "Λ width mismatch");
    assert_eq!(lambda_init.z, z, "Λ descriptor count mismatch");
    let rows = set.matrix.n_rows();
    let mut lambda = lambda_init.clone();

    for epoch in 0..hyper.epochs {
        let tape = Tape::new();
        let x = tape.constant(Tensor::matrix(rows, width, set.matrix.rows_flat().to_vec()));
        let delta = tape.constant(Tensor::vector(set.delta_days.clone()));
        let yv = tape.constant(Tensor::vector(set.y.clone()));
        let cols: Vec<Var> = (0..z)
            .map(|j| tape.leaf(Tensor::vector(lambda.column(j))))
            .collect();
        let d: Vec<Var> = cols.iter().map(|c| x.matmul(*c)).collect();
        let pred = form.evaluate_vars(&tape, &d, delta);
        let err = yv - pred;
        let mse = (err * err).mean();
        let mse_value = mse.item();
        if !mse_value.is_finite() {
            return Err(SrError::NonFinite { epoch });
        }
        let grads = tape.backward(mse);
        for (j, col_var) in cols.iter().enumerate() {
            let g = grads.wrt(*col_var);
            let mut col = lambda.column(j);
            for (c, gi) in col.iter_mut().zip(g.data()) {
                *c -= hyper.lr * gi;
            }
            soft_threshold(&mut col, hyper.lr * hyper.lambda1);
            lambda.set_column(j, &col);
        }
        if !lambda.is_finite() {
            return Err(SrError::NonFinite { epoch });
        }
    }
    for v in lambda.values.iter_mut() {
        if v.abs() < hyper.prune_tol {
            *v = 0.0;
        }
    }
    Ok(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FeatureVector, SequenceStep};
    use crate::predictor::PredictorDims;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_batch(seed: u64, learners: usize, steps: usize, n: usize) -> Vec<LearnerSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..learners)
            .map(|l| {
                let mut ts = 0i64;
                LearnerSequence {
                    learner_id: format!("u{l}"),
                    steps: (0..steps)
                        .map(|_| {
                            ts += rng.random_range(10_000..300_000);
                            let delta: f64 = rng.random_range(0.0..6.0);
                            let mut f: Vec<f64> =
                                (0..n).map(|_| rng.random_range(0.0..1.5)).collect();
                            f[0] = delta.ln_1p();
                            SequenceStep {
                                features: FeatureVector::new(f),
                                outcome: rng.random_range(0.0..1.0),
                                timestamp: ts,
                                delta_days: delta,
                            }
                        })
                        .collect(),
                }
            })
            .collect()
    }

    #[test]
    fn rows_are_feature_gradient_concatenations() {
        let mut m = AugmentedDescriptorMatrix::new(4, false);
        m.push_row(&[0.2, 0.5, -0.1, 0.3]);
        assert_eq!(m.row(0), &[0.2, 0.5, -0.1, 0.3]);
        assert_eq!(m.n_rows(), 1);
    }

    #[test]
    fn zero_decoder_gives_zero_gradient_half() {
        let params = PredictorParameters::zeros(PredictorDims::new(3, 2, 2));
        let batch = toy_batch(1, 1, 4, 3);
        let set = build_descriptors(&params, &batch, GradMode::Exact, true, 1e-3);
        for i in 0..set.matrix.n_rows() {
            let row = set.matrix.row(i);
            assert_eq!(&row[3..6], &[0.0, 0.0, 0.0], "gradient half");
            assert_eq!(row[6], 1.0, "bias column");
        }
    }

    #[test]
    fn exact_and_fd_modes_agree() {
        let params = PredictorParameters::init(PredictorDims::new(3, 4, 4), 42);
        let batch = toy_batch(2, 2, 5, 3);
        let exact = build_descriptors(&params, &batch, GradMode::Exact, false, 1e-3);
        let fd = build_descriptors(&params, &batch, GradMode::Fd, false, 1e-3);
        let scale = exact
            .matrix
            .rows_flat()
            .iter()
            .fold(1e-6f64, |a, v| a.max(v.abs()));
        for (a, b) in exact
            .matrix
            .rows_flat()
            .iter()
            .zip(fd.matrix.rows_flat())
        {
            assert!((a - b).abs() / scale <= 1e-3, "{a} vs {b}");
        }
        assert_eq!(exact.index, fd.index);
    }

    #[test]
    fn zero_lambda_hlr_predicts_half_at_unit_delay() {
        let mut m = AugmentedDescriptorMatrix::new(3, true);
        m.push_row(&[0.4, 0.2, 1.0]);
        let lambda = SparseCoefficientMatrix::zeros(3, 1);
        let p = sr_predict(EquationForm::Hlr, &m, &lambda, &[1.0]);
        assert_eq!(p, vec![0.5]);
        let p0 = sr_predict(EquationForm::Hlr, &m, &lambda, &[0.0]);
        assert_eq!(p0, vec![1.0]);
    }

    #[test]
    fn sr_predict_matches_hand_matmul() {
        let mut m = AugmentedDescriptorMatrix::new(2, false);
        m.push_row(&[0.5, 2.0]);
        m.push_row(&[-1.0, 0.25]);
        let mut lambda = SparseCoefficientMatrix::zeros(2, 1);
        lambda.set_column(0, &[0.8, -0.4]);
        let deltas = [1.5, 3.0];
        let got = sr_predict(EquationForm::Hlr, &m, &lambda, &deltas);
        for (i, row) in [[0.5, 2.0], [-1.0, 0.25]].iter().enumerate() {
            let d1 = row[0] * 0.8 + row[1] * -0.4;
            let expect = EquationForm::Hlr.evaluate(&[d1], deltas[i]);
            assert!((got[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn sr_loss_components() {
        let lambda0 = SparseCoefficientMatrix::zeros(4, 1);
        assert_eq!(sr_loss(&[0.5, 0.25], &[0.5, 0.25], &lambda0, 0.0), 0.0);

        let mut lambda = SparseCoefficientMatrix::zeros(4, 1);
        lambda.set_column(0, &[1.0, -0.5, 0.25, 0.25]); // L1 = 2
        let loss = sr_loss(&[0.5], &[0.5], &lambda, 0.1);
        assert!((loss - 0.2).abs() < 1e-15);
    }

    #[test]
    fn sr_loss_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let yt: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut lambda = SparseCoefficientMatrix::zeros(5, 2);
        for v in lambda.values.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let got = sr_loss(&y, &yt, &lambda, 0.01);
        let mut mse = 0.0;
        for i in 0..30 {
            mse += (y[i] - yt[i]).powi(2);
        }
        mse /= 30.0;
        let l1: f64 = lambda.values.iter().map(|v| v.abs()).sum();
        assert!((got - (mse + 0.01 * l1)).abs() < 1e-14);
    }

    #[test]
    fn soft_threshold_never_increases_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let mut v: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            let before: f64 = v.iter().map(|x| x.abs()).sum();
            soft_threshold(&mut v, rng.random_range(0.0..0.5));
            let after: f64 = v.iter().map(|x| x.abs()).sum();
            assert!(after <= before + 1e-15);
        }
    }

    /// Fixture: rows drawn at random, targets from a known sparse Λ*.
    fn sparse_fixture(
        width: usize,
        nonzero: &[(usize, f64)],
        rows: usize,
        seed: u64,
    ) -> (DescriptorSet, SparseCoefficientMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truth = SparseCoefficientMatrix::zeros(width, 1);
        for (r, v) in nonzero {
            truth.values[*r] = *v;
        }
        let mut matrix = AugmentedDescriptorMatrix::new(width, false);
        let mut y = Vec::new();
        let mut deltas = Vec::new();
        for _ in 0..rows {
            let row: Vec<f64> = (0..width).map(|_| rng.random_range(-1.0..1.0)).collect();
            let delta: f64 = rng.random_range(0.25..8.0);
            let d1: f64 = row
                .iter()
                .zip(&truth.values)
                .map(|(a, b)| a * b)
                .sum();
            y.push(EquationForm::Hlr.evaluate(&[d1], delta));
            deltas.push(delta);
            matrix.push_row(&row);
        }
        let index = (0..rows).map(|i| (0, i)).collect();
        (
            DescriptorSet {
                matrix,
                y,
                delta_days: deltas,
                index,
            },
            truth,
        )
    }

    #[test]
    fn recovers_sparse_support_on_noise_free_data() {
        let truth_entries = [(1usize, 0.8f64), (6, -0.6), (11, 0.5)];
        let (set, truth) = sparse_fixture(16, &truth_entries, 400, 77);
        let init = SparseCoefficientMatrix::zeros(16, 1);
        let hyper = SrHyper {
            lr: 0.25,
            epochs: 3000,
            lambda1: 2e-4,
            prune_tol: 1e-3,
        };
        let fitted = optimize_lambda(EquationForm::Hlr, &set, &init, hyper).unwrap();
        for (r, v) in truth_entries {
            let got = fitted.values[r];
            assert!(
                got.abs() >= 1e-3 && got.signum() == v.signum(),
                "support entry {r}: fitted {got}, truth {v}"
            );
        }
        let zero_rows: Vec<usize> = (0..16)
            .filter(|r| truth.values[*r] == 0.0)
            .collect();
        let small = zero_rows
            .iter()
            .filter(|r| fitted.values[**r].abs() < 1e-3)
            .count();
        assert!(
            small * 10 >= zero_rows.len() * 8,
            "only {small}/{} true zeros below tolerance",
            zero_rows.len()
        );
    }

    #[test]
    fn huge_penalty_zeroes_everything() {
        let (set, _) = sparse_fixture(8, &[(0, 0.7)], 120, 5);
        let mut init = SparseCoefficientMatrix::zeros(8, 1);
        init.set_column(0, &[0.5; 8]);
        let hyper = SrHyper {
            lr: 0.05,
            epochs: 200,
            lambda1: 1e3,
            prune_tol: 1e-3,
        };
        let fitted = optimize_lambda(EquationForm::Hlr, &set, &init, hyper).unwrap();
        assert!(fitted.values.iter().all(|v| *v == 0.0), "{:?}", fitted.values);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (set, _) = sparse_fixture(8, &[(0, 0.7)], 40, 6);
        let mut init = SparseCoefficientMatrix::zeros(8, 1);
        init.set_column(0, &[0.3, -0.2, 0.0, 0.1, 0.0, 0.0, 0.4, -0.5]);
        let hyper = SrHyper {
            lr: 0.05,
            epochs: 0,
            lambda1: 0.1,
            prune_tol: 1e-3,
        };
        let fitted = optimize_lambda(EquationForm::Hlr, &set, &init, hyper).unwrap();
        assert_eq!(fitted, init);
    }

    #[test]
    fn loss_decreases_across_epochs_on_noise_free_data() {
        let (set, _) = sparse_fixture(10, &[(2, 0.9), (7, -0.5)], 200, 21);
        let init = SparseCoefficientMatrix::zeros(10, 1);
        let mut losses = Vec::new();
        for epochs in [0usize, 2, 8, 32, 128, 512] {
            let hyper = SrHyper {
                lr: 0.1,
                epochs,
                lambda1: 1e-4,
                prune_tol: 0.0,
            };
            let fitted = optimize_lambda(EquationForm::Hlr, &set, &init, hyper).unwrap();
            let pred = sr_predict(EquationForm::Hlr, &set.matrix, &fitted, &set.delta_days);
            losses.push(sr_loss(&set.y, &pred, &fitted, 1e-4));
        }
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "losses {losses:?}");
        }
    }

    #[test]
    fn row_permutation_leaves_optimized_loss_unchanged() {
        let (set, _) = sparse_fixture(8, &[(1, 0.6), (5, -0.4)], 100, 33);
        let mut permuted = set.clone();
        // Reverse is a permutation; apply to rows, y, and deltas together.
        let rows: Vec<Vec<f64>> = (0..set.matrix.n_rows())
            .rev()
            .map(|i| set.matrix.row(i).to_vec())
            .collect();
        let mut m = AugmentedDescriptorMatrix::new(8, false);
        for r in &rows {
            m.push_row(r);
        }
        permuted.matrix = m;
        permuted.y = set.y.iter().rev().copied().collect();
        permuted.delta_days = set.delta_days.iter().rev().copied().collect();

        let init = SparseCoefficientMatrix::zeros(8, 1);
        let hyper = SrHyper {
            lr: 0.1,
            epochs: 300,
            lambda1: 1e-4,
            prune_tol: 0.0,
        };
        let a = optimize_lambda(EquationForm::Hlr, &set, &init, hyper).unwrap();
        let b = optimize_lambda(EquationForm::Hlr, &permuted, &init, hyper).unwrap();
        let pa = sr_predict(EquationForm::Hlr, &set.matrix, &a, &set.delta_days);
        let pb = sr_predict(EquationForm::Hlr, &permuted.matrix, &b, &permuted.delta_days);
        let la = sr_loss(&set.y, &pa, &a, 1e-4);
        let lb = sr_loss(&permuted.y, &pb, &b, 1e-4);
        assert!((la - lb).abs() < 1e-8, "{la} vs {lb}");
    }

    #[test]
    fn predictions_stay_in_unit_interval_for_any_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (set, _) = sparse_fixture(6, &[(0, 1.0)], 50, 3);
        for _ in 0..50 {
            let mut lambda = SparseCoefficientMatrix::zeros(6, 1);
            for v in lambda.values.iter_mut() {
                *v = rng.random_range(-30.0..30.0);
            }
            for p in sr_predict(EquationForm::Hlr, &set.matrix, &lambda, &set.delta_days) {
                assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn export_parse_roundtrip() {
        let mut lambda = SparseCoefficientMatrix::zeros(5, 2);
        lambda.values = vec![0.5, -0.25, 0.0, 1.5, 0.0, 0.0, -0.125, 2.0, 0.0, 0.75];
        lambda.created_round = 3;
        let names = ["a", "b"];
        let text = lambda.export(EquationForm::ActR, &names, true);
        let (form, labels, back) = SparseCoefficientMatrix::parse_export(&text).unwrap();
        assert_eq!(form, EquationForm::ActR);
        assert_eq!(labels, vec!["a", "b", "ddx_a", "ddx_b", "bias"]);
        assert_eq!(back, lambda);
    }

    #[test]
    #[should_panic(expected = "width")]
    fn sr_predict_shape_mismatch_is_an_error() {
        let m = AugmentedDescriptorMatrix::new(3, false);
        let lambda = SparseCoefficientMatrix::zeros(4, 1);
        sr_predict(EquationForm::Hlr, &m, &lambda, &[]);
    }
}

//! Metrics, the model-comparison harness, forgetting-trajectory extraction,
//! and descriptor-weight export.

use crate::dataset::LearnerSequence;
use crate::equations::{BaselineModel, EquationForm};
use crate::predictor::{decode, encode, predict_sequence, PredictorParameters};
use crate::sparsereg::{build_descriptors, sr_predict, GradMode, SparseCoefficientMatrix};

/// Mean absolute error. Symmetric in its arguments.
pub fn mae(y: &[f64], y_hat: &[f64]) -> f64 {
    assert_eq!(y.len(), y_hat.len(), "mae over unequal lengths");
    assert!(!y.is_empty(), "mae over empty vectors");
    y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64
}

/// Default denominator guard for [`mape`].
pub const MAPE_EPSILON: f64 = 0.01;

/// Mean absolute percentage error with a guarded denominator:
/// `100 · mean(|y − ŷ| / max(y, ε))`.
pub fn mape(y: &[f64], y_hat: &[f64], epsilon: f64) -> f64 {
    assert_eq!(y.len(), y_hat.len(), "mape over unequal lengths");
    assert!(!y.is_empty(), "mape over empty vectors");
    100.0
        * y.iter()
            .zip(y_hat)
            .map(|(a, b)| (a - b).abs() / a.max(epsilon))
            .sum::<f64>()
        / y.len() as f64
}

/// Pointwise metric summary for one model on one split.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub tag: String,
    pub mae: f64,
    pub mape: f64,
    pub n_steps: usize,
}

impl MetricReport {
    pub fn to_tsv(&self) -> String {
        format!(
            "model\tmae\tmape\tn_steps\n{}\t{:e}\t{:e}\t{}\n",
            self.tag, self.mae, self.mape, self.n_steps
        )
    }
}

/// Anything that predicts per-step recall probabilities for a sequence and
/// can extrapolate a forgetting trajectory from a fixed history.
pub trait RecallModel {
    fn tag(&self) -> String;

    /// Causal per-step predictions aligned with `seq.steps`.
    fn predict_sequence(&self, seq: &LearnerSequence) -> Vec<f64>;

    /// Predicted recall `delta_days` after the end of `history`, holding the
    /// rest of the anchor step fixed.
    fn predict_future(&self, history: &LearnerSequence, delta_days: f64) -> f64;
}

/// The recurrent network as a model.
pub struct PredictorModel {
    pub params: PredictorParameters,
    pub tag: String,
}

impl RecallModel for PredictorModel {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn predict_sequence(&self, seq: &LearnerSequence) -> Vec<f64> {
        predict_sequence(&self.params, seq)
    }

    fn predict_future(&self, history: &LearnerSequence, delta_days: f64) -> f64 {
        assert!(!history.steps.is_empty(), "empty history");
        let anchor = history.steps.last().unwrap();
        let state = encode(&self.params, &history.steps[..history.steps.len() - 1]);
        let x = anchor.features.with_delta_days(delta_days);
        decode(&self.params, &x, &state)
    }
}

impl RecallModel for BaselineModel {
    fn tag(&self) -> String {
        format!("baseline-{}", self.form.name())
    }

    fn predict_sequence(&self, seq: &LearnerSequence) -> Vec<f64> {
        self.predict(seq)
    }

    fn predict_future(&self, history: &LearnerSequence, delta_days: f64) -> f64 {
        // Descriptors frozen at the anchor step; only the elapsed time sweeps.
        assert!(!history.steps.is_empty(), "empty history");
        let anchor = history.steps.last().unwrap();
        let d: Vec<f64> = self
            .weights
            .iter()
            .map(|row| {
                row.iter()
                    .zip(anchor.features.values())
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect();
        self.form.evaluate(&d, delta_days)
    }
}

/// A preset form driven by the fitted coefficient matrix over augmented
/// descriptors; the network supplies the gradient half of each row.
pub struct ExtractedEquationModel {
    pub params: PredictorParameters,
    pub lambda: SparseCoefficientMatrix,
    pub form: EquationForm,
    pub bias_column: bool,
    pub fd_epsilon: f64,
}

impl ExtractedEquationModel {
    fn descriptor_rows(&self, seq: &LearnerSequence) -> crate::sparsereg::DescriptorSet {
        build_descriptors(
            &self.params,
            std::slice::from_ref(seq),
            GradMode::Exact,
            self.bias_column,
            self.fd_epsilon,
        )
    }
}

impl RecallModel for ExtractedEquationModel {
    fn tag(&self) -> String {
        format!("extracted-{}", self.form.name())
    }

    fn predict_sequence(&self, seq: &LearnerSequence) -> Vec<f64> {
        let set = self.descriptor_rows(seq);
        sr_predict(self.form, &set.matrix, &self.lambda, &set.delta_days)
    }

    fn predict_future(&self, history: &LearnerSequence, delta_days: f64) -> f64 {
        assert!(!history.steps.is_empty(), "empty history");
        let set = self.descriptor_rows(history);
        let last = set.matrix.n_rows() - 1;
        let row = set.matrix.row(last);
        let d: Vec<f64> = (0..self.lambda.z)
            .map(|j| {
                row.iter()
                    .enumerate()
                    .map(|(r, v)| v * self.lambda.values[r * self.lambda.z + j])
                    .sum()
            })
            .collect();
        self.form.evaluate(&d, delta_days)
    }
}

/// Pointwise predictions over a split, summarized as MAE / MAPE.
pub fn evaluate_model(model: &dyn RecallModel, split: &[LearnerSequence]) -> MetricReport {
    let mut y = Vec::new();
    let mut y_hat = Vec::new();
    for seq in split {
        let preds = model.predict_sequence(seq);
        assert_eq!(preds.len(), seq.steps.len());
        for (p, step) in preds.iter().zip(&seq.steps) {
            y.push(step.outcome);
            y_hat.push(*p);
        }
    }
    MetricReport {
        tag: model.tag(),
        mae: mae(&y, &y_hat),
        mape: mape(&y, &y_hat, MAPE_EPSILON),
        n_steps: y.len(),
    }
}

/// Predicted recall trajectory over future days for one learner history:
/// `(day, recall)` points on a uniform grid from 0 to `horizon_days`.
pub fn kstudy_curve(
    model: &dyn RecallModel,
    history: &LearnerSequence,
    horizon_days: f64,
    step_days: f64,
) -> Vec<(f64, f64)> {
    assert!(horizon_days > 0.0, "horizon must be positive");
    assert!(step_days > 0.0, "step must be positive");
    let mut out = Vec::new();
    let mut day = 0.0;
    while day <= horizon_days + 1e-12 {
        out.push((day, model.predict_future(history, day)));
        day += step_days;
    }
    out
}

/// Descriptor-weight table: one labeled row per augmented-descriptor entry,
/// one column per descriptor, then three per-column |weight| mass rows
/// splitting the raw-feature half, the gradient half, and the bias.
pub fn weight_heatmap_export(
    lambda: &SparseCoefficientMatrix,
    feature_names: &[&str],
    bias_column: bool,
) -> String {
    let labels = SparseCoefficientMatrix::row_labels(feature_names, bias_column);
    assert_eq!(
        labels.len(),
        lambda.width,
        "feature naming does not match coefficient width"
    );
    let n = feature_names.len();
    let mut out = String::from("feature");
    for j in 0..lambda.z {
        out.push_str(&format!(",d{}", j + 1));
    }
    out.push('\n');
    for (r, label) in labels.iter().enumerate() {
        out.push_str(label);
        for j in 0..lambda.z {
            out.push_str(&format!(",{:e}", lambda.values[r * lambda.z + j]));
        }
        out.push('\n');
    }
    let mass = |rows: std::ops::Range<usize>, j: usize| -> f64 {
        rows.map(|r| lambda.values[r * lambda.z + j].abs()).sum()
    };
    for (name, range) in [
        ("mass_raw", 0..n),
        ("mass_diff", n..2 * n),
        ("mass_bias", 2 * n..labels.len()),
    ] {
        out.push_str(name);
        for j in 0..lambda.z {
            out.push_str(&format!(",{:e}", mass(range.clone(), j)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{FeatureVector, SequenceStep};
    use crate::predictor::PredictorDims;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mae_hand_fixture() {
        assert!((mae(&[1.0, 0.5], &[0.9, 0.6]) - 0.1).abs() < 1e-12);
        assert_eq!(mae(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    }

    #[test]
    fn mape_hand_fixture() {
        let m = mape(&[1.0, 0.5], &[0.9, 0.6], MAPE_EPSILON);
        assert!((m - 15.0).abs() < 1e-12, "got {m}");
        assert_eq!(mape(&[0.4], &[0.4], MAPE_EPSILON), 0.0);
    }

    #[test]
    fn mape_guards_zero_targets() {
        let m = mape(&[0.0], &[0.01], MAPE_EPSILON);
        assert!(m.is_finite());
        assert!((m - 100.0).abs() < 1e-9); // |0-0.01|/max(0,0.01) = 1
    }

    #[test]
    fn mae_is_symmetric_and_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
        let z: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
        assert!((mae(&y, &z) - mae(&z, &y)).abs() < 1e-15);

        let mut yr: Vec<f64> = y.clone();
        let mut zr: Vec<f64> = z.clone();
        yr.reverse();
        zr.reverse();
        assert!((mae(&y, &z) - mae(&yr, &zr)).abs() < 1e-15);
        assert!((mape(&y, &z, 0.01) - mape(&yr, &zr, 0.01)).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
        let z: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut acc = 0.0;
        for i in 0..25 {
            acc += (y[i] - z[i]).abs();
        }
        assert!((mae(&y, &z) - acc / 25.0).abs() < 1e-15);
    }

    fn fixture_sequence() -> LearnerSequence {
        let steps = [(0.5f64, 1.0f64), (1.5, 0.0), (3.0, 1.0)]
            .iter()
            .enumerate()
            .map(|(i, (delta, y))| SequenceStep {
                features: FeatureVector::new(vec![
                    delta.ln_1p(),
                    0.7,
                    0.3,
                    0.1,
                    0.5,
                    0.7,
                    1.0,
                    0.4,
                ]),
                outcome: *y,
                timestamp: (i as i64 + 1) * 86_400,
                delta_days: *delta,
            })
            .collect();
        LearnerSequence {
            learner_id: "fx".into(),
            steps,
        }
    }

    #[test]
    fn constant_half_model_on_all_ones() {
        // Zero-weight network predicts 0.5 everywhere.
        let model = PredictorModel {
            params: PredictorParameters::zeros(PredictorDims::new(8, 2, 2)),
            tag: "zeros".into(),
        };
        let mut seq = fixture_sequence();
        for s in seq.steps.iter_mut() {
            s.outcome = 1.0;
        }
        let report = evaluate_model(&model, std::slice::from_ref(&seq));
        assert!((report.mae - 0.5).abs() < 1e-12);
        assert!((report.mape - 50.0).abs() < 1e-12);
        assert_eq!(report.n_steps, 3);
    }

    #[test]
    fn perfect_model_scores_zero() {
        // Baseline whose predictions are copied into the outcomes.
        let mut model = BaselineModel::new(EquationForm::Hlr, 8);
        model.weights[0][0] = 0.8;
        let mut seq = fixture_sequence();
        let preds = model.predict(&seq);
        for (s, p) in seq.steps.iter_mut().zip(&preds) {
            s.outcome = *p;
        }
        let report = evaluate_model(&model, &[seq]);
        assert_eq!(report.mae, 0.0);
        assert_eq!(report.mape, 0.0);
    }

    #[test]
    fn evaluate_model_matches_hand_computation_per_kind() {
        let seq = fixture_sequence();
        // Hand MAE for the zero-weight predictor: |y - 0.5| averaged.
        let expect_mae =
            seq.steps.iter().map(|s| (s.outcome - 0.5).abs()).sum::<f64>() / seq.len() as f64;
        let model = PredictorModel {
            params: PredictorParameters::zeros(PredictorDims::new(8, 2, 2)),
            tag: "zeros".into(),
        };
        let report = evaluate_model(&model, std::slice::from_ref(&seq));
        assert!((report.mae - expect_mae).abs() < 1e-15);

        // Baseline with zero weights: p = 2^(-delta).
        let baseline = BaselineModel::new(EquationForm::Hlr, 8);
        let expect: Vec<f64> = seq
            .steps
            .iter()
            .map(|s| (-(s.delta_days)).exp2())
            .collect();
        let got = baseline.predict_sequence(&seq);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }

        // Extracted equation with zero lambda: also 2^(-delta) under hlr.
        let extracted = ExtractedEquationModel {
            params: PredictorParameters::zeros(PredictorDims::new(8, 2, 2)),
            lambda: SparseCoefficientMatrix::zeros(17, 1),
            form: EquationForm::Hlr,
            bias_column: true,
            fd_epsilon: 1e-3,
        };
        let got = extracted.predict_sequence(&seq);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn kstudy_equation_mode_starts_at_one_and_never_rises() {
        let extracted = ExtractedEquationModel {
            params: PredictorParameters::init(PredictorDims::new(8, 3, 3), 9),
            lambda: {
                let mut l = SparseCoefficientMatrix::zeros(17, 1);
                l.values[0] = 0.4;
                l.values[8] = -0.2;
                l.values[16] = 0.3;
                l
            },
            form: EquationForm::Hlr,
            bias_column: true,
            fd_epsilon: 1e-3,
        };
        let curve = kstudy_curve(&extracted, &fixture_sequence(), 14.0, 0.5);
        assert_eq!(curve[0].1, 1.0, "day zero must be certain recall");
        for w in curve.windows(2) {
            assert!(w[1].1 <= w[0].1 + 1e-12, "curve rose at day {}", w[1].0);
            assert!(w[1].1.is_finite());
        }
    }

    #[test]
    fn kstudy_network_mode_is_finite_everywhere() {
        let model = PredictorModel {
            params: PredictorParameters::init(PredictorDims::new(8, 4, 4), 77),
            tag: "net".into(),
        };
        let curve = kstudy_curve(&model, &fixture_sequence(), 30.0, 1.0);
        assert_eq!(curve.len(), 31);
        assert!(curve.iter().all(|(_, p)| p.is_finite() && (0.0..=1.0).contains(p)));
    }

    #[test]
    fn heatmap_zero_lambda_is_all_zero() {
        let lambda = SparseCoefficientMatrix::zeros(5, 2);
        let names = ["a", "b"];
        let table = weight_heatmap_export(&lambda, &names, true);
        for line in table.lines().skip(1) {
            for cell in line.split(',').skip(1) {
                assert_eq!(cell.parse::<f64>().unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn heatmap_single_entry_lands_in_labeled_cell() {
        let mut lambda = SparseCoefficientMatrix::zeros(5, 2);
        // row 3 = ddx_b, column 1 (d2)
        lambda.values[3 * 2 + 1] = 0.75;
        let table = weight_heatmap_export(&lambda, &["a", "b"], true);
        let line = table.lines().find(|l| l.starts_with("ddx_b")).unwrap();
        assert_eq!(line, "ddx_b,0e0,7.5e-1");
    }

    #[test]
    fn heatmap_mass_summary_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lambda = SparseCoefficientMatrix::zeros(7, 3); // n=3 + bias
        for v in lambda.values.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let names = ["a", "b", "c"];
        let table = weight_heatmap_export(&lambda, &names, true);
        let find = |prefix: &str| -> Vec<f64> {
            table
                .lines()
                .find(|l| l.starts_with(prefix))
                .unwrap()
                .split(',')
                .skip(1)
                .map(|v| v.parse().unwrap())
                .collect()
        };
        for j in 0..3 {
            let raw: f64 = (0..3).map(|r| lambda.values[r * 3 + j].abs()).sum();
            let diff: f64 = (3..6).map(|r| lambda.values[r * 3 + j].abs()).sum();
            let bias = lambda.values[6 * 3 + j].abs();
            assert!((find("mass_raw")[j] - raw).abs() < 1e-12);
            assert!((find("mass_diff")[j] - diff).abs() < 1e-12);
            assert!((find("mass_bias")[j] - bias).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_model_is_deterministic() {
        let model = PredictorModel {
            params: PredictorParameters::init(PredictorDims::new(8, 3, 3), 4),
            tag: "net".into(),
        };
        let seqs = vec![fixture_sequence()];
        let a = evaluate_model(&model, &seqs);
        let b = evaluate_model(&model, &seqs);
        assert_eq!(a.mae, b.mae);
        assert_eq!(a.mape, b.mape);
    }
}

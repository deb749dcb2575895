//! Alternating optimization of the network and the sparse regression.
//!
//! One outer round freezes the coefficient matrix and runs N epochs of
//! adaptive-moment descent on `L_T = L_Data + α·L_SR`, then freezes the
//! network and runs N proximal epochs on the sparse-regression objective
//! starting from the current constraint matrix. The finished candidate is
//! pushed into the buffer queue with its validation importance, and the
//! queue's selection strategy supplies the constraint matrix for the next
//! round. With `alternate` off (the ablation arm), both parameter sets are
//! stepped together every epoch instead of phase by phase.
//!
//! During network epochs the differential features inside the residual term
//! come from on-tape central differences, so the term stays first-order
//! differentiable in the weights; the sparse-regression phase uses exact
//! reverse-mode input gradients with the network frozen.
//!
//! Validation MAE of the network drives early stopping: training halts when
//! it fails to improve for `patience` consecutive network epochs. A total
//! epoch budget (or per-phase budget, by flag) caps everything.

use crate::autodiff::{Tape, Tensor, Var};
use crate::bufferqueue::{importance, BufferQueue, QueueError, SelectionStrategy};
use crate::dataset::{DatasetSplit, LearnerSequence};
use crate::equations::EquationForm;
use crate::evaluation::mae;
use crate::opt::{derive_seed, AdamState, EarlyStopper};
use crate::predictor::{
    forward_sequence_vars, input_gradients_fd_vars, predict_sequence, PredictorDims,
    PredictorParameters,
};
use crate::sparsereg::{
    build_descriptors, descriptor_width, optimize_lambda, sr_loss, sr_predict, DescriptorSet,
    GradMode, SparseCoefficientMatrix, SrError, SrHyper,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

const STREAM_INIT: u64 = 1;
const STREAM_QUEUE: u64 = 2;
const STREAM_SHUFFLE_BASE: u64 = 1000;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} loss in {phase} phase (round {round}, epoch {epoch})")]
    NonFiniteLoss {
        phase: &'static str,
        term: &'static str,
        round: usize,
        epoch: usize,
    },
    #[error("non-finite importance factor at round {round}")]
    NonFiniteImportance { round: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Sr(#[from] SrError),
}

/// All trainer knobs. Defaults follow the desk-scale experimental setup:
/// learning rate 4e-3 from the searched range, early stopping with patience
/// 10 on validation MAE, adaptive-moment optimization under a 200-epoch
/// total budget.
#[derive(Clone, Debug)]
pub struct TrainerConfig {
    pub form: EquationForm,
    /// Weight of the equation-residual term in the network objective.
    pub alpha: f64,
    /// L1 weight on the coefficient matrix.
    pub lambda1: f64,
    /// Epochs per phase (N).
    pub epochs_per_phase: usize,
    pub max_outer_rounds: usize,
    pub lr_nn: f64,
    pub lr_sr: f64,
    /// Learners per gradient-accumulation batch.
    pub batch_size: usize,
    pub patience: usize,
    pub strategy: SelectionStrategy,
    pub seed: u64,
    pub hidden_dim: usize,
    pub decoder_hidden: usize,
    /// Central-difference step for the on-tape differential features.
    pub fd_epsilon: f64,
    pub queue_capacity: usize,
    /// Phase-wise alternation (true) or joint stepping (false, ablation).
    pub alternate: bool,
    /// Append a constant bias column to the descriptor rows.
    pub bias_column: bool,
    /// Epoch budget; counts all epochs together unless `budget_per_phase`.
    pub epoch_budget: usize,
    pub budget_per_phase: bool,
    pub prune_tol: f64,
    /// Prediction horizon hook; only 1 (next step) is supported.
    pub sr_horizon: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            form: EquationForm::Hlr,
            alpha: 0.1,
            lambda1: 1e-3,
            epochs_per_phase: 5,
            max_outer_rounds: 20,
            lr_nn: 4e-3,
            lr_sr: 1e-2,
            batch_size: 32,
            patience: 10,
            strategy: SelectionStrategy::Best,
            seed: 42,
            hidden_dim: 64,
            decoder_hidden: 64,
            fd_epsilon: 1e-3,
            queue_capacity: 5,
            alternate: true,
            bias_column: true,
            epoch_budget: 200,
            budget_per_phase: false,
            prune_tol: 1e-3,
            sr_horizon: 1,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.alpha < 0.0 || self.lambda1 < 0.0 {
            return Err(TrainError::BadConfig(format!(
                "alpha ({}) and lambda1 ({}) must be nonnegative",
                self.alpha, self.lambda1
            )));
        }
        if self.epochs_per_phase == 0 || self.max_outer_rounds == 0 {
            return Err(TrainError::BadConfig(
                "epochs_per_phase and max_outer_rounds must be at least 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        if self.sr_horizon != 1 {
            return Err(TrainError::BadConfig(format!(
                "sr_horizon={} is a config hook; only next-step prediction (1) is implemented",
                self.sr_horizon
            )));
        }
        if self.fd_epsilon <= 0.0 {
            return Err(TrainError::BadConfig("fd_epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn dims_for(&self, n_features: usize) -> PredictorDims {
        PredictorDims::new(n_features, self.hidden_dim, self.decoder_hidden)
    }
}

/// Which optimization produced a trace row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Nn,
    Sr,
    Joint,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Nn => "nn",
            Phase::Sr => "sr",
            Phase::Joint => "joint",
        }
    }
}

/// One logged epoch. For network and joint rows `val_mae` is the network's
/// validation MAE; for sparse-regression rows it is the extracted
/// equation's.
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub round: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub l_data: f64,
    pub l_sr: f64,
    pub l_t: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug)]
pub struct QueueSnapshot {
    pub round: usize,
    /// (entry round, importance) pairs in queue order.
    pub entries: Vec<(usize, f64)>,
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
    pub queue_snapshots: Vec<QueueSnapshot>,
    /// Network weights at the end of each completed round.
    pub round_checkpoints: Vec<(usize, PredictorParameters)>,
    pub final_params: PredictorParameters,
    pub final_lambda: SparseCoefficientMatrix,
    pub stopped_early: bool,
    pub nn_epochs: usize,
    pub sr_epochs: usize,
}

impl TrainingTrace {
    /// Delimited log: one row per epoch, full float precision.
    pub fn to_tsv(&self, tag: &str) -> String {
        let mut out = String::from("#trace v1\n");
        out.push_str(&format!("#tag={tag}\n"));
        out.push_str("round\tphase\tepoch\tl_data\tl_sr\tl_t\tval_mae\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:e}\t{:e}\t{:e}\t{:e}\n",
                r.round,
                r.phase.name(),
                r.epoch,
                r.l_data,
                r.l_sr,
                r.l_t,
                r.val_mae
            ));
        }
        out
    }

    pub fn queue_tsv(&self) -> String {
        let mut out = String::from("snapshot_round\tentry_round\timportance\n");
        for snap in &self.queue_snapshots {
            for (round, imp) in &snap.entries {
                out.push_str(&format!("{}\t{}\t{:e}\n", snap.round, round, imp));
            }
        }
        out
    }
}

/// The three loss components over one batch, residual term in
/// central-difference mode (what the network phase differentiates).
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub l_data: f64,
    pub l_sr: f64,
    pub l_t: f64,
}

struct BatchEval {
    theta_grad: Option<Vec<f64>>,
    lambda_grad: Option<Vec<f64>>,
    data_sse: f64,
    sr_sse: f64,
    steps: usize,
}

/// Forward (and optionally backward) over a set of sequences on per-sequence
/// tapes. The equation-residual term is skipped entirely when `alpha` is
/// zero and no coefficient gradient is wanted, so a zero-alpha run is
/// bit-identical to plain predictor training.
fn eval_batch(
    params: &PredictorParameters,
    lambda: &SparseCoefficientMatrix,
    seqs: &[&LearnerSequence],
    config: &TrainerConfig,
    want_theta_grad: bool,
    want_lambda_grad: bool,
) -> BatchEval {
    let z = lambda.z;
    let use_sr = config.alpha > 0.0 || want_lambda_grad;
    let mut theta_grad = want_theta_grad.then(|| vec![0.0; params.dims.param_count()]);
    let mut lambda_grad = want_lambda_grad.then(|| vec![0.0; lambda.values.len()]);
    let mut data_sse = 0.0;
    let mut sr_sse = 0.0;
    let mut steps = 0usize;

    for seq in seqs {
        let tape = Tape::new();
        let pv = params.vars(&tape, want_theta_grad);
        let fwd = forward_sequence_vars(&tape, &pv, seq);

        let mut residuals: Vec<Var> = Vec::with_capacity(seq.steps.len());
        for (pred, step) in fwd.predictions.iter().zip(&seq.steps) {
            let target = tape.scalar_const(step.outcome);
            let e = target - *pred;
            residuals.push(e * e);
        }
        let data_term = tape.concat(&residuals).sum();

        let lambda_cols: Vec<Var> = if use_sr {
            (0..z)
                .map(|j| {
                    let col = Tensor::vector(lambda.column(j));
                    if want_lambda_grad {
                        tape.leaf(col)
                    } else {
                        tape.constant(col)
                    }
                })
                .collect()
        } else {
            Vec::new()
        };

        let sr_term = if use_sr {
            let mut sr_residuals: Vec<Var> = Vec::with_capacity(seq.steps.len());
            for (t, step) in seq.steps.iter().enumerate() {
                let x = step.features.values();
                let grads = input_gradients_fd_vars(&tape, &pv, x, fwd.states[t], config.fd_epsilon);
                let mut parts: Vec<Var> = Vec::with_capacity(2 + grads.len());
                parts.push(tape.constant(Tensor::vector(x.to_vec())));
                parts.extend(grads);
                if config.bias_column {
                    parts.push(tape.scalar_const(1.0));
                }
                let row = tape.concat(&parts);
                let d: Vec<Var> = lambda_cols.iter().map(|c| (row * *c).sum()).collect();
                let delta = tape.scalar_const(step.delta_days);
                let pred_eq = config.form.evaluate_vars(&tape, &d, delta);
                let target = tape.scalar_const(step.outcome);
                let e = target - pred_eq;
                sr_residuals.push(e * e);
            }
            Some(tape.concat(&sr_residuals).sum())
        } else {
            None
        };

        data_sse += data_term.item();
        if let Some(sr) = sr_term {
            sr_sse += sr.item();
        }
        steps += seq.steps.len();

        if want_theta_grad || want_lambda_grad {
            // Objective for gradients: data + α·sr for θ; the sr term alone
            // feeds the coefficient gradient (its own objective).
            let objective = match sr_term {
                Some(sr) if config.alpha > 0.0 => data_term + sr.mul_const(config.alpha),
                _ => data_term,
            };
            let grads = tape.backward(objective);
            if let Some(acc) = theta_grad.as_mut() {
                for (a, g) in acc
                    .iter_mut()
                    .zip(PredictorParameters::gather_grads(&grads, &pv))
                {
                    *a += g;
                }
            }
            if let Some(acc) = lambda_grad.as_mut() {
                // d(sr_sse)/dΛ: rescale out alpha if it was folded in, or
                // backward from the sr term alone when alpha is zero.
                let sr = sr_term.expect("lambda grad requires the sr term");
                let sr_grads = if config.alpha > 0.0 {
                    grads
                } else {
                    tape.backward(sr)
                };
                let scale = if config.alpha > 0.0 { config.alpha } else { 1.0 };
                for (j, col) in lambda_cols.iter().enumerate() {
                    let g = sr_grads.wrt(*col);
                    for (r, gv) in g.data().iter().enumerate() {
                        acc[r * z + j] += gv / scale;
                    }
                }
            }
        }
    }

    BatchEval {
        theta_grad,
        lambda_grad,
        data_sse,
        sr_sse,
        steps,
    }
}

/// `L_T = L_Data + α·L_SR` over a batch, with the coefficient matrix held
/// constant and differential features in central-difference mode.
pub fn total_loss(
    params: &PredictorParameters,
    lambda_bar: &SparseCoefficientMatrix,
    batch: &[LearnerSequence],
    config: &TrainerConfig,
) -> LossParts {
    let refs: Vec<&LearnerSequence> = batch.iter().collect();
    // Always evaluate the sr term here (reporting semantics), even at α=0.
    let mut cfg = config.clone();
    if cfg.alpha == 0.0 {
        cfg.alpha = f64::MIN_POSITIVE; // forces the sr term on; not used as a weight below
    }
    let eval = eval_batch(params, lambda_bar, &refs, &cfg, false, false);
    let n = eval.steps.max(1) as f64;
    let l_data = eval.data_sse / n;
    let l_sr = eval.sr_sse / n + config.lambda1 * lambda_bar.l1_norm();
    LossParts {
        l_data,
        l_sr,
        l_t: l_data + config.alpha * l_sr,
    }
}

fn predictor_val_mae(params: &PredictorParameters, validation: &[LearnerSequence]) -> f64 {
    let mut y = Vec::new();
    let mut p = Vec::new();
    for seq in validation {
        let preds = predict_sequence(params, seq);
        for (pred, step) in preds.iter().zip(&seq.steps) {
            y.push(step.outcome);
            p.push(*pred);
        }
    }
    mae(&y, &p)
}

fn equation_val_mae(set: &DescriptorSet, lambda: &SparseCoefficientMatrix, form: EquationForm) -> f64 {
    let preds = sr_predict(form, &set.matrix, lambda, &set.delta_days);
    mae(&set.y, &preds)
}

/// One epoch of batched adaptive-moment updates on `L_T` with Λ̄ frozen.
/// Returns the epoch-aggregate (L_Data, L_SR-mse) means.
#[allow(clippy::too_many_arguments)]
fn run_nn_epoch(
    params: &mut PredictorParameters,
    adam: &mut AdamState,
    lambda_bar: &SparseCoefficientMatrix,
    train: &[LearnerSequence],
    config: &TrainerConfig,
    epoch_counter: usize,
    round: usize,
    epoch: usize,
) -> Result<(f64, f64), TrainError> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_SHUFFLE_BASE + epoch_counter as u64));
    order.shuffle(&mut rng);

    let mut data_sum = 0.0;
    let mut sr_sum = 0.0;
    let mut total_steps = 0usize;
    for chunk in order.chunks(config.batch_size) {
        let seqs: Vec<&LearnerSequence> = chunk.iter().map(|i| &train[*i]).collect();
        let eval = eval_batch(params, lambda_bar, &seqs, config, true, false);
        if !eval.data_sse.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                phase: "nn",
                term: "data",
                round,
                epoch,
            });
        }
        if !eval.sr_sse.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                phase: "nn",
                term: "sr",
                round,
                epoch,
            });
        }
        let scale = 1.0 / eval.steps.max(1) as f64;
        let mut grad = eval.theta_grad.expect("theta grad requested");
        for g in grad.iter_mut() {
            *g *= scale;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteLoss {
                phase: "nn",
                term: "gradient",
                round,
                epoch,
            });
        }
        adam.step(params.flat_mut(), &grad, config.lr_nn);
        data_sum += eval.data_sse;
        sr_sum += eval.sr_sse;
        total_steps += eval.steps;
    }
    let n = total_steps.max(1) as f64;
    Ok((data_sum / n, sr_sum / n))
}

/// Network phase as a standalone operation: N epochs on `L_T` with the
/// constraint matrix frozen. The returned rows mirror what [`run`] logs.
pub fn train_nn_phase(
    params: &mut PredictorParameters,
    lambda_bar: &SparseCoefficientMatrix,
    train: &[LearnerSequence],
    validation: &[LearnerSequence],
    config: &TrainerConfig,
) -> Result<Vec<TraceRow>, TrainError> {
    config.validate()?;
    let mut adam = AdamState::new(params.dims.param_count());
    let mut rows = Vec::new();
    for epoch in 1..=config.epochs_per_phase {
        let (l_data, l_sr_mse) = run_nn_epoch(
            params,
            &mut adam,
            lambda_bar,
            train,
            config,
            epoch - 1,
            1,
            epoch,
        )?;
        let l_sr = l_sr_mse + config.lambda1 * lambda_bar.l1_norm();
        rows.push(TraceRow {
            round: 1,
            phase: Phase::Nn,
            epoch,
            l_data,
            l_sr,
            l_t: l_data + config.alpha * l_sr,
            val_mae: predictor_val_mae(params, validation),
        });
    }
    Ok(rows)
}

/// Sparse-regression phase as a standalone operation: the network is left
/// untouched and the optimizer runs from Λ̄ on exact-gradient descriptors.
pub fn train_sr_phase(
    params: &PredictorParameters,
    lambda_bar: &SparseCoefficientMatrix,
    train: &[LearnerSequence],
    config: &TrainerConfig,
) -> Result<SparseCoefficientMatrix, TrainError> {
    config.validate()?;
    let set = build_descriptors(
        params,
        train,
        GradMode::Exact,
        config.bias_column,
        config.fd_epsilon,
    );
    let hyper = SrHyper {
        lr: config.lr_sr,
        epochs: config.epochs_per_phase,
        lambda1: config.lambda1,
        prune_tol: config.prune_tol,
    };
    Ok(optimize_lambda(config.form, &set, lambda_bar, hyper)?)
}

struct BudgetCounter {
    nn: usize,
    sr: usize,
    budget: usize,
    per_phase: bool,
}

impl BudgetCounter {
    // A joint epoch performs one epoch of each optimization, so it charges
    // (and requires room on) both counters.
    fn allows(&self, phase: Phase) -> bool {
        if self.per_phase {
            match phase {
                Phase::Nn => self.nn < self.budget,
                Phase::Sr => self.sr < self.budget,
                Phase::Joint => self.nn < self.budget && self.sr < self.budget,
            }
        } else {
            match phase {
                Phase::Joint => self.nn + self.sr + 1 < self.budget,
                _ => self.nn + self.sr < self.budget,
            }
        }
    }

    fn charge(&mut self, phase: Phase) {
        match phase {
            Phase::Nn => self.nn += 1,
            Phase::Sr => self.sr += 1,
            Phase::Joint => {
                self.nn += 1;
                self.sr += 1;
            }
        }
    }
}

/// Full alternating run over a split: network phase, sparse-regression
/// phase, queue update, selection, until the round limit, the epoch budget,
/// or early stopping ends it. Deterministic for a fixed config.
pub fn run(split: &DatasetSplit, config: &TrainerConfig) -> Result<TrainingTrace, TrainError> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if split.validation.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let n = split.train[0].steps.first().map(|s| s.features.len()).ok_or(
        TrainError::EmptySplit("train (first sequence has no steps)"),
    )?;

    let mut params =
        PredictorParameters::init(config.dims_for(n), derive_seed(config.seed, STREAM_INIT));
    let mut adam = AdamState::new(params.dims.param_count());
    let width = descriptor_width(n, config.bias_column);
    let z = config.form.descriptor_count();
    let mut lambda_current = SparseCoefficientMatrix::zeros(width, z);
    let mut lambda_bar = SparseCoefficientMatrix::zeros(width, z);
    let mut queue = BufferQueue::new(config.queue_capacity, derive_seed(config.seed, STREAM_QUEUE));
    let mut stopper = EarlyStopper::new(config.patience);
    let mut budget = BudgetCounter {
        nn: 0,
        sr: 0,
        budget: config.epoch_budget,
        per_phase: config.budget_per_phase,
    };

    let mut rows: Vec<TraceRow> = Vec::new();
    let mut snapshots: Vec<QueueSnapshot> = Vec::new();
    let mut round_checkpoints: Vec<(usize, PredictorParameters)> = Vec::new();
    let mut stopped_early = false;
    let mut epoch_counter = 0usize; // global network-epoch index (shuffle streams)

    'outer: for round in 1..=config.max_outer_rounds {
        let mut halt_after_round = false;

        if config.alternate {
            // Network phase: Λ̄ frozen.
            for epoch in 1..=config.epochs_per_phase {
                if !budget.allows(Phase::Nn) {
                    halt_after_round = true;
                    break;
                }
                let (l_data, l_sr_mse) = run_nn_epoch(
                    &mut params,
                    &mut adam,
                    &lambda_bar,
                    &split.train,
                    config,
                    epoch_counter,
                    round,
                    epoch,
                )?;
                epoch_counter += 1;
                budget.charge(Phase::Nn);
                let l_sr = l_sr_mse + config.lambda1 * lambda_bar.l1_norm();
                let val_mae = predictor_val_mae(&params, &split.validation);
                rows.push(TraceRow {
                    round,
                    phase: Phase::Nn,
                    epoch,
                    l_data,
                    l_sr,
                    l_t: l_data + config.alpha * l_sr,
                    val_mae,
                });
                if stopper.observe(val_mae) {
                    stopped_early = true;
                    halt_after_round = true;
                    break;
                }
            }

            // Sparse-regression phase: θ frozen, exact gradients.
            let train_set = build_descriptors(
                &params,
                &split.train,
                GradMode::Exact,
                config.bias_column,
                config.fd_epsilon,
            );
            let val_set = build_descriptors(
                &params,
                &split.validation,
                GradMode::Exact,
                config.bias_column,
                config.fd_epsilon,
            );
            let frozen_l_data = crate::predictor::data_loss(&params, &split.train);
            let mut lambda = lambda_bar.clone();
            let mut epochs_this_phase = 0usize;
            for epoch in 1..=config.epochs_per_phase {
                if !budget.allows(Phase::Sr) {
                    halt_after_round = true;
                    break;
                }
                // Prune only on the phase's last epoch so the stepwise loop
                // is identical to one optimize_lambda call over N epochs.
                let last = epoch == config.epochs_per_phase;
                let hyper = SrHyper {
                    lr: config.lr_sr,
                    epochs: 1,
                    lambda1: config.lambda1,
                    prune_tol: if last { config.prune_tol } else { 0.0 },
                };
                lambda = optimize_lambda(config.form, &train_set, &lambda, hyper)?;
                budget.charge(Phase::Sr);
                epochs_this_phase += 1;
                let train_preds =
                    sr_predict(config.form, &train_set.matrix, &lambda, &train_set.delta_days);
                let l_sr = sr_loss(&train_set.y, &train_preds, &lambda, config.lambda1);
                rows.push(TraceRow {
                    round,
                    phase: Phase::Sr,
                    epoch,
                    l_data: frozen_l_data,
                    l_sr,
                    l_t: frozen_l_data + config.alpha * l_sr,
                    val_mae: equation_val_mae(&val_set, &lambda, config.form),
                });
            }
            if epochs_this_phase > 0 {
                lambda_current = lambda;
                lambda_current.created_round = round;
            }
        } else {
            // Joint stepping: both parameter sets move every epoch.
            for epoch in 1..=config.epochs_per_phase {
                if !budget.allows(Phase::Joint) {
                    halt_after_round = true;
                    break;
                }
                let mut order: Vec<usize> = (0..split.train.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    config.seed,
                    STREAM_SHUFFLE_BASE + epoch_counter as u64,
                ));
                order.shuffle(&mut rng);
                let mut data_sum = 0.0;
                let mut sr_sum = 0.0;
                let mut total_steps = 0usize;
                let mut lambda_grad_sum = vec![0.0; lambda_current.values.len()];
                for chunk in order.chunks(config.batch_size) {
                    let seqs: Vec<&LearnerSequence> =
                        chunk.iter().map(|i| &split.train[*i]).collect();
                    let eval = eval_batch(&params, &lambda_current, &seqs, config, true, true);
                    if !eval.data_sse.is_finite() {
                        return Err(TrainError::NonFiniteLoss {
                            phase: "joint",
                            term: "data",
                            round,
                            epoch,
                        });
                    }
                    if !eval.sr_sse.is_finite() {
                        return Err(TrainError::NonFiniteLoss {
                            phase: "joint",
                            term: "sr",
                            round,
                            epoch,
                        });
                    }
                    let scale = 1.0 / eval.steps.max(1) as f64;
                    let mut grad = eval.theta_grad.expect("theta grad requested");
                    for g in grad.iter_mut() {
                        *g *= scale;
                    }
                    adam.step(params.flat_mut(), &grad, config.lr_nn);

                    for (acc, g) in lambda_grad_sum
                        .iter_mut()
                        .zip(eval.lambda_grad.expect("lambda grad requested"))
                    {
                        *acc += g;
                    }
                    data_sum += eval.data_sse;
                    sr_sum += eval.sr_sse;
                    total_steps += eval.steps;
                }
                // One full-batch coefficient step per epoch, mirroring the
                // per-epoch proximal schedule of the alternating phase.
                let lscale = 1.0 / total_steps.max(1) as f64;
                for (v, g) in lambda_current.values.iter_mut().zip(&lambda_grad_sum) {
                    *v -= config.lr_sr * g * lscale;
                }
                crate::sparsereg::soft_threshold(
                    &mut lambda_current.values,
                    config.lr_sr * config.lambda1,
                );
                if !lambda_current.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        phase: "joint",
                        term: "sr",
                        round,
                        epoch,
                    });
                }
                epoch_counter += 1;
                budget.charge(Phase::Joint);
                let nsteps = total_steps.max(1) as f64;
                let l_data = data_sum / nsteps;
                let l_sr = sr_sum / nsteps + config.lambda1 * lambda_current.l1_norm();
                let val_mae = predictor_val_mae(&params, &split.validation);
                rows.push(TraceRow {
                    round,
                    phase: Phase::Joint,
                    epoch,
                    l_data,
                    l_sr,
                    l_t: l_data + config.alpha * l_sr,
                    val_mae,
                });
                if stopper.observe(val_mae) {
                    stopped_early = true;
                    halt_after_round = true;
                    break;
                }
            }
            lambda_current.created_round = round;
        }

        // Queue update on validation data.
        let val_set = build_descriptors(
            &params,
            &split.validation,
            GradMode::Exact,
            config.bias_column,
            config.fd_epsilon,
        );
        let l_data_val = crate::predictor::data_loss(&params, &split.validation);
        let val_preds = sr_predict(
            config.form,
            &val_set.matrix,
            &lambda_current,
            &val_set.delta_days,
        );
        let l_sr_val = sr_loss(&val_set.y, &val_preds, &lambda_current, config.lambda1);
        let imp = importance(l_data_val, l_sr_val);
        if !imp.is_finite() {
            return Err(TrainError::NonFiniteImportance { round });
        }
        queue.push(lambda_current.clone(), imp, round);
        snapshots.push(QueueSnapshot {
            round,
            entries: queue.entries().iter().map(|e| (e.round, e.importance)).collect(),
        });
        lambda_bar = queue.select(config.strategy, &lambda_current)?;
        round_checkpoints.push((round, params.clone()));

        if halt_after_round {
            break 'outer;
        }
    }

    Ok(TrainingTrace {
        rows,
        queue_snapshots: snapshots,
        round_checkpoints,
        final_params: params,
        final_lambda: lambda_bar,
        stopped_early,
        nn_epochs: budget.nn,
        sr_epochs: budget.sr,
    })
}

/// Plain predictor training: the network-only ablation arm. Mirrors the
/// epoch schedule, shuffle streams, and stopping rules of [`run`] with the
/// residual term absent.
pub fn train_predictor_only(
    split: &DatasetSplit,
    config: &TrainerConfig,
) -> Result<TrainingTrace, TrainError> {
    let mut cfg = config.clone();
    cfg.alpha = 0.0;
    cfg.strategy = SelectionStrategy::Direct;
    cfg.alternate = false;
    run(split, &cfg)
}

/// Equation-only ablation arm: the network stays at its random
/// initialization and only the coefficient matrix is optimized, for the
/// same total epoch allowance the alternating run would grant the
/// sparse-regression side.
pub fn train_equation_only(
    split: &DatasetSplit,
    config: &TrainerConfig,
) -> Result<TrainingTrace, TrainError> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if split.validation.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let n = split.train[0].steps.first().map(|s| s.features.len()).ok_or(
        TrainError::EmptySplit("train (first sequence has no steps)"),
    )?;
    let params =
        PredictorParameters::init(config.dims_for(n), derive_seed(config.seed, STREAM_INIT));
    let width = descriptor_width(n, config.bias_column);
    let mut lambda = SparseCoefficientMatrix::zeros(width, config.form.descriptor_count());
    let train_set = build_descriptors(
        &params,
        &split.train,
        GradMode::Exact,
        config.bias_column,
        config.fd_epsilon,
    );
    let val_set = build_descriptors(
        &params,
        &split.validation,
        GradMode::Exact,
        config.bias_column,
        config.fd_epsilon,
    );
    let l_data = crate::predictor::data_loss(&params, &split.train);
    let mut stopper = EarlyStopper::new(config.patience);
    let mut rows = Vec::new();
    let mut sr_epochs = 0usize;
    let mut stopped_early = false;

    'outer: for round in 1..=config.max_outer_rounds {
        for epoch in 1..=config.epochs_per_phase {
            if sr_epochs >= config.epoch_budget {
                break 'outer;
            }
            let last = epoch == config.epochs_per_phase && round == config.max_outer_rounds;
            let hyper = SrHyper {
                lr: config.lr_sr,
                epochs: 1,
                lambda1: config.lambda1,
                prune_tol: if last { config.prune_tol } else { 0.0 },
            };
            lambda = optimize_lambda(config.form, &train_set, &lambda, hyper)?;
            sr_epochs += 1;
            let preds = sr_predict(config.form, &train_set.matrix, &lambda, &train_set.delta_days);
            let l_sr = sr_loss(&train_set.y, &preds, &lambda, config.lambda1);
            let val_mae = equation_val_mae(&val_set, &lambda, config.form);
            rows.push(TraceRow {
                round,
                phase: Phase::Sr,
                epoch,
                l_data,
                l_sr,
                l_t: l_data + config.alpha * l_sr,
                val_mae,
            });
            if stopper.observe(val_mae) {
                stopped_early = true;
                break 'outer;
            }
        }
    }
    lambda.created_round = 1;
    Ok(TrainingTrace {
        rows,
        queue_snapshots: Vec::new(),
        round_checkpoints: Vec::new(),
        final_params: params,
        final_lambda: lambda,
        stopped_early,
        nn_epochs: 0,
        sr_epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize, split as split_corpus, SynthConfig};

    fn tiny_config() -> TrainerConfig {
        TrainerConfig {
            hidden_dim: 4,
            decoder_hidden: 4,
            epochs_per_phase: 2,
            max_outer_rounds: 2,
            batch_size: 4,
            ..TrainerConfig::default()
        }
    }

    fn tiny_split(seed: u64, noise: f64) -> DatasetSplit {
        let (seqs, _) = synthesize(&SynthConfig {
            learners: 10,
            items: 4,
            steps_per_learner: 8,
            form: EquationForm::Hlr,
            true_weights: vec![],
            noise_sd: noise,
            seed,
        })
        .unwrap();
        split_corpus(seqs, (0.8, 0.1, 0.1), seed).unwrap()
    }

    #[test]
    fn total_loss_alpha_zero_is_data_loss() {
        let split = tiny_split(3, 0.0);
        let cfg = TrainerConfig {
            alpha: 0.0,
            ..tiny_config()
        };
        let params = PredictorParameters::init(cfg.dims_for(8), 5);
        let lambda = SparseCoefficientMatrix::zeros(17, 1);
        let parts = total_loss(&params, &lambda, &split.train, &cfg);
        let direct = crate::predictor::data_loss(&params, &split.train);
        assert!((parts.l_t - direct).abs() < 1e-12);
        assert!((parts.l_data - direct).abs() < 1e-12);
    }

    #[test]
    fn total_loss_matches_component_sum() {
        let split = tiny_split(7, 0.05);
        let cfg = tiny_config();
        let params = PredictorParameters::init(cfg.dims_for(8), 11);
        let mut lambda = SparseCoefficientMatrix::zeros(17, 1);
        lambda.values[0] = 0.3;
        lambda.values[9] = -0.2;
        let parts = total_loss(&params, &lambda, &split.train, &cfg);

        // Independent composition: data loss via the predictor, sr loss via
        // fd descriptors plus the penalty.
        let l_data = crate::predictor::data_loss(&params, &split.train);
        let set = build_descriptors(&params, &split.train, GradMode::Fd, true, cfg.fd_epsilon);
        let preds = sr_predict(cfg.form, &set.matrix, &lambda, &set.delta_days);
        let l_sr = sr_loss(&set.y, &preds, &lambda, cfg.lambda1);
        assert!((parts.l_data - l_data).abs() < 1e-12);
        assert!((parts.l_sr - l_sr).abs() < 1e-10, "{} vs {}", parts.l_sr, l_sr);
        assert!((parts.l_t - (l_data + cfg.alpha * l_sr)).abs() < 1e-10);
    }

    #[test]
    fn perfect_predictions_leave_only_the_penalty() {
        // Zero-delay steps with outcome 1/2 under the activation form:
        // ŷ = σ(0) = 1/2 (zero weights) and ỹ = σ(d1) with d1 = 0 when
        // only the decay descriptor is nonzero. Both errors vanish.
        use crate::dataset::{FeatureVector, SequenceStep};
        let seq = LearnerSequence {
            learner_id: "p".into(),
            steps: (0..4)
                .map(|i| SequenceStep {
                    features: FeatureVector::new(vec![0.0; 8]),
                    outcome: 0.5,
                    timestamp: i as i64 * 1000,
                    delta_days: 0.0,
                })
                .collect(),
        };
        let cfg = TrainerConfig {
            hidden_dim: 3,
            decoder_hidden: 3,
            ..TrainerConfig::default()
        };
        let params = PredictorParameters::zeros(cfg.dims_for(8));
        let mut lambda = SparseCoefficientMatrix::zeros(17, 2);
        lambda.set_column(1, &[0.25; 17]); // decay descriptor only
        let cfg = TrainerConfig {
            form: EquationForm::ActR,
            ..cfg
        };
        let parts = total_loss(&params, &lambda, &[seq], &cfg);
        let penalty = cfg.lambda1 * lambda.l1_norm();
        assert!((parts.l_t - cfg.alpha * penalty).abs() < 1e-12);
        assert!(parts.l_data.abs() < 1e-12);
        assert!((parts.l_sr - penalty).abs() < 1e-12);
    }

    #[test]
    fn nn_phase_lowers_training_loss() {
        let split = tiny_split(13, 0.02);
        let cfg = TrainerConfig {
            epochs_per_phase: 8,
            ..tiny_config()
        };
        let mut params = PredictorParameters::init(cfg.dims_for(8), 21);
        let lambda = SparseCoefficientMatrix::zeros(17, 1);
        let before = total_loss(&params, &lambda, &split.train, &cfg).l_t;
        train_nn_phase(&mut params, &lambda, &split.train, &split.validation, &cfg).unwrap();
        let after = total_loss(&params, &lambda, &split.train, &cfg).l_t;
        assert!(
            after < before * 0.99,
            "expected ≥1% improvement: {before} -> {after}"
        );
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let split = tiny_split(17, 0.0);
        let cfg = TrainerConfig {
            lr_nn: 0.0,
            ..tiny_config()
        };
        let mut params = PredictorParameters::init(cfg.dims_for(8), 3);
        let before = params.clone();
        let lambda = SparseCoefficientMatrix::zeros(17, 1);
        train_nn_phase(&mut params, &lambda, &split.train, &split.validation, &cfg).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn sr_phase_delegates_to_optimize_lambda_and_freezes_theta() {
        let split = tiny_split(19, 0.05);
        let cfg = tiny_config();
        let params = PredictorParameters::init(cfg.dims_for(8), 29);
        let theta_before = params.clone();
        let lambda_bar = SparseCoefficientMatrix::zeros(17, 1);
        let via_phase = train_sr_phase(&params, &lambda_bar, &split.train, &cfg).unwrap();
        assert_eq!(params, theta_before, "theta must be untouched");

        let set = build_descriptors(&params, &split.train, GradMode::Exact, true, cfg.fd_epsilon);
        let direct = optimize_lambda(
            cfg.form,
            &set,
            &lambda_bar,
            SrHyper {
                lr: cfg.lr_sr,
                epochs: cfg.epochs_per_phase,
                lambda1: cfg.lambda1,
                prune_tol: cfg.prune_tol,
            },
        )
        .unwrap();
        assert_eq!(via_phase, direct);
    }

    #[test]
    fn single_round_trace_shape() {
        let split = tiny_split(23, 0.0);
        let cfg = TrainerConfig {
            epochs_per_phase: 1,
            max_outer_rounds: 1,
            ..tiny_config()
        };
        let trace = run(&split, &cfg).unwrap();
        let nn_rows = trace.rows.iter().filter(|r| r.phase == Phase::Nn).count();
        let sr_rows = trace.rows.iter().filter(|r| r.phase == Phase::Sr).count();
        assert_eq!(nn_rows, 1);
        assert_eq!(sr_rows, 1);
        assert_eq!(trace.queue_snapshots.len(), 1);
        assert_eq!(trace.queue_snapshots[0].entries.len(), 1);
    }

    #[test]
    fn identical_configs_produce_identical_traces() {
        let split = tiny_split(29, 0.05);
        let cfg = tiny_config();
        let a = run(&split, &cfg).unwrap();
        let b = run(&split, &cfg).unwrap();
        assert_eq!(a.to_tsv("x"), b.to_tsv("x"));
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.final_lambda, b.final_lambda);
    }

    #[test]
    fn queue_rounds_strictly_increase() {
        let split = tiny_split(31, 0.02);
        let cfg = TrainerConfig {
            max_outer_rounds: 4,
            ..tiny_config()
        };
        let trace = run(&split, &cfg).unwrap();
        for snap in &trace.queue_snapshots {
            for w in snap.entries.windows(2) {
                assert!(w[1].0 > w[0].0, "entry rounds must increase: {snap:?}");
            }
        }
        let pushed: Vec<usize> = trace.queue_snapshots.iter().map(|s| s.round).collect();
        for w in pushed.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn alpha_zero_direct_no_alternate_equals_predictor_only_training() {
        let split = tiny_split(37, 0.05);
        let cfg = TrainerConfig {
            alpha: 0.0,
            strategy: SelectionStrategy::Direct,
            alternate: false,
            ..tiny_config()
        };
        let joint = run(&split, &cfg).unwrap();
        let standalone = train_predictor_only(&split, &tiny_config()).unwrap();
        assert_eq!(joint.final_params, standalone.final_params);
        let series = |t: &TrainingTrace| -> Vec<f64> { t.rows.iter().map(|r| r.l_data).collect() };
        assert_eq!(series(&joint), series(&standalone));
    }

    #[test]
    fn budget_caps_total_epochs() {
        let split = tiny_split(41, 0.0);
        let cfg = TrainerConfig {
            epochs_per_phase: 3,
            max_outer_rounds: 10,
            epoch_budget: 7,
            ..tiny_config()
        };
        let trace = run(&split, &cfg).unwrap();
        assert!(trace.nn_epochs + trace.sr_epochs <= 7);
        assert_eq!(trace.rows.len(), 7);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad_alpha = TrainerConfig {
            alpha: -0.1,
            ..TrainerConfig::default()
        };
        assert!(matches!(bad_alpha.validate(), Err(TrainError::BadConfig(_))));
        let bad_horizon = TrainerConfig {
            sr_horizon: 2,
            ..TrainerConfig::default()
        };
        assert!(matches!(bad_horizon.validate(), Err(TrainError::BadConfig(_))));
    }
}

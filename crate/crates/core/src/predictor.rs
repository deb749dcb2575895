//! Recurrent recall-probability predictor.
//!
//! The encoder folds a learner's interaction prefix into a memory state with
//! a gated recurrent cell. Each step feeds `[x_t ; y_t ; g1 ; g2]` where the
//! two gap features are `log(1 + repeat_gap_days)` (the elapsed-time feature
//! itself) and `log(1 + sequence_gap_days)` (days since the learner's
//! previous interaction with anything). After the cell update the hidden
//! state is modulated by a forgetting gate driven by the gap features:
//!
//! ```text
//! z_t = [input_t ; h_{t-1}]
//! i, f, o = σ(W_{i,f,o}·z_t + b);  g = tanh(W_g·z_t + b_g)
//! c_t = f ⊙ c_{t-1} + i ⊙ g
//! h_t = o ⊙ tanh(c_t) ⊙ σ(W_gate·[g1; g2] + b_gate)
//! ```
//!
//! The decoder is a two-layer perceptron over `[x_m ; h̃]` with a tanh hidden
//! layer and a sigmoid output, so predictions live strictly inside (0, 1).
//! An empty prefix encodes to the zero state.
//!
//! Besides exact reverse-mode input gradients (`∂ŷ/∂x`), the module offers a
//! central-difference variant built from two recorded forward passes per
//! coordinate. The difference quotient stays on the tape, so gradients with
//! respect to the network weights flow through it with first-order autodiff
//! only; that is what lets the equation-residual term constrain the weights
//! without second-order differentiation.

use crate::autodiff::{input_gradient, Tape, Tensor, Var};
use crate::dataset::{FeatureVector, LearnerSequence, SequenceStep, SECONDS_PER_DAY};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("checkpoint is malformed: {0}")]
    MalformedCheckpoint(String),
}

/// Network dimensions. `input_dim` for the recurrent cell is
/// `n_features + 3` (features, outcome, two gap features).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictorDims {
    pub n_features: usize,
    pub hidden: usize,
    pub decoder_hidden: usize,
}

impl PredictorDims {
    pub fn new(n_features: usize, hidden: usize, decoder_hidden: usize) -> Self {
        PredictorDims {
            n_features,
            hidden,
            decoder_hidden,
        }
    }

    fn cell_input(&self) -> usize {
        self.n_features + 3
    }

    /// (name, rows, cols) for every tensor, in flat-storage order. Biases
    /// are stored as single-column entries.
    fn specs(&self) -> Vec<(&'static str, usize, usize)> {
        let d = self.hidden;
        let zin = self.cell_input() + d;
        let dh = self.decoder_hidden;
        vec![
            ("w_i", d, zin),
            ("b_i", d, 1),
            ("w_f", d, zin),
            ("b_f", d, 1),
            ("w_o", d, zin),
            ("b_o", d, 1),
            ("w_g", d, zin),
            ("b_g", d, 1),
            ("w_gate", d, 2),
            ("b_gate", d, 1),
            ("dec_w1", dh, self.n_features + d),
            ("dec_b1", dh, 1),
            ("dec_w2", 1, dh),
            ("dec_b2", 1, 1),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.specs().iter().map(|(_, r, c)| r * c).sum()
    }
}

/// All trainable weights, stored flat in spec order.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParameters {
    pub dims: PredictorDims,
    data: Vec<f64>,
}

impl PredictorParameters {
    pub fn zeros(dims: PredictorDims) -> Self {
        PredictorParameters {
            dims,
            data: vec![0.0; dims.param_count()],
        }
    }

    /// Seeded init: matrices uniform in ±1/sqrt(fan_in), biases zero.
    pub fn init(dims: PredictorDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(dims.param_count());
        for (name, rows, cols) in dims.specs() {
            if name.starts_with('b') || name == "dec_b1" || name == "dec_b2" {
                data.extend(std::iter::repeat_n(0.0, rows * cols));
            } else {
                let bound = 1.0 / (cols as f64).sqrt();
                data.extend((0..rows * cols).map(|_| rng.random_range(-bound..bound)));
            }
        }
        PredictorParameters { dims, data }
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Borrow one named tensor from the flat storage as (data, rows, cols).
    pub fn tensor(&self, wanted: &str) -> (&[f64], usize, usize) {
        let mut offset = 0;
        for (name, rows, cols) in self.dims.specs() {
            let len = rows * cols;
            if name == wanted {
                return (&self.data[offset..offset + len], rows, cols);
            }
            offset += len;
        }
        unreachable!("unknown tensor '{wanted}'");
    }

    /// Versioned plain-text checkpoint: dims, then one `tensor` line plus a
    /// data line per entry, full float precision.
    pub fn save(&self) -> String {
        let mut out = String::from("#checkpoint v1\n");
        out.push_str(&format!("n={}\n", self.dims.n_features));
        out.push_str(&format!("hidden={}\n", self.dims.hidden));
        out.push_str(&format!("decoder_hidden={}\n", self.dims.decoder_hidden));
        let mut offset = 0;
        for (name, rows, cols) in self.dims.specs() {
            let len = rows * cols;
            out.push_str(&format!("tensor {name} {rows} {cols}\n"));
            let vals: Vec<String> = self.data[offset..offset + len]
                .iter()
                .map(|v| format!("{v:e}"))
                .collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
            offset += len;
        }
        out
    }

    pub fn load(text: &str) -> Result<Self, PredictorError> {
        let mut lines = text.lines().peekable();
        match lines.next() {
            Some(l) if l.trim() == "#checkpoint v1" => {}
            other => {
                return Err(PredictorError::MalformedCheckpoint(format!(
                    "bad magic line {other:?}"
                )))
            }
        }
        let mut dim_kv = std::collections::HashMap::new();
        while let Some(line) = lines.peek() {
            if line.starts_with("tensor ") {
                break;
            }
            let line = lines.next().unwrap();
            if let Some((k, v)) = line.split_once('=') {
                let v: usize = v.trim().parse().map_err(|e| {
                    PredictorError::MalformedCheckpoint(format!("bad dim '{line}': {e}"))
                })?;
                dim_kv.insert(k.trim().to_string(), v);
            }
        }
        let get = |k: &str| {
            dim_kv
                .get(k)
                .copied()
                .ok_or_else(|| PredictorError::MalformedCheckpoint(format!("missing dim '{k}'")))
        };
        let dims = PredictorDims::new(get("n")?, get("hidden")?, get("decoder_hidden")?);
        let mut data = Vec::with_capacity(dims.param_count());
        for (name, rows, cols) in dims.specs() {
            let header = lines.next().ok_or_else(|| {
                PredictorError::MalformedCheckpoint(format!("missing tensor '{name}'"))
            })?;
            let expect = format!("tensor {name} {rows} {cols}");
            if header.trim() != expect {
                return Err(PredictorError::MalformedCheckpoint(format!(
                    "expected '{expect}', found '{header}'"
                )));
            }
            let values = lines.next().ok_or_else(|| {
                PredictorError::MalformedCheckpoint(format!("missing data for '{name}'"))
            })?;
            let parsed: Result<Vec<f64>, _> =
                values.split_whitespace().map(str::parse::<f64>).collect();
            let parsed = parsed.map_err(|e| {
                PredictorError::MalformedCheckpoint(format!("bad value in '{name}': {e}"))
            })?;
            if parsed.len() != rows * cols {
                return Err(PredictorError::MalformedCheckpoint(format!(
                    "tensor '{name}' has {} values, expected {}",
                    parsed.len(),
                    rows * cols
                )));
            }
            data.extend(parsed);
        }
        Ok(PredictorParameters { dims, data })
    }

    /// Load every tensor onto a tape, as leaves when `trainable`. Weight
    /// entries load as matrices, biases as vectors.
    pub fn vars<'t>(&self, tape: &'t Tape, trainable: bool) -> ParamVars<'t> {
        let mut offset = 0;
        let mut load = |rows: usize, cols: usize, matrix: bool| -> Var<'t> {
            let len = rows * cols;
            let slice = self.data[offset..offset + len].to_vec();
            offset += len;
            let tensor = if matrix {
                Tensor::matrix(rows, cols, slice)
            } else {
                Tensor::vector(slice)
            };
            if trainable {
                tape.leaf(tensor)
            } else {
                tape.constant(tensor)
            }
        };
        let d = self.dims.hidden;
        let zin = self.dims.cell_input() + d;
        let dh = self.dims.decoder_hidden;
        let n = self.dims.n_features;
        ParamVars {
            dims: self.dims,
            w_i: load(d, zin, true),
            b_i: load(d, 1, false),
            w_f: load(d, zin, true),
            b_f: load(d, 1, false),
            w_o: load(d, zin, true),
            b_o: load(d, 1, false),
            w_g: load(d, zin, true),
            b_g: load(d, 1, false),
            w_gate: load(d, 2, true),
            b_gate: load(d, 1, false),
            dec_w1: load(dh, n + d, true),
            dec_b1: load(dh, 1, false),
            dec_w2: load(1, dh, true),
            dec_b2: load(1, 1, false),
        }
    }

    /// Collect dLoss/dθ for leaves created by [`Self::vars`], flat order.
    pub fn gather_grads(grads: &crate::autodiff::Gradients<'_>, pv: &ParamVars<'_>) -> Vec<f64> {
        let mut out = Vec::new();
        for v in pv.ordered() {
            out.extend_from_slice(grads.wrt(v).data());
        }
        out
    }
}

/// Tape-resident view of the parameters.
pub struct ParamVars<'t> {
    pub dims: PredictorDims,
    pub w_i: Var<'t>,
    pub b_i: Var<'t>,
    pub w_f: Var<'t>,
    pub b_f: Var<'t>,
    pub w_o: Var<'t>,
    pub b_o: Var<'t>,
    pub w_g: Var<'t>,
    pub b_g: Var<'t>,
    pub w_gate: Var<'t>,
    pub b_gate: Var<'t>,
    pub dec_w1: Var<'t>,
    pub dec_b1: Var<'t>,
    pub dec_w2: Var<'t>,
    pub dec_b2: Var<'t>,
}

impl<'t> ParamVars<'t> {
    fn ordered(&self) -> [Var<'t>; 14] {
        [
            self.w_i, self.b_i, self.w_f, self.b_f, self.w_o, self.b_o, self.w_g, self.b_g,
            self.w_gate, self.b_gate, self.dec_w1, self.dec_b1, self.dec_w2, self.dec_b2,
        ]
    }
}

/// Hidden memory state at a point in a learner's history. Bounded inside
/// (-1, 1) elementwise by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub hidden: Vec<f64>,
}

impl MemoryState {
    pub fn zeros(hidden_dim: usize) -> Self {
        MemoryState {
            hidden: vec![0.0; hidden_dim],
        }
    }
}

/// Per-step encoder inputs derived from a sequence: the raw feature vector,
/// the observed outcome, and the two gap features.
fn step_gaps(steps: &[SequenceStep]) -> Vec<(f64, f64)> {
    steps
        .iter()
        .enumerate()
        .map(|(t, step)| {
            let g_repeat = step.features.values()[0];
            let g_seq = if t == 0 {
                0.0
            } else {
                let days = (step.timestamp - steps[t - 1].timestamp) as f64 / SECONDS_PER_DAY;
                days.max(0.0).ln_1p()
            };
            (g_repeat, g_seq)
        })
        .collect()
}

fn cell_step<'t>(
    tape: &'t Tape,
    pv: &ParamVars<'t>,
    h: Var<'t>,
    c: Var<'t>,
    input: Var<'t>,
    gaps: Var<'t>,
) -> (Var<'t>, Var<'t>) {
    let z = tape.concat(&[input, h]);
    let i_gate = (pv.w_i.matmul(z) + pv.b_i).sigmoid();
    let f_gate = (pv.w_f.matmul(z) + pv.b_f).sigmoid();
    let o_gate = (pv.w_o.matmul(z) + pv.b_o).sigmoid();
    let cand = (pv.w_g.matmul(z) + pv.b_g).tanh();
    let c_next = f_gate * c + i_gate * cand;
    let forget = (pv.w_gate.matmul(gaps) + pv.b_gate).sigmoid();
    let h_next = o_gate * c_next.tanh() * forget;
    (h_next, c_next)
}

/// Decoder: `σ(MLP([x ; h]))`, scalar output.
pub fn decode_vars<'t>(tape: &'t Tape, pv: &ParamVars<'t>, x: Var<'t>, state: Var<'t>) -> Var<'t> {
    let joint = tape.concat(&[x, state]);
    let hidden = (pv.dec_w1.matmul(joint) + pv.dec_b1).tanh();
    (pv.dec_w2.matmul(hidden) + pv.dec_b2).sigmoid()
}

/// Full causal pass over a sequence: the prediction for each step uses only
/// the state accumulated from earlier steps.
pub struct SequenceForward<'t> {
    /// `ŷ_t`, scalar vars.
    pub predictions: Vec<Var<'t>>,
    /// State available *before* step t (zero state at t = 0).
    pub states: Vec<Var<'t>>,
}

pub fn forward_sequence_vars<'t>(
    tape: &'t Tape,
    pv: &ParamVars<'t>,
    seq: &LearnerSequence,
) -> SequenceForward<'t> {
    let d = pv.dims.hidden;
    let gaps = step_gaps(&seq.steps);
    let mut h = tape.constant(Tensor::vector(vec![0.0; d]));
    let mut c = tape.constant(Tensor::vector(vec![0.0; d]));
    let mut predictions = Vec::with_capacity(seq.steps.len());
    let mut states = Vec::with_capacity(seq.steps.len());
    for (t, step) in seq.steps.iter().enumerate() {
        let x = tape.constant(Tensor::vector(step.features.values().to_vec()));
        states.push(h);
        predictions.push(decode_vars(tape, pv, x, h));
        let (g1, g2) = gaps[t];
        let mut input_data = step.features.values().to_vec();
        input_data.push(step.outcome);
        input_data.push(g1);
        input_data.push(g2);
        let input = tape.constant(Tensor::vector(input_data));
        let gap_v = tape.constant(Tensor::vector(vec![g1, g2]));
        let (h2, c2) = cell_step(tape, pv, h, c, input, gap_v);
        h = h2;
        c = c2;
    }
    SequenceForward {
        predictions,
        states,
    }
}

/// Fold a prefix into a memory state. The empty prefix is the zero state.
pub fn encode(params: &PredictorParameters, prefix: &[SequenceStep]) -> MemoryState {
    let d = params.dims.hidden;
    if prefix.is_empty() {
        return MemoryState::zeros(d);
    }
    let tape = Tape::new();
    let pv = params.vars(&tape, false);
    let gaps = step_gaps(prefix);
    let mut h = tape.constant(Tensor::vector(vec![0.0; d]));
    let mut c = tape.constant(Tensor::vector(vec![0.0; d]));
    for (t, step) in prefix.iter().enumerate() {
        let (g1, g2) = gaps[t];
        let mut input_data = step.features.values().to_vec();
        input_data.push(step.outcome);
        input_data.push(g1);
        input_data.push(g2);
        let input = tape.constant(Tensor::vector(input_data));
        let gap_v = tape.constant(Tensor::vector(vec![g1, g2]));
        let (h2, c2) = cell_step(&tape, &pv, h, c, input, gap_v);
        h = h2;
        c = c2;
    }
    MemoryState {
        hidden: h.value().data().to_vec(),
    }
}

/// States available before each step of a sequence (no gradients).
pub fn forward_states(params: &PredictorParameters, seq: &LearnerSequence) -> Vec<MemoryState> {
    let tape = Tape::new();
    let pv = params.vars(&tape, false);
    forward_sequence_vars(&tape, &pv, seq)
        .states
        .iter()
        .map(|s| MemoryState {
            hidden: s.value().data().to_vec(),
        })
        .collect()
}

/// Predict the recall probability for features `x` given a memory state.
pub fn decode(params: &PredictorParameters, x: &FeatureVector, state: &MemoryState) -> f64 {
    let tape = Tape::new();
    let pv = params.vars(&tape, false);
    let xv = tape.constant(Tensor::vector(x.values().to_vec()));
    let sv = tape.constant(Tensor::vector(state.hidden.clone()));
    decode_vars(&tape, &pv, xv, sv).item()
}

/// Causal per-step predictions over a whole sequence (no gradients).
pub fn predict_sequence(params: &PredictorParameters, seq: &LearnerSequence) -> Vec<f64> {
    let tape = Tape::new();
    let pv = params.vars(&tape, false);
    forward_sequence_vars(&tape, &pv, seq)
        .predictions
        .iter()
        .map(Var::item)
        .collect()
}

/// Mean squared error over every step of the batch.
pub fn data_loss(params: &PredictorParameters, batch: &[LearnerSequence]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in batch {
        let preds = predict_sequence(params, seq);
        for (p, step) in preds.iter().zip(&seq.steps) {
            let e = step.outcome - p;
            total += e * e;
            count += 1;
        }
    }
    assert!(count > 0, "data_loss over an empty batch");
    total / count as f64
}

/// Exact reverse-mode `∂ŷ/∂x` with the state held constant.
pub fn input_gradients(
    params: &PredictorParameters,
    x: &FeatureVector,
    state: &MemoryState,
) -> Vec<f64> {
    let tape = Tape::new();
    let pv = params.vars(&tape, false);
    let xv = tape.leaf(Tensor::vector(x.values().to_vec()));
    let sv = tape.constant(Tensor::vector(state.hidden.clone()));
    let out = decode_vars(&tape, &pv, xv, sv);
    input_gradient(out, xv).data().to_vec()
}

/// Central-difference input gradients recorded on an existing tape, so the
/// result stays differentiable with respect to any parameter leaves in
/// `pv`. Returns one scalar var per input coordinate.
pub fn input_gradients_fd_vars<'t>(
    tape: &'t Tape,
    pv: &ParamVars<'t>,
    x: &[f64],
    state: Var<'t>,
    epsilon: f64,
) -> Vec<Var<'t>> {
    assert!(epsilon > 0.0, "epsilon must be positive, got {epsilon}");
    let scale = 1.0 / (2.0 * epsilon);
    (0..x.len())
        .map(|i| {
            let mut plus = x.to_vec();
            plus[i] += epsilon;
            let mut minus = x.to_vec();
            minus[i] -= epsilon;
            let xp = tape.constant(Tensor::vector(plus));
            let xm = tape.constant(Tensor::vector(minus));
            let fp = decode_vars(tape, pv, xp, state);
            let fm = decode_vars(tape, pv, xm, state);
            (fp - fm).mul_const(scale)
        })
        .collect()
}

/// Central-difference input gradients as plain values (two forward passes
/// per coordinate).
pub fn input_gradients_fd(
    params: &PredictorParameters,
    x: &FeatureVector,
    state: &MemoryState,
    epsilon: f64,
) -> Vec<f64> {
    let tape = Tape::new();
    let pv = params.vars(&tape, false);
    let sv = tape.constant(Tensor::vector(state.hidden.clone()));
    input_gradients_fd_vars(&tape, &pv, x.values(), sv, epsilon)
        .iter()
        .map(Var::item)
        .collect()
}

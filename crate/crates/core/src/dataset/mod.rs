//! Interaction logs, feature derivation, learner sequences, synthetic
//! corpora, and learner-level splits.
//!
//! The canonical feature set has eight components per interaction, covering
//! elapsed time, review history, session state, and word difficulty:
//!
//! | index | definition |
//! |-------|------------|
//! | 1 | `log(1 + delta_days)` |
//! | 2 | `log(1 + history_seen)` |
//! | 3 | `log(1 + history_correct)` |
//! | 4 | `log(1 + history_seen − history_correct)` |
//! | 5 | `history_correct / max(history_seen, 1)` |
//! | 6 | `log(1 + session_seen)` |
//! | 7 | `session_correct / max(session_seen, 1)` |
//! | 8 | item difficulty (corpus mean failure rate, 0.5 when unseen) |
//!
//! Elapsed times are converted from seconds to days before log scaling;
//! half-life style equations are conventionally written in days. Nothing
//! downstream hardcodes the count — width is read from the data — so an
//! alternative featurizer can widen or narrow the set.

mod parse;
mod synth;

pub use parse::{parse_log, ColumnSchema, ParseOutcome, RejectedRow};
pub use synth::{synthesize, SynthConfig, SynthTruth};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Difficulty assigned to an item never seen in the difficulty table.
pub const UNSEEN_DIFFICULTY: f64 = 0.5;

/// Names of the canonical eight features, aligned with `FeatureVector`.
pub const FEATURE_NAMES: [&str; 8] = [
    "log1p_delta_days",
    "log1p_history_seen",
    "log1p_history_correct",
    "log1p_history_wrong",
    "history_accuracy",
    "log1p_session_seen",
    "session_accuracy",
    "item_difficulty",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema error: column '{0}' not found in header")]
    MissingColumn(String),
    #[error("split ratios must be nonnegative and sum to 1, got {0:?}")]
    BadRatios((f64, f64, f64)),
    #[error("need at least {needed} learners for the requested split, got {got}")]
    TooFewLearners { needed: usize, got: usize },
    #[error("degenerate synthesis config: {0}")]
    DegenerateSynth(String),
    #[error("input contains no data rows")]
    EmptyInput,
}

/// One learner x word exposure with outcome and history counters.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionRecord {
    pub learner_id: String,
    pub item_id: String,
    /// Seconds since epoch.
    pub timestamp: i64,
    /// Seconds since the previous exposure of this item by this learner;
    /// zero for a first exposure.
    pub delta_t: f64,
    /// Fraction recalled in the session, in [0, 1].
    pub recall_outcome: f64,
    pub history_seen: u32,
    pub history_correct: u32,
    pub session_seen: u32,
    pub session_correct: u32,
}

impl InteractionRecord {
    /// Check the record invariants; returns a violation description.
    pub fn check(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.recall_outcome) {
            return Err(format!("recall_outcome {} outside [0,1]", self.recall_outcome));
        }
        if self.history_correct > self.history_seen {
            return Err(format!(
                "history_correct {} exceeds history_seen {}",
                self.history_correct, self.history_seen
            ));
        }
        if self.session_correct > self.session_seen {
            return Err(format!(
                "session_correct {} exceeds session_seen {}",
                self.session_correct, self.session_seen
            ));
        }
        if !(self.delta_t >= 0.0) {
            return Err(format!("delta_t {} is negative or NaN", self.delta_t));
        }
        Ok(())
    }
}

/// The n-dimensional descriptor input x.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Copy with the elapsed-time feature replaced by `log(1 + days)`.
    pub fn with_delta_days(&self, days: f64) -> Self {
        let mut values = self.values.clone();
        values[0] = days.ln_1p();
        FeatureVector { values }
    }
}

/// One featurized interaction inside a learner sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceStep {
    pub features: FeatureVector,
    pub outcome: f64,
    pub timestamp: i64,
    /// Days since the previous exposure of the same item (the raw value
    /// behind the first feature component).
    pub delta_days: f64,
}

/// All interactions of one learner, ordered by timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerSequence {
    pub learner_id: String,
    pub steps: Vec<SequenceStep>,
}

impl LearnerSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Learner-level partition of a corpus.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<LearnerSequence>,
    pub validation: Vec<LearnerSequence>,
    pub test: Vec<LearnerSequence>,
}

impl DatasetSplit {
    pub fn total_learners(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

/// Corpus-level mean failure rate per item.
pub fn item_difficulty_table(records: &[InteractionRecord]) -> HashMap<String, f64> {
    let mut acc: HashMap<String, (f64, usize)> = HashMap::new();
    for r in records {
        let e = acc.entry(r.item_id.clone()).or_insert((0.0, 0));
        e.0 += 1.0 - r.recall_outcome;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (fail, n))| (k, fail / n as f64))
        .collect()
}

pub(crate) fn features_from_counters(
    delta_days: f64,
    history_seen: u32,
    history_correct: u32,
    session_seen: u32,
    session_correct: u32,
    difficulty: f64,
) -> FeatureVector {
    let hs = history_seen as f64;
    let hc = history_correct as f64;
    let ss = session_seen as f64;
    let sc = session_correct as f64;
    FeatureVector::new(vec![
        delta_days.ln_1p(),
        hs.ln_1p(),
        hc.ln_1p(),
        (hs - hc).ln_1p(),
        hc / hs.max(1.0),
        ss.ln_1p(),
        sc / ss.max(1.0),
        difficulty,
    ])
}

/// Group records into per-learner sequences with derived features. The
/// difficulty table is computed from the full input before featurization.
/// Deterministic: learners are emitted in id order, steps in timestamp
/// order (stable for ties).
pub fn featurize(records: &[InteractionRecord]) -> Vec<LearnerSequence> {
    let difficulty = item_difficulty_table(records);
    let mut grouped: BTreeMap<&str, Vec<&InteractionRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry(&r.learner_id).or_default().push(r);
    }
    grouped
        .into_iter()
        .map(|(learner_id, mut rows)| {
            rows.sort_by_key(|r| r.timestamp);
            let steps = rows
                .into_iter()
                .map(|r| {
                    let delta_days = r.delta_t / SECONDS_PER_DAY;
                    let diff = difficulty
                        .get(&r.item_id)
                        .copied()
                        .unwrap_or(UNSEEN_DIFFICULTY);
                    SequenceStep {
                        features: features_from_counters(
                            delta_days,
                            r.history_seen,
                            r.history_correct,
                            r.session_seen,
                            r.session_correct,
                            diff,
                        ),
                        outcome: r.recall_outcome,
                        timestamp: r.timestamp,
                        delta_days,
                    }
                })
                .collect();
            LearnerSequence {
                learner_id: learner_id.to_string(),
                steps,
            }
        })
        .collect()
}

/// Shuffle learners with the seed, then partition: validation and test take
/// the floor of their ratios, the remainder goes to train.
pub fn split(
    sequences: Vec<LearnerSequence>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    let (rt, rv, rs) = ratios;
    let sum = rt + rv + rs;
    if !(rt >= 0.0 && rv >= 0.0 && rs >= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadRatios(ratios));
    }
    let needed = [rt, rv, rs].iter().filter(|r| **r > 0.0).count();
    if sequences.len() < needed {
        return Err(DatasetError::TooFewLearners {
            needed,
            got: sequences.len(),
        });
    }
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let total = sequences.len();
    let n_val = (rv * total as f64).floor() as usize;
    let n_test = (rs * total as f64).floor() as usize;
    let n_train = total - n_val - n_test;

    let mut slots: Vec<Option<LearnerSequence>> = sequences.into_iter().map(Some).collect();
    let take = |slots: &mut Vec<Option<LearnerSequence>>, idxs: &[usize]| {
        idxs.iter()
            .map(|&i| slots[i].take().expect("index taken twice"))
            .collect::<Vec<_>>()
    };
    let train = take(&mut slots, &order[..n_train]);
    let validation = take(&mut slots, &order[n_train..n_train + n_val]);
    let test = take(&mut slots, &order[n_train + n_val..]);
    Ok(DatasetSplit {
        train,
        validation,
        test,
    })
}

//! Memory-behavior modeling toolkit: a recurrent recall-probability
//! predictor, classical memory equations (half-life regression, power-law
//! forgetting, activation decay), a differential sparse-regression layer
//! that evolves those equations from data, and an alternating trainer that
//! couples the two through a buffer queue of candidate coefficient matrices.

pub mod autodiff;
pub mod bufferqueue;
pub mod dataset;
pub mod equations;
pub mod evaluation;
pub mod opt;
pub mod predictor;
pub mod sparsereg;
pub mod trainer;

pub use autodiff::{Tape, Tensor, Var};
pub use dataset::{DatasetSplit, FeatureVector, InteractionRecord, LearnerSequence, SequenceStep};
pub use equations::{BaselineModel, EquationForm};
pub use bufferqueue::{BufferQueue, SelectionStrategy};
pub use predictor::{MemoryState, PredictorDims, PredictorParameters};
pub use evaluation::MetricReport;
pub use sparsereg::{AugmentedDescriptorMatrix, SparseCoefficientMatrix};
pub use trainer::{TrainerConfig, TrainingTrace};

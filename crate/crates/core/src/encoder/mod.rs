//! Patch sequences and the stacked recurrent classifier that fuses them.

mod baseline;
mod checkpoint;
mod extract;
mod lstm;
mod sequence;
mod train;

pub use baseline::{train_baseline, Baseline, BaselineKind, LinearSoftmax};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use extract::{FeatureExtractor, GridExtractor};
pub use lstm::{aggregate, argmax, loss, predict, Aggregation, Backward, LossConfig, LstmLayer, Prediction, StackedLstm, DEFAULT_HIDDEN, PROB_FLOOR};
pub use sequence::{build_sequence, random_crop, FeatureScaler, PatchSequence, SequenceDataset};
pub use train::{evaluate, fit, train, EncoderConfig, EpochStats, LstmObjective, OptimConfig, TrainReport, Trainable};

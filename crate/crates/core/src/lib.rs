//! Difficulty-aware contrastive knowledge tracing.
//!
//! Interaction logs are grouped into student sequences, items get a
//! correctness-rate difficulty, and a mixed attention/convolution encoder is
//! trained on response prediction plus a contrastive objective whose hard
//! negatives flip responses and reflect difficulties.

// Index loops read better in the numeric kernels, and `!(x < y)` style
// checks are deliberate: they also reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod augment;
pub mod autograd;
pub mod config;
pub mod dataset;
pub mod difficulty;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod training;

pub use augment::{AugmentationConfig, AugmentationPipeline, Mode, ReplacementIndex, Strategy};
pub use config::ExperimentConfig;
pub use dataset::{
    kfold_splits, load_interactions, split_dataset, windows, DataSplit, Dataset, Interaction, SequenceBatch, SplitRatio,
    Step, StudentSequence, TextMap, Vocab,
};
pub use difficulty::{compute_ctt, DifficultySource, DifficultyTable, Entry, ItemKind, View};
pub use encoder::{Model, ModelConfig, Role};
pub use error::{Error, Result};
pub use metrics::{auc, rmse, PredictionRecord};
pub use tensor::Tensor;
pub use text::{fit_text_model, TextDiffModel, TextModelConfig, TextPair, TextRegressor};
pub use training::{train, EpochRecord, TrainOutcome, Trainer, TrainingConfig};

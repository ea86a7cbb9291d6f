//! Zero-shot classification by jointly training a word-vector
//! transformation network Φ and a bilinear label embedding W.
//!
//! An image `x` with visual features `Θ(x)` is scored against a class `y`
//! by `Θ(x)ᵀ W Φ(y)`, where `Φ(y)` transforms the class-name word vector.
//! Φ is additionally trained with margin-ranking constraints that ask the
//! attribute description of each training image to be closer, after the
//! transformation, to its own class name than to any other. At test time
//! unseen classes are scored from their names alone.

pub mod attribute_scorer;
pub mod data_io;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod label_embedding;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod transform_net;
pub mod wordspace;

pub use data_io::{DatasetPaths, ModelCheckpoint, TrainingMode, ZslDataset};
pub use error::{ErrorKind, Result, ZslError};
pub use eval::{classify_zero_shot, normalized_per_class_accuracy, top_k_images, EvalResult};
pub use label_embedding::{score_all, BilinearMap, JointModel};
pub use synth::{generate_synthetic, Synthetic, SyntheticSpec};
pub use tensor::Matrix;
pub use trainer::{cross_validate, train, CvReport, EpochRecord, TrainConfig, TrainReport};
pub use transform_net::{Margin, TransformNet};
pub use wordspace::WordSpace;

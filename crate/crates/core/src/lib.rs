//! Adversarial learnable point cloud augmentation.
//!
//! An augmentor network produces a per-sample shape transform and per-point
//! displacement; a classifier learns from original and augmented clouds. Both
//! are trained jointly with opposing objectives.

pub mod augmentor;
pub mod classifier;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod trainer;

pub use augmentor::{AugmentDraw, AugmentedBatch, Augmentor, AugmentorConfig, AugmentorOutput};
pub use classifier::{Classifier, ClassifierConfig, ClassifierOutput, PointNetClassifier};
pub use dataio::{Dataset, LoadOptions, Primitive, Sample, Split, SynthConfig};
pub use error::{Error, Result};
pub use eval::{AblationToggles, CorruptionSetting, RetrievalResult, RobustnessRow};
pub use geometry::{AffineAugmentation, ConventionalDaParams, GravityAxis, PointCloud};
pub use losses::{ClassProbabilities, LossReport, LossWeights};
pub use nn::{Parameters, PerPointFeatures, ShapeFeature};
pub use optim::OptimizerKind;
pub use trainer::{
    Baseline, EpochMetrics, Objective, TrainConfig, TrainMode, TrainSetup, TrainingState,
};

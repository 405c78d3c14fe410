//! Regressors for the effective conductivity: a volume-fraction bypass, a
//! feature network, image networks and their sums.

pub mod arch;
pub mod net;
pub mod pipeline;
pub mod train;

pub use net::{
    image_tensor, scale_contrast, AleatoricPrediction, Branch, FrozenParts, HybridNet, ModelConfig, ModelKind, OutputMap, Samples, BRANCHES,
};
pub use train::{augment_translate, fit, multistage_train, FitHistory, FitOptions, MultistageConfig, StageRecord};
pub use pipeline::{init_model, samples_for, train_on_dataset, ImageInputs, TrainOutcome, TrainPlan};

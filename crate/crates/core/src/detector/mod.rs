//! The CNN cloud detector: a small conv stack + dense head scoring the
//! cloud-sensitive bands of a scene, trained in two stages, persisted in the
//! MSDM container. Mitigation variants (all 13 input bands, sqrt(2)-wider
//! layers, two extra conv layers) are pure configuration.

mod arch;
mod container;
mod model;
mod train;

pub use arch::{ArchConfig, ConvSpec};
pub use container::{load_model, model_from_bytes, model_to_bytes, save_model};
pub use model::{build_detector, DetectorModel};
pub(crate) use model::WeightMode;
pub use train::{
    loss_weighted_bce, lr_schedule, train_two_stage, EpochStats, TrainConfig, TrainedDetector,
    TrainingHistory, CONFIDENCE_EPSILON, FALSE_POSITIVE_WEIGHT, LR_DECAY_RATE,
};

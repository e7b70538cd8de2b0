//! Desk-scale training harness: synthetic scenes with planted boxes, a toy
//! set-prediction task, a training loop with random poll ratios, and the
//! sampler statistics tracked during training (share of polled locations
//! inside boxes, overlap of polled locations between epochs).

pub mod matching;
pub mod model;
pub mod optim;
pub mod scene;
pub mod stats;
pub mod train;

pub use matching::{best_assignment, match_and_loss, set_loss, MAX_PREDICTIONS};
pub use model::{scene_loss, DetectorConfig, DetectorNet, DetectorParams};
pub use optim::{Optimizer, OptimizerConfig};
pub use scene::{generate_scene, position_embeddings, scene_set, GridBox, SceneConfig, SyntheticScene, Target};
pub use stats::{compute_stats, in_box_fraction, sample_iou, EpochStats};
pub use train::{
    evaluate_loss, sample_indices, snapshot_instance, train, train_from, train_with_progress, write_stats_csv, TrainConfig, TrainRun,
    STATS_HEADER,
};

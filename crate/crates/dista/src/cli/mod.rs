//! Command-line surface: flat-file run configs, binary checkpoints, CSV
//! metrics, and the train / eval / gradcheck / ablate entry points.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;

pub use checkpoint::{
    apply_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use commands::{
    build_datasets, cmd_ablate, cmd_eval, cmd_gradcheck, cmd_train, DirLock, ABLATE_AXES,
};
pub use config::{load_config, DatasetChoice, RunConfig};
pub use metrics::{MetricsRow, METRICS_HEADER};

//! Two-block networks, the SGD training loop, evaluation, checkpoints, and
//! the experiment presets.

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod train;

pub use arch::{count_filters, ArchSpec, DatasetKind, LayerKind, LayerSpec, ModelLabel};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{parse_config, ResolvedConfig, RunConfig, TrainConfig};
pub use experiment::{preset, Preset, RunManifest, RunRecord, PRESET_NAMES};
pub use model::{build_model, Model};
pub use optim::{lr_schedule, sgd_step};
pub use train::{evaluate, run_epochs, train, EpochMetrics, Metrics, TrainState};

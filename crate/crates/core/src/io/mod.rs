//! Files: PNG codecs, dataset folders, `key = value` configs, checkpoints, visualizations.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod viz;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, TrainMeta};
pub use codec::{read_frame, read_mask, write_frame, write_mask};
pub use config::{read_train_config, train_config_from_text};
pub use dataset::{read_dataset, read_sequence, write_sequence};

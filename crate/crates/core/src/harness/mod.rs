//! Configuration, training, checkpoints, evaluation and the command line driver.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod model;
pub mod optim;
pub mod plot;
pub mod train;

pub use checkpoint::Checkpoint;
pub use cli::{run, Cli, Command};
pub use config::{RunConfig, ROOT_ENV};
pub use data::{generate_dataset, load_split, Sample};
pub use model::{Model, ModelConfig};
pub use optim::{AdamW, OptimConfig};
pub use train::{evaluate_layers, evaluate_model, load_model, prepare_all, train, StepRecord, TrainOutcome};

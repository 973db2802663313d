//! Command-line driver: configuration, model assembly, the two training
//! stages, evaluation, the ablation harness, and the self-check suites.

pub mod commands;
pub mod config;
pub mod model;
pub mod selfcheck;
pub mod train;

pub use commands::{cmd_ablate, cmd_eval, cmd_gen_data, cmd_selfcheck, cmd_train_stage1, cmd_train_stage2};
pub use config::RunConfig;
pub use model::{embed_all, load_checkpoint, save_checkpoint, stage1_forward, BatchNoise, Stage1Model};
pub use train::{run_ablation, train_stage1, train_stage2, BoxAnchor};

//! Library side of the `tpcn` command: run configuration, the subcommand
//! implementations and SVG plotting.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

pub use commands::{
    cmd_eval, cmd_gen_synthetic, cmd_plot, cmd_predict, cmd_train, DatasetManifest, PredictionFile, TrainOverrides,
};
pub use config::RunConfig;
pub use error::{CliError, CliResult};

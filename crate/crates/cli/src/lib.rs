//! Library behind the `mfkrig` binary: benchmark campaigns on the analytical
//! test pairs, CSV input/output and the JSON model file format.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod commands;
pub mod config;
pub mod csv_io;
pub mod error;
pub mod model_file;

pub use benchmark::{run_benchmark, run_replications, summarize, ResultsRow};
pub use commands::{fit_cmd, predict_cmd};
pub use config::{BenchmarkConfig, FitConfig, ModelKind};
pub use error::{CliError, ParseError};
pub use model_file::{ModelFile, FORMAT_VERSION};

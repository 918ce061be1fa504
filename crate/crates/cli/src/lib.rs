//! Config parsing and run orchestration behind the `strato` binary.

pub mod config;
pub mod run;

pub use config::{parse_config, Command, RunConfig};
pub use run::{run, RunOutcome};

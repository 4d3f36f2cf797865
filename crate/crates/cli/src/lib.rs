//! Configuration-driven experiment runner: parse a TOML config, run every seed, write
//! CSV/JSON tables and SVG charts.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod plots;
pub mod results;
pub mod runner;

pub use config::{dump_config, load_config, parse_config, ConfigError, ExperimentConfig};
pub use plots::emit_plots;
pub use results::{read_results, write_results, ResultsTable};
pub use runner::run_experiment;

/// Environment variable overriding `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "CLTA_OUTPUT_ROOT";

/// Directory a config's run writes into: `<root>/<id>`.
pub fn run_dir(cfg: &ExperimentConfig) -> std::path::PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(std::path::PathBuf::from).unwrap_or_else(|| cfg.output_dir.clone());
    root.join(&cfg.id)
}

//! Experiment harness: TOML configs and presets, dotted-path overrides,
//! validation with line-level diagnostics, seeded sweeps that write metrics,
//! manifests and CSV aggregates, and run summaries.

pub mod checks;
pub mod config;
pub mod error;
pub mod overrides;
pub mod presets;
pub mod run;
pub mod summarize;
pub mod validate;

pub use error::{HarnessError, Result};

/// Default output root, overridden by this environment variable.
pub const OUTPUT_ENV: &str = "VALUELAB_OUT";

pub fn default_output_root() -> std::path::PathBuf {
    std::env::var_os(OUTPUT_ENV)
        .map(Into::into)
        .unwrap_or_else(|| "valuelab-out".into())
}

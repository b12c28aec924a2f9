//! Operator commands behind the `mlckpt` binary.

pub mod bench;
pub mod catalog;
pub mod run;
pub mod scenario;

use std::fmt;

use mlckpt_core::config::{Config, ConfigError};

/// Printed as `ERROR <code>: <detail>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: String,
    pub detail: String,
}

impl CliError {
    pub fn new(code: impl Into<String>, detail: impl Into<String>) -> Self {
        Self { code: code.into(), detail: detail.into() }
    }

    pub fn usage(detail: impl Into<String>) -> Self {
        Self::new("usage", detail)
    }

    pub fn exit_code(&self) -> i32 {
        if self.code == "usage" {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ERROR {}: {}", self.code, self.detail.replace('\n', " "))
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(e.code(), e.to_string())
    }
}

impl From<mlckpt_client::ClientError> for CliError {
    fn from(e: mlckpt_client::ClientError) -> Self {
        CliError::new(e.code(), e.to_string())
    }
}

impl From<mlckpt_backend::BackendError> for CliError {
    fn from(e: mlckpt_backend::BackendError) -> Self {
        CliError::new(e.code(), e.to_string())
    }
}

pub fn io_error(what: &str, e: std::io::Error) -> CliError {
    CliError::new("IO_ERROR", format!("{what}: {e}"))
}

pub fn load_config(path: &std::path::Path) -> Result<Config, CliError> {
    Ok(Config::load(path)?)
}

/// `simulate`: grid search over the scenario, CSV rows plus the optimum.
pub fn simulate(text: &str) -> Result<(String, mlckpt_core::interval::optimize::Optimum), CliError> {
    let scenario = mlckpt_core::interval::Scenario::from_json(text).map_err(|e| CliError::new(e.code(), e.to_string()))?;
    let optimum = scenario.run();
    Ok((mlckpt_core::interval::render_csv(&optimum.points), optimum))
}

/// Milliseconds with microsecond resolution, as printed in reports.
pub fn ms(d: std::time::Duration) -> String {
    format!("{:.3}", d.as_secs_f64() * 1000.0)
}

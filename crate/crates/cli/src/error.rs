//! Exit-code classification: 1 for configuration and input errors, 2 for
//! failures while running.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "configuration error: {e:#}"),
            CliError::Runtime(e) => write!(f, "runtime error: {e:#}"),
        }
    }
}

pub fn config_error(msg: impl fmt::Display) -> CliError {
    CliError::Config(anyhow::anyhow!("{msg}"))
}

pub trait Classify<T> {
    fn or_config(self, what: impl FnOnce() -> String) -> CliResult<T>;
    fn or_runtime(self, what: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_config(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::Config(e.into().context(what())))
    }

    fn or_runtime(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::Runtime(e.into().context(what())))
    }
}

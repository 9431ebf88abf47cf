use std::fmt;

use vpnpp::Error;

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    MissingDependency(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingDependency(_) => 3,
            CliError::Data(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::MissingDependency(m) => write!(f, "missing dependency: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidConfig(_) | Error::OutOfRange(_) | Error::Incompatible(_) => CliError::Config(msg),
            Error::MissingCheckpoint(_) => CliError::MissingDependency(msg),
            _ => CliError::Data(msg),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

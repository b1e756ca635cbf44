use std::fmt;
use std::process::ExitCode;

/// Failure classes and their exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage = 1,
    Data = 2,
    Run = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn usage(message: impl fmt::Display) -> Self {
        Self { kind: Kind::Usage, error: anyhow::anyhow!("{message}") }
    }

    pub fn data(message: impl fmt::Display) -> Self {
        Self { kind: Kind::Data, error: anyhow::anyhow!("{message}") }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind as u8)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Tags a fallible result with its failure class.
pub trait Classify<T> {
    fn or_data(self) -> CliResult<T>;
    fn or_run(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_data(self) -> CliResult<T> {
        self.map_err(|e| CliError { kind: Kind::Data, error: e.into() })
    }

    fn or_run(self) -> CliResult<T> {
        self.map_err(|e| CliError { kind: Kind::Run, error: e.into() })
    }
}

/// Model errors that stem from unreadable inputs are data errors; the rest
/// are training or evaluation failures.
pub fn classify_model(e: maskmatch_model::ModelError) -> CliError {
    use maskmatch_model::ModelError as M;
    let kind = match &e {
        M::Io { .. } | M::Checksum { .. } | M::Checkpoint { .. } | M::Pairs(_) | M::Score(_) => Kind::Data,
        M::Config(_) | M::Domain(_) | M::UnknownArchitecture(_) => Kind::Usage,
        _ => Kind::Run,
    };
    CliError { kind, error: e.into() }
}

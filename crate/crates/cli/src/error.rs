use std::path::Path;

use weave_core::Error;

/// A CLI failure with a stable kind name and exit code.
#[derive(Debug)]
pub enum CliError {
    MissingPath(String),
    Config(String),
    VersionMismatch(String),
    Checkpoint(String),
    InvalidInput(String),
    NonFinite(String),
    Io(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::MissingPath(_) => "missing-path",
            Self::Config(_) => "config",
            Self::VersionMismatch(_) => "version-mismatch",
            Self::Checkpoint(_) => "checkpoint-mismatch",
            Self::InvalidInput(_) => "invalid-input",
            Self::NonFinite(_) => "non-finite",
            Self::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::MissingPath(_) => 3,
            Self::Config(_) => 4,
            Self::VersionMismatch(_) => 5,
            Self::Checkpoint(_) => 6,
            Self::InvalidInput(_) => 7,
            Self::NonFinite(_) => 8,
            Self::Io(_) => 9,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Self::MissingPath(m)
            | Self::Config(m)
            | Self::VersionMismatch(m)
            | Self::Checkpoint(m)
            | Self::InvalidInput(m)
            | Self::NonFinite(m)
            | Self::Io(m) => m,
        }
    }

    /// `error kind=<kind> code=<n> message="<escaped>"` on one line.
    pub fn line(&self) -> String {
        let msg: String = self
            .message()
            .chars()
            .flat_map(|c| match c {
                '"' => vec!['\\', '"'],
                '\\' => vec!['\\', '\\'],
                '\n' | '\r' => vec![' '],
                c => vec![c],
            })
            .collect();
        format!("error kind={} code={} message=\"{msg}\"", self.kind(), self.exit_code())
    }

    pub fn from_io(path: &Path, e: std::io::Error) -> Self {
        let m = format!("{}: {e}", path.display());
        if e.kind() == std::io::ErrorKind::NotFound {
            Self::MissingPath(m)
        } else {
            Self::Io(m)
        }
    }

    pub fn missing(what: &str) -> Self {
        Self::MissingPath(format!("no {what} given (set it in the config or pass a flag)"))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Io { path, source } => Self::from_io(&path, source),
            Error::Version { .. } | Error::Magic { .. } => Self::VersionMismatch(m),
            Error::Checkpoint(_) => Self::Checkpoint(m),
            Error::NonFinite { .. } => Self::NonFinite(m),
            _ => Self::InvalidInput(m),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

//! Error categories and their exit codes. Failures print one line on stderr:
//! `error: <category>: <message>`.

use std::fmt;
use std::path::Path;

use ibg_core::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Internal,
    MissingFile,
    ConfigConflict,
    IncompatibleCheckpoint,
    InvalidData,
    Io,
}

impl Category {
    pub fn exit_code(self) -> u8 {
        match self {
            Category::Internal => 1,
            // 2 is clap's usage-error code
            Category::MissingFile => 3,
            Category::ConfigConflict => 4,
            Category::IncompatibleCheckpoint => 5,
            Category::InvalidData => 6,
            Category::Io => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Internal => "internal",
            Category::MissingFile => "missing-file",
            Category::ConfigConflict => "config-conflict",
            Category::IncompatibleCheckpoint => "incompatible-checkpoint",
            Category::InvalidData => "invalid-data",
            Category::Io => "io",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        CliError {
            category,
            message: message.into(),
        }
    }

    pub fn internal(e: impl fmt::Display) -> Self {
        CliError::new(Category::Internal, e.to_string())
    }

    /// Io error annotated with the path involved.
    pub fn io(e: std::io::Error, path: &Path) -> Self {
        let category = if e.kind() == std::io::ErrorKind::NotFound {
            Category::MissingFile
        } else {
            Category::Io
        };
        CliError::new(category, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // keep the report on one line
        let msg = self.message.replace('\n', " ");
        write!(f, "error: {}: {msg}", self.category.name())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        let category = if e.kind() == std::io::ErrorKind::NotFound {
            Category::MissingFile
        } else {
            Category::Io
        };
        CliError::new(category, e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let category = match &e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Category::MissingFile,
            Error::Io(_) => Category::Io,
            Error::Config(_) => Category::ConfigConflict,
            Error::Format { .. } | Error::Capability(_) => Category::IncompatibleCheckpoint,
            Error::Parse { .. } | Error::Validation { .. } | Error::Truncation { .. } => Category::InvalidData,
            _ => Category::Internal,
        };
        CliError::new(category, e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::new(Category::Io, e.to_string())
    }
}

use std::path::{Path, PathBuf};

/// Failures of the file-facing layer. Each variant has its own exit code
/// and a stable kind tag so that scripts can tell them apart.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: no such file")]
    MissingFile { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    DimensionMismatch(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Core(#[from] mo3tr_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::MissingFile { .. } => "missing-file",
            Self::Io { .. } => "io",
            Self::Schema(_) => "schema",
            Self::DimensionMismatch(_) => "dimension-mismatch",
            Self::Format { .. } => "format",
            Self::Core(mo3tr_core::Error::Config(_)) => "config",
            Self::Core(mo3tr_core::Error::Data(_)) => "data",
            Self::Core(mo3tr_core::Error::Evaluation(_)) => "evaluation",
            Self::Core(mo3tr_core::Error::Spec(_)) => "spec",
            Self::Core(_) => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::MissingFile { .. } => 3,
            Self::Io { .. } => 4,
            Self::Schema(_) => 5,
            Self::DimensionMismatch(_) => 6,
            Self::Format { .. } => 7,
            Self::Core(_) => 8,
        }
    }

    /// `error kind=<kind>: <message>` on one line.
    pub fn line(&self) -> String {
        let msg: String = self.to_string().chars().map(|c| if c == '\n' || c == '\r' { ' ' } else { c }).collect();
        format!("error kind={}: {}", self.kind(), msg)
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| io_error(path, e))
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

pub fn io_error(path: &Path, e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::MissingFile { path: path.to_path_buf() }
    } else {
        CliError::Io {
            path: path.to_path_buf(),
            source: e,
        }
    }
}

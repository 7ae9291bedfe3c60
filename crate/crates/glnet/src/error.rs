use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] glnet_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("unsupported platform: {0}")]
    Unsupported(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Error {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Whether the error stems from invalid input rather than a runtime
    /// failure.
    pub fn is_usage(&self) -> bool {
        use glnet_core::Error as E;
        match self {
            Error::Config(_) => true,
            Error::Core(e) => matches!(
                e,
                E::Config(_) | E::CanvasTooSmall { .. } | E::ModeMismatch { .. } | E::PatchExceedsImage { .. } | E::DegenerateStride { .. }
            ),
            _ => false,
        }
    }
}

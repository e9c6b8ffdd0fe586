use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HtrmError {
    /// Caller violated a precondition: bad shape, bad argument, bad config.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error in {what} at byte offset {offset}: {reason}")]
    Format {
        what: String,
        offset: u64,
        reason: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<HtrmError>,
    },
}

pub type Result<T> = std::result::Result<T, HtrmError>;

impl HtrmError {
    pub fn usage(msg: impl Into<String>) -> Self {
        HtrmError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        HtrmError::Data(msg.into())
    }

    pub fn format(what: impl Into<String>, offset: u64, reason: impl Into<String>) -> Self {
        HtrmError::Format {
            what: what.into(),
            offset,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        HtrmError::Io {
            path: path.into(),
            source,
        }
    }

    /// Tag an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        HtrmError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &HtrmError {
        match self {
            HtrmError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            HtrmError::Usage(_) => 2,
            HtrmError::Format { .. } | HtrmError::Data(_) | HtrmError::Io { .. } => 3,
            HtrmError::Numeric(_) => 4,
            HtrmError::Stage { .. } => unreachable!(),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}

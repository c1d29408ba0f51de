use thiserror::Error;

/// Failure codes for the binary tensor and checkpoint formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    BadVersion,
    Truncated,
    BadHeader,
    TrailingBytes,
}

impl FormatErrorKind {
    pub fn code(self) -> &'static str {
        match self {
            Self::BadMagic => "bad magic",
            Self::BadVersion => "bad version",
            Self::Truncated => "truncated",
            Self::BadHeader => "bad header",
            Self::TrailingBytes => "trailing bytes",
        }
    }
}

fn format_message(what: &str, kind: FormatErrorKind) -> String {
    match kind {
        FormatErrorKind::Truncated => format!("truncated {what}"),
        _ => format!("{what}: {}", kind.code()),
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{}", format_message(what, *kind))]
    Format { what: &'static str, kind: FormatErrorKind },

    #[error("config hash mismatch: expected {expected}, found {found}")]
    ConfigHash { expected: String, found: String },

    #[error("non-finite loss in stage {stage}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss { stage: u32, epoch: usize, batch: usize },

    #[error("i/o error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Self::Shape { op, detail }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(msg.into())
    }

    pub(crate) fn format(what: &'static str, kind: FormatErrorKind) -> Self {
        Self::Format { what, kind }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    /// The format failure code, if this is a format error.
    pub fn format_kind(&self) -> Option<FormatErrorKind> {
        match self {
            Self::Format { kind, .. } => Some(*kind),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

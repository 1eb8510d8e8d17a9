use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("extent overflow: {0}")]
    ExtentOverflow(String),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("class {class} absent from the training set")]
    ClassMissingFromTrain { class: u16 },
    #[error("class {class} cannot be placed in both train and test sets: {reason}")]
    ClassPlacement { class: u16, reason: String },
    #[error("class {class} has {count} labeled pixels, at least 2 are required")]
    ClassTooSmall { class: u16, count: usize },

    #[error("class {class} has no samples, average accuracy undefined")]
    EmptyClassRow { class: usize },
    #[error("kappa undefined: chance agreement denominator is zero")]
    DegenerateKappa,
    #[error("confusion matrix is empty")]
    EmptyConfusion,
}

impl Error {
    /// Short stable identifier for machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion(_) => "unsupported_version",
            Error::Truncated { .. } => "truncated",
            Error::ExtentOverflow(_) => "extent_overflow",
            Error::Malformed(_) => "malformed",
            Error::TrailingBytes(_) => "trailing_bytes",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::ClassMissingFromTrain { .. } => "class_missing_from_train",
            Error::ClassPlacement { .. } => "class_placement",
            Error::ClassTooSmall { .. } => "class_too_small",
            Error::EmptyClassRow { .. } => "empty_class_row",
            Error::DegenerateKappa => "degenerate_kappa",
            Error::EmptyConfusion => "empty_confusion",
        }
    }

    /// True for violations of data constraints (as opposed to malformed input).
    pub fn is_constraint_violation(&self) -> bool {
        matches!(
            self,
            Error::ClassMissingFromTrain { .. }
                | Error::ClassPlacement { .. }
                | Error::ClassTooSmall { .. }
                | Error::EmptyClassRow { .. }
                | Error::DegenerateKappa
                | Error::EmptyConfusion
        )
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

use std::io;

use thiserror::Error;

/// Error type shared by every module of the crate.
///
/// Variants are grouped so the command-line front end can map them onto its
/// stable error prefixes (`E_CONFIG`, `E_FORMAT`, `E_SHAPE`, `E_STATE`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("degenerate frame: {0}")]
    DegenerateFrame(String),
    #[error("degenerate keypoints: {0}")]
    DegenerateKeypoints(String),
    #[error("empty mask: {0}")]
    EmptyMask(String),
    #[error("singular transform")]
    SingularTransform,
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Machine-parsable category prefix used by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "E_CONFIG",
            Error::Format(_) | Error::Json(_) | Error::Io(_) => "E_FORMAT",
            Error::Shape(_) | Error::DegenerateFrame(_) => "E_SHAPE",
            Error::State(_)
            | Error::DegenerateKeypoints(_)
            | Error::EmptyMask(_)
            | Error::SingularTransform => "E_STATE",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

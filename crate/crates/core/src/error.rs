use thiserror::Error;

/// Errors raised across the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of bounds: {0}")]
    Index(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("log map undefined at rotation angle {angle} (principal branch requires < pi)")]
    Branch { angle: f64 },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by invalid user configuration or inputs.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Dimension(_) | Error::Index(_) | Error::Layout(_)
        )
    }

    /// True for errors raised by non-finite or out-of-domain numerics.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::Branch { .. } | Error::Geometry(_) | Error::Contract(_)
        )
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("could not place {placed} of {requested} trees after {attempts} attempts")]
    OverDense {
        requested: usize,
        placed: usize,
        attempts: usize,
    },

    #[error("invalid density regions: {0}")]
    InvalidRegions(String),

    #[error("world validation failed: {0}")]
    InvalidWorld(String),

    #[error("point ({x:.3}, {y:.3}, {z:.3}) is outside the grid")]
    OutOfRange { x: f64, y: f64, z: f64 },

    #[error("grid geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("invalid mission config: {0}")]
    InvalidConfig(String),

    #[error("malformed file: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported order: requested {requested}, maximum served is {max}")]
    UnsupportedOrder { requested: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("infeasible parameters: {0}")]
    Infeasible(String),

    #[error("dimension floor violated: d = {d} but {what} requires d >= {floor}")]
    DimensionFloor { d: usize, floor: usize, what: &'static str },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid terrain spec: {0}")]
    InvalidSpec(String),
    #[error("query ({x:.4}, {y:.4}) lies outside the heightfield extent")]
    OutOfBounds { x: f64, y: f64 },
    #[error("invalid heightfield: {0}")]
    InvalidHeightfield(String),
    #[error("no valid foothold candidates: {0}")]
    NoFootholds(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Config(String),
    #[error("simulation: {0}")]
    Simulation(String),
    #[error("training: {0}")]
    Training(String),
    #[error(transparent)]
    Nn(#[from] puma_nn::NnError),
    #[error("{context}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
    let context = context.into();
    move |source| Error::Io { context, source }
}

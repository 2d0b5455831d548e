use thiserror::Error;

use crate::market_data::TimeScale;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("timestamps not strictly increasing at row {row}")]
    Order { row: usize },
    #[error("invalid bar at row {row}: {reason}")]
    Data { row: usize, reason: String },
    #[error("cannot resample {from} to {to}: target must be strictly coarser")]
    Scale { from: TimeScale, to: TimeScale },
    #[error("invalid generator spec: {0}")]
    Spec(String),
}

impl From<csv::Error> for DataError {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => DataError::Io(io),
            other => DataError::Format(format!("{other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ChanError {
    #[error("cannot remove inclusions from an empty series")]
    Empty,
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("time index {t} out of range for series of length {len}")]
    Index { t: usize, len: usize },
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("forward cache does not belong to the current parameters")]
    StaleCache,
    #[error("replay buffer holds {have} transitions, {need} required")]
    NotReady { have: usize, need: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("insufficient data: {0}")]
    Data(String),
    #[error("step called after the episode finished")]
    Episode,
    #[error("invalid price {0}")]
    Price(f64),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least {need} points, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("series lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error("equity values must be positive and finite")]
    NonPositive,
}

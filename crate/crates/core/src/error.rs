use thiserror::Error;

/// Errors raised anywhere in the simulation and calibration stack.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A rate law was evaluated outside its domain or produced non-finite values.
    #[error("kinetics evaluation failed: {message} (state = {state:?})")]
    Kinetics { message: String, state: Vec<f64> },

    #[error("simulation failed at t = {t}: {message}")]
    Simulation { t: f64, message: String },

    #[error("integration failed at t = {t} (h = {h:e}): {message}")]
    Integration { t: f64, h: f64, message: String },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn kinetics(msg: impl Into<String>, state: &[f64]) -> Self {
        Error::Kinetics {
            message: msg.into(),
            state: state.to_vec(),
        }
    }
}

use thiserror::Error;

/// Failures surfaced to the command line, each with its exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("simulation failed: {0}")]
    Simulation(String),
    #[error("budget exhausted without a usable result: {0}")]
    Budget(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// 0 success, 2 configuration or input error, 3 simulation failure,
    /// 4 budget exhausted without result.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Data(_) | CliError::Io(_) => 2,
            CliError::Simulation(_) => 3,
            CliError::Budget(_) => 4,
        }
    }
}

impl From<adrfit::Error> for CliError {
    fn from(e: adrfit::Error) -> Self {
        use adrfit::Error as E;
        match e {
            E::Config(_) => CliError::Config(e.to_string()),
            E::InvalidInput(_) | E::DegenerateData(_) => CliError::Data(e.to_string()),
            E::Kinetics { .. } | E::Simulation { .. } | E::Integration { .. } => CliError::Simulation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

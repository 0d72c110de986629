use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config {
        line: Option<usize>,
        message: String,
    },

    #[error("domain error in `{primitive}`")]
    Domain { primitive: &'static str },

    #[error("{what} factorization residual {residual:.3e} exceeds tolerance")]
    Factorization { what: String, residual: f64 },

    #[error("non-finite value in cascade step {step}")]
    NonFinite { step: String },

    #[error("numeric blowup at t = {t}: state {state:?}")]
    Blowup { t: f64, state: Vec<f64> },

    #[error("truth signal b = {b} at t = {t} violates the known direction or the bound b_bar")]
    TruthSignal { t: f64, b: f64 },

    #[error("|b| = {b:.3e} below division guard at t = {t}")]
    DivisionGuard { t: f64, b: f64 },

    #[error("time went backwards: {t} after {last}")]
    TimeRegression { last: f64, t: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(message: impl Into<String>) -> Self {
        Error::Config {
            line: None,
            message: message.into(),
        }
    }

    /// Process exit code: 2 for rejected configuration, 1 for anything that
    /// went wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            _ => 1,
        }
    }
}

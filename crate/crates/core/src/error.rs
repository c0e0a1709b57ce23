use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A problem is too large to enumerate or discretise.
    #[error("capacity exceeded: {what} needs {needed}, limit is {limit}")]
    Capacity {
        what: &'static str,
        needed: u128,
        limit: u128,
    },

    /// Value iteration stopped before reaching the requested tolerance.
    #[error(
        "value iteration did not converge after {iterations} iterations (residual {residual:e})"
    )]
    NonConvergence { iterations: usize, residual: f64 },

    /// A configuration value violates an invariant. `field` is the dotted
    /// path inside the config file.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    /// A payoff or state variable became NaN or infinite.
    #[error("non-finite value ({what}) at epoch {epoch}")]
    NonFinite { epoch: u64, what: &'static str },

    /// A sweep cell failed; carries the cell's coordinates.
    #[error("sweep cell (eps={eps}, kappa={kappa}, gamma={gamma}, replicate={replicate}) failed: {source}")]
    Cell {
        eps: f64,
        kappa: f64,
        gamma: f64,
        replicate: u32,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

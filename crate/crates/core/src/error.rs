use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A model parameter fell outside its admissible range.
    #[error("parameter `{field}` out of range: {value}")]
    OutOfRange { field: &'static str, value: f64 },

    #[error("{0}")]
    Domain(String),

    /// The batch-size scan reached its cap before the upper interval
    /// endpoint dropped below the belief.
    #[error("batch-size search exhausted at K_max = {k_max}")]
    SearchExhausted { k_max: usize },

    #[error("insufficient signals: need {needed}, got {got}")]
    InsufficientSignals { needed: usize, got: usize },

    #[error("cost guard: {what} exceeds limit {limit}")]
    CostGuard { what: &'static str, limit: usize },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Rejects even or zero batch sizes.
pub(crate) fn check_odd(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        Err(Error::domain(format!("batch size must be odd, got {k}")))
    } else {
        Ok(())
    }
}

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Caller violated a precondition (parameter range, index, shape).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("exact enumeration needs {required} evaluations, budget is {budget}; use the Monte Carlo average instead")]
    BudgetExceeded { required: f64, budget: f64 },

    /// Every atom was deleted, so the retained mass is zero.
    #[error("deletion retained no mass after {attempts} attempt(s)")]
    DegenerateDeletion { attempts: usize },

    /// The unconditional bound |f * D_n * ... | <= 2^k n(n+1)...(n+k-1) was breached.
    #[error("pointwise derivative bound breached: |integrand| = {value} > bound {bound}")]
    BoundViolation { value: f64, bound: f64 },

    #[error("time limit of {limit_secs} s exceeded in {context}")]
    TimeLimit { limit_secs: f64, context: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}

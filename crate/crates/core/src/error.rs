use std::fmt;

use thiserror::Error;

/// Which assumption a [`Violation`] breaks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    RowNotStochastic,
    RewardOutOfRange,
    InitialDistributionNotTraversal,
    BadGamma,
}

/// One failed check from [`crate::mdp::validate_mdp`]: the offending field,
/// its index within that field, and the value found there.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub field: &'static str,
    pub index: Vec<usize>,
    pub value: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?}: {}{:?} = {}",
            self.kind, self.field, self.index, self.value
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid MDP: {0}")]
    InvalidMdp(ValidationReport),
    #[error("policy row {state} is not a probability distribution (sum {sum}, min {min})")]
    InvalidPolicy { state: usize, sum: f64, min: f64 },
    #[error("linear system (I - gamma P) is numerically singular")]
    SingularSystem,
    #[error("cannot project an empty vector")]
    EmptyVector,
    #[error("bad partition: {0}")]
    BadPartition(String),
    #[error("advantage row contains a non-finite value")]
    NonFiniteAdvantage,
    #[error("distribution rho has a zero component at state {state}")]
    ZeroRhoComponent { state: usize },
    #[error("every action is optimal at every state; the optimal gap is infinite")]
    InfiniteGap,
    #[error("every action is pi-optimal at every state; the PI threshold is vacuous")]
    AllActionsPiOptimal,
    #[error("policy iteration reached a fixed point that fails the Bellman optimality check (residual {residual})")]
    NoImprovementFixedPointNotOptimal { residual: f64 },
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("bad generator spec: {0}")]
    BadSpec(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation failed: {0}")]
    ValidationFailed(ValidationReport),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

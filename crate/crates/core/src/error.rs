use thiserror::Error;

use crate::machines::CombWitness;
use crate::transducer::CausalityWitness;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid rational {0:?}")]
    InvalidRational(String),

    #[error("duplicate element {element:?} in set {set:?}")]
    DuplicateElement { set: String, element: String },

    #[error("unknown element {element:?} in set {set:?}")]
    UnknownElement { set: String, element: String },

    #[error("set mismatch in {context}: expected {expected:?}, found {found:?}")]
    SetMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("set {0:?} is not a binary product")]
    NotAProduct(String),

    #[error("negative weight {weight} for element {element:?}")]
    NegativeWeight { element: String, weight: String },

    #[error("weights over {set:?} sum to {sum}, not 1")]
    NotNormalized { set: String, sum: String },

    #[error("kernel has {found} rows but its source has {expected} elements")]
    RowCount { expected: usize, found: usize },

    #[error("not a comb machine: {0}")]
    NotAComb(Box<CombWitness>),

    #[error("machine is not unifilar: transition is not deterministic given the output")]
    NotUnifilar,

    #[error("input set must be a singleton for a generator, found {0} inputs")]
    NotAGenerator(usize),

    #[error("expected {expected} steps, found {found}")]
    HorizonMismatch { expected: usize, found: usize },

    #[error("horizon must be at least {min}, found {found}")]
    HorizonTooShort { min: usize, found: usize },

    #[error("observation is impossible under the current belief at step {step}")]
    ImpossibleObservation { step: usize },

    #[error("reachable belief enumeration truncated at {cap} beliefs")]
    Truncated { cap: usize },

    #[error("reachable beliefs not closed within {depth} steps")]
    DepthExceeded { depth: usize },

    #[error("causality condition fails: {0}")]
    NotCausal(Box<CausalityWitness>),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e}, scale {scale:e})")]
    NotPsd { min_eigenvalue: f64, scale: f64 },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("interpretation equation fails with max deviation {max_deviation:e} (tolerance {tolerance:e})")]
    EquationViolated { max_deviation: f64, tolerance: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

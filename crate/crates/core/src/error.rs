use thiserror::Error;

use crate::driver::RunTrace;

#[derive(Debug, Error)]
pub enum KamError {
    #[error("exp_map needs |X|_r <= 1, got {norm:e}")]
    ExpOutsideRegime { norm: f64 },

    #[error("mode operator is singular: spectrum modulus {modulus:e}")]
    Singular { modulus: f64 },

    #[error("operator bound violated: measured {measured:e} > bound {bound:e}")]
    BoundViolated { measured: f64, bound: f64 },

    #[error("two resonant modes tie within 1e-14: {first:?} and {second:?}")]
    MultipleResonances { first: Vec<i32>, second: Vec<i32> },

    #[error("shifted eigenvalue fails the non-resonance check at mode {offender:?}")]
    ShiftedResonance { offender: Vec<i32> },

    #[error("matrix is defective (|alpha| = {alpha_abs:e}); cannot diagonalize")]
    Defective { alpha_abs: f64 },

    #[error("precondition failure: {0}")]
    PreconditionFailure(String),

    #[error("integral diverges: {0}")]
    Divergent(String),

    #[error("no feasible epsilon_0 down to 1e-300: {0}")]
    NoFeasibleEpsilon(String),

    #[error("step {step}: |F|={measured:e} exceeds schedule bound {bound:e}")]
    ScheduleViolation {
        step: usize,
        measured: f64,
        bound: f64,
        trace: Box<RunTrace>,
    },

    #[error("rotation number step too large even after 10 halvings at t={t}")]
    StepTooLarge { t: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, KamError>;

//! Reducibility of quasi-periodic `sl(2,ℝ)` cocycles `X′ = (A + F(θ+tω))X`
//! by a KAM scheme that tolerates Brjuno-Rüssmann frequencies.
//!
//! - [`torus`]: truncated matrix-valued Fourier series and weighted norms
//! - [`sl2`]: constant `sl(2,ℝ)` matrices and the per-mode linear operator
//! - [`arith`]: approximation functions and non-resonance scans
//! - [`step`]: one non-resonant or resonant KAM step
//! - [`driver`]: the schedule, the iteration, and trace audits
//! - [`rotation`]: rotation numbers by direct integration

// `!(x <= tol)` is used so that NaN fails a check
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod arith;
pub mod driver;
pub mod error;
pub mod mat2;
pub mod rotation;
pub mod sl2;
pub mod step;
pub mod torus;

pub use arith::ApproxFn;
pub use driver::{
    make_schedule, run, Certificate, KamSchedule, RunOptions, RunOutcome, RunTrace, ScheduleParams,
    Status,
};
pub use error::{KamError, Result};
pub use mat2::Mat2;
pub use rotation::{rotation_number, RotationEstimate};
pub use sl2::Sl2;
pub use torus::{FreqIndex, TorusMap};

//! Rotation number of `X′ = A(θ₀+tω)X` by direct integration, and the
//! checks that relate it to a finished KAM run.
//!
//! The argument of `X(t)φ₀ ∈ ℝ² ≅ ℂ` is measured counterclockwise, so
//! `[[0,−ρ₀],[ρ₀,0]]` has rotation number `+ρ₀`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::Serialize;

use crate::arith::{check_nr_alpha, dot, ApproxFn, NrCheck};
use crate::driver::RunTrace;
use crate::error::{KamError, Result};
use crate::mat2::Mat2;
use crate::sl2::Sl2;
use crate::torus::TorusMap;

pub const DEFAULT_T: f64 = 1e4;
pub const DEFAULT_H: f64 = 1e-2;
/// Largest accepted change of argument in one step.
pub const MAX_TURN: f64 = PI / 2.0;
pub const MAX_HALVINGS: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RotationEstimate {
    pub rho: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub h: f64,
    /// `|ρ(h) − ρ(h/2)| + π/T`
    pub error_estimate: f64,
}

/// `ρ` with step `h/2`, and its distance to the step-`h` value plus the
/// `π/T` bound on the argument offset as error estimate.
pub fn rotation_number(
    asys: &TorusMap,
    omega: &[f64],
    theta0: &[f64],
    phi0: f64,
    t: f64,
    h: f64,
) -> Result<RotationEstimate> {
    let coarse = rotation_fixed(asys, omega, theta0, phi0, t, h)?;
    let fine = rotation_fixed(asys, omega, theta0, phi0, t, h / 2.0)?;
    Ok(RotationEstimate {
        rho: fine,
        t,
        h,
        error_estimate: (coarse - fine).abs() + PI / t,
    })
}

/// Accumulated argument over `[0, T]` divided by `T`, for RK4 with
/// nominal step `h`.
pub fn rotation_fixed(
    asys: &TorusMap,
    omega: &[f64],
    theta0: &[f64],
    phi0: f64,
    t: f64,
    h: f64,
) -> Result<f64> {
    if !(t > 0.0 && h > 0.0) {
        return Err(KamError::Invalid(format!(
            "need T > 0 and h > 0, got T = {t}, h = {h}"
        )));
    }
    if asys.dim() != omega.len() || theta0.len() != omega.len() {
        return Err(KamError::Invalid("dimension mismatch".into()));
    }
    let field = |s: f64| -> [[f64; 2]; 2] {
        let theta: Vec<f64> = theta0.iter().zip(omega).map(|(a, w)| a + s * w).collect();
        asys.eval(&theta).re()
    };
    let apply = |m: &[[f64; 2]; 2], v: [f64; 2]| {
        [
            m[0][0] * v[0] + m[0][1] * v[1],
            m[1][0] * v[0] + m[1][1] * v[1],
        ]
    };
    let norm = |m: &[[f64; 2]; 2]| Mat2::from_real(*m).op_norm();
    // None when a stage matrix could turn v by more than MAX_TURN
    let rk4 = |s: f64, v: [f64; 2], dt: f64| {
        let m0 = field(s);
        let mh = field(s + dt / 2.0);
        let m1 = field(s + dt);
        if norm(&m0).max(norm(&mh)).max(norm(&m1)) * dt > MAX_TURN {
            return None;
        }
        let k1 = apply(&m0, v);
        let k2 = apply(&mh, [v[0] + dt / 2.0 * k1[0], v[1] + dt / 2.0 * k1[1]]);
        let k3 = apply(&mh, [v[0] + dt / 2.0 * k2[0], v[1] + dt / 2.0 * k2[1]]);
        let k4 = apply(&m1, [v[0] + dt * k3[0], v[1] + dt * k3[1]]);
        Some([
            v[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            v[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ])
    };
    let steps = (t / h).ceil().max(1.0) as u64;
    let dt = t / steps as f64;
    let mut v = [phi0.cos(), phi0.sin()];
    let mut total = 0.0;
    for i in 0..steps {
        let s0 = i as f64 * dt;
        let mut sub = 1u64;
        let (turn, w) = loop {
            let mut w = v;
            let mut turn = 0.0;
            let small = dt / sub as f64;
            let mut ok = true;
            for j in 0..sub {
                let Some(next) = rk4(s0 + j as f64 * small, w, small) else {
                    ok = false;
                    break;
                };
                let d = angle_between(w, next);
                if d.abs() > MAX_TURN {
                    ok = false;
                    break;
                }
                turn += d;
                w = normalize(next);
            }
            if ok {
                break (turn, w);
            }
            if sub >= 1 << MAX_HALVINGS {
                return Err(KamError::StepTooLarge { t: s0 });
            }
            sub *= 2;
        };
        total += turn;
        v = w;
    }
    Ok(total / t)
}

fn angle_between(a: [f64; 2], b: [f64; 2]) -> f64 {
    let cross = a[0] * b[1] - a[1] * b[0];
    let dotp = a[0] * b[0] + a[1] * b[1];
    cross.atan2(dotp)
}

fn normalize(v: [f64; 2]) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    [v[0] / n, v[1] / n]
}

/// `ρ` of a constant matrix: `|Im α|`.
pub fn rho_constant(b: &Sl2) -> f64 {
    b.alpha().im.abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdditivityReport {
    pub passes: bool,
    /// `+1` or `−1`: the global orientation under which the relation held,
    /// or the closer one on failure.
    pub sign: i8,
    /// `|s·ρ_full − ρ(B) − πΣ⟨m_j,ω⟩|` for the reported sign.
    pub defect: f64,
    /// `tol + Σ√ε_j`
    pub allowed: f64,
    pub rho_b: f64,
    pub rotation_sum: f64,
}

/// Checks `ρ_full = ±(ρ(B) + πΣ⟨m_j,ω⟩)` within `tol + Σ_j √ε_j`, where
/// `ε_j` are the trace's per-step bounds.
pub fn verify_additivity(
    rho_full: f64,
    b_final: &Sl2,
    trace: &RunTrace,
    omega: &[f64],
    tol: f64,
) -> AdditivityReport {
    let rotation_sum: f64 = trace
        .records
        .iter()
        .filter_map(|r| r.m.as_ref())
        .map(|m| PI * dot(m, omega))
        .sum();
    let rho_b = rho_constant(b_final);
    let allowed = tol
        + trace
            .records
            .iter()
            .map(|r| r.eps_bound.sqrt())
            .sum::<f64>();
    let target = rho_b + rotation_sum;
    let plus = (rho_full - target).abs();
    let minus = (rho_full + target).abs();
    let (sign, defect) = if plus <= minus {
        (1, plus)
    } else {
        (-1, minus)
    };
    AdditivityReport {
        passes: defect <= allowed,
        sign,
        defect,
        allowed,
        rho_b,
        rotation_sum,
    }
}

/// Whether `|ρ − π⟨m,ω⟩| ≥ κ′/g(|m|)` for all `0 < |m| ≤ N`. Modes far
/// from `ρ/π` cannot fail, so only a window around it is visited; the
/// verdict equals that of the full ball scan.
pub fn check_rho_arithmetic(
    rho: f64,
    omega: &[f64],
    kappa_p: f64,
    g: &ApproxFn,
    n: u32,
) -> NrCheck {
    check_nr_alpha(Complex64::new(0.0, rho), omega, kappa_p, g, n)
}

//! Trace-zero real 2×2 matrices, their ±α eigen-decomposition, and the
//! inverse of the mode operator `𝓛_m M = 2iπ⟨m,ω⟩M − [Ã,M]`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::arith::ApproxFn;
use crate::error::{KamError, Result};
use crate::mat2::{Mat2, ONE, ZERO};
use crate::torus::FreqIndex;

pub const DEFAULT_TOL_DEFECT: f64 = 1e-12;
/// Above this condition number of `P` the dense solve is used instead.
pub const MAX_COND_SPECTRAL: f64 = 1e8;
pub const SINGULAR_BELOW: f64 = 1e-300;

/// Real 2×2 matrix with zero trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 2]; 2]", into = "[[f64; 2]; 2]")]
pub struct Sl2([[f64; 2]; 2]);

impl Sl2 {
    /// Accepts `m` when `|tr m| < 1e-12 (1 + ‖m‖)`; the trace is then
    /// removed exactly.
    pub fn new(m: [[f64; 2]; 2]) -> Result<Sl2> {
        let tr = m[0][0] + m[1][1];
        let norm = Mat2::from_real(m).op_norm();
        if !norm.is_finite() || tr.abs() >= 1e-12 * (1.0 + norm) {
            return Err(KamError::Invalid(format!("matrix {m:?} is not trace-zero")));
        }
        Ok(Sl2::project(m))
    }

    /// Removes the trace.
    pub fn project(m: [[f64; 2]; 2]) -> Sl2 {
        let h = 0.5 * (m[0][0] - m[1][1]);
        Sl2([[h, m[0][1]], [m[1][0], -h]])
    }

    /// Trace-free real part of a complex matrix.
    pub fn project_mat(m: &Mat2) -> Sl2 {
        Sl2::project(m.re())
    }

    pub fn zero() -> Sl2 {
        Sl2([[0.0; 2]; 2])
    }

    pub fn entries(&self) -> [[f64; 2]; 2] {
        self.0
    }

    pub fn to_mat2(&self) -> Mat2 {
        Mat2::from_real(self.0)
    }

    pub fn norm(&self) -> f64 {
        self.to_mat2().op_norm()
    }

    pub fn det(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn add(&self, other: &Sl2) -> Sl2 {
        let mut m = self.0;
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] += other.0[i][j];
            }
        }
        Sl2::project(m)
    }

    pub fn scale(&self, s: f64) -> Sl2 {
        let mut m = self.0;
        m.iter_mut().flatten().for_each(|x| *x *= s);
        Sl2(m)
    }

    /// `α = sqrt(−det)` on the branch `Re α ≥ 0`, `Im α ≥ 0` if `Re α = 0`.
    pub fn alpha(&self) -> Complex64 {
        branch_sqrt(Complex64::new(-self.det(), 0.0))
    }
}

impl TryFrom<[[f64; 2]; 2]> for Sl2 {
    type Error = KamError;
    fn try_from(m: [[f64; 2]; 2]) -> Result<Sl2> {
        Sl2::new(m)
    }
}

impl From<Sl2> for [[f64; 2]; 2] {
    fn from(s: Sl2) -> Self {
        s.0
    }
}

fn branch_sqrt(z: Complex64) -> Complex64 {
    let mut s = z.sqrt();
    if s.re < 0.0 || (s.re == 0.0 && s.im < 0.0) {
        s = -s;
    }
    if s.re == 0.0 {
        s.re = 0.0;
    }
    s
}

/// `α` and a normalized `P` with `P^{-1}AP = diag(α, −α)`, `‖P‖ = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenData {
    pub alpha: Complex64,
    pub p: Mat2,
    pub p_inv: Mat2,
    pub defective: bool,
}

impl EigenData {
    /// `‖P‖‖P^{-1}‖`.
    pub fn cond(&self) -> f64 {
        self.p.op_norm() * self.p_inv.op_norm()
    }
}

pub fn eigen(a: &Sl2, tol_defect: f64) -> EigenData {
    eigen_mat(&a.to_mat2(), tol_defect)
}

/// Same as [`eigen`] for a complex trace-zero matrix.
pub fn eigen_mat(m: &Mat2, tol_defect: f64) -> EigenData {
    let alpha = branch_sqrt(-m.det());
    let norm = m.op_norm();
    if alpha.norm() < tol_defect * (1.0 + norm) {
        return EigenData {
            alpha,
            p: Mat2::identity(),
            p_inv: Mat2::identity(),
            defective: true,
        };
    }
    let [[a, b], [c, _]] = m.0;
    let pick = |u: [Complex64; 2], v: [Complex64; 2]| {
        let nu = u[0].norm_sqr() + u[1].norm_sqr();
        let nv = v[0].norm_sqr() + v[1].norm_sqr();
        normalize_column(if nu >= nv { u } else { v })
    };
    let v_plus = pick([b, alpha - a], [alpha + a, c]);
    let v_minus = pick([b, -alpha - a], [a - alpha, c]);
    let p = Mat2::new(v_plus[0], v_minus[0], v_plus[1], v_minus[1]);
    let p = p.scale_re(1.0 / p.op_norm());
    match p.inverse() {
        Some(p_inv) => EigenData {
            alpha,
            p,
            p_inv,
            defective: false,
        },
        None => EigenData {
            alpha,
            p: Mat2::identity(),
            p_inv: Mat2::identity(),
            defective: true,
        },
    }
}

fn normalize_column(v: [Complex64; 2]) -> [Complex64; 2] {
    let n = (v[0].norm_sqr() + v[1].norm_sqr()).sqrt();
    let big = if v[0].norm() >= v[1].norm() {
        v[0]
    } else {
        v[1]
    };
    // unit length, largest component real positive
    let phase = big.conj() / big.norm();
    [v[0] * phase / n, v[1] * phase / n]
}

/// Precomputed inverse of `𝓛_m` for a fixed `Ã`, reused across modes.
#[derive(Debug, Clone)]
pub struct ModeSolver {
    a: Mat2,
    eig: EigenData,
    spectral: bool,
}

impl ModeSolver {
    pub fn new(a_tilde: &Mat2) -> ModeSolver {
        let eig = eigen_mat(a_tilde, DEFAULT_TOL_DEFECT);
        let spectral = !eig.defective && eig.cond() <= MAX_COND_SPECTRAL;
        ModeSolver {
            a: *a_tilde,
            eig,
            spectral,
        }
    }

    pub fn eigen(&self) -> &EigenData {
        &self.eig
    }

    pub fn uses_spectral_path(&self) -> bool {
        self.spectral
    }

    /// `λ, λ − 2α̃, λ + 2α̃` with `λ = 2iπ⟨m,ω⟩`.
    pub fn spectrum(&self, m_dot_omega: f64) -> [Complex64; 3] {
        let lam = Complex64::new(0.0, 2.0 * std::f64::consts::PI * m_dot_omega);
        let two_a = self.eig.alpha * 2.0;
        [lam, lam - two_a, lam + two_a]
    }

    /// `max 1/|s|` over the spectrum.
    pub fn inverse_norm(&self, m_dot_omega: f64) -> f64 {
        self.spectrum(m_dot_omega)
            .iter()
            .map(|s| 1.0 / s.norm())
            .fold(0.0, f64::max)
    }

    /// Solves `2iπ⟨m,ω⟩M − [Ã,M] = rhs`.
    pub fn solve(&self, m_dot_omega: f64, rhs: &Mat2) -> Result<Mat2> {
        let spec = self.spectrum(m_dot_omega);
        let smallest = spec.iter().map(|s| s.norm()).fold(f64::INFINITY, f64::min);
        if smallest < SINGULAR_BELOW {
            return Err(KamError::Singular { modulus: smallest });
        }
        if self.spectral {
            let r = self.eig.p_inv * *rhs * self.eig.p;
            let x = Mat2::new(
                r.0[0][0] / spec[0],
                r.0[0][1] / spec[1],
                r.0[1][0] / spec[2],
                r.0[1][1] / spec[0],
            );
            Ok(self.eig.p * x * self.eig.p_inv)
        } else {
            dense_solve(spec[0], &self.a, rhs)
        }
    }
}

/// `𝓛_m^{-1} rhs` for a single mode.
pub fn lm_inverse(m: &FreqIndex, omega: &[f64], a_tilde: &Mat2, rhs: &Mat2) -> Result<Mat2> {
    ModeSolver::new(a_tilde).solve(m.dot(omega), rhs)
}

/// Solves `λM − ÃM + MÃ = rhs` as a 4×4 system in the entries of `M`
/// (Gaussian elimination, partial pivoting).
pub fn dense_solve(lambda: Complex64, a: &Mat2, rhs: &Mat2) -> Result<Mat2> {
    let mut sys = lm_matrix(lambda, a);
    let mut b = [rhs.0[0][0], rhs.0[0][1], rhs.0[1][0], rhs.0[1][1]];
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&i, &j| sys[i][col].norm().total_cmp(&sys[j][col].norm()))
            .expect("non-empty range");
        let pn = sys[piv][col].norm();
        if pn < SINGULAR_BELOW {
            return Err(KamError::Singular { modulus: pn });
        }
        sys.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..4 {
            let f = sys[row][col] / sys[col][col];
            if f == ZERO {
                continue;
            }
            for k in col..4 {
                let v = sys[col][k];
                sys[row][k] -= f * v;
            }
            let v = b[col];
            b[row] -= f * v;
        }
    }
    let mut x = [ZERO; 4];
    for row in (0..4).rev() {
        let mut s = b[row];
        for k in row + 1..4 {
            s -= sys[row][k] * x[k];
        }
        x[row] = s / sys[row][row];
    }
    Ok(Mat2::new(x[0], x[1], x[2], x[3]))
}

/// Matrix of `M ↦ λM − ÃM + MÃ` on `(m11, m12, m21, m22)`.
pub fn lm_matrix(lambda: Complex64, a: &Mat2) -> [[Complex64; 4]; 4] {
    let mut out = [[ZERO; 4]; 4];
    for col in 0..4 {
        let mut e = Mat2::zero();
        e.0[col / 2][col % 2] = ONE;
        let img = e.scale(lambda) - a.commutator(&e);
        for row in 0..4 {
            out[row][col] = img.0[row / 2][row % 2];
        }
    }
    out
}

/// Measured `‖𝓛_m^{-1}‖` together with the a-priori bound `4G(N)g(|m|)/κ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorBound {
    pub measured: f64,
    pub bound: f64,
}

pub fn operator_bound_check(
    m: &FreqIndex,
    omega: &[f64],
    a_tilde: &Mat2,
    kappa: f64,
    big_g: &ApproxFn,
    g: &ApproxFn,
    n: f64,
) -> Result<OperatorBound> {
    let solver = ModeSolver::new(a_tilde);
    let measured = solver.inverse_norm(m.dot(omega));
    let bound = 4.0 * big_g.eval(n) * g.eval(m.modulus()) / kappa;
    if measured > bound {
        return Err(KamError::BoundViolated { measured, bound });
    }
    Ok(OperatorBound { measured, bound })
}

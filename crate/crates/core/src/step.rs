//! One KAM step: resonance detection, resonance elimination, the
//! homological equation, and the non-resonant and resonant conjugations.
//!
//! Conjugations follow `∂_ω Z = (A+F)Z − Z(A′+F′)`. The new perturbation
//! is obtained from this identity in Fourier algebra, so the measured
//! residual only sees round-off and dropped coefficients.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::arith::{check_nr_alpha, dot, for_each_in_window, l1, ApproxFn};
use crate::error::{KamError, Result};
use crate::mat2::Mat2;
use crate::sl2::{eigen, ModeSolver, Sl2, DEFAULT_TOL_DEFECT};
use crate::torus::{FreqIndex, TorusMap};

/// Tie width for normalized violations in [`find_resonance`].
pub const TIE_TOL: f64 = 1e-14;

/// Frequency data shared by every step of a run.
#[derive(Debug, Clone)]
pub struct StepContext {
    pub omega: Vec<f64>,
    pub kappa: f64,
    pub big_g: ApproxFn,
    pub g: ApproxFn,
    /// Constant in the resonant smallness condition.
    pub c_prime: f64,
    pub c0: f64,
    pub policy: PreconditionPolicy,
}

impl StepContext {
    fn gg(&self, t: f64) -> f64 {
        self.big_g.eval(t) * self.g.eval(t)
    }

    fn ln_gg(&self, t: f64) -> f64 {
        self.big_g.ln_eval(t) + self.g.ln_eval(t)
    }
}

/// What to do when a step's smallness hypothesis fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreconditionPolicy {
    Enforce,
    Record,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Precondition {
    pub name: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl Precondition {
    fn le(name: &'static str, lhs: f64, rhs: f64) -> Self {
        Precondition {
            name,
            lhs,
            rhs,
            holds: lhs <= rhs,
        }
    }
}

fn apply_policy(policy: PreconditionPolicy, checks: &[Precondition]) -> Result<()> {
    if policy == PreconditionPolicy::Enforce {
        let failed: Vec<String> = checks
            .iter()
            .filter(|c| !c.holds)
            .map(|c| format!("{}: {:e} > {:e}", c.name, c.lhs, c.rhs))
            .collect();
        if !failed.is_empty() {
            return Err(KamError::PreconditionFailure(failed.join("; ")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceReport {
    pub m: Option<Vec<i32>>,
    /// `α − iπ⟨m,ω⟩`, or `α` when there is no resonance.
    pub alpha_shifted: Complex64,
    /// Smallest normalized distance `|α − iπ⟨m,ω⟩|·4G(N)g(|m|)/κ` found.
    pub margin: f64,
}

/// Finds the mode `m` with `|α − iπ⟨m,ω⟩| < κ/(4G(N)g(|m|))`, if any.
pub fn find_resonance(
    alpha: Complex64,
    omega: &[f64],
    kappa: f64,
    big_g: &ApproxFn,
    g: &ApproxFn,
    n: u32,
) -> Result<ResonanceReport> {
    if n == 0 {
        return Ok(ResonanceReport {
            m: None,
            alpha_shifted: alpha,
            margin: f64::INFINITY,
        });
    }
    let gn = big_g.eval(n as f64);
    let level = kappa / (4.0 * gn);
    let halfwidth = level / (PI * g.eval(1.0));
    let mut violators: Vec<(f64, Vec<i32>)> = Vec::new();
    for_each_in_window(omega, n, alpha.im / PI, halfwidth, |m| {
        let dist = (alpha - Complex64::new(0.0, PI * dot(m, omega))).norm();
        let ratio = dist * g.eval(l1(m) as f64) / level;
        if ratio < 1.0 {
            violators.push((ratio, m.to_vec()));
        }
    });
    violators.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let Some((ratio, m)) = violators.first().cloned() else {
        return Ok(ResonanceReport {
            m: None,
            alpha_shifted: alpha,
            margin: f64::INFINITY,
        });
    };
    if let Some((r2, m2)) = violators.get(1) {
        if r2 - ratio <= TIE_TOL {
            return Err(KamError::MultipleResonances {
                first: m,
                second: m2.clone(),
            });
        }
    }
    let shifted = alpha - Complex64::new(0.0, PI * dot(&m, omega));
    let check = check_nr_alpha(shifted, omega, kappa / gn, g, n);
    if !check.passes {
        return Err(KamError::ShiftedResonance {
            offender: check.offender.unwrap_or_default(),
        });
    }
    Ok(ResonanceReport {
        m: Some(m),
        alpha_shifted: shifted,
        margin: ratio,
    })
}

/// Output of [`eliminate_resonance`].
#[derive(Debug, Clone)]
pub struct Elimination {
    /// `Φ(θ) = Q₊ e^{iπ⟨m,θ⟩} + Q₋ e^{−iπ⟨m,θ⟩}`, `Q± = (I ± A/α)/2`.
    pub phi: TorusMap,
    pub phi_inv: TorusMap,
    pub a_tilde: Sl2,
    pub alpha_tilde: Complex64,
    /// `‖P‖‖P^{-1}‖` of the normalized eigenbasis.
    pub cond_p: f64,
}

/// Builds `Φ` with `∂_ω Φ = AΦ − ΦÃ` and `σ(Ã) = ±(α − iπ⟨m,ω⟩)`.
///
/// `Q±` are the spectral projectors of `A`, so `Φ = P diag(e^{iπ⟨m,θ⟩},
/// e^{−iπ⟨m,θ⟩}) P^{-1}` for any eigenbasis `P`.
pub fn eliminate_resonance(a: &Sl2, m: &[i32], omega: &[f64]) -> Result<Elimination> {
    let eig = eigen(a, DEFAULT_TOL_DEFECT);
    if eig.defective {
        return Err(KamError::Defective {
            alpha_abs: eig.alpha.norm(),
        });
    }
    let dim = omega.len();
    let am = a.to_mat2();
    let a_over = am.scale(Complex64::new(1.0, 0.0) / eig.alpha);
    let q_plus = (Mat2::identity() + a_over).scale_re(0.5);
    let q_minus = (Mat2::identity() - a_over).scale_re(0.5);
    let k = FreqIndex::from_half(m);
    let real = eig.alpha.re == 0.0;
    let phi = TorusMap::from_coeffs(dim, [(k, q_plus), (k.neg(), q_minus)], real);
    let phi_inv = TorusMap::from_coeffs(dim, [(k.neg(), q_plus), (k, q_minus)], real);
    let shift = PI * dot(m, omega);
    let alpha_tilde = eig.alpha - Complex64::new(0.0, shift);
    // Ã = (α̃/α) A; the ratio is real for elliptic A
    let ratio = alpha_tilde / eig.alpha;
    let a_tilde = a.scale(ratio.re);
    Ok(Elimination {
        phi,
        phi_inv,
        a_tilde,
        alpha_tilde,
        cond_p: eig.cond(),
    })
}

/// Solves `∂_ω X = [Ã,X] + a′F^N − a′F̂(0)` with `X̂(0) = 0`.
pub fn solve_homological(
    a_tilde: &Mat2,
    f: &TorusMap,
    n: f64,
    omega: &[f64],
    a_prime: f64,
) -> Result<TorusMap> {
    let solver = ModeSolver::new(a_tilde);
    let mut coeffs = Vec::new();
    for (k, c) in f.iter() {
        if k.is_zero() || k.modulus() > n {
            continue;
        }
        let x = solver.solve(k.dot(omega), &c.scale_re(a_prime))?;
        coeffs.push((*k, x));
    }
    let real = f.is_real() && a_tilde.max_imag() == 0.0;
    Ok(TorusMap::from_coeffs(f.dim(), coeffs, real).with_max_modes(f.max_modes()))
}

/// Radius after a non-resonant step: `r − c₀|ln(1−a)|/(2πN)`.
pub fn nonresonant_radius(r: f64, n: f64, a: f64, c0: f64) -> f64 {
    r - c0 * (1.0 - a).ln().abs() / (2.0 * PI * n)
}

/// Radius after a resonant step: `r/2 − c₀ ln(G·g)(N+1)/(4πN)`.
pub fn resonant_radius(r: f64, n: f64, c0: f64, ln_gg_next: f64) -> f64 {
    0.5 * r - c0 * ln_gg_next / (4.0 * PI * n)
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub a_next: Sl2,
    pub f_next: TorusMap,
    pub z_step: TorusMap,
    pub r_next: f64,
    pub resonant: bool,
    pub m: Option<Vec<i32>>,
    /// `|∂_ω Z − (A+F)Z + Z(A′+F′)|_{r′}` against the step's input.
    pub residual_norm: f64,
    /// `|F′|_{r′}/|F|_r`
    pub contraction_observed: f64,
    /// Contraction the step is expected to achieve: `√(1−a′)` or `1−a`.
    pub contraction_bound: f64,
    pub x_norm: f64,
    pub x_bound: f64,
    /// Weighted norm at `r′` of all dropped coefficients in `Z` and `F′`.
    pub truncation_debt: f64,
    pub exp_tail: f64,
    pub preconditions: Vec<Precondition>,
    pub alpha_shifted: Option<Complex64>,
    pub cond_p: Option<f64>,
    /// `|Φ|_{r′} e^{−π|m|r′}`
    pub phi_constant: Option<f64>,
}

impl StepOutput {
    pub fn preconditions_hold(&self) -> bool {
        self.preconditions.iter().all(|p| p.holds)
    }
}

/// `|∂_ω Z − (A+F)Z + Z(A′+F′)|_r`.
pub fn conjugation_residual(
    omega: &[f64],
    a: &Mat2,
    f: &TorusMap,
    z: &TorusMap,
    a_next: &Mat2,
    f_next: &TorusMap,
    r: f64,
) -> f64 {
    let lhs = z.dir_derivative(omega);
    let left = f.add_constant(a).mul(z);
    let right = z.mul(&f_next.add_constant(a_next));
    lhs.sub(&left).add(&right).weighted_norm(r)
}

struct Conjugated {
    a_next: Sl2,
    f_next: TorusMap,
    e: TorusMap,
    x_norm: f64,
    exp_tail: f64,
}

/// `F′ = e^{−X}((Ã+F̃)e^{X} − ∂_ω e^{X}) − A′`, evaluated with `e^X = I+R`
/// as `e^{−X}([Ã,R] − ∂_ω R + F̃ − a′F̂(0) + F̃R − a′R F̂(0))`.
fn conjugate_nonresonant(
    a_tilde: &Sl2,
    f: &TorusMap,
    n: f64,
    r_next: f64,
    a_prime: f64,
    omega: &[f64],
) -> Result<Conjugated> {
    let am = a_tilde.to_mat2();
    let x = solve_homological(&am, f, n, omega, a_prime)?;
    let f0 = f.zero_mode();
    let a_next = a_tilde.add(&Sl2::project_mat(&f0.scale_re(a_prime)));
    let fnorm = f.weighted_norm(r_next);
    let tol = (1e-18 * fnorm).max(1e-300);
    let e = x.exp_map(r_next, tol)?;
    let einv = x.neg().exp_map(r_next, tol)?;
    let rest = &e.rest;
    let f0a = f0.scale_re(a_prime);
    let inner = rest
        .commutator_const(&am)
        .sub(&rest.dir_derivative(omega))
        .add(&f.add_constant(&(-f0a)))
        .add(&f.mul(rest))
        .sub(&rest.right_mul_const(&f0a));
    let mut f_next = inner.add(&einv.rest.mul(&inner));
    if f.is_real() {
        f_next = f_next.assume_real();
    }
    Ok(Conjugated {
        a_next,
        f_next,
        e: e.value(),
        x_norm: x.weighted_norm(r_next),
        exp_tail: e.tail_bound + einv.tail_bound,
    })
}

/// Non-resonant step with `A′ = A + a′F̂(0)` and `Z = e^{X̃}`.
#[allow(clippy::too_many_arguments)]
pub fn step_nonresonant(
    a: &Sl2,
    f: &TorusMap,
    r: f64,
    r_next: f64,
    n: f64,
    a_prime: f64,
    ctx: &StepContext,
) -> Result<StepOutput> {
    let eps = f.weighted_norm(r);
    let gn = ctx.big_g.eval(n);
    let gsmall = ctx.g.eval(n);
    let pre = vec![
        Precondition::le(
            "petitesse3",
            2.0 * gn * gsmall * eps,
            ctx.kappa * (1.0 - a_prime) / 2.0,
        ),
        Precondition::le("N-gap", (-2.0 * PI * n * (r - r_next)).exp(), 1.0 - a_prime),
        Precondition::le("r' > 0", -r_next, 0.0),
    ];
    apply_policy(ctx.policy, &pre)?;
    let c = conjugate_nonresonant(a, f, n, r_next, a_prime, &ctx.omega)?;
    let x_bound = 4.0 * a_prime * gn * gsmall / ctx.kappa * f.truncate(n).weighted_norm(r_next);
    let residual = conjugation_residual(
        &ctx.omega,
        &a.to_mat2(),
        f,
        &c.e,
        &c.a_next.to_mat2(),
        &c.f_next,
        r_next,
    );
    let debt = c.e.truncation_debt(r_next) + c.f_next.truncation_debt(r_next);
    let fn_norm = c.f_next.weighted_norm(r_next);
    Ok(StepOutput {
        a_next: c.a_next,
        contraction_observed: ratio(fn_norm, eps),
        contraction_bound: (1.0 - a_prime).sqrt(),
        f_next: c.f_next,
        z_step: c.e,
        r_next,
        resonant: false,
        m: None,
        residual_norm: residual,
        x_norm: c.x_norm,
        x_bound,
        truncation_debt: debt,
        exp_tail: c.exp_tail,
        preconditions: pre,
        alpha_shifted: None,
        cond_p: None,
        phi_constant: None,
    })
}

/// Resonant step: `Φ` removes the resonance at `m`, then the non-resonant
/// machinery with `a′ = 1` runs on `(Ã, Φ^{-1}FΦ)`; `Z = Φe^{X̃}`.
#[allow(clippy::too_many_arguments)]
pub fn step_resonant(
    a: &Sl2,
    f: &TorusMap,
    r: f64,
    r_next: f64,
    n: f64,
    a_sched: f64,
    m: &[i32],
    ctx: &StepContext,
) -> Result<StepOutput> {
    let eps = f.weighted_norm(r);
    let gg_n = ctx.gg(n);
    let pre = vec![
        Precondition::le(
            "petitesse",
            2.0 * gg_n * gg_n * eps,
            (1.0 - a_sched).powi(2) / 2.0 * ctx.kappa * ctx.kappa,
        ),
        Precondition::le(
            "petitesse2",
            std::f64::consts::E * ctx.c_prime * (-ctx.c0 * ctx.ln_gg(n + 1.0)).exp(),
            1.0 - a_sched,
        ),
        Precondition::le("strip width", 2.0 * ctx.ln_gg(n) / (PI * n), r),
        Precondition::le("r' > 0", -r_next, 0.0),
    ];
    apply_policy(ctx.policy, &pre)?;
    let el = eliminate_resonance(a, m, &ctx.omega)?;
    let f_tilde = el.phi_inv.mul(f).mul(&el.phi);
    let f_tilde = if f.is_real() {
        f_tilde.assume_real()
    } else {
        f_tilde
    };
    let c = conjugate_nonresonant(&el.a_tilde, &f_tilde, n, r_next, 1.0, &ctx.omega)?;
    let z = el.phi.mul(&c.e);
    let z = if el.phi.is_real() { z.assume_real() } else { z };
    let x_bound = 4.0 * ctx.big_g.eval(n) * ctx.g.eval(n) / ctx.kappa
        * f_tilde.truncate(n).weighted_norm(r_next);
    let residual = conjugation_residual(
        &ctx.omega,
        &a.to_mat2(),
        f,
        &z,
        &c.a_next.to_mat2(),
        &c.f_next,
        r_next,
    );
    let debt = z.truncation_debt(r_next) + c.f_next.truncation_debt(r_next);
    let fn_norm = c.f_next.weighted_norm(r_next);
    let m_mod = l1(m) as f64;
    Ok(StepOutput {
        a_next: c.a_next,
        contraction_observed: ratio(fn_norm, eps),
        contraction_bound: 1.0 - a_sched,
        f_next: c.f_next,
        z_step: z,
        r_next,
        resonant: true,
        m: Some(m.to_vec()),
        residual_norm: residual,
        x_norm: c.x_norm,
        x_bound,
        truncation_debt: debt,
        exp_tail: c.exp_tail,
        preconditions: pre,
        alpha_shifted: Some(el.alpha_tilde),
        cond_p: Some(el.cond_p),
        phi_constant: Some(el.phi.weighted_norm(r_next) * (-PI * m_mod * r_next).exp()),
    })
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PHI: f64 = 1.618_033_988_749_895;

    fn ctx() -> StepContext {
        StepContext {
            omega: vec![1.0, PHI],
            kappa: 1.0,
            big_g: ApproxFn::Power { mu: 2.0 },
            g: ApproxFn::Power { mu: 2.0 },
            c_prime: 10.0,
            c0: 0.01,
            policy: PreconditionPolicy::Record,
        }
    }

    fn rot(beta: f64) -> Sl2 {
        Sl2::new([[0.0, -beta], [beta, 0.0]]).unwrap()
    }

    #[test]
    fn zero_perturbation_is_fixed() {
        let a = rot(0.3);
        let f = TorusMap::zero(2);
        let out = step_nonresonant(&a, &f, 0.5, 0.4, 10.0, 0.99, &ctx()).unwrap();
        assert_eq!(out.a_next, a);
        assert!(out.f_next.is_empty());
        assert_eq!(out.z_step, TorusMap::identity(2));
        assert_eq!(out.residual_norm, 0.0);
    }

    #[test]
    fn constant_perturbation_is_absorbed() {
        let a = rot(0.3);
        let eps = 1e-6;
        let m = Mat2::from_real([[0.5, 1.0], [-2.0, -0.5]]);
        let f = TorusMap::constant(2, m.scale_re(eps), true);
        let ap = 0.99;
        let out = step_nonresonant(&a, &f, 0.5, 0.4, 10.0, ap, &ctx()).unwrap();
        assert_eq!(out.z_step, TorusMap::identity(2));
        let want_a = a.add(&Sl2::project_mat(&m.scale_re(ap * eps)));
        assert!((out.a_next.to_mat2() - want_a.to_mat2()).max_abs() < 1e-18);
        assert_eq!(out.f_next.len(), 1);
        let want_f = m.scale_re((1.0 - ap) * eps);
        assert!((out.f_next.zero_mode() - want_f).max_abs() < 1e-20);
    }

    #[test]
    fn exact_resonance_without_perturbation() {
        let c = ctx();
        let beta = PI * c.omega[0];
        let a = rot(beta);
        let rep = find_resonance(a.alpha(), &c.omega, c.kappa, &c.big_g, &c.g, 5).unwrap();
        assert_eq!(rep.m, Some(vec![1, 0]));
        assert!(rep.alpha_shifted.norm() < 1e-15);
        let out = step_resonant(&a, &TorusMap::zero(2), 0.5, 0.2, 5.0, 0.99, &[1, 0], &c).unwrap();
        assert!(out.a_next.norm() < 1e-15);
        assert!(out.f_next.is_empty());
        assert!(out.residual_norm < 1e-14);
        let el = eliminate_resonance(&a, &[1, 0], &c.omega).unwrap();
        let diff = out.z_step.sub(&el.phi).weighted_norm(0.2);
        assert!(diff < 1e-15);
    }

    #[test]
    fn real_alpha_is_not_resonant() {
        let c = ctx();
        let rep = find_resonance(
            Complex64::new(0.5, 0.0),
            &c.omega,
            c.kappa,
            &c.big_g,
            &c.g,
            20,
        )
        .unwrap();
        assert!(rep.m.is_none());
    }

    #[test]
    fn phi_solves_its_equation() {
        let c = ctx();
        let a = rot(PI * (2.0 - PHI) + 0.01);
        let el = eliminate_resonance(&a, &[2, -1], &c.omega).unwrap();
        let lhs = el.phi.dir_derivative(&c.omega);
        let rhs = el
            .phi
            .left_mul_const(&a.to_mat2())
            .sub(&el.phi.right_mul_const(&el.a_tilde.to_mat2()));
        assert!(lhs.sub(&rhs).weighted_norm(0.0) < 1e-12);
        let id = el.phi.mul(&el.phi_inv);
        assert!(id.sub(&TorusMap::identity(2)).weighted_norm(0.0) < 1e-12);
        assert!((el.alpha_tilde - Complex64::new(0.0, 0.01)).norm() < 1e-14);
        for th in [[0.1, 0.7], [0.33, -1.2], [1.9, 0.05]] {
            let v = el.phi.eval(&th);
            assert!((v.det() - Complex64::new(1.0, 0.0)).norm() < 1e-12);
            assert!(v.max_imag() < 1e-14);
        }
    }

    #[test]
    fn radius_formulas() {
        assert!(
            (nonresonant_radius(1.0, 2.0, 0.5, 0.1) - (1.0 - 0.1 * 2f64.ln() / (4.0 * PI))).abs()
                < 1e-15
        );
        assert!((resonant_radius(1.0, 2.0, 0.1, 3.0) - (0.5 - 0.3 / (8.0 * PI))).abs() < 1e-15);
    }

    #[test]
    fn enforce_policy_rejects_large_perturbation() {
        let mut c = ctx();
        c.policy = PreconditionPolicy::Enforce;
        let f = TorusMap::constant(2, Mat2::from_real([[1.0, 0.0], [0.0, -1.0]]), true);
        let err = step_nonresonant(&rot(0.3), &f, 0.5, 0.4, 10.0, 0.99, &c);
        assert!(matches!(err, Err(KamError::PreconditionFailure(_))));
    }
}

//! The KAM iteration: schedule constants, smallness thresholds, the run
//! loop, and post-hoc audits of a recorded trace.
//!
//! With `ε_n = (1−a)^{n/2} ε₀` and `N_n` the largest integer with
//! `(G·g)(N_n)² ≤ (1−a)²κ²/(4ε_n)`, each step either conjugates away the
//! perturbation at scale `N_n` (non-resonant) or first removes a resonance
//! `m_n` with a half-period rotation `Φ` (resonant). Smallness thresholds
//! are carried as `ln ε₀` because they are often far below `f64` range.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::arith::{dot, l1, ratio_bounded, ApproxFn};
use crate::error::{KamError, Result};
use crate::rotation::check_rho_arithmetic;
use crate::sl2::{eigen, Sl2, DEFAULT_TOL_DEFECT};
use crate::step::{
    conjugation_residual, find_resonance, nonresonant_radius, resonant_radius, step_nonresonant,
    step_resonant, Precondition, PreconditionPolicy, StepContext, StepOutput,
};
use crate::torus::{TorusMap, TorusMapJson};

/// Smallest `ε₀` tried by [`make_schedule`].
pub const EPS0_FLOOR: f64 = 1e-300;

/// Inputs of [`make_schedule`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleParams {
    pub kappa: f64,
    /// Arithmetic constant of the rotation number, used only by audits.
    pub kappa_prime: f64,
    pub big_g: ApproxFn,
    pub g: ApproxFn,
    pub r0: f64,
    pub n0: u32,
    /// Defaults to `1 − ā`.
    pub a: Option<f64>,
    pub c_prime: f64,
    /// Treat a failed `∫_b^∞ ln(G·g)/t² ≤ r₀/4^{n₀+2}` as infeasible.
    pub require_condepsilon: bool,
    /// Treat a failed `eC′ε₀^{c₀/4} ≤ (1−a)²κ²` as infeasible.
    pub require_condepsilon2: bool,
}

impl ScheduleParams {
    pub fn new(kappa: f64, big_g: ApproxFn, g: ApproxFn, r0: f64, n0: u32) -> Self {
        ScheduleParams {
            kappa,
            kappa_prime: kappa,
            big_g,
            g,
            r0,
            n0,
            a: None,
            c_prime: 10.0,
            require_condepsilon: true,
            require_condepsilon2: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KamSchedule {
    pub kappa: f64,
    pub kappa_prime: f64,
    pub big_g: ApproxFn,
    pub g: ApproxFn,
    pub gg: ApproxFn,
    pub r0: f64,
    pub n0: u32,
    pub a: f64,
    pub a_bar: f64,
    pub c0: f64,
    pub ln_eps0: f64,
    pub c_prime: f64,
    pub condepsilon: Precondition,
    pub condepsilon2: Precondition,
    pub n_guard: Precondition,
}

impl KamSchedule {
    pub fn eps0(&self) -> f64 {
        self.ln_eps0.exp()
    }

    pub fn ln_eps(&self, n: usize) -> f64 {
        self.ln_eps0 + 0.5 * n as f64 * (1.0 - self.a).ln()
    }

    /// `ε_n = (1−a)^{n/2} ε₀`
    pub fn eps(&self, n: usize) -> f64 {
        self.ln_eps(n).exp()
    }

    /// `ln((1−a)κ/(2√ε_n))`, the log of the bound on `(G·g)(N_n)`.
    pub fn ln_n_bound(&self, n: usize) -> f64 {
        ((1.0 - self.a) * self.kappa / 2.0).ln() - 0.5 * self.ln_eps(n)
    }

    /// Largest integer `N` with `(G·g)(N)² ≤ (1−a)²κ²/(4ε_n)`.
    pub fn n_seq(&self, n: usize) -> u64 {
        largest_below(&self.gg, self.ln_n_bound(n))
    }

    /// `r₀/4^{n₀+1}`
    pub fn r_floor(&self) -> f64 {
        self.r0 / 4f64.powi(self.n0 as i32 + 1)
    }

    pub fn step_context(&self, omega: &[f64], policy: PreconditionPolicy) -> StepContext {
        StepContext {
            omega: omega.to_vec(),
            kappa: self.kappa,
            big_g: self.big_g.clone(),
            g: self.g.clone(),
            c_prime: self.c_prime,
            c0: self.c0,
            policy,
        }
    }
}

/// Largest integer `N ≥ 0` with `ln f(N) ≤ bound`, found from the inverse
/// and then corrected so the bracketing holds exactly. Beyond `2^52`
/// consecutive integers are not resolved and the floor of the inverse is
/// returned as is.
pub fn largest_below(f: &ApproxFn, bound: f64) -> u64 {
    const EXACT: f64 = 4_503_599_627_370_496.0;
    let guess = f.ln_inverse(bound);
    if !(guess < EXACT) {
        return guess.min(u64::MAX as f64) as u64;
    }
    let mut n = guess.floor() as u64;
    while n >= 1 && f.ln_eval(n as f64) > bound {
        n -= 1;
    }
    while f.ln_eval((n + 1) as f64) <= bound {
        n += 1;
    }
    n
}

/// `ā = min(1/14², 1/(G·g)(2)²)`
pub fn a_bar(gg: &ApproxFn) -> f64 {
    let g2 = gg.eval(2.0);
    (1.0 / 196.0f64).min(1.0 / (g2 * g2))
}

/// `c₀ = r₀ / (4^{n₀+3}(sup_{t∈[1,n₀]} ln(G·g)(t+1)/t + 1))`; the sup over
/// an empty range is 0.
pub fn c0(gg: &ApproxFn, r0: f64, n0: u32) -> f64 {
    let sup = if n0 == 0 {
        0.0
    } else {
        let samples = 2000;
        (0..=samples)
            .map(|i| {
                let t = 1.0 + (n0 as f64 - 1.0) * i as f64 / samples as f64;
                gg.ln_eval(t + 1.0) / t
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    r0 / (4f64.powi(n0 as i32 + 3) * (sup + 1.0))
}

/// `∫_b^∞ ln(G·g)/t² ≤ r₀/4^{n₀+2}` with
/// `b = (G·g)^{-1}(κ/(2(1−a)^{(n₀−5)/4}√ε₀))`, clamped to `b ≥ 1`.
pub fn condepsilon(
    gg: &ApproxFn,
    kappa: f64,
    a: f64,
    r0: f64,
    n0: u32,
    ln_eps0: f64,
) -> Result<Precondition> {
    let ln_arg = (kappa / 2.0).ln() - (n0 as f64 - 5.0) / 4.0 * (1.0 - a).ln() - 0.5 * ln_eps0;
    let b = gg.ln_inverse(ln_arg).max(1.0);
    let integral = if b.is_finite() {
        gg.tail_integral(b, 2.0)?
    } else {
        0.0
    };
    Ok(Precondition {
        name: "condepsilon",
        lhs: integral,
        rhs: r0 / 4f64.powi(n0 as i32 + 2),
        holds: integral <= r0 / 4f64.powi(n0 as i32 + 2),
    })
}

/// `eC′ε₀^{c₀/4} ≤ (1−a)²κ²`
pub fn condepsilon2(c_prime: f64, c0: f64, kappa: f64, a: f64, ln_eps0: f64) -> Precondition {
    let lhs = (1.0 + c_prime.ln() + 0.25 * c0 * ln_eps0).exp();
    let rhs = (1.0 - a).powi(2) * kappa * kappa;
    Precondition {
        name: "condepsilon2",
        lhs,
        rhs,
        holds: lhs <= rhs,
    }
}

/// `ε₀ ≤ (1−a)²κ²/(4e(G·g)(1)²)`, so that `N_n ≥ 1` exists; compared in logs.
pub fn n_guard(gg: &ApproxFn, kappa: f64, a: f64, ln_eps0: f64) -> Precondition {
    let rhs = 2.0 * (1.0 - a).ln() + 2.0 * kappa.ln() - 4f64.ln() - 1.0 - 2.0 * gg.ln_eval(1.0);
    Precondition {
        name: "N_n exists",
        lhs: ln_eps0,
        rhs,
        holds: ln_eps0 <= rhs,
    }
}

/// Builds the schedule. `ln_eps0_hint` is kept if it satisfies the
/// smallness conditions, otherwise `ε₀` is halved until it does.
pub fn make_schedule(p: &ScheduleParams, ln_eps0_hint: f64) -> Result<KamSchedule> {
    p.big_g.validate()?;
    p.g.validate()?;
    if !(p.kappa > 0.0 && p.kappa_prime > 0.0 && p.r0 > 0.0) {
        return Err(KamError::Invalid(
            "kappa, kappa_prime and r0 must be positive".into(),
        ));
    }
    let gg = ApproxFn::product(&p.big_g, &p.g);
    let a_bar = a_bar(&gg);
    let a = p.a.unwrap_or(1.0 - a_bar);
    if !(a >= 1.0 - a_bar && a < 1.0) {
        return Err(KamError::Invalid(format!(
            "a = {a} outside [1 - {a_bar}, 1)"
        )));
    }
    let c0 = c0(&gg, p.r0, p.n0);
    let floor = EPS0_FLOOR.ln();
    let mut ln_eps0 = ln_eps0_hint;
    loop {
        if ln_eps0 < floor {
            return Err(KamError::NoFeasibleEpsilon(format!(
                "smallness conditions fail for every eps0 >= {EPS0_FLOOR:e}"
            )));
        }
        let ce = condepsilon(&gg, p.kappa, a, p.r0, p.n0, ln_eps0)?;
        let ce2 = condepsilon2(p.c_prime, c0, p.kappa, a, ln_eps0);
        let guard = n_guard(&gg, p.kappa, a, ln_eps0);
        if guard.holds
            && (ce.holds || !p.require_condepsilon)
            && (ce2.holds || !p.require_condepsilon2)
        {
            return Ok(KamSchedule {
                kappa: p.kappa,
                kappa_prime: p.kappa_prime,
                big_g: p.big_g.clone(),
                g: p.g.clone(),
                gg,
                r0: p.r0,
                n0: p.n0,
                a,
                a_bar,
                c0,
                ln_eps0,
                c_prime: p.c_prime,
                condepsilon: ce,
                condepsilon2: ce2,
                n_guard: guard,
            });
        }
        ln_eps0 -= std::f64::consts::LN_2;
    }
}

/// Families with a closed-form sufficient smallness threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SmallnessCase {
    /// `(g·G)(t) = t^s`
    Dioph { s: f64 },
    /// `(g·G)(t) = exp(t^α + t^{α′})`, `α′ < α < 1`
    Exp { alpha: f64 },
    /// `(g·G)(t) = exp(t/(ln t)^δ + t^α)`
    ExpLog { delta: f64, alpha: f64 },
}

/// `ln ε₀` of the explicit sufficient thresholds.
pub fn smallness_explicit(case: SmallnessCase, kappa: f64, r0: f64, n0: u32) -> f64 {
    let p = |k: i32| 4f64.powi(n0 as i32 + k);
    match case {
        SmallnessCase::Dioph { s } => 4.0 * s * (r0 / (p(3) * s)).ln() + kappa.ln(),
        SmallnessCase::Exp { alpha } => {
            (kappa / 4.0).ln()
                - 2.0 * (2.0 * p(2) / (r0 * (1.0 - alpha))).powf(alpha / (1.0 - alpha))
        }
        SmallnessCase::ExpLog { delta, alpha } => {
            let q = (delta - 1.0) * (1.0 - alpha);
            let x = (p(3) / (r0 * q)).powf(1.0 / q);
            // ln (g·G)(e^x) = e^x/x^δ + e^{αx}
            let ln_gg = (x - delta * x.ln()).exp() + (alpha * x).exp();
            (kappa / 4.0).ln() - 2.0 * ln_gg
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrjunoThreshold {
    pub ln_eps0: f64,
    pub passes_condepsilon: bool,
}

/// `ln ε₀ = −r₀/4^{n₀} − |ln(κ/(2(1−a)^{n₀}))| − 2∫₁^∞ ln(g·G)/t²`.
pub fn brjuno_sum_threshold(
    kappa: f64,
    r0: f64,
    n0: u32,
    a: f64,
    gg: &ApproxFn,
) -> Result<BrjunoThreshold> {
    let integral = gg.tail_integral(1.0, 2.0)?;
    let ln_eps0 = -r0 / 4f64.powi(n0 as i32)
        - ((kappa / 2.0).ln() - n0 as f64 * (1.0 - a).ln()).abs()
        - 2.0 * integral;
    let ce = condepsilon(gg, kappa, a, r0, n0, ln_eps0)?;
    Ok(BrjunoThreshold {
        ln_eps0,
        passes_condepsilon: ce.holds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RnBound {
    /// `r₀/4^{n₀} + ln(G·g)(N_{n₀})/(πN_{n₀}) − (1/π)∫_{N_{n₀}}^∞ ln(G·g)/Y²`
    pub value: f64,
    /// `r₀/4^{n₀+1}`
    pub floor: f64,
    pub n_n0: u64,
    pub integral: f64,
}

impl RnBound {
    pub fn certified(&self) -> bool {
        self.value >= self.floor
    }
}

/// Lower bound on `lim r_n` when no resonance occurs after step `n₀`.
pub fn rn_lower_bound(s: &KamSchedule) -> Result<RnBound> {
    let n = s.n_seq(s.n0 as usize);
    if n == 0 {
        return Err(KamError::Invalid(
            "N_{n0} = 0: schedule guard violated".into(),
        ));
    }
    let nf = n as f64;
    let integral = s.gg.tail_integral(nf, 2.0)?;
    let value = s.r0 / 4f64.powi(s.n0 as i32) + s.gg.ln_eval(nf) / (PI * nf) - integral / PI;
    Ok(RnBound {
        value,
        floor: s.r_floor(),
        n_n0: n,
        integral,
    })
}

/// Halting and tolerance settings of [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub max_steps: usize,
    /// Stop once `|F_n|_{r_n}` is at most this. Defaults to
    /// `max(1e-14 ε₀, 1e-250)`; a negative value runs all `max_steps`.
    pub cert_tol: Option<f64>,
    /// Largest accepted conjugation residual for a `Reduced` verdict.
    pub residual_tol: f64,
    pub policy: PreconditionPolicy,
    pub max_modes: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_steps: 200,
            cert_tol: None,
            residual_tol: 1e-10,
            policy: PreconditionPolicy::Record,
            max_modes: crate::torus::DEFAULT_MAX_MODES,
        }
    }
}

impl RunOptions {
    pub fn cert_tol_for(&self, s: &KamSchedule) -> f64 {
        self.cert_tol
            .unwrap_or_else(|| (1e-14 * s.eps0()).max(1e-250))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Status {
    Reduced,
    Stalled(String),
    PreconditionFailure(String),
}

/// State at step `n` and what the step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub n: usize,
    pub r_n: f64,
    pub n_n: u64,
    pub eps_bound: f64,
    pub f_norm: f64,
    pub resonant: bool,
    pub m: Option<Vec<i32>>,
    pub alpha: Complex64,
    /// `|∂_ω Z_n − (A+F)Z_n + Z_n(A_n+F_n)|_{r_n}`
    pub residual: f64,
    /// `|F_{n+1}|_{r_{n+1}}/|F_n|_{r_n}`; NaN on the final record.
    pub contraction: f64,
    pub step_residual: f64,
    pub step_debt: f64,
    pub contraction_bound: f64,
    pub preconditions_hold: bool,
}

impl StepRecord {
    fn state(
        n: usize,
        r: f64,
        s: &KamSchedule,
        f_norm: f64,
        alpha: Complex64,
        residual: f64,
    ) -> Self {
        StepRecord {
            n,
            r_n: r,
            n_n: s.n_seq(n),
            eps_bound: s.eps(n),
            f_norm,
            resonant: false,
            m: None,
            alpha,
            residual,
            contraction: f64::NAN,
            step_residual: f64::NAN,
            step_debt: f64::NAN,
            contraction_bound: f64::NAN,
            preconditions_hold: true,
        }
    }

    fn absorb(&mut self, out: &StepOutput) {
        self.resonant = out.resonant;
        self.m = out.m.clone();
        self.contraction = out.contraction_observed;
        self.step_residual = out.residual_norm;
        self.step_debt = out.truncation_debt;
        self.contraction_bound = out.contraction_bound;
        self.preconditions_hold = out.preconditions_hold();
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    pub records: Vec<StepRecord>,
    pub resonance_count_after_n0: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    n: usize,
    r_n: f64,
    #[serde(rename = "N_n")]
    n_n: u64,
    eps_bound: f64,
    #[serde(rename = "F_norm")]
    f_norm: f64,
    resonant: bool,
    m: String,
    alpha_re: f64,
    alpha_im: f64,
    residual: f64,
    contraction: f64,
}

impl RunTrace {
    /// CSV with columns `n, r_n, N_n, eps_bound, F_norm, resonant, m,
    /// alpha_re, alpha_im, residual, contraction`; `m` is `;`-joined.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            let m =
                r.m.as_ref()
                    .map(|m| {
                        m.iter()
                            .map(|x| x.to_string())
                            .collect::<Vec<_>>()
                            .join(";")
                    })
                    .unwrap_or_default();
            w.serialize(TraceRow {
                n: r.n,
                r_n: r.r_n,
                n_n: r.n_n,
                eps_bound: r.eps_bound,
                f_norm: r.f_norm,
                resonant: r.resonant,
                m,
                alpha_re: r.alpha.re,
                alpha_im: r.alpha.im,
                residual: r.residual,
                contraction: r.contraction,
            })
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Reads a trace written by [`RunTrace::to_csv`]. Columns absent from
    /// the CSV come back as NaN.
    pub fn from_csv(text: &str, n0: u32) -> Result<RunTrace> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let mut records = Vec::new();
        for (i, row) in rd.deserialize::<TraceRow>().enumerate() {
            let row = row.map_err(|e| KamError::Parse(format!("trace row {}: {e}", i + 1)))?;
            let m = if row.m.is_empty() {
                None
            } else {
                Some(
                    row.m
                        .split(';')
                        .map(|x| x.trim().parse::<i32>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| KamError::Parse(format!("trace row {}: m: {e}", i + 1)))?,
                )
            };
            records.push(StepRecord {
                n: row.n,
                r_n: row.r_n,
                n_n: row.n_n,
                eps_bound: row.eps_bound,
                f_norm: row.f_norm,
                resonant: row.resonant,
                m,
                alpha: Complex64::new(row.alpha_re, row.alpha_im),
                residual: row.residual,
                contraction: row.contraction,
                step_residual: f64::NAN,
                step_debt: f64::NAN,
                contraction_bound: f64::NAN,
                preconditions_hold: true,
            });
        }
        let resonance_count_after_n0 = records
            .iter()
            .filter(|r| r.resonant && r.n > n0 as usize)
            .count();
        Ok(RunTrace {
            records,
            resonance_count_after_n0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub status: Status,
    pub b: Sl2,
    pub z: TorusMap,
    pub r_final: f64,
    /// `|∂_ω Z − (A+F)Z + ZB|_{r_final}`, which includes the remaining `F_n`.
    pub residual: f64,
    /// `π Σ⟨m_j,ω⟩`
    pub rotation_sum: f64,
    pub steps: usize,
    pub resonances_after_n0: usize,
}

#[derive(Serialize, Deserialize)]
pub struct CertificateJson {
    pub status: Status,
    #[serde(rename = "B")]
    pub b: Sl2,
    #[serde(rename = "Z")]
    pub z: TorusMapJson,
    pub r_final: f64,
    pub residual: f64,
    pub rotation_sum: f64,
    pub steps: usize,
    pub resonances_after_n0: usize,
}

impl Certificate {
    pub fn to_json(&self) -> String {
        let j = CertificateJson {
            status: self.status.clone(),
            b: self.b,
            z: self.z.to_json_value(),
            r_final: self.r_final,
            residual: self.residual,
            rotation_sum: self.rotation_sum,
            steps: self.steps,
            resonances_after_n0: self.resonances_after_n0,
        };
        serde_json::to_string_pretty(&j).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Certificate> {
        let j: CertificateJson =
            serde_json::from_str(text).map_err(|e| KamError::Parse(e.to_string()))?;
        Ok(Certificate {
            status: j.status,
            b: j.b,
            z: TorusMap::from_json_value(&j.z)?,
            r_final: j.r_final,
            residual: j.residual,
            rotation_sum: j.rotation_sum,
            steps: j.steps,
            resonances_after_n0: j.resonances_after_n0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trace: RunTrace,
    pub certificate: Certificate,
    pub f_final: TorusMap,
    /// Full per-step outputs, in order.
    pub steps: Vec<StepOutput>,
}

/// Iterates KAM steps from `A + F` until `|F_n|_{r_n} ≤ cert_tol` or
/// `max_steps`. Numerical failures inside a step end the run with a
/// `Stalled` status; a step that overshoots `ε_{n+1}` is an error.
pub fn run(
    a: &Sl2,
    f: &TorusMap,
    omega: &[f64],
    s: &KamSchedule,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    if f.dim() != omega.len() {
        return Err(KamError::Invalid(
            "perturbation and frequency dimensions differ".into(),
        ));
    }
    let ctx = s.step_context(omega, opts.policy);
    let cert_tol = opts.cert_tol_for(s);
    let am0 = a.to_mat2();
    let f0 = f.clone().with_max_modes(opts.max_modes);
    let mut a_n = *a;
    let mut f_n = f0.clone();
    let mut z = TorusMap::identity(f.dim()).with_max_modes(opts.max_modes);
    let mut r = s.r0;
    let mut trace = RunTrace::default();
    let mut steps = Vec::new();
    let mut rotation_sum = 0.0;

    let alpha_of = |a: &Sl2| {
        let e = eigen(a, DEFAULT_TOL_DEFECT);
        e.alpha
    };
    let mut f_norm = f_n.weighted_norm(r);
    let status = if f_norm > s.eps0() {
        trace
            .records
            .push(StepRecord::state(0, r, s, f_norm, alpha_of(&a_n), 0.0));
        Status::PreconditionFailure(format!("|F|_r0 = {f_norm:e} exceeds eps0 = {:e}", s.eps0()))
    } else {
        let mut n = 0usize;
        loop {
            let residual = if n == 0 {
                0.0
            } else {
                conjugation_residual(omega, &am0, &f0, &z, &a_n.to_mat2(), &f_n, r)
            };
            let mut rec = StepRecord::state(n, r, s, f_norm, alpha_of(&a_n), residual);
            if f_norm <= cert_tol {
                trace.records.push(rec);
                break Status::Reduced;
            }
            if n >= opts.max_steps {
                trace.records.push(rec);
                break Status::Stalled(format!("max_steps = {} reached", opts.max_steps));
            }
            let big_n = rec.n_n;
            let nf = big_n as f64;
            let scan_n = big_n.min(u32::MAX as u64) as u32;
            let attempt = find_resonance(rec.alpha, omega, s.kappa, &s.big_g, &s.g, scan_n)
                .and_then(|rep| match &rep.m {
                    Some(m) => {
                        let r_next = resonant_radius(r, nf, s.c0, s.gg.ln_eval(nf + 1.0));
                        step_resonant(&a_n, &f_n, r, r_next, nf, s.a, m, &ctx)
                    }
                    None => {
                        let r_next = nonresonant_radius(r, nf, s.a, s.c0);
                        step_nonresonant(&a_n, &f_n, r, r_next, nf, s.a, &ctx)
                    }
                });
            let out = match attempt {
                Ok(out) => out,
                Err(KamError::PreconditionFailure(d)) => {
                    trace.records.push(rec);
                    break Status::PreconditionFailure(d);
                }
                Err(e) => {
                    trace.records.push(rec);
                    break Status::Stalled(e.to_string());
                }
            };
            if out.r_next <= 0.0 {
                trace.records.push(rec);
                break Status::Stalled(format!("strip width exhausted at step {n}"));
            }
            rec.absorb(&out);
            if let Some(m) = &out.m {
                rotation_sum += PI * dot(m, omega);
                if n > s.n0 as usize {
                    trace.resonance_count_after_n0 += 1;
                }
            }
            trace.records.push(rec);
            let next_norm = out.f_next.weighted_norm(out.r_next);
            a_n = out.a_next;
            f_n = out.f_next.clone();
            let zn = z.mul(&out.z_step);
            z = if z.is_real() && out.z_step.is_real() {
                zn.assume_real()
            } else {
                zn
            };
            r = out.r_next;
            f_norm = next_norm;
            steps.push(out);
            n += 1;
            if !(next_norm <= s.eps(n)) {
                let residual = conjugation_residual(omega, &am0, &f0, &z, &a_n.to_mat2(), &f_n, r);
                trace
                    .records
                    .push(StepRecord::state(n, r, s, f_norm, alpha_of(&a_n), residual));
                return Err(KamError::ScheduleViolation {
                    step: n,
                    measured: next_norm,
                    bound: s.eps(n),
                    trace: Box::new(trace),
                });
            }
        }
    };

    let b = a_n;
    let cert_residual = if trace.records.len() <= 1 && f_n.is_empty() {
        0.0
    } else {
        let lhs = z.dir_derivative(omega);
        let left = f0.add_constant(&am0).mul(&z);
        let right = z.right_mul_const(&b.to_mat2());
        lhs.sub(&left).add(&right).weighted_norm(r)
    };
    let status = match status {
        Status::Reduced if cert_residual > opts.residual_tol => Status::Stalled(format!(
            "conjugation residual {cert_residual:e} above {:e}",
            opts.residual_tol
        )),
        Status::Reduced if r < s.r_floor() => Status::Stalled(format!(
            "final strip width {r:e} below r0/4^(n0+1) = {:e}",
            s.r_floor()
        )),
        other => other,
    };
    let certificate = Certificate {
        status,
        b,
        z,
        r_final: r,
        residual: cert_residual,
        rotation_sum,
        steps: steps.len(),
        resonances_after_n0: trace.resonance_count_after_n0,
    };
    Ok(RunOutcome {
        trace,
        certificate,
        f_final: f_n,
        steps,
    })
}

/// One named pass/fail verdict of an audit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(name: &str, pass: bool, detail: String) -> Self {
        Verdict {
            name: name.to_string(),
            pass,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub verdicts: Vec<Verdict>,
    pub resonances_after_n0: usize,
    pub passes: bool,
}

impl AuditReport {
    pub fn get(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }
}

/// Re-checks a recorded trace: the iteration invariants (strip floor,
/// resonance proximity, `|m_n| ≤ N_n`, `|F_n| ≤ ε_n`, residual, and
/// eigenvalue continuity), agreement with the schedule, and the
/// resonance budget (`Σ|m_j| ≤ N_n²`, interlacing, and no resonance after
/// `n₀` when `κ′ > κ sup_{t≥n₀} g(t²)/G(t)`). When `rho_target` is given
/// the rotation number is scanned against `NR_ω(κ′, g)` up to the last `N_n`.
pub fn resonance_budget_check(
    trace: &RunTrace,
    s: &KamSchedule,
    omega: &[f64],
    residual_tol: f64,
    rho_target: Option<f64>,
) -> AuditReport {
    let recs = &trace.records;
    let mut v = Vec::new();
    let rel = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1e-300);

    let after_n0 = recs
        .iter()
        .filter(|r| r.resonant && r.n > s.n0 as usize)
        .count();

    // item 1
    let low = recs.iter().find(|r| !(r.r_n >= s.r_floor()));
    v.push(Verdict::new(
        "item1_strip_floor",
        low.is_none(),
        match low {
            Some(r) => format!("r_{} = {:e} < {:e}", r.n, r.r_n, s.r_floor()),
            None => format!("all r_n >= {:e}", s.r_floor()),
        },
    ));

    // item 2
    let mut bad2 = Vec::new();
    for r in recs.iter().filter(|r| r.resonant) {
        let m = r.m.as_deref().unwrap_or(&[]);
        let d = (r.alpha - Complex64::new(0.0, PI * dot(m, omega))).norm();
        let bound = s.kappa / (4.0 * s.big_g.eval(r.n_n as f64));
        if !(d <= bound) {
            bad2.push(format!("n={}: {d:e} > {bound:e}", r.n));
        }
    }
    v.push(Verdict::new(
        "item2_resonance_proximity",
        bad2.is_empty(),
        bad2.join("; "),
    ));

    // item 3
    let bad3: Vec<String> = recs
        .iter()
        .filter_map(|r| {
            let m = r.m.as_ref()?;
            (l1(m) as u64 > r.n_n).then(|| format!("n={}: |m|={} > N={}", r.n, l1(m), r.n_n))
        })
        .collect();
    v.push(Verdict::new(
        "item3_mode_size",
        bad3.is_empty(),
        bad3.join("; "),
    ));

    // item 4
    let bad4: Vec<String> = recs
        .iter()
        .filter(|r| !(r.f_norm <= r.eps_bound) || !rel(r.eps_bound, s.eps(r.n)))
        .map(|r| format!("n={}: |F|={:e}, eps_n={:e}", r.n, r.f_norm, s.eps(r.n)))
        .collect();
    v.push(Verdict::new(
        "item4_perturbation_bound",
        bad4.is_empty(),
        bad4.join("; "),
    ));

    // item 5
    let bad5: Vec<String> = recs
        .iter()
        .filter(|r| !(r.residual <= residual_tol))
        .map(|r| format!("n={}: residual {:e}", r.n, r.residual))
        .collect();
    v.push(Verdict::new(
        "item5_conjugation_residual",
        bad5.is_empty(),
        bad5.join("; "),
    ));

    // item 6, up to the sign of α
    let mut bad6 = Vec::new();
    for w in recs.windows(2) {
        let m = w[0].m.as_deref().unwrap_or(&[]);
        let shifted = w[0].alpha - Complex64::new(0.0, PI * dot(m, omega));
        let d = (shifted - w[1].alpha)
            .norm()
            .min((shifted + w[1].alpha).norm());
        let bound = s.eps(w[0].n).sqrt();
        if !(d <= bound) {
            bad6.push(format!("n={}: {d:e} > {bound:e}", w[0].n));
        }
    }
    v.push(Verdict::new(
        "item6_eigenvalue_continuity",
        bad6.is_empty(),
        bad6.join("; "),
    ));

    // schedule agreement
    let mut bad_s = Vec::new();
    for r in recs {
        if r.n_n != s.n_seq(r.n) {
            bad_s.push(format!("n={}: N_n {} != {}", r.n, r.n_n, s.n_seq(r.n)));
        }
    }
    if let Some(first) = recs.first() {
        if !rel(first.r_n, s.r0) {
            bad_s.push(format!("r_0 = {:e} != {:e}", first.r_n, s.r0));
        }
    }
    for w in recs.windows(2) {
        let nf = w[0].n_n as f64;
        let want = if w[0].resonant {
            resonant_radius(w[0].r_n, nf, s.c0, s.gg.ln_eval(nf + 1.0))
        } else {
            nonresonant_radius(w[0].r_n, nf, s.a, s.c0)
        };
        if !rel(w[1].r_n, want) {
            bad_s.push(format!("n={}: r_n {:e} != {:e}", w[1].n, w[1].r_n, want));
        }
        if w[1].n != w[0].n + 1 {
            bad_s.push(format!("step index {} follows {}", w[1].n, w[0].n));
        }
    }
    v.push(Verdict::new(
        "schedule_agreement",
        bad_s.is_empty(),
        bad_s.join("; "),
    ));

    // budget Σ|m_j| ≤ N_n²
    let mut sum = 0u64;
    let mut bad_b = Vec::new();
    for r in recs {
        if let Some(m) = &r.m {
            sum += l1(m) as u64;
        }
        if (sum as f64) > (r.n_n as f64).powi(2) {
            bad_b.push(format!("n={}: sum |m_j| = {sum} > N_n^2", r.n));
        }
    }
    v.push(Verdict::new(
        "budget_sum_m",
        bad_b.is_empty(),
        bad_b.join("; "),
    ));

    // interlacing of N at consecutive resonances
    let res_n: Vec<u64> = recs.iter().filter(|r| r.resonant).map(|r| r.n_n).collect();
    let inter = res_n.windows(2).all(|w| w[1] > w[0]);
    v.push(Verdict::new(
        "budget_interlacing",
        inter,
        format!("N at resonances: {res_n:?}"),
    ));

    // κ′ hypothesis and resonances after n₀
    let t0 = (s.n0 as f64).max(1.0);
    let ratio = ratio_bounded(&s.g, &s.big_g, t0, t0 * 1e6, 600);
    let threshold = s.kappa * ratio.sup;
    let hypothesis = ratio.bounded && s.kappa_prime > threshold;
    let mut chain = Vec::new();
    let mut cum = 0u64;
    for r in recs {
        if let Some(m) = &r.m {
            cum += l1(m) as u64;
            if r.n > s.n0 as usize {
                let rhs = (2.0 * s.eps(r.n).sqrt() + s.kappa / (4.0 * s.big_g.eval(r.n_n as f64)))
                    * s.g.eval(cum as f64);
                chain.push(format!("n={}: kappa' <= {rhs:e} required", r.n));
            }
        }
    }
    v.push(Verdict::new(
        "budget_no_resonance_after_n0",
        !hypothesis || after_n0 == 0,
        format!(
            "kappa' = {:e}, kappa sup g(t^2)/G(t) = {threshold:e} (bounded: {}), resonances after n0: {after_n0}. {}",
            s.kappa_prime,
            ratio.bounded,
            chain.join("; ")
        ),
    ));

    if let Some(rho) = rho_target {
        let n_last = recs
            .last()
            .map(|r| r.n_n)
            .unwrap_or(1)
            .clamp(1, u32::MAX as u64) as u32;
        let c = check_rho_arithmetic(rho, omega, s.kappa_prime, &s.g, n_last);
        v.push(Verdict::new(
            "rho_arithmetic",
            c.passes,
            format!("offender {:?}, ratio {:e}", c.offender, c.ratio),
        ));
    }

    let passes = v.iter().all(|x| x.pass);
    AuditReport {
        verdicts: v,
        resonances_after_n0: after_n0,
        passes,
    }
}

/// `|F|_{r₀} ≤ ε₀`
pub fn within_eps0(f: &TorusMap, s: &KamSchedule) -> bool {
    f.weighted_norm(s.r0) <= s.eps0()
}

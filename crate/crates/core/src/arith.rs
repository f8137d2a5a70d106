//! Approximation functions, non-resonance sets and Brjuno-type integrals.
//!
//! `NR(κ, G)` is the set of `ω` with `|⟨m,ω⟩| ≥ κ/G(|m|)` for all `m ≠ 0`;
//! `NR_ω^N(κ′, g)` is the set of `α` with `|α − iπ⟨m,ω⟩| ≥ κ′/g(|m|)` for
//! `0 < |m| ≤ N`. All scans run over the ℓ¹ ball `|m| = Σ|m_i| ≤ N`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};

/// Positive increasing function `G` or `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ApproxFn {
    /// `t^μ`
    Power { mu: f64 },
    /// `exp(t^α)`
    ExpPow { alpha: f64 },
    /// `exp(t/(ln t)^δ)` for `t ≥ e^δ`, constant below.
    ExpLog { delta: f64 },
    /// Step function `t ↦ values[⌊t⌋ − 1]`, clamped at both ends.
    Tabulated { values: Vec<f64> },
    /// Pointwise product.
    Product { factors: Vec<ApproxFn> },
}

impl ApproxFn {
    pub fn product(f: &ApproxFn, g: &ApproxFn) -> ApproxFn {
        let mut factors = Vec::new();
        for h in [f, g] {
            match h {
                ApproxFn::Product { factors: inner } => factors.extend(inner.iter().cloned()),
                other => factors.push(other.clone()),
            }
        }
        ApproxFn::Product { factors }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(KamError::Invalid(format!("approximation function: {what}")));
        match self {
            ApproxFn::Power { mu } if !(mu.is_finite() && *mu > 0.0) => bad("need mu > 0"),
            ApproxFn::ExpPow { alpha } if !(alpha.is_finite() && *alpha > 0.0) => {
                bad("need alpha > 0")
            }
            ApproxFn::ExpLog { delta } if !(delta.is_finite() && *delta > 0.0) => {
                bad("need delta > 0")
            }
            ApproxFn::Tabulated { values } => {
                if values.is_empty() || values[0] < 1.0 {
                    return bad("table must be non-empty with first value >= 1");
                }
                if values.windows(2).any(|w| w[1] < w[0]) || values.iter().any(|v| v.is_nan()) {
                    return bad("table must be nondecreasing");
                }
                Ok(())
            }
            ApproxFn::Product { factors } => {
                if factors.is_empty() {
                    return bad("empty product");
                }
                factors.iter().try_for_each(|f| f.validate())
            }
            _ => Ok(()),
        }
    }

    /// `ln f(t)`, finite where `f(t)` itself would overflow.
    pub fn ln_eval(&self, t: f64) -> f64 {
        match self {
            ApproxFn::Power { mu } => mu * t.ln(),
            ApproxFn::ExpPow { alpha } => t.powf(*alpha),
            ApproxFn::ExpLog { delta } => {
                let u = t.ln().max(*delta);
                u.exp() / u.powf(*delta)
            }
            ApproxFn::Tabulated { values } => {
                let i = (t.floor().max(1.0) as usize - 1).min(values.len() - 1);
                values[i].ln()
            }
            ApproxFn::Product { factors } => factors.iter().map(|f| f.ln_eval(t)).sum(),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.ln_eval(t).exp()
    }

    /// Smallest `t ≥ 1` with `ln f(t) ≥ ly` (exact inverse on increasing
    /// pieces). Returns 1 when `ly ≤ ln f(1)`.
    pub fn ln_inverse(&self, ly: f64) -> f64 {
        if ly <= self.ln_eval(1.0) {
            return 1.0;
        }
        match self {
            ApproxFn::Power { mu } => (ly / mu).exp(),
            ApproxFn::ExpPow { alpha } => ly.powf(1.0 / alpha),
            ApproxFn::Tabulated { values } => {
                let i = values.partition_point(|v| v.ln() < ly);
                if i == values.len() {
                    f64::INFINITY
                } else {
                    (i + 1) as f64
                }
            }
            _ => self.bisect_inverse(ly),
        }
    }

    pub fn inverse(&self, y: f64) -> f64 {
        self.ln_inverse(y.ln())
    }

    fn bisect_inverse(&self, ly: f64) -> f64 {
        // bisection on u = ln t
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while self.ln_eval(hi.exp()) < ly {
            lo = hi;
            hi *= 2.0;
            if hi > 710.0 {
                return f64::INFINITY;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.ln_eval(mid.exp()) < ly {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi.exp()
    }

    /// `∫_lower^∞ ln f(t) / t^p dt`.
    pub fn tail_integral(&self, lower: f64, p: f64) -> Result<f64> {
        if !(lower >= 1.0) || !(p > 1.0) {
            return Err(KamError::Invalid(format!(
                "tail_integral needs lower >= 1 and exponent > 1, got {lower}, {p}"
            )));
        }
        match self {
            ApproxFn::Product { factors } => {
                let mut s = 0.0;
                for f in factors {
                    s += f.tail_integral(lower, p)?;
                }
                Ok(s)
            }
            ApproxFn::Tabulated { values } => Ok(tabulated_tail(values, lower, p)),
            _ => self.quadrature_tail(lower, p),
        }
    }

    fn quadrature_tail(&self, lower: f64, p: f64) -> Result<f64> {
        if let ApproxFn::ExpPow { alpha } = self {
            if *alpha >= p - 1.0 {
                return Err(KamError::Divergent(format!(
                    "exp(t^{alpha}) with exponent {p}: integrand ~ t^{}",
                    alpha - p
                )));
            }
        }
        if let ApproxFn::ExpLog { delta } = self {
            if p < 2.0 || (p == 2.0 && *delta <= 1.0) {
                return Err(KamError::Divergent(format!(
                    "exp(t/(ln t)^{delta}) with exponent {p}"
                )));
            }
        }
        let u0 = lower.ln();
        let u_star = u0 + TAIL_SPAN;
        let mut breaks = vec![u0];
        if let ApproxFn::ExpLog { delta } = self {
            if *delta > u0 && *delta < u_star {
                breaks.push(*delta);
            }
        }
        breaks.push(u_star);
        let integrand = |u: f64| self.ln_eval(u.exp()) * (u * (1.0 - p)).exp();
        let mut total = 0.0;
        for w in breaks.windows(2) {
            let mut a = w[0];
            while a < w[1] {
                let b = (a + PANEL).min(w[1]);
                total += quadrature::double_exponential::integrate(integrand, a, b, 1e-15).integral;
                a = b;
            }
        }
        let t_star = u_star.exp();
        let tail = match self {
            ApproxFn::Power { mu } => {
                let q = p - 1.0;
                mu * t_star.powf(-q) * (u_star / q + 1.0 / (q * q))
            }
            ApproxFn::ExpPow { alpha } => t_star.powf(alpha + 1.0 - p) / (p - 1.0 - alpha),
            ApproxFn::ExpLog { delta } => {
                if p == 2.0 {
                    u_star.powf(1.0 - delta) / (delta - 1.0)
                } else {
                    // upper bound: (ln t)^{-δ} ≤ (ln T*)^{-δ}
                    u_star.powf(-delta) * t_star.powf(2.0 - p) / (p - 2.0)
                }
            }
            _ => unreachable!("handled by tail_integral"),
        };
        Ok(total + tail)
    }
}

/// Quadrature covers `u = ln t ∈ [ln lower, ln lower + TAIL_SPAN]`.
const TAIL_SPAN: f64 = 60.0;
const PANEL: f64 = 1.0;

fn tabulated_tail(values: &[f64], lower: f64, p: f64) -> f64 {
    let q = p - 1.0;
    // ∫_a^b t^{-p} dt
    let seg = |a: f64, b: f64| (a.powf(-q) - if b.is_finite() { b.powf(-q) } else { 0.0 }) / q;
    let mut total = 0.0;
    let mut a = lower;
    loop {
        let i = (a.floor() as usize).max(1);
        let v = values[(i - 1).min(values.len() - 1)].ln();
        if i >= values.len() {
            total += v * seg(a, f64::INFINITY);
            break;
        }
        let b = (i + 1) as f64;
        total += v * seg(a, b);
        a = b;
    }
    total
}

/// Result of a non-resonance scan.
#[derive(Debug, Clone, PartialEq)]
pub struct NrCheck {
    pub passes: bool,
    /// Minimizer of the normalized distance among scanned modes.
    pub offender: Option<Vec<i32>>,
    /// `distance · f(|m|) / level` at the offender; below 1 means failure.
    pub ratio: f64,
}

impl NrCheck {
    fn vacuous() -> Self {
        NrCheck {
            passes: true,
            offender: None,
            ratio: f64::INFINITY,
        }
    }
}

/// Calls `visit` on every integer `m` with `0 < |m|₁ ≤ n`.
pub fn for_each_in_ball(dim: usize, n: u32, mut visit: impl FnMut(&[i32])) {
    let mut m = vec![0i32; dim];
    ball_rec(&mut m, 0, n as i64, &mut visit);
}

fn ball_rec(m: &mut Vec<i32>, i: usize, left: i64, visit: &mut impl FnMut(&[i32])) {
    if i == m.len() {
        if m.iter().any(|&x| x != 0) {
            visit(m);
        }
        return;
    }
    for x in -left..=left {
        m[i] = x as i32;
        ball_rec(m, i + 1, left - x.abs(), visit);
    }
    m[i] = 0;
}

/// Calls `visit` on every `0 < |m|₁ ≤ n` with `|⟨m,ω⟩ − center| ≤ halfwidth`.
/// The coordinate with the largest `|ω_j|` is solved for, so the cost is
/// `O(n^{d−1})` times the window length.
pub fn for_each_in_window(
    omega: &[f64],
    n: u32,
    center: f64,
    halfwidth: f64,
    mut visit: impl FnMut(&[i32]),
) {
    let dim = omega.len();
    let j = (0..dim)
        .max_by(|&a, &b| omega[a].abs().total_cmp(&omega[b].abs()))
        .expect("non-empty frequency vector");
    let wj = omega[j];
    if wj == 0.0 {
        // all frequencies vanish; every mode sits at 0
        if center.abs() <= halfwidth {
            for_each_in_ball(dim, n, visit);
        }
        return;
    }
    let others: Vec<usize> = (0..dim).filter(|&i| i != j).collect();
    let mut sub = vec![0i32; others.len()];
    let mut m = vec![0i32; dim];
    let mut run = |sub: &[i32]| {
        let used: i64 = sub.iter().map(|x| x.unsigned_abs() as i64).sum();
        let left = n as i64 - used;
        let mut s = 0.0;
        for (k, &i) in others.iter().enumerate() {
            m[i] = sub[k];
            s += sub[k] as f64 * omega[i];
        }
        let x0 = (center - halfwidth - s) / wj;
        let x1 = (center + halfwidth - s) / wj;
        let (lo, hi) = (x0.min(x1), x0.max(x1));
        let lo = (lo.ceil() as i64).max(-left);
        let hi = (hi.floor() as i64).min(left);
        for x in lo..=hi {
            m[j] = x as i32;
            if m.iter().any(|&v| v != 0) {
                visit(&m);
            }
        }
    };
    sub_rec(&mut sub, 0, n as i64, &mut run);
}

fn sub_rec(sub: &mut Vec<i32>, i: usize, left: i64, run: &mut impl FnMut(&[i32])) {
    if i == sub.len() {
        run(sub);
        return;
    }
    for x in -left..=left {
        sub[i] = x as i32;
        sub_rec(sub, i + 1, left - x.abs(), run);
    }
    sub[i] = 0;
}

pub fn dot(m: &[i32], omega: &[f64]) -> f64 {
    m.iter().zip(omega).map(|(&a, &b)| a as f64 * b).sum()
}

pub fn l1(m: &[i32]) -> u32 {
    m.iter().map(|x| x.unsigned_abs()).sum()
}

/// Strict lexicographic order used for tie-breaking.
fn better(ratio: f64, m: &[i32], best: &Option<(f64, Vec<i32>)>) -> bool {
    match best {
        None => true,
        Some((r, bm)) => ratio < *r || (ratio == *r && m < bm.as_slice()),
    }
}

/// Whether `ω ∈ NR(κ, G)` up to `|m| ≤ n`, by exhaustive scan of the ball.
pub fn check_nr_omega(omega: &[f64], kappa: f64, big_g: &ApproxFn, n: u32) -> NrCheck {
    if n == 0 {
        return NrCheck::vacuous();
    }
    let mut best: Option<(f64, Vec<i32>)> = None;
    for_each_in_ball(omega.len(), n, |m| {
        let ratio = dot(m, omega).abs() * big_g.eval(l1(m) as f64) / kappa;
        if better(ratio, m, &best) {
            best = Some((ratio, m.to_vec()));
        }
    });
    finish_check(best)
}

/// Whether `α ∈ NR_ω^N(κ′, g)`, i.e. `|α − iπ⟨m,ω⟩| ≥ κ′/g(|m|)` for
/// `0 < |m| ≤ n`. Only modes with `|Im α − π⟨m,ω⟩| ≤ 2κ′/g(1)` can
/// violate or come close, so the scan is restricted to that window.
pub fn check_nr_alpha(
    alpha: Complex64,
    omega: &[f64],
    kappa_p: f64,
    g: &ApproxFn,
    n: u32,
) -> NrCheck {
    if n == 0 {
        return NrCheck::vacuous();
    }
    let halfwidth = 2.0 * kappa_p / (PI * g.eval(1.0));
    let mut best: Option<(f64, Vec<i32>)> = None;
    for_each_in_window(omega, n, alpha.im / PI, halfwidth, |m| {
        let dist = (alpha - Complex64::new(0.0, PI * dot(m, omega))).norm();
        let ratio = dist * g.eval(l1(m) as f64) / kappa_p;
        if better(ratio, m, &best) {
            best = Some((ratio, m.to_vec()));
        }
    });
    finish_check(best)
}

fn finish_check(best: Option<(f64, Vec<i32>)>) -> NrCheck {
    match best {
        None => NrCheck::vacuous(),
        Some((ratio, m)) => NrCheck {
            passes: ratio >= 1.0,
            offender: Some(m),
            ratio,
        },
    }
}

/// Empirical `(κ, G)` for a frequency vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedG {
    pub kappa: f64,
    /// `G(N)` for `N = 1..=n_max`.
    pub values: Vec<f64>,
    /// Minimizer of `|⟨m,ω⟩|` on the shell `|m| = N`.
    pub argmin: Vec<Vec<i32>>,
}

impl FittedG {
    pub fn approx_fn(&self) -> ApproxFn {
        ApproxFn::Tabulated {
            values: self.values.clone(),
        }
    }
}

/// `κ = min_i |ω_i|` and `G(N) = max_{0<|m|≤N} κ/|⟨m,ω⟩|` (at least 1).
pub fn fit_g(omega: &[f64], n_max: u32) -> FittedG {
    let kappa = omega.iter().fold(f64::INFINITY, |a, w| a.min(w.abs()));
    let n_max = n_max.max(1) as usize;
    let mut shell_min: Vec<Option<(f64, Vec<i32>)>> = vec![None; n_max + 1];
    for_each_in_ball(omega.len(), n_max as u32, |m| {
        let s = l1(m) as usize;
        let v = dot(m, omega).abs();
        if better(v, m, &shell_min[s]) {
            shell_min[s] = Some((v, m.to_vec()));
        }
    });
    let mut values = Vec::with_capacity(n_max);
    let mut argmin = Vec::with_capacity(n_max);
    let mut running = 1.0f64;
    for entry in shell_min.into_iter().skip(1) {
        let (v, m) = entry.expect("every shell is non-empty");
        running = running.max(kappa / v);
        values.push(running);
        argmin.push(m);
    }
    FittedG {
        kappa,
        values,
        argmin,
    }
}

/// Boundedness of `t ↦ g(t²)/G(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioReport {
    pub bounded: bool,
    /// Decided from the function families rather than from samples.
    pub analytic: bool,
    /// Largest sampled value on `[t_min, t_max]`.
    pub sup: f64,
}

pub fn ratio_bounded(
    g: &ApproxFn,
    big_g: &ApproxFn,
    t_min: f64,
    t_max: f64,
    samples: usize,
) -> RatioReport {
    let samples = samples.max(2);
    let (l0, l1) = (t_min.ln(), t_max.ln());
    let ln_ratio = |t: f64| g.ln_eval(t * t) - big_g.ln_eval(t);
    let mut vals = Vec::with_capacity(samples);
    for i in 0..samples {
        let t = (l0 + (l1 - l0) * i as f64 / (samples - 1) as f64).exp();
        vals.push(ln_ratio(t));
    }
    let sup = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp();
    use ApproxFn::*;
    let analytic = match (g, big_g) {
        (Power { mu }, Power { mu: mu2 }) => Some(*mu2 >= 2.0 * mu),
        (ExpPow { alpha }, ExpPow { alpha: a2 }) => Some(2.0 * alpha <= *a2),
        (ExpPow { alpha }, ExpLog { .. }) => Some(2.0 * alpha < 1.0),
        (Power { .. }, ExpPow { .. } | ExpLog { .. }) => Some(true),
        (ExpPow { .. } | ExpLog { .. }, Power { .. }) => Some(false),
        (ExpLog { .. }, ExpPow { .. } | ExpLog { .. }) => Some(false),
        _ => None,
    };
    match analytic {
        Some(bounded) => RatioReport {
            bounded,
            analytic: true,
            sup,
        },
        None => {
            // heuristic: the log-ratio must stop growing over the last decade
            let k = samples / 10 + 1;
            let tail_growth = vals[samples - 1] - vals[samples - 1 - k.min(samples - 1)];
            RatioReport {
                bounded: tail_growth <= 1e-12 * (1.0 + vals[samples - 1].abs()),
                analytic: false,
                sup,
            }
        }
    }
}

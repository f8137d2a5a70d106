//! Finitely supported Fourier series on the torus 𝕋^d and the double torus
//! 2𝕋^d = ℝ^d/2ℤ^d, with 2×2 complex matrix coefficients.
//!
//! A mode is stored by its doubled index `half_k`: the frequency is
//! `half_k / 2`, so ordinary 𝕋^d modes have all-even entries and the
//! half-integer modes produced by resonance elimination have odd entries.
//! Everything is weighted by `|F|_r = Σ ‖F̂(k)‖ e^{2π|k|r}` with
//! `|k| = Σ |half_k_i| / 2` and `‖·‖` the operator norm.
//!
//! Products grow the support; coefficients below [`PRUNE_BELOW`] and any
//! excess over the mode cap are dropped, and their norms are kept per
//! modulus in a debt profile so that [`TorusMap::truncation_debt`] bounds
//! the weighted norm of everything that was thrown away.

use std::collections::HashMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{KamError, Result};
use crate::mat2::Mat2;

pub const MAX_DIM: usize = 3;
pub const PRUNE_BELOW: f64 = 1e-300;
pub const DEFAULT_MAX_MODES: usize = 4096;
/// Tolerance used for the conjugate-symmetry check.
pub const REALITY_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct FreqIndex {
    half_k: [i32; MAX_DIM],
}

impl FreqIndex {
    pub fn zero() -> Self {
        FreqIndex::default()
    }

    pub fn from_half(half_k: &[i32]) -> Self {
        assert!(half_k.len() <= MAX_DIM, "dimension above {MAX_DIM}");
        let mut h = [0; MAX_DIM];
        h[..half_k.len()].copy_from_slice(half_k);
        FreqIndex { half_k: h }
    }

    /// Integer mode `m ∈ ℤ^d`.
    pub fn integer(m: &[i32]) -> Self {
        let doubled: Vec<i32> = m.iter().map(|x| 2 * x).collect();
        Self::from_half(&doubled)
    }

    pub fn half_k(&self, dim: usize) -> &[i32] {
        &self.half_k[..dim]
    }

    pub fn is_zero(&self) -> bool {
        self.half_k.iter().all(|&h| h == 0)
    }

    pub fn is_integer(&self) -> bool {
        self.half_k.iter().all(|h| h % 2 == 0)
    }

    /// Integer coordinates `m`, when the mode lies on ℤ^d.
    pub fn as_integer(&self, dim: usize) -> Option<Vec<i32>> {
        self.is_integer()
            .then(|| self.half_k[..dim].iter().map(|h| h / 2).collect())
    }

    pub fn twice_modulus(&self) -> u32 {
        self.half_k.iter().map(|h| h.unsigned_abs()).sum()
    }

    /// `|k| = Σ |half_k_i| / 2`.
    pub fn modulus(&self) -> f64 {
        self.twice_modulus() as f64 / 2.0
    }

    /// `⟨k, ω⟩` with `k = half_k / 2`.
    pub fn dot(&self, omega: &[f64]) -> f64 {
        0.5 * self
            .half_k
            .iter()
            .zip(omega)
            .map(|(&h, &w)| h as f64 * w)
            .sum::<f64>()
    }

    pub fn neg(&self) -> Self {
        let mut h = self.half_k;
        h.iter_mut().for_each(|x| *x = -*x);
        FreqIndex { half_k: h }
    }

    pub fn add(&self, other: &FreqIndex) -> Self {
        let mut h = self.half_k;
        for (x, y) in h.iter_mut().zip(other.half_k) {
            *x += y;
        }
        FreqIndex { half_k: h }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lattice {
    Integer,
    Half,
}

/// Finitely supported matrix-valued Fourier series.
#[derive(Debug, Clone)]
pub struct TorusMap {
    dim: usize,
    coeffs: Vec<(FreqIndex, Mat2)>,
    real: bool,
    lattice: Lattice,
    /// Dropped coefficient norms bucketed by twice the modulus.
    debt: Vec<f64>,
    max_modes: usize,
}

impl PartialEq for TorusMap {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.real == other.real
            && self.coeffs == other.coeffs
            && self.debt == other.debt
    }
}

impl TorusMap {
    pub fn zero(dim: usize) -> Self {
        assert!(
            (1..=MAX_DIM).contains(&dim),
            "dimension must be in 1..={MAX_DIM}"
        );
        TorusMap {
            dim,
            coeffs: Vec::new(),
            real: true,
            lattice: Lattice::Integer,
            debt: Vec::new(),
            max_modes: DEFAULT_MAX_MODES,
        }
    }

    pub fn constant(dim: usize, m: Mat2, real: bool) -> Self {
        Self::from_coeffs(dim, [(FreqIndex::zero(), m)], real)
    }

    pub fn identity(dim: usize) -> Self {
        Self::constant(dim, Mat2::identity(), true)
    }

    pub fn single_mode(dim: usize, k: FreqIndex, m: Mat2) -> Self {
        Self::from_coeffs(dim, [(k, m)], false)
    }

    /// Builds a map from (index, coefficient) pairs. Duplicate indices are
    /// summed. With `real = true` the conjugate symmetry is enforced by
    /// averaging `c(k)` with `conj(c(-k))`; missing partners are created.
    pub fn from_coeffs(
        dim: usize,
        coeffs: impl IntoIterator<Item = (FreqIndex, Mat2)>,
        real: bool,
    ) -> Self {
        let mut acc: HashMap<FreqIndex, Mat2> = HashMap::new();
        for (k, c) in coeffs {
            *acc.entry(k).or_default() += c;
        }
        let mut out = Self::zero(dim);
        out.real = real;
        out.finish(acc, Vec::new());
        out
    }

    /// Real trigonometric map from integer modes: each `(m, M)` contributes
    /// `M e^{2iπ⟨m,θ⟩} + conj(M) e^{-2iπ⟨m,θ⟩}` (for `m = 0`, just `M`).
    pub fn real_from_modes(dim: usize, modes: &[(Vec<i32>, Mat2)]) -> Self {
        let mut v = Vec::new();
        for (m, c) in modes {
            let k = FreqIndex::integer(m);
            if k.is_zero() {
                v.push((k, *c));
            } else {
                v.push((k, *c));
                v.push((k.neg(), c.conj()));
            }
        }
        Self::from_coeffs(dim, v, true)
    }

    pub fn with_max_modes(mut self, max_modes: usize) -> Self {
        self.max_modes = max_modes.max(1);
        let acc: HashMap<_, _> = self.coeffs.drain(..).collect();
        let debt = std::mem::take(&mut self.debt);
        self.finish(acc, debt);
        self
    }

    fn finish(&mut self, mut acc: HashMap<FreqIndex, Mat2>, mut debt: Vec<f64>) {
        if self.real {
            let keys: Vec<FreqIndex> = acc.keys().copied().collect();
            let mut sym = HashMap::with_capacity(acc.len());
            for k in keys {
                let c = acc[&k];
                let partner = acc.get(&k.neg()).copied().unwrap_or_default();
                let avg = if k.is_zero() {
                    Mat2::from_real(c.re())
                } else {
                    (c + partner.conj()).scale_re(0.5)
                };
                sym.insert(k, avg);
                sym.entry(k.neg()).or_insert_with(|| avg.conj());
            }
            acc = sym;
        }
        let mut entries: Vec<(FreqIndex, Mat2, f64)> = acc
            .into_iter()
            .map(|(k, c)| {
                let n = c.op_norm();
                (k, c, n)
            })
            .collect();
        entries.retain(|(k, _, n)| {
            if *n < PRUNE_BELOW {
                add_debt(&mut debt, k.twice_modulus(), *n);
                false
            } else {
                true
            }
        });
        if entries.len() > self.max_modes {
            // keep the largest coefficients; ties broken by index for determinism
            entries.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            if self.real {
                // keep conjugate pairs together
                let mut kept = Vec::with_capacity(self.max_modes);
                let mut seen = std::collections::HashSet::new();
                let lookup: HashMap<FreqIndex, (Mat2, f64)> =
                    entries.iter().map(|(k, c, n)| (*k, (*c, *n))).collect();
                for (k, c, n) in &entries {
                    if seen.contains(k) {
                        continue;
                    }
                    let need = if k.is_zero() { 1 } else { 2 };
                    if kept.len() + need > self.max_modes {
                        break;
                    }
                    seen.insert(*k);
                    kept.push((*k, *c, *n));
                    if !k.is_zero() {
                        let p = k.neg();
                        seen.insert(p);
                        let (pc, pn) = lookup[&p];
                        kept.push((p, pc, pn));
                    }
                }
                for (k, _, n) in &entries {
                    if !seen.contains(k) {
                        add_debt(&mut debt, k.twice_modulus(), *n);
                    }
                }
                entries = kept;
            } else {
                for (k, _, n) in entries.drain(self.max_modes..) {
                    add_debt(&mut debt, k.twice_modulus(), n);
                }
            }
        }
        entries.sort_by_key(|e| e.0);
        self.lattice = if entries.iter().all(|(k, _, _)| k.is_integer()) {
            Lattice::Integer
        } else {
            Lattice::Half
        };
        self.coeffs = entries.into_iter().map(|(k, c, _)| (k, c)).collect();
        while debt.last() == Some(&0.0) {
            debt.pop();
        }
        self.debt = debt;
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_real(&self) -> bool {
        self.real
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn max_modes(&self) -> usize {
        self.max_modes
    }

    pub fn iter(&self) -> impl Iterator<Item = &(FreqIndex, Mat2)> {
        self.coeffs.iter()
    }

    pub fn coeff(&self, k: &FreqIndex) -> Option<&Mat2> {
        self.coeffs
            .binary_search_by(|(j, _)| j.cmp(k))
            .ok()
            .map(|i| &self.coeffs[i].1)
    }

    /// The mean `F̂(0)`.
    pub fn zero_mode(&self) -> Mat2 {
        self.coeff(&FreqIndex::zero()).copied().unwrap_or_default()
    }

    /// Largest modulus present, 0 for an empty map.
    pub fn max_modulus(&self) -> f64 {
        self.coeffs
            .iter()
            .map(|(k, _)| k.modulus())
            .fold(0.0, f64::max)
    }

    /// `|F|_r = Σ ‖F̂(k)‖ e^{2π|k|r}`.
    pub fn weighted_norm(&self, r: f64) -> f64 {
        self.coeffs
            .iter()
            .map(|(k, c)| weighted(c.op_norm(), k.twice_modulus(), r))
            .sum()
    }

    /// Weighted norm of all coefficients dropped so far (an upper bound on
    /// `|exact − stored|_r`).
    pub fn truncation_debt(&self, r: f64) -> f64 {
        self.debt
            .iter()
            .enumerate()
            .map(|(i, d)| weighted(*d, i as u32, r))
            .sum()
    }

    pub fn debt_profile(&self) -> &[f64] {
        &self.debt
    }

    /// Norm profile of the stored coefficients, by twice the modulus.
    fn profile(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for (k, c) in &self.coeffs {
            add_debt(&mut p, k.twice_modulus(), c.op_norm());
        }
        p
    }

    /// `F^N`: keeps exactly the modes with `|m| ≤ n`.
    pub fn truncate(&self, n: f64) -> TorusMap {
        let mut out = self.clone();
        out.coeffs
            .retain(|(k, _)| k.twice_modulus() as f64 <= 2.0 * n);
        out.lattice = if out.coeffs.iter().all(|(k, _)| k.is_integer()) {
            Lattice::Integer
        } else {
            Lattice::Half
        };
        out
    }

    pub fn add(&self, other: &TorusMap) -> TorusMap {
        self.combine(other, Complex64::new(1.0, 0.0))
    }

    pub fn sub(&self, other: &TorusMap) -> TorusMap {
        self.combine(other, Complex64::new(-1.0, 0.0))
    }

    fn combine(&self, other: &TorusMap, s: Complex64) -> TorusMap {
        assert_eq!(self.dim, other.dim, "dimension mismatch");
        let mut acc: HashMap<FreqIndex, Mat2> = self.coeffs.iter().copied().collect();
        for (k, c) in &other.coeffs {
            *acc.entry(*k).or_default() += c.scale(s);
        }
        let mut debt = self.debt.clone();
        for (i, d) in other.debt.iter().enumerate() {
            add_debt(&mut debt, i as u32, d * s.norm());
        }
        let mut out = TorusMap::zero(self.dim);
        out.real = self.real && other.real && s.im == 0.0;
        out.max_modes = self.max_modes.max(other.max_modes);
        out.finish(acc, debt);
        out
    }

    pub fn scale(&self, s: Complex64) -> TorusMap {
        let mut out = self.clone();
        out.real = self.real && s.im == 0.0;
        let acc = out.coeffs.drain(..).map(|(k, c)| (k, c.scale(s))).collect();
        let debt = self.debt.iter().map(|d| d * s.norm()).collect();
        out.finish(acc, debt);
        out
    }

    pub fn scale_re(&self, s: f64) -> TorusMap {
        self.scale(Complex64::new(s, 0.0))
    }

    pub fn neg(&self) -> TorusMap {
        self.scale_re(-1.0)
    }

    /// Adds a constant matrix to the mean.
    pub fn add_constant(&self, m: &Mat2) -> TorusMap {
        let real = m.max_imag() == 0.0;
        let c = TorusMap::constant(self.dim, *m, real);
        let mut out = self.add(&c);
        out.real = self.real && real;
        out
    }

    /// Convolution product `FG`.
    pub fn mul(&self, other: &TorusMap) -> TorusMap {
        assert_eq!(self.dim, other.dim, "dimension mismatch");
        let mut acc: HashMap<FreqIndex, Mat2> =
            HashMap::with_capacity(self.coeffs.len() * other.coeffs.len().min(64));
        for (k1, c1) in &self.coeffs {
            for (k2, c2) in &other.coeffs {
                *acc.entry(k1.add(k2)).or_default() += *c1 * *c2;
            }
        }
        let mut debt = Vec::new();
        if !self.debt.is_empty() || !other.debt.is_empty() {
            let pf = self.profile();
            let pg = other.profile();
            conv_into(&mut debt, &self.debt, &pg);
            conv_into(&mut debt, &pf, &other.debt);
            conv_into(&mut debt, &self.debt, &other.debt);
        }
        let mut out = TorusMap::zero(self.dim);
        out.real = self.real && other.real;
        out.max_modes = self.max_modes.max(other.max_modes);
        out.finish(acc, debt);
        out
    }

    /// `M·F` for a constant matrix `M`.
    pub fn left_mul_const(&self, m: &Mat2) -> TorusMap {
        TorusMap::constant(self.dim, *m, m.max_imag() == 0.0)
            .with_max_modes(self.max_modes)
            .mul(self)
    }

    /// `F·M` for a constant matrix `M`.
    pub fn right_mul_const(&self, m: &Mat2) -> TorusMap {
        self.mul(&TorusMap::constant(self.dim, *m, m.max_imag() == 0.0))
    }

    /// `[M, F]` for a constant matrix `M`, computed coefficientwise.
    pub fn commutator_const(&self, m: &Mat2) -> TorusMap {
        let mut out = self.clone();
        out.real = self.real && m.max_imag() == 0.0;
        let acc = out
            .coeffs
            .drain(..)
            .map(|(k, c)| (k, m.commutator(&c)))
            .collect();
        let s = 2.0 * m.op_norm();
        let debt = self.debt.iter().map(|d| d * s).collect();
        out.finish(acc, debt);
        out
    }

    /// `∂_ω F`: the coefficient at `k` is multiplied by `2iπ⟨k,ω⟩`.
    pub fn dir_derivative(&self, omega: &[f64]) -> TorusMap {
        assert_eq!(omega.len(), self.dim, "frequency dimension mismatch");
        let mut out = self.clone();
        let acc = out
            .coeffs
            .drain(..)
            .map(|(k, c)| (k, c.scale(Complex64::new(0.0, 2.0 * PI * k.dot(omega)))))
            .collect();
        let wmax = omega.iter().fold(0.0f64, |a, w| a.max(w.abs()));
        let debt = self
            .debt
            .iter()
            .enumerate()
            .map(|(i, d)| d * PI * i as f64 * wmax)
            .collect();
        out.finish(acc, debt);
        out
    }

    /// Taylor series of `e^X` at strip width `r`.
    ///
    /// Terms are added until `|X|_r^{K+1}/(K+1)! · e^{|X|_r} < tol`; the
    /// result keeps `e^X − I` separately so small maps lose no precision.
    pub fn exp_map(&self, r: f64, tol: f64) -> Result<ExpSeries> {
        let x = self.weighted_norm(r);
        if x > 1.0 {
            return Err(KamError::ExpOutsideRegime { norm: x });
        }
        let ex = x.exp();
        let mut rest = TorusMap::zero(self.dim).with_max_modes(self.max_modes);
        rest.real = self.real;
        let mut term = TorusMap::identity(self.dim).with_max_modes(self.max_modes);
        let mut k = 0usize;
        // bound on the remainder after summing terms 0..=k
        let mut bound = x * ex;
        while bound >= tol && bound > 0.0 {
            k += 1;
            term = term.mul(self).scale_re(1.0 / k as f64);
            rest = rest.add(&term);
            bound *= x / (k as f64 + 1.0);
            if k > 200 {
                break;
            }
        }
        Ok(ExpSeries {
            rest,
            tail_bound: bound,
            terms: k,
        })
    }

    /// Pointwise value `Σ F̂(k) e^{iπ⟨half_k,θ⟩}`.
    pub fn eval(&self, theta: &[f64]) -> Mat2 {
        let mut out = Mat2::zero();
        for (k, c) in &self.coeffs {
            let phase = 2.0 * PI * k.dot(theta);
            out += c.scale(Complex64::new(phase.cos(), phase.sin()));
        }
        out
    }

    /// Largest deviation from `c(-k) = conj(c(k))`.
    pub fn reality_defect(&self) -> f64 {
        self.coeffs
            .iter()
            .map(|(k, c)| {
                let p = self.coeff(&k.neg()).copied().unwrap_or_default();
                (p - c.conj()).max_abs()
            })
            .fold(0.0, f64::max)
    }

    /// Re-derives the reality flag from the coefficients.
    pub fn detect_reality(mut self) -> TorusMap {
        self.real = self.reality_defect() <= REALITY_TOL;
        self
    }

    /// Imaginary part dropped for maps known to be real up to round-off.
    pub fn assume_real(mut self) -> TorusMap {
        self.real = true;
        let acc = self.coeffs.drain(..).collect();
        let debt = std::mem::take(&mut self.debt);
        self.finish(acc, debt);
        self
    }

    pub fn to_json_value(&self) -> TorusMapJson {
        TorusMapJson {
            dim: self.dim,
            reality_flag: self.real,
            coeffs: self
                .coeffs
                .iter()
                .map(|(k, c)| CoeffJson {
                    half_k: k.half_k(self.dim).to_vec(),
                    re: c.re(),
                    im: c.im(),
                })
                .collect(),
            truncation_debt: self.debt.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_json_value()).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<TorusMap> {
        let v: TorusMapJson =
            serde_json::from_str(s).map_err(|e| KamError::Parse(e.to_string()))?;
        TorusMap::from_json_value(&v)
    }

    /// Rebuilds a map without re-normalizing, so the round trip is exact.
    pub fn from_json_value(v: &TorusMapJson) -> Result<TorusMap> {
        if !(1..=MAX_DIM).contains(&v.dim) {
            return Err(KamError::Parse(format!("dimension {} out of range", v.dim)));
        }
        let mut coeffs = Vec::with_capacity(v.coeffs.len());
        for c in &v.coeffs {
            if c.half_k.len() != v.dim {
                return Err(KamError::Parse(format!(
                    "half_k {:?} does not have {} entries",
                    c.half_k, v.dim
                )));
            }
            coeffs.push((
                FreqIndex::from_half(&c.half_k),
                Mat2::from_parts(c.re, c.im),
            ));
        }
        coeffs.sort_by_key(|e| e.0);
        if coeffs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(KamError::Parse("duplicate half_k".into()));
        }
        if coeffs.iter().any(|(_, c)| c.op_norm() == 0.0) {
            return Err(KamError::Parse("zero coefficient stored".into()));
        }
        let lattice = if coeffs.iter().all(|(k, _)| k.is_integer()) {
            Lattice::Integer
        } else {
            Lattice::Half
        };
        let map = TorusMap {
            dim: v.dim,
            coeffs,
            real: v.reality_flag,
            lattice,
            debt: v.truncation_debt.clone(),
            max_modes: DEFAULT_MAX_MODES,
        };
        if map.real && map.reality_defect() > REALITY_TOL {
            return Err(KamError::Parse(
                "reality_flag set but coefficients are not conjugate-symmetric".into(),
            ));
        }
        Ok(map)
    }
}

/// Output of [`TorusMap::exp_map`].
#[derive(Debug, Clone)]
pub struct ExpSeries {
    /// `e^X − I`, summed to `terms` terms.
    pub rest: TorusMap,
    /// Bound on the weighted norm of the omitted tail.
    pub tail_bound: f64,
    pub terms: usize,
}

impl ExpSeries {
    pub fn value(&self) -> TorusMap {
        let mut v = self.rest.add_constant(&Mat2::identity());
        v.real = self.rest.real;
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffJson {
    pub half_k: Vec<i32>,
    pub re: [[f64; 2]; 2],
    pub im: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorusMapJson {
    pub dim: usize,
    pub reality_flag: bool,
    pub coeffs: Vec<CoeffJson>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub truncation_debt: Vec<f64>,
}

fn add_debt(debt: &mut Vec<f64>, idx: u32, v: f64) {
    if v == 0.0 {
        return;
    }
    let i = idx as usize;
    if debt.len() <= i {
        debt.resize(i + 1, 0.0);
    }
    debt[i] += v;
}

fn conv_into(out: &mut Vec<f64>, a: &[f64], b: &[f64]) {
    for (i, x) in a.iter().enumerate() {
        if *x == 0.0 {
            continue;
        }
        for (j, y) in b.iter().enumerate() {
            add_debt(out, (i + j) as u32, x * y);
        }
    }
}

/// `x e^{π·twice·r}` without overflowing the exponential when `x` is tiny.
fn weighted(x: f64, twice: u32, r: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        (x.ln() + PI * twice as f64 * r).exp()
    }
}

//! Dense 2×2 complex matrices.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

pub const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
pub const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

/// Row-major 2×2 complex matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat2(pub [[Complex64; 2]; 2]);

impl Mat2 {
    pub const fn zero() -> Self {
        Mat2([[ZERO, ZERO], [ZERO, ZERO]])
    }

    pub const fn identity() -> Self {
        Mat2([[ONE, ZERO], [ZERO, ONE]])
    }

    pub fn new(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> Self {
        Mat2([[a, b], [c, d]])
    }

    pub fn from_real(m: [[f64; 2]; 2]) -> Self {
        Mat2([
            [Complex64::new(m[0][0], 0.0), Complex64::new(m[0][1], 0.0)],
            [Complex64::new(m[1][0], 0.0), Complex64::new(m[1][1], 0.0)],
        ])
    }

    pub fn from_parts(re: [[f64; 2]; 2], im: [[f64; 2]; 2]) -> Self {
        let mut out = Mat2::zero();
        for i in 0..2 {
            for j in 0..2 {
                out.0[i][j] = Complex64::new(re[i][j], im[i][j]);
            }
        }
        out
    }

    pub fn re(&self) -> [[f64; 2]; 2] {
        [
            [self.0[0][0].re, self.0[0][1].re],
            [self.0[1][0].re, self.0[1][1].re],
        ]
    }

    pub fn im(&self) -> [[f64; 2]; 2] {
        [
            [self.0[0][0].im, self.0[0][1].im],
            [self.0[1][0].im, self.0[1][1].im],
        ]
    }

    pub fn trace(&self) -> Complex64 {
        self.0[0][0] + self.0[1][1]
    }

    pub fn det(&self) -> Complex64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn conj(&self) -> Self {
        self.map(|z| z.conj())
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Mat2([
            [f(self.0[0][0]), f(self.0[0][1])],
            [f(self.0[1][0]), f(self.0[1][1])],
        ])
    }

    pub fn scale(&self, s: Complex64) -> Self {
        self.map(|z| z * s)
    }

    pub fn scale_re(&self, s: f64) -> Self {
        self.map(|z| z * s)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.0.iter().flatten().map(|z| z.norm_sqr()).sum()
    }

    /// Largest singular value, from the closed form of the 2×2 singular values.
    pub fn op_norm(&self) -> f64 {
        let s = self.max_abs();
        if s == 0.0 || !s.is_finite() {
            return s;
        }
        // work on M/s so squares stay in range
        let m = self.map(|z| z / s);
        let f2 = m.frobenius_sq();
        let d = m.det().norm();
        let disc = (f2 * f2 - 4.0 * d * d).max(0.0);
        s * (0.5 * (f2 + disc.sqrt())).sqrt()
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if det.norm() == 0.0 {
            return None;
        }
        let inv = ONE / det;
        Some(Mat2([
            [self.0[1][1] * inv, -self.0[0][1] * inv],
            [-self.0[1][0] * inv, self.0[0][0] * inv],
        ]))
    }

    pub fn commutator(&self, other: &Mat2) -> Mat2 {
        *self * *other - *other * *self
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().flatten().all(|z| z.re == 0.0 && z.im == 0.0)
    }

    pub fn max_imag(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|z| z.im.abs())
            .fold(0.0, f64::max)
    }
}

impl Default for Mat2 {
    fn default() -> Self {
        Mat2::zero()
    }
}

impl Add for Mat2 {
    type Output = Mat2;
    fn add(self, rhs: Mat2) -> Mat2 {
        let mut out = self;
        out += rhs;
        out
    }
}

impl AddAssign for Mat2 {
    fn add_assign(&mut self, rhs: Mat2) {
        for i in 0..2 {
            for j in 0..2 {
                self.0[i][j] += rhs.0[i][j];
            }
        }
    }
}

impl Sub for Mat2 {
    type Output = Mat2;
    fn sub(self, rhs: Mat2) -> Mat2 {
        self + (-rhs)
    }
}

impl Neg for Mat2 {
    type Output = Mat2;
    fn neg(self) -> Mat2 {
        self.map(|z| -z)
    }
}

impl Mul for Mat2 {
    type Output = Mat2;
    fn mul(self, rhs: Mat2) -> Mat2 {
        let a = &self.0;
        let b = &rhs.0;
        Mat2([
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_norm_diagonal() {
        let m = Mat2::from_real([[3.0, 0.0], [0.0, -0.5]]);
        assert!((m.op_norm() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn op_norm_subnormal() {
        let m = Mat2::from_real([[3e-310, 0.0], [1e-320, -1e-311]]);
        assert!((m.op_norm() / 3e-310 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn op_norm_nilpotent() {
        let m = Mat2::from_real([[0.0, 2.0], [0.0, 0.0]]);
        assert!((m.op_norm() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn op_norm_matches_power_iteration() {
        let m = Mat2::new(
            Complex64::new(0.3, -1.2),
            Complex64::new(2.0, 0.1),
            Complex64::new(-0.7, 0.4),
            Complex64::new(0.05, 0.9),
        );
        // power iteration on M^*M
        let mh = Mat2([
            [m.0[0][0].conj(), m.0[1][0].conj()],
            [m.0[0][1].conj(), m.0[1][1].conj()],
        ]);
        let g = mh * m;
        let mut v = [ONE, ONE];
        let mut lambda = 0.0;
        for _ in 0..200 {
            let w = [
                g.0[0][0] * v[0] + g.0[0][1] * v[1],
                g.0[1][0] * v[0] + g.0[1][1] * v[1],
            ];
            let n = (w[0].norm_sqr() + w[1].norm_sqr()).sqrt();
            lambda = n / (v[0].norm_sqr() + v[1].norm_sqr()).sqrt();
            v = [w[0] / n, w[1] / n];
        }
        assert!((m.op_norm() - lambda.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn tiny_entries_do_not_underflow() {
        let m = Mat2::from_real([[1e-200, 0.0], [0.0, 0.0]]);
        assert!((m.op_norm() - 1e-200).abs() < 1e-214);
    }
}

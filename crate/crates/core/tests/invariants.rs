use std::f64::consts::PI;

use nalgebra::Matrix2;
use num_complex::Complex64;
use proptest::prelude::*;

use kamred::arith::ApproxFn;
use kamred::driver::{largest_below, RunTrace, StepRecord};
use kamred::sl2::{dense_solve, eigen, ModeSolver, Sl2, DEFAULT_TOL_DEFECT};
use kamred::{FreqIndex, Mat2, TorusMap};

const OMEGA: [f64; 2] = [1.0, 1.618_033_988_749_895];

fn cplx() -> impl Strategy<Value = Complex64> {
    (-1.0..1.0f64, -1.0..1.0f64).prop_map(|(a, b)| Complex64::new(a, b))
}

fn mat() -> impl Strategy<Value = Mat2> {
    prop::array::uniform4(cplx()).prop_map(|e| Mat2([[e[0], e[1]], [e[2], e[3]]]))
}

fn half_index(max: i32) -> impl Strategy<Value = FreqIndex> {
    (-max..=max, -max..=max).prop_map(|(a, b)| FreqIndex::from_half(&[a, b]))
}

fn torus_map(max: i32, len: usize) -> impl Strategy<Value = TorusMap> {
    prop::collection::vec((half_index(max), mat()), 1..len)
        .prop_map(|v| TorusMap::from_coeffs(2, v, false))
}

fn sl2() -> impl Strategy<Value = Sl2> {
    (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64)
        .prop_map(|(p, q, r)| Sl2::new([[p, q], [r, -p]]).unwrap())
}

fn close(a: &TorusMap, b: &TorusMap, r: f64, tol: f64) -> bool {
    a.sub(b).weighted_norm(r) <= tol * (1.0 + a.weighted_norm(r) + b.weighted_norm(r))
}

proptest! {
    #[test]
    fn norm_is_monotone_in_r(f in torus_map(8, 12), r in 0.0..1.0f64, dr in 0.0..0.5f64) {
        prop_assert!(f.weighted_norm(r) <= f.weighted_norm(r + dr) * (1.0 + 1e-15));
    }

    #[test]
    fn truncation_splits_the_norm(f in torus_map(10, 16), n in 0.0..6.0f64, r in 0.0..0.8f64) {
        let low = f.truncate(n);
        let high = f.sub(&low);
        prop_assert!(low.iter().all(|(k, _)| k.modulus() <= n));
        prop_assert!(high.iter().all(|(k, _)| k.modulus() > n));
        let sum = low.weighted_norm(r) + high.weighted_norm(r);
        prop_assert!((sum - f.weighted_norm(r)).abs() <= 1e-12 * f.weighted_norm(r));
    }

    #[test]
    fn product_is_submultiplicative(f in torus_map(6, 8), g in torus_map(6, 8), r in 0.0..0.5f64) {
        let fg = f.mul(&g);
        prop_assert!(fg.weighted_norm(r) <= f.weighted_norm(r) * g.weighted_norm(r) * (1.0 + 1e-12));
    }

    #[test]
    fn derivative_obeys_leibniz(f in torus_map(6, 8), g in torus_map(6, 8)) {
        let lhs = f.mul(&g).dir_derivative(&OMEGA);
        let rhs = f.dir_derivative(&OMEGA).mul(&g).add(&f.mul(&g.dir_derivative(&OMEGA)));
        prop_assert!(close(&lhs, &rhs, 0.1, 1e-12));
    }

    #[test]
    fn sup_is_below_norm(f in torus_map(8, 10), t1 in -3.0..3.0f64, t2 in -3.0..3.0f64) {
        prop_assert!(f.eval(&[t1, t2]).op_norm() <= f.weighted_norm(0.0) * (1.0 + 1e-12));
    }

    #[test]
    fn eval_matches_direct_sum(f in torus_map(9, 10), t1 in -2.0..2.0f64, t2 in -2.0..2.0f64) {
        // e^{iπ⟨half_k,θ⟩} as a product of one-dimensional phases
        let mut want = Mat2::zero();
        for (k, c) in f.iter() {
            let h = k.half_k(2);
            let z = Complex64::from_polar(1.0, PI * h[0] as f64 * t1)
                * Complex64::from_polar(1.0, PI * h[1] as f64 * t2);
            want += c.scale(z);
        }
        prop_assert!((f.eval(&[t1, t2]) - want).op_norm() <= 1e-12 * (1.0 + want.op_norm()));
    }

    #[test]
    fn derivative_of_eval(f in torus_map(6, 6), t1 in -1.0..1.0f64, t2 in -1.0..1.0f64) {
        let h = 1e-5;
        let at = |s: f64| f.eval(&[t1 + s * OMEGA[0], t2 + s * OMEGA[1]]);
        let fd = (at(h) - at(-h)).scale_re(0.5 / h);
        let d = f.dir_derivative(&OMEGA).eval(&[t1, t2]);
        prop_assert!((fd - d).op_norm() <= 1e-5 * (1.0 + f.weighted_norm(0.0) * 500.0));
    }

    #[test]
    fn eigen_reconstructs(a in sl2()) {
        let e = eigen(&a, DEFAULT_TOL_DEFECT);
        prop_assume!(!e.defective);
        let d = Mat2::new(e.alpha, Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0), -e.alpha);
        let back = e.p * d * e.p_inv;
        prop_assert!((back - a.to_mat2()).op_norm() <= 1e-10 * e.cond() * (1.0 + a.norm()));
        prop_assert!(((e.p * e.p_inv) - Mat2::identity()).op_norm() <= 1e-10 * e.cond());
        prop_assert!((e.alpha * e.alpha + a.det()).norm() <= 1e-12 * (1.0 + a.norm() * a.norm()));
    }

    #[test]
    fn alpha_matches_nalgebra(a in sl2()) {
        let m = a.entries();
        let na = Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1]);
        let ev = na.complex_eigenvalues();
        let alpha = a.alpha();
        let hit = ev.iter().any(|z| (z - alpha).norm() <= 1e-7 * (1.0 + alpha.norm()));
        prop_assert!(hit);
        prop_assert!(alpha.re > 0.0 || (alpha.re == 0.0 && alpha.im >= 0.0));
    }

    #[test]
    fn spectral_solve_matches_dense(a in sl2(), k in half_index(12), rhs in mat()) {
        prop_assume!(!k.is_zero());
        let s = ModeSolver::new(&a.to_mat2());
        let x = s.solve(k.dot(&OMEGA), &rhs).unwrap();
        let lam = Complex64::new(0.0, 2.0 * PI * k.dot(&OMEGA));
        let y = dense_solve(lam, &a.to_mat2(), &rhs).unwrap();
        let scale = s.inverse_norm(k.dot(&OMEGA)) * rhs.op_norm();
        prop_assert!((x - y).op_norm() <= 1e-10 * (1.0 + scale));
    }

    #[test]
    fn json_round_trip(f in torus_map(8, 10)) {
        let back = TorusMap::from_json(&f.to_json()).unwrap();
        prop_assert_eq!(back, f);
    }

    #[test]
    fn power_inverse(mu in 0.5..4.0f64, t in 1.0..1e6f64) {
        let f = ApproxFn::Power { mu };
        let back = f.ln_inverse(f.ln_eval(t));
        prop_assert!((back - t).abs() <= 1e-9 * t);
    }

    #[test]
    fn exp_pow_inverse(alpha in 0.1..0.9f64, t in 1.0..1e6f64) {
        let f = ApproxFn::ExpPow { alpha };
        let back = f.ln_inverse(f.ln_eval(t));
        prop_assert!((back - t).abs() <= 1e-8 * t);
    }

    #[test]
    fn largest_below_brackets(mu in 0.5..6.0f64, bound in 0.0..30.0f64) {
        let f = ApproxFn::Power { mu };
        let n = largest_below(&f, bound);
        prop_assume!((n as f64) < 1e15);
        prop_assert!(n == 0 || f.ln_eval(n as f64) <= bound);
        prop_assert!(f.ln_eval((n + 1) as f64) > bound);
    }

    #[test]
    fn tail_integral_of_power(mu in 0.2..5.0f64, lower in 1.0..200.0f64) {
        // ∫_b^∞ μ ln t / t² dt = μ (ln b + 1) / b
        let want = mu * (lower.ln() + 1.0) / lower;
        let got = ApproxFn::Power { mu }.tail_integral(lower, 2.0).unwrap();
        prop_assert!((got - want).abs() <= 1e-8 * want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exp_of_negative_is_inverse(f in torus_map(3, 4), s in 0.01..0.5f64) {
        let r = 0.2;
        let x = f.scale_re(s / f.weighted_norm(r).max(1e-300));
        let e = x.exp_map(r, 1e-16).unwrap();
        let einv = x.neg().exp_map(r, 1e-16).unwrap();
        let prod = e.value().mul(&einv.value());
        let tol = 1e-13 + 4.0 * (e.tail_bound + einv.tail_bound);
        prop_assert!(prod.sub(&TorusMap::identity(2)).weighted_norm(r) <= tol);
    }
}

fn record(n: usize, m: Option<Vec<i32>>) -> StepRecord {
    StepRecord {
        n,
        r_n: 0.5 / (n + 1) as f64,
        n_n: 3 * n as u64 + 1,
        eps_bound: 1e-10 / 16f64.powi(n as i32),
        f_norm: 3.3e-11 / 256f64.powi(n as i32),
        resonant: m.is_some(),
        m,
        alpha: Complex64::new(0.0, 1.234_567_890_123_456_7),
        residual: 1.0e-27 * n as f64,
        contraction: if n == 2 { f64::NAN } else { 0.1 / 3.0 },
        step_residual: f64::NAN,
        step_debt: f64::NAN,
        contraction_bound: f64::NAN,
        preconditions_hold: true,
    }
}

#[test]
fn trace_csv_round_trip() {
    let trace = RunTrace {
        records: vec![
            record(0, Some(vec![1, -2])),
            record(1, None),
            record(2, None),
        ],
        resonance_count_after_n0: 0,
    };
    let text = trace.to_csv();
    assert!(text.starts_with(
        "n,r_n,N_n,eps_bound,F_norm,resonant,m,alpha_re,alpha_im,residual,contraction\n"
    ));
    let back = RunTrace::from_csv(&text, 0).unwrap();
    assert_eq!(back.records.len(), 3);
    for (a, b) in trace.records.iter().zip(&back.records) {
        assert_eq!(a.n, b.n);
        assert_eq!(a.r_n, b.r_n);
        assert_eq!(a.n_n, b.n_n);
        assert_eq!(a.eps_bound, b.eps_bound);
        assert_eq!(a.f_norm, b.f_norm);
        assert_eq!(a.m, b.m);
        assert_eq!(a.alpha, b.alpha);
        assert_eq!(a.residual, b.residual);
        assert_eq!(a.contraction.to_bits(), b.contraction.to_bits());
    }
    assert_eq!(back.to_csv(), text);
}

#[test]
fn trace_csv_rejects_garbage() {
    let text = "n,r_n,N_n,eps_bound,F_norm,resonant,m,alpha_re,alpha_im,residual,contraction\n0,x,1,1,1,false,,0,0,0,0\n";
    assert!(RunTrace::from_csv(text, 0).is_err());
    let text = "n,r_n,N_n,eps_bound,F_norm,resonant,m,alpha_re,alpha_im,residual,contraction\n0,1,1,1,1,true,1;q,0,0,0,0\n";
    assert!(RunTrace::from_csv(text, 0).is_err());
}

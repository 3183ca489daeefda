//! Independent vMF normalizer oracles.

use std::f64::consts::PI;

use ndarray::Array2;
use scene_ssl::semantic::{AssignMode, PrototypeBank};

/// Bank with the given prototypes kept verbatim (no renormalization).
pub fn raw_bank(w: Array2<f64>, mode: AssignMode) -> PrototypeBank {
    let mut b = PrototypeBank::new(w.clone(), mode, 0.9).unwrap();
    b.prototypes = w;
    b
}

/// `log(k / (4 pi sinh k))` without overflow.
pub fn log_c3(k: f64) -> f64 {
    let log_sinh = if k < 1.0 { k.sinh().ln() } else { k + (-(-2.0 * k).exp()).ln_1p() - 2f64.ln() };
    k.ln() - (4.0 * PI).ln() - log_sinh
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// `ln n!` by direct summation.
pub fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// `log I_nu(x)` for integer `nu` from the Poisson integral
/// `I_nu(x) = (x/2)^nu / (sqrt(pi) Gamma(nu + 1/2)) * int_{-1}^{1} (1-t^2)^(nu-1/2) e^{xt} dt`,
/// integrated by tanh-sinh quadrature in log-scaled form. The integrand is
/// positive, so there is no cancellation at any order or argument.
pub fn log_bessel_quadrature(nu: usize, x: f64) -> f64 {
    let a = nu as f64 - 0.5;
    // log integrand at t = tanh(s), with 1 - t and 1 + t formed without cancellation
    let log_f = |s: f64| {
        let e = (-2.0 * s.abs()).exp();
        let small = 2.0 * e / (1.0 + e);
        let big = 2.0 / (1.0 + e);
        let (one_minus, one_plus) = if s >= 0.0 { (small, big) } else { (big, small) };
        a * (one_minus.ln() + one_plus.ln()) + x * s.tanh()
    };
    let h = 1.0 / 512.0;
    let n = (4.5 / h) as i64;
    let mut terms = Vec::with_capacity(2 * n as usize + 1);
    for j in -n..=n {
        let u = j as f64 * h;
        let s = 0.5 * PI * u.sinh();
        let log_w = (0.5 * PI * u.cosh()).ln() - 2.0 * s.cosh().ln();
        terms.push(log_f(s) + log_w);
    }
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_int = m + (h * terms.iter().map(|t| (t - m).exp()).sum::<f64>()).ln();
    // Gamma(n + 1/2) = (2n)! sqrt(pi) / (4^n n!)
    let ln_gamma_half = ln_factorial(2 * nu) + 0.5 * PI.ln() - nu as f64 * 4f64.ln() - ln_factorial(nu);
    nu as f64 * (x / 2.0).ln() - 0.5 * PI.ln() - ln_gamma_half + log_int
}

pub fn log_c_oracle(kappa: f64, dim: usize) -> f64 {
    let half = dim as f64 / 2.0;
    (half - 1.0) * kappa.ln() - half * (2.0 * PI).ln() - log_bessel_quadrature(dim / 2 - 1, kappa)
}

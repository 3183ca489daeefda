//! Log normalizer of the von Mises-Fisher distribution on the unit
//! (D-1)-sphere and the modified Bessel function of the first kind it needs.
//!
//! ```text
//! log C_D(k) = (D/2 - 1) log k - (D/2) log(2 pi) - log I_{D/2-1}(k)
//! ```
//!
//! `log I_nu(x)` is evaluated in log space in one of three regimes:
//!
//! * ascending power series, for small arguments and for moderate
//!   arguments at small order (all terms positive, so no cancellation);
//! * the Debye uniform asymptotic expansion in the order, for `nu >= 20`;
//! * the large-argument (Hankel) expansion, for small order and `x` well
//!   beyond `nu^2`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Orders at or above this use the uniform expansion outside the series regime.
pub const DEBYE_MIN_ORDER: f64 = 20.0;
const DEBYE_TERMS: usize = 14;
const SERIES_RESCALE: f64 = 1e280;

/// Argument below which the power series is always used for order `nu`.
pub fn series_threshold(nu: f64) -> f64 {
    0.5 * (nu + 1.0).sqrt()
}

/// Argument above which small orders switch from the series to the
/// large-argument expansion.
pub fn hankel_threshold(nu: f64) -> f64 {
    (2.0 * nu * nu).max(40.0)
}

/// Evaluation regime chosen for `(nu, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BesselRegime {
    Series,
    Debye,
    Hankel,
}

pub fn bessel_regime(nu: f64, x: f64) -> BesselRegime {
    if x <= series_threshold(nu) {
        BesselRegime::Series
    } else if nu >= DEBYE_MIN_ORDER {
        BesselRegime::Debye
    } else if x <= hankel_threshold(nu) {
        BesselRegime::Series
    } else {
        BesselRegime::Hankel
    }
}

/// `log I_nu(x)` for `nu >= 0`, `x >= 0`.
pub fn log_bessel_i(nu: f64, x: f64) -> f64 {
    assert!(nu >= 0.0 && x >= 0.0, "log_bessel_i: nu={nu}, x={x}");
    if x == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    log_bessel_i_in(bessel_regime(nu, x), nu, x)
}

/// `log I_nu(x)` evaluated in a forced regime; exposed for continuity checks.
pub fn log_bessel_i_in(regime: BesselRegime, nu: f64, x: f64) -> f64 {
    match regime {
        BesselRegime::Series => nu * (0.5 * x).ln() - ln_gamma(nu + 1.0) + log_series_sum(nu, x),
        BesselRegime::Debye => log_bessel_debye(nu, x),
        BesselRegime::Hankel => log_bessel_hankel(nu, x),
    }
}

/// `log sum_k (x^2/4)^k / (k! (nu+1)_k)`, the series with its leading
/// factor stripped.
fn log_series_sum(nu: f64, x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    let mut log_offset = 0.0_f64;
    let mut k = 1.0_f64;
    loop {
        term *= q / (k * (nu + k));
        sum += term;
        if sum > SERIES_RESCALE {
            sum /= SERIES_RESCALE;
            term /= SERIES_RESCALE;
            log_offset += SERIES_RESCALE.ln();
        }
        // past the peak the ratio is < 1 and the tail is bounded geometrically
        let ratio = q / ((k + 1.0) * (nu + k + 1.0));
        if ratio < 1.0 && term < sum * 1e-17 * (1.0 - ratio) {
            break;
        }
        k += 1.0;
    }
    log_offset + sum.ln()
}

fn log_bessel_hankel(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    let mut k = 1.0_f64;
    loop {
        let odd = 2.0 * k - 1.0;
        let next = -term * (mu - odd * odd) / (8.0 * k * x);
        if next == 0.0 || next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
        k += 1.0;
    }
    x - 0.5 * (2.0 * PI * x).ln() + sum.ln()
}

fn log_bessel_debye(nu: f64, x: f64) -> f64 {
    let z = x / nu;
    let sq = (1.0 + z * z).sqrt();
    let t = 1.0 / sq;
    let eta = sq + (z / (1.0 + sq)).ln();
    let polys = debye_polynomials();
    let mut sum = 1.0_f64;
    let mut nu_pow = 1.0_f64;
    for poly in polys.iter().skip(1) {
        nu_pow *= nu;
        let term = eval_poly(poly, t) / nu_pow;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    nu * eta - 0.5 * (2.0 * PI * nu).ln() - 0.5 * sq.ln() + sum.ln()
}

/// Coefficients (ascending powers of t) of the Debye polynomials u_k(t),
/// from `u_{k+1} = t^2 (1 - t^2) u_k' / 2 + (1/8) int_0^t (1 - 5 s^2) u_k(s) ds`.
fn debye_polynomials() -> &'static [Vec<f64>] {
    static POLYS: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    POLYS.get_or_init(|| {
        let mut polys = vec![vec![1.0]];
        for k in 0..DEBYE_TERMS {
            let u = &polys[k];
            let mut next = vec![0.0; u.len() + 3];
            // t^2 (1 - t^2) u'(t) / 2
            for (i, &c) in u.iter().enumerate().skip(1) {
                let d = c * i as f64 * 0.5;
                next[i + 1] += d;
                next[i + 3] -= d;
            }
            // (1/8) integral of (1 - 5 s^2) u(s)
            for (i, &c) in u.iter().enumerate() {
                next[i + 1] += 0.125 * c / (i + 1) as f64;
                next[i + 3] -= 0.625 * c / (i + 3) as f64;
            }
            polys.push(next);
        }
        polys
    })
}

fn eval_poly(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

/// `ln Gamma(x)` for `x > 0`. Exact product forms are used when `2x` is an
/// integer (the only case the normalizer needs); Lanczos otherwise.
pub fn ln_gamma(x: f64) -> f64 {
    assert!(x > 0.0);
    let twice = 2.0 * x;
    if twice.fract() == 0.0 && twice <= 1e6 {
        let n = twice as u64;
        if n % 2 == 0 {
            // (x - 1)!
            (2..n / 2).map(|j| (j as f64).ln()).sum()
        } else {
            // Gamma(m + 1/2) = sqrt(pi) prod_{j=1..m} (j - 1/2)
            let m = n / 2;
            0.5 * PI.ln() + (1..=m).map(|j| (j as f64 - 0.5).ln()).sum::<f64>()
        }
    } else {
        lanczos_ln_gamma(x)
    }
}

fn lanczos_ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - lanczos_ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Log of the reciprocal surface area of the unit (D-1)-sphere, i.e. the
/// normalizer at zero concentration.
pub fn log_inverse_sphere_area(dim: usize) -> f64 {
    let half = dim as f64 / 2.0;
    ln_gamma(half) - 2f64.ln() - half * PI.ln()
}

/// `log C_D(kappa)`.
pub fn log_vmf_normalizer(kappa: f64, dim: usize) -> Result<f64> {
    if dim < 2 {
        return Err(Error::invalid("semantic_assignment", format!("vMF dimension {dim} < 2")));
    }
    if !kappa.is_finite() || kappa < 0.0 {
        return Err(Error::invalid(
            "semantic_assignment",
            format!("vMF concentration must be finite and >= 0, got {kappa}"),
        ));
    }
    Ok(log_vmf_normalizer_unchecked(kappa, dim))
}

pub(crate) fn log_vmf_normalizer_unchecked(kappa: f64, dim: usize) -> f64 {
    let half = dim as f64 / 2.0;
    let nu = half - 1.0;
    if kappa == 0.0 {
        return log_inverse_sphere_area(dim);
    }
    match bessel_regime(nu, kappa) {
        // nu log k - log I_nu(k) with the (k/2)^nu factor cancelled symbolically
        BesselRegime::Series => {
            nu * 2f64.ln() + ln_gamma(half) - half * (2.0 * PI).ln() - log_series_sum(nu, kappa)
        }
        regime => nu * kappa.ln() - half * (2.0 * PI).ln() - log_bessel_i_in(regime, nu, kappa),
    }
}

/// `d/dkappa log C_D(kappa) = -I_{D/2}(kappa) / I_{D/2-1}(kappa)`.
pub fn log_vmf_normalizer_slope(kappa: f64, dim: usize) -> f64 {
    if kappa <= 0.0 {
        return 0.0;
    }
    let nu = dim as f64 / 2.0 - 1.0;
    -(log_bessel_i(nu + 1.0, kappa) - log_bessel_i(nu, kappa)).exp()
}

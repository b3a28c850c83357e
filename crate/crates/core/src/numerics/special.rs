use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Crossover (as a multiple of `max(nu, 1)`) above which the large-argument
/// expansion replaces the power series.
const ASYMPTOTIC_SWITCH: f64 = 50.0;

pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// `ln I_nu(x)` for `nu >= 0`, `x >= 0`.
///
/// Uses the power series, accumulated in the log domain, for moderate
/// arguments and the Hankel large-argument expansion once
/// `x > 50 * max(nu, 1)`. Finite for arguments far beyond the overflow point
/// of `I_nu` itself.
pub fn ln_bessel_i(nu: f64, x: f64) -> f64 {
    assert!(nu >= 0.0 && x >= 0.0, "ln_bessel_i requires nu >= 0 and x >= 0");
    if x == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if x > ASYMPTOTIC_SWITCH * nu.max(1.0) {
        ln_bessel_i_hankel(nu, x)
    } else {
        nu * (0.5 * x).ln() + ln_series(nu, x)
    }
}

/// `ln sum_m (x^2/4)^m / (m! Gamma(m + nu + 1))`, i.e. `ln I_nu(x) - nu ln(x/2)`.
fn ln_series(nu: f64, x: f64) -> f64 {
    let q = 0.25 * x * x;
    let ln_q = q.ln();
    let mut lt = -ln_gamma(nu + 1.0);
    let mut lmax = lt;
    let mut scaled_sum = 1.0;
    let mut m = 0.0f64;
    loop {
        m += 1.0;
        let ratio = q / (m * (m + nu));
        lt += ln_q - m.ln() - (m + nu).ln();
        if lt > lmax {
            scaled_sum = scaled_sum * (lmax - lt).exp() + 1.0;
            lmax = lt;
        } else {
            scaled_sum += (lt - lmax).exp();
        }
        if ratio < 1.0 && lt < lmax - 40.0 {
            break;
        }
        if q == 0.0 || !lt.is_finite() {
            break;
        }
    }
    lmax + scaled_sum.ln()
}

fn ln_bessel_i_hankel(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let mut k = 1.0f64;
    loop {
        let odd = 2.0 * k - 1.0;
        let next = -term * (mu - odd * odd) / (k * 8.0 * x);
        if next.abs() >= term.abs() && k > 1.0 {
            // Asymptotic series started to diverge.
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() || term == 0.0 {
            break;
        }
        k += 1.0;
        if k > 500.0 {
            break;
        }
    }
    x - 0.5 * (2.0 * PI * x).ln() + sum.ln()
}

/// `ln c_E(kappa)` with `c_E(kappa) = kappa^{E/2-1} / ((2 pi)^{E/2} I_{E/2-1}(kappa))`,
/// the log-normalizer of the von-Mises-Fisher density on the unit sphere
/// in `R^E`. At `kappa = 0` this is the uniform log-density on the sphere.
pub fn log_vmf_normalizer(dim: usize, kappa: f64) -> Result<f64> {
    if dim < 2 {
        return Err(Error::invalid_input("vMF dimension must be at least 2"));
    }
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::invalid_input(format!(
            "concentration must be finite and non-negative, got {kappa}"
        )));
    }
    let half = dim as f64 / 2.0;
    let nu = half - 1.0;
    if kappa == 0.0 {
        return Ok(ln_gamma(half) - 2f64.ln() - half * PI.ln());
    }
    if kappa > ASYMPTOTIC_SWITCH * nu.max(1.0) {
        Ok(nu * kappa.ln() - half * (2.0 * PI).ln() - ln_bessel_i_hankel(nu, kappa))
    } else {
        // kappa^nu / I_nu(kappa) = 2^nu / series, which stays exact as kappa -> 0.
        Ok(nu * 2f64.ln() - half * (2.0 * PI).ln() - ln_series(nu, kappa))
    }
}

/// Mean resultant length `A_E(kappa) = I_{E/2}(kappa) / I_{E/2-1}(kappa)`,
/// the expected cosine between a vMF draw and its mean direction.
pub fn mean_resultant_length(dim: usize, kappa: f64) -> f64 {
    if kappa == 0.0 {
        return 0.0;
    }
    let nu = dim as f64 / 2.0 - 1.0;
    (ln_bessel_i(nu + 1.0, kappa) - ln_bessel_i(nu, kappa)).exp()
}

/// `ln sum exp(v_i)`, shifted by the maximum. An all `-inf` input returns
/// `-inf`.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid_input("logsumexp of an empty slice"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid_input("logsumexp input contains NaN"));
    }
    Ok(logsumexp_unchecked(values))
}

#[inline]
pub(crate) fn logsumexp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

//! Modified Bessel function of the second kind and the gamma function.
//!
//! `bessel_k` follows Temme's method: the order is split as
//! `nu = n + mu` with `|mu| <= 1/2`, `K_mu` and `K_{mu+1}` are obtained from
//! Temme's series for `x < 2` or Steed's continued fraction for `x >= 2`,
//! and the forward recurrence carries them up to order `nu`.

use alloc::format;
use core::f64::consts::PI;

use crate::error::{Error, Result};
#[allow(unused_imports)]
use num_traits::Float;

const EPS: f64 = 1.0e-16;
const MAX_ITER: usize = 10_000;
const SERIES_CUTOFF: f64 = 2.0;

/// Taylor coefficients of `1/Gamma(z) = sum_k c_k z^k`, k = 1..=26.
const RECIP_GAMMA: [f64; 26] = [
    1.0,
    0.577_215_664_901_532_9,
    -0.655_878_071_520_253_8,
    -0.042_002_635_034_095_2,
    0.166_538_611_382_291_5,
    -0.042_197_734_555_544_3,
    -0.009_621_971_527_877_0,
    0.007_218_943_246_663_0,
    -0.001_165_167_591_859_1,
    -0.000_215_241_674_114_9,
    0.000_128_050_282_388_2,
    -0.000_020_134_854_780_7,
    -0.000_001_250_493_482_1,
    0.000_001_133_027_232_0,
    -0.000_000_205_633_841_7,
    0.000_000_006_116_095_0,
    0.000_000_005_002_007_5,
    -0.000_000_001_181_274_6,
    0.000_000_000_104_342_7,
    0.000_000_000_007_782_3,
    -0.000_000_000_003_696_8,
    0.000_000_000_000_510_0,
    -0.000_000_000_000_020_6,
    -0.000_000_000_000_005_4,
    0.000_000_000_000_001_4,
    0.000_000_000_000_000_1,
];

/// Temme's auxiliary functions for `|mu| <= 1/2`:
/// `(gamma1, gamma2, 1/Gamma(1+mu), 1/Gamma(1-mu))`.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    let mu2 = mu * mu;
    // gamma1 = -(c_2 + c_4 mu^2 + ...), gamma2 = c_1 + c_3 mu^2 + ...
    let mut g1 = 0.0;
    let mut g2 = 0.0;
    for k in (0..RECIP_GAMMA.len()).rev() {
        if k % 2 == 1 {
            g1 = g1 * mu2 + RECIP_GAMMA[k];
        } else {
            g2 = g2 * mu2 + RECIP_GAMMA[k];
        }
    }
    let gamma1 = -g1;
    let gamma2 = g2;
    (gamma1, gamma2, gamma2 - mu * gamma1, gamma2 + mu * gamma1)
}

/// `K_nu(x)` for `nu >= 0`, `x > 0`.
pub fn bessel_k(nu: f64, x: f64) -> Result<f64> {
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bessel order must be >= 0, got {nu}"
        )));
    }
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bessel argument must be > 0, got {x}"
        )));
    }
    let nl = (nu + 0.5).floor() as usize;
    let mu = nu - nl as f64;
    let mu2 = mu * mu;
    let xi = 1.0 / x;
    let xi2 = 2.0 * xi;

    let (mut k_mu, mut k_mu1) = if x < SERIES_CUTOFF {
        let x2 = 0.5 * x;
        let pimu = PI * mu;
        let fact = if pimu.abs() < EPS {
            1.0
        } else {
            pimu / pimu.sin()
        };
        let d = -x2.ln();
        let e = mu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let (gamma1, gamma2, gampl, gammi) = temme_gammas(mu);
        let mut ff = fact * (gamma1 * e.cosh() + gamma2 * fact2 * d);
        let mut sum = ff;
        let ee = e.exp();
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        let mut converged = false;
        for i in 1..=MAX_ITER {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - mu2);
            c *= dd / fi;
            p /= fi - mu;
            q /= fi + mu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * EPS {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numeric(format!(
                "bessel series did not converge (nu={nu}, x={x})"
            )));
        }
        (sum, sum1 * xi2)
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut delh = d;
        let mut h = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - mu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        let mut converged = false;
        for i in 2..=MAX_ITER {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh *= b * d - 1.0;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numeric(format!(
                "bessel continued fraction did not converge (nu={nu}, x={x})"
            )));
        }
        let h = a1 * h;
        let k = (PI / (2.0 * x)).sqrt() * (-x).exp() / s;
        (k, k * (mu + x + 0.5 - h) * xi)
    };

    for i in 1..=nl {
        let next = (mu + i as f64) * xi2 * k_mu1 + k_mu;
        k_mu = k_mu1;
        k_mu1 = next;
    }
    if !k_mu.is_finite() {
        return Err(Error::Numeric(format!(
            "bessel evaluation overflowed (nu={nu}, x={x})"
        )));
    }
    Ok(k_mu)
}

pub fn gamma(x: f64) -> f64 {
    libm::tgamma(x)
}

//! Rician density kernels and the latent Poisson-count expectation.
//!
//! Everything that touches `I0` or `I1` is evaluated in log space or as a
//! ratio of normalised sums, so no branch ever forms `I0(x)` for large `x`.
//! Below [`SERIES_LIMIT`] both functions use their power series; above it the
//! Hankel large-argument expansion with the `e^x / sqrt(2 pi x)` factor
//! pulled out.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Argument at which the Bessel kernels switch from the power series to the
/// large-argument expansion.
pub const SERIES_LIMIT: f64 = 20.0;

const SERIES_EPS: f64 = 1e-17;
const MAX_TERMS: usize = 500;

/// Parameters of a Rician magnitude: noise-free signal and complex-noise
/// variance per channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RicianParams {
    signal: f64,
    sigma_sq: f64,
}

impl RicianParams {
    pub fn new(signal: f64, sigma_sq: f64) -> Result<Self> {
        if !(signal.is_finite() && signal >= 0.0) {
            return Err(Error::domain(format!("signal must be finite and >= 0, got {signal}")));
        }
        if !(sigma_sq.is_finite() && sigma_sq > 0.0) {
            return Err(Error::domain(format!("sigma_sq must be finite and > 0, got {sigma_sq}")));
        }
        Ok(Self { signal, sigma_sq })
    }

    pub fn signal(&self) -> f64 {
        self.signal
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    /// `t = S^2 / (2 sigma^2)`, the mean of the latent Poisson count.
    pub fn poisson_mean(&self) -> f64 {
        self.signal * self.signal / (2.0 * self.sigma_sq)
    }

    /// `tau = y S / (2 sigma^2)` for an observed magnitude `y`.
    pub fn tau(&self, y: f64) -> f64 {
        y * self.signal / (2.0 * self.sigma_sq)
    }
}

fn check_arg(x: f64, what: &str) -> Result<()> {
    if x.is_finite() && x >= 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("{what} requires a finite, nonnegative argument, got {x}")))
    }
}

/// Power series of `I0(x)` and `I1(x) * 2 / x`, returned together since they
/// share the `(x^2/4)^n / n!` factor.
fn series_i0_i1(x: f64) -> (f64, f64) {
    let q = 0.25 * x * x;
    let mut t0 = 1.0; // q^n / (n!)^2
    let mut t1 = 1.0; // q^n / (n! (n+1)!)
    let mut s0 = 1.0;
    let mut s1 = 1.0;
    for n in 1..MAX_TERMS {
        let nf = n as f64;
        t0 *= q / (nf * nf);
        t1 *= q / (nf * (nf + 1.0));
        s0 += t0;
        s1 += t1;
        if t0 < SERIES_EPS * s0 && t1 < SERIES_EPS * s1 {
            break;
        }
    }
    (s0, s1)
}

/// Normalised Hankel sum `I_nu(x) sqrt(2 pi x) e^{-x}` for `nu` in {0, 1}.
fn hankel_sum(x: f64, mu: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut prev = f64::INFINITY;
    for k in 1..MAX_TERMS {
        let odd = (2 * k - 1) as f64;
        term *= -(mu - odd * odd) / (8.0 * k as f64 * x);
        let mag = term.abs();
        // Asymptotic series: stop at the smallest term.
        if mag >= prev {
            break;
        }
        sum += term;
        if mag < SERIES_EPS * sum.abs() {
            break;
        }
        prev = mag;
    }
    sum
}

#[inline]
pub(crate) fn log_i0_unchecked(x: f64) -> f64 {
    if x < SERIES_LIMIT {
        series_i0_i1(x).0.ln()
    } else {
        x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + hankel_sum(x, 0.0).ln()
    }
}

#[inline]
pub(crate) fn ratio_unchecked(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else if x < SERIES_LIMIT {
        let (s0, s1) = series_i0_i1(x);
        0.5 * x * s1 / s0
    } else {
        hankel_sum(x, 4.0) / hankel_sum(x, 0.0)
    }
}

/// `(log I0(x), I1(x) / I0(x))` from a single series or Hankel evaluation.
#[inline]
pub(crate) fn log_i0_and_ratio_unchecked(x: f64) -> (f64, f64) {
    if x < SERIES_LIMIT {
        let (s0, s1) = series_i0_i1(x);
        (s0.ln(), 0.5 * x * s1 / s0)
    } else {
        let h0 = hankel_sum(x, 0.0);
        (x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + h0.ln(), hankel_sum(x, 4.0) / h0)
    }
}

/// `log I0(x)` for `x >= 0`, finite everywhere on the representable range.
pub fn log_bessel_i0(x: f64) -> Result<f64> {
    check_arg(x, "log_bessel_i0")?;
    Ok(log_i0_unchecked(x))
}

/// `I1(x) / I0(x)`; lies in `[0, 1)` and is nondecreasing in `x`.
pub fn bessel_ratio_i1_i0(x: f64) -> Result<f64> {
    check_arg(x, "bessel_ratio_i1_i0")?;
    Ok(ratio_unchecked(x))
}

#[inline]
pub(crate) fn augmented_expectation_unchecked(tau: f64) -> f64 {
    tau * ratio_unchecked(2.0 * tau)
}

/// Conditional mean of the latent count given the magnitude,
/// `E(N | Y) = tau I1(2 tau) / I0(2 tau)`.
pub fn augmented_expectation(tau: f64) -> Result<f64> {
    check_arg(tau, "augmented_expectation")?;
    Ok(augmented_expectation_unchecked(tau))
}

#[inline]
pub(crate) fn log_density_unchecked(y: f64, signal: f64, sigma_sq: f64) -> f64 {
    y.ln() - sigma_sq.ln() - (y * y + signal * signal) / (2.0 * sigma_sq)
        + log_i0_unchecked(y * signal / sigma_sq)
}

/// Log of the Rician density at magnitude `y > 0`.
pub fn rician_log_density(y: f64, params: &RicianParams) -> Result<f64> {
    if !(y.is_finite() && y > 0.0) {
        return Err(Error::domain(format!("rician_log_density requires y > 0, got {y}")));
    }
    Ok(log_density_unchecked(y, params.signal, params.sigma_sq))
}

/// One Rician draw `|S + sigma (g1 + i g2)|`.
pub fn draw_rician<R: Rng + ?Sized>(rng: &mut R, signal: f64, sigma: f64) -> f64 {
    let g1: f64 = StandardNormal.sample(rng);
    let g2: f64 = StandardNormal.sample(rng);
    (signal + sigma * g1).hypot(sigma * g2)
}

/// `count` independent Rician magnitudes from a ChaCha8 stream seeded with
/// `seed`.
pub fn sample_rician(params: &RicianParams, count: usize, seed: u64) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::domain("sample_rician requires count >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = params.sigma_sq.sqrt();
    Ok((0..count)
        .map(|_| draw_rician(&mut rng, params.signal, sigma))
        .collect())
}

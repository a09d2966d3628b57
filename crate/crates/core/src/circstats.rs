//! Circular-statistics primitives: angle wrapping, the von Mises
//! distribution (log-density and exact rejection sampling), weighted
//! circular means and modified Bessel function evaluation.
//!
//! Everything here is pure and reentrant; random number generators are
//! always passed in explicitly.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TWO_PI: f64 = 2.0 * PI;
/// log(1 / 2π), the log-density of the uniform distribution on the circle.
pub const LN_INV_TWO_PI: f64 = -1.8378770664093453;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CircError {
    #[error("angle must be finite, got {0}")]
    NonFiniteAngle(f64),
    #[error("concentration must be finite and nonnegative, got {0}")]
    BadConcentration(f64),
    #[error("empty angle sequence")]
    EmptyInput,
    #[error("angles and weights differ in length ({angles} vs {weights})")]
    LengthMismatch { angles: usize, weights: usize },
}

/// An angle in radians, always wrapped into `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct Angle(f64);

impl Angle {
    pub const ZERO: Angle = Angle(0.0);

    /// Wraps `radians` into `(-π, π]`. Rejects non-finite input.
    pub fn new(radians: f64) -> Result<Self, CircError> {
        if !radians.is_finite() {
            return Err(CircError::NonFiniteAngle(radians));
        }
        Ok(Angle(wrap_raw(radians)))
    }

    pub fn radians(self) -> f64 {
        self.0
    }

    /// Wrapping constructor for values already known to be finite
    /// (samples, sums of wrapped angles).
    pub(crate) fn wrap_finite(radians: f64) -> Self {
        debug_assert!(radians.is_finite());
        Angle(wrap_raw(radians))
    }
}

impl<'de> Deserialize<'de> for Angle {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        let radians = f64::deserialize(deserializer)?;
        Angle::new(radians).map_err(serde::de::Error::custom)
    }
}

/// Wraps an angle in radians into `(-π, π]`.
pub fn wrap_angle(radians: f64) -> Result<Angle, CircError> {
    Angle::new(radians)
}

fn wrap_raw(x: f64) -> f64 {
    // already in range: identity, so wrapping is bit-exact idempotent
    if x > -PI && x <= PI {
        return x;
    }
    let mut w = x.rem_euclid(TWO_PI); // [0, 2π)
    if w > PI {
        w -= TWO_PI;
    }
    // rem_euclid may round a tiny negative input up to exactly 2π.
    if w > PI {
        w = 0.0;
    }
    w
}

fn check_concentration(kappa: f64) -> Result<(), CircError> {
    if !kappa.is_finite() || kappa < 0.0 {
        return Err(CircError::BadConcentration(kappa));
    }
    Ok(())
}

/// Log-density of the von Mises distribution with mean `mu` and
/// concentration `kappa`, evaluated at `x`:
/// `κ·cos(x−μ) − log(2π·I₀(κ))`.
pub fn vm_logpdf(x: Angle, mu: Angle, kappa: f64) -> Result<f64, CircError> {
    check_concentration(kappa)?;
    Ok(kappa * (x.radians() - mu.radians()).cos() + LN_INV_TWO_PI - ln_bessel_i0(kappa))
}

/// Draws one sample from the von Mises distribution. `kappa = 0` yields
/// the uniform distribution on `(-π, π]`.
///
/// Uses the Best-Fisher rejection method with a wrapped-Cauchy envelope,
/// which is exact for any concentration.
pub fn vm_sample<R: Rng>(rng: &mut R, mu: Angle, kappa: f64) -> Result<Angle, CircError> {
    check_concentration(kappa)?;
    Ok(Angle::wrap_finite(vm_sample_raw(rng, mu.radians(), kappa)))
}

/// Unchecked sampling core; `kappa` must be finite and nonnegative.
/// Returns an unwrapped value.
pub(crate) fn vm_sample_raw<R: Rng>(rng: &mut R, mu: f64, kappa: f64) -> f64 {
    if kappa < 1e-10 {
        let u: f64 = rng.random();
        return u * TWO_PI - PI;
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = ((1.0 + r * z) / (r + z)).clamp(-1.0, 1.0);
        let c = kappa * (r - f);
        let u2: f64 = rng.random();
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.random();
            let magnitude = f.acos();
            return if u3 < 0.5 { mu - magnitude } else { mu + magnitude };
        }
    }
}

/// Weighted circular mean and resultant length of a set of angles.
///
/// Weights are expected to be nonnegative and normalized to sum to one,
/// so the resultant lies in `[0, 1]`. A resultant below `1e-12` is
/// treated as fully dispersed and maps the mean to 0 by convention.
pub fn circ_mean_resultant(angles: &[Angle], weights: &[f64]) -> Result<(Angle, f64), CircError> {
    if angles.is_empty() {
        return Err(CircError::EmptyInput);
    }
    if angles.len() != weights.len() {
        return Err(CircError::LengthMismatch {
            angles: angles.len(),
            weights: weights.len(),
        });
    }
    let mut sum_cos = 0.0;
    let mut sum_sin = 0.0;
    for (a, w) in angles.iter().zip(weights) {
        let r = a.radians();
        sum_cos += w * r.cos();
        sum_sin += w * r.sin();
    }
    let resultant = sum_cos.hypot(sum_sin).min(1.0);
    if resultant < 1e-12 {
        return Ok((Angle::ZERO, resultant));
    }
    Ok((Angle::wrap_finite(sum_sin.atan2(sum_cos)), resultant))
}

// --- modified Bessel functions of the first kind, orders 0 and 1 ---
//
// The power series is used below x = 20 and the large-argument asymptotic
// expansion beyond, so that log I₀ stays finite for concentrations in the
// hundreds where I₀ itself would overflow.

const SERIES_CUTOFF: f64 = 20.0;

fn bessel_i0_series(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / ((k * k) as f64);
        sum += term;
        if term < sum * 1e-18 {
            break;
        }
    }
    sum
}

// I₁(x) = (x/2) · Σ_k q^k / (k!(k+1)!), with q = x²/4.
fn bessel_i1_series(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / ((k * (k + 1)) as f64);
        sum += term;
        if term < sum * 1e-18 {
            break;
        }
    }
    sum * x / 2.0
}

// Asymptotic tail Σ_k t_k with t₀ = 1 and
// t_{k+1} = t_k · ((2k+1)² − 4ν²) / (8(k+1)x), for I_ν(x) ~ e^x/√(2πx) · Σ.
fn bessel_asymptotic_sum(four_nu_sq: f64, x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 0..24u32 {
        let odd = (2 * k + 1) as f64;
        term *= (odd * odd - four_nu_sq) / (8.0 * (k as f64 + 1.0) * x);
        sum += term;
        if term.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    sum
}

/// log I₀(x) for x ≥ 0, stable for large arguments.
pub fn ln_bessel_i0(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < SERIES_CUTOFF {
        bessel_i0_series(x).ln()
    } else {
        x - 0.5 * (TWO_PI * x).ln() + bessel_asymptotic_sum(0.0, x).ln()
    }
}

/// The mean resultant length I₁(x)/I₀(x) of a von Mises distribution
/// with concentration `x`.
pub fn bessel_i1_over_i0(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x == 0.0 {
        0.0
    } else if x < SERIES_CUTOFF {
        bessel_i1_series(x) / bessel_i0_series(x)
    } else {
        bessel_asymptotic_sum(4.0, x) / bessel_asymptotic_sum(0.0, x)
    }
}

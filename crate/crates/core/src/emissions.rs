//! Log emission likelihoods for d-vector, DOA and SSL observations, and
//! the per-frame joint emission with the missing-observation rule.
//!
//! The d-vector and SSL terms are unnormalized: their dropped constants
//! are shared across particles within a frame, so they cancel exactly in
//! the per-frame weight normalization. The DOA term keeps its (cheap)
//! normalizer. A silent channel contributes exactly 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circstats::{ln_bessel_i0, Angle, LN_INV_TWO_PI};
use crate::model::{ChannelObservation, ModelParams, ObservationFrame, Particle};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmissionError {
    #[error("embedding dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("frame has {got} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("particle shape ({channels} labels, {speakers} locations) does not match model ({expected_channels}, {expected_speakers})")]
    ParticleShapeMismatch {
        channels: usize,
        speakers: usize,
        expected_channels: usize,
        expected_speakers: usize,
    },
    #[error("speaker label {label} out of range for {num_speakers} speakers")]
    LabelOutOfRange { label: u16, num_speakers: usize },
}

/// Which location feature the emission uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LocationFeature {
    None,
    Doa,
    #[default]
    Ssl,
}

/// Emission configuration: feature choice plus the concentrations copied
/// from the model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmissionConfig {
    pub feature: LocationFeature,
    pub gamma: f64,
    pub kappa: f64,
}

impl EmissionConfig {
    /// With `LocationFeature::None` the location concentration is treated
    /// as zero.
    pub fn new(feature: LocationFeature, params: &ModelParams) -> Self {
        let kappa = match feature {
            LocationFeature::None => 0.0,
            _ => params.kappa,
        };
        EmissionConfig { feature, gamma: params.gamma, kappa }
    }
}

/// Unnormalized d-vector log-likelihood: `γ·(μ_q · d)`. The von
/// Mises-Fisher normalizer depends only on γ and the dimension, so it is
/// shared by all particles and omitted.
pub fn log_emis_dvec(dvec: &[f64], centroid: &[f64], gamma: f64) -> Result<f64, EmissionError> {
    if dvec.len() != centroid.len() {
        return Err(EmissionError::DimensionMismatch { left: dvec.len(), right: centroid.len() });
    }
    Ok(gamma * dot(dvec, centroid))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalized DOA log-likelihood: the full von Mises log-density
/// `κ·cos(φ − θ_q) − log(2π·I₀(κ))`.
pub fn log_emis_doa(phi: Angle, theta_q: Angle, kappa: f64) -> f64 {
    debug_assert!(kappa >= 0.0);
    kappa * (phi.radians() - theta_q.radians()).cos() + LN_INV_TWO_PI - ln_bessel_i0(kappa)
}

/// Unnormalized SSL log-likelihood `ρ·cos(η − θ_q)`, with `(ρ, η)`
/// precomputed by `ssl_equiv_stats`.
pub fn log_emis_ssl(rho: f64, eta: Angle, theta_q: Angle) -> f64 {
    debug_assert!(rho >= 0.0);
    rho * (eta.radians() - theta_q.radians()).cos()
}

/// Joint log emission of one frame for one particle: the sum over active
/// channels of the d-vector term plus the configured location term, each
/// evaluated at the location of the speaker active on that channel.
/// Silent channels contribute exactly 0.
pub fn frame_log_emission(
    obs: &ObservationFrame,
    particle: &Particle,
    params: &ModelParams,
    cfg: &EmissionConfig,
) -> Result<f64, EmissionError> {
    check_shapes(obs, particle, params)?;
    let mut total = 0.0;
    for (n, channel) in obs.channels.iter().enumerate() {
        let Some(channel) = channel else { continue };
        let label = particle.q[n];
        if usize::from(label) >= params.num_speakers {
            return Err(EmissionError::LabelOutOfRange { label, num_speakers: params.num_speakers });
        }
        let theta_q = particle.theta[usize::from(label)];
        total += log_emis_dvec(&channel.dvec, &params.centroids[usize::from(label)], cfg.gamma)?;
        total += location_term(channel, theta_q, params, cfg);
    }
    Ok(total)
}

fn location_term(
    channel: &ChannelObservation,
    theta_q: Angle,
    params: &ModelParams,
    cfg: &EmissionConfig,
) -> f64 {
    match cfg.feature {
        LocationFeature::None => 0.0,
        LocationFeature::Doa => match channel.doa {
            Some(phi) => log_emis_doa(phi, theta_q, cfg.kappa),
            None => 0.0,
        },
        LocationFeature::Ssl => match &channel.ssl {
            Some(ssl) => {
                let (rho, eta) = crate::model::ssl_equiv_stats(ssl, cfg.kappa, &params.bins);
                log_emis_ssl(rho, eta, theta_q)
            }
            None => 0.0,
        },
    }
}

fn check_shapes(
    obs: &ObservationFrame,
    particle: &Particle,
    params: &ModelParams,
) -> Result<(), EmissionError> {
    if obs.num_channels() != params.num_channels {
        return Err(EmissionError::ChannelMismatch {
            expected: params.num_channels,
            got: obs.num_channels(),
        });
    }
    if particle.q.len() != params.num_channels || particle.theta.len() != params.num_speakers {
        return Err(EmissionError::ParticleShapeMismatch {
            channels: particle.q.len(),
            speakers: particle.theta.len(),
            expected_channels: params.num_channels,
            expected_speakers: params.num_speakers,
        });
    }
    Ok(())
}

enum LocationPre {
    None,
    Doa { phi: f64, kappa: f64, ln_norm: f64 },
    Ssl { rho: f64, eta: f64 },
}

struct ChannelPre {
    /// `γ·(μ_m · d)` for every speaker m; shared by all particles.
    weighted_dots: Vec<f64>,
    location: LocationPre,
}

/// Per-frame emission table: the parts of the emission that do not
/// depend on the particle are computed once, after which evaluating a
/// particle costs O(N) regardless of the embedding dimension.
///
/// This is the hot path of the whole artifact: it is evaluated once per
/// particle per frame.
pub struct FrameEmissions {
    channels: Vec<Option<ChannelPre>>,
}

impl FrameEmissions {
    pub fn prepare(
        obs: &ObservationFrame,
        params: &ModelParams,
        cfg: &EmissionConfig,
    ) -> Result<Self, EmissionError> {
        if obs.num_channels() != params.num_channels {
            return Err(EmissionError::ChannelMismatch {
                expected: params.num_channels,
                got: obs.num_channels(),
            });
        }
        let channels = obs
            .channels
            .iter()
            .map(|channel| {
                let Some(channel) = channel else { return Ok(None) };
                let weighted_dots = params
                    .centroids
                    .iter()
                    .map(|mu| log_emis_dvec(&channel.dvec, mu, cfg.gamma))
                    .collect::<Result<Vec<f64>, _>>()?;
                let location = match cfg.feature {
                    LocationFeature::None => LocationPre::None,
                    LocationFeature::Doa => match channel.doa {
                        Some(phi) => LocationPre::Doa {
                            phi: phi.radians(),
                            kappa: cfg.kappa,
                            ln_norm: LN_INV_TWO_PI - ln_bessel_i0(cfg.kappa),
                        },
                        None => LocationPre::None,
                    },
                    LocationFeature::Ssl => match &channel.ssl {
                        Some(ssl) => {
                            let (rho, eta) =
                                crate::model::ssl_equiv_stats(ssl, cfg.kappa, &params.bins);
                            LocationPre::Ssl { rho, eta: eta.radians() }
                        }
                        None => LocationPre::None,
                    },
                };
                Ok(Some(ChannelPre { weighted_dots, location }))
            })
            .collect::<Result<Vec<_>, EmissionError>>()?;
        Ok(FrameEmissions { channels })
    }

    /// Log emission for one particle given as label/location slices.
    #[inline]
    pub fn log_emission(&self, labels: &[u16], thetas: &[Angle]) -> f64 {
        let mut total = 0.0;
        for (n, pre) in self.channels.iter().enumerate() {
            let Some(pre) = pre else { continue };
            let label = usize::from(labels[n]);
            let theta = thetas[label].radians();
            total += pre.weighted_dots[label];
            total += match pre.location {
                LocationPre::None => 0.0,
                LocationPre::Doa { phi, kappa, ln_norm } => kappa * (phi - theta).cos() + ln_norm,
                LocationPre::Ssl { rho, eta } => rho * (eta - theta).cos(),
            };
        }
        total
    }

    pub fn is_all_silent(&self) -> bool {
        self.channels.iter().all(Option::is_none)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circstats::TWO_PI;
    use crate::model::{BinGeometry, SslVector};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn params(num_speakers: usize, num_channels: usize, dim: usize) -> ModelParams {
        let mut centroids = vec![vec![0.0; dim]; num_speakers];
        for (m, mu) in centroids.iter_mut().enumerate() {
            mu[m % dim] = 1.0;
        }
        ModelParams {
            num_speakers,
            num_channels,
            centroids,
            transitions: vec![vec![1.0 / num_speakers as f64; num_speakers]; num_speakers],
            gamma: 4.0,
            sigma_move: 30.0,
            kappa: 6.0,
            bins: BinGeometry::new(24).unwrap(),
        }
    }

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    fn random_frame(rng: &mut ChaCha8Rng, p: &ModelParams, active_mask: &[bool]) -> ObservationFrame {
        let channels = active_mask
            .iter()
            .map(|&active| {
                if !active {
                    return None;
                }
                let dvec = random_unit(rng, p.embedding_dim());
                let raw: Vec<f64> = (0..p.bins.num_bins()).map(|_| rng.random::<f64>() + 0.01).collect();
                let sum: f64 = raw.iter().sum();
                let ssl = SslVector::new(raw.into_iter().map(|v| v / sum).collect()).unwrap();
                let doa = Angle::new(rng.random::<f64>() * TWO_PI - PI).unwrap();
                Some(ChannelObservation::new(dvec, Some(ssl), Some(doa)).unwrap())
            })
            .collect();
        ObservationFrame { channels }
    }

    fn random_particle(rng: &mut ChaCha8Rng, p: &ModelParams) -> Particle {
        Particle {
            q: (0..p.num_channels).map(|_| rng.random_range(0..p.num_speakers) as u16).collect(),
            theta: (0..p.num_speakers)
                .map(|_| Angle::new(rng.random::<f64>() * TWO_PI - PI).unwrap())
                .collect(),
        }
    }

    #[test]
    fn dvec_examples() {
        let mu = vec![1.0, 0.0, 0.0];
        assert_abs_diff_eq!(log_emis_dvec(&mu, &mu, 3.0).unwrap(), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(log_emis_dvec(&[0.0, 1.0, 0.0], &mu, 3.0).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            log_emis_dvec(&[-1.0, 0.0, 0.0], &mu, 3.0).unwrap(),
            -3.0,
            epsilon = 1e-12
        );
        assert!(log_emis_dvec(&[1.0, 0.0], &mu, 3.0).is_err());
    }

    #[test]
    fn doa_examples() {
        let theta = Angle::new(0.6).unwrap();
        assert_abs_diff_eq!(log_emis_doa(theta, theta, 0.0), LN_INV_TWO_PI, epsilon = 1e-12);
        for d in [0.2, 1.0, 2.4] {
            let plus = log_emis_doa(Angle::new(0.6 + d).unwrap(), theta, 1.7);
            let minus = log_emis_doa(Angle::new(0.6 - d).unwrap(), theta, 1.7);
            assert_abs_diff_eq!(plus, minus, epsilon = 1e-12);
        }
        // κ=2, antipodal: -2 - log(2π·I₀(2)), I₀(2) from the series oracle.
        let anti = log_emis_doa(Angle::new(0.6 + PI).unwrap(), theta, 2.0);
        assert_abs_diff_eq!(anti, -4.6618706078923018, epsilon = 1e-12);
    }

    #[test]
    fn ssl_examples() {
        let eta = Angle::new(-1.2).unwrap();
        assert_abs_diff_eq!(log_emis_ssl(2.5, eta, eta), 2.5, epsilon = 1e-12);
        assert_eq!(log_emis_ssl(0.0, eta, Angle::new(2.0).unwrap()), 0.0);
    }

    #[test]
    fn ssl_term_matches_direct_sum() {
        // ρ·cos(η−θ) = κ·Σ_i s_i cos(b_i−θ): the identity behind the reduction.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bins = BinGeometry::new(36).unwrap();
        for _ in 0..40 {
            let raw: Vec<f64> = (0..36).map(|_| rng.random::<f64>() + 0.01).collect();
            let sum: f64 = raw.iter().sum();
            let ssl = SslVector::new(raw.into_iter().map(|v| v / sum).collect()).unwrap();
            let kappa = 8.0 * rng.random::<f64>();
            let theta = Angle::new(rng.random::<f64>() * TWO_PI - PI).unwrap();
            let (rho, eta) = crate::model::ssl_equiv_stats(&ssl, kappa, &bins);
            let direct: f64 = ssl
                .values()
                .iter()
                .zip(bins.centers())
                .map(|(&s, b)| kappa * s * (b.radians() - theta.radians()).cos())
                .sum();
            assert_abs_diff_eq!(log_emis_ssl(rho, eta, theta), direct, epsilon = 1e-9);
        }
    }

    #[test]
    fn silent_frame_contributes_zero() {
        let p = params(2, 3, 4);
        let cfg = EmissionConfig::new(LocationFeature::Ssl, &p);
        let obs = ObservationFrame::silent(3);
        let particle = Particle {
            q: vec![0, 1, 0],
            theta: vec![Angle::ZERO, Angle::new(1.0).unwrap()],
        };
        assert_eq!(frame_log_emission(&obs, &particle, &p, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn additivity_over_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for feature in [LocationFeature::None, LocationFeature::Doa, LocationFeature::Ssl] {
            let p = params(3, 4, 6);
            let cfg = EmissionConfig::new(feature, &p);
            for _ in 0..20 {
                let mask: Vec<bool> = (0..4).map(|_| rng.random::<f64>() < 0.7).collect();
                let frame = random_frame(&mut rng, &p, &mask);
                let particle = random_particle(&mut rng, &p);
                let joint = frame_log_emission(&frame, &particle, &p, &cfg).unwrap();
                let mut sum = 0.0;
                for n in 0..4 {
                    let mut solo = ObservationFrame::silent(4);
                    solo.channels[n] = frame.channels[n].clone();
                    sum += frame_log_emission(&solo, &particle, &p, &cfg).unwrap();
                }
                assert_abs_diff_eq!(joint, sum, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn feature_none_ignores_locations() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = params(3, 2, 6);
        let cfg = EmissionConfig::new(LocationFeature::None, &p);
        assert_eq!(cfg.kappa, 0.0);
        let frame = random_frame(&mut rng, &p, &[true, true]);
        let mut particle = random_particle(&mut rng, &p);
        let base = frame_log_emission(&frame, &particle, &p, &cfg).unwrap();
        for _ in 0..10 {
            particle.theta = (0..3)
                .map(|_| Angle::new(rng.random::<f64>() * TWO_PI - PI).unwrap())
                .collect();
            let perturbed = frame_log_emission(&frame, &particle, &p, &cfg).unwrap();
            assert_eq!(base, perturbed);
        }
    }

    #[test]
    fn finite_for_large_concentrations() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut p = params(2, 2, 5);
        p.gamma = 1000.0;
        p.kappa = 1000.0;
        for feature in [LocationFeature::Doa, LocationFeature::Ssl] {
            let cfg = EmissionConfig::new(feature, &p);
            for _ in 0..20 {
                let frame = random_frame(&mut rng, &p, &[true, true]);
                let particle = random_particle(&mut rng, &p);
                let v = frame_log_emission(&frame, &particle, &p, &cfg).unwrap();
                assert!(v.is_finite(), "non-finite emission {v}");
            }
        }
    }

    #[test]
    fn table_matches_direct_evaluation() {
        // The precomputed per-frame table must agree with the direct
        // per-particle computation exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for feature in [LocationFeature::None, LocationFeature::Doa, LocationFeature::Ssl] {
            let p = params(3, 2, 8);
            let cfg = EmissionConfig::new(feature, &p);
            for _ in 0..20 {
                let mask: Vec<bool> = (0..2).map(|_| rng.random::<f64>() < 0.8).collect();
                let frame = random_frame(&mut rng, &p, &mask);
                let table = FrameEmissions::prepare(&frame, &p, &cfg).unwrap();
                for _ in 0..10 {
                    let particle = random_particle(&mut rng, &p);
                    let direct = frame_log_emission(&frame, &particle, &p, &cfg).unwrap();
                    let fast = table.log_emission(&particle.q, &particle.theta);
                    assert_abs_diff_eq!(direct, fast, epsilon = 1e-12);
                }
            }
        }
    }
}

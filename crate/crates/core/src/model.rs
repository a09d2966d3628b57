//! Core data types shared across the filter pipeline: angular bin
//! geometry, SSL feature utilities, observations, particles, words and
//! model parameters with validation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circstats::{Angle, TWO_PI};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("bin count must be positive")]
    EmptyBins,
    #[error("SSL vector must be nonempty")]
    EmptySsl,
    #[error("SSL entry {index} is negative or non-finite: {value}")]
    BadSslEntry { index: usize, value: f64 },
    #[error("SSL entries sum to {sum}, expected 1 within 1e-6")]
    SslNotNormalized { sum: f64 },
    #[error("embedding has norm {norm}, expected 1 within 1e-6")]
    NotUnitNorm { norm: f64 },
    #[error("embedding contains a non-finite entry")]
    NonFiniteEmbedding,
    #[error("word {id}: start frame {start} is after end frame {end}")]
    BadWordRange { id: usize, start: usize, end: usize },
    #[error("denominator profile needs a grid of at least 100 points, got {0}")]
    GridTooCoarse(usize),
    #[error("invalid model parameters:\n{}", .0.join("\n"))]
    InvalidParams(Vec<String>),
}

/// Evenly spaced angular bin centers `b_j = -π + (j + ½)·2π/S`.
///
/// The half-bin offset keeps every center strictly inside `(-π, π)`, so
/// no bin sits on the periodic boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinGeometry {
    centers: Vec<Angle>,
}

impl BinGeometry {
    pub fn new(num_bins: usize) -> Result<Self, ModelError> {
        if num_bins == 0 {
            return Err(ModelError::EmptyBins);
        }
        let width = TWO_PI / num_bins as f64;
        let centers = (0..num_bins)
            .map(|j| Angle::new(-PI + (j as f64 + 0.5) * width).expect("finite"))
            .collect();
        Ok(BinGeometry { centers })
    }

    pub fn num_bins(&self) -> usize {
        self.centers.len()
    }

    pub fn center(&self, j: usize) -> Angle {
        self.centers[j]
    }

    pub fn centers(&self) -> &[Angle] {
        &self.centers
    }

    pub fn bin_width(&self) -> f64 {
        TWO_PI / self.centers.len() as f64
    }
}

/// A categorical distribution over angular bins, one probability per bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct SslVector(Vec<f64>);

impl SslVector {
    /// Validates that entries are nonnegative and sum to one. Sums within
    /// `1e-9` of one are accepted as-is; sums within `1e-6` are
    /// renormalized (tolerating serialized rounding); anything further off
    /// is rejected.
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if values.is_empty() {
            return Err(ModelError::EmptySsl);
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(ModelError::BadSslEntry { index, value });
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() <= 1e-9 {
            Ok(SslVector(values))
        } else if (sum - 1.0).abs() <= 1e-6 {
            Ok(SslVector(values.into_iter().map(|v| v / sum).collect()))
        } else {
            Err(ModelError::SslNotNormalized { sum })
        }
    }

    /// Constructor for values already normalized by construction.
    pub(crate) fn from_normalized(values: Vec<f64>) -> Self {
        SslVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<'de> Deserialize<'de> for SslVector {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        let values = Vec::<f64>::deserialize(deserializer)?;
        SslVector::new(values).map_err(serde::de::Error::custom)
    }
}

/// One channel's observation for one frame. A channel with no
/// observation is silent and is represented by `None` at the frame level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelObservation {
    pub dvec: Vec<f64>,
    pub ssl: Option<SslVector>,
    pub doa: Option<Angle>,
}

impl ChannelObservation {
    pub fn new(dvec: Vec<f64>, ssl: Option<SslVector>, doa: Option<Angle>) -> Result<Self, ModelError> {
        check_unit_norm(&dvec)?;
        Ok(ChannelObservation { dvec, ssl, doa })
    }
}

fn check_unit_norm(v: &[f64]) -> Result<(), ModelError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ModelError::NonFiniteEmbedding);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(ModelError::NotUnitNorm { norm });
    }
    Ok(())
}

/// Per-frame observations for all channels; `None` entries are silent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    pub channels: Vec<Option<ChannelObservation>>,
}

impl ObservationFrame {
    pub fn silent(num_channels: usize) -> Self {
        ObservationFrame { channels: vec![None; num_channels] }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }
}

/// One hypothesis of the hidden state: an active-speaker label per
/// channel and an angular location per speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    /// Active speaker per channel, 0-based labels in `0..M`.
    pub q: Vec<u16>,
    /// Angular location per speaker.
    pub theta: Vec<Angle>,
}

/// A word occurrence: the decoding and evaluation unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSegment {
    pub id: usize,
    pub channel: usize,
    pub start: usize,
    pub end: usize,
}

impl WordSegment {
    pub fn new(id: usize, channel: usize, start: usize, end: usize) -> Result<Self, ModelError> {
        if start > end {
            return Err(ModelError::BadWordRange { id, start, end });
        }
        Ok(WordSegment { id, channel, start, end })
    }

    pub fn num_frames(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Model parameters: speaker centroids, speaker transition matrix, the
/// three concentrations and the SSL bin geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub num_speakers: usize,
    pub num_channels: usize,
    /// Unit-norm embedding centroid per speaker.
    pub centroids: Vec<Vec<f64>>,
    /// Row-stochastic M×M speaker transition matrix.
    pub transitions: Vec<Vec<f64>>,
    /// Embedding emission concentration γ.
    pub gamma: f64,
    /// Location transition concentration ς.
    pub sigma_move: f64,
    /// Location emission concentration κ.
    pub kappa: f64,
    pub bins: BinGeometry,
}

impl ModelParams {
    /// Checks every invariant and returns the full list of violations
    /// rather than stopping at the first.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.num_speakers == 0 {
            problems.push("speaker count must be positive".to_string());
        }
        if self.num_channels == 0 {
            problems.push("channel count must be positive".to_string());
        }
        if self.centroids.len() != self.num_speakers {
            problems.push(format!(
                "expected {} centroids, got {}",
                self.num_speakers,
                self.centroids.len()
            ));
        }
        let dim = self.centroids.first().map_or(0, Vec::len);
        for (m, mu) in self.centroids.iter().enumerate() {
            if mu.len() != dim {
                problems.push(format!("centroid {m} has dimension {}, expected {dim}", mu.len()));
            }
            match check_unit_norm(mu) {
                Err(ModelError::NotUnitNorm { norm }) => {
                    problems.push(format!("centroid {m} has norm {norm}, expected 1"))
                }
                Err(_) => problems.push(format!("centroid {m} has a non-finite entry")),
                Ok(()) => {}
            }
        }
        if self.transitions.len() != self.num_speakers {
            problems.push(format!(
                "expected {} transition rows, got {}",
                self.num_speakers,
                self.transitions.len()
            ));
        }
        for (m, row) in self.transitions.iter().enumerate() {
            if row.len() != self.num_speakers {
                problems.push(format!(
                    "transition row {m} has {} entries, expected {}",
                    row.len(),
                    self.num_speakers
                ));
                continue;
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                problems.push(format!("transition row {m} has a negative or non-finite entry"));
                continue;
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                problems.push(format!("transition row {m} sums to {sum}, expected 1 within 1e-9"));
            }
        }
        for (name, value) in [
            ("gamma", self.gamma),
            ("sigma_move", self.sigma_move),
            ("kappa", self.kappa),
        ] {
            if !value.is_finite() || value < 0.0 {
                problems.push(format!("concentration {name} must be finite and nonnegative, got {value}"));
            }
        }
        if self.bins.num_bins() == 0 {
            problems.push("bin geometry must have at least one bin".to_string());
        }
        problems
    }

    /// Convenience wrapper turning validation diagnostics into an error.
    pub fn ensure_valid(&self) -> Result<(), ModelError> {
        let problems = self.validate();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidParams(problems))
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }
}

/// DOA extraction: the angle of the most probable SSL bin, ties broken
/// by the lowest index.
pub fn ssl_mode_doa(ssl: &SslVector, bins: &BinGeometry) -> Angle {
    assert_eq!(ssl.len(), bins.num_bins(), "SSL dimension must match bin count");
    let mut best = 0usize;
    let mut best_value = ssl.values()[0];
    for (j, &v) in ssl.values().iter().enumerate().skip(1) {
        if v > best_value {
            best = j;
            best_value = v;
        }
    }
    bins.center(best)
}

/// Reduces an SSL vector to the equivalent concentration ρ and mean η of
/// its matching von-Mises-like emission:
/// `ρ = κ·‖Σ_i s_i (cos b_i, sin b_i)‖` and `η = atan2` of that sum.
///
/// This linear-sum form is algebraically identical to the
/// `κ·√(Σ_i Σ_j s_i s_j cos(b_i − b_j))` double sum but costs O(S)
/// instead of O(S²).
pub fn ssl_equiv_stats(ssl: &SslVector, kappa: f64, bins: &BinGeometry) -> (f64, Angle) {
    assert_eq!(ssl.len(), bins.num_bins(), "SSL dimension must match bin count");
    let mut sum_cos = 0.0;
    let mut sum_sin = 0.0;
    for (&s, b) in ssl.values().iter().zip(bins.centers()) {
        let r = b.radians();
        sum_cos += s * r.cos();
        sum_sin += s * r.sin();
    }
    let resultant = sum_cos.hypot(sum_sin);
    let eta = if resultant < 1e-12 {
        Angle::ZERO
    } else {
        Angle::wrap_finite(sum_sin.atan2(sum_cos))
    };
    (kappa * resultant, eta)
}

/// The discretised von Mises distribution over bins:
/// `λ_i ∝ exp(κ·cos(b_i − θ))`, normalized with max-subtraction.
pub fn discretized_vm(theta: Angle, kappa: f64, bins: &BinGeometry) -> SslVector {
    let mut logs: Vec<f64> = bins
        .centers()
        .iter()
        .map(|b| kappa * (b.radians() - theta.radians()).cos())
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logs.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logs.iter_mut() {
        *l /= total;
    }
    SslVector::from_normalized(logs)
}

/// Relative ripple `(max − min)/mean` of `f(θ) = Σ_j exp(κ·cos(b_j − θ))`
/// over a θ grid. This is the denominator term whose near-constancy
/// justifies dropping it from the SSL emission.
pub fn denominator_profile(kappa: f64, num_bins: usize, grid: usize) -> Result<f64, ModelError> {
    if grid < 100 {
        return Err(ModelError::GridTooCoarse(grid));
    }
    let bins = BinGeometry::new(num_bins)?;
    // Work with shifted logs so κ up to the hundreds cannot overflow.
    let logs: Vec<f64> = (0..grid)
        .map(|g| {
            let theta = -PI + (g as f64 + 0.5) * TWO_PI / grid as f64;
            let mut max = f64::NEG_INFINITY;
            let terms: Vec<f64> = bins
                .centers()
                .iter()
                .map(|b| {
                    let v = kappa * (b.radians() - theta).cos();
                    max = max.max(v);
                    v
                })
                .collect();
            max + terms.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
        })
        .collect();
    let shift = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values: Vec<f64> = logs.iter().map(|l| (l - shift).exp()).collect();
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok((max - min) / mean)
}

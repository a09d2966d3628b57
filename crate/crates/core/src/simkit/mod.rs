//! Synthetic meeting generation with ground truth, and a discretized
//! exact-inference oracle for validating the particle filter and
//! smoother.

mod oracle;

pub use oracle::{grid_hmm_posterior, OraclePosteriors};

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circstats::{vm_sample_raw, Angle, TWO_PI};
use crate::model::{
    discretized_vm, ssl_mode_doa, BinGeometry, ChannelObservation, ModelParams, ObservationFrame,
    WordSegment,
};
use crate::pipeline::{estimate_transitions, Segment};
use crate::rng::{stream, StreamKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("oracle state space has {states} joint states, the guard allows at most {max}")]
    StateSpaceTooLarge { states: u128, max: u128 },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Emission(#[from] crate::emissions::EmissionError),
}

/// Synthetic meeting configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub num_speakers: usize,
    pub num_channels: usize,
    pub num_frames: usize,
    pub frame_seconds: f64,
    /// Location random-walk concentration; small values mean fast movement.
    pub sigma_true: f64,
    /// Location observation concentration.
    pub kappa_true: f64,
    /// Embedding concentration.
    pub gamma_true: f64,
    pub dvec_dim: usize,
    pub ssl_bins: usize,
    /// Probability that a channel keeps its current state each frame.
    pub turn_persistence: f64,
    /// Probability that a redrawn channel state is silence.
    pub silence_prob: f64,
    pub word_len_min: usize,
    pub word_len_max: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_speakers: 3,
            num_channels: 2,
            num_frames: 250,
            frame_seconds: 0.4,
            sigma_true: 200.0,
            kappa_true: 12.0,
            gamma_true: 120.0,
            dvec_dim: 128,
            ssl_bins: 360,
            turn_persistence: 0.95,
            silence_prob: 0.35,
            word_len_min: 4,
            word_len_max: 12,
            seed: 7,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let complain = |msg: String| Err(SimError::InvalidConfig(msg));
        if self.num_speakers == 0 {
            return complain("speaker count must be positive".into());
        }
        if self.num_channels == 0 {
            return complain("channel count must be positive".into());
        }
        if self.num_frames == 0 {
            return complain("frame count must be positive".into());
        }
        if self.dvec_dim < 2 {
            return complain("embedding dimension must be at least 2".into());
        }
        if self.ssl_bins == 0 {
            return complain("SSL bin count must be positive".into());
        }
        if !(self.frame_seconds > 0.0) {
            return complain(format!("frame duration must be positive, got {}", self.frame_seconds));
        }
        for (name, p) in [("turn_persistence", self.turn_persistence), ("silence_prob", self.silence_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return complain(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, c) in [
            ("sigma_true", self.sigma_true),
            ("kappa_true", self.kappa_true),
            ("gamma_true", self.gamma_true),
        ] {
            if !c.is_finite() || c < 0.0 {
                return complain(format!("{name} must be finite and nonnegative, got {c}"));
            }
        }
        if self.word_len_min == 0 || self.word_len_min > self.word_len_max {
            return complain(format!(
                "word length range [{}, {}] is invalid",
                self.word_len_min, self.word_len_max
            ));
        }
        Ok(())
    }
}

/// Everything the simulator knows that a real meeting would not reveal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// True speaker locations, indexed `[t][speaker]`.
    pub locations: Vec<Vec<Angle>>,
    /// Active speaker per frame and channel; `None` is silence.
    pub active: Vec<Vec<Option<usize>>>,
    /// True speaker per word, aligned with the word list.
    pub word_labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub observations: Vec<ObservationFrame>,
    pub words: Vec<WordSegment>,
    pub truth: GroundTruth,
    /// Matched model parameters: true centroids and concentrations, with
    /// the speaker transition matrix estimated from the generated labels.
    pub params: ModelParams,
    /// One speaker-pure segment per word with its mean embedding, for
    /// initializing the AHC pipeline.
    pub segments: Vec<Segment>,
}

/// Samples one unit vector from the von Mises-Fisher distribution in
/// `dim` dimensions (Wood's rejection algorithm on the cosine marginal).
pub fn vmf_sample<R: Rng>(rng: &mut R, mean: &[f64], kappa: f64) -> Vec<f64> {
    let dim = mean.len();
    debug_assert!(dim >= 2);
    if kappa < 1e-12 {
        return random_unit(rng, dim);
    }
    let d1 = (dim - 1) as f64;
    let b = d1 / (2.0 * kappa + (4.0 * kappa * kappa + d1 * d1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + d1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(d1 / 2.0, d1 / 2.0).expect("valid beta parameters");
    let w = loop {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.random();
        if kappa * w + d1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            break w;
        }
    };
    // sample = w·e₁ + √(1−w²)·v with v uniform on the equator, then
    // reflect e₁ onto the mean direction
    let tangent = random_unit(rng, dim - 1);
    let mut sample = Vec::with_capacity(dim);
    sample.push(w);
    let scale = (1.0 - w * w).max(0.0).sqrt();
    sample.extend(tangent.into_iter().map(|v| v * scale));
    householder_to(mean, &mut sample);
    sample
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

// Householder reflection mapping e₁ to `target`, applied to `x` in place.
fn householder_to(target: &[f64], x: &mut [f64]) {
    let mut u: Vec<f64> = target.to_vec();
    u[0] -= 1.0;
    let norm_sq: f64 = u.iter().map(|v| v * v).sum();
    if norm_sq < 1e-24 {
        return; // target is already e₁
    }
    let proj: f64 = u.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() * 2.0 / norm_sq;
    for (xi, ui) in x.iter_mut().zip(&u) {
        *xi -= proj * ui;
    }
}

/// Generates a synthetic meeting: moving speakers on a von Mises random
/// walk, per-channel persistence chains over silence and the speakers
/// (cross-channel collisions demote the higher-indexed channel to
/// silence), von Mises-Fisher embeddings and discretized von Mises SSL
/// observations around a noisy true angle, with the DOA as the SSL mode.
/// Contiguous same-speaker runs are split into words. Fully reproducible
/// from the seed.
pub fn simulate_meeting(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, StreamKind::Simulate, 0, 0);
    let m = cfg.num_speakers;
    let n = cfg.num_channels;
    let t_len = cfg.num_frames;
    let bins = BinGeometry::new(cfg.ssl_bins)?;

    let centroids: Vec<Vec<f64>> = (0..m).map(|_| random_unit(&mut rng, cfg.dvec_dim)).collect();

    let mut locations: Vec<Vec<Angle>> = Vec::with_capacity(t_len);
    let first: Vec<Angle> = (0..m)
        .map(|_| Angle::wrap_finite(rng.random::<f64>() * TWO_PI - PI))
        .collect();
    locations.push(first);
    for t in 1..t_len {
        let prev = &locations[t - 1];
        let step: Vec<Angle> = prev
            .iter()
            .map(|theta| Angle::wrap_finite(vm_sample_raw(&mut rng, theta.radians(), cfg.sigma_true)))
            .collect();
        locations.push(step);
        let _ = t;
    }

    // channel persistence chains over {silence} ∪ speakers
    let draw_state = |rng: &mut rand_chacha::ChaCha8Rng| -> Option<usize> {
        if rng.random::<f64>() < cfg.silence_prob {
            None
        } else {
            Some(rng.random_range(0..m))
        }
    };
    let mut chains: Vec<Vec<Option<usize>>> = vec![Vec::with_capacity(t_len); n];
    for channel in 0..n {
        let mut state = draw_state(&mut rng);
        chains[channel].push(state);
        for _ in 1..t_len {
            if rng.random::<f64>() >= cfg.turn_persistence {
                state = draw_state(&mut rng);
            }
            chains[channel].push(state);
        }
    }

    // collision rule: a speaker can be active on only one channel per
    // frame; the higher-indexed channel goes silent
    let mut active: Vec<Vec<Option<usize>>> = vec![vec![None; n]; t_len];
    for t in 0..t_len {
        let mut used = vec![false; m];
        for channel in 0..n {
            if let Some(speaker) = chains[channel][t] {
                if !used[speaker] {
                    used[speaker] = true;
                    active[t][channel] = Some(speaker);
                }
            }
        }
    }

    // observations
    let mut observations: Vec<ObservationFrame> = Vec::with_capacity(t_len);
    for (t, frame_active) in active.iter().enumerate() {
        let mut frame = ObservationFrame::silent(n);
        for (channel, &speaker) in frame_active.iter().enumerate() {
            let Some(speaker) = speaker else { continue };
            let dvec = vmf_sample(&mut rng, &centroids[speaker], cfg.gamma_true);
            let true_theta = locations[t][speaker];
            let noisy = vm_sample_raw(&mut rng, true_theta.radians(), cfg.kappa_true);
            let ssl = discretized_vm(Angle::wrap_finite(noisy), cfg.kappa_true, &bins);
            let doa = ssl_mode_doa(&ssl, &bins);
            frame.channels[channel] =
                Some(ChannelObservation { dvec, ssl: Some(ssl), doa: Some(doa) });
        }
        observations.push(frame);
    }

    // words: contiguous same-speaker runs split into random lengths
    let mut words = Vec::new();
    let mut word_labels = Vec::new();
    for channel in 0..n {
        let mut t = 0;
        while t < t_len {
            let Some(speaker) = active[t][channel] else {
                t += 1;
                continue;
            };
            let mut end = t;
            while end + 1 < t_len && active[end + 1][channel] == Some(speaker) {
                end += 1;
            }
            let mut start = t;
            while start <= end {
                let len = rng.random_range(cfg.word_len_min..=cfg.word_len_max);
                let word_end = (start + len - 1).min(end);
                words.push((channel, start, word_end, speaker));
                start = word_end + 1;
            }
            t = end + 1;
        }
    }
    words.sort_by_key(|&(channel, start, ..)| (start, channel));
    let words: Vec<WordSegment> = words
        .into_iter()
        .enumerate()
        .map(|(id, (channel, start, end, speaker))| {
            word_labels.push(speaker);
            WordSegment::new(id, channel, start, end).expect("start <= end by construction")
        })
        .collect();

    // per-word segments with mean embeddings, for the AHC pipeline
    let segments: Vec<Segment> = words
        .iter()
        .map(|word| {
            let mut sum = vec![0.0; cfg.dvec_dim];
            for t in word.start..=word.end {
                if let Some(channel) = &observations[t].channels[word.channel] {
                    for (acc, v) in sum.iter_mut().zip(&channel.dvec) {
                        *acc += v;
                    }
                }
            }
            let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
            let embedding = if norm > 1e-12 {
                sum.into_iter().map(|x| x / norm).collect()
            } else {
                centroids[0].clone()
            };
            Segment { channel: word.channel, start: word.start, end: word.end, embedding }
        })
        .collect();

    // matched model parameters; the transition matrix is estimated from
    // the generated label runs with light uniform smoothing
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for channel in 0..n {
        let mut current: Vec<usize> = Vec::new();
        for frame_active in &active {
            match frame_active[channel] {
                Some(speaker) => current.push(speaker),
                None => {
                    if current.len() > 1 {
                        runs.push(std::mem::take(&mut current));
                    } else {
                        current.clear();
                    }
                }
            }
        }
        if current.len() > 1 {
            runs.push(current);
        }
    }
    let transitions = estimate_transitions(&runs, m, 0.05);
    let params = ModelParams {
        num_speakers: m,
        num_channels: n,
        centroids,
        transitions,
        gamma: cfg.gamma_true,
        sigma_move: cfg.sigma_true,
        kappa: cfg.kappa_true,
        bins,
    };

    Ok(SimOutput {
        observations,
        words,
        truth: GroundTruth { locations, active, word_labels },
        params,
        segments,
    })
}

/// Ground-truth movement classifier: a meeting counts as moving when
/// some speaker has two disjoint angular arcs of at least π/6 such that
/// the speaker spends at least `min_active_seconds` of active speech in
/// each of the two regions remaining between those arcs.
pub fn meeting_has_movement(
    truth: &GroundTruth,
    frame_seconds: f64,
    min_active_seconds: f64,
) -> bool {
    let t_len = truth.locations.len();
    if t_len == 0 {
        return false;
    }
    let m = truth.locations[0].len();
    let min_frames = (min_active_seconds / frame_seconds).ceil() as usize;
    let gap = PI / 6.0;
    // candidate arc boundaries on a coarse grid
    let grid: Vec<f64> = (0..72).map(|i| -PI + i as f64 * TWO_PI / 72.0).collect();

    for speaker in 0..m {
        let angles: Vec<f64> = (0..t_len)
            .filter(|&t| truth.active[t].iter().any(|&a| a == Some(speaker)))
            .map(|t| truth.locations[t][speaker].radians())
            .collect();
        if angles.len() < 2 * min_frames {
            continue;
        }
        // place one gap starting at a and another at b; the two regions
        // between them must each hold enough active frames
        for (i, &a) in grid.iter().enumerate() {
            for &b in &grid[i + 1..] {
                if b - a < gap || (a + TWO_PI) - (b + gap) < gap {
                    continue;
                }
                let region_one = (a + gap, b);
                let region_two = (b + gap, a + TWO_PI);
                let count = |lo: f64, hi: f64| {
                    angles
                        .iter()
                        .filter(|&&x| {
                            let shifted = if x < a { x + TWO_PI } else { x };
                            shifted > lo && shifted < hi
                        })
                        .count()
                };
                if count(region_one.0, region_one.1) >= min_frames
                    && count(region_two.0, region_two.1) >= min_frames
                {
                    return true;
                }
            }
        }
    }
    false
}

//! Sequential importance resampling forward pass: initial and transition
//! sampling, log-domain weight updates, effective sample size and
//! systematic resampling.
//!
//! Particle storage is struct-of-arrays so that a frame with tens of
//! thousands of particles is a handful of flat allocations. Prediction
//! sampling and emission evaluation are data-parallel over particles;
//! every particle draws from its own `(seed, frame, index)` stream and
//! all reductions run in index order, so results do not depend on the
//! number of threads.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::circstats::{vm_sample_raw, Angle, TWO_PI};
use crate::emissions::{EmissionConfig, EmissionError, FrameEmissions};
use crate::model::{ModelParams, ObservationFrame, Particle, WordSegment};
use crate::rng::{stream, StreamKind};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    InvalidParams(#[from] crate::model::ModelError),
    #[error(transparent)]
    Emission(#[from] EmissionError),
    #[error("frame {frame}: posterior mass is zero for every particle (model/data mismatch)")]
    ZeroPosteriorMass { frame: usize },
    #[error("no observation frames supplied")]
    EmptyObservations,
    #[error("word {word} ends at frame {end} but the meeting has {frames} frames")]
    WordOutOfRange { word: usize, end: usize, frames: usize },
    #[error("output sink failed: {0}")]
    Sink(String),
}

/// Forward-pass configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Particle count R.
    pub num_particles: usize,
    /// Resample when ESS falls below this fraction of R. 0 disables
    /// resampling entirely, 1 resamples every frame.
    pub ess_threshold_fraction: f64,
    /// Only allow speaker-label switches at frames where a word starts.
    pub restrict_switch_to_word_boundaries: bool,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            num_particles: 20_000,
            ess_threshold_fraction: 0.5,
            restrict_switch_to_word_boundaries: false,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.num_particles == 0 {
            return Err(FilterError::InvalidConfig("particle count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ess_threshold_fraction)
            || !self.ess_threshold_fraction.is_finite()
        {
            return Err(FilterError::InvalidConfig(format!(
                "ESS threshold fraction must lie in [0, 1], got {}",
                self.ess_threshold_fraction
            )));
        }
        Ok(())
    }
}

/// The particles and importance weights of one frame.
///
/// `weights` is always the normalized form of `exp(log_weights - max)`.
/// When resampling fired at this frame, `ancestors[r]` is the index of
/// the particle that position r was copied from; the next frame's
/// prediction step starts from those copies with uniform weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub t: usize,
    num_particles: usize,
    num_channels: usize,
    num_speakers: usize,
    labels: Vec<u16>,
    thetas: Vec<Angle>,
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    pub resampled: bool,
    ancestors: Option<Vec<u32>>,
}

impl ParticleEnsemble {
    /// Reassembles an ensemble from raw parts (store loading); weights
    /// are recomputed from the log weights so the invariant holds by
    /// construction.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        t: usize,
        num_channels: usize,
        num_speakers: usize,
        labels: Vec<u16>,
        thetas: Vec<Angle>,
        log_weights: Vec<f64>,
        resampled: bool,
        ancestors: Option<Vec<u32>>,
    ) -> Result<Self, FilterError> {
        if num_channels == 0 || num_speakers == 0 {
            return Err(FilterError::InvalidConfig("ensemble dimensions must be positive".into()));
        }
        if labels.len() % num_channels != 0 {
            return Err(FilterError::InvalidConfig("label buffer size mismatch".into()));
        }
        let num_particles = labels.len() / num_channels;
        if thetas.len() != num_particles * num_speakers
            || log_weights.len() != num_particles
            || ancestors.as_ref().is_some_and(|a| a.len() != num_particles)
        {
            return Err(FilterError::InvalidConfig("ensemble buffer size mismatch".into()));
        }
        let (weights, _) =
            normalize_log_weights(&log_weights).ok_or(FilterError::ZeroPosteriorMass { frame: t })?;
        Ok(ParticleEnsemble {
            t,
            num_particles,
            num_channels,
            num_speakers,
            labels,
            thetas,
            log_weights,
            weights,
            resampled,
            ancestors,
        })
    }

    pub fn num_particles(&self) -> usize {
        self.num_particles
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn num_speakers(&self) -> usize {
        self.num_speakers
    }

    /// Speaker labels of particle `r`, one per channel.
    pub fn labels_of(&self, r: usize) -> &[u16] {
        &self.labels[r * self.num_channels..(r + 1) * self.num_channels]
    }

    /// Speaker locations of particle `r`, one per speaker.
    pub fn thetas_of(&self, r: usize) -> &[Angle] {
        &self.thetas[r * self.num_speakers..(r + 1) * self.num_speakers]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn ancestors(&self) -> Option<&[u32]> {
        self.ancestors.as_deref()
    }

    pub fn particle(&self, r: usize) -> Particle {
        Particle { q: self.labels_of(r).to_vec(), theta: self.thetas_of(r).to_vec() }
    }
}

/// Draws an initial particle: each channel label uniform over the
/// speakers, each speaker location uniform on the circle.
pub fn sample_initial<R: Rng>(rng: &mut R, params: &ModelParams) -> Particle {
    let mut particle = Particle {
        q: vec![0; params.num_channels],
        theta: vec![Angle::ZERO; params.num_speakers],
    };
    sample_initial_into(rng, params, &mut particle.q, &mut particle.theta);
    particle
}

fn sample_initial_into<R: Rng>(
    rng: &mut R,
    params: &ModelParams,
    labels: &mut [u16],
    thetas: &mut [Angle],
) {
    for label in labels.iter_mut() {
        *label = rng.random_range(0..params.num_speakers) as u16;
    }
    for theta in thetas.iter_mut() {
        *theta = Angle::wrap_finite(rng.random::<f64>() * TWO_PI - PI);
    }
}

/// Propagates a particle one frame: labels follow the speaker transition
/// matrix (or are copied unchanged when switching is not allowed) and
/// each location takes a von Mises step with concentration ς.
pub fn sample_transition<R: Rng>(
    rng: &mut R,
    prev: &Particle,
    params: &ModelParams,
    allow_switch: bool,
) -> Particle {
    let rows = TransitionRows::new(params);
    let mut out = prev.clone();
    sample_transition_into(rng, &prev.q, &prev.theta, params, &rows, allow_switch, &mut out.q, &mut out.theta);
    out
}

/// Cumulative rows of the speaker transition matrix, precomputed once
/// per forward pass.
struct TransitionRows {
    cumulative: Vec<Vec<f64>>,
}

impl TransitionRows {
    fn new(params: &ModelParams) -> Self {
        let cumulative = params
            .transitions
            .iter()
            .map(|row| {
                let mut acc = 0.0;
                row.iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect()
            })
            .collect();
        TransitionRows { cumulative }
    }

    #[inline]
    fn sample<R: Rng>(&self, rng: &mut R, from: u16) -> u16 {
        let row = &self.cumulative[usize::from(from)];
        let u: f64 = rng.random();
        let mut label = row.len() - 1;
        for (m, &c) in row.iter().enumerate() {
            if u < c {
                label = m;
                break;
            }
        }
        label as u16
    }
}

#[allow(clippy::too_many_arguments)]
fn sample_transition_into<R: Rng>(
    rng: &mut R,
    prev_labels: &[u16],
    prev_thetas: &[Angle],
    params: &ModelParams,
    rows: &TransitionRows,
    allow_switch: bool,
    labels: &mut [u16],
    thetas: &mut [Angle],
) {
    for (out, &from) in labels.iter_mut().zip(prev_labels) {
        *out = if allow_switch { rows.sample(rng, from) } else { from };
    }
    for (out, prev) in thetas.iter_mut().zip(prev_thetas) {
        *out = Angle::wrap_finite(vm_sample_raw(rng, prev.radians(), params.sigma_move));
    }
}

/// Importance weight update: `w_r ∝ prev_w_r · exp(log_emis_r)`,
/// normalized in the log domain with max-subtraction. Also returns the
/// log of the normalizing sum for diagnostics. Fails when the posterior
/// mass vanishes for every particle.
pub fn update_weights(
    prev_weights: &[f64],
    frame_log_emissions: &[f64],
) -> Result<(Vec<f64>, f64), FilterError> {
    assert_eq!(prev_weights.len(), frame_log_emissions.len());
    let log_weights: Vec<f64> = prev_weights
        .iter()
        .zip(frame_log_emissions)
        .map(|(w, e)| w.ln() + e)
        .collect();
    normalize_log_weights(&log_weights).ok_or(FilterError::ZeroPosteriorMass { frame: 0 })
}

/// Normalizes log weights into a probability vector; returns `None` when
/// every entry is -inf or NaN. The second value is the log normalizer.
pub(crate) fn normalize_log_weights(log_weights: &[f64]) -> Option<(Vec<f64>, f64)> {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let mut weights: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
    Some((weights, max + total.ln()))
}

/// Effective sample size `1 / Σ_r w_r²` of a normalized weight vector.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    1.0 / sum_sq
}

/// Systematic resampling: one uniform offset `u ∈ [0, 1/R)` places an
/// evenly spaced grid over the cumulative weights; particle r is chosen
/// once for every grid point inside its interval. The returned ancestor
/// indices are ascending by construction.
pub fn systematic_resample<R: Rng>(rng: &mut R, weights: &[f64]) -> Vec<usize> {
    let r = weights.len();
    let step = 1.0 / r as f64;
    let offset: f64 = rng.random::<f64>() * step;
    let mut ancestors = Vec::with_capacity(r);
    let mut i = 0usize;
    let mut cumulative = weights[0];
    for k in 0..r {
        let u = offset + k as f64 * step;
        while u > cumulative && i + 1 < r {
            i += 1;
            cumulative += weights[i];
        }
        ancestors.push(i);
    }
    ancestors
}

/// Frames at which a word starts on any channel. The speaker-switch
/// restriction samples from the identity matrix everywhere else.
pub fn word_boundary_flags(words: &[WordSegment], num_frames: usize) -> Vec<bool> {
    let mut flags = vec![false; num_frames];
    for word in words {
        if word.start < num_frames {
            flags[word.start] = true;
        }
    }
    flags
}

/// Runs the full forward pass and retains every frame's ensemble (as
/// required by the backward smoother).
pub fn forward_pass(
    observations: &[ObservationFrame],
    words: &[WordSegment],
    params: &ModelParams,
    emis_cfg: &EmissionConfig,
    filt_cfg: &FilterConfig,
) -> Result<Vec<ParticleEnsemble>, FilterError> {
    let mut ensembles = Vec::with_capacity(observations.len());
    forward_pass_streaming(observations, words, params, emis_cfg, filt_cfg, |ensemble| {
        ensembles.push(ensemble);
        Ok(())
    })?;
    Ok(ensembles)
}

/// Streaming forward pass: each frame's ensemble is handed to `on_frame`
/// and not retained, so memory stays constant in the meeting length.
pub fn forward_pass_streaming<F>(
    observations: &[ObservationFrame],
    words: &[WordSegment],
    params: &ModelParams,
    emis_cfg: &EmissionConfig,
    filt_cfg: &FilterConfig,
    mut on_frame: F,
) -> Result<(), FilterError>
where
    F: FnMut(ParticleEnsemble) -> Result<(), FilterError>,
{
    filt_cfg.validate()?;
    params.ensure_valid()?;
    if observations.is_empty() {
        return Err(FilterError::EmptyObservations);
    }
    let num_frames = observations.len();
    for word in words {
        if word.end >= num_frames {
            return Err(FilterError::WordOutOfRange { word: word.id, end: word.end, frames: num_frames });
        }
    }

    let r = filt_cfg.num_particles;
    let n = params.num_channels;
    let m = params.num_speakers;
    let seed = filt_cfg.seed;
    let rows = TransitionRows::new(params);
    let boundaries = word_boundary_flags(words, num_frames);

    // Parent state for the next frame's prediction step.
    let mut parent_labels: Vec<u16> = vec![0; r * n];
    let mut parent_thetas: Vec<Angle> = vec![Angle::ZERO; r * m];
    let mut prev_weights: Vec<f64> = vec![1.0 / r as f64; r];

    let mut log_emissions: Vec<f64> = vec![0.0; r];

    for (t, obs) in observations.iter().enumerate() {
        let mut labels: Vec<u16> = vec![0; r * n];
        let mut thetas: Vec<Angle> = vec![Angle::ZERO; r * m];

        if t == 0 {
            labels
                .par_chunks_mut(n)
                .zip(thetas.par_chunks_mut(m))
                .enumerate()
                .for_each(|(idx, (lab, th))| {
                    let mut rng = stream(seed, StreamKind::Transition, 0, idx as u64);
                    sample_initial_into(&mut rng, params, lab, th);
                });
        } else {
            let allow_switch = !filt_cfg.restrict_switch_to_word_boundaries || boundaries[t];
            let (src_labels, src_thetas) = (&parent_labels, &parent_thetas);
            labels
                .par_chunks_mut(n)
                .zip(thetas.par_chunks_mut(m))
                .enumerate()
                .for_each(|(idx, (lab, th))| {
                    let mut rng = stream(seed, StreamKind::Transition, t as u64, idx as u64);
                    sample_transition_into(
                        &mut rng,
                        &src_labels[idx * n..(idx + 1) * n],
                        &src_thetas[idx * m..(idx + 1) * m],
                        params,
                        &rows,
                        allow_switch,
                        lab,
                        th,
                    );
                });
        }

        let table = FrameEmissions::prepare(obs, params, emis_cfg)?;
        log_emissions
            .par_iter_mut()
            .enumerate()
            .for_each(|(idx, e)| {
                *e = table.log_emission(&labels[idx * n..(idx + 1) * n], &thetas[idx * m..(idx + 1) * m]);
            });

        let log_weights: Vec<f64> = prev_weights
            .iter()
            .zip(&log_emissions)
            .map(|(w, e)| w.ln() + e)
            .collect();
        let (weights, _log_norm) =
            normalize_log_weights(&log_weights).ok_or(FilterError::ZeroPosteriorMass { frame: t })?;

        let ess = effective_sample_size(&weights);
        let resample = ess < filt_cfg.ess_threshold_fraction * r as f64;
        let ancestors: Option<Vec<u32>> = if resample {
            let mut rng = stream(seed, StreamKind::Resample, t as u64, 0);
            Some(systematic_resample(&mut rng, &weights).into_iter().map(|a| a as u32).collect())
        } else {
            None
        };

        if let Some(ancestors) = &ancestors {
            for (idx, &a) in ancestors.iter().enumerate() {
                let a = a as usize;
                parent_labels[idx * n..(idx + 1) * n].copy_from_slice(&labels[a * n..(a + 1) * n]);
                parent_thetas[idx * m..(idx + 1) * m].copy_from_slice(&thetas[a * m..(a + 1) * m]);
            }
            prev_weights.fill(1.0 / r as f64);
        } else {
            parent_labels.copy_from_slice(&labels);
            parent_thetas.copy_from_slice(&thetas);
            prev_weights.copy_from_slice(&weights);
        }

        on_frame(ParticleEnsemble {
            t,
            num_particles: r,
            num_channels: n,
            num_speakers: m,
            labels,
            thetas,
            log_weights,
            weights,
            resampled: resample,
            ancestors,
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emissions::LocationFeature;
    use crate::model::BinGeometry;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(m: usize, n: usize) -> ModelParams {
        let dim = 4;
        let mut centroids = vec![vec![0.0; dim]; m];
        for (i, mu) in centroids.iter_mut().enumerate() {
            mu[i % dim] = 1.0;
        }
        ModelParams {
            num_speakers: m,
            num_channels: n,
            centroids,
            transitions: vec![vec![1.0 / m as f64; m]; m],
            gamma: 3.0,
            sigma_move: 40.0,
            kappa: 5.0,
            bins: BinGeometry::new(18).unwrap(),
        }
    }

    #[test]
    fn sample_initial_single_speaker() {
        let p = params(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let particle = sample_initial(&mut rng, &p);
            assert!(particle.q.iter().all(|&q| q == 0));
        }
    }

    #[test]
    fn sample_initial_label_frequencies() {
        let p = params(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let particle = sample_initial(&mut rng, &p);
            counts[usize::from(particle.q[0])] += 1;
        }
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() < 0.01, "frequency {freq}");
        }
    }

    #[test]
    fn sample_initial_theta_uniform_ks() {
        let p = params(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut xs: Vec<f64> = (0..n).map(|_| sample_initial(&mut rng, &p).theta[0].radians()).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d: f64 = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let cdf = (x + PI) / TWO_PI;
            d = d.max((cdf - i as f64 / n as f64).abs());
            d = d.max((cdf - (i + 1) as f64 / n as f64).abs());
        }
        assert!(d < 1.628 / (n as f64).sqrt(), "KS {d}");
    }

    #[test]
    fn transition_identity_matrix_copies_labels() {
        let mut p = params(3, 2);
        p.transitions = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prev = sample_initial(&mut rng, &p);
        for _ in 0..50 {
            let next = sample_transition(&mut rng, &prev, &p, true);
            assert_eq!(next.q, prev.q);
        }
    }

    #[test]
    fn transition_restriction_copies_labels() {
        let p = params(3, 2); // uniform rows: switches would be frequent
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prev = sample_initial(&mut rng, &p);
        for _ in 0..50 {
            let next = sample_transition(&mut rng, &prev, &p, false);
            assert_eq!(next.q, prev.q);
        }
    }

    #[test]
    fn transition_high_concentration_stays_close() {
        let mut p = params(2, 1);
        p.sigma_move = 1e4;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prev = sample_initial(&mut rng, &p);
        let n = 100_000;
        let mut close = 0usize;
        for _ in 0..n {
            let next = sample_transition(&mut rng, &prev, &p, true);
            let d = (next.theta[0].radians() - prev.theta[0].radians()).rem_euclid(TWO_PI);
            let d = d.min(TWO_PI - d);
            if d < 0.05 {
                close += 1;
            }
        }
        assert!(close as f64 / n as f64 > 0.99);
    }

    #[test]
    fn update_weights_examples() {
        let prev = vec![0.4, 0.3, 0.2, 0.1];
        let (w, _) = update_weights(&prev, &[2.0; 4]).unwrap();
        for (a, b) in w.iter().zip(&prev) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        let (w, _) = update_weights(&vec![0.25; 4], &[0.0, 1000.0, 0.0, 0.0]).unwrap();
        assert!(w[1] >= 1.0 - 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let e: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 100.0 - 50.0).collect();
            let (w, _) = update_weights(&vec![0.125; 8], &e).unwrap();
            assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(w.iter().all(|&x| x >= 0.0));
        }

        assert!(matches!(
            update_weights(&[0.5, 0.5], &[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            Err(FilterError::ZeroPosteriorMass { .. })
        ));
    }

    #[test]
    fn ess_identities() {
        // R a power of two keeps the arithmetic exact.
        assert_eq!(effective_sample_size(&vec![1.0 / 8.0; 8]), 8.0);
        assert_eq!(effective_sample_size(&[0.0, 0.0, 1.0, 0.0]), 1.0);
        assert_eq!(effective_sample_size(&[0.5, 0.5, 0.0, 0.0]), 2.0);
        let ess = effective_sample_size(&vec![0.01; 100]);
        assert_abs_diff_eq!(ess, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn systematic_resample_degenerate_and_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = systematic_resample(&mut rng, &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(a, vec![3, 3, 3, 3]);

        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = systematic_resample(&mut rng, &[0.25; 4]);
            assert_eq!(a, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn systematic_resample_sorted_and_unbiased() {
        let mut setup = ChaCha8Rng::seed_from_u64(8);
        let raw: Vec<f64> = (0..8).map(|_| setup.random::<f64>() + 0.05).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.into_iter().map(|w| w / total).collect();

        let trials = 2000;
        let mut counts = vec![0f64; 8];
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let ancestors = systematic_resample(&mut rng, &weights);
            assert!(ancestors.windows(2).all(|w| w[0] <= w[1]), "not sorted");
            for &a in &ancestors {
                counts[a] += 1.0;
            }
        }
        for (r, &w) in weights.iter().enumerate() {
            let mean = counts[r] / trials as f64;
            let expect = 8.0 * w;
            // systematic counts vary by at most 1 around R·w
            let se = 0.5 / (trials as f64).sqrt();
            assert!(
                (mean - expect).abs() <= 3.0 * se + 1e-9,
                "particle {r}: mean {mean} vs {expect}"
            );
        }
    }

    fn tiny_meeting(p: &ModelParams, t_len: usize) -> Vec<ObservationFrame> {
        // deterministic toy observations: speaker 0's centroid with noise-free frames
        let mut frames = Vec::new();
        for t in 0..t_len {
            let mut frame = ObservationFrame::silent(p.num_channels);
            if t % 3 != 2 {
                let dvec = p.centroids[t % p.num_speakers].clone();
                frame.channels[0] = Some(
                    crate::model::ChannelObservation::new(dvec, None, Some(Angle::ZERO)).unwrap(),
                );
            }
            frames.push(frame);
        }
        frames
    }

    #[test]
    fn forward_pass_deterministic_and_normalized() {
        let p = params(3, 2);
        let cfg = FilterConfig { num_particles: 500, seed: 9, ..Default::default() };
        let emis = EmissionConfig::new(LocationFeature::Doa, &p);
        let obs = tiny_meeting(&p, 12);
        let a = forward_pass(&obs, &[], &p, &emis, &cfg).unwrap();
        let b = forward_pass(&obs, &[], &p, &emis, &cfg).unwrap();
        assert_eq!(a, b);
        for ens in &a {
            let sum: f64 = ens.weights().iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
            assert!(ens.weights().iter().all(|&w| w >= 0.0));
        }
        // a different seed changes the ensembles
        let cfg2 = FilterConfig { seed: 10, ..cfg };
        let c = forward_pass(&obs, &[], &p, &emis, &cfg2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn forward_pass_single_speaker_posterior() {
        let p = params(1, 1);
        let cfg = FilterConfig { num_particles: 64, seed: 1, ..Default::default() };
        let emis = EmissionConfig::new(LocationFeature::None, &p);
        let obs = tiny_meeting(&p, 6);
        let ensembles = forward_pass(&obs, &[], &p, &emis, &cfg).unwrap();
        for ens in &ensembles {
            let post = crate::decode::frame_speaker_posterior(ens, 0);
            assert_eq!(post.probs.len(), 1);
            assert_abs_diff_eq!(post.probs[0], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_pass_threshold_extremes() {
        let p = params(2, 1);
        let emis = EmissionConfig::new(LocationFeature::Doa, &p);
        let obs = tiny_meeting(&p, 10);

        let never = FilterConfig {
            num_particles: 300,
            ess_threshold_fraction: 0.0,
            seed: 11,
            ..Default::default()
        };
        let ens = forward_pass(&obs, &[], &p, &emis, &never).unwrap();
        assert!(ens.iter().all(|e| !e.resampled));

        let always = FilterConfig { ess_threshold_fraction: 1.0, ..never };
        let ens = forward_pass(&obs, &[], &p, &emis, &always).unwrap();
        // every frame with non-uniform weights resamples (ESS < R); a
        // silent frame after a resample keeps exactly uniform weights,
        // where ESS = R does not fall below the threshold
        for e in &ens {
            let uniform = e.weights().iter().all(|&w| (w - 1.0 / 300.0).abs() < 1e-15);
            assert_eq!(e.resampled, !uniform, "frame {}", e.t);
            assert_eq!(e.ancestors().is_some(), e.resampled);
        }
        assert!(ens.iter().filter(|e| e.resampled).count() >= 6);
    }

    #[test]
    fn forward_pass_word_boundary_restriction() {
        let p = params(3, 1);
        let obs = tiny_meeting(&p, 15);
        let words = vec![
            WordSegment::new(0, 0, 4, 7).unwrap(),
            WordSegment::new(1, 0, 9, 12).unwrap(),
        ];
        let cfg = FilterConfig {
            num_particles: 80,
            restrict_switch_to_word_boundaries: true,
            ess_threshold_fraction: 0.5,
            seed: 12,
            ..Default::default()
        };
        let emis = EmissionConfig::new(LocationFeature::None, &p);
        let ensembles = forward_pass(&obs, &words, &p, &emis, &cfg).unwrap();
        let boundaries = word_boundary_flags(&words, 15);
        for t in 1..ensembles.len() {
            if boundaries[t] {
                continue;
            }
            let prev = &ensembles[t - 1];
            let cur = &ensembles[t];
            for r in 0..cur.num_particles() {
                let parent = match prev.ancestors() {
                    Some(a) => a[r] as usize,
                    None => r,
                };
                assert_eq!(
                    cur.labels_of(r),
                    prev.labels_of(parent),
                    "label changed off-boundary at frame {t}"
                );
            }
        }
    }

    #[test]
    fn forward_pass_rejects_bad_inputs() {
        let p = params(2, 1);
        let emis = EmissionConfig::new(LocationFeature::None, &p);
        let obs = tiny_meeting(&p, 4);
        let bad_cfg = FilterConfig { num_particles: 0, ..Default::default() };
        assert!(matches!(
            forward_pass(&obs, &[], &p, &emis, &bad_cfg),
            Err(FilterError::InvalidConfig(_))
        ));
        let cfg = FilterConfig { num_particles: 10, ..Default::default() };
        assert!(matches!(
            forward_pass(&[], &[], &p, &emis, &cfg),
            Err(FilterError::EmptyObservations)
        ));
        let far_word = vec![WordSegment::new(0, 0, 2, 99).unwrap()];
        assert!(matches!(
            forward_pass(&obs, &far_word, &p, &emis, &cfg),
            Err(FilterError::WordOutOfRange { .. })
        ));
    }

    #[test]
    fn streaming_matches_collected() {
        let p = params(2, 2);
        let cfg = FilterConfig { num_particles: 200, seed: 13, ..Default::default() };
        let emis = EmissionConfig::new(LocationFeature::Doa, &p);
        let obs = tiny_meeting(&p, 8);
        let collected = forward_pass(&obs, &[], &p, &emis, &cfg).unwrap();
        let mut streamed = Vec::new();
        forward_pass_streaming(&obs, &[], &p, &emis, &cfg, |e| {
            streamed.push(e);
            Ok(())
        })
        .unwrap();
        assert_eq!(collected, streamed);
    }
}

//! Forward Filtering-Backward Smoothing over stored ensembles, with
//! uniform particle sub-sampling.
//!
//! The backward recursion is the exact O(k²·T) computation. Per frame
//! pair the k×k transition matrix is materialized once (in a reused
//! buffer) and consumed twice: row-wise for the per-target denominators
//! and again for the backward-weight accumulation. Transition values are
//! kept in the linear domain, scaled by exp(−ς·M) so they cannot
//! overflow; the scale cancels between numerator and denominator.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::filter::{word_boundary_flags, FilterConfig, ParticleEnsemble};
use crate::model::{ModelParams, WordSegment};
use crate::rng::{stream, StreamKind};

#[derive(Debug, Error)]
pub enum SmootherError {
    #[error("cannot sub-sample {requested} particles from an ensemble of {available}")]
    SubsampleTooLarge { requested: usize, available: usize },
    #[error("sub-sample size must be positive")]
    EmptySubsample,
    #[error("frame {frame}: sub-sampled particles carry no forward weight")]
    DegenerateSubsample { frame: usize },
    #[error("frame {frame}: every backward transition sum vanished (particle impoverishment)")]
    Impoverished { frame: usize },
    #[error("no ensembles supplied")]
    EmptyInput,
    #[error(transparent)]
    InvalidParams(#[from] crate::model::ModelError),
}

/// Backward-smoothed weights for one frame, referring to particles of
/// the stored forward ensemble by index.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedEnsemble {
    pub t: usize,
    indices: Vec<u32>,
    backward_weights: Vec<f64>,
}

impl SmoothedEnsemble {
    /// Indices into the forward ensemble of frame `t`.
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.backward_weights
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws `k` particle indices uniformly without replacement, ascending.
fn subsample_indices<R: Rng>(rng: &mut R, total: usize, k: usize) -> Vec<u32> {
    // partial Fisher-Yates over the index range
    let mut pool: Vec<u32> = (0..total as u32).collect();
    for i in 0..k {
        let j = rng.random_range(i..total);
        pool.swap(i, j);
    }
    let mut chosen = pool[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Uniformly sub-samples `k` particles without replacement and
/// renormalizes their forward weights.
pub fn subsample<R: Rng>(
    ensemble: &ParticleEnsemble,
    k: usize,
    rng: &mut R,
) -> Result<ParticleEnsemble, SmootherError> {
    let total = ensemble.num_particles();
    if k == 0 {
        return Err(SmootherError::EmptySubsample);
    }
    if k > total {
        return Err(SmootherError::SubsampleTooLarge { requested: k, available: total });
    }
    let chosen = subsample_indices(rng, total, k);
    let n = ensemble.num_channels();
    let m = ensemble.num_speakers();
    let mut labels = Vec::with_capacity(k * n);
    let mut thetas = Vec::with_capacity(k * m);
    let mut weight_sum = 0.0;
    for &idx in &chosen {
        let idx = idx as usize;
        labels.extend_from_slice(ensemble.labels_of(idx));
        thetas.extend_from_slice(ensemble.thetas_of(idx));
        weight_sum += ensemble.weights()[idx];
    }
    if weight_sum <= 0.0 {
        return Err(SmootherError::DegenerateSubsample { frame: ensemble.t });
    }
    // keep the stored log weights consistent with the renormalized weights
    let log_weights: Vec<f64> = chosen
        .iter()
        .map(|&idx| (ensemble.weights()[idx as usize] / weight_sum).ln())
        .collect();
    ParticleEnsemble::from_parts(ensemble.t, n, m, labels, thetas, log_weights, false, None)
        .map_err(|_| SmootherError::DegenerateSubsample { frame: ensemble.t })
}

/// One frame's particle views needed by the backward recursion.
struct FrameSlice {
    indices: Vec<u32>,
    labels: Vec<u16>,
    cos_thetas: Vec<f64>,
    sin_thetas: Vec<f64>,
    forward_weights: Vec<f64>,
}

impl FrameSlice {
    fn gather(ensemble: &ParticleEnsemble, indices: Vec<u32>, frame: usize) -> Result<Self, SmootherError> {
        let n = ensemble.num_channels();
        let m = ensemble.num_speakers();
        let k = indices.len();
        let mut labels = Vec::with_capacity(k * n);
        let mut cos_thetas = Vec::with_capacity(k * m);
        let mut sin_thetas = Vec::with_capacity(k * m);
        let mut weights = Vec::with_capacity(k);
        let mut sum = 0.0;
        for &idx in &indices {
            let idx = idx as usize;
            labels.extend_from_slice(ensemble.labels_of(idx));
            for theta in ensemble.thetas_of(idx) {
                cos_thetas.push(theta.radians().cos());
                sin_thetas.push(theta.radians().sin());
            }
            let w = ensemble.weights()[idx];
            weights.push(w);
            sum += w;
        }
        if sum <= 0.0 {
            return Err(SmootherError::DegenerateSubsample { frame });
        }
        // renormalize only true subsets: the full set already sums to one,
        // and dividing would break the exact base case ω̇_T = ω_T
        if indices.len() < ensemble.num_particles() {
            for w in weights.iter_mut() {
                *w /= sum;
            }
        }
        Ok(FrameSlice { indices, labels, cos_thetas, sin_thetas, forward_weights: weights })
    }
}

/// Runs the backward pass over retained forward ensembles, sub-sampling
/// `k_backward` particles per frame. Returns one smoothed ensemble per
/// frame; at the final frame the backward weights equal the forward
/// weights.
///
/// The transition density is the factorised product of the speaker
/// matrix over channels and the von Mises location step over speakers.
/// When the word-boundary restriction is active the same restricted
/// (identity off-boundary) speaker transitions are used.
pub fn backward_pass(
    ensembles: &[ParticleEnsemble],
    words: &[WordSegment],
    params: &ModelParams,
    filt_cfg: &FilterConfig,
    k_backward: usize,
) -> Result<Vec<SmoothedEnsemble>, SmootherError> {
    params.ensure_valid()?;
    if ensembles.is_empty() {
        return Err(SmootherError::EmptyInput);
    }
    let total = ensembles[0].num_particles();
    if k_backward == 0 {
        return Err(SmootherError::EmptySubsample);
    }
    if k_backward > total {
        return Err(SmootherError::SubsampleTooLarge { requested: k_backward, available: total });
    }

    let num_frames = ensembles.len();
    let n = params.num_channels;
    let m = params.num_speakers;
    let boundaries = word_boundary_flags(words, num_frames);

    // Per-frame uniform sub-sample (the whole ensemble when k = R).
    let slices: Vec<FrameSlice> = ensembles
        .iter()
        .enumerate()
        .map(|(t, ensemble)| {
            let indices = if k_backward == total {
                (0..total as u32).collect()
            } else {
                let mut rng = stream(filt_cfg.seed, StreamKind::Subsample, t as u64, 0);
                subsample_indices(&mut rng, total, k_backward)
            };
            FrameSlice::gather(ensemble, indices, t)
        })
        .collect::<Result<_, _>>()?;

    let k = k_backward;
    let sigma = params.sigma_move;
    // exp(loc - sigma*m) <= 1 keeps the matrix finite for any ς.
    let scale = sigma * m as f64;

    let mut smoothed: Vec<SmoothedEnsemble> = Vec::with_capacity(num_frames);
    smoothed.push(SmoothedEnsemble {
        t: num_frames - 1,
        indices: slices[num_frames - 1].indices.clone(),
        backward_weights: slices[num_frames - 1].forward_weights.clone(),
    });

    let mut transition = vec![0.0f64; k * k];
    let mut backward = slices[num_frames - 1].forward_weights.clone();

    for t in (0..num_frames - 1).rev() {
        let cur = &slices[t];
        let next = &slices[t + 1];
        let switching = !filt_cfg.restrict_switch_to_word_boundaries || boundaries[t + 1];

        // transition[i*k + j] = p(z_{t+1}^(i) | z_t^(j)) / e^{ς·M}
        transition
            .par_chunks_mut(k)
            .enumerate()
            .for_each(|(i, row)| {
                let next_labels = &next.labels[i * n..(i + 1) * n];
                let next_cos = &next.cos_thetas[i * m..(i + 1) * m];
                let next_sin = &next.sin_thetas[i * m..(i + 1) * m];
                for (j, out) in row.iter_mut().enumerate() {
                    let cur_labels = &cur.labels[j * n..(j + 1) * n];
                    let mut label_factor = 1.0;
                    if switching {
                        for c in 0..n {
                            label_factor *= params.transitions[usize::from(cur_labels[c])]
                                [usize::from(next_labels[c])];
                        }
                    } else if cur_labels != next_labels {
                        label_factor = 0.0;
                    }
                    if label_factor == 0.0 {
                        *out = 0.0;
                        continue;
                    }
                    let mut loc = 0.0;
                    let cur_cos = &cur.cos_thetas[j * m..(j + 1) * m];
                    let cur_sin = &cur.sin_thetas[j * m..(j + 1) * m];
                    for s in 0..m {
                        // cos(θ' − θ) from the cached sin/cos pairs
                        loc += next_cos[s] * cur_cos[s] + next_sin[s] * cur_sin[s];
                    }
                    *out = label_factor * (sigma * loc - scale).exp();
                }
            });

        // denominators: den_i = Σ_j ω_j · transition[i][j]
        let denominators: Vec<f64> = transition
            .par_chunks(k)
            .map(|row| row.iter().zip(&cur.forward_weights).map(|(p, w)| p * w).sum())
            .collect();

        // accumulation: new_r = ω_r Σ_i backward_i · transition[i][r] / den_i,
        // run in fixed i-order so the result is schedule-independent.
        let mut accum = vec![0.0f64; k];
        for i in 0..k {
            let den = denominators[i];
            if den <= 0.0 {
                continue; // this target is unreachable from the sub-sample
            }
            let coef = backward[i] / den;
            if coef == 0.0 {
                continue;
            }
            let row = &transition[i * k..(i + 1) * k];
            for (a, p) in accum.iter_mut().zip(row) {
                *a += coef * p;
            }
        }
        let mut total_mass = 0.0;
        for (a, w) in accum.iter_mut().zip(&cur.forward_weights) {
            *a *= w;
            total_mass += *a;
        }
        if !(total_mass > 0.0) || !total_mass.is_finite() {
            return Err(SmootherError::Impoverished { frame: t });
        }
        for a in accum.iter_mut() {
            *a /= total_mass;
        }
        backward = accum;
        smoothed.push(SmoothedEnsemble {
            t,
            indices: cur.indices.clone(),
            backward_weights: backward.clone(),
        });
    }

    smoothed.reverse();
    Ok(smoothed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circstats::{vm_logpdf, Angle};
    use crate::emissions::{EmissionConfig, LocationFeature};
    use crate::filter::forward_pass;
    use crate::model::{BinGeometry, ChannelObservation, ObservationFrame};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::time::Instant;

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
            sigma_move: 20.0,
            kappa: 4.0,
            bins: BinGeometry::new(18).unwrap(),
        }
    }

    fn toy_observations(p: &ModelParams, t_len: usize) -> Vec<ObservationFrame> {
        let mut frames = Vec::new();
        for t in 0..t_len {
            let mut frame = ObservationFrame::silent(p.num_channels);
            if t % 4 != 3 {
                frame.channels[0] = Some(
                    ChannelObservation::new(
                        p.centroids[t % p.num_speakers].clone(),
                        None,
                        Some(Angle::new(1.0).unwrap()),
                    )
                    .unwrap(),
                );
            }
            frames.push(frame);
        }
        frames
    }

    #[test]
    fn subsample_full_and_single() {
        let p = params(2, 1);
        let cfg = FilterConfig { num_particles: 50, seed: 3, ..Default::default() };
        let emis = EmissionConfig::new(LocationFeature::Doa, &p);
        let ens = forward_pass(&toy_observations(&p, 5), &[], &p, &emis, &cfg).unwrap();
        let last = &ens[4];

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = subsample(last, 50, &mut rng).unwrap();
        assert_eq!(full.num_particles(), 50);
        for r in 0..50 {
            assert_eq!(full.labels_of(r), last.labels_of(r));
            assert_abs_diff_eq!(full.weights()[r], last.weights()[r], epsilon = 1e-12);
        }

        let one = subsample(last, 1, &mut rng).unwrap();
        assert_eq!(one.num_particles(), 1);
        assert_abs_diff_eq!(one.weights()[0], 1.0, epsilon = 1e-12);

        assert!(matches!(
            subsample(last, 51, &mut rng),
            Err(SmootherError::SubsampleTooLarge { .. })
        ));
        assert!(matches!(subsample(last, 0, &mut rng), Err(SmootherError::EmptySubsample)));
    }

    #[test]
    fn subsample_preserves_expectations() {
        // moderately non-uniform weights; the renormalized-subset
        // estimator is consistent, with O(1/k) ratio bias well below the
        // Monte Carlo resolution at this size
        let r = 300;
        let k = 150;
        let labels: Vec<u16> = (0..r).map(|i| (i % 2) as u16).collect();
        let thetas: Vec<Angle> = (0..2 * r)
            .map(|i| Angle::new((i as f64 * 0.37).sin() * 2.5).unwrap())
            .collect();
        let log_weights: Vec<f64> = (0..r).map(|i| (1.0 + 0.9 * (7.0 * i as f64).sin()).ln()).collect();
        let target = ParticleEnsemble::from_parts(0, 1, 2, labels, thetas, log_weights, false, None)
            .unwrap();
        // test function: weighted mean of cos θ₀
        let eval = |ens: &ParticleEnsemble| -> f64 {
            (0..ens.num_particles())
                .map(|i| ens.weights()[i] * ens.thetas_of(i)[0].radians().cos())
                .sum()
        };
        let full = eval(&target);

        let trials = 1000;
        let mut estimates = Vec::with_capacity(trials);
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
            let sub = subsample(&target, k, &mut rng).unwrap();
            estimates.push(eval(&sub));
        }
        let mean = estimates.iter().sum::<f64>() / trials as f64;
        let var = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / trials as f64;
        let se = (var / trials as f64).sqrt();
        assert!(
            (mean - full).abs() <= 3.0 * se + 1e-9,
            "subsample mean {mean} vs full {full} (se {se})"
        );
    }

    #[test]
    fn backward_base_case_and_single_frame() {
        let p = params(2, 1);
        let cfg = FilterConfig { num_particles: 120, seed: 7, ..Default::default() };
        let emis = EmissionConfig::new(LocationFeature::Doa, &p);

        let single = forward_pass(&toy_observations(&p, 1), &[], &p, &emis, &cfg).unwrap();
        let sm = backward_pass(&single, &[], &p, &cfg, 120).unwrap();
        assert_eq!(sm.len(), 1);
        assert_eq!(sm[0].weights(), single[0].weights());

        let ens = forward_pass(&toy_observations(&p, 7), &[], &p, &emis, &cfg).unwrap();
        let sm = backward_pass(&ens, &[], &p, &cfg, 120).unwrap();
        // base case is exact
        assert_eq!(sm[6].weights(), ens[6].weights());
        for frame in &sm {
            let sum: f64 = frame.weights().iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn backward_matches_direct_recursion_on_tiny_case() {
        // Independent probability-domain evaluation of the backward
        // recursion with the full transition density.
        let p = params(2, 1);
        let cfg = FilterConfig {
            num_particles: 6,
            ess_threshold_fraction: 0.0, // keep forward weights non-uniform
            seed: 9,
            ..Default::default()
        };
        let emis = EmissionConfig::new(LocationFeature::Doa, &p);
        let ens = forward_pass(&toy_observations(&p, 4), &[], &p, &emis, &cfg).unwrap();
        let sm = backward_pass(&ens, &[], &p, &cfg, 6).unwrap();

        let trans_density = |from: &ParticleEnsemble, j: usize, to: &ParticleEnsemble, i: usize| {
            let mut value = 1.0;
            for c in 0..1 {
                value *= p.transitions[usize::from(from.labels_of(j)[c])]
                    [usize::from(to.labels_of(i)[c])];
            }
            for s in 0..2 {
                value *= vm_logpdf(to.thetas_of(i)[s], from.thetas_of(j)[s], p.sigma_move)
                    .unwrap()
                    .exp();
            }
            value
        };

        let t_len = 4;
        let k = 6;
        let mut expected: Vec<Vec<f64>> = vec![vec![0.0; k]; t_len];
        expected[t_len - 1] = ens[t_len - 1].weights().to_vec();
        for t in (0..t_len - 1).rev() {
            let w = ens[t].weights();
            for r in 0..k {
                let mut sum = 0.0;
                for i in 0..k {
                    let num = trans_density(&ens[t], r, &ens[t + 1], i);
                    let den: f64 =
                        (0..k).map(|j| w[j] * trans_density(&ens[t], j, &ens[t + 1], i)).sum();
                    if den > 0.0 {
                        sum += expected[t + 1][i] * num / den;
                    }
                }
                expected[t][r] = w[r] * sum;
            }
            let total: f64 = expected[t].iter().sum();
            for v in expected[t].iter_mut() {
                *v /= total;
            }
        }

        for t in 0..t_len {
            for r in 0..k {
                assert_abs_diff_eq!(sm[t].weights()[r], expected[t][r], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn identity_transitions_freeze_label_posterior() {
        // with an identity speaker matrix and one channel, a particle's
        // label never changes along its path, so the smoothed speaker
        // posterior is the same at every frame
        let mut p = params(2, 1);
        p.transitions = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let cfg = FilterConfig {
            num_particles: 300,
            ess_threshold_fraction: 0.0,
            seed: 11,
            ..Default::default()
        };
        let emis = EmissionConfig::new(LocationFeature::Doa, &p);
        let ens = forward_pass(&toy_observations(&p, 6), &[], &p, &emis, &cfg).unwrap();
        let sm = backward_pass(&ens, &[], &p, &cfg, 300).unwrap();
        let posterior = |t: usize| {
            let mut mass = [0.0f64; 2];
            for (pos, &idx) in sm[t].indices().iter().enumerate() {
                mass[usize::from(ens[t].labels_of(idx as usize)[0])] += sm[t].weights()[pos];
            }
            mass
        };
        let first = posterior(0);
        for t in 1..6 {
            let here = posterior(t);
            assert_abs_diff_eq!(first[0], here[0], epsilon = 1e-9);
            assert_abs_diff_eq!(first[1], here[1], epsilon = 1e-9);
        }
    }

    #[test]
    fn smoothed_equals_filtered_at_last_frame() {
        let p = params(3, 2);
        let cfg = FilterConfig { num_particles: 200, seed: 13, ..Default::default() };
        let emis = EmissionConfig::new(LocationFeature::Doa, &p);
        let ens = forward_pass(&toy_observations(&p, 9), &[], &p, &emis, &cfg).unwrap();
        let sm = backward_pass(&ens, &[], &p, &cfg, 200).unwrap();
        let filtered = crate::decode::frame_speaker_posterior(&ens[8], 0);
        let smoothed = crate::decode::frame_speaker_posterior_smoothed(&ens[8], &sm[8], 0);
        for (a, b) in filtered.probs.iter().zip(&smoothed.probs) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_cost_scales_quadratically() {
        // doubling k must quadruple the per-frame cost (within 30%)
        let p = params(2, 1);
        let cfg = FilterConfig { num_particles: 2400, seed: 17, ..Default::default() };
        let emis = EmissionConfig::new(LocationFeature::Doa, &p);
        let obs = toy_observations(&p, 9);
        let ens = forward_pass(&obs, &[], &p, &emis, &cfg).unwrap();

        let time_k = |k: usize| {
            let mut best = f64::INFINITY;
            for _ in 0..3 {
                let start = Instant::now();
                let sm = backward_pass(&ens, &[], &p, &cfg, k).unwrap();
                assert_eq!(sm.len(), 9);
                best = best.min(start.elapsed().as_secs_f64());
            }
            best
        };
        // warm up allocators and caches
        let _ = time_k(600);
        let t1 = time_k(1200);
        let t2 = time_k(2400);
        let ratio = t2 / t1;
        assert!(
            (4.0 / 1.3..=4.0 * 1.3).contains(&ratio),
            "cost ratio {ratio} not within 30% of 4 (t1={t1}, t2={t2})"
        );
    }
}

//! Exact forward-backward inference on a discretized joint state space.
//!
//! The joint state is (active speaker per channel, location bin per
//! speaker). Location transitions use a von Mises kernel between bin
//! centers renormalized over bins, so the discretized model is a proper
//! Markov chain and the forward-backward recursion is exact on it.
//! Emissions reuse the particle filter's proportional forms, so both
//! routes score identical quantities, up to the location discretization
//! absorbed by the comparison tolerance.

use crate::circstats::Angle;
use crate::emissions::{EmissionConfig, FrameEmissions};
use crate::filter::word_boundary_flags;
use crate::model::{BinGeometry, ModelParams, ObservationFrame, WordSegment};

use super::SimError;

const STATE_GUARD: u128 = 100_000;

/// Exact filtered and smoothed per-channel speaker marginals, both
/// indexed `[t][channel][speaker]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePosteriors {
    pub filtered: Vec<Vec<Vec<f64>>>,
    pub smoothed: Vec<Vec<Vec<f64>>>,
}

// mixed-radix joint index: channels vary fastest over speakers, then one
// location-bin digit per speaker
struct StateSpace {
    num_channels: usize,
    num_speakers: usize,
    grid: usize,
    labels: Vec<u16>,   // states × channels
    thetas: Vec<Angle>, // states × speakers (bin centers)
    total: usize,
}

impl StateSpace {
    fn build(m: usize, n: usize, grid: usize, centers: &BinGeometry) -> Self {
        let total = m.pow(n as u32) * grid.pow(m as u32);
        let mut labels = Vec::with_capacity(total * n);
        let mut thetas = Vec::with_capacity(total * m);
        for state in 0..total {
            let mut rest = state;
            for _ in 0..n {
                labels.push((rest % m) as u16);
                rest /= m;
            }
            for _ in 0..m {
                thetas.push(centers.center(rest % grid));
                rest /= grid;
            }
        }
        StateSpace { num_channels: n, num_speakers: m, grid, labels, thetas, total }
    }

    fn labels_of(&self, state: usize) -> &[u16] {
        &self.labels[state * self.num_channels..(state + 1) * self.num_channels]
    }

    fn thetas_of(&self, state: usize) -> &[Angle] {
        &self.thetas[state * self.num_speakers..(state + 1) * self.num_speakers]
    }

    /// Stride of the given digit in the mixed-radix index.
    fn label_stride(&self, channel: usize) -> usize {
        self.num_speakers.pow(channel as u32)
    }

    fn bin_stride(&self, speaker: usize) -> usize {
        self.num_speakers.pow(self.num_channels as u32) * self.grid.pow(speaker as u32)
    }
}

// applies `dst[.. j ..] = Σ_i src[.. i ..] · kernel[i][j]` along one
// mixed-radix digit with the given stride and radix
fn apply_kernel_along(
    src: &[f64],
    dst: &mut [f64],
    kernel: &[Vec<f64>],
    stride: usize,
    radix: usize,
) {
    dst.fill(0.0);
    let total = src.len();
    let block = stride * radix;
    for base in (0..total).step_by(block) {
        for offset in 0..stride {
            let start = base + offset;
            for i in 0..radix {
                let v = src[start + i * stride];
                if v == 0.0 {
                    continue;
                }
                let row = &kernel[i];
                for (j, &k) in row.iter().enumerate() {
                    dst[start + j * stride] += v * k;
                }
            }
        }
    }
}

// transposed orientation: dst[.. i ..] = Σ_j src[.. j ..] · kernel[i][j]
fn apply_kernel_along_transposed(
    src: &[f64],
    dst: &mut [f64],
    kernel: &[Vec<f64>],
    stride: usize,
    radix: usize,
) {
    dst.fill(0.0);
    let total = src.len();
    let block = stride * radix;
    for base in (0..total).step_by(block) {
        for offset in 0..stride {
            let start = base + offset;
            for i in 0..radix {
                let row = &kernel[i];
                let mut acc = 0.0;
                for (j, &k) in row.iter().enumerate() {
                    acc += src[start + j * stride] * k;
                }
                dst[start + i * stride] = acc;
            }
        }
    }
}

fn normalize(v: &mut [f64]) {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        for x in v.iter_mut() {
            *x /= total;
        }
    }
}

/// Exact filtered and smoothed speaker posteriors on the discretized
/// model, for validating the particle approximations. The joint space
/// must satisfy `M^N · G^M <= 1e5`; one channel is the intended use.
pub fn grid_hmm_posterior(
    observations: &[ObservationFrame],
    words: &[WordSegment],
    params: &ModelParams,
    cfg: &EmissionConfig,
    grid: usize,
    restrict_switch_to_word_boundaries: bool,
) -> Result<OraclePosteriors, SimError> {
    params.ensure_valid()?;
    let m = params.num_speakers;
    let n = params.num_channels;
    let states: u128 = (m as u128).pow(n as u32) * (grid as u128).pow(m as u32);
    if states > STATE_GUARD || grid == 0 {
        return Err(SimError::StateSpaceTooLarge { states, max: STATE_GUARD });
    }
    let t_len = observations.len();
    let centers = BinGeometry::new(grid)?;
    let space = StateSpace::build(m, n, grid, &centers);

    // location kernel between bin centers, renormalized over target bins
    let location_kernel: Vec<Vec<f64>> = (0..grid)
        .map(|from| {
            let mut row: Vec<f64> = (0..grid)
                .map(|to| {
                    let delta = centers.center(to).radians() - centers.center(from).radians();
                    (params.sigma_move * (delta.cos() - 1.0)).exp()
                })
                .collect();
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= total);
            row
        })
        .collect();

    let boundaries = word_boundary_flags(words, t_len);

    // per-frame emission weights, shifted so the largest is 1
    let mut emission_weights: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    for obs in observations {
        let table = FrameEmissions::prepare(obs, params, cfg)?;
        let mut logs: Vec<f64> = (0..space.total)
            .map(|s| table.log_emission(space.labels_of(s), space.thetas_of(s)))
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        logs.iter_mut().for_each(|l| *l = (*l - max).exp());
        emission_weights.push(logs);
    }

    let apply_transition = |src: &[f64], dst: &mut [f64], scratch: &mut Vec<f64>, t_next: usize| {
        // speaker digits
        scratch.clear();
        scratch.extend_from_slice(src);
        let switching = !restrict_switch_to_word_boundaries || boundaries[t_next];
        let mut buf = vec![0.0; src.len()];
        if switching {
            for channel in 0..n {
                apply_kernel_along(
                    scratch,
                    &mut buf,
                    &params.transitions,
                    space.label_stride(channel),
                    m,
                );
                std::mem::swap(scratch, &mut buf);
            }
        }
        for speaker in 0..m {
            apply_kernel_along(scratch, &mut buf, &location_kernel, space.bin_stride(speaker), grid);
            std::mem::swap(scratch, &mut buf);
        }
        dst.copy_from_slice(scratch);
    };

    // forward pass
    let mut alphas: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    let mut scratch = Vec::new();
    let mut predicted = vec![0.0; space.total];
    for t in 0..t_len {
        let mut alpha = if t == 0 {
            vec![1.0 / space.total as f64; space.total]
        } else {
            apply_transition(&alphas[t - 1], &mut predicted, &mut scratch, t);
            predicted.clone()
        };
        for (a, w) in alpha.iter_mut().zip(&emission_weights[t]) {
            *a *= w;
        }
        normalize(&mut alpha);
        alphas.push(alpha);
    }

    // backward pass
    let mut betas: Vec<Vec<f64>> = vec![Vec::new(); t_len];
    betas[t_len - 1] = vec![1.0; space.total];
    for t in (0..t_len.saturating_sub(1)).rev() {
        let mut weighted: Vec<f64> = betas[t + 1]
            .iter()
            .zip(&emission_weights[t + 1])
            .map(|(b, w)| b * w)
            .collect();
        normalize(&mut weighted);
        let mut beta = vec![0.0; space.total];
        // transposed transition: sum over next states
        let switching = !restrict_switch_to_word_boundaries || boundaries[t + 1];
        scratch.clear();
        scratch.extend_from_slice(&weighted);
        let mut buf = vec![0.0; space.total];
        if switching {
            for channel in 0..n {
                apply_kernel_along_transposed(
                    &scratch,
                    &mut buf,
                    &params.transitions,
                    space.label_stride(channel),
                    m,
                );
                std::mem::swap(&mut scratch, &mut buf);
            }
        }
        for speaker in 0..m {
            apply_kernel_along_transposed(
                &scratch,
                &mut buf,
                &location_kernel,
                space.bin_stride(speaker),
                grid,
            );
            std::mem::swap(&mut scratch, &mut buf);
        }
        beta.copy_from_slice(&scratch);
        normalize(&mut beta);
        betas[t] = beta;
    }

    // per-channel speaker marginals
    let marginal = |dist: &[f64]| -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; m]; n];
        for (state, &p) in dist.iter().enumerate() {
            for (channel, &label) in space.labels_of(state).iter().enumerate() {
                out[channel][usize::from(label)] += p;
            }
        }
        out
    };

    let mut filtered = Vec::with_capacity(t_len);
    let mut smoothed = Vec::with_capacity(t_len);
    for t in 0..t_len {
        filtered.push(marginal(&alphas[t]));
        let mut joint: Vec<f64> =
            alphas[t].iter().zip(&betas[t]).map(|(a, b)| a * b).collect();
        normalize(&mut joint);
        smoothed.push(marginal(&joint));
    }
    Ok(OraclePosteriors { filtered, smoothed })
}

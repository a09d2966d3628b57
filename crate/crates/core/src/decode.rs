//! Decoding: per-frame speaker posteriors (locations marginalize out by
//! summing particle weights per label), word-level aggregation of those
//! posteriors and per-speaker location traces.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circstats::{circ_mean_resultant, Angle};
use crate::filter::ParticleEnsemble;
use crate::model::WordSegment;
use crate::smoother::SmoothedEnsemble;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("word {word} spans frames {start}..={end} but only {frames} posterior frames exist")]
    WordOutOfRange { word: usize, start: usize, end: usize, frames: usize },
    #[error("no posteriors supplied for aggregation")]
    EmptyAggregation,
    #[error("unknown aggregation method '{0}' (expected sum, product or majority)")]
    UnknownAggregation(String),
}

/// Posterior over speakers for one frame and channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerPosterior {
    pub t: usize,
    pub channel: usize,
    pub probs: Vec<f64>,
}

/// Filtered speaker posterior: particle weights summed by the label on
/// the requested channel. Locations and the other channels marginalize
/// automatically.
pub fn frame_speaker_posterior(ensemble: &ParticleEnsemble, channel: usize) -> SpeakerPosterior {
    let mut probs = vec![0.0; ensemble.num_speakers()];
    for (r, &w) in ensemble.weights().iter().enumerate() {
        probs[usize::from(ensemble.labels_of(r)[channel])] += w;
    }
    SpeakerPosterior { t: ensemble.t, channel, probs }
}

/// Smoothed variant: backward weights over the smoother's sub-sampled
/// particle set.
pub fn frame_speaker_posterior_smoothed(
    ensemble: &ParticleEnsemble,
    smoothed: &SmoothedEnsemble,
    channel: usize,
) -> SpeakerPosterior {
    let mut probs = vec![0.0; ensemble.num_speakers()];
    for (&idx, &w) in smoothed.indices().iter().zip(smoothed.weights()) {
        probs[usize::from(ensemble.labels_of(idx as usize)[channel])] += w;
    }
    SpeakerPosterior { t: ensemble.t, channel, probs }
}

/// Per-frame, per-channel filtered posteriors for a whole meeting.
pub fn filtered_posteriors(ensembles: &[ParticleEnsemble]) -> Vec<Vec<SpeakerPosterior>> {
    ensembles
        .iter()
        .map(|e| (0..e.num_channels()).map(|n| frame_speaker_posterior(e, n)).collect())
        .collect()
}

/// Per-frame, per-channel smoothed posteriors.
pub fn smoothed_posteriors(
    ensembles: &[ParticleEnsemble],
    smoothed: &[SmoothedEnsemble],
) -> Vec<Vec<SpeakerPosterior>> {
    ensembles
        .iter()
        .zip(smoothed)
        .map(|(e, s)| {
            (0..e.num_channels())
                .map(|n| frame_speaker_posterior_smoothed(e, s, n))
                .collect()
        })
        .collect()
}

/// How per-frame posteriors are combined into one decision per word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Sum,
    Product,
    Majority,
}

impl FromStr for Aggregation {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "product" => Ok(Aggregation::Product),
            "majority" => Ok(Aggregation::Majority),
            other => Err(DecodeError::UnknownAggregation(other.to_string())),
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_value = values[0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

/// Picks the word's speaker from its frame posteriors. The product runs
/// in the log domain, with exact zeros mapping to -inf. All ties break
/// to the lowest speaker index.
pub fn aggregate_word(posteriors: &[&SpeakerPosterior], method: Aggregation) -> Result<usize, DecodeError> {
    if posteriors.is_empty() {
        return Err(DecodeError::EmptyAggregation);
    }
    let m = posteriors[0].probs.len();
    let mut scores = vec![0.0f64; m];
    match method {
        Aggregation::Sum => {
            for p in posteriors {
                for (s, &v) in scores.iter_mut().zip(&p.probs) {
                    *s += v;
                }
            }
        }
        Aggregation::Product => {
            for p in posteriors {
                for (s, &v) in scores.iter_mut().zip(&p.probs) {
                    *s += v.ln();
                }
            }
        }
        Aggregation::Majority => {
            for p in posteriors {
                scores[argmax(&p.probs)] += 1.0;
            }
        }
    }
    Ok(argmax(&scores))
}

/// Decodes every word from per-frame posteriors (filtered or smoothed;
/// the procedure is identical).
pub fn decode_words(
    posteriors: &[Vec<SpeakerPosterior>],
    words: &[WordSegment],
    method: Aggregation,
) -> Result<Vec<usize>, DecodeError> {
    let frames = posteriors.len();
    words
        .iter()
        .map(|word| {
            if word.end >= frames {
                return Err(DecodeError::WordOutOfRange {
                    word: word.id,
                    start: word.start,
                    end: word.end,
                    frames,
                });
            }
            let slice: Vec<&SpeakerPosterior> = (word.start..=word.end)
                .map(|t| &posteriors[t][word.channel])
                .collect();
            aggregate_word(&slice, method)
        })
        .collect()
}

/// Weighted circular mean and resultant of one speaker's location at one
/// frame. A low resultant means the particles disagree about where the
/// speaker is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub mean: Angle,
    pub resultant: f64,
}

/// Location trace per frame and speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationTrace {
    /// Indexed `[t][speaker]`.
    pub points: Vec<Vec<TracePoint>>,
}

pub fn location_trace(ensembles: &[ParticleEnsemble]) -> LocationTrace {
    let points = ensembles
        .iter()
        .map(|ensemble| {
            let m = ensemble.num_speakers();
            (0..m)
                .map(|speaker| {
                    let angles: Vec<Angle> =
                        (0..ensemble.num_particles()).map(|r| ensemble.thetas_of(r)[speaker]).collect();
                    let (mean, resultant) =
                        circ_mean_resultant(&angles, ensemble.weights()).expect("nonempty ensemble");
                    TracePoint { mean, resultant }
                })
                .collect()
        })
        .collect();
    LocationTrace { points }
}

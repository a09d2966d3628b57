//! File formats.
//!
//! Datasets are JSON Lines, one record per frame/word/posterior/trace
//! point; a channel absent from a frame record is silent. Floats are
//! serialized at full round-trip precision, so re-ingesting any output
//! reproduces the numbers exactly. The ensemble store is a little-endian
//! binary file with a versioned header, since text is impractical at
//! tens of thousands of particles times thousands of frames.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sspf_core::circstats::Angle;
use sspf_core::decode::{LocationTrace, SpeakerPosterior};
use sspf_core::filter::ParticleEnsemble;
use sspf_core::model::{
    BinGeometry, ChannelObservation, ModelParams, ObservationFrame, SslVector, WordSegment,
};
use sspf_core::pipeline::Segment;
use sspf_core::simkit::GroundTruth;

use crate::error::CliError;

// ---- generic JSONL helpers ----

pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| CliError::validation(format!("cannot serialize record: {e}")))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let reader = BufReader::new(File::open(path).map_err(|e| {
        CliError::validation(format!("cannot open {}: {e}", path.display()))
    })?);
    let mut records = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| {
            CliError::validation(format!("{}:{}: {e}", path.display(), index + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

// ---- record types ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelRecord {
    pub n: usize,
    pub dvec: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssl: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub doa: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: usize,
    pub channels: Vec<ChannelRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordRecord {
    pub l: usize,
    pub n: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorRecord {
    pub t: usize,
    pub n: usize,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub m: usize,
    pub mean: f64,
    pub resultant: f64,
}

/// A decoded word: the word fields plus the hypothesised speaker.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct LabelRecord {
    pub l: usize,
    pub n: usize,
    pub start: usize,
    pub end: usize,
    pub speaker: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub n: usize,
    pub start: usize,
    pub end: usize,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthRecord {
    pub t: usize,
    pub locations: Vec<f64>,
    pub active: Vec<Option<usize>>,
}

/// Model parameters as stored on disk; the bin geometry is carried as
/// its bin count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsFile {
    pub speakers: usize,
    pub channels: usize,
    pub centroids: Vec<Vec<f64>>,
    pub transitions: Vec<Vec<f64>>,
    pub gamma: f64,
    pub sigma_move: f64,
    pub kappa: f64,
    pub ssl_bins: usize,
}

// ---- conversions ----

pub fn frames_to_records(frames: &[ObservationFrame]) -> Vec<FrameRecord> {
    frames
        .iter()
        .enumerate()
        .map(|(t, frame)| FrameRecord {
            t,
            channels: frame
                .channels
                .iter()
                .enumerate()
                .filter_map(|(n, channel)| {
                    channel.as_ref().map(|c| ChannelRecord {
                        n,
                        dvec: c.dvec.clone(),
                        ssl: c.ssl.as_ref().map(|s| s.values().to_vec()),
                        doa: c.doa.map(Angle::radians),
                    })
                })
                .collect(),
        })
        .collect()
}

pub fn records_to_frames(
    records: &[FrameRecord],
    num_channels: usize,
) -> Result<Vec<ObservationFrame>, CliError> {
    let mut frames = Vec::with_capacity(records.len());
    for (expected_t, record) in records.iter().enumerate() {
        if record.t != expected_t {
            return Err(CliError::validation(format!(
                "frame records out of order: got t={} at line {}",
                record.t,
                expected_t + 1
            )));
        }
        let mut frame = ObservationFrame::silent(num_channels);
        for channel in &record.channels {
            if channel.n >= num_channels {
                return Err(CliError::validation(format!(
                    "frame {}: channel {} out of range for {} channels",
                    record.t, channel.n, num_channels
                )));
            }
            let ssl = channel.ssl.clone().map(SslVector::new).transpose()?;
            let doa = channel.doa.map(Angle::new).transpose()?;
            frame.channels[channel.n] = Some(ChannelObservation::new(channel.dvec.clone(), ssl, doa)?);
        }
        frames.push(frame);
    }
    Ok(frames)
}

pub fn words_to_records(words: &[WordSegment]) -> Vec<WordRecord> {
    words
        .iter()
        .map(|w| WordRecord { l: w.id, n: w.channel, start: w.start, end: w.end })
        .collect()
}

pub fn records_to_words(records: &[WordRecord]) -> Result<Vec<WordSegment>, CliError> {
    records
        .iter()
        .map(|r| WordSegment::new(r.l, r.n, r.start, r.end).map_err(CliError::from))
        .collect()
}

pub fn params_to_file(params: &ModelParams) -> ParamsFile {
    ParamsFile {
        speakers: params.num_speakers,
        channels: params.num_channels,
        centroids: params.centroids.clone(),
        transitions: params.transitions.clone(),
        gamma: params.gamma,
        sigma_move: params.sigma_move,
        kappa: params.kappa,
        ssl_bins: params.bins.num_bins(),
    }
}

pub fn file_to_params(file: &ParamsFile) -> Result<ModelParams, CliError> {
    let params = ModelParams {
        num_speakers: file.speakers,
        num_channels: file.channels,
        centroids: file.centroids.clone(),
        transitions: file.transitions.clone(),
        gamma: file.gamma,
        sigma_move: file.sigma_move,
        kappa: file.kappa,
        bins: BinGeometry::new(file.ssl_bins)?,
    };
    params.ensure_valid()?;
    Ok(params)
}

pub fn write_params(path: &Path, params: &ModelParams) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(&params_to_file(params))
        .map_err(|e| CliError::validation(format!("cannot serialize params: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<ModelParams, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::validation(format!("cannot open {}: {e}", path.display())))?;
    let file: ParamsFile = serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    file_to_params(&file)
}

pub fn posteriors_to_records(posteriors: &[Vec<SpeakerPosterior>]) -> Vec<PosteriorRecord> {
    posteriors
        .iter()
        .flat_map(|frame| {
            frame.iter().map(|p| PosteriorRecord { t: p.t, n: p.channel, p: p.probs.clone() })
        })
        .collect()
}

/// Rebuilds the `[t][n]` posterior grid, validating contiguity.
pub fn records_to_posteriors(records: &[PosteriorRecord]) -> Result<Vec<Vec<SpeakerPosterior>>, CliError> {
    let mut grid: Vec<Vec<SpeakerPosterior>> = Vec::new();
    for record in records {
        if record.t == grid.len() {
            grid.push(Vec::new());
        }
        let frame = grid
            .get_mut(record.t)
            .ok_or_else(|| CliError::validation(format!("posterior records out of order at t={}", record.t)))?;
        if record.n != frame.len() {
            return Err(CliError::validation(format!(
                "posterior records out of order at t={} n={}",
                record.t, record.n
            )));
        }
        frame.push(SpeakerPosterior { t: record.t, channel: record.n, probs: record.p.clone() });
    }
    Ok(grid)
}

pub fn trace_to_records(trace: &LocationTrace) -> Vec<TraceRecord> {
    trace
        .points
        .iter()
        .enumerate()
        .flat_map(|(t, speakers)| {
            speakers.iter().enumerate().map(move |(m, point)| TraceRecord {
                t,
                m,
                mean: point.mean.radians(),
                resultant: point.resultant,
            })
        })
        .collect()
}

pub fn segments_to_records(segments: &[Segment]) -> Vec<SegmentRecord> {
    segments
        .iter()
        .map(|s| SegmentRecord { n: s.channel, start: s.start, end: s.end, embedding: s.embedding.clone() })
        .collect()
}

pub fn records_to_segments(records: &[SegmentRecord]) -> Vec<Segment> {
    records
        .iter()
        .map(|r| Segment { channel: r.n, start: r.start, end: r.end, embedding: r.embedding.clone() })
        .collect()
}

pub fn truth_to_records(truth: &GroundTruth) -> Vec<TruthRecord> {
    truth
        .locations
        .iter()
        .zip(&truth.active)
        .enumerate()
        .map(|(t, (locations, active))| TruthRecord {
            t,
            locations: locations.iter().map(|a| a.radians()).collect(),
            active: active.clone(),
        })
        .collect()
}

// ---- binary ensemble store ----

const STORE_MAGIC: &[u8; 8] = b"SSPFENS\x01";

pub struct StoreWriter {
    out: BufWriter<File>,
    num_particles: usize,
    num_channels: usize,
    num_speakers: usize,
    frames_expected: usize,
    frames_written: usize,
}

impl StoreWriter {
    pub fn create(
        path: &Path,
        num_particles: usize,
        num_frames: usize,
        num_speakers: usize,
        num_channels: usize,
    ) -> Result<Self, CliError> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(STORE_MAGIC)?;
        out.write_all(&(num_particles as u64).to_le_bytes())?;
        out.write_all(&(num_frames as u64).to_le_bytes())?;
        out.write_all(&(num_speakers as u32).to_le_bytes())?;
        out.write_all(&(num_channels as u32).to_le_bytes())?;
        Ok(StoreWriter {
            out,
            num_particles,
            num_channels,
            num_speakers,
            frames_expected: num_frames,
            frames_written: 0,
        })
    }

    pub fn write_frame(&mut self, ensemble: &ParticleEnsemble) -> Result<(), CliError> {
        if ensemble.num_particles() != self.num_particles
            || ensemble.num_channels() != self.num_channels
            || ensemble.num_speakers() != self.num_speakers
        {
            return Err(CliError::validation("ensemble dimensions changed mid-store".to_string()));
        }
        let out = &mut self.out;
        out.write_all(&(ensemble.t as u64).to_le_bytes())?;
        out.write_all(&[u8::from(ensemble.resampled), u8::from(ensemble.ancestors().is_some())])?;
        for r in 0..self.num_particles {
            for &label in ensemble.labels_of(r) {
                out.write_all(&label.to_le_bytes())?;
            }
        }
        for r in 0..self.num_particles {
            for theta in ensemble.thetas_of(r) {
                out.write_all(&theta.radians().to_le_bytes())?;
            }
        }
        for &lw in ensemble.log_weights() {
            out.write_all(&lw.to_le_bytes())?;
        }
        if let Some(ancestors) = ensemble.ancestors() {
            for &a in ancestors {
                out.write_all(&a.to_le_bytes())?;
            }
        }
        self.frames_written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        if self.frames_written != self.frames_expected {
            return Err(CliError::validation(format!(
                "store expected {} frames, wrote {}",
                self.frames_expected, self.frames_written
            )));
        }
        self.out.flush()?;
        Ok(())
    }
}

fn read_exact_or(reader: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), CliError> {
    reader
        .read_exact(buf)
        .map_err(|e| CliError::validation(format!("truncated ensemble store ({what}): {e}")))
}

fn read_u64(reader: &mut impl Read, what: &str) -> Result<u64, CliError> {
    let mut buf = [0u8; 8];
    read_exact_or(reader, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_u32(reader: &mut impl Read, what: &str) -> Result<u32, CliError> {
    let mut buf = [0u8; 4];
    read_exact_or(reader, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_store(path: &Path) -> Result<Vec<ParticleEnsemble>, CliError> {
    let mut reader = BufReader::new(File::open(path).map_err(|e| {
        CliError::validation(format!("cannot open {}: {e}", path.display()))
    })?);
    let mut magic = [0u8; 8];
    read_exact_or(&mut reader, &mut magic, "magic")?;
    if &magic != STORE_MAGIC {
        return Err(CliError::validation(format!(
            "{} is not an ensemble store (bad magic or version)",
            path.display()
        )));
    }
    let num_particles = read_u64(&mut reader, "particle count")? as usize;
    let num_frames = read_u64(&mut reader, "frame count")? as usize;
    let num_speakers = read_u32(&mut reader, "speaker count")? as usize;
    let num_channels = read_u32(&mut reader, "channel count")? as usize;

    let mut ensembles = Vec::with_capacity(num_frames);
    for _ in 0..num_frames {
        let t = read_u64(&mut reader, "frame index")? as usize;
        let mut flags = [0u8; 2];
        read_exact_or(&mut reader, &mut flags, "frame flags")?;
        let resampled = flags[0] != 0;
        let has_ancestors = flags[1] != 0;

        let mut labels = vec![0u16; num_particles * num_channels];
        let mut buf2 = [0u8; 2];
        for label in labels.iter_mut() {
            read_exact_or(&mut reader, &mut buf2, "labels")?;
            *label = u16::from_le_bytes(buf2);
        }
        let mut buf8 = [0u8; 8];
        let mut thetas = Vec::with_capacity(num_particles * num_speakers);
        for _ in 0..num_particles * num_speakers {
            read_exact_or(&mut reader, &mut buf8, "locations")?;
            thetas.push(Angle::new(f64::from_le_bytes(buf8))?);
        }
        let mut log_weights = vec![0.0f64; num_particles];
        for lw in log_weights.iter_mut() {
            read_exact_or(&mut reader, &mut buf8, "log weights")?;
            *lw = f64::from_le_bytes(buf8);
        }
        let ancestors = if has_ancestors {
            let mut buf4 = [0u8; 4];
            let mut ancestors = Vec::with_capacity(num_particles);
            for _ in 0..num_particles {
                read_exact_or(&mut reader, &mut buf4, "ancestors")?;
                ancestors.push(u32::from_le_bytes(buf4));
            }
            Some(ancestors)
        } else {
            None
        };
        let ensemble = ParticleEnsemble::from_parts(
            t,
            num_channels,
            num_speakers,
            labels,
            thetas,
            log_weights,
            resampled,
            ancestors,
        )?;
        ensembles.push(ensemble);
    }
    let mut rest = [0u8; 1];
    if reader.read(&mut rest)? != 0 {
        return Err(CliError::validation("trailing bytes after the last store frame".to_string()));
    }
    Ok(ensembles)
}

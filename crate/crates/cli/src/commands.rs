//! Subcommand definitions and execution.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sspf_core::decode::{
    decode_words, filtered_posteriors, frame_speaker_posterior, location_trace, smoothed_posteriors,
    Aggregation,
};
use sspf_core::emissions::{EmissionConfig, LocationFeature};
use sspf_core::filter::{forward_pass_streaming, FilterConfig, FilterError};
use sspf_core::model::WordSegment;
use sspf_core::pipeline::{ahc_cluster, diarisation_metrics, estimate_centroids, estimate_transitions};
use sspf_core::simkit::{grid_hmm_posterior, simulate_meeting};
use sspf_core::smoother::backward_pass;

use crate::config::{setup_threads, RunConfig};
use crate::error::CliError;
use crate::io;

#[derive(Debug, Parser)]
#[command(
    name = "sspf",
    version,
    about = "Joint speaker diarisation and angular location tracking with a switching state-space particle filter"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic meeting dataset with ground truth.
    Simulate(SimulateArgs),
    /// Initialize model parameters from speaker-pure segments via AHC.
    Init(InitArgs),
    /// Run the particle filter forward pass.
    Filter(FilterArgs),
    /// Run backward smoothing over a stored forward pass.
    Smooth(SmoothArgs),
    /// Decode per-word speaker labels from posteriors.
    Decode(DecodeArgs),
    /// Extract per-speaker location traces from a stored forward pass.
    Trace(TraceArgs),
    /// Score hypothesis word labels against a reference.
    Eval(EvalArgs),
    /// Exact posteriors from the discretized oracle (small instances).
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Directory for the generated dataset files.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub speakers: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Speaker-pure segments with mean embeddings (JSONL).
    #[arg(long)]
    pub segments: PathBuf,
    /// Output parameter file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Channel count of the meeting the parameters will be used on.
    #[arg(long)]
    pub channels: usize,
    /// AHC merge stop threshold on cosine similarity.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Uniform smoothing weight for the transition matrix.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 10.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 200.0)]
    pub sigma_move: f64,
    #[arg(long, default_value_t = 12.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 360)]
    pub ssl_bins: usize,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub words: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    /// Output binary ensemble store.
    #[arg(long)]
    pub store: PathBuf,
    /// Output filtered posteriors (JSONL).
    #[arg(long)]
    pub posteriors: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub ess_threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub feature: Option<FeatureArg>,
    /// Only allow speaker switches at word-start frames.
    #[arg(long)]
    pub restrict_boundaries: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SmoothArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub words: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    /// Output smoothed posteriors (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub k_backward: Option<usize>,
    #[arg(long)]
    pub restrict_boundaries: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub posteriors: PathBuf,
    #[arg(long)]
    pub words: PathBuf,
    /// Output word labels (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// sum, product or majority.
    #[arg(long)]
    pub aggregate: Option<String>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Output trace (JSONL).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Hypothesis word labels (JSONL).
    #[arg(long)]
    pub hyp: PathBuf,
    /// Reference word labels (JSONL).
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub words: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    /// Output filtered posteriors (JSONL).
    #[arg(long)]
    pub filtered: PathBuf,
    /// Output smoothed posteriors (JSONL).
    #[arg(long)]
    pub smoothed: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Location bins per speaker in the oracle state space.
    #[arg(long)]
    pub grid_bins: Option<usize>,
    #[arg(long, value_enum)]
    pub feature: Option<FeatureArg>,
    #[arg(long)]
    pub restrict_boundaries: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum FeatureArg {
    None,
    Doa,
    Ssl,
}

impl From<FeatureArg> for LocationFeature {
    fn from(f: FeatureArg) -> Self {
        match f {
            FeatureArg::None => LocationFeature::None,
            FeatureArg::Doa => LocationFeature::Doa,
            FeatureArg::Ssl => LocationFeature::Ssl,
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Init(args) => init(args),
        Command::Filter(args) => filter(args),
        Command::Smooth(args) => smooth(args),
        Command::Decode(args) => decode(args),
        Command::Trace(args) => trace(args),
        Command::Eval(args) => eval(args),
        Command::Oracle(args) => oracle(args),
    }
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let config = RunConfig::load(args.config.as_deref())?;
    setup_threads(&config)?;
    let mut sim_config = config.sim_config(args.seed);
    if let Some(speakers) = args.speakers {
        sim_config.num_speakers = speakers;
    }
    if let Some(channels) = args.channels {
        sim_config.num_channels = channels;
    }
    if let Some(frames) = args.frames {
        sim_config.num_frames = frames;
    }
    sim_config.validate()?;

    let out = simulate_meeting(&sim_config)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let path = |name: &str| args.out_dir.join(name);
    io::write_jsonl(&path("frames.jsonl"), io::frames_to_records(&out.observations))?;
    io::write_jsonl(&path("words.jsonl"), io::words_to_records(&out.words))?;
    io::write_params(&path("params.json"), &out.params)?;
    let reference: Vec<io::LabelRecord> = out
        .words
        .iter()
        .zip(&out.truth.word_labels)
        .map(|(w, &speaker)| io::LabelRecord { l: w.id, n: w.channel, start: w.start, end: w.end, speaker })
        .collect();
    io::write_jsonl(&path("ref_labels.jsonl"), reference)?;
    io::write_jsonl(&path("truth.jsonl"), io::truth_to_records(&out.truth))?;
    io::write_jsonl(&path("segments.jsonl"), io::segments_to_records(&out.segments))?;
    println!(
        "simulated {} frames, {} channels, {} speakers, {} words -> {}",
        sim_config.num_frames,
        sim_config.num_channels,
        sim_config.num_speakers,
        out.words.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn init(args: InitArgs) -> Result<(), CliError> {
    let records: Vec<io::SegmentRecord> = io::read_jsonl(&args.segments)?;
    let segments = io::records_to_segments(&records);
    if !(-1.0..=1.0).contains(&args.threshold) {
        return Err(CliError::validation(format!(
            "threshold must lie in [-1, 1], got {}",
            args.threshold
        )));
    }
    if !(0.0..=1.0).contains(&args.alpha) {
        return Err(CliError::validation(format!("alpha must lie in [0, 1], got {}", args.alpha)));
    }
    let clustering = ahc_cluster(&segments, args.threshold)?;
    let centroids = estimate_centroids(&segments, &clustering)?;

    // per-channel frame label sequences from the clustered segments,
    // split at unlabeled frames
    let num_frames = segments.iter().map(|s| s.end + 1).max().unwrap_or(0);
    let mut runs: Vec<Vec<usize>> = Vec::new();
    for channel in 0..args.channels {
        let mut frame_labels: Vec<Option<usize>> = vec![None; num_frames];
        for (segment, &label) in segments.iter().zip(&clustering.labels) {
            if segment.channel != channel {
                continue;
            }
            for slot in frame_labels.iter_mut().take(segment.end + 1).skip(segment.start) {
                *slot = Some(label);
            }
        }
        let mut current = Vec::new();
        for slot in frame_labels {
            match slot {
                Some(label) => current.push(label),
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
    let transitions = estimate_transitions(&runs, clustering.num_clusters, args.alpha);

    let params = sspf_core::model::ModelParams {
        num_speakers: clustering.num_clusters,
        num_channels: args.channels,
        centroids,
        transitions,
        gamma: args.gamma,
        sigma_move: args.sigma_move,
        kappa: args.kappa,
        bins: sspf_core::model::BinGeometry::new(args.ssl_bins)?,
    };
    params.ensure_valid()?;
    io::write_params(&args.out, &params)?;
    println!(
        "clustered {} segments into {} speakers -> {}",
        segments.len(),
        clustering.num_clusters,
        args.out.display()
    );
    Ok(())
}

fn filter(args: FilterArgs) -> Result<(), CliError> {
    let config = RunConfig::load(args.config.as_deref())?;
    setup_threads(&config)?;
    let params = io::read_params(&args.params)?;
    let frame_records: Vec<io::FrameRecord> = io::read_jsonl(&args.frames)?;
    let observations = io::records_to_frames(&frame_records, params.num_channels)?;
    let word_records: Vec<io::WordRecord> = io::read_jsonl(&args.words)?;
    let words = io::records_to_words(&word_records)?;

    let feature = args
        .feature
        .map(LocationFeature::from)
        .or(config.filter.feature)
        .unwrap_or_default();
    let emis_cfg = EmissionConfig::new(feature, &params);
    let filt_cfg = config.filter_config(
        args.particles,
        args.ess_threshold,
        args.restrict_boundaries,
        args.seed,
    );
    filt_cfg.validate()?;

    let mut store = io::StoreWriter::create(
        &args.store,
        filt_cfg.num_particles,
        observations.len(),
        params.num_speakers,
        params.num_channels,
    )?;
    let mut posteriors_out = BufWriter::new(File::create(&args.posteriors)?);
    forward_pass_streaming(&observations, &words, &params, &emis_cfg, &filt_cfg, |ensemble| {
        store
            .write_frame(&ensemble)
            .map_err(|e| FilterError::Sink(e.to_string()))?;
        for channel in 0..ensemble.num_channels() {
            let post = frame_speaker_posterior(&ensemble, channel);
            let record = io::PosteriorRecord { t: post.t, n: post.channel, p: post.probs };
            serde_json::to_writer(&mut posteriors_out, &record)
                .map_err(|e| FilterError::Sink(e.to_string()))?;
            posteriors_out.write_all(b"\n").map_err(|e| FilterError::Sink(e.to_string()))?;
        }
        Ok(())
    })?;
    store.finish()?;
    posteriors_out.flush()?;
    println!(
        "filtered {} frames with {} particles -> {}, {}",
        observations.len(),
        filt_cfg.num_particles,
        args.store.display(),
        args.posteriors.display()
    );
    Ok(())
}

fn smooth(args: SmoothArgs) -> Result<(), CliError> {
    let config = RunConfig::load(args.config.as_deref())?;
    setup_threads(&config)?;
    let params = io::read_params(&args.params)?;
    let ensembles = io::read_store(&args.store)?;
    let word_records: Vec<io::WordRecord> = io::read_jsonl(&args.words)?;
    let words = io::records_to_words(&word_records)?;

    let restrict = args.restrict_boundaries || config.smooth.restrict_boundaries.unwrap_or(false);
    let filt_cfg = FilterConfig {
        num_particles: ensembles.first().map_or(0, |e| e.num_particles()),
        restrict_switch_to_word_boundaries: restrict,
        seed: args.seed.or(config.seed).unwrap_or(0),
        ..Default::default()
    };
    let k_backward = args
        .k_backward
        .or(config.smooth.k_backward)
        .unwrap_or_else(|| filt_cfg.num_particles.min(5000));

    let smoothed = backward_pass(&ensembles, &words, &params, &filt_cfg, k_backward)?;
    let posteriors = smoothed_posteriors(&ensembles, &smoothed);
    io::write_jsonl(&args.out, io::posteriors_to_records(&posteriors))?;
    println!(
        "smoothed {} frames with {} backward particles -> {}",
        ensembles.len(),
        k_backward,
        args.out.display()
    );
    Ok(())
}

fn decode(args: DecodeArgs) -> Result<(), CliError> {
    let config = RunConfig::load(args.config.as_deref())?;
    let aggregate = match &args.aggregate {
        Some(text) => text.parse::<Aggregation>()?,
        None => config.decode.aggregate.unwrap_or_default(),
    };
    let posterior_records: Vec<io::PosteriorRecord> = io::read_jsonl(&args.posteriors)?;
    let posteriors = io::records_to_posteriors(&posterior_records)?;
    let word_records: Vec<io::WordRecord> = io::read_jsonl(&args.words)?;
    let words = io::records_to_words(&word_records)?;

    let labels = decode_words(&posteriors, &words, aggregate)?;
    let records: Vec<io::LabelRecord> = words
        .iter()
        .zip(&labels)
        .map(|(w, &speaker)| io::LabelRecord { l: w.id, n: w.channel, start: w.start, end: w.end, speaker })
        .collect();
    io::write_jsonl(&args.out, records)?;
    println!("decoded {} words ({aggregate:?}) -> {}", words.len(), args.out.display());
    Ok(())
}

fn trace(args: TraceArgs) -> Result<(), CliError> {
    let ensembles = io::read_store(&args.store)?;
    let trace = location_trace(&ensembles);
    io::write_jsonl(&args.out, io::trace_to_records(&trace))?;
    println!("traced {} frames -> {}", ensembles.len(), args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), CliError> {
    let hyp: Vec<io::LabelRecord> = io::read_jsonl(&args.hyp)?;
    let reference: Vec<io::LabelRecord> = io::read_jsonl(&args.reference)?;
    if hyp.len() != reference.len() {
        return Err(CliError::validation(format!(
            "word inventories differ: {} hypothesis words vs {} reference words",
            hyp.len(),
            reference.len()
        )));
    }
    for (h, r) in hyp.iter().zip(&reference) {
        if (h.l, h.n, h.start, h.end) != (r.l, r.n, r.start, r.end) {
            return Err(CliError::validation(format!(
                "word inventories disagree at word {}: ({},{},{}) vs ({},{},{})",
                h.l, h.n, h.start, h.end, r.n, r.start, r.end
            )));
        }
    }
    let words: Vec<WordSegment> = hyp
        .iter()
        .map(|h| WordSegment::new(h.l, h.n, h.start, h.end).map_err(CliError::from))
        .collect::<Result<_, _>>()?;
    let hyp_labels: Vec<usize> = hyp.iter().map(|h| h.speaker).collect();
    let ref_labels: Vec<usize> = reference.iter().map(|r| r.speaker).collect();
    let metrics = diarisation_metrics(&words, &hyp_labels, &ref_labels)?;

    let mut report = String::new();
    report.push_str(&format!("words: {}\n", words.len()));
    report.push_str(&format!("word_speaker_error_rate: {:.6}\n", metrics.word_error_rate));
    report.push_str(&format!("frame_speaker_error_rate: {:.6}\n", metrics.frame_error_rate));
    report.push_str("confusion (rows = hypothesis clusters, cols = reference speakers):\n");
    for row in &metrics.confusion {
        report.push_str("  ");
        for count in row {
            report.push_str(&format!("{count:6}"));
        }
        report.push('\n');
    }
    report.push_str("mapping:");
    for (h, m) in metrics.word_mapping.iter().enumerate() {
        match m {
            Some(r) => report.push_str(&format!(" {h}->{r}")),
            None => report.push_str(&format!(" {h}->unassigned")),
        }
    }
    report.push('\n');

    print!("{report}");
    if let Some(out) = &args.out {
        std::fs::write(out, &report)?;
    }
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<(), CliError> {
    let config = RunConfig::load(args.config.as_deref())?;
    setup_threads(&config)?;
    let params = io::read_params(&args.params)?;
    let frame_records: Vec<io::FrameRecord> = io::read_jsonl(&args.frames)?;
    let observations = io::records_to_frames(&frame_records, params.num_channels)?;
    let word_records: Vec<io::WordRecord> = io::read_jsonl(&args.words)?;
    let words = io::records_to_words(&word_records)?;

    let feature = args
        .feature
        .map(LocationFeature::from)
        .or(config.filter.feature)
        .unwrap_or_default();
    let emis_cfg = EmissionConfig::new(feature, &params);
    let grid_bins = args.grid_bins.or(config.oracle.grid_bins).unwrap_or(36);

    let oracle = grid_hmm_posterior(
        &observations,
        &words,
        &params,
        &emis_cfg,
        grid_bins,
        args.restrict_boundaries,
    )
    .map_err(|e| match e {
        sspf_core::simkit::SimError::StateSpaceTooLarge { .. } => CliError::validation(e.to_string()),
        other => CliError::from(other),
    })?;

    let to_records = |grid: &Vec<Vec<Vec<f64>>>| -> Vec<io::PosteriorRecord> {
        grid.iter()
            .enumerate()
            .flat_map(|(t, frame)| {
                frame
                    .iter()
                    .enumerate()
                    .map(move |(n, p)| io::PosteriorRecord { t, n, p: p.clone() })
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    io::write_jsonl(&args.filtered, to_records(&oracle.filtered))?;
    io::write_jsonl(&args.smoothed, to_records(&oracle.smoothed))?;
    println!(
        "oracle over {} frames at {} bins -> {}, {}",
        observations.len(),
        grid_bins,
        args.filtered.display(),
        args.smoothed.display()
    );
    Ok(())
}

/// Filtered posteriors for a whole set of retained ensembles; used by
/// tests and kept close to the streaming writer above.
pub fn posterior_grid(ensembles: &[sspf_core::filter::ParticleEnsemble]) -> Vec<Vec<sspf_core::SpeakerPosterior>> {
    filtered_posteriors(ensembles)
}

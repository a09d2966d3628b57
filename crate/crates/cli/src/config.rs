//! Run configuration: one TOML file covering every subcommand, with
//! command-line flags taking precedence over file values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sspf_core::decode::Aggregation;
use sspf_core::emissions::LocationFeature;
use sspf_core::filter::FilterConfig;
use sspf_core::simkit::SimConfig;

use crate::error::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Worker threads; 0 or absent means available parallelism. The
    /// `SSPF_THREADS` environment variable overrides this.
    pub threads: Option<usize>,
    pub sim: SimSection,
    pub filter: FilterSection,
    pub smooth: SmoothSection,
    pub decode: DecodeSection,
    pub oracle: OracleSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub speakers: Option<usize>,
    pub channels: Option<usize>,
    pub frames: Option<usize>,
    pub frame_seconds: Option<f64>,
    pub sigma: Option<f64>,
    pub kappa: Option<f64>,
    pub gamma: Option<f64>,
    pub dvec_dim: Option<usize>,
    pub ssl_bins: Option<usize>,
    pub turn_persistence: Option<f64>,
    pub silence_prob: Option<f64>,
    pub word_len_min: Option<usize>,
    pub word_len_max: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub particles: Option<usize>,
    pub ess_threshold: Option<f64>,
    pub feature: Option<LocationFeature>,
    pub restrict_boundaries: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothSection {
    pub k_backward: Option<usize>,
    pub restrict_boundaries: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub aggregate: Option<Aggregation>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub grid_bins: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::validation(format!("cannot read config {}: {e}", path.display()))
                })?;
                toml::from_str(&text).map_err(|e| {
                    CliError::validation(format!("invalid config {}: {e}", path.display()))
                })
            }
        }
    }

    pub fn sim_config(&self, seed_flag: Option<u64>) -> SimConfig {
        let defaults = SimConfig::default();
        let section = &self.sim;
        SimConfig {
            num_speakers: section.speakers.unwrap_or(defaults.num_speakers),
            num_channels: section.channels.unwrap_or(defaults.num_channels),
            num_frames: section.frames.unwrap_or(defaults.num_frames),
            frame_seconds: section.frame_seconds.unwrap_or(defaults.frame_seconds),
            sigma_true: section.sigma.unwrap_or(defaults.sigma_true),
            kappa_true: section.kappa.unwrap_or(defaults.kappa_true),
            gamma_true: section.gamma.unwrap_or(defaults.gamma_true),
            dvec_dim: section.dvec_dim.unwrap_or(defaults.dvec_dim),
            ssl_bins: section.ssl_bins.unwrap_or(defaults.ssl_bins),
            turn_persistence: section.turn_persistence.unwrap_or(defaults.turn_persistence),
            silence_prob: section.silence_prob.unwrap_or(defaults.silence_prob),
            word_len_min: section.word_len_min.unwrap_or(defaults.word_len_min),
            word_len_max: section.word_len_max.unwrap_or(defaults.word_len_max),
            seed: seed_flag.or(self.seed).unwrap_or(defaults.seed),
        }
    }

    pub fn filter_config(
        &self,
        particles: Option<usize>,
        ess_threshold: Option<f64>,
        restrict: bool,
        seed_flag: Option<u64>,
    ) -> FilterConfig {
        let defaults = FilterConfig::default();
        FilterConfig {
            num_particles: particles.or(self.filter.particles).unwrap_or(defaults.num_particles),
            ess_threshold_fraction: ess_threshold
                .or(self.filter.ess_threshold)
                .unwrap_or(defaults.ess_threshold_fraction),
            restrict_switch_to_word_boundaries: restrict
                || self.filter.restrict_boundaries.unwrap_or(false),
            seed: seed_flag.or(self.seed).unwrap_or(defaults.seed),
        }
    }
}

/// Builds the global thread pool: `SSPF_THREADS`, then the config value,
/// then available parallelism. Results never depend on this (all
/// reductions are ordered); it only affects wall time.
pub fn setup_threads(config: &RunConfig) -> Result<(), CliError> {
    let from_env = match std::env::var("SSPF_THREADS") {
        Ok(text) => Some(text.parse::<usize>().map_err(|_| {
            CliError::validation(format!("SSPF_THREADS must be a number, got '{text}'"))
        })?),
        Err(_) => None,
    };
    let threads = from_env.or(config.threads).unwrap_or(0);
    if threads > 0 {
        // ignore the error when a pool already exists (repeated calls in tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Ok(())
}

//! Joint speaker diarisation and angular speaker-location tracking.
//!
//! A switching state-space model tracks, per frame, which speaker is
//! active on each separated channel and where every speaker is around
//! the microphone array. Inference runs as a sequential importance
//! resampling particle filter ([`filter`]), optionally followed by an
//! exact O(k²·T) backward smoothing pass ([`smoother`]). Decoding
//! ([`decode`]) marginalizes locations out of the stored ensembles and
//! aggregates per-frame speaker posteriors into one label per word.
//!
//! [`pipeline`] holds the surrounding machinery (agglomerative
//! initialization, Hungarian tagging, error metrics), and [`simkit`]
//! provides a ground-truthed synthetic meeting generator plus a
//! discretized exact-inference oracle used to validate the particle
//! approximations.

pub mod circstats;
pub mod decode;
pub mod emissions;
pub mod filter;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod simkit;
pub mod smoother;

pub use circstats::{wrap_angle, Angle};
pub use decode::{Aggregation, LocationTrace, SpeakerPosterior};
pub use emissions::{EmissionConfig, LocationFeature};
pub use filter::{FilterConfig, ParticleEnsemble};
pub use model::{
    BinGeometry, ModelParams, ObservationFrame, Particle, SslVector, WordSegment,
};
pub use pipeline::{DiarisationMetrics, Segment};
pub use simkit::{GroundTruth, SimConfig, SimOutput};
pub use smoother::SmoothedEnsemble;

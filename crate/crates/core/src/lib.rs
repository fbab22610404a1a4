//! Knock detection in combustion-engine cylinder pressure.
//!
//! The crate covers the full loop: chamber resonance physics and kernel sizing
//! ([`signal`]), labeled data handling and a synthetic cycle generator
//! ([`dataset`]), a small theory-sized 1D convolutional network trained from
//! scratch ([`cnn`]), classical reference detectors ([`reference`]), shared
//! evaluation machinery ([`evaluation`]), and spectral inspection of what the
//! trained network actually learned ([`analysis`]).
//!
//! All randomness is seeded and every run is reproducible bit for bit.

pub mod analysis;
pub mod cnn;
pub mod dataset;
pub mod detector;
mod error;
pub mod evaluation;
mod fft;
mod filter;
pub mod reference;
pub mod signal;

pub use analysis::{HypothesisReport, KernelSpectrum};
pub use cnn::{ConvMode, KnockNet, StopReason, TrainConfig, TrainReport};
pub use dataset::{BinaryLabel, ExpertVotes, LabeledCycle, SplitSpec, SyntheticConfig};
pub use detector::{CnnDetector, Detector, MapoDetector, PcaDdDetector, PcaEigenDetector};
pub use error::{KnockError, Result};
pub use evaluation::{
    ConfusionMatrix6, CvOutcome, CvReport, LatencyReport, Scenario, ScenarioResult, Summary,
};
pub use reference::{LogisticModel, LogregConfig, MapoModel, PcaBasis};
pub use signal::{
    AcousticMode, AnalysisWindow, Band, EngineGeometry, PressureCycle, DEFAULT_RESOLUTION_DEG,
    DEFAULT_RPM, DEFAULT_SPEED_OF_SOUND, WINDOW_DEG,
};

//! Two-level learning cache for on-device spoken intent resolution.
//!
//! A device-side runtime matches incoming utterances against cached entries
//! at two levels of acoustic representation — clustered sound units (L1) and
//! phoneme posteriors (L2) — and offloads misses to a simulated cloud that
//! resolves intents from ground truth, mints new cache entries and finetunes
//! the device's phoneme extractor online. A benchmark harness drives the
//! whole system over synthetic or manifest-described corpora and accounts
//! latency and energy with measured platform constants.

pub mod audio;
pub mod autodiff;
pub mod cloud;
pub mod config;
pub mod ctc;
pub mod device;
pub mod dsp;
pub mod gru;
pub mod harness;
pub mod l1;
pub mod l2;
pub mod proto;
pub mod rng;
pub mod store;
pub mod tensorfile;
pub mod threshold;

pub use audio::Waveform;
pub use ctc::{CollapseMode, LabelSequence, PosteriorSequence};
pub use dsp::{FeatureSequence, FrameSpec, FrontendModel};
pub use gru::GruStack;

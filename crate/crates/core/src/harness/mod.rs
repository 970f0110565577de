//! Benchmark harness: corpora, benchmark settings, latency/energy
//! accounting and report emission.

pub mod bench;
pub mod latency;
pub mod manifest;
pub mod ops;
pub mod synth;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("manifest: {0}")]
    BadManifest(String),
    #[error("setting infeasible: {0}")]
    InfeasibleSetting(String),
    #[error("audio: {0}")]
    Audio(#[from] crate::audio::AudioError),
    #[error("device: {0}")]
    Device(#[from] crate::device::DeviceError),
    #[error("cloud: {0}")]
    Cloud(#[from] crate::proto::CloudError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub use bench::{run_benchmark, BenchmarkReport, BenchmarkSetting};
pub use latency::{account_energy, account_latency, LatencyModel};
pub use manifest::{AudioSource, DiskAudio, Manifest, ManifestRecord, MemoryAudio};
pub use ops::{ops_budget, OpsBudget};
pub use synth::{synth_dataset, write_corpus, JitterSpec, SynthCorpus, SynthSpec};

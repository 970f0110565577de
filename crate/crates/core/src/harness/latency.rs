//! Latency and energy accounting with the measured platform constants.
//!
//! Hit latencies are fixed: extraction streams in parallel with ingestion,
//! so only the final segment plus matching shows up, measured at 96 ms for
//! an L1 hit and 185 ms through L2. Offloads pay a real-time-factor drawn
//! from a clipped normal calibrated to the measured cloud round trips
//! (mean 900 ms, sd 100 ms for 3 s of audio). Energy is E = P*t at the
//! active-mode power draw.

use rand_pcg::Pcg64Mcg;
use serde::Serialize;

use crate::config::SystemConfig;
use crate::device::Level;
use crate::rng::sample_normal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyModel {
    pub l1_hit_ms: f64,
    pub l2_hit_ms: f64,
    pub offload_rtf_mean: f64,
    pub offload_rtf_sd: f64,
    pub offload_rtf_clip_lo: f64,
    pub offload_rtf_clip_hi: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            l1_hit_ms: 96.0,
            l2_hit_ms: 185.0,
            offload_rtf_mean: 0.30,
            offload_rtf_sd: 0.033,
            offload_rtf_clip_lo: 0.29 * 0.8,
            offload_rtf_clip_hi: 0.34 * 1.2,
        }
    }
}

impl From<&SystemConfig> for LatencyModel {
    fn from(cfg: &SystemConfig) -> Self {
        LatencyModel {
            l1_hit_ms: cfg.latency_l1_hit_ms,
            l2_hit_ms: cfg.latency_l2_hit_ms,
            offload_rtf_mean: cfg.offload_rtf_mean,
            offload_rtf_sd: cfg.offload_rtf_sd,
            offload_rtf_clip_lo: cfg.offload_rtf_clip_lo,
            offload_rtf_clip_hi: cfg.offload_rtf_clip_hi,
        }
    }
}

/// End-to-end latency in milliseconds for one resolved input.
pub fn account_latency(
    level: Level,
    duration_s: f64,
    model: &LatencyModel,
    rng: &mut Pcg64Mcg,
) -> f64 {
    match level {
        Level::L1Hit => model.l1_hit_ms,
        Level::L2Hit => model.l2_hit_ms,
        Level::Offload => {
            let rtf = (model.offload_rtf_mean + model.offload_rtf_sd * sample_normal(rng))
                .clamp(model.offload_rtf_clip_lo, model.offload_rtf_clip_hi);
            rtf * duration_s * 1000.0
        }
    }
}

/// Energy in millijoules from E = P*t: active-mode milliwatts times the
/// latency window.
pub fn account_energy(latency_ms: f64, active_power_mw: f64) -> f64 {
    active_power_mw * latency_ms / 1000.0
}

//! System configuration: every tunable in one place, with a documented
//! `key = value` text format and CLI overrides layered on top.
//!
//! Defaults follow the reference platform profile: 16 kHz audio, 401/80
//! framing, 60 feature channels, k-means size 70 at tolerance 1e-4,
//! two bi-directional recurrent layers of hidden size 128 over a 42-symbol
//! phoneme alphabet, Adam at 1e-4 with batch 16, model pushes every 100
//! offloads, a 60-entry cache with a per-intent cap of 8, and duration
//! buckets (0, 2.7], (2.7, 4), [4, inf) with L1 bypassed in the first.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{AugmentationSpec, CloudConfig};
use crate::device::BucketConfig;
use crate::dsp::FrameSpec;
use crate::l1::{DistanceToProb, L1Config};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: expected `key = value`, got `{text}`")]
    BadLine { line: usize, text: String },
    #[error("config key `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// How lookup thresholds are chosen at query time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdMode {
    /// Constants fitted per level and bucket on the warm-up set.
    FitStatic,
    /// Constants taken directly from config.
    Static,
    /// Key-length MLP trained on the warm-up set.
    Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    pub seed: u64,
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub feature_channels: usize,

    pub l1_k: usize,
    pub l1_tol: f64,
    pub l1_max_iters: usize,
    pub l1_sharpness: f64,
    /// "softmax" or "inverse-linear"
    pub l1_distance_to_prob: String,

    pub gru_hidden: usize,
    /// Linear classifier bias on the phoneme head.
    pub classifier_bias: bool,

    pub adam_lr: f64,
    pub batch_size: usize,
    pub finetune_enabled: bool,
    pub finetune_max_epochs: usize,
    pub finetune_converge_rel: f64,
    pub finetune_converge_window: usize,
    pub in_domain_fraction: f64,

    pub augment_versions: usize,
    pub augment_temporal_pct: f64,
    pub augment_frequency_pct: f64,
    pub augment_noise_pct: f64,

    pub push_every_n: u64,
    pub capacity: usize,
    pub per_intent_cap: usize,

    pub bucket_boundaries: Vec<f64>,
    pub bypass_l1_bucket0: bool,

    pub threshold_mode: ThresholdMode,
    /// Used when `threshold_mode = static`.
    pub static_l1_threshold: f64,
    pub static_l2_threshold: f64,

    pub latency_l1_hit_ms: f64,
    pub latency_l2_hit_ms: f64,
    pub offload_rtf_mean: f64,
    pub offload_rtf_sd: f64,
    pub offload_rtf_clip_lo: f64,
    pub offload_rtf_clip_hi: f64,
    pub active_power_mw: f64,

    pub min_speaker_utterances: usize,
    /// Benchmark worker threads (per-speaker tests are independent).
    pub workers: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            seed: 0,
            sample_rate: 16_000,
            window_len: 401,
            hop: 80,
            feature_channels: 60,

            l1_k: 70,
            l1_tol: 1e-4,
            l1_max_iters: 300,
            l1_sharpness: crate::l1::DEFAULT_SHARPNESS,
            l1_distance_to_prob: "softmax".into(),

            gru_hidden: 128,
            classifier_bias: true,

            adam_lr: 1e-4,
            batch_size: 16,
            finetune_enabled: true,
            finetune_max_epochs: 50,
            finetune_converge_rel: 0.01,
            finetune_converge_window: 3,
            in_domain_fraction: 0.0,

            augment_versions: 5,
            augment_temporal_pct: 5.0,
            augment_frequency_pct: 10.0,
            augment_noise_pct: 5.0,

            push_every_n: 100,
            capacity: 60,
            per_intent_cap: 8,

            bucket_boundaries: vec![2.7, 4.0],
            bypass_l1_bucket0: true,

            threshold_mode: ThresholdMode::FitStatic,
            static_l1_threshold: 1.0,
            static_l2_threshold: 1.0,

            latency_l1_hit_ms: 96.0,
            latency_l2_hit_ms: 185.0,
            offload_rtf_mean: 0.30,
            offload_rtf_sd: 0.033,
            offload_rtf_clip_lo: 0.29 * 0.8,
            offload_rtf_clip_hi: 0.34 * 1.2,
            active_power_mw: 200.6,

            min_speaker_utterances: 5,
            workers: 1,
        }
    }
}

impl SystemConfig {
    pub fn frame_spec(&self) -> FrameSpec {
        FrameSpec {
            window_len: self.window_len,
            hop: self.hop,
        }
    }

    pub fn l1_config(&self) -> L1Config {
        L1Config {
            k: self.l1_k,
            tol: self.l1_tol,
            max_iters: self.l1_max_iters,
            sharpness: self.l1_sharpness,
            distance_to_prob: match self.l1_distance_to_prob.as_str() {
                "inverse-linear" => DistanceToProb::InverseLinear,
                _ => DistanceToProb::Softmax,
            },
        }
    }

    pub fn bucket_config(&self) -> BucketConfig {
        BucketConfig {
            boundaries: self.bucket_boundaries.clone(),
            bypass_l1_bucket0: self.bypass_l1_bucket0,
        }
    }

    pub fn augmentation_spec(&self) -> AugmentationSpec {
        AugmentationSpec {
            temporal_pct: self.augment_temporal_pct,
            frequency_pct: self.augment_frequency_pct,
            noise_pct_of_max: self.augment_noise_pct,
            versions: self.augment_versions,
        }
    }

    pub fn cloud_config(&self) -> CloudConfig {
        CloudConfig {
            push_every_n: self.push_every_n,
            finetune: self.finetune_enabled,
            finetune_lr: self.adam_lr,
            batch_size: self.batch_size,
            max_epochs: self.finetune_max_epochs,
            converge_rel_improvement: self.finetune_converge_rel,
            converge_window: self.finetune_converge_window,
            augment: self.augmentation_spec(),
            l1_cfg: self.l1_config(),
            seed: self.seed,
        }
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse::<T>().map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                message: format!("{e}"),
            })
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "sample_rate" => self.sample_rate = parse(key, value)?,
            "window_len" => self.window_len = parse(key, value)?,
            "hop" => self.hop = parse(key, value)?,
            "feature_channels" => self.feature_channels = parse(key, value)?,
            "l1_k" => self.l1_k = parse(key, value)?,
            "l1_tol" => self.l1_tol = parse(key, value)?,
            "l1_max_iters" => self.l1_max_iters = parse(key, value)?,
            "l1_sharpness" => self.l1_sharpness = parse(key, value)?,
            "l1_distance_to_prob" => {
                let v = value.trim();
                if v != "softmax" && v != "inverse-linear" {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        message: "expected `softmax` or `inverse-linear`".into(),
                    });
                }
                self.l1_distance_to_prob = v.to_string();
            }
            "gru_hidden" => self.gru_hidden = parse(key, value)?,
            "classifier_bias" => self.classifier_bias = parse(key, value)?,
            "adam_lr" => self.adam_lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "finetune_enabled" => self.finetune_enabled = parse(key, value)?,
            "finetune_max_epochs" => self.finetune_max_epochs = parse(key, value)?,
            "finetune_converge_rel" => self.finetune_converge_rel = parse(key, value)?,
            "finetune_converge_window" => self.finetune_converge_window = parse(key, value)?,
            "in_domain_fraction" => self.in_domain_fraction = parse(key, value)?,
            "augment_versions" => self.augment_versions = parse(key, value)?,
            "augment_temporal_pct" => self.augment_temporal_pct = parse(key, value)?,
            "augment_frequency_pct" => self.augment_frequency_pct = parse(key, value)?,
            "augment_noise_pct" => self.augment_noise_pct = parse(key, value)?,
            "push_every_n" => self.push_every_n = parse(key, value)?,
            "capacity" => self.capacity = parse(key, value)?,
            "per_intent_cap" => self.per_intent_cap = parse(key, value)?,
            "bucket_boundaries" => {
                let mut out = Vec::new();
                for part in value.split(',') {
                    out.push(parse::<f64>(key, part.trim())?);
                }
                if out.is_empty() || out.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        message: "expected a strictly increasing comma list".into(),
                    });
                }
                self.bucket_boundaries = out;
            }
            "bypass_l1_bucket0" => self.bypass_l1_bucket0 = parse(key, value)?,
            "threshold_mode" => {
                self.threshold_mode = match value.trim() {
                    "fit-static" => ThresholdMode::FitStatic,
                    "static" => ThresholdMode::Static,
                    "mlp" => ThresholdMode::Mlp,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            message: format!(
                                "expected `fit-static`, `static` or `mlp`, got `{other}`"
                            ),
                        })
                    }
                }
            }
            "static_l1_threshold" => self.static_l1_threshold = parse(key, value)?,
            "static_l2_threshold" => self.static_l2_threshold = parse(key, value)?,
            "latency_l1_hit_ms" => self.latency_l1_hit_ms = parse(key, value)?,
            "latency_l2_hit_ms" => self.latency_l2_hit_ms = parse(key, value)?,
            "offload_rtf_mean" => self.offload_rtf_mean = parse(key, value)?,
            "offload_rtf_sd" => self.offload_rtf_sd = parse(key, value)?,
            "offload_rtf_clip_lo" => self.offload_rtf_clip_lo = parse(key, value)?,
            "offload_rtf_clip_hi" => self.offload_rtf_clip_hi = parse(key, value)?,
            "active_power_mw" => self.active_power_mw = parse(key, value)?,
            "min_speaker_utterances" => self.min_speaker_utterances = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parse a `key = value` file (`#` comments, blank lines allowed) over
    /// the current values.
    pub fn apply_file_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SystemConfig, ConfigError> {
        let mut cfg = SystemConfig::default();
        cfg.apply_file_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_the_reference_profile() {
        let c = SystemConfig::default();
        assert_eq!(c.window_len, 401);
        assert_eq!(c.hop, 80);
        assert_eq!(c.l1_k, 70);
        assert_eq!(c.gru_hidden, 128);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.push_every_n, 100);
        assert_eq!(c.capacity, 60);
        assert_eq!(c.bucket_boundaries, vec![2.7, 4.0]);
        assert_eq!(c.latency_l1_hit_ms, 96.0);
        assert_eq!(c.latency_l2_hit_ms, 185.0);
        assert_eq!(c.active_power_mw, 200.6);
    }

    #[test]
    fn file_text_parses_and_overrides() {
        let mut c = SystemConfig::default();
        c.apply_file_text(
            "# benchmark overrides\nl1_k = 12\nseed = 7\nbucket_boundaries = 1.5, 3.0\nthreshold_mode = static\nstatic_l1_threshold = 0.8\n",
        )
        .unwrap();
        assert_eq!(c.l1_k, 12);
        assert_eq!(c.seed, 7);
        assert_eq!(c.bucket_boundaries, vec![1.5, 3.0]);
        assert_eq!(c.threshold_mode, ThresholdMode::Static);
        assert_eq!(c.static_l1_threshold, 0.8);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut c = SystemConfig::default();
        assert!(matches!(
            c.apply_file_text("no_such_knob = 3"),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn malformed_line_is_rejected() {
        let mut c = SystemConfig::default();
        assert!(matches!(
            c.apply_file_text("just words"),
            Err(ConfigError::BadLine { line: 1, .. })
        ));
    }

    #[test]
    fn decreasing_boundaries_are_rejected() {
        let mut c = SystemConfig::default();
        assert!(c.apply_file_text("bucket_boundaries = 4.0, 2.0").is_err());
    }
}

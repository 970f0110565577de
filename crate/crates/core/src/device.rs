//! Device-side orchestration: duration-bucketed model ensemble, the
//! L1 -> L2 -> offload flow, entry installation and cache warm-up.
//!
//! One `Device` models one MCU: lookups and installs are a single serialized
//! stream (`&mut self`), mirroring the one-utterance-at-a-time runtime.

use thiserror::Error;

use crate::audio::Waveform;
use crate::autodiff::TensorError;
use crate::dsp::{self, DspError, FeatureSequence, FrameSpec, FrontendModel};
use crate::gru::GruStack;
use crate::l1::{self, L1Config, L1Entry, L1Error};
use crate::l2::{self, L2Entry, L2Error};
use crate::proto::{CloudError, CloudResolver, ModelPush, OffloadRequest};
use crate::store::{CacheStore, StoreError};
use crate::tensorfile::TensorContainer;
use crate::threshold::ThresholdPolicy;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("frontend: {0}")]
    Dsp(#[from] DspError),
    #[error("l1: {0}")]
    L1(#[from] L1Error),
    #[error("l2: {0}")]
    L2(#[from] L2Error),
    #[error("model: {0}")]
    Model(#[from] TensorError),
    #[error("cloud: {0}")]
    Cloud(#[from] CloudError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("model push carried {got} payloads for {expected} buckets")]
    BadPush { got: usize, expected: usize },
}

/// Duration bucketing. With boundaries `[2.7, 4.0]` the intervals are
/// `(0, 2.7]`, `(2.7, 4)` and `[4, inf)`; bucket 0 may bypass L1.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketConfig {
    pub boundaries: Vec<f64>,
    pub bypass_l1_bucket0: bool,
}

impl Default for BucketConfig {
    fn default() -> Self {
        BucketConfig {
            boundaries: vec![2.7, 4.0],
            bypass_l1_bucket0: true,
        }
    }
}

impl BucketConfig {
    pub fn count(&self) -> usize {
        self.boundaries.len() + 1
    }

    /// Unique bucket index for a duration: the first interval is closed on
    /// the right, the last closed on the left.
    pub fn route(&self, duration_s: f64) -> usize {
        assert!(duration_s > 0.0, "durations must be positive");
        if duration_s <= self.boundaries[0] {
            return 0;
        }
        for (i, &b) in self.boundaries.iter().enumerate().skip(1) {
            if duration_s < b {
                return i;
            }
        }
        self.boundaries.len()
    }

    pub fn bypasses_l1(&self, bucket: usize) -> bool {
        self.bypass_l1_bucket0 && bucket == 0
    }
}

/// Which stage resolved an input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Level {
    L1Hit,
    L2Hit,
    Offload,
}

/// Outcome of one lookup. The latency field is filled in by the harness
/// latency model; the device itself only knows the resolution level.
#[derive(Debug, Clone)]
pub struct LookupOutcome {
    pub level: Level,
    pub intent: u32,
    pub bucket: usize,
    pub l1_loss: Option<f64>,
    pub l2_loss: Option<f64>,
    /// Transcript id of the matched entry (hits) or the cloud answer.
    pub transcript_id: u32,
    pub latency_ms: f64,
}

pub struct Device {
    pub id: u32,
    pub frontend: FrontendModel,
    pub frame_spec: FrameSpec,
    pub bucket_models: Vec<GruStack>,
    pub store: CacheStore,
    pub buckets: BucketConfig,
    pub thresholds: ThresholdPolicy,
    pub l1_cfg: L1Config,
    /// Install cloud-minted entries on offload (normal operation). The
    /// benchmark test phase freezes the store by clearing this.
    pub install_on_offload: bool,
    /// Accept mid-stream model pushes (also frozen during the test phase).
    pub accept_model_push: bool,
}

impl Device {
    pub fn feature_of(&self, waveform: &Waveform) -> Result<FeatureSequence, DeviceError> {
        Ok(dsp::extract_features(
            waveform,
            &self.frontend,
            &self.frame_spec,
        )?)
    }

    /// Full lookup flow for one utterance: route by duration, query L1
    /// unless bypassed, then L2, then offload to the cloud. Hits mutate only
    /// recency metadata; offloads install the returned entries and apply any
    /// model push (subject to the freeze flags).
    pub fn lookup(
        &mut self,
        utterance_id: &str,
        waveform: &Waveform,
        cloud: &mut dyn CloudResolver,
    ) -> Result<LookupOutcome, DeviceError> {
        let bucket = self.buckets.route(waveform.duration_s());
        let features = self.feature_of(waveform)?;

        let mut l1_loss = None;
        if !self.buckets.bypasses_l1(bucket) {
            let thresholds = &self.thresholds;
            let res = l1::match_query(&features, self.store.l1_entries(), &self.l1_cfg, &|klen| {
                thresholds.l1_threshold(bucket, klen)
            })?;
            l1_loss = Some(res.loss);
            if res.hit {
                let idx = res.best_entry.unwrap();
                let entry = &self.store.l1_entries()[idx];
                let (intent, transcript_id) = (entry.intent, entry.transcript_id);
                self.store.touch_l1(idx);
                return Ok(LookupOutcome {
                    level: Level::L1Hit,
                    intent,
                    bucket,
                    l1_loss,
                    l2_loss: None,
                    transcript_id,
                    latency_ms: 0.0,
                });
            }
        }

        let model = &self.bucket_models[bucket];
        let thresholds = &self.thresholds;
        let res = l2::match_query(&features, model, self.store.l2_entries(), &|klen| {
            thresholds.l2_threshold(bucket, klen)
        })?;
        let l2_loss = Some(res.loss);
        if res.hit {
            let idx = res.best_entry.unwrap();
            let entry = &self.store.l2_entries()[idx];
            let (intent, transcript_id) = (entry.intent, entry.transcript_id);
            self.store.touch_l2(idx);
            return Ok(LookupOutcome {
                level: Level::L2Hit,
                intent,
                bucket,
                l1_loss,
                l2_loss,
                transcript_id,
                latency_ms: 0.0,
            });
        }

        // both levels missed: upload the raw waveform
        let request = OffloadRequest {
            device_id: self.id,
            utterance_id: utterance_id.to_string(),
            bucket,
            waveform: waveform.clone(),
        };
        let response = cloud.resolve(&request)?;
        if self.install_on_offload {
            self.install(response.l1_entry, response.l2_entry);
        }
        if self.accept_model_push {
            if let Some(push) = response.model_push {
                self.apply_model_push(&push)?;
            }
        }
        Ok(LookupOutcome {
            level: Level::Offload,
            intent: response.intent,
            bucket,
            l1_loss,
            l2_loss,
            transcript_id: response.transcript_id,
            latency_ms: 0.0,
        })
    }

    /// Install cloud-minted entries, honoring capacity and per-intent caps.
    pub fn install(&mut self, l1_entry: Option<L1Entry>, l2_entry: L2Entry) {
        if let Some(e) = l1_entry {
            self.store.install_l1(e);
        }
        self.store.install_l2(l2_entry);
    }

    /// Replace the bucket extractors with pushed payloads.
    pub fn apply_model_push(&mut self, push: &ModelPush) -> Result<(), DeviceError> {
        if push.bucket_payloads.len() != self.bucket_models.len() {
            return Err(DeviceError::BadPush {
                got: push.bucket_payloads.len(),
                expected: self.bucket_models.len(),
            });
        }
        let mut fresh = Vec::with_capacity(push.bucket_payloads.len());
        for payload in &push.bucket_payloads {
            let container = TensorContainer::from_bytes(payload)
                .map_err(|e| CloudError::Internal(format!("push payload: {e}")))?;
            fresh.push(
                GruStack::from_container(&container)
                    .map_err(|e| CloudError::Internal(format!("push model: {e}")))?,
            );
        }
        self.bucket_models = fresh;
        Ok(())
    }

    /// Preload the cache from a snapshot. Entries beyond the remaining
    /// capacity are skipped (reported, not evicting).
    pub fn warm_up(&mut self, snapshot: &CacheStore) -> WarmUpReport {
        let mut installed = 0usize;
        let mut skipped = 0usize;
        for e in snapshot.l1_entries() {
            if self.store.len() < self.store.capacity {
                self.store.install_l1(e.clone());
                installed += 1;
            } else {
                skipped += 1;
            }
        }
        for e in snapshot.l2_entries() {
            if self.store.len() < self.store.capacity {
                self.store.install_l2(e.clone());
                installed += 1;
            } else {
                skipped += 1;
            }
        }
        WarmUpReport { installed, skipped }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WarmUpReport {
    pub installed: usize,
    pub skipped: usize,
}

impl WarmUpReport {
    pub fn truncated(&self) -> bool {
        self.skipped > 0
    }
}

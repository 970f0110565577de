//! Device-cloud exchange contract.
//!
//! The exchange is an in-process call; every resolved offload can also be
//! traced as one newline-delimited JSON record so identical runs produce
//! byte-identical, replayable logs. Waveforms are referenced by utterance id
//! plus a content hash rather than inlined.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Waveform;
use crate::ctc::Symbol;
use crate::l1::L1Entry;
use crate::l2::L2Entry;
use crate::rng::fnv1a64;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("utterance {0} not in manifest")]
    NotInManifest(String),
    #[error("lexicon miss: {0}")]
    LexiconMiss(String),
    #[error("training diverged (loss went non-finite); shadow rolled back")]
    TrainingDiverged,
    #[error("{0}")]
    Internal(String),
}

#[derive(Debug, Clone)]
pub struct OffloadRequest {
    pub device_id: u32,
    pub utterance_id: String,
    pub bucket: usize,
    pub waveform: Waveform,
}

impl OffloadRequest {
    pub fn waveform_hash(&self) -> String {
        let bytes: Vec<u8> = self
            .waveform
            .samples
            .iter()
            .flat_map(|s| s.to_le_bytes())
            .collect();
        format!("{:016x}", fnv1a64(&bytes))
    }
}

/// Serialized per-bucket extractor payloads pushed back to the device.
#[derive(Debug, Clone)]
pub struct ModelPush {
    /// One named-tensor container payload per bucket.
    pub bucket_payloads: Vec<Vec<u8>>,
    pub content_hashes: Vec<String>,
}

#[derive(Debug)]
pub struct OffloadResponse {
    pub intent: u32,
    pub transcript_id: u32,
    /// Reference phonemes in transport form (blank between words).
    pub reference_transport: Vec<Symbol>,
    pub l1_entry: Option<L1Entry>,
    pub l2_entry: L2Entry,
    pub model_push: Option<ModelPush>,
}

/// Anything that can play the cloud role for a device.
pub trait CloudResolver {
    fn resolve(&mut self, request: &OffloadRequest) -> Result<OffloadResponse, CloudError>;
}

/// One exchange, flattened for the NDJSON trace.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct TraceRecord {
    pub seq: u64,
    pub device_id: u32,
    pub utterance_id: String,
    pub waveform_hash: String,
    pub bucket: usize,
    pub intent: u32,
    pub transcript_id: u32,
    pub reference_transport: Vec<Symbol>,
    pub l1_key_len: Option<usize>,
    pub l2_key_len: usize,
    pub model_push_hashes: Option<Vec<String>>,
}

impl TraceRecord {
    pub fn from_exchange(
        seq: u64,
        request: &OffloadRequest,
        response: &OffloadResponse,
    ) -> TraceRecord {
        TraceRecord {
            seq,
            device_id: request.device_id,
            utterance_id: request.utterance_id.clone(),
            waveform_hash: request.waveform_hash(),
            bucket: request.bucket,
            intent: response.intent,
            transcript_id: response.transcript_id,
            reference_transport: response.reference_transport.clone(),
            l1_key_len: response.l1_entry.as_ref().map(|e| e.key.len()),
            l2_key_len: response.l2_entry.key.len(),
            model_push_hashes: response
                .model_push
                .as_ref()
                .map(|p| p.content_hashes.clone()),
        }
    }
}

//! Corpus manifests: JSON-lines records binding utterances to audio,
//! speakers, transcripts and intent labels.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::harness::HarnessError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub utterance_id: String,
    /// Audio file relative to the manifest: `.wav` for 16-bit PCM, anything
    /// else is raw little-endian float32 with `sample_rate` as the sidecar.
    pub audio: String,
    pub speaker_id: String,
    pub transcript: String,
    pub intent: u32,
    /// Recording condition tag ("close" / "far").
    pub condition: String,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
    /// Dense transcript ids in sorted-transcript order.
    transcript_ids: BTreeMap<String, u32>,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: PathBuf) -> Result<Manifest, HarnessError> {
        let mut seen = std::collections::HashSet::new();
        let mut intents = std::collections::BTreeSet::new();
        for r in &records {
            if !seen.insert(r.utterance_id.clone()) {
                return Err(HarnessError::BadManifest(format!(
                    "duplicate utterance id {}",
                    r.utterance_id
                )));
            }
            if r.duration_s <= 0.0 {
                return Err(HarnessError::BadManifest(format!(
                    "utterance {} has non-positive duration",
                    r.utterance_id
                )));
            }
            intents.insert(r.intent);
        }
        // intents must form a dense label space
        for (expect, &got) in intents.iter().enumerate() {
            if expect as u32 != got {
                return Err(HarnessError::BadManifest(format!(
                    "intent labels are not dense: missing {expect}"
                )));
            }
        }
        let mut transcript_ids = BTreeMap::new();
        for r in &records {
            let next = transcript_ids.len() as u32;
            transcript_ids.entry(r.transcript.clone()).or_insert(next);
        }
        Ok(Manifest {
            records,
            base_dir,
            transcript_ids,
        })
    }

    pub fn load_jsonl(path: &Path) -> Result<Manifest, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| HarnessError::BadManifest(format!("line {}: {e}", i + 1)))?;
            records.push(record);
        }
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Manifest::new(records, base)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<(), HarnessError> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn transcript_id(&self, transcript: &str) -> u32 {
        self.transcript_ids[transcript]
    }

    pub fn intent_count(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.intent)
            .collect::<std::collections::HashSet<_>>()
            .len()
    }
}

/// Resolves utterance audio, either from disk or from memory.
pub trait AudioSource {
    fn waveform(&self, record: &ManifestRecord) -> Result<Waveform, HarnessError>;
}

pub struct DiskAudio {
    pub base_dir: PathBuf,
}

impl AudioSource for DiskAudio {
    fn waveform(&self, record: &ManifestRecord) -> Result<Waveform, HarnessError> {
        let path = self.base_dir.join(&record.audio);
        let w = if path.extension().and_then(|e| e.to_str()) == Some("wav") {
            Waveform::read_wav(&path)?
        } else {
            let sr = record.sample_rate.ok_or_else(|| {
                HarnessError::BadManifest(format!(
                    "utterance {} uses raw audio but has no sample_rate",
                    record.utterance_id
                ))
            })?;
            Waveform::read_raw_f32(&path, sr)?
        };
        Ok(w)
    }
}

pub struct MemoryAudio {
    pub map: HashMap<String, Waveform>,
}

impl AudioSource for MemoryAudio {
    fn waveform(&self, record: &ManifestRecord) -> Result<Waveform, HarnessError> {
        self.map.get(&record.utterance_id).cloned().ok_or_else(|| {
            HarnessError::BadManifest(format!("no in-memory audio for {}", record.utterance_id))
        })
    }
}

//! Device-side flow: routing, the L1 -> L2 -> offload ladder, installs,
//! warm-up and model pushes, exercised over real audio and a live cloud.

use std::collections::HashMap;

use slucache::cloud::{Cloud, CloudConfig, GroundTruth};
use slucache::config::SystemConfig;
use slucache::device::{BucketConfig, Device, Level};
use slucache::dsp::FrontendModel;
use slucache::gru::GruStack;
use slucache::harness::synth::{synth_dataset, JitterSpec, SynthSpec};
use slucache::l1::L1Config;
use slucache::l2::ALPHABET_SIZE;
use slucache::proto::CloudResolver;
use slucache::store::CacheStore;
use slucache::threshold::{ThresholdPolicy, ThresholdTable};

struct Rig {
    device: Device,
    cloud: Cloud,
    corpus: slucache::harness::synth::SynthCorpus,
}

fn rig(tokens: (usize, usize), capacity: usize, push_every_n: u64) -> Rig {
    let corpus = synth_dataset(&SynthSpec {
        transcripts: 5,
        vocab: 18,
        speakers: 1,
        repeats: 2,
        tokens_min: tokens.0,
        tokens_max: tokens.1,
        jitter: JitterSpec::none(),
        seed: 77,
        ..SynthSpec::default()
    })
    .unwrap();
    let cfg = SystemConfig::default();
    let frame_spec = cfg.frame_spec();
    let frontend = FrontendModel::seeded_with_channels(9, 16_000, &frame_spec, 16);
    let buckets = BucketConfig::default();
    let l1_cfg = L1Config {
        k: 10,
        ..L1Config::default()
    };
    let models: Vec<GruStack> = (0..buckets.count())
        .map(|b| GruStack::seeded(50 + b as u64, frontend.feature_dim(), 12, ALPHABET_SIZE))
        .collect();
    let device = Device {
        id: 1,
        frontend: frontend.clone(),
        frame_spec,
        bucket_models: models.iter().map(|m| m.clone_detached()).collect(),
        store: CacheStore::new(capacity, 8),
        buckets: buckets.clone(),
        thresholds: ThresholdPolicy::Static(ThresholdTable::uniform(buckets.count(), 1.0, 2.0)),
        l1_cfg,
        install_on_offload: true,
        accept_model_push: true,
    };
    let mut directory = HashMap::new();
    for r in &corpus.manifest.records {
        directory.insert(
            r.utterance_id.clone(),
            GroundTruth {
                transcript: r.transcript.clone(),
                intent: r.intent,
                transcript_id: corpus.manifest.transcript_id(&r.transcript),
            },
        );
    }
    let cloud = Cloud::new(
        directory,
        corpus.lexicon.clone(),
        frontend,
        frame_spec,
        buckets,
        models,
        CloudConfig {
            push_every_n,
            finetune: false,
            l1_cfg: L1Config {
                k: 10,
                ..L1Config::default()
            },
            augment: slucache::cloud::AugmentationSpec {
                versions: 1,
                ..slucache::cloud::AugmentationSpec::default()
            },
            seed: 4,
            ..CloudConfig::default()
        },
    );
    Rig {
        device,
        cloud,
        corpus,
    }
}

#[test]
fn cold_cache_offloads_and_installs() {
    let mut r = rig((7, 8), 60, 100);
    let rec = &r.corpus.manifest.records[0];
    let w = &r.corpus.audio.map[&rec.utterance_id];
    let outcome = r.device.lookup(&rec.utterance_id, w, &mut r.cloud).unwrap();
    assert_eq!(outcome.level, Level::Offload);
    assert_eq!(outcome.intent, rec.intent);
    assert_eq!(r.device.store.l1_entries().len(), 1);
    assert_eq!(r.device.store.l2_entries().len(), 1);
}

#[test]
fn exact_replay_hits_l1_in_long_bucket() {
    let mut r = rig((7, 8), 60, 100);
    let rec = &r.corpus.manifest.records[0];
    let w = &r.corpus.audio.map[&rec.utterance_id];
    assert!(w.duration_s() > 2.7, "fixture must land outside bucket 0");
    r.device.lookup(&rec.utterance_id, w, &mut r.cloud).unwrap();
    let outcome = r.device.lookup(&rec.utterance_id, w, &mut r.cloud).unwrap();
    assert_eq!(outcome.level, Level::L1Hit);
    assert_eq!(outcome.intent, rec.intent);
}

#[test]
fn short_replay_bypasses_l1_and_hits_l2() {
    let mut r = rig((2, 2), 60, 100);
    let rec = &r.corpus.manifest.records[0];
    let w = &r.corpus.audio.map[&rec.utterance_id];
    assert!(w.duration_s() <= 2.7);
    r.device.lookup(&rec.utterance_id, w, &mut r.cloud).unwrap();
    // generous threshold: the exact replay must win through L2 even with an
    // untrained extractor, since it shares every posterior with itself
    r.device.thresholds = ThresholdPolicy::Static(ThresholdTable::uniform(3, 1.0, 1e9));
    let outcome = r.device.lookup(&rec.utterance_id, w, &mut r.cloud).unwrap();
    assert_eq!(outcome.level, Level::L2Hit, "losses: {:?}", outcome.l2_loss);
    assert!(outcome.l1_loss.is_none(), "L1 must be bypassed in bucket 0");
    assert_eq!(outcome.intent, rec.intent);
}

#[test]
fn hits_mutate_only_recency() {
    let mut r = rig((7, 8), 60, 100);
    let rec = &r.corpus.manifest.records[0];
    let w = &r.corpus.audio.map[&rec.utterance_id];
    r.device.lookup(&rec.utterance_id, w, &mut r.cloud).unwrap();
    let digest = r.device.store.content_digest();
    let len = r.device.store.len();
    let outcome = r.device.lookup(&rec.utterance_id, w, &mut r.cloud).unwrap();
    assert_ne!(outcome.level, Level::Offload);
    assert_eq!(r.device.store.content_digest(), digest);
    assert_eq!(r.device.store.len(), len);
}

#[test]
fn flow_is_exclusive_per_input() {
    let mut r = rig((7, 8), 60, 100);
    for rec in &r.corpus.manifest.records {
        let w = &r.corpus.audio.map[&rec.utterance_id];
        let outcome = r.device.lookup(&rec.utterance_id, w, &mut r.cloud).unwrap();
        // exactly one resolution level, and an intent at every level
        match outcome.level {
            Level::L1Hit => assert!(outcome.l2_loss.is_none()),
            Level::L2Hit | Level::Offload => {}
        }
        assert_eq!(outcome.intent, rec.intent);
    }
}

#[test]
fn model_push_applies_on_cadence() {
    let mut r = rig((7, 8), 60, 2);
    // force both lookups to the cloud so the counter reaches the cadence
    r.device.thresholds = ThresholdPolicy::ForceOffload;
    let before: Vec<String> = r
        .device
        .bucket_models
        .iter()
        .map(|m| m.content_hash())
        .collect();
    // force distinct shadows cloud-side so an applied push is observable
    let recs: Vec<_> = r.corpus.manifest.records.iter().take(2).cloned().collect();
    for rec in &recs {
        let w = &r.corpus.audio.map[&rec.utterance_id];
        r.device.lookup(&rec.utterance_id, w, &mut r.cloud).unwrap();
    }
    assert_eq!(r.cloud.offload_count(), 2);
    let after: Vec<String> = r
        .device
        .bucket_models
        .iter()
        .map(|m| m.content_hash())
        .collect();
    // without finetuning the shadows equal the initial models, so hashes
    // must round-trip identically through the push payload
    assert_eq!(before, after);
}

#[test]
fn warm_up_preloads_until_capacity() {
    let mut r = rig((7, 8), 60, 100);
    // build a donor store with five entries via real offloads
    for rec in r.corpus.manifest.records.clone().iter().take(5) {
        let w = &r.corpus.audio.map[&rec.utterance_id];
        r.device.lookup(&rec.utterance_id, w, &mut r.cloud).unwrap();
    }
    let snapshot_bytes = r.device.store.to_snapshot_bytes();
    let snapshot = CacheStore::from_snapshot_bytes(&snapshot_bytes).unwrap();

    // fresh device with plenty of room: all entries install
    let mut fresh = rig((7, 8), 60, 100);
    let report = fresh.device.warm_up(&snapshot);
    assert_eq!(report.installed, snapshot.len());
    assert!(!report.truncated());
    // a preloaded entry serves a replay without any offload
    let rec = &r.corpus.manifest.records[0];
    let w = &r.corpus.audio.map[&rec.utterance_id];
    let outcome = fresh
        .device
        .lookup(&rec.utterance_id, w, &mut fresh.cloud)
        .unwrap();
    assert_eq!(outcome.level, Level::L1Hit);

    // cramped device: preload truncates instead of evicting
    let mut tiny = rig((7, 8), 3, 100);
    let report = tiny.device.warm_up(&snapshot);
    assert_eq!(report.installed, 3);
    assert!(report.truncated());
    assert_eq!(tiny.device.store.len(), 3);
}

#[test]
fn empty_preload_stays_cold() {
    let mut r = rig((7, 8), 60, 100);
    let empty = CacheStore::new(10, 4);
    let report = r.device.warm_up(&empty);
    assert_eq!(report.installed, 0);
    let rec = &r.corpus.manifest.records[0];
    let w = &r.corpus.audio.map[&rec.utterance_id];
    let outcome = r.device.lookup(&rec.utterance_id, w, &mut r.cloud).unwrap();
    assert_eq!(outcome.level, Level::Offload);
}

#[test]
fn malformed_snapshot_is_bad_preload() {
    let err = CacheStore::from_snapshot_bytes(b"not a snapshot").unwrap_err();
    assert!(matches!(err, slucache::store::StoreError::BadPreload(_)));
}

#[test]
fn frozen_device_rejects_nothing_but_installs_nothing() {
    let mut r = rig((7, 8), 60, 100);
    r.device.install_on_offload = false;
    r.device.accept_model_push = false;
    let rec = &r.corpus.manifest.records[0];
    let w = &r.corpus.audio.map[&rec.utterance_id];
    let outcome = r.device.lookup(&rec.utterance_id, w, &mut r.cloud).unwrap();
    assert_eq!(outcome.level, Level::Offload);
    assert_eq!(outcome.intent, rec.intent);
    assert!(r.device.store.is_empty());
}

#[test]
fn offload_requests_resolve_against_manifest_truth() {
    let mut r = rig((7, 8), 60, 100);
    let rec = r.corpus.manifest.records[3].clone();
    let w = r.corpus.audio.map[&rec.utterance_id].clone();
    let request = slucache::proto::OffloadRequest {
        device_id: 1,
        utterance_id: rec.utterance_id.clone(),
        bucket: 1,
        waveform: w,
    };
    let response = r.cloud.resolve(&request).unwrap();
    assert_eq!(response.intent, rec.intent);
    let expected = r.corpus.lexicon.tokenize(&rec.transcript).unwrap();
    assert_eq!(response.reference_transport, expected);
}

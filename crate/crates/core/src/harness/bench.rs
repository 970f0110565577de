//! Benchmark engine: phase-split tests per speaker (or speaker group),
//! metric aggregation and report emission.
//!
//! Each test has a learning phase — one utterance per cached transcript is
//! processed against an empty cache under force-offload thresholds, building
//! entries and finetuning the cloud shadows — and a test phase that queries
//! the remaining utterances against state frozen at the phase boundary
//! (tuned extractors synced to the device, installs and pushes disabled,
//! recency updates still live).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cloud::Lexicon;
use crate::cloud::{Cloud, GroundTruth};
use crate::config::{SystemConfig, ThresholdMode};
use crate::device::{BucketConfig, Device, Level};
use crate::dsp::FrontendModel;
use crate::gru::GruStack;
use crate::harness::latency::{account_energy, account_latency, LatencyModel};
use crate::harness::manifest::{AudioSource, Manifest, ManifestRecord};
use crate::harness::ops::{ops_budget, OpsBudget};
use crate::harness::HarnessError;
use crate::l1;
use crate::l2;
use crate::rng::{derive_seed, rng_from};
use crate::store::CacheStore;
use crate::threshold::{fit_threshold, ThresholdMlp, ThresholdPolicy, ThresholdTable};

use rand::seq::SliceRandom;

pub const REPORT_VERSION: u32 = 1;

/// The benchmark settings: who shares the device and how much of the test
/// traffic was seen during learning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum BenchmarkSetting {
    OneSpeakerAllSeen,
    OneSpeakerKSeen { k: u8 },
    NSpeakersAllSeen { n: usize },
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub inputs: u64,
    pub hits: u64,
    pub correct_hits: u64,
    pub filter_rate: f64,
    pub cache_accuracy: Option<f64>,
}

impl LevelMetrics {
    fn finalize(&mut self) {
        self.filter_rate = if self.inputs > 0 {
            self.hits as f64 / self.inputs as f64
        } else {
            0.0
        };
        self.cache_accuracy = if self.hits > 0 {
            Some(self.correct_hits as f64 / self.hits as f64)
        } else {
            None
        };
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub total_inputs: u64,
    pub l1: LevelMetrics,
    pub l2: LevelMetrics,
    pub offloads: u64,
    pub correct_total: u64,
    pub combined_filter_rate: f64,
    pub overall_accuracy: f64,
    pub mean_latency_ms: f64,
    pub mean_rtf: f64,
    pub mean_energy_mj: f64,
    #[serde(skip)]
    latency_sum: f64,
    #[serde(skip)]
    rtf_sum: f64,
    #[serde(skip)]
    energy_sum: f64,
}

impl AggregateMetrics {
    fn absorb(&mut self, other: &AggregateMetrics) {
        self.total_inputs += other.total_inputs;
        self.l1.inputs += other.l1.inputs;
        self.l1.hits += other.l1.hits;
        self.l1.correct_hits += other.l1.correct_hits;
        self.l2.inputs += other.l2.inputs;
        self.l2.hits += other.l2.hits;
        self.l2.correct_hits += other.l2.correct_hits;
        self.offloads += other.offloads;
        self.correct_total += other.correct_total;
        self.latency_sum += other.latency_sum;
        self.rtf_sum += other.rtf_sum;
        self.energy_sum += other.energy_sum;
    }

    fn finalize(&mut self) {
        self.l1.finalize();
        self.l2.finalize();
        let n = self.total_inputs.max(1) as f64;
        self.combined_filter_rate = (self.l1.hits + self.l2.hits) as f64 / n;
        self.overall_accuracy = self.correct_total as f64 / n;
        self.mean_latency_ms = self.latency_sum / n;
        self.mean_rtf = self.rtf_sum / n;
        self.mean_energy_mj = self.energy_sum / n;

        // metric identities
        let offload_fraction = self.offloads as f64 / n;
        assert!(
            (offload_fraction - (1.0 - self.combined_filter_rate)).abs() < 1e-9,
            "offload fraction must complement the combined filter rate"
        );
        assert_eq!(
            self.correct_total,
            self.l1.correct_hits + self.l2.correct_hits + self.offloads,
            "overall accuracy must decompose into level-weighted accuracies"
        );
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedThresholds {
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestMetrics {
    pub label: String,
    pub learning_inputs: u64,
    pub thresholds: FittedThresholds,
    pub metrics: AggregateMetrics,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub report_version: u32,
    pub setting: BenchmarkSetting,
    pub seed: u64,
    pub tests: usize,
    pub skipped_speakers: usize,
    pub totals: AggregateMetrics,
    pub per_test: Vec<TestMetrics>,
    pub ops_budget: OpsBudget,
    pub config: SystemConfig,
}

impl BenchmarkReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One test: learning-phase utterances (cached inputs) and test-phase
/// queries, all indices into the manifest.
#[derive(Debug, Clone)]
struct TestPlan {
    label: String,
    learning: Vec<usize>,
    test: Vec<usize>,
}

fn group_by_transcript<'a>(
    records: &'a [ManifestRecord],
    indices: &[usize],
) -> HashMap<&'a str, Vec<usize>> {
    let mut by_transcript: HashMap<&str, Vec<usize>> = HashMap::new();
    for &i in indices {
        by_transcript
            .entry(records[i].transcript.as_str())
            .or_default()
            .push(i);
    }
    by_transcript
}

/// All-seen plan over a pool of utterances: one cached input per transcript
/// with at least two utterances, everything else from those transcripts as
/// test inputs.
fn all_seen_plan(
    label: String,
    records: &[ManifestRecord],
    pool: &[usize],
    seed: u64,
) -> Option<TestPlan> {
    let by_transcript = group_by_transcript(records, pool);
    let mut transcripts: Vec<&str> = by_transcript.keys().cloned().collect();
    transcripts.sort_unstable();
    let mut learning = Vec::new();
    let mut test = Vec::new();
    for t in transcripts {
        let utts = &by_transcript[t];
        if utts.len() < 2 {
            continue;
        }
        let mut rng = rng_from(derive_seed(seed, &format!("cached:{label}:{t}")));
        let cached = utts[rand::Rng::gen_range(&mut rng, 0..utts.len())];
        learning.push(cached);
        test.extend(utts.iter().cloned().filter(|&i| i != cached));
    }
    if learning.is_empty() || test.is_empty() {
        return None;
    }
    learning.sort_unstable();
    test.sort_unstable();
    Some(TestPlan {
        label,
        learning,
        test,
    })
}

/// k%-seen plan: transcripts split into a cached half and an unseen half;
/// test inputs mix both sides so that k% of them have cached transcripts.
fn k_seen_plan(
    label: String,
    records: &[ManifestRecord],
    pool: &[usize],
    k: u8,
    seed: u64,
) -> Result<Option<TestPlan>, HarnessError> {
    if k == 100 {
        return Ok(all_seen_plan(label, records, pool, seed));
    }
    let by_transcript = group_by_transcript(records, pool);
    let mut transcripts: Vec<&str> = by_transcript.keys().cloned().collect();
    transcripts.sort_unstable();
    let mut rng = rng_from(derive_seed(seed, &format!("kseen:{label}")));
    transcripts.shuffle(&mut rng);
    // cached half must have >= 2 utterances per transcript to leave seen
    // test inputs; unseen half has no such requirement
    let eligible: Vec<&str> = transcripts
        .iter()
        .cloned()
        .filter(|t| by_transcript[t].len() >= 2)
        .collect();
    if eligible.len() < 2 {
        return Ok(None);
    }
    let cached_count = (eligible.len() / 2).max(1);
    let cached_set: std::collections::HashSet<&str> =
        eligible[..cached_count].iter().cloned().collect();

    let mut learning = Vec::new();
    let mut seen_tests = Vec::new();
    let mut unseen_tests = Vec::new();
    for t in &transcripts {
        let utts = &by_transcript[t];
        if cached_set.contains(t) {
            let mut rng = rng_from(derive_seed(seed, &format!("cached:{label}:{t}")));
            let cached = utts[rand::Rng::gen_range(&mut rng, 0..utts.len())];
            learning.push(cached);
            seen_tests.extend(utts.iter().cloned().filter(|&i| i != cached));
        } else {
            unseen_tests.extend(utts.iter().cloned());
        }
    }
    let r = k as f64 / 100.0;
    let (take_seen, take_unseen) = if k == 0 {
        (0usize, unseen_tests.len())
    } else {
        let s = seen_tests.len() as f64;
        let u = unseen_tests.len() as f64;
        if s == 0.0 || u == 0.0 {
            return Err(HarnessError::InfeasibleSetting(format!(
                "k={k}% needs both seen and unseen test inputs (have {s} seen, {u} unseen)"
            )));
        }
        if s / (s + u) > r {
            // seen side over-supplied
            let take_s = ((r * u) / (1.0 - r)).round() as usize;
            (take_s.min(seen_tests.len()), unseen_tests.len())
        } else {
            let take_u = ((s * (1.0 - r)) / r).round() as usize;
            (seen_tests.len(), take_u.min(unseen_tests.len()))
        }
    };
    if k > 0 && take_seen == 0 {
        return Err(HarnessError::InfeasibleSetting(format!(
            "k={k}% is unreachable with this manifest"
        )));
    }
    seen_tests.sort_unstable();
    unseen_tests.sort_unstable();
    let mut test: Vec<usize> = Vec::new();
    test.extend(seen_tests.into_iter().take(take_seen));
    test.extend(unseen_tests.into_iter().take(take_unseen));
    if learning.is_empty() || test.is_empty() {
        return Ok(None);
    }
    learning.sort_unstable();
    test.sort_unstable();
    Ok(Some(TestPlan {
        label,
        learning,
        test,
    }))
}

fn build_plans(
    manifest: &Manifest,
    setting: &BenchmarkSetting,
    cfg: &SystemConfig,
) -> Result<(Vec<TestPlan>, usize), HarnessError> {
    let records = &manifest.records;
    let mut by_speaker: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        by_speaker.entry(r.speaker_id.as_str()).or_default().push(i);
    }
    let mut speakers: Vec<&str> = by_speaker.keys().cloned().collect();
    speakers.sort_unstable();
    // speakers with too few utterances lack the data to warm the cache
    let mut skipped = 0usize;
    speakers.retain(|s| {
        if by_speaker[s].len() >= cfg.min_speaker_utterances {
            true
        } else {
            skipped += 1;
            false
        }
    });
    if speakers.is_empty() {
        return Err(HarnessError::InfeasibleSetting(
            "no speaker has enough utterances".into(),
        ));
    }

    let mut plans = Vec::new();
    match setting {
        BenchmarkSetting::OneSpeakerAllSeen => {
            for s in &speakers {
                if let Some(p) = all_seen_plan(s.to_string(), records, &by_speaker[s], cfg.seed) {
                    plans.push(p);
                }
            }
        }
        BenchmarkSetting::OneSpeakerKSeen { k } => {
            if *k > 100 {
                return Err(HarnessError::InfeasibleSetting(format!(
                    "k must lie in [0,100], got {k}"
                )));
            }
            for s in &speakers {
                if let Some(p) = k_seen_plan(s.to_string(), records, &by_speaker[s], *k, cfg.seed)?
                {
                    plans.push(p);
                }
            }
        }
        BenchmarkSetting::NSpeakersAllSeen { n } => {
            if *n == 0 || speakers.len() < *n {
                return Err(HarnessError::InfeasibleSetting(format!(
                    "cannot group {} speakers into groups of {n}",
                    speakers.len()
                )));
            }
            let mut shuffled = speakers.clone();
            let mut rng = rng_from(derive_seed(cfg.seed, "speaker-groups"));
            shuffled.shuffle(&mut rng);
            for group in shuffled.chunks(*n) {
                if group.len() < *n {
                    break; // drop the remainder
                }
                let label = group.join("+");
                let mut pool = Vec::new();
                for s in group {
                    pool.extend(by_speaker[s].iter().cloned());
                }
                if let Some(p) = all_seen_plan(label, records, &pool, cfg.seed) {
                    plans.push(p);
                }
            }
        }
    }
    if plans.is_empty() {
        return Err(HarnessError::InfeasibleSetting(
            "no test could be constructed for this setting".into(),
        ));
    }
    Ok((plans, skipped))
}

struct TestOutputs {
    metrics: TestMetrics,
}

#[allow(clippy::too_many_arguments)]
fn run_test(
    plan: &TestPlan,
    manifest: &Manifest,
    audio: &dyn AudioSource,
    lexicon: &Lexicon,
    cfg: &SystemConfig,
    frontend: &FrontendModel,
    device_idx: u32,
    trace_dir: Option<&std::path::Path>,
) -> Result<TestOutputs, HarnessError> {
    let records = &manifest.records;
    let frame_spec = cfg.frame_spec();
    let buckets: BucketConfig = cfg.bucket_config();
    let input_dim = frontend.feature_dim();
    let bucket_models: Vec<GruStack> = (0..buckets.count())
        .map(|b| {
            GruStack::seeded(
                derive_seed(cfg.seed, &format!("gru:{b}")),
                input_dim,
                cfg.gru_hidden,
                l2::ALPHABET_SIZE,
            )
        })
        .collect();

    let mut device = Device {
        id: device_idx,
        frontend: frontend.clone(),
        frame_spec,
        bucket_models: bucket_models.iter().map(|m| m.clone_detached()).collect(),
        store: CacheStore::new(cfg.capacity, cfg.per_intent_cap),
        buckets: buckets.clone(),
        thresholds: ThresholdPolicy::ForceOffload,
        l1_cfg: cfg.l1_config(),
        install_on_offload: true,
        accept_model_push: true,
    };

    let mut directory = HashMap::new();
    for r in records {
        directory.insert(
            r.utterance_id.clone(),
            GroundTruth {
                transcript: r.transcript.clone(),
                intent: r.intent,
                transcript_id: manifest.transcript_id(&r.transcript),
            },
        );
    }
    let mut cloud = Cloud::new(
        directory,
        lexicon.clone(),
        frontend.clone(),
        frame_spec,
        buckets.clone(),
        bucket_models,
        cfg.cloud_config(),
    );
    if let Some(dir) = trace_dir {
        std::fs::create_dir_all(dir)?;
        let file = std::fs::File::create(dir.join(format!("trace-{}.ndjson", plan.label)))?;
        cloud.set_trace(Box::new(std::io::BufWriter::new(file)));
    }

    // in-domain base training on corpus audio outside this test's queries
    if cfg.in_domain_fraction > 0.0 {
        let test_set: std::collections::HashSet<usize> = plan.test.iter().cloned().collect();
        let corpus: Vec<(crate::audio::Waveform, String)> = records
            .iter()
            .enumerate()
            .filter(|(i, _)| !test_set.contains(i))
            .map(|(_, r)| Ok((audio.waveform(r)?, r.transcript.clone())))
            .collect::<Result<_, HarnessError>>()?;
        cloud
            .in_domain_pretrain(&corpus, cfg.in_domain_fraction)
            .map_err(HarnessError::Cloud)?;
        // the pretrained base ships to the device before deployment
        device.apply_model_push(&cloud.make_push())?;
    }

    // learning phase: cached inputs processed against force-offload
    // thresholds, building the cache and finetuning the shadows
    for &i in &plan.learning {
        let record = &records[i];
        let w = audio.waveform(record)?;
        let outcome = device.lookup(&record.utterance_id, &w, &mut cloud)?;
        debug_assert_eq!(outcome.level, Level::Offload);
    }
    // phase boundary: the tuned shadows come down to the device
    device.apply_model_push(&cloud.make_push())?;

    // replay learning inputs through the frozen state for threshold fitting
    let mut replays = Vec::new();
    for &i in &plan.learning {
        let record = &records[i];
        let w = audio.waveform(record)?;
        let features = device.feature_of(&w)?;
        replays.push((i, record, features));
    }
    let (table, l1_targets, l2_targets) = fit_thresholds(&device, manifest, &replays);

    let fitted = FittedThresholds {
        l1: table.l1.clone(),
        l2: table.l2.clone(),
    };
    device.thresholds = match cfg.threshold_mode {
        ThresholdMode::FitStatic => ThresholdPolicy::Static(table),
        ThresholdMode::Static => ThresholdPolicy::Static(ThresholdTable::uniform(
            buckets.count(),
            cfg.static_l1_threshold,
            cfg.static_l2_threshold,
        )),
        ThresholdMode::Mlp => {
            let mut l1_mlp = ThresholdMlp::seeded(derive_seed(cfg.seed, "mlp-l1"), 64);
            let mut l2_mlp = ThresholdMlp::seeded(derive_seed(cfg.seed, "mlp-l2"), 64);
            if !l1_targets.is_empty() {
                l1_mlp.fit(&l1_targets, 300, 5e-3);
            }
            if !l2_targets.is_empty() {
                l2_mlp.fit(&l2_targets, 300, 5e-3);
            }
            ThresholdPolicy::Mlp {
                l1: l1_mlp,
                l2: l2_mlp,
            }
        }
    };

    // test phase: everything frozen at the phase boundary
    device.install_on_offload = false;
    device.accept_model_push = false;
    cloud.set_finetune(false);

    let latency_model = LatencyModel::from(cfg);
    let mut agg = AggregateMetrics::default();
    for &i in &plan.test {
        let record = &records[i];
        let w = audio.waveform(record)?;
        let outcome = device.lookup(&record.utterance_id, &w, &mut cloud)?;
        let mut rng = rng_from(derive_seed(
            cfg.seed,
            &format!("latency:{}", record.utterance_id),
        ));
        let latency = account_latency(outcome.level, record.duration_s, &latency_model, &mut rng);
        let energy = account_energy(latency, cfg.active_power_mw);
        let correct = outcome.intent == record.intent;

        agg.total_inputs += 1;
        if !device.buckets.bypasses_l1(outcome.bucket) {
            agg.l1.inputs += 1;
        }
        match outcome.level {
            Level::L1Hit => {
                agg.l1.hits += 1;
                if correct {
                    agg.l1.correct_hits += 1;
                    agg.correct_total += 1;
                }
            }
            Level::L2Hit => {
                agg.l2.inputs += 1;
                agg.l2.hits += 1;
                if correct {
                    agg.l2.correct_hits += 1;
                    agg.correct_total += 1;
                }
            }
            Level::Offload => {
                agg.l2.inputs += 1;
                agg.offloads += 1;
                // the cloud oracle answers from ground truth
                debug_assert!(correct);
                agg.correct_total += 1;
            }
        }
        agg.latency_sum += latency;
        agg.rtf_sum += latency / (record.duration_s * 1000.0);
        agg.energy_sum += energy;
    }
    agg.finalize();

    Ok(TestOutputs {
        metrics: TestMetrics {
            label: plan.label.clone(),
            learning_inputs: plan.learning.len() as u64,
            thresholds: fitted,
            metrics: agg,
        },
    })
}

/// Per-entry (key length, best threshold) regression samples.
type EntryTargets = Vec<(usize, f64)>;

/// Replay the learning utterances through the frozen post-learning state,
/// separate same-transcript (positive) from cross-transcript (negative)
/// losses, and fit per-level per-bucket cuts. Also returns per-entry
/// (key length, best threshold) samples for the MLP variant.
fn fit_thresholds(
    device: &Device,
    manifest: &Manifest,
    replays: &[(usize, &ManifestRecord, crate::dsp::FeatureSequence)],
) -> (ThresholdTable, EntryTargets, EntryTargets) {
    let buckets = device.buckets.count();
    let mut l1_pos: Vec<Vec<f64>> = vec![Vec::new(); buckets];
    let mut l1_neg: Vec<Vec<f64>> = vec![Vec::new(); buckets];
    let mut l2_pos: Vec<Vec<f64>> = vec![Vec::new(); buckets];
    let mut l2_neg: Vec<Vec<f64>> = vec![Vec::new(); buckets];
    // per-entry split, keyed by (level, entry index)
    let mut l1_entry: Vec<(usize, Vec<f64>, Vec<f64>)> = device
        .store
        .l1_entries()
        .iter()
        .map(|e| (e.key.len(), Vec::new(), Vec::new()))
        .collect();
    let mut l2_entry: Vec<(usize, Vec<f64>, Vec<f64>)> = device
        .store
        .l2_entries()
        .iter()
        .map(|e| (e.key.len(), Vec::new(), Vec::new()))
        .collect();

    for (_, record, features) in replays {
        let bucket = device.buckets.route(record.duration_s);
        let tid = manifest.transcript_id(&record.transcript);
        if !device.buckets.bypasses_l1(bucket) {
            for (ei, entry) in device.store.l1_entries().iter().enumerate() {
                if let Ok(loss) = l1::entry_loss(features, entry, &device.l1_cfg) {
                    if !loss.is_finite() {
                        continue;
                    }
                    if entry.transcript_id == tid {
                        l1_pos[bucket].push(loss);
                        l1_entry[ei].1.push(loss);
                    } else {
                        l1_neg[bucket].push(loss);
                        l1_entry[ei].2.push(loss);
                    }
                }
            }
        }
        let model = &device.bucket_models[bucket];
        if let Ok(posts) = l2::phoneme_posteriors(features, model) {
            for (ei, entry) in device.store.l2_entries().iter().enumerate() {
                let loss = l2::entry_loss(&posts, entry);
                if !loss.is_finite() {
                    continue;
                }
                if entry.transcript_id == tid {
                    l2_pos[bucket].push(loss);
                    l2_entry[ei].1.push(loss);
                } else {
                    l2_neg[bucket].push(loss);
                    l2_entry[ei].2.push(loss);
                }
            }
        }
    }

    // a bucket that saw no learning traffic borrows the pooled samples
    let pool_all =
        |per_bucket: &[Vec<f64>]| -> Vec<f64> { per_bucket.iter().flatten().cloned().collect() };
    let fit_per_bucket = |pos: &[Vec<f64>], neg: &[Vec<f64>]| -> Vec<f64> {
        (0..buckets)
            .map(|b| {
                if pos[b].is_empty() {
                    fit_threshold(&pool_all(pos), &pool_all(neg))
                } else {
                    fit_threshold(&pos[b], &neg[b])
                }
            })
            .collect()
    };
    let table = ThresholdTable {
        l1: fit_per_bucket(&l1_pos, &l1_neg),
        l2: fit_per_bucket(&l2_pos, &l2_neg),
    };
    let entry_targets = |entries: Vec<(usize, Vec<f64>, Vec<f64>)>| -> Vec<(usize, f64)> {
        entries
            .into_iter()
            .filter(|(_, pos, _)| !pos.is_empty())
            .map(|(len, pos, neg)| (len, fit_threshold(&pos, &neg)))
            .collect()
    };
    (table, entry_targets(l1_entry), entry_targets(l2_entry))
}

/// Run the benchmark over a manifest. Deterministic given config and seed:
/// per-test pipelines are independent and aggregation is an ordered
/// reduction, so the worker count cannot change the report.
pub fn run_benchmark(
    manifest: &Manifest,
    audio: &(dyn AudioSource + Sync),
    lexicon: &Lexicon,
    setting: BenchmarkSetting,
    cfg: &SystemConfig,
) -> Result<BenchmarkReport, HarnessError> {
    run_benchmark_traced(manifest, audio, lexicon, setting, cfg, None)
}

/// As [`run_benchmark`], optionally writing one NDJSON exchange trace per
/// test into `trace_dir`.
pub fn run_benchmark_traced(
    manifest: &Manifest,
    audio: &(dyn AudioSource + Sync),
    lexicon: &Lexicon,
    setting: BenchmarkSetting,
    cfg: &SystemConfig,
    trace_dir: Option<&std::path::Path>,
) -> Result<BenchmarkReport, HarnessError> {
    lexicon
        .validate_covers(manifest.records.iter().map(|r| r.transcript.as_str()))
        .map_err(HarnessError::Cloud)?;
    let (plans, skipped) = build_plans(manifest, &setting, cfg)?;
    let frontend = FrontendModel::seeded_with_channels(
        derive_seed(cfg.seed, "frontend"),
        cfg.sample_rate,
        &cfg.frame_spec(),
        cfg.feature_channels,
    );

    let workers = cfg.workers.max(1).min(plans.len());
    let mut per_test: Vec<TestMetrics> = Vec::with_capacity(plans.len());
    if workers <= 1 {
        for (i, plan) in plans.iter().enumerate() {
            per_test.push(
                run_test(
                    plan, manifest, audio, lexicon, cfg, &frontend, i as u32, trace_dir,
                )?
                .metrics,
            );
        }
    } else {
        let results: Vec<Option<Result<TestMetrics, HarnessError>>> = std::thread::scope(|scope| {
            let mut slots: Vec<Option<Result<TestMetrics, HarnessError>>> =
                (0..plans.len()).map(|_| None).collect();
            let mut handles = Vec::new();
            for (chunk_idx, chunk) in plans.chunks(plans.len().div_ceil(workers)).enumerate() {
                let frontend = &frontend;
                let base = chunk_idx * plans.len().div_ceil(workers);
                handles.push(scope.spawn(move || {
                    let mut out = Vec::new();
                    for (j, plan) in chunk.iter().enumerate() {
                        let idx = base + j;
                        out.push((
                            idx,
                            run_test(
                                plan, manifest, audio, lexicon, cfg, frontend, idx as u32,
                                trace_dir,
                            )
                            .map(|o| o.metrics),
                        ));
                    }
                    out
                }));
            }
            for h in handles {
                for (idx, res) in h.join().expect("benchmark worker panicked") {
                    slots[idx] = Some(res);
                }
            }
            slots
        });
        for slot in results {
            per_test.push(slot.expect("worker filled every slot")?);
        }
    }

    let mut totals = AggregateMetrics::default();
    for t in &per_test {
        totals.absorb(&t.metrics);
    }
    totals.finalize();

    // typical lookup shapes for the per-entry op figures
    let t_typical = {
        let frames = cfg.frame_spec().frame_count(3 * cfg.sample_rate as usize);
        frames.map(|f| frontend.output_len(f)).unwrap_or(0).max(1)
    };
    let u_typical = (t_typical / 5).max(1);
    let budget = ops_budget(
        cfg.feature_channels,
        cfg.window_len,
        crate::dsp::CONV_KERNEL,
        cfg.gru_hidden,
        l2::ALPHABET_SIZE,
        t_typical,
        u_typical,
    );

    Ok(BenchmarkReport {
        report_version: REPORT_VERSION,
        setting,
        seed: cfg.seed,
        tests: per_test.len(),
        skipped_speakers: skipped,
        totals,
        per_test,
        ops_budget: budget,
        config: cfg.clone(),
    })
}

/// Human-readable summary of a report.
pub fn render_text(report: &BenchmarkReport) -> String {
    let t = &report.totals;
    let ca = |m: &LevelMetrics| match m.cache_accuracy {
        Some(v) => format!("{v:.3}"),
        None => "-".to_string(),
    };
    let mut out = String::new();
    out.push_str(&format!(
        "setting: {}   seed: {}   tests: {}   skipped speakers: {}\n",
        serde_json::to_string(&report.setting).unwrap_or_default(),
        report.seed,
        report.tests,
        report.skipped_speakers
    ));
    out.push_str(&format!("inputs: {}\n\n", t.total_inputs));
    out.push_str("level   inputs    hits   filter-rate   cache-accuracy\n");
    out.push_str(&format!(
        "L1    {:>8} {:>7}   {:>11.4}   {:>14}\n",
        t.l1.inputs,
        t.l1.hits,
        t.l1.filter_rate,
        ca(&t.l1)
    ));
    out.push_str(&format!(
        "L2    {:>8} {:>7}   {:>11.4}   {:>14}\n",
        t.l2.inputs,
        t.l2.hits,
        t.l2.filter_rate,
        ca(&t.l2)
    ));
    out.push_str(&format!("offloads: {}\n", t.offloads));
    out.push_str(&format!(
        "combined filter rate: {:.4}   overall accuracy: {:.4}\n",
        t.combined_filter_rate, t.overall_accuracy
    ));
    out.push_str(&format!(
        "mean latency: {:.1} ms   mean RTF: {:.4}   mean energy: {:.1} mJ\n\n",
        t.mean_latency_ms, t.mean_rtf, t.mean_energy_mj
    ));
    out.push_str(&crate::harness::ops::render_table(&report.ops_budget));
    out.push_str("\nper-test:\n");
    for pt in &report.per_test {
        out.push_str(&format!(
            "  {:<24} inputs={:<4} FR={:.4} acc={:.4} lat={:.1}ms\n",
            pt.label,
            pt.metrics.total_inputs,
            pt.metrics.combined_filter_rate,
            pt.metrics.overall_accuracy,
            pt.metrics.mean_latency_ms
        ));
    }
    out
}

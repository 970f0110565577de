//! Simulated cloud runtime.
//!
//! The cloud resolves offloaded utterances from manifest ground truth (its
//! intent answers are gold by construction), tokenizes transcripts into
//! reference phoneme sequences, mints L1/L2 entries, maintains per-bucket
//! shadow copies of the device extractor which it finetunes on real plus
//! augmented inputs, and pushes the shadows back every N offloads.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::audio::Waveform;
use crate::autodiff::{backward, ctc_loss_node, Adam};
use crate::ctc::{CollapseMode, LabelSequence, Symbol};
use crate::device::BucketConfig;
use crate::dsp::{self, FrameSpec, FrontendModel};
use crate::gru::GruStack;
use crate::l1::{self, L1Config};
use crate::l2::{self, L2Entry, BLANK};
use crate::proto::{
    CloudError, CloudResolver, ModelPush, OffloadRequest, OffloadResponse, TraceRecord,
};
use crate::rng::{derive_seed, rng_from, sample_normal};

/// Token-to-phoneme dictionary; word boundaries use the «sp» blank.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<Symbol>>,
}

impl Lexicon {
    pub fn from_entries(entries: BTreeMap<String, Vec<Symbol>>) -> Self {
        Lexicon { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[Symbol]> {
        self.entries.get(token).map(|v| v.as_slice())
    }

    /// Deterministic letter-free pronunciation table for a synthetic
    /// vocabulary: each token maps to 2-4 seeded phonemes.
    pub fn auto_for_vocab(tokens: &[String], seed: u64) -> Self {
        let mut entries = BTreeMap::new();
        for token in tokens {
            let mut rng = rng_from(derive_seed(seed, &format!("lex:{token}")));
            let len = rng.gen_range(2..=4);
            let phonemes: Vec<Symbol> = (0..len)
                .map(|_| rng.gen_range(0..l2::PHONEME_COUNT as Symbol))
                .collect();
            entries.insert(token.clone(), phonemes);
        }
        Lexicon { entries }
    }

    /// Transport-form phoneme sequence: per-word pronunciations joined by
    /// the blank marker.
    pub fn tokenize(&self, transcript: &str) -> Result<Vec<Symbol>, CloudError> {
        let tokens: Vec<&str> = transcript.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(CloudError::LexiconMiss("empty transcript".into()));
        }
        let mut out = Vec::new();
        for (i, token) in tokens.iter().enumerate() {
            let phonemes = self
                .entries
                .get(*token)
                .ok_or_else(|| CloudError::LexiconMiss((*token).to_string()))?;
            if i > 0 {
                out.push(BLANK as Symbol);
            }
            out.extend_from_slice(phonemes);
        }
        Ok(out)
    }

    /// Fail fast if any manifest transcript uses an unknown token.
    pub fn validate_covers<'a>(
        &self,
        transcripts: impl Iterator<Item = &'a str>,
    ) -> Result<(), CloudError> {
        for t in transcripts {
            for token in t.split_whitespace() {
                if !self.entries.contains_key(token) {
                    return Err(CloudError::LexiconMiss(token.to_string()));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let named: BTreeMap<&String, Vec<&str>> = self
            .entries
            .iter()
            .map(|(k, v)| (k, v.iter().map(|&p| l2::phoneme_name(p as usize)).collect()))
            .collect();
        serde_json::to_string_pretty(&named).expect("lexicon serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CloudError> {
        let named: BTreeMap<String, Vec<String>> = serde_json::from_str(text)
            .map_err(|e| CloudError::Internal(format!("lexicon parse: {e}")))?;
        let mut entries = BTreeMap::new();
        for (token, names) in named {
            let mut ids = Vec::with_capacity(names.len());
            for name in &names {
                let id = l2::PHONEMES.iter().position(|p| p == name).ok_or_else(|| {
                    CloudError::Internal(format!("unknown phoneme {name} for token {token}"))
                })?;
                ids.push(id as Symbol);
            }
            entries.insert(token, ids);
        }
        Ok(Lexicon { entries })
    }
}

/// Augmentation parameters: each family produces `versions` outputs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct AugmentationSpec {
    /// Temporal shift bound, percent of duration (uniform in +-).
    pub temporal_pct: f64,
    /// Frequency scaling bound, percent (uniform in +-).
    pub frequency_pct: f64,
    /// Gaussian noise sigma as a percent of the recording's max volume.
    pub noise_pct_of_max: f64,
    pub versions: usize,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            temporal_pct: 5.0,
            frequency_pct: 10.0,
            noise_pct_of_max: 5.0,
            versions: 5,
        }
    }
}

fn temporal_shift(w: &Waveform, pct: f64) -> Waveform {
    let n = ((w.len() as f64) * pct.abs() / 100.0).round() as usize;
    let samples = if n == 0 {
        w.samples.clone()
    } else if pct >= 0.0 {
        // speech starts later: silence prepended
        let mut s = vec![0.0f32; n];
        s.extend_from_slice(&w.samples);
        s
    } else {
        // speech started before recording: leading samples lost
        w.samples[n.min(w.len() - 1)..].to_vec()
    };
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

fn frequency_shift(w: &Waveform, pct: f64) -> Waveform {
    // resample by (1 + pct/100), then re-normalize the length
    let r = 1.0 + pct / 100.0;
    let n = w.len();
    let m = (((n - 1) as f64) / r).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    for i in 0..m {
        let x = i as f64 * r;
        let lo = x.floor() as usize;
        let frac = (x - lo as f64) as f32;
        let a = w.samples[lo.min(n - 1)];
        let b = w.samples[(lo + 1).min(n - 1)];
        out.push(a + (b - a) * frac);
    }
    out.resize(n, 0.0);
    Waveform {
        samples: out,
        sample_rate: w.sample_rate,
    }
}

fn add_noise(w: &Waveform, sigma: f64, rng: &mut rand_pcg::Pcg64Mcg) -> Waveform {
    let samples = w
        .samples
        .iter()
        .map(|&s| (s + (sample_normal(rng) * sigma) as f32).clamp(-1.0, 1.0))
        .collect();
    Waveform {
        samples,
        sample_rate: w.sample_rate,
    }
}

/// Augmented variants of a waveform: `versions` temporal shifts, `versions`
/// frequency shifts, `versions` noisy copies, in that order. Deterministic
/// per seed; amplitudes clipped to [-1, 1].
pub fn augment(waveform: &Waveform, spec: &AugmentationSpec, seed: u64) -> Vec<Waveform> {
    let mut out = Vec::with_capacity(3 * spec.versions);
    let mut rng = rng_from(derive_seed(seed, "augment-temporal"));
    for _ in 0..spec.versions {
        let pct = rng.gen_range(-spec.temporal_pct..=spec.temporal_pct);
        out.push(temporal_shift(waveform, pct));
    }
    let mut rng = rng_from(derive_seed(seed, "augment-frequency"));
    for _ in 0..spec.versions {
        let pct = rng.gen_range(-spec.frequency_pct..=spec.frequency_pct);
        out.push(frequency_shift(waveform, pct));
    }
    let mut rng = rng_from(derive_seed(seed, "augment-noise"));
    let max_volume = waveform.samples.iter().fold(0.0f32, |m, &s| m.max(s.abs())) as f64;
    let sigma = spec.noise_pct_of_max / 100.0 * max_volume;
    for _ in 0..spec.versions {
        out.push(add_noise(waveform, sigma, &mut rng));
    }
    out
}

/// Ground truth for one manifest utterance.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub transcript: String,
    pub intent: u32,
    pub transcript_id: u32,
}

/// One training example: extracted features plus the reference target.
pub struct TrainExample {
    pub features: Vec<Vec<f32>>,
    pub target: LabelSequence,
}

#[derive(Debug, Clone)]
pub struct CloudConfig {
    pub push_every_n: u64,
    pub finetune: bool,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop when the epoch-mean loss improves by less than this fraction
    /// over `converge_window` epochs.
    pub converge_rel_improvement: f64,
    pub converge_window: usize,
    pub augment: AugmentationSpec,
    pub l1_cfg: L1Config,
    pub seed: u64,
}

impl Default for CloudConfig {
    fn default() -> Self {
        CloudConfig {
            push_every_n: 100,
            finetune: true,
            finetune_lr: 1e-4,
            batch_size: 16,
            max_epochs: 50,
            converge_rel_improvement: 0.01,
            converge_window: 3,
            augment: AugmentationSpec::default(),
            l1_cfg: L1Config::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FinetuneReport {
    pub epochs_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub struct Cloud {
    directory: HashMap<String, GroundTruth>,
    pub lexicon: Lexicon,
    frontend: FrontendModel,
    frame_spec: FrameSpec,
    buckets: BucketConfig,
    shadow_models: Vec<GruStack>,
    optimizers: Vec<Adam>,
    pools: Vec<Vec<TrainExample>>,
    offload_count: u64,
    cfg: CloudConfig,
    frontend_hash: String,
    trace: Option<Box<dyn Write>>,
}

impl Cloud {
    /// Build the cloud runtime. `shadow_models` must mirror the device's
    /// initial bucket models; the front-end is the shared frozen extractor.
    pub fn new(
        directory: HashMap<String, GroundTruth>,
        lexicon: Lexicon,
        frontend: FrontendModel,
        frame_spec: FrameSpec,
        buckets: BucketConfig,
        shadow_models: Vec<GruStack>,
        cfg: CloudConfig,
    ) -> Self {
        assert_eq!(shadow_models.len(), buckets.count());
        let optimizers = shadow_models
            .iter()
            .map(|m| Adam::new(&m.params(), cfg.finetune_lr))
            .collect();
        let pools = (0..shadow_models.len()).map(|_| Vec::new()).collect();
        let frontend_hash = frontend.content_hash();
        Cloud {
            directory,
            lexicon,
            frontend,
            frame_spec,
            buckets,
            shadow_models,
            optimizers,
            pools,
            offload_count: 0,
            cfg,
            frontend_hash,
            trace: None,
        }
    }

    pub fn set_trace(&mut self, sink: Box<dyn Write>) {
        self.trace = Some(sink);
    }

    pub fn offload_count(&self) -> u64 {
        self.offload_count
    }

    /// Toggle online learning: with it off, offloads still resolve and mint
    /// entries but neither grow the training pools nor touch the shadows
    /// (the benchmark freezes the cloud at the test-phase boundary).
    pub fn set_finetune(&mut self, enabled: bool) {
        self.cfg.finetune = enabled;
    }

    pub fn frontend_hash(&self) -> &str {
        &self.frontend_hash
    }

    pub fn shadow_model(&self, bucket: usize) -> &GruStack {
        &self.shadow_models[bucket]
    }

    pub fn pool_len(&self, bucket: usize) -> usize {
        self.pools[bucket].len()
    }

    fn extract(&self, w: &Waveform) -> Result<Vec<Vec<f32>>, CloudError> {
        dsp::extract_features(w, &self.frontend, &self.frame_spec)
            .map(|f| f.frames)
            .map_err(|e| CloudError::Internal(format!("feature extraction: {e}")))
    }

    /// Current shadow models, serialized for a push.
    pub fn make_push(&self) -> ModelPush {
        let mut payloads = Vec::with_capacity(self.shadow_models.len());
        let mut hashes = Vec::with_capacity(self.shadow_models.len());
        for m in &self.shadow_models {
            let c = m.to_container();
            hashes.push(c.content_hash());
            payloads.push(c.to_bytes());
        }
        ModelPush {
            bucket_payloads: payloads,
            content_hashes: hashes,
        }
    }

    /// Finetune one bucket's shadow on its accumulated pool until the loss
    /// converges (or the epoch cap). Rolls back to the last finite epoch on
    /// divergence.
    pub fn finetune_bucket(&mut self, bucket: usize) -> Result<FinetuneReport, CloudError> {
        let pool = &self.pools[bucket];
        if pool.is_empty() {
            return Ok(FinetuneReport {
                epochs_run: 0,
                initial_loss: 0.0,
                final_loss: 0.0,
            });
        }
        let model = &self.shadow_models[bucket];
        let optimizer = &mut self.optimizers[bucket];
        let params = model.params();
        let blank = Some(model.outputs - 1);
        let mut epoch_means: Vec<f64> = Vec::new();
        let mut checkpoint: Vec<Vec<f64>> = params.iter().map(|p| p.values()).collect();
        let mut order: Vec<usize> = (0..pool.len()).collect();
        for epoch in 0..self.cfg.max_epochs {
            let mut rng = rng_from(derive_seed(
                self.cfg.seed,
                &format!("finetune:{bucket}:{}:{epoch}", self.offload_count),
            ));
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut counted = 0usize;
            for batch in order.chunks(self.cfg.batch_size) {
                for p in &params {
                    p.zero_grad();
                }
                let mut batch_loss_value = 0.0;
                let mut batch_members = 0usize;
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    let ex = &pool[i];
                    let rows = model
                        .forward_rows(&ex.features)
                        .map_err(|e| CloudError::Internal(format!("forward: {e}")))?;
                    match ctc_loss_node(&rows, &ex.target, CollapseMode::StandardCtc, blank) {
                        Ok(loss) => {
                            batch_loss_value += loss.scalar_value();
                            batch_members += 1;
                            losses.push(loss);
                        }
                        // an augmentation can fall below the feasible frame
                        // count; skip it rather than abort training
                        Err(_) => continue,
                    }
                }
                if losses.is_empty() {
                    continue;
                }
                let mut total = losses[0].clone();
                for l in &losses[1..] {
                    total = crate::autodiff::add(&total, l);
                }
                let scaled = crate::autodiff::affine(&total, 1.0 / batch_members as f64, 0.0);
                backward(&scaled).map_err(|e| CloudError::Internal(format!("backward: {e}")))?;
                optimizer.step(&params);
                epoch_loss += batch_loss_value;
                counted += batch_members;
            }
            if counted == 0 {
                break;
            }
            let mean = epoch_loss / counted as f64;
            if !mean.is_finite() {
                for (p, saved) in params.iter().zip(checkpoint.iter()) {
                    p.set_values(saved);
                }
                return Err(CloudError::TrainingDiverged);
            }
            checkpoint = params.iter().map(|p| p.values()).collect();
            epoch_means.push(mean);
            let w = self.cfg.converge_window;
            if epoch_means.len() > w {
                let then = epoch_means[epoch_means.len() - 1 - w];
                let now = epoch_means[epoch_means.len() - 1];
                if then > 0.0 && (then - now) / then < self.cfg.converge_rel_improvement {
                    break;
                }
            }
        }
        Ok(FinetuneReport {
            epochs_run: epoch_means.len(),
            initial_loss: epoch_means.first().copied().unwrap_or(0.0),
            final_loss: epoch_means.last().copied().unwrap_or(0.0),
        })
    }

    /// Train the base models on a fraction of the corpus before any
    /// per-device traffic (the in-domain "T" optimization). A fraction of 0
    /// leaves the models untouched.
    pub fn in_domain_pretrain(
        &mut self,
        corpus: &[(Waveform, String)],
        fraction: f64,
    ) -> Result<(), CloudError> {
        if fraction <= 0.0 || corpus.is_empty() {
            return Ok(());
        }
        let n = ((corpus.len() as f64 * fraction).floor() as usize).clamp(1, corpus.len());
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = rng_from(derive_seed(self.cfg.seed, "in-domain"));
        order.shuffle(&mut rng);
        for &i in order.iter().take(n) {
            let (w, transcript) = &corpus[i];
            let transport = self.lexicon.tokenize(transcript)?;
            let (target, _) = l2::strip_boundaries(&transport);
            if target.is_empty() {
                continue;
            }
            let features = self.extract(w)?;
            let bucket = self.buckets.route(w.duration_s());
            self.pools[bucket].push(TrainExample { features, target });
        }
        for bucket in 0..self.shadow_models.len() {
            if !self.pools[bucket].is_empty() {
                self.finetune_bucket(bucket)?;
            }
        }
        Ok(())
    }
}

impl CloudResolver for Cloud {
    fn resolve(&mut self, request: &OffloadRequest) -> Result<OffloadResponse, CloudError> {
        let truth = self
            .directory
            .get(&request.utterance_id)
            .ok_or_else(|| CloudError::NotInManifest(request.utterance_id.clone()))?
            .clone();
        self.offload_count += 1;

        // reference phonemes from the transcript
        let transport = self.lexicon.tokenize(&truth.transcript)?;
        let l2_entry = L2Entry::from_transport(&transport, truth.intent, truth.transcript_id)
            .map_err(|e| CloudError::Internal(format!("reference entry: {e}")))?;

        // features of the utterance and its augmented variants
        let key_features =
            dsp::extract_features(&request.waveform, &self.frontend, &self.frame_spec)
                .map_err(|e| CloudError::Internal(format!("feature extraction: {e}")))?;
        let augment_seed = derive_seed(self.cfg.seed, &format!("augment:{}", request.utterance_id));
        let variants = augment(&request.waveform, &self.cfg.augment, augment_seed);
        let mut cluster_points = key_features.frames.clone();
        let mut variant_features: Vec<Vec<Vec<f32>>> = Vec::with_capacity(variants.len());
        for v in &variants {
            match self.extract(v) {
                Ok(frames) => {
                    cluster_points.extend(frames.iter().cloned());
                    variant_features.push(frames);
                }
                // shifted variants of borderline-short inputs can drop below
                // the frame minimum; they simply contribute nothing
                Err(_) => continue,
            }
        }

        // sound-unit entry clustered over the union of real and augmented
        // frames, keyed by the real utterance's assignments
        let kmeans_seed = derive_seed(self.cfg.seed, &format!("kmeans:{}", request.utterance_id));
        let l1_entry = l1::build_entry(
            &key_features,
            Some(&cluster_points),
            &self.cfg.l1_cfg,
            truth.intent,
            truth.transcript_id,
            &request.utterance_id,
            kmeans_seed,
        )
        .map_err(|e| CloudError::Internal(format!("l1 entry: {e}")))?;

        if self.cfg.finetune {
            // grow the bucket's training pool: the real input plus every
            // variant, then tune the shadow on the accumulated pool
            let (target, _) = l2::strip_boundaries(&transport);
            self.pools[request.bucket].push(TrainExample {
                features: key_features.frames.clone(),
                target: target.clone(),
            });
            for frames in variant_features {
                self.pools[request.bucket].push(TrainExample {
                    features: frames,
                    target: target.clone(),
                });
            }
            match self.finetune_bucket(request.bucket) {
                Ok(_) => {}
                // diverged: shadow rolled back, offload still resolves
                Err(CloudError::TrainingDiverged) => {}
                Err(e) => return Err(e),
            }
        }

        let model_push = if self.offload_count.is_multiple_of(self.cfg.push_every_n) {
            Some(self.make_push())
        } else {
            None
        };

        let response = OffloadResponse {
            intent: truth.intent,
            transcript_id: truth.transcript_id,
            reference_transport: transport,
            l1_entry: Some(l1_entry),
            l2_entry,
            model_push,
        };
        if let Some(sink) = &mut self.trace {
            let record = TraceRecord::from_exchange(self.offload_count, request, &response);
            let line = serde_json::to_string(&record)
                .map_err(|e| CloudError::Internal(format!("trace: {e}")))?;
            writeln!(sink, "{line}").map_err(|e| CloudError::Internal(format!("trace: {e}")))?;
        }
        Ok(response)
    }
}

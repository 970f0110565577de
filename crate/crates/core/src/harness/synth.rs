//! Deterministic synthetic corpus: transcripts rendered as formant-like tone
//! patterns, with seeded per-repeat jitter standing in for natural speaking
//! variation.
//!
//! Each vocabulary token owns a fixed two-partial timbre; a transcript is a
//! token sequence; a repeat re-renders the transcript with timing and pitch
//! jitter plus light noise. Zero jitter reproduces bit-identical repeats.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::Rng;

use crate::audio::Waveform;
use crate::cloud::Lexicon;
use crate::harness::manifest::{Manifest, ManifestRecord, MemoryAudio};
use crate::harness::HarnessError;
use crate::rng::{derive_seed, rng_from, sample_normal};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct JitterSpec {
    /// Per-token duration jitter, percent (uniform in +-).
    pub timing_pct: f64,
    /// Pitch jitter, percent (uniform in +-).
    pub pitch_pct: f64,
    /// Additive noise sigma, percent of peak amplitude.
    pub noise_pct: f64,
}

impl JitterSpec {
    pub fn none() -> Self {
        JitterSpec {
            timing_pct: 0.0,
            pitch_pct: 0.0,
            noise_pct: 0.0,
        }
    }
}

impl Default for JitterSpec {
    fn default() -> Self {
        JitterSpec {
            timing_pct: 5.0,
            pitch_pct: 5.0,
            noise_pct: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SynthSpec {
    pub transcripts: usize,
    pub vocab: usize,
    pub speakers: usize,
    /// Renderings of each transcript per speaker.
    pub repeats: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub token_duration_s: f64,
    pub gap_s: f64,
    pub jitter: JitterSpec,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            transcripts: 10,
            vocab: 30,
            speakers: 3,
            repeats: 5,
            tokens_min: 2,
            tokens_max: 6,
            token_duration_s: 0.40,
            gap_s: 0.05,
            jitter: JitterSpec::default(),
            sample_rate: 16_000,
            seed: 0,
        }
    }
}

pub struct SynthCorpus {
    pub manifest: Manifest,
    pub audio: MemoryAudio,
    pub lexicon: Lexicon,
    pub vocab: Vec<String>,
}

/// Fixed two-partial timbre of one token.
struct TokenVoice {
    f1: f64,
    ratio: f64,
    amp2: f64,
}

fn token_voice(token_idx: usize, seed: u64) -> TokenVoice {
    let mut rng = rng_from(derive_seed(seed, &format!("voice:{token_idx}")));
    TokenVoice {
        f1: rng.gen_range(180.0..840.0),
        ratio: rng.gen_range(1.7..3.2),
        amp2: rng.gen_range(0.25..0.6),
    }
}

fn render_token(
    voice: &TokenVoice,
    pitch_factor: f64,
    duration_s: f64,
    sr: u32,
    out: &mut Vec<f32>,
) {
    let n = (duration_s * sr as f64).round() as usize;
    let f1 = voice.f1 * pitch_factor;
    let f2 = f1 * voice.ratio;
    for i in 0..n {
        let t = i as f64 / sr as f64;
        // attack/decay envelope keeps token boundaries audible
        let pos = i as f64 / n as f64;
        let env = (pos / 0.1).min(1.0) * ((1.0 - pos) / 0.2).min(1.0);
        let s = 0.45 * (2.0 * PI * f1 * t).sin() + voice.amp2 * 0.45 * (2.0 * PI * f2 * t).sin();
        out.push((s * env) as f32);
    }
}

fn silence(duration_s: f64, sr: u32, out: &mut Vec<f32>) {
    let n = (duration_s * sr as f64).round() as usize;
    out.extend(std::iter::repeat_n(0.0f32, n));
}

/// Render one utterance of a transcript. Jitter draws come from the supplied
/// stream; with zero jitter magnitudes the output is independent of it.
#[allow(clippy::too_many_arguments)]
fn render_utterance(
    tokens: &[usize],
    voices: &[TokenVoice],
    speaker_pitch: f64,
    spec: &SynthSpec,
    rng: &mut rand_pcg::Pcg64Mcg,
) -> Waveform {
    let mut samples = Vec::new();
    silence(0.06, spec.sample_rate, &mut samples);
    for (i, &tok) in tokens.iter().enumerate() {
        if i > 0 {
            silence(spec.gap_s, spec.sample_rate, &mut samples);
        }
        let timing = 1.0 + rng.gen_range(-1.0..1.0) * spec.jitter.timing_pct / 100.0;
        let pitch =
            speaker_pitch * (1.0 + rng.gen_range(-1.0..1.0) * spec.jitter.pitch_pct / 100.0);
        render_token(
            &voices[tok],
            pitch,
            spec.token_duration_s * timing,
            spec.sample_rate,
            &mut samples,
        );
    }
    silence(0.06, spec.sample_rate, &mut samples);
    if spec.jitter.noise_pct > 0.0 {
        let peak = samples.iter().fold(0.0f32, |m, &s| m.max(s.abs())) as f64;
        let sigma = spec.jitter.noise_pct / 100.0 * peak;
        for s in &mut samples {
            *s = (*s + (sample_normal(rng) * sigma) as f32).clamp(-1.0, 1.0);
        }
    }
    Waveform::new(samples, spec.sample_rate).expect("rendered audio is valid")
}

/// Generate a corpus: `transcripts x repeats x speakers` utterances, a
/// manifest, in-memory audio and an auto-generated lexicon. Bit-identical
/// given the same spec.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthCorpus, HarnessError> {
    assert!(spec.tokens_min >= 1 && spec.tokens_min <= spec.tokens_max);
    let vocab: Vec<String> = (0..spec.vocab).map(|i| format!("tok{i}")).collect();
    let voices: Vec<TokenVoice> = (0..spec.vocab).map(|i| token_voice(i, spec.seed)).collect();
    let lexicon = Lexicon::auto_for_vocab(&vocab, derive_seed(spec.seed, "lexicon"));

    // fixed token sequence per transcript
    let mut transcripts: Vec<Vec<usize>> = Vec::with_capacity(spec.transcripts);
    for t in 0..spec.transcripts {
        let mut rng = rng_from(derive_seed(spec.seed, &format!("transcript:{t}")));
        let len = rng.gen_range(spec.tokens_min..=spec.tokens_max);
        transcripts.push((0..len).map(|_| rng.gen_range(0..spec.vocab)).collect());
    }

    let mut records = Vec::new();
    let mut audio = HashMap::new();
    for s in 0..spec.speakers {
        let speaker_pitch = {
            let mut rng = rng_from(derive_seed(spec.seed, &format!("speaker:{s}")));
            rng.gen_range(0.85..1.15)
        };
        for (t, tokens) in transcripts.iter().enumerate() {
            let text = tokens
                .iter()
                .map(|&i| vocab[i].clone())
                .collect::<Vec<_>>()
                .join(" ");
            for r in 0..spec.repeats {
                let id = format!("spk{s}-t{t}-r{r}");
                let mut rng = rng_from(derive_seed(spec.seed, &format!("render:{id}")));
                let w = render_utterance(tokens, &voices, speaker_pitch, spec, &mut rng);
                records.push(ManifestRecord {
                    utterance_id: id.clone(),
                    audio: format!("{id}.wav"),
                    speaker_id: format!("spk{s}"),
                    transcript: text.clone(),
                    intent: t as u32,
                    condition: "close".into(),
                    duration_s: w.duration_s(),
                    sample_rate: None,
                });
                audio.insert(id, w);
            }
        }
    }
    let manifest = Manifest::new(records, ".".into())?;
    Ok(SynthCorpus {
        manifest,
        audio: MemoryAudio { map: audio },
        lexicon,
        vocab,
    })
}

/// Write a corpus to disk: WAV files plus `manifest.jsonl` and
/// `lexicon.json`.
pub fn write_corpus(corpus: &SynthCorpus, dir: &std::path::Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    for record in &corpus.manifest.records {
        let w = &corpus.audio.map[&record.utterance_id];
        w.write_wav(&dir.join(&record.audio))?;
    }
    corpus.manifest.save_jsonl(&dir.join("manifest.jsonl"))?;
    std::fs::write(dir.join("lexicon.json"), corpus.lexicon.to_json())?;
    Ok(())
}

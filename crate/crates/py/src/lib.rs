//! Python bindings: the matching math, latency/energy accounting and the
//! corpus/benchmark entry points.

// `?` on an already-PyErr result trips this lint inside #[pyfunction]
#![allow(clippy::useless_conversion)]

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use slucache::config::SystemConfig;
use slucache::ctc::{self, CollapseMode, LabelSequence, PosteriorSequence};
use slucache::device::Level;
use slucache::dsp;
use slucache::harness::bench::{run_benchmark, BenchmarkSetting};
use slucache::harness::latency::{self, LatencyModel};
use slucache::harness::manifest::{DiskAudio, Manifest};
use slucache::harness::synth::{synth_dataset, write_corpus, JitterSpec, SynthSpec};
use slucache::rng::rng_from;

fn parse_mode(mode: &str) -> PyResult<CollapseMode> {
    match mode {
        "standard-ctc" => Ok(CollapseMode::StandardCtc),
        "repeat-merge" => Ok(CollapseMode::RepeatMerge),
        other => Err(PyValueError::new_err(format!(
            "mode must be `standard-ctc` or `repeat-merge`, got `{other}`"
        ))),
    }
}

fn posts_from(rows: Vec<Vec<f64>>, blank: Option<usize>) -> PyResult<PosteriorSequence> {
    PosteriorSequence::from_probs(&rows, blank).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Collapse a raw symbol path: merge adjacent repeats, and for
/// `standard-ctc` also remove the blank.
#[pyfunction]
#[pyo3(signature = (raw, mode, blank=None))]
fn collapse(raw: Vec<u16>, mode: &str, blank: Option<u16>) -> PyResult<Vec<u16>> {
    let mode = parse_mode(mode)?;
    ctc::collapse(&raw, mode, blank)
        .map(|seq| seq.symbols)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Alignment-marginalized loss `-ln p(target | rows)`.
/// Returns `(loss, normalized_loss)`.
#[pyfunction]
#[pyo3(signature = (rows, target, mode, blank=None))]
fn ctc_loss(
    rows: Vec<Vec<f64>>,
    target: Vec<u16>,
    mode: &str,
    blank: Option<usize>,
) -> PyResult<(f64, f64)> {
    let mode = parse_mode(mode)?;
    let posts = posts_from(rows, blank)?;
    let out = ctc::ctc_loss(&posts, &LabelSequence::new(target), mode)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((out.loss, out.normalized()))
}

/// Exact probability by path enumeration (testing oracle; guarded to small
/// instances).
#[pyfunction]
#[pyo3(signature = (rows, target, mode, blank=None))]
fn brute_force_ctc(
    rows: Vec<Vec<f64>>,
    target: Vec<u16>,
    mode: &str,
    blank: Option<usize>,
) -> PyResult<f64> {
    let mode = parse_mode(mode)?;
    let posts = posts_from(rows, blank)?;
    ctc::brute_force_ctc(&posts, &LabelSequence::new(target), mode)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Band-pass filter kernel (difference of Hamming-windowed sincs).
#[pyfunction]
fn sinc_kernel(f_low: f64, f_high: f64, length: usize, sample_rate: u32) -> PyResult<Vec<f32>> {
    dsp::sinc_kernel(f_low, f_high, length, sample_rate)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Modeled end-to-end latency in ms for one resolved input.
/// `level` is `l1-hit`, `l2-hit` or `offload`.
#[pyfunction]
fn account_latency(level: &str, duration_s: f64, seed: u64) -> PyResult<f64> {
    let level = match level {
        "l1-hit" => Level::L1Hit,
        "l2-hit" => Level::L2Hit,
        "offload" => Level::Offload,
        other => {
            return Err(PyValueError::new_err(format!(
                "level must be `l1-hit`, `l2-hit` or `offload`, got `{other}`"
            )))
        }
    };
    let mut rng = rng_from(seed);
    Ok(latency::account_latency(
        level,
        duration_s,
        &LatencyModel::default(),
        &mut rng,
    ))
}

/// Energy in millijoules from E = P*t.
#[pyfunction]
fn account_energy(latency_ms: f64, active_power_mw: f64) -> f64 {
    latency::account_energy(latency_ms, active_power_mw)
}

/// Generate a synthetic corpus on disk (WAVs, manifest.jsonl, lexicon.json).
/// Returns the number of utterances written.
#[pyfunction]
#[pyo3(signature = (out_dir, transcripts=10, vocab=30, speakers=3, repeats=5,
                    tokens_min=2, tokens_max=6, timing_jitter_pct=5.0,
                    pitch_jitter_pct=5.0, noise_jitter_pct=1.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn synth_corpus(
    out_dir: &str,
    transcripts: usize,
    vocab: usize,
    speakers: usize,
    repeats: usize,
    tokens_min: usize,
    tokens_max: usize,
    timing_jitter_pct: f64,
    pitch_jitter_pct: f64,
    noise_jitter_pct: f64,
    seed: u64,
) -> PyResult<usize> {
    let spec = SynthSpec {
        transcripts,
        vocab,
        speakers,
        repeats,
        tokens_min,
        tokens_max,
        jitter: JitterSpec {
            timing_pct: timing_jitter_pct,
            pitch_pct: pitch_jitter_pct,
            noise_pct: noise_jitter_pct,
        },
        seed,
        ..SynthSpec::default()
    };
    let corpus = synth_dataset(&spec).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    write_corpus(&corpus, std::path::Path::new(out_dir))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(corpus.manifest.records.len())
}

/// Run a benchmark over a manifest; returns the JSON report. `setting` is
/// `one-spk-all-seen`, `one-spk-k-seen` (with `k`) or `n-spk-all-seen`
/// (with `n`); `config_text` uses the key = value format.
#[pyfunction]
#[pyo3(signature = (manifest_path, setting, k=None, n=None, config_text=None, seed=None))]
fn run_benchmark_json(
    manifest_path: &str,
    setting: &str,
    k: Option<u8>,
    n: Option<usize>,
    config_text: Option<&str>,
    seed: Option<u64>,
) -> PyResult<String> {
    let setting = match setting {
        "one-spk-all-seen" => BenchmarkSetting::OneSpeakerAllSeen,
        "one-spk-k-seen" => BenchmarkSetting::OneSpeakerKSeen {
            k: k.ok_or_else(|| PyValueError::new_err("k is required for one-spk-k-seen"))?,
        },
        "n-spk-all-seen" => BenchmarkSetting::NSpeakersAllSeen {
            n: n.ok_or_else(|| PyValueError::new_err("n is required for n-spk-all-seen"))?,
        },
        other => return Err(PyValueError::new_err(format!("unknown setting `{other}`"))),
    };
    let mut cfg = SystemConfig::default();
    if let Some(text) = config_text {
        cfg.apply_file_text(text)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let manifest = Manifest::load_jsonl(std::path::Path::new(manifest_path))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let lexicon_path = manifest.base_dir.join("lexicon.json");
    let lexicon = slucache::cloud::Lexicon::from_json(
        &std::fs::read_to_string(&lexicon_path)
            .map_err(|e| PyRuntimeError::new_err(format!("{}: {e}", lexicon_path.display())))?,
    )
    .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let audio = DiskAudio {
        base_dir: manifest.base_dir.clone(),
    };
    let report = run_benchmark(&manifest, &audio, &lexicon, setting, &cfg)
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(report.to_json())
}

#[pymodule]
fn slucache_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(collapse, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_ctc, m)?)?;
    m.add_function(wrap_pyfunction!(sinc_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(account_latency, m)?)?;
    m.add_function(wrap_pyfunction!(account_energy, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark_json, m)?)?;
    Ok(())
}

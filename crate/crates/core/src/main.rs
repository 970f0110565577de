//! Command-line front door: synthetic corpus generation, benchmark runs,
//! the matching-probability oracle and report rendering.
//!
//! Seed precedence: built-in default, then the `SLUCACHE_SEED` environment
//! variable, then the config file, then the `--seed` flag.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use slucache::cloud::Lexicon;
use slucache::config::SystemConfig;
use slucache::ctc::{self, CollapseMode, LabelSequence, PosteriorSequence};
use slucache::harness::bench::{
    render_text, run_benchmark_traced, BenchmarkReport, BenchmarkSetting,
};
use slucache::harness::manifest::{DiskAudio, Manifest};
use slucache::harness::synth::{synth_dataset, write_corpus, JitterSpec, SynthSpec};

const SEED_ENV: &str = "SLUCACHE_SEED";

#[derive(Parser)]
#[command(
    name = "slucache",
    about = "Two-level learning cache for spoken intent resolution: corpora, benchmarks, reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: WAV files, manifest.jsonl, lexicon.json.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        transcripts: usize,
        #[arg(long, default_value_t = 30)]
        vocab: usize,
        #[arg(long, default_value_t = 3)]
        speakers: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 2)]
        tokens_min: usize,
        #[arg(long, default_value_t = 6)]
        tokens_max: usize,
        /// Per-token duration jitter between repeats, percent.
        #[arg(long, default_value_t = 5.0)]
        timing_jitter_pct: f64,
        /// Pitch jitter between repeats, percent.
        #[arg(long, default_value_t = 5.0)]
        pitch_jitter_pct: f64,
        /// Additive noise, percent of peak.
        #[arg(long, default_value_t = 1.0)]
        noise_jitter_pct: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a benchmark setting over a manifest and emit a JSON report.
    Run {
        /// Path to manifest.jsonl; audio paths resolve relative to it.
        #[arg(long)]
        manifest: PathBuf,
        /// one-spk-all-seen | one-spk-k-seen | n-spk-all-seen
        #[arg(long)]
        setting: String,
        /// Seen-transcript percentage for one-spk-k-seen.
        #[arg(long)]
        k: Option<u8>,
        /// Group size for n-spk-all-seen.
        #[arg(long)]
        n: Option<usize>,
        /// Key-value config file; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Lexicon JSON (defaults to lexicon.json beside the manifest).
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Report destination (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write one NDJSON device-cloud exchange trace per test here.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
        /// Disable online finetuning (frozen extractors).
        #[arg(long)]
        no_finetune: bool,
        /// Benchmark worker threads.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate a small matching instance with the exact path-enumeration
    /// oracle (and the DP for comparison).
    Oracle {
        /// JSON instance: {"rows": [[..]], "blank": n|null,
        /// "mode": "standard-ctc"|"repeat-merge", "target": [..]}
        #[arg(long)]
        instance: PathBuf,
    },
    /// Render a JSON report as a text table.
    Report {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
    },
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|v| v.parse().ok())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth {
            out,
            transcripts,
            vocab,
            speakers,
            repeats,
            tokens_min,
            tokens_max,
            timing_jitter_pct,
            pitch_jitter_pct,
            noise_jitter_pct,
            seed,
        } => {
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
                seed: seed.or_else(env_seed).unwrap_or(0),
                ..SynthSpec::default()
            };
            let corpus = synth_dataset(&spec).context("corpus generation")?;
            write_corpus(&corpus, &out).context("writing corpus")?;
            println!(
                "wrote {} utterances to {} (manifest.jsonl, lexicon.json)",
                corpus.manifest.records.len(),
                out.display()
            );
        }
        Command::Run {
            manifest,
            setting,
            k,
            n,
            config,
            seed,
            lexicon,
            out,
            trace_dir,
            no_finetune,
            workers,
        } => {
            let mut cfg = SystemConfig::default();
            if let Some(env) = env_seed() {
                cfg.seed = env;
            }
            if let Some(path) = &config {
                cfg.apply_file_text(
                    &std::fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?,
                )
                .context("config file")?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if no_finetune {
                cfg.finetune_enabled = false;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let setting = match setting.as_str() {
                "one-spk-all-seen" => BenchmarkSetting::OneSpeakerAllSeen,
                "one-spk-k-seen" => BenchmarkSetting::OneSpeakerKSeen {
                    k: k.context("--k is required for one-spk-k-seen")?,
                },
                "n-spk-all-seen" => BenchmarkSetting::NSpeakersAllSeen {
                    n: n.context("--n is required for n-spk-all-seen")?,
                },
                other => bail!(
                    "unknown setting `{other}`; expected one-spk-all-seen, one-spk-k-seen or n-spk-all-seen"
                ),
            };
            let manifest = Manifest::load_jsonl(&manifest).context("loading manifest")?;
            let lexicon_path = lexicon.unwrap_or_else(|| manifest.base_dir.join("lexicon.json"));
            let lexicon = Lexicon::from_json(
                &std::fs::read_to_string(&lexicon_path)
                    .with_context(|| format!("reading {}", lexicon_path.display()))?,
            )
            .context("lexicon")?;
            let audio = DiskAudio {
                base_dir: manifest.base_dir.clone(),
            };
            let report = run_benchmark_traced(
                &manifest,
                &audio,
                &lexicon,
                setting,
                &cfg,
                trace_dir.as_deref(),
            )
            .context("benchmark")?;
            let json = report.to_json();
            match out {
                Some(path) => {
                    std::fs::write(&path, &json)
                        .with_context(|| format!("writing {}", path.display()))?;
                    eprintln!(
                        "report written to {} (FR {:.4}, accuracy {:.4})",
                        path.display(),
                        report.totals.combined_filter_rate,
                        report.totals.overall_accuracy
                    );
                }
                None => println!("{json}"),
            }
        }
        Command::Oracle { instance } => {
            let text = std::fs::read_to_string(&instance)
                .with_context(|| format!("reading {}", instance.display()))?;
            run_oracle(&text)?;
        }
        Command::Report { input } => {
            let text = std::fs::read_to_string(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            let report: BenchmarkReport = serde_json::from_str(&text).context("report JSON")?;
            print!("{}", render_text(&report));
        }
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct OracleInstance {
    rows: Vec<Vec<f64>>,
    blank: Option<usize>,
    mode: String,
    target: Vec<u16>,
}

fn run_oracle(text: &str) -> Result<()> {
    let inst: OracleInstance = serde_json::from_str(text).context("oracle instance JSON")?;
    let mode = match inst.mode.as_str() {
        "standard-ctc" => CollapseMode::StandardCtc,
        "repeat-merge" => CollapseMode::RepeatMerge,
        other => bail!("unknown mode `{other}`"),
    };
    let posts = PosteriorSequence::from_probs(&inst.rows, inst.blank).context("posteriors")?;
    let target = LabelSequence::new(inst.target);
    let brute = ctc::brute_force_ctc(&posts, &target, mode).context("oracle")?;
    println!("oracle probability: {brute:.12e}");
    match ctc::ctc_loss(&posts, &target, mode) {
        Ok(outcome) => println!(
            "dp probability:     {:.12e}   loss {:.9}   normalized {:.9}",
            (-outcome.loss).exp(),
            outcome.loss,
            outcome.normalized()
        ),
        Err(e) => println!("dp: {e}"),
    }
    Ok(())
}

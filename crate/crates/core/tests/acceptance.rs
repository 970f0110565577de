//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line with the measured values.

use rand::Rng;

use slucache::autodiff::{backward, ctc_loss_node};
use slucache::config::{SystemConfig, ThresholdMode};
use slucache::ctc::{
    brute_force_ctc, ctc_loss, CollapseMode, LabelSequence, PosteriorSequence, Symbol,
};
use slucache::device::Level;
use slucache::gru::GruStack;
use slucache::harness::bench::{run_benchmark, BenchmarkSetting};
use slucache::harness::latency::{account_energy, account_latency, LatencyModel};
use slucache::harness::ops::{l1_match_ops, l1_step_ops, l2_match_ops, l2_step_ops};
use slucache::harness::synth::{synth_dataset, write_corpus, JitterSpec, SynthSpec};
use slucache::l2::ALPHABET_SIZE;
use slucache::rng::rng_from;
use slucache::store::CacheStore;

fn random_posts(
    t: usize,
    v: usize,
    blank: Option<usize>,
    rng: &mut rand_pcg::Pcg64Mcg,
) -> PosteriorSequence {
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|_| {
            let raw: Vec<f64> = (0..v).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / sum).collect()
        })
        .collect();
    PosteriorSequence::from_probs(&rows, blank).unwrap()
}

/// Criterion 1: the DP loss agrees with exact path enumeration to 1e-9
/// relative on 200+ random instances per collapse mode, including the
/// hand-derived 5/27 and 1/4 cases. Runtime < 10 s.
#[test]
fn criterion_1_ctc_oracle_equivalence() {
    let started = std::time::Instant::now();
    // hand-derived values first
    let uniform3 = PosteriorSequence::from_probs(&vec![vec![1.0 / 3.0; 3]; 3], Some(2)).unwrap();
    let p = (-ctc_loss(
        &uniform3,
        &LabelSequence::new(vec![0, 1]),
        CollapseMode::StandardCtc,
    )
    .unwrap()
    .loss)
        .exp();
    assert!((p - 5.0 / 27.0).abs() < 1e-12);
    let uniform2 = PosteriorSequence::from_probs(&vec![vec![0.5; 2]; 3], None).unwrap();
    let p = (-ctc_loss(
        &uniform2,
        &LabelSequence::new(vec![0, 1]),
        CollapseMode::RepeatMerge,
    )
    .unwrap()
    .loss)
        .exp();
    assert!((p - 0.25).abs() < 1e-12);

    let mut rng = rng_from(2024);
    for (mode, blank_used) in [
        (CollapseMode::StandardCtc, true),
        (CollapseMode::RepeatMerge, false),
    ] {
        let mut checked = 0;
        while checked < 200 {
            let t = rng.gen_range(1..=6);
            let v = rng.gen_range(2..=4usize);
            let u = rng.gen_range(1..=3usize);
            let blank = if blank_used { Some(v - 1) } else { None };
            let posts = random_posts(t, v, blank, &mut rng);
            let max_sym = if blank_used { v - 1 } else { v } as Symbol;
            let mut symbols: Vec<Symbol> = Vec::new();
            for _ in 0..u {
                let mut s = rng.gen_range(0..max_sym);
                if mode == CollapseMode::RepeatMerge {
                    while symbols.last() == Some(&s) {
                        s = rng.gen_range(0..max_sym);
                    }
                }
                symbols.push(s);
            }
            let target = LabelSequence::new(symbols);
            let exact = brute_force_ctc(&posts, &target, mode).unwrap();
            match ctc_loss(&posts, &target, mode) {
                Ok(out) => {
                    let p = (-out.loss).exp();
                    let rel = (p - exact).abs() / exact.max(1e-300);
                    assert!(
                        rel <= 1e-9,
                        "{mode:?}: dp {p} vs oracle {exact} (rel {rel})"
                    );
                }
                Err(_) => assert_eq!(exact, 0.0, "{mode:?}: dp infeasible but oracle {exact}"),
            }
            checked += 1;
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {elapsed:?}");
    println!("criterion 1: PASS — oracle equivalence on 400 instances in {elapsed:?}");
}

/// Criterion 2: end-to-end gradients of the alignment loss through the
/// recurrent stack match central finite differences with max relative error
/// below 1e-3 on five seeded reduced instances. Runtime < 30 s.
#[test]
fn criterion_2_gradient_correctness() {
    let started = std::time::Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let stack = GruStack::seeded(300 + seed, 4, 8, 6);
        let mut rng = rng_from(400 + seed);
        let t = 5;
        let feats: Vec<Vec<f32>> = (0..t)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let target = LabelSequence::new(vec![0, 3, 1]);
        let loss_of = |stack: &GruStack| -> f64 {
            let rows = stack.forward_rows(&feats).unwrap();
            ctc_loss_node(&rows, &target, CollapseMode::StandardCtc, Some(5))
                .unwrap()
                .scalar_value()
        };
        let rows = stack.forward_rows(&feats).unwrap();
        let loss = ctc_loss_node(&rows, &target, CollapseMode::StandardCtc, Some(5)).unwrap();
        backward(&loss).unwrap();
        let h = 1e-5;
        for p in stack.params() {
            let base = p.values();
            let analytic = p.grad();
            let stride = (base.len() / 9).max(1);
            for i in (0..base.len()).step_by(stride) {
                let mut plus = base.clone();
                plus[i] += h;
                p.set_values(&plus);
                let fp = loss_of(&stack);
                let mut minus = base.clone();
                minus[i] -= h;
                p.set_values(&minus);
                let fm = loss_of(&stack);
                p.set_values(&base);
                let fd = (fp - fm) / (2.0 * h);
                let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
                let rel = (fd - analytic[i]).abs() / denom;
                worst = worst.max(rel);
                assert!(
                    rel < 1e-3,
                    "seed {seed} param idx {i}: fd {fd} vs bp {} (rel {rel})",
                    analytic[i]
                );
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!(
        "criterion 2: PASS — max relative gradient error {worst:.2e} over 5 seeds in {elapsed:?}"
    );
}

/// Criterion 3: latency constants are exact (96 / 185 ms); sampled offload
/// latency for 3 s audio has mean in [880, 920] ms and sd in [80, 120] ms
/// over 1e5 draws; energy accounting yields 37 +- 1 mJ on-device and
/// 180 +- 5 mJ for offloads.
#[test]
fn criterion_3_latency_energy_constants() {
    let model = LatencyModel::default();
    let mut rng = rng_from(1);
    assert_eq!(account_latency(Level::L1Hit, 3.0, &model, &mut rng), 96.0);
    assert_eq!(account_latency(Level::L2Hit, 3.0, &model, &mut rng), 185.0);

    let mut rng = rng_from(77);
    let n = 100_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| account_latency(Level::Offload, 3.0, &model, &mut rng))
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let sd = (draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt();
    assert!((880.0..=920.0).contains(&mean), "offload mean {mean}");
    assert!((80.0..=120.0).contains(&sd), "offload sd {sd}");

    let on_device = account_energy(185.0, 200.6);
    assert!(
        (on_device - 37.0).abs() <= 1.0,
        "on-device energy {on_device}"
    );
    let offload = account_energy(mean, 200.6);
    assert!((offload - 180.0).abs() <= 5.0, "offload energy {offload}");
    println!(
        "criterion 3: PASS — 96/185 ms exact, offload mean {mean:.1} ms sd {sd:.1} ms, energy {on_device:.1}/{offload:.1} mJ"
    );
}

fn lean_config(seed: u64) -> SystemConfig {
    SystemConfig {
        seed,
        feature_channels: 24,
        l1_k: 12,
        gru_hidden: 32,
        adam_lr: 5e-3,
        finetune_max_epochs: 6,
        augment_versions: 2,
        min_speaker_utterances: 4,
        threshold_mode: ThresholdMode::Static,
        static_l1_threshold: 1.0,
        static_l2_threshold: 2.0,
        ..SystemConfig::default()
    }
}

fn long_corpus(jitter: JitterSpec) -> SynthSpec {
    SynthSpec {
        transcripts: 8,
        vocab: 24,
        speakers: 1,
        repeats: 4,
        tokens_min: 7,
        tokens_max: 8,
        jitter,
        seed: 21,
        ..SynthSpec::default()
    }
}

/// Criterion 4: exact-replay 100%-seen yields filter rate 1.0 and cache
/// accuracy 1.0; the k=0 unseen-transcript benchmark filters below 10% with
/// overall accuracy at least 0.97 (the cloud oracle backstop).
#[test]
fn criterion_4_cache_semantics() {
    let cfg = lean_config(5);

    let replay = synth_dataset(&long_corpus(JitterSpec::none())).unwrap();
    let report = run_benchmark(
        &replay.manifest,
        &replay.audio,
        &replay.lexicon,
        BenchmarkSetting::OneSpeakerAllSeen,
        &cfg,
    )
    .unwrap();
    let t = &report.totals;
    let hits = t.l1.hits + t.l2.hits;
    let combined_ca = (t.l1.correct_hits + t.l2.correct_hits) as f64 / hits.max(1) as f64;
    assert_eq!(
        t.combined_filter_rate, 1.0,
        "exact replay filter rate {}",
        t.combined_filter_rate
    );
    assert_eq!(
        combined_ca, 1.0,
        "exact replay cache accuracy {combined_ca}"
    );

    let jittered = synth_dataset(&long_corpus(JitterSpec::default())).unwrap();
    let k0 = run_benchmark(
        &jittered.manifest,
        &jittered.audio,
        &jittered.lexicon,
        BenchmarkSetting::OneSpeakerKSeen { k: 0 },
        &cfg,
    )
    .unwrap();
    assert!(
        k0.totals.combined_filter_rate < 0.10,
        "k=0 filter rate {}",
        k0.totals.combined_filter_rate
    );
    assert!(
        k0.totals.overall_accuracy >= 0.97,
        "k=0 overall accuracy {}",
        k0.totals.overall_accuracy
    );
    println!(
        "criterion 4: PASS — replay FR {:.3}/CA {combined_ca:.3}, k=0 FR {:.3} acc {:.3}",
        t.combined_filter_rate, k0.totals.combined_filter_rate, k0.totals.overall_accuracy
    );
}

/// Criterion 5: on the jittered synthetic corpus, online finetuning raises
/// the combined filter rate by at least 15 percentage points over frozen
/// extractors at identical thresholds.
#[test]
fn criterion_5_learning_effect() {
    let corpus = synth_dataset(&SynthSpec {
        transcripts: 6,
        vocab: 24,
        speakers: 1,
        repeats: 4,
        tokens_min: 2,
        tokens_max: 3,
        jitter: JitterSpec::default(),
        seed: 33,
        ..SynthSpec::default()
    })
    .unwrap();
    let mut cfg = lean_config(5);
    cfg.finetune_max_epochs = 24;
    cfg.finetune_converge_rel = 0.001;
    cfg.augment_versions = 5;
    cfg.static_l1_threshold = 1.0;
    cfg.static_l2_threshold = 1.2;

    let finetuned = run_benchmark(
        &corpus.manifest,
        &corpus.audio,
        &corpus.lexicon,
        BenchmarkSetting::OneSpeakerAllSeen,
        &cfg,
    )
    .unwrap();
    let mut frozen_cfg = cfg.clone();
    frozen_cfg.finetune_enabled = false;
    let frozen = run_benchmark(
        &corpus.manifest,
        &corpus.audio,
        &corpus.lexicon,
        BenchmarkSetting::OneSpeakerAllSeen,
        &frozen_cfg,
    )
    .unwrap();
    let delta = finetuned.totals.combined_filter_rate - frozen.totals.combined_filter_rate;
    assert!(
        delta >= 0.15,
        "learning effect too small: frozen {} vs finetuned {}",
        frozen.totals.combined_filter_rate,
        finetuned.totals.combined_filter_rate
    );
    println!(
        "criterion 5: PASS — filter rate {:.3} (frozen) -> {:.3} (finetuned), +{:.1} points",
        frozen.totals.combined_filter_rate,
        finetuned.totals.combined_filter_rate,
        delta * 100.0
    );
}

/// Criterion 6: a 1e5-operation randomized install/touch fuzz never
/// violates capacity, per-intent caps, timestamp sanity or hit purity.
#[test]
fn criterion_6_store_discipline() {
    use slucache::ctc::LabelSequence as Key;
    use slucache::l1::{CentroidSet, L1Entry};
    use slucache::l2::L2Entry;

    let mut rng = rng_from(909);
    let mut store = CacheStore::new(60, 8);
    let mut ops = 0u64;
    while ops < 100_000 {
        let action = rng.gen_range(0..4u8);
        match action {
            0 => {
                let intent = rng.gen_range(0..12u32);
                store.install_l1(L1Entry {
                    centroids: CentroidSet {
                        centroids: vec![vec![rng.gen_range(-1.0f32..1.0); 3], vec![1.0, 0.0, 0.0]],
                        utterance_id: format!("u{ops}"),
                    },
                    key: Key::new(vec![0, 1]),
                    intent,
                    transcript_id: intent,
                    created_at: 0,
                    last_hit: 0,
                });
            }
            1 => {
                let intent = rng.gen_range(0..12u32);
                store.install_l2(L2Entry {
                    key: Key::new(vec![rng.gen_range(0..40u16), rng.gen_range(0..40u16)]),
                    word_lens: vec![2],
                    intent,
                    transcript_id: intent,
                    created_at: 0,
                    last_hit: 0,
                });
            }
            2 => {
                if !store.l1_entries().is_empty() {
                    let idx = rng.gen_range(0..store.l1_entries().len());
                    let digest = store.content_digest();
                    store.touch_l1(idx);
                    assert_eq!(store.content_digest(), digest, "hit purity violated");
                }
            }
            _ => {
                if !store.l2_entries().is_empty() {
                    let idx = rng.gen_range(0..store.l2_entries().len());
                    let digest = store.content_digest();
                    store.touch_l2(idx);
                    assert_eq!(store.content_digest(), digest, "hit purity violated");
                }
            }
        }
        if let Err(violation) = store.check_invariants() {
            panic!("store invariant violated after {ops} ops: {violation}");
        }
        ops += 1;
    }
    println!("criterion 6: PASS — 100000 operations, no invariant violations");
}

/// Criterion 7: two CLI `run` invocations with identical config and seed
/// produce byte-identical JSON reports.
#[test]
fn criterion_7_run_determinism() {
    let dir = std::env::temp_dir().join("slucache_acceptance_determinism");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let corpus = synth_dataset(&SynthSpec {
        transcripts: 4,
        vocab: 16,
        speakers: 1,
        repeats: 3,
        tokens_min: 6,
        tokens_max: 7,
        jitter: JitterSpec::default(),
        seed: 3,
        ..SynthSpec::default()
    })
    .unwrap();
    let corpus_dir = dir.join("corpus");
    write_corpus(&corpus, &corpus_dir).unwrap();
    std::fs::write(
        dir.join("desk.cfg"),
        "feature_channels = 16\nl1_k = 10\ngru_hidden = 16\nadam_lr = 5e-3\nfinetune_max_epochs = 2\naugment_versions = 1\nmin_speaker_utterances = 3\nthreshold_mode = static\nstatic_l1_threshold = 1.0\nstatic_l2_threshold = 2.0\n",
    )
    .unwrap();
    let run = |out: &str| -> Vec<u8> {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_slucache"))
            .args([
                "run",
                "--manifest",
                corpus_dir.join("manifest.jsonl").to_str().unwrap(),
                "--setting",
                "one-spk-all-seen",
                "--config",
                dir.join("desk.cfg").to_str().unwrap(),
                "--seed",
                "11",
                "--out",
                dir.join(out).to_str().unwrap(),
            ])
            .status()
            .expect("run binary");
        assert!(status.success());
        std::fs::read(dir.join(out)).unwrap()
    };
    let a = run("report_a.json");
    let b = run("report_b.json");
    assert_eq!(a, b, "reports differ between identical runs");
    println!(
        "criterion 7: PASS — byte-identical reports ({} bytes)",
        a.len()
    );
}

/// Criterion 8: analytic op budgets scale as asserted — recurrent cost
/// roughly quadruples when the hidden size doubles (within 20%), per-entry
/// match cost is linear in T*U, and the L1 extractor step is cheaper than
/// the L2 step at default shapes.
#[test]
fn criterion_8_op_budget_sanity() {
    let base = l2_step_ops(60, 128, ALPHABET_SIZE, 10);
    let doubled = l2_step_ops(60, 256, ALPHABET_SIZE, 10);
    let ratio = doubled as f64 / base as f64;
    assert!(
        (ratio - 4.0).abs() / 4.0 < 0.2,
        "hidden-size scaling ratio {ratio}"
    );

    assert_eq!(l1_match_ops(290, 29), 2 * l1_match_ops(145, 29));
    assert_eq!(l1_match_ops(145, 58), 2 * l1_match_ops(145, 29));
    assert_eq!(l2_match_ops(290, 29), 2 * l2_match_ops(145, 29));

    let l1 = l1_step_ops(60, 401, 5, 10);
    let l2 = l2_step_ops(60, 128, ALPHABET_SIZE, 10);
    assert!(l1 < l2, "L1 step {l1} not below L2 step {l2}");
    println!(
        "criterion 8: PASS — hidden-size ratio {ratio:.2}, linear match scaling, L1 {l1} < L2 {l2} ops/step"
    );
}

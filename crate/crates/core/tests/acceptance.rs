//! Release criteria. Each test prints one `criterion N ...: PASS|FAIL` line.
//!
//! Run with `cargo test -p roi-attend --test acceptance -- --nocapture` to
//! see the lines. The synthetic-corpus criteria (3, 4, 5) train all four
//! variants for 50 epochs and take several minutes.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};

use roi_attend::dataset::{generate_synthetic, loso_folds, Level, Manifest, SyntheticClip, SyntheticSpec};
use roi_attend::dsp::MfccExtractor;
use roi_attend::eval::{aggregate, aggregate_matrices, evaluate_fold, write_aggregate_csv, AggregateMode};
use roi_attend::model::{self, attention_step, encode, Mode, ModelConfig, ModelParams, Variant};
use roi_attend::roi::extract_attention;
use roi_attend::train::{self, gradient_check, prepare_examples, Checkpoint, Example, Trainer, GRAD_CHECK_WEIGHT_SCALE};
use roi_attend::{
    ConfusionMatrix, EmotionLabel, FeatureSequence, FrameConfig, Matrix, SeededRng, TrainConfig, UtteranceMeta,
};

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {n} [{name}]: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    for variant in Variant::ALL {
        let cfg = ModelConfig { variant, input_dim: 13, enc_hidden: 4, dec_hidden: 4, dropout_rate: 0.0, ..Default::default() };
        for seed in 0..3 {
            for b in gradient_check(&cfg, 6, seed, 1e-5, GRAD_CHECK_WEIGHT_SCALE).unwrap() {
                if b.max_relative > worst.0 {
                    worst = (b.max_relative, format!("{variant} {} seed {seed}", b.name));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst.0 <= 1e-4 && elapsed < Duration::from_secs(60);
    verdict(1, "gradient check", pass, &format!("max rel err {:.3e} at {}, {:.1?}", worst.0, worst.1, elapsed));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 2. MFCC against a brute-force DFT

/// Direct evaluation of the MFCC definition: pre-emphasis, Hamming window,
/// zero-padded O(N^2) DFT, power / N, HTK-mel triangular filters, natural log
/// with 1e-10 floor, orthonormal DCT-II.
fn mfcc_oracle(frame: &[f64], rate: f64, n_fft: usize, n_mels: usize, n_mfcc: usize, alpha: f64) -> Vec<f64> {
    let l = frame.len();
    let mut x = vec![0.0; n_fft];
    for n in 0..l {
        let pre = if n == 0 { frame[0] } else { frame[n] - alpha * frame[n - 1] };
        x[n] = pre * (0.54 - 0.46 * (2.0 * PI * n as f64 / (l as f64 - 1.0)).cos());
    }
    let bins = n_fft / 2 + 1;
    let power: Vec<f64> = (0..bins)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &v) in x.iter().enumerate() {
                let ang = -2.0 * PI * ((k * n) % n_fft) as f64 / n_fft as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            (re * re + im * im) / n_fft as f64
        })
        .collect();
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(rate / 2.0);
    let edge = |j: usize| hz(top * j as f64 / (n_mels + 1) as f64);
    let log_e: Vec<f64> = (0..n_mels)
        .map(|m| {
            let (lo, c, hi) = (edge(m), edge(m + 1), edge(m + 2));
            let e: f64 = (0..bins)
                .map(|k| {
                    let f = k as f64 * rate / n_fft as f64;
                    let w = if f > lo && f <= c {
                        (f - lo) / (c - lo)
                    } else if f > c && f < hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    };
                    w * power[k]
                })
                .sum();
            e.max(1e-10).ln()
        })
        .collect();
    let nm = n_mels as f64;
    (0..n_mfcc)
        .map(|k| {
            let s = if k == 0 { (1.0 / nm).sqrt() } else { (2.0 / nm).sqrt() };
            s * (0..n_mels).map(|j| log_e[j] * (PI * k as f64 * (2 * j + 1) as f64 / (2.0 * nm)).cos()).sum::<f64>()
        })
        .collect()
}

#[test]
fn criterion_2_mfcc_oracle() {
    let start = Instant::now();
    let cfg = FrameConfig::default();
    let ex = MfccExtractor::new(&cfg, 16_000).unwrap();
    let mut rng = SeededRng::new(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let frame: Vec<f64> = (0..320).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let got = ex.frame_mfcc(&frame).unwrap();
        let want = mfcc_oracle(&frame, 16_000.0, 512, 26, 13, 0.97);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs() / w.abs().max(1e-8));
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-6 && elapsed < Duration::from_secs(10);
    verdict(2, "MFCC oracle", pass, &format!("max rel diff {worst:.3e} over 100 frames x 13 coefficients, {elapsed:.1?}"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3, 4, 5. Synthetic corpus: learnability, ROI localization, silence

struct Split {
    train: Vec<Example>,
    test: Vec<(Example, SyntheticClip)>,
}

fn synthetic_split() -> Split {
    let clips = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let held_out = clips.iter().map(|c| c.actor_id().to_string()).max().unwrap();
    let pairs: Vec<_> = clips.iter().map(|c| (c.clip.clone(), c.label())).collect();
    let (examples, _) = prepare_examples(&pairs, &FrameConfig::default(), None).unwrap();
    let mut split = Split { train: Vec::new(), test: Vec::new() };
    for (ex, clip) in examples.into_iter().zip(clips) {
        if clip.actor_id() == held_out {
            split.test.push((ex, clip));
        } else {
            split.train.push(ex);
        }
    }
    split
}

struct RoiStats {
    correct: usize,
    localized: usize,
    pad_mean: f64,
    speech_mean: f64,
}

fn roi_stats(ckpt: &Checkpoint, test: &[(Example, SyntheticClip)]) -> RoiStats {
    let (mut correct, mut localized) = (0, 0);
    let (mut pad_sum, mut pad_n, mut speech_sum, mut speech_n) = (0.0, 0usize, 0.0, 0usize);
    for (ex, clip) in test {
        if ckpt.predict(&ex.features).unwrap().posterior.predicted() != ex.label.index() {
            continue;
        }
        correct += 1;
        let map = extract_attention(ckpt, &ex.features, 16_000, clip.clip.original_len).unwrap().pop().unwrap();
        if map.mass_within(&clip.burst) >= 0.6 {
            localized += 1;
        }
        for (w, &padded) in map.weights.iter().zip(&map.pad_mask) {
            if padded {
                pad_sum += w;
                pad_n += 1;
            } else {
                speech_sum += w;
                speech_n += 1;
            }
        }
    }
    RoiStats { correct, localized, pad_mean: pad_sum / pad_n.max(1) as f64, speech_mean: speech_sum / speech_n.max(1) as f64 }
}

#[test]
fn criteria_3_4_5_synthetic_corpus() {
    let start = Instant::now();
    let split = synthetic_split();
    assert_eq!(split.train.len(), 600);
    assert_eq!(split.test.len(), 120);
    let test_examples: Vec<Example> = split.test.iter().map(|(e, _)| e.clone()).collect();

    let mut accuracy = Vec::new();
    let mut ckpts = Vec::new();
    for variant in Variant::ALL {
        let cfg = ModelConfig { variant, ..Default::default() };
        let mut trainer = Trainer::new(&split.train, cfg, TrainConfig::default(), FrameConfig::default()).unwrap();
        for _ in 0..TrainConfig::default().epochs {
            trainer.run_epoch(&split.train).unwrap();
        }
        let ckpt = trainer.into_checkpoint();
        let fold = evaluate_fold(&ckpt, "held-out", &test_examples, &FrameConfig::default()).unwrap();
        accuracy.push(fold.confusion.accuracy().unwrap());
        ckpts.push(ckpt);
    }
    let elapsed = start.elapsed();
    let targets = [0.8, 0.9, 0.8, 0.8];
    let learn_ok = accuracy.iter().zip(targets).all(|(a, t)| *a >= t) && elapsed < Duration::from_secs(15 * 60);
    let detail: Vec<String> =
        Variant::ALL.iter().zip(&accuracy).map(|(v, a)| format!("M{} {:.1}%", v.model_number(), 100.0 * a)).collect();
    verdict(3, "synthetic learnability", learn_ok, &format!("{}, 50 epochs, {elapsed:.1?}", detail.join(", ")));

    let m2 = roi_stats(&ckpts[1], &split.test);
    let m1 = roi_stats(&ckpts[0], &split.test);
    let share = |s: &RoiStats| s.localized as f64 / s.correct.max(1) as f64;
    let roi_ok = m2.correct > 0 && share(&m2) >= 0.8;
    verdict(
        4,
        "ROI localization",
        roi_ok,
        &format!(
            "Model 2: {}/{} correct clips with >=60% mass in burst ({:.1}%); Model 1: {}/{} ({:.1}%)",
            m2.localized,
            m2.correct,
            100.0 * share(&m2),
            m1.localized,
            m1.correct,
            100.0 * share(&m1)
        ),
    );

    let ratio = |s: &RoiStats| s.pad_mean / s.speech_mean;
    let silence_ok = ratio(&m2) <= 0.2;
    verdict(
        5,
        "silence suppression, reported only",
        silence_ok,
        &format!("Model 2 padded/non-padded mean weight {:.3}; Model 1 {:.3}; limit 0.2", ratio(&m2), ratio(&m1)),
    );

    assert!(learn_ok, "criterion 3");
    assert!(roi_ok, "criterion 4");
}

// ---------------------------------------------------------------------------
// 6. Softmax and attention invariants

#[test]
fn criterion_6_attention_invariants() {
    let mut rng = SeededRng::new(6);
    let mut worst_attn = 0.0f64;
    let mut worst_post = 0.0f64;
    let mut worst_ctx = 0.0f64;
    let checks = 10_000;
    for i in 0..checks {
        let variant = if i % 2 == 0 { Variant::BiAttention } else { Variant::UniAttention };
        let cfg = ModelConfig {
            variant,
            input_dim: 1 + rng.below(5),
            enc_hidden: 1 + rng.below(4),
            dec_hidden: 1 + rng.below(4),
            attn_hidden: rng.below(3),
            dec_steps: 1 + rng.below(2),
            dropout_rate: 0.0,
            ..Default::default()
        };
        let mut params = ModelParams::init(&cfg, &mut rng);
        let boost = rng.uniform_range(0.5, 4.0);
        params.blocks_mut().into_iter().for_each(|(_, m)| m.scale(boost));
        let t = 1 + rng.below(12);
        let features = FeatureSequence {
            frames: Matrix::uniform(t, cfg.input_dim, 3.0, &mut rng),
            frame_times: (0..t).map(|k| k * 160).collect(),
            pad_mask: vec![false; t],
        };
        let out = model::forward(&features, &params, &cfg, Mode::Eval).unwrap();
        worst_post = worst_post.max((out.posterior.probs.iter().sum::<f64>() - 1.0).abs());
        let trace = out.trace.unwrap();
        for s in 0..trace.a.rows() {
            worst_attn = worst_attn.max((trace.a.row(s).iter().sum::<f64>() - 1.0).abs());
        }

        // Masking every frame but one makes the weights exactly one-hot.
        let p = encode(&features, &params, &cfg).unwrap();
        let keep = rng.below(t);
        let mask: Vec<bool> = (0..t).map(|k| k != keep).collect();
        let o_prev: Vec<f64> = (0..cfg.dec_hidden).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let (a, ctx) = attention_step(&p, &o_prev, params.scorer.as_ref().unwrap(), Some(&mask)).unwrap();
        assert_eq!(a[keep], 1.0);
        for (c, v) in ctx.iter().zip(p.p.row(keep)) {
            worst_ctx = worst_ctx.max((c - v).abs());
        }
    }
    let pass = worst_attn <= 1e-9 && worst_post <= 1e-9 && worst_ctx <= 1e-9;
    verdict(
        6,
        "softmax/attention invariants",
        pass,
        &format!(
            "{checks} checks: |sum a - 1| <= {worst_attn:.1e}, |sum posterior - 1| <= {worst_post:.1e}, one-hot context err {worst_ctx:.1e}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 7. LOSO laws

fn manifest_strategy() -> impl Strategy<Value = Manifest> {
    (2usize..=20)
        .prop_flat_map(|subjects| prop::collection::vec((1usize..6, 0usize..6), subjects))
        .prop_map(|per_subject| {
            let mut entries = Vec::new();
            for (s, (count, emo)) in per_subject.iter().enumerate() {
                let actor = format!("{}", 1001 + s * 7 % 97 + s * 100);
                for k in 0..*count {
                    let emotion = EmotionLabel::from_index((emo + k) % 6).unwrap();
                    let sentence = format!("S{k:02}");
                    entries.push(UtteranceMeta {
                        path: roi_attend::dataset::format_filename(&actor, &sentence, emotion, Level::Unspecified),
                        actor_id: actor.clone(),
                        sentence_code: sentence,
                        emotion,
                        level: Level::Unspecified,
                    });
                }
            }
            Manifest::from_entries(entries).unwrap()
        })
}

#[test]
fn criterion_7_loso_laws() {
    let mut runner = TestRunner::new(PropConfig { cases: 1000, failure_persistence: None, ..PropConfig::default() });
    let cases = std::cell::Cell::new(0usize);
    let outcome = runner.run(&manifest_strategy(), |m| {
        cases.set(cases.get() + 1);
        let folds = loso_folds(&m).unwrap();
        prop_assert_eq!(folds.len(), m.subjects.len());
        for f in &folds {
            prop_assert!(!f.test_indices.is_empty());
            prop_assert!(f.test_indices.iter().all(|&i| m.entries[i].actor_id == f.held_out_subject));
            prop_assert!(f.train_indices.iter().all(|&i| m.entries[i].actor_id != f.held_out_subject));
            let mut all: Vec<usize> = f.train_indices.iter().chain(&f.test_indices).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..m.len()).collect::<Vec<_>>());
        }
        Ok(())
    });
    let cases = cases.get();
    let pass = outcome.is_ok() && cases >= 1000;
    verdict(7, "LOSO laws", pass, &format!("{cases} generated manifests, outcome {:?}", outcome.as_ref().map(|_| "ok")));
    assert!(pass, "{outcome:?}");
}

// ---------------------------------------------------------------------------
// 8. Determinism and persistence

fn small_corpus() -> (Manifest, Vec<Example>) {
    let spec = SyntheticSpec { n_clips_per_class: 6, n_actors: 3, ..SyntheticSpec::default() };
    let clips = generate_synthetic(&spec).unwrap();
    let pairs: Vec<_> = clips.iter().map(|c| (c.clip.clone(), c.label())).collect();
    let (examples, _) = prepare_examples(&pairs, &FrameConfig::default(), None).unwrap();
    (Manifest::from_entries(clips.into_iter().map(|c| c.meta).collect()).unwrap(), examples)
}

fn small_model() -> (ModelConfig, TrainConfig) {
    (
        ModelConfig { enc_hidden: 6, dec_hidden: 6, ..Default::default() },
        TrainConfig { epochs: 3, batch_size: 4, seed: 42, ..Default::default() },
    )
}

fn loso_run(m: &Manifest, examples: &[Example]) -> (Vec<Vec<f64>>, Vec<u8>) {
    let (mcfg, tcfg) = small_model();
    let mut histories = Vec::new();
    let mut folds = Vec::new();
    for fold in loso_folds(m).unwrap() {
        let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
        let ckpt = train::train(&pick(&fold.train_indices), mcfg.clone(), tcfg.clone(), FrameConfig::default()).unwrap();
        histories.push(ckpt.loss_history.clone());
        folds.push(evaluate_fold(&ckpt, &fold.held_out_subject, &pick(&fold.test_indices), &FrameConfig::default()).unwrap());
    }
    let mut csv = Vec::new();
    write_aggregate_csv(&aggregate(&folds, AggregateMode::SumThenNormalize).unwrap(), &mut csv).unwrap();
    (histories, csv)
}

#[test]
fn criterion_8_determinism_and_persistence() {
    let (m, examples) = small_corpus();
    let (h1, csv1) = loso_run(&m, &examples);
    let (h2, csv2) = loso_run(&m, &examples);
    let same_history = h1.iter().flatten().map(|v| v.to_bits()).eq(h2.iter().flatten().map(|v| v.to_bits()));
    let same_csv = csv1 == csv2;

    let (mcfg, tcfg) = small_model();
    let ckpt = train::train(&examples, mcfg, tcfg, FrameConfig::default()).unwrap();
    let loaded = train::load(&train::save(&ckpt)).unwrap();
    let mut rng = SeededRng::new(8);
    let mut identical = 0;
    for _ in 0..50 {
        let t = 1 + rng.below(60);
        let f = FeatureSequence {
            frames: Matrix::uniform(t, 13, 40.0, &mut rng),
            frame_times: (0..t).map(|k| k * 160).collect(),
            pad_mask: (0..t).map(|_| rng.bernoulli(0.2)).collect(),
        };
        let a = ckpt.predict(&f).unwrap();
        let b = loaded.predict(&f).unwrap();
        let bits = |p: &[f64]| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&a.posterior.probs) == bits(&b.posterior.probs) && a.trace == b.trace {
            identical += 1;
        }
    }
    let pass = same_history && same_csv && identical == 50;
    verdict(
        8,
        "determinism and persistence",
        pass,
        &format!(
            "loss histories identical: {same_history}, aggregate CSV identical: {same_csv}, {identical}/50 posteriors bitwise equal after reload"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 9. Confusion-matrix arithmetic

#[test]
fn criterion_9_confusion_arithmetic() {
    let mut ok = true;
    let close = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() < 1e-12)
    };

    // Two-class reduction.
    let a = ConfusionMatrix::from_rows(&[vec![2, 0], vec![0, 2]]).unwrap();
    let b = ConfusionMatrix::from_rows(&[vec![0, 2], vec![2, 0]]).unwrap();
    for mode in [AggregateMode::SumThenNormalize, AggregateMode::MeanOfNormalized] {
        ok &= close(&aggregate_matrices(&[&a, &b], mode).unwrap().normalized, &[vec![0.5, 0.5], vec![0.5, 0.5]]);
    }

    // Unequal fold sizes: fold A has 4 Anger (3 right, 1 as Sad), fold B has
    // 1 Anger (predicted Disgust) and 2 Sad (both right).
    let mut fa = ConfusionMatrix::emotions();
    for _ in 0..3 {
        fa.add(0, 0);
    }
    fa.add(0, 5);
    let mut fb = ConfusionMatrix::emotions();
    fb.add(0, 1);
    fb.add(5, 5);
    fb.add(5, 5);
    let sum = aggregate_matrices(&[&fa, &fb], AggregateMode::SumThenNormalize).unwrap();
    let mean = aggregate_matrices(&[&fa, &fb], AggregateMode::MeanOfNormalized).unwrap();
    // Sum: Anger row = [3,1,0,0,0,1]/5. Mean: ([0.75,0,0,0,0,0.25] + [0,1,0,0,0,0]) / 2.
    ok &= close(&sum.normalized[..1], &[vec![0.6, 0.2, 0.0, 0.0, 0.0, 0.2]]);
    ok &= close(&mean.normalized[..1], &[vec![0.375, 0.5, 0.0, 0.0, 0.0, 0.125]]);
    // Sad has support only in fold B in both modes.
    ok &= sum.normalized[5][5] == 1.0 && mean.normalized[5][5] == 1.0;
    ok &= sum.zero_support == vec![false, true, true, true, true, false];
    ok &= (sum.overall_accuracy - 5.0 / 7.0).abs() < 1e-15;

    let mut worst_row = 0.0f64;
    for r in [&sum, &mean] {
        for (row, empty) in r.normalized.iter().zip(&r.zero_support) {
            if !empty {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let pass = ok && worst_row <= 1e-9;
    verdict(9, "confusion-matrix arithmetic", pass, &format!("hand oracles matched: {ok}, max |row sum - 1| {worst_row:.1e}"));
    assert!(pass);
}

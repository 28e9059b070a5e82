//! Subcommand implementations. Every artifact goes under the run directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;

use roi_attend::dataset::{build_manifest, export_synthetic, generate_synthetic, list_wav_files, loso_folds, Manifest};
use roi_attend::dsp::{extract_features, pad_to_length, read_wav_file};
use roi_attend::eval::{self, aggregate, evaluate_fold, read_fold_csv, AggregateMode, FoldResult};
use roi_attend::roi::{self, detect_roi, expand_to_samples, extract_attention};
use roi_attend::train::{self, gradient_check, Example, Trainer, GRAD_CHECK_WEIGHT_SCALE};
use roi_attend::{FeatureSequence, ModelConfig, Variant};

use crate::config::{short_hash, RunConfig};

/// Write via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join("config.txt"), cfg.canonical_text().as_bytes())?;
    Ok(dir)
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_run_dir(cfg)?.join("corpus");
    let clips = generate_synthetic(&cfg.synth)?;
    export_synthetic(&dir, &clips)?;
    println!("wrote {} clips from {} pseudo-actors to {}", clips.len(), cfg.synth.n_actors, dir.display());
    Ok(())
}

/// Corpus manifest with cached features for every entry.
pub struct Corpus {
    pub manifest: Manifest,
    pub examples: Vec<Example>,
    pub pad_len: usize,
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let dir = cfg.corpus_dir.as_ref().ok_or_else(|| anyhow!("data.corpus_dir is not set"))?;
    if !dir.is_dir() {
        bail!("corpus directory {} not found", dir.display());
    }
    let build = build_manifest(&list_wav_files(dir)?)?;
    for w in &build.warnings {
        eprintln!("warning: skipping {w}");
    }
    let manifest = build.manifest;
    let clips = manifest
        .entries
        .par_iter()
        .map(|e| read_wav_file(&dir.join(&e.path)).map_err(anyhow::Error::from))
        .collect::<Result<Vec<_>>>()?;
    let pad_len = match cfg.pad_len {
        Some(p) => p,
        None => clips.iter().map(|c| c.len()).max().unwrap_or(0),
    };
    let padded = pad_to_length(&clips, Some(pad_len))?;

    let fingerprint = short_hash(
        format!("{}|pad={pad_len}", cfg.canonical().iter().filter(|(k, _)| k.starts_with("frame.")).map(|(k, v)| format!("{k}={v};")).collect::<String>())
            .as_bytes(),
    );
    let cache = cfg.cache_root().join(fingerprint);
    let step = cfg.frame.step_samples(padded.first().map_or(16_000, |c| c.sample_rate));
    let features = padded
        .par_iter()
        .zip(&manifest.entries)
        .map(|(clip, meta)| -> Result<FeatureSequence> {
            let path = cache.join(format!("{}.roif", meta.path.trim_end_matches(".wav")));
            if let Ok(bytes) = fs::read(&path) {
                if let Ok(seq) = FeatureSequence::from_cache_bytes(&bytes, step) {
                    return Ok(seq);
                }
            }
            let seq = extract_features(clip, &cfg.frame).with_context(|| format!("extracting {}", meta.path))?;
            write_atomic(&path, &seq.to_cache_bytes())?;
            Ok(seq)
        })
        .collect::<Result<Vec<_>>>()?;
    let examples = manifest
        .entries
        .iter()
        .zip(features)
        .map(|(meta, features)| Example { id: meta.path.clone(), features, label: meta.emotion })
        .collect();
    Ok(Corpus { manifest, examples, pad_len })
}

pub fn features(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_run_dir(cfg)?;
    let corpus = load_corpus(cfg)?;
    write_atomic(&dir.join("manifest.csv"), corpus.manifest.to_csv()?.as_bytes())?;
    println!(
        "{} utterances, {} subjects, padded to {} samples; cache in {}",
        corpus.manifest.len(),
        corpus.manifest.subjects.len(),
        corpus.pad_len,
        cfg.cache_root().display()
    );
    Ok(())
}

fn train_split(cfg: &RunConfig, data: &[Example], pad_len: usize, tag: &str) -> Result<train::Checkpoint> {
    let mut trainer = Trainer::new(data, cfg.model.clone(), cfg.train.clone(), cfg.frame.clone())?;
    for _ in 0..cfg.train.epochs {
        let loss = trainer.run_epoch(data)?;
        eprintln!("[{tag}] epoch {}/{} loss {loss:.6}", trainer.epoch(), cfg.train.epochs);
    }
    let mut ckpt = trainer.into_checkpoint();
    ckpt.pad_len = Some(pad_len);
    Ok(ckpt)
}

fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

pub fn train_cmd(cfg: &RunConfig, held_out: Option<&str>) -> Result<()> {
    let dir = prepare_run_dir(cfg)?;
    let corpus = load_corpus(cfg)?;
    let data: Vec<Example> = corpus
        .examples
        .iter()
        .zip(&corpus.manifest.entries)
        .filter(|(_, m)| Some(m.actor_id.as_str()) != held_out)
        .map(|(e, _)| e.clone())
        .collect();
    if data.is_empty() {
        bail!("no training utterances left");
    }
    let ckpt = train_split(cfg, &data, corpus.pad_len, "train")?;
    let path = dir.join("model.roic");
    write_atomic(&path, &train::save(&ckpt))?;
    write_atomic(&dir.join("loss.csv"), loss_csv(&ckpt.loss_history).as_bytes())?;
    println!(
        "{} trained on {} utterances, final loss {:.6}; checkpoint {}",
        cfg.model.variant,
        data.len(),
        ckpt.loss_history.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn fold_stem(subject: &str) -> String {
    format!("fold_{subject}")
}

fn write_fold_manifest(dir: &Path, done: &BTreeSet<String>) -> Result<()> {
    let text: String = done.iter().map(|s| format!("{s}\n")).collect();
    write_atomic(&dir.join("MANIFEST"), text.as_bytes())
}

fn write_reports(cfg: &RunConfig, dir: &Path, folds: &[FoldResult]) -> Result<String> {
    let primary = aggregate(folds, cfg.aggregate)?;
    let mut csv = Vec::new();
    eval::write_aggregate_csv(&primary, &mut csv)?;
    write_atomic(&dir.join("aggregate.csv"), &csv)?;
    let mut summary = String::new();
    for mode in [cfg.aggregate, other_mode(cfg.aggregate)] {
        let r = aggregate(folds, mode)?;
        summary.push_str(&eval::format_summary(&format!("{}", cfg.model.variant), &r));
        summary.push('\n');
    }
    write_atomic(&dir.join("summary.txt"), summary.as_bytes())?;
    Ok(summary)
}

fn other_mode(m: AggregateMode) -> AggregateMode {
    match m {
        AggregateMode::SumThenNormalize => AggregateMode::MeanOfNormalized,
        AggregateMode::MeanOfNormalized => AggregateMode::SumThenNormalize,
    }
}

pub fn eval_loso(cfg: &RunConfig, limit: Option<usize>) -> Result<()> {
    let dir = prepare_run_dir(cfg)?;
    let corpus = load_corpus(cfg)?;
    let mut folds = loso_folds(&corpus.manifest)?;
    if let Some(k) = limit {
        folds.truncate(k);
    }
    eprintln!("{} folds planned over {} subjects", folds.len(), corpus.manifest.subjects.len());
    let fold_dir = dir.join("folds");
    fs::create_dir_all(&fold_dir)?;
    let done = Mutex::new(BTreeSet::new());
    write_fold_manifest(&dir, &done.lock().unwrap())?;

    let run_fold = |fold: &roi_attend::LosoFold| -> Result<FoldResult> {
        let pick = |idx: &[usize]| idx.iter().map(|&i| corpus.examples[i].clone()).collect::<Vec<_>>();
        let (train_set, test_set) = (pick(&fold.train_indices), pick(&fold.test_indices));
        let ckpt = train_split(cfg, &train_set, corpus.pad_len, &fold.held_out_subject)?;
        let result = evaluate_fold(&ckpt, &fold.held_out_subject, &test_set, &cfg.frame)?;
        let stem = fold_stem(&fold.held_out_subject);
        let mut csv = Vec::new();
        eval::write_fold_csv(&result, &mut csv)?;
        write_atomic(&fold_dir.join(format!("{stem}.roic")), &train::save(&ckpt))?;
        write_atomic(&fold_dir.join(format!("{stem}.csv")), &csv)?;
        let mut set = done.lock().unwrap();
        set.insert(fold.held_out_subject.clone());
        write_fold_manifest(&dir, &set)?;
        eprintln!(
            "fold {}: accuracy {:.2}%",
            fold.held_out_subject,
            100.0 * result.confusion.accuracy().unwrap_or(0.0)
        );
        Ok(result)
    };
    let outcomes: Vec<Result<FoldResult>> = if cfg.parallel > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallel)
            .build()?
            .install(|| folds.par_iter().map(run_fold).collect())
    } else {
        folds.iter().map(run_fold).collect()
    };

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (fold, outcome) in folds.iter().zip(outcomes) {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => failures.push(format!("fold {}: {e:#}", fold.held_out_subject)),
        }
    }
    if !failures.is_empty() {
        bail!(
            "{} of {} folds failed; completed folds are listed in {}\n{}",
            failures.len(),
            folds.len(),
            dir.join("MANIFEST").display(),
            failures.join("\n")
        );
    }
    print!("{}", write_reports(cfg, &dir, &results)?);
    println!("artifacts in {}", dir.display());
    Ok(())
}

/// Rebuild the aggregate and summary from stored fold CSVs.
pub fn report(cfg: &RunConfig, run: Option<&Path>) -> Result<()> {
    let dir = run.map(Path::to_path_buf).unwrap_or_else(|| cfg.run_dir());
    let fold_dir = dir.join("folds");
    let mut names: Vec<PathBuf> = fs::read_dir(&fold_dir)
        .with_context(|| format!("reading {}", fold_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    names.sort();
    let mut folds = Vec::new();
    for path in names {
        let subject = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("fold_"))
            .unwrap_or("unknown")
            .to_string();
        let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        folds.push(read_fold_csv(&subject, file).with_context(|| format!("reading {}", path.display()))?);
    }
    if folds.is_empty() {
        bail!("no fold results under {}", fold_dir.display());
    }
    print!("{}", write_reports(cfg, &dir, &folds)?);
    Ok(())
}

pub fn explain(cfg: &RunConfig, checkpoint: &Path, clip_path: &Path) -> Result<()> {
    if !clip_path.exists() {
        bail!("clip file not found: {}", clip_path.display());
    }
    if !checkpoint.exists() {
        bail!("checkpoint file not found: {}", checkpoint.display());
    }
    let ckpt = train::load_file(checkpoint)?;
    if !ckpt.model_cfg.variant.has_attention() {
        bail!(
            "{} has no attention weights; explain supports Model 1 (uni_attention) and Model 2 (bi_attention), \
             not Models 3/4 (uni_plain, bi_plain)",
            ckpt.model_cfg.variant
        );
    }
    let clip = read_wav_file(clip_path)?;
    let valid_len = clip.len();
    let target = ckpt.pad_len.filter(|&p| p >= clip.len());
    let clip = pad_to_length(std::slice::from_ref(&clip), target)?.remove(0);
    let features = extract_features(&clip, &ckpt.frame_cfg)?;
    let maps = extract_attention(&ckpt, &features, clip.sample_rate, valid_len)?;

    let dir = prepare_run_dir(cfg)?.join("explain");
    let stem = clip_path.file_stem().and_then(|s| s.to_str()).unwrap_or("clip").to_string();
    let name = clip_path.file_name().and_then(|s| s.to_str()).unwrap_or("clip").to_string();
    let last = maps.len() - 1;
    for (k, map) in maps.iter().enumerate() {
        let report = detect_roi(map, cfg.roi_ratio);
        let suffix = if k == last { String::new() } else { format!(".step{}", k + 1) };
        write_atomic(&dir.join(format!("{stem}{suffix}.json")), roi::to_json(&name, map, &report).as_bytes())?;
        if k == last {
            let sdm = expand_to_samples(map, clip.len())?;
            let spec = roi::spectrogram(&clip, &ckpt.frame_cfg)?;
            write_atomic(&dir.join(format!("{stem}.svg")), roi::render(&clip, &sdm, Some(&spec))?.as_bytes())?;
            let posterior = ckpt.predict(&features)?.posterior;
            let predicted = roi_attend::EmotionLabel::from_index(posterior.predicted()).expect("six classes");
            println!("{name}: predicted {} ({:.3})", predicted.code(), posterior.probs[predicted.index()]);
            println!("{:>10} {:>10} {:>8}", "start", "end", "mass");
            for r in &report.regions {
                println!("{:>10} {:>10} {:>8.4}", r.start, r.end, r.mass);
            }
            println!("regions hold {:.4} of the attention; padding holds {:.4}", report.total_mass_in_regions, report.silence_mass);
        }
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}

/// Central-difference check of every variant; false if any block exceeds
/// the tolerance.
pub fn gradcheck() -> Result<bool> {
    const TOL: f64 = 1e-4;
    let mut ok = true;
    for variant in Variant::ALL {
        let cfg = ModelConfig { variant, input_dim: 13, enc_hidden: 4, dec_hidden: 4, dropout_rate: 0.0, ..Default::default() };
        let mut worst: Vec<(String, f64)> = Vec::new();
        for seed in 0..3 {
            for (i, b) in gradient_check(&cfg, 6, seed, 1e-5, GRAD_CHECK_WEIGHT_SCALE)?.into_iter().enumerate() {
                match worst.get_mut(i) {
                    Some(w) => w.1 = w.1.max(b.max_relative),
                    None => worst.push((b.name, b.max_relative)),
                }
            }
        }
        println!("{variant}");
        for (name, err) in &worst {
            let flag = if *err <= TOL { "ok" } else { "FAIL" };
            println!("  {name:<28} {err:>12.3e}  {flag}");
            ok &= *err <= TOL;
        }
    }
    Ok(ok)
}

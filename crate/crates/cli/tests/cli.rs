use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_roi-attend"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).env_remove("ROI_ATTEND_CACHE").args(args).output().expect("spawn roi-attend")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &[&str] = &[
    "--synth.clips_per_class=3",
    "--synth.n_actors=3",
    "--model.enc_hidden=4",
    "--model.dec_hidden=4",
    "--train.epochs=2",
    "--train.batch_size=4",
];

/// Synthetic corpus under `<tmp>/out/data/corpus`.
fn synth_corpus(tmp: &Path) -> PathBuf {
    let mut args = vec!["synth", "--output.run_id=data"];
    args.extend_from_slice(SMALL);
    let o = run(tmp, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    tmp.join("out/data/corpus")
}

fn loso(tmp: &Path, corpus: &Path, run_id: &str, extra: &[&str]) -> Output {
    let corpus_arg = format!("--data.corpus_dir={}", corpus.display());
    let id_arg = format!("--output.run_id={run_id}");
    let mut args = vec!["eval-loso", corpus_arg.as_str(), id_arg.as_str()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    run(tmp, &args)
}

#[test]
fn help_exits_zero() {
    let o = bin().arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for cmd in ["features", "synth", "train", "eval-loso", "explain", "gradcheck", "report"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn unknown_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["synth", "--model.colour=blue"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.colour"), "{}", stderr(&o));
}

#[test]
fn bad_variant_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["synth", "--model.variant", "tri_attention"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("model.variant"), "{}", stderr(&o));
}

#[test]
fn invalid_value_in_config_file_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# comment\ntrain.epochs = many\n").unwrap();
    let o = run(tmp.path(), &["--config", cfg.to_str().unwrap(), "synth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.epochs"), "{}", stderr(&o));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "synth.n_actors = 4\nsynth.clips_per_class = 2\noutput.run_id = fromfile\n").unwrap();
    let o = run(tmp.path(), &["--config", cfg.to_str().unwrap(), "synth", "--synth.n_actors=2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let saved = fs::read_to_string(tmp.path().join("out/fromfile/config.txt")).unwrap();
    assert!(saved.contains("synth.n_actors=2"), "{saved}");
    assert!(saved.contains("synth.clips_per_class=2"), "{saved}");
    let wavs = fs::read_dir(tmp.path().join("out/fromfile/corpus"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "wav"))
        .count();
    assert_eq!(wavs, 12);
}

#[test]
fn missing_corpus_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["features", "--data.corpus_dir=nowhere"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not found"), "{}", stderr(&o));
}

#[test]
fn features_writes_manifest_and_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(tmp.path());
    let corpus_arg = format!("--data.corpus_dir={}", corpus.display());
    let o = run(tmp.path(), &["features", &corpus_arg, "--output.run_id=feat"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(tmp.path().join("out/feat/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 18);
    let cached = fs::read_dir(tmp.path().join("out/feat/cache")).unwrap().count();
    assert_eq!(cached, 1);
}

fn row_sums(csv: &str) -> Vec<f64> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum())
        .collect()
}

#[test]
fn loso_end_to_end_is_deterministic_and_reportable() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(tmp.path());

    let o = loso(tmp.path(), &corpus, "a", &["--folds", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("out/a");
    for actor in ["9001", "9002", "9003"] {
        assert!(dir.join(format!("folds/fold_{actor}.csv")).is_file());
        assert!(dir.join(format!("folds/fold_{actor}.roic")).is_file());
    }
    assert_eq!(fs::read_to_string(dir.join("MANIFEST")).unwrap(), "9001\n9002\n9003\n");
    let agg = fs::read_to_string(dir.join("aggregate.csv")).unwrap();
    assert!(agg.starts_with("true\\pred,ANG"), "{agg}");
    for s in row_sums(&agg) {
        assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
    }
    assert!(fs::read_to_string(dir.join("summary.txt")).unwrap().contains("paper-reported"));

    // Same config, fresh directory, two folds at a time: identical bytes.
    let o = loso(tmp.path(), &corpus, "b", &["--parallel", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(agg, fs::read_to_string(tmp.path().join("out/b/aggregate.csv")).unwrap());

    // Report rebuilds the aggregate from the fold CSVs alone.
    fs::remove_file(dir.join("aggregate.csv")).unwrap();
    let o = run(tmp.path(), &["report", "--run", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(agg, fs::read_to_string(dir.join("aggregate.csv")).unwrap());

    // Explain on the attention checkpoint of fold 9001.
    let clip = fs::read_dir(&corpus)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_str().unwrap().starts_with("9001_"))
        .unwrap();
    let ckpt = dir.join("folds/fold_9001.roic");
    let o = run(
        tmp.path(),
        &["explain", "--checkpoint", ckpt.to_str().unwrap(), "--clip", clip.to_str().unwrap(), "--output.run_id=ex"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let stem = clip.file_stem().unwrap().to_str().unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join(format!("out/ex/explain/{stem}.json"))).unwrap()).unwrap();
    let weights = json["weights"].as_array().unwrap();
    let total: f64 = weights.iter().map(|w| w.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    let svg = fs::read_to_string(tmp.path().join(format!("out/ex/explain/{stem}.svg"))).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let panels: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("panel")).collect();
    assert_eq!(panels.len(), 3);

    // Missing clip: runtime error.
    let o = run(tmp.path(), &["explain", "--checkpoint", ckpt.to_str().unwrap(), "--clip", "absent.wav"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not found"));
}

#[test]
fn explain_rejects_plain_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(tmp.path());
    let corpus_arg = format!("--data.corpus_dir={}", corpus.display());
    let mut args = vec!["train", corpus_arg.as_str(), "--output.run_id=plain", "--model.variant=bi_plain"];
    args.extend_from_slice(SMALL);
    let o = run(tmp.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = tmp.path().join("out/plain/model.roic");
    assert_eq!(fs::read_to_string(tmp.path().join("out/plain/loss.csv")).unwrap().lines().count(), 3);

    let clip = fs::read_dir(&corpus).unwrap().map(|e| e.unwrap().path()).find(|p| p.extension().is_some_and(|x| x == "wav")).unwrap();
    let o = run(tmp.path(), &["explain", "--checkpoint", ckpt.to_str().unwrap(), "--clip", clip.to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    let err = stderr(&o);
    assert!(err.contains("Models 3/4"), "{err}");
}

#[test]
fn gradcheck_passes() {
    let o = bin().arg("gradcheck").output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

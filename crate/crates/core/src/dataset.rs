//! Labels, corpus manifests, LOSO fold planning and the synthetic corpus
//! generator.
//!
//! Corpus files follow the `ACTOR_SENTENCE_EMOTION_LEVEL.wav` naming
//! convention, e.g. `1015_DFA_ANG_XX.wav`.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use crate::dsp::{self, AudioClip};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EmotionLabel {
    Anger,
    Disgust,
    Fear,
    Happy,
    Neutral,
    Sad,
}

pub const N_CLASSES: usize = 6;

impl EmotionLabel {
    /// Class-index order.
    pub const ALL: [EmotionLabel; N_CLASSES] = [
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Happy,
        EmotionLabel::Neutral,
        EmotionLabel::Sad,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            EmotionLabel::Anger => "ANG",
            EmotionLabel::Disgust => "DIS",
            EmotionLabel::Fear => "FEA",
            EmotionLabel::Happy => "HAP",
            EmotionLabel::Neutral => "NEU",
            EmotionLabel::Sad => "SAD",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Anger => "Anger",
            EmotionLabel::Disgust => "Disgust",
            EmotionLabel::Fear => "Fear",
            EmotionLabel::Happy => "Happy",
            EmotionLabel::Neutral => "Neutral",
            EmotionLabel::Sad => "Sad",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Emotion intensity; carried as metadata only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    Low,
    Medium,
    High,
    Unspecified,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Low, Level::Medium, Level::High, Level::Unspecified];

    pub fn code(self) -> &'static str {
        match self {
            Level::Low => "LO",
            Level::Medium => "MD",
            Level::High => "HI",
            Level::Unspecified => "XX",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.code() == code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceMeta {
    pub actor_id: String,
    pub sentence_code: String,
    pub emotion: EmotionLabel,
    pub level: Level,
    pub path: String,
}

impl UtteranceMeta {
    /// `ACTOR_SENTENCE_EMOTION_LEVEL.wav`.
    pub fn file_name(&self) -> String {
        format_filename(&self.actor_id, &self.sentence_code, self.emotion, self.level)
    }
}

pub fn format_filename(actor: &str, sentence: &str, emotion: EmotionLabel, level: Level) -> String {
    format!("{actor}_{sentence}_{}_{}.wav", emotion.code(), level.code())
}

fn parse_error(field: &str, detail: impl Into<String>) -> Error {
    Error::Parse { field: field.into(), detail: detail.into() }
}

/// Parse a corpus file name. Only the final path component is inspected;
/// `path` keeps the input as given.
pub fn parse_filename(name: &str) -> Result<UtteranceMeta> {
    let base = name.rsplit(['/', '\\']).next().unwrap_or(name);
    let stem = base
        .strip_suffix(".wav")
        .or_else(|| base.strip_suffix(".WAV"))
        .ok_or_else(|| parse_error("extension", format!("`{base}` is not a .wav file")))?;
    let fields: Vec<&str> = stem.split('_').collect();
    if fields.len() != 4 {
        return Err(parse_error("name", format!("expected 4 underscore-separated fields, found {}", fields.len())));
    }
    if fields[0].is_empty() {
        return Err(parse_error("actor", "empty actor id"));
    }
    if fields[1].is_empty() {
        return Err(parse_error("sentence", "empty sentence code"));
    }
    let emotion = EmotionLabel::from_code(fields[2])
        .ok_or_else(|| parse_error("emotion", format!("unknown emotion code `{}`", fields[2])))?;
    let level = Level::from_code(fields[3])
        .ok_or_else(|| parse_error("level", format!("unknown level code `{}`", fields[3])))?;
    Ok(UtteranceMeta {
        actor_id: fields[0].to_string(),
        sentence_code: fields[1].to_string(),
        emotion,
        level,
        path: name.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<UtteranceMeta>,
    /// Sorted unique actor ids.
    pub subjects: Vec<String>,
}

impl Manifest {
    pub fn from_entries(entries: Vec<UtteranceMeta>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::Duplicate(e.path.clone()));
            }
        }
        let subjects: BTreeSet<&str> = entries.iter().map(|e| e.actor_id.as_str()).collect();
        let subjects = subjects.into_iter().map(String::from).collect();
        Ok(Self { entries, subjects })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// CSV with header `path,actor_id,sentence,emotion,level`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["path", "actor_id", "sentence", "emotion", "level"]).map_err(csv_err)?;
        for e in &self.entries {
            w.write_record([
                e.path.as_str(),
                &e.actor_id,
                &e.sentence_code,
                e.emotion.code(),
                e.level.code(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Manifest plus the names that failed to parse.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestBuild {
    pub manifest: Manifest,
    pub warnings: Vec<String>,
}

/// Build a manifest from a listing of file names. Unparseable names become
/// warnings; duplicates and an empty result are errors.
pub fn build_manifest<S: AsRef<str>>(names: &[S]) -> Result<ManifestBuild> {
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for name in names {
        match parse_filename(name.as_ref()) {
            Ok(meta) => entries.push(meta),
            Err(e) => warnings.push(format!("{}: {e}", name.as_ref())),
        }
    }
    Ok(ManifestBuild { manifest: Manifest::from_entries(entries)?, warnings })
}

/// Sorted `.wav` file names directly under `dir`.
pub fn list_wav_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".wav") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LosoFold {
    pub held_out_subject: String,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// One fold per subject, ordered by actor id.
pub fn loso_folds(m: &Manifest) -> Result<Vec<LosoFold>> {
    if m.subjects.len() < 2 {
        return Err(Error::CannotSplit(m.subjects.len()));
    }
    Ok(m.subjects
        .iter()
        .map(|subject| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..m.entries.len()).partition(|&i| &m.entries[i].actor_id == subject);
            LosoFold { held_out_subject: subject.clone(), train_indices: train, test_indices: test }
        })
        .collect())
}

/// Carrier tone and amplitude-modulation rate identifying one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSignature {
    pub carrier_hz: f64,
    pub am_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_clips_per_class: usize,
    pub sample_rate: u32,
    /// Longest clip, in samples. Clip lengths are drawn from
    /// `min_clip_len..=clip_len`.
    pub clip_len: usize,
    pub min_clip_len: usize,
    pub burst_len: usize,
    pub burst_amplitude: f64,
    pub class_signatures: [ClassSignature; N_CLASSES],
    pub noise_amplitude: f64,
    pub n_actors: usize,
    /// First pseudo-actor id; actors are numbered consecutively from it.
    pub actor_base: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let carriers = [300.0, 700.0, 1200.0, 1700.0, 2300.0, 3000.0];
        let am = [3.0, 5.0, 7.0, 9.0, 11.0, 13.0];
        let mut class_signatures = [ClassSignature { carrier_hz: 0.0, am_hz: 0.0 }; N_CLASSES];
        for (i, sig) in class_signatures.iter_mut().enumerate() {
            *sig = ClassSignature { carrier_hz: carriers[i], am_hz: am[i] };
        }
        Self {
            n_clips_per_class: 120,
            sample_rate: 16_000,
            clip_len: 8_000,
            min_clip_len: 6_400,
            burst_len: 1_600,
            burst_amplitude: 0.5,
            class_signatures,
            noise_amplitude: 0.01,
            n_actors: 6,
            actor_base: 9001,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.burst_len == 0 || self.burst_len >= self.min_clip_len {
            return Err(Error::Config(format!(
                "burst_len {} must be positive and below min_clip_len {}",
                self.burst_len, self.min_clip_len
            )));
        }
        if self.min_clip_len > self.clip_len {
            return Err(Error::Config("min_clip_len exceeds clip_len".into()));
        }
        if self.n_actors == 0 || self.sample_rate == 0 {
            return Err(Error::Config("n_actors and sample_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    pub clip: AudioClip,
    pub meta: UtteranceMeta,
    /// Burst span in samples, `[start, start + burst_len)`.
    pub burst: Range<usize>,
}

impl SyntheticClip {
    pub fn label(&self) -> EmotionLabel {
        self.meta.emotion
    }

    pub fn actor_id(&self) -> &str {
        &self.meta.actor_id
    }
}

/// Low-level uniform noise with one class-signature burst per clip.
///
/// Clips are generated class-major; clip `k` goes to pseudo-actor
/// `actor_base + k % n_actors`. The output is unpadded.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SyntheticClip>> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let sr = f64::from(spec.sample_rate);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut per_actor_class = vec![0usize; spec.n_actors * N_CLASSES];
    let mut out = Vec::with_capacity(spec.n_clips_per_class * N_CLASSES);

    for label in EmotionLabel::ALL {
        let sig = spec.class_signatures[label.index()];
        for i in 0..spec.n_clips_per_class {
            let k = label.index() * spec.n_clips_per_class + i;
            let actor_slot = k % spec.n_actors;
            let len = spec.min_clip_len + rng.below(spec.clip_len - spec.min_clip_len + 1);
            let mut samples: Vec<f64> = (0..len)
                .map(|_| rng.uniform_range(-spec.noise_amplitude, spec.noise_amplitude))
                .collect();
            let start = rng.below(len - spec.burst_len + 1);
            let phase = rng.uniform_range(0.0, two_pi);
            let am_phase = rng.uniform_range(0.0, two_pi);
            for n in 0..spec.burst_len {
                let t = n as f64 / sr;
                let envelope = 0.75 + 0.25 * (two_pi * sig.am_hz * t + am_phase).sin();
                samples[start + n] += spec.burst_amplitude * envelope * (two_pi * sig.carrier_hz * t + phase).sin();
            }
            samples.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));

            let actor_id = (spec.actor_base as usize + actor_slot).to_string();
            let counter = &mut per_actor_class[actor_slot * N_CLASSES + label.index()];
            let sentence_code = format!("S{counter:03}");
            *counter += 1;
            let meta = UtteranceMeta {
                path: format_filename(&actor_id, &sentence_code, label, Level::Unspecified),
                actor_id,
                sentence_code,
                emotion: label,
                level: Level::Unspecified,
            };
            out.push(SyntheticClip {
                clip: AudioClip::new(samples, spec.sample_rate, meta.path.clone()),
                meta,
                burst: start..start + spec.burst_len,
            });
        }
    }
    Ok(out)
}

/// Write each clip as a WAV named by the corpus convention, plus
/// `regions.csv` (`path,burst_start,burst_end`).
pub fn export_synthetic(dir: &Path, clips: &[SyntheticClip]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut regions = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    regions.write_record(["path", "burst_start", "burst_end"]).map_err(csv_err)?;
    for c in clips {
        let path = dir.join(&c.meta.path);
        std::fs::write(&path, dsp::write_wav(&c.clip)?).map_err(|e| Error::io(&path, e))?;
        regions
            .write_record([c.meta.path.clone(), c.burst.start.to_string(), c.burst.end.to_string()])
            .map_err(csv_err)?;
    }
    let bytes = regions.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join("regions.csv");
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

/// Read `regions.csv` back into `(path, burst)` pairs.
pub fn read_regions(path: &Path) -> Result<Vec<(String, Range<usize>)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Format(e.to_string()))?;
        let num = |i: usize| -> Result<usize> {
            row.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad regions row {row:?}")))
        };
        out.push((row.get(0).unwrap_or_default().to_string(), num(1)?..num(2)?));
    }
    Ok(out)
}

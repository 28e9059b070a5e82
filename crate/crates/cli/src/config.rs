//! Flat `section.key=value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use roi_attend::dataset::SyntheticSpec;
use roi_attend::eval::AggregateMode;
use roi_attend::train::Optimizer;
use roi_attend::{FrameConfig, ModelConfig, TrainConfig, Variant};
use sha2::{Digest, Sha256};

/// A rejected key or value, reported with exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub frame: FrameConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub corpus_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub pad_len: Option<usize>,
    pub out_dir: PathBuf,
    pub run_id: Option<String>,
    pub aggregate: AggregateMode,
    pub parallel: usize,
    pub roi_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            frame: FrameConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SyntheticSpec::default(),
            corpus_dir: None,
            cache_dir: None,
            pad_len: None,
            out_dir: PathBuf::from("out"),
            run_id: None,
            aggregate: AggregateMode::SumThenNormalize,
            parallel: 1,
            roi_ratio: 2.0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError(format!("invalid value `{value}` for {key}")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str, none: &str) -> Result<Option<T>, ConfigError> {
    if value == none {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn adam_mut(train: &mut TrainConfig) -> (&mut f64, &mut f64, &mut f64) {
    if matches!(train.optimizer, Optimizer::Sgd) {
        train.optimizer = Optimizer::adam_default();
    }
    match &mut train.optimizer {
        Optimizer::Adam { beta1, beta2, eps } => (beta1, beta2, eps),
        Optimizer::Sgd => unreachable!(),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "frame.frame_len_ms" => self.frame.frame_len_ms = parse(key, v)?,
            "frame.step_ms" => self.frame.step_ms = parse(key, v)?,
            "frame.n_mfcc" => self.frame.n_mfcc = parse(key, v)?,
            "frame.n_mels" => self.frame.n_mels = parse(key, v)?,
            "frame.fft_size" => self.frame.fft_size = parse(key, v)?,
            "frame.preemphasis" => self.frame.preemphasis = parse(key, v)?,
            "frame.sample_rate" => self.frame.expected_rate = parse_opt(key, v, "any")?,
            "model.variant" => {
                self.model.variant = Variant::from_key(v).ok_or_else(|| {
                    ConfigError(format!(
                        "invalid value `{v}` for model.variant (expected uni_attention, bi_attention, uni_plain or bi_plain)"
                    ))
                })?
            }
            "model.enc_hidden" => self.model.enc_hidden = parse(key, v)?,
            "model.dec_hidden" => self.model.dec_hidden = parse(key, v)?,
            "model.attn_hidden" => self.model.attn_hidden = parse(key, v)?,
            "model.dropout" => self.model.dropout_rate = parse(key, v)?,
            "model.dec_steps" => self.model.dec_steps = parse(key, v)?,
            "model.mask_padding" => self.model.mask_padding = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.optimizer" => {
                self.train.optimizer = match v {
                    "sgd" => Optimizer::Sgd,
                    "adam" => Optimizer::adam_default(),
                    _ => return Err(ConfigError(format!("invalid value `{v}` for train.optimizer (sgd or adam)"))),
                }
            }
            "train.beta1" => *adam_mut(&mut self.train).0 = parse(key, v)?,
            "train.beta2" => *adam_mut(&mut self.train).1 = parse(key, v)?,
            "train.eps" => *adam_mut(&mut self.train).2 = parse(key, v)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.grad_clip" => self.train.grad_clip = parse_opt(key, v, "none")?,
            "train.shuffle" => self.train.shuffle = parse(key, v)?,
            "synth.clips_per_class" => self.synth.n_clips_per_class = parse(key, v)?,
            "synth.clip_len" => self.synth.clip_len = parse(key, v)?,
            "synth.min_clip_len" => self.synth.min_clip_len = parse(key, v)?,
            "synth.burst_len" => self.synth.burst_len = parse(key, v)?,
            "synth.burst_amplitude" => self.synth.burst_amplitude = parse(key, v)?,
            "synth.noise_amplitude" => self.synth.noise_amplitude = parse(key, v)?,
            "synth.n_actors" => self.synth.n_actors = parse(key, v)?,
            "synth.actor_base" => self.synth.actor_base = parse(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            "data.corpus_dir" => self.corpus_dir = Some(PathBuf::from(v)),
            "data.cache_dir" => self.cache_dir = Some(PathBuf::from(v)),
            "data.pad_len" => self.pad_len = parse_opt(key, v, "auto")?,
            "output.dir" => self.out_dir = PathBuf::from(v),
            "output.run_id" => self.run_id = Some(v.to_string()),
            "eval.aggregate" => {
                self.aggregate = AggregateMode::from_key(v).ok_or_else(|| {
                    ConfigError(format!(
                        "invalid value `{v}` for eval.aggregate (sum_then_normalize or mean_of_normalized)"
                    ))
                })?
            }
            "eval.parallel" => self.parallel = parse(key, v)?,
            "roi.ratio" => self.roi_ratio = parse(key, v)?,
            _ => return Err(ConfigError(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Apply a `key=value` file. Blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config file {}: {e}", path.display())))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Check every component; derived fields are filled in here.
    pub fn finish(mut self) -> Result<Self, ConfigError> {
        self.model.input_dim = self.frame.n_mfcc;
        let wrap = |what: &str, e: roi_attend::Error| ConfigError(format!("{what}: {e}"));
        self.frame.validate().map_err(|e| wrap("frame", e))?;
        self.model.validate().map_err(|e| wrap("model", e))?;
        self.train.validate().map_err(|e| wrap("train", e))?;
        self.synth.validate().map_err(|e| wrap("synth", e))?;
        if self.parallel == 0 {
            return Err(ConfigError("eval.parallel must be >= 1".into()));
        }
        if !(self.roi_ratio > 0.0) {
            return Err(ConfigError("roi.ratio must be > 0".into()));
        }
        Ok(self)
    }

    /// Canonical sorted dump of every setting that affects results.
    pub fn canonical(&self) -> BTreeMap<&'static str, String> {
        let f = &self.frame;
        let m = &self.model;
        let t = &self.train;
        let s = &self.synth;
        let mut kv = BTreeMap::new();
        kv.insert("frame.frame_len_ms", f.frame_len_ms.to_string());
        kv.insert("frame.step_ms", f.step_ms.to_string());
        kv.insert("frame.n_mfcc", f.n_mfcc.to_string());
        kv.insert("frame.n_mels", f.n_mels.to_string());
        kv.insert("frame.fft_size", f.fft_size.to_string());
        kv.insert("frame.preemphasis", f.preemphasis.to_string());
        kv.insert("frame.sample_rate", f.expected_rate.map_or("any".into(), |r| r.to_string()));
        kv.insert("model.variant", m.variant.key().into());
        kv.insert("model.enc_hidden", m.enc_hidden.to_string());
        kv.insert("model.dec_hidden", m.dec_hidden.to_string());
        kv.insert("model.attn_hidden", m.attn_hidden.to_string());
        kv.insert("model.dropout", m.dropout_rate.to_string());
        kv.insert("model.dec_steps", m.dec_steps.to_string());
        kv.insert("model.mask_padding", m.mask_padding.to_string());
        kv.insert("train.learning_rate", t.learning_rate.to_string());
        kv.insert("train.epochs", t.epochs.to_string());
        kv.insert("train.batch_size", t.batch_size.to_string());
        match t.optimizer {
            Optimizer::Sgd => {
                kv.insert("train.optimizer", "sgd".into());
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                kv.insert("train.optimizer", "adam".into());
                kv.insert("train.beta1", beta1.to_string());
                kv.insert("train.beta2", beta2.to_string());
                kv.insert("train.eps", eps.to_string());
            }
        }
        kv.insert("train.seed", t.seed.to_string());
        kv.insert("train.grad_clip", t.grad_clip.map_or("none".into(), |c| c.to_string()));
        kv.insert("train.shuffle", t.shuffle.to_string());
        kv.insert("synth.clips_per_class", s.n_clips_per_class.to_string());
        kv.insert("synth.clip_len", s.clip_len.to_string());
        kv.insert("synth.min_clip_len", s.min_clip_len.to_string());
        kv.insert("synth.burst_len", s.burst_len.to_string());
        kv.insert("synth.burst_amplitude", s.burst_amplitude.to_string());
        kv.insert("synth.noise_amplitude", s.noise_amplitude.to_string());
        kv.insert("synth.n_actors", s.n_actors.to_string());
        kv.insert("synth.actor_base", s.actor_base.to_string());
        kv.insert("synth.seed", s.seed.to_string());
        kv.insert("data.pad_len", self.pad_len.map_or("auto".into(), |p| p.to_string()));
        kv.insert("data.corpus_dir", self.corpus_dir.as_ref().map_or(String::new(), |p| p.display().to_string()));
        kv.insert("eval.aggregate", self.aggregate.key().into());
        kv.insert("roi.ratio", self.roi_ratio.to_string());
        kv
    }

    pub fn canonical_text(&self) -> String {
        self.canonical().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Output directory for this run: `output.run_id`, or a hash of the
    /// canonical config.
    pub fn run_dir(&self) -> PathBuf {
        let id = self.run_id.clone().unwrap_or_else(|| short_hash(self.canonical_text().as_bytes()));
        self.out_dir.join(id)
    }

    /// `ROI_ATTEND_CACHE`, then `data.cache_dir`, then `<run>/cache`.
    pub fn cache_root(&self) -> PathBuf {
        if let Some(env) = std::env::var_os("ROI_ATTEND_CACHE").filter(|v| !v.is_empty()) {
            return PathBuf::from(env);
        }
        self.cache_dir.clone().unwrap_or_else(|| self.run_dir().join("cache"))
    }
}

pub fn short_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Pull `--section.key=value` (or `--section.key value`) overrides out of
/// the argument list; everything else is left for the flag parser.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), ConfigError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (body, None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| ConfigError(format!("missing value for --{name}")))?,
        };
        overrides.push((name.to_string(), value));
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_out() {
        let (rest, o) =
            split_overrides(args(&["roi-attend", "train", "--model.variant=uni_plain", "--train.epochs", "3", "--folds", "2"]))
                .unwrap();
        assert_eq!(rest, args(&["roi-attend", "train", "--folds", "2"]));
        assert_eq!(o, vec![("model.variant".into(), "uni_plain".into()), ("train.epochs".into(), "3".into())]);
        assert!(split_overrides(args(&["x", "--train.epochs"])).is_err());
    }

    #[test]
    fn values_are_checked() {
        let mut c = RunConfig::default();
        c.set("model.variant", "bi_plain").unwrap();
        assert_eq!(c.model.variant, Variant::BiPlain);
        let e = c.set("model.variant", "lstm9000").unwrap_err();
        assert!(e.0.contains("model.variant"));
        assert!(c.set("model.colour", "red").unwrap_err().0.contains("model.colour"));
        assert!(c.set("train.epochs", "many").is_err());
        c.set("train.grad_clip", "none").unwrap();
        assert_eq!(c.train.grad_clip, None);
        c.set("train.optimizer", "sgd").unwrap();
        c.set("train.beta1", "0.8").unwrap();
        assert!(matches!(c.train.optimizer, Optimizer::Adam { beta1, .. } if beta1 == 0.8));
    }

    #[test]
    fn finish_validates_and_derives() {
        let mut c = RunConfig::default();
        c.set("frame.n_mfcc", "20").unwrap();
        let c = c.finish().unwrap();
        assert_eq!(c.model.input_dim, 20);
        let mut c = RunConfig::default();
        c.set("train.epochs", "0").unwrap();
        assert!(c.finish().is_err());
    }

    #[test]
    fn run_dir_is_stable() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.run_dir(), b.run_dir());
        let mut c = RunConfig::default();
        c.set("train.seed", "9").unwrap();
        assert_ne!(a.run_dir(), c.run_dir());
        c.set("output.run_id", "mine").unwrap();
        assert_eq!(c.run_dir(), PathBuf::from("out/mine"));
    }
}

//! Audio ingestion and the MFCC front-end.
//!
//! Per frame the chain is: optional pre-emphasis, Hamming window, power
//! spectrum `|X_k|^2 / fft_size` over bins `0..=fft_size/2`, triangular mel
//! filterbank spanning 0 Hz to Nyquist (HTK mel scale
//! `2595 * log10(1 + f / 700)`), natural log with a floor of `1e-10`, and an
//! orthonormal DCT-II of which the first `n_mfcc` coefficients are kept.

use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Floor applied to filterbank energies before the log.
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_id: String,
    /// Length before zero-padding.
    pub original_len: usize,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32, source_id: impl Into<String>) -> Self {
        let original_len = samples.len();
        Self { samples, sample_rate, source_id: source_id.into(), original_len }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Decode a RIFF/WAVE byte stream holding 16-bit mono PCM.
///
/// Samples are scaled by `1 / 32768`. Stereo and other bit depths are
/// rejected rather than converted.
pub fn read_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("missing RIFF/WAVE magic".into()));
    }
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| match e {
        hound::Error::Unsupported => Error::UnsupportedFormat("unsupported WAV encoding".into()),
        other => Error::Format(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{} channels; only mono is accepted",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{}-bit {:?}; only 16-bit PCM is accepted",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(e.to_string()))?;
    if samples.is_empty() {
        return Err(Error::Format("no samples".into()));
    }
    Ok(AudioClip::new(samples, spec.sample_rate, String::new()))
}

pub fn read_wav_file(path: &Path) -> Result<AudioClip> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut clip = read_wav(&bytes)?;
    clip.source_id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(clip)
}

/// Encode as 16-bit mono PCM. Samples are clamped to the representable range.
pub fn write_wav(clip: &AudioClip) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut writer =
            hound::WavWriter::new(&mut buf, spec).map_err(|e| Error::Format(e.to_string()))?;
        for &s in &clip.samples {
            let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).map_err(|e| Error::Format(e.to_string()))?;
        }
        writer.finalize().map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(buf.into_inner())
}

/// Zero-pad every clip to `target` samples, or to the longest clip when
/// `target` is `None`. Never truncates.
pub fn pad_to_length(clips: &[AudioClip], target: Option<usize>) -> Result<Vec<AudioClip>> {
    let longest = clips.iter().map(AudioClip::len).max().unwrap_or(0);
    let target = target.unwrap_or(longest);
    clips
        .iter()
        .map(|clip| {
            if clip.len() > target {
                return Err(Error::TruncationRefused {
                    source_id: clip.source_id.clone(),
                    len: clip.len(),
                    target,
                });
            }
            let mut padded = clip.clone();
            padded.samples.resize(target, 0.0);
            Ok(padded)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameConfig {
    pub frame_len_ms: f64,
    pub step_ms: f64,
    pub n_mfcc: usize,
    pub n_mels: usize,
    pub fft_size: usize,
    pub preemphasis: f64,
    /// Sample rate input must have; `None` accepts any rate.
    pub expected_rate: Option<u32>,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_len_ms: 20.0,
            step_ms: 10.0,
            n_mfcc: 13,
            n_mels: 26,
            fft_size: 512,
            preemphasis: 0.97,
            expected_rate: Some(16_000),
        }
    }
}

impl FrameConfig {
    pub fn frame_len_samples(&self, sample_rate: u32) -> usize {
        ms_to_samples(self.frame_len_ms, sample_rate)
    }

    pub fn step_samples(&self, sample_rate: u32) -> usize {
        ms_to_samples(self.step_ms, sample_rate)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_ms > 0.0 && self.step_ms <= self.frame_len_ms) {
            return Err(Error::Config(format!(
                "need 0 < step_ms <= frame_len_ms, got step {} frame {}",
                self.step_ms, self.frame_len_ms
            )));
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::Config(format!(
                "need 0 < n_mfcc <= n_mels, got {} and {}",
                self.n_mfcc, self.n_mels
            )));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return Err(Error::Config(format!("preemphasis {} outside [0,1)", self.preemphasis)));
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the rate-dependent checks.
    pub fn validate_for_rate(&self, sample_rate: u32) -> Result<()> {
        self.validate()?;
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(expected) = self.expected_rate {
            if expected != sample_rate {
                return Err(Error::Config(format!(
                    "sample rate {sample_rate} Hz, expected {expected} Hz"
                )));
            }
        }
        let len = self.frame_len_samples(sample_rate);
        if len == 0 || self.step_samples(sample_rate) == 0 {
            return Err(Error::Config("frame or step rounds to zero samples".into()));
        }
        if self.fft_size < len {
            return Err(Error::Config(format!(
                "fft_size {} smaller than frame length {len}",
                self.fft_size
            )));
        }
        Ok(())
    }
}

fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * f64::from(sample_rate) / 1000.0).round() as usize
}

/// Overlapping analysis frames of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    /// `T x frame_len`.
    pub data: Matrix,
    pub frame_times: Vec<usize>,
    pub frame_len: usize,
    pub step: usize,
    pub sample_rate: u32,
    /// Unpadded clip length; frames starting at or past it are padding.
    pub valid_len: usize,
}

impl Frames {
    pub fn count(&self) -> usize {
        self.frame_times.len()
    }
}

/// Slice a clip into `1 + floor((N - L) / S)` frames; frame `i` starts at
/// `i * S`. Trailing samples that do not fill a frame are dropped.
pub fn frame_signal(clip: &AudioClip, cfg: &FrameConfig) -> Result<Frames> {
    cfg.validate_for_rate(clip.sample_rate)?;
    let len = cfg.frame_len_samples(clip.sample_rate);
    let step = cfg.step_samples(clip.sample_rate);
    let n = clip.len();
    if n < len {
        return Err(Error::TooShort { len: n, needed: len });
    }
    let count = 1 + (n - len) / step;
    let frame_times: Vec<usize> = (0..count).map(|i| i * step).collect();
    let mut data = Vec::with_capacity(count * len);
    for &start in &frame_times {
        data.extend_from_slice(&clip.samples[start..start + len]);
    }
    Ok(Frames {
        data: Matrix::new(count, len, data)?,
        frame_times,
        frame_len: len,
        step,
        sample_rate: clip.sample_rate,
        valid_len: clip.original_len.min(n),
    })
}

/// MFCC frames of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// `T x n_mfcc`.
    pub frames: Matrix,
    pub frame_times: Vec<usize>,
    /// True where the frame lies entirely in zero-padding.
    pub pad_mask: Vec<bool>,
}

const CACHE_MAGIC: &[u8; 4] = b"ROIF";
pub const CACHE_VERSION: u32 = 1;

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    /// Feature-cache encoding: `"ROIF"`, version, `T`, `n_mfcc` (u32 LE),
    /// `T * n_mfcc` f64 LE row-major, then `T` pad-mask bytes.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.frames.len() * 8 + self.len());
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.frames.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.pad_mask.iter().map(|&m| u8::from(m)));
        out
    }

    /// Inverse of [`to_cache_bytes`](Self::to_cache_bytes). Frame start times
    /// are not stored and are rebuilt from `step` samples.
    pub fn from_cache_bytes(bytes: &[u8], step: usize) -> Result<Self> {
        let header = bytes.get(..16).ok_or_else(|| Error::Load("feature cache truncated".into()))?;
        if &header[0..4] != CACHE_MAGIC {
            return Err(Error::Load("bad feature cache magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != CACHE_VERSION {
            return Err(Error::Version { expected: CACHE_VERSION, found: version });
        }
        let (t, dim) = (word(8) as usize, word(12) as usize);
        let expected = 16 + t * dim * 8 + t;
        if bytes.len() != expected {
            return Err(Error::Load(format!(
                "feature cache has {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let values = bytes[16..16 + t * dim * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let pad_mask = bytes[16 + t * dim * 8..].iter().map(|&b| b != 0).collect();
        Ok(Self {
            frames: Matrix::new(t, dim, values)?,
            frame_times: (0..t).map(|i| i * step).collect(),
            pad_mask,
        })
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the `n_mels` triangular filters.
pub fn mel_centers(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    mel_edges(n_mels, sample_rate)[1..=n_mels].to_vec()
}

fn mel_edges(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(f64::from(sample_rate) / 2.0);
    (0..n_mels + 2).map(|j| mel_to_hz(top * j as f64 / (n_mels + 1) as f64)).collect()
}

/// Precomputed window, filterbank, DCT basis and FFT plan for one
/// `(FrameConfig, sample_rate)` pair.
#[derive(Clone)]
pub struct MfccExtractor {
    cfg: FrameConfig,
    frame_len: usize,
    window: Vec<f64>,
    filterbank: Matrix,
    dct: Matrix,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor")
            .field("cfg", &self.cfg)
            .field("frame_len", &self.frame_len)
            .finish_non_exhaustive()
    }
}

impl MfccExtractor {
    pub fn new(cfg: &FrameConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate_for_rate(sample_rate)?;
        let frame_len = cfg.frame_len_samples(sample_rate);
        let window = (0..frame_len)
            .map(|n| {
                if frame_len == 1 {
                    1.0
                } else {
                    0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (frame_len - 1) as f64).cos()
                }
            })
            .collect();

        let n_bins = cfg.fft_size / 2 + 1;
        let edges = mel_edges(cfg.n_mels, sample_rate);
        let mut filterbank = Matrix::zeros(cfg.n_mels, n_bins);
        for m in 0..cfg.n_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * f64::from(sample_rate) / cfg.fft_size as f64;
                let w = if f > lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                filterbank.set(m, k, w);
            }
        }

        let n = cfg.n_mels as f64;
        let mut dct = Matrix::zeros(cfg.n_mfcc, cfg.n_mels);
        for k in 0..cfg.n_mfcc {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for j in 0..cfg.n_mels {
                let angle = std::f64::consts::PI * k as f64 * (2 * j + 1) as f64 / (2.0 * n);
                dct.set(k, j, scale * angle.cos());
            }
        }

        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self { cfg: cfg.clone(), frame_len, window, filterbank, dct, fft })
    }

    pub fn config(&self) -> &FrameConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Matrix {
        &self.filterbank
    }

    fn check_frame(&self, frame: &[f64]) -> Result<()> {
        if frame.len() != self.frame_len {
            return Err(Error::Shape(format!(
                "frame has {} samples, extractor expects {}",
                frame.len(),
                self.frame_len
            )));
        }
        Ok(())
    }

    /// Power spectrum `|X_k|^2 / fft_size` for `k in 0..=fft_size/2` after
    /// pre-emphasis and windowing.
    pub fn power_spectrum(&self, frame: &[f64]) -> Result<Vec<f64>> {
        self.check_frame(frame)?;
        let alpha = self.cfg.preemphasis;
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        for (n, slot) in buf.iter_mut().take(self.frame_len).enumerate() {
            let x = if n == 0 || alpha == 0.0 { frame[n] } else { frame[n] - alpha * frame[n - 1] };
            *slot = Complex::new(x * self.window[n], 0.0);
        }
        self.fft.process(&mut buf);
        let norm = self.cfg.fft_size as f64;
        Ok(buf[..self.cfg.fft_size / 2 + 1].iter().map(|c| c.norm_sqr() / norm).collect())
    }

    /// Filterbank energies (before the log).
    pub fn mel_energies(&self, frame: &[f64]) -> Result<Vec<f64>> {
        let power = self.power_spectrum(frame)?;
        let mut out = vec![0.0; self.cfg.n_mels];
        crate::numerics::gemv_acc(&self.filterbank, &power, &mut out);
        Ok(out)
    }

    pub fn frame_mfcc(&self, frame: &[f64]) -> Result<Vec<f64>> {
        let log_energies: Vec<f64> =
            self.mel_energies(frame)?.into_iter().map(|e| e.max(LOG_FLOOR).ln()).collect();
        let mut out = vec![0.0; self.cfg.n_mfcc];
        crate::numerics::gemv_acc(&self.dct, &log_energies, &mut out);
        Ok(out)
    }

    pub fn extract(&self, frames: &Frames) -> Result<FeatureSequence> {
        let mut values = Vec::with_capacity(frames.count() * self.cfg.n_mfcc);
        for t in 0..frames.count() {
            values.extend(self.frame_mfcc(frames.data.row(t))?);
        }
        Ok(FeatureSequence {
            frames: Matrix::new(frames.count(), self.cfg.n_mfcc, values)?,
            frame_times: frames.frame_times.clone(),
            pad_mask: frames.frame_times.iter().map(|&s| s >= frames.valid_len).collect(),
        })
    }
}

/// MFCCs of pre-computed frames.
pub fn mfcc(frames: &Frames, cfg: &FrameConfig) -> Result<FeatureSequence> {
    MfccExtractor::new(cfg, frames.sample_rate)?.extract(frames)
}

/// Frame and extract in one go.
pub fn extract_features(clip: &AudioClip, cfg: &FrameConfig) -> Result<FeatureSequence> {
    mfcc(&frame_signal(clip, cfg)?, cfg)
}

//! Attention maps, their sample-domain expansion, salient-region detection
//! and export.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dsp::{frame_signal, AudioClip, FeatureSequence, FrameConfig, MfccExtractor};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::train::Checkpoint;

/// Attention weights of one decoder step over the encoder frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub weights: Vec<f64>,
    /// Start sample of each frame.
    pub frame_times: Vec<usize>,
    pub frame_len: usize,
    pub step: usize,
    pub pad_mask: Vec<bool>,
    /// Samples of real (unpadded) audio.
    pub valid_len: usize,
}

impl AttentionMap {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// One past the last sample covered by any frame.
    pub fn coverage_end(&self) -> usize {
        self.frame_times.last().map_or(0, |t| t + self.frame_len)
    }

    fn frame_mid(&self, t: usize) -> usize {
        self.frame_times[t] + self.frame_len / 2
    }

    /// Weight on frames whose midpoint falls inside `span`.
    pub fn mass_within(&self, span: &Range<usize>) -> f64 {
        (0..self.len()).filter(|&t| span.contains(&self.frame_mid(t))).map(|t| self.weights[t]).sum()
    }

    /// Mean weight over padded and over non-padded frames; `None` for a
    /// group with no frames.
    pub fn mean_weights(&self) -> (Option<f64>, Option<f64>) {
        let mean = |padded: bool| {
            let w: Vec<f64> = (0..self.len()).filter(|&t| self.pad_mask[t] == padded).map(|t| self.weights[t]).collect();
            (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64)
        };
        (mean(true), mean(false))
    }
}

/// Eval-mode attention maps, one per decoder step, for raw features of a
/// clip at `sample_rate` whose unpadded length is `valid_len`.
pub fn extract_attention(
    ckpt: &Checkpoint,
    features: &FeatureSequence,
    sample_rate: u32,
    valid_len: usize,
) -> Result<Vec<AttentionMap>> {
    if !ckpt.model_cfg.variant.has_attention() {
        return Err(Error::NoAttention(ckpt.model_cfg.variant.to_string()));
    }
    let trace = ckpt.predict(features)?.trace.ok_or_else(|| Error::NoAttention(ckpt.model_cfg.variant.to_string()))?;
    let frame_len = ckpt.frame_cfg.frame_len_samples(sample_rate);
    let step = ckpt.frame_cfg.step_samples(sample_rate);
    Ok((0..trace.a.rows())
        .map(|s| AttentionMap {
            weights: trace.a.row(s).to_vec(),
            frame_times: features.frame_times.clone(),
            frame_len,
            step,
            pad_mask: features.pad_mask.clone(),
            valid_len,
        })
        .collect())
}

/// Per-sample attention weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDomainMap {
    pub weights: Vec<f64>,
}

/// Each sample takes the mean weight of the frames covering it; uncovered
/// samples are zero.
pub fn expand_to_samples(map: &AttentionMap, n_samples: usize) -> Result<SampleDomainMap> {
    let end = map.coverage_end();
    if n_samples < end {
        return Err(Error::Range(format!("{n_samples} samples, frames reach sample {end}")));
    }
    let mut sum = vec![0.0; n_samples];
    let mut count = vec![0u32; n_samples];
    for (&start, &w) in map.frame_times.iter().zip(&map.weights) {
        for i in start..start + map.frame_len {
            sum[i] += w;
            count[i] += 1;
        }
    }
    let weights = sum.iter().zip(&count).map(|(&s, &c)| if c == 0 { 0.0 } else { s / f64::from(c) }).collect();
    Ok(SampleDomainMap { weights })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub start: usize,
    pub end: usize,
    pub mass: f64,
    #[serde(skip)]
    pub frames: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiReport {
    /// Sorted, disjoint sample spans.
    pub regions: Vec<Region>,
    pub total_mass_in_regions: f64,
    /// Weight on padded frames.
    pub silence_mass: f64,
}

impl RoiReport {
    pub fn top_region(&self) -> Option<&Region> {
        self.regions.iter().fold(None, |best: Option<&Region>, r| match best {
            Some(b) if b.mass >= r.mass => Some(b),
            _ => Some(r),
        })
    }
}

pub const DEFAULT_RATIO: f64 = 2.0;

/// Maximal runs of frames whose weight exceeds `ratio / x`.
pub fn detect_roi(map: &AttentionMap, ratio: f64) -> RoiReport {
    let x = map.len();
    let silence_mass = (0..x).filter(|&t| map.pad_mask[t]).map(|t| map.weights[t]).sum();
    if x == 0 {
        return RoiReport { regions: Vec::new(), total_mass_in_regions: 0.0, silence_mass };
    }
    let threshold = ratio / x as f64;
    let mut regions: Vec<Region> = Vec::new();
    let mut t = 0;
    while t < x {
        if map.weights[t] <= threshold {
            t += 1;
            continue;
        }
        let first = t;
        while t < x && map.weights[t] > threshold {
            t += 1;
        }
        let frames = first..t;
        let mut start = map.frame_times[first];
        let mut end = map.frame_times[t - 1] + map.frame_len;
        if frames.clone().all(|k| !map.pad_mask[k]) && map.valid_len > start {
            end = end.min(map.valid_len);
        }
        if let Some(prev) = regions.last() {
            start = start.max(prev.end);
        }
        let mass = map.weights[frames.clone()].iter().sum::<f64>().clamp(0.0, 1.0);
        regions.push(Region { start, end: end.max(start), mass, frames });
    }
    let total_mass_in_regions = regions.iter().map(|r| r.mass).sum();
    RoiReport { regions, total_mass_in_regions, silence_mass }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub path: String,
    pub x: usize,
    pub frame_len: usize,
    pub step: usize,
    pub weights: Vec<f64>,
    pub regions: Vec<Region>,
    pub silence_mass: f64,
}

pub fn to_json(path: &str, map: &AttentionMap, report: &RoiReport) -> String {
    let export = AttentionExport {
        path: path.to_string(),
        x: map.len(),
        frame_len: map.frame_len,
        step: map.step,
        weights: map.weights.clone(),
        regions: report.regions.clone(),
        silence_mass: report.silence_mass,
    };
    serde_json::to_string_pretty(&export).expect("plain data serializes")
}

/// Log-power spectrogram in dB, `T x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frame_times: Vec<usize>,
    pub frame_len: usize,
    pub db: Matrix,
}

pub fn spectrogram(clip: &AudioClip, cfg: &FrameConfig) -> Result<Spectrogram> {
    let frames = frame_signal(clip, cfg)?;
    let ex = MfccExtractor::new(cfg, clip.sample_rate)?;
    let mut rows = Vec::with_capacity(frames.count());
    for t in 0..frames.count() {
        rows.push(ex.power_spectrum(frames.data.row(t))?.iter().map(|p| 10.0 * p.max(1e-12).log10()).collect());
    }
    Ok(Spectrogram { frame_times: frames.frame_times, frame_len: frames.frame_len, db: Matrix::from_rows(&rows)? })
}

const WIDTH: f64 = 1000.0;
const PANEL: f64 = 160.0;
const GAP: f64 = 20.0;
const SPEC_BANDS: usize = 64;

fn columns(n: usize) -> usize {
    n.clamp(1, WIDTH as usize)
}

/// Stacked waveform, optional spectrogram and attention panels sharing the
/// sample axis.
pub fn render(clip: &AudioClip, sdm: &SampleDomainMap, spec: Option<&Spectrogram>) -> Result<String> {
    let n = clip.len();
    if sdm.weights.len() != n {
        return Err(Error::Range(format!("attention covers {} samples, clip has {n}", sdm.weights.len())));
    }
    if n == 0 {
        return Err(Error::Range("empty clip".into()));
    }
    if let Some(s) = spec {
        let end = s.frame_times.last().map_or(0, |t| t + s.frame_len);
        if end > n || s.frame_times.len() != s.db.rows() {
            return Err(Error::Range(format!("spectrogram reaches sample {end}, clip has {n}")));
        }
    }
    let panels = 2 + usize::from(spec.is_some());
    let height = panels as f64 * (PANEL + GAP) + GAP;
    let xs = |sample: usize| sample as f64 * WIDTH / n as f64;
    let cols = columns(n);
    let col_range = |c: usize| (c * n / cols)..((c + 1) * n / cols).max(c * n / cols + 1);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let mut y0 = GAP;

    let peak = clip.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { PANEL / 2.0 / peak } else { 0.0 };
    let mid = PANEL / 2.0;
    let mut pts = String::new();
    for c in 0..cols {
        let r = col_range(c);
        let x = xs(r.start);
        let (lo, hi) = clip.samples[r].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let _ = write!(pts, "{x:.2},{:.2} {x:.2},{:.2} ", mid - hi * scale, mid - lo * scale);
    }
    let _ = writeln!(svg, r#"<g class="panel" id="waveform" transform="translate(0,{y0})">"#);
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{WIDTH}" height="{PANEL}" fill="none" stroke="gray"/>"#);
    let _ = writeln!(svg, r#"<polyline fill="none" stroke="black" stroke-width="0.5" points="{}"/>"#, pts.trim_end());
    let _ = writeln!(svg, "</g>");
    y0 += PANEL + GAP;

    if let Some(s) = spec {
        let bins = s.db.cols();
        let bands = SPEC_BANDS.min(bins).max(1);
        let (lo, hi) = s.db.as_slice().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let band_h = PANEL / bands as f64;
        let _ = writeln!(svg, r#"<g class="panel" id="spectrogram" transform="translate(0,{y0})">"#);
        for (t, &start) in s.frame_times.iter().enumerate() {
            let x = xs(start);
            let next = s.frame_times.get(t + 1).copied().unwrap_or(start + s.frame_len);
            let w = xs(next) - x;
            for b in 0..bands {
                let cells = (b * bins / bands)..((b + 1) * bins / bands).max(b * bins / bands + 1);
                let v = s.db.row(t)[cells.clone()].iter().sum::<f64>() / cells.len() as f64;
                let level = (255.0 * (1.0 - (v - lo) / span)).round() as u8;
                let y = PANEL - (b + 1) as f64 * band_h;
                let _ = writeln!(
                    svg,
                    r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{band_h:.2}" fill="rgb({level},{level},{level})"/>"#
                );
            }
        }
        let _ = writeln!(svg, "</g>");
        y0 += PANEL + GAP;
    }

    let top = sdm.weights.iter().fold(0.0f64, |m, &v| m.max(v));
    let ascale = if top > 0.0 { PANEL / top } else { 0.0 };
    let mut pts = String::new();
    for c in 0..cols {
        let r = col_range(c);
        let x = xs(r.start);
        let mean = sdm.weights[r.clone()].iter().sum::<f64>() / r.len() as f64;
        let _ = write!(pts, "{x:.2},{:.2} ", PANEL - mean * ascale);
    }
    let _ = writeln!(svg, r#"<g class="panel" id="attention" transform="translate(0,{y0})">"#);
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{WIDTH}" height="{PANEL}" fill="none" stroke="gray"/>"#);
    let _ = writeln!(svg, r#"<polyline fill="none" stroke="crimson" stroke-width="1" points="{}"/>"#, pts.trim_end());
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    Ok(svg)
}

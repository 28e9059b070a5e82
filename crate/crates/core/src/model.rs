//! The four recurrent classifiers.
//!
//! All variants share the same skeleton: a Pre-LSTM encoder over the MFCC
//! frames (uni- or bi-directional), inverted dropout on the encoder outputs,
//! a Post-LSTM decoder and a dense softmax head over the six emotions.
//!
//! Attention variants run the decoder for `dec_steps` steps. At step `t` the
//! previous decoder output `o<t-1>` (zeros at `t = 1`) is paired with every
//! encoder output `p<t'>`, scored by a small feed-forward scorer into
//! `e<t,t'>`, normalized over `t'` into `a<t,t'>`, and the context
//! `sum_t' a<t,t'> p<t'>` becomes the decoder input for that step. Plain
//! variants feed the encoder outputs to the decoder frame by frame.
//!
//! LSTM gates follow `i, f, g, o` order in every weight matrix:
//! `c = f*c_prev + i*g`, `h = o*tanh(c)`.

use std::fmt;

use crate::dataset::N_CLASSES;
use crate::dsp::FeatureSequence;
use crate::error::{Error, Result};
use crate::numerics::{self, axpy, dot, gemv_acc, sigmoid, Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Model 1.
    UniAttention,
    /// Model 2.
    BiAttention,
    /// Model 3.
    UniPlain,
    /// Model 4.
    BiPlain,
}

impl Variant {
    pub const ALL: [Variant; 4] =
        [Variant::UniAttention, Variant::BiAttention, Variant::UniPlain, Variant::BiPlain];

    pub fn bidirectional(self) -> bool {
        matches!(self, Variant::BiAttention | Variant::BiPlain)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::UniAttention | Variant::BiAttention)
    }

    /// 1-based model number as used in reports.
    pub fn model_number(self) -> usize {
        match self {
            Variant::UniAttention => 1,
            Variant::BiAttention => 2,
            Variant::UniPlain => 3,
            Variant::BiPlain => 4,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::UniAttention => "uni_attention",
            Variant::BiAttention => "bi_attention",
            Variant::UniPlain => "uni_plain",
            Variant::BiPlain => "bi_plain",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.key() == key)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Model {} ({})", self.model_number(), self.key())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    /// Hidden units of the attention scorer; 0 means a single affine layer.
    pub attn_hidden: usize,
    pub dropout_rate: f64,
    pub n_classes: usize,
    pub dec_steps: usize,
    /// Give padded frames exactly zero attention.
    pub mask_padding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::BiAttention,
            input_dim: 13,
            enc_hidden: 64,
            dec_hidden: 64,
            attn_hidden: 0,
            dropout_rate: 0.1,
            n_classes: N_CLASSES,
            dec_steps: 1,
            mask_padding: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enc_hidden == 0 || self.dec_hidden == 0 || self.input_dim == 0 {
            return Err(Error::Config("input_dim, enc_hidden and dec_hidden must be >= 1".into()));
        }
        if self.n_classes != N_CLASSES {
            return Err(Error::Config(format!("n_classes must be {N_CLASSES}, got {}", self.n_classes)));
        }
        if self.dec_steps == 0 {
            return Err(Error::Config("dec_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0,1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Width of one encoder output `p<t'>`.
    pub fn enc_width(&self) -> usize {
        if self.variant.bidirectional() {
            2 * self.enc_hidden
        } else {
            self.enc_hidden
        }
    }
}

/// Weights of one LSTM layer; rows are stacked gate blocks `i, f, g, o`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4H x d`.
    pub w_input: Matrix,
    /// `4H x H`.
    pub w_recurrent: Matrix,
    /// `4H x 1`.
    pub bias: Matrix,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: Matrix::zeros(4 * hidden, input),
            w_recurrent: Matrix::zeros(4 * hidden, hidden),
            bias: Matrix::zeros(4 * hidden, 1),
        }
    }

    /// Uniform in `[-k, k]` with `k = 1/sqrt(d + H)`, zero biases except the
    /// forget gate at 1.
    pub fn init(input: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let k = 1.0 / ((input + hidden) as f64).sqrt();
        let mut bias = Matrix::zeros(4 * hidden, 1);
        bias.as_mut_slice()[hidden..2 * hidden].fill(1.0);
        Self {
            w_input: Matrix::uniform(4 * hidden, input, k, rng),
            w_recurrent: Matrix::uniform(4 * hidden, hidden, k, rng),
            bias,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_recurrent.cols()
    }

    pub fn input(&self) -> usize {
        self.w_input.cols()
    }
}

/// Affine layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl DenseParams {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Matrix::zeros(output, input), bias: Matrix::zeros(output, 1) }
    }

    pub fn init(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        let k = 1.0 / (input as f64).sqrt();
        Self { weight: Matrix::uniform(output, input, k, rng), bias: Matrix::zeros(output, 1) }
    }
}

/// Attention scorer over `z = [o<t-1>; p<t'>]`: either `w.z + b`, or
/// `w2.tanh(W1 z + b1) + b2` when a hidden layer is configured.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub hidden: Option<DenseParams>,
    pub output: DenseParams,
}

impl ScorerParams {
    fn zeros(input: usize, hidden: usize) -> Self {
        if hidden == 0 {
            Self { hidden: None, output: DenseParams::zeros(input, 1) }
        } else {
            Self { hidden: Some(DenseParams::zeros(input, hidden)), output: DenseParams::zeros(hidden, 1) }
        }
    }

    fn init(input: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        if hidden == 0 {
            Self { hidden: None, output: DenseParams::init(input, 1, rng) }
        } else {
            Self {
                hidden: Some(DenseParams::init(input, hidden, rng)),
                output: DenseParams::init(hidden, 1, rng),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub enc_forward: LstmParams,
    pub enc_backward: Option<LstmParams>,
    pub scorer: Option<ScorerParams>,
    pub decoder: LstmParams,
    pub head: DenseParams,
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let width = cfg.enc_width();
        Self {
            enc_forward: LstmParams::zeros(cfg.input_dim, cfg.enc_hidden),
            enc_backward: cfg
                .variant
                .bidirectional()
                .then(|| LstmParams::zeros(cfg.input_dim, cfg.enc_hidden)),
            scorer: cfg
                .variant
                .has_attention()
                .then(|| ScorerParams::zeros(cfg.dec_hidden + width, cfg.attn_hidden)),
            decoder: LstmParams::zeros(width, cfg.dec_hidden),
            head: DenseParams::zeros(cfg.dec_hidden, cfg.n_classes),
        }
    }

    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let width = cfg.enc_width();
        let enc_forward = LstmParams::init(cfg.input_dim, cfg.enc_hidden, rng);
        let enc_backward =
            cfg.variant.bidirectional().then(|| LstmParams::init(cfg.input_dim, cfg.enc_hidden, rng));
        let scorer = cfg
            .variant
            .has_attention()
            .then(|| ScorerParams::init(cfg.dec_hidden + width, cfg.attn_hidden, rng));
        let decoder = LstmParams::init(width, cfg.dec_hidden, rng);
        let head = DenseParams::init(cfg.dec_hidden, cfg.n_classes, rng);
        Self { enc_forward, enc_backward, scorer, decoder, head }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.blocks_mut().into_iter().for_each(|(_, m)| m.fill(0.0));
        z
    }

    /// Every parameter matrix with a stable name, in a fixed order.
    pub fn blocks(&self) -> Vec<(String, &Matrix)> {
        fn lstm<'a>(prefix: &str, p: &'a LstmParams, out: &mut Vec<(String, &'a Matrix)>) {
            out.push((format!("{prefix}.w_input"), &p.w_input));
            out.push((format!("{prefix}.w_recurrent"), &p.w_recurrent));
            out.push((format!("{prefix}.bias"), &p.bias));
        }
        let mut out = Vec::new();
        lstm("enc_forward", &self.enc_forward, &mut out);
        if let Some(b) = &self.enc_backward {
            lstm("enc_backward", b, &mut out);
        }
        if let Some(s) = &self.scorer {
            if let Some(h) = &s.hidden {
                out.push(("scorer.hidden.weight".into(), &h.weight));
                out.push(("scorer.hidden.bias".into(), &h.bias));
            }
            out.push(("scorer.output.weight".into(), &s.output.weight));
            out.push(("scorer.output.bias".into(), &s.output.bias));
        }
        lstm("decoder", &self.decoder, &mut out);
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        fn lstm<'a>(prefix: &str, p: &'a mut LstmParams, out: &mut Vec<(String, &'a mut Matrix)>) {
            out.push((format!("{prefix}.w_input"), &mut p.w_input));
            out.push((format!("{prefix}.w_recurrent"), &mut p.w_recurrent));
            out.push((format!("{prefix}.bias"), &mut p.bias));
        }
        let mut out = Vec::new();
        lstm("enc_forward", &mut self.enc_forward, &mut out);
        if let Some(b) = &mut self.enc_backward {
            lstm("enc_backward", b, &mut out);
        }
        if let Some(s) = &mut self.scorer {
            if let Some(h) = &mut s.hidden {
                out.push(("scorer.hidden.weight".into(), &mut h.weight));
                out.push(("scorer.hidden.bias".into(), &mut h.bias));
            }
            out.push(("scorer.output.weight".into(), &mut s.output.weight));
            out.push(("scorer.output.bias".into(), &mut s.output.bias));
        }
        lstm("decoder", &mut self.decoder, &mut out);
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().into_iter().flat_map(|(_, m)| m.as_slice().to_vec()).collect()
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for (_, m) in self.blocks_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Check that every block matches the shapes `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = ModelParams::zeros(cfg);
        let mine = self.blocks();
        let theirs = expected.blocks();
        if mine.len() != theirs.len() {
            return Err(Error::Shape(format!(
                "parameter set has {} blocks, {} expects {}",
                mine.len(),
                cfg.variant,
                theirs.len()
            )));
        }
        for ((name, m), (_, e)) in mine.iter().zip(&theirs) {
            if m.shape() != e.shape() {
                return Err(Error::Shape(format!("{name} is {:?}, expected {:?}", m.shape(), e.shape())));
            }
        }
        Ok(())
    }
}

/// Encoder outputs `p<1..x>`, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub p: Matrix,
}

impl EncoderOutput {
    pub fn frames(&self) -> usize {
        self.p.rows()
    }

    pub fn width(&self) -> usize {
        self.p.cols()
    }
}

/// Decoder state after a step; `o` equals `h` for a standard LSTM and `c` is
/// the memory cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub o: Vec<f64>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// Scores, weights and contexts for every decoder step (rows).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub e: Matrix,
    pub a: Matrix,
    pub context: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub probs: Vec<f64>,
}

impl Posterior {
    /// Predicted class; ties go to the lowest index.
    pub fn predicted(&self) -> usize {
        numerics::argmax(&self.probs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub posterior: Posterior,
    pub trace: Option<AttentionTrace>,
}

pub enum Mode<'a> {
    Train(&'a mut SeededRng),
    Eval,
}

/// Inverted-dropout mask with entries `0` or `1/(1-rate)`.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut SeededRng) -> Matrix {
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols).map(|_| if rng.bernoulli(rate) { 0.0 } else { keep }).collect();
    Matrix::new(rows, cols, data).expect("mask shape")
}

#[derive(Debug, Clone)]
pub(crate) struct LstmStep {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Activated gates `i, f, g, o`.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

pub(crate) fn lstm_step(p: &LstmParams, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> LstmStep {
    let hd = p.hidden();
    let mut gates = p.bias.as_slice().to_vec();
    gemv_acc(&p.w_input, x, &mut gates);
    gemv_acc(&p.w_recurrent, h_prev, &mut gates);
    for (k, z) in gates.iter_mut().enumerate() {
        *z = if (2 * hd..3 * hd).contains(&k) { z.tanh() } else { sigmoid(*z) };
    }
    let mut c = vec![0.0; hd];
    let mut tanh_c = vec![0.0; hd];
    let mut h = vec![0.0; hd];
    for j in 0..hd {
        let (i, f, g, o) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h[j] = o * tanh_c[j];
    }
    LstmStep { x: x.to_vec(), h_prev: h_prev.to_vec(), c_prev: c_prev.to_vec(), gates, c, tanh_c, h }
}

/// Result of running an LSTM layer over a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmRun {
    /// `T x H`.
    pub outputs: Matrix,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// Run an LSTM over the rows of `seq` from `(h0, c0)` (zeros when `None`).
pub fn lstm_forward(seq: &Matrix, p: &LstmParams, initial: Option<(&[f64], &[f64])>) -> Result<LstmRun> {
    let hd = p.hidden();
    check_lstm(p)?;
    if seq.cols() != p.input() {
        return Err(Error::Shape(format!(
            "sequence width {} does not match LSTM input {}",
            seq.cols(),
            p.input()
        )));
    }
    let (mut h, mut c) = match initial {
        Some((h0, c0)) if h0.len() == hd && c0.len() == hd => (h0.to_vec(), c0.to_vec()),
        Some(_) => return Err(Error::Shape(format!("initial state must have {hd} entries"))),
        None => (vec![0.0; hd], vec![0.0; hd]),
    };
    let mut outputs = Matrix::zeros(seq.rows(), hd);
    for t in 0..seq.rows() {
        let step = lstm_step(p, seq.row(t), &h, &c);
        outputs.row_mut(t).copy_from_slice(&step.h);
        h = step.h;
        c = step.c;
    }
    if !outputs.is_finite() {
        return Err(Error::numeric("lstm", "non-finite output"));
    }
    Ok(LstmRun { outputs, h, c })
}

fn check_lstm(p: &LstmParams) -> Result<()> {
    let hd = p.hidden();
    if p.w_recurrent.rows() != 4 * hd || p.w_input.rows() != 4 * hd || p.bias.shape() != (4 * hd, 1) {
        return Err(Error::Shape("inconsistent LSTM weight shapes".into()));
    }
    Ok(())
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Tape {
    pub enc_forward: Vec<LstmStep>,
    /// In processing order, i.e. frame `x-1` first.
    pub enc_backward: Vec<LstmStep>,
    /// Encoder outputs after dropout.
    pub p: Matrix,
    pub mask: Option<Matrix>,
    pub attention: Vec<AttentionStep>,
    pub decoder: Vec<LstmStep>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionStep {
    pub o_prev: Vec<f64>,
    pub e: Vec<f64>,
    pub a: Vec<f64>,
    pub context: Vec<f64>,
    /// `x x A` scorer hidden activations, when the scorer has a hidden layer.
    pub hidden: Option<Matrix>,
}

fn check_finite(values: &[f64], layer: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(layer, "non-finite activation"))
    }
}

/// Encoder outputs `p`, with the per-step caches of both directions.
fn encode_tape(x: &Matrix, params: &ModelParams, cfg: &ModelConfig) -> Result<(Matrix, Vec<LstmStep>, Vec<LstmStep>)> {
    if x.rows() == 0 {
        return Err(Error::EmptySequence);
    }
    if x.cols() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "features have {} coefficients, model expects {}",
            x.cols(),
            cfg.input_dim
        )));
    }
    let he = cfg.enc_hidden;
    let mut p = Matrix::zeros(x.rows(), cfg.enc_width());
    let (mut h, mut c) = (vec![0.0; he], vec![0.0; he]);
    let mut fwd = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        let step = lstm_step(&params.enc_forward, x.row(t), &h, &c);
        p.row_mut(t)[..he].copy_from_slice(&step.h);
        h.clone_from(&step.h);
        c.clone_from(&step.c);
        fwd.push(step);
    }
    let mut bwd = Vec::new();
    if let Some(back) = &params.enc_backward {
        h.fill(0.0);
        c.fill(0.0);
        for t in (0..x.rows()).rev() {
            let step = lstm_step(back, x.row(t), &h, &c);
            p.row_mut(t)[he..].copy_from_slice(&step.h);
            h.clone_from(&step.h);
            c.clone_from(&step.c);
            bwd.push(step);
        }
    }
    check_finite(p.as_slice(), "encoder")?;
    Ok((p, fwd, bwd))
}

/// Encoder pass. Bidirectional outputs are `[forward; backward]` per frame,
/// the backward direction having consumed the time-reversed sequence.
pub fn encode(features: &FeatureSequence, params: &ModelParams, cfg: &ModelConfig) -> Result<EncoderOutput> {
    params.check_shapes(cfg)?;
    let (p, _, _) = encode_tape(&features.frames, params, cfg)?;
    Ok(EncoderOutput { p })
}

/// Scores `e<t,t'>` for every frame given `o<t-1>`; also returns the scorer
/// hidden activations when present.
fn attention_scores(p: &Matrix, o_prev: &[f64], scorer: &ScorerParams) -> (Vec<f64>, Option<Matrix>) {
    let hd = o_prev.len();
    match &scorer.hidden {
        None => {
            let w = scorer.output.weight.row(0);
            let base = scorer.output.bias.as_slice()[0] + dot(&w[..hd], o_prev);
            ((0..p.rows()).map(|t| base + dot(&w[hd..], p.row(t))).collect(), None)
        }
        Some(hidden) => {
            let units = hidden.weight.rows();
            let mut base = hidden.bias.as_slice().to_vec();
            for (r, b) in base.iter_mut().enumerate() {
                *b += dot(&hidden.weight.row(r)[..hd], o_prev);
            }
            let w2 = scorer.output.weight.row(0);
            let b2 = scorer.output.bias.as_slice()[0];
            let mut acts = Matrix::zeros(p.rows(), units);
            let mut e = Vec::with_capacity(p.rows());
            for t in 0..p.rows() {
                let row = acts.row_mut(t);
                for (r, u) in row.iter_mut().enumerate() {
                    *u = (base[r] + dot(&hidden.weight.row(r)[hd..], p.row(t))).tanh();
                }
                e.push(b2 + dot(w2, row));
            }
            (e, Some(acts))
        }
    }
}

fn attend(
    p: &Matrix,
    o_prev: &[f64],
    scorer: &ScorerParams,
    mask: Option<&[bool]>,
) -> Result<AttentionStep> {
    if p.rows() == 0 {
        return Err(Error::EmptySequence);
    }
    let (e, hidden) = attention_scores(p, o_prev, scorer);
    check_finite(&e, "attention scores")?;
    let masked: Vec<f64> = match mask {
        Some(m) if m.iter().any(|&padded| !padded) => {
            e.iter().zip(m).map(|(&s, &padded)| if padded { f64::NEG_INFINITY } else { s }).collect()
        }
        _ => e.clone(),
    };
    let a = numerics::softmax(&masked)?;
    let mut context = vec![0.0; p.cols()];
    for (t, &w) in a.iter().enumerate() {
        axpy(w, p.row(t), &mut context);
    }
    Ok(AttentionStep { o_prev: o_prev.to_vec(), e, a, context, hidden })
}

/// One attention read: weights `a<t,.>` over the encoder frames and the
/// context `sum_t' a<t,t'> p<t'>`.
pub fn attention_step(
    p: &EncoderOutput,
    o_prev: &[f64],
    scorer: &ScorerParams,
    pad_mask: Option<&[bool]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let expected_in = scorer.hidden.as_ref().map_or(scorer.output.weight.cols(), |h| h.weight.cols());
    if o_prev.len() + p.width() != expected_in {
        return Err(Error::Shape(format!(
            "scorer expects {expected_in} inputs, got o_prev {} + p {}",
            o_prev.len(),
            p.width()
        )));
    }
    let step = attend(&p.p, o_prev, scorer, pad_mask)?;
    Ok((step.a, step.context))
}

/// Forward pass recording everything needed for backpropagation.
pub(crate) fn forward_tape(
    features: &FeatureSequence,
    params: &ModelParams,
    cfg: &ModelConfig,
    mask: Option<Matrix>,
) -> Result<Tape> {
    let (mut p, enc_forward, enc_backward) = encode_tape(&features.frames, params, cfg)?;
    if let Some(m) = &mask {
        if m.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "dropout mask {:?} does not match encoder output {:?}",
                m.shape(),
                p.shape()
            )));
        }
        for (v, k) in p.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *v *= k;
        }
    }

    let hd = cfg.dec_hidden;
    let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
    let mut attention = Vec::new();
    let mut decoder = Vec::new();
    match &params.scorer {
        Some(scorer) => {
            let pad_mask = cfg.mask_padding.then_some(features.pad_mask.as_slice());
            for _ in 0..cfg.dec_steps {
                let step = attend(&p, &h, scorer, pad_mask)?;
                let dec = lstm_step(&params.decoder, &step.context, &h, &c);
                h.clone_from(&dec.h);
                c.clone_from(&dec.c);
                attention.push(step);
                decoder.push(dec);
            }
        }
        None => {
            for t in 0..p.rows() {
                let dec = lstm_step(&params.decoder, p.row(t), &h, &c);
                h.clone_from(&dec.h);
                c.clone_from(&dec.c);
                decoder.push(dec);
            }
        }
    }
    check_finite(&h, "decoder")?;

    let mut logits = params.head.bias.as_slice().to_vec();
    gemv_acc(&params.head.weight, &h, &mut logits);
    check_finite(&logits, "dense head")?;
    let probs = numerics::softmax(&logits)?;
    Ok(Tape { enc_forward, enc_backward, p, mask, attention, decoder, probs })
}

impl Tape {
    pub(crate) fn trace(&self) -> Option<AttentionTrace> {
        if self.attention.is_empty() {
            return None;
        }
        let rows = |f: &dyn Fn(&AttentionStep) -> &Vec<f64>| {
            Matrix::from_rows(&self.attention.iter().map(|s| f(s).clone()).collect::<Vec<_>>())
                .expect("rectangular trace")
        };
        Some(AttentionTrace { e: rows(&|s| &s.e), a: rows(&|s| &s.a), context: rows(&|s| &s.context) })
    }

    pub(crate) fn decoder_state(&self) -> DecoderState {
        let last = self.decoder.last().expect("decoder ran at least once");
        DecoderState { o: last.h.clone(), h: last.h.clone(), c: last.c.clone() }
    }
}

/// Full forward pass. Train mode draws an inverted-dropout mask on the
/// encoder outputs from `rng`; eval mode applies none.
pub fn forward(
    features: &FeatureSequence,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode<'_>,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    params.check_shapes(cfg)?;
    let mask = match mode {
        Mode::Train(rng) if cfg.dropout_rate > 0.0 => {
            Some(dropout_mask(features.len(), cfg.enc_width(), cfg.dropout_rate, rng))
        }
        _ => None,
    };
    let tape = forward_tape(features, params, cfg, mask)?;
    Ok(ForwardOutput { trace: tape.trace(), posterior: Posterior { probs: tape.probs } })
}

/// Final decoder state in eval mode.
pub fn decoder_state(features: &FeatureSequence, params: &ModelParams, cfg: &ModelConfig) -> Result<DecoderState> {
    params.check_shapes(cfg)?;
    Ok(forward_tape(features, params, cfg, None)?.decoder_state())
}

//! Cross-entropy training by backpropagation through time.
//!
//! Gradients flow from the dense head back through every decoder step, the
//! attention read (weighted sum, softmax, scorer, and the repeated
//! `o<t-1>` input), the dropout mask, and both encoder directions.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::dataset::EmotionLabel;
use crate::dsp::{extract_features, pad_to_length, AudioClip, FeatureSequence, FrameConfig};
use crate::error::{Error, Result};
use crate::model::{
    self, AttentionStep, ForwardOutput, Gradients, LstmParams, LstmStep, ModelConfig, ModelParams,
    Posterior, ScorerParams, Tape, Variant,
};
use crate::numerics::{axpy, dot, gemv_t_acc, ger_acc, Matrix, RngState, SeededRng};

/// Probability floor inside the log of the loss.
pub const LOSS_CLAMP: f64 = 1e-12;

/// `-ln(max(probs[label], 1e-12))`.
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(LOSS_CLAMP).ln()
}

/// Mean loss over a batch of posteriors.
pub fn batch_cross_entropy(batch: &[(Posterior, EmotionLabel)]) -> f64 {
    batch.iter().map(|(p, l)| cross_entropy(&p.probs, l.index())).sum::<f64>() / batch.len() as f64
}

/// One labelled utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: FeatureSequence,
    pub label: EmotionLabel,
}

/// Pad clips to a common length (`pad_len`, or the longest clip) and
/// extract features; returns the examples and the length used. Example ids
/// are the clips' source ids.
pub fn prepare_examples(
    clips: &[(AudioClip, EmotionLabel)],
    cfg: &FrameConfig,
    pad_len: Option<usize>,
) -> Result<(Vec<Example>, usize)> {
    let audio: Vec<AudioClip> = clips.iter().map(|(c, _)| c.clone()).collect();
    let padded = pad_to_length(&audio, pad_len)?;
    let len = padded.first().map_or(0, AudioClip::len);
    let examples = padded
        .par_iter()
        .zip(clips.par_iter())
        .map(|(clip, (_, label))| {
            Ok(Example { id: clip.source_id.clone(), features: extract_features(clip, cfg)?, label: *label })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((examples, len))
}

fn lstm_step_backward(
    p: &LstmParams,
    s: &LstmStep,
    dh: &[f64],
    dc_next: &[f64],
    grads: &mut LstmParams,
    dx: Option<&mut [f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let hd = p.hidden();
    let mut dz = vec![0.0; 4 * hd];
    let mut dc_prev = vec![0.0; hd];
    for j in 0..hd {
        let (i, f, g, o) = (s.gates[j], s.gates[hd + j], s.gates[2 * hd + j], s.gates[3 * hd + j]);
        let tc = s.tanh_c[j];
        let dc = dc_next[j] + dh[j] * o * (1.0 - tc * tc);
        dz[j] = dc * g * i * (1.0 - i);
        dz[hd + j] = dc * s.c_prev[j] * f * (1.0 - f);
        dz[2 * hd + j] = dc * i * (1.0 - g * g);
        dz[3 * hd + j] = dh[j] * tc * o * (1.0 - o);
        dc_prev[j] = dc * f;
    }
    ger_acc(&mut grads.w_input, &dz, &s.x);
    ger_acc(&mut grads.w_recurrent, &dz, &s.h_prev);
    axpy(1.0, &dz, grads.bias.as_mut_slice());
    let mut dh_prev = vec![0.0; hd];
    gemv_t_acc(&p.w_recurrent, &dz, &mut dh_prev);
    if let Some(dx) = dx {
        gemv_t_acc(&p.w_input, &dz, dx);
    }
    (dh_prev, dc_prev)
}

/// Backpropagate `dctx` through one attention read. Accumulates into `dp`
/// (gradient w.r.t. the post-dropout encoder outputs) and the scorer
/// gradients; returns the gradient w.r.t. `o<t-1>`.
fn attention_backward(
    step: &AttentionStep,
    p: &Matrix,
    dctx: &[f64],
    scorer: &ScorerParams,
    grads: &mut ScorerParams,
    dp: &mut Matrix,
) -> Vec<f64> {
    let x = p.rows();
    let hd = step.o_prev.len();
    let mut da = vec![0.0; x];
    for t in 0..x {
        da[t] = dot(dctx, p.row(t));
        axpy(step.a[t], dctx, dp.row_mut(t));
    }
    let mean: f64 = step.a.iter().zip(&da).map(|(a, d)| a * d).sum();
    let de: Vec<f64> = step.a.iter().zip(&da).map(|(a, d)| a * (d - mean)).collect();

    let mut do_prev = vec![0.0; hd];
    match (&scorer.hidden, &mut grads.hidden) {
        (None, _) => {
            let w = scorer.output.weight.row(0);
            let total: f64 = de.iter().sum();
            let gw = grads.output.weight.row_mut(0);
            axpy(total, &step.o_prev, &mut gw[..hd]);
            for t in 0..x {
                axpy(de[t], p.row(t), &mut gw[hd..]);
                axpy(de[t], &w[hd..], dp.row_mut(t));
            }
            grads.output.bias.as_mut_slice()[0] += total;
            axpy(total, &w[..hd], &mut do_prev);
        }
        (Some(hidden), Some(ghidden)) => {
            let acts = step.hidden.as_ref().expect("hidden activations recorded");
            let w2 = scorer.output.weight.row(0);
            let mut dpre = vec![0.0; hidden.weight.rows()];
            for t in 0..x {
                let u = acts.row(t);
                axpy(de[t], u, grads.output.weight.row_mut(0));
                grads.output.bias.as_mut_slice()[0] += de[t];
                for (r, d) in dpre.iter_mut().enumerate() {
                    *d = de[t] * w2[r] * (1.0 - u[r] * u[r]);
                }
                axpy(1.0, &dpre, ghidden.bias.as_mut_slice());
                for (r, &d) in dpre.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let grow = ghidden.weight.row_mut(r);
                    axpy(d, &step.o_prev, &mut grow[..hd]);
                    axpy(d, p.row(t), &mut grow[hd..]);
                    let wrow = hidden.weight.row(r);
                    axpy(d, &wrow[..hd], &mut do_prev);
                    axpy(d, &wrow[hd..], dp.row_mut(t));
                }
            }
        }
        (Some(_), None) => unreachable!("gradient layout mirrors parameters"),
    }
    do_prev
}

/// Accumulate `scale * d loss / d params` for one recorded forward pass into
/// `grads`; returns the unscaled loss.
fn backward_tape(tape: &Tape, label: usize, params: &ModelParams, grads: &mut Gradients, scale: f64) -> f64 {
    let loss = cross_entropy(&tape.probs, label);
    let mut dlogits = vec![0.0; tape.probs.len()];
    if tape.probs[label] >= LOSS_CLAMP {
        for (d, &p) in dlogits.iter_mut().zip(&tape.probs) {
            *d = scale * p;
        }
        dlogits[label] -= scale;
    }

    let last = tape.decoder.last().expect("decoder ran");
    ger_acc(&mut grads.head.weight, &dlogits, &last.h);
    axpy(1.0, &dlogits, grads.head.bias.as_mut_slice());
    let mut dh = vec![0.0; last.h.len()];
    gemv_t_acc(&params.head.weight, &dlogits, &mut dh);
    let mut dc = vec![0.0; dh.len()];

    let mut dp = Matrix::zeros(tape.p.rows(), tape.p.cols());
    match &params.scorer {
        Some(scorer) => {
            let gscorer = grads.scorer.as_mut().expect("gradient layout mirrors parameters");
            for s in (0..tape.decoder.len()).rev() {
                let mut dctx = vec![0.0; tape.p.cols()];
                let (dh_prev, dc_prev) =
                    lstm_step_backward(&params.decoder, &tape.decoder[s], &dh, &dc, &mut grads.decoder, Some(&mut dctx));
                let do_prev = attention_backward(&tape.attention[s], &tape.p, &dctx, scorer, gscorer, &mut dp);
                dh = dh_prev;
                axpy(1.0, &do_prev, &mut dh);
                dc = dc_prev;
            }
        }
        None => {
            for t in (0..tape.decoder.len()).rev() {
                let (dh_prev, dc_prev) = lstm_step_backward(
                    &params.decoder,
                    &tape.decoder[t],
                    &dh,
                    &dc,
                    &mut grads.decoder,
                    Some(dp.row_mut(t)),
                );
                dh = dh_prev;
                dc = dc_prev;
            }
        }
    }

    if let Some(mask) = &tape.mask {
        for (d, m) in dp.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *d *= m;
        }
    }

    let he = params.enc_forward.hidden();
    let mut dh = vec![0.0; he];
    let mut dc = vec![0.0; he];
    for t in (0..tape.enc_forward.len()).rev() {
        axpy(1.0, &dp.row(t)[..he], &mut dh);
        let (dh_prev, dc_prev) =
            lstm_step_backward(&params.enc_forward, &tape.enc_forward[t], &dh, &dc, &mut grads.enc_forward, None);
        dh = dh_prev;
        dc = dc_prev;
    }
    if let (Some(back), Some(gback)) = (&params.enc_backward, &mut grads.enc_backward) {
        let x = tape.enc_backward.len();
        dh.fill(0.0);
        dc.fill(0.0);
        // Step k of the backward pass consumed frame x-1-k.
        for k in (0..x).rev() {
            axpy(1.0, &dp.row(x - 1 - k)[he..], &mut dh);
            let (dh_prev, dc_prev) = lstm_step_backward(back, &tape.enc_backward[k], &dh, &dc, gback, None);
            dh = dh_prev;
            dc = dc_prev;
        }
    }
    loss
}

fn check_gradients(grads: &Gradients) -> Result<()> {
    for (name, m) in grads.blocks() {
        if !m.is_finite() {
            return Err(Error::numeric(name, "non-finite gradient"));
        }
    }
    Ok(())
}

/// Loss and gradient of a single example under a fixed dropout mask.
pub fn example_gradient(
    features: &FeatureSequence,
    label: EmotionLabel,
    params: &ModelParams,
    cfg: &ModelConfig,
    mask: Option<&Matrix>,
) -> Result<(f64, Gradients)> {
    let tape = model::forward_tape(features, params, cfg, mask.cloned())?;
    let mut grads = params.zeros_like();
    let loss = backward_tape(&tape, label.index(), params, &mut grads, 1.0);
    Ok((loss, grads))
}

/// Mean-loss gradient over a batch. `masks[i]` must be the dropout mask used
/// for example `i` in the paired forward pass (`None` for no dropout).
///
/// Per-example gradients are computed independently and summed in batch
/// order, so the result does not depend on the thread count.
pub fn backward(
    batch: &[(&FeatureSequence, EmotionLabel)],
    params: &ModelParams,
    cfg: &ModelConfig,
    masks: &[Option<Matrix>],
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptySequence);
    }
    if masks.len() != batch.len() {
        return Err(Error::Shape(format!("{} masks for {} examples", masks.len(), batch.len())));
    }
    params.check_shapes(cfg)?;
    let per_example: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .zip(masks.par_iter())
        .map(|((features, label), mask)| example_gradient(features, *label, params, cfg, mask.as_ref()))
        .collect();
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for item in per_example {
        let (l, g) = item?;
        loss += l;
        for ((_, acc), (_, m)) in total.blocks_mut().into_iter().zip(g.blocks()) {
            acc.add_scaled(m, 1.0)?;
        }
    }
    let n = batch.len() as f64;
    total.blocks_mut().into_iter().for_each(|(_, m)| m.scale(1.0 / n));
    check_gradients(&total)?;
    Ok((loss / n, total))
}

/// Worst finite-difference disagreement within one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub coords: usize,
    pub max_relative: f64,
    pub max_absolute: f64,
}

/// Weight multiplier used by the gradient suite. At the plain init scale
/// many gradients fall near 1e-9, where central differences with h = 1e-5
/// are dominated by roundoff (about 1e-11 absolute).
pub const GRAD_CHECK_WEIGHT_SCALE: f64 = 2.0;

/// Compare [`backward`] with central differences of step `h` on one seeded
/// random example of `frames` frames, without dropout. Initial weights are
/// multiplied by `weight_scale`.
pub fn gradient_check(
    cfg: &ModelConfig,
    frames: usize,
    seed: u64,
    h: f64,
    weight_scale: f64,
) -> Result<Vec<BlockCheck>> {
    let cfg = ModelConfig { dropout_rate: 0.0, ..cfg.clone() };
    cfg.validate()?;
    let mut rng = SeededRng::new(seed);
    let mut params = ModelParams::init(&cfg, &mut rng);
    params.blocks_mut().into_iter().for_each(|(_, m)| m.scale(weight_scale));
    let features = FeatureSequence {
        frames: Matrix::uniform(frames, cfg.input_dim, 1.0, &mut rng),
        frame_times: (0..frames).collect(),
        pad_mask: vec![false; frames],
    };
    let label = EmotionLabel::from_index(rng.below(cfg.n_classes)).expect("six classes");
    let batch = [(&features, label)];
    let (_, grads) = backward(&batch, &params, &cfg, &[None])?;
    let loss = |flat: &[f64]| {
        let mut p = params.clone();
        p.set_from_flat(flat).expect("same layout");
        model::forward_tape(&features, &p, &cfg, None).map_or(f64::NAN, |t| cross_entropy(&t.probs, label.index()))
    };
    let report = crate::numerics::grad_check(loss, &params.to_flat(), &grads.to_flat(), h)?;
    let mut out = Vec::new();
    let mut offset = 0;
    for (name, m) in grads.blocks() {
        let coords = &report.coords[offset..offset + m.len()];
        out.push(BlockCheck {
            name,
            coords: m.len(),
            max_relative: coords.iter().map(|c| c.relative).fold(0.0, f64::max),
            max_absolute: coords.iter().map(|c| (c.finite_difference - c.analytic).abs()).fold(0.0, f64::max),
        });
        offset += m.len();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam_default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Maximum global L2 norm of the gradient.
    pub grad_clip: Option<f64>,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 16,
            optimizer: Optimizer::adam_default(),
            seed: 0,
            grad_clip: Some(5.0),
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Adam moments, one matrix per parameter block. Empty for SGD.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

/// Global L2 norm over every block.
pub fn global_norm(grads: &Gradients) -> f64 {
    grads.blocks().iter().map(|(_, m)| m.sum_of_squares()).sum::<f64>().sqrt()
}

/// Rescale so the global norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.blocks_mut().into_iter().for_each(|(_, m)| m.scale(s));
    }
    norm
}

/// One optimizer update, clipping first when configured. `grads` is
/// consumed because clipping rescales it.
pub fn step(params: &mut ModelParams, mut grads: Gradients, state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    if let Some(max) = cfg.grad_clip {
        clip_global_norm(&mut grads, max);
    }
    let lr = cfg.learning_rate;
    let gblocks = grads.blocks();
    let mut pblocks = params.blocks_mut();
    if gblocks.len() != pblocks.len() {
        return Err(Error::Shape("gradient and parameter layouts differ".into()));
    }
    for ((name, p), (_, g)) in pblocks.iter().zip(&gblocks) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("{name}: params {:?} vs grads {:?}", p.shape(), g.shape())));
        }
    }
    match cfg.optimizer {
        Optimizer::Sgd => {
            for ((_, p), (_, g)) in pblocks.iter_mut().zip(&gblocks) {
                p.add_scaled(g, -lr)?;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            if state.m.is_empty() {
                state.m = gblocks.iter().map(|(_, g)| Matrix::zeros(g.rows(), g.cols())).collect();
                state.v = state.m.clone();
            }
            state.step += 1;
            let bc1 = 1.0 - beta1.powf(state.step as f64);
            let bc2 = 1.0 - beta2.powf(state.step as f64);
            for (i, ((_, p), (_, g))) in pblocks.iter_mut().zip(&gblocks).enumerate() {
                let m = state.m[i].as_mut_slice();
                let v = state.v[i].as_mut_slice();
                for (k, (w, &gk)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                    m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                    v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                    let mhat = m[k] / bc1;
                    let vhat = v[k] / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Per-coefficient standardization fitted on non-padded training frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit<'a, I>(sequences: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureSequence>,
    {
        let mut dim = None;
        let mut count = 0usize;
        let mut sum = Vec::new();
        let mut sq = Vec::new();
        for seq in sequences {
            let d = *dim.get_or_insert(seq.dim());
            if d != seq.dim() {
                return Err(Error::Shape(format!("mixed feature widths {d} and {}", seq.dim())));
            }
            if sum.is_empty() {
                sum = vec![0.0; d];
                sq = vec![0.0; d];
            }
            for t in (0..seq.len()).filter(|&t| !seq.pad_mask.get(t).copied().unwrap_or(false)) {
                for (j, &v) in seq.frames.row(t).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                count += 1;
            }
        }
        let dim = dim.ok_or(Error::EmptySequence)?;
        if count == 0 {
            return Ok(Self::identity(dim));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, seq: &FeatureSequence) -> Result<FeatureSequence> {
        if seq.dim() != self.mean.len() {
            return Err(Error::Shape(format!(
                "features have {} coefficients, normalizer expects {}",
                seq.dim(),
                self.mean.len()
            )));
        }
        let mut out = seq.clone();
        for t in 0..out.len() {
            for (j, v) in out.frames.row_mut(t).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }
}

/// Trained model plus everything needed to resume or reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub frame_cfg: FrameConfig,
    pub train_cfg: TrainConfig,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub rng: RngState,
    pub loss_history: Vec<f64>,
    pub norm: FeatureNorm,
    /// Corpus-wide padded clip length used during training, if any.
    pub pad_len: Option<usize>,
}

impl Checkpoint {
    /// Fresh, untrained checkpoint with identity normalization.
    pub fn untrained(model_cfg: ModelConfig, frame_cfg: FrameConfig, params: ModelParams) -> Self {
        let dim = model_cfg.input_dim;
        Self {
            model_cfg,
            frame_cfg,
            train_cfg: TrainConfig::default(),
            params,
            optimizer: OptimizerState::default(),
            epoch: 0,
            rng: SeededRng::new(0).state(),
            loss_history: Vec::new(),
            norm: FeatureNorm::identity(dim),
            pad_len: None,
        }
    }

    /// Eval-mode forward pass on raw (unnormalized) features.
    pub fn predict(&self, features: &FeatureSequence) -> Result<ForwardOutput> {
        model::forward(&self.norm.apply(features)?, &self.params, &self.model_cfg, model::Mode::Eval)
    }
}

/// Stateful training loop; one call to [`run_epoch`](Trainer::run_epoch) per
/// epoch so callers can evaluate in between.
#[derive(Debug, Clone)]
pub struct Trainer {
    ckpt: Checkpoint,
    rng: SeededRng,
}

impl Trainer {
    pub fn new(data: &[Example], model_cfg: ModelConfig, train_cfg: TrainConfig, frame_cfg: FrameConfig) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Config("empty training split".into()));
        }
        let norm = FeatureNorm::fit(data.iter().map(|e| &e.features))?;
        let mut rng = SeededRng::new(train_cfg.seed);
        let params = ModelParams::init(&model_cfg, &mut rng);
        let mut ckpt = Checkpoint::untrained(model_cfg, frame_cfg, params);
        ckpt.norm = norm;
        ckpt.train_cfg = train_cfg;
        ckpt.rng = rng.state();
        Ok(Self { ckpt, rng })
    }

    pub fn resume(ckpt: Checkpoint) -> Self {
        let rng = SeededRng::from_state(ckpt.rng);
        Self { ckpt, rng }
    }

    pub fn epoch(&self) -> usize {
        self.ckpt.epoch
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.ckpt
    }

    /// One pass over `data`; returns the mean training loss.
    pub fn run_epoch(&mut self, data: &[Example]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Config("empty training split".into()));
        }
        let epoch = self.ckpt.epoch;
        let normalized: Vec<FeatureSequence> =
            data.iter().map(|e| self.ckpt.norm.apply(&e.features)).collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        if self.ckpt.train_cfg.shuffle {
            self.rng.shuffle(&mut order);
        }
        let cfg = self.ckpt.model_cfg.clone();
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(self.ckpt.train_cfg.batch_size).enumerate() {
            let masks: Vec<Option<Matrix>> = chunk
                .iter()
                .map(|&i| {
                    (cfg.dropout_rate > 0.0).then(|| {
                        model::dropout_mask(normalized[i].len(), cfg.enc_width(), cfg.dropout_rate, &mut self.rng)
                    })
                })
                .collect();
            let batch: Vec<(&FeatureSequence, EmotionLabel)> =
                chunk.iter().map(|&i| (&normalized[i], data[i].label)).collect();
            let (loss, grads) = backward(&batch, &self.ckpt.params, &cfg, &masks)
                .map_err(|e| Error::Training { epoch, batch: b, detail: e.to_string() })?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch, batch: b, detail: format!("loss {loss}") });
            }
            step(&mut self.ckpt.params, grads, &mut self.ckpt.optimizer, &self.ckpt.train_cfg)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let mean = loss_sum / data.len() as f64;
        self.ckpt.loss_history.push(mean);
        self.ckpt.epoch += 1;
        self.ckpt.rng = self.rng.state();
        Ok(mean)
    }
}

/// Train for `train_cfg.epochs` epochs from a seeded initialization.
pub fn train(data: &[Example], model_cfg: ModelConfig, train_cfg: TrainConfig, frame_cfg: FrameConfig) -> Result<Checkpoint> {
    let epochs = train_cfg.epochs;
    let mut trainer = Trainer::new(data, model_cfg, train_cfg, frame_cfg)?;
    for _ in 0..epochs {
        trainer.run_epoch(data)?;
    }
    Ok(trainer.into_checkpoint())
}

// ---------------------------------------------------------------------------
// Checkpoint encoding: "ROIC", version u32, then sections of
// (4-byte tag, u64 length, payload). Configs are key-sorted `key=value`
// lines; matrices are (u32 rows, u32 cols, f64 LE data).

const CKPT_MAGIC: &[u8; 4] = b"ROIC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_matrices<'a>(mats: impl ExactSizeIterator<Item = &'a Matrix>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(mats.len() as u32).to_le_bytes());
    mats.for_each(|m| put_matrix(&mut out, m));
    out
}

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Canonical `key=value` view of the configs and scalar state.
fn config_map(ckpt: &Checkpoint) -> BTreeMap<String, String> {
    let mut kv = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        kv.insert(k.to_string(), v);
    };
    let f = &ckpt.frame_cfg;
    put("frame.frame_len_ms", f.frame_len_ms.to_string());
    put("frame.step_ms", f.step_ms.to_string());
    put("frame.n_mfcc", f.n_mfcc.to_string());
    put("frame.n_mels", f.n_mels.to_string());
    put("frame.fft_size", f.fft_size.to_string());
    put("frame.preemphasis", f.preemphasis.to_string());
    put("frame.sample_rate", f.expected_rate.map_or("any".into(), |r| r.to_string()));
    let m = &ckpt.model_cfg;
    put("model.variant", m.variant.key().into());
    put("model.input_dim", m.input_dim.to_string());
    put("model.enc_hidden", m.enc_hidden.to_string());
    put("model.dec_hidden", m.dec_hidden.to_string());
    put("model.attn_hidden", m.attn_hidden.to_string());
    put("model.dropout", m.dropout_rate.to_string());
    put("model.n_classes", m.n_classes.to_string());
    put("model.dec_steps", m.dec_steps.to_string());
    put("model.mask_padding", m.mask_padding.to_string());
    let t = &ckpt.train_cfg;
    put("train.learning_rate", t.learning_rate.to_string());
    put("train.epochs", t.epochs.to_string());
    put("train.batch_size", t.batch_size.to_string());
    match t.optimizer {
        Optimizer::Sgd => put("train.optimizer", "sgd".into()),
        Optimizer::Adam { beta1, beta2, eps } => {
            put("train.optimizer", "adam".into());
            put("train.beta1", beta1.to_string());
            put("train.beta2", beta2.to_string());
            put("train.eps", eps.to_string());
        }
    }
    put("train.seed", t.seed.to_string());
    put("train.grad_clip", t.grad_clip.map_or("none".into(), |c| c.to_string()));
    put("train.shuffle", t.shuffle.to_string());
    put("state.epoch", ckpt.epoch.to_string());
    put("state.rng_seed", ckpt.rng.seed.to_string());
    put("state.rng_word_pos", ckpt.rng.word_pos.to_string());
    put("state.optimizer_step", ckpt.optimizer.step.to_string());
    put("data.pad_len", ckpt.pad_len.map_or("none".into(), |p| p.to_string()));
    kv
}

/// Serialize to the `ROIC` format.
pub fn save(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text: String = config_map(ckpt).iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    put_section(&mut out, b"CONF", text.as_bytes());
    let blocks = ckpt.params.blocks();
    put_section(&mut out, b"PARM", &put_matrices(blocks.iter().map(|(_, m)| *m)));
    let moments: Vec<&Matrix> = ckpt.optimizer.m.iter().chain(&ckpt.optimizer.v).collect();
    put_section(&mut out, b"OPTM", &put_matrices(moments.into_iter()));
    let mean = Matrix::column(&ckpt.norm.mean);
    let std = Matrix::column(&ckpt.norm.std);
    put_section(&mut out, b"NORM", &put_matrices([&mean, &std].into_iter()));
    let loss = Matrix::column(&ckpt.loss_history);
    put_section(&mut out, b"LOSS", &put_matrices(std::iter::once(&loss)));
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Load(format!("truncated checkpoint: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrices(&mut self) -> Result<Vec<Matrix>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| Error::Load("matrix size overflow".into()))?;
            let data = self
                .take(n.checked_mul(8).ok_or_else(|| Error::Load("matrix size overflow".into()))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push(Matrix::new(rows, cols, data)?);
        }
        Ok(out)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Load(format!("bad config line `{l}`")))
        })
        .collect()
}

fn get<'m>(kv: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    kv.get(key).map(String::as_str).ok_or_else(|| Error::Load(format!("missing key {key}")))
}

fn get_num<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    get(kv, key)?.parse().map_err(|_| Error::Load(format!("bad value for {key}")))
}

fn get_opt<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str, none: &str) -> Result<Option<T>> {
    let v = get(kv, key)?;
    if v == none {
        Ok(None)
    } else {
        v.parse().map(Some).map_err(|_| Error::Load(format!("bad value for {key}")))
    }
}

/// Parse a `ROIC` byte stream.
pub fn load(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::Load("truncated header".into()))? != CKPT_MAGIC {
        return Err(Error::Load("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
    }
    let mut sections = BTreeMap::new();
    while !r.done() {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = usize::try_from(r.u64()?).map_err(|_| Error::Load("section too large".into()))?;
        sections.insert(tag, r.take(len)?);
    }
    let section = |tag: &[u8; 4]| {
        sections
            .get(tag)
            .copied()
            .ok_or_else(|| Error::Load(format!("missing section {}", String::from_utf8_lossy(tag))))
    };
    let matrices = |tag: &[u8; 4]| -> Result<Vec<Matrix>> {
        let mut sub = Reader { bytes: section(tag)?, pos: 0 };
        let m = sub.matrices()?;
        if !sub.done() {
            return Err(Error::Load("trailing bytes in section".into()));
        }
        Ok(m)
    };

    let text = std::str::from_utf8(section(b"CONF")?).map_err(|_| Error::Load("config is not UTF-8".into()))?;
    let kv = parse_kv(text)?;
    let frame_cfg = FrameConfig {
        frame_len_ms: get_num(&kv, "frame.frame_len_ms")?,
        step_ms: get_num(&kv, "frame.step_ms")?,
        n_mfcc: get_num(&kv, "frame.n_mfcc")?,
        n_mels: get_num(&kv, "frame.n_mels")?,
        fft_size: get_num(&kv, "frame.fft_size")?,
        preemphasis: get_num(&kv, "frame.preemphasis")?,
        expected_rate: get_opt(&kv, "frame.sample_rate", "any")?,
    };
    let variant = Variant::from_key(get(&kv, "model.variant")?)
        .ok_or_else(|| Error::Load("unknown model.variant".into()))?;
    let model_cfg = ModelConfig {
        variant,
        input_dim: get_num(&kv, "model.input_dim")?,
        enc_hidden: get_num(&kv, "model.enc_hidden")?,
        dec_hidden: get_num(&kv, "model.dec_hidden")?,
        attn_hidden: get_num(&kv, "model.attn_hidden")?,
        dropout_rate: get_num(&kv, "model.dropout")?,
        n_classes: get_num(&kv, "model.n_classes")?,
        dec_steps: get_num(&kv, "model.dec_steps")?,
        mask_padding: get_num(&kv, "model.mask_padding")?,
    };
    model_cfg.validate().map_err(|e| Error::Load(e.to_string()))?;
    let optimizer = match get(&kv, "train.optimizer")? {
        "sgd" => Optimizer::Sgd,
        "adam" => Optimizer::Adam {
            beta1: get_num(&kv, "train.beta1")?,
            beta2: get_num(&kv, "train.beta2")?,
            eps: get_num(&kv, "train.eps")?,
        },
        other => return Err(Error::Load(format!("unknown optimizer {other}"))),
    };
    let train_cfg = TrainConfig {
        learning_rate: get_num(&kv, "train.learning_rate")?,
        epochs: get_num(&kv, "train.epochs")?,
        batch_size: get_num(&kv, "train.batch_size")?,
        optimizer,
        seed: get_num(&kv, "train.seed")?,
        grad_clip: get_opt(&kv, "train.grad_clip", "none")?,
        shuffle: get_num(&kv, "train.shuffle")?,
    };

    let mut params = ModelParams::zeros(&model_cfg);
    let stored = matrices(b"PARM")?;
    {
        let mut blocks = params.blocks_mut();
        if stored.len() != blocks.len() {
            return Err(Error::Load(format!("{} parameter blocks, expected {}", stored.len(), blocks.len())));
        }
        for ((name, slot), m) in blocks.iter_mut().zip(stored) {
            if slot.shape() != m.shape() {
                return Err(Error::Load(format!("{name}: stored {:?}, expected {:?}", m.shape(), slot.shape())));
            }
            **slot = m;
        }
    }
    let mut moments = matrices(b"OPTM")?;
    if moments.len() % 2 != 0 {
        return Err(Error::Load("odd number of optimizer moment blocks".into()));
    }
    let v = moments.split_off(moments.len() / 2);
    let optimizer_state = OptimizerState { step: get_num(&kv, "state.optimizer_step")?, m: moments, v };
    let norm = matrices(b"NORM")?;
    if norm.len() != 2 {
        return Err(Error::Load("normalizer section malformed".into()));
    }
    let loss = matrices(b"LOSS")?;
    Ok(Checkpoint {
        model_cfg,
        frame_cfg,
        train_cfg,
        params,
        optimizer: optimizer_state,
        epoch: get_num(&kv, "state.epoch")?,
        rng: RngState { seed: get_num(&kv, "state.rng_seed")?, word_pos: get_num(&kv, "state.rng_word_pos")? },
        loss_history: loss.first().map(|m| m.as_slice().to_vec()).unwrap_or_default(),
        norm: FeatureNorm { mean: norm[0].as_slice().to_vec(), std: norm[1].as_slice().to_vec() },
        pad_len: get_opt(&kv, "data.pad_len", "none")?,
    })
}

pub fn save_file(ckpt: &Checkpoint, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, save(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_file(path: &std::path::Path) -> Result<Checkpoint> {
    load(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

//! Attention-based region-of-interest (ROI) detection for speech emotion
//! recognition.
//!
//! The pipeline runs from 16-bit PCM audio through a 13-coefficient MFCC
//! front-end into one of four recurrent classifiers (uni/bi-directional
//! encoder, with or without an attention block), trained by backpropagation
//! through time and evaluated leave-one-subject-out. For attention variants
//! the per-frame attention weights are exported as ROI evidence.
//!
//! Module map:
//! - [`numerics`]: dense matrices, activations, seeded RNG, gradient checking
//! - [`dsp`]: WAV ingestion, padding, framing, MFCC
//! - [`dataset`]: labels, manifests, LOSO folds, synthetic corpora
//! - [`model`]: the four architectures and their forward pass
//! - [`train`]: loss, BPTT gradients, optimizers, checkpoints
//! - [`eval`]: confusion matrices and aggregate reports
//! - [`roi`]: attention maps, sample-domain expansion, region detection, SVG

pub mod dataset;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod roi;
pub mod train;

pub use dataset::{EmotionLabel, LosoFold, Manifest, UtteranceMeta};
pub use dsp::{AudioClip, FeatureSequence, FrameConfig};
pub use error::{Error, Result};
pub use eval::{AggregateMode, AggregateReport, ConfusionMatrix, FoldResult};
pub use model::{AttentionTrace, ModelConfig, ModelParams, Posterior, Variant};
pub use numerics::{Matrix, SeededRng};
pub use roi::{AttentionMap, RoiReport, SampleDomainMap};
pub use train::{Checkpoint, TrainConfig};

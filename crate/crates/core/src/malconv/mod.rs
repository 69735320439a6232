//! Byte-level gated-convolution detector (MalConv-style), desk scale.
//!
//! Inference path:
//!
//! ```text
//! bytes ──embed──▶ z (L×d) ──┬─ conv_a ─ relu ───┐
//!                            │                   ⊙ ──max-pool──▶ fc ─ sigmoid ─▶ confidence
//!                            └─ conv_b ─ sigmoid ┘      (per channel)
//! ```
//!
//! Bytes embed through a 257-row table: byte values 0..=255 plus one
//! padding token used to fill files shorter than the model window.
//! Both convolution branches share shapes (`channels` filters of
//! `kernel × embed_dim`, applied every `stride` positions); their
//! elementwise product is max-pooled per channel and a single linear
//! layer produces the malware confidence.
//!
//! Everything differentiable is computed in f64 over f32-stored weights,
//! and the backward pass is analytic: the max-pool routes gradient only
//! to each channel's (first) argmax window. Gradients with respect to
//! the embedded rows are what the byte attacks consume.

mod container;
mod train;

pub use container::{
    load_model, model_from_bytes, model_to_bytes, save_model, MODEL_FORMAT_VERSION,
};
pub use train::{accuracy, init_model, train, EpochStats, Sample, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Byte values 0..=255 plus the padding token.
pub const VOCAB_SIZE: usize = 257;
/// Embedding row used to pad short inputs. Never a legal attack byte.
pub const PAD_TOKEN: u16 = 256;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset holds a single class; training needs both")]
    SingleClassDataset,
    #[error("unsupported model container version {found} (this build reads {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt model container: {0}")]
    CorruptFile(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input window in bytes (files are truncated/padded to this).
    pub max_len: usize,
    pub embed_dim: usize,
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            max_len: 4096,
            embed_dim: 8,
            kernel: 64,
            stride: 64,
            channels: 16,
        }
    }
}

impl ModelConfig {
    /// Number of convolution windows.
    pub fn positions(&self) -> usize {
        (self.max_len - self.kernel) / self.stride + 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.max_len == 0
            || self.embed_dim == 0
            || self.kernel == 0
            || self.stride == 0
            || self.channels == 0
        {
            return Err(ModelError::InvalidConfig(
                "all dimensions must be positive".into(),
            ));
        }
        if self.kernel > self.max_len {
            return Err(ModelError::InvalidConfig(format!(
                "kernel {} exceeds window {}",
                self.kernel, self.max_len
            )));
        }
        Ok(())
    }
}

/// 257 × dim lookup table, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub weights: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn row(&self, token: usize) -> &[f32] {
        &self.weights[token * self.dim..(token + 1) * self.dim]
    }
}

/// One convolution branch: `channels` filters of `kernel × dim` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBranch {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: ModelConfig,
    pub embedding: EmbeddingMatrix,
    /// Branch passed through relu.
    pub conv_a: ConvBranch,
    /// Branch passed through the sigmoid gate.
    pub conv_b: ConvBranch,
    pub fc_weights: Vec<f32>,
    pub fc_bias: f32,
}

/// A file lifted into embedding space: the resolved tokens (byte values
/// or [`PAD_TOKEN`]) and their stacked embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSequence {
    pub tokens: Vec<u16>,
    /// Row-major `max_len × dim`.
    pub z: Vec<f64>,
}

/// What the gradient should be taken of.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradTarget {
    /// The sigmoid output itself.
    Confidence,
    /// Binary cross-entropy against `label` (0 = benign, 1 = malicious).
    Loss { label: f64 },
}

/// Per-window activation summary plus its fixed-length resampling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationProfile {
    /// Channel-averaged gated activation per convolution window.
    pub per_position: Vec<f64>,
    /// `per_position` resampled to a fixed number of bins.
    pub resampled: Vec<f64>,
}

pub(crate) struct ForwardTrace {
    pub positions: usize,
    /// Pre-activations, `channels × positions`.
    pub pre_a: Vec<f64>,
    pub pre_b: Vec<f64>,
    /// relu(pre_a) * sigmoid(pre_b).
    pub gated: Vec<f64>,
    /// First argmax window per channel.
    pub argmax: Vec<usize>,
    pub confidence: f64,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl DetectorModel {
    /// Truncate/pad a file to the model window and look up embeddings.
    pub fn embed(&self, bytes: &[u8]) -> EmbeddedSequence {
        let l = self.config.max_len;
        let d = self.config.embed_dim;
        let mut tokens = Vec::with_capacity(l);
        for i in 0..l {
            tokens.push(bytes.get(i).map(|&b| b as u16).unwrap_or(PAD_TOKEN));
        }
        let mut z = vec![0.0f64; l * d];
        for (i, &t) in tokens.iter().enumerate() {
            let row = self.embedding.row(t as usize);
            for e in 0..d {
                z[i * d + e] = row[e] as f64;
            }
        }
        EmbeddedSequence { tokens, z }
    }

    /// Malware confidence in [0, 1].
    pub fn forward(&self, bytes: &[u8]) -> f64 {
        self.forward_trace(&self.embed(bytes).z).confidence
    }

    /// Confidence straight from embedding space (used by attacks that
    /// relax bytes into continuous rows).
    pub fn forward_embedded(&self, z: &[f64]) -> f64 {
        self.forward_trace(z).confidence
    }

    pub(crate) fn forward_trace(&self, z: &[f64]) -> ForwardTrace {
        let cfg = &self.config;
        let (d, k, s, c) = (cfg.embed_dim, cfg.kernel, cfg.stride, cfg.channels);
        let p_count = cfg.positions();
        debug_assert_eq!(z.len(), cfg.max_len * d);

        let mut pre_a = vec![0.0f64; c * p_count];
        let mut pre_b = vec![0.0f64; c * p_count];
        let mut gated = vec![0.0f64; c * p_count];
        let mut argmax = vec![0usize; c];
        let mut pooled = vec![f64::NEG_INFINITY; c];
        for ch in 0..c {
            let wa = &self.conv_a.weights[ch * k * d..(ch + 1) * k * d];
            let wb = &self.conv_b.weights[ch * k * d..(ch + 1) * k * d];
            for p in 0..p_count {
                let base = p * s * d;
                let mut a = self.conv_a.bias[ch] as f64;
                let mut b = self.conv_b.bias[ch] as f64;
                for i in 0..k * d {
                    let zv = z[base + i];
                    a += wa[i] as f64 * zv;
                    b += wb[i] as f64 * zv;
                }
                let g = a.max(0.0) * sigmoid(b);
                pre_a[ch * p_count + p] = a;
                pre_b[ch * p_count + p] = b;
                gated[ch * p_count + p] = g;
                if g > pooled[ch] {
                    pooled[ch] = g;
                    argmax[ch] = p;
                }
            }
        }
        let mut logit = self.fc_bias as f64;
        for (w, p) in self.fc_weights.iter().zip(&pooled) {
            logit += *w as f64 * p;
        }
        ForwardTrace {
            positions: p_count,
            pre_a,
            pre_b,
            gated,
            argmax,
            confidence: sigmoid(logit),
        }
    }

    pub(crate) fn dlogit_for(&self, trace: &ForwardTrace, target: GradTarget) -> f64 {
        match target {
            GradTarget::Confidence => trace.confidence * (1.0 - trace.confidence),
            GradTarget::Loss { label } => trace.confidence - label,
        }
    }

    /// Gradient of the target with respect to every embedded row,
    /// `max_len × dim` row-major. Only each channel's argmax window
    /// receives gradient, so rows outside every winning window are zero.
    pub(crate) fn backward_z(&self, trace: &ForwardTrace, target: GradTarget) -> Vec<f64> {
        let cfg = &self.config;
        let (d, k, s, c) = (cfg.embed_dim, cfg.kernel, cfg.stride, cfg.channels);
        let dlogit = self.dlogit_for(trace, target);
        let mut dz = vec![0.0f64; cfg.max_len * d];
        for ch in 0..c {
            let dm = dlogit * self.fc_weights[ch] as f64;
            if dm == 0.0 {
                continue;
            }
            let p = trace.argmax[ch];
            let a = trace.pre_a[ch * trace.positions + p];
            let b = trace.pre_b[ch * trace.positions + p];
            let sig = sigmoid(b);
            let da = if a > 0.0 { dm * sig } else { 0.0 };
            let db = dm * a.max(0.0) * sig * (1.0 - sig);
            if da == 0.0 && db == 0.0 {
                continue;
            }
            let wa = &self.conv_a.weights[ch * k * d..(ch + 1) * k * d];
            let wb = &self.conv_b.weights[ch * k * d..(ch + 1) * k * d];
            let base = p * s * d;
            for i in 0..k * d {
                dz[base + i] += da * wa[i] as f64 + db * wb[i] as f64;
            }
        }
        dz
    }

    /// Same as [`backward_z`](Self::backward_z) but callable on raw
    /// embedding rows (attacks in embedding space).
    pub fn grad_embedded(&self, z: &[f64], target: GradTarget) -> Vec<f64> {
        self.backward_z(&self.forward_trace(z), target)
    }

    /// Gradient of the target with respect to the embedded rows at the
    /// requested byte positions (each must be below `max_len`).
    pub fn grad_embedding(
        &self,
        bytes: &[u8],
        positions: &[usize],
        target: GradTarget,
    ) -> Vec<Vec<f64>> {
        let d = self.config.embed_dim;
        let seq = self.embed(bytes);
        let dz = self.backward_z(&self.forward_trace(&seq.z), target);
        positions
            .iter()
            .map(|&p| {
                assert!(
                    p < self.config.max_len,
                    "position {p} outside the model window"
                );
                dz[p * d..(p + 1) * d].to_vec()
            })
            .collect()
    }

    /// Channel-averaged gated activation per window, with a fixed-length
    /// resampling so profiles of different models/files can be averaged.
    pub fn activation_profile(&self, bytes: &[u8], bins: usize) -> ActivationProfile {
        let trace = self.forward_trace(&self.embed(bytes).z);
        let c = self.config.channels;
        let p_count = trace.positions;
        let mut per_position = vec![0.0f64; p_count];
        for (p, slot) in per_position.iter_mut().enumerate() {
            let mut sum = 0.0;
            for ch in 0..c {
                sum += trace.gated[ch * p_count + p];
            }
            *slot = sum / c as f64;
        }
        let resampled = resample(&per_position, bins);
        ActivationProfile {
            per_position,
            resampled,
        }
    }
}

/// Resample `values` to `bins` entries by averaging with fractional
/// overlap: bin `i` covers the span `[i, i+1) * len/bins`. With
/// `bins == len` this is the identity; smaller bin counts average,
/// larger ones repeat values piecewise.
pub fn resample(values: &[f64], bins: usize) -> Vec<f64> {
    assert!(bins > 0, "resampling needs at least one bin");
    if values.is_empty() {
        return vec![0.0; bins];
    }
    let n = values.len() as f64;
    let mut out = Vec::with_capacity(bins);
    for i in 0..bins {
        let lo = i as f64 * n / bins as f64;
        let hi = (i + 1) as f64 * n / bins as f64;
        let mut sum = 0.0;
        let mut weight = 0.0;
        let mut p = lo.floor() as usize;
        while (p as f64) < hi && p < values.len() {
            let overlap = hi.min(p as f64 + 1.0) - lo.max(p as f64);
            if overlap > 0.0 {
                sum += values[p] * overlap;
                weight += overlap;
            }
            p += 1;
        }
        out.push(if weight > 0.0 { sum / weight } else { 0.0 });
    }
    out
}

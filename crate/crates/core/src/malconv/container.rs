//! On-disk model container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  "BYTEGCN\0"
//! 8       4     format version (u32)
//! 12      24    config: max_len, embed_dim, kernel, stride, channels, vocab (6 x u32)
//! 36      ...   tensors as raw f32, in declared order:
//!               embedding (vocab x dim), conv_a weights, conv_a bias,
//!               conv_b weights, conv_b bias, fc weights, fc bias (1)
//! ```
//!
//! Loading a saved model reproduces it bit for bit; the f32 tensors are
//! the storage of record and the in-memory f64 arithmetic reads them
//! verbatim.

use super::{ConvBranch, DetectorModel, EmbeddingMatrix, ModelConfig, ModelError, VOCAB_SIZE};
use std::path::Path;

pub const MODEL_MAGIC: [u8; 8] = *b"BYTEGCN\0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Serialize to the container byte format.
pub fn model_to_bytes(model: &DetectorModel) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    for v in [
        cfg.max_len as u32,
        cfg.embed_dim as u32,
        cfg.kernel as u32,
        cfg.stride as u32,
        cfg.channels as u32,
        VOCAB_SIZE as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let tensors: [&[f32]; 7] = [
        &model.embedding.weights,
        &model.conv_a.weights,
        &model.conv_a.bias,
        &model.conv_b.weights,
        &model.conv_b.bias,
        &model.fc_weights,
        std::slice::from_ref(&model.fc_bias),
    ];
    for tensor in tensors {
        for &w in tensor {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    out
}

/// Parse the container byte format.
pub fn model_from_bytes(bytes: &[u8]) -> Result<DetectorModel, ModelError> {
    if bytes.len() < 12 || bytes[..8] != MODEL_MAGIC {
        return Err(ModelError::CorruptFile("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != MODEL_FORMAT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    if bytes.len() < 36 {
        return Err(ModelError::CorruptFile("truncated config record".into()));
    }
    let mut words = [0u32; 6];
    for (i, w) in words.iter_mut().enumerate() {
        *w = u32::from_le_bytes(bytes[12 + 4 * i..16 + 4 * i].try_into().unwrap());
    }
    let [max_len, embed_dim, kernel, stride, channels, vocab] = words;
    if vocab as usize != VOCAB_SIZE {
        return Err(ModelError::CorruptFile(format!(
            "vocabulary of {vocab} rows (this build uses {VOCAB_SIZE})"
        )));
    }
    let config = ModelConfig {
        max_len: max_len as usize,
        embed_dim: embed_dim as usize,
        kernel: kernel as usize,
        stride: stride as usize,
        channels: channels as usize,
    };
    config.validate()?;

    let d = config.embed_dim;
    let kd = config.kernel * d;
    let c = config.channels;
    let counts = [VOCAB_SIZE * d, c * kd, c, c * kd, c, c, 1];
    let expected: usize = counts.iter().sum::<usize>() * 4;
    let payload = &bytes[36..];
    if payload.len() != expected {
        return Err(ModelError::CorruptFile(format!(
            "tensor payload of {} bytes does not match the declared config ({expected} expected)",
            payload.len()
        )));
    }
    let mut pos = 0usize;
    let mut read = |n: usize| -> Result<Vec<f32>, ModelError> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let w = f32::from_le_bytes(payload[pos..pos + 4].try_into().unwrap());
            if !w.is_finite() {
                return Err(ModelError::CorruptFile("non-finite weight".into()));
            }
            v.push(w);
            pos += 4;
        }
        Ok(v)
    };
    let embedding = read(counts[0])?;
    let aw = read(counts[1])?;
    let ab = read(counts[2])?;
    let bw = read(counts[3])?;
    let bb = read(counts[4])?;
    let fcw = read(counts[5])?;
    let fcb = read(counts[6])?[0];

    Ok(DetectorModel {
        config,
        embedding: EmbeddingMatrix {
            dim: d,
            weights: embedding,
        },
        conv_a: ConvBranch {
            weights: aw,
            bias: ab,
        },
        conv_b: ConvBranch {
            weights: bw,
            bias: bb,
        },
        fc_weights: fcw,
        fc_bias: fcb,
    })
}

pub fn save_model(model: &DetectorModel, path: &Path) -> Result<(), ModelError> {
    Ok(std::fs::write(path, model_to_bytes(model))?)
}

pub fn load_model(path: &Path) -> Result<DetectorModel, ModelError> {
    model_from_bytes(&std::fs::read(path)?)
}

//! Seeded initialization and mini-batch SGD training for the detector.
//!
//! Binary cross-entropy loss, classic momentum, deterministic shuffling
//! from a fixed seed. All gradient accumulation happens in f64; the
//! stored f32 weights are updated once per batch.

use super::{
    sigmoid, ConvBranch, DetectorModel, EmbeddingMatrix, GradTarget, ModelConfig, ModelError,
    VOCAB_SIZE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

/// One labeled file.
#[derive(Debug, Clone)]
pub struct Sample {
    pub bytes: Vec<u8>,
    pub malicious: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 16,
            learning_rate: 0.25,
            momentum: 0.9,
            seed: 41,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub history: Vec<EpochStats>,
}

/// Fresh model with small uniform weights drawn from a seeded stream.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<DetectorModel, ModelError> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let d = config.embed_dim;
    let kd = config.kernel * d;
    let c = config.channels;

    let mut uniform = |n: usize, lim: f64| -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-lim..lim) as f32).collect()
    };
    let conv_lim = (1.0 / kd as f64).sqrt();
    let fc_lim = (1.0 / c as f64).sqrt();
    Ok(DetectorModel {
        config: *config,
        embedding: EmbeddingMatrix {
            dim: d,
            weights: uniform(VOCAB_SIZE * d, 0.5),
        },
        conv_a: ConvBranch {
            weights: uniform(c * kd, conv_lim),
            bias: vec![0.0; c],
        },
        conv_b: ConvBranch {
            weights: uniform(c * kd, conv_lim),
            bias: vec![0.0; c],
        },
        fc_weights: uniform(c, fc_lim),
        fc_bias: 0.0,
    })
}

/// Per-parameter gradient accumulator matching the model's shapes.
struct Grads {
    embedding: Vec<f64>,
    aw: Vec<f64>,
    ab: Vec<f64>,
    bw: Vec<f64>,
    bb: Vec<f64>,
    fcw: Vec<f64>,
    fcb: f64,
}

impl Grads {
    fn zeros(m: &DetectorModel) -> Self {
        Grads {
            embedding: vec![0.0; m.embedding.weights.len()],
            aw: vec![0.0; m.conv_a.weights.len()],
            ab: vec![0.0; m.conv_a.bias.len()],
            bw: vec![0.0; m.conv_b.weights.len()],
            bb: vec![0.0; m.conv_b.bias.len()],
            fcw: vec![0.0; m.fc_weights.len()],
            fcb: 0.0,
        }
    }
}

/// Forward + full backward for one sample; returns (loss, correct).
fn accumulate(model: &DetectorModel, sample: &Sample, grads: &mut Grads) -> (f64, bool) {
    let cfg = &model.config;
    let (d, k, s, c) = (cfg.embed_dim, cfg.kernel, cfg.stride, cfg.channels);
    let seq = model.embed(&sample.bytes);
    let trace = model.forward_trace(&seq.z);
    let y = if sample.malicious { 1.0 } else { 0.0 };
    let f = trace.confidence.clamp(1e-12, 1.0 - 1e-12);
    let loss = -(y * f.ln() + (1.0 - y) * (1.0 - f).ln());
    let correct = (trace.confidence >= 0.5) == sample.malicious;

    let dlogit = model.dlogit_for(&trace, GradTarget::Loss { label: y });
    grads.fcb += dlogit;
    let mut dz = vec![0.0f64; cfg.max_len * d];
    for ch in 0..c {
        let p = trace.argmax[ch];
        let idx = ch * trace.positions + p;
        let a = trace.pre_a[idx];
        let b = trace.pre_b[idx];
        let sig = sigmoid(b);
        let pooled = a.max(0.0) * sig;
        grads.fcw[ch] += dlogit * pooled;

        let dm = dlogit * model.fc_weights[ch] as f64;
        let da = if a > 0.0 { dm * sig } else { 0.0 };
        let db = dm * a.max(0.0) * sig * (1.0 - sig);
        if da == 0.0 && db == 0.0 {
            continue;
        }
        grads.ab[ch] += da;
        grads.bb[ch] += db;
        let wa = &model.conv_a.weights[ch * k * d..(ch + 1) * k * d];
        let wb = &model.conv_b.weights[ch * k * d..(ch + 1) * k * d];
        let base = p * s * d;
        let goff = ch * k * d;
        for i in 0..k * d {
            let zv = seq.z[base + i];
            grads.aw[goff + i] += da * zv;
            grads.bw[goff + i] += db * zv;
            dz[base + i] += da * wa[i] as f64 + db * wb[i] as f64;
        }
    }
    for (row, &token) in seq.tokens.iter().enumerate() {
        let zoff = row * d;
        let eoff = token as usize * d;
        for e in 0..d {
            grads.embedding[eoff + e] += dz[zoff + e];
        }
    }
    (loss, correct)
}

struct Momentum {
    embedding: Vec<f64>,
    aw: Vec<f64>,
    ab: Vec<f64>,
    bw: Vec<f64>,
    bb: Vec<f64>,
    fcw: Vec<f64>,
    fcb: f64,
}

fn step(weights: &mut [f32], velocity: &mut [f64], grads: &[f64], scale: f64, lr: f64, mu: f64) {
    for i in 0..weights.len() {
        velocity[i] = mu * velocity[i] - lr * grads[i] * scale;
        weights[i] = (weights[i] as f64 + velocity[i]) as f32;
    }
}

/// Train a copy of `model` on `data`. Zero epochs returns the seed model
/// untouched (with an empty history).
pub fn train(
    model: &DetectorModel,
    data: &[Sample],
    cfg: &TrainConfig,
) -> Result<(DetectorModel, TrainReport), ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if data.iter().all(|s| s.malicious) || data.iter().all(|s| !s.malicious) {
        return Err(ModelError::SingleClassDataset);
    }
    let mut model = model.clone();
    let mut report = TrainReport {
        epochs_run: 0,
        history: Vec::new(),
    };
    if cfg.epochs == 0 {
        return Ok((model, report));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut velocity = Momentum {
        embedding: vec![0.0; model.embedding.weights.len()],
        aw: vec![0.0; model.conv_a.weights.len()],
        ab: vec![0.0; model.conv_a.bias.len()],
        bw: vec![0.0; model.conv_b.weights.len()],
        bb: vec![0.0; model.conv_b.bias.len()],
        fcw: vec![0.0; model.fc_weights.len()],
        fcb: 0.0,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = cfg.batch_size.max(1);

    for epoch in 0..cfg.epochs {
        // Fisher-Yates from the seeded stream keeps runs reproducible.
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(batch) {
            let mut grads = Grads::zeros(&model);
            for &i in chunk {
                let (loss, ok) = accumulate(&model, &data[i], &mut grads);
                loss_sum += loss;
                correct += ok as usize;
            }
            let scale = 1.0 / chunk.len() as f64;
            let (lr, mu) = (cfg.learning_rate, cfg.momentum);
            step(
                &mut model.embedding.weights,
                &mut velocity.embedding,
                &grads.embedding,
                scale,
                lr,
                mu,
            );
            step(
                &mut model.conv_a.weights,
                &mut velocity.aw,
                &grads.aw,
                scale,
                lr,
                mu,
            );
            step(
                &mut model.conv_a.bias,
                &mut velocity.ab,
                &grads.ab,
                scale,
                lr,
                mu,
            );
            step(
                &mut model.conv_b.weights,
                &mut velocity.bw,
                &grads.bw,
                scale,
                lr,
                mu,
            );
            step(
                &mut model.conv_b.bias,
                &mut velocity.bb,
                &grads.bb,
                scale,
                lr,
                mu,
            );
            step(
                &mut model.fc_weights,
                &mut velocity.fcw,
                &grads.fcw,
                scale,
                lr,
                mu,
            );
            velocity.fcb = mu * velocity.fcb - lr * grads.fcb * scale;
            model.fc_bias = (model.fc_bias as f64 + velocity.fcb) as f32;
        }
        report.epochs_run = epoch + 1;
        report.history.push(EpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok((model, report))
}

/// Fraction of samples the model labels correctly at the 0.5 threshold.
pub fn accuracy(model: &DetectorModel, data: &[Sample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = data
        .iter()
        .filter(|s| (model.forward(&s.bytes) >= 0.5) == s.malicious)
        .count();
    correct as f64 / data.len() as f64
}

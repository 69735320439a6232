//! Signed-gradient attack in embedding space.
//!
//! The writable region is relaxed into continuous embedding rows (the
//! payload). Each step moves every payload coordinate by `ε` against
//! the sign of the gradient of the benign-label cross-entropy, i.e.
//! `z ← z − ε·sign(∇_z L(z, benign))`, leaving all other rows pinned.
//! The loop watches the confidence of the recomposed embedded sequence
//! and stops once it falls to the threshold or the step cap is hit.
//!
//! Bytes come back out by snapping each payload row to its nearest
//! embedding row (Euclidean), never the padding row — the padding token
//! cannot be written into a file. The relaxed confidence and the
//! quantized byte-level confidence can disagree, so both are recorded
//! per iteration, and evasion is judged only on the final byte file.

use super::{AttackConfig, AttackError, AttackResult, IterationTrace, PerturbRegion};
use crate::malconv::{DetectorModel, EmbeddingMatrix, GradTarget};

/// `sign` with the zero case mapped to zero (a zero-gradient
/// coordinate must not move). `f64::signum` maps +0.0 to +1.0, so it
/// cannot be used here.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Snap one embedded row to the closest byte row (Euclidean), scanning
/// all 256 byte rows and skipping the padding row. Ties go to the
/// smallest byte value.
pub fn nearest_byte_row(embedding: &EmbeddingMatrix, row: &[f64]) -> u8 {
    let d = embedding.dim;
    debug_assert_eq!(row.len(), d);
    let mut best = 0u8;
    let mut best_dist = f64::INFINITY;
    for i in 0..256usize {
        let m = embedding.row(i);
        let mut dist = 0.0;
        for e in 0..d {
            let delta = m[e] as f64 - row[e];
            dist += delta * delta;
        }
        if dist < best_dist {
            best_dist = dist;
            best = i as u8;
        }
    }
    best
}

/// Run the signed-gradient attack over the region. Returns the attacked
/// file and the outcome record.
pub fn fgsm_attack(
    model: &DetectorModel,
    x0: &[u8],
    region: &PerturbRegion,
    config: &AttackConfig,
) -> Result<(Vec<u8>, AttackResult), AttackError> {
    config.validate()?;
    region.validate(x0.len())?;
    let d = model.config.embed_dim;
    let window = model.config.max_len;
    let confidence_before = model.forward(x0);

    // Rows the model can actually see; bytes past the window stay at
    // their initialized values.
    let payload: Vec<usize> = region.positions().filter(|&j| j < window).collect();
    let mut z = model.embed(x0).z;
    let mut embedded_confidence = model.forward_embedded(&z);
    let mut trace: Vec<IterationTrace> = Vec::new();

    let quantize = |z: &[f64], into: &mut Vec<u8>| {
        for &j in &payload {
            into[j] = nearest_byte_row(&model.embedding, &z[j * d..(j + 1) * d]);
        }
    };

    let mut scratch = x0.to_vec();
    while embedded_confidence > config.threshold && trace.len() < config.max_iterations {
        let dz = model.grad_embedded(&z, GradTarget::Loss { label: 0.0 });
        for &j in &payload {
            for e in 0..d {
                let idx = j * d + e;
                z[idx] -= config.epsilon * sign(dz[idx]);
            }
        }
        embedded_confidence = model.forward_embedded(&z);
        quantize(&z, &mut scratch);
        trace.push(IterationTrace {
            iteration: trace.len() + 1,
            embedded_confidence: Some(embedded_confidence),
            byte_confidence: model.forward(&scratch),
        });
    }

    let mut out = x0.to_vec();
    quantize(&z, &mut out);
    let confidence_after = model.forward(&out);
    let result = AttackResult {
        evaded: confidence_after < config.threshold,
        confidence_before,
        confidence_after,
        embedded_confidence_after: Some(embedded_confidence),
        iterations_used: trace.len(),
        perturbed_ranges: region.ranges.clone(),
        trace,
    };
    Ok((out, result))
}

//! Byte-space gradient descent.
//!
//! Each sweep freezes the gradient of the detector's confidence with
//! respect to every embedded row, then walks the writable positions in
//! ascending order. At position `j` the steepest-descent direction
//! `n = w/‖w‖` (with `w` the negated gradient row) defines a ray from
//! the current embedding `z_j`; every candidate byte's embedding `m_i`
//! is projected onto that ray (`s_i = n·(m_i − z_j)`) and the byte with
//! the smallest perpendicular distance `d_i` among those strictly ahead
//! of the ray (`s_i > 0`) replaces the current byte. Positions with a
//! zero gradient row, or with no candidate ahead of the ray, are left
//! unchanged. Sweeps repeat until the confidence falls below the
//! evasion threshold or the iteration cap is reached (at least one
//! sweep always runs).

use super::{AttackConfig, AttackError, AttackResult, IterationTrace, PerturbRegion};
use crate::malconv::{DetectorModel, EmbeddingMatrix, GradTarget};

/// The full geometry considered when replacing one byte.
#[derive(Debug, Clone, PartialEq)]
pub struct ByteChoice {
    /// Byte offset within the file.
    pub position: usize,
    /// Negated confidence gradient at this row (the descent direction
    /// before normalization).
    pub gradient: Vec<f64>,
    /// `gradient` normalized to unit length; all zeros when the
    /// gradient vanishes.
    pub direction: Vec<f64>,
    /// Ray projection `s_i` per candidate byte (empty when the
    /// gradient vanishes).
    pub projections: Vec<f64>,
    /// Perpendicular distance `d_i` per candidate byte (empty when the
    /// gradient vanishes).
    pub distances: Vec<f64>,
    /// Winning byte, if any candidate lies strictly ahead of the ray.
    pub chosen: Option<u8>,
}

/// Evaluate the replacement geometry for one position.
///
/// `z_j` is the current embedding row at the position and `w_j` the
/// descent direction (negated gradient). Ties in distance go to the
/// smallest byte value; a zero `w_j` or an empty feasible set selects
/// nothing.
pub fn choose_byte(
    position: usize,
    embedding: &EmbeddingMatrix,
    z_j: &[f64],
    w_j: &[f64],
) -> ByteChoice {
    let d = embedding.dim;
    debug_assert_eq!(z_j.len(), d);
    debug_assert_eq!(w_j.len(), d);
    let norm = w_j.iter().map(|w| w * w).sum::<f64>().sqrt();
    if norm == 0.0 {
        return ByteChoice {
            position,
            gradient: w_j.to_vec(),
            direction: vec![0.0; d],
            projections: Vec::new(),
            distances: Vec::new(),
            chosen: None,
        };
    }
    let n: Vec<f64> = w_j.iter().map(|w| w / norm).collect();
    let mut projections = Vec::with_capacity(256);
    let mut distances = Vec::with_capacity(256);
    let mut chosen = None;
    let mut best = f64::INFINITY;
    for i in 0..256usize {
        let m = embedding.row(i);
        let mut s = 0.0;
        for e in 0..d {
            s += n[e] * (m[e] as f64 - z_j[e]);
        }
        let mut dist_sq = 0.0;
        for e in 0..d {
            let delta = m[e] as f64 - (z_j[e] + s * n[e]);
            dist_sq += delta * delta;
        }
        let dist = dist_sq.sqrt();
        projections.push(s);
        distances.push(dist);
        // Strict comparisons keep the first (smallest) byte on ties.
        if s > 0.0 && dist < best {
            best = dist;
            chosen = Some(i as u8);
        }
    }
    ByteChoice {
        position,
        gradient: w_j.to_vec(),
        direction: n,
        projections,
        distances,
        chosen,
    }
}

/// Run byte-space gradient descent over the region. Returns the
/// attacked file and the outcome record.
pub fn gd_attack(
    model: &DetectorModel,
    x0: &[u8],
    region: &PerturbRegion,
    config: &AttackConfig,
) -> Result<(Vec<u8>, AttackResult), AttackError> {
    config.validate()?;
    region.validate(x0.len())?;
    let d = model.config.embed_dim;
    let window = model.config.max_len;
    let mut x = x0.to_vec();
    let confidence_before = model.forward(&x);
    let cap = config.max_iterations.max(1);
    let mut trace: Vec<IterationTrace> = Vec::with_capacity(cap);
    let mut confidence_after;

    loop {
        // One sweep: gradient frozen, positions ascending.
        let seq = model.embed(&x);
        let dz = model.grad_embedded(&seq.z, GradTarget::Confidence);
        for j in region.positions() {
            if j >= window {
                // The model never sees this byte; no gradient exists.
                continue;
            }
            let row = j * d..(j + 1) * d;
            let w: Vec<f64> = dz[row.clone()].iter().map(|g| -g).collect();
            if let Some(byte) = choose_byte(j, &model.embedding, &seq.z[row], &w).chosen {
                x[j] = byte;
            }
        }
        confidence_after = model.forward(&x);
        trace.push(IterationTrace {
            iteration: trace.len() + 1,
            embedded_confidence: None,
            byte_confidence: confidence_after,
        });
        if confidence_after < config.threshold || trace.len() >= cap {
            break;
        }
    }

    let result = AttackResult {
        evaded: confidence_after < config.threshold,
        confidence_before,
        confidence_after,
        embedded_confidence_after: None,
        iterations_used: trace.len(),
        perturbed_ranges: region.ranges.clone(),
        trace,
    };
    Ok((x, result))
}

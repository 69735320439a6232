//! Region-constrained adversarial byte attacks against the detector.
//!
//! Every attack edits bytes only inside an explicit [`PerturbRegion`] and
//! leaves the rest of the file bit-identical:
//!
//! ```text
//!                 ┌──────────────┐
//!  x0 ──embed──▶  │ gd_attack    │  byte-space line search per position
//!                 │ fgsm_attack  │  signed steps on embedded payload rows
//!                 └──────┬───────┘
//!                        ▼
//!        x′ (differs from x0 only inside the region)
//! ```
//!
//! Two placements feed those optimizers: [`append_attack`] grows the
//! file's overlay (bytes past the mapped image, invisible at runtime)
//! and [`cave_attack`] runs the full rewrite pipeline — plan a cave,
//! displace its bytes, park the restoring stub — and then optimizes the
//! cave span. Cave outputs must still restore to the original mapped
//! image; [`cave_attack`] checks that before returning.

mod fgsm;
mod gd;
mod pipeline;

pub use fgsm::{fgsm_attack, nearest_byte_row};
pub use gd::{choose_byte, gd_attack, ByteChoice};
pub(crate) use pipeline::prepare_cave;
pub use pipeline::{append_attack, cave_attack};

use crate::cave::{CaveError, CaveRecord};
use crate::loader::LoaderError;
use crate::pe::PeError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

/// Byte-space sweeps before the gradient-descent attack gives up.
pub const GD_MAX_ITERATIONS: usize = 3;
/// Embedding-space steps before the signed-gradient attack gives up.
pub const FGSM_MAX_ITERATIONS: usize = 20;
/// Confidence below which a file counts as evading the detector.
pub const EVASION_THRESHOLD: f64 = 0.5;
/// Step sizes the signed-gradient attack is normally swept over.
pub const FGSM_EPSILONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
/// Appended-payload volumes the signed-gradient attack is swept over.
pub const FGSM_VOLUMES: [u32; 4] = [2048, 4096, 8192, 16384];
/// Default cave budget: 15% of the file size.
pub const DEFAULT_CAVE_FRACTION: f64 = 0.15;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("perturbation region is empty")]
    EmptyRegion,
    #[error("perturbation region is invalid: {0}")]
    InvalidRegion(String),
    #[error("attack configuration is invalid: {0}")]
    InvalidConfig(String),
    #[error("initializing from original content needs a cave origin with displaced bytes")]
    MissingOriginalContent,
    #[error("attacked file no longer restores at runtime: {0}")]
    RestorationFailed(String),
    #[error(transparent)]
    Cave(#[from] CaveError),
    #[error(transparent)]
    Loader(#[from] LoaderError),
    #[error(transparent)]
    Pe(#[from] PeError),
}

/// Where a perturbation region came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RegionOrigin {
    /// A planned cave. `source_offset` is the file offset of the
    /// displaced original bytes (inside the grown last section), which
    /// [`InitMode::OriginalContent`] copies back into the cave.
    Cave {
        record: CaveRecord,
        source_offset: usize,
    },
    /// A tail appended past the original end of file.
    Append,
}

/// The byte spans an attack may write to.
///
/// Ranges are kept sorted and disjoint; their total length is the
/// attack's byte budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbRegion {
    pub ranges: Vec<Range<usize>>,
    pub origin: RegionOrigin,
}

impl PerturbRegion {
    /// Build a region, sorting the ranges and enforcing the invariants
    /// (nonempty, disjoint, inside `file_len`).
    pub fn new(
        mut ranges: Vec<Range<usize>>,
        origin: RegionOrigin,
        file_len: usize,
    ) -> Result<PerturbRegion, AttackError> {
        ranges.retain(|r| !r.is_empty());
        ranges.sort_by_key(|r| r.start);
        let region = PerturbRegion { ranges, origin };
        region.validate(file_len)?;
        Ok(region)
    }

    /// [`PerturbRegion::new`] for the common one-contiguous-span case.
    pub fn single(
        range: Range<usize>,
        origin: RegionOrigin,
        file_len: usize,
    ) -> Result<PerturbRegion, AttackError> {
        PerturbRegion::new(vec![range], origin, file_len)
    }

    /// Re-check the invariants against a concrete file length.
    pub fn validate(&self, file_len: usize) -> Result<(), AttackError> {
        if self.is_empty() {
            return Err(AttackError::EmptyRegion);
        }
        let mut prev_end = 0usize;
        for (i, r) in self.ranges.iter().enumerate() {
            if r.start >= r.end {
                return Err(AttackError::InvalidRegion(format!(
                    "range {}..{} is empty or inverted",
                    r.start, r.end
                )));
            }
            if i > 0 && r.start < prev_end {
                return Err(AttackError::InvalidRegion(format!(
                    "range {}..{} overlaps the previous range ending at {prev_end}",
                    r.start, r.end
                )));
            }
            if r.end > file_len {
                return Err(AttackError::InvalidRegion(format!(
                    "range {}..{} runs past the file end at {file_len}",
                    r.start, r.end
                )));
            }
            prev_end = r.end;
        }
        Ok(())
    }

    /// Total writable bytes (the budget q).
    pub fn len(&self) -> usize {
        self.ranges.iter().map(|r| r.end - r.start).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writable byte offsets in ascending order.
    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(|r| r.clone())
    }

    pub fn contains(&self, offset: usize) -> bool {
        self.ranges.iter().any(|r| r.contains(&offset))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    GradientDescent,
    Fgsm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLocation {
    Cave,
    Append,
}

/// How the writable region is filled before optimization starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Zeros,
    RandomUniform,
    OriginalContent,
}

/// Perturbation budget, either absolute or relative to the file size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbBudget {
    Bytes(u32),
    FileFraction(f64),
}

impl PerturbBudget {
    /// Concrete byte count for a file of `file_len` bytes.
    pub fn resolve(&self, file_len: usize) -> Result<usize, AttackError> {
        let q = match *self {
            PerturbBudget::Bytes(b) => b as usize,
            PerturbBudget::FileFraction(f) => {
                if !f.is_finite() || f < 0.0 {
                    return Err(AttackError::InvalidConfig(format!(
                        "file fraction {f} is not a usable budget"
                    )));
                }
                (f * file_len as f64).floor() as usize
            }
        };
        if q == 0 {
            return Err(AttackError::EmptyRegion);
        }
        Ok(q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub algorithm: Algorithm,
    pub location: AttackLocation,
    pub budget: PerturbBudget,
    /// Iteration cap: sweeps for gradient descent, steps for the
    /// signed-gradient attack.
    pub max_iterations: usize,
    /// Signed-gradient step size; ignored by gradient descent.
    pub epsilon: f64,
    pub init_mode: InitMode,
    /// Confidence below which the attack declares evasion.
    pub threshold: f64,
    /// Seeds the random-uniform initializer.
    pub seed: u64,
}

impl AttackConfig {
    /// Gradient-descent defaults: 3 sweeps, original-content
    /// initialization for caves, zeros for appended tails.
    pub fn gradient_descent(location: AttackLocation, budget: PerturbBudget) -> AttackConfig {
        AttackConfig {
            algorithm: Algorithm::GradientDescent,
            location,
            budget,
            max_iterations: GD_MAX_ITERATIONS,
            epsilon: 0.0,
            init_mode: default_init(location),
            threshold: EVASION_THRESHOLD,
            seed: 0,
        }
    }

    /// Signed-gradient defaults: 20 steps at the given step size.
    pub fn fgsm(location: AttackLocation, budget: PerturbBudget, epsilon: f64) -> AttackConfig {
        AttackConfig {
            algorithm: Algorithm::Fgsm,
            location,
            budget,
            max_iterations: FGSM_MAX_ITERATIONS,
            epsilon,
            init_mode: default_init(location),
            threshold: EVASION_THRESHOLD,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.threshold.is_finite() && self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(AttackError::InvalidConfig(format!(
                "evasion threshold {} must lie strictly inside (0, 1)",
                self.threshold
            )));
        }
        if self.algorithm == Algorithm::Fgsm && !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(AttackError::InvalidConfig(format!(
                "step size {} must be finite and non-negative",
                self.epsilon
            )));
        }
        Ok(())
    }
}

fn default_init(location: AttackLocation) -> InitMode {
    match location {
        AttackLocation::Cave => InitMode::OriginalContent,
        AttackLocation::Append => InitMode::Zeros,
    }
}

/// One optimizer iteration as recorded in an [`AttackResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    /// 1-based iteration index.
    pub iteration: usize,
    /// Confidence on the relaxed embedding (signed-gradient attack
    /// only; byte-space gradient descent has no relaxed state).
    pub embedded_confidence: Option<f64>,
    /// Confidence on the quantized byte file at this iterate.
    pub byte_confidence: f64,
}

/// Outcome of one attack on one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    /// True exactly when `confidence_after < threshold`, judged on the
    /// final byte file (never on a relaxed embedding).
    pub evaded: bool,
    pub confidence_before: f64,
    pub confidence_after: f64,
    /// Final relaxed-embedding confidence (signed-gradient attack only).
    /// Can disagree with `confidence_after`: quantizing back to bytes
    /// loses whatever the relaxation gained between embedding rows.
    pub embedded_confidence_after: Option<f64>,
    pub iterations_used: usize,
    pub perturbed_ranges: Vec<Range<usize>>,
    pub trace: Vec<IterationTrace>,
}

/// Fill the writable region of `bytes` according to `mode`; everything
/// outside the region is copied through untouched.
///
/// `OriginalContent` reads the displaced bytes back from the region's
/// cave origin and so only works for cave regions.
pub fn init_region(
    bytes: &[u8],
    region: &PerturbRegion,
    mode: InitMode,
    seed: u64,
) -> Result<Vec<u8>, AttackError> {
    region.validate(bytes.len())?;
    let mut out = bytes.to_vec();
    match mode {
        InitMode::Zeros => {
            for p in region.positions() {
                out[p] = 0x00;
            }
        }
        InitMode::RandomUniform => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            for p in region.positions() {
                out[p] = rng.gen();
            }
        }
        InitMode::OriginalContent => {
            let source = match &region.origin {
                RegionOrigin::Cave { source_offset, .. } => *source_offset,
                RegionOrigin::Append => return Err(AttackError::MissingOriginalContent),
            };
            let end = source + region.len();
            if end > bytes.len() {
                return Err(AttackError::InvalidRegion(format!(
                    "displaced bytes at {source}..{end} run past the file end at {}",
                    bytes.len()
                )));
            }
            for (i, p) in region.positions().enumerate() {
                out[p] = bytes[source + i];
            }
        }
    }
    Ok(out)
}

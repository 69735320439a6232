//! Attack placements: appended overlay tails and injected caves.
//!
//! Both placements prepare a file and a [`PerturbRegion`], hand the
//! pair to the configured optimizer, and report the result with
//! `confidence_before` measured on the *pristine* input file — the
//! interesting reduction is from the file as it existed before any
//! rewriting, not from the already-prepared attack start point.
//!
//! Cave outputs are re-parsed and must pass the restoration check
//! (the rewritten file still reproduces the original in-memory image
//! at runtime) before they are returned; a cave that breaks restoration
//! is an error, never a successful attack.

use super::{
    fgsm_attack, gd_attack, init_region, Algorithm, AttackConfig, AttackError, AttackLocation,
    AttackResult, PerturbRegion, RegionOrigin,
};
use crate::cave::{
    inject_cave, plan_cave, section_is_eligible, select_target_section, CaveError, CaveRecord,
    DEFAULT_ELIGIBILITY_THRESHOLD,
};
use crate::loader::{verify_restoration, STUB_SIZE};
use crate::malconv::DetectorModel;
use crate::pe::PeImage;

fn run_optimizer(
    model: &DetectorModel,
    x0: &[u8],
    region: &PerturbRegion,
    config: &AttackConfig,
) -> Result<(Vec<u8>, AttackResult), AttackError> {
    match config.algorithm {
        Algorithm::GradientDescent => gd_attack(model, x0, region, config),
        Algorithm::Fgsm => fgsm_attack(model, x0, region, config),
    }
}

/// Grow the file by the configured budget and optimize the appended
/// tail. The tail lies past every mapped section, so the file parses
/// and maps exactly as before.
pub fn append_attack(
    model: &DetectorModel,
    x0: &[u8],
    config: &AttackConfig,
) -> Result<(Vec<u8>, AttackResult), AttackError> {
    if config.location != AttackLocation::Append {
        return Err(AttackError::InvalidConfig(format!(
            "append placement called with a {:?} config",
            config.location
        )));
    }
    config.validate()?;
    let q = config.budget.resolve(x0.len())?;
    let mut grown = x0.to_vec();
    grown.resize(x0.len() + q, 0);
    let region = PerturbRegion::single(x0.len()..x0.len() + q, RegionOrigin::Append, grown.len())?;
    let initialized = init_region(&grown, &region, config.init_mode, config.seed)?;
    let (attacked, mut result) = run_optimizer(model, &initialized, &region, config)?;
    result.confidence_before = model.forward(x0);
    Ok((attacked, result))
}

/// Everything about a cave attack that happens before the optimizer
/// runs: the injected image, its record, the writable region, and the
/// initialized byte file the optimizer starts from. Deterministic for
/// a given (image, section, config), which lets campaign audits rebuild
/// the exact pre-attack baseline.
pub(crate) struct PreparedCave {
    pub record: CaveRecord,
    pub region: PerturbRegion,
    pub initialized: Vec<u8>,
}

/// Select/verify the host section, plan and inject the cave, and
/// initialize the writable span. No model involvement: an oversized
/// budget fails on capacity alone.
pub(crate) fn prepare_cave(
    original: &PeImage,
    section: Option<&str>,
    config: &AttackConfig,
) -> Result<PreparedCave, AttackError> {
    let target = match section {
        Some(name) => {
            if !section_is_eligible(original, name, DEFAULT_ELIGIBILITY_THRESHOLD) {
                return Err(CaveError::NoEligibleSection(DEFAULT_ELIGIBILITY_THRESHOLD).into());
            }
            name.to_string()
        }
        None => select_target_section(original, DEFAULT_ELIGIBILITY_THRESHOLD)?,
    };

    let file_len = original.to_bytes()?.len();
    let q = config.budget.resolve(file_len)?;
    let q32 = u32::try_from(q)
        .map_err(|_| AttackError::InvalidConfig(format!("budget of {q} bytes overflows")))?;

    let plan = plan_cave(original, &target, q32, None, STUB_SIZE as u32)?;
    let (injected, record) = inject_cave(original, &plan)?;
    let injected_bytes = injected.to_bytes()?;

    let target_header = &injected
        .section(&target)
        .expect("target section survives injection")
        .header;
    let cave_offset = target_header.pointer_to_raw_data as usize + plan.cave_offset as usize;
    let last = injected.sections.last().expect("image has sections");
    let source_offset = last.header.pointer_to_raw_data as usize + plan.relocation_offset as usize;

    let region = PerturbRegion::single(
        cave_offset..cave_offset + q,
        RegionOrigin::Cave {
            record: record.clone(),
            source_offset,
        },
        injected_bytes.len(),
    )?;
    let initialized = init_region(&injected_bytes, &region, config.init_mode, config.seed)?;
    Ok(PreparedCave {
        record,
        region,
        initialized,
    })
}

/// Full cave pipeline: pick (or verify) a target section, plan and
/// inject a cave sized by the configured budget, initialize it, and
/// optimize it. The attacked image must still pass the restoration
/// check against the original.
///
/// `section` pins the cave host; `None` picks by the standard priority.
/// Either way the host must clear the 15% size-eligibility bar.
pub fn cave_attack(
    model: &DetectorModel,
    original: &PeImage,
    section: Option<&str>,
    config: &AttackConfig,
) -> Result<(PeImage, CaveRecord, AttackResult), AttackError> {
    if config.location != AttackLocation::Cave {
        return Err(AttackError::InvalidConfig(format!(
            "cave placement called with a {:?} config",
            config.location
        )));
    }
    config.validate()?;
    let PreparedCave {
        record,
        region,
        initialized,
    } = prepare_cave(original, section, config)?;
    let (attacked_bytes, mut result) = run_optimizer(model, &initialized, &region, config)?;
    result.confidence_before = model.forward(&original.to_bytes()?);

    let attacked = PeImage::parse(&attacked_bytes)?;
    let report = verify_restoration(original, &attacked, &record);
    if !report.pass {
        return Err(AttackError::RestorationFailed(format!(
            "{} mismatched addresses, control transfer ok: {}, emulation error: {}",
            report.mismatch_count,
            report.control_transfer_ok,
            report.emulation_error.as_deref().unwrap_or("none"),
        )));
    }
    Ok((attacked, record, result))
}

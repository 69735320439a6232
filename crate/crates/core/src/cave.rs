//! Code-cave selection, planning, and injection for PE32 images.
//!
//! A cave is a contiguous span inside an existing section whose bytes
//! are displaced into freshly grown space at the end of the last
//! section, then zero-filled so an attack can write there freely. A
//! restoring stub is parked in the tail of `.text` and becomes the new
//! entry point; at run time it copies the displaced bytes back, wipes
//! the parked copy, and jumps to the original entry point. Because the
//! stub addresses memory absolutely, the rewrite also strips the
//! relocation flag and opts the image out of dynamic rebasing.

use crate::loader::{emit_loader, LoaderError};
use crate::pe::{
    align_up, FlagSite, PeError, PeImage, IMAGE_DLLCHARACTERISTICS_DYNAMIC_BASE,
    IMAGE_FILE_RELOCS_STRIPPED, IMAGE_SCN_MEM_EXECUTE, IMAGE_SCN_MEM_READ, IMAGE_SCN_MEM_WRITE,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum section-size-to-file-size ratio for a section to host a cave.
pub const DEFAULT_ELIGIBILITY_THRESHOLD: f64 = 0.15;

/// Tail bytes of `.text` requested for the loader by default. The
/// faithful stub encoding does not fit in it (see
/// [`crate::loader::STUB_SIZE`]); planners that intend to inject must ask
/// for at least that much.
pub const DEFAULT_LOADER_RESERVATION: u32 = 24;

/// Cave host preference when no section is named explicitly.
pub const TARGET_PRIORITY: [&str; 3] = [".text", ".data", ".rdata"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaveError {
    #[error("no section reaches {threshold:.0}% of the file size", threshold = .0 * 100.0)]
    NoEligibleSection(f64),
    #[error("cave of {requested} bytes does not fit: {available} bytes available")]
    InsufficientSpace { requested: u32, available: u32 },
    #[error("section {0} is the last section and cannot relocate into itself")]
    TargetIsLastSection(String),
    #[error("image has no .text section to host the loader")]
    MissingTextSection,
    #[error("entry point already targets the planned loader address; image looks injected")]
    AlreadyInjected,
    #[error("loader stub of {stub} bytes exceeds the {reservation}-byte reservation")]
    LoaderDoesNotFit { stub: usize, reservation: u32 },
    #[error(transparent)]
    Pe(#[from] PeError),
}

/// Everything needed to open one cave: where it lives, how big it may
/// be, where the loader goes, and where the displaced bytes land.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CavePlan {
    pub target_section: String,
    /// Cave start, as an offset into the target section's raw data.
    pub cave_offset: u32,
    pub cave_size: u32,
    /// Largest cave the target could host at offset 0.
    pub p_max: u32,
    /// RVA of the loader stub (tail of `.text`, before the reservation).
    pub loader_rva: u32,
    /// Tail bytes of `.text` set aside for the loader.
    pub reservation: u32,
    /// Name of the (last) section receiving the displaced bytes.
    pub relocated_to: String,
    /// Offset within the grown last section where the displaced bytes land.
    pub relocation_offset: u32,
}

/// An executed plan: the addresses an attack and the verifier need later.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaveRecord {
    pub plan: CavePlan,
    /// Entry point before the rewrite (the address the stub returns to).
    pub original_entry_rva: u32,
    pub cave_rva: u32,
    /// RVA of the displaced bytes inside the last section.
    pub source_rva: u32,
    pub image_base: u32,
}

/// Serialized file length, derived from the layout without serializing.
fn file_size(image: &PeImage) -> usize {
    let mut end = image.headers_span();
    for s in &image.sections {
        if s.header.size_of_raw_data > 0 {
            end =
                end.max(s.header.pointer_to_raw_data as usize + s.header.size_of_raw_data as usize);
        }
    }
    for g in &image.gaps {
        end = end.max(g.offset + g.bytes.len());
    }
    end + image.overlay.len()
}

/// Pick the cave host: the first of `.text`, `.data`, `.rdata` whose raw
/// size is at least `threshold` of the file size.
pub fn select_target_section(image: &PeImage, threshold: f64) -> Result<String, CaveError> {
    let total = file_size(image) as f64;
    for name in TARGET_PRIORITY {
        if let Some(s) = image.section(name) {
            if s.header.size_of_raw_data as f64 >= threshold * total {
                return Ok(name.to_string());
            }
        }
    }
    Err(CaveError::NoEligibleSection(threshold))
}

/// Check that a named section meets the same eligibility rule
/// [`select_target_section`] applies.
pub fn section_is_eligible(image: &PeImage, name: &str, threshold: f64) -> bool {
    match image.section(name) {
        Some(s) => s.header.size_of_raw_data as f64 >= threshold * file_size(image) as f64,
        None => false,
    }
}

/// Plan a cave of `cave_size` bytes in `target`.
///
/// The capacity limit is the target's raw size, minus the loader
/// reservation when the target is `.text` itself (the stub must not be
/// displaced by the cave it restores). `cave_offset` defaults to the
/// start of the target's raw data.
pub fn plan_cave(
    image: &PeImage,
    target: &str,
    cave_size: u32,
    cave_offset: Option<u32>,
    reservation: u32,
) -> Result<CavePlan, CaveError> {
    let target_idx = image
        .section_index(target)
        .ok_or_else(|| PeError::UnknownSection(target.to_string()))?;
    let last_idx = image.sections.len() - 1;
    if target_idx == last_idx {
        return Err(CaveError::TargetIsLastSection(target.to_string()));
    }
    let text = image
        .section(".text")
        .ok_or(CaveError::MissingTextSection)?;
    let text_raw = text.header.size_of_raw_data;
    if text_raw < reservation {
        return Err(CaveError::InsufficientSpace {
            requested: reservation,
            available: text_raw,
        });
    }
    if text.header.mapped_len() < text_raw {
        // The loader tail would exist on disk but never be mapped.
        return Err(PeError::InvalidImage(format!(
            ".text maps only {:#x} of its {:#x} raw bytes; the loader tail would be unmapped",
            text.header.mapped_len(),
            text_raw
        ))
        .into());
    }
    let loader_rva = text.header.virtual_address + text_raw - reservation;

    let target_header = &image.sections[target_idx].header;
    let p_max = if target == ".text" {
        text_raw - reservation
    } else {
        target_header.size_of_raw_data
    };
    let offset = cave_offset.unwrap_or(0);
    let available = p_max.saturating_sub(offset);
    if cave_size > available {
        return Err(CaveError::InsufficientSpace {
            requested: cave_size,
            available,
        });
    }
    if target_header.mapped_len() < offset + cave_size {
        return Err(CaveError::InsufficientSpace {
            requested: cave_size,
            available: target_header.mapped_len().saturating_sub(offset),
        });
    }

    let last = &image.sections[last_idx];
    let last_raw_end =
        last.header.pointer_to_raw_data as usize + last.header.size_of_raw_data as usize;
    let grows_past_everything = image.sections.iter().all(|s| {
        s.header.pointer_to_raw_data as usize + s.header.size_of_raw_data as usize <= last_raw_end
    });
    if !grows_past_everything {
        return Err(PeError::InvalidImage(
            "last section's raw data is not the end of the file; growing it would overlap".into(),
        )
        .into());
    }

    Ok(CavePlan {
        target_section: target.to_string(),
        cave_offset: offset,
        cave_size,
        p_max,
        loader_rva,
        reservation,
        relocated_to: last.header.name_str(),
        relocation_offset: last.header.mapped_len(),
    })
}

/// Execute a plan: grow the last section, displace the cave bytes into
/// it, zero the cave, park the loader stub in `.text`'s tail, and point
/// the entry point at it.
///
/// Besides the section table (sizes of the grown last section and the
/// three permission grants) the only header changes are the entry point,
/// the relocations-stripped bit, the dynamic-base opt-out, and
/// `size_of_image` when the growth needs new pages.
pub fn inject_cave(image: &PeImage, plan: &CavePlan) -> Result<(PeImage, CaveRecord), CaveError> {
    if image.optional.entry_point_rva == plan.loader_rva {
        return Err(CaveError::AlreadyInjected);
    }
    let target_idx = image
        .section_index(&plan.target_section)
        .ok_or_else(|| PeError::UnknownSection(plan.target_section.clone()))?;
    let last_idx = image.sections.len() - 1;
    let last_name = image.sections[last_idx].header.name_str();
    if last_name != plan.relocated_to {
        return Err(PeError::InvalidImage(format!(
            "plan relocates into {:?} but the last section is {:?}",
            plan.relocated_to, last_name
        ))
        .into());
    }

    let c = plan.cave_size;
    let off = plan.cave_offset as usize;
    let record = CaveRecord {
        plan: plan.clone(),
        original_entry_rva: image.optional.entry_point_rva,
        cave_rva: image.sections[target_idx].header.virtual_address + plan.cave_offset,
        source_rva: image.sections[last_idx].header.virtual_address + plan.relocation_offset,
        image_base: image.optional.image_base,
    };
    let stub = emit_loader(&record).map_err(|e| match e {
        LoaderError::StubTooLarge { needed, .. } => CaveError::LoaderDoesNotFit {
            stub: needed,
            reservation: plan.reservation,
        },
        LoaderError::RecordMismatch(m) => CaveError::Pe(PeError::InvalidImage(m)),
        LoaderError::Pe(p) => CaveError::Pe(p),
    })?;

    let mut out = image.clone();

    // Displace the cave into the grown last section and zero it.
    let displaced: Vec<u8> = {
        let t = &out.sections[target_idx].data;
        if off + c as usize > t.len() {
            return Err(CaveError::InsufficientSpace {
                requested: c,
                available: (t.len() - off.min(t.len())) as u32,
            });
        }
        t[off..off + c as usize].to_vec()
    };
    out.sections[target_idx].data[off..off + c as usize].fill(0);

    {
        let fa = out.optional.file_alignment;
        let last = &mut out.sections[last_idx];
        let old_raw = last.header.size_of_raw_data;
        let reloc = plan.relocation_offset as usize;
        if reloc as u32 != last.header.mapped_len() {
            return Err(PeError::InvalidImage(
                "plan's relocation offset no longer matches the last section".into(),
            )
            .into());
        }
        let new_raw = align_up(old_raw + c, fa);
        last.data.resize(new_raw as usize, 0);
        last.data[reloc..reloc + c as usize].copy_from_slice(&displaced);
        last.header.size_of_raw_data = new_raw;
        last.header.virtual_size = last.header.virtual_size.max(reloc as u32 + c);

        let span_end = align_up(
            last.header.virtual_address + last.header.virtual_size.max(new_raw),
            out.optional.section_alignment,
        );
        out.optional.size_of_image = out.optional.size_of_image.max(span_end);
    }

    // Park the stub (plus no-op filler) in the reserved .text tail.
    {
        let text_idx = out
            .section_index(".text")
            .ok_or(CaveError::MissingTextSection)?;
        let text = &mut out.sections[text_idx];
        let tail = text.data.len() - plan.reservation as usize;
        let padded = stub.padded();
        text.data[tail..].copy_from_slice(&padded);
    }

    out.optional.entry_point_rva = plan.loader_rva;
    let out = out
        .set_flag(
            FlagSite::CoffCharacteristics,
            IMAGE_FILE_RELOCS_STRIPPED as u32,
            true,
        )?
        .set_flag(
            FlagSite::DllCharacteristics,
            IMAGE_DLLCHARACTERISTICS_DYNAMIC_BASE as u32,
            false,
        )?
        .set_flag(
            FlagSite::Section(&plan.target_section),
            IMAGE_SCN_MEM_WRITE,
            true,
        )?
        .set_flag(
            FlagSite::Section(&plan.relocated_to),
            IMAGE_SCN_MEM_READ,
            true,
        )?
        .set_flag(FlagSite::Section(".text"), IMAGE_SCN_MEM_EXECUTE, true)?;

    Ok((out, record))
}

//! The functionality-restoring loader stub: emission, in-memory image
//! mapping, software emulation, and restoration verification.
//!
//! The stub is position-independent only in the trivial sense that it
//! uses absolute addresses everywhere; it is valid precisely because the
//! rewrite strips relocations and opts out of image rebasing, so the
//! image loads at its preferred base. Per displaced byte it restores the
//! original value into the cave and zeroes the copy, then transfers
//! control to the original entry point:
//!
//! ```text
//! cld                       ; forward string direction
//! mov esi, source_va        ; displaced bytes parked in the last section
//! mov edi, cave_va          ; cave to restore
//! mov ecx, byte_count
//! head: jecxz done
//! movsb                     ; cave byte = source byte
//! mov byte [esi-1], 0       ; wipe the source byte just copied
//! dec ecx
//! jmp head
//! done: push oep_va
//! ret                       ; jump to the original entry point
//! ```
//!
//! Emulation interprets the emitted machine code over a flat mapped
//! image, so verification exercises the actual injected bytes rather
//! than the intent behind them.

use crate::cave::CaveRecord;
use crate::pe::{PeError, PeImage};
use serde::Serialize;
use thiserror::Error;

/// Exact size of the emitted stub. The three address constants and the
/// byte count are 32-bit immediates, so the size does not depend on the
/// record.
pub const STUB_SIZE: usize = 32;

/// Single-byte no-op used to fill the reservation beyond the stub.
pub const STUB_FILLER: u8 = 0x90;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoaderError {
    #[error("loader stub needs {needed} bytes but the reservation is {reservation}")]
    StubTooLarge { needed: usize, reservation: u32 },
    #[error("record mismatch: {0}")]
    RecordMismatch(String),
    #[error(transparent)]
    Pe(#[from] PeError),
}

/// An emitted loader stub plus the constants baked into it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoaderStub {
    pub machine_code: Vec<u8>,
    pub reservation: u32,
    pub cave_va: u32,
    pub source_va: u32,
    pub byte_count: u32,
    pub oep_va: u32,
}

impl LoaderStub {
    /// The stub padded to the full reservation with no-op filler.
    pub fn padded(&self) -> Vec<u8> {
        let mut out = self.machine_code.clone();
        out.resize(self.reservation as usize, STUB_FILLER);
        out
    }
}

/// Emit the restoring stub for a cave record. Fails when the requested
/// reservation cannot hold the encoding ([`STUB_SIZE`] bytes).
pub fn emit_loader(record: &CaveRecord) -> Result<LoaderStub, LoaderError> {
    let cave_va = record.image_base.wrapping_add(record.cave_rva);
    let source_va = record.image_base.wrapping_add(record.source_rva);
    let oep_va = record.image_base.wrapping_add(record.original_entry_rva);
    let count = record.plan.cave_size;

    let mut code = Vec::with_capacity(STUB_SIZE);
    code.push(0xFC); // cld
    code.push(0xBE); // mov esi, imm32
    code.extend_from_slice(&source_va.to_le_bytes());
    code.push(0xBF); // mov edi, imm32
    code.extend_from_slice(&cave_va.to_le_bytes());
    code.push(0xB9); // mov ecx, imm32
    code.extend_from_slice(&count.to_le_bytes());
    code.extend_from_slice(&[0xE3, 0x08]); // jecxz done
    code.push(0xA4); // movsb
    code.extend_from_slice(&[0xC6, 0x46, 0xFF, 0x00]); // mov byte [esi-1], 0
    code.push(0x49); // dec ecx
    code.extend_from_slice(&[0xEB, 0xF6]); // jmp head
    code.push(0x68); // push imm32
    code.extend_from_slice(&oep_va.to_le_bytes());
    code.push(0xC3); // ret
    debug_assert_eq!(code.len(), STUB_SIZE);

    if code.len() > record.plan.reservation as usize {
        return Err(LoaderError::StubTooLarge {
            needed: code.len(),
            reservation: record.plan.reservation,
        });
    }
    Ok(LoaderStub {
        machine_code: code,
        reservation: record.plan.reservation,
        cave_va,
        source_va,
        byte_count: count,
        oep_va,
    })
}

/// A PE image laid out flat at its preferred base, the way the OS loader
/// would map it: headers at the base, each section's loader-visible
/// content at its virtual address, zero everywhere else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappedImage {
    pub image_base: u32,
    pub bytes: Vec<u8>,
}

impl MappedImage {
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    fn index(&self, va: u32) -> Result<usize, LoaderError> {
        let idx = va.wrapping_sub(self.image_base) as usize;
        if va < self.image_base || idx >= self.bytes.len() {
            return Err(LoaderError::RecordMismatch(format!(
                "address {va:#010x} falls outside the mapped image"
            )));
        }
        Ok(idx)
    }
}

/// Lay an image out in memory. Length equals `size_of_image`; raw bytes
/// past a section's `virtual_size` stay on disk.
pub fn map_image(image: &PeImage) -> Result<MappedImage, PeError> {
    let file = image.to_bytes()?;
    let mut bytes = vec![0u8; image.optional.size_of_image as usize];
    let hdr = (image.optional.size_of_headers as usize)
        .min(file.len())
        .min(bytes.len());
    bytes[..hdr].copy_from_slice(&file[..hdr]);
    for s in &image.sections {
        let n = s.header.mapped_len() as usize;
        let va = s.header.virtual_address as usize;
        bytes[va..va + n].copy_from_slice(&s.data[..n]);
    }
    Ok(MappedImage {
        image_base: image.optional.image_base,
        bytes,
    })
}

/// Interpreter state for the handful of x86 instructions the stub uses.
struct Cpu {
    eip: u32,
    esi: u32,
    edi: u32,
    ecx: u32,
    df_backward: bool,
    pushed: Vec<u32>,
}

/// Execute machine code at `start_va` over the mapped image until a
/// `ret`, returning the popped continuation address. Only the stub's
/// instruction repertoire is understood; anything else is a mismatch
/// between the record and the image contents.
fn execute(map: &mut MappedImage, start_va: u32, step_cap: usize) -> Result<u32, LoaderError> {
    let mut cpu = Cpu {
        eip: start_va,
        esi: 0,
        edi: 0,
        ecx: 0,
        df_backward: false,
        pushed: Vec::new(),
    };
    let fetch = |map: &MappedImage, va: u32, n: usize| -> Result<Vec<u8>, LoaderError> {
        let idx = map.index(va)?;
        map.index(va + n as u32 - 1)?;
        Ok(map.bytes[idx..idx + n].to_vec())
    };
    for _ in 0..step_cap {
        let op = fetch(map, cpu.eip, 1)?[0];
        match op {
            0xFC => {
                cpu.df_backward = false;
                cpu.eip += 1;
            }
            0xBE | 0xBF | 0xB9 => {
                let imm = fetch(map, cpu.eip + 1, 4)?;
                let v = u32::from_le_bytes([imm[0], imm[1], imm[2], imm[3]]);
                match op {
                    0xBE => cpu.esi = v,
                    0xBF => cpu.edi = v,
                    _ => cpu.ecx = v,
                }
                cpu.eip += 5;
            }
            0xE3 | 0xEB => {
                let rel = fetch(map, cpu.eip + 1, 1)?[0] as i8;
                let next = cpu.eip + 2;
                let taken = op == 0xEB || cpu.ecx == 0;
                cpu.eip = if taken {
                    next.wrapping_add_signed(rel as i32)
                } else {
                    next
                };
            }
            0xA4 => {
                let src = map.index(cpu.esi)?;
                let dst = map.index(cpu.edi)?;
                map.bytes[dst] = map.bytes[src];
                let step = if cpu.df_backward { u32::MAX } else { 1 };
                cpu.esi = cpu.esi.wrapping_add(step);
                cpu.edi = cpu.edi.wrapping_add(step);
                cpu.eip += 1;
            }
            0xC6 => {
                let tail = fetch(map, cpu.eip + 1, 3)?;
                if tail != [0x46, 0xFF, 0x00] {
                    return Err(LoaderError::RecordMismatch(format!(
                        "unsupported C6 form at {:#010x}",
                        cpu.eip
                    )));
                }
                let idx = map.index(cpu.esi.wrapping_sub(1))?;
                map.bytes[idx] = 0;
                cpu.eip += 4;
            }
            0x49 => {
                cpu.ecx = cpu.ecx.wrapping_sub(1);
                cpu.eip += 1;
            }
            0x68 => {
                let imm = fetch(map, cpu.eip + 1, 4)?;
                cpu.pushed
                    .push(u32::from_le_bytes([imm[0], imm[1], imm[2], imm[3]]));
                cpu.eip += 5;
            }
            0xC3 => {
                return cpu
                    .pushed
                    .pop()
                    .ok_or_else(|| LoaderError::RecordMismatch("ret with nothing pushed".into()));
            }
            other => {
                return Err(LoaderError::RecordMismatch(format!(
                    "unsupported opcode {other:#04x} at {:#010x}",
                    cpu.eip
                )));
            }
        }
    }
    Err(LoaderError::RecordMismatch(
        "loader did not terminate within its step budget".into(),
    ))
}

/// Map the modified image and run the injected stub over it. Returns the
/// post-run memory and the address the stub transferred control to.
///
/// The entry point must still target the loader recorded in `record`;
/// anything else means the record does not describe this image.
pub fn emulate_loader(
    modified: &PeImage,
    record: &CaveRecord,
) -> Result<(MappedImage, u32), LoaderError> {
    if modified.optional.entry_point_rva != record.plan.loader_rva {
        return Err(LoaderError::RecordMismatch(format!(
            "entry point {:#010x} does not target the recorded loader at {:#010x}",
            modified.optional.entry_point_rva, record.plan.loader_rva
        )));
    }
    if modified.optional.image_base != record.image_base {
        return Err(LoaderError::RecordMismatch(format!(
            "image base {:#010x} differs from recorded {:#010x}",
            modified.optional.image_base, record.image_base
        )));
    }
    let mut map = map_image(modified)?;
    let start = record.image_base + record.plan.loader_rva;
    let cap = record.plan.cave_size as usize * 5 + 64;
    let next = execute(&mut map, start, cap)?;
    Ok((map, next))
}

/// Outcome of checking that the rewritten image restores itself.
/// Failures are report entries, not errors, so a failing check still
/// yields the full picture.
#[derive(Debug, Clone, Serialize)]
pub struct RestorationReport {
    /// All checks below passed.
    pub pass: bool,
    /// Post-run memory matches the original mapping on every compared address.
    pub restored_content_matches: bool,
    /// The stub handed control to the original entry point.
    pub control_transfer_ok: bool,
    pub expected_entry_va: u32,
    pub observed_entry_va: Option<u32>,
    /// RVAs that failed comparison (capped at 32 entries).
    pub mismatched_rvas: Vec<u32>,
    pub mismatch_count: usize,
    /// RVA range occupied by the loader reservation, excluded from the
    /// content comparison.
    pub loader_span: (u32, u32),
    pub loader_span_note: String,
    pub stub_size: usize,
    pub reservation: u32,
    pub emulation_error: Option<String>,
}

/// Emulate the loader inside `modified` and compare the result against
/// `original`'s in-memory layout.
///
/// Compared domain: every address the original image maps, from the end
/// of the header region up to the original `size_of_image`, except the
/// loader reservation span. Headers are excluded because the rewrite
/// changes them on purpose (entry point, two characteristics bits, and
/// the last section's size bookkeeping); the reservation is excluded
/// because the code bytes that lived there are overwritten by the stub
/// and are not parked anywhere.
pub fn verify_restoration(
    original: &PeImage,
    modified: &PeImage,
    record: &CaveRecord,
) -> RestorationReport {
    let loader_span = (
        record.plan.loader_rva,
        record.plan.loader_rva + record.plan.reservation,
    );
    let mut report = RestorationReport {
        pass: false,
        restored_content_matches: false,
        control_transfer_ok: false,
        expected_entry_va: record.image_base + record.original_entry_rva,
        observed_entry_va: None,
        mismatched_rvas: Vec::new(),
        mismatch_count: 0,
        loader_span,
        loader_span_note: format!(
            "rvas [{:#x}, {:#x}) hold the loader stub; the code displaced by it is \
             overwritten, not parked, so the span is excluded from comparison",
            loader_span.0, loader_span.1
        ),
        stub_size: STUB_SIZE,
        reservation: record.plan.reservation,
        emulation_error: None,
    };

    let original_map = match map_image(original) {
        Ok(m) => m,
        Err(e) => {
            report.emulation_error = Some(format!("could not map original image: {e}"));
            return report;
        }
    };
    let (restored, next) = match emulate_loader(modified, record) {
        Ok(r) => r,
        Err(e) => {
            report.emulation_error = Some(e.to_string());
            return report;
        }
    };
    report.observed_entry_va = Some(next);
    report.control_transfer_ok = next == report.expected_entry_va;

    let start = original.optional.size_of_headers as usize;
    let end = original_map.len().min(restored.len());
    for rva in start..end {
        if (rva as u32) >= loader_span.0 && (rva as u32) < loader_span.1 {
            continue;
        }
        if original_map.bytes[rva] != restored.bytes[rva] {
            report.mismatch_count += 1;
            if report.mismatched_rvas.len() < 32 {
                report.mismatched_rvas.push(rva as u32);
            }
        }
    }
    report.restored_content_matches = report.mismatch_count == 0 && end >= original_map.len();
    report.pass = report.restored_content_matches && report.control_transfer_ok;
    report
}

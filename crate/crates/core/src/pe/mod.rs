//! PE32 parsing, validation, and byte-exact re-serialization.
//!
//! Only the pieces the rewriting pipeline needs are interpreted: the DOS
//! header, the COFF header, the PE32 optional header, and the section
//! table. Data directories and the DOS stub ride along as opaque bytes,
//! and trailing data past the last section (the overlay) is preserved
//! verbatim. An unmodified image serializes back to its exact source
//! bytes.
//!
//! File layout handled here:
//!
//! ```text
//! +--------------------+ 0
//! | DOS header (64)    |  magic "MZ", e_lfanew at offset 60
//! +--------------------+ 64
//! | DOS stub           |  opaque, may be empty
//! +--------------------+ e_lfanew
//! | "PE\0\0"           |
//! | COFF header (20)   |
//! | optional header    |  PE32 fields + opaque data directories
//! | section table      |  40 bytes per section
//! +--------------------+
//! | section raw data   |  at pointer_to_raw_data, file-aligned
//! | ...                |
//! +--------------------+
//! | overlay            |  bytes past the last raw section end
//! +--------------------+
//! ```
//!
//! `PeImage` values are treated as immutable: every mutation-shaped
//! operation returns a new image and leaves the receiver untouched.

mod build;

pub use build::{PeBuilder, SectionSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DOS_HEADER_SIZE: usize = 64;
pub const PE_SIGNATURE: [u8; 4] = *b"PE\0\0";
pub const COFF_HEADER_SIZE: usize = 20;
/// PE32 optional header size up to (not including) the data directories.
pub const OPTIONAL_HEADER_FIXED_SIZE: usize = 96;
pub const SECTION_HEADER_SIZE: usize = 40;

pub const DOS_MAGIC: u16 = 0x5A4D; // "MZ"
pub const PE32_MAGIC: u16 = 0x010B;
pub const PE32_PLUS_MAGIC: u16 = 0x020B;
pub const IMAGE_FILE_MACHINE_I386: u16 = 0x014C;

pub const IMAGE_FILE_RELOCS_STRIPPED: u16 = 0x0001;
pub const IMAGE_FILE_EXECUTABLE_IMAGE: u16 = 0x0002;
pub const IMAGE_FILE_32BIT_MACHINE: u16 = 0x0100;

pub const IMAGE_DLLCHARACTERISTICS_DYNAMIC_BASE: u16 = 0x0040;
pub const IMAGE_DLLCHARACTERISTICS_NX_COMPAT: u16 = 0x0100;

pub const IMAGE_SCN_CNT_CODE: u32 = 0x0000_0020;
pub const IMAGE_SCN_CNT_INITIALIZED_DATA: u32 = 0x0000_0040;
pub const IMAGE_SCN_MEM_EXECUTE: u32 = 0x2000_0000;
pub const IMAGE_SCN_MEM_READ: u32 = 0x4000_0000;
pub const IMAGE_SCN_MEM_WRITE: u32 = 0x8000_0000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PeError {
    #[error("missing MZ signature")]
    MissingMzSignature,
    #[error("missing PE signature")]
    MissingPeSignature,
    #[error("truncated header: {0}")]
    TruncatedHeader(&'static str),
    #[error("section {name} raw data [{start:#x}, {end:#x}) extends past end of file")]
    TruncatedSection { name: String, start: u32, end: u32 },
    #[error("raw data of sections {a} and {b} overlap")]
    OverlappingSections { a: String, b: String },
    #[error("unsupported machine or format magic {0:#06x}")]
    UnsupportedMachine(u16),
    #[error("alignment violation: {0}")]
    AlignmentViolation(String),
    #[error("rva {0:#010x} is not backed by any section's raw data")]
    UnmappedRva(u32),
    #[error("unknown section {0:?}")]
    UnknownSection(String),
    #[error("flag value {0:#x} is not a single bit")]
    InvalidFlagBit(u32),
    #[error("invalid image: {0}")]
    InvalidImage(String),
}

/// Round `v` up to the next multiple of `align` (`align` must be a power of two).
pub fn align_up(v: u32, align: u32) -> u32 {
    debug_assert!(align.is_power_of_two());
    v.checked_add(align - 1).expect("alignment overflow") & !(align - 1)
}

/// The fixed 64-byte DOS header plus the stub that runs up to the PE signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DosHeader {
    pub magic: u16,
    /// Bytes 2..60 of the header, kept verbatim (checksum, relocation
    /// table pointer, and friends are irrelevant to the loader).
    pub reserved: [u8; 58],
    /// File offset of the PE signature.
    pub e_lfanew: u32,
    /// Bytes between the 64-byte header and the PE signature.
    pub stub: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoffHeader {
    pub machine: u16,
    pub number_of_sections: u16,
    pub time_date_stamp: u32,
    pub pointer_to_symbol_table: u32,
    pub number_of_symbols: u32,
    pub size_of_optional_header: u16,
    pub characteristics: u16,
}

/// PE32 optional header. Interpreted fields are explicit; the data
/// directories (and anything past them) are carried opaquely in
/// `directories`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptionalHeader {
    pub magic: u16,
    pub linker_version: (u8, u8),
    pub size_of_code: u32,
    pub size_of_initialized_data: u32,
    pub size_of_uninitialized_data: u32,
    pub entry_point_rva: u32,
    pub base_of_code: u32,
    pub base_of_data: u32,
    pub image_base: u32,
    pub section_alignment: u32,
    pub file_alignment: u32,
    pub os_version: (u16, u16),
    pub image_version: (u16, u16),
    pub subsystem_version: (u16, u16),
    pub win32_version: u32,
    pub size_of_image: u32,
    pub size_of_headers: u32,
    pub checksum: u32,
    pub subsystem: u16,
    pub dll_characteristics: u16,
    pub size_of_stack_reserve: u32,
    pub size_of_stack_commit: u32,
    pub size_of_heap_reserve: u32,
    pub size_of_heap_commit: u32,
    pub loader_flags: u32,
    pub number_of_rva_and_sizes: u32,
    /// Data directories and any optional-header tail, verbatim.
    pub directories: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionHeader {
    pub name: [u8; 8],
    pub virtual_size: u32,
    pub virtual_address: u32,
    pub size_of_raw_data: u32,
    pub pointer_to_raw_data: u32,
    pub pointer_to_relocations: u32,
    pub pointer_to_line_numbers: u32,
    pub number_of_relocations: u16,
    pub number_of_line_numbers: u16,
    pub characteristics: u32,
}

impl SectionHeader {
    /// Section name with trailing NULs stripped.
    pub fn name_str(&self) -> String {
        let end = self.name.iter().position(|&b| b == 0).unwrap_or(8);
        String::from_utf8_lossy(&self.name[..end]).into_owned()
    }

    /// Length of the section's loader-visible content: raw bytes past
    /// `virtual_size` are disk padding and are never mapped.
    pub fn mapped_len(&self) -> u32 {
        self.virtual_size.min(self.size_of_raw_data)
    }
}

/// A section header together with its raw file bytes
/// (`data.len() == size_of_raw_data`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub header: SectionHeader,
    pub data: Vec<u8>,
}

/// A run of non-zero file bytes not covered by headers, section data, or
/// the overlay (all-zero padding runs are dropped; serialization
/// zero-fills them back).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gap {
    pub offset: usize,
    pub bytes: Vec<u8>,
}

/// Which header word a flag operation addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlagSite<'a> {
    CoffCharacteristics,
    DllCharacteristics,
    Section(&'a str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeImage {
    pub dos: DosHeader,
    pub coff: CoffHeader,
    pub optional: OptionalHeader,
    pub sections: Vec<Section>,
    pub gaps: Vec<Gap>,
    pub overlay: Vec<u8>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], pos: usize) -> Self {
        Reader { bytes, pos }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], PeError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(PeError::TruncatedHeader(what))?;
        if end > self.bytes.len() {
            return Err(PeError::TruncatedHeader(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, PeError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, PeError> {
        let s = self.take(2, what)?;
        Ok(u16::from_le_bytes([s[0], s[1]]))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, PeError> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
    }
}

impl PeImage {
    /// Parse a PE32 image from raw file bytes.
    pub fn parse(bytes: &[u8]) -> Result<PeImage, PeError> {
        if bytes.len() < 2 || bytes[0..2] != [0x4D, 0x5A] {
            return Err(PeError::MissingMzSignature);
        }
        if bytes.len() < DOS_HEADER_SIZE {
            return Err(PeError::TruncatedHeader("DOS header"));
        }
        let mut reserved = [0u8; 58];
        reserved.copy_from_slice(&bytes[2..60]);
        let e_lfanew = u32::from_le_bytes([bytes[60], bytes[61], bytes[62], bytes[63]]);
        let sig_off = e_lfanew as usize;
        if sig_off < DOS_HEADER_SIZE {
            return Err(PeError::InvalidImage(
                "e_lfanew points inside the DOS header".into(),
            ));
        }
        if sig_off + 4 > bytes.len() || bytes[sig_off..sig_off + 4] != PE_SIGNATURE {
            return Err(PeError::MissingPeSignature);
        }
        let dos = DosHeader {
            magic: DOS_MAGIC,
            reserved,
            e_lfanew,
            stub: bytes[DOS_HEADER_SIZE..sig_off].to_vec(),
        };

        let mut r = Reader::new(bytes, sig_off + 4);
        let coff = CoffHeader {
            machine: r.u16("COFF header")?,
            number_of_sections: r.u16("COFF header")?,
            time_date_stamp: r.u32("COFF header")?,
            pointer_to_symbol_table: r.u32("COFF header")?,
            number_of_symbols: r.u32("COFF header")?,
            size_of_optional_header: r.u16("COFF header")?,
            characteristics: r.u16("COFF header")?,
        };
        if coff.machine != IMAGE_FILE_MACHINE_I386 {
            return Err(PeError::UnsupportedMachine(coff.machine));
        }
        if (coff.size_of_optional_header as usize) < OPTIONAL_HEADER_FIXED_SIZE {
            return Err(PeError::TruncatedHeader("optional header"));
        }

        let opt_start = r.pos;
        let magic = r.u16("optional header")?;
        if magic != PE32_MAGIC {
            // PE32+ and anything else land here; only 32-bit images are handled.
            return Err(PeError::UnsupportedMachine(magic));
        }
        let optional = OptionalHeader {
            magic,
            linker_version: (r.u8("optional header")?, r.u8("optional header")?),
            size_of_code: r.u32("optional header")?,
            size_of_initialized_data: r.u32("optional header")?,
            size_of_uninitialized_data: r.u32("optional header")?,
            entry_point_rva: r.u32("optional header")?,
            base_of_code: r.u32("optional header")?,
            base_of_data: r.u32("optional header")?,
            image_base: r.u32("optional header")?,
            section_alignment: r.u32("optional header")?,
            file_alignment: r.u32("optional header")?,
            os_version: (r.u16("optional header")?, r.u16("optional header")?),
            image_version: (r.u16("optional header")?, r.u16("optional header")?),
            subsystem_version: (r.u16("optional header")?, r.u16("optional header")?),
            win32_version: r.u32("optional header")?,
            size_of_image: r.u32("optional header")?,
            size_of_headers: r.u32("optional header")?,
            checksum: r.u32("optional header")?,
            subsystem: r.u16("optional header")?,
            dll_characteristics: r.u16("optional header")?,
            size_of_stack_reserve: r.u32("optional header")?,
            size_of_stack_commit: r.u32("optional header")?,
            size_of_heap_reserve: r.u32("optional header")?,
            size_of_heap_commit: r.u32("optional header")?,
            loader_flags: r.u32("optional header")?,
            number_of_rva_and_sizes: r.u32("optional header")?,
            directories: r
                .take(
                    coff.size_of_optional_header as usize - OPTIONAL_HEADER_FIXED_SIZE,
                    "data directories",
                )?
                .to_vec(),
        };
        debug_assert_eq!(r.pos, opt_start + coff.size_of_optional_header as usize);
        if !optional.file_alignment.is_power_of_two()
            || !optional.section_alignment.is_power_of_two()
        {
            return Err(PeError::AlignmentViolation(format!(
                "alignments must be powers of two (file {:#x}, section {:#x})",
                optional.file_alignment, optional.section_alignment
            )));
        }

        let mut sections = Vec::with_capacity(coff.number_of_sections as usize);
        for _ in 0..coff.number_of_sections {
            let mut name = [0u8; 8];
            name.copy_from_slice(r.take(8, "section table")?);
            let header = SectionHeader {
                name,
                virtual_size: r.u32("section table")?,
                virtual_address: r.u32("section table")?,
                size_of_raw_data: r.u32("section table")?,
                pointer_to_raw_data: r.u32("section table")?,
                pointer_to_relocations: r.u32("section table")?,
                pointer_to_line_numbers: r.u32("section table")?,
                number_of_relocations: r.u16("section table")?,
                number_of_line_numbers: r.u16("section table")?,
                characteristics: r.u32("section table")?,
            };
            let start = header.pointer_to_raw_data as usize;
            let end = start + header.size_of_raw_data as usize;
            let data = if header.size_of_raw_data == 0 {
                Vec::new()
            } else if end > bytes.len() {
                return Err(PeError::TruncatedSection {
                    name: header.name_str(),
                    start: header.pointer_to_raw_data,
                    end: end as u32,
                });
            } else {
                bytes[start..end].to_vec()
            };
            sections.push(Section { header, data });
        }
        let headers_end = r.pos;

        // Raw spans must be pairwise disjoint and must not reach back into
        // the headers.
        let mut spans: Vec<(usize, usize, usize)> = sections
            .iter()
            .enumerate()
            .filter(|(_, s)| s.header.size_of_raw_data > 0)
            .map(|(i, s)| {
                (
                    s.header.pointer_to_raw_data as usize,
                    s.header.pointer_to_raw_data as usize + s.header.size_of_raw_data as usize,
                    i,
                )
            })
            .collect();
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(PeError::OverlappingSections {
                    a: sections[w[0].2].header.name_str(),
                    b: sections[w[1].2].header.name_str(),
                });
            }
        }
        if let Some(&(start, _, i)) = spans.first() {
            if start < headers_end {
                return Err(PeError::InvalidImage(format!(
                    "section {} raw data starts inside the headers",
                    sections[i].header.name_str()
                )));
            }
        }

        // Everything between covered spans that is not all zero must be
        // kept so serialization can reproduce the file byte for byte.
        let mut gaps = Vec::new();
        let mut cursor = headers_end;
        for &(start, end, _) in &spans {
            if start > cursor && bytes[cursor..start].iter().any(|&b| b != 0) {
                gaps.push(Gap {
                    offset: cursor,
                    bytes: bytes[cursor..start].to_vec(),
                });
            }
            cursor = cursor.max(end);
        }
        let overlay = bytes[cursor..].to_vec();

        let image = PeImage {
            dos,
            coff,
            optional,
            sections,
            gaps,
            overlay,
        };
        image.validate_virtual_layout()?;
        Ok(image)
    }

    /// Serialize back to file bytes. The layout is fully determined by the
    /// headers, so an unmodified image reproduces its source bytes exactly.
    pub fn to_bytes(&self) -> Result<Vec<u8>, PeError> {
        let fa = self.optional.file_alignment;
        if !fa.is_power_of_two() || !self.optional.section_alignment.is_power_of_two() {
            return Err(PeError::AlignmentViolation(
                "alignments must be powers of two".into(),
            ));
        }
        for s in &self.sections {
            if s.header.size_of_raw_data % fa != 0 {
                return Err(PeError::AlignmentViolation(format!(
                    "section {} raw size {:#x} is not a multiple of file alignment {:#x}",
                    s.header.name_str(),
                    s.header.size_of_raw_data,
                    fa
                )));
            }
            if s.header.size_of_raw_data > 0 && s.header.pointer_to_raw_data % fa != 0 {
                return Err(PeError::AlignmentViolation(format!(
                    "section {} raw offset {:#x} is not a multiple of file alignment {:#x}",
                    s.header.name_str(),
                    s.header.pointer_to_raw_data,
                    fa
                )));
            }
            if s.data.len() != s.header.size_of_raw_data as usize {
                return Err(PeError::InvalidImage(format!(
                    "section {} carries {} data bytes but declares {:#x}",
                    s.header.name_str(),
                    s.data.len(),
                    s.header.size_of_raw_data
                )));
            }
        }
        if self.coff.number_of_sections as usize != self.sections.len() {
            return Err(PeError::InvalidImage(
                "number_of_sections disagrees with the section table".into(),
            ));
        }
        self.validate_virtual_layout()?;

        let headers_end = self.headers_span();
        let mut end = headers_end;
        for s in &self.sections {
            if s.header.size_of_raw_data > 0 {
                end = end.max(
                    s.header.pointer_to_raw_data as usize + s.header.size_of_raw_data as usize,
                );
            }
        }
        for g in &self.gaps {
            end = end.max(g.offset + g.bytes.len());
        }

        let mut out = vec![0u8; end];
        out[0..2].copy_from_slice(&self.dos.magic.to_le_bytes());
        out[2..60].copy_from_slice(&self.dos.reserved);
        out[60..64].copy_from_slice(&self.dos.e_lfanew.to_le_bytes());
        out[64..64 + self.dos.stub.len()].copy_from_slice(&self.dos.stub);

        let sig = self.dos.e_lfanew as usize;
        out[sig..sig + 4].copy_from_slice(&PE_SIGNATURE);
        let mut w = Writer {
            out: &mut out,
            pos: sig + 4,
        };
        w.u16(self.coff.machine);
        w.u16(self.coff.number_of_sections);
        w.u32(self.coff.time_date_stamp);
        w.u32(self.coff.pointer_to_symbol_table);
        w.u32(self.coff.number_of_symbols);
        w.u16(self.coff.size_of_optional_header);
        w.u16(self.coff.characteristics);

        let o = &self.optional;
        w.u16(o.magic);
        w.u8(o.linker_version.0);
        w.u8(o.linker_version.1);
        w.u32(o.size_of_code);
        w.u32(o.size_of_initialized_data);
        w.u32(o.size_of_uninitialized_data);
        w.u32(o.entry_point_rva);
        w.u32(o.base_of_code);
        w.u32(o.base_of_data);
        w.u32(o.image_base);
        w.u32(o.section_alignment);
        w.u32(o.file_alignment);
        w.u16(o.os_version.0);
        w.u16(o.os_version.1);
        w.u16(o.image_version.0);
        w.u16(o.image_version.1);
        w.u16(o.subsystem_version.0);
        w.u16(o.subsystem_version.1);
        w.u32(o.win32_version);
        w.u32(o.size_of_image);
        w.u32(o.size_of_headers);
        w.u32(o.checksum);
        w.u16(o.subsystem);
        w.u16(o.dll_characteristics);
        w.u32(o.size_of_stack_reserve);
        w.u32(o.size_of_stack_commit);
        w.u32(o.size_of_heap_reserve);
        w.u32(o.size_of_heap_commit);
        w.u32(o.loader_flags);
        w.u32(o.number_of_rva_and_sizes);
        w.bytes(&o.directories);

        for s in &self.sections {
            w.bytes(&s.header.name);
            w.u32(s.header.virtual_size);
            w.u32(s.header.virtual_address);
            w.u32(s.header.size_of_raw_data);
            w.u32(s.header.pointer_to_raw_data);
            w.u32(s.header.pointer_to_relocations);
            w.u32(s.header.pointer_to_line_numbers);
            w.u16(s.header.number_of_relocations);
            w.u16(s.header.number_of_line_numbers);
            w.u32(s.header.characteristics);
        }
        debug_assert_eq!(w.pos, headers_end);

        for g in &self.gaps {
            out[g.offset..g.offset + g.bytes.len()].copy_from_slice(&g.bytes);
        }
        for s in &self.sections {
            let start = s.header.pointer_to_raw_data as usize;
            out[start..start + s.data.len()].copy_from_slice(&s.data);
        }
        out.extend_from_slice(&self.overlay);
        Ok(out)
    }

    /// Offset of the end of the section table (start of raw data space).
    pub fn headers_span(&self) -> usize {
        self.dos.e_lfanew as usize
            + 4
            + COFF_HEADER_SIZE
            + self.coff.size_of_optional_header as usize
            + self.sections.len() * SECTION_HEADER_SIZE
    }

    fn validate_virtual_layout(&self) -> Result<(), PeError> {
        for s in &self.sections {
            let span = align_up(
                s.header.virtual_size.max(s.header.size_of_raw_data),
                self.optional.section_alignment,
            );
            let end = s.header.virtual_address.checked_add(span).ok_or_else(|| {
                PeError::InvalidImage(format!(
                    "section {} virtual span overflows",
                    s.header.name_str()
                ))
            })?;
            if end > self.optional.size_of_image {
                return Err(PeError::InvalidImage(format!(
                    "section {} ends at rva {:#x}, past size_of_image {:#x}",
                    s.header.name_str(),
                    end,
                    self.optional.size_of_image
                )));
            }
        }
        Ok(())
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.header.name_str() == name)
    }

    pub fn section_index(&self, name: &str) -> Option<usize> {
        self.sections
            .iter()
            .position(|s| s.header.name_str() == name)
    }

    /// Translate an RVA to a file offset through the section that backs it
    /// with raw data: `offset = pointer_to_raw_data + (rva - virtual_address)`.
    /// Addresses outside every disk-backed span (headers, section slack
    /// past the raw data, unmapped gaps) have no file offset.
    pub fn rva_to_offset(&self, rva: u32) -> Result<u32, PeError> {
        for s in &self.sections {
            let va = s.header.virtual_address;
            if rva >= va && rva - va < s.header.size_of_raw_data {
                return Ok(s.header.pointer_to_raw_data + (rva - va));
            }
        }
        Err(PeError::UnmappedRva(rva))
    }

    /// Inverse of [`rva_to_offset`](Self::rva_to_offset) over the same
    /// disk-backed spans.
    pub fn offset_to_rva(&self, offset: u32) -> Result<u32, PeError> {
        for s in &self.sections {
            let start = s.header.pointer_to_raw_data;
            if offset >= start && offset - start < s.header.size_of_raw_data {
                return Ok(s.header.virtual_address + (offset - start));
            }
        }
        Err(PeError::UnmappedRva(offset))
    }

    /// Return a copy of the image with one flag bit set or cleared.
    /// Exactly one bit of exactly one header word changes (or none, when
    /// the bit already has the requested state).
    pub fn set_flag(&self, site: FlagSite<'_>, bit: u32, on: bool) -> Result<PeImage, PeError> {
        if bit.count_ones() != 1 {
            return Err(PeError::InvalidFlagBit(bit));
        }
        let mut image = self.clone();
        match site {
            FlagSite::CoffCharacteristics => {
                if bit > u16::MAX as u32 {
                    return Err(PeError::InvalidFlagBit(bit));
                }
                apply16(&mut image.coff.characteristics, bit as u16, on);
            }
            FlagSite::DllCharacteristics => {
                if bit > u16::MAX as u32 {
                    return Err(PeError::InvalidFlagBit(bit));
                }
                apply16(&mut image.optional.dll_characteristics, bit as u16, on);
            }
            FlagSite::Section(name) => {
                let idx = image
                    .section_index(name)
                    .ok_or_else(|| PeError::UnknownSection(name.to_string()))?;
                let chars = &mut image.sections[idx].header.characteristics;
                if on {
                    *chars |= bit;
                } else {
                    *chars &= !bit;
                }
            }
        }
        Ok(image)
    }
}

fn apply16(word: &mut u16, bit: u16, on: bool) {
    if on {
        *word |= bit;
    } else {
        *word &= !bit;
    }
}

struct Writer<'a> {
    out: &'a mut [u8],
    pos: usize,
}

impl Writer<'_> {
    fn u8(&mut self, v: u8) {
        self.out[self.pos] = v;
        self.pos += 1;
    }

    fn u16(&mut self, v: u16) {
        self.out[self.pos..self.pos + 2].copy_from_slice(&v.to_le_bytes());
        self.pos += 2;
    }

    fn u32(&mut self, v: u32) {
        self.out[self.pos..self.pos + 4].copy_from_slice(&v.to_le_bytes());
        self.pos += 4;
    }

    fn bytes(&mut self, v: &[u8]) {
        self.out[self.pos..self.pos + v.len()].copy_from_slice(v);
        self.pos += v.len();
    }
}

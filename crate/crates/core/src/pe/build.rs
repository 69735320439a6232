//! Construction of well-formed synthetic PE32 images.
//!
//! The builder lays sections out the way a conventional linker would:
//! file-aligned raw data packed back to back after the headers,
//! section-aligned virtual addresses in table order, and header size
//! fields derived from the layout. It exists so tests and the corpus
//! generator can assemble images instead of hand-packing byte buffers.

use super::{
    align_up, CoffHeader, DosHeader, OptionalHeader, PeError, PeImage, Section, SectionHeader,
    COFF_HEADER_SIZE, DOS_HEADER_SIZE, DOS_MAGIC, IMAGE_DLLCHARACTERISTICS_DYNAMIC_BASE,
    IMAGE_DLLCHARACTERISTICS_NX_COMPAT, IMAGE_FILE_32BIT_MACHINE, IMAGE_FILE_EXECUTABLE_IMAGE,
    IMAGE_FILE_MACHINE_I386, IMAGE_SCN_CNT_CODE, IMAGE_SCN_MEM_EXECUTE, PE32_MAGIC,
    SECTION_HEADER_SIZE,
};

/// One section to be laid out, before any alignment is applied.
#[derive(Debug, Clone)]
pub struct SectionSpec {
    pub name: String,
    pub data: Vec<u8>,
    pub characteristics: u32,
    /// Loader-visible size. Defaults to `data.len()`; may be smaller
    /// (trailing raw bytes become unmapped disk padding) or larger
    /// (zero-filled tail, bss style).
    pub virtual_size: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct PeBuilder {
    file_alignment: u32,
    section_alignment: u32,
    image_base: u32,
    entry_rva: Option<u32>,
    dll_characteristics: u16,
    subsystem: u16,
    sections: Vec<SectionSpec>,
    overlay: Vec<u8>,
    dos_stub: Vec<u8>,
}

impl Default for PeBuilder {
    fn default() -> Self {
        PeBuilder {
            file_alignment: 0x200,
            section_alignment: 0x1000,
            image_base: 0x0040_0000,
            entry_rva: None,
            // ASLR opted in by default so that rewrites which strip it are
            // observable.
            dll_characteristics: IMAGE_DLLCHARACTERISTICS_DYNAMIC_BASE
                | IMAGE_DLLCHARACTERISTICS_NX_COMPAT,
            subsystem: 3, // console
            sections: Vec::new(),
            overlay: Vec::new(),
            dos_stub: Vec::new(),
        }
    }
}

impl PeBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alignments(mut self, file_alignment: u32, section_alignment: u32) -> Self {
        self.file_alignment = file_alignment;
        self.section_alignment = section_alignment;
        self
    }

    pub fn image_base(mut self, base: u32) -> Self {
        self.image_base = base;
        self
    }

    pub fn entry_rva(mut self, rva: u32) -> Self {
        self.entry_rva = Some(rva);
        self
    }

    pub fn dll_characteristics(mut self, flags: u16) -> Self {
        self.dll_characteristics = flags;
        self
    }

    pub fn dos_stub(mut self, stub: Vec<u8>) -> Self {
        self.dos_stub = stub;
        self
    }

    pub fn section(self, name: &str, data: Vec<u8>, characteristics: u32) -> Self {
        self.section_spec(SectionSpec {
            name: name.to_string(),
            data,
            characteristics,
            virtual_size: None,
        })
    }

    pub fn section_spec(mut self, spec: SectionSpec) -> Self {
        self.sections.push(spec);
        self
    }

    pub fn overlay(mut self, overlay: Vec<u8>) -> Self {
        self.overlay = overlay;
        self
    }

    pub fn build(self) -> Result<PeImage, PeError> {
        if self.sections.is_empty() {
            return Err(PeError::InvalidImage(
                "image needs at least one section".into(),
            ));
        }
        if !self.file_alignment.is_power_of_two() || !self.section_alignment.is_power_of_two() {
            return Err(PeError::AlignmentViolation(
                "alignments must be powers of two".into(),
            ));
        }
        if self.section_alignment < self.file_alignment {
            return Err(PeError::AlignmentViolation(
                "section alignment below file alignment".into(),
            ));
        }

        let e_lfanew = (DOS_HEADER_SIZE + self.dos_stub.len()) as u32;
        let opt_size = (super::OPTIONAL_HEADER_FIXED_SIZE + 16 * 8) as u16;
        let headers_end = e_lfanew as usize
            + 4
            + COFF_HEADER_SIZE
            + opt_size as usize
            + self.sections.len() * SECTION_HEADER_SIZE;
        // Conventional images reserve at least 0x400 bytes of header space;
        // keeping that floor also keeps raw offsets stable across small
        // section-count changes.
        let size_of_headers = align_up(headers_end as u32, self.file_alignment)
            .max(align_up(0x400, self.file_alignment));

        let mut raw_cursor = size_of_headers;
        let mut va_cursor = align_up(size_of_headers.max(1), self.section_alignment);
        let mut sections = Vec::with_capacity(self.sections.len());
        let mut size_of_code = 0u32;
        let mut size_of_initialized_data = 0u32;
        let mut base_of_code = 0u32;
        let mut base_of_data = 0u32;
        for spec in &self.sections {
            let mut name = [0u8; 8];
            let raw_name = spec.name.as_bytes();
            if raw_name.len() > 8 {
                return Err(PeError::InvalidImage(format!(
                    "section name {:?} longer than 8 bytes",
                    spec.name
                )));
            }
            name[..raw_name.len()].copy_from_slice(raw_name);

            let mut data = spec.data.clone();
            let raw_size = align_up(data.len() as u32, self.file_alignment);
            data.resize(raw_size as usize, 0);
            let virtual_size = spec.virtual_size.unwrap_or(spec.data.len() as u32).max(1);

            if spec.characteristics & IMAGE_SCN_CNT_CODE != 0 {
                size_of_code += raw_size;
                if base_of_code == 0 {
                    base_of_code = va_cursor;
                }
            } else {
                size_of_initialized_data += raw_size;
                if base_of_data == 0 {
                    base_of_data = va_cursor;
                }
            }

            sections.push(Section {
                header: SectionHeader {
                    name,
                    virtual_size,
                    virtual_address: va_cursor,
                    size_of_raw_data: raw_size,
                    pointer_to_raw_data: if raw_size == 0 { 0 } else { raw_cursor },
                    pointer_to_relocations: 0,
                    pointer_to_line_numbers: 0,
                    number_of_relocations: 0,
                    number_of_line_numbers: 0,
                    characteristics: spec.characteristics,
                },
                data,
            });
            raw_cursor += raw_size;
            va_cursor = align_up(
                va_cursor + virtual_size.max(raw_size),
                self.section_alignment,
            );
        }
        let size_of_image = va_cursor;

        let entry_point_rva = self.entry_rva.unwrap_or_else(|| {
            let code = sections
                .iter()
                .find(|s| s.header.characteristics & IMAGE_SCN_MEM_EXECUTE != 0)
                .unwrap_or(&sections[0]);
            let off = 0x10.min(code.header.mapped_len().saturating_sub(1));
            code.header.virtual_address + off
        });

        let image = PeImage {
            dos: DosHeader {
                magic: DOS_MAGIC,
                reserved: [0u8; 58],
                e_lfanew,
                stub: self.dos_stub,
            },
            coff: CoffHeader {
                machine: IMAGE_FILE_MACHINE_I386,
                number_of_sections: sections.len() as u16,
                time_date_stamp: 0,
                pointer_to_symbol_table: 0,
                number_of_symbols: 0,
                size_of_optional_header: opt_size,
                characteristics: IMAGE_FILE_EXECUTABLE_IMAGE | IMAGE_FILE_32BIT_MACHINE,
            },
            optional: OptionalHeader {
                magic: PE32_MAGIC,
                linker_version: (14, 0),
                size_of_code,
                size_of_initialized_data,
                size_of_uninitialized_data: 0,
                entry_point_rva,
                base_of_code,
                base_of_data,
                image_base: self.image_base,
                section_alignment: self.section_alignment,
                file_alignment: self.file_alignment,
                os_version: (6, 0),
                image_version: (0, 0),
                subsystem_version: (6, 0),
                win32_version: 0,
                size_of_image,
                size_of_headers,
                checksum: 0,
                subsystem: self.subsystem,
                dll_characteristics: self.dll_characteristics,
                size_of_stack_reserve: 0x0010_0000,
                size_of_stack_commit: 0x1000,
                size_of_heap_reserve: 0x0010_0000,
                size_of_heap_commit: 0x1000,
                loader_flags: 0,
                number_of_rva_and_sizes: 16,
                directories: vec![0u8; 16 * 8],
            },
            sections,
            gaps: Vec::new(),
            overlay: self.overlay,
        };
        // Fail fast if the layout above ever violates the parser's rules.
        debug_assert_eq!(PeImage::parse(&image.to_bytes()?).as_ref(), Ok(&image));
        Ok(image)
    }
}

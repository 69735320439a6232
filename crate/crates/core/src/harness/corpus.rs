//! Synthetic two-class PE corpus.
//!
//! Real malware corpora are out of the question for a test suite, so
//! campaigns run on generated PE32 files whose classes are separable by
//! construction: every section of a benign file is tiled with motifs
//! drawn from 0x01..=0x7F, every section of a malicious file with
//! motifs from 0x80..=0xFE. A small per-class motif pool is shared by
//! the whole corpus, so a held-out split only contains byte patterns a
//! training split has seen.
//!
//! Layout is realistic enough for the rewriting pipeline: four named
//! sections with drawn size proportions, raw sizes kept multiples of
//! the file alignment so every content byte is loader-visible, and the
//! resource section last so it can host displaced cave bytes.

use super::HarnessError;
use crate::malconv::Sample;
use crate::pe::{
    PeBuilder, PeImage, IMAGE_SCN_CNT_CODE, IMAGE_SCN_CNT_INITIALIZED_DATA, IMAGE_SCN_MEM_EXECUTE,
    IMAGE_SCN_MEM_READ, IMAGE_SCN_MEM_WRITE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// File-alignment unit all generated sizes are multiples of.
const UNIT: usize = 0x200;
/// Header region of every generated file (two units).
const HEADER_UNITS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malicious,
}

/// One corpus file as listed in `manifest.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Label,
    pub size: usize,
}

/// A manifest entry together with the file's bytes.
#[derive(Debug, Clone)]
pub struct CorpusFile {
    pub entry: ManifestEntry,
    pub bytes: Vec<u8>,
}

/// Section slot in the generated layout. Fractions bound the uniform
/// draw of the section's share of content; the last section ignores
/// them and absorbs the remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionTemplate {
    pub name: String,
    pub characteristics: u32,
    pub min_fraction: f64,
    pub max_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Files generated per class.
    pub per_class: usize,
    /// Smallest file size in bytes (rounded up to the alignment unit).
    pub min_size: usize,
    /// Largest file size in bytes (rounded down to the alignment unit).
    pub max_size: usize,
    /// Bytes per class motif.
    pub motif_len: usize,
    /// Motifs per class pool.
    pub motif_pool: usize,
    pub sections: Vec<SectionTemplate>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        let x = IMAGE_SCN_CNT_CODE | IMAGE_SCN_MEM_EXECUTE | IMAGE_SCN_MEM_READ;
        let r = IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ;
        let section = |name: &str, chars: u32, lo: f64, hi: f64| SectionTemplate {
            name: name.to_string(),
            characteristics: chars,
            min_fraction: lo,
            max_fraction: hi,
        };
        CorpusSpec {
            per_class: 100,
            min_size: 3072,
            max_size: 8192,
            motif_len: 4,
            motif_pool: 8,
            sections: vec![
                section(".text", x, 0.10, 0.45),
                section(".data", r | IMAGE_SCN_MEM_WRITE, 0.05, 0.30),
                section(".rdata", r, 0.05, 0.30),
                section(".rsrc", r, 0.0, 0.0), // remainder
            ],
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.per_class == 0 {
            return Err(HarnessError::InvalidSpec(
                "per_class must be positive".into(),
            ));
        }
        if self.sections.len() < 2 {
            return Err(HarnessError::InvalidSpec(
                "a corpus file needs at least two sections (one to host a cave, one to \
                 receive displaced bytes)"
                    .into(),
            ));
        }
        let floor = (HEADER_UNITS + self.sections.len()) * UNIT;
        if self.min_size < floor {
            return Err(HarnessError::InvalidSpec(format!(
                "min_size {} cannot fit headers plus {} sections (needs at least {floor})",
                self.min_size,
                self.sections.len()
            )));
        }
        if self.max_size < self.min_size {
            return Err(HarnessError::InvalidSpec(format!(
                "max_size {} is below min_size {}",
                self.max_size, self.min_size
            )));
        }
        if self.motif_len == 0 || self.motif_pool == 0 {
            return Err(HarnessError::InvalidSpec(
                "motif_len and motif_pool must be positive".into(),
            ));
        }
        for t in &self.sections {
            if !(0.0..=1.0).contains(&t.min_fraction)
                || !(0.0..=1.0).contains(&t.max_fraction)
                || t.min_fraction > t.max_fraction
            {
                return Err(HarnessError::InvalidSpec(format!(
                    "section {:?} has an unusable fraction span {}..{}",
                    t.name, t.min_fraction, t.max_fraction
                )));
            }
        }
        Ok(())
    }

    fn unit_span(&self) -> (usize, usize) {
        let lo = self
            .min_size
            .div_ceil(UNIT)
            .max(HEADER_UNITS + self.sections.len());
        let hi = (self.max_size / UNIT).max(lo);
        (lo, hi)
    }
}

/// Byte span motifs of one class are drawn from.
pub fn class_byte_range(label: Label) -> (u8, u8) {
    match label {
        Label::Benign => (0x01, 0x7F),
        Label::Malicious => (0x80, 0xFE),
    }
}

fn draw_pool(rng: &mut ChaCha12Rng, spec: &CorpusSpec, label: Label) -> Vec<Vec<u8>> {
    let (lo, hi) = class_byte_range(label);
    (0..spec.motif_pool)
        .map(|_| {
            (0..spec.motif_len)
                .map(|_| rng.gen_range(lo..=hi))
                .collect()
        })
        .collect()
}

fn synth_image(
    rng: &mut ChaCha12Rng,
    spec: &CorpusSpec,
    pool: &[Vec<u8>],
) -> Result<PeImage, HarnessError> {
    let (lo_units, hi_units) = spec.unit_span();
    let total_units = rng.gen_range(lo_units..=hi_units);
    let content_units = total_units - HEADER_UNITS;
    let n = spec.sections.len();

    // Apportion whole units: each of the first n-1 sections draws its
    // fraction, clamped so everyone left still gets at least one unit;
    // the last section takes the remainder.
    let mut remaining = content_units;
    let mut units = Vec::with_capacity(n);
    for (i, t) in spec.sections.iter().enumerate() {
        let left_after = n - i - 1;
        let u = if left_after == 0 {
            remaining
        } else {
            let frac = rng.gen_range(t.min_fraction..=t.max_fraction);
            let want = ((frac * content_units as f64).round() as usize).max(1);
            want.min(remaining - left_after)
        };
        units.push(u);
        remaining -= u;
    }

    let mut builder = PeBuilder::new();
    for (t, &u) in spec.sections.iter().zip(&units) {
        let motif = &pool[rng.gen_range(0..pool.len())];
        let data: Vec<u8> = (0..u * UNIT).map(|i| motif[i % motif.len()]).collect();
        builder = builder.section(&t.name, data, t.characteristics);
    }
    Ok(builder.build()?)
}

/// Generate the corpus into `out_dir`, writing one file per entry plus
/// `manifest.json`. Same spec (and seed) → byte-identical output.
pub fn gen_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>, HarnessError> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let benign_pool = draw_pool(&mut rng, spec, Label::Benign);
    let malicious_pool = draw_pool(&mut rng, spec, Label::Malicious);

    let mut entries = Vec::with_capacity(spec.per_class * 2);
    for (label, pool, stem) in [
        (Label::Benign, &benign_pool, "benign"),
        (Label::Malicious, &malicious_pool, "malicious"),
    ] {
        for i in 0..spec.per_class {
            let image = synth_image(&mut rng, spec, pool)?;
            let bytes = image.to_bytes()?;
            let path = format!("{stem}_{i:04}.exe");
            std::fs::write(out_dir.join(&path), &bytes)?;
            entries.push(ManifestEntry {
                path,
                label,
                size: bytes.len(),
            });
        }
    }
    let manifest = serde_json::to_string_pretty(&entries)?;
    std::fs::write(out_dir.join("manifest.json"), manifest)?;
    Ok(entries)
}

/// Read `manifest.json` back from a corpus directory.
pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, HarnessError> {
    let raw = std::fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| HarnessError::Manifest(format!("reading manifest.json: {e}")))?;
    serde_json::from_str(&raw)
        .map_err(|e| HarnessError::Manifest(format!("parsing manifest.json: {e}")))
}

/// Load every manifest entry's bytes.
pub fn load_corpus(dir: &Path) -> Result<Vec<CorpusFile>, HarnessError> {
    load_manifest(dir)?
        .into_iter()
        .map(|entry| {
            let bytes = std::fs::read(dir.join(&entry.path))?;
            Ok(CorpusFile { entry, bytes })
        })
        .collect()
}

/// View a corpus as labeled training samples.
pub fn to_samples(files: &[CorpusFile]) -> Vec<Sample> {
    files
        .iter()
        .map(|f| Sample {
            bytes: f.bytes.clone(),
            malicious: f.entry.label == Label::Malicious,
        })
        .collect()
}

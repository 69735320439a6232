//! Section-shape statistics over a directory of PE files.
//!
//! For every section name seen, two things are measured: how often the
//! section appears at all (presence fraction) and how its raw size
//! compares to the whole file, bucketed into 0–5%, 5–10%, 10–15%, and
//! 15%+ spans. The last bucket is the population eligible for cave
//! hosting under the 15% rule.

use super::HarnessError;
use crate::pe::PeImage;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;

/// Size-ratio bucket edges (lower bound inclusive, upper exclusive;
/// the last bucket is open-ended).
pub const RATIO_BUCKET_EDGES: [f64; 4] = [0.0, 0.05, 0.10, 0.15];
pub const RATIO_BUCKET_LABELS: [&str; 4] = ["0-5%", "5-10%", "10-15%", "15%+"];

/// Bucket index for a section-size ratio, per [`RATIO_BUCKET_EDGES`].
pub fn bucket_of(ratio: f64) -> usize {
    match ratio {
        r if r < 0.05 => 0,
        r if r < 0.10 => 1,
        r if r < 0.15 => 2,
        _ => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectionRatioStats {
    /// Fraction of parsed files that contain the section.
    pub presence_fraction: f64,
    /// Occurrences per ratio bucket.
    pub bucket_counts: [usize; 4],
    /// `bucket_counts` normalized over the section's occurrences;
    /// sums to 1 (± float noise) whenever the section appears at all.
    pub bucket_fractions: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SectionStats {
    /// Files inspected, parseable or not.
    pub files_scanned: usize,
    /// Files skipped because they failed to parse.
    pub parse_failures: usize,
    pub sections: BTreeMap<String, SectionRatioStats>,
}

impl SectionStats {
    /// Accumulate from already-parsed images.
    pub fn from_parses<'a>(parses: impl Iterator<Item = Option<&'a PeImage>>) -> SectionStats {
        let mut files_scanned = 0usize;
        let mut parse_failures = 0usize;
        let mut parsed = 0usize;
        let mut tally: BTreeMap<String, (usize, [usize; 4])> = BTreeMap::new();
        for maybe in parses {
            files_scanned += 1;
            let image = match maybe {
                Some(i) => i,
                None => {
                    parse_failures += 1;
                    continue;
                }
            };
            parsed += 1;
            let total = image.to_bytes().map(|b| b.len()).unwrap_or(0);
            if total == 0 {
                continue;
            }
            for s in &image.sections {
                let ratio = s.header.size_of_raw_data as f64 / total as f64;
                let entry = tally.entry(s.header.name_str()).or_insert((0, [0; 4]));
                entry.0 += 1;
                entry.1[bucket_of(ratio)] += 1;
            }
        }
        let sections = tally
            .into_iter()
            .map(|(name, (count, buckets))| {
                let fractions = if count == 0 {
                    [0.0; 4]
                } else {
                    buckets.map(|b| b as f64 / count as f64)
                };
                (
                    name,
                    SectionRatioStats {
                        presence_fraction: if parsed == 0 {
                            0.0
                        } else {
                            count as f64 / parsed as f64
                        },
                        bucket_counts: buckets,
                        bucket_fractions: fractions,
                    },
                )
            })
            .collect();
        SectionStats {
            files_scanned,
            parse_failures,
            sections,
        }
    }

    /// CSV projection with a fixed column order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "section,presence_fraction,bucket_0_5,bucket_5_10,bucket_10_15,bucket_15_plus\n",
        );
        for (name, s) in &self.sections {
            out.push_str(&format!(
                "{name},{},{},{},{},{}\n",
                s.presence_fraction,
                s.bucket_fractions[0],
                s.bucket_fractions[1],
                s.bucket_fractions[2],
                s.bucket_fractions[3],
            ));
        }
        out
    }
}

/// Scan a directory of PE files (non-recursive; `.json` files such as
/// corpus manifests are ignored). Unparseable files are counted and
/// excluded, never fatal.
pub fn corpus_stats(dir: &Path) -> Result<SectionStats, HarnessError> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x != "json").unwrap_or(true))
        .collect();
    names.sort();
    let parses: Vec<Option<PeImage>> = names
        .iter()
        .map(|p| std::fs::read(p).ok().and_then(|b| PeImage::parse(&b).ok()))
        .collect();
    Ok(SectionStats::from_parses(parses.iter().map(|p| p.as_ref())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pe::{
        PeBuilder, IMAGE_SCN_CNT_CODE, IMAGE_SCN_CNT_INITIALIZED_DATA, IMAGE_SCN_MEM_EXECUTE,
        IMAGE_SCN_MEM_READ,
    };

    const X: u32 = IMAGE_SCN_CNT_CODE | IMAGE_SCN_MEM_EXECUTE | IMAGE_SCN_MEM_READ;
    const R: u32 = IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ;

    /// A file whose `.text` is a chosen fraction of the whole: sizes are
    /// solved so that text / (0x400 headers + text + rest) = `frac`.
    fn image_with_text_fraction(frac: f64) -> PeImage {
        let total: usize = 0x2000;
        let text = ((total as f64 * frac) as usize / 0x200) * 0x200;
        let rest = total - 0x400 - text;
        PeBuilder::new()
            .section(".text", vec![0x41; text], X)
            .section(".rsrc", vec![0x42; rest], R)
            .build()
            .unwrap()
    }

    #[test]
    fn bucket_rule_matches_the_documented_edges() {
        assert_eq!(bucket_of(0.0), 0);
        assert_eq!(bucket_of(0.049), 0);
        assert_eq!(bucket_of(0.05), 1);
        assert_eq!(bucket_of(0.099), 1);
        assert_eq!(bucket_of(0.10), 2);
        assert_eq!(bucket_of(0.149), 2);
        assert_eq!(bucket_of(0.15), 3);
        assert_eq!(bucket_of(0.85), 3);
    }

    #[test]
    fn constructed_ratios_land_in_their_buckets_exactly() {
        // .text at 25%, 12.5%, and 6.25% of three files.
        let images = [
            image_with_text_fraction(0.25),
            image_with_text_fraction(0.125),
            image_with_text_fraction(0.0625),
        ];
        let stats = SectionStats::from_parses(images.iter().map(Some));
        let text = &stats.sections[".text"];
        assert_eq!(text.presence_fraction, 1.0);
        assert_eq!(text.bucket_counts, [0, 1, 1, 1]);
        let sum: f64 = text.bucket_fractions.iter().sum();
        assert!((sum - 1.0).abs() < 1e-3);
        // .rsrc dominates every file → all in 15%+.
        assert_eq!(stats.sections[".rsrc"].bucket_fractions[3], 1.0);
    }

    #[test]
    fn all_text_corpus_fills_the_top_bucket() {
        let images: Vec<PeImage> = (0..5).map(|_| image_with_text_fraction(0.40)).collect();
        let stats = SectionStats::from_parses(images.iter().map(Some));
        assert_eq!(
            stats.sections[".text"].bucket_fractions,
            [0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn parse_failures_are_counted_and_excluded() {
        let good = image_with_text_fraction(0.3);
        let stats = SectionStats::from_parses(vec![Some(&good), None, None].into_iter());
        assert_eq!(stats.files_scanned, 3);
        assert_eq!(stats.parse_failures, 2);
        assert_eq!(stats.sections[".text"].presence_fraction, 1.0);
    }

    #[test]
    fn directory_scan_ignores_manifests_and_junk() {
        let dir = tempfile::tempdir().unwrap();
        let image = image_with_text_fraction(0.2);
        std::fs::write(dir.path().join("a.exe"), image.to_bytes().unwrap()).unwrap();
        std::fs::write(dir.path().join("manifest.json"), "[]").unwrap();
        std::fs::write(dir.path().join("garbage.bin"), b"not a pe").unwrap();
        let stats = corpus_stats(dir.path()).unwrap();
        assert_eq!(stats.files_scanned, 2); // manifest skipped entirely
        assert_eq!(stats.parse_failures, 1); // garbage.bin
        assert!(stats.sections.contains_key(".text"));
    }

    #[test]
    fn csv_projection_has_the_documented_header() {
        let image = image_with_text_fraction(0.3);
        let stats = SectionStats::from_parses(std::iter::once(Some(&image)));
        let csv = stats.to_csv();
        assert!(csv.starts_with(
            "section,presence_fraction,bucket_0_5,bucket_5_10,bucket_10_15,bucket_15_plus\n"
        ));
        assert!(csv.lines().count() >= 3); // header + .text + .rsrc
    }
}

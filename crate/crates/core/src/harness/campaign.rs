//! Campaign runner: every configured attack against every malicious
//! file in a corpus, with per-row audits and aggregate scoring.
//!
//! A campaign is the cartesian product of (malicious files) x (attack
//! configurations). Rows run in parallel but collect in deterministic
//! order (manifest order major, configuration order minor), and every
//! row derives its own RNG seed from the campaign seed so reruns with
//! the same inputs reproduce the report byte for byte.
//!
//! Each row carries two audits on top of the attack result:
//!
//! * **confinement** — the attacked bytes are diffed against an
//!   independently rebuilt pre-attack baseline; any byte outside the
//!   declared writable region flips the row to an error.
//! * **restoration** — cave rows re-run the loader restoration check;
//!   append rows require the virtual mapping to be unchanged.
//!
//! A row is never counted as evaded unless both audits pass: dropping
//! the detector's confidence is worthless if the program no longer
//! runs.

use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attack::{
    append_attack, cave_attack, init_region, prepare_cave, Algorithm, AttackConfig, AttackLocation,
    AttackResult, PerturbBudget, PerturbRegion, RegionOrigin,
};
use crate::cave::{section_is_eligible, select_target_section, DEFAULT_ELIGIBILITY_THRESHOLD};
use crate::loader::{map_image, verify_restoration};
use crate::malconv::{model_to_bytes, DetectorModel};
use crate::pe::PeImage;

use super::activations::{activation_report, GroupProfile};
use super::corpus::{CorpusFile, Label};
use super::HarnessError;

/// Version stamp embedded in every report so downstream tooling can
/// refuse layouts it does not understand.
pub const CAMPAIGN_SCHEMA_VERSION: u32 = 1;

/// Number of equal-width buckets in the confidence-reduction histogram
/// over [0, 1]. Reductions of exactly 1.0 land in the last bucket.
pub const REDUCTION_BUCKETS: usize = 10;

/// One attack configuration to run corpus-wide.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct CampaignAttack {
    /// Pinned cave host section (e.g. `".data"`). `None` lets the
    /// planner pick by priority. Ignored for append placement.
    pub section: Option<String>,
    pub config: AttackConfig,
}

impl CampaignAttack {
    /// Short, stable identifier used in rows, summaries, and activation
    /// group names, e.g. `gd-cave-.text-qf0.15` or
    /// `fgsm-append-q4096-eps0.5`.
    pub fn label(&self) -> String {
        let algo = match self.config.algorithm {
            Algorithm::GradientDescent => "gd",
            Algorithm::Fgsm => "fgsm",
        };
        let place = match self.config.location {
            AttackLocation::Cave => {
                let host = self.section.as_deref().unwrap_or("auto");
                format!("cave-{host}")
            }
            AttackLocation::Append => "append".to_string(),
        };
        let budget = match self.config.budget {
            PerturbBudget::Bytes(b) => format!("q{b}"),
            PerturbBudget::FileFraction(f) => format!("qf{f}"),
        };
        let mut label = format!("{algo}-{place}-{budget}");
        if self.config.algorithm == Algorithm::Fgsm {
            label.push_str(&format!("-eps{}", self.config.epsilon));
        }
        label
    }
}

/// Terminal state of one (file, attack) row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    /// Attack ran, audits passed, final confidence below threshold.
    Evaded,
    /// Attack ran, audits passed, confidence still at or above threshold.
    NotEvaded,
    /// File was not attackable under this configuration (e.g. no
    /// section clears the cave eligibility bar). Not counted as an
    /// attempt.
    Skipped,
    /// The attack or one of its audits failed outright.
    Errored,
}

/// Outcome of a single (file, attack) pairing.
#[derive(Debug, Clone, Serialize)]
pub struct CampaignRow {
    /// File name as recorded in the corpus manifest.
    pub file: String,
    /// `CampaignAttack::label()` of the configuration.
    pub attack: String,
    pub status: RowStatus,
    /// Detector confidence on the pristine file.
    pub confidence_before: Option<f64>,
    /// Detector confidence on the final attacked bytes.
    pub confidence_after: Option<f64>,
    /// `confidence_before - confidence_after`; negative if the attack
    /// backfired.
    pub reduction: Option<f64>,
    pub iterations_used: Option<usize>,
    /// Cave rows: full loader restoration check. Append rows: virtual
    /// mapping unchanged.
    pub restoration_pass: Option<bool>,
    /// No byte outside the declared writable region changed.
    pub confinement_ok: Option<bool>,
    /// Digest of the attacked file bytes, when the attack produced one.
    pub output_sha256: Option<String>,
    pub error: Option<String>,
}

/// Corpus-wide aggregate for one attack configuration.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigSummary {
    /// `CampaignAttack::label()` of the configuration.
    pub attack: String,
    /// The configuration itself, echoed for self-contained reports.
    pub spec: CampaignAttack,
    /// Rows that actually ran: `evaded + not_evaded + errored`.
    pub attempted: usize,
    pub evaded: usize,
    pub not_evaded: usize,
    pub errored: usize,
    pub skipped: usize,
    /// `evaded / attempted`; 0 when nothing was attempted.
    pub evasion_rate: f64,
    /// Mean confidence reduction over non-errored attempts; 0 when
    /// there are none.
    pub mean_reduction: f64,
    /// Non-errored attempts bucketed by confidence reduction clamped
    /// to [0, 1]: bucket `i` covers `[i/10, (i+1)/10)`, the last
    /// bucket closing at 1.0 inclusive.
    pub reduction_histogram: [usize; REDUCTION_BUCKETS],
}

/// Full campaign output: aggregates, activation profiles, and every
/// row, in deterministic order.
#[derive(Debug, Clone, Serialize)]
pub struct CampaignReport {
    pub schema_version: u32,
    /// Campaign-level seed each row's seed derives from.
    pub seed: u64,
    /// Digest of the serialized detector the campaign ran against.
    pub model_sha256: String,
    /// Resampled length of each activation profile.
    pub activation_bins: usize,
    /// Number of malicious files the attacks targeted.
    pub malicious_files: usize,
    pub summaries: Vec<ConfigSummary>,
    /// Mean activation profiles: the `original` group (pristine
    /// malicious files) plus one group per configuration that produced
    /// output, in configuration order.
    pub activation_profiles: Vec<GroupProfile>,
    pub rows: Vec<CampaignRow>,
}

impl CampaignReport {
    /// Pretty JSON, stable across reruns with identical inputs.
    pub fn to_json(&self) -> Result<String, HarnessError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Summary table, one row per configuration:
    /// `attack,attempted,evaded,not_evaded,errored,skipped,evasion_rate,mean_reduction,r0..r9`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "attack,attempted,evaded,not_evaded,errored,skipped,evasion_rate,mean_reduction,\
             r0,r1,r2,r3,r4,r5,r6,r7,r8,r9\n",
        );
        for s in &self.summaries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.6},{:.6}",
                s.attack,
                s.attempted,
                s.evaded,
                s.not_evaded,
                s.errored,
                s.skipped,
                s.evasion_rate,
                s.mean_reduction,
            ));
            for b in s.reduction_histogram {
                out.push_str(&format!(",{b}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Campaign-level knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct CampaignOptions {
    /// Seed all per-row seeds derive from.
    pub seed: u64,
    /// Bin count for the activation profiles in the report.
    pub activation_bins: usize,
}

impl Default for CampaignOptions {
    fn default() -> Self {
        CampaignOptions {
            seed: 11,
            activation_bins: super::activations::DEFAULT_PROFILE_BINS,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-row seed: deterministic in (campaign seed, file index, attack
/// index), well-spread so neighbouring rows do not share RNG streams.
fn derive_seed(base: u64, file_idx: usize, attack_idx: usize) -> u64 {
    let mut s = splitmix64(base);
    s = splitmix64(s ^ (file_idx as u64).wrapping_add(1));
    splitmix64(s ^ (attack_idx as u64).wrapping_add(1))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// True when every byte outside `ranges` agrees between the pre-attack
/// baseline and the attacked bytes. Lengths must already agree.
fn confined(baseline: &[u8], attacked: &[u8], ranges: &[Range<usize>]) -> bool {
    if baseline.len() != attacked.len() {
        return false;
    }
    let mut inside = vec![false; baseline.len()];
    for r in ranges {
        for flag in &mut inside[r.start..r.end.min(baseline.len())] {
            *flag = true;
        }
    }
    baseline
        .iter()
        .zip(attacked)
        .zip(&inside)
        .all(|((b, a), &in_region)| in_region || b == a)
}

/// Everything a finished row needs beyond the raw attack result.
struct RowOutcome {
    row: CampaignRow,
    output: Option<Vec<u8>>,
}

fn errored_row(file: &str, attack: &str, err: String) -> RowOutcome {
    RowOutcome {
        row: CampaignRow {
            file: file.to_string(),
            attack: attack.to_string(),
            status: RowStatus::Errored,
            confidence_before: None,
            confidence_after: None,
            reduction: None,
            iterations_used: None,
            restoration_pass: None,
            confinement_ok: None,
            output_sha256: None,
            error: Some(err),
        },
        output: None,
    }
}

fn skipped_row(file: &str, attack: &str, why: String) -> RowOutcome {
    RowOutcome {
        row: CampaignRow {
            file: file.to_string(),
            attack: attack.to_string(),
            status: RowStatus::Skipped,
            confidence_before: None,
            confidence_after: None,
            reduction: None,
            iterations_used: None,
            restoration_pass: None,
            confinement_ok: None,
            output_sha256: None,
            error: Some(why),
        },
        output: None,
    }
}

/// Fill in the success-path fields shared by cave and append rows.
fn finish_row(
    file: &str,
    attack: &str,
    result: &AttackResult,
    restoration_pass: bool,
    confinement_ok: bool,
    output: Vec<u8>,
) -> RowOutcome {
    let audits_pass = restoration_pass && confinement_ok;
    let status = if !audits_pass {
        RowStatus::Errored
    } else if result.evaded {
        RowStatus::Evaded
    } else {
        RowStatus::NotEvaded
    };
    let error = if audits_pass {
        None
    } else {
        Some(format!(
            "post-attack audit failed (restoration: {restoration_pass}, confinement: {confinement_ok})"
        ))
    };
    RowOutcome {
        row: CampaignRow {
            file: file.to_string(),
            attack: attack.to_string(),
            status,
            confidence_before: Some(result.confidence_before),
            confidence_after: Some(result.confidence_after),
            reduction: Some(result.confidence_before - result.confidence_after),
            iterations_used: Some(result.iterations_used),
            restoration_pass: Some(restoration_pass),
            confinement_ok: Some(confinement_ok),
            output_sha256: Some(sha256_hex(&output)),
            error,
        },
        output: Some(output),
    }
}

fn run_append_row(
    model: &DetectorModel,
    file: &CorpusFile,
    attack: &CampaignAttack,
    config: &AttackConfig,
) -> RowOutcome {
    let label = attack.label();
    let image = match PeImage::parse(&file.bytes) {
        Ok(image) => image,
        Err(e) => return errored_row(&file.entry.path, &label, e.to_string()),
    };
    let (attacked, result) = match append_attack(model, &file.bytes, config) {
        Ok(pair) => pair,
        Err(e) => return errored_row(&file.entry.path, &label, e.to_string()),
    };

    // Rebuild the grown-and-initialized baseline independently and
    // require the optimizer to have stayed inside the tail region.
    let confinement_ok = (|| -> Result<bool, String> {
        let q = config
            .budget
            .resolve(file.bytes.len())
            .map_err(|e| e.to_string())?;
        let mut grown = file.bytes.clone();
        grown.resize(file.bytes.len() + q, 0);
        let region = PerturbRegion::single(
            file.bytes.len()..file.bytes.len() + q,
            RegionOrigin::Append,
            grown.len(),
        )
        .map_err(|e| e.to_string())?;
        let baseline = init_region(&grown, &region, config.init_mode, config.seed)
            .map_err(|e| e.to_string())?;
        Ok(confined(&baseline, &attacked, &result.perturbed_ranges))
    })()
    .unwrap_or(false);

    // Appended bytes live past every section's raw span, so the loaded
    // image must be identical to the original's.
    let restoration_pass = match (
        map_image(&image),
        PeImage::parse(&attacked).map(|r| map_image(&r)),
    ) {
        (Ok(before), Ok(Ok(after))) => before == after,
        _ => false,
    };

    finish_row(
        &file.entry.path,
        &label,
        &result,
        restoration_pass,
        confinement_ok,
        attacked,
    )
}

fn run_cave_row(
    model: &DetectorModel,
    file: &CorpusFile,
    attack: &CampaignAttack,
    config: &AttackConfig,
) -> RowOutcome {
    let label = attack.label();
    let image = match PeImage::parse(&file.bytes) {
        Ok(image) => image,
        Err(e) => return errored_row(&file.entry.path, &label, e.to_string()),
    };

    // Ineligible hosts are a property of the file, not a failure of
    // the attack: record a skip instead of an error.
    let eligible = match attack.section.as_deref() {
        Some(name) => section_is_eligible(&image, name, DEFAULT_ELIGIBILITY_THRESHOLD),
        None => select_target_section(&image, DEFAULT_ELIGIBILITY_THRESHOLD).is_ok(),
    };
    if !eligible {
        return skipped_row(
            &file.entry.path,
            &label,
            format!(
                "no eligible cave host at the {:.0}% bar",
                DEFAULT_ELIGIBILITY_THRESHOLD * 100.0
            ),
        );
    }

    let (attacked_image, record, result) =
        match cave_attack(model, &image, attack.section.as_deref(), config) {
            Ok(triple) => triple,
            Err(e) => return errored_row(&file.entry.path, &label, e.to_string()),
        };
    let attacked_bytes = match attacked_image.to_bytes() {
        Ok(bytes) => bytes,
        Err(e) => return errored_row(&file.entry.path, &label, e.to_string()),
    };

    // Rebuild the injected-and-initialized baseline via the same
    // deterministic preparation and diff outside the declared region.
    let confinement_ok = match prepare_cave(&image, attack.section.as_deref(), config) {
        Ok(prepared) => confined(
            &prepared.initialized,
            &attacked_bytes,
            &result.perturbed_ranges,
        ),
        Err(_) => false,
    };

    let restoration_pass = verify_restoration(&image, &attacked_image, &record).pass;

    finish_row(
        &file.entry.path,
        &label,
        &result,
        restoration_pass,
        confinement_ok,
        attacked_bytes,
    )
}

fn run_row(
    model: &DetectorModel,
    file: &CorpusFile,
    attack: &CampaignAttack,
    seed: u64,
) -> RowOutcome {
    let mut config = attack.config.clone();
    config.seed = seed;
    match config.location {
        AttackLocation::Append => run_append_row(model, file, attack, &config),
        AttackLocation::Cave => run_cave_row(model, file, attack, &config),
    }
}

fn summarize(attack: &CampaignAttack, rows: &[&CampaignRow]) -> ConfigSummary {
    let mut evaded = 0usize;
    let mut not_evaded = 0usize;
    let mut errored = 0usize;
    let mut skipped = 0usize;
    let mut histogram = [0usize; REDUCTION_BUCKETS];
    let mut reduction_sum = 0.0;
    let mut reduction_n = 0usize;

    for row in rows {
        match row.status {
            RowStatus::Evaded => evaded += 1,
            RowStatus::NotEvaded => not_evaded += 1,
            RowStatus::Errored => errored += 1,
            RowStatus::Skipped => skipped += 1,
        }
        if matches!(row.status, RowStatus::Evaded | RowStatus::NotEvaded) {
            let r = row.reduction.unwrap_or(0.0);
            reduction_sum += r;
            reduction_n += 1;
            let clamped = r.clamp(0.0, 1.0);
            let bucket = ((clamped * REDUCTION_BUCKETS as f64) as usize).min(REDUCTION_BUCKETS - 1);
            histogram[bucket] += 1;
        }
    }

    let attempted = evaded + not_evaded + errored;
    ConfigSummary {
        attack: attack.label(),
        spec: attack.clone(),
        attempted,
        evaded,
        not_evaded,
        errored,
        skipped,
        evasion_rate: if attempted == 0 {
            0.0
        } else {
            evaded as f64 / attempted as f64
        },
        mean_reduction: if reduction_n == 0 {
            0.0
        } else {
            reduction_sum / reduction_n as f64
        },
        reduction_histogram: histogram,
    }
}

/// Run every attack configuration against every malicious file in the
/// corpus and aggregate the outcomes.
///
/// Benign files are never attacked; they exist to train and calibrate
/// the detector. Rows execute in parallel but the report is ordered
/// and deterministic: same model, corpus, attacks, and options produce
/// the same JSON.
pub fn run_campaign(
    model: &DetectorModel,
    corpus: &[CorpusFile],
    attacks: &[CampaignAttack],
    options: &CampaignOptions,
) -> Result<CampaignReport, HarnessError> {
    let malicious: Vec<&CorpusFile> = corpus
        .iter()
        .filter(|f| f.entry.label == Label::Malicious)
        .collect();

    // File-major job order so rows group naturally by file in the
    // report while `outcomes[fi * attacks.len() + ai]` stays addressable.
    let jobs: Vec<(usize, usize)> = (0..malicious.len())
        .flat_map(|fi| (0..attacks.len()).map(move |ai| (fi, ai)))
        .collect();
    let outcomes: Vec<RowOutcome> = jobs
        .par_iter()
        .map(|&(fi, ai)| {
            run_row(
                model,
                malicious[fi],
                &attacks[ai],
                derive_seed(options.seed, fi, ai),
            )
        })
        .collect();

    let summaries = attacks
        .iter()
        .enumerate()
        .map(|(ai, attack)| {
            let rows: Vec<&CampaignRow> = (0..malicious.len())
                .map(|fi| &outcomes[fi * attacks.len() + ai].row)
                .collect();
            summarize(attack, &rows)
        })
        .collect();

    // Activation profiles: pristine malicious files, then one group
    // per configuration that produced attacked bytes.
    let mut groups: Vec<(String, Vec<Vec<u8>>)> = Vec::new();
    if !malicious.is_empty() {
        groups.push((
            "original".to_string(),
            malicious.iter().map(|f| f.bytes.clone()).collect(),
        ));
    }
    for (ai, attack) in attacks.iter().enumerate() {
        let files: Vec<Vec<u8>> = (0..malicious.len())
            .filter_map(|fi| outcomes[fi * attacks.len() + ai].output.clone())
            .collect();
        if !files.is_empty() {
            groups.push((attack.label(), files));
        }
    }
    let activation_profiles = activation_report(model, &groups, options.activation_bins)?;

    Ok(CampaignReport {
        schema_version: CAMPAIGN_SCHEMA_VERSION,
        seed: options.seed,
        model_sha256: sha256_hex(&model_to_bytes(model)),
        activation_bins: options.activation_bins,
        malicious_files: malicious.len(),
        summaries,
        activation_profiles,
        rows: outcomes.into_iter().map(|o| o.row).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::InitMode;
    use crate::harness::corpus::{gen_corpus, load_corpus, CorpusSpec};
    use crate::malconv::{init_model, ModelConfig};

    fn tiny_model() -> DetectorModel {
        init_model(
            &ModelConfig {
                max_len: 2048,
                embed_dim: 4,
                kernel: 32,
                stride: 32,
                channels: 4,
            },
            23,
        )
        .unwrap()
    }

    fn tiny_corpus(dir: &std::path::Path) -> Vec<CorpusFile> {
        let spec = CorpusSpec {
            per_class: 3,
            min_size: 3072,
            max_size: 4096,
            seed: 19,
            ..CorpusSpec::default()
        };
        gen_corpus(&spec, dir).unwrap();
        load_corpus(dir).unwrap()
    }

    fn gd_cave() -> CampaignAttack {
        CampaignAttack {
            section: None,
            config: AttackConfig::gradient_descent(
                AttackLocation::Cave,
                PerturbBudget::FileFraction(0.15),
            ),
        }
    }

    fn gd_append() -> CampaignAttack {
        CampaignAttack {
            section: None,
            config: AttackConfig::gradient_descent(
                AttackLocation::Append,
                PerturbBudget::FileFraction(0.15),
            ),
        }
    }

    #[test]
    fn labels_name_algorithm_placement_and_budget() {
        assert_eq!(gd_cave().label(), "gd-cave-auto-qf0.15");
        assert_eq!(gd_append().label(), "gd-append-qf0.15");
        let fgsm = CampaignAttack {
            section: Some(".data".to_string()),
            config: AttackConfig::fgsm(AttackLocation::Cave, PerturbBudget::Bytes(4096), 0.5),
        };
        assert_eq!(fgsm.label(), "fgsm-cave-.data-q4096-eps0.5");
    }

    #[test]
    fn empty_attack_list_yields_an_empty_but_valid_report() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let model = tiny_model();
        let report = run_campaign(&model, &corpus, &[], &CampaignOptions::default()).unwrap();

        assert_eq!(report.schema_version, CAMPAIGN_SCHEMA_VERSION);
        assert!(report.summaries.is_empty());
        assert!(report.rows.is_empty());
        assert_eq!(report.malicious_files, 3);
        // The pristine-malicious profile is still worth reporting.
        assert_eq!(report.activation_profiles.len(), 1);
        assert_eq!(report.activation_profiles[0].group, "original");
        report.to_json().unwrap();
    }

    #[test]
    fn bookkeeping_adds_up_per_configuration() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let model = tiny_model();
        let attacks = [gd_cave(), gd_append()];
        let report = run_campaign(&model, &corpus, &attacks, &CampaignOptions::default()).unwrap();

        assert_eq!(report.rows.len(), 3 * attacks.len());
        for s in &report.summaries {
            assert_eq!(s.attempted, s.evaded + s.not_evaded + s.errored);
            assert_eq!(s.attempted + s.skipped, report.malicious_files);
            let mass: usize = s.reduction_histogram.iter().sum();
            assert_eq!(mass, s.attempted - s.errored);
            if s.attempted > 0 {
                assert!((s.evasion_rate - s.evaded as f64 / s.attempted as f64).abs() < 1e-12);
            }
        }
        // Rows come out file-major in manifest order.
        assert_eq!(report.rows[0].file, report.rows[1].file);
        assert_eq!(report.rows[0].attack, "gd-cave-auto-qf0.15");
        assert_eq!(report.rows[1].attack, "gd-append-qf0.15");
    }

    #[test]
    fn rows_that_ran_carry_passing_audits_and_digests() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let model = tiny_model();
        let attacks = [gd_cave(), gd_append()];
        let report = run_campaign(&model, &corpus, &attacks, &CampaignOptions::default()).unwrap();

        let mut ran = 0;
        for row in &report.rows {
            match row.status {
                RowStatus::Evaded | RowStatus::NotEvaded => {
                    ran += 1;
                    assert_eq!(row.restoration_pass, Some(true), "{row:?}");
                    assert_eq!(row.confinement_ok, Some(true), "{row:?}");
                    let digest = row.output_sha256.as_deref().unwrap();
                    assert_eq!(digest.len(), 64);
                    let before = row.confidence_before.unwrap();
                    let after = row.confidence_after.unwrap();
                    assert!((row.reduction.unwrap() - (before - after)).abs() < 1e-15);
                }
                RowStatus::Skipped => {
                    assert!(row.output_sha256.is_none());
                    assert!(row.error.is_some());
                }
                RowStatus::Errored => panic!("unexpected error row: {row:?}"),
            }
        }
        assert!(ran > 0, "campaign never ran a row");
    }

    #[test]
    fn ineligible_pinned_sections_are_skipped_not_errored() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let model = tiny_model();
        // .rsrc takes whatever is left after the other draws; pin an
        // attack to a section small enough to miss the bar in at least
        // one file by pinning to a name that does not exist at all.
        let attacks = [CampaignAttack {
            section: Some(".nope".to_string()),
            config: AttackConfig::gradient_descent(
                AttackLocation::Cave,
                PerturbBudget::FileFraction(0.10),
            ),
        }];
        let report = run_campaign(&model, &corpus, &attacks, &CampaignOptions::default()).unwrap();
        assert_eq!(report.summaries[0].skipped, report.malicious_files);
        assert_eq!(report.summaries[0].attempted, 0);
        assert_eq!(report.summaries[0].evasion_rate, 0.0);
        assert!(report
            .rows
            .iter()
            .all(|r| r.status == RowStatus::Skipped && r.error.is_some()));
    }

    #[test]
    fn same_seed_reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let model = tiny_model();
        // Random init exercises the seeded path end to end.
        let mut cfg = AttackConfig::gradient_descent(
            AttackLocation::Append,
            PerturbBudget::FileFraction(0.10),
        );
        cfg.init_mode = InitMode::RandomUniform;
        let attacks = [
            CampaignAttack {
                section: None,
                config: cfg,
            },
            gd_cave(),
        ];
        let opts = CampaignOptions {
            seed: 99,
            activation_bins: 40,
        };
        let a = run_campaign(&model, &corpus, &attacks, &opts).unwrap();
        let b = run_campaign(&model, &corpus, &attacks, &opts).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());

        let c = run_campaign(
            &model,
            &corpus,
            &attacks,
            &CampaignOptions {
                seed: 100,
                activation_bins: 40,
            },
        )
        .unwrap();
        assert_ne!(a.to_json().unwrap(), c.to_json().unwrap());
    }

    #[test]
    fn csv_projection_has_stable_columns() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let model = tiny_model();
        let report =
            run_campaign(&model, &corpus, &[gd_append()], &CampaignOptions::default()).unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "attack,attempted,evaded,not_evaded,errored,skipped,evasion_rate,mean_reduction,\
             r0,r1,r2,r3,r4,r5,r6,r7,r8,r9"
        );
        let row = lines.next().unwrap();
        assert!(row.starts_with("gd-append-qf0.15,3,"));
        assert_eq!(row.split(',').count(), 18);
    }

    #[test]
    fn derived_seeds_spread_across_rows() {
        let s00 = derive_seed(7, 0, 0);
        let s01 = derive_seed(7, 0, 1);
        let s10 = derive_seed(7, 1, 0);
        assert_ne!(s00, s01);
        assert_ne!(s00, s10);
        assert_ne!(s01, s10);
        assert_eq!(s00, derive_seed(7, 0, 0));
        assert_ne!(s00, derive_seed(8, 0, 0));
    }
}

//! Acceptance gate: one test per criterion, each printing a single
//! `ACCEPTANCE <name>: PASS|FAIL` line (visible with `--nocapture`).
//!
//! Criteria that need a trained detector share one fixture: a seeded
//! synthetic corpus, a 75/25 per-class split, and a detector trained at
//! the default configuration. Campaign-based criteria share one pair of
//! identically-seeded campaign runs.

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use caveforge::attack::{
    choose_byte, fgsm_attack, nearest_byte_row, AttackConfig, AttackLocation, PerturbBudget,
    PerturbRegion, RegionOrigin,
};
use caveforge::cave::{
    inject_cave, plan_cave, select_target_section, DEFAULT_ELIGIBILITY_THRESHOLD,
};
use caveforge::harness::{
    corpus_stats, gen_corpus, load_corpus, run_campaign, CampaignAttack, CampaignOptions,
    CampaignReport, CorpusFile, CorpusSpec, Label, RowStatus,
};
use caveforge::loader::{verify_restoration, STUB_SIZE};
use caveforge::malconv::{
    accuracy, init_model, train, DetectorModel, EmbeddingMatrix, GradTarget, ModelConfig, Sample,
    TrainConfig,
};
use caveforge::pe::{
    PeBuilder, PeImage, IMAGE_SCN_CNT_CODE, IMAGE_SCN_CNT_INITIALIZED_DATA, IMAGE_SCN_MEM_EXECUTE,
    IMAGE_SCN_MEM_READ, IMAGE_SCN_MEM_WRITE,
};

const X: u32 = IMAGE_SCN_CNT_CODE | IMAGE_SCN_MEM_EXECUTE | IMAGE_SCN_MEM_READ;
const R: u32 = IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ;
const RW: u32 = R | IMAGE_SCN_MEM_WRITE;

fn criterion(name: &str, body: impl FnOnce()) {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(()) => println!("ACCEPTANCE {name}: PASS"),
        Err(cause) => {
            println!("ACCEPTANCE {name}: FAIL");
            resume_unwind(cause);
        }
    }
}

// ---------------------------------------------------------------- fixtures

struct Fixture {
    dir: tempfile::TempDir,
    corpus: Vec<CorpusFile>,
    model: DetectorModel,
    train_seconds: f64,
    holdout_accuracy: f64,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

/// Last quarter of each class (manifest order) held out for evaluation.
fn split_quarter(files: &[CorpusFile]) -> (Vec<Sample>, Vec<Sample>) {
    let mut train_set = Vec::new();
    let mut holdout_set = Vec::new();
    for label in [Label::Benign, Label::Malicious] {
        let class: Vec<&CorpusFile> = files.iter().filter(|f| f.entry.label == label).collect();
        let keep = class.len() - class.len() / 4;
        for (i, f) in class.iter().enumerate() {
            let sample = Sample {
                bytes: f.bytes.clone(),
                malicious: label == Label::Malicious,
            };
            if i < keep {
                train_set.push(sample);
            } else {
                holdout_set.push(sample);
            }
        }
    }
    (train_set, holdout_set)
}

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let spec = CorpusSpec {
            per_class: 70,
            seed: 7,
            ..CorpusSpec::default()
        };
        gen_corpus(&spec, dir.path()).expect("corpus generation");
        let corpus = load_corpus(dir.path()).expect("corpus load");
        let (train_samples, holdout_samples) = split_quarter(&corpus);

        let started = Instant::now();
        let seed_model = init_model(&ModelConfig::default(), 41).expect("init");
        let (model, _) =
            train(&seed_model, &train_samples, &TrainConfig::default()).expect("training");
        let train_seconds = started.elapsed().as_secs_f64();
        let holdout_accuracy = accuracy(&model, &holdout_samples);

        Fixture {
            dir,
            corpus,
            model,
            train_seconds,
            holdout_accuracy,
        }
    })
}

struct CampaignFixture {
    eligible_files: usize,
    first: CampaignReport,
    first_json: String,
    second_json: String,
}

static CAMPAIGN: OnceLock<CampaignFixture> = OnceLock::new();

/// Two identical campaign runs of {GD cave, GD append} at q = 15% over
/// the benign files plus every cave-eligible malicious file.
fn campaign_fixture() -> &'static CampaignFixture {
    CAMPAIGN.get_or_init(|| {
        let fx = fixture();
        let eligible: Vec<CorpusFile> = fx
            .corpus
            .iter()
            .filter(|f| {
                f.entry.label == Label::Benign
                    || PeImage::parse(&f.bytes)
                        .map(|img| {
                            select_target_section(&img, DEFAULT_ELIGIBILITY_THRESHOLD).is_ok()
                        })
                        .unwrap_or(false)
            })
            .cloned()
            .collect();
        let eligible_files = eligible
            .iter()
            .filter(|f| f.entry.label == Label::Malicious)
            .count();

        // Same algorithm, budget, and iteration cap; each placement
        // keeps its canonical initialization (caves refill with the
        // displaced original content, appended tails start zeroed).
        let budget = PerturbBudget::FileFraction(0.15);
        let attacks = [
            CampaignAttack {
                section: None,
                config: AttackConfig::gradient_descent(AttackLocation::Cave, budget),
            },
            CampaignAttack {
                section: None,
                config: AttackConfig::gradient_descent(AttackLocation::Append, budget),
            },
        ];
        let options = CampaignOptions {
            seed: 1337,
            activation_bins: 50,
        };
        let first = run_campaign(&fx.model, &eligible, &attacks, &options).expect("campaign 1");
        let second = run_campaign(&fx.model, &eligible, &attacks, &options).expect("campaign 2");
        CampaignFixture {
            eligible_files,
            first_json: first.to_json().expect("json 1"),
            second_json: second.to_json().expect("json 2"),
            first,
        }
    })
}

// ---------------------------------------------------------------- criteria

/// Parse-then-write is byte-identical for 200 generated files, under 5 s.
#[test]
fn acceptance_round_trip() {
    criterion("round-trip", || {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            per_class: 100,
            seed: 3,
            ..CorpusSpec::default()
        };
        gen_corpus(&spec, dir.path()).unwrap();
        let corpus = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus.len(), 200);

        let started = Instant::now();
        for file in &corpus {
            let image = PeImage::parse(&file.bytes).unwrap();
            let rewritten = image.to_bytes().unwrap();
            assert_eq!(
                rewritten, file.bytes,
                "{} did not round-trip",
                file.entry.path
            );
        }
        let elapsed = started.elapsed().as_secs_f64();
        assert!(elapsed < 5.0, "round trip of 200 files took {elapsed:.2}s");
    });
}

/// Randomized inject-then-emulate pipelines always restore the original
/// mapped image and transfer control to the recorded entry point.
#[test]
fn acceptance_restoration_theorem() {
    criterion("restoration-theorem", || {
        let mut rng = ChaCha12Rng::seed_from_u64(0xC0FFEE);
        let mut ran = 0usize;
        while ran < 100 {
            // Random layout; sizes in file-alignment units so raw and
            // mapped spans agree.
            let unit = 0x200usize;
            let sizes: Vec<usize> = (0..4).map(|_| unit * rng.gen_range(1..=6)).collect();
            let mut builder = PeBuilder::new();
            for (name, chars, size) in [
                (".text", X, sizes[0]),
                (".data", RW, sizes[1]),
                (".rdata", R, sizes[2]),
                (".rsrc", R, sizes[3]),
            ] {
                let fill: Vec<u8> = (0..size).map(|_| rng.gen()).collect();
                builder = builder.section(name, fill, chars);
            }
            let image = builder.build().unwrap();

            // Random eligible target (never the last section).
            let target = [".text", ".data", ".rdata"][rng.gen_range(0..3)];
            let reservation = STUB_SIZE as u32;
            let raw = image.section(target).unwrap().header.size_of_raw_data;
            let p_max = if target == ".text" {
                raw.saturating_sub(reservation)
            } else {
                raw
            };
            if p_max < 2 {
                continue;
            }
            let cave_size = rng.gen_range(1..=p_max);
            let cave_offset = rng.gen_range(0..=p_max - cave_size);

            let plan =
                plan_cave(&image, target, cave_size, Some(cave_offset), reservation).unwrap();
            let (injected, record) = inject_cave(&image, &plan).unwrap();
            let report = verify_restoration(&image, &injected, &record);
            assert!(
                report.pass,
                "pipeline {ran} failed on {target} C={cave_size:#x} off={cave_offset:#x}: \
                 {report:?}"
            );
            assert_eq!(report.observed_entry_va, Some(report.expected_entry_va));
            ran += 1;
        }
    });
}

/// Analytic embedding gradients agree with central finite differences.
#[test]
fn acceptance_gradient_check() {
    criterion("gradient-check", || {
        let shapes = [
            (256usize, 2usize, 8usize, 8usize, 2usize),
            (384, 3, 12, 12, 3),
            (512, 4, 16, 16, 4),
            (640, 3, 32, 32, 2),
            (768, 5, 24, 24, 3),
        ];
        let step = 1e-3;
        let mut worst = 0.0f64;
        for (cfg_idx, (max_len, embed_dim, kernel, stride, channels)) in
            shapes.into_iter().enumerate()
        {
            let config = ModelConfig {
                max_len,
                embed_dim,
                kernel,
                stride,
                channels,
            };
            let model = init_model(&config, 1000 + cfg_idx as u64).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(2000 + cfg_idx as u64);
            let bytes: Vec<u8> = (0..max_len).map(|_| rng.gen()).collect();
            let z = model.embed(&bytes).z;
            let analytic = model.grad_embedded(&z, GradTarget::Confidence);

            for _ in 0..100 {
                let i = rng.gen_range(0..z.len());
                let mut plus = z.clone();
                let mut minus = z.clone();
                plus[i] += step;
                minus[i] -= step;
                let numeric =
                    (model.forward_embedded(&plus) - model.forward_embedded(&minus)) / (2.0 * step);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
                let rel = (analytic[i] - numeric).abs() / denom;
                worst = worst.max(rel);
                assert!(
                    rel < 1e-3,
                    "config {cfg_idx} coordinate {i}: analytic {} vs numeric {numeric} (rel {rel:.2e})",
                    analytic[i]
                );
            }
        }
        assert!(worst < 1e-3);
    });
}

/// Byte selection matches a brute-force enumeration of the projection
/// geometry on 1000 random cases.
#[test]
fn acceptance_byte_choice_oracle() {
    criterion("byte-choice-oracle", || {
        let mut rng = ChaCha12Rng::seed_from_u64(0xBEEF);
        for case in 0..1000 {
            let dim = rng.gen_range(2..=6);
            let weights: Vec<f32> = (0..257 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let embedding = EmbeddingMatrix { dim, weights };
            let z: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let w: Vec<f64> = if case % 97 == 0 {
                vec![0.0; dim]
            } else {
                (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
            };

            // Independent re-derivation: project every byte row onto the
            // descent direction, keep forward ones, take the closest.
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            let expected: Option<u8> = if norm == 0.0 {
                None
            } else {
                let n: Vec<f64> = w.iter().map(|v| v / norm).collect();
                let mut best: Option<(u8, f64)> = None;
                for byte in 0u16..256 {
                    let m: Vec<f64> = embedding
                        .row(byte as usize)
                        .iter()
                        .map(|v| *v as f64)
                        .collect();
                    let s: f64 = (0..dim).map(|k| n[k] * (m[k] - z[k])).sum();
                    if s <= 0.0 {
                        continue;
                    }
                    let d: f64 = (0..dim)
                        .map(|k| {
                            let p = z[k] + s * n[k];
                            (m[k] - p) * (m[k] - p)
                        })
                        .sum::<f64>()
                        .sqrt();
                    let better = match best {
                        None => true,
                        Some((_, bd)) => d < bd,
                    };
                    if better {
                        best = Some((byte as u8, d));
                    }
                }
                best.map(|(b, _)| b)
            };

            let got = choose_byte(0, &embedding, &z, &w).chosen;
            assert_eq!(got, expected, "case {case} disagreed");
        }
    });
}

/// One signed-gradient step equals z − ε·sign(g) exactly, and the byte
/// reconstruction picks the true nearest embedding row.
#[test]
fn acceptance_fgsm_step_oracle() {
    criterion("fgsm-step-oracle", || {
        let config = ModelConfig {
            max_len: 64,
            embed_dim: 3,
            kernel: 8,
            stride: 8,
            channels: 2,
        };
        let model = init_model(&config, 5150).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(515);
        let x0: Vec<u8> = (0..64).map(|_| rng.gen()).collect();
        let payload = 8usize..16;
        let epsilon = 0.5;

        // Independent first step: gradient of the benign-label loss,
        // signed update on the payload rows only.
        let d = config.embed_dim;
        let z0 = model.embed(&x0).z;
        let g = model.grad_embedded(&z0, GradTarget::Loss { label: 0.0 });
        let mut z1 = z0.clone();
        for j in payload.clone() {
            for k in 0..d {
                let gi = g[j * d + k];
                let sign = if gi > 0.0 {
                    1.0
                } else if gi < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                z1[j * d + k] -= epsilon * sign;
            }
        }
        // Exhaustive nearest-row scan over all 257 rows; the padding
        // row (256) must never be produced even when it is closest.
        let mut expected_bytes = x0.clone();
        for j in payload.clone() {
            let row = &z1[j * d..(j + 1) * d];
            let mut best_byte = 0u8;
            let mut best_dist = f64::INFINITY;
            let mut pad_dist = f64::INFINITY;
            for token in 0..257usize {
                let m = model.embedding.row(token);
                let dist: f64 = (0..d)
                    .map(|k| {
                        let delta = m[k] as f64 - row[k];
                        delta * delta
                    })
                    .sum();
                if token == 256 {
                    pad_dist = dist;
                } else if dist < best_dist {
                    best_dist = dist;
                    best_byte = token as u8;
                }
            }
            // The scan covered the padding row; the chosen byte is the
            // nearest *byte* row regardless of where padding landed.
            assert!(pad_dist.is_finite());
            assert_eq!(nearest_byte_row(&model.embedding, row), best_byte);
            expected_bytes[j] = best_byte;
        }

        let region =
            PerturbRegion::single(payload.clone(), RegionOrigin::Append, x0.len()).unwrap();
        let mut cfg = AttackConfig::fgsm(
            AttackLocation::Append,
            PerturbBudget::Bytes(payload.len() as u32),
            epsilon,
        );
        cfg.max_iterations = 1;
        let (attacked, result) = fgsm_attack(&model, &x0, &region, &cfg).unwrap();

        if result.iterations_used == 1 {
            assert_eq!(attacked, expected_bytes, "byte reconstruction diverged");
            // The embedded confidence after the step must equal the
            // value computed from the independently stepped z, exactly.
            assert_eq!(
                result.trace[0].embedded_confidence,
                Some(model.forward_embedded(&z1)),
            );
        } else {
            // Start already benign: while-loop semantics ran nothing.
            assert_eq!(result.iterations_used, 0);
            assert_eq!(attacked, x0);
            assert!(model.forward(&x0) < cfg.threshold);
        }

        // PAD exclusion, constructed directly: park the padding row
        // exactly on the query point; reconstruction must still return
        // the nearest row among real bytes.
        let mut embedding = model.embedding.clone();
        let probe = vec![0.25f64; d];
        for (k, &v) in probe.iter().enumerate() {
            embedding.weights[256 * d + k] = v as f32;
        }
        let dist = |token: usize| -> f64 {
            (0..d)
                .map(|k| (embedding.row(token)[k] as f64 - probe[k]).powi(2))
                .sum()
        };
        assert_eq!(dist(256), 0.0, "padding row should sit on the probe");
        let chosen = nearest_byte_row(&embedding, &probe);
        let best_byte = (0..256usize)
            .min_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap())
            .unwrap();
        assert_eq!(chosen as usize, best_byte);
        assert!(
            dist(chosen as usize) > 0.0,
            "chosen row beat the parked pad"
        );
    });
}

/// The default-budget detector separates the synthetic classes on
/// held-out files within the time budget.
#[test]
fn acceptance_training() {
    criterion("desk-scale-training", || {
        let fx = fixture();
        assert!(
            fx.holdout_accuracy >= 0.95,
            "held-out accuracy {} below 0.95",
            fx.holdout_accuracy
        );
        assert!(
            fx.train_seconds < 60.0,
            "training took {:.1}s",
            fx.train_seconds
        );
    });
}

/// Cave placement strictly beats appending at the same budget over the
/// same eligible file set, and both runs are deterministic.
#[test]
fn acceptance_attack_effectiveness() {
    criterion("attack-effectiveness", || {
        let cf = campaign_fixture();
        assert!(
            cf.eligible_files >= 50,
            "only {} eligible malicious files",
            cf.eligible_files
        );
        let cave = &cf.first.summaries[0];
        let append = &cf.first.summaries[1];
        assert_eq!(cave.attempted, cf.eligible_files);
        assert_eq!(append.attempted, cf.eligible_files);
        assert_eq!(cave.skipped, 0);
        assert_eq!(append.skipped, 0);
        assert_eq!(cave.errored, 0);
        assert_eq!(append.errored, 0);
        assert!(
            cave.evasion_rate > append.evasion_rate,
            "cave rate {} not strictly above append rate {}",
            cave.evasion_rate,
            append.evasion_rate
        );
        // Regression band, measured once on this fixture and pinned:
        // 5/66 cave evasions (7.58%) vs 0/66 for appending. The tiled
        // class evidence makes the max-pooled detector hard to starve,
        // so the margin is thin but strict and fully deterministic.
        assert!(
            cave.evasion_rate >= 0.04,
            "cave evasion rate regressed to {}",
            cave.evasion_rate
        );
        assert!(
            append.evasion_rate <= 0.02,
            "append evasion rate drifted up to {}",
            append.evasion_rate
        );
    });
}

/// No campaign row modified a byte outside its declared region.
#[test]
fn acceptance_region_confinement() {
    criterion("region-confinement", || {
        let cf = campaign_fixture();
        let mut audited = 0usize;
        for row in &cf.first.rows {
            match row.status {
                RowStatus::Evaded | RowStatus::NotEvaded => {
                    assert_eq!(
                        row.confinement_ok,
                        Some(true),
                        "row {} / {} escaped its region",
                        row.file,
                        row.attack
                    );
                    audited += 1;
                }
                RowStatus::Skipped => {}
                RowStatus::Errored => panic!("errored row in confinement audit: {row:?}"),
            }
        }
        assert!(audited >= 100, "only {audited} rows audited");
    });
}

/// Section-ratio buckets partition each section's occurrences, and a
/// constructed corpus reproduces its known buckets exactly.
#[test]
fn acceptance_section_stats() {
    criterion("section-stats", || {
        // Bucket fractions sum to 1 within tolerance on a real corpus.
        let fx = fixture();
        let stats = corpus_stats(fx.dir.path()).unwrap();
        assert_eq!(stats.parse_failures, 0);
        assert!(stats.files_scanned >= 140);
        for (name, section) in &stats.sections {
            let sum: f64 = section.bucket_fractions.iter().sum();
            assert!(
                (sum - 1.0).abs() <= 1e-3,
                "{name} bucket fractions sum to {sum}"
            );
        }

        // Constructed corpus with known ratios: headers are 0x400 bytes,
        // total file size pinned at 0x4000, so .text raw sizes of 0x200,
        // 0x600, 0x800, and 0x1000 give ratios 3.1%, 9.4%, 12.5%, 25%.
        let dir = tempfile::tempdir().unwrap();
        let total = 0x4000usize;
        for (i, text_size) in [0x200usize, 0x600, 0x800, 0x1000].into_iter().enumerate() {
            let rest = total - 0x400 - text_size - 0x200;
            let image = PeBuilder::new()
                .section(".text", vec![0x90; text_size], X)
                .section(".data", vec![7; 0x200], RW)
                .section(".rsrc", vec![9; rest], R)
                .build()
                .unwrap();
            let bytes = image.to_bytes().unwrap();
            assert_eq!(bytes.len(), total);
            std::fs::write(dir.path().join(format!("known_{i}.exe")), bytes).unwrap();
        }
        let stats = corpus_stats(dir.path()).unwrap();
        let text = &stats.sections[".text"];
        assert_eq!(text.bucket_counts, [1, 1, 1, 1]);
        assert_eq!(text.bucket_fractions, [0.25, 0.25, 0.25, 0.25]);
        assert_eq!(text.presence_fraction, 1.0);
    });
}

/// Two identically-seeded campaigns serialize byte-for-byte the same.
#[test]
fn acceptance_report_determinism() {
    criterion("report-determinism", || {
        let cf = campaign_fixture();
        assert_eq!(cf.first_json, cf.second_json);
        assert!(!cf.first_json.is_empty());
    });
}

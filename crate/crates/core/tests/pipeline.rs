//! End-to-end checks of the `caveforge` binary: each subcommand is
//! exercised through a real process, chained the way a user would run
//! them (generate → stats → train → attack → verify → campaign →
//! activations), asserting exit codes and document shapes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_caveforge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn caveforge")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json_file(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).expect("read json")).expect("parse json")
}

struct Workbench {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus: PathBuf,
    model: PathBuf,
}

/// Generate a small corpus and train a model once for the whole file.
fn workbench() -> &'static Workbench {
    static BENCH: std::sync::OnceLock<Workbench> = std::sync::OnceLock::new();
    BENCH.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        let corpus = root.join("corpus");
        let model = root.join("model.bin");

        let out = run(&[
            "gen-corpus",
            "--dir",
            corpus.to_str().unwrap(),
            "--per-class",
            "12",
            "--seed",
            "7",
        ]);
        assert_ok(&out, "gen-corpus");

        let out = run(&[
            "train",
            "--corpus",
            corpus.to_str().unwrap(),
            "--model-out",
            model.to_str().unwrap(),
            "--seed",
            "41",
            "--out",
            root.join("train.json").to_str().unwrap(),
        ]);
        assert_ok(&out, "train");

        Workbench {
            _dir: dir,
            root,
            corpus,
            model,
        }
    })
}

#[test]
fn corpus_generation_emits_a_manifest_and_stats_read_it() {
    let wb = workbench();
    assert!(wb.corpus.join("manifest.json").is_file());
    assert!(wb.corpus.join("benign_0000.exe").is_file());
    assert!(wb.corpus.join("malicious_0011.exe").is_file());

    let out = run(&["stats", "--corpus", wb.corpus.to_str().unwrap()]);
    assert_ok(&out, "stats");
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["files_scanned"], 24);
    assert_eq!(doc["parse_failures"], 0);
    assert!(
        doc["sections"][".text"]["presence_fraction"]
            .as_f64()
            .unwrap()
            > 0.99
    );

    let out = run(&[
        "stats",
        "--corpus",
        wb.corpus.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert_ok(&out, "stats --format csv");
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with(
        "section,presence_fraction,bucket_0_5,bucket_5_10,bucket_10_15,bucket_15_plus\n"
    ));
}

#[test]
fn training_reports_accuracy_and_saves_a_loadable_model() {
    let wb = workbench();
    let doc = json_file(&wb.root.join("train.json"));
    assert!(doc["train_accuracy"].as_f64().unwrap() >= 0.95);
    assert!(doc["holdout_accuracy"].as_f64().unwrap() >= 0.95);
    assert_eq!(doc["model_sha256"].as_str().unwrap().len(), 64);
    assert!(wb.model.is_file());

    // The saved model is usable: activations on one group succeed.
    let out = run(&[
        "activations",
        "--model",
        wb.model.to_str().unwrap(),
        "--group",
        &format!("corpus={}", wb.corpus.display()),
        "--bins",
        "10",
        "--format",
        "csv",
    ]);
    assert_ok(&out, "activations");
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("group,bin,value"));
    assert_eq!(lines.count(), 10);
}

#[test]
fn cave_attack_then_verify_round_trips_with_exit_zero() {
    let wb = workbench();
    // malicious_0001 is cave-eligible under the generation seed used here.
    let input = wb.corpus.join("malicious_0001.exe");
    let attacked = wb.root.join("attacked.exe");
    let record = wb.root.join("record.json");
    let result = wb.root.join("attack.json");

    let out = run(&[
        "attack",
        "--model",
        wb.model.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--emit-file",
        attacked.to_str().unwrap(),
        "--emit-record",
        record.to_str().unwrap(),
        "--out",
        result.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_ok(&out, "attack");

    let doc = json_file(&result);
    assert_eq!(doc["restoration_pass"], true);
    assert!(doc["result"]["confidence_before"].as_f64().unwrap() > 0.5);
    assert_eq!(doc["input_sha256"].as_str().unwrap().len(), 64);
    assert!(doc["result"]["iterations_used"].as_u64().unwrap() >= 1);

    let out = run(&[
        "verify",
        "--original",
        input.to_str().unwrap(),
        "--modified",
        attacked.to_str().unwrap(),
        "--record",
        record.to_str().unwrap(),
    ]);
    assert_ok(&out, "verify");
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["pass"], true);
    assert_eq!(doc["mismatch_count"], 0);

    // Tampering with a mapped byte must fail the check and flip the
    // exit code. The byte has to be one the restoration check actually
    // compares: inside a section's mapped window, outside the loader
    // stub span, and outside the cave (the emulated restore overwrites
    // the cave, so flips there are invisible by design).
    let mut bytes = std::fs::read(&attacked).unwrap();
    let image = caveforge::pe::PeImage::parse(&bytes).unwrap();
    let rec: caveforge::cave::CaveRecord =
        serde_json::from_slice(&std::fs::read(&record).unwrap()).unwrap();
    let loader = rec.plan.loader_rva..rec.plan.loader_rva + rec.plan.reservation;
    let target = image
        .sections
        .iter()
        .find(|s| s.header.name_str() == rec.plan.target_section)
        .unwrap();
    let cave_rva = target.header.virtual_address + rec.plan.cave_offset;
    let cave = cave_rva..cave_rva + rec.plan.cave_size;
    let offset = image
        .sections
        .iter()
        .find_map(|s| {
            (0..s.header.mapped_len()).find_map(|i| {
                let rva = s.header.virtual_address + i;
                (!loader.contains(&rva) && !cave.contains(&rva))
                    .then_some((s.header.pointer_to_raw_data + i) as usize)
            })
        })
        .expect("some comparable byte exists");
    bytes[offset] ^= 0xFF;
    let tampered = wb.root.join("tampered.exe");
    std::fs::write(&tampered, bytes).unwrap();
    let out = run(&[
        "verify",
        "--original",
        input.to_str().unwrap(),
        "--modified",
        tampered.to_str().unwrap(),
        "--record",
        record.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "tampered file verified clean");
}

#[test]
fn append_attack_grows_the_file_and_rejects_cave_only_flags() {
    let wb = workbench();
    let input = wb.corpus.join("malicious_0002.exe");
    let attacked = wb.root.join("appended.exe");

    let out = run(&[
        "attack",
        "--model",
        wb.model.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--location",
        "append",
        "--algorithm",
        "fgsm",
        "--epsilon",
        "0.5",
        "--budget-bytes",
        "512",
        "--emit-file",
        attacked.to_str().unwrap(),
    ]);
    assert_ok(&out, "append attack");
    let original_len = std::fs::metadata(&input).unwrap().len();
    let attacked_len = std::fs::metadata(&attacked).unwrap().len();
    assert_eq!(attacked_len, original_len + 512);

    // Cave-only flags are operational errors under append placement.
    let out = run(&[
        "attack",
        "--model",
        wb.model.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--location",
        "append",
        "--section",
        ".text",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--section"));
}

#[test]
fn campaign_csv_header_is_frozen_and_json_is_deterministic() {
    let wb = workbench();
    let out = run(&[
        "campaign",
        "--model",
        wb.model.to_str().unwrap(),
        "--corpus",
        wb.corpus.to_str().unwrap(),
        "--bins",
        "10",
        "--seed",
        "11",
        "--format",
        "csv",
    ]);
    assert_ok(&out, "campaign csv");
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(
        csv.starts_with(
            "attack,attempted,evaded,not_evaded,errored,skipped,evasion_rate,mean_reduction,\
             r0,r1,r2,r3,r4,r5,r6,r7,r8,r9\n"
        ),
        "campaign csv header drifted:\n{csv}"
    );
    // Built-in attack set: three pinned cave hosts plus append.
    assert_eq!(csv.lines().count(), 5);

    let a = run(&[
        "campaign",
        "--model",
        wb.model.to_str().unwrap(),
        "--corpus",
        wb.corpus.to_str().unwrap(),
        "--bins",
        "10",
        "--seed",
        "11",
    ]);
    let b = run(&[
        "campaign",
        "--model",
        wb.model.to_str().unwrap(),
        "--corpus",
        wb.corpus.to_str().unwrap(),
        "--bins",
        "10",
        "--seed",
        "11",
    ]);
    assert_ok(&a, "campaign run 1");
    assert_ok(&b, "campaign run 2");
    assert_eq!(a.stdout, b.stdout, "same-seed campaigns diverged");

    let doc: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(doc["schema_version"], 1);
    assert_eq!(doc["malicious_files"], 12);
    assert_eq!(doc["summaries"].as_array().unwrap().len(), 4);
}

#[test]
fn custom_attack_files_feed_the_campaign() {
    let wb = workbench();
    let attacks = wb.root.join("attacks.json");
    std::fs::write(
        &attacks,
        r#"[
          {
            "section": null,
            "config": {
              "algorithm": "gradient_descent",
              "location": "append",
              "budget": {"file_fraction": 0.1},
              "max_iterations": 2,
              "epsilon": 0.0,
              "init_mode": "zeros",
              "threshold": 0.5,
              "seed": 0
            }
          }
        ]"#,
    )
    .unwrap();
    let out = run(&[
        "campaign",
        "--model",
        wb.model.to_str().unwrap(),
        "--corpus",
        wb.corpus.to_str().unwrap(),
        "--attacks",
        attacks.to_str().unwrap(),
        "--bins",
        "10",
    ]);
    assert_ok(&out, "campaign with custom attacks");
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    let summaries = doc["summaries"].as_array().unwrap();
    assert_eq!(summaries.len(), 1);
    assert_eq!(summaries[0]["attack"], "gd-append-qf0.1");
    assert_eq!(summaries[0]["attempted"], 12);
}

#[test]
fn usage_errors_exit_two() {
    let out = run(&["bogus-subcommand"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["attack", "--model"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));

    // Conflicting budget flags are a usage error too.
    let out = run(&[
        "attack",
        "--model",
        "m",
        "--input",
        "i",
        "--budget-bytes",
        "64",
        "--budget-fraction",
        "0.1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn operational_errors_exit_one() {
    let wb = workbench();
    // Missing model file.
    let out = run(&[
        "stats",
        "--corpus",
        wb.root.join("no-such-dir").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    // Degenerate corpus spec.
    let out = run(&[
        "gen-corpus",
        "--dir",
        wb.root.join("bad").to_str().unwrap(),
        "--per-class",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

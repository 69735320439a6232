//! Command-line surface.
//!
//! Every subcommand produces one machine-readable result document,
//! written to `--out` (or standard output) in `--format` json or csv.
//! Exit codes: 0 success, 1 operational error (printed to standard
//! error), 2 usage error (clap's default).
//!
//! ```text
//!   gen-corpus   synthesize a labeled two-class PE corpus
//!   stats        per-section presence and size-ratio histograms
//!   train        fit the byte-level detector on a corpus
//!   attack       run one attack against one file
//!   campaign     run a set of attacks across a corpus
//!   verify       restoration check for an attacked file
//!   activations  mean activation profiles for named file groups
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attack::{
    append_attack, cave_attack, AttackConfig, AttackLocation, AttackResult, InitMode,
    PerturbBudget, DEFAULT_CAVE_FRACTION, EVASION_THRESHOLD,
};
use crate::cave::CaveRecord;
use crate::harness::{
    activation_csv, activation_report, corpus_stats, gen_corpus, load_corpus, run_campaign,
    CampaignAttack, CampaignOptions, CorpusFile, CorpusSpec, Label, DEFAULT_PROFILE_BINS,
};
use crate::loader::verify_restoration;
use crate::malconv::{
    accuracy, init_model, load_model, save_model, train, ModelConfig, Sample, TrainConfig,
    TrainReport,
};
use crate::pe::PeImage;

type CliError = Box<dyn std::error::Error>;

#[derive(Parser)]
#[command(
    name = "caveforge",
    version,
    about = "Code-cave rewriting of PE32 binaries and adversarial byte \
             optimization against a byte-level CNN detector"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// RNG seed for subcommands that use randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Write the result document to this file instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Result document format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic two-class PE corpus.
    GenCorpus(GenCorpusArgs),
    /// Per-section presence fractions and size-ratio histograms.
    Stats(StatsArgs),
    /// Train the byte-level detector on a corpus.
    Train(TrainArgs),
    /// Run one attack against one PE file.
    Attack(AttackArgs),
    /// Run a set of attack configurations across a corpus.
    Campaign(CampaignArgs),
    /// Check that an attacked file still restores and runs.
    Verify(VerifyArgs),
    /// Mean activation profiles for named groups of files.
    Activations(ActivationsArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Directory to create the corpus in.
    #[arg(long)]
    dir: PathBuf,
    /// Files per class.
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Smallest file size in bytes.
    #[arg(long, default_value_t = 3072)]
    min_size: usize,
    /// Largest file size in bytes.
    #[arg(long, default_value_t = 8192)]
    max_size: usize,
    /// Length of each class motif in bytes.
    #[arg(long, default_value_t = 4)]
    motif_len: usize,
    /// Motifs per class pool.
    #[arg(long, default_value_t = 8)]
    motif_pool: usize,
}

#[derive(Args)]
struct StatsArgs {
    /// Corpus directory to scan.
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory with a manifest.
    #[arg(long)]
    corpus: PathBuf,
    /// Where to save the trained model.
    #[arg(long)]
    model_out: PathBuf,
    /// Detector window in bytes.
    #[arg(long, default_value_t = 4096)]
    max_len: usize,
    /// Embedding width per byte.
    #[arg(long, default_value_t = 8)]
    embed_dim: usize,
    /// Convolution kernel width in positions.
    #[arg(long, default_value_t = 64)]
    kernel: usize,
    /// Convolution stride in positions.
    #[arg(long, default_value_t = 64)]
    stride: usize,
    /// Convolution channels per branch.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.25)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Fraction of each class held out for evaluation.
    #[arg(long, default_value_t = 0.25)]
    holdout: f64,
}

#[derive(Args)]
struct AttackArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// PE file to attack.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = AlgorithmArg::Gd)]
    algorithm: AlgorithmArg,
    #[arg(long, value_enum, default_value_t = LocationArg::Cave)]
    location: LocationArg,
    /// Pin the cave host section (e.g. ".data"); defaults to priority order.
    #[arg(long)]
    section: Option<String>,
    /// Perturbation budget as an absolute byte count.
    #[arg(long, conflicts_with = "budget_fraction")]
    budget_bytes: Option<u32>,
    /// Perturbation budget as a fraction of file size (default 0.15).
    #[arg(long)]
    budget_fraction: Option<f64>,
    /// Signed-gradient step size (fgsm only).
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    /// Iteration cap; defaults to 3 sweeps (gd) or 20 steps (fgsm).
    #[arg(long)]
    iterations: Option<usize>,
    /// How the writable region is filled before optimization.
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    /// Confidence below which the attack declares evasion.
    #[arg(long, default_value_t = EVASION_THRESHOLD)]
    threshold: f64,
    /// Write the attacked file here.
    #[arg(long)]
    emit_file: Option<PathBuf>,
    /// Write the cave record (JSON) here, for later `verify` runs.
    #[arg(long)]
    emit_record: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AlgorithmArg {
    Gd,
    Fgsm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LocationArg {
    Cave,
    Append,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitArg {
    Zeros,
    RandomUniform,
    OriginalContent,
}

#[derive(Args)]
struct CampaignArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Corpus directory with a manifest.
    #[arg(long)]
    corpus: PathBuf,
    /// JSON file with the attack configurations to run (array of
    /// {section, config}); defaults to gradient-descent caves in
    /// .text/.data/.rdata plus an appended tail, all at 15% of file size.
    #[arg(long)]
    attacks: Option<PathBuf>,
    /// Bins per activation profile in the report.
    #[arg(long, default_value_t = DEFAULT_PROFILE_BINS)]
    bins: usize,
}

#[derive(Args)]
struct VerifyArgs {
    /// The pristine original file.
    #[arg(long)]
    original: PathBuf,
    /// The attacked/modified file.
    #[arg(long)]
    modified: PathBuf,
    /// Cave record JSON emitted by `attack --emit-record`.
    #[arg(long)]
    record: PathBuf,
}

#[derive(Args)]
struct ActivationsArgs {
    /// Trained model file.
    #[arg(long)]
    model: PathBuf,
    /// Named file group as NAME=DIR; repeatable. Every non-JSON file
    /// in DIR joins the group.
    #[arg(long = "group", required = true)]
    groups: Vec<String>,
    /// Bins per profile.
    #[arg(long, default_value_t = DEFAULT_PROFILE_BINS)]
    bins: usize,
}

/// Parse argv and run; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    let seed = cli.seed;
    let sink = Sink {
        out: cli.out,
        format: cli.format,
    };
    match cli.command {
        Command::GenCorpus(args) => cmd_gen_corpus(args, seed, &sink),
        Command::Stats(args) => cmd_stats(args, &sink),
        Command::Train(args) => cmd_train(args, seed, &sink),
        Command::Attack(args) => cmd_attack(args, seed, &sink),
        Command::Campaign(args) => cmd_campaign(args, seed, &sink),
        Command::Verify(args) => cmd_verify(args, &sink),
        Command::Activations(args) => cmd_activations(args, &sink),
    }
}

/// Where and how the result document leaves the process.
struct Sink {
    out: Option<PathBuf>,
    format: Format,
}

impl Sink {
    /// Emit json or csv depending on `--format`.
    fn emit<T: Serialize>(&self, value: &T, csv: impl FnOnce() -> String) -> Result<(), CliError> {
        let doc = match self.format {
            Format::Json => {
                let mut s = serde_json::to_string_pretty(value)?;
                s.push('\n');
                s
            }
            Format::Csv => csv(),
        };
        match &self.out {
            Some(path) => fs::write(path, doc)?,
            None => print!("{doc}"),
        }
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn cmd_gen_corpus(args: GenCorpusArgs, seed: Option<u64>, sink: &Sink) -> Result<i32, CliError> {
    let spec = CorpusSpec {
        per_class: args.per_class,
        min_size: args.min_size,
        max_size: args.max_size,
        motif_len: args.motif_len,
        motif_pool: args.motif_pool,
        seed: seed.unwrap_or(CorpusSpec::default().seed),
        ..CorpusSpec::default()
    };
    let manifest = gen_corpus(&spec, &args.dir)?;
    sink.emit(&manifest, || {
        let mut csv = String::from("path,label,size\n");
        for e in &manifest {
            let label = match e.label {
                Label::Benign => "benign",
                Label::Malicious => "malicious",
            };
            let _ = writeln!(csv, "{},{},{}", e.path, label, e.size);
        }
        csv
    })?;
    Ok(0)
}

fn cmd_stats(args: StatsArgs, sink: &Sink) -> Result<i32, CliError> {
    let stats = corpus_stats(&args.corpus)?;
    sink.emit(&stats, || stats.to_csv())?;
    Ok(0)
}

#[derive(Serialize)]
struct TrainDoc {
    model_path: String,
    model_sha256: String,
    config: ModelConfig,
    train_config: TrainConfig,
    corpus_files: usize,
    holdout_files: usize,
    report: TrainReport,
    train_accuracy: f64,
    holdout_accuracy: Option<f64>,
}

/// Deterministic split: the last `floor(n * holdout)` files of each
/// class (manifest order) are held out.
fn split_holdout(files: &[CorpusFile], holdout: f64) -> (Vec<Sample>, Vec<Sample>) {
    let mut train_set = Vec::new();
    let mut holdout_set = Vec::new();
    for label in [Label::Benign, Label::Malicious] {
        let class: Vec<&CorpusFile> = files.iter().filter(|f| f.entry.label == label).collect();
        let keep = class.len() - (class.len() as f64 * holdout).floor() as usize;
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

fn cmd_train(args: TrainArgs, seed: Option<u64>, sink: &Sink) -> Result<i32, CliError> {
    if !(0.0..1.0).contains(&args.holdout) {
        return Err(format!("holdout fraction {} must be in [0, 1)", args.holdout).into());
    }
    let files = load_corpus(&args.corpus)?;
    let (train_samples, holdout_samples) = split_holdout(&files, args.holdout);

    let config = ModelConfig {
        max_len: args.max_len,
        embed_dim: args.embed_dim,
        kernel: args.kernel,
        stride: args.stride,
        channels: args.channels,
    };
    let train_config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        momentum: args.momentum,
        seed: seed.unwrap_or(TrainConfig::default().seed),
    };
    let seed_model = init_model(&config, train_config.seed)?;
    let (model, report) = train(&seed_model, &train_samples, &train_config)?;
    save_model(&model, &args.model_out)?;

    let doc = TrainDoc {
        model_path: args.model_out.display().to_string(),
        model_sha256: sha256_hex(&crate::malconv::model_to_bytes(&model)),
        config,
        train_config,
        corpus_files: files.len(),
        holdout_files: holdout_samples.len(),
        train_accuracy: accuracy(&model, &train_samples),
        holdout_accuracy: if holdout_samples.is_empty() {
            None
        } else {
            Some(accuracy(&model, &holdout_samples))
        },
        report,
    };
    sink.emit(&doc, || {
        let mut csv = String::from("epoch,mean_loss,train_accuracy\n");
        for e in &doc.report.history {
            let _ = writeln!(
                csv,
                "{},{:.6},{:.6}",
                e.epoch, e.mean_loss, e.train_accuracy
            );
        }
        csv
    })?;
    Ok(0)
}

#[derive(Serialize)]
struct AttackDoc {
    input: String,
    input_sha256: String,
    section: Option<String>,
    config: AttackConfig,
    result: AttackResult,
    output_sha256: String,
    emitted_file: Option<String>,
    emitted_record: Option<String>,
    restoration_pass: Option<bool>,
}

fn trace_csv(result: &AttackResult) -> String {
    let mut csv = String::from("iteration,embedded_confidence,byte_confidence\n");
    for t in &result.trace {
        let embedded = t
            .embedded_confidence
            .map(|c| format!("{c:.6}"))
            .unwrap_or_default();
        let _ = writeln!(csv, "{},{},{:.6}", t.iteration, embedded, t.byte_confidence);
    }
    csv
}

fn cmd_attack(args: AttackArgs, seed: Option<u64>, sink: &Sink) -> Result<i32, CliError> {
    let model = load_model(&args.model)?;
    let input_bytes = fs::read(&args.input)?;

    let location = match args.location {
        LocationArg::Cave => AttackLocation::Cave,
        LocationArg::Append => AttackLocation::Append,
    };
    let budget = match (args.budget_bytes, args.budget_fraction) {
        (Some(b), _) => PerturbBudget::Bytes(b),
        (None, Some(f)) => PerturbBudget::FileFraction(f),
        (None, None) => PerturbBudget::FileFraction(DEFAULT_CAVE_FRACTION),
    };
    let mut config = match args.algorithm {
        AlgorithmArg::Gd => AttackConfig::gradient_descent(location, budget),
        AlgorithmArg::Fgsm => AttackConfig::fgsm(location, budget, args.epsilon),
    };
    if let Some(n) = args.iterations {
        config.max_iterations = n;
    }
    if let Some(init) = args.init {
        config.init_mode = match init {
            InitArg::Zeros => InitMode::Zeros,
            InitArg::RandomUniform => InitMode::RandomUniform,
            InitArg::OriginalContent => InitMode::OriginalContent,
        };
    }
    config.threshold = args.threshold;
    config.seed = seed.unwrap_or(0);

    let (attacked_bytes, result, record, restoration_pass): (
        Vec<u8>,
        AttackResult,
        Option<CaveRecord>,
        Option<bool>,
    ) = match location {
        AttackLocation::Append => {
            if args.section.is_some() {
                return Err("--section only applies to cave attacks".into());
            }
            if args.emit_record.is_some() {
                return Err("--emit-record only applies to cave attacks".into());
            }
            let (bytes, result) = append_attack(&model, &input_bytes, &config)?;
            (bytes, result, None, None)
        }
        AttackLocation::Cave => {
            let original = PeImage::parse(&input_bytes)?;
            let (attacked, record, result) =
                cave_attack(&model, &original, args.section.as_deref(), &config)?;
            let pass = verify_restoration(&original, &attacked, &record).pass;
            (attacked.to_bytes()?, result, Some(record), Some(pass))
        }
    };

    if let Some(path) = &args.emit_file {
        fs::write(path, &attacked_bytes)?;
    }
    if let Some(path) = &args.emit_record {
        let record = record.as_ref().expect("cave attacks carry a record");
        fs::write(path, serde_json::to_string_pretty(record)?)?;
    }

    let doc = AttackDoc {
        input: args.input.display().to_string(),
        input_sha256: sha256_hex(&input_bytes),
        section: args.section,
        config,
        output_sha256: sha256_hex(&attacked_bytes),
        emitted_file: args.emit_file.map(|p| p.display().to_string()),
        emitted_record: args.emit_record.map(|p| p.display().to_string()),
        restoration_pass,
        result,
    };
    sink.emit(&doc, || trace_csv(&doc.result))?;
    Ok(0)
}

/// The built-in campaign: gradient-descent caves in the three standard
/// hosts plus an appended tail, all at 15% of file size.
fn default_attacks() -> Vec<CampaignAttack> {
    let budget = PerturbBudget::FileFraction(DEFAULT_CAVE_FRACTION);
    let mut attacks: Vec<CampaignAttack> = [".text", ".data", ".rdata"]
        .iter()
        .map(|name| CampaignAttack {
            section: Some((*name).to_string()),
            config: AttackConfig::gradient_descent(AttackLocation::Cave, budget),
        })
        .collect();
    attacks.push(CampaignAttack {
        section: None,
        config: AttackConfig::gradient_descent(AttackLocation::Append, budget),
    });
    attacks
}

fn cmd_campaign(args: CampaignArgs, seed: Option<u64>, sink: &Sink) -> Result<i32, CliError> {
    let model = load_model(&args.model)?;
    let corpus = load_corpus(&args.corpus)?;
    let attacks = match &args.attacks {
        Some(path) => serde_json::from_slice::<Vec<CampaignAttack>>(&fs::read(path)?)?,
        None => default_attacks(),
    };
    let options = CampaignOptions {
        seed: seed.unwrap_or(CampaignOptions::default().seed),
        activation_bins: args.bins,
    };
    let report = run_campaign(&model, &corpus, &attacks, &options)?;
    sink.emit(&report, || report.to_csv())?;
    Ok(0)
}

fn cmd_verify(args: VerifyArgs, sink: &Sink) -> Result<i32, CliError> {
    let original = PeImage::parse(&fs::read(&args.original)?)?;
    let modified = PeImage::parse(&fs::read(&args.modified)?)?;
    let record: CaveRecord = serde_json::from_slice(&fs::read(&args.record)?)?;
    let report = verify_restoration(&original, &modified, &record);
    sink.emit(&report, || {
        let mut csv = String::from("check,value\n");
        let _ = writeln!(csv, "pass,{}", report.pass);
        let _ = writeln!(
            csv,
            "restored_content_matches,{}",
            report.restored_content_matches
        );
        let _ = writeln!(csv, "control_transfer_ok,{}", report.control_transfer_ok);
        let _ = writeln!(csv, "mismatch_count,{}", report.mismatch_count);
        csv
    })?;
    Ok(if report.pass { 0 } else { 1 })
}

/// Load every non-JSON regular file in `dir`, sorted by name.
fn load_group_dir(dir: &Path) -> Result<Vec<Vec<u8>>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().map(|x| x != "json").unwrap_or(true))
        .collect();
    paths.sort();
    let mut files = Vec::with_capacity(paths.len());
    for p in paths {
        files.push(fs::read(p)?);
    }
    Ok(files)
}

fn cmd_activations(args: ActivationsArgs, sink: &Sink) -> Result<i32, CliError> {
    let model = load_model(&args.model)?;
    let mut groups = Vec::with_capacity(args.groups.len());
    for spec in &args.groups {
        let (name, dir) = spec
            .split_once('=')
            .ok_or_else(|| format!("group {spec:?} is not NAME=DIR"))?;
        groups.push((name.to_string(), load_group_dir(Path::new(dir))?));
    }
    let profiles = activation_report(&model, &groups, args.bins)?;
    sink.emit(&profiles, || activation_csv(&profiles))?;
    Ok(0)
}

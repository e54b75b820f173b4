//! Command-line front end: `prepare`, `synth`, `train`, `evaluate`,
//! `compare`.
//!
//! Exit codes: 0 on success, 1 on runtime faults, 2 on usage or
//! configuration errors.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, CONFIG_ENV};
use crate::corpus::{is_negative, parse_session_log, read_cache, split_all, write_cache, ColumnMapping, HoldoutSplit, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Split};
use crate::model::{save_checkpoint, save_optimizer_state};
use crate::objectives::ContextMode;
use crate::synth::generate_markov_corpus;
use crate::trainer::{train, TrainMode};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const CACHE_FILE: &str = "sessions.jsonl";
const VOCAB_FILE: &str = "vocab.json";

#[derive(Debug, Parser)]
#[command(name = "skiprec", version, about = "Skip-aware sequential music recommendation")]
pub struct Cli {
    /// JSON config file; defaults to $SKIPREC_CONFIG when set.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Top-level seed for training, evaluation and generation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a session log into a normalized cache and vocabulary.
    Prepare(PrepareArgs),
    /// Generate a synthetic Markov corpus with planted skips.
    Synth(SynthArgs),
    /// Train a model on a prepared corpus.
    Train(TrainArgs),
    /// Evaluate one checkpoint.
    Evaluate(EvaluateArgs),
    /// Evaluate several checkpoints into one table.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Delimited session log (falls back to `data.path`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON file with a column mapping.
    #[arg(long)]
    pub columns: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub context_mode: Option<ContextMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: Option<Split>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// `label=path`; the first one is the baseline. Repeatable.
    #[arg(long = "checkpoint", value_name = "LABEL=PATH", required = true)]
    pub checkpoints: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub split: Option<Split>,
    /// CSV path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Provenance record written next to every artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    /// SHA-256 of the normalized corpus cache.
    pub corpus_fingerprint: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

/// Corpus statistics written by `prepare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareStats {
    pub rows: usize,
    pub sessions_seen: usize,
    pub sessions_kept: usize,
    pub dropped_short: usize,
    pub dropped_long: usize,
    pub unique_tracks: usize,
    /// Share of positions with skip strength 1 or 2.
    pub skip_fraction: f64,
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = resolve_config(&cli)?;
    match &cli.command {
        Command::Prepare(args) => cmd_prepare(&config, args),
        Command::Synth(args) => cmd_synth(&config, args),
        Command::Train(args) => cmd_train(config, args),
        Command::Evaluate(args) => cmd_evaluate(config, args),
        Command::Compare(args) => cmd_compare(config, args),
    }
}

/// Defaults, then the config file, then `--set`, then `--seed`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let base = match path {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    let mut config = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
        config.eval.seed = seed;
        config.synth.seed = seed;
    }
    Ok(config)
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn manifest(command: &str, config: &RunConfig, started: u64) -> RunManifest {
    RunManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        corpus_fingerprint: None,
        seeds: BTreeMap::new(),
        artifacts: BTreeMap::new(),
        started_unix: started,
        finished_unix: 0,
    }
}

fn cmd_prepare(config: &RunConfig, args: &PrepareArgs) -> Result<()> {
    let started = now_unix();
    let data = args
        .data
        .clone()
        .or_else(|| config.data.path.clone())
        .ok_or_else(|| Error::Config("no input log: pass --data or set data.path".into()))?;
    let mapping: ColumnMapping = match &args.columns {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => config.data.columns.clone(),
    };
    let meta = std::fs::metadata(&data).map_err(|e| Error::io(&data, e))?;
    if meta.len() == 0 {
        return Err(Error::Config(format!("{} is empty", data.display())));
    }
    let parsed = parse_session_log(&data, &mapping, config.data.filter())?;
    if parsed.sessions.is_empty() {
        return Err(Error::Config(format!("{} contains no usable session", data.display())));
    }
    let positions: usize = parsed.sessions.iter().map(|s| s.len()).sum();
    let negatives: usize = parsed
        .sessions
        .iter()
        .flat_map(|s| s.skips.iter())
        .filter(|&&k| is_negative(k))
        .count();
    let stats = PrepareStats {
        rows: parsed.stats.rows,
        sessions_seen: parsed.stats.sessions_seen,
        sessions_kept: parsed.stats.sessions_kept,
        dropped_short: parsed.stats.dropped_short,
        dropped_long: parsed.stats.dropped_long,
        unique_tracks: parsed.vocab.num_tracks(),
        skip_fraction: negatives as f64 / positions.max(1) as f64,
    };

    create_dir(&args.out)?;
    let cache = args.out.join(CACHE_FILE);
    let vocab = args.out.join(VOCAB_FILE);
    let stats_path = args.out.join("stats.json");
    write_cache(&cache, &parsed.sessions)?;
    parsed.vocab.save(&vocab)?;
    write_json(&stats_path, &stats)?;

    let mut m = manifest("prepare", config, started);
    m.corpus_fingerprint = Some(file_sha256(&cache)?);
    m.artifacts.insert("input".into(), data);
    m.artifacts.insert("cache".into(), cache);
    m.artifacts.insert("vocab".into(), vocab);
    m.artifacts.insert("stats".into(), stats_path);
    m.finished_unix = now_unix();
    write_json(&args.out.join("manifest.json"), &m)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

fn cmd_synth(config: &RunConfig, args: &SynthArgs) -> Result<()> {
    let started = now_unix();
    let corpus = generate_markov_corpus(&config.synth)?;
    corpus.write(&args.out, &config.synth, &config.data.columns)?;
    let mut m = manifest("synth", config, started);
    m.seeds.insert("synth".into(), config.synth.seed);
    m.artifacts.insert("log".into(), args.out.join("sessions.csv"));
    m.artifacts.insert("ground_truth".into(), args.out.join("ground_truth.json"));
    m.finished_unix = now_unix();
    write_json(&args.out.join("manifest.json"), &m)
}

struct Prepared {
    splits: Vec<HoldoutSplit>,
    vocab: Vocabulary,
    fingerprint: String,
}

fn load_prepared(dir: &Path) -> Result<Prepared> {
    let cache = dir.join(CACHE_FILE);
    let sessions = read_cache(&cache)?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    if let Some(bad) = sessions
        .iter()
        .flat_map(|s| s.tracks.iter())
        .find(|&&t| vocab.key_of(t).is_none())
    {
        return Err(Error::Config(format!("cache references track {bad} missing from the vocabulary")));
    }
    let (splits, rejected) = split_all(&sessions);
    if rejected > 0 {
        eprintln!("warning: {rejected} sessions too short for a holdout split were ignored");
    }
    if splits.is_empty() {
        return Err(Error::Config("prepared corpus has no session of length >= 3".into()));
    }
    Ok(Prepared {
        splits,
        vocab,
        fingerprint: file_sha256(&cache)?,
    })
}

fn cmd_train(mut config: RunConfig, args: &TrainArgs) -> Result<()> {
    let started = now_unix();
    if let Some(mode) = args.mode {
        config.train.mode = mode;
    }
    if let Some(alpha) = args.alpha {
        config.loss.alpha = alpha;
    }
    if let Some(cm) = args.context_mode {
        config.loss.context_mode = cm;
    }
    if let Some(e) = args.epochs {
        config.train.max_epochs = e;
    }
    config.model.causal = config.train.mode.causal();
    config.validate()?;
    let data = load_prepared(&args.data)?;
    let has_negatives = data
        .splits
        .iter()
        .any(|s| s.train_prefix.skips.iter().any(|&k| is_negative(k)));
    if config.loss.alpha > 0.0 && !has_negatives {
        eprintln!("warning: loss.alpha > 0 but the corpus has no skipped tracks; training with the NLL term only");
    }

    create_dir(&args.out)?;
    let log_path = args.out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut log_err = None;
    let setup = config.train_setup();
    let outcome = train(&data.splits, data.vocab.num_tracks(), &setup, |record, secs| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val {:?}  {:.1}s",
            record.epoch, record.loss, record.val_hr, secs
        );
        let line = serde_json::to_string(record).expect("record serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::io(&log_path, e));
    }

    let ckpt = args.out.join("checkpoint.bin");
    let opt = args.out.join("optimizer.bin");
    let timing = args.out.join("timing.json");
    let meta = serde_json::json!({
        "mode": config.train.mode,
        "loss": config.loss,
        "best_epoch": outcome.best_epoch,
        "best_val_hr": outcome.best_val_hr,
        "corpus_fingerprint": data.fingerprint,
    });
    save_checkpoint(&ckpt, &outcome.best, config.train.seed, &data.vocab.fingerprint(), meta)?;
    save_optimizer_state(&opt, &outcome.optimizer.m, &outcome.optimizer.v, outcome.optimizer.step)?;
    write_json(&timing, &serde_json::json!({ "epoch_seconds": outcome.epoch_seconds }))?;

    let mut m = manifest("train", &config, started);
    m.corpus_fingerprint = Some(data.fingerprint);
    m.seeds.insert("train".into(), config.train.seed);
    m.seeds.insert("validation".into(), config.train.seed);
    m.artifacts.insert("data".into(), args.data.clone());
    m.artifacts.insert("checkpoint".into(), ckpt);
    m.artifacts.insert("optimizer".into(), opt);
    m.artifacts.insert("log".into(), log_path);
    m.artifacts.insert("timing".into(), timing);
    m.finished_unix = now_unix();
    write_json(&args.out.join("manifest.json"), &m)?;

    match outcome.aborted {
        Some(reason) => Err(Error::NonFinite(format!(
            "training diverged ({reason}); kept the checkpoint of epoch {}",
            outcome.best_epoch
        ))),
        None => Ok(()),
    }
}

fn eval_with(config: &RunConfig, split: Option<Split>, checkpoint: &Path, data: &Prepared) -> Result<EvalReport> {
    let mut eval_cfg = config.eval.clone();
    if let Some(s) = split {
        eval_cfg.split = s;
    }
    evaluate(checkpoint, &data.splits, &data.vocab, &eval_cfg)
}

fn cmd_evaluate(config: RunConfig, args: &EvaluateArgs) -> Result<()> {
    let started = now_unix();
    let data = load_prepared(&args.data)?;
    let report = eval_with(&config, args.split, &args.checkpoint, &data)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    match &args.out {
        Some(out) => {
            std::fs::write(out, &text).map_err(|e| Error::io(out, e))?;
            let mut m = manifest("evaluate", &config, started);
            m.corpus_fingerprint = Some(data.fingerprint);
            m.seeds.insert("eval".into(), report.seed);
            m.artifacts.insert("checkpoint".into(), args.checkpoint.clone());
            m.artifacts.insert("report".into(), out.clone());
            m.finished_unix = now_unix();
            write_json(&sidecar_path(out), &m)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Relative increase over the baseline, in percent.
pub fn relative_increase(value: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 100.0 * (value - baseline) / baseline)
}

/// Writes one row per model with HR@K and the relative increase over the
/// first row.
pub fn write_comparison<W: Write>(writer: W, rows: &[(String, EvalReport)]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Config(format!("csv write failed: {e}"));
    let ks: Vec<usize> = rows.first().map(|(_, r)| r.hr.keys().copied().collect()).unwrap_or_default();
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["model".to_string()];
    header.extend(ks.iter().map(|k| format!("hr@{k}")));
    header.extend(ks.iter().map(|k| format!("rel_increase_pct@{k}")));
    wtr.write_record(&header).map_err(csv_err)?;
    let base = rows.first().map(|(_, r)| r.hr.clone()).unwrap_or_default();
    for (i, (label, report)) in rows.iter().enumerate() {
        let mut rec = vec![label.clone()];
        rec.extend(ks.iter().map(|k| format!("{:.4}", report.hr_at(*k).unwrap_or(f64::NAN))));
        for k in &ks {
            let cell = match (i, report.hr_at(*k), base.get(k)) {
                (0, ..) => String::new(),
                (_, Some(v), Some(&b)) => relative_increase(v, b).map(|r| format!("{r:.2}")).unwrap_or_default(),
                _ => String::new(),
            };
            rec.push(cell);
        }
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::io("<comparison>", e))
}

fn cmd_compare(config: RunConfig, args: &CompareArgs) -> Result<()> {
    let started = now_unix();
    let data = load_prepared(&args.data)?;
    let mut rows = Vec::new();
    for spec in &args.checkpoints {
        let (label, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("checkpoint {spec:?} is not LABEL=PATH")))?;
        let report = eval_with(&config, args.split, Path::new(path), &data)?;
        rows.push((label.to_string(), report));
    }
    match &args.out {
        Some(out) => {
            let file = File::create(out).map_err(|e| Error::io(out, e))?;
            write_comparison(BufWriter::new(file), &rows)?;
            let mut m = manifest("compare", &config, started);
            m.corpus_fingerprint = Some(data.fingerprint);
            m.seeds.insert("eval".into(), config.eval.seed);
            for spec in &args.checkpoints {
                if let Some((label, path)) = spec.split_once('=') {
                    m.artifacts.insert(format!("checkpoint:{label}"), PathBuf::from(path));
                }
            }
            m.artifacts.insert("table".into(), out.clone());
            m.finished_unix = now_unix();
            write_json(&sidecar_path(out), &m)?;
        }
        None => write_comparison(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

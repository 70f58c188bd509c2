//! The `tajweed` command line: prepare, preprocess, train, evaluate, predict
//! and serve. Every command appends one entry to the run-manifest log.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.

pub mod manifest;

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;
use tajweed_core::audio::read_wav;
use tajweed_core::config::RunConfig;
use tajweed_core::dsp::{preprocess_clip, preprocess_waveform, TensorCache};
use tajweed_core::evaluator::{evaluate_checkpoint, export_learning_curves, manifest_hash, percent};
use tajweed_core::ingest::{
    class_distribution, labels_path, load_corpus, split_dataset, ClipRecord, DatasetSplit, IngestOptions,
};
use tajweed_core::model::{load_checkpoint, TajweedNet};
use tajweed_core::rules::RULES;
use tajweed_core::trainer::{self, predict_batch, stack_inputs};

use manifest::RunManifest;

pub const SPLIT_MANIFEST: &str = "split_manifest.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "tajweed", version, about = "Tajweed rule classifier pipeline")]
pub struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// JSON-lines file receiving one manifest entry per command.
    #[arg(long, global = true, default_value = "runs/manifest.jsonl", env = "TAJWEED_MANIFEST_LOG")]
    pub manifest_log: PathBuf,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the corpus layout, report counts and class balance, write the split manifest.
    Prepare {
        #[arg(long)]
        root: PathBuf,
        /// Labels table (default: ROOT/labels.csv).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Drop the clip whose missing label would otherwise be imputed.
        #[arg(long)]
        exclude_imputed: bool,
        /// Output path (default: ROOT/split_manifest.csv).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Fill the tensor cache for every clip in the corpus.
    Preprocess {
        #[arg(long)]
        config: PathBuf,
        /// Corpus root (overrides `root` in the config).
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Train with the configured hyperparameters; writes runs/<timestamp>/.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Shortcut for `--set epochs=N`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override one config key.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Exact run directory instead of RUNS_DIR/<timestamp>.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split and write report.json.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config (default: config.toml next to the checkpoint).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Split manifest (default: split_manifest.csv next to the checkpoint).
        #[arg(long)]
        split_manifest: Option<PathBuf>,
        /// Report path (default: report.json next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify one WAV file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        wav: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Run the HTTP inference service.
    Serve {
        #[arg(long, env = "TAJWEED_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        #[arg(long, env = "TAJWEED_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "TAJWEED_HOST", default_value = "127.0.0.1")]
        host: IpAddr,
        /// Origin allowed by CORS (the practice UI).
        #[arg(long, env = "TAJWEED_ALLOWED_ORIGIN")]
        allowed_origin: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Prepare { .. } => "prepare",
            Command::Preprocess { .. } => "preprocess",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Predict { .. } => "predict",
            Command::Serve { .. } => "serve",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Usage = 1,
    Data = 2,
    Runtime = 3,
}

#[derive(Debug, thiserror::Error)]
#[error("{msg}")]
pub struct CliError {
    pub exit: Exit,
    pub msg: String,
}

impl CliError {
    pub fn new(exit: Exit, msg: impl Into<String>) -> Self {
        Self { exit, msg: msg.into() }
    }
}

impl From<tajweed_core::Error> for CliError {
    fn from(e: tajweed_core::Error) -> Self {
        use tajweed_core::Error as E;
        let exit = match &e {
            E::Config(_) => Exit::Usage,
            E::Io { .. }
            | E::Labels { .. }
            | E::MissingAudio(_)
            | E::Audio(_)
            | E::Clip { .. }
            | E::Invalid(_)
            | E::Shape(_)
            | E::Checkpoint(_)
            | E::PretrainedWeights { .. } => Exit::Data,
            E::NonFiniteLoss { .. } | E::Tensor(_) => Exit::Runtime,
        };
        Self::new(exit, e.to_string())
    }
}

impl From<tajweed_server::ServiceError> for CliError {
    fn from(e: tajweed_server::ServiceError) -> Self {
        match e {
            tajweed_server::ServiceError::Origin(_) => Self::new(Exit::Usage, e.to_string()),
            other => Self::new(Exit::Runtime, other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(Exit::Data, format!("{}: {e}", path.display()))
}

type CliResult<T> = Result<T, CliError>;

/// What a command prints: a JSON value with `--json`, human lines otherwise.
pub struct Output {
    pub json: serde_json::Value,
    pub human: Vec<String>,
}

/// Directory that relative paths in a config resolve against. Absolute, so
/// that the copy saved into a run directory still points at the same data.
fn config_base(path: &Path) -> PathBuf {
    let abs = std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf());
    abs.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_config(path: &Path, overrides: &[String], man: &mut RunManifest) -> CliResult<RunConfig> {
    man.config_path = Some(path.to_path_buf());
    man.hash_input(path);
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_overrides(overrides)?;
    cfg.resolve_paths(&config_base(path));
    man.seed = Some(cfg.train.seed);
    Ok(cfg)
}

fn load_records(root: &Path, labels: Option<&Path>, exclude_imputed: bool, man: &mut RunManifest) -> CliResult<Vec<ClipRecord>> {
    let labels = labels.map(Path::to_path_buf).unwrap_or_else(|| labels_path(root));
    if !labels.is_file() {
        return Err(CliError::new(
            Exit::Data,
            format!("labels file {} not found; expected clip_id,separate_stretching,tight_noon,hide", labels.display()),
        ));
    }
    man.hash_input(&labels);
    Ok(load_corpus(root, &labels, IngestOptions { exclude_imputed })?)
}

fn prepare(
    root: &Path,
    labels: Option<&Path>,
    seed: u64,
    exclude_imputed: bool,
    out: Option<&Path>,
    man: &mut RunManifest,
) -> CliResult<Output> {
    man.seed = Some(seed);
    let records = load_records(root, labels, exclude_imputed, man)?;
    let dist = class_distribution(&records)?;
    let split = split_dataset(&records, seed)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| root.join(SPLIT_MANIFEST));
    split.write_manifest(&path)?;
    man.output(&path);
    let hash = manifest_hash(&split.manifest_csv());
    let imputed: Vec<&str> = records.iter().filter(|r| r.imputed).map(|r| r.clip_id.as_str()).collect();
    let negatives: serde_json::Map<String, serde_json::Value> = RULES
        .iter()
        .zip(dist)
        .map(|(r, d)| (r.column.to_string(), json!(d)))
        .collect();
    let mut human = vec![
        format!("{} clips ({} train / {} test)", records.len(), split.train.len(), split.test.len()),
        format!(
            "negative-class fractions: {}",
            RULES
                .iter()
                .zip(dist)
                .map(|(r, d)| format!("{} {}%", r.short, (d * 100.0).round()))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    ];
    if !imputed.is_empty() {
        human.push(format!("imputed labels: {}", imputed.join(", ")));
    }
    human.push(format!("split manifest {} (sha256 {hash})", path.display()));
    Ok(Output {
        json: json!({
            "clips": records.len(),
            "train": split.train.len(),
            "test": split.test.len(),
            "negative_fraction": negatives,
            "imputed": imputed,
            "split_manifest": path,
            "split_manifest_sha256": hash,
        }),
        human,
    })
}

fn preprocess(config: &Path, root: Option<&Path>, man: &mut RunManifest) -> CliResult<Output> {
    let mut cfg = load_config(config, &[], man)?;
    if let Some(r) = root {
        cfg.data.root = r.to_path_buf();
    }
    let records = load_records(&cfg.data.root, None, cfg.data.exclude_imputed, man)?;
    let cache = TensorCache::new(&cfg.data.cache_dir, &cfg.dsp)?;
    man.output(&cfg.data.cache_dir);
    let results: Vec<(String, Result<bool, String>)> = records
        .par_iter()
        .map(|r| {
            if cache.contains(&r.clip_id) {
                tracing::info!(clip_id = %r.clip_id, "cache hit, skipped");
                return (r.clip_id.clone(), Ok(false));
            }
            let res = preprocess_clip(r, &cfg.dsp)
                .and_then(|t| cache.insert_if_absent(&r.clip_id, &t))
                .map_err(|e| e.to_string());
            (r.clip_id.clone(), res)
        })
        .collect();
    let written = results.iter().filter(|(_, r)| matches!(r, Ok(true))).count();
    let skipped = results.iter().filter(|(_, r)| matches!(r, Ok(false))).count();
    let failed: Vec<(String, String)> = results
        .into_iter()
        .filter_map(|(id, r)| r.err().map(|e| (id, e)))
        .collect();
    for (id, e) in &failed {
        tracing::error!(clip_id = %id, error = %e, "preprocessing failed");
    }
    let cached = records.iter().filter(|r| cache.contains(&r.clip_id)).count();
    let out = Output {
        json: json!({
            "clips": records.len(),
            "written": written,
            "skipped": skipped,
            "cached": cached,
            "failed": failed.iter().map(|(id, e)| json!({"clip_id": id, "error": e})).collect::<Vec<_>>(),
            "cache_dir": cfg.data.cache_dir,
            "dsp_config_hash": cfg.dsp.hash(),
        }),
        human: vec![format!(
            "{} clips: {written} written, {skipped} cached already, {} failed ({})",
            records.len(),
            failed.len(),
            cfg.data.cache_dir.display()
        )],
    };
    if failed.is_empty() {
        Ok(out)
    } else {
        Err(CliError::new(
            Exit::Data,
            format!(
                "{} of {} clips failed: {}",
                failed.len(),
                records.len(),
                failed.iter().map(|(id, e)| format!("{id} ({e})")).collect::<Vec<_>>().join("; ")
            ),
        ))
    }
}

/// Fails with the list of clips that have no cached tensor yet.
fn ensure_cached(cache: &TensorCache, records: &[ClipRecord]) -> CliResult<()> {
    let missing: Vec<&str> = records
        .iter()
        .filter(|r| !cache.contains(&r.clip_id))
        .map(|r| r.clip_id.as_str())
        .collect();
    if missing.is_empty() {
        return Ok(());
    }
    Err(CliError::new(
        Exit::Data,
        format!(
            "{} clip(s) have no cached tensor for this DSP config; run `tajweed preprocess` first: {}",
            missing.len(),
            missing.join(", ")
        ),
    ))
}

fn timestamp_dir(runs: &Path) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    let mut dir = runs.join(&stamp);
    let mut k = 1;
    while dir.exists() {
        dir = runs.join(format!("{stamp}-{k}"));
        k += 1;
    }
    dir
}

fn train(
    config: &Path,
    epochs: Option<usize>,
    overrides: &[String],
    run_dir: Option<&Path>,
    man: &mut RunManifest,
) -> CliResult<Output> {
    let mut all = overrides.to_vec();
    if let Some(e) = epochs {
        all.push(format!("epochs={e}"));
    }
    let cfg = load_config(config, &all, man)?;
    let records = load_records(&cfg.data.root, None, cfg.data.exclude_imputed, man)?;
    let split = split_dataset(&records, cfg.train.seed)?;
    let cache = TensorCache::new(&cfg.data.cache_dir, &cfg.dsp)?;
    ensure_cached(&cache, &records)?;
    let net = TajweedNet::build(&cfg.model, &cfg.backbone_init(), cfg.train.seed)?;

    let dir = run_dir.map(Path::to_path_buf).unwrap_or_else(|| timestamp_dir(&cfg.data.runs_dir));
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    split.write_manifest(&dir.join(SPLIT_MANIFEST))?;
    man.output(&dir);

    let outcome = trainer::train(&net, &split, &cache, &cfg.train, &cfg.dsp, &dir, |m| {
        tracing::info!(
            "epoch {:>3}  train {:.4}  test {:.4}  acc {}",
            m.epoch,
            m.train_loss,
            m.test_loss,
            m.test_accuracy.map(percent).join("/")
        );
    })?;
    let curves = export_learning_curves(&outcome.metrics, &dir)?;
    let ckpt = load_checkpoint(&outcome.final_checkpoint)?;
    let report = evaluate_checkpoint(
        &ckpt,
        &split.test,
        &cache,
        &cfg.train.pos_weights()?,
        cfg.train.threshold,
        cfg.train.batch_size,
        &manifest_hash(&split.manifest_csv()),
    )?;
    report.write(&dir.join(REPORT_FILE))?;
    let last = outcome.metrics.last().expect("at least one epoch");
    Ok(Output {
        json: json!({
            "run_dir": dir,
            "epochs": outcome.metrics.len(),
            "final": last,
            "best_epoch": outcome.best_epoch,
            "final_test_loss_is_minimum": curves.final_test_loss_is_minimum,
            "model_id": outcome.final_model_id,
            "report": report,
        }),
        human: vec![
            format!("run directory {}", dir.display()),
            format!(
                "final epoch {}: test loss {:.4}, accuracy {} (average {}%)",
                last.epoch,
                last.test_loss,
                RULES
                    .iter()
                    .zip(last.test_accuracy)
                    .map(|(r, a)| format!("{} {}%", r.short, percent(a)))
                    .collect::<Vec<_>>()
                    .join(", "),
                report.average_accuracy_percent
            ),
            format!("final test loss is the minimum: {}", curves.final_test_loss_is_minimum),
            format!("model id {}", outcome.final_model_id),
        ],
    })
}

fn sibling(checkpoint: &Path, name: &str) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(name)
}

fn evaluate(
    checkpoint: &Path,
    config: Option<&Path>,
    split_manifest: Option<&Path>,
    out: Option<&Path>,
    man: &mut RunManifest,
) -> CliResult<Output> {
    let config = config.map(Path::to_path_buf).unwrap_or_else(|| sibling(checkpoint, CONFIG_FILE));
    let cfg = load_config(&config, &[], man)?;
    man.hash_input(checkpoint);
    let ckpt = load_checkpoint(checkpoint)?;
    let records = load_records(&cfg.data.root, None, cfg.data.exclude_imputed, man)?;
    let manifest = split_manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| sibling(checkpoint, SPLIT_MANIFEST));
    man.hash_input(&manifest);
    let split = DatasetSplit::from_manifest(&records, &manifest, cfg.train.seed)?;
    // Tensors must match the front end the checkpoint was trained with.
    let cache = TensorCache::new(&cfg.data.cache_dir, &ckpt.header.dsp)?;
    ensure_cached(&cache, &split.test)?;
    let report = evaluate_checkpoint(
        &ckpt,
        &split.test,
        &cache,
        &cfg.train.pos_weights()?,
        cfg.train.threshold,
        cfg.train.batch_size,
        &manifest_hash(&split.manifest_csv()),
    )?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| sibling(checkpoint, REPORT_FILE));
    report.write(&path)?;
    man.output(&path);
    let mut human: Vec<String> = report
        .rules
        .iter()
        .zip(RULES)
        .map(|(r, rule)| {
            format!(
                "{:<8} accuracy {:>6}%  confusion [[TN {}, FP {}], [FN {}, TP {}]]",
                rule.short,
                r.accuracy_percent,
                r.confusion[0][0],
                r.confusion[0][1],
                r.confusion[1][0],
                r.confusion[1][1]
            )
        })
        .collect();
    human.push(format!(
        "average {}% over {} clips (subset accuracy {}%)",
        report.average_accuracy_percent,
        report.n_clips,
        percent(report.subset_accuracy)
    ));
    human.push(format!("report {}", path.display()));
    Ok(Output {
        json: serde_json::to_value(&report).expect("report serialises"),
        human,
    })
}

fn predict(checkpoint: &Path, wav: &Path, threshold: f64, man: &mut RunManifest) -> CliResult<Output> {
    man.hash_input(checkpoint);
    man.hash_input(wav);
    let ckpt = load_checkpoint(checkpoint)?;
    let w = read_wav(wav)?;
    let t = preprocess_waveform(&w, &ckpt.header.dsp)?;
    let x = stack_inputs(&[t], ckpt.net.device())?;
    let p = predict_batch(&ckpt.net, &x, threshold)?[0];
    let human = RULES
        .iter()
        .enumerate()
        .map(|(j, r)| format!("{:<8} p={:.6}  {}", r.short, p.probabilities[j], if p.verdicts[j] { "yes" } else { "no" }))
        .collect();
    Ok(Output {
        json: json!({
            "file": wav,
            "rules": RULES.iter().map(|r| r.column).collect::<Vec<_>>(),
            "probabilities": p.probabilities,
            "verdicts": p.verdicts,
            "model_id": ckpt.model_id,
            "dsp_config_hash": ckpt.header.dsp.hash(),
        }),
        human,
    })
}

fn serve(
    checkpoint: Option<&Path>,
    host: IpAddr,
    port: u16,
    allowed_origin: Option<&str>,
    man: &mut RunManifest,
) -> CliResult<Output> {
    if let Some(c) = checkpoint {
        man.hash_input(c);
    }
    let cfg = tajweed_server::ServeConfig {
        checkpoint: checkpoint.map(Path::to_path_buf),
        addr: SocketAddr::new(host, port),
        allowed_origin: allowed_origin.map(str::to_string),
        threshold: tajweed_server::DEFAULT_THRESHOLD,
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new(Exit::Runtime, e.to_string()))?;
    rt.block_on(tajweed_server::serve(&cfg, async {
        let _ = tokio::signal::ctrl_c().await;
    }))?;
    Ok(Output {
        json: json!({"stopped": true}),
        human: vec!["server stopped".into()],
    })
}

/// Runs one parsed command, prints its output and appends its manifest entry.
pub fn run(cli: Cli, raw_args: Vec<String>) -> ExitCode {
    let started = Instant::now();
    let mut man = RunManifest::new(cli.command.name(), raw_args);
    let result = match &cli.command {
        Command::Prepare {
            root,
            labels,
            seed,
            exclude_imputed,
            manifest,
        } => prepare(root, labels.as_deref(), *seed, *exclude_imputed, manifest.as_deref(), &mut man),
        Command::Preprocess { config, root } => preprocess(config, root.as_deref(), &mut man),
        Command::Train {
            config,
            epochs,
            overrides,
            run_dir,
        } => train(config, *epochs, overrides, run_dir.as_deref(), &mut man),
        Command::Evaluate {
            checkpoint,
            config,
            split_manifest,
            out,
        } => evaluate(checkpoint, config.as_deref(), split_manifest.as_deref(), out.as_deref(), &mut man),
        Command::Predict {
            checkpoint,
            wav,
            threshold,
        } => predict(checkpoint, wav, *threshold, &mut man),
        Command::Serve {
            checkpoint,
            port,
            host,
            allowed_origin,
        } => serve(checkpoint.as_deref(), *host, *port, allowed_origin.as_deref(), &mut man),
    };
    let code = match &result {
        Ok(out) => {
            if cli.json {
                println!("{}", out.json);
            } else {
                for line in &out.human {
                    println!("{line}");
                }
            }
            0
        }
        Err(e) => {
            if cli.json {
                println!("{}", json!({"error": e.msg, "exit_code": e.exit as i32}));
            }
            eprintln!("error: {}", e.msg);
            e.exit as i32
        }
    };
    man.exit_status = code;
    man.duration_s = started.elapsed().as_secs_f64();
    if let Err(e) = man.append_to(&cli.manifest_log) {
        eprintln!("warning: could not append to {}: {e}", cli.manifest_log.display());
    }
    ExitCode::from(code as u8)
}

//! Command-line interface. Each subcommand writes its outputs into a run
//! directory together with a `manifest.json`.

use std::path::{Path, PathBuf};

use chrono::Utc;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use stgat_core::data::{synthesize, SynthConfig};
use stgat_core::eval::{score, Method, TrainedModel};
use stgat_core::gradcheck::{gradient_suite, CheckResult, GRADCHECK_TOLERANCE};
use stgat_core::model::{BaselineKind, ModelKind, FULL_MODEL};
use stgat_core::pipeline::prepare_with_scaler;
use stgat_core::Primitive;

use crate::config::{EffectiveConfig, FileConfig, Overrides};
use crate::csv_io;
use crate::error::{Error, Result};
use crate::harness::{self, Experiment, ExperimentOutput};
use crate::manifest::{relative, run_dir, sha256_file, timestamp, RunManifest, StopRecord};
use crate::model_file;
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "stgat", version, about = "Calibrate low-cost ozone sensor nodes with STGAT-Fuser")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sensor-node corpus.
    Synth {
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        len: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train one model on a corpus.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory (default: a new directory under the artifact root).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Architecture to train.
        #[arg(long, value_enum, default_value_t = ModelArg::StgatFuser, ignore_case = true)]
        model: ModelArg,
    },
    /// Score a saved model on the test split of a corpus.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Model file, or a run directory containing `model.stgat`.
        #[arg(long)]
        model: PathBuf,
        /// Scaler file (default: `scaler.json` next to the model or in a
        /// parent directory).
        #[arg(long)]
        scaler: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the four-row ablation study.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds (default 1,2,3,4,5).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run comparison methods.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, ignore_case = true)]
        kind: KindArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Corrupt the backward rule of one primitive (for testing the
        /// checker itself).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    #[value(name = "STGAT-Fuser")]
    StgatFuser,
    #[value(name = "MLP")]
    Mlp,
    #[value(name = "CNN")]
    Cnn,
    #[value(name = "LSTM")]
    Lstm,
    #[value(name = "MLR")]
    Mlr,
}

impl ModelArg {
    fn method(self) -> Method {
        match self {
            ModelArg::StgatFuser => Method::Network(ModelKind::StgatFuser),
            ModelArg::Mlp => Method::Network(ModelKind::Mlp),
            ModelArg::Cnn => Method::Network(ModelKind::Cnn),
            ModelArg::Lstm => Method::Network(ModelKind::Lstm),
            ModelArg::Mlr => Method::Mlr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    #[value(name = "MLR")]
    Mlr,
    #[value(name = "MLP")]
    Mlp,
    #[value(name = "CNN")]
    Cnn,
    #[value(name = "LSTM")]
    Lstm,
    /// MLR, MLP, CNN, LSTM and STGAT-Fuser.
    #[value(name = "all")]
    All,
}

/// What a command produced, for printing and for tests.
#[derive(Clone, Debug, PartialEq)]
pub struct CommandOutput {
    /// Run directory, or the corpus file for `synth`.
    pub path: PathBuf,
    /// Text for standard output.
    pub summary: String,
}

/// Metrics written by `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct Evaluation {
    pub method: String,
    pub model_sha256: String,
    pub test_windows: usize,
    /// Test MSE in scaled (min-max) units.
    pub scaled_mse: f64,
    /// Test RMSE in µg/m³.
    pub rmse_ug_m3: f64,
    /// Test MAE in µg/m³.
    pub mae_ug_m3: f64,
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<CommandOutput> {
    match cli.command {
        Command::Synth { out, len, seed } => synth(&out, len, seed, argv),
        Command::Train {
            data,
            config,
            out,
            seed,
            model,
        } => train(&data, config.as_deref(), out.as_deref(), seed, model.method(), argv),
        Command::Evaluate {
            data,
            model,
            scaler,
            out,
        } => evaluate(&data, &model, scaler.as_deref(), out.as_deref(), argv),
        Command::Ablate {
            data,
            config,
            seeds,
            out,
        } => multi(&data, config.as_deref(), seeds, out.as_deref(), None, argv),
        Command::Baseline {
            data,
            kind,
            config,
            seeds,
            out,
        } => multi(&data, config.as_deref(), seeds, out.as_deref(), Some(kind), argv),
        Command::Gradcheck {
            config,
            seed,
            out,
            inject_fault,
        } => gradcheck(config.as_deref(), seed, out.as_deref(), inject_fault.as_deref(), argv),
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    path.map_or_else(|| Ok(FileConfig::default()), FileConfig::load)
}

fn finish(manifest: &mut RunManifest, dir: &Path, artifacts: &[PathBuf]) -> Result<()> {
    manifest.artifacts = artifacts.iter().map(|p| relative(p, dir)).collect();
    manifest.finished_at = timestamp(Utc::now());
    manifest.write(dir)?;
    Ok(())
}

fn new_manifest(argv: Vec<String>, config: serde_json::Value, corpus: String, seeds: Vec<u64>, layout: &str) -> RunManifest {
    RunManifest {
        command: argv,
        config,
        corpus_sha256: corpus,
        seeds,
        started_at: timestamp(Utc::now()),
        finished_at: String::new(),
        artifacts: Vec::new(),
        stop_reasons: Vec::new(),
        layout: layout.into(),
        notes: Vec::new(),
    }
}

fn config_json(cfg: &EffectiveConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn synth(out: &Path, len: usize, seed: u64, argv: Vec<String>) -> Result<CommandOutput> {
    let cfg = SynthConfig {
        len,
        seed,
        ..SynthConfig::default()
    };
    let series = synthesize(&cfg)?;
    let started = timestamp(Utc::now());
    let dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    csv_io::write_csv(out, &series)?;
    let sha = sha256_file(out)?;
    let file_name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus.csv".into());
    let mut manifest = new_manifest(
        argv,
        serde_json::to_value(&cfg).expect("synth config serializes"),
        sha.clone(),
        vec![seed],
        "<corpus>.csv with <corpus>.csv.manifest.json beside it",
    );
    manifest.started_at = started;
    manifest.artifacts = vec![file_name.clone()];
    manifest.finished_at = timestamp(Utc::now());
    manifest.write_named(&dir, &format!("{file_name}.manifest.json"))?;
    Ok(CommandOutput {
        path: out.to_path_buf(),
        summary: format!("wrote {} rows to {} (sha256 {sha})", series.len(), out.display()),
    })
}

struct Corpus {
    series: stgat_core::data::RawSeries,
    sha256: String,
    dropped: usize,
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let loaded = csv_io::read_csv(path)?;
    if loaded.dropped_rows > 0 {
        log::warn!("{}: dropped {} rows with missing values", path.display(), loaded.dropped_rows);
    }
    Ok(Corpus {
        series: loaded.series,
        sha256: sha256_file(path)?,
        dropped: loaded.dropped_rows,
    })
}

fn dropped_note(c: &Corpus) -> String {
    format!("rows dropped for missing values: {}", c.dropped)
}

fn train(
    data: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
    method: Method,
    argv: Vec<String>,
) -> Result<CommandOutput> {
    let file = load_file_config(config)?;
    let corpus = load_corpus(data)?;
    let overrides = Overrides { seed, seeds: None };
    let mut cfg = EffectiveConfig::resolve(&file, &overrides, corpus.series.num_channels())?;
    cfg.seeds.truncate(1);
    let prepared = stgat_core::pipeline::prepare(&corpus.series, &cfg.data)?;

    let dir = run_dir(out, Utc::now(), &cfg.short_hash())?;
    let mut manifest = new_manifest(
        argv,
        config_json(&cfg),
        corpus.sha256.clone(),
        cfg.seeds.clone(),
        "scaler.json, model.stgat, history.csv (networks), metrics.json",
    );
    manifest.notes.push(dropped_note(&corpus));
    let scaler_path = dir.join(harness::SCALER_FILE);
    harness::write_json(&scaler_path, &prepared.scaler)?;
    let run = harness::run_seed(method, &cfg.model, &cfg.train, &cfg.data, &prepared, cfg.seed(), &dir)?;
    if let Some(h) = &run.history {
        manifest.stop_reasons.push(StopRecord {
            method: method.name().into(),
            seed: cfg.seed(),
            stop_reason: h.stop_reason.name().into(),
            epochs_run: h.epochs.len(),
            best_epoch: h.best_epoch,
        });
    }
    let mut artifacts = vec![scaler_path];
    artifacts.extend(run.artifacts);
    finish(&mut manifest, &dir, &artifacts)?;

    let m = &run.metrics;
    let mut summary = format!(
        "{} seed {}: test RMSE {:.4} µg/m³, MAE {:.4} µg/m³, scaled MSE {:.6e}\n",
        method.name(),
        m.seed,
        m.rmse,
        m.mae,
        m.scaled_mse
    );
    if let Some(h) = &run.history {
        summary.push_str(&format!(
            "stopped: {} after {} epochs (best epoch {}, val MSE {:.6e})\n",
            h.stop_reason.name(),
            h.epochs.len(),
            h.best_epoch,
            h.best_val_mse
        ));
    }
    summary.push_str(&format!("artifacts in {}", dir.display()));
    Ok(CommandOutput { path: dir, summary })
}

/// `scaler.json` beside the model file or in one of its ancestors.
fn find_scaler(model_path: &Path) -> Option<PathBuf> {
    model_path
        .ancestors()
        .skip(1)
        .take(3)
        .map(|d| d.join(harness::SCALER_FILE))
        .find(|p| p.is_file())
}

fn evaluate(
    data: &Path,
    model: &Path,
    scaler: Option<&Path>,
    out: Option<&Path>,
    argv: Vec<String>,
) -> Result<CommandOutput> {
    let model_path = if model.is_dir() {
        model.join(harness::MODEL_FILE)
    } else {
        model.to_path_buf()
    };
    let saved = model_file::load(&model_path)?;
    let scaler_path = match scaler {
        Some(p) => p.to_path_buf(),
        None => find_scaler(&model_path).ok_or_else(|| {
            Error::Config(format!(
                "no {} found next to {}; pass --scaler",
                harness::SCALER_FILE,
                model_path.display()
            ))
        })?,
    };
    let scaler = harness::read_scaler(&scaler_path)?;
    let corpus = load_corpus(data)?;

    let expected = model_file::expected_channels(&saved.model, saved.data.window_len);
    if expected != corpus.series.num_channels() || scaler.num_channels() != expected {
        return Err(Error::Conflict(format!(
            "model expects {expected} channels, scaler has {}, corpus has {}",
            scaler.num_channels(),
            corpus.series.num_channels()
        )));
    }
    if scaler.channel_names != corpus.series.channel_names() {
        return Err(Error::Conflict(format!(
            "scaler channels {:?} differ from corpus channels {:?}",
            scaler.channel_names,
            corpus.series.channel_names()
        )));
    }
    let prepared = prepare_with_scaler(&corpus.series, &saved.data, &scaler)?;
    let pred = saved.model.predict_dataset(&prepared.test)?;
    let m = score(0, &pred, &prepared.test, &scaler)?;
    let method = match &saved.model {
        TrainedModel::Network(n) => n.kind().name(),
        TrainedModel::Linear(_) => BaselineKind::Mlr.name(),
    };
    let evaluation = Evaluation {
        method: method.into(),
        model_sha256: sha256_file(&model_path)?,
        test_windows: prepared.test.len(),
        scaled_mse: m.scaled_mse,
        rmse_ug_m3: m.rmse,
        mae_ug_m3: m.mae,
    };

    let dir = run_dir(out, Utc::now(), &evaluation.model_sha256[..8])?;
    let mut manifest = new_manifest(
        argv,
        serde_json::json!({
            "model": model_path.display().to_string(),
            "scaler": scaler_path.display().to_string(),
            "data": saved.data,
        }),
        corpus.sha256.clone(),
        Vec::new(),
        "evaluation.json",
    );
    manifest.notes.push(dropped_note(&corpus));
    let eval_path = dir.join("evaluation.json");
    harness::write_json(&eval_path, &evaluation)?;
    finish(&mut manifest, &dir, &[eval_path])?;
    let summary = format!(
        "{method} on {} test windows\n  scaled MSE   {:.6e}\n  RMSE (µg/m³) {:.4}\n  MAE (µg/m³)  {:.4}\nartifacts in {}",
        evaluation.test_windows,
        evaluation.scaled_mse,
        evaluation.rmse_ug_m3,
        evaluation.mae_ug_m3,
        dir.display()
    );
    Ok(CommandOutput { path: dir, summary })
}

/// `ablate` when `kind` is `None`, otherwise `baseline`.
fn multi(
    data: &Path,
    config: Option<&Path>,
    seeds: Option<Vec<u64>>,
    out: Option<&Path>,
    kind: Option<KindArg>,
    argv: Vec<String>,
) -> Result<CommandOutput> {
    let file = load_file_config(config)?;
    let corpus = load_corpus(data)?;
    let overrides = Overrides { seed: None, seeds };
    let cfg = EffectiveConfig::resolve(&file, &overrides, corpus.series.num_channels())?;
    let prepared = stgat_core::pipeline::prepare(&corpus.series, &cfg.data)?;

    let (title, exps): (&str, Vec<Experiment>) = match kind {
        None => ("Ablation study", harness::ablation_experiments(&cfg.model)),
        Some(k) => {
            let (kinds, full) = match k {
                KindArg::Mlr => (vec![BaselineKind::Mlr], false),
                KindArg::Mlp => (vec![BaselineKind::Mlp], false),
                KindArg::Cnn => (vec![BaselineKind::Cnn], false),
                KindArg::Lstm => (vec![BaselineKind::Lstm], false),
                KindArg::All => (BaselineKind::ALL.to_vec(), true),
            };
            ("Comparison with baselines", harness::baseline_experiments(&kinds, &cfg.model, full))
        }
    };

    let dir = run_dir(out, Utc::now(), &cfg.short_hash())?;
    let mut manifest = new_manifest(argv, config_json(&cfg), corpus.sha256.clone(), cfg.seeds.clone(), harness::LAYOUT);
    manifest.notes.push(dropped_note(&corpus));
    let results = harness::run_all(&exps, &cfg.train, &cfg.data, &prepared, &cfg.seeds, &dir)?;
    let rows: Vec<_> = results.iter().map(|r| r.row.clone()).collect();
    let reports = report::write_reports(&dir, title, &rows)?;

    let mut artifacts: Vec<PathBuf> = Vec::new();
    for ExperimentOutput { stops, artifacts: a, .. } in results {
        manifest.stop_reasons.extend(stops);
        artifacts.extend(a);
    }
    artifacts.extend(reports);
    finish(&mut manifest, &dir, &artifacts)?;
    let text = report::render_text(title, &rows);
    Ok(CommandOutput {
        path: dir.clone(),
        summary: format!("{text}\nartifacts in {}", dir.display()),
    })
}

fn render_checks(results: &[CheckResult]) -> String {
    let mut out = format!("{:<12} {:>14} {:>12}  status\n", "check", "max_rel_err", "coordinates");
    for r in results {
        out.push_str(&format!(
            "{:<12} {:>14.3e} {:>12}  {}\n",
            r.name,
            r.max_rel_err,
            r.coordinates,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out.push_str(&format!("tolerance: max relative error < {GRADCHECK_TOLERANCE:e}\n"));
    out
}

fn gradcheck(
    config: Option<&Path>,
    seed: u64,
    out: Option<&Path>,
    fault: Option<&str>,
    argv: Vec<String>,
) -> Result<CommandOutput> {
    let file = load_file_config(config)?;
    let overrides = Overrides {
        seed: Some(seed),
        seeds: None,
    };
    let cfg = EffectiveConfig::resolve(&file, &overrides, stgat_core::data::CHANNEL_NAMES.len())?;
    let fault = fault
        .map(|name| {
            Primitive::from_name(name).ok_or_else(|| Error::Config(format!("unknown primitive `{name}` for --inject-fault")))
        })
        .transpose()?;
    let results = gradient_suite(&cfg.model, seed, fault)?;

    let dir = run_dir(out, Utc::now(), &cfg.short_hash())?;
    let mut manifest = new_manifest(argv, config_json(&cfg), String::new(), vec![seed], "gradcheck.csv");
    if let Some(p) = fault {
        manifest.notes.push(format!("injected fault in backward rule of `{}`", p.name()));
    }
    let csv_path = dir.join("gradcheck.csv");
    let mut text = String::from("check,max_rel_err,coordinates,passed\n");
    for r in &results {
        text.push_str(&format!("{},{},{},{}\n", r.name, r.max_rel_err, r.coordinates, r.passed()));
    }
    std::fs::write(&csv_path, text).map_err(|e| Error::io(&csv_path, e))?;
    finish(&mut manifest, &dir, &[csv_path])?;

    let table = render_checks(&results);
    let failed: Vec<String> = results.iter().filter(|r| !r.passed()).map(|r| r.name.to_string()).collect();
    if !failed.is_empty() {
        println!("{table}");
        return Err(Error::GradcheckFailed(failed));
    }
    Ok(CommandOutput {
        path: dir,
        summary: format!("{table}all checks passed ({} including {FULL_MODEL})", results.len()),
    })
}

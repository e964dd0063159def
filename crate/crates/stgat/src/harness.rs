//! Seeded multi-run experiments and their on-disk artifacts.
//!
//! Layout under an output directory:
//!
//! ```text
//! scaler.json
//! <method-slug>/seed-<s>/metrics.json
//! <method-slug>/seed-<s>/history.csv      (trained networks only)
//! <method-slug>/seed-<s>/model.stgat
//! report.csv, report.txt
//! ```
//!
//! Report rows are always aggregated from the `metrics.json` files just
//! written, never from in-memory values, so the report can be checked
//! against the artifacts alone.

use std::fs;
use std::path::{Path, PathBuf};

use stgat_core::data::ScalerParams;
use stgat_core::eval::{run_once, Method, ReportRow, RunMetrics};
use stgat_core::model::{ablation_variants, BaselineKind, ModelConfig, ModelKind, FULL_MODEL};
use stgat_core::pipeline::{DataConfig, PreparedData};
use stgat_core::train::{TrainConfig, TrainHistory};

use crate::error::{Error, Result};
use crate::manifest::StopRecord;
use crate::model_file::{self, SavedModel};

pub const METRICS_FILE: &str = "metrics.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const MODEL_FILE: &str = "model.stgat";
pub const SCALER_FILE: &str = "scaler.json";

/// Human-readable description of the multi-run layout, for manifests.
pub const LAYOUT: &str = "scaler.json; <method-slug>/seed-<s>/{metrics.json,history.csv,model.stgat}; report.csv; report.txt";

/// One report row to produce: a label, what to run and with which model
/// settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub label: String,
    pub method: Method,
    pub model: ModelConfig,
}

/// Lower-case, filesystem-safe form of a report label.
pub fn slug(label: &str) -> String {
    let mut out = String::new();
    for ch in label.chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() && ch != '/' {
            out.push('-');
        }
    }
    out.trim_end_matches('-').to_string()
}

pub fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["epoch", "train_mse", "val_mse"]).map_err(fmt)?;
    for r in &history.epochs {
        w.write_record([r.epoch.to_string(), r.train_mse.to_string(), r.val_mse.to_string()])
            .map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    json.push(b'\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_scaler(path: &Path) -> Result<ScalerParams> {
    read_json(path)
}

/// Everything one experiment left on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub row: ReportRow,
    pub stops: Vec<StopRecord>,
    pub artifacts: Vec<PathBuf>,
}

/// Artifacts of one seeded run.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutput {
    pub metrics: RunMetrics,
    pub history: Option<TrainHistory>,
    pub artifacts: Vec<PathBuf>,
}

/// Runs `method` once with `seed` and writes its artifacts into `dir`.
pub fn run_seed(
    method: Method,
    model: &ModelConfig,
    train: &TrainConfig,
    data_cfg: &DataConfig,
    data: &PreparedData,
    seed: u64,
    dir: &Path,
) -> Result<SeedOutput> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let label = method.name();
    let outcome = run_once(method, model, train, data, seed, |r| {
        log::debug!("{label} seed {seed} epoch {}: train {:.6e} val {:.6e}", r.epoch, r.train_mse, r.val_mse);
    })
    .map_err(|e| Error::Run {
        method: label.into(),
        seed,
        source: Box::new(e.into()),
    })?;

    let mut artifacts = Vec::new();
    let model_path = dir.join(MODEL_FILE);
    model_file::save(
        &model_path,
        &SavedModel {
            model: outcome.model,
            data: data_cfg.clone(),
        },
    )?;
    artifacts.push(model_path);
    if let Some(h) = &outcome.history {
        let p = dir.join(HISTORY_FILE);
        write_history(&p, h)?;
        artifacts.push(p);
    }
    let metrics_path = dir.join(METRICS_FILE);
    write_json(&metrics_path, &outcome.metrics)?;
    artifacts.push(metrics_path);
    Ok(SeedOutput {
        metrics: outcome.metrics,
        history: outcome.history,
        artifacts,
    })
}

/// Trains one model per seed (MLR: a single run with the first seed) and
/// aggregates the stored per-run metrics into a report row.
pub fn multi_run(
    exp: &Experiment,
    train: &TrainConfig,
    data_cfg: &DataConfig,
    data: &PreparedData,
    seeds: &[u64],
    out: &Path,
) -> Result<ExperimentOutput> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let seeds = if exp.method == Method::Mlr { &seeds[..1] } else { seeds };
    let mut stops = Vec::new();
    let mut artifacts = Vec::new();
    let mut metric_files = Vec::new();
    for &seed in seeds {
        let dir = out.join(slug(&exp.label)).join(format!("seed-{seed}"));
        let start = std::time::Instant::now();
        let run = run_seed(exp.method, &exp.model, train, data_cfg, data, seed, &dir)?;
        log::info!(
            "{} seed {seed}: rmse {:.4} mae {:.4} ({:.1} s)",
            exp.label,
            run.metrics.rmse,
            run.metrics.mae,
            start.elapsed().as_secs_f64()
        );
        if let Some(h) = &run.history {
            stops.push(StopRecord {
                method: exp.label.clone(),
                seed,
                stop_reason: h.stop_reason.name().into(),
                epochs_run: h.epochs.len(),
                best_epoch: h.best_epoch,
            });
        }
        metric_files.push(dir.join(METRICS_FILE));
        artifacts.extend(run.artifacts);
    }
    let runs = metric_files.iter().map(|p| read_json::<RunMetrics>(p)).collect::<Result<Vec<_>>>()?;
    let row = ReportRow::aggregate(&exp.label, &runs)?;
    Ok(ExperimentOutput { row, stops, artifacts })
}

/// The four ablation variants in the order of the published ablation table.
pub fn ablation_experiments(base: &ModelConfig) -> Vec<Experiment> {
    let order = [
        stgat_core::model::WITHOUT_TEMPORAL,
        stgat_core::model::WITHOUT_SPATIAL,
        stgat_core::model::WITHOUT_BOTH,
        FULL_MODEL,
    ];
    let variants = ablation_variants(base);
    order
        .iter()
        .map(|label| {
            let (_, cfg) = variants.iter().find(|(l, _)| l == label).expect("variant exists");
            Experiment {
                label: (*label).to_string(),
                method: Method::Network(ModelKind::StgatFuser),
                model: cfg.clone(),
            }
        })
        .collect()
}

/// Baseline rows in the order of the published comparison table, with the
/// full model last when `include_full` is set.
pub fn baseline_experiments(kinds: &[BaselineKind], base: &ModelConfig, include_full: bool) -> Vec<Experiment> {
    let mut exps: Vec<Experiment> = kinds
        .iter()
        .map(|&k| Experiment {
            label: k.name().into(),
            method: Method::from(k),
            model: base.clone(),
        })
        .collect();
    if include_full {
        let mut full = base.clone();
        full.use_temporal_gat = true;
        full.use_spatial_gat = true;
        exps.push(Experiment {
            label: FULL_MODEL.into(),
            method: Method::Network(ModelKind::StgatFuser),
            model: full,
        });
    }
    exps
}

/// Runs every experiment over `seeds`, writing `scaler.json` and one
/// artifact tree per experiment under `out`.
pub fn run_all(
    exps: &[Experiment],
    train: &TrainConfig,
    data_cfg: &DataConfig,
    data: &PreparedData,
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<ExperimentOutput>> {
    let scaler_path = out.join(SCALER_FILE);
    write_json(&scaler_path, &data.scaler)?;
    let mut results = Vec::with_capacity(exps.len());
    for exp in exps {
        results.push(multi_run(exp, train, data_cfg, data, seeds, out)?);
    }
    if let Some(first) = results.first_mut() {
        first.artifacts.insert(0, scaler_path);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_path_safe() {
        assert_eq!(slug("STGAT-Fuser"), "stgat-fuser");
        assert_eq!(slug("w/o Temporal GATv2"), "wo-temporal-gatv2");
        assert_eq!(slug("w/o Both GATv2"), "wo-both-gatv2");
        assert_eq!(slug("MLR"), "mlr");
    }

    #[test]
    fn ablation_rows_follow_table_order() {
        let labels: Vec<String> = ablation_experiments(&ModelConfig::default()).into_iter().map(|e| e.label).collect();
        assert_eq!(labels, ["w/o Temporal GATv2", "w/o Spatial GATv2", "w/o Both GATv2", "STGAT-Fuser"]);
    }

    #[test]
    fn baseline_rows_end_with_full_model() {
        let exps = baseline_experiments(&BaselineKind::ALL, &ModelConfig::default(), true);
        let labels: Vec<&str> = exps.iter().map(|e| e.label.as_str()).collect();
        assert_eq!(labels, ["MLR", "MLP", "CNN", "LSTM", "STGAT-Fuser"]);
        assert_eq!(exps[0].method, Method::Mlr);
    }
}

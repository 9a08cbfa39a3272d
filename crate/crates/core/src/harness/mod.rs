//! End-to-end experiment grids: pretrain or load, build target splits,
//! adapt, evaluate on the held-out target test split, and report.

mod config;
mod report;

use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::adaptation::{apply_meta_input, bn_adapt, optimize_meta_input, optimize_meta_input_unsupervised, AdaptConfig, MetaInput};
use crate::data::{corrupt, measure_psnr, subsample, synth_shift, Corruption, CorruptionSpec, Dataset};
use crate::error::{Error, Result};
use crate::model::{argmax, load_model, predict, pretrain, Model};

pub use config::{resolve_data_path, DatasetSpec, ExperimentConfig, Method, ModelSource, Scenario, DATA_DIR_ENV};
pub use report::{parse_report, render_report, ratio_label, CellRecord, ExperimentReport, ReportFormat, SCHEMA_VERSION};

/// Top-1 accuracy in percent, optionally after adding a meta input (clamped
/// iff it was trained clamped).
pub fn evaluate_accuracy(model: &Model, ds: &Dataset, w: Option<&MetaInput>) -> Result<f64> {
    let labels = ds.labels_required("evaluate_accuracy")?;
    let probs = match w {
        Some(w) => predict(model, &apply_meta_input(ds, w, w.trained_on.clamp_transformed)?)?,
        None => predict(model, ds)?,
    };
    let correct = labels.iter().enumerate().filter(|&(i, &y)| argmax(probs.row(i)) == y).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// 63-bit seed derived from the run seed and a cell coordinate string.
pub fn derive_seed(seed: u64, coords: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}|{coords}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) >> 1
}

fn load_model_for(cfg: &ExperimentConfig) -> Result<Model> {
    match &cfg.model {
        ModelSource::Checkpoint { path } => load_model(resolve_data_path(path)),
        ModelSource::Pretrain { spec, train, init_seed } => {
            let source = config::load_dataset("source", cfg.source.as_ref().expect("validated"))?;
            let model = Model::build(spec.clone(), *init_seed)?;
            Ok(pretrain(model, &source, train)?.0)
        }
    }
}

/// The target domain before any grid corruption, plus a note of the
/// substitution it represents.
fn target_split(cfg: &ExperimentConfig, field: &str, spec: &DatasetSpec) -> Result<Dataset> {
    let mut ds = config::load_dataset(field, spec)?;
    if let Some(shift) = &cfg.target_shift {
        ds = synth_shift(&ds, shift)?;
    }
    if let Some(c) = &cfg.target_corruption {
        let spec = CorruptionSpec {
            corruption: c.clone(),
            seed: derive_seed(cfg.seed, &format!("{field}|target_corruption")),
        };
        ds = corrupt(&ds, &spec)?.0;
    }
    Ok(ds)
}

fn substitution(cfg: &ExperimentConfig) -> Option<String> {
    let mut parts = Vec::new();
    if let Some(s) = &cfg.target_shift {
        parts.push(format!("synthetic shift {s:?}"));
    }
    if let Some(c) = &cfg.target_corruption {
        parts.push(format!("corruption {}", c.label()));
    }
    (!parts.is_empty()).then(|| format!("clean source -> target with {}", parts.join(" and ")))
}

struct Group<'a> {
    label: String,
    train: &'a Dataset,
    test: &'a Dataset,
    psnr: Option<f64>,
}

/// Runs every (corruption × ratio × method) cell. Configuration, model and
/// dataset errors abort the run; failures inside a cell are recorded in the
/// report and the run continues.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let model = load_model_for(cfg)?;
    let train = target_split(cfg, "target_train", &cfg.target_train)?;
    let test = target_split(cfg, "target_test", &cfg.target_test)?;
    test.labels_required("run_experiment")?;
    let mut report = ExperimentReport {
        schema_version: SCHEMA_VERSION,
        name: cfg.name.clone(),
        scenario: cfg.scenario,
        seed: cfg.seed,
        substitution: substitution(cfg),
        model_params_checksum: model.params_checksum(),
        model_bn_checksum: model.bn_checksum(),
        config: cfg.clone(),
        cells: Vec::new(),
    };
    let mut methods: Vec<Method> = vec![Method::Baseline];
    methods.extend(cfg.methods.iter().copied().filter(|&m| m != Method::Baseline));
    methods.dedup();

    let grid: Vec<Option<&Corruption>> = if cfg.corruptions.is_empty() {
        vec![None]
    } else {
        cfg.corruptions.iter().map(Some).collect()
    };
    for corruption in grid {
        let label = corruption.map_or_else(|| "none".to_string(), Corruption::label);
        let built = corruption
            .map(|c| -> Result<(Dataset, Dataset, f64)> {
                let spec = |split: &str| CorruptionSpec {
                    corruption: c.clone(),
                    seed: derive_seed(cfg.seed, &format!("{label}|{split}")),
                };
                let tr = corrupt(&train, &spec("train"))?.0;
                let te = corrupt(&test, &spec("test"))?.0;
                let psnr = measure_psnr(&test, &te)?.mean_db;
                Ok((tr, te, psnr))
            })
            .transpose();
        let owned;
        let group = match built {
            Ok(Some(parts)) => {
                owned = parts;
                Group {
                    label,
                    train: &owned.0,
                    test: &owned.1,
                    psnr: Some(owned.2),
                }
            }
            Ok(None) => Group {
                label,
                train: &train,
                test: &test,
                psnr: None,
            },
            Err(e) => {
                log::error!("corruption {label}: {e}");
                for repeat in 0..cfg.repeats {
                    for &m in &methods {
                        let ratios: Vec<Option<f64>> = if m == Method::Baseline {
                            vec![None]
                        } else {
                            cfg.ratios.iter().map(|&r| Some(r)).collect()
                        };
                        for ratio in ratios {
                            let mut cell = CellRecord::new(cfg.scenario, &label, ratio, m, repeat, cfg.seed, &model);
                            cell.failure = Some(e.to_string());
                            report.cells.push(cell);
                        }
                    }
                }
                continue;
            }
        };
        for repeat in 0..cfg.repeats {
            run_group(cfg, &model, &group, &methods, repeat, &mut report);
        }
    }
    Ok(report)
}

fn run_group(cfg: &ExperimentConfig, model: &Model, group: &Group, methods: &[Method], repeat: usize, report: &mut ExperimentReport) {
    let base_seed = derive_seed(cfg.seed, &format!("{}|baseline|{repeat}", group.label));
    let mut cell = CellRecord::new(cfg.scenario, &group.label, None, Method::Baseline, repeat, base_seed, model);
    let started = Instant::now();
    let outcome = evaluate_accuracy(model, group.test, None).map_err(|e| e.to_string());
    finish(&mut cell, group, outcome.map(|a| (a, None, model)), model, started);
    report.cells.push(cell);

    for &ratio in &cfg.ratios {
        let seed = derive_seed(cfg.seed, &format!("{}|{ratio}|{repeat}", group.label));
        let subset = subsample(group.train, ratio, seed);
        for &method in methods.iter().filter(|&&m| m != Method::Baseline) {
            let mut cell = CellRecord::new(cfg.scenario, &group.label, Some(ratio), method, repeat, seed, model);
            let started = Instant::now();
            let adapt = AdaptConfig {
                seed,
                ..cfg.adapt.clone()
            };
            let outcome = match &subset {
                Ok(subset) => {
                    cell.adapt_samples = subset.len();
                    cell.adapt_checksum = Some(subset.checksum());
                    run_method(method, model, subset, group.test, &adapt, ratio, &mut cell).map_err(|e| e.to_string())
                }
                Err(e) => Err(e.to_string()),
            };
            match outcome {
                Ok((acc, w, adapted)) => finish(&mut cell, group, Ok((acc, w.as_ref(), &adapted)), model, started),
                Err(e) => finish(&mut cell, group, Err(e), model, started),
            }
            report.cells.push(cell);
        }
    }
}

fn run_method(
    method: Method,
    model: &Model,
    subset: &Dataset,
    test: &Dataset,
    adapt: &AdaptConfig,
    ratio: f64,
    cell: &mut CellRecord,
) -> Result<(f64, Option<MetaInput>, Model)> {
    match method {
        Method::Baseline => unreachable!("baseline runs once per group"),
        Method::MetaInput => {
            let (mut w, log) = optimize_meta_input(model, subset, adapt)?;
            w.trained_on.ratio = Some(ratio);
            cell.final_loss = log.epoch_losses.last().copied();
            Ok((evaluate_accuracy(model, test, Some(&w))?, Some(w), model.clone()))
        }
        Method::MetaUnsup => {
            let mut unlabeled = subset.clone();
            unlabeled.labels = None;
            let (mut w, log) = optimize_meta_input_unsupervised(model, &unlabeled, adapt)?;
            w.trained_on.ratio = Some(ratio);
            cell.final_loss = log.epoch_losses.last().copied();
            cell.selected_fraction = w.trained_on.selected_fraction;
            Ok((evaluate_accuracy(model, test, Some(&w))?, Some(w), model.clone()))
        }
        Method::BnAdapt => {
            let adapted = bn_adapt(model, subset)?;
            Ok((evaluate_accuracy(&adapted, test, None)?, None, adapted))
        }
    }
}

/// Fills accuracy and checksums and enforces the frozen-weight invariant:
/// parameters never change, and batchnorm statistics change only under
/// `bn_adapt`.
fn finish(
    cell: &mut CellRecord,
    group: &Group,
    outcome: std::result::Result<(f64, Option<&MetaInput>, &Model), String>,
    model: &Model,
    started: Instant,
) {
    cell.eval_samples = group.test.len();
    cell.eval_checksum = group.test.checksum();
    cell.target_psnr_db = group.psnr;
    match outcome {
        Ok((acc, w, adapted)) => {
            cell.params_checksum_after = adapted.params_checksum();
            cell.bn_checksum_after = adapted.bn_checksum();
            cell.meta_input_checksum = w.map(MetaInput::checksum);
            let frozen_ok = cell.params_checksum_after == cell.params_checksum_before
                && (cell.method == Method::BnAdapt || cell.bn_checksum_after == cell.bn_checksum_before)
                && model.params_checksum() == cell.params_checksum_before;
            if frozen_ok {
                cell.accuracy = Some(acc);
            } else {
                cell.failure = Some(
                    Error::Consistency {
                        op: "run_experiment",
                        msg: format!("frozen-weight invariant violated by {}", cell.method.name()),
                    }
                    .to_string(),
                );
            }
        }
        Err(e) => {
            log::warn!("cell {} {:?} {}: {e}", cell.corruption, cell.ratio, cell.method.name());
            cell.failure = Some(e);
        }
    }
    cell.wall_ms = started.elapsed().as_millis() as u64;
}

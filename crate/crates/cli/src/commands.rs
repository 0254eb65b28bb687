//! The `simulate`, `fit`, `predict` and `evaluate` subcommands as library calls.

use std::fs;
use std::path::Path;

use ionlds_core::cohort::{self, CohortManifest};
use ionlds_core::evaluation::{compare_models, render_table, CompareConfig, EvaluationReport, Horizon};
use ionlds_core::fitting::{fit_model, ModelFamily, ModelSpec};
use ionlds_core::synth::{make_cohort, GeneratorSpec};
use ionlds_core::{hash_json, SCHEMA_VERSION};
use rayon::prelude::*;

use crate::error::{AppError, AppResult};
use crate::forecasting::run_forecast;
use crate::records::{default_compare_config, default_spec, new_id, FitBundle, FitFailure, ModelRecord};
use crate::store::{write_atomic, write_json_atomic, Store};

fn read_text(path: &Path) -> AppResult<String> {
    fs::read_to_string(path).map_err(|e| AppError::invalid("io", format!("cannot read {}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> AppResult<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| AppError::invalid("json", format!("{}: {e}", path.display())))
}

fn write_out(path: &Path, bytes: &[u8]) -> AppResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_atomic(path, bytes).map_err(|e| AppError::invalid("io", format!("cannot write {}: {e}", path.display())))
}

fn write_json_out<T: serde::Serialize>(path: &Path, value: &T) -> AppResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_json_atomic(path, value).map_err(|e| AppError::invalid("io", format!("cannot write {}: {e}", path.display())))
}

/// Generator names accepted in place of a spec file.
pub fn builtin_spec(name: &str) -> Option<GeneratorSpec> {
    match name {
        "stationary" => Some(GeneratorSpec::stationary()),
        "nonstationary" | "misspecification" => Some(GeneratorSpec::nonstationary()),
        _ => None,
    }
}

pub fn load_generator_spec(arg: &str) -> AppResult<GeneratorSpec> {
    let spec = match builtin_spec(arg) {
        Some(s) => s,
        None => read_json(Path::new(arg))?,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn simulate(spec: &GeneratorSpec, seed: u64, patients: usize, out: &Path) -> AppResult<CohortManifest> {
    let members = make_cohort(patients, seed, spec)?;
    Ok(cohort::write_cohort(out, seed, spec, &members)?)
}

/// Resolves `--family` and `--config` into one model specification.
pub fn resolve_spec(family: Option<ModelFamily>, config: Option<&Path>) -> AppResult<ModelSpec> {
    match (family, config) {
        (f, Some(path)) => {
            let value: serde_json::Value = read_json(path)?;
            let spec: ModelSpec = if value.get("family").is_some() {
                serde_json::from_value(value)?
            } else {
                let f = f.ok_or_else(|| AppError::invalid("config", "config has no family; pass --family"))?;
                let mut obj = value;
                obj.as_object_mut()
                    .ok_or_else(|| AppError::invalid("config", "config must be a JSON object"))?
                    .insert("family".into(), serde_json::to_value(f)?);
                serde_json::from_value(obj)?
            };
            if let Some(f) = f {
                if spec.family() != f {
                    return Err(AppError::invalid(
                        "config",
                        format!(
                            "--family {} contradicts config family {}",
                            f.label(),
                            spec.family().label()
                        ),
                    ));
                }
            }
            Ok(spec)
        }
        (Some(f), None) => Ok(default_spec(f)),
        (None, None) => Err(AppError::invalid("config", "pass --family or --config")),
    }
}

/// Fits every patient of the cohort in `data`; records are also inserted
/// into `store` when given.
pub fn fit(data: &Path, spec: &ModelSpec, out: &Path, store: Option<&Store>) -> AppResult<FitBundle> {
    let loaded = cohort::load_cohort(data)?;
    let results: Vec<(String, AppResult<ModelRecord>)> = loaded
        .cases
        .par_iter()
        .map(|case| {
            let r = fit_model(spec, &case.series, &case.protocol)
                .map_err(AppError::from)
                .map(|fitted| {
                    let mut rec = ModelRecord::new(
                        new_id("model"),
                        spec,
                        fitted,
                        case.series.channel_names.clone(),
                        Some(case.protocol.clone()),
                    );
                    rec.cohort_id = Some(loaded.manifest.cohort_id.clone());
                    rec.patient_id = Some(case.id.clone());
                    rec
                });
            (case.id.clone(), r)
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                log::warn!("fit failed for {id}: {e}");
                failures.push(FitFailure {
                    patient_id: id,
                    error: (&e).into(),
                });
            }
        }
    }
    if records.is_empty() {
        return Err(AppError::invalid("numerical", "every patient fit failed"));
    }
    if let Some(store) = store {
        for r in &records {
            store.insert_model(r)?;
        }
    }
    let bundle = FitBundle {
        schema_version: SCHEMA_VERSION,
        cohort_id: loaded.manifest.cohort_id,
        family: spec.family(),
        config_hash: hash_json(spec),
        records,
        failures,
    };
    write_json_out(out, &bundle)?;
    Ok(bundle)
}

/// Writes `t_index,<ch>_mean,<ch>_var,...`; returns the number of rows.
pub fn predict(record: &ModelRecord, protocol_csv: &Path, horizon: Horizon, out: &Path) -> AppResult<usize> {
    let file = fs::File::open(protocol_csv)
        .map_err(|e| AppError::invalid("io", format!("cannot open {}: {e}", protocol_csv.display())))?;
    let dt = record.params.dt;
    let protocol = cohort::read_protocol_csv(file, dt)?;
    let series = match horizon {
        Horizon::Free => None,
        Horizon::Steps(_) => {
            let file = fs::File::open(protocol_csv)?;
            let (series, _) = cohort::read_series_csv(file, dt).map_err(|e| {
                AppError::from(e).context("an h-step forecast needs observation columns in the protocol CSV")
            })?;
            if series.channel_names != record.channels {
                return Err(AppError::invalid(
                    "dimension",
                    format!(
                        "CSV channels {:?} differ from model channels {:?}",
                        series.channel_names, record.channels
                    ),
                ));
            }
            Some(series)
        }
    };
    let fc = run_forecast(record, &protocol, horizon, series.as_ref(), None)?;
    let mut text = String::from("t_index");
    for c in &record.channels {
        text.push_str(&format!(",{c}_mean,{c}_var"));
    }
    text.push('\n');
    for (k, t) in fc.targets.iter().enumerate() {
        text.push_str(&t.to_string());
        for j in 0..record.channels.len() {
            text.push_str(&format!(",{},{}", fc.means[(k, j)], fc.variances[(k, j)]));
        }
        text.push('\n');
    }
    write_out(out, text.as_bytes())?;
    Ok(fc.targets.len())
}

pub fn load_compare_config(path: Option<&Path>) -> AppResult<CompareConfig> {
    let config = match path {
        Some(p) => read_json(p)?,
        None => default_compare_config(),
    };
    if config.arms.is_empty() {
        return Err(AppError::invalid("config", "comparison needs at least one arm"));
    }
    Ok(config)
}

/// Runs the comparison, writes the JSON report to `out` and returns it with
/// its rendered table.
pub fn evaluate(cohort_dir: &Path, config: &CompareConfig, out: &Path) -> AppResult<(EvaluationReport, String)> {
    let loaded = cohort::load_cohort(cohort_dir)?;
    let report = compare_models(
        &loaded.manifest.cohort_id,
        &loaded.manifest.seeds,
        &loaded.cases,
        config,
    )?;
    write_json_out(out, &report)?;
    let table = render_table(&report);
    Ok((report, table))
}

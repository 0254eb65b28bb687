//! Persisted documents and the default model configurations.

use ionlds_core::evaluation::{CompareConfig, Horizon, ModelArm};
use ionlds_core::fitting::{FitReport, FittedModel, ModelFamily, ModelSpec};
use ionlds_core::pkpd::{PkPdFitConfig, RatesConfig};
use ionlds_core::{InfusionProtocol, StateSpaceParams, UtParams, SCHEMA_VERSION};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

/// A fitted model. Never modified after it is written.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRecord {
    pub schema_version: u32,
    pub id: String,
    pub family: ModelFamily,
    pub channels: Vec<String>,
    pub params: StateSpaceParams,
    pub config_hash: String,
    pub parameter_count: usize,
    pub log_likelihood: f64,
    pub spec: ModelSpec,
    pub fit_report: FitReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training_protocol: Option<InfusionProtocol>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
    pub created_at: String,
}

impl ModelRecord {
    pub fn new(
        id: String,
        spec: &ModelSpec,
        fitted: FittedModel,
        channels: Vec<String>,
        training_protocol: Option<InfusionProtocol>,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            id,
            family: fitted.family,
            channels,
            config_hash: fitted.params.config_hash(),
            parameter_count: fitted.parameter_count(),
            log_likelihood: fitted.report.log_likelihood(),
            params: fitted.params,
            spec: spec.clone(),
            fit_report: fitted.report,
            training_protocol,
            cohort_id: None,
            patient_id: None,
            created_at: now(),
        }
    }

    /// Short listing entry without the fit report.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "id": self.id,
            "family": self.family,
            "channels": self.channels,
            "config_hash": self.config_hash,
            "parameter_count": self.parameter_count,
            "log_likelihood": self.log_likelihood,
            "cohort_id": self.cohort_id,
            "patient_id": self.patient_id,
            "created_at": self.created_at,
        })
    }
}

/// Output of `fit`: one record per patient of a cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitBundle {
    pub schema_version: u32,
    pub cohort_id: String,
    pub family: ModelFamily,
    pub config_hash: String,
    pub records: Vec<ModelRecord>,
    #[serde(default)]
    pub failures: Vec<FitFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFailure {
    pub patient_id: String,
    pub error: AppErrorDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppErrorDoc {
    pub kind: String,
    pub message: String,
}

impl From<&AppError> for AppErrorDoc {
    fn from(e: &AppError) -> Self {
        Self {
            kind: e.kind.clone(),
            message: e.message.clone(),
        }
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn new_id(prefix: &str) -> String {
    format!("{prefix}-{}", uuid::Uuid::new_v4().simple())
}

/// Three-compartment propofol rates used when no rates file is given.
pub fn default_rates() -> RatesConfig {
    RatesConfig {
        k10: 0.119,
        k12: 0.112,
        k21: 0.055,
        k13: 0.0419,
        k31: 0.0033,
        k1e: None,
        k1e_grid: None,
    }
}

pub fn default_spec(family: ModelFamily) -> ModelSpec {
    match family {
        ModelFamily::IoNlds => ModelSpec::default_io_nlds(),
        ModelFamily::PkPd => ModelSpec::PkPd {
            rates: default_rates(),
            fit: PkPdFitConfig::default(),
        },
    }
}

pub fn default_compare_config() -> CompareConfig {
    CompareConfig {
        arms: vec![
            ModelArm {
                label: "IO-NLDS".into(),
                spec: default_spec(ModelFamily::IoNlds),
            },
            ModelArm {
                label: "PK/PD".into(),
                spec: default_spec(ModelFamily::PkPd),
            },
        ],
        horizons: Horizon::default_set(),
        ut: UtParams::default(),
    }
}

/// Reads a model file: a single record, or a fit bundle from which
/// `patient` (or the only record) is taken.
pub fn select_record(text: &str, patient: Option<&str>) -> AppResult<ModelRecord> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    if value.get("records").is_some() {
        let bundle: FitBundle = serde_json::from_value(value)?;
        return match patient {
            Some(p) => bundle
                .records
                .into_iter()
                .find(|r| r.patient_id.as_deref() == Some(p) || r.id == p)
                .ok_or_else(|| AppError::not_found(format!("no model for patient {p:?} in bundle"))),
            None if bundle.records.len() == 1 => Ok(bundle.records.into_iter().next().unwrap()),
            None => Err(AppError::invalid(
                "config",
                format!("bundle holds {} models; pick one with --patient", bundle.records.len()),
            )),
        };
    }
    Ok(serde_json::from_value(value)?)
}

//! Forecasts and what-if scenarios over stored models.

use std::collections::BTreeMap;

use ionlds_core::evaluation::Horizon;
use ionlds_core::inference::{self, Forecast};
use ionlds_core::model::matrix_from_rows;
use ionlds_core::{InfusionProtocol, UtParams, VitalSignSeries};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::records::ModelRecord;

/// Half-width of the reported bands in standard deviations.
pub const BAND_Z: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RateRow {
    Scalar(f64),
    Row(Vec<f64>),
}

/// Protocol in a request body. `dt` defaults to the model's step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolInput {
    #[serde(default)]
    pub dt: Option<f64>,
    pub rates: Vec<RateRow>,
}

impl ProtocolInput {
    pub fn to_protocol(&self, model_dt: f64, input_dim: usize) -> AppResult<InfusionProtocol> {
        let dt = self.dt.unwrap_or(model_dt);
        if dt != model_dt {
            return Err(AppError::invalid(
                "dimension",
                format!("protocol dt {dt} differs from model dt {model_dt}"),
            ));
        }
        if self.rates.is_empty() {
            return Err(AppError::invalid("config", "protocol has no steps"));
        }
        let rows: Vec<Vec<f64>> = self
            .rates
            .iter()
            .map(|r| match r {
                RateRow::Scalar(v) => vec![*v],
                RateRow::Row(v) => v.clone(),
            })
            .collect();
        if let Some(bad) = rows.iter().position(|r| r.len() != input_dim) {
            return Err(AppError::invalid(
                "dimension",
                format!(
                    "protocol step {bad} has {} inputs, model expects {input_dim}",
                    rows[bad].len()
                ),
            ));
        }
        let rates = matrix_from_rows(&rows, rows.len())?;
        Ok(InfusionProtocol::new(dt, rates)?)
    }
}

impl From<&InfusionProtocol> for ProtocolInput {
    fn from(p: &InfusionProtocol) -> Self {
        let rates = (0..p.len())
            .map(|t| {
                if p.input_dim() == 1 {
                    RateRow::Scalar(p.rates[(t, 0)])
                } else {
                    RateRow::Row(p.rates.row(t).iter().copied().collect())
                }
            })
            .collect();
        Self { dt: Some(p.dt), rates }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastRequest {
    pub protocol: ProtocolInput,
    pub horizon: Horizon,
    /// Observations to condition on; required for `h`-step forecasts.
    #[serde(default)]
    pub series: Option<VitalSignSeries>,
    /// Length of a free-running forecast; defaults to the protocol length.
    #[serde(default)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    pub protocol: ProtocolInput,
    /// Alert level per channel name, in vital-sign units.
    #[serde(default)]
    pub thresholds: BTreeMap<String, f64>,
    /// Steps to forecast; defaults to the protocol length.
    #[serde(default)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelForecast {
    pub name: String,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastOutput {
    pub model_id: String,
    pub horizon: Horizon,
    /// Time index of every forecast row.
    pub targets: Vec<usize>,
    pub channels: Vec<ChannelForecast>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScenario {
    pub name: String,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub threshold: Option<f64>,
    /// First time index at which the mean reaches or passes the threshold.
    pub crossing: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfOutput {
    pub model_id: String,
    pub targets: Vec<usize>,
    pub band_z: f64,
    pub channels: Vec<ChannelScenario>,
}

fn channels_of(record: &ModelRecord, fc: &Forecast) -> Vec<ChannelForecast> {
    record
        .channels
        .iter()
        .enumerate()
        .map(|(j, name)| ChannelForecast {
            name: name.clone(),
            mean: fc.means.column(j).iter().copied().collect(),
            variance: fc.variances.column(j).iter().copied().collect(),
        })
        .collect()
}

pub fn run_forecast(
    record: &ModelRecord,
    protocol: &InfusionProtocol,
    horizon: Horizon,
    series: Option<&VitalSignSeries>,
    steps: Option<usize>,
) -> AppResult<Forecast> {
    let p = &record.params;
    let ut = UtParams::default();
    match horizon {
        Horizon::Free => {
            let n = steps.unwrap_or(protocol.len());
            if n == 0 || n > protocol.len() {
                return Err(AppError::invalid(
                    "config",
                    format!("steps must lie in 1..={}, got {n}", protocol.len()),
                ));
            }
            Ok(inference::free_run(p, protocol, n, &ut)?)
        }
        Horizon::Steps(h) => {
            let series =
                series.ok_or_else(|| AppError::invalid("config", "an h-step forecast needs observations (series)"))?;
            if h + 1 > series.len() {
                return Err(AppError::invalid(
                    "config",
                    format!(
                        "horizon {h} needs more than {h} observed steps, series has {}",
                        series.len()
                    ),
                ));
            }
            let filter = inference::run_filter(p, protocol, series, &ut)?;
            Ok(inference::h_step_predict(p, &filter, protocol, h, &ut)?)
        }
    }
}

pub fn forecast(record: &ModelRecord, req: &ForecastRequest) -> AppResult<ForecastOutput> {
    let protocol = req.protocol.to_protocol(record.params.dt, record.params.input_dim())?;
    if let Some(s) = &req.series {
        if s.channel_names != record.channels {
            return Err(AppError::invalid(
                "dimension",
                format!(
                    "series channels {:?} differ from model channels {:?}",
                    s.channel_names, record.channels
                ),
            ));
        }
    }
    let fc = run_forecast(record, &protocol, req.horizon, req.series.as_ref(), req.steps)?;
    Ok(ForecastOutput {
        model_id: record.id.clone(),
        horizon: req.horizon,
        targets: fc.targets.clone(),
        channels: channels_of(record, &fc),
    })
}

/// First `targets[k]` where `mean` reaches `threshold` from the side it started on.
pub fn first_crossing(mean: &[f64], targets: &[usize], threshold: f64) -> Option<usize> {
    let start = *mean.first()?;
    if start == threshold {
        return targets.first().copied();
    }
    let above = start > threshold;
    mean.iter()
        .position(|&m| if above { m <= threshold } else { m >= threshold })
        .map(|k| targets[k])
}

pub fn what_if(record: &ModelRecord, req: &WhatIfRequest) -> AppResult<WhatIfOutput> {
    let protocol = req.protocol.to_protocol(record.params.dt, record.params.input_dim())?;
    if let Some(name) = req.thresholds.keys().find(|k| !record.channels.contains(k)) {
        return Err(AppError::invalid(
            "config",
            format!(
                "threshold for unknown channel {name:?}; model channels are {:?}",
                record.channels
            ),
        ));
    }
    if req.thresholds.values().any(|v| !v.is_finite()) {
        return Err(AppError::invalid("config", "thresholds must be finite"));
    }
    if req.horizon == Some(0) {
        return Err(AppError::invalid("config", "horizon must be >= 1"));
    }
    let fc = run_forecast(record, &protocol, Horizon::Free, None, req.horizon)?;
    let channels = channels_of(record, &fc)
        .into_iter()
        .map(|c| {
            let sd: Vec<f64> = c.variance.iter().map(|v| v.max(0.0).sqrt()).collect();
            let threshold = req.thresholds.get(&c.name).copied();
            ChannelScenario {
                lower: c.mean.iter().zip(&sd).map(|(m, s)| m - BAND_Z * s).collect(),
                upper: c.mean.iter().zip(&sd).map(|(m, s)| m + BAND_Z * s).collect(),
                crossing: threshold.and_then(|th| first_crossing(&c.mean, &fc.targets, th)),
                threshold,
                name: c.name,
                mean: c.mean,
                variance: c.variance,
            }
        })
        .collect();
    Ok(WhatIfOutput {
        model_id: record.id.clone(),
        targets: fc.targets,
        band_z: BAND_Z,
        channels,
    })
}

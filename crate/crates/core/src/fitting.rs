//! Model specifications shared by the evaluation harness and the tools:
//! which family to fit and how, and the fitted result.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::{self, EmConfig, EmFit, InitConfig};
use crate::model::{InfusionProtocol, StateSpaceParams, VitalSignSeries};
use crate::pkpd::{self, PkPdFit, PkPdFitConfig, PkPdLayout, RatesConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelFamily {
    #[serde(rename = "io-nlds")]
    IoNlds,
    #[serde(rename = "pkpd")]
    PkPd,
}

impl ModelFamily {
    pub fn label(&self) -> &'static str {
        match self {
            ModelFamily::IoNlds => "IO-NLDS",
            ModelFamily::PkPd => "PK/PD",
        }
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "io-nlds" => Ok(ModelFamily::IoNlds),
            "pkpd" => Ok(ModelFamily::PkPd),
            other => Err(Error::Config(format!("unknown model family {other:?}"))),
        }
    }
}

/// How a model is fitted to one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum ModelSpec {
    #[serde(rename = "io-nlds")]
    IoNlds {
        #[serde(default)]
        init: InitConfig,
        #[serde(default)]
        em: EmConfig,
        /// Random initializations tried; the best log-likelihood wins.
        #[serde(default = "one")]
        restarts: usize,
    },
    #[serde(rename = "pkpd")]
    PkPd {
        rates: RatesConfig,
        #[serde(default)]
        fit: PkPdFitConfig,
    },
}

fn one() -> usize {
    1
}

impl ModelSpec {
    pub fn default_io_nlds() -> Self {
        ModelSpec::IoNlds {
            init: InitConfig::default(),
            em: EmConfig::default(),
            restarts: 1,
        }
    }

    pub fn family(&self) -> ModelFamily {
        match self {
            ModelSpec::IoNlds { .. } => ModelFamily::IoNlds,
            ModelSpec::PkPd { .. } => ModelFamily::PkPd,
        }
    }

    pub fn convention(&self) -> ParamConvention {
        match self {
            ModelSpec::IoNlds { .. } => ParamConvention::IoNlds,
            ModelSpec::PkPd { fit, .. } => ParamConvention::PkPd {
                layout: fit.options.layout,
            },
        }
    }
}

/// Free-parameter counting rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum ParamConvention {
    /// `mu1`, symmetric `Sigma1`, `A`, `B`, `C`, diagonal `Q` and `R`, and
    /// four link parameters per channel.
    #[serde(rename = "io-nlds")]
    IoNlds,
    /// `mu1`, symmetric `Sigma1` (per block in the independent layout),
    /// diagonal `Q` and `R`, the link parameters and one `k1e` per channel;
    /// `A`, `B`, `C` are fixed by the rates.
    #[serde(rename = "pkpd")]
    PkPd { layout: PkPdLayout },
}

pub fn count_params(params: &StateSpaceParams, convention: ParamConvention) -> usize {
    let dx = params.state_dim();
    let du = params.input_dim();
    let dy = params.obs_dim();
    let sym = |n: usize| n * (n + 1) / 2;
    match convention {
        ParamConvention::IoNlds => dx + sym(dx) + dx * dx + dx * du + dy * dx + dx + dy + 4 * dy,
        ParamConvention::PkPd {
            layout: PkPdLayout::Independent,
        } => {
            let block = dx / dy.max(1);
            dy * (block + sym(block) + block + 1 + 4 + 1)
        }
        ParamConvention::PkPd {
            layout: PkPdLayout::SharedCentral,
        } => dx + sym(dx) + dx + dy + 4 * dy + dy,
    }
}

/// Family-specific fitting report.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitReport {
    Em(EmFit),
    PkPd(PkPdFit),
}

impl FitReport {
    pub fn log_likelihood(&self) -> f64 {
        match self {
            FitReport::Em(f) => f.log_likelihood,
            FitReport::PkPd(f) => f.log_likelihood,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub family: ModelFamily,
    pub convention: ParamConvention,
    pub params: StateSpaceParams,
    pub report: FitReport,
}

impl FittedModel {
    pub fn parameter_count(&self) -> usize {
        count_params(&self.params, self.convention)
    }
}

pub fn fit_model(spec: &ModelSpec, series: &VitalSignSeries, protocol: &InfusionProtocol) -> Result<FittedModel> {
    fit_model_with_progress(spec, series, protocol, &mut |_| true)
}

/// Like [`fit_model`]; `progress` sees every EM iteration of the IO-NLDS
/// family and may cancel by returning `false`.
pub fn fit_model_with_progress(
    spec: &ModelSpec,
    series: &VitalSignSeries,
    protocol: &InfusionProtocol,
    progress: &mut dyn FnMut(&learning::IterationRecord) -> bool,
) -> Result<FittedModel> {
    match spec {
        ModelSpec::IoNlds { init, em, restarts } => {
            let mut best: Option<EmFit> = None;
            for r in 0..(*restarts).max(1) {
                let cfg = InitConfig {
                    seed: init.seed.wrapping_add(r as u64),
                    ..*init
                };
                let start = learning::initialize(series, protocol, &cfg)?;
                let fit = learning::run_em_with_progress(series, protocol, &start, em, progress)?;
                let cancelled = fit.stop_reason == learning::StopReason::Cancelled;
                if best.as_ref().is_none_or(|b| fit.log_likelihood > b.log_likelihood) {
                    best = Some(fit);
                }
                if cancelled {
                    break;
                }
            }
            let fit = best.expect("at least one restart");
            Ok(FittedModel {
                family: ModelFamily::IoNlds,
                convention: spec.convention(),
                params: fit.params.clone(),
                report: FitReport::Em(fit),
            })
        }
        ModelSpec::PkPd { rates, fit } => {
            let base = rates.rates(series.n_channels())?;
            let out = pkpd::fit_k1e_grid(series, protocol, &base, &rates.grid(), fit)?;
            Ok(FittedModel {
                family: ModelFamily::PkPd,
                convention: spec.convention(),
                params: out.params.clone(),
                report: FitReport::PkPd(out),
            })
        }
    }
}

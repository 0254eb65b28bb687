//! Forecast scoring (SMSE, BIC), paired t-tests and the cohort comparison
//! that produces the per-horizon report table.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::fitting::{fit_model, FittedModel, ModelSpec};
use crate::inference::{self, Forecast};
use crate::model::{InfusionProtocol, StateSpaceParams, VitalSignSeries};
use crate::unscented::UtParams;
use crate::SCHEMA_VERSION;

/// Mean squared error over observed cells divided by the population
/// variance of the observed values.
pub fn smse(predictions: &[f64], observations: &[f64], mask: &[bool]) -> Result<f64> {
    if predictions.len() != observations.len() || mask.len() != observations.len() {
        return Err(Error::Dimension("smse inputs differ in length".into()));
    }
    let pairs: Vec<(f64, f64)> = predictions
        .iter()
        .zip(observations)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((p, y), _)| (*p, *y))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::DegenerateSample(format!(
            "smse needs at least 2 observed points, got {}",
            pairs.len()
        )));
    }
    let ys: Vec<f64> = pairs.iter().map(|(_, y)| *y).collect();
    let var = population_variance(&ys);
    if !(var > 0.0) {
        return Err(Error::UndefinedVariance);
    }
    let n = pairs.len() as f64;
    let mse = pairs.iter().map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n;
    Ok(mse / var)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_variance(ys: &[f64]) -> f64 {
    let m = mean(ys);
    ys.iter().map(|y| (m - y) * (m - y)).sum::<f64>() / ys.len() as f64
}

/// `-2 ln L + b ln N`.
pub fn bic(log_likelihood: f64, b: usize, n: usize) -> f64 {
    -2.0 * log_likelihood + b as f64 * (n as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    /// Right-tail probability `P(T >= t)`.
    pub p_right: f64,
}

/// One-sample t-test on paired differences against a zero mean, right
/// tailed: small `p_right` means the differences are positive.
pub fn paired_t_test(differences: &[f64]) -> Result<TTest> {
    let n = differences.len();
    if n < 2 {
        return Err(Error::DegenerateSample(format!("t-test needs n >= 2, got {n}")));
    }
    let m = mean(differences);
    let ss: f64 = differences.iter().map(|d| (d - m) * (d - m)).sum();
    let sd = (ss / (n - 1) as f64).sqrt();
    if !(sd > 0.0) {
        return Err(Error::DegenerateSample("differences have zero variance".into()));
    }
    let t = m / (sd / (n as f64).sqrt());
    let df = n - 1;
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    let p_right = if t >= 0.0 { dist.sf(t) } else { dist.cdf(-t) };
    Ok(TTest { t, df, p_right })
}

/// Forecast horizon: `h` steps ahead, or free-running from the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Horizon {
    Steps(usize),
    Free,
}

impl Horizon {
    pub fn table_label(&self) -> String {
        match self {
            Horizon::Steps(h) => format!("{h}-step"),
            Horizon::Free => "free-running".into(),
        }
    }

    pub fn default_set() -> Vec<Horizon> {
        vec![Horizon::Steps(1), Horizon::Steps(10), Horizon::Steps(20), Horizon::Free]
    }
}

impl std::fmt::Display for Horizon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Horizon::Steps(h) => write!(f, "{h}"),
            Horizon::Free => write!(f, "free"),
        }
    }
}

impl std::str::FromStr for Horizon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "free" {
            return Ok(Horizon::Free);
        }
        match s.parse::<usize>() {
            Ok(h) if h >= 1 => Ok(Horizon::Steps(h)),
            _ => Err(Error::Config(format!(
                "horizon must be a positive integer or \"free\", got {s:?}"
            ))),
        }
    }
}

impl Serialize for Horizon {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Horizon {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(h) if h >= 1 => Ok(Horizon::Steps(h)),
            Raw::N(_) => Err(serde::de::Error::custom("horizon must be >= 1")),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Forecast of `params` at `horizon` over a filtered series.
pub fn forecast(
    params: &StateSpaceParams,
    protocol: &InfusionProtocol,
    series: &VitalSignSeries,
    horizon: Horizon,
    ut: &UtParams,
) -> Result<Forecast> {
    match horizon {
        Horizon::Free => inference::free_run(params, protocol, series.len(), ut),
        Horizon::Steps(h) => {
            let filter = inference::run_filter(params, protocol, series, ut)?;
            inference::h_step_predict(params, &filter, protocol, h, ut)
        }
    }
}

/// Per-channel SMSE of a forecast against the observed targets.
pub fn forecast_smse(fc: &Forecast, series: &VitalSignSeries) -> Vec<Option<f64>> {
    (0..series.n_channels())
        .map(|j| {
            let pred: Vec<f64> = (0..fc.len()).map(|r| fc.means[(r, j)]).collect();
            let obs: Vec<f64> = fc.targets.iter().map(|&t| series.values[(t, j)]).collect();
            let mask: Vec<bool> = fc.targets.iter().map(|&t| series.is_observed(t, j)).collect();
            smse(&pred, &obs, &mask).ok()
        })
        .collect()
}

/// One arm of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArm {
    pub label: String,
    pub spec: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    /// Tests compare `arms[1] - arms[0]`, so small p-values favour arm 0.
    pub arms: Vec<ModelArm>,
    #[serde(default = "Horizon::default_set")]
    pub horizons: Vec<Horizon>,
    #[serde(default)]
    pub ut: UtParams,
}

/// A patient record to evaluate on.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub id: String,
    pub series: VitalSignSeries,
    pub protocol: InfusionProtocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub label: String,
    pub family: crate::fitting::ModelFamily,
    /// `smse[h][j]`: mean over patients with a defined value.
    pub smse: Vec<Vec<Option<f64>>>,
    pub bic: Vec<Option<f64>>,
    pub parameter_count: Option<usize>,
    pub fitted_patients: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTest {
    pub horizon: Horizon,
    pub channel: String,
    pub n: usize,
    pub mean_difference: Option<f64>,
    pub t: Option<f64>,
    pub df: Option<usize>,
    pub p_right: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientModelResult {
    pub log_likelihood: f64,
    pub parameter_count: usize,
    pub config_hash: String,
    pub smse: Vec<Vec<Option<f64>>>,
    pub bic: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientResult {
    pub id: String,
    /// One entry per arm; `None` when the fit failed.
    pub models: Vec<Option<PatientModelResult>>,
    /// Per channel SMSE of the constant data-mean predictor.
    pub baseline_smse: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub patient: String,
    pub model: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub cohort_id: String,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub channels: Vec<String>,
    pub horizons: Vec<Horizon>,
    pub models: Vec<ModelSummary>,
    pub baseline_smse: Vec<Option<f64>>,
    pub tests: Vec<CellTest>,
    pub patients: Vec<PatientResult>,
    pub failures: Vec<Failure>,
}

fn evaluate_fit(fit: &FittedModel, case: &EvalCase, horizons: &[Horizon], ut: &UtParams) -> Result<PatientModelResult> {
    let b = fit.parameter_count();
    let filter = inference::run_filter(&fit.params, &case.protocol, &case.series, ut)?;
    let mut smse_rows = Vec::with_capacity(horizons.len());
    let mut bics = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let fc = match h {
            Horizon::Free => Some(inference::free_run(&fit.params, &case.protocol, case.series.len(), ut)?),
            Horizon::Steps(k) if k < case.series.len() => {
                Some(inference::h_step_predict(&fit.params, &filter, &case.protocol, k, ut)?)
            }
            Horizon::Steps(_) => None,
        };
        match fc {
            Some(fc) => {
                smse_rows.push(forecast_smse(&fc, &case.series));
                let ll = fc.log_likelihood(&fit.params, &case.series, ut)?;
                let n: usize = fc.targets.iter().map(|&t| case.series.observed_channels(t).len()).sum();
                bics.push((n > 0).then(|| bic(ll, b, n)));
            }
            None => {
                smse_rows.push(vec![None; case.series.n_channels()]);
                bics.push(None);
            }
        }
    }
    Ok(PatientModelResult {
        log_likelihood: filter.log_likelihood,
        parameter_count: b,
        config_hash: fit.params.config_hash(),
        smse: smse_rows,
        bic: bics,
    })
}

fn baseline(series: &VitalSignSeries) -> Vec<Option<f64>> {
    (0..series.n_channels())
        .map(|j| {
            let obs = series.channel_values(j);
            if obs.is_empty() {
                return None;
            }
            let m = mean(&obs);
            smse(&vec![m; obs.len()], &obs, &vec![true; obs.len()]).ok()
        })
        .collect()
}

fn mean_defined<I: Iterator<Item = Option<f64>>>(it: I) -> Option<f64> {
    let vals: Vec<f64> = it.flatten().collect();
    (!vals.is_empty()).then(|| mean(&vals))
}

/// Fits every arm on every patient and scores the forecasts.
pub fn compare_models(
    cohort_id: &str,
    seeds: &[u64],
    cases: &[EvalCase],
    config: &CompareConfig,
) -> Result<EvaluationReport> {
    if cases.is_empty() {
        return Err(Error::Config("cohort is empty".into()));
    }
    if config.arms.is_empty() {
        return Err(Error::Config("comparison needs at least one model".into()));
    }
    let channels = cases[0].series.channel_names.clone();
    if cases.iter().any(|c| c.series.channel_names != channels) {
        return Err(Error::Config("patients disagree on channel names".into()));
    }
    let horizons = &config.horizons;
    let ut = config.ut;

    let per_patient: Vec<(PatientResult, Vec<Failure>)> = cases
        .par_iter()
        .map(|case| {
            let mut failures = Vec::new();
            let models = config
                .arms
                .iter()
                .map(|arm| {
                    let res = fit_model(&arm.spec, &case.series, &case.protocol)
                        .and_then(|fit| evaluate_fit(&fit, case, horizons, &ut));
                    match res {
                        Ok(r) => Some(r),
                        Err(e) => {
                            failures.push(Failure {
                                patient: case.id.clone(),
                                model: arm.label.clone(),
                                error: e.to_string(),
                            });
                            None
                        }
                    }
                })
                .collect();
            let result = PatientResult {
                id: case.id.clone(),
                models,
                baseline_smse: baseline(&case.series),
            };
            (result, failures)
        })
        .collect();
    let mut patients = Vec::with_capacity(per_patient.len());
    let mut failures = Vec::new();
    for (p, f) in per_patient {
        patients.push(p);
        failures.extend(f);
    }
    if !failures.is_empty() {
        log::warn!("{} model fits failed and were excluded", failures.len());
    }

    let dy = channels.len();
    let models = config
        .arms
        .iter()
        .enumerate()
        .map(|(k, arm)| {
            let fitted: Vec<&PatientModelResult> = patients.iter().filter_map(|p| p.models[k].as_ref()).collect();
            let smse = (0..horizons.len())
                .map(|h| {
                    (0..dy)
                        .map(|j| mean_defined(fitted.iter().map(|r| r.smse[h][j])))
                        .collect()
                })
                .collect();
            let bic = (0..horizons.len())
                .map(|h| mean_defined(fitted.iter().map(|r| r.bic[h])))
                .collect();
            let counts: Vec<usize> = fitted.iter().map(|r| r.parameter_count).collect();
            ModelSummary {
                label: arm.label.clone(),
                family: arm.spec.family(),
                smse,
                bic,
                parameter_count: counts.first().copied().filter(|c| counts.iter().all(|x| x == c)),
                fitted_patients: fitted.len(),
            }
        })
        .collect();

    let mut tests = Vec::new();
    if config.arms.len() >= 2 {
        for (hi, &h) in horizons.iter().enumerate() {
            for (j, name) in channels.iter().enumerate() {
                let diffs: Vec<f64> = patients
                    .iter()
                    .filter_map(|p| {
                        let a = p.models[0].as_ref()?.smse[hi][j]?;
                        let b = p.models[1].as_ref()?.smse[hi][j]?;
                        Some(b - a)
                    })
                    .collect();
                tests.push(cell_test(h, name, &diffs));
            }
        }
    }

    let baseline_smse = (0..dy)
        .map(|j| mean_defined(patients.iter().map(|p| p.baseline_smse[j])))
        .collect();
    Ok(EvaluationReport {
        schema_version: SCHEMA_VERSION,
        cohort_id: cohort_id.to_string(),
        seeds: seeds.to_vec(),
        config_hash: crate::hash_json(config),
        channels,
        horizons: horizons.clone(),
        models,
        baseline_smse,
        tests,
        patients,
        failures,
    })
}

fn cell_test(horizon: Horizon, channel: &str, diffs: &[f64]) -> CellTest {
    let mean_difference = (!diffs.is_empty()).then(|| mean(diffs));
    let (t, df, p) = match paired_t_test(diffs) {
        Ok(r) => (Some(r.t), Some(r.df), Some(r.p_right)),
        // Identical differences of zero: the symmetric null, t = 0.
        Err(_) if diffs.len() >= 2 && diffs.iter().all(|d| *d == 0.0) => (Some(0.0), Some(diffs.len() - 1), Some(0.5)),
        Err(_) => (None, None, None),
    };
    CellTest {
        horizon,
        channel: channel.to_string(),
        n: diffs.len(),
        mean_difference,
        t,
        df,
        p_right: p,
    }
}

/// Aligned text table: one row per model plus the mean-predictor row, one
/// column group per horizon holding each channel's mean SMSE and the BIC.
pub fn render_table(report: &EvaluationReport) -> String {
    let dy = report.channels.len();
    let label_w = report
        .models
        .iter()
        .map(|m| m.label.len())
        .chain(["mean predictor".len(), "model".len()])
        .max()
        .unwrap_or(5);
    let cell = 8;
    let group_w = (dy + 1) * cell;
    let mut out = String::new();
    let _ = write!(out, "{:label_w$}", "");
    for h in &report.horizons {
        let _ = write!(out, " | {:^group_w$}", h.table_label());
    }
    out.push('\n');
    let _ = write!(out, "{:label_w$}", "model");
    for _ in &report.horizons {
        out.push_str(" | ");
        for c in &report.channels {
            let _ = write!(out, "{c:>cell$}");
        }
        let _ = write!(out, "{:>cell$}", "BIC");
    }
    out.push('\n');
    let rule = label_w + report.horizons.len() * (group_w + 3);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    let fmt = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"));
    for m in &report.models {
        let _ = write!(out, "{:label_w$}", m.label);
        for (hi, _) in report.horizons.iter().enumerate() {
            out.push_str(" | ");
            for j in 0..dy {
                let _ = write!(out, "{:>cell$}", fmt(m.smse[hi][j], 2));
            }
            let _ = write!(out, "{:>cell$}", fmt(m.bic[hi], 0));
        }
        out.push('\n');
    }
    let _ = write!(out, "{:label_w$}", "mean predictor");
    for _ in &report.horizons {
        out.push_str(" | ");
        for j in 0..dy {
            let _ = write!(out, "{:>cell$}", fmt(report.baseline_smse[j], 2));
        }
        let _ = write!(out, "{:>cell$}", "-");
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_prediction_scores_one() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(smse(&[2.0; 3], &y, &[true; 3]).unwrap(), 1.0);
        assert_eq!(smse(&y, &y, &[true; 3]).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_smse() {
        // MSE = (1 + 1 + 9) / 3, population variance = 32 / 9
        let s = smse(&[1.0; 3], &[0.0, 0.0, 4.0], &[true; 3]).unwrap();
        assert!((s - 33.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn smse_errors() {
        assert!(matches!(
            smse(&[1.0, 1.0], &[2.0, 2.0], &[true, true]),
            Err(Error::UndefinedVariance)
        ));
        assert!(matches!(
            smse(&[1.0, 1.0], &[2.0, 3.0], &[true, false]),
            Err(Error::DegenerateSample(_))
        ));
    }

    #[test]
    fn masked_cells_are_ignored() {
        let s = smse(
            &[2.0, 99.0, 2.0, 2.0],
            &[1.0, -50.0, 2.0, 3.0],
            &[true, false, true, true],
        )
        .unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn bic_values() {
        assert_eq!(bic(0.0, 0, 10), 0.0);
        assert!((bic(-100.0, 10, 100) - 246.051_701_859_880_9).abs() < 1e-9);
    }

    #[test]
    fn t_test_reference_values() {
        let r = paired_t_test(&[1.0, -1.0, 0.0, 2.0]).unwrap();
        assert!((r.t - 0.774_596_669_241_483_4).abs() < 1e-12);
        assert_eq!(r.df, 3);
        assert!((r.p_right - 0.247_512_673_029_855_5).abs() < 1e-10);
        let sym = paired_t_test(&[1.0, -1.0]).unwrap();
        assert_eq!(sym.t, 0.0);
        assert!((sym.p_right - 0.5).abs() < 1e-15);
        let big = paired_t_test(&[5.0, 5.0, 5.0, 5.1]).unwrap();
        assert!((big.t - 201.000_000_000_000_77).abs() < 1e-8);
        assert!((big.p_right - 1.357_731_459_109_042_6e-7).abs() < 1e-16);
        let neg = paired_t_test(&[-1.0, 1.0, 0.0, -2.0]).unwrap();
        assert!((neg.p_right - (1.0 - 0.247_512_673_029_855_5)).abs() < 1e-10);
    }

    #[test]
    fn t_test_errors() {
        assert!(matches!(paired_t_test(&[1.0]), Err(Error::DegenerateSample(_))));
        assert!(matches!(
            paired_t_test(&[2.0, 2.0, 2.0]),
            Err(Error::DegenerateSample(_))
        ));
    }

    #[test]
    fn horizon_parsing() {
        assert_eq!("free".parse::<Horizon>().unwrap(), Horizon::Free);
        assert_eq!("10".parse::<Horizon>().unwrap(), Horizon::Steps(10));
        assert!("0".parse::<Horizon>().is_err());
        let hs: Vec<Horizon> = serde_json::from_str(r#"[1, "20", "free"]"#).unwrap();
        assert_eq!(hs, vec![Horizon::Steps(1), Horizon::Steps(20), Horizon::Free]);
        assert_eq!(serde_json::to_string(&hs).unwrap(), r#"["1","20","free"]"#);
    }

    #[test]
    fn zero_differences_give_symmetric_null() {
        let c = cell_test(Horizon::Free, "BPs", &[0.0, 0.0, 0.0]);
        assert_eq!(c.p_right, Some(0.5));
        assert_eq!(c.t, Some(0.0));
    }
}

//! EM driver and default initialization.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{estep, mstep_linear, mstep_nonlinear, noise_from_sigma_points, smoothed_sigma_points, EStep};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    GeneralizedLogistic, InfusionProtocol, ObservationLink, StateSpaceParams, VitalSignSeries, DEFAULT_DT_SECONDS,
};
use crate::unscented::UtParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Relative log-likelihood change regarded as converged.
    pub tolerance: f64,
    /// Consecutive converged iterations required to stop.
    pub patience: usize,
    /// BFGS evaluation budget during the first `early_iterations`.
    pub bfgs_evals_early: usize,
    pub bfgs_evals_late: usize,
    pub early_iterations: usize,
    pub enforce_stability: bool,
    /// Re-estimate `A` and `B`. Off for models with fixed dynamics.
    pub update_dynamics: bool,
    /// Re-estimate `C`.
    pub update_projection: bool,
    pub ut: UtParams,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-6,
            patience: 3,
            bfgs_evals_early: 1000,
            bfgs_evals_late: 100,
            early_iterations: 10,
            enforce_stability: true,
            update_dynamics: true,
            update_projection: true,
            ut: UtParams::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config("tolerance must be non-negative".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.ut.alpha > 0.0) || !self.ut.beta.is_finite() {
            return Err(Error::Config("invalid unscented parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    Cancelled,
    NumericalFailure,
}

/// One evaluated parameter set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 0 for the initial parameters.
    pub iteration: usize,
    pub log_likelihood: f64,
    pub spectral_radius: f64,
    /// Whether `A` was projected onto the stable set in the M-step that
    /// produced these parameters.
    pub projected: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmFit {
    /// Highest-likelihood parameters seen.
    pub params: StateSpaceParams,
    pub log_likelihood: f64,
    pub best_iteration: usize,
    pub trace: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    pub projections: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl EmFit {
    pub fn iterations(&self) -> usize {
        self.trace.last().map_or(0, |r| r.iteration)
    }

    pub fn converged(&self) -> bool {
        self.stop_reason == StopReason::Converged
    }
}

pub fn run_em(
    series: &VitalSignSeries,
    protocol: &InfusionProtocol,
    init: &StateSpaceParams,
    config: &EmConfig,
) -> Result<EmFit> {
    run_em_with_progress(series, protocol, init, config, &mut |_| true)
}

/// EM with a per-iteration callback; returning `false` cancels the run and
/// keeps the best parameters so far.
pub fn run_em_with_progress(
    series: &VitalSignSeries,
    protocol: &InfusionProtocol,
    init: &StateSpaceParams,
    config: &EmConfig,
    progress: &mut dyn FnMut(&IterationRecord) -> bool,
) -> Result<EmFit> {
    config.validate()?;
    init.validate()?;
    let ut = config.ut;
    let mut current = init.clone();
    let mut e = estep(&current, protocol, series, &ut)?;

    let mut trace = Vec::new();
    let mut best = (e.log_likelihood(), 0usize, current.clone());
    let mut projections = 0;
    let mut calm = 0;
    let mut stop = StopReason::MaxIterations;
    let mut diagnostic = None;
    let mut projected = false;

    for k in 0..=config.max_iterations {
        let ll = e.log_likelihood();
        let record = IterationRecord {
            iteration: k,
            log_likelihood: ll,
            spectral_radius: linalg::spectral_radius(&current.a).unwrap_or(f64::NAN),
            projected,
        };
        if let Some(prev) = trace.last().map(|r: &IterationRecord| r.log_likelihood) {
            if ll < prev - 1e-3 * prev.abs().max(1.0) {
                log::warn!("EM iteration {k}: log-likelihood fell from {prev} to {ll}");
            }
            let rel = (ll - prev).abs() / prev.abs().max(f64::MIN_POSITIVE);
            calm = if rel < config.tolerance { calm + 1 } else { 0 };
        }
        if ll > best.0 || !best.0.is_finite() {
            best = (ll, k, current.clone());
        }
        log::debug!("EM iteration {k}: log-likelihood {ll}");
        trace.push(record);
        if !progress(trace.last().unwrap()) {
            stop = StopReason::Cancelled;
            break;
        }
        if calm >= config.patience {
            stop = StopReason::Converged;
            break;
        }
        if k == config.max_iterations {
            break;
        }
        let budget = if k < config.early_iterations {
            config.bfgs_evals_early
        } else {
            config.bfgs_evals_late
        };
        let step = mstep(&current, &e, series, config, budget).and_then(|(next, proj)| {
            let e_next = estep(&next, protocol, series, &ut)?;
            if !e_next.log_likelihood().is_finite() {
                return Err(Error::Numerical("non-finite log-likelihood".into()));
            }
            Ok((next, proj, e_next))
        });
        match step {
            Ok((next, proj, e_next)) => {
                projected = proj;
                if proj {
                    projections += 1;
                }
                current = next;
                e = e_next;
            }
            Err(err) => {
                log::warn!("EM stopped at iteration {}: {err}", k + 1);
                diagnostic = Some(format!("iteration {}: {err}", k + 1));
                stop = StopReason::NumericalFailure;
                break;
            }
        }
    }

    let (log_likelihood, best_iteration, params) = best;
    Ok(EmFit {
        params,
        log_likelihood,
        best_iteration,
        trace,
        stop_reason: stop,
        projections,
        diagnostic,
    })
}

fn mstep(
    current: &StateSpaceParams,
    e: &EStep,
    series: &VitalSignSeries,
    config: &EmConfig,
    budget: usize,
) -> Result<(StateSpaceParams, bool)> {
    let mut next = current.clone();
    let smoothed = &e.smooth.smoothed;
    let linear = mstep_linear(&e.stats, smoothed)?;
    next.mu1 = linear.mu1;
    next.sigma1 = linear.sigma1;
    let mut projected = false;
    if config.update_dynamics {
        let mut a = linear.a;
        let mut b = linear.b;
        if config.enforce_stability && linalg::spectral_radius(&a)? > 1.0 + linalg::STABILITY_TOLERANCE {
            a = linalg::project_to_stable(&a);
            b = e.stats.input_gain_for(&a)?;
            projected = true;
        }
        next.q_diag = e.stats.process_noise(&a, &b);
        next.a = a;
        next.b = b;
    } else {
        next.q_diag = e.stats.process_noise(&current.a, &current.b);
    }

    let sets = smoothed_sigma_points(smoothed, &config.ut)?;
    next.r_diag = noise_from_sigma_points(&sets, series, current);
    let (c, eta) = mstep_nonlinear(&sets, series, current, budget, config.update_projection)?;
    next.c = c;
    next.eta = eta;
    next.validate()?;
    Ok((next, projected))
}

/// Options for [`initialize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub state_dim: usize,
    pub seed: u64,
    /// Standard deviation of the random entries of `B`.
    pub b_scale: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            state_dim: 4,
            seed: 0,
            b_scale: 0.1,
        }
    }
}

/// Default starting point: `A = 0.9 I`, small random `B`, random unit-norm
/// rows of `C`, `Q = R = 0.1 I`, `N(0, I)` initial state and link bounds
/// spanning each channel's observed range with a 10% margin.
pub fn initialize(
    series: &VitalSignSeries,
    protocol: &InfusionProtocol,
    init: &InitConfig,
) -> Result<StateSpaceParams> {
    let d = init.state_dim;
    if d == 0 {
        return Err(Error::Config("state dimension must be positive".into()));
    }
    let dy = series.n_channels();
    let du = protocol.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let b = DMatrix::from_fn(d, du, |_, _| init.b_scale * normal.sample(&mut rng));
    let mut c = DMatrix::from_fn(dy, d, |_, _| normal.sample(&mut rng));
    for j in 0..dy {
        let n = c.row(j).norm();
        if n > 0.0 {
            c.row_mut(j).unscale_mut(n);
        }
    }
    let eta = (0..dy)
        .map(|j| {
            let vals = series.channel_values(j);
            if vals.is_empty() {
                return GeneralizedLogistic::new(0.0, 1.0, 1.0, 1.0);
            }
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-3 * hi.abs().max(1.0));
            GeneralizedLogistic::new(lo - 0.1 * span, hi + 0.1 * span, 1.0, 1.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let params = StateSpaceParams {
        a: DMatrix::identity(d, d) * 0.9,
        b,
        c,
        q_diag: DVector::from_element(d, 0.1),
        r_diag: DVector::from_element(dy, 0.1),
        mu1: DVector::zeros(d),
        sigma1: DMatrix::identity(d, d),
        eta,
        dt: if series.dt > 0.0 { series.dt } else { DEFAULT_DT_SECONDS },
        link: ObservationLink::Logistic,
    };
    params.validate()?;
    Ok(params)
}

//! Three-compartment pharmacokinetics with per-channel effect sites, cast
//! into state-space form, and the grid search over effect-site rates.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::{self, EmConfig, EmFit};
use crate::linalg;
use crate::model::{GeneralizedLogistic, InfusionProtocol, ObservationLink, StateSpaceParams, VitalSignSeries};

/// Rate constants per minute. `k1e` has one entry per observed channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompartmentRates {
    pub k10: f64,
    pub k12: f64,
    pub k21: f64,
    pub k13: f64,
    pub k31: f64,
    pub k1e: Vec<f64>,
}

impl CompartmentRates {
    pub fn validate(&self) -> Result<()> {
        let all = [self.k10, self.k12, self.k21, self.k13, self.k31];
        if all.iter().chain(&self.k1e).any(|k| !(*k > 0.0) || !k.is_finite()) {
            return Err(Error::InvalidParameter("all rate constants must be > 0".into()));
        }
        if self.k1e.is_empty() {
            return Err(Error::InvalidParameter("need at least one effect-site rate".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.k1e.len()
    }

    /// Same transfer rates with a single effect-site rate.
    pub fn with_k1e(&self, k1e: Vec<f64>) -> Self {
        Self { k1e, ..self.clone() }
    }

    /// The 3x3 central/peripheral block.
    fn pk_block(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            3,
            3,
            &[
                -(self.k10 + self.k12 + self.k13),
                self.k21,
                self.k31,
                self.k12,
                -self.k21,
                0.0,
                self.k13,
                0.0,
                -self.k31,
            ],
        )
    }
}

/// Rates configuration file: transfer rates plus either fixed `k1e`
/// values or a `k1e_grid` to search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatesConfig {
    pub k10: f64,
    pub k12: f64,
    pub k21: f64,
    pub k13: f64,
    pub k31: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k1e: Option<OneOrMany>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k1e_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl RatesConfig {
    /// Rates with `k1e` broadcast to `channels` entries (placeholder 1.0
    /// when the file only gives a grid).
    pub fn rates(&self, channels: usize) -> Result<CompartmentRates> {
        let k1e = match &self.k1e {
            None => vec![1.0; channels],
            Some(OneOrMany::One(k)) => vec![*k; channels],
            Some(OneOrMany::Many(v)) if v.len() == channels => v.clone(),
            Some(OneOrMany::Many(v)) => {
                return Err(Error::Config(format!(
                    "k1e has {} entries for {channels} channels",
                    v.len()
                )))
            }
        };
        let r = CompartmentRates {
            k10: self.k10,
            k12: self.k12,
            k21: self.k21,
            k13: self.k13,
            k31: self.k31,
            k1e,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn grid(&self) -> Vec<f64> {
        self.k1e_grid.clone().unwrap_or_else(default_k1e_grid)
    }
}

/// 50 log-spaced effect-site rates in `[0.01, 10]` per minute.
pub fn default_k1e_grid() -> Vec<f64> {
    let n = 50;
    let (lo, hi) = (0.01f64.ln(), 10f64.ln());
    (0..n)
        .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Continuous dynamics of one channel's block: central, two peripheral
/// compartments and the channel's effect site.
pub fn build_f(rates: &CompartmentRates, channel: usize) -> Result<DMatrix<f64>> {
    let k1e = *rates.k1e.get(channel).ok_or_else(|| {
        Error::Dimension(format!(
            "channel {channel} out of range for {} effect sites",
            rates.k1e.len()
        ))
    })?;
    let mut f = DMatrix::zeros(4, 4);
    f.view_mut((0, 0), (3, 3)).copy_from(&rates.pk_block());
    f[(3, 0)] = k1e;
    f[(3, 3)] = -k1e;
    Ok(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PkPdLayout {
    /// One independent four-state block per channel.
    #[default]
    Independent,
    /// Three shared compartments plus one effect site per channel.
    SharedCentral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDiscretization {
    /// `B = e_1`: each step's rate is added directly to the central state.
    #[default]
    Unit,
    /// `B = int_0^dt exp(F s) ds e_1`, exact for rates held over each step.
    ZeroOrderHold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PkPdOptions {
    pub layout: PkPdLayout,
    pub input: InputDiscretization,
}

/// Continuous drift and input matrices for all channels under `layout`,
/// plus the effect-site coordinate of each channel.
fn continuous_system(rates: &CompartmentRates, layout: PkPdLayout) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<usize>)> {
    rates.validate()?;
    let dy = rates.channels();
    match layout {
        PkPdLayout::Independent => {
            let n = 4 * dy;
            let mut f = DMatrix::zeros(n, n);
            let mut g = DMatrix::zeros(n, 1);
            for j in 0..dy {
                f.view_mut((4 * j, 4 * j), (4, 4)).copy_from(&build_f(rates, j)?);
                g[(4 * j, 0)] = 1.0;
            }
            Ok((f, g, (0..dy).map(|j| 4 * j + 3).collect()))
        }
        PkPdLayout::SharedCentral => {
            let n = 3 + dy;
            let mut f = DMatrix::zeros(n, n);
            f.view_mut((0, 0), (3, 3)).copy_from(&rates.pk_block());
            for (j, k) in rates.k1e.iter().enumerate() {
                f[(3 + j, 0)] = *k;
                f[(3 + j, 3 + j)] = -*k;
            }
            let mut g = DMatrix::zeros(n, 1);
            g[(0, 0)] = 1.0;
            Ok((f, g, (0..dy).map(|j| 3 + j).collect()))
        }
    }
}

/// `(A, B, C)` of the discretized PK/PD system with step `dt` seconds.
pub fn pkpd_dynamics(
    rates: &CompartmentRates,
    dt: f64,
    options: &PkPdOptions,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let (f, g, effect) = continuous_system(rates, options.layout)?;
    let dt_min = dt / 60.0;
    let (a, b) = match options.input {
        InputDiscretization::Unit => (linalg::matrix_exponential(&f, dt_min)?, g),
        InputDiscretization::ZeroOrderHold => linalg::discretize_zoh(&f, &g, dt_min)?,
    };
    let mut c = DMatrix::zeros(effect.len(), f.nrows());
    for (j, &k) in effect.iter().enumerate() {
        c[(j, k)] = 1.0;
    }
    Ok((a, b, c))
}

/// PK/PD model as an IO-NLDS with fixed `A`, `B` and `C`.
#[allow(clippy::too_many_arguments)]
pub fn pkpd_as_nlds(
    rates: &CompartmentRates,
    dt: f64,
    eta: Vec<GeneralizedLogistic>,
    q_diag: DVector<f64>,
    r_diag: DVector<f64>,
    mu1: DVector<f64>,
    sigma1: DMatrix<f64>,
    options: &PkPdOptions,
) -> Result<StateSpaceParams> {
    let (a, b, c) = pkpd_dynamics(rates, dt, options)?;
    let p = StateSpaceParams {
        a,
        b,
        c,
        q_diag,
        r_diag,
        mu1,
        sigma1,
        eta,
        dt,
        link: ObservationLink::Logistic,
    };
    p.validate()?;
    Ok(p)
}

/// Fourth-order Runge-Kutta integration of one channel's block with each
/// step's rate held constant over the preceding interval. Returns one state
/// per protocol step, starting with `x0`.
pub fn simulate_ode(
    rates: &CompartmentRates,
    protocol: &InfusionProtocol,
    x0: &DVector<f64>,
    substeps: usize,
    channel: usize,
) -> Result<Vec<DVector<f64>>> {
    if substeps == 0 {
        return Err(Error::Config("substeps must be >= 1".into()));
    }
    if x0.len() != 4 {
        return Err(Error::Dimension(format!("x0 has {} entries, expected 4", x0.len())));
    }
    let f = build_f(rates, channel)?;
    let h = protocol.dt / 60.0 / substeps as f64;
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(protocol.len());
    for t in 0..protocol.len() {
        if t > 0 {
            let u = protocol.input(t).sum();
            let deriv = |x: &DVector<f64>| {
                let mut d = &f * x;
                d[0] += u;
                d
            };
            for _ in 0..substeps {
                let k1 = deriv(&x);
                let k2 = deriv(&(&x + &k1 * (h / 2.0)));
                let k3 = deriv(&(&x + &k2 * (h / 2.0)));
                let k4 = deriv(&(&x + &k3 * h));
                x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Settings of [`fit_k1e_grid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PkPdFitConfig {
    /// EM settings for every candidate; dynamics and projection stay fixed
    /// regardless of the flags given here.
    pub em: EmConfig,
    /// Extra EM settings for the joint refit of the shared layout.
    pub final_em: EmConfig,
    pub options: PkPdOptions,
}

impl Default for PkPdFitConfig {
    fn default() -> Self {
        Self {
            em: EmConfig {
                max_iterations: 30,
                ..EmConfig::default()
            },
            final_em: EmConfig::default(),
            options: PkPdOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PkPdFit {
    pub k1e: Vec<f64>,
    pub grid: Vec<f64>,
    /// `scores[j][i]`: log-likelihood of channel `j` with candidate `i`.
    pub scores: Vec<Vec<f64>>,
    pub params: StateSpaceParams,
    pub log_likelihood: f64,
    pub options: PkPdOptions,
    /// Per-channel EM reports of the selected candidates.
    pub channel_fits: Vec<EmFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_fit: Option<EmFit>,
}

fn restricted(em: &EmConfig) -> EmConfig {
    EmConfig {
        update_dynamics: false,
        update_projection: false,
        enforce_stability: false,
        ..em.clone()
    }
}

/// Starting point for a PK/PD model: zero initial state, noise and link
/// scaled to the noiseless rollout under the protocol, and link parameters
/// least-squares fitted to that rollout.
pub fn initialize_pkpd(
    rates: &CompartmentRates,
    series: &VitalSignSeries,
    protocol: &InfusionProtocol,
    options: &PkPdOptions,
) -> Result<StateSpaceParams> {
    let (a, b, c) = pkpd_dynamics(rates, series.dt, options)?;
    let d = a.nrows();
    let dy = c.nrows();
    let mut x = DVector::zeros(d);
    let mut peak = DVector::<f64>::zeros(d);
    let mut rollout = Vec::with_capacity(protocol.len());
    for t in 0..protocol.len() {
        if t > 0 {
            x = &a * &x + &b * protocol.input(t);
        }
        peak = peak.zip_map(&x, |p, v| p.max(v.abs()));
        rollout.push(x.clone());
    }
    let scale = |v: f64| if v > 0.0 { v } else { 1.0 };
    let q_diag = peak.map(|p| (0.01 * scale(p)).powi(2));
    let sigma1 = DMatrix::from_diagonal(&q_diag);
    let mut eta = Vec::with_capacity(dy);
    let mut r_diag = DVector::zeros(dy);
    for j in 0..dy {
        let vals = series.channel_values(j);
        let z: Vec<f64> = (0..series.len())
            .filter(|&t| series.is_observed(t, j))
            .map(|t| c.row(j).dot(&rollout[t].transpose()))
            .collect();
        if vals.is_empty() {
            eta.push(GeneralizedLogistic::new(0.0, 1.0, 1.0, 1.0)?);
            r_diag[j] = 1.0;
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        r_diag[j] = if var > 0.0 { 0.1 * var } else { 1.0 };
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-3 * hi.abs().max(1.0));
        let zmax = scale(z.iter().copied().fold(0.0, |m, v| m.max(v.abs())));
        let zm = z.iter().sum::<f64>() / n;
        let cov: f64 = z.iter().zip(&vals).map(|(zt, y)| (zt - zm) * (y - mean)).sum();
        let sign = if cov < 0.0 { -1.0 } else { 1.0 };
        // Baseline (z = 0) near the end of the range the drug moves away from.
        let (m, top, gamma) = (lo - 0.1 * span, hi + 0.1 * span, sign * 4.0 / zmax);
        let start = GeneralizedLogistic::new(m, top, gamma, if sign < 0.0 { 5.0 } else { 0.2 })?;
        eta.push(learning::fit_link_least_squares(&z, &vals, start, 2000)?);
    }
    pkpd_as_nlds(
        rates,
        series.dt,
        eta,
        q_diag,
        r_diag,
        DVector::zeros(d),
        sigma1,
        options,
    )
}

/// Per-channel grid search over `k1e`: every candidate is scored by the
/// log-likelihood of a single-channel model whose noise, link and initial
/// state were fitted by restricted EM. Ties go to the earlier candidate.
pub fn fit_k1e_grid(
    series: &VitalSignSeries,
    protocol: &InfusionProtocol,
    base_rates: &CompartmentRates,
    grid: &[f64],
    config: &PkPdFitConfig,
) -> Result<PkPdFit> {
    if grid.is_empty() {
        return Err(Error::Config("k1e grid is empty".into()));
    }
    if grid.iter().any(|k| !(*k > 0.0) || !k.is_finite()) {
        return Err(Error::Config("k1e candidates must be > 0".into()));
    }
    protocol.check_aligned(series)?;
    let dy = series.n_channels();
    let em = restricted(&config.em);
    let block = PkPdOptions {
        layout: PkPdLayout::Independent,
        input: config.options.input,
    };

    let jobs: Vec<(usize, usize)> = (0..dy).flat_map(|j| (0..grid.len()).map(move |i| (j, i))).collect();
    let fits: Vec<Result<EmFit>> = jobs
        .par_iter()
        .map(|&(j, i)| {
            let single = single_channel(series, j);
            let rates = base_rates.with_k1e(vec![grid[i]]);
            let init = initialize_pkpd(&rates, &single, protocol, &block)?;
            learning::run_em(&single, protocol, &init, &em)
        })
        .collect();

    let mut scores = vec![vec![f64::NEG_INFINITY; grid.len()]; dy];
    let mut fits_by_channel: Vec<Vec<Option<EmFit>>> = vec![vec![None; grid.len()]; dy];
    for (&(j, i), fit) in jobs.iter().zip(fits) {
        match fit {
            Ok(f) => {
                scores[j][i] = f.log_likelihood;
                fits_by_channel[j][i] = Some(f);
            }
            Err(e) => log::warn!("k1e candidate {} on channel {j} failed: {e}", grid[i]),
        }
    }
    let mut k1e = Vec::with_capacity(dy);
    let mut channel_fits = Vec::with_capacity(dy);
    for j in 0..dy {
        let mut best = None;
        for (i, s) in scores[j].iter().enumerate() {
            if s.is_finite() && best.is_none_or(|b: usize| *s > scores[j][b]) {
                best = Some(i);
            }
        }
        let i = best.ok_or_else(|| Error::Numerical(format!("every k1e candidate failed on channel {j}")))?;
        k1e.push(grid[i]);
        channel_fits.push(fits_by_channel[j][i].take().expect("scored candidate has a fit"));
    }

    let rates = base_rates.with_k1e(k1e.clone());
    let (params, log_likelihood, joint_fit) = match config.options.layout {
        PkPdLayout::Independent => {
            let params = assemble_blocks(&rates, series.dt, &channel_fits, &config.options)?;
            let ll = channel_fits.iter().map(|f| f.log_likelihood).sum();
            (params, ll, None)
        }
        PkPdLayout::SharedCentral => {
            let mut init = initialize_pkpd(&rates, series, protocol, &config.options)?;
            for (j, f) in channel_fits.iter().enumerate() {
                init.eta[j] = f.params.eta[0];
                init.r_diag[j] = f.params.r_diag[0];
            }
            let fit = learning::run_em(series, protocol, &init, &restricted(&config.final_em))?;
            (fit.params.clone(), fit.log_likelihood, Some(fit))
        }
    };
    Ok(PkPdFit {
        k1e,
        grid: grid.to_vec(),
        scores,
        params,
        log_likelihood,
        options: config.options,
        channel_fits,
        joint_fit,
    })
}

fn single_channel(series: &VitalSignSeries, j: usize) -> VitalSignSeries {
    series.select_channels(&[j])
}

fn assemble_blocks(
    rates: &CompartmentRates,
    dt: f64,
    fits: &[EmFit],
    options: &PkPdOptions,
) -> Result<StateSpaceParams> {
    let dy = fits.len();
    let n = 4 * dy;
    let mut q = DVector::zeros(n);
    let mut mu1 = DVector::zeros(n);
    let mut sigma1 = DMatrix::zeros(n, n);
    let mut r = DVector::zeros(dy);
    let mut eta = Vec::with_capacity(dy);
    for (j, f) in fits.iter().enumerate() {
        let p = &f.params;
        q.rows_mut(4 * j, 4).copy_from(&p.q_diag);
        mu1.rows_mut(4 * j, 4).copy_from(&p.mu1);
        sigma1.view_mut((4 * j, 4 * j), (4, 4)).copy_from(&p.sigma1);
        r[j] = p.r_diag[0];
        eta.push(p.eta[0]);
    }
    pkpd_as_nlds(rates, dt, eta, q, r, mu1, sigma1, options)
}

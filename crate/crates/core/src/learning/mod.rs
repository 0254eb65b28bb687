//! Expectation-maximization for the IO-NLDS: sufficient statistics from the
//! smoother, closed-form linear updates, an unscented noise update and a
//! numerical update of the observation map.

pub mod bfgs;
mod em;

pub use em::{initialize, run_em, run_em_with_progress, EmConfig, EmFit, InitConfig, IterationRecord, StopReason};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::inference::{self, FilterResult, SmoothResult};
use crate::linalg;
use crate::model::{
    GaussianBelief, GeneralizedLogistic, InfusionProtocol, ObservationLink, StateSpaceParams, VitalSignSeries,
};
use crate::unscented::{self, SigmaPointSet, UtParams};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const NOISE_FLOOR: f64 = 1e-12;
const SOLVE_JITTER: f64 = 1e-9;

/// Smoothed second moments summed over the transitions `t = 1..T-1`
/// (0-based), i.e. every step that has a predecessor.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    /// `sum E[x_t x_t^T]`
    pub s_xx: DMatrix<f64>,
    /// `sum E[x_{t-1} x_{t-1}^T]`
    pub s_prev_prev: DMatrix<f64>,
    /// `sum E[x_t x_{t-1}^T]`
    pub s_x_prev: DMatrix<f64>,
    /// `sum E[x_{t-1}] u_t^T`
    pub s_prev_u: DMatrix<f64>,
    /// `sum E[x_t] u_t^T`
    pub s_xu: DMatrix<f64>,
    /// `sum u_t u_t^T`
    pub s_uu: DMatrix<f64>,
    pub transitions: usize,
}

impl SufficientStats {
    pub fn from_smoother(smooth: &SmoothResult, protocol: &InfusionProtocol) -> Result<Self> {
        let t_len = smooth.smoothed.len();
        if t_len < 2 {
            return Err(Error::Config("learning needs at least two time steps".into()));
        }
        let d = smooth.smoothed[0].dim();
        let du = protocol.input_dim();
        let mut s = Self {
            s_xx: DMatrix::zeros(d, d),
            s_prev_prev: DMatrix::zeros(d, d),
            s_x_prev: DMatrix::zeros(d, d),
            s_prev_u: DMatrix::zeros(d, du),
            s_xu: DMatrix::zeros(d, du),
            s_uu: DMatrix::zeros(du, du),
            transitions: t_len - 1,
        };
        for t in 1..t_len {
            let cur = &smooth.smoothed[t];
            let prev = &smooth.smoothed[t - 1];
            let u = protocol.input(t);
            s.s_xx += &cur.cov + &cur.mean * cur.mean.transpose();
            s.s_prev_prev += &prev.cov + &prev.mean * prev.mean.transpose();
            s.s_x_prev += &smooth.pairwise[t - 1] + &cur.mean * prev.mean.transpose();
            s.s_prev_u += &prev.mean * u.transpose();
            s.s_xu += &cur.mean * u.transpose();
            s.s_uu += &u * u.transpose();
        }
        Ok(s)
    }

    /// Inputs that are non-zero somewhere in the transitions.
    fn active_inputs(&self) -> Vec<usize> {
        (0..self.s_uu.nrows()).filter(|&j| self.s_uu[(j, j)] > 0.0).collect()
    }

    /// `sum E[(x_t - A x_{t-1} - B u_t)(...)^T]` for arbitrary `A`, `B`.
    pub fn residual_scatter(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        // E[r r^T] = S_xx - W N^T - N W^T + W M W^T with W = [A B],
        // N = [S_x,prev S_xu] and M the joint (x_{t-1}, u_t) moment.
        let cross = &self.s_x_prev * a.transpose() + &self.s_xu * b.transpose();
        let quad = a * &self.s_prev_prev * a.transpose()
            + a * &self.s_prev_u * b.transpose()
            + b * self.s_prev_u.transpose() * a.transpose()
            + b * &self.s_uu * b.transpose();
        let mut r = &self.s_xx - &cross - cross.transpose() + quad;
        linalg::symmetrize(&mut r);
        r
    }

    /// Diagonal process noise for the given dynamics, floored.
    pub fn process_noise(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
        let r = self.residual_scatter(a, b);
        let n = self.transitions as f64;
        DVector::from_iterator(r.nrows(), r.diagonal().iter().map(|v| (v / n).max(NOISE_FLOOR)))
    }

    /// Least-squares `B` for a fixed `A`.
    pub fn input_gain_for(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = a.nrows();
        let du = self.s_uu.nrows();
        let mut b = DMatrix::zeros(d, du);
        let active = self.active_inputs();
        if active.is_empty() {
            return Ok(b);
        }
        let s_uu = self.s_uu.select_rows(&active).select_columns(&active);
        let rhs = (&self.s_xu - a * &self.s_prev_u).select_columns(&active);
        // B S_uu = rhs  <=>  S_uu B^T = rhs^T
        let bt = linalg::solve_spd(&s_uu, &rhs.transpose(), SOLVE_JITTER)?;
        for (k, &j) in active.iter().enumerate() {
            b.set_column(j, &bt.row(k).transpose());
        }
        Ok(b)
    }
}

/// Result of one E-step.
#[derive(Debug, Clone)]
pub struct EStep {
    pub filter: FilterResult,
    pub smooth: SmoothResult,
    pub stats: SufficientStats,
}

impl EStep {
    pub fn log_likelihood(&self) -> f64 {
        self.filter.log_likelihood
    }
}

pub fn estep(
    params: &StateSpaceParams,
    protocol: &InfusionProtocol,
    series: &VitalSignSeries,
    ut: &UtParams,
) -> Result<EStep> {
    let filter = inference::run_filter(params, protocol, series, ut)?;
    let smooth = inference::rts_smooth(params, &filter)?;
    let stats = SufficientStats::from_smoother(&smooth, protocol)?;
    Ok(EStep { filter, smooth, stats })
}

/// Closed-form maximizers of the linear-Gaussian part.
#[derive(Debug, Clone)]
pub struct LinearUpdate {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q_diag: DVector<f64>,
    pub mu1: DVector<f64>,
    pub sigma1: DMatrix<f64>,
}

/// Joint least-squares `[A B]`, the residual `Q` and the initial-state
/// moments. Inputs that are zero throughout get a zero column in `B`.
pub fn mstep_linear(stats: &SufficientStats, smoothed: &[GaussianBelief]) -> Result<LinearUpdate> {
    let d = stats.s_xx.nrows();
    let du = stats.s_uu.nrows();
    let active = stats.active_inputs();
    let k = d + active.len();
    let mut m = DMatrix::zeros(k, k);
    m.view_mut((0, 0), (d, d)).copy_from(&stats.s_prev_prev);
    let mut n = DMatrix::zeros(d, k);
    n.view_mut((0, 0), (d, d)).copy_from(&stats.s_x_prev);
    for (ki, &i) in active.iter().enumerate() {
        for r in 0..d {
            m[(r, d + ki)] = stats.s_prev_u[(r, i)];
            m[(d + ki, r)] = stats.s_prev_u[(r, i)];
            n[(r, d + ki)] = stats.s_xu[(r, i)];
        }
        for (kj, &j) in active.iter().enumerate() {
            m[(d + ki, d + kj)] = stats.s_uu[(i, j)];
        }
    }
    // W M = N  <=>  M W^T = N^T
    let wt = linalg::solve_spd(&m, &n.transpose(), SOLVE_JITTER)?;
    let w = wt.transpose();
    let a = w.columns(0, d).into_owned();
    let mut b = DMatrix::zeros(d, du);
    for (ki, &i) in active.iter().enumerate() {
        b.set_column(i, &w.column(d + ki));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite dynamics update".into()));
    }
    let q_diag = stats.process_noise(&a, &b);
    let first = &smoothed[0];
    Ok(LinearUpdate {
        a,
        b,
        q_diag,
        mu1: first.mean.clone(),
        sigma1: first.cov.clone(),
    })
}

/// Sigma points of every smoothed marginal.
pub fn smoothed_sigma_points(smoothed: &[GaussianBelief], ut: &UtParams) -> Result<Vec<SigmaPointSet>> {
    smoothed
        .iter()
        .enumerate()
        .map(|(t, b)| unscented::sigma_points(b, ut).map_err(|e| e.at(t)))
        .collect()
}

/// Observation noise: the unscented expectation of the squared residual,
/// averaged over each channel's observed cells. Channels without
/// observations keep their previous value.
pub fn mstep_r(
    smoothed: &[GaussianBelief],
    series: &VitalSignSeries,
    params: &StateSpaceParams,
    ut: &UtParams,
) -> Result<DVector<f64>> {
    let sets = smoothed_sigma_points(smoothed, ut)?;
    Ok(noise_from_sigma_points(&sets, series, params))
}

pub(crate) fn noise_from_sigma_points(
    sets: &[SigmaPointSet],
    series: &VitalSignSeries,
    params: &StateSpaceParams,
) -> DVector<f64> {
    let dy = series.n_channels();
    let mut r = params.r_diag.clone();
    for j in 0..dy {
        let row = params.c.row(j);
        let mut sum = 0.0;
        let mut count = 0usize;
        for (t, sp) in sets.iter().enumerate() {
            if !series.is_observed(t, j) {
                continue;
            }
            let y = series.values[(t, j)];
            let e: f64 = sp
                .points
                .iter()
                .zip(&sp.w_mean)
                .map(|(x, w)| {
                    let resid = y - params.link_value(j, row.dot(&x.transpose()));
                    w * resid * resid
                })
                .sum();
            sum += e;
            count += 1;
        }
        if count == 0 {
            log::warn!("channel {j} has no observations; keeping its noise variance");
            continue;
        }
        r[j] = (sum / count as f64).max(NOISE_FLOOR);
    }
    r
}

/// `sum_t sum_j E[log N(y_tj | g_j(C_j x_t), R_jj)]` over observed cells,
/// with expectations under the given sigma points.
pub fn expected_log_likelihood(sets: &[SigmaPointSet], series: &VitalSignSeries, params: &StateSpaceParams) -> f64 {
    let mut total = 0.0;
    for j in 0..series.n_channels() {
        let r = params.r_diag[j];
        let (sse, count) = channel_sse(sets, series, j, |x| {
            params.link_value(j, params.c.row(j).dot(&x.transpose()))
        });
        total -= 0.5 * (count as f64 * (LN_2PI + r.ln()) + sse / r);
    }
    total
}

fn channel_sse<F>(sets: &[SigmaPointSet], series: &VitalSignSeries, j: usize, pred: F) -> (f64, usize)
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut sse = 0.0;
    let mut count = 0;
    for (t, sp) in sets.iter().enumerate() {
        if !series.is_observed(t, j) {
            continue;
        }
        let y = series.values[(t, j)];
        for (x, w) in sp.points.iter().zip(&sp.w_mean) {
            let resid = y - pred(x);
            sse += w * resid * resid;
        }
        count += 1;
    }
    (sse, count)
}

/// Updated observation map. For the logistic link each channel's row of `C`
/// and its link parameters are refined by budgeted BFGS on the expected
/// log-likelihood; the identity link has an exact weighted least-squares
/// solution. With `update_projection = false` only the link parameters move.
pub fn mstep_nonlinear(
    sets: &[SigmaPointSet],
    series: &VitalSignSeries,
    params: &StateSpaceParams,
    max_evals: usize,
    update_projection: bool,
) -> Result<(DMatrix<f64>, Vec<GeneralizedLogistic>)> {
    let dy = series.n_channels();
    match params.link {
        ObservationLink::Identity => {
            let mut c = params.c.clone();
            if update_projection {
                for j in 0..dy {
                    if let Some(row) = identity_row(sets, series, j)? {
                        c.set_row(j, &row.transpose());
                    }
                }
            }
            Ok((c, params.eta.clone()))
        }
        ObservationLink::Logistic => {
            let rows: Vec<Result<(DVector<f64>, GeneralizedLogistic)>> = (0..dy)
                .into_par_iter()
                .map(|j| logistic_channel(sets, series, params, j, max_evals, update_projection))
                .collect();
            let mut c = params.c.clone();
            let mut eta = params.eta.clone();
            for (j, r) in rows.into_iter().enumerate() {
                let (row, link) = r?;
                c.set_row(j, &row.transpose());
                eta[j] = link;
            }
            Ok((c, eta))
        }
    }
}

fn identity_row(sets: &[SigmaPointSet], series: &VitalSignSeries, j: usize) -> Result<Option<DVector<f64>>> {
    let d = sets[0].dim();
    let mut gram = DMatrix::zeros(d, d);
    let mut rhs = DMatrix::zeros(d, 1);
    let mut any = false;
    for (t, sp) in sets.iter().enumerate() {
        if !series.is_observed(t, j) {
            continue;
        }
        any = true;
        let y = series.values[(t, j)];
        for (x, w) in sp.points.iter().zip(&sp.w_mean) {
            gram += x * x.transpose() * *w;
            rhs += x * (*w * y);
        }
    }
    if !any {
        return Ok(None);
    }
    linalg::symmetrize(&mut gram);
    let sol = linalg::solve_spd(&gram, &rhs, SOLVE_JITTER)?;
    Ok(Some(sol.column(0).into_owned()))
}

fn encode_link(g: &GeneralizedLogistic) -> [f64; 4] {
    [g.lower, (g.upper - g.lower).ln(), g.gamma, g.nu.ln()]
}

fn decode_link(v: &[f64]) -> GeneralizedLogistic {
    GeneralizedLogistic {
        lower: v[0],
        upper: v[0] + v[1].exp(),
        gamma: v[2],
        nu: v[3].exp(),
    }
}

/// Least-squares fit of a logistic link to point projections `z` and
/// targets `y`, starting from `init`.
pub fn fit_link_least_squares(
    z: &[f64],
    y: &[f64],
    init: GeneralizedLogistic,
    max_evals: usize,
) -> Result<GeneralizedLogistic> {
    let objective = |theta: &[f64]| -> f64 {
        let g = decode_link(theta);
        z.iter().zip(y).map(|(zt, yt)| (yt - g.value(*zt)).powi(2)).sum()
    };
    let opts = bfgs::BfgsOptions {
        max_evals,
        ..Default::default()
    };
    let res = bfgs::minimize(objective, &encode_link(&init), &opts)?;
    let g = decode_link(&res.x);
    Ok(if g.validate().is_ok() { g } else { init })
}

fn logistic_channel(
    sets: &[SigmaPointSet],
    series: &VitalSignSeries,
    params: &StateSpaceParams,
    j: usize,
    max_evals: usize,
    update_projection: bool,
) -> Result<(DVector<f64>, GeneralizedLogistic)> {
    let d = params.state_dim();
    let row0 = params.c.row(j).transpose();
    let link0 = params.eta[j];
    if !(0..series.len()).any(|t| series.is_observed(t, j)) {
        return Ok((row0, link0));
    }
    // Projections are fixed when C is frozen, so precompute them.
    let fixed: Vec<(f64, Vec<(f64, f64)>)> = if update_projection {
        vec![]
    } else {
        sets.iter()
            .enumerate()
            .filter(|(t, _)| series.is_observed(*t, j))
            .map(|(t, sp)| {
                let zs = sp
                    .points
                    .iter()
                    .zip(&sp.w_mean)
                    .map(|(x, w)| (*w, row0.dot(x)))
                    .collect();
                (series.values[(t, j)], zs)
            })
            .collect()
    };
    let objective = |theta: &[f64]| -> f64 {
        if update_projection {
            let row = DVector::from_column_slice(&theta[..d]);
            let g = decode_link(&theta[d..]);
            channel_sse(sets, series, j, |x| g.value(row.dot(x))).0
        } else {
            let g = decode_link(theta);
            fixed
                .iter()
                .map(|(y, zs)| {
                    zs.iter()
                        .map(|(w, z)| {
                            let r = y - g.value(*z);
                            w * r * r
                        })
                        .sum::<f64>()
                })
                .sum()
        }
    };
    let mut theta0: Vec<f64> = if update_projection {
        row0.iter().copied().collect()
    } else {
        vec![]
    };
    theta0.extend_from_slice(&encode_link(&link0));
    let opts = bfgs::BfgsOptions {
        max_evals,
        ..Default::default()
    };
    let res = bfgs::minimize(objective, &theta0, &opts)?;
    let (row, link) = if update_projection {
        (DVector::from_column_slice(&res.x[..d]), decode_link(&res.x[d..]))
    } else {
        (row0, decode_link(&res.x))
    };
    if link.validate().is_err() {
        return Ok((params.c.row(j).transpose(), link0));
    }
    Ok((row, link))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_scalar(a: f64, b: f64, q: f64, r: f64) -> StateSpaceParams {
        StateSpaceParams {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            c: DMatrix::from_element(1, 1, 1.0),
            q_diag: DVector::from_element(1, q),
            r_diag: DVector::from_element(1, r),
            mu1: DVector::zeros(1),
            sigma1: DMatrix::identity(1, 1),
            eta: vec![],
            dt: 15.0,
            link: ObservationLink::Identity,
        }
    }

    fn point_beliefs(xs: &[f64]) -> Vec<GaussianBelief> {
        xs.iter()
            .map(|x| GaussianBelief::new(DVector::from_element(1, *x), DMatrix::zeros(1, 1)).unwrap())
            .collect()
    }

    fn stats_for(xs: &[f64], us: &[f64]) -> (SufficientStats, Vec<GaussianBelief>) {
        let smoothed = point_beliefs(xs);
        let pairwise = vec![DMatrix::zeros(1, 1); xs.len() - 1];
        let smooth = SmoothResult {
            smoothed: smoothed.clone(),
            pairwise,
        };
        let proto = InfusionProtocol::from_rates(15.0, us).unwrap();
        (SufficientStats::from_smoother(&smooth, &proto).unwrap(), smoothed)
    }

    #[test]
    fn zero_input_reduces_to_autoregression() {
        let xs = [1.0, 0.8, 0.7, 0.5, 0.45, 0.3];
        let (stats, smoothed) = stats_for(&xs, &[0.0; 6]);
        let up = mstep_linear(&stats, &smoothed).unwrap();
        let num: f64 = xs.windows(2).map(|w| w[1] * w[0]).sum();
        let den: f64 = xs[..5].iter().map(|x| x * x).sum();
        assert!((up.a[(0, 0)] - num / den).abs() < 1e-12);
        assert_eq!(up.b[(0, 0)], 0.0);
    }

    #[test]
    fn exact_linear_data_gives_exact_dynamics() {
        let us = [0.0, 1.0, 2.0, 0.0, 1.5, 0.5, 3.0, 0.0];
        let mut xs = vec![0.3];
        for t in 1..us.len() {
            xs.push(0.7 * xs[t - 1] + 0.25 * us[t]);
        }
        let (stats, smoothed) = stats_for(&xs, &us);
        let up = mstep_linear(&stats, &smoothed).unwrap();
        assert!((up.a[(0, 0)] - 0.7).abs() < 1e-9);
        assert!((up.b[(0, 0)] - 0.25).abs() < 1e-9);
        assert_eq!(up.q_diag[0], NOISE_FLOOR);
        assert!((stats.input_gain_for(&up.a).unwrap()[(0, 0)] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn residual_scatter_matches_direct_sum() {
        let us = [0.0, 1.0, 2.0, 0.0, 1.5];
        let xs = [0.1, 0.5, 1.2, 0.4, 0.9];
        let (stats, _) = stats_for(&xs, &us);
        let (a, b) = (0.6, 0.3);
        let direct: f64 = (1..5).map(|t| (xs[t] - a * xs[t - 1] - b * us[t]).powi(2)).sum();
        let r = stats.residual_scatter(&DMatrix::from_element(1, 1, a), &DMatrix::from_element(1, 1, b));
        assert!((r[(0, 0)] - direct).abs() < 1e-12);
    }

    #[test]
    fn noise_update_on_point_masses() {
        let p = linear_scalar(1.0, 0.0, 1.0, 1.0);
        let smoothed = point_beliefs(&[1.0, 2.0, 3.0]);
        let mut vals = DMatrix::from_column_slice(3, 1, &[1.5, 2.0, 100.0]);
        vals[(2, 0)] = 2.0;
        let mut mask = DMatrix::from_element(3, 1, true);
        mask[(1, 0)] = false;
        let series = VitalSignSeries::new(15.0, vec!["y".into()], vals, mask).unwrap();
        let r = mstep_r(&smoothed, &series, &p, &UtParams::default()).unwrap();
        // residuals 0.5 and -1 on the two observed cells
        assert!((r[0] - 0.625).abs() < 1e-12);
    }

    #[test]
    fn unobserved_channel_keeps_noise() {
        let p = linear_scalar(1.0, 0.0, 1.0, 0.37);
        let smoothed = point_beliefs(&[1.0, 2.0]);
        let series = VitalSignSeries::new(
            15.0,
            vec!["y".into()],
            DMatrix::zeros(2, 1),
            DMatrix::from_element(2, 1, false),
        )
        .unwrap();
        let r = mstep_r(&smoothed, &series, &p, &UtParams::default()).unwrap();
        assert_eq!(r[0], 0.37);
    }

    #[test]
    fn identity_projection_is_weighted_least_squares() {
        let mut p = linear_scalar(1.0, 0.0, 1.0, 1.0);
        p.c[(0, 0)] = 0.1;
        let smoothed = point_beliefs(&[1.0, 2.0, -1.0]);
        let series = VitalSignSeries::fully_observed(
            15.0,
            vec!["y".into()],
            DMatrix::from_column_slice(3, 1, &[3.0, 6.0, -3.0]),
        )
        .unwrap();
        let sets = smoothed_sigma_points(&smoothed, &UtParams::default()).unwrap();
        let (c, _) = mstep_nonlinear(&sets, &series, &p, 100, true).unwrap();
        assert!((c[(0, 0)] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn logistic_update_does_not_decrease_objective() {
        let d = 2;
        let truth = StateSpaceParams {
            a: DMatrix::identity(d, d),
            b: DMatrix::zeros(d, 1),
            c: DMatrix::from_row_slice(1, d, &[0.8, -0.4]),
            q_diag: DVector::from_element(d, 0.1),
            r_diag: DVector::from_element(1, 0.5),
            mu1: DVector::zeros(d),
            sigma1: DMatrix::identity(d, d),
            eta: vec![GeneralizedLogistic::new(40.0, 120.0, 1.2, 1.5).unwrap()],
            dt: 15.0,
            link: ObservationLink::Logistic,
        };
        let smoothed: Vec<GaussianBelief> = (0..40)
            .map(|t| {
                let s = t as f64 / 10.0 - 2.0;
                GaussianBelief::new(
                    DVector::from_vec(vec![s, 0.5 * s.sin()]),
                    DMatrix::identity(d, d) * 0.05,
                )
                .unwrap()
            })
            .collect();
        let sets = smoothed_sigma_points(&smoothed, &UtParams::default()).unwrap();
        let vals = DMatrix::from_iterator(40, 1, smoothed.iter().map(|b| truth.observe(&b.mean, &[0])[0]));
        let series = VitalSignSeries::fully_observed(15.0, vec!["y".into()], vals).unwrap();
        let mut start = truth.clone();
        start.c = DMatrix::from_row_slice(1, d, &[0.3, 0.3]);
        start.eta = vec![GeneralizedLogistic::new(30.0, 140.0, 1.0, 1.0).unwrap()];
        let base = expected_log_likelihood(&sets, &series, &start);
        let (c, eta) = mstep_nonlinear(&sets, &series, &start, 1000, true).unwrap();
        let mut fitted = start.clone();
        fitted.c = c;
        fitted.eta = eta;
        let after = expected_log_likelihood(&sets, &series, &fitted);
        assert!(after >= base);
        let (_, eta_only) = mstep_nonlinear(&sets, &series, &start, 1000, false).unwrap();
        let mut frozen = start.clone();
        frozen.eta = eta_only;
        assert_eq!(frozen.c, start.c);
        assert!(expected_log_likelihood(&sets, &series, &frozen) >= base);
    }
}

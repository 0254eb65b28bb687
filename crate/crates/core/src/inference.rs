//! Forward filtering (linear predict, unscented update), RTS smoothing with
//! pairwise covariances, and multi-step / free-running forecasts.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{GaussianBelief, InfusionProtocol, StateSpaceParams, VitalSignSeries};
use crate::unscented::{self, UtMoments, UtParams};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Innovation covariance jitter schedule: `1e-9 .. 1e-3`, escalating by 10x.
const INNOVATION_JITTER: (f64, f64) = (1e-9, 1e-3);
const SMOOTHER_JITTER: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct FilterResult {
    /// `p(x_t | y_{1:t-1}, u_{1:t})`
    pub predicted: Vec<GaussianBelief>,
    /// `p(x_t | y_{1:t}, u_{1:t})`
    pub filtered: Vec<GaussianBelief>,
    pub log_likelihood: f64,
    /// Per-step log-likelihood increments.
    pub increments: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SmoothResult {
    pub smoothed: Vec<GaussianBelief>,
    /// `pairwise[t - 1]` holds `P_{t, t-1 | T}` for `t = 1..T-1` (0-based).
    pub pairwise: Vec<DMatrix<f64>>,
}

/// Kalman prediction through the linear dynamics.
pub fn predict_step(
    belief: &GaussianBelief,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    u: &DVector<f64>,
    q_diag: &DVector<f64>,
) -> Result<GaussianBelief> {
    let d = belief.dim();
    if a.nrows() != d || a.ncols() != d || b.nrows() != d || b.ncols() != u.len() || q_diag.len() != d {
        return Err(Error::Dimension(format!(
            "predict: state {d}, A {}x{}, B {}x{}, u {}, Q {}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            u.len(),
            q_diag.len()
        )));
    }
    let mean = a * &belief.mean + b * u;
    let mut cov = a * &belief.cov * a.transpose();
    for i in 0..d {
        cov[(i, i)] += q_diag[i];
    }
    GaussianBelief::new(mean, cov)
}

/// Unscented moments of the noise-free observation `g(Cx)` on `channels`.
pub fn observation_moments(
    belief: &GaussianBelief,
    params: &StateSpaceParams,
    channels: &[usize],
    ut: &UtParams,
) -> Result<UtMoments> {
    let c_obs = params.c.select_rows(channels);
    unscented::unscented_transform(
        belief,
        |x| {
            let z = &c_obs * x;
            DVector::from_iterator(
                channels.len(),
                channels.iter().zip(z.iter()).map(|(&j, &zj)| params.link_value(j, zj)),
            )
        },
        ut,
    )
}

/// Unscented measurement update on the observed channels.
///
/// `y` has one entry per channel; entries outside `observed` are ignored.
/// Returns the posterior and the log-likelihood increment
/// `log N(y_obs | mu_y, S)`.
pub fn update_step(
    predicted: &GaussianBelief,
    y: &DVector<f64>,
    observed: &[usize],
    params: &StateSpaceParams,
    ut: &UtParams,
) -> Result<(GaussianBelief, f64)> {
    if observed.is_empty() {
        return Ok((predicted.clone(), 0.0));
    }
    if params.c.ncols() != predicted.dim() {
        return Err(Error::Dimension(format!(
            "update: C has {} columns, state has {}",
            params.c.ncols(),
            predicted.dim()
        )));
    }
    let moments = observation_moments(predicted, params, observed, ut)?;
    let k = observed.len();
    let mut s = moments.cov.clone();
    for (i, &j) in observed.iter().enumerate() {
        s[(i, i)] += params.r_diag[j];
    }
    let chol = linalg::spd_cholesky(&s, INNOVATION_JITTER.0, INNOVATION_JITTER.1)
        .map_err(|_| Error::Numerical("innovation covariance not invertible".into()))?;
    let resid = DVector::from_iterator(k, observed.iter().map(|&j| y[j])) - &moments.mean;

    // K = P_xy S^-1, computed as (S^-1 P_xy^T)^T.
    let gain = chol.solve(&moments.cross_cov.transpose()).transpose();
    let mean = &predicted.mean + &gain * &resid;
    let l = chol.l();
    let cov = &predicted.cov - &gain * &l * (&gain * &l).transpose();

    let solved = chol.solve(&resid);
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let loglik = -0.5 * (k as f64 * LN_2PI + log_det + resid.dot(&solved));
    Ok((GaussianBelief::new(mean, cov)?, loglik))
}

/// Unscented Kalman filter over an aligned protocol and series.
pub fn run_filter(
    params: &StateSpaceParams,
    protocol: &InfusionProtocol,
    series: &VitalSignSeries,
    ut: &UtParams,
) -> Result<FilterResult> {
    protocol.check_aligned(series)?;
    check_model_data(params, protocol, series)?;
    let t_len = series.len();
    let mut predicted = Vec::with_capacity(t_len);
    let mut filtered: Vec<GaussianBelief> = Vec::with_capacity(t_len);
    let mut increments = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let prior = if t == 0 {
            GaussianBelief::new(params.mu1.clone(), params.sigma1.clone())?
        } else {
            predict_step(
                &filtered[t - 1],
                &params.a,
                &params.b,
                &protocol.input(t),
                &params.q_diag,
            )
            .map_err(|e| e.at(t))?
        };
        let y = series.values.row(t).transpose();
        let observed = series.observed_channels(t);
        let (post, inc) = update_step(&prior, &y, &observed, params, ut).map_err(|e| e.at(t))?;
        predicted.push(prior);
        filtered.push(post);
        increments.push(inc);
    }
    let log_likelihood = increments.iter().sum();
    Ok(FilterResult {
        predicted,
        filtered,
        log_likelihood,
        increments,
    })
}

fn check_model_data(params: &StateSpaceParams, protocol: &InfusionProtocol, series: &VitalSignSeries) -> Result<()> {
    if params.input_dim() != protocol.input_dim() {
        return Err(Error::Dimension(format!(
            "model expects {} inputs, protocol has {}",
            params.input_dim(),
            protocol.input_dim()
        )));
    }
    if params.obs_dim() != series.n_channels() {
        return Err(Error::Dimension(format!(
            "model has {} channels, series has {}",
            params.obs_dim(),
            series.n_channels()
        )));
    }
    Ok(())
}

/// Rauch-Tung-Striebel backward pass over a filter run.
pub fn rts_smooth(params: &StateSpaceParams, filter: &FilterResult) -> Result<SmoothResult> {
    let t_len = filter.filtered.len();
    if t_len == 0 {
        return Ok(SmoothResult {
            smoothed: vec![],
            pairwise: vec![],
        });
    }
    let mut smoothed = filter.filtered.clone();
    let mut gains: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); t_len - 1];
    for t in (0..t_len - 1).rev() {
        let f = &filter.filtered[t];
        let p = &filter.predicted[t + 1];
        // G_t = P_{t|t} A^T P_{t+1|t}^{-1}, via P_{t+1|t} X = A P_{t|t}.
        let rhs = &params.a * &f.cov;
        let x = linalg::solve_spd(&p.cov, &rhs, SMOOTHER_JITTER).map_err(|e| e.at(t + 1))?;
        let g = x.transpose();
        let next = &smoothed[t + 1];
        let mean = &f.mean + &g * (&next.mean - &p.mean);
        let cov = &f.cov + &g * (&next.cov - &p.cov) * g.transpose();
        smoothed[t] = GaussianBelief::new(mean, cov)?;
        gains[t] = g;
    }
    let pairwise = (1..t_len)
        .map(|t| &smoothed[t].cov * gains[t - 1].transpose())
        .collect();
    Ok(SmoothResult { smoothed, pairwise })
}

/// Predicted observation moments for a set of target time indices.
#[derive(Debug, Clone)]
pub struct Forecast {
    /// 0-based target time indices.
    pub targets: Vec<usize>,
    /// Latent predictive beliefs at each target.
    pub beliefs: Vec<GaussianBelief>,
    /// `targets.len() x d_y` unscented means of `g(Cx)`.
    pub means: DMatrix<f64>,
    /// Predictive variances of `y`, i.e. unscented variance of `g(Cx)` plus `R`.
    pub variances: DMatrix<f64>,
}

impl Forecast {
    fn from_beliefs(
        params: &StateSpaceParams,
        targets: Vec<usize>,
        beliefs: Vec<GaussianBelief>,
        ut: &UtParams,
    ) -> Result<Self> {
        let dy = params.obs_dim();
        let all: Vec<usize> = (0..dy).collect();
        let mut means = DMatrix::zeros(targets.len(), dy);
        let mut variances = DMatrix::zeros(targets.len(), dy);
        for (row, (belief, &t)) in beliefs.iter().zip(&targets).enumerate() {
            let m = observation_moments(belief, params, &all, ut).map_err(|e| e.at(t))?;
            for j in 0..dy {
                means[(row, j)] = m.mean[j];
                variances[(row, j)] = m.cov[(j, j)] + params.r_diag[j];
            }
        }
        Ok(Self {
            targets,
            beliefs,
            means,
            variances,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Sum over targets of `log N(y_obs | mu_y, S)` on observed channels.
    pub fn log_likelihood(&self, params: &StateSpaceParams, series: &VitalSignSeries, ut: &UtParams) -> Result<f64> {
        let mut total = 0.0;
        for (belief, &t) in self.beliefs.iter().zip(&self.targets) {
            let observed = series.observed_channels(t);
            let y = series.values.row(t).transpose();
            let (_, inc) = update_step(belief, &y, &observed, params, ut).map_err(|e| e.at(t))?;
            total += inc;
        }
        Ok(total)
    }
}

/// `h`-step-ahead predictions from every filtered belief with `t + h < T`,
/// using the known future inputs.
pub fn h_step_predict(
    params: &StateSpaceParams,
    filter: &FilterResult,
    protocol: &InfusionProtocol,
    h: usize,
    ut: &UtParams,
) -> Result<Forecast> {
    let t_len = filter.filtered.len();
    if h < 1 || h + 1 > t_len {
        return Err(Error::Config(format!(
            "horizon must satisfy 1 <= h <= T-1 (h={h}, T={t_len})"
        )));
    }
    if protocol.len() < t_len {
        return Err(Error::Dimension("protocol shorter than filter run".into()));
    }
    let mut targets = Vec::with_capacity(t_len - h);
    let mut beliefs = Vec::with_capacity(t_len - h);
    for t in 0..(t_len - h) {
        let mut b = filter.filtered[t].clone();
        for s in (t + 1)..=(t + h) {
            b = predict_step(&b, &params.a, &params.b, &protocol.input(s), &params.q_diag)?;
        }
        targets.push(t + h);
        beliefs.push(b);
    }
    Forecast::from_beliefs(params, targets, beliefs, ut)
}

/// Rollout from `N(mu1, Sigma1)` driven only by the inputs.
pub fn free_run(
    params: &StateSpaceParams,
    protocol: &InfusionProtocol,
    t_len: usize,
    ut: &UtParams,
) -> Result<Forecast> {
    if protocol.len() < t_len {
        return Err(Error::Dimension(format!(
            "protocol has {} steps, {t_len} requested",
            protocol.len()
        )));
    }
    if params.input_dim() != protocol.input_dim() {
        return Err(Error::Dimension("protocol input dimension differs from model".into()));
    }
    let mut beliefs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let b = if t == 0 {
            GaussianBelief::new(params.mu1.clone(), params.sigma1.clone())?
        } else {
            predict_step(
                &beliefs[t - 1],
                &params.a,
                &params.b,
                &protocol.input(t),
                &params.q_diag,
            )?
        };
        beliefs.push(b);
    }
    Forecast::from_beliefs(params, (0..t_len).collect(), beliefs, ut)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GeneralizedLogistic, ObservationLink};

    fn scalar_params(a: f64, b: f64, q: f64, r: f64) -> StateSpaceParams {
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

    fn scalar_belief(m: f64, v: f64) -> GaussianBelief {
        GaussianBelief::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, v)).unwrap()
    }

    #[test]
    fn predict_identity_leaves_belief() {
        let b = GaussianBelief::new(
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
        )
        .unwrap();
        let out = predict_step(
            &b,
            &DMatrix::identity(2, 2),
            &DMatrix::zeros(2, 1),
            &DVector::from_element(1, 3.0),
            &DVector::zeros(2),
        )
        .unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn predict_scalar_substitution() {
        let out = predict_step(
            &scalar_belief(0.0, 0.0),
            &DMatrix::from_element(1, 1, 0.5),
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_element(1, 2.0),
            &DVector::from_element(1, 0.1),
        )
        .unwrap();
        assert_eq!(out.mean[0], 2.0);
        assert!((out.cov[(0, 0)] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn predict_rejects_bad_dimensions() {
        let r = predict_step(
            &scalar_belief(0.0, 1.0),
            &DMatrix::identity(2, 2),
            &DMatrix::zeros(2, 1),
            &DVector::zeros(1),
            &DVector::zeros(2),
        );
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn conjugate_scalar_update() {
        let p = scalar_params(1.0, 0.0, 0.0, 1.0);
        let (post, inc) = update_step(
            &scalar_belief(0.0, 1.0),
            &DVector::from_element(1, 1.0),
            &[0],
            &p,
            &UtParams::default(),
        )
        .unwrap();
        assert!((post.mean[0] - 0.5).abs() < 1e-12);
        assert!((post.cov[(0, 0)] - 0.5).abs() < 1e-12);
        // log N(1 | 0, 2)
        let want = -0.5 * (LN_2PI + 2f64.ln() + 0.5);
        assert!((inc - want).abs() < 1e-12);
    }

    #[test]
    fn masked_update_is_a_no_op() {
        let p = scalar_params(1.0, 0.0, 0.0, 1.0);
        let prior = scalar_belief(0.3, 2.0);
        let (post, inc) = update_step(&prior, &DVector::from_element(1, 9.0), &[], &p, &UtParams::default()).unwrap();
        assert_eq!(post, prior);
        assert_eq!(inc, 0.0);
    }

    #[test]
    fn huge_observation_noise_is_uninformative() {
        let p = scalar_params(1.0, 0.0, 0.0, 1e12);
        let prior = scalar_belief(0.3, 2.0);
        let (post, _) = update_step(&prior, &DVector::from_element(1, 9.0), &[0], &p, &UtParams::default()).unwrap();
        assert!(((post.mean[0] - 0.3) / 0.3).abs() < 1e-5);
        assert!(((post.cov[(0, 0)] - 2.0) / 2.0).abs() < 1e-5);
    }

    #[test]
    fn single_missing_step_gives_zero_likelihood() {
        let p = scalar_params(0.5, 1.0, 0.1, 0.1);
        let series = VitalSignSeries::new(
            15.0,
            vec!["y".into()],
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, false),
        )
        .unwrap();
        let proto = InfusionProtocol::from_rates(15.0, &[1.0]).unwrap();
        let fr = run_filter(&p, &proto, &series, &UtParams::default()).unwrap();
        assert_eq!(fr.log_likelihood, 0.0);
        assert_eq!(fr.filtered[0].mean, p.mu1);
        assert_eq!(fr.filtered[0].cov, p.sigma1);
        let sm = rts_smooth(&p, &fr).unwrap();
        assert_eq!(sm.smoothed[0], fr.filtered[0]);
        assert!(sm.pairwise.is_empty());
    }

    #[test]
    fn free_run_geometric_recurrence() {
        let mut p = scalar_params(0.5, 1.0, 0.0, 0.1);
        p.sigma1 = DMatrix::zeros(1, 1);
        let proto = InfusionProtocol::from_rates(15.0, &[1.0; 40]).unwrap();
        let fc = free_run(&p, &proto, 40, &UtParams::default()).unwrap();
        assert_eq!(fc.beliefs[0].mean[0], 0.0);
        assert_eq!(fc.beliefs[1].mean[0], 1.0);
        assert_eq!(fc.beliefs[2].mean[0], 1.5);
        assert_eq!(fc.beliefs[3].mean[0], 1.75);
        assert!((fc.beliefs[39].mean[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn h_step_rejects_out_of_range_horizon() {
        let p = scalar_params(0.5, 1.0, 0.1, 0.1);
        let series = VitalSignSeries::fully_observed(15.0, vec!["y".into()], DMatrix::from_element(5, 1, 1.0)).unwrap();
        let proto = InfusionProtocol::from_rates(15.0, &[1.0; 5]).unwrap();
        let fr = run_filter(&p, &proto, &series, &UtParams::default()).unwrap();
        let ut = UtParams::default();
        assert!(matches!(h_step_predict(&p, &fr, &proto, 0, &ut), Err(Error::Config(_))));
        assert!(matches!(h_step_predict(&p, &fr, &proto, 5, &ut), Err(Error::Config(_))));
        assert_eq!(h_step_predict(&p, &fr, &proto, 4, &ut).unwrap().targets, vec![4]);
    }

    #[test]
    fn noiseless_h_step_equals_deterministic_rollout() {
        let p = StateSpaceParams {
            a: DMatrix::from_row_slice(2, 2, &[0.9, 0.05, 0.0, 0.8]),
            b: DMatrix::from_row_slice(2, 1, &[0.1, 0.2]),
            c: DMatrix::from_row_slice(1, 2, &[1.0, -0.5]),
            q_diag: DVector::zeros(2),
            r_diag: DVector::from_element(1, 0.5),
            mu1: DVector::from_vec(vec![0.1, 0.2]),
            sigma1: DMatrix::zeros(2, 2),
            eta: vec![GeneralizedLogistic::new(40.0, 120.0, 2.0, 1.5).unwrap()],
            dt: 15.0,
            link: ObservationLink::Logistic,
        };
        let rates: Vec<f64> = (0..30).map(|t| if t % 7 < 3 { 2.0 } else { 0.5 }).collect();
        let proto = InfusionProtocol::from_rates(15.0, &rates).unwrap();
        // all observations masked, so filtered = predicted with zero covariance
        let series = VitalSignSeries::new(
            15.0,
            vec!["y".into()],
            DMatrix::zeros(30, 1),
            DMatrix::from_element(30, 1, false),
        )
        .unwrap();
        let ut = UtParams::default();
        let fr = run_filter(&p, &proto, &series, &ut).unwrap();
        let fc = h_step_predict(&p, &fr, &proto, 10, &ut).unwrap();
        let mut x = p.mu1.clone();
        let mut rollout = vec![p.observe(&x, &[0])[0]];
        for t in 1..30 {
            x = &p.a * &x + &p.b * proto.input(t);
            rollout.push(p.observe(&x, &[0])[0]);
        }
        for (row, &t) in fc.targets.iter().enumerate() {
            assert!((fc.means[(row, 0)] - rollout[t]).abs() < 1e-10);
            assert!((fc.variances[(row, 0)] - 0.5).abs() < 1e-10);
        }
    }
}

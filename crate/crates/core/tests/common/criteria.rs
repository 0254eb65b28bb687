//! Measurements behind the headline checks. Each returns the worst error it
//! saw so callers can compare against their own tolerance.

use ionlds_core::inference::{rts_smooth, run_filter};
use ionlds_core::learning::{initialize, run_em, run_em_with_progress, EmConfig, InitConfig};
use ionlds_core::linalg::{project_to_stable, spectral_radius};
use ionlds_core::model::{InfusionProtocol, ObservationLink, StateSpaceParams, VitalSignSeries};
use ionlds_core::pkpd::{pkpd_dynamics, simulate_ode, CompartmentRates, InputDiscretization, PkPdLayout, PkPdOptions};
use ionlds_core::synth::{sample_trajectory, MissingSpec};
use ionlds_core::unscented::{sigma_points, unscented_transform};
use ionlds_core::{GaussianBelief, UtParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Worst relative error of UT mean, covariance and cross-covariance against
/// the closed form over 100 random affine maps, input dimension 1 to 6.
pub fn ut_affine_worst() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ut = UtParams::default();
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let d = 1 + k % 6;
        let out = rng.random_range(1..=6);
        let mean = normal_vector(&mut rng, d) * 3.0;
        let cov = random_cov(&mut rng, d, d, 0.05);
        let m = normal_matrix(&mut rng, out, d);
        let c = normal_vector(&mut rng, out);
        let belief = GaussianBelief::new(mean.clone(), cov.clone()).unwrap();
        let mo = unscented_transform(&belief, |x| &m * x + &c, &ut).unwrap();
        let want_mean = &m * &mean + &c;
        let want_cov = &m * &cov * m.transpose();
        let want_cross = &cov * m.transpose();
        worst = worst
            .max(max_rel_err_vec(&mo.mean, &want_mean))
            .max(max_rel_err(&mo.cov, &want_cov))
            .max(max_rel_err(&mo.cross_cov, &want_cross));
    }
    worst
}

/// Worst relative error of the weighted sigma-point mean and covariance
/// against their source Gaussian, 100 covariances with every third one
/// rank deficient. Also checks point count and weight sum.
pub fn ut_weights_worst() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ut = UtParams::default();
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let d = 1 + k % 6;
        let rank = if k % 3 == 0 { (d / 2).max(1) } else { d };
        let ridge = if k % 3 == 0 { 0.0 } else { 1e-3 };
        let cov = random_cov(&mut rng, d, rank, ridge);
        let mean = normal_vector(&mut rng, d);
        let sp = sigma_points(&GaussianBelief::new(mean.clone(), cov.clone()).unwrap(), &ut).unwrap();
        if sp.points.len() != 2 * d + 1 {
            return f64::INFINITY;
        }
        let wsum: f64 = sp.w_mean.iter().sum();
        worst = worst
            .max((wsum - 1.0).abs())
            .max(max_rel_err_vec(&sp.weighted_mean(), &mean))
            .max(max_rel_err(&sp.weighted_cov(), &cov));
    }
    worst
}

pub struct Exact {
    pub filtered: Vec<DVector<f64>>,
    pub smoothed: Vec<DVector<f64>>,
    pub smoothed_cov: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

/// Textbook covariance-form Kalman filter and RTS smoother.
pub fn exact_kalman(p: &StateSpaceParams, protocol: &InfusionProtocol, y: &VitalSignSeries) -> Exact {
    let t_len = y.len();
    let q = DMatrix::from_diagonal(&p.q_diag);
    let mut m_pred = Vec::new();
    let mut p_pred = Vec::new();
    let mut m_filt: Vec<DVector<f64>> = Vec::new();
    let mut p_filt: Vec<DMatrix<f64>> = Vec::new();
    let mut ll = 0.0;
    for t in 0..t_len {
        let (m, pc) = if t == 0 {
            (p.mu1.clone(), p.sigma1.clone())
        } else {
            (
                &p.a * &m_filt[t - 1] + &p.b * protocol.input(t),
                &p.a * &p_filt[t - 1] * p.a.transpose() + &q,
            )
        };
        let obs: Vec<usize> = (0..y.n_channels()).filter(|&j| y.is_observed(t, j)).collect();
        let (mut mf, mut pf) = (m.clone(), pc.clone());
        if !obs.is_empty() {
            let c = p.c.select_rows(&obs);
            let r = DMatrix::from_diagonal(&DVector::from_iterator(obs.len(), obs.iter().map(|&j| p.r_diag[j])));
            let yo = DVector::from_iterator(obs.len(), obs.iter().map(|&j| y.values[(t, j)]));
            let s = &c * &pc * c.transpose() + r;
            let s_inv = s.clone().try_inverse().unwrap();
            let k = &pc * c.transpose() * &s_inv;
            let v = yo - &c * &m;
            ll += -0.5
                * (obs.len() as f64 * (2.0 * std::f64::consts::PI).ln()
                    + s.determinant().ln()
                    + (v.transpose() * &s_inv * &v)[0]);
            mf = &m + &k * &v;
            pf = &pc - &k * &s * k.transpose();
        }
        m_pred.push(m);
        p_pred.push(pc);
        m_filt.push(mf);
        p_filt.push(pf);
    }
    let mut ms = m_filt.clone();
    let mut ps = p_filt.clone();
    for t in (0..t_len - 1).rev() {
        let j = &p_filt[t] * p.a.transpose() * p_pred[t + 1].clone().try_inverse().unwrap();
        ms[t] = &m_filt[t] + &j * (&ms[t + 1] - &m_pred[t + 1]);
        ps[t] = &p_filt[t] + &j * (&ps[t + 1] - &p_pred[t + 1]) * j.transpose();
    }
    Exact {
        filtered: m_filt,
        smoothed: ms,
        smoothed_cov: ps,
        log_likelihood: ll,
    }
}

/// Worst relative errors `(log-likelihood, filtered means, smoothed moments)`
/// of the UKF and smoother against [`exact_kalman`] on 20 linear instances
/// (T = 200, d_x = 4, d_y = 3, dropout on every other one).
pub fn kalman_worst() -> (f64, f64, f64) {
    let ut = UtParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..20 {
        let params = random_linear_model(&mut rng, 4, 1, 3);
        let protocol = random_protocol(&mut rng, 200);
        let missing = MissingSpec {
            absent_channels: vec![],
            dropout: if k % 2 == 0 { 0.0 } else { 0.1 },
        };
        let series = sample_trajectory(&params, &protocol, 100 + k as u64, &missing).unwrap();
        let exact = exact_kalman(&params, &protocol, &series);
        let filter = run_filter(&params, &protocol, &series, &ut).unwrap();
        let smooth = rts_smooth(&params, &filter).unwrap();

        let ll_err = (filter.log_likelihood - exact.log_likelihood).abs() / exact.log_likelihood.abs();
        let mut f_err: f64 = 0.0;
        let mut s_err: f64 = 0.0;
        for t in 0..series.len() {
            f_err = f_err.max(max_rel_err_vec(&filter.filtered[t].mean, &exact.filtered[t]));
            s_err = s_err.max(max_rel_err_vec(&smooth.smoothed[t].mean, &exact.smoothed[t]));
            s_err = s_err.max(max_rel_err(&smooth.smoothed[t].cov, &exact.smoothed_cov[t]));
        }
        worst = (worst.0.max(ll_err), worst.1.max(f_err), worst.2.max(s_err));
    }
    worst
}

pub fn marsh() -> CompartmentRates {
    CompartmentRates {
        k10: 0.119,
        k12: 0.112,
        k21: 0.055,
        k13: 0.0419,
        k31: 0.0033,
        k1e: vec![0.26],
    }
}

pub fn zoh() -> PkPdOptions {
    PkPdOptions {
        layout: PkPdLayout::Independent,
        input: InputDiscretization::ZeroOrderHold,
    }
}

pub fn propagate(a: &DMatrix<f64>, b: &DMatrix<f64>, protocol: &InfusionProtocol) -> Vec<DVector<f64>> {
    let mut x = DVector::zeros(a.nrows());
    let mut out = vec![x.clone()];
    for t in 1..protocol.len() {
        x = a * &x + b * protocol.input(t);
        out.push(x.clone());
    }
    out
}

/// Worst relative state error of matrix-exponential propagation against RK4
/// with 1000 substeps over the 180-step 2-5-2 protocol, for slow, typical
/// and fast effect sites.
pub fn rk4_worst() -> f64 {
    let protocol = protocol_252();
    assert_eq!(protocol.len(), 180);
    let mut worst: f64 = 0.0;
    for k1e in [0.05, 0.26, 2.0] {
        let rates = marsh().with_k1e(vec![k1e]);
        let (a, b, _) = pkpd_dynamics(&rates, protocol.dt, &zoh()).unwrap();
        let exact = propagate(&a, &b, &protocol);
        let rk4 = simulate_ode(&rates, &protocol, &DVector::zeros(4), 1000, 0).unwrap();
        let scale = rk4.iter().map(|x| x.norm()).fold(0.0, f64::max);
        for (x, r) in exact.iter().zip(&rk4) {
            worst = worst.max((x - r).norm() / r.norm().max(1e-3 * scale));
        }
    }
    worst
}

/// Worst relative deviation of the central and effect-site compartments
/// from `u / k10` under constant infusion: once at the fixed point of the
/// discrete map and once after 200 000 steps.
pub fn steady_state_worst() -> f64 {
    let rates = marsh();
    let u_bar = 3.5;
    let (a, b, _) = pkpd_dynamics(&rates, 15.0, &zoh()).unwrap();
    let i = DMatrix::<f64>::identity(4, 4);
    let fixed = (i - &a).lu().solve(&(&b * u_bar)).unwrap();
    let want = u_bar / rates.k10;
    let mut x = DVector::zeros(4);
    for _ in 0..200_000 {
        x = &a * &x + &b * u_bar;
    }
    [fixed[0], fixed[3], x[0]]
        .iter()
        .map(|v| (v - want).abs() / want)
        .fold(0.0, f64::max)
}

/// Largest relative log-likelihood decrease between consecutive iterations
/// of 50-iteration EM runs on 10 linear-Gaussian instances, or infinity if
/// any run stopped early.
pub fn em_monotone_worst() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let config = EmConfig {
        max_iterations: 50,
        tolerance: 0.0,
        enforce_stability: false,
        ..EmConfig::default()
    };
    let mut worst_drop: f64 = 0.0;
    for k in 0..10 {
        let truth = random_linear_model(&mut rng, 3, 1, 2);
        let protocol = random_protocol(&mut rng, 150);
        let series = sample_trajectory(&truth, &protocol, 300 + k, &MissingSpec::default()).unwrap();
        let mut init = initialize(
            &series,
            &protocol,
            &InitConfig {
                state_dim: 3,
                seed: k,
                ..InitConfig::default()
            },
        )
        .unwrap();
        init.link = ObservationLink::Identity;
        let fit = run_em(&series, &protocol, &init, &config).unwrap();
        if fit.trace.len() != 51 {
            return f64::INFINITY;
        }
        for w in fit.trace.windows(2) {
            let (a, b) = (w[0].log_likelihood, w[1].log_likelihood);
            worst_drop = worst_drop.max((a - b) / a.abs());
        }
    }
    worst_drop
}

pub struct StabilityRun {
    /// Spectral radius after every iteration, the initial parameters first.
    pub radii: Vec<f64>,
    pub final_radius: f64,
    pub projections: usize,
}

/// EM with enforcement on, fitted to data from a growing latent state so the
/// unconstrained update leaves the unit circle.
pub fn stability_run() -> StabilityRun {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut truth = random_linear_model(&mut rng, 2, 1, 2);
    truth.a = DMatrix::from_row_slice(2, 2, &[1.03, 0.0, 0.0, 0.9]);
    let protocol = random_protocol(&mut rng, 120);
    let series = sample_trajectory(&truth, &protocol, 4, &MissingSpec::default()).unwrap();
    let mut init = initialize(
        &series,
        &protocol,
        &InitConfig {
            state_dim: 2,
            ..InitConfig::default()
        },
    )
    .unwrap();
    init.link = ObservationLink::Identity;
    let config = EmConfig {
        max_iterations: 30,
        ..EmConfig::default()
    };
    let mut radii = Vec::new();
    let fit = run_em_with_progress(&series, &protocol, &init, &config, &mut |r| {
        radii.push(r.spectral_radius);
        true
    })
    .unwrap();
    StabilityRun {
        radii,
        final_radius: spectral_radius(&fit.params.a).unwrap(),
        projections: fit.projections,
    }
}

/// `project_to_stable(diag(1.2, 0.5)) == diag(1.0, 0.5)` exactly.
pub fn projection_is_exact() -> bool {
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.2, 0.5]));
    project_to_stable(&a) == DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5]))
}

//! Synthetic infusion protocols, trajectories and patient cohorts.
//!
//! Every draw comes from ChaCha8. A cohort seeded with `s` gives patient `i`
//! its own generator `ChaCha8Rng::seed_from_u64(s)` on stream `i + 1`, so
//! patients never share a random stream and can be generated in parallel.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    matrix_from_rows, rows_of, GeneralizedLogistic, InfusionProtocol, ObservationLink, StateSpaceParams,
    VitalSignSeries, DEFAULT_DT_SECONDS,
};

/// Piecewise-constant schedule of target concentrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolTemplate {
    pub pattern: Vec<f64>,
    #[serde(default = "default_block_minutes")]
    pub block_minutes: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

fn default_block_minutes() -> f64 {
    15.0
}

fn default_dt() -> f64 {
    DEFAULT_DT_SECONDS
}

impl ProtocolTemplate {
    pub fn new(pattern: Vec<f64>) -> Self {
        Self {
            pattern,
            block_minutes: default_block_minutes(),
            dt: default_dt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pattern.is_empty() {
            return Err(Error::Config("protocol pattern is empty".into()));
        }
        if self.pattern.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("target levels must be finite and >= 0".into()));
        }
        if !(self.block_minutes > 0.0) || !(self.dt > 0.0) {
            return Err(Error::Config("block length and dt must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_block(&self) -> usize {
        (self.block_minutes * 60.0 / self.dt).round() as usize
    }

    /// Short name such as `2-5-2`.
    pub fn label(&self) -> String {
        self.pattern
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join("-")
    }
}

/// Target-to-rate conversion. The first step of every block adds a bolus of
/// `bolus_gain * max(0, target - previous target)` to the maintenance rate
/// `maintenance_gain * target`. The level before the first block is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRule {
    pub bolus_gain: f64,
    pub maintenance_gain: f64,
}

impl Default for RateRule {
    fn default() -> Self {
        Self {
            bolus_gain: 10.0,
            maintenance_gain: 1.0,
        }
    }
}

pub fn make_protocol(template: &ProtocolTemplate, rule: &RateRule) -> Result<InfusionProtocol> {
    template.validate()?;
    let steps = template.steps_per_block();
    let mut rates = Vec::with_capacity(steps * template.pattern.len());
    let mut previous = 0.0;
    for &target in &template.pattern {
        let maintenance = rule.maintenance_gain * target;
        let bolus = (rule.bolus_gain * (target - previous)).max(0.0);
        for k in 0..steps {
            rates.push(if k == 0 { maintenance + bolus } else { maintenance });
        }
        previous = target;
    }
    InfusionProtocol::from_rates(template.dt, &rates)
}

/// Which cells of a sampled series are hidden.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MissingSpec {
    /// Channels masked at every time step.
    pub absent_channels: Vec<usize>,
    /// Independent per-cell masking probability.
    pub dropout: f64,
}

/// Default channel names for `d_y` channels.
pub fn default_channel_names(dy: usize) -> Vec<String> {
    if dy == 3 {
        ["BPs", "BPd", "BIS"].iter().map(|s| s.to_string()).collect()
    } else {
        (0..dy).map(|j| format!("y{j}")).collect()
    }
}

/// Ancestral sample from the model driven by `protocol`.
pub fn sample_trajectory(
    params: &StateSpaceParams,
    protocol: &InfusionProtocol,
    seed: u64,
    missing: &MissingSpec,
) -> Result<VitalSignSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(params, protocol, &mut rng, missing, |_| None)
}

/// `dynamics_at(t)` may return `(A_t, B_t)` to replace the model's dynamics
/// for the transition into step `t`.
fn sample_with<R: RngCore, F>(
    params: &StateSpaceParams,
    protocol: &InfusionProtocol,
    rng: &mut R,
    missing: &MissingSpec,
    dynamics_at: F,
) -> Result<VitalSignSeries>
where
    F: Fn(usize) -> Option<(DMatrix<f64>, DMatrix<f64>)>,
{
    params.validate()?;
    if params.input_dim() != protocol.input_dim() {
        return Err(Error::Dimension("protocol input dimension differs from model".into()));
    }
    if !(0.0..=1.0).contains(&missing.dropout) {
        return Err(Error::Config("dropout must lie in [0, 1]".into()));
    }
    let d = params.state_dim();
    let dy = params.obs_dim();
    if let Some(&j) = missing.absent_channels.iter().find(|&&j| j >= dy) {
        return Err(Error::Config(format!("absent channel {j} out of range")));
    }
    let t_len = protocol.len();
    let l1 = linalg::psd_cholesky(&params.sigma1).ok_or_else(|| Error::Factorization {
        cov: params.sigma1.clone(),
    })?;
    let q_sd = params.q_diag.map(f64::sqrt);
    let r_sd = params.r_diag.map(f64::sqrt);
    let all: Vec<usize> = (0..dy).collect();

    let mut values = DMatrix::zeros(t_len, dy);
    let mut mask = DMatrix::from_element(t_len, dy, true);
    let mut x = DVector::zeros(d);
    for t in 0..t_len {
        if t == 0 {
            let z = normal_vector(rng, d);
            x = &params.mu1 + &l1 * z;
        } else {
            let u = protocol.input(t);
            let mean = match dynamics_at(t) {
                Some((a, b)) => &a * &x + &b * &u,
                None => &params.a * &x + &params.b * &u,
            };
            let z = normal_vector(rng, d);
            x = mean + q_sd.component_mul(&z);
        }
        let g = params.observe(&x, &all);
        let e = normal_vector(rng, dy);
        let y = g + r_sd.component_mul(&e);
        values.set_row(t, &y.transpose());
    }
    for &j in &missing.absent_channels {
        mask.column_mut(j).fill(false);
    }
    if missing.dropout > 0.0 {
        for t in 0..t_len {
            for j in 0..dy {
                if rng.random::<f64>() < missing.dropout {
                    mask[(t, j)] = false;
                }
            }
        }
    }
    for t in 0..t_len {
        for j in 0..dy {
            if !mask[(t, j)] {
                values[(t, j)] = 0.0;
            }
        }
    }
    VitalSignSeries::new(protocol.dt, default_channel_names(dy), values, mask)
}

fn normal_vector<R: RngCore>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Relative spreads of the per-patient parameter draws, each applied as a
/// factor `1 + U(-r, r)`: one per row of the drift matrix, one per entry of
/// the input gain and of `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Perturbation {
    pub rate_jitter: f64,
    pub gain_jitter: f64,
    pub projection_jitter: f64,
    /// Shift of both link asymptotes by `U(-s, s) * (M - m)`.
    pub baseline_shift: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            rate_jitter: 0.2,
            gain_jitter: 0.2,
            projection_jitter: 0.2,
            baseline_shift: 0.05,
        }
    }
}

/// Linear drift of the continuous dynamics over a trajectory: at step `t`
/// the drift matrix is scaled by `1 + (rate_scale_end - 1) t / (T - 1)` and
/// the input gain likewise by `gain_scale_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nonstationarity {
    pub rate_scale_end: f64,
    pub gain_scale_end: f64,
}

/// Per-patient missingness of a cohort.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortMissing {
    /// Per channel: probability that a patient lacks the channel entirely.
    pub channel_absent_probability: Vec<f64>,
    pub dropout: f64,
}

/// Continuous-time generator of a cohort. Latent dynamics are
/// `x' = F x + G u` (per minute), discretized with a zero-order hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub dt: f64,
    pub channel_names: Vec<String>,
    pub drift: Vec<Vec<f64>>,
    pub input_gain: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub eta: Vec<GeneralizedLogistic>,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    pub mu1: Vec<f64>,
    pub sigma1_diag: Vec<f64>,
    #[serde(default)]
    pub perturbation: Perturbation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonstationarity: Option<Nonstationarity>,
    pub protocols: Vec<ProtocolTemplate>,
    #[serde(default)]
    pub rate_rule: RateRule,
    #[serde(default)]
    pub missing: CohortMissing,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self::stationary()
    }
}

impl GeneratorSpec {
    /// Four latent states (central, peripheral, fast and slow effect) and
    /// three channels with blood-pressure and BIS-like ranges.
    pub fn stationary() -> Self {
        let (k10, k12, k21, fast, slow) = (0.119, 0.112, 0.055, 0.5, 0.1);
        let drift = vec![
            vec![-(k10 + k12), k21, 0.0, 0.0],
            vec![k12, -k21, 0.0, 0.0],
            vec![fast, 0.0, -fast, 0.0],
            vec![slow, 0.0, 0.0, -slow],
        ];
        Self {
            dt: DEFAULT_DT_SECONDS,
            channel_names: default_channel_names(3),
            drift,
            input_gain: vec![vec![1.0], vec![0.0], vec![0.0], vec![0.0]],
            c: vec![
                vec![-0.02, 0.0, -0.05, -0.03],
                vec![-0.01, 0.0, -0.04, -0.04],
                vec![-0.02, 0.0, -0.12, -0.02],
            ],
            eta: vec![
                GeneralizedLogistic {
                    lower: 70.0,
                    upper: 150.0,
                    gamma: 1.0,
                    nu: 1.0,
                },
                GeneralizedLogistic {
                    lower: 35.0,
                    upper: 95.0,
                    gamma: 1.0,
                    nu: 1.0,
                },
                GeneralizedLogistic {
                    lower: 10.0,
                    upper: 100.0,
                    gamma: 1.0,
                    nu: 5.0,
                },
            ],
            q_diag: vec![2e-3; 4],
            r_diag: vec![4.0, 2.25, 9.0],
            mu1: vec![0.0; 4],
            sigma1_diag: vec![1e-2; 4],
            perturbation: Perturbation::default(),
            nonstationarity: None,
            protocols: vec![
                ProtocolTemplate::new(vec![2.0, 5.0, 2.0]),
                ProtocolTemplate::new(vec![5.0, 2.0, 5.0]),
            ],
            rate_rule: RateRule::default(),
            missing: CohortMissing::default(),
        }
    }

    /// The stationary generator with drifting dynamics: elimination and
    /// effect rates speed up while the input gain fades over each record.
    pub fn nonstationary() -> Self {
        Self {
            nonstationarity: Some(Nonstationarity {
                rate_scale_end: 1.8,
                gain_scale_end: 0.5,
            }),
            perturbation: Perturbation {
                rate_jitter: 0.3,
                gain_jitter: 0.3,
                projection_jitter: 0.3,
                baseline_shift: 0.05,
            },
            ..Self::stationary()
        }
    }

    pub fn state_dim(&self) -> usize {
        self.drift.len()
    }

    fn matrices(&self) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let d = self.drift.len();
        let f = matrix_from_rows(&self.drift, d)?;
        let g = matrix_from_rows(&self.input_gain, self.input_gain.len())?;
        let c = matrix_from_rows(&self.c, self.c.len())?;
        if f.ncols() != d || g.nrows() != d || c.ncols() != d {
            return Err(Error::Dimension(
                "generator matrices disagree on state dimension".into(),
            ));
        }
        Ok((f, g, c))
    }

    pub fn validate(&self) -> Result<()> {
        let (_, _, c) = self.matrices()?;
        let d = self.state_dim();
        let dy = c.nrows();
        if self.eta.len() != dy || self.r_diag.len() != dy || self.channel_names.len() != dy {
            return Err(Error::Dimension("generator channel counts disagree".into()));
        }
        if self.q_diag.len() != d || self.mu1.len() != d || self.sigma1_diag.len() != d {
            return Err(Error::Dimension("generator state vectors disagree".into()));
        }
        if self.protocols.is_empty() {
            return Err(Error::Config("generator needs at least one protocol".into()));
        }
        for p in &self.protocols {
            p.validate()?;
            if (p.dt - self.dt).abs() > 1e-12 {
                return Err(Error::Config("protocol dt differs from generator dt".into()));
            }
        }
        let probs = &self.missing.channel_absent_probability;
        if !probs.is_empty() && probs.len() != dy {
            return Err(Error::Dimension(
                "absence probabilities must cover every channel".into(),
            ));
        }
        if probs
            .iter()
            .chain([&self.missing.dropout])
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        self.base_params()?.validate()
    }

    /// Discrete-time parameters of the unperturbed generator.
    pub fn base_params(&self) -> Result<StateSpaceParams> {
        let (f, g, c) = self.matrices()?;
        self.params_from(&f, &g, c, self.eta.clone())
    }

    fn params_from(
        &self,
        f: &DMatrix<f64>,
        g: &DMatrix<f64>,
        c: DMatrix<f64>,
        eta: Vec<GeneralizedLogistic>,
    ) -> Result<StateSpaceParams> {
        let (a, b) = linalg::discretize_zoh(f, g, self.dt / 60.0)?;
        Ok(StateSpaceParams {
            a,
            b,
            c,
            q_diag: DVector::from_column_slice(&self.q_diag),
            r_diag: DVector::from_column_slice(&self.r_diag),
            mu1: DVector::from_column_slice(&self.mu1),
            sigma1: DMatrix::from_diagonal(&DVector::from_column_slice(&self.sigma1_diag)),
            eta,
            dt: self.dt,
            link: ObservationLink::Logistic,
        })
    }
}

/// Ground truth of one synthetic patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    /// Discrete-time parameters at the start of the record.
    pub params: StateSpaceParams,
    /// Continuous drift and input gain actually used (before any drift
    /// schedule is applied).
    pub drift: Vec<Vec<f64>>,
    pub input_gain: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonstationarity: Option<Nonstationarity>,
    pub protocol: String,
    pub trajectory_seed: u64,
    pub absent_channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortMember {
    pub id: String,
    pub series: VitalSignSeries,
    pub protocol: InfusionProtocol,
    pub truth: PatientTruth,
}

fn jitter<R: Rng>(rng: &mut R, spread: f64) -> f64 {
    if spread > 0.0 {
        1.0 + rng.random_range(-spread..spread)
    } else {
        1.0
    }
}

/// `n_patients` independent synthetic patients.
pub fn make_cohort(n_patients: usize, seed: u64, spec: &GeneratorSpec) -> Result<Vec<CohortMember>> {
    if n_patients == 0 {
        return Err(Error::Config("cohort needs at least one patient".into()));
    }
    spec.validate()?;
    (0..n_patients)
        .into_par_iter()
        .map(|i| make_patient(i, seed, spec))
        .collect()
}

fn make_patient(i: usize, seed: u64, spec: &GeneratorSpec) -> Result<CohortMember> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    let template = &spec.protocols[rng.random_range(0..spec.protocols.len())];
    let protocol = make_protocol(template, &spec.rate_rule)?;

    let (mut f, mut g, mut c) = spec.matrices()?;
    let pert = spec.perturbation;
    // One factor per row of F rescales that state's time constant; for a
    // stable Metzler drift matrix this keeps it stable.
    for i in 0..f.nrows() {
        let k = jitter(&mut rng, pert.rate_jitter);
        f.row_mut(i).scale_mut(k);
    }
    for v in g.iter_mut() {
        *v *= jitter(&mut rng, pert.gain_jitter);
    }
    for v in c.iter_mut() {
        *v *= jitter(&mut rng, pert.projection_jitter);
    }
    let eta: Vec<GeneralizedLogistic> = spec
        .eta
        .iter()
        .map(|e| {
            let shift = if pert.baseline_shift > 0.0 {
                rng.random_range(-pert.baseline_shift..pert.baseline_shift) * (e.upper - e.lower)
            } else {
                0.0
            };
            GeneralizedLogistic {
                lower: e.lower + shift,
                upper: e.upper + shift,
                ..*e
            }
        })
        .collect();
    let params = spec.params_from(&f, &g, c, eta)?;

    let dy = params.obs_dim();
    let mut absent = Vec::new();
    for (j, p) in spec.missing.channel_absent_probability.iter().enumerate() {
        if rng.random::<f64>() < *p {
            absent.push(j);
        }
    }
    if absent.len() == dy {
        absent.pop();
    }
    let missing = MissingSpec {
        absent_channels: absent.clone(),
        dropout: spec.missing.dropout,
    };
    let trajectory_seed = rng.next_u64();
    let mut traj_rng = ChaCha8Rng::seed_from_u64(trajectory_seed);
    let t_len = protocol.len();
    let schedule = spec.nonstationarity;
    let dt_min = spec.dt / 60.0;
    let mut series = match schedule {
        None => sample_with(&params, &protocol, &mut traj_rng, &missing, |_| None)?,
        Some(ns) => {
            let steps: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..t_len)
                .map(|t| {
                    let frac = if t_len > 1 { t as f64 / (t_len - 1) as f64 } else { 0.0 };
                    let fr = &f * (1.0 + (ns.rate_scale_end - 1.0) * frac);
                    let gr = &g * (1.0 + (ns.gain_scale_end - 1.0) * frac);
                    linalg::discretize_zoh(&fr, &gr, dt_min)
                })
                .collect::<Result<_>>()?;
            sample_with(&params, &protocol, &mut traj_rng, &missing, |t| Some(steps[t].clone()))?
        }
    };
    series.channel_names = spec.channel_names.clone();
    Ok(CohortMember {
        id: format!("patient_{i:03}"),
        series,
        protocol,
        truth: PatientTruth {
            params,
            drift: rows_of(&f),
            input_gain: rows_of(&g),
            nonstationarity: schedule,
            protocol: template.label(),
            trajectory_seed,
            absent_channels: absent,
        },
    })
}

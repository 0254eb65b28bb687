//! Shared domain types: the observation link, model parameters, Gaussian
//! beliefs, vital-sign series and infusion protocols.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Default sampling interval in seconds.
pub const DEFAULT_DT_SECONDS: f64 = 15.0;

/// Generalized logistic (Richards) curve
/// `g(x) = m + (M - m) / (1 + exp(-gamma x))^(1/nu)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedLogistic {
    #[serde(rename = "m")]
    pub lower: f64,
    #[serde(rename = "M")]
    pub upper: f64,
    pub gamma: f64,
    pub nu: f64,
}

impl GeneralizedLogistic {
    pub fn new(lower: f64, upper: f64, gamma: f64, nu: f64) -> Result<Self> {
        let p = Self {
            lower,
            upper,
            gamma,
            nu,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lower, self.upper, self.gamma, self.nu]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("logistic parameters must be finite".into()));
        }
        if self.upper <= self.lower {
            return Err(Error::InvalidParameter(format!(
                "logistic requires M > m (m={}, M={})",
                self.lower, self.upper
            )));
        }
        if self.nu <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "logistic requires nu > 0 (nu={})",
                self.nu
            )));
        }
        Ok(())
    }

    /// Evaluates the curve, rejecting non-finite inputs.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::InvalidProjection(x));
        }
        Ok(self.value(x))
    }

    /// Unchecked evaluation. `(1 + e^{-z})^{-1/nu}` is computed as
    /// `exp(-softplus(-z) / nu)`, which reduces to `exp(z / nu)` for very
    /// negative `z` and never overflows.
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        let z = self.gamma * x;
        let frac = (-softplus(-z) / self.nu).exp();
        self.lower + (self.upper - self.lower) * frac
    }
}

#[inline]
fn softplus(w: f64) -> f64 {
    if w > 0.0 {
        w + (-w).exp().ln_1p()
    } else {
        w.exp().ln_1p()
    }
}

/// Link between the projected latent state `Cx` and the observation mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationLink {
    /// Per-channel generalized logistic curves (`eta`).
    #[default]
    Logistic,
    /// `g(z) = z`; turns the model into a linear-Gaussian system.
    Identity,
}

impl ObservationLink {
    fn is_default(&self) -> bool {
        *self == ObservationLink::Logistic
    }
}

/// Full parameter set of an IO-NLDS (or a PK/PD model cast into one).
///
/// `Q` and `R` are diagonal and stored as their diagonals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamsWire", try_from = "ParamsWire")]
pub struct StateSpaceParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q_diag: DVector<f64>,
    pub r_diag: DVector<f64>,
    pub mu1: DVector<f64>,
    pub sigma1: DMatrix<f64>,
    pub eta: Vec<GeneralizedLogistic>,
    pub dt: f64,
    pub link: ObservationLink,
}

impl StateSpaceParams {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let dx = self.a.nrows();
        let du = self.b.ncols();
        let dy = self.c.nrows();
        let dim = |what: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Dimension(format!(
                    "{what} inconsistent with d_x={dx}, d_u={du}, d_y={dy}"
                )))
            }
        };
        dim("A", self.a.ncols() == dx)?;
        dim("B", self.b.nrows() == dx)?;
        dim("C", self.c.ncols() == dx)?;
        dim("Q", self.q_diag.len() == dx)?;
        dim("R", self.r_diag.len() == dy)?;
        dim("mu1", self.mu1.len() == dx)?;
        dim("Sigma1", self.sigma1.nrows() == dx && self.sigma1.ncols() == dx)?;
        if self.link == ObservationLink::Logistic {
            dim("eta", self.eta.len() == dy)?;
            for p in &self.eta {
                p.validate()?;
            }
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.q_diag.iter().chain(self.r_diag.iter()).any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidParameter("Q and R diagonals must be non-negative".into()));
        }
        let all_finite = self
            .a
            .iter()
            .chain(self.b.iter())
            .chain(self.c.iter())
            .chain(self.mu1.iter())
            .chain(self.sigma1.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidParameter("non-finite matrix entry".into()));
        }
        let asym = (&self.sigma1 - self.sigma1.transpose()).abs().max();
        if asym > 1e-9 * (1.0 + self.sigma1.abs().max()) {
            return Err(Error::InvalidParameter("Sigma1 is not symmetric".into()));
        }
        if dx > 0 && linalg::min_eigenvalue(&self.sigma1) < -1e-9 {
            return Err(Error::InvalidParameter("Sigma1 is not positive semi-definite".into()));
        }
        Ok(())
    }

    /// Observation mean of channel `j` for a given projection `z = C_j x`.
    #[inline]
    pub fn link_value(&self, j: usize, z: f64) -> f64 {
        match self.link {
            ObservationLink::Logistic => self.eta[j].value(z),
            ObservationLink::Identity => z,
        }
    }

    /// Noise-free observation `g(Cx)` restricted to `channels`.
    pub fn observe(&self, x: &DVector<f64>, channels: &[usize]) -> DVector<f64> {
        DVector::from_iterator(
            channels.len(),
            channels
                .iter()
                .map(|&j| self.link_value(j, self.c.row(j).dot(&x.transpose()))),
        )
    }

    pub fn q_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.q_diag)
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.r_diag)
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn config_hash(&self) -> String {
        crate::hash_json(self)
    }
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct ParamsWire {
    A: Vec<Vec<f64>>,
    B: Vec<Vec<f64>>,
    C: Vec<Vec<f64>>,
    Q_diag: Vec<f64>,
    R_diag: Vec<f64>,
    mu1: Vec<f64>,
    Sigma1: Vec<Vec<f64>>,
    eta: Vec<GeneralizedLogistic>,
    dt: f64,
    #[serde(default, skip_serializing_if = "ObservationLink::is_default")]
    link: ObservationLink,
}

impl From<StateSpaceParams> for ParamsWire {
    fn from(p: StateSpaceParams) -> Self {
        ParamsWire {
            A: rows_of(&p.a),
            B: rows_of(&p.b),
            C: rows_of(&p.c),
            Q_diag: p.q_diag.iter().copied().collect(),
            R_diag: p.r_diag.iter().copied().collect(),
            mu1: p.mu1.iter().copied().collect(),
            Sigma1: rows_of(&p.sigma1),
            eta: p.eta,
            dt: p.dt,
            link: p.link,
        }
    }
}

impl TryFrom<ParamsWire> for StateSpaceParams {
    type Error = Error;

    fn try_from(w: ParamsWire) -> Result<Self> {
        let dx = w.A.len();
        let params = StateSpaceParams {
            a: matrix_from_rows(&w.A, dx)?,
            b: matrix_from_rows(&w.B, dx)?,
            c: matrix_from_rows(&w.C, w.C.len())?,
            q_diag: DVector::from_vec(w.Q_diag),
            r_diag: DVector::from_vec(w.R_diag),
            mu1: DVector::from_vec(w.mu1),
            sigma1: matrix_from_rows(&w.Sigma1, dx)?,
            eta: w.eta,
            dt: w.dt,
            link: w.link,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Row-major nested representation of a matrix.
pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Builds a matrix from row-major nested rows; `nrows` fixes the shape of an
/// empty input.
pub fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows {
        return Err(Error::Dimension(format!("expected {nrows} rows, got {}", rows.len())));
    }
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Mean and covariance of a Gaussian density over the latent state.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    /// Builds a belief, symmetrizing the covariance.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Dimension(format!(
                "belief mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        let mut belief = Self { mean, cov };
        belief.symmetrize();
        Ok(belief)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn symmetrize(&mut self) {
        linalg::symmetrize(&mut self.cov);
    }
}

/// Uniformly sampled multichannel vital signs with per-cell missingness.
///
/// `values` is `T x d_y`; cells whose `mask` entry is `false` are missing and
/// their value is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "SeriesWire", try_from = "SeriesWire")]
pub struct VitalSignSeries {
    pub dt: f64,
    pub channel_names: Vec<String>,
    pub values: DMatrix<f64>,
    pub mask: DMatrix<bool>,
}

impl VitalSignSeries {
    pub fn new(dt: f64, channel_names: Vec<String>, values: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::Dimension("mask shape differs from values".into()));
        }
        if values.ncols() != channel_names.len() {
            return Err(Error::Dimension(format!(
                "{} channel names for {} columns",
                channel_names.len(),
                values.ncols()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
        }
        for (v, m) in values.iter().zip(mask.iter()) {
            if *m && !v.is_finite() {
                return Err(Error::InvalidParameter("observed value is not finite".into()));
            }
        }
        // Missing cells are stored as 0 so equal series compare and hash equal.
        let mut values = values;
        values.zip_apply(&mask, |v, m| {
            if !m {
                *v = 0.0;
            }
        });
        Ok(Self {
            dt,
            channel_names,
            values,
            mask,
        })
    }

    /// Fully observed series.
    pub fn fully_observed(dt: f64, channel_names: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), true);
        Self::new(dt, channel_names, values, mask)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn n_channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_observed(&self, t: usize, j: usize) -> bool {
        self.mask[(t, j)]
    }

    /// Indices of channels observed at time `t`.
    pub fn observed_channels(&self, t: usize) -> Vec<usize> {
        (0..self.n_channels()).filter(|&j| self.mask[(t, j)]).collect()
    }

    /// Number of observed scalar cells.
    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Observed values of channel `j`.
    pub fn channel_values(&self, j: usize) -> Vec<f64> {
        (0..self.len())
            .filter(|&t| self.mask[(t, j)])
            .map(|t| self.values[(t, j)])
            .collect()
    }

    /// Series restricted to the given channels, in that order.
    pub fn select_channels(&self, channels: &[usize]) -> Self {
        Self {
            dt: self.dt,
            channel_names: channels.iter().map(|&j| self.channel_names[j].clone()).collect(),
            values: self.values.select_columns(channels),
            mask: self.mask.select_columns(channels),
        }
    }

    /// Copy with every cell of the given channels masked out.
    pub fn without_channels(&self, channels: &[usize]) -> Self {
        let mut out = self.clone();
        for &j in channels {
            for t in 0..out.len() {
                out.mask[(t, j)] = false;
                out.values[(t, j)] = 0.0;
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct SeriesWire {
    dt: f64,
    channel_names: Vec<String>,
    /// `null` marks a missing cell.
    values: Vec<Vec<Option<f64>>>,
}

impl From<VitalSignSeries> for SeriesWire {
    fn from(s: VitalSignSeries) -> Self {
        let values = (0..s.len())
            .map(|t| {
                (0..s.n_channels())
                    .map(|j| s.mask[(t, j)].then(|| s.values[(t, j)]))
                    .collect()
            })
            .collect();
        SeriesWire {
            dt: s.dt,
            channel_names: s.channel_names,
            values,
        }
    }
}

impl TryFrom<SeriesWire> for VitalSignSeries {
    type Error = Error;

    fn try_from(w: SeriesWire) -> Result<Self> {
        let t_len = w.values.len();
        let dy = w.channel_names.len();
        if w.values.iter().any(|r| r.len() != dy) {
            return Err(Error::Dimension("series row length differs from channel count".into()));
        }
        let values = DMatrix::from_fn(t_len, dy, |t, j| w.values[t][j].unwrap_or(0.0));
        let mask = DMatrix::from_fn(t_len, dy, |t, j| w.values[t][j].is_some());
        VitalSignSeries::new(w.dt, w.channel_names, values, mask)
    }
}

/// Control-input sequence: `rates` is `T x d_u`, infusion rates in mg/min.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ProtocolWire", try_from = "ProtocolWire")]
pub struct InfusionProtocol {
    pub dt: f64,
    pub rates: DMatrix<f64>,
}

impl InfusionProtocol {
    pub fn new(dt: f64, rates: DMatrix<f64>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
        }
        if rates.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::InvalidParameter(
                "infusion rates must be finite and non-negative".into(),
            ));
        }
        Ok(Self { dt, rates })
    }

    /// Single-input protocol from a rate sequence.
    pub fn from_rates(dt: f64, rates: &[f64]) -> Result<Self> {
        Self::new(dt, DMatrix::from_column_slice(rates.len(), 1, rates))
    }

    pub fn len(&self) -> usize {
        self.rates.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.rates.ncols()
    }

    /// Input vector at time index `t` (0-based).
    pub fn input(&self, t: usize) -> DVector<f64> {
        self.rates.row(t).transpose()
    }

    /// Checks that a series has the same length and sampling interval.
    pub fn check_aligned(&self, series: &VitalSignSeries) -> Result<()> {
        if self.len() != series.len() {
            return Err(Error::Dimension(format!(
                "protocol has {} steps but series has {}",
                self.len(),
                series.len()
            )));
        }
        if (self.dt - series.dt).abs() > 1e-12 * self.dt.abs().max(1.0) {
            return Err(Error::Dimension(format!(
                "protocol dt {} differs from series dt {}",
                self.dt, series.dt
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ProtocolWire {
    dt: f64,
    rates: Vec<Vec<f64>>,
}

impl From<InfusionProtocol> for ProtocolWire {
    fn from(p: InfusionProtocol) -> Self {
        ProtocolWire {
            dt: p.dt,
            rates: rows_of(&p.rates),
        }
    }
}

impl TryFrom<ProtocolWire> for InfusionProtocol {
    type Error = Error;

    fn try_from(w: ProtocolWire) -> Result<Self> {
        let rates = matrix_from_rows(&w.rates, w.rates.len())?;
        InfusionProtocol::new(w.dt, rates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_logistic_midpoint() {
        let g = GeneralizedLogistic::new(0.0, 100.0, 1.0, 1.0).unwrap();
        assert_eq!(g.eval(0.0).unwrap(), 50.0);
        assert!(g.eval(50.0).unwrap() > 99.99);
    }

    #[test]
    fn logistic_matches_high_precision_value() {
        // 50-digit evaluation of the closed form.
        let g = GeneralizedLogistic::new(40.0, 90.0, 0.5, 2.0).unwrap();
        let expected = 80.528_090_957_800_454_542_162_887_3;
        assert!((g.eval(1.3).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn logistic_far_negative_tail_does_not_overflow() {
        let g = GeneralizedLogistic::new(10.0, 20.0, 1.0, 0.5).unwrap();
        let v = g.eval(-800.0).unwrap();
        assert!(v.is_finite());
        assert!(v >= 10.0);
        // exp(z / nu) limit
        let near = g.eval(-30.0).unwrap();
        let limit = 10.0 + 10.0 * (-30.0f64 / 0.5).exp();
        assert!((near - limit).abs() < 1e-20);
    }

    #[test]
    fn logistic_rejects_non_finite_and_invalid() {
        let g = GeneralizedLogistic::new(0.0, 1.0, 1.0, 1.0).unwrap();
        assert!(matches!(g.eval(f64::NAN), Err(Error::InvalidProjection(_))));
        assert!(matches!(g.eval(f64::INFINITY), Err(Error::InvalidProjection(_))));
        assert!(GeneralizedLogistic::new(1.0, 1.0, 1.0, 1.0).is_err());
        assert!(GeneralizedLogistic::new(0.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn series_json_uses_null_for_missing() {
        let values = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mask = DMatrix::from_row_slice(2, 2, &[true, false, true, true]);
        let s = VitalSignSeries::new(15.0, vec!["a".into(), "b".into()], values, mask).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("null"));
        let back: VitalSignSeries = serde_json::from_str(&json).unwrap();
        assert_eq!(back.mask, s.mask);
        assert_eq!(back.values[(1, 1)], 4.0);
    }

    #[test]
    fn protocol_rejects_negative_rates() {
        assert!(InfusionProtocol::from_rates(15.0, &[1.0, -0.1]).is_err());
        assert!(InfusionProtocol::from_rates(0.0, &[1.0]).is_err());
    }
}

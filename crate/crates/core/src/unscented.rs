//! Unscented transform: sigma points, weights and Gaussian propagation
//! through nonlinear maps.
//!
//! The central mean weight is `lambda / (d + lambda)`. With that choice the
//! mean weights sum to one and the weighted sigma points reproduce the
//! source mean; a central weight of `d / (d + lambda)` does neither.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::GaussianBelief;

/// Scaling parameters of the transform. `kappa = None` means `3 - d` for
/// whatever dimension the transform is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub kappa: Option<f64>,
}

impl Default for UtParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            kappa: None,
        }
    }
}

impl UtParams {
    pub fn kappa_for(&self, d: usize) -> f64 {
        self.kappa.unwrap_or(3.0 - d as f64)
    }

    pub fn lambda(&self, d: usize) -> f64 {
        let d = d as f64;
        self.alpha * self.alpha * (d + self.kappa_for(d as usize)) - d
    }

    /// Mean and covariance weights for dimension `d`.
    pub fn weights(&self, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let lambda = self.lambda(d);
        let spread = d as f64 + lambda;
        if !(spread > 0.0) {
            return Err(Error::Config(format!(
                "unscented transform needs d + lambda > 0 (d={d}, lambda={lambda})"
            )));
        }
        let wi = 1.0 / (2.0 * spread);
        let w0 = lambda / spread;
        let mut w_mean = vec![wi; 2 * d + 1];
        let mut w_cov = vec![wi; 2 * d + 1];
        w_mean[0] = w0;
        w_cov[0] = w0 + (1.0 - self.alpha * self.alpha + self.beta);
        Ok((w_mean, w_cov))
    }
}

/// `2d + 1` sigma points: the mean, then `mean + L_i`, then `mean - L_i`,
/// where `L` is the lower Cholesky factor of `(d + lambda) cov`.
#[derive(Debug, Clone)]
pub struct SigmaPointSet {
    pub points: Vec<DVector<f64>>,
    pub w_mean: Vec<f64>,
    pub w_cov: Vec<f64>,
}

impl SigmaPointSet {
    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// Weighted mean, accumulated relative to the central point.
    pub fn weighted_mean(&self) -> DVector<f64> {
        weighted_mean(&self.points, &self.w_mean)
    }

    pub fn weighted_cov(&self) -> DMatrix<f64> {
        let mean = self.weighted_mean();
        let d = self.dim();
        let mut cov = DMatrix::zeros(d, d);
        for (x, w) in self.points.iter().zip(&self.w_cov) {
            let dx = x - &mean;
            cov += &dx * dx.transpose() * *w;
        }
        linalg::symmetrize(&mut cov);
        cov
    }
}

pub fn sigma_points(belief: &GaussianBelief, ut: &UtParams) -> Result<SigmaPointSet> {
    let d = belief.dim();
    let (w_mean, w_cov) = ut.weights(d)?;
    let spread = d as f64 + ut.lambda(d);
    let scaled = &belief.cov * spread;
    let l = linalg::cholesky_with_jitter(&scaled, 1e-12, 1e-6)?;
    let mut points = Vec::with_capacity(2 * d + 1);
    points.push(belief.mean.clone());
    for i in 0..d {
        points.push(&belief.mean + l.column(i));
    }
    for i in 0..d {
        points.push(&belief.mean - l.column(i));
    }
    Ok(SigmaPointSet { points, w_mean, w_cov })
}

/// Output of [`unscented_transform`].
#[derive(Debug, Clone)]
pub struct UtMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `E[(x - mu)(f(x) - mu_y)^T]`.
    pub cross_cov: DMatrix<f64>,
}

/// Gaussian approximation of `f(x)` for `x ~ belief`.
pub fn unscented_transform<F>(belief: &GaussianBelief, f: F, ut: &UtParams) -> Result<UtMoments>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let sp = sigma_points(belief, ut)?;
    propagate(&sp, &belief.mean, f)
}

/// Pushes an existing sigma-point set through `f`.
pub fn propagate<F>(sp: &SigmaPointSet, center: &DVector<f64>, f: F) -> Result<UtMoments>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let ys: Vec<DVector<f64>> = sp.points.iter().map(&f).collect();
    for (index, y) in ys.iter().enumerate() {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Propagation { index });
        }
    }
    let dy = ys[0].len();
    let dx = center.len();
    let mean = weighted_mean(&ys, &sp.w_mean);
    let mut cov = DMatrix::zeros(dy, dy);
    let mut cross_cov = DMatrix::zeros(dx, dy);
    for ((x, y), w) in sp.points.iter().zip(&ys).zip(&sp.w_cov) {
        let ey = y - &mean;
        let ex = x - center;
        cov += &ey * ey.transpose() * *w;
        cross_cov += ex * ey.transpose() * *w;
    }
    linalg::symmetrize(&mut cov);
    Ok(UtMoments { mean, cov, cross_cov })
}

/// `y_0 + sum_i w_i (y_i - y_0)`, which equals `sum_i w_i y_i` for weights
/// summing to one and is exact when all points coincide.
fn weighted_mean(points: &[DVector<f64>], w: &[f64]) -> DVector<f64> {
    let center = &points[0];
    let n = points.len();
    let d = (n - 1) / 2;
    let mut acc = DVector::zeros(center.len());
    // Mirror pairs are accumulated together so symmetric offsets cancel.
    for i in 1..=d {
        let pair = (&points[i] - center) * w[i] + (&points[i + d] - center) * w[i + d];
        acc += pair;
    }
    for i in (2 * d + 1)..n {
        acc += (&points[i] - center) * w[i];
    }
    center + acc
}

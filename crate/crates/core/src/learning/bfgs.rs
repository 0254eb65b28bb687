//! Budgeted BFGS minimizer with central finite-difference gradients.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    /// Maximum number of objective evaluations, gradient probes included.
    pub max_evals: usize,
    /// Relative finite-difference step.
    pub rel_step: f64,
    /// Stop once the gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Stop once an accepted step improves the value by less than
    /// `f_tol * max(|f|, 1)`.
    pub f_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_evals: 1000,
            rel_step: 1e-6,
            grad_tol: 1e-9,
            f_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub iterations: usize,
}

struct Counted<F> {
    f: F,
    evals: usize,
    budget: usize,
    best_x: Vec<f64>,
    best_value: f64,
}

impl<F: Fn(&[f64]) -> f64> Counted<F> {
    fn remaining(&self) -> usize {
        self.budget.saturating_sub(self.evals)
    }

    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        let v = if v.is_finite() { v } else { f64::INFINITY };
        if v < self.best_value {
            self.best_value = v;
            self.best_x = x.to_vec();
        }
        v
    }

    fn gradient(&mut self, x: &[f64], rel_step: f64) -> Option<DVector<f64>> {
        let n = x.len();
        if self.remaining() < 2 * n {
            return None;
        }
        let mut g = DVector::zeros(n);
        let mut probe = x.to_vec();
        for k in 0..n {
            let h = rel_step * x[k].abs().max(1.0);
            probe[k] = x[k] + h;
            let fp = self.eval(&probe);
            probe[k] = x[k] - h;
            let fm = self.eval(&probe);
            probe[k] = x[k];
            if !fp.is_finite() || !fm.is_finite() {
                return None;
            }
            g[k] = (fp - fm) / (2.0 * h);
        }
        Some(g)
    }
}

/// Minimizes `f` from `x0` within the evaluation budget and returns the best
/// point seen, which is never worse than `x0`.
pub fn minimize<F>(f: F, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsResult>
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let mut obj = Counted {
        f,
        evals: 0,
        budget: opts.max_evals.max(1),
        best_x: x0.to_vec(),
        best_value: f64::INFINITY,
    };
    let mut fx = obj.eval(x0);
    if !fx.is_finite() {
        return Err(Error::Initialization(
            "objective is not finite at the initial point".into(),
        ));
    }
    let mut x = DVector::from_column_slice(x0);
    let mut iterations = 0;
    let Some(mut g) = obj.gradient(x.as_slice(), opts.rel_step) else {
        return Ok(finish(obj, iterations));
    };
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut first = true;

    while obj.remaining() > 0 {
        if g.amax() <= opts.grad_tol {
            break;
        }
        let mut dir = -(&h_inv * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            // Lost descent: restart from steepest descent.
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = g.dot(&dir);
            first = true;
        }
        if first {
            let scale = 1.0 / dir.norm().max(1.0);
            dir *= scale;
            slope *= scale;
        }

        let mut step = 1.0;
        let mut accepted = None;
        while obj.remaining() > 0 {
            let trial = &x + &dir * step;
            let ft = obj.eval(trial.as_slice());
            if ft <= fx + 1e-4 * step * slope {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
        let Some((x_new, f_new)) = accepted else {
            break;
        };
        iterations += 1;
        if fx - f_new <= opts.f_tol * fx.abs().max(1.0) {
            break;
        }
        let Some(g_new) = obj.gradient(x_new.as_slice(), opts.rel_step) else {
            break;
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                h_inv *= sy / y.dot(&y);
                first = false;
            }
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - &s * y.transpose() * rho;
            let right = &eye - &y * s.transpose() * rho;
            h_inv = &left * &h_inv * &right + &s * s.transpose() * rho;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }
    Ok(finish(obj, iterations))
}

fn finish<F>(obj: Counted<F>, iterations: usize) -> BfgsResult {
    BfgsResult {
        x: obj.best_x,
        value: obj.best_value,
        evals: obj.evals,
        iterations,
    }
}

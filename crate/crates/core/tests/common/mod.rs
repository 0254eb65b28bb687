#![allow(dead_code)]

pub mod criteria;

use ionlds_core::model::{GeneralizedLogistic, InfusionProtocol, ObservationLink, StateSpaceParams};
use ionlds_core::synth::{make_protocol, ProtocolTemplate, RateRule};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

pub fn normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(rng))
}

/// `L L^T + ridge I` with a standard normal `L` of the given rank.
pub fn random_cov(rng: &mut ChaCha8Rng, d: usize, rank: usize, ridge: f64) -> DMatrix<f64> {
    let l = normal_matrix(rng, d, rank);
    &l * l.transpose() + DMatrix::identity(d, d) * ridge
}

/// Random matrix rescaled to the given spectral norm.
pub fn contraction(rng: &mut ChaCha8Rng, d: usize, norm: f64) -> DMatrix<f64> {
    let m = normal_matrix(rng, d, d);
    let s = m.clone().svd(false, false).singular_values.max();
    m * (norm / s)
}

pub fn approx_eq(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1.0)
}

/// Largest entrywise error, relative to `max(|b|, 1)`.
pub fn max_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn max_rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Linear-Gaussian model: identity link, stable random dynamics.
pub fn random_linear_model(rng: &mut ChaCha8Rng, dx: usize, du: usize, dy: usize) -> StateSpaceParams {
    let sigma1 = random_cov(rng, dx, dx, 0.1) * 0.2;
    StateSpaceParams {
        a: contraction(rng, dx, 0.95),
        b: normal_matrix(rng, dx, du) * 0.3,
        c: normal_matrix(rng, dy, dx),
        q_diag: DVector::from_fn(dx, |_, _| rng.random_range(0.01..0.2)),
        r_diag: DVector::from_fn(dy, |_, _| rng.random_range(0.05..0.5)),
        mu1: normal_vector(rng, dx),
        sigma1,
        eta: vec![GeneralizedLogistic::new(0.0, 1.0, 1.0, 1.0).unwrap(); dy],
        dt: 15.0,
        link: ObservationLink::Identity,
    }
}

pub fn random_protocol(rng: &mut ChaCha8Rng, t_len: usize) -> InfusionProtocol {
    let mut rates = Vec::with_capacity(t_len);
    let mut level: f64 = 0.0;
    for t in 0..t_len {
        if t % 20 == 0 {
            level = rng.random_range(0.0..3.0);
        }
        rates.push(level);
    }
    InfusionProtocol::from_rates(15.0, &rates).unwrap()
}

pub fn protocol_252() -> InfusionProtocol {
    make_protocol(&ProtocolTemplate::new(vec![2.0, 5.0, 2.0]), &RateRule::default()).unwrap()
}

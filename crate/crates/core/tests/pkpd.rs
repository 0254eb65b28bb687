mod common;

use common::*;
use ionlds_core::fitting::{fit_model, ModelSpec};
use ionlds_core::learning::EmConfig;
use ionlds_core::pkpd::{
    fit_k1e_grid, pkpd_as_nlds, CompartmentRates, PkPdFitConfig, PkPdLayout, PkPdOptions, RatesConfig,
};
use ionlds_core::synth::{sample_trajectory, MissingSpec};
use ionlds_core::{GeneralizedLogistic, InfusionProtocol, StateSpaceParams};
use nalgebra::{DMatrix, DVector};

const GRID: [f64; 7] = [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0];

fn marsh(k1e: Vec<f64>) -> CompartmentRates {
    CompartmentRates {
        k10: 0.119,
        k12: 0.112,
        k21: 0.055,
        k13: 0.0419,
        k31: 0.0033,
        k1e,
    }
}

/// PK/PD truth whose links span the effect-site range reached under `protocol`.
fn truth(k1e: Vec<f64>, protocol: &InfusionProtocol) -> StateSpaceParams {
    let rates = marsh(k1e);
    let dy = rates.channels();
    let opts = PkPdOptions::default();
    let n = 4 * dy;
    let flat = vec![GeneralizedLogistic::new(0.0, 1.0, 1.0, 1.0).unwrap(); dy];
    let probe = pkpd_as_nlds(
        &rates,
        15.0,
        flat,
        DVector::zeros(n),
        DVector::zeros(dy),
        DVector::zeros(n),
        DMatrix::zeros(n, n),
        &opts,
    )
    .unwrap();
    let mut x = DVector::zeros(n);
    let mut zmax = vec![0.0f64; dy];
    for t in 1..protocol.len() {
        x = &probe.a * &x + &probe.b * protocol.input(t);
        for (j, z) in zmax.iter_mut().enumerate() {
            *z = z.max(probe.c.row(j).dot(&x.transpose()));
        }
    }
    let eta = (0..dy)
        .map(|j| GeneralizedLogistic::new(40.0, 140.0, -6.0 / zmax[j], 1.0).unwrap())
        .collect();
    let q = DVector::from_fn(n, |i, _| (1e-4 * zmax[i / 4]).powi(2));
    pkpd_as_nlds(
        &rates,
        15.0,
        eta,
        q,
        DVector::from_element(dy, 1.0),
        DVector::zeros(n),
        DMatrix::zeros(n, n),
        &opts,
    )
    .unwrap()
}

fn quick() -> PkPdFitConfig {
    PkPdFitConfig {
        em: EmConfig {
            max_iterations: 10,
            ..EmConfig::default()
        },
        final_em: EmConfig {
            max_iterations: 10,
            ..EmConfig::default()
        },
        options: PkPdOptions::default(),
    }
}

#[test]
fn grid_search_recovers_effect_site_rates() {
    let protocol = protocol_252();
    let true_k1e = vec![0.1, 0.5, 2.0];
    let params = truth(true_k1e.clone(), &protocol);
    let series = sample_trajectory(&params, &protocol, 17, &MissingSpec::default()).unwrap();
    let fit = fit_k1e_grid(&series, &protocol, &marsh(vec![1.0; 3]), &GRID, &quick()).unwrap();
    assert_eq!(fit.k1e, true_k1e, "scores {:?}", fit.scores);
    assert_eq!(fit.params.state_dim(), 12);
    assert_eq!(fit.params.a, params.a);
}

#[test]
fn shared_layout_recovers_and_refits_jointly() {
    let protocol = protocol_252();
    let true_k1e = vec![0.2, 1.0];
    let params = truth(true_k1e.clone(), &protocol);
    let series = sample_trajectory(&params, &protocol, 5, &MissingSpec::default()).unwrap();
    let mut config = quick();
    config.options.layout = PkPdLayout::SharedCentral;
    let fit = fit_k1e_grid(&series, &protocol, &marsh(vec![1.0; 2]), &GRID, &config).unwrap();
    assert_eq!(fit.k1e, true_k1e);
    assert_eq!(fit.params.state_dim(), 5);
    let joint = fit.joint_fit.as_ref().unwrap();
    assert!(joint.log_likelihood >= joint.trace[0].log_likelihood);
}

#[test]
fn pkpd_spec_fits_through_the_common_entry_point() {
    let protocol = protocol_252();
    let params = truth(vec![0.5], &protocol);
    let series = sample_trajectory(&params, &protocol, 3, &MissingSpec::default()).unwrap();
    let spec = ModelSpec::PkPd {
        rates: RatesConfig {
            k10: 0.119,
            k12: 0.112,
            k21: 0.055,
            k13: 0.0419,
            k31: 0.0033,
            k1e: None,
            k1e_grid: Some(GRID.to_vec()),
        },
        fit: quick(),
    };
    let fitted = fit_model(&spec, &series, &protocol).unwrap();
    assert_eq!(fitted.parameter_count(), 24);
    assert!(fitted.params.validate().is_ok());
}

//! Input-output nonlinear dynamical systems for drug-response modelling:
//! model types, unscented filtering and smoothing, EM learning, a
//! compartmental baseline, evaluation metrics and a synthetic data generator.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod cohort;
pub mod error;
pub mod evaluation;
pub mod fitting;
pub mod inference;
pub mod learning;
pub mod linalg;
pub mod model;
pub mod pkpd;
pub mod synth;
pub mod unscented;

pub use error::{Error, Result};
pub use model::{
    GaussianBelief, GeneralizedLogistic, InfusionProtocol, ObservationLink, StateSpaceParams, VitalSignSeries,
};
pub use unscented::UtParams;

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Version tag written into every persisted or served JSON document.
pub const SCHEMA_VERSION: u32 = 1;

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).unwrap_or_default();
    hex::encode(Sha256::digest(&bytes))
}

//! Ensemble Kalman particle filters in ensemble space.
//!
//! The analysis `x^a = x̄^b 𝟙ᵀ + X^b (W^μ W^α + W^ε)` is computed from one
//! eigendecomposition per local region. `γ = 1` gives the ETKF/LETKF,
//! `γ = 0` a particle filter with balanced resampling, and intermediate
//! values the Kalman particle hybrids (stochastic or deterministic).

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod enspace;
pub mod error;
pub mod gamma;
pub mod linalg;
pub mod local;
pub mod models;
pub mod sampling;
pub mod scalar;
pub mod seed;
pub mod table;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Ensemble64 = enspace::Ensemble<f64>;
pub type Ensemble32 = enspace::Ensemble<f32>;
pub type ObsBatch64 = enspace::ObsBatch<f64>;
pub type ObsBatch32 = enspace::ObsBatch<f32>;
pub type SpectralCache64 = enspace::SpectralCache<f64>;
pub type SpectralCache32 = enspace::SpectralCache<f32>;
pub type WeightSet64 = enspace::WeightSet<f64>;
pub type WeightSet32 = enspace::WeightSet<f32>;
pub type GammaPolicy64 = gamma::GammaPolicy<f64>;
pub type GammaPolicy32 = gamma::GammaPolicy<f32>;
pub type LocalizationSpec64 = local::LocalizationSpec<f64>;
pub type LocalizationSpec32 = local::LocalizationSpec<f32>;
pub type LocatedObs64 = local::LocatedObs<f64>;
pub type LocatedObs32 = local::LocatedObs<f32>;
pub type ModelSpec64 = models::ModelSpec<f64>;
pub type ModelSpec32 = models::ModelSpec<f32>;
pub type TwinRun64 = models::TwinRun<f64>;
pub type TwinRun32 = models::TwinRun<f32>;

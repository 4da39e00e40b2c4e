//! Transparent trajectory forecasting from static features and exogenous
//! time series.
//!
//! Predicted trajectories are cubic B-splines whose coefficients are the sum
//! of a static-feature encoding and a recurrent encoding of the exogenous
//! series. Exogenous series enter either raw or as interleaved trend/property
//! tokens extracted from their own spline fits, so both the inputs and the
//! outputs of the model have an explicit motif composition.

pub mod autodiff;
pub mod composition;
pub mod config;
pub mod datasets;
pub mod encoding;
pub mod losses;
pub mod model;
pub mod robustness;
pub mod splines;
pub mod training;

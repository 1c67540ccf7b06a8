//! Gaze-direction prediction for social robots.
//!
//! The pipeline: scenarios are rasterized into 10 Hz stimulus matrices
//! ([`scenario`]), synthetic participants produce gaze traces ([`oracle`]), traces
//! become labelled 3-second windows ([`preprocess`]), two classifiers
//! ([`lstm`], [`transformer`]) are trained and cross-validated ([`trainer`]), and a
//! streaming controller turns live stimulus events into gaze commands ([`runtime`]).

pub mod error;
pub mod lstm;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod preprocess;
pub mod runtime;
pub mod scenario;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};

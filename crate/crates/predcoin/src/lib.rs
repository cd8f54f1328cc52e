//! Query-based hard-label attacks against classifiers, a randomized
//! inference-phase defense that detects and scrambles gradient-estimation
//! queries, and an evaluation harness with analytic-oracle verification of
//! the underlying estimation bounds.
//!
//! Modules:
//! - [`nn`]: minimal dense networks (forward, SGD training, serialization).
//! - [`oracle`]: hard-label query interfaces with exact query accounting,
//!   including analytic oracles with closed-form margins.
//! - [`attacks`]: the four query-based attacks plus shared primitives
//!   (boundary bisection, Monte-Carlo gradient estimation).
//! - [`defense`]: the detector, threshold search, and flip modes.
//! - [`adaptive`]: defense-aware attack primitives.
//! - [`theory`]: empirical checks of the gradient-estimation bound chain.
//! - [`harness`]: metrics, campaign orchestration, reports.

pub mod adaptive;
pub mod attacks;
pub mod data;
pub mod defense;
pub mod error;
pub mod harness;
pub mod nn;
pub mod oracle;
pub mod theory;

pub use error::{Error, Result};

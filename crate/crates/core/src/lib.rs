//! View-aware semantic alignment for aerial-ground person re-identification.
//!
//! The crate implements the full pipeline at desk scale: a view-decoupled
//! transformer encoder, expert-driven query generation with top-k routing,
//! graph-based local fusion, the multi-term training objective, cross-view
//! retrieval evaluation, a controllable synthetic data generator, and the
//! training / evaluation / gradient-check harness behind the `visa` CLI.
//!
//! All numerics run in `f64` on a small reverse-mode autodiff tape
//! ([`tape::Tape`]), which keeps analytic gradients checkable against
//! central finite differences.

pub mod config;
pub mod error;
pub mod nn;
pub mod params;
pub mod tape;

pub use error::{Result, VisaError};

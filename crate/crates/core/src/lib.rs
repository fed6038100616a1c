//! Weighted particle solvers for Zakai equations with correlated noise, a
//! functional calculus on spaces of measures, and statistical checks that an
//! ensemble of solver paths solves the associated Fokker–Planck equation and
//! martingale problem.

pub mod calculus;
pub mod error;
pub mod measure;
pub mod model;
pub mod oracle;
pub mod paths;
pub mod sde;
pub mod verify;
pub mod zakai;

pub use error::{Error, Result};

/// Version of this library, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

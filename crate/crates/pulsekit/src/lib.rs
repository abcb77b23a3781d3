//! Pulse collisions with a bump heterogeneity in a nonlocal FitzHugh-Nagumo
//! system: spectral simulation, Newton-Krylov shooting and continuation, and
//! the reduced pulse-position ODE.

pub mod continuation;
pub mod dopri;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod outcomes;
pub mod reduced;
pub mod shooting;
pub mod seeds;
pub mod snaking;
pub mod spectral;

pub use error::{Error, Result};

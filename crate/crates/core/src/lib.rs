//! Robust imitative planning.
//!
//! Ensembles of autoregressive Gaussian trajectory models trained on expert
//! demonstrations, plan selection under epistemic uncertainty, variance-based
//! shift detection and uncertainty-triggered online adaptation, together with
//! a small 2D driving world to evaluate them in.

pub mod adaptation;
pub mod bench;
pub mod density;
pub mod diffmath;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod par;
pub mod planner;
pub mod seeds;
pub mod world;

pub use error::{Error, Result};

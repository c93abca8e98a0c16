//! Trajectory editing with a dependency-structured diffusion prior.
//!
//! Train a diffusion model over fixed-horizon decision windows from a target
//! domain, then adapt source-domain windows by partial noising and anchored
//! denoising so they match target dynamics while keeping their task content.
//! A synthetic point-mass benchmark and a behavior-cloning harness measure
//! the effect.

pub mod check;
pub mod error;
pub mod downstream;
pub mod editing;
pub mod envsuite;
pub mod exec;
pub mod io;
pub mod model;
pub mod numerics;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};

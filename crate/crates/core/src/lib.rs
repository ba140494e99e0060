//! Annulus-projected classifier heads for membership privacy, with a
//! from-scratch dense network engine and a shadow-model attack harness.

pub mod access;
pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod defenses;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod nn;
pub mod report;
pub mod srcm;

pub use error::{LabError, Result};
pub use matrix::Matrix;

//! Periodic homogenization toolkit for poroelastic and acoustic media.
//!
//! Pipeline: [`geometry`] builds a voxel unit cell, [`cell`] solves the
//! periodic cell problems, [`tensors`] assembles effective coefficients,
//! [`macroscale`] integrates the homogenized systems and [`dns`] solves the
//! fine-scale problem for comparison. [`pipeline`] wires the stages to files.

pub mod cell;
pub mod dns;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod macroscale;
pub mod params;
pub mod pipeline;
pub mod sparse;
pub mod tensors;

pub use error::{Error, Result};

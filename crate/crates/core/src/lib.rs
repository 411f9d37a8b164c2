//! Numerical laboratory for parabolic stochastic PDE systems with rough,
//! time-measurable coefficients on the periodic box.
//!
//! The crate is organised bottom-up: [`grid`] holds fields and Fourier
//! multipliers, [`noise`] and [`coefficients`] produce the random inputs,
//! [`evolution`] solves linear problems, and [`transform`], [`normlab`],
//! [`semilinear`] and [`tent`] build the verification experiments on top.

pub mod coefficients;
pub mod error;
pub mod evolution;
pub mod grid;
pub mod noise;
pub mod normlab;
pub mod semilinear;
pub mod tent;
pub mod time_grid;
pub mod transform;

pub use error::{Error, Result};
pub use grid::{Field, SpectralField, TorusGrid};
pub use noise::{generate_noise, NoisePath, ZetaPath};
pub use time_grid::TimeGrid;

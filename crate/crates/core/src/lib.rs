//! Reconstruction of the dielectric constant and conductivity of a buried
//! target from single-frequency backscattering data, by minimizing a
//! Carleman-weighted least-squares functional over the Fourier coefficients
//! (in the source position) of `log(u / u_i)`.
//!
//! The pipeline stages are:
//!
//! 1. [`forward`]: Lippmann-Schwinger solves producing synthetic sweeps.
//! 2. [`preprocess`]: angular-spectrum propagation to the near-field plane,
//!    truncation and smoothing with max retrieval.
//! 3. [`lift`]: `v = log(u / u_i)`, projection on the basis, starting point.
//! 4. [`convexification`]: the weighted functional, its gradient, descent.
//! 5. [`extract`]: coefficients from the minimizer, post-processing, export.
//!
//! Numerical code is generic over [`Real`] (`f32` / `f64`); the aliases below
//! fix the double-precision instances used by the CLI.

pub mod basis;
pub mod convexification;
pub mod domain;
pub mod error;
pub mod extract;
pub mod quadrature;
pub mod forward;
pub mod lift;
pub mod pipeline;
pub mod preprocess;
pub mod scalar;
pub mod sweep;

pub use domain::{
    make_grid, wavenumber_from_frequency, DomainBox, Grid3, MeasurementPlane, PhysicalConstants,
    SourceLine,
};
pub use error::{Error, Result};
pub use scalar::{Cplx, Real};

pub type BasisSet = basis::BasisSet<f64>;
pub type BasisSetF32 = basis::BasisSet<f32>;
pub type MediumModel = domain::MediumModel<f64>;
pub type MediumModelF32 = domain::MediumModel<f32>;

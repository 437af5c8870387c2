//! Singular expansions, pencil spectra and time-domain kernels for the
//! nonstationary Stokes system in a circular cone.
//!
//! Module map:
//! - [`geometry`], [`quad`], [`cheb`]: cone geometry, cutoffs, quadrature, weighted norms.
//! - [`neumann`]: Neumann Laplace–Beltrami spectrum of the cap.
//! - [`stokes`]: Stokes pencil roots and the weight classifier.
//! - [`poly`], [`singular`]: boundary-layer polynomials and the singular expansion.
//! - [`coeffs`]: bilinear pairing, biorthogonality, coefficient extraction.
//! - [`kernels`]: mollifier, contour inversion and time-domain kernels.
//! - [`verify`]: acceptance checks against independent routes.

pub mod cheb;
pub mod error;
pub mod geometry;
pub mod neumann;
pub mod poly;
pub mod quad;
pub mod singular;
pub mod coeffs;
pub mod kernels;
pub mod verify;
pub mod stokes;

pub use error::{Error, Result};

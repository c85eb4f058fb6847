//! Numerical toolkit for a heat equation whose diffusion coefficient |x|^α
//! vanishes at an interior point of the domain.
//!
//! The crate simulates the forward controlled equation and its backward
//! adjoint, evaluates the regularized coefficient family ψ_ε^α together with
//! its closed-form identities, estimates Muckenhoupt constants and discrete
//! Hardy/Poincaré ratios, builds the exponential weights used by observability
//! estimates, and synthesizes localized null controls by a penalized
//! conjugate-gradient scheme.
//!
//! Everything operates on a uniform vertex-centered grid over the square
//! (−L, L)² with homogeneous Dirichlet boundary conditions; the vertex count
//! per axis is odd so the degeneracy point coincides with a grid vertex.

pub mod carleman;
pub mod control;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod interp;
pub mod operators;
pub mod parabolic;
pub mod quad;
pub mod sampling;
pub mod solver;
pub mod spectral;
pub mod weights;

pub use error::Error;
pub use geometry::{ControlShape, DomainSpec, Grid, Mask, Region};
pub use operators::{Field, SparseOperator, WeightedNorms};
pub use parabolic::{ProblemSpec, TimeField, TimeGrid};
pub use weights::{WeightKind, WeightSpec};

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

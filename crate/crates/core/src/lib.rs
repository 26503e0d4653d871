//! Quadratic self-test losses for learning diffusion rates, interaction kernels and
//! external potentials from solution snapshots of aggregation-diffusion equations.
//!
//! The linear-algebra, quadratic-form and grid layers are generic over [`Real`] (`f32` or `f64`);
//! the operator, estimator and particle layers work in `f64`.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
// Index loops mirror the discrete formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod basis;
pub mod error;
pub mod estimators;
pub mod identifiability;
pub mod linalg;
pub mod numerics;
pub mod operators;
pub mod particles;
pub mod quadform;
pub mod scalar;

pub use error::{Error, Result};
pub use basis::BasisSet;
pub use operators::{EnergyReport, ParameterTriple};
pub use particles::{GradientSystem, MixtureSpec, ParticleEnsemble, Potential};
pub use scalar::Real;

pub type Matrix = linalg::Matrix<f64>;
pub type QuadraticForm = quadform::QuadForm<f64>;
pub type EstimateReport = quadform::EstimateReport<f64>;
pub type RegularizationSpec = quadform::RegularizationSpec<f64>;
pub type Grid1D = numerics::Grid<f64>;
pub type SampledField = numerics::Field<f64>;

pub type QuadraticFormF32 = quadform::QuadForm<f32>;
pub type Grid1DF32 = numerics::Grid<f32>;
pub type SampledFieldF32 = numerics::Field<f32>;

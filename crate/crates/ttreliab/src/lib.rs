//! Desk-scale toolkit for estimating prior and posterior structural failure
//! probabilities of a composite plate whose microscale material parameters
//! are random fields.
//!
//! The pipeline couples a Voigt-Reuss-bounded homogenization surrogate with
//! tensor-train transport-based importance sampling:
//!
//! * [`micromech`] solves periodic RVE homogenization problems and computes
//!   Voigt/Reuss bound envelopes,
//! * [`surrogate`] trains a bound-respecting spectral-normalization network
//!   on homogenization data,
//! * [`randfield`] provides Karhunen-Loeve representations of the log-normal
//!   microstructure fields,
//! * [`macrofem`] is the plate-with-hole forward model (stiffness from the
//!   surrogate, von Mises quantity of interest, Gaussian likelihood),
//! * [`tt`], [`sirt`] and [`dirt`] implement tensor-train cross
//!   approximation, squared functional-TT densities with Rosenblatt
//!   transports, and the layered deep inverse Rosenblatt transport,
//! * [`estimators`] holds the Monte Carlo / importance sampling estimators
//!   and their diagnostics,
//! * [`pipeline`] is the command-line orchestration and artifact layer.

pub mod dirt;
pub mod estimators;
pub mod exec;
pub mod linalg;
pub mod macrofem;
pub mod micromech;
pub mod normal;
pub mod pipeline;
pub mod randfield;
pub mod seeds;
pub mod sirt;
pub(crate) mod sparse;
pub mod surrogate;
pub mod tt;

//! Training of deep linear network generators of centered Gaussians under the
//! Bures-Wasserstein (BW) loss and its tau-perturbation.
//!
//! The crate is organized bottom-up:
//!
//! * [`matcore`] — dense symmetric/rectangular matrix kernels (spectral
//!   decomposition, matrix square roots, thin SVD, polar factor,
//!   Kronecker/vec/commutation utilities, seeded Haar-orthogonal sampling);
//! * [`bwloss`] — the BW loss in covariance and function space, its
//!   tau-perturbation, gradients, the variational/polar form, the perturbation
//!   gap bound and the modified deficiency margin;
//! * [`network`] — the deep linear parametrization, per-layer gradients,
//!   balanced initialization and balancedness diagnostics;
//! * [`critical`] — closed-form critical points on fixed-rank manifolds,
//!   restricted gradients, subset enumeration, the best rank-k approximation;
//! * [`optimize`] — gradient descent and adaptive gradient-flow integration,
//!   certified convergence constants, empirical rate estimation;
//! * [`hessian`] — exact Hessians of the Frobenius and BW losses in
//!   covariance, function (Burer-Monteiro) and parameter space, condition
//!   numbers, finite-difference validation.

pub mod bwloss;
pub mod critical;
pub mod error;
pub mod hessian;
pub mod matcore;
pub mod network;
pub mod optimize;

pub use bwloss::{LossEval, Target};
pub use critical::CriticalPoint;
pub use error::{CoreError, Result};
pub use hessian::{ConditionReport, HessSpace, HessianMatrix, LossKind};
pub use matcore::{Mat, PsdMatrix, SymEig, ThinSvd, Vector};
pub use network::{BalanceReport, NetParams};
pub use optimize::{CertifiedConstants, FlowConfig, GdConfig, Sample, Trajectory};

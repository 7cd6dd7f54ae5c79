//! Exact injective normalizing flows on star-like manifolds.
//!
//! A star-like manifold of codimension 1 in `R^d` is the boundary of a star
//! domain: every ray from a distinguished interior point crosses it exactly
//! once, so it is globally parametrized by a radius function `r(θ)` over
//! generalized spherical angles. This crate models densities on such
//! manifolds with an injective flow
//!
//! ```text
//! z ~ uniform angles  →  θ = T_θ(z)  →  (θ, r(θ))  →  x = T_s→c(θ, r(θ))
//! ```
//!
//! whose log-density in ambient Cartesian coordinates is exact: the Jacobian
//! volume term of the full map factorizes as
//! `det J_Tθ · det J_s→c · ‖(J_s→c^T)^{-1} y‖₂` with `y = [-∇r(θ), 1]`, and
//! the linear solve exploits the almost-triangular structure of `J_s→c^T`,
//! bringing the whole evaluation to O(d²) instead of the O(d³) Gram
//! determinant of a generic injective flow.
//!
//! Modules:
//! - [`tape`]: scalar reverse-mode AD used to train by reverse KL.
//! - [`spherical`]: generalized spherical coordinates, their closed-form
//!   log-determinant and analytic transposed Jacobian.
//! - [`manifolds`]: radius fields (sphere, lp balls, simplex, deformed sphere).
//! - [`jacdet`]: the O(d²) fast determinant, the O(d³) Gram oracle it is
//!   checked against, and a Hutchinson-estimator training baseline.
//! - [`flow`]: rational-quadratic spline flows on angles and the full model.
//! - [`targets`]: unnormalized target densities for variational inference.
//! - [`vi`]: reverse-KL Monte Carlo training loop, Adam, and metrics.
//! - [`mcmc`]: Metropolis-Hastings baseline on the probability simplex.
//! - [`bench`]: runtime-scaling harness for the two determinant paths.

pub mod bench;
pub mod flow;
pub mod jacdet;
pub mod manifolds;
pub mod mcmc;
pub mod spherical;
pub mod tape;
pub mod targets;
pub mod vi;

pub use jacdet::JacDetResult;
pub use manifolds::RadiusField;
pub use spherical::{AngleVector, CartesianPoint, SphericalPoint};
pub use tape::{Scalar, Tape, Var};
pub mod mat;

//! Star-like manifolds as radius fields r(θ) over spherical angles.
//!
//! Each field kind pins down the injective step θ ↦ [θ, r(θ)]:
//!
//! - `Sphere { c }`: constant radius c.
//! - `LpBall { p, t }`: the lp (pseudo-)norm level set ‖x‖_p = t,
//!   `r(θ) = t / (Σ_i |u_i(θ)|^p)^{1/p}` with u(θ) the unit direction.
//! - `Simplex`: `Σ x_i = 1, x_i ≥ 0` over orthant-restricted angles,
//!   `r(θ) = 1 / Σ_i u_i(θ)`.
//! - `Deformed { amplitude, frequency }`: a sinusoidally bumped sphere
//!   `r = 1 + a sin(mθ_1) sin(mθ_2)`, star-like for |a| < 1.
//!
//! Every kind exposes both the radius and its angle gradient ∇_θ r in closed
//! form over any [`Scalar`], so the fast determinant can be taped end to end
//! during training. For the lp ball and the deformed sphere the plain-f64
//! [`RadiusField::grad_radius`] instead routes through the AD tape — the
//! |·|^p chain is easy to get wrong by hand, and the taped route gives the
//! test suite an independent value to hold the closed form against.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spherical::{jacobian_sc_transpose, AngleDomain};
use crate::tape::{Scalar, Tape};

#[derive(Debug, Error)]
pub enum ManifoldError {
    #[error("sphere radius must be positive, got {0}")]
    BadSphereRadius(f64),
    #[error("lp ball needs p > 0 and t > 0, got p={p}, t={t}")]
    BadLpBall { p: f64, t: f64 },
    #[error("deformed sphere needs |amplitude| < 1, got {0}")]
    BadAmplitude(f64),
}

/// A star-like manifold given by its radius function over the angle domain.
/// Immutable after construction; all evaluation is pure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RadiusField {
    Sphere { c: f64 },
    LpBall { p: f64, t: f64 },
    Simplex,
    Deformed { amplitude: f64, frequency: f64 },
}

impl RadiusField {
    pub fn sphere(c: f64) -> Result<Self, ManifoldError> {
        if !(c > 0.0) {
            return Err(ManifoldError::BadSphereRadius(c));
        }
        Ok(RadiusField::Sphere { c })
    }

    pub fn lp_ball(p: f64, t: f64) -> Result<Self, ManifoldError> {
        if !(p > 0.0 && t > 0.0) {
            return Err(ManifoldError::BadLpBall { p, t });
        }
        Ok(RadiusField::LpBall { p, t })
    }

    pub fn simplex() -> Self {
        RadiusField::Simplex
    }

    pub fn deformed(amplitude: f64, frequency: f64) -> Result<Self, ManifoldError> {
        if !(amplitude.abs() < 1.0) {
            return Err(ManifoldError::BadAmplitude(amplitude));
        }
        Ok(RadiusField::Deformed { amplitude, frequency })
    }

    /// The angle box this field is defined over; the simplex forces the
    /// positive orthant so its Cartesian image stays nonnegative.
    pub fn domain(&self) -> AngleDomain {
        match self {
            RadiusField::Simplex => AngleDomain::PositiveOrthant,
            _ => AngleDomain::Full,
        }
    }

    /// r(θ) > 0 for θ inside the field's (clamped) domain.
    pub fn radius<R: Scalar>(&self, theta: &[R]) -> R {
        match *self {
            RadiusField::Sphere { c } => R::constant(c),
            RadiusField::LpBall { p, t } => {
                let u = unit_components(theta);
                // Max-factored denominator: dividing by the largest |u_i|
                // before exponentiating keeps the bases in [0, 1], so the
                // 1/p power neither overflows nor underflows at small p.
                let m = max_abs(&u);
                let mut s = R::constant(0.0);
                for &ui in &u {
                    s = s + (ui.abs() / m).powf(p);
                }
                R::constant(t) / (m * s.powf(1.0 / p))
            }
            RadiusField::Simplex => {
                let u = unit_components(theta);
                let mut s = u[0];
                for &ui in &u[1..] {
                    s = s + ui;
                }
                R::constant(1.0) / s
            }
            RadiusField::Deformed { amplitude, frequency } => {
                let bump = if theta.len() >= 2 {
                    (theta[0] * frequency).sin() * (theta[1] * frequency).sin()
                } else {
                    (theta[0] * frequency).sin()
                };
                bump * amplitude + 1.0
            }
        }
    }

    /// Closed-form ∇_θ r(θ), written over `Scalar` so the training tape can
    /// differentiate through it (the determinant's null vector depends on
    /// ∇r, and the loss gradient needs its second-order action).
    pub fn grad_radius_parts<R: Scalar>(&self, theta: &[R]) -> Vec<R> {
        let n = theta.len();
        match *self {
            RadiusField::Sphere { .. } => vec![R::constant(0.0); n],
            RadiusField::LpBall { p, .. } => {
                let u = unit_components(theta);
                let m = max_abs(&u);
                let mut s = R::constant(0.0);
                let mut v = Vec::with_capacity(u.len());
                for &ui in &u {
                    let vi = ui.abs() / m;
                    s = s + vi.powf(p);
                    v.push(vi);
                }
                let r = self.radius(theta);
                // ∂r/∂θ_i = -(r / (m s)) Σ_j v_j^{p-1} sgn(u_j) ∂u_j/∂θ_i
                let unit_jac = jacobian_sc_transpose(theta, R::constant(1.0));
                let scale = -r / (m * s);
                (0..n)
                    .map(|i| {
                        let mut acc = R::constant(0.0);
                        for (j, &vj) in v.iter().enumerate() {
                            // v_j = 0 exactly is the |u|^p kink; subgradient 0.
                            if vj.val() == 0.0 {
                                continue;
                            }
                            let term = vj.powf(p - 1.0) * unit_jac.get(i, j);
                            acc = if u[j].val() < 0.0 { acc - term } else { acc + term };
                        }
                        acc * scale
                    })
                    .collect()
            }
            RadiusField::Simplex => {
                let r = self.radius(theta);
                let unit_jac = jacobian_sc_transpose(theta, R::constant(1.0));
                // ∂r/∂θ_i = -r² Σ_j ∂u_j/∂θ_i
                (0..n)
                    .map(|i| {
                        let row = unit_jac.row(i);
                        let mut colsum = row[0];
                        for &e in &row[1..] {
                            colsum = colsum + e;
                        }
                        -(r * r) * colsum
                    })
                    .collect()
            }
            RadiusField::Deformed { amplitude, frequency } => {
                let mut g = vec![R::constant(0.0); n];
                if n >= 2 {
                    let (s0, c0) = ((theta[0] * frequency).sin(), (theta[0] * frequency).cos());
                    let (s1, c1) = ((theta[1] * frequency).sin(), (theta[1] * frequency).cos());
                    g[0] = c0 * s1 * (amplitude * frequency);
                    g[1] = s0 * c1 * (amplitude * frequency);
                } else {
                    g[0] = (theta[0] * frequency).cos() * (amplitude * frequency);
                }
                g
            }
        }
    }

    /// ∇_θ r(θ) as plain numbers: hand-coded closed form for the sphere and
    /// the simplex, tape-differentiated radius for the lp ball and the
    /// deformed sphere.
    pub fn grad_radius(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            RadiusField::Sphere { .. } | RadiusField::Simplex => self.grad_radius_parts(theta),
            RadiusField::LpBall { .. } | RadiusField::Deformed { .. } => {
                let tape = Tape::new();
                let vars: Vec<_> = theta.iter().map(|&t| tape.leaf(t)).collect();
                let r = self.radius(vars.as_slice());
                let grads = tape.backward(r).expect("radius var is on this tape");
                vars.iter().map(|&v| grads.wrt(v)).collect()
            }
        }
    }

    /// How far a Cartesian point is from satisfying this manifold's defining
    /// constraint (0 on the manifold): |‖x‖₂ − c|, |‖x‖_p − t|,
    /// max(|Σx − 1|, −min x_i), or |‖x‖₂ − r(θ(x))| for the deformed sphere.
    pub fn constraint_residual(&self, x: &[f64]) -> f64 {
        match *self {
            RadiusField::Sphere { c } => (norm2(x) - c).abs(),
            RadiusField::LpBall { p, t } => (lp_norm(x, p) - t).abs(),
            RadiusField::Simplex => {
                let sum: f64 = x.iter().sum();
                let neg = x.iter().fold(0.0f64, |acc, &v| acc.max(-v));
                (sum - 1.0).abs().max(neg)
            }
            RadiusField::Deformed { .. } => {
                let (theta, r) = crate::spherical::angles_from_cartesian(x);
                (r - self.radius(theta.as_slice())).abs()
            }
        }
    }
}

/// Components of the unit direction u(θ) = T_s→c(θ, 1).
fn unit_components<R: Scalar>(theta: &[R]) -> Vec<R> {
    crate::spherical::to_cartesian_parts(theta, R::constant(1.0))
}

fn max_abs<R: Scalar>(u: &[R]) -> R {
    let mut m = u[0].abs();
    for &ui in &u[1..] {
        m = m.max(ui.abs());
    }
    m
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// ‖x‖_p for p > 0, max-factored for stability at small p.
pub fn lp_norm(x: &[f64], p: f64) -> f64 {
    let m = x.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if m == 0.0 {
        return 0.0;
    }
    let s: f64 = x.iter().map(|v| (v.abs() / m).powf(p)).sum();
    m * s.powf(1.0 / p)
}

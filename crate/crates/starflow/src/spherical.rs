//! Generalized d-spherical coordinates.
//!
//! A point of `R^d` is written with d−1 angles and a radius:
//!
//! ```text
//! x_1 = r cos θ_1
//! x_2 = r sin θ_1 cos θ_2
//! ...
//! x_{d-1} = r sin θ_1 ⋯ sin θ_{d-2} cos θ_{d-1}
//! x_d     = r sin θ_1 ⋯ sin θ_{d-2} sin θ_{d-1}
//! ```
//!
//! with θ_i ∈ [0, π] for i < d−1 and θ_{d−1} ∈ [0, 2π]. The module provides
//! the transform, its inverse, the closed-form log-determinant
//! `log|det J_s→c| = (d−1) log r + Σ_k (d−k−1) log sin θ_k` (sign (−1)^{d−1}),
//! the analytic transposed Jacobian in its almost-triangular layout (upper
//! triangular except for a dense last ∂x/∂r row), and the angle distribution
//! whose pushforward is uniform on the unit sphere.
//!
//! Angles are clamped away from the boundary by [`ANGLE_EPS`] when an
//! [`AngleVector`] is constructed, which keeps every sin θ_i (i < d−1)
//! strictly positive and the determinant finite.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::mat::Mat;
use crate::tape::Scalar;

/// Offset keeping angles away from the singular set of the coordinate chart.
pub const ANGLE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SphericalError {
    #[error("angle vector must have at least one coordinate (d >= 2)")]
    Empty,
    #[error("cannot invert the zero vector: radius undefined")]
    ZeroVector,
    #[error("radius must be strictly positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("singular chart point: sin θ_{index} = 0")]
    Singular { index: usize },
    #[error("coordinate {index} is not finite")]
    NonFinite { index: usize },
}

/// Which box the angles live in: the full chart domain
/// `[0,π]^{d-2} × [0,2π]`, or its restriction to `[0,π/2]^{d-1}` whose
/// Cartesian image is the nonnegative orthant (used by the simplex).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AngleDomain {
    Full,
    PositiveOrthant,
}

impl AngleDomain {
    /// Half-open upper bound of angle `i` out of `n` angles.
    pub fn upper(self, i: usize, n: usize) -> f64 {
        match self {
            AngleDomain::Full => {
                if i + 1 == n {
                    std::f64::consts::TAU
                } else {
                    std::f64::consts::PI
                }
            }
            AngleDomain::PositiveOrthant => std::f64::consts::FRAC_PI_2,
        }
    }

    pub fn clamp(self, i: usize, n: usize, value: f64) -> f64 {
        value.clamp(ANGLE_EPS, self.upper(i, n) - ANGLE_EPS)
    }
}

/// A point in the angle domain; coordinates are ε-clamped on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleVector {
    theta: Vec<f64>,
    domain: AngleDomain,
}

impl AngleVector {
    pub fn new(mut theta: Vec<f64>, domain: AngleDomain) -> Result<Self, SphericalError> {
        if theta.is_empty() {
            return Err(SphericalError::Empty);
        }
        let n = theta.len();
        for (i, t) in theta.iter_mut().enumerate() {
            if !t.is_finite() {
                return Err(SphericalError::NonFinite { index: i });
            }
            *t = domain.clamp(i, n, *t);
        }
        Ok(AngleVector { theta, domain })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn domain(&self) -> AngleDomain {
        self.domain
    }

    /// Ambient dimension d (one more than the number of angles).
    pub fn dim(&self) -> usize {
        self.theta.len() + 1
    }
}

/// Angles plus a strictly positive radius.
#[derive(Debug, Clone)]
pub struct SphericalPoint {
    pub angles: AngleVector,
    pub radius: f64,
}

impl SphericalPoint {
    pub fn new(angles: AngleVector, radius: f64) -> Result<Self, SphericalError> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(SphericalError::NonPositiveRadius(radius));
        }
        Ok(SphericalPoint { angles, radius })
    }
}

/// A point of the ambient space R^d.
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianPoint {
    pub x: Vec<f64>,
}

impl CartesianPoint {
    pub fn new(x: Vec<f64>) -> Result<Self, SphericalError> {
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(SphericalError::NonFinite { index: i });
        }
        Ok(CartesianPoint { x })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// Cartesian components for angles `theta` and radius `r`, computed with a
/// running sine product in O(d).
pub fn to_cartesian_parts<R: Scalar>(theta: &[R], r: R) -> Vec<R> {
    let d = theta.len() + 1;
    let mut x = Vec::with_capacity(d);
    let mut sin_prod = r;
    for &t in theta {
        x.push(sin_prod * t.cos());
        sin_prod = sin_prod * t.sin();
    }
    x.push(sin_prod);
    x
}

pub fn to_cartesian(p: &SphericalPoint) -> CartesianPoint {
    CartesianPoint {
        x: to_cartesian_parts(p.angles.theta(), p.radius),
    }
}

/// Angles and radius of a nonzero point. Works for any `Scalar`, so the
/// taped path can differentiate through the inversion; domain handling and
/// zero checks live in [`to_spherical`].
pub fn angles_from_cartesian<R: Scalar>(x: &[R]) -> (Vec<R>, R) {
    let d = x.len();
    // suffix[k] = sqrt(x_k^2 + ... + x_{d-1}^2)
    let mut sumsq = vec![R::constant(0.0); d + 1];
    for k in (0..d).rev() {
        sumsq[k] = sumsq[k + 1] + x[k] * x[k];
    }
    let r = sumsq[0].sqrt();
    let mut theta = Vec::with_capacity(d - 1);
    for k in 0..d.saturating_sub(2) {
        theta.push(sumsq[k + 1].sqrt().atan2(x[k]));
    }
    // Last angle covers the full circle.
    let mut last = x[d - 1].atan2(x[d - 2]);
    if last.val() < 0.0 {
        last = last + std::f64::consts::TAU;
    }
    theta.push(last);
    (theta, r)
}

/// Inverse of [`to_cartesian`]. On the singular set (a leading block of
/// zero coordinates) the undetermined trailing angles come out as 0, which is
/// `atan2(0, 0)` — a fixed, documented convention rather than paper intent.
pub fn to_spherical(x: &CartesianPoint) -> Result<SphericalPoint, SphericalError> {
    to_spherical_in(x, AngleDomain::Full)
}

/// Same as [`to_spherical`] but tagging the result with `domain`
/// (orthant-restricted manifolds invert points into orthant angles).
pub fn to_spherical_in(
    x: &CartesianPoint,
    domain: AngleDomain,
) -> Result<SphericalPoint, SphericalError> {
    if x.dim() < 2 {
        return Err(SphericalError::Empty);
    }
    let (theta, r) = angles_from_cartesian(x.x.as_slice());
    if r == 0.0 {
        return Err(SphericalError::ZeroVector);
    }
    SphericalPoint::new(AngleVector::new(theta, domain)?, r)
}

/// `log|det J_s→c|` without boundary checks, for clamped interior points.
pub fn log_abs_det_sc_parts<R: Scalar>(theta: &[R], r: R) -> R {
    let d = theta.len() + 1;
    let mut acc = r.ln() * (d as f64 - 1.0);
    for (k, &t) in theta[..d - 2].iter().enumerate() {
        acc = acc + t.sin().ln() * (d - k - 2) as f64;
    }
    acc
}

/// Log-magnitude and sign of `det J_s→c` at `p`:
/// `(d−1) log r + Σ_{k<d-2} (d−k−2) log sin θ_k`, sign `(−1)^{d−1}`.
/// An exactly-singular chart point (possible only for θ_{d−1} = π, the other
/// angles being clamped) is reported as an error instead of a silent −∞.
pub fn log_abs_det_sc(p: &SphericalPoint) -> Result<(f64, i8), SphericalError> {
    let theta = p.angles.theta();
    // Only sines with a positive exponent make the determinant singular; the
    // last angle does not enter the product. Clamped AngleVectors cannot
    // trigger this, but raw interior math elsewhere can.
    for (k, t) in theta[..p.angles.dim() - 2].iter().enumerate() {
        if t.sin() == 0.0 {
            return Err(SphericalError::Singular { index: k });
        }
    }
    let log_abs = log_abs_det_sc_parts(theta, p.radius);
    let sign = if (p.angles.dim() - 1) % 2 == 0 { 1 } else { -1 };
    Ok((log_abs, sign))
}

/// Transposed Jacobian `J_s→c^T` in its almost-triangular layout: row i < d−1
/// holds ∂x/∂θ_i (zero left of the diagonal), the last row holds ∂x/∂r.
///
/// Entries come from prefix sine products: with `x_j` the Cartesian
/// components, `∂x_j/∂θ_i = cot θ_i · x_j` for j > i, and the diagonal is
/// `−r sin θ_i Π_{k<i} sin θ_k`. Only rows i < d−2 divide by sin θ_i, which
/// clamping keeps away from zero; the last-angle row is division-free.
pub fn jacobian_sc_transpose<R: Scalar>(theta: &[R], r: R) -> Mat<R> {
    let d = theta.len() + 1;
    let sin: Vec<R> = theta.iter().map(|t| t.sin()).collect();
    let cos: Vec<R> = theta.iter().map(|t| t.cos()).collect();
    // prefix[j] = r · sin θ_0 ⋯ sin θ_{j-1}
    let mut prefix = Vec::with_capacity(d);
    prefix.push(r);
    for j in 0..d - 1 {
        prefix.push(prefix[j] * sin[j]);
    }
    // Cartesian components: x_j = prefix[j] cos θ_j, x_{d-1} = prefix[d-1].
    let mut x = Vec::with_capacity(d);
    for j in 0..d - 1 {
        x.push(prefix[j] * cos[j]);
    }
    x.push(prefix[d - 1]);

    let mut jt = Mat::zeros(d, d);
    for i in 0..d - 1 {
        jt.set(i, i, -(prefix[i] * sin[i]));
        if i < d - 2 {
            let cot = cos[i] / sin[i];
            for j in i + 1..d {
                jt.set(i, j, cot * x[j]);
            }
        } else {
            // Last angle: ∂x_{d-1}/∂θ_{d-2} has no sine division.
            jt.set(i, d - 1, prefix[d - 2] * cos[d - 2]);
        }
    }
    for j in 0..d {
        jt.set(d - 1, j, x[j] / r);
    }
    jt
}

/// Jacobian of `J_s→c^T` at a validated point.
pub fn jacobian_sc_transpose_at(p: &SphericalPoint) -> Mat<f64> {
    jacobian_sc_transpose(p.angles.theta(), p.radius)
}

/// Log surface area of the unit (d−1)-sphere, or of its intersection with
/// the positive orthant (a 2^{-d} fraction).
pub fn log_surface_area(d: usize, domain: AngleDomain) -> f64 {
    let d = d as f64;
    let full = std::f64::consts::LN_2
        + (d / 2.0) * std::f64::consts::PI.ln()
        - ln_gamma(d / 2.0);
    match domain {
        AngleDomain::Full => full,
        AngleDomain::PositiveOrthant => full - d * std::f64::consts::LN_2,
    }
}

/// Unchecked kernel of [`angle_log_density_uniform_sphere`].
pub fn angle_log_density_parts<R: Scalar>(theta: &[R], domain: AngleDomain) -> R {
    let d = theta.len() + 1;
    let mut acc = R::constant(-log_surface_area(d, domain));
    for (k, &t) in theta[..d - 2].iter().enumerate() {
        acc = acc + t.sin().ln() * (d - k - 2) as f64;
    }
    acc
}

/// Log-density over the angle box whose pushforward through `to_cartesian`
/// (r = 1) is the uniform distribution on the unit sphere:
/// `Σ_k (d−k−1) log sin θ_k − log Z_d`.
pub fn angle_log_density_uniform_sphere(a: &AngleVector) -> Result<f64, SphericalError> {
    for (k, t) in a.theta().iter().enumerate() {
        if t.sin() == 0.0 && k + 2 < a.dim() {
            return Err(SphericalError::Singular { index: k });
        }
    }
    Ok(angle_log_density_parts(a.theta(), a.domain()))
}

/// Draw `n` angle vectors whose unit-radius Cartesian image is uniform on
/// S^{d−1} (or on its positive-orthant patch): normalize standard Gaussian
/// draws and invert the chart.
pub fn sample_uniform_angles_in<RNG: Rng + ?Sized>(
    domain: AngleDomain,
    d: usize,
    n: usize,
    rng: &mut RNG,
) -> Vec<AngleVector> {
    assert!(d >= 2, "need an ambient dimension of at least 2");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if domain == AngleDomain::PositiveOrthant {
            for v in &mut x {
                *v = v.abs();
            }
        }
        let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        for v in &mut x {
            *v /= norm;
        }
        let (theta, _) = angles_from_cartesian(x.as_slice());
        out.push(AngleVector::new(theta, domain).expect("nonzero draw"));
    }
    out
}

/// Uniform-on-the-sphere angle draws over the full domain.
pub fn sample_uniform_angles<RNG: Rng + ?Sized>(
    d: usize,
    n: usize,
    rng: &mut RNG,
) -> Vec<AngleVector> {
    sample_uniform_angles_in(AngleDomain::Full, d, n, rng)
}

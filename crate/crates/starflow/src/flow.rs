//! The injective flow: spline bijections on angles plus the radius embedding.
//!
//! The angle transform T_θ stacks monotone rational-quadratic spline blocks
//! (bounded on [0,π] / [0,π/2] coordinates, circular with periodic boundary
//! derivatives on the [0,2π] coordinate). Spline parameters for each
//! coordinate are its own trainable base values plus an offset produced by a
//! small conditioner network reading the block's earlier coordinates, so the
//! block Jacobian stays triangular and its log-determinant is the O(d) sum of
//! per-coordinate log-derivatives. Blocks alternate the autoregressive
//! direction for mixing.
//!
//! A [`FlowModel`] owns the radius field and one flat parameter vector;
//! evaluation is written over [`Scalar`], so sampling runs on plain floats
//! while training lifts the same parameters onto an AD tape.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jacdet::{fast_log_det_parts, JacDetError, JacDetResult};
use crate::manifolds::RadiusField;
use crate::spherical::{
    angle_log_density_parts, sample_uniform_angles_in, to_cartesian_parts, to_spherical_in,
    AngleDomain, AngleVector, CartesianPoint, SphericalError,
};
use crate::tape::{Scalar, Var};

/// Tolerance for accepting a query point as lying on the manifold.
pub const ON_MANIFOLD_TOL: f64 = 1e-6;

/// Smallest bin fraction and knot-derivative floor keeping splines strictly
/// monotone during training.
const MIN_BIN_FRACTION: f64 = 1e-3;
const DERIVATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("spline input {value} outside [{lo}, {hi}] beyond tolerance")]
    OutsideInterval { value: f64, lo: f64, hi: f64 },
    #[error("point is off the manifold: constraint residual {residual}")]
    OffManifold { residual: f64 },
    #[error("ambient dimension must be at least 2, got {0}")]
    BadDimension(usize),
    #[error("model expects {expected} angles, got {got}")]
    AngleCount { expected: usize, got: usize },
    #[error("model is defined over {expected:?} angles but input uses {got:?}")]
    DomainMismatch { expected: AngleDomain, got: AngleDomain },
    #[error("checkpoint parameter vector has length {got}, expected {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error(transparent)]
    Spherical(#[from] SphericalError),
    #[error(transparent)]
    JacDet(#[from] JacDetError),
}

/// Boundary handling of one spline coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryMode {
    /// Monotone map of a bounded interval onto itself; all K+1 knot
    /// derivatives free.
    MonotoneBounded,
    /// Periodic boundary conditions: the derivative at 0 equals the
    /// derivative at 2π, keeping the density continuous across the seam.
    Circular,
}

/// A monotone rational-quadratic spline through knots (xs, ys) with strictly
/// positive knot derivatives ds. Bijective from [xs[0], xs[K]] onto
/// [ys[0], ys[K]]; both directions have closed forms.
#[derive(Debug, Clone)]
pub struct RqSpline<R = f64> {
    pub xs: Vec<R>,
    pub ys: Vec<R>,
    pub ds: Vec<R>,
}

impl<R: Scalar> RqSpline<R> {
    fn locate(knots: &[R], v: f64) -> usize {
        // Largest k with knots[k].val() <= v, clipped to a valid bin.
        let n_bins = knots.len() - 1;
        let mut lo = 0usize;
        let mut hi = n_bins;
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if knots[mid].val() <= v {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo.min(n_bins - 1)
    }

    /// Monotone rational-quadratic transform and its log-derivative.
    pub fn forward(&self, u: R) -> Result<(R, R), FlowError> {
        let (lo, hi) = (self.xs[0].val(), self.xs[self.xs.len() - 1].val());
        let uv = u.val();
        if uv < lo - 1e-9 || uv > hi + 1e-9 {
            return Err(FlowError::OutsideInterval { value: uv, lo, hi });
        }
        let k = Self::locate(&self.xs, uv);
        let (xk, xk1) = (self.xs[k], self.xs[k + 1]);
        let (yk, yk1) = (self.ys[k], self.ys[k + 1]);
        let (dk, dk1) = (self.ds[k], self.ds[k + 1]);
        let width = xk1 - xk;
        let slope = (yk1 - yk) / width;
        let xi = ((u - xk) / width).max(R::constant(0.0)).min(R::constant(1.0));
        let xi1m = R::constant(1.0) - xi;
        let quad = xi * xi1m;
        let denom = slope + (dk1 + dk - slope * 2.0) * quad;
        let v = yk + (yk1 - yk) * (slope * xi * xi + dk * quad) / denom;
        let deriv = slope * slope * (dk1 * xi * xi + slope * 2.0 * quad + dk * xi1m * xi1m)
            / (denom * denom);
        Ok((v, deriv.ln()))
    }

    /// Exact inverse (quadratic-root form) with the forward log-derivative
    /// at the recovered point.
    pub fn inverse(&self, v: R) -> Result<(R, R), FlowError> {
        let (lo, hi) = (self.ys[0].val(), self.ys[self.ys.len() - 1].val());
        let vv = v.val();
        if vv < lo - 1e-9 || vv > hi + 1e-9 {
            return Err(FlowError::OutsideInterval { value: vv, lo, hi });
        }
        let k = Self::locate(&self.ys, vv);
        let (xk, xk1) = (self.xs[k], self.xs[k + 1]);
        let (yk, yk1) = (self.ys[k], self.ys[k + 1]);
        let (dk, dk1) = (self.ds[k], self.ds[k + 1]);
        let width = xk1 - xk;
        let dy = yk1 - yk;
        let slope = dy / width;
        let t = (v - yk).max(R::constant(0.0)).min(dy);
        let dsum = dk1 + dk - slope * 2.0;
        let a = dy * (slope - dk) + t * dsum;
        let b = dy * dk - t * dsum;
        let c = -(slope * t);
        // Stable quadratic root: ξ = 2c / (-b - sqrt(b² - 4ac)).
        let disc = (b * b - a * c * 4.0).max(R::constant(0.0)).sqrt();
        let xi = (c * 2.0) / (-b - disc);
        let xi = xi.max(R::constant(0.0)).min(R::constant(1.0));
        let u = xi * width + xk;

        let xi1m = R::constant(1.0) - xi;
        let quad = xi * xi1m;
        let denom = slope + dsum * quad;
        let deriv = slope * slope * (dk1 * xi * xi + slope * 2.0 * quad + dk * xi1m * xi1m)
            / (denom * denom);
        Ok((u, deriv.ln()))
    }
}

/// Stable softplus over any scalar.
fn softplus<R: Scalar>(x: R) -> R {
    if x.val() > 30.0 {
        x
    } else {
        (x.exp() + 1.0).ln()
    }
}

fn softplus_inverse(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

fn tanh_s<R: Scalar>(x: R) -> R {
    if x.val() >= 0.0 {
        let e = (-x * 2.0).exp();
        (R::constant(1.0) - e) / (e + 1.0)
    } else {
        let e = (x * 2.0).exp();
        (e - 1.0) / (e + 1.0)
    }
}

/// Map raw per-coordinate parameters to constrained spline knots on [0, b]:
/// softmax widths/heights (with a minimal bin fraction) and softplus-floored
/// derivatives; circular mode shares the boundary derivative.
fn constrain<R: Scalar>(raw: &[R], k_bins: usize, mode: BoundaryMode, b: f64) -> RqSpline<R> {
    let widths = &raw[..k_bins];
    let heights = &raw[k_bins..2 * k_bins];
    let derivs = &raw[2 * k_bins..];

    let knots = |vals: &[R]| -> Vec<R> {
        // softmax with max-value shift, then cumulative sum scaled to b.
        let m = vals.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(v.val()));
        let exps: Vec<R> = vals.iter().map(|&v| (v - m).exp()).collect();
        let mut total = exps[0];
        for &e in &exps[1..] {
            total = total + e;
        }
        let scale = 1.0 - MIN_BIN_FRACTION * k_bins as f64;
        let mut out = Vec::with_capacity(k_bins + 1);
        let mut acc = R::constant(0.0);
        out.push(acc);
        for &e in &exps {
            let frac = e / total * scale + MIN_BIN_FRACTION;
            acc = acc + frac * b;
            out.push(acc);
        }
        // Pin the endpoint exactly.
        out[k_bins] = R::constant(b);
        out
    };

    let xs = knots(widths);
    let ys = knots(heights);
    let mut ds: Vec<R> = derivs.iter().map(|&v| softplus(v) + DERIVATIVE_FLOOR).collect();
    if mode == BoundaryMode::Circular {
        // K raw derivatives; the seam derivative is shared.
        ds.push(ds[0]);
    }
    debug_assert_eq!(ds.len(), k_bins + 1);
    RqSpline { xs, ys, ds }
}

/// Network width settings of the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Spline layers; the autoregressive direction flips between blocks.
    pub layers: usize,
    /// Spline blocks stacked inside each layer.
    pub blocks_per_layer: usize,
    /// Rational-quadratic bins per coordinate.
    pub bins: usize,
    /// Hidden width of the per-coordinate conditioner (0 disables
    /// conditioning and makes the flow purely elementwise).
    pub hidden: usize,
    /// Fourier harmonics used to embed conditioning angles.
    pub harmonics: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            layers: 5,
            blocks_per_layer: 3,
            bins: 8,
            hidden: 16,
            harmonics: 2,
        }
    }
}

/// Where one coordinate's parameters live in the flat vector.
#[derive(Debug, Clone)]
struct CoordSlot {
    /// Which angle coordinate this slot transforms.
    coord: usize,
    mode: BoundaryMode,
    /// Interval length of the coordinate.
    b: f64,
    base_off: usize,
    n_base: usize,
    cond: Option<CondSlot>,
}

#[derive(Debug, Clone)]
struct CondSlot {
    in_features: usize,
    hidden: usize,
    n_out: usize,
    w1_off: usize,
    b1_off: usize,
    w2_off: usize,
}

/// One spline block: coordinates in autoregressive processing order.
#[derive(Debug, Clone)]
struct Block {
    slots: Vec<CoordSlot>,
}

/// Serializable model state: dimensions, manifold, architecture, boundary
/// modes and the flat parameter array. Round-trips bit-exactly through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub dim: usize,
    pub field: RadiusField,
    pub architecture: Architecture,
    pub boundary_modes: Vec<BoundaryMode>,
    pub params: Vec<f64>,
}

/// The full injective flow: uniform-sphere base angles, stacked spline
/// blocks, radius field, spherical embedding.
#[derive(Debug, Clone)]
pub struct FlowModel {
    dim: usize,
    field: RadiusField,
    arch: Architecture,
    blocks: Vec<Block>,
    params: Vec<f64>,
}

impl FlowModel {
    /// Identity-initialized model; the conditioner input layer is randomly
    /// initialized (its output layer starts at zero, so the flow starts as
    /// the exact identity on angles).
    pub fn new<RNG: Rng + ?Sized>(
        dim: usize,
        field: RadiusField,
        arch: Architecture,
        rng: &mut RNG,
    ) -> Result<Self, FlowError> {
        if dim < 2 {
            return Err(FlowError::BadDimension(dim));
        }
        let n_angles = dim - 1;
        let domain = field.domain();
        let modes: Vec<BoundaryMode> = (0..n_angles)
            .map(|i| match domain {
                AngleDomain::Full if i + 1 == n_angles => BoundaryMode::Circular,
                _ => BoundaryMode::MonotoneBounded,
            })
            .collect();

        let feat_per_angle = 2 * arch.harmonics;
        let mut blocks = Vec::new();
        let mut offset = 0usize;
        for block_idx in 0..arch.layers * arch.blocks_per_layer {
            let order: Vec<usize> = if block_idx % 2 == 1 {
                (0..n_angles).rev().collect()
            } else {
                (0..n_angles).collect()
            };
            let mut slots = Vec::with_capacity(n_angles);
            for (pos, &coord) in order.iter().enumerate() {
                let mode = modes[coord];
                let b = domain.upper(coord, n_angles);
                let n_base = match mode {
                    BoundaryMode::MonotoneBounded => 3 * arch.bins + 1,
                    BoundaryMode::Circular => 3 * arch.bins,
                };
                let base_off = offset;
                offset += n_base;
                let cond = if pos > 0 && arch.hidden > 0 {
                    let in_features = pos * feat_per_angle;
                    let slot = CondSlot {
                        in_features,
                        hidden: arch.hidden,
                        n_out: n_base,
                        w1_off: offset,
                        b1_off: offset + arch.hidden * in_features,
                        w2_off: offset + arch.hidden * in_features + arch.hidden,
                    };
                    offset = slot.w2_off + slot.n_out * arch.hidden;
                    Some(slot)
                } else {
                    None
                };
                slots.push(CoordSlot { coord, mode, b, base_off, n_base, cond });
            }
            blocks.push(Block { slots });
        }

        let mut model = FlowModel {
            dim,
            field,
            arch,
            blocks,
            params: vec![0.0; offset],
        };
        model.reset_identity(rng);
        Ok(model)
    }

    fn reset_identity<RNG: Rng + ?Sized>(&mut self, rng: &mut RNG) {
        let deriv_raw = softplus_inverse(1.0 - DERIVATIVE_FLOOR);
        let k = self.arch.bins;
        let blocks = self.blocks.clone();
        for block in &blocks {
            for slot in &block.slots {
                // widths/heights zero -> equal bins; derivatives -> exactly 1.
                for p in &mut self.params[slot.base_off..slot.base_off + slot.n_base] {
                    *p = 0.0;
                }
                for p in &mut self.params[slot.base_off + 2 * k..slot.base_off + slot.n_base] {
                    *p = deriv_raw;
                }
                if let Some(cond) = &slot.cond {
                    let scale = 1.0 / (cond.in_features as f64).sqrt();
                    for i in 0..cond.hidden * cond.in_features {
                        self.params[cond.w1_off + i] =
                            rng.sample::<f64, _>(rand_distr::StandardNormal) * scale;
                    }
                    for i in 0..cond.hidden {
                        self.params[cond.b1_off + i] = 0.0;
                    }
                    for i in 0..cond.n_out * cond.hidden {
                        self.params[cond.w2_off + i] = 0.0;
                    }
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn field(&self) -> &RadiusField {
        &self.field
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn domain(&self) -> AngleDomain {
        self.field.domain()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Boundary mode of each angle coordinate.
    pub fn boundary_modes(&self) -> Vec<BoundaryMode> {
        let mut by_coord = vec![BoundaryMode::MonotoneBounded; self.dim - 1];
        for slot in &self.blocks[0].slots {
            by_coord[slot.coord] = slot.mode;
        }
        by_coord
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            dim: self.dim,
            field: self.field.clone(),
            architecture: self.arch,
            boundary_modes: self.boundary_modes(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, FlowError> {
        // Structure is rebuilt from (dim, field, arch); the stored parameter
        // vector must match it exactly. The scratch RNG only seeds values
        // that are immediately overwritten.
        use rand::SeedableRng;
        let mut scratch = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = FlowModel::new(ck.dim, ck.field.clone(), ck.architecture, &mut scratch)?;
        if ck.params.len() != model.params.len() {
            return Err(FlowError::ParamCount {
                expected: model.params.len(),
                got: ck.params.len(),
            });
        }
        model.params.copy_from_slice(&ck.params);
        Ok(model)
    }

    /// Spline parameters of one coordinate slot: base values plus the
    /// conditioner offset computed from earlier coordinates' inputs.
    fn slot_spline<R: Scalar>(&self, slot: &CoordSlot, params: &[R], features: &[R]) -> RqSpline<R> {
        let mut raw: Vec<R> = params[slot.base_off..slot.base_off + slot.n_base].to_vec();
        if let Some(cond) = &slot.cond {
            debug_assert_eq!(features.len(), cond.in_features);
            let mut hidden = Vec::with_capacity(cond.hidden);
            for h in 0..cond.hidden {
                let mut acc = params[cond.b1_off + h];
                let row = &params
                    [cond.w1_off + h * cond.in_features..cond.w1_off + (h + 1) * cond.in_features];
                for (w, f) in row.iter().zip(features) {
                    acc = acc + *w * *f;
                }
                hidden.push(tanh_s(acc));
            }
            for (o, r) in raw.iter_mut().enumerate() {
                let row =
                    &params[cond.w2_off + o * cond.hidden..cond.w2_off + (o + 1) * cond.hidden];
                let mut acc = *r;
                for (w, h) in row.iter().zip(&hidden) {
                    acc = acc + *w * *h;
                }
                *r = acc;
            }
        }
        constrain(&raw, self.arch.bins, slot.mode, slot.b)
    }

    /// Fourier features of the conditioning coordinates (inputs of the
    /// current block, in processing order).
    fn features_for<R: Scalar>(&self, block: &Block, pos: usize, input: &[R]) -> Vec<R> {
        let mut f = Vec::with_capacity(pos * 2 * self.arch.harmonics);
        for slot in &block.slots[..pos] {
            let u = input[slot.coord];
            // Bounded coordinates are stretched onto a half period so the
            // embedding stays injective; the circular one keeps its period.
            let phase = match slot.mode {
                BoundaryMode::Circular => u,
                BoundaryMode::MonotoneBounded => u * (std::f64::consts::PI / slot.b),
            };
            for m in 1..=self.arch.harmonics {
                let ph = phase * m as f64;
                f.push(ph.sin());
                f.push(ph.cos());
            }
        }
        f
    }

    /// Apply every spline block to base angles `z`, accumulating the exact
    /// log-determinant (sum of per-coordinate log-derivatives).
    pub fn transform_angles_parts<R: Scalar>(
        &self,
        params: &[R],
        z: &[R],
    ) -> Result<(Vec<R>, R), FlowError> {
        let mut u = z.to_vec();
        let mut log_det = R::constant(0.0);
        for block in &self.blocks {
            let input = u.clone();
            for (pos, slot) in block.slots.iter().enumerate() {
                let features = self.features_for(block, pos, &input);
                let spline = self.slot_spline(slot, params, &features);
                let (v, ld) = spline.forward(input[slot.coord])?;
                u[slot.coord] = v;
                log_det = log_det + ld;
            }
        }
        Ok((u, log_det))
    }

    /// T_θ on a validated angle point; output is re-validated (ε-clamped).
    pub fn transform_angles(&self, z: &AngleVector) -> Result<(AngleVector, f64), FlowError> {
        self.check_domain(z)?;
        let (theta, log_det) = self.transform_angles_parts(self.params.as_slice(), z.theta())?;
        Ok((AngleVector::new(theta, self.domain())?, log_det))
    }

    /// Invert T_θ, returning the base angles and the log-determinant of the
    /// forward map at the recovered point.
    pub fn inverse_angles(&self, theta: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        if theta.len() != self.dim - 1 {
            return Err(FlowError::AngleCount { expected: self.dim - 1, got: theta.len() });
        }
        let mut v = theta.to_vec();
        let mut log_det = 0.0;
        for block in self.blocks.iter().rev() {
            // Earlier coordinates must be recovered first: the conditioner
            // reads block inputs.
            let mut input = v.clone();
            for (pos, slot) in block.slots.iter().enumerate() {
                let features = self.features_for(block, pos, &input);
                let spline = self.slot_spline(slot, self.params.as_slice(), &features);
                let (u, ld) = spline.inverse(v[slot.coord])?;
                input[slot.coord] = u;
                log_det += ld;
            }
            v = input;
        }
        Ok((v, log_det))
    }

    fn check_domain(&self, a: &AngleVector) -> Result<(), FlowError> {
        if a.domain() != self.domain() {
            return Err(FlowError::DomainMismatch { expected: self.domain(), got: a.domain() });
        }
        if a.dim() != self.dim {
            return Err(FlowError::AngleCount { expected: self.dim - 1, got: a.dim() - 1 });
        }
        Ok(())
    }

    /// Draw `n` samples with their exact log-density (in ambient Cartesian
    /// coordinates): log q(x) = log p_z(z) − log|det J_T|.
    pub fn sample_and_logprob<RNG: Rng + ?Sized>(
        &self,
        n: usize,
        rng: &mut RNG,
    ) -> Result<Vec<(CartesianPoint, f64)>, FlowError> {
        let mut out = Vec::with_capacity(n);
        for z in sample_uniform_angles_in(self.domain(), self.dim, n, rng) {
            let log_pz = angle_log_density_parts(z.theta(), self.domain());
            let (theta, log_det_t_theta) = self.transform_angles(&z)?;
            let det = crate::jacdet::fast_log_det(&theta, &self.field, log_det_t_theta)?;
            let r = self.field.radius(theta.theta());
            let x = CartesianPoint::new(to_cartesian_parts(theta.theta(), r))?;
            out.push((x, log_pz - det.log_abs));
        }
        Ok(out)
    }

    /// Exact log-density at a given on-manifold point: invert the chart,
    /// strip the radius, invert the splines and reuse the sampling formula.
    pub fn logprob_at(&self, x: &CartesianPoint) -> Result<f64, FlowError> {
        let residual = self.field.constraint_residual(&x.x);
        if !(residual <= ON_MANIFOLD_TOL) {
            return Err(FlowError::OffManifold { residual });
        }
        let sp = to_spherical_in(x, self.domain())?;
        let theta = sp.angles;
        let (z, log_det_t_theta) = self.inverse_angles(theta.theta())?;
        let log_pz = angle_log_density_parts(z.as_slice(), self.domain());
        let det = crate::jacdet::fast_log_det(&theta, &self.field, log_det_t_theta)?;
        Ok(log_pz - det.log_abs)
    }

    /// Forward pass of one base draw on an AD tape: parameters arrive as
    /// tape leaves, the base draw is a constant, and everything downstream
    /// (angles, Cartesian point, all determinant factors) is recorded so a
    /// reverse sweep yields pathwise parameter gradients.
    pub fn forward_taped<'t>(
        &self,
        param_vars: &[Var<'t>],
        z: &AngleVector,
    ) -> Result<TapedSample<'t>, FlowError> {
        self.check_domain(z)?;
        let zc: Vec<Var<'t>> = z.theta().iter().map(|&v| Var::constant(v)).collect();
        let (theta, log_det_t_theta) = self.transform_angles_parts(param_vars, &zc)?;
        let det = fast_log_det_parts(&theta, &self.field, log_det_t_theta)?;
        let r = self.field.radius(theta.as_slice());
        let x = to_cartesian_parts(theta.as_slice(), r);
        let log_pz = angle_log_density_parts(z.theta(), self.domain());
        let log_q = Var::constant(log_pz) - det.log_abs;
        Ok(TapedSample { theta, x, det, log_pz, log_q })
    }
}

/// One taped flow sample with every factor the training losses pick from.
pub struct TapedSample<'t> {
    /// Transformed angles θ = T_θ(z).
    pub theta: Vec<Var<'t>>,
    /// Cartesian embedding of the sample.
    pub x: Vec<Var<'t>>,
    /// The determinant factors at θ (T_θ part included).
    pub det: JacDetResult<Var<'t>>,
    /// Base angle log-density (constant w.r.t. parameters).
    pub log_pz: f64,
    /// Full exact log q(x).
    pub log_q: Var<'t>,
}

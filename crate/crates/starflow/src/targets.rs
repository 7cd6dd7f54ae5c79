//! Unnormalized target log-densities for variational inference.
//!
//! Each target evaluates log p̃(x) on ambient Cartesian points, generically
//! over [`Scalar`] so the reverse-KL loss can backpropagate through it, plus
//! a taped Cartesian gradient for tests and samplers. Normalizing constants
//! are deliberately never computed — reverse KL does not need them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spherical::angles_from_cartesian;
use crate::tape::{Scalar, Tape};

/// Floor inside simplex logarithms; posterior kernels with α < 1 diverge at
/// the boundary and the flow's ε-clamped angles never reach exact zeros.
const SIMPLEX_LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("mean direction must be a unit vector, got norm {0}")]
    NonUnitMean(f64),
    #[error("mixture must have at least one component")]
    EmptyMixture,
    #[error("mixture weights must be positive and sum to 1, got sum {0}")]
    BadWeights(f64),
    #[error("sigma must be strictly positive, got {0}")]
    BadSigma(f64),
    #[error("Dirichlet concentration must be strictly positive, got alpha[{index}] = {value}")]
    BadAlpha { index: usize, value: f64 },
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("target is defined for dimension {expected}, got {got}")]
    WrongDim { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfComponent {
    pub mu: Vec<f64>,
    pub kappa: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PortfolioPrior {
    Uniform,
    Dirichlet(Vec<f64>),
}

/// An unnormalized log-density on the ambient space, with enough structure
/// to describe itself in experiment manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TargetDensity {
    /// log p̃ ≡ 0: the uniform distribution on whatever manifold the flow is
    /// defined over.
    Uniform,
    /// von Mises-Fisher, log p̃(x) = κ ⟨μ, x⟩ on the unit sphere.
    Vmf { mu: Vec<f64>, kappa: f64 },
    /// log Σ_i w_i exp(κ_i ⟨μ_i, x⟩) via log-sum-exp.
    MixtureVmf { components: Vec<VmfComponent> },
    /// log p̃ = sin(f θ₁) sin(f θ₂) as a function of the angles of x (d = 3).
    Sinusoidal { frequency: f64 },
    /// Gaussian regression likelihood: −‖y − Xβ‖² / (2σ²).
    GaussianRegression {
        /// Row-major n×d design matrix.
        design: Vec<f64>,
        n_rows: usize,
        n_cols: usize,
        y: Vec<f64>,
        sigma: f64,
    },
    /// Dirichlet-multinomial posterior kernel Σ (c_i + α_i − 1) log π_i.
    DirichletMultinomial { alpha: Vec<f64>, counts: Vec<u64> },
    /// Index-replication posterior: −‖ρ − Rπ‖²/(2σ²) plus a prior kernel.
    PortfolioPosterior {
        /// Row-major T×n asset return matrix.
        returns: Vec<f64>,
        n_steps: usize,
        n_assets: usize,
        index: Vec<f64>,
        sigma: f64,
        prior: PortfolioPrior,
    },
}

impl TargetDensity {
    pub fn uniform() -> Self {
        TargetDensity::Uniform
    }

    pub fn vmf(mu: Vec<f64>, kappa: f64) -> Result<Self, TargetError> {
        let norm: f64 = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(TargetError::NonUnitMean(norm));
        }
        Ok(TargetDensity::Vmf { mu, kappa })
    }

    pub fn mixture_vmf(components: Vec<VmfComponent>) -> Result<Self, TargetError> {
        if components.is_empty() {
            return Err(TargetError::EmptyMixture);
        }
        let sum: f64 = components.iter().map(|c| c.weight).sum();
        if components.iter().any(|c| c.weight <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(TargetError::BadWeights(sum));
        }
        let d = components[0].mu.len();
        for c in &components {
            if c.mu.len() != d {
                return Err(TargetError::ShapeMismatch {
                    context: "mixture means must share a dimension".into(),
                });
            }
            let norm: f64 = c.mu.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-10 {
                return Err(TargetError::NonUnitMean(norm));
            }
        }
        Ok(TargetDensity::MixtureVmf { components })
    }

    /// Equal-weight mixture of `m` vMF components whose means sweep a
    /// spherical spiral: colatitude 0.1π → 0.9π, longitude wrapping twice.
    pub fn spiral_mixture(m: usize, kappa: f64) -> Result<Self, TargetError> {
        let components = spiral_mode_angles(m)
            .into_iter()
            .map(|[t1, t2]| VmfComponent {
                mu: crate::spherical::to_cartesian_parts([t1, t2].as_slice(), 1.0),
                kappa,
                weight: 1.0 / m as f64,
            })
            .collect();
        TargetDensity::mixture_vmf(components)
    }

    pub fn sinusoidal(frequency: f64) -> Self {
        TargetDensity::Sinusoidal { frequency }
    }

    pub fn gaussian_regression(
        design_rows: &[Vec<f64>],
        y: Vec<f64>,
        sigma: f64,
    ) -> Result<Self, TargetError> {
        if sigma <= 0.0 {
            return Err(TargetError::BadSigma(sigma));
        }
        let n_rows = design_rows.len();
        if n_rows == 0 || n_rows != y.len() {
            return Err(TargetError::ShapeMismatch {
                context: format!("design has {n_rows} rows, y has {}", y.len()),
            });
        }
        let n_cols = design_rows[0].len();
        let mut design = Vec::with_capacity(n_rows * n_cols);
        for row in design_rows {
            if row.len() != n_cols {
                return Err(TargetError::ShapeMismatch {
                    context: "ragged design matrix".into(),
                });
            }
            design.extend_from_slice(row);
        }
        Ok(TargetDensity::GaussianRegression { design, n_rows, n_cols, y, sigma })
    }

    pub fn dirichlet_multinomial(alpha: Vec<f64>, counts: Vec<u64>) -> Result<Self, TargetError> {
        if alpha.len() != counts.len() {
            return Err(TargetError::ShapeMismatch {
                context: format!("|alpha| = {}, |counts| = {}", alpha.len(), counts.len()),
            });
        }
        if let Some((i, &a)) = alpha.iter().enumerate().find(|(_, &a)| a <= 0.0) {
            return Err(TargetError::BadAlpha { index: i, value: a });
        }
        Ok(TargetDensity::DirichletMultinomial { alpha, counts })
    }

    pub fn portfolio_posterior(
        return_rows: &[Vec<f64>],
        index: Vec<f64>,
        sigma: f64,
        prior: PortfolioPrior,
    ) -> Result<Self, TargetError> {
        if sigma <= 0.0 {
            return Err(TargetError::BadSigma(sigma));
        }
        let n_steps = return_rows.len();
        if n_steps == 0 || n_steps != index.len() {
            return Err(TargetError::ShapeMismatch {
                context: format!("{n_steps} return rows vs {} index entries", index.len()),
            });
        }
        let n_assets = return_rows[0].len();
        let mut returns = Vec::with_capacity(n_steps * n_assets);
        for row in return_rows {
            if row.len() != n_assets {
                return Err(TargetError::ShapeMismatch { context: "ragged return matrix".into() });
            }
            returns.extend_from_slice(row);
        }
        if let PortfolioPrior::Dirichlet(alpha) = &prior {
            if alpha.len() != n_assets {
                return Err(TargetError::ShapeMismatch {
                    context: format!("{} prior concentrations vs {n_assets} assets", alpha.len()),
                });
            }
            if let Some((i, &a)) = alpha.iter().enumerate().find(|(_, &a)| a <= 0.0) {
                return Err(TargetError::BadAlpha { index: i, value: a });
            }
        }
        Ok(TargetDensity::PortfolioPosterior { returns, n_steps, n_assets, index, sigma, prior })
    }

    /// The ambient dimension this target expects, when it pins one down.
    pub fn expected_dim(&self) -> Option<usize> {
        match self {
            TargetDensity::Uniform => None,
            TargetDensity::Vmf { mu, .. } => Some(mu.len()),
            TargetDensity::MixtureVmf { components } => Some(components[0].mu.len()),
            TargetDensity::Sinusoidal { .. } => Some(3),
            TargetDensity::GaussianRegression { n_cols, .. } => Some(*n_cols),
            TargetDensity::DirichletMultinomial { alpha, .. } => Some(alpha.len()),
            TargetDensity::PortfolioPosterior { n_assets, .. } => Some(*n_assets),
        }
    }

    pub fn check_dim(&self, d: usize) -> Result<(), TargetError> {
        match self.expected_dim() {
            Some(expected) if expected != d => Err(TargetError::WrongDim { expected, got: d }),
            _ => Ok(()),
        }
    }

    /// Unnormalized log-density, generic over the scalar type so the whole
    /// expression can live on an AD tape. Dimensions are assumed validated.
    pub fn log_density_parts<R: Scalar>(&self, x: &[R]) -> R {
        match self {
            TargetDensity::Uniform => R::constant(0.0),
            TargetDensity::Vmf { mu, kappa } => dot_const(x, mu) * *kappa,
            TargetDensity::MixtureVmf { components } => {
                let terms: Vec<R> = components
                    .iter()
                    .map(|c| dot_const(x, &c.mu) * c.kappa + c.weight.ln())
                    .collect();
                log_sum_exp(&terms)
            }
            TargetDensity::Sinusoidal { frequency } => {
                let (theta, _) = angles_from_cartesian(x);
                (theta[0] * *frequency).sin() * (theta[1] * *frequency).sin()
            }
            TargetDensity::GaussianRegression { design, n_rows, n_cols, y, sigma } => {
                let mut sq = R::constant(0.0);
                for i in 0..*n_rows {
                    let row = &design[i * n_cols..(i + 1) * n_cols];
                    let resid = R::constant(y[i]) - dot_const(x, row);
                    sq = sq + resid * resid;
                }
                -sq / (2.0 * sigma * sigma)
            }
            TargetDensity::DirichletMultinomial { alpha, counts } => {
                let mut acc = R::constant(0.0);
                for ((&xi, &a), &c) in x.iter().zip(alpha).zip(counts) {
                    let coeff = c as f64 + a - 1.0;
                    if coeff != 0.0 {
                        acc = acc + floored_ln(xi) * coeff;
                    }
                }
                acc
            }
            TargetDensity::PortfolioPosterior { returns, n_steps, n_assets, index, sigma, prior } => {
                let mut sq = R::constant(0.0);
                for t in 0..*n_steps {
                    let row = &returns[t * n_assets..(t + 1) * n_assets];
                    let resid = R::constant(index[t]) - dot_const(x, row);
                    sq = sq + resid * resid;
                }
                let mut acc = -sq / (2.0 * sigma * sigma);
                if let PortfolioPrior::Dirichlet(alpha) = prior {
                    for (&xi, &a) in x.iter().zip(alpha) {
                        if a != 1.0 {
                            acc = acc + floored_ln(xi) * (a - 1.0);
                        }
                    }
                }
                acc
            }
        }
    }

    /// Checked f64 evaluation.
    pub fn log_density(&self, x: &[f64]) -> Result<f64, TargetError> {
        self.check_dim(x.len())?;
        Ok(self.log_density_parts(x))
    }

    /// ∇_x log p̃(x) through the AD tape.
    pub fn grad_log_density(&self, x: &[f64]) -> Result<Vec<f64>, TargetError> {
        self.check_dim(x.len())?;
        let tape = Tape::new();
        let vars: Vec<_> = x.iter().map(|&v| tape.leaf(v)).collect();
        let out = self.log_density_parts(vars.as_slice());
        let grads = tape.backward(out).expect("output is on this tape");
        Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
    }
}

/// Angle locations (colatitude, longitude) of the spiral mixture means.
pub fn spiral_mode_angles(m: usize) -> Vec<[f64; 2]> {
    use std::f64::consts::{PI, TAU};
    (0..m)
        .map(|i| {
            let frac = if m > 1 { i as f64 / (m - 1) as f64 } else { 0.5 };
            let t1 = 0.1 * PI + 0.8 * PI * frac;
            let t2 = (2.0 * TAU * i as f64 / m as f64) % TAU;
            [t1, t2]
        })
        .collect()
}

fn dot_const<R: Scalar>(x: &[R], w: &[f64]) -> R {
    debug_assert_eq!(x.len(), w.len());
    let mut acc = x[0] * w[0];
    for (xi, wi) in x[1..].iter().zip(&w[1..]) {
        acc = acc + *xi * *wi;
    }
    acc
}

fn log_sum_exp<R: Scalar>(terms: &[R]) -> R {
    let m = terms.iter().fold(f64::NEG_INFINITY, |acc, t| acc.max(t.val()));
    let mut acc = (terms[0] - m).exp();
    for &t in &terms[1..] {
        acc = acc + (t - m).exp();
    }
    acc.ln() + m
}

fn floored_ln<R: Scalar>(x: R) -> R {
    x.max(R::constant(SIMPLEX_LOG_FLOOR)).ln()
}

//! Measure functionals, their empirical projections, and Lions derivatives
//! evaluated at the atoms of an empirical measure.
//!
//! For `u : P₂(R^d) → R` the empirical projection is
//! `u^N(y¹, …, y^N) = u((1/N) Σ δ_{y^l})`, and
//! `N ∂_{y^j} u^N(y) = ∂_μ u(μ̄^N, y^j)`. The finite-difference route below
//! differentiates `u^N` directly, so it is independent of any analytic
//! derivative a functional supplies.

use crate::error::{invalid, Error, Result};
use crate::measure::EmpiricalMeasure;

/// Relative step used by the default finite-difference rule.
pub const DEFAULT_RELATIVE_STEP: f64 = 1e-4;

/// Default central-difference step for a coordinate with value `y`.
pub fn default_step(y: f64) -> f64 {
    DEFAULT_RELATIVE_STEP * (1.0 + y.abs())
}

pub trait MeasureFunctional: Send + Sync {
    fn eval(&self, mu: &EmpiricalMeasure) -> f64;

    /// `∂_μ u(μ, v)`, if known in closed form.
    fn analytic_lions(&self, _mu: &EmpiricalMeasure, _v: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// Built-in functionals with closed-form Lions derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Functional {
    /// `∫ |y|² μ(dy)`; `∂_μ u(μ, v) = 2v`.
    SecondMoment,
    /// `|m₁(μ)|²`; `∂_μ u(μ, v) = 2 m₁(μ)`.
    SquaredMean,
    /// `exp(Σ_k m₁(μ)_k)`; `∂_μ u(μ, v)_k = exp(Σ_k m₁(μ)_k)`.
    ExpMean,
    Constant(f64),
}

impl Functional {
    pub const GALLERY: [Functional; 3] = [
        Functional::SecondMoment,
        Functional::SquaredMean,
        Functional::ExpMean,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Functional::SecondMoment => "second_moment",
            Functional::SquaredMean => "squared_mean",
            Functional::ExpMean => "exp_mean",
            Functional::Constant(_) => "constant",
        }
    }
}

impl MeasureFunctional for Functional {
    fn eval(&self, mu: &EmpiricalMeasure) -> f64 {
        match *self {
            Functional::SecondMoment => mu.second_moment(),
            Functional::SquaredMean => mu.mean().iter().map(|m| m * m).sum(),
            Functional::ExpMean => mu.mean().iter().sum::<f64>().exp(),
            Functional::Constant(c) => c,
        }
    }

    fn analytic_lions(&self, mu: &EmpiricalMeasure, v: &[f64]) -> Option<Vec<f64>> {
        Some(match *self {
            Functional::SecondMoment => v.iter().map(|x| 2.0 * x).collect(),
            Functional::SquaredMean => mu.mean().iter().map(|m| 2.0 * m).collect(),
            Functional::ExpMean => vec![mu.mean().iter().sum::<f64>().exp(); mu.dim()],
            Functional::Constant(_) => vec![0.0; mu.dim()],
        })
    }
}

/// Closure-backed functional.
pub struct FnFunctional<F, G = fn(&EmpiricalMeasure, &[f64]) -> Vec<f64>> {
    eval: F,
    lions: Option<G>,
}

impl<F> FnFunctional<F>
where
    F: Fn(&EmpiricalMeasure) -> f64 + Send + Sync,
{
    pub fn new(eval: F) -> Self {
        Self { eval, lions: None }
    }
}

impl<F, G> FnFunctional<F, G>
where
    F: Fn(&EmpiricalMeasure) -> f64 + Send + Sync,
    G: Fn(&EmpiricalMeasure, &[f64]) -> Vec<f64> + Send + Sync,
{
    pub fn with_lions(eval: F, lions: G) -> Self {
        Self {
            eval,
            lions: Some(lions),
        }
    }
}

impl<F, G> MeasureFunctional for FnFunctional<F, G>
where
    F: Fn(&EmpiricalMeasure) -> f64 + Send + Sync,
    G: Fn(&EmpiricalMeasure, &[f64]) -> Vec<f64> + Send + Sync,
{
    fn eval(&self, mu: &EmpiricalMeasure) -> f64 {
        (self.eval)(mu)
    }

    fn analytic_lions(&self, mu: &EmpiricalMeasure, v: &[f64]) -> Option<Vec<f64>> {
        self.lions.as_ref().map(|g| g(mu, v))
    }
}

/// `u^N(y¹, …, y^N)`: `u` applied to the equal-weight measure of `points`.
pub fn empirical_projection(
    u: &dyn MeasureFunctional,
    points: &[f64],
    dim: usize,
) -> Result<f64> {
    Ok(u.eval(&EmpiricalMeasure::from_flat(points.to_vec(), dim)?))
}

/// `N ∂_{y^j} u^N` by central differences with step `h` in every coordinate.
pub fn fd_lions_derivative(
    u: &dyn MeasureFunctional,
    mu: &EmpiricalMeasure,
    j: usize,
    h: f64,
) -> Result<Vec<f64>> {
    if h <= 0.0 || !h.is_finite() {
        return Err(invalid("h", format!("step must be positive and finite, got {h}")));
    }
    let steps = vec![h; mu.dim()];
    fd_lions_derivative_steps(u, mu, j, &steps)
}

/// Same as [`fd_lions_derivative`] with the default per-coordinate step
/// `1e-4 (1 + |y^j_k|)`.
pub fn fd_lions_derivative_default(
    u: &dyn MeasureFunctional,
    mu: &EmpiricalMeasure,
    j: usize,
) -> Result<Vec<f64>> {
    let steps: Vec<f64> = mu.point(j).iter().map(|&y| default_step(y)).collect();
    fd_lions_derivative_steps(u, mu, j, &steps)
}

fn fd_lions_derivative_steps(
    u: &dyn MeasureFunctional,
    mu: &EmpiricalMeasure,
    j: usize,
    steps: &[f64],
) -> Result<Vec<f64>> {
    if j >= mu.len() {
        return Err(invalid("j", format!("particle index {j} out of range 0..{}", mu.len())));
    }
    let n = mu.len() as f64;
    steps
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            let up = u.eval(&mu.perturbed(j, k, h)?);
            let down = u.eval(&mu.perturbed(j, k, -h)?);
            Ok(n * (up - down) / (2.0 * h))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionCheck {
    pub max_deviation: f64,
    /// Atom at which the worst deviation occurred.
    pub worst_atom: usize,
    pub passed: bool,
}

/// Compare the finite-difference Lions derivative with the analytic one at
/// every atom of the measure built from `points`.
pub fn check_projection_identity(
    u: &dyn MeasureFunctional,
    points: &[f64],
    dim: usize,
    h: f64,
    tol: f64,
) -> Result<ProjectionCheck> {
    let mu = EmpiricalMeasure::from_flat(points.to_vec(), dim)?;
    let mut max_deviation = 0.0f64;
    let mut worst_atom = 0;
    for j in 0..mu.len() {
        let analytic = u
            .analytic_lions(&mu, mu.point(j))
            .ok_or(Error::MissingDerivative {
                what: "an analytic Lions derivative",
            })?;
        let fd = fd_lions_derivative(u, &mu, j, h)?;
        let dev = analytic
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if dev > max_deviation {
            max_deviation = dev;
            worst_atom = j;
        }
    }
    Ok(ProjectionCheck {
        max_deviation,
        worst_atom,
        passed: max_deviation <= tol,
    })
}

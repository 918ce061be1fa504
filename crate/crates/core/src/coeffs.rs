//! Coefficient sets `(b, σ⁰, σ¹)` of a conditional McKean-Vlasov SDE
//! `dY = b(t,Y,μ) dt + σ⁰(t,Y,μ) dW⁰ + σ¹(t,Y,μ) dW¹`, and the built-in
//! model gallery.
//!
//! Buffer layouts used throughout the crate, for state dimension `d` and
//! noise dimension `m`:
//! - drift: `d` entries;
//! - diffusion: `d × m` row-major, entry `(i, j)` at `i * m + j`;
//! - derivative tensors: entry `(i, j, k)` at `(i * m + j) * d + k`, which is
//!   `(∂_μ σ_ij)_k` or `∂_{y_k} σ_ij`.

use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::lions::default_step;
use crate::measure::EmpiricalMeasure;

pub trait Coefficients: Send + Sync {
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    /// `false` when every coefficient ignores the state argument `x`.
    fn depends_on_x(&self) -> bool;

    fn drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    fn sigma0(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    fn sigma1(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);

    /// Writes `(∂_μ σ⁰_ij)_k(t, x, μ, v)` and returns `true` if the model has a
    /// closed form for it.
    fn dmu_sigma0(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &EmpiricalMeasure,
        _v: &[f64],
        _out: &mut [f64],
    ) -> bool {
        false
    }

    /// Writes `∂_{y_k} σ⁰_ij(t, x, μ)` and returns `true` if available.
    fn dy_sigma0(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, _out: &mut [f64]) -> bool {
        false
    }

    fn dy_sigma1(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, _out: &mut [f64]) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Diffusion {
    Common,
    Idiosyncratic,
}

pub(crate) fn eval_sigma(
    cs: &dyn Coefficients,
    which: Diffusion,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    out: &mut [f64],
) {
    match which {
        Diffusion::Common => cs.sigma0(t, x, mu, out),
        Diffusion::Idiosyncratic => cs.sigma1(t, x, mu, out),
    }
}

/// Built-in one-dimensional models (d = m = 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Model {
    /// `b = β`, `σ⁰ = c m₁(μ) + a`, `σ¹ = s`.
    LinearMean { beta: f64, c: f64, a: f64, s: f64 },
    /// Measure- and state-independent `σ⁰ = σ̄⁰`, `σ¹ = σ̄¹`, `b = 0`.
    ConstDiff { sigma0: f64, sigma1: f64 },
    /// `σ⁰ = ∫y² dμ − m₁(μ)²`, `σ¹ = s`, `b = 0`.
    VarDiff { s: f64 },
    /// `b = β`, `σ⁰ = c m₁(μ) + γ x`, `σ¹ = s`.
    FullLinear { beta: f64, c: f64, gamma: f64, s: f64 },
}

impl Model {
    pub const NAMES: [&'static str; 4] = ["LinearMean", "ConstDiff", "VarDiff", "FullLinear"];

    pub fn name(&self) -> &'static str {
        match self {
            Model::LinearMean { .. } => "LinearMean",
            Model::ConstDiff { .. } => "ConstDiff",
            Model::VarDiff { .. } => "VarDiff",
            Model::FullLinear { .. } => "FullLinear",
        }
    }

    /// Parameter names accepted by [`Model::from_params`], with defaults.
    pub fn parameter_defaults(name: &str) -> Option<&'static [(&'static str, f64)]> {
        Some(match name {
            "LinearMean" => &[("beta", 0.1), ("c", 0.5), ("a", 0.0), ("s", 0.3)],
            "ConstDiff" => &[("sigma0", 0.5), ("sigma1", 0.3)],
            "VarDiff" => &[("s", 0.3)],
            "FullLinear" => &[("beta", 0.1), ("c", 0.5), ("gamma", 0.2), ("s", 0.3)],
            _ => return None,
        })
    }

    /// Build a gallery model from its name and a (possibly partial) parameter
    /// list. Missing parameters take the defaults of
    /// [`Model::parameter_defaults`].
    pub fn from_params(name: &str, params: &[(&str, f64)]) -> Result<Model> {
        let defaults = Self::parameter_defaults(name).ok_or_else(|| {
            invalid(
                "model.name",
                format!("unknown model `{name}`; available: {}", Self::NAMES.join(", ")),
            )
        })?;
        let mut values: Vec<f64> = defaults.iter().map(|&(_, v)| v).collect();
        for &(key, value) in params {
            let idx = defaults.iter().position(|&(k, _)| k == key).ok_or_else(|| {
                let known: Vec<&str> = defaults.iter().map(|&(k, _)| k).collect();
                invalid(
                    "model",
                    format!("unknown parameter `{key}` for {name}; expected one of {}", known.join(", ")),
                )
            })?;
            if !value.is_finite() {
                return Err(invalid("model", format!("parameter `{key}` must be finite")));
            }
            values[idx] = value;
        }
        Ok(match name {
            "LinearMean" => Model::LinearMean {
                beta: values[0],
                c: values[1],
                a: values[2],
                s: values[3],
            },
            "ConstDiff" => Model::ConstDiff {
                sigma0: values[0],
                sigma1: values[1],
            },
            "VarDiff" => Model::VarDiff { s: values[0] },
            _ => Model::FullLinear {
                beta: values[0],
                c: values[1],
                gamma: values[2],
                s: values[3],
            },
        })
    }

    pub fn parameters(&self) -> Vec<(&'static str, f64)> {
        match *self {
            Model::LinearMean { beta, c, a, s } => vec![("beta", beta), ("c", c), ("a", a), ("s", s)],
            Model::ConstDiff { sigma0, sigma1 } => vec![("sigma0", sigma0), ("sigma1", sigma1)],
            Model::VarDiff { s } => vec![("s", s)],
            Model::FullLinear { beta, c, gamma, s } => {
                vec![("beta", beta), ("c", c), ("gamma", gamma), ("s", s)]
            }
        }
    }

    /// Lipschitz constant of `μ ↦ σ⁰(t, x, μ)` in W₂, where one exists.
    pub fn sigma0_w2_lipschitz(&self) -> Option<f64> {
        match *self {
            Model::LinearMean { c, .. } | Model::FullLinear { c, .. } => Some(c.abs()),
            Model::ConstDiff { .. } => Some(0.0),
            Model::VarDiff { .. } => None,
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{{", self.name())?;
        for (i, (k, v)) in self.parameters().into_iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{k}={v}")?;
        }
        write!(f, "}}")
    }
}

impl Coefficients for Model {
    fn state_dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn depends_on_x(&self) -> bool {
        matches!(self, Model::FullLinear { .. })
    }

    fn drift(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = match *self {
            Model::LinearMean { beta, .. } | Model::FullLinear { beta, .. } => beta,
            Model::ConstDiff { .. } | Model::VarDiff { .. } => 0.0,
        };
    }

    fn sigma0(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = match *self {
            Model::LinearMean { c, a, .. } => c * mu.mean()[0] + a,
            Model::ConstDiff { sigma0, .. } => sigma0,
            Model::VarDiff { .. } => {
                let m = mu.mean()[0];
                mu.second_moment() - m * m
            }
            Model::FullLinear { c, gamma, .. } => c * mu.mean()[0] + gamma * x[0],
        };
    }

    fn sigma1(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = match *self {
            Model::LinearMean { s, .. } | Model::VarDiff { s } | Model::FullLinear { s, .. } => s,
            Model::ConstDiff { sigma1, .. } => sigma1,
        };
    }

    fn dmu_sigma0(&self, _t: f64, _x: &[f64], mu: &EmpiricalMeasure, v: &[f64], out: &mut [f64]) -> bool {
        out[0] = match *self {
            Model::LinearMean { c, .. } | Model::FullLinear { c, .. } => c,
            Model::ConstDiff { .. } => 0.0,
            Model::VarDiff { .. } => 2.0 * v[0] - 2.0 * mu.mean()[0],
        };
        true
    }

    fn dy_sigma0(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) -> bool {
        out[0] = match *self {
            Model::FullLinear { gamma, .. } => gamma,
            _ => 0.0,
        };
        true
    }

    fn dy_sigma1(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) -> bool {
        out[0] = 0.0;
        true
    }
}

/// Hides the analytic derivatives of the wrapped coefficients, forcing the
/// finite-difference routes.
#[derive(Debug, Clone)]
pub struct NumericDerivatives<C>(pub C);

impl<C: Coefficients> Coefficients for NumericDerivatives<C> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn noise_dim(&self) -> usize {
        self.0.noise_dim()
    }
    fn depends_on_x(&self) -> bool {
        self.0.depends_on_x()
    }
    fn drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        self.0.drift(t, x, mu, out)
    }
    fn sigma0(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        self.0.sigma0(t, x, mu, out)
    }
    fn sigma1(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        self.0.sigma1(t, x, mu, out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientValues {
    pub drift: Vec<f64>,
    pub sigma0: Vec<f64>,
    pub sigma1: Vec<f64>,
}

fn check_dims(cs: &dyn Coefficients, x: &[f64], mu: &EmpiricalMeasure) -> Result<()> {
    let d = cs.state_dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    if mu.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: mu.dim(),
        });
    }
    Ok(())
}

pub fn eval_coefficients(
    cs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
) -> Result<CoefficientValues> {
    check_dims(cs, x, mu)?;
    let (d, m) = (cs.state_dim(), cs.noise_dim());
    let mut vals = CoefficientValues {
        drift: vec![0.0; d],
        sigma0: vec![0.0; d * m],
        sigma1: vec![0.0; d * m],
    };
    cs.drift(t, x, mu, &mut vals.drift);
    cs.sigma0(t, x, mu, &mut vals.sigma0);
    cs.sigma1(t, x, mu, &mut vals.sigma1);
    Ok(vals)
}

/// Central-difference `(∂_μ σ⁰_ij)_k(t, x, μ, y^atom)`, i.e.
/// `N ∂_{y^atom_k} σ⁰_ij(t, x, μ̄^N)` with `x` held fixed.
pub fn fd_dmu_sigma0(
    cs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    atom: usize,
    out: &mut [f64],
) -> Result<()> {
    let (d, m) = (cs.state_dim(), cs.noise_dim());
    let n = mu.len() as f64;
    let mut up = vec![0.0; d * m];
    let mut down = vec![0.0; d * m];
    for k in 0..d {
        let h = default_step(mu.point(atom)[k]);
        cs.sigma0(t, x, &mu.perturbed(atom, k, h)?, &mut up);
        cs.sigma0(t, x, &mu.perturbed(atom, k, -h)?, &mut down);
        for ij in 0..d * m {
            out[ij * d + k] = n * (up[ij] - down[ij]) / (2.0 * h);
        }
    }
    Ok(())
}

/// Central-difference `∂_{y_k} σ_ij(t, x, μ)` with the measure held fixed.
pub fn fd_dy_sigma(
    cs: &dyn Coefficients,
    which: Diffusion,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    out: &mut [f64],
) {
    let (d, m) = (cs.state_dim(), cs.noise_dim());
    let mut up = vec![0.0; d * m];
    let mut down = vec![0.0; d * m];
    let mut xp = x.to_vec();
    for k in 0..d {
        let h = default_step(x[k]);
        xp[k] = x[k] + h;
        eval_sigma(cs, which, t, &xp, mu, &mut up);
        xp[k] = x[k] - h;
        eval_sigma(cs, which, t, &xp, mu, &mut down);
        xp[k] = x[k];
        for ij in 0..d * m {
            out[ij * d + k] = (up[ij] - down[ij]) / (2.0 * h);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeCheck {
    /// Worst `|analytic − FD|` of `∂_μ σ⁰` over entries and atoms.
    pub max_dev_measure: f64,
    /// Worst deviation of `∂_y σ⁰` and `∂_y σ¹` (0 for state-independent models).
    pub max_dev_spatial: f64,
    pub passed: bool,
}

impl DerivativeCheck {
    pub fn max_deviation(&self) -> f64 {
        self.max_dev_measure.max(self.max_dev_spatial)
    }
}

/// Validate the analytic derivatives of `cs` at `(t, x, μ)` against central
/// differences, entrywise and at every atom of `μ`.
pub fn fd_check_derivatives(
    cs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    tol: f64,
) -> Result<DerivativeCheck> {
    check_dims(cs, x, mu)?;
    let (d, m) = (cs.state_dim(), cs.noise_dim());
    let len = d * m * d;
    let mut analytic = vec![0.0; len];
    let mut numeric = vec![0.0; len];
    let max_dev = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    };

    let mut max_dev_measure = 0.0f64;
    for atom in 0..mu.len() {
        if !cs.dmu_sigma0(t, x, mu, mu.point(atom), &mut analytic) {
            return Err(Error::MissingDerivative { what: "∂_μσ⁰" });
        }
        fd_dmu_sigma0(cs, t, x, mu, atom, &mut numeric)?;
        max_dev_measure = max_dev_measure.max(max_dev(&analytic, &numeric));
    }

    let mut max_dev_spatial = 0.0f64;
    if cs.depends_on_x() {
        for which in [Diffusion::Common, Diffusion::Idiosyncratic] {
            let supplied = match which {
                Diffusion::Common => cs.dy_sigma0(t, x, mu, &mut analytic),
                Diffusion::Idiosyncratic => cs.dy_sigma1(t, x, mu, &mut analytic),
            };
            if !supplied {
                return Err(Error::MissingDerivative { what: "∂_yσ" });
            }
            fd_dy_sigma(cs, which, t, x, mu, &mut numeric);
            max_dev_spatial = max_dev_spatial.max(max_dev(&analytic, &numeric));
        }
    }

    Ok(DerivativeCheck {
        max_dev_measure,
        max_dev_spatial,
        passed: max_dev_measure.max(max_dev_spatial) <= tol,
    })
}

/// `true` if all three coefficients are bitwise identical across the probe
/// states `xs` at `(t, μ)`.
pub fn probe_x_independence(cs: &dyn Coefficients, t: f64, mu: &EmpiricalMeasure, xs: &[Vec<f64>]) -> bool {
    let mut reference: Option<CoefficientValues> = None;
    for x in xs {
        let Ok(vals) = eval_coefficients(cs, t, x, mu) else {
            return false;
        };
        match &reference {
            None => reference = Some(vals),
            Some(r) => {
                let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits());
                if !same(&r.drift, &vals.drift)
                    || !same(&r.sigma0, &vals.sigma0)
                    || !same(&r.sigma1, &vals.sigma1)
                {
                    return false;
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mu(xs: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_scalars(xs).unwrap()
    }

    #[test]
    fn evaluation_examples() {
        let lm = Model::LinearMean { beta: 0.0, c: 0.5, a: 0.0, s: 0.3 };
        let v = eval_coefficients(&lm, 0.0, &[17.0], &mu(&[1.0, 3.0])).unwrap();
        assert_eq!(v.sigma0, vec![1.0]);

        let cd = Model::ConstDiff { sigma0: 0.4, sigma1: 0.2 };
        let a = eval_coefficients(&cd, 0.3, &[0.0], &mu(&[1.0, 3.0])).unwrap();
        let b = eval_coefficients(&cd, 0.3, &[0.0], &mu(&[-5.0, 8.0, 2.0])).unwrap();
        assert_eq!(a, b);

        let fl = Model::FullLinear { beta: 0.1, c: 0.5, gamma: 0.2, s: 0.3 };
        let v = eval_coefficients(&fl, 0.0, &[1.0], &mu(&[1.0, 3.0])).unwrap();
        assert!((v.sigma0[0] - 1.2).abs() < 1e-15);

        assert!(matches!(
            eval_coefficients(&fl, 0.0, &[1.0, 2.0], &mu(&[1.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn derivative_checks() {
        let lm = Model::LinearMean { beta: 0.1, c: 0.5, a: 0.2, s: 0.3 };
        let r = fd_check_derivatives(&lm, 0.0, &[0.0], &mu(&[0.3, -1.0, 2.0]), 1e-5).unwrap();
        assert!(r.passed, "{r:?}");

        let vd = Model::VarDiff { s: 0.3 };
        let m = mu(&[0.0, 2.0]);
        let mut out = [0.0];
        assert!(vd.dmu_sigma0(0.0, &[0.0], &m, &[2.0], &mut out));
        assert_eq!(out[0], 2.0);
        let mut fd = [0.0];
        fd_dmu_sigma0(&vd, 0.0, &[0.0], &m, 1, &mut fd).unwrap();
        assert!((fd[0] - 2.0).abs() < 1e-5, "{fd:?}");
        assert!(fd_check_derivatives(&vd, 0.0, &[0.0], &m, 1e-5).unwrap().passed);

        let cd = Model::ConstDiff { sigma0: 0.4, sigma1: 0.2 };
        let r = fd_check_derivatives(&cd, 0.0, &[1.0], &m, 0.0).unwrap();
        assert_eq!(r.max_deviation(), 0.0);

        let fl = Model::FullLinear { beta: 0.1, c: 0.5, gamma: 0.2, s: 0.3 };
        assert!(fd_check_derivatives(&fl, 0.5, &[1.3], &mu(&[0.1, 0.7, -0.4]), 1e-6)
            .unwrap()
            .passed);

        assert!(matches!(
            fd_check_derivatives(&NumericDerivatives(lm), 0.0, &[0.0], &m, 1e-5),
            Err(Error::MissingDerivative { .. })
        ));
    }

    #[test]
    fn x_independence_probe() {
        let xs: Vec<Vec<f64>> = [-3.0, 0.0, 0.5, 10.0].iter().map(|&x| vec![x]).collect();
        let m = mu(&[0.2, 1.1]);
        for model in [
            Model::LinearMean { beta: 0.1, c: 0.5, a: 0.0, s: 0.3 },
            Model::ConstDiff { sigma0: 0.4, sigma1: 0.2 },
            Model::VarDiff { s: 0.3 },
        ] {
            assert!(!model.depends_on_x());
            assert!(probe_x_independence(&model, 0.0, &m, &xs), "{model}");
        }
        let fl = Model::FullLinear { beta: 0.1, c: 0.5, gamma: 0.2, s: 0.3 };
        assert!(fl.depends_on_x());
        assert!(!probe_x_independence(&fl, 0.0, &m, &xs));
    }

    #[test]
    fn gallery_construction() {
        let m = Model::from_params("LinearMean", &[("c", 0.7)]).unwrap();
        assert_eq!(m, Model::LinearMean { beta: 0.1, c: 0.7, a: 0.0, s: 0.3 });
        let err = Model::from_params("Foo", &[]).unwrap_err().to_string();
        for name in Model::NAMES {
            assert!(err.contains(name), "{err}");
        }
        assert!(Model::from_params("VarDiff", &[("c", 1.0)]).is_err());
        assert_eq!(m.to_string(), "LinearMean{beta=0.1, c=0.7, a=0, s=0.3}");
    }
}

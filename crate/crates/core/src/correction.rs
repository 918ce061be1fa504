//! The drift that separates the Itô and Stratonovich forms of a conditional
//! McKean-Vlasov SDE.
//!
//! For component `i` the Stratonovich drift is `b_i − C_i` with
//! `C = measure + spatial0 + spatial1`:
//!
//! ```text
//! measure_i  = ½ Σ_{k,j} E¹[(∂_μ σ⁰_ij)_k(t, x, μ, Y¹) σ⁰_kj(t, Y¹, μ)]
//! spatial0_i = ½ Σ_{k,j} ∂_{y_k} σ⁰_ij(t, x, μ) σ⁰_kj(t, x, μ)
//! spatial1_i = ½ Σ_{k,j} ∂_{y_k} σ¹_ij(t, x, μ) σ¹_kj(t, x, μ)
//! ```
//!
//! `E¹` is the average over the atoms of the empirical measure. The
//! [`CorrectionVariant::Displayed`] variant evaluates the σ⁰ factor at `x`
//! outside the expectation instead.

use crate::coeffs::{eval_sigma, fd_dmu_sigma0, fd_dy_sigma, Coefficients, Diffusion};
use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::numeric::pairwise_sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorrectionVariant {
    /// σ⁰ evaluated at the copy `Y¹` inside the expectation.
    #[default]
    Inside,
    /// σ⁰ evaluated at the particle's own state, outside the expectation.
    Displayed,
}

impl CorrectionVariant {
    pub fn name(&self) -> &'static str {
        match self {
            CorrectionVariant::Inside => "inside",
            CorrectionVariant::Displayed => "displayed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrectionOptions {
    pub variant: CorrectionVariant,
    /// Use central differences when the model has no closed-form derivative.
    pub fd_fallback: bool,
}

impl Default for CorrectionOptions {
    fn default() -> Self {
        Self {
            variant: CorrectionVariant::Inside,
            fd_fallback: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionValue {
    pub measure_part: Vec<f64>,
    pub spatial0_part: Vec<f64>,
    pub spatial1_part: Vec<f64>,
}

impl CorrectionValue {
    pub fn total(&self) -> Vec<f64> {
        self.measure_part
            .iter()
            .zip(&self.spatial0_part)
            .zip(&self.spatial1_part)
            .map(|((a, b), c)| a + b + c)
            .collect()
    }
}

fn dmu_at(
    cs: &dyn Coefficients,
    opts: CorrectionOptions,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    atom: usize,
    out: &mut [f64],
) -> Result<()> {
    if cs.dmu_sigma0(t, x, mu, mu.point(atom), out) {
        Ok(())
    } else if opts.fd_fallback {
        fd_dmu_sigma0(cs, t, x, mu, atom, out)
    } else {
        Err(Error::MissingDerivative { what: "∂_μσ⁰" })
    }
}

/// Per-step state for evaluating the correction at many particles against
/// one frozen measure.
pub struct StepCorrection<'a> {
    cs: &'a dyn Coefficients,
    mu: &'a EmpiricalMeasure,
    t: f64,
    opts: CorrectionOptions,
    /// σ⁰ at every atom, `N × (d·m)`; only for the inside variant.
    atom_sigma0: Vec<f64>,
    /// Measure part shared by all particles when nothing depends on `x`.
    shared_measure: Option<Vec<f64>>,
}

impl<'a> StepCorrection<'a> {
    pub fn prepare(
        cs: &'a dyn Coefficients,
        t: f64,
        mu: &'a EmpiricalMeasure,
        opts: CorrectionOptions,
    ) -> Result<Self> {
        let (d, m) = (cs.state_dim(), cs.noise_dim());
        if mu.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: mu.dim(),
            });
        }
        let mut atom_sigma0 = Vec::new();
        if opts.variant == CorrectionVariant::Inside || !cs.depends_on_x() {
            atom_sigma0 = vec![0.0; mu.len() * d * m];
            for (l, slot) in atom_sigma0.chunks_exact_mut(d * m).enumerate() {
                cs.sigma0(t, mu.point(l), mu, slot);
            }
        }
        let mut step = Self {
            cs,
            mu,
            t,
            opts,
            atom_sigma0,
            shared_measure: None,
        };
        if !cs.depends_on_x() {
            let mut shared = vec![0.0; d];
            step.compute_measure(mu.point(0), &mut shared)?;
            step.shared_measure = Some(shared);
        }
        Ok(step)
    }

    fn compute_measure(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let cs = self.cs;
        let (d, m) = (cs.state_dim(), cs.noise_dim());
        let n = self.mu.len();
        let mut deriv = vec![0.0; d * m * d];
        let mut own_sigma = vec![0.0; d * m];
        let displayed = self.opts.variant == CorrectionVariant::Displayed;
        if displayed {
            cs.sigma0(self.t, x, self.mu, &mut own_sigma);
        }
        // terms[i * n + l]: contribution of atom l to component i.
        let mut terms = vec![0.0; d * n];
        for l in 0..n {
            dmu_at(cs, self.opts, self.t, x, self.mu, l, &mut deriv)?;
            let sigma = if displayed {
                &own_sigma[..]
            } else {
                &self.atom_sigma0[l * d * m..(l + 1) * d * m]
            };
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..m {
                    for k in 0..d {
                        acc += deriv[(i * m + j) * d + k] * sigma[k * m + j];
                    }
                }
                terms[i * n + l] = acc;
            }
        }
        for i in 0..d {
            out[i] = 0.5 * pairwise_sum(&terms[i * n..(i + 1) * n]) / n as f64;
        }
        Ok(())
    }

    /// Measure part at state `x`.
    pub fn measure_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &self.shared_measure {
            Some(shared) => {
                out.copy_from_slice(shared);
                Ok(())
            }
            None => self.compute_measure(x, out),
        }
    }

    /// Spatial part for one diffusion at state `x`.
    pub fn spatial_into(&self, which: Diffusion, x: &[f64], out: &mut [f64]) -> Result<()> {
        spatial_part(self.cs, which, self.t, x, self.mu, self.opts, out)
    }

    /// Total correction `measure + spatial0 + spatial1` at state `x`.
    pub fn total_into(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) -> Result<()> {
        self.measure_into(x, out)?;
        if self.cs.depends_on_x() {
            for which in [Diffusion::Common, Diffusion::Idiosyncratic] {
                self.spatial_into(which, x, scratch)?;
                out.iter_mut().zip(scratch.iter()).for_each(|(o, s)| *o += s);
            }
        }
        Ok(())
    }
}

fn spatial_part(
    cs: &dyn Coefficients,
    which: Diffusion,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    opts: CorrectionOptions,
    out: &mut [f64],
) -> Result<()> {
    let (d, m) = (cs.state_dim(), cs.noise_dim());
    if !cs.depends_on_x() {
        out.iter_mut().for_each(|o| *o = 0.0);
        return Ok(());
    }
    let mut deriv = vec![0.0; d * m * d];
    let supplied = match which {
        Diffusion::Common => cs.dy_sigma0(t, x, mu, &mut deriv),
        Diffusion::Idiosyncratic => cs.dy_sigma1(t, x, mu, &mut deriv),
    };
    if !supplied {
        if !opts.fd_fallback {
            return Err(Error::MissingDerivative { what: "∂_yσ" });
        }
        fd_dy_sigma(cs, which, t, x, mu, &mut deriv);
    }
    let mut sigma = vec![0.0; d * m];
    eval_sigma(cs, which, t, x, mu, &mut sigma);
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..m {
            for k in 0..d {
                acc += deriv[(i * m + j) * d + k] * sigma[k * m + j];
            }
        }
        out[i] = 0.5 * acc;
    }
    Ok(())
}

fn check_state(cs: &dyn Coefficients, x: &[f64]) -> Result<()> {
    if x.len() != cs.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: cs.state_dim(),
            got: x.len(),
        });
    }
    Ok(())
}

/// Lions-measure part of the correction at `(t, x, μ)`.
pub fn measure_correction(
    cs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    opts: CorrectionOptions,
) -> Result<Vec<f64>> {
    check_state(cs, x)?;
    let step = StepCorrection::prepare(cs, t, mu, opts)?;
    let mut out = vec![0.0; cs.state_dim()];
    step.measure_into(x, &mut out)?;
    Ok(out)
}

/// Classical spatial parts `(spatial0, spatial1)` of the correction.
pub fn spatial_correction(
    cs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    opts: CorrectionOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_state(cs, x)?;
    let d = cs.state_dim();
    let mut s0 = vec![0.0; d];
    let mut s1 = vec![0.0; d];
    spatial_part(cs, Diffusion::Common, t, x, mu, opts, &mut s0)?;
    spatial_part(cs, Diffusion::Idiosyncratic, t, x, mu, opts, &mut s1)?;
    Ok((s0, s1))
}

pub fn correction(
    cs: &dyn Coefficients,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    opts: CorrectionOptions,
) -> Result<CorrectionValue> {
    let measure_part = measure_correction(cs, t, x, mu, opts)?;
    let (spatial0_part, spatial1_part) = spatial_correction(cs, t, x, mu, opts)?;
    Ok(CorrectionValue {
        measure_part,
        spatial0_part,
        spatial1_part,
    })
}

/// Realized discrete bracket `Σ_n (σ(t_{n+1}) − σ(t_n)) ΔW_n`.
///
/// `path` holds `n + 1` samples of one scalar integrand entry on the grid and
/// `increments` the `n` increments it is bracketed against.
pub fn discrete_cross_variation(path: &[f64], increments: &[f64]) -> Result<f64> {
    if path.len() != increments.len() + 1 {
        return Err(Error::SizeMismatch {
            expected: increments.len() + 1,
            got: path.len(),
        });
    }
    let terms: Vec<f64> = path
        .windows(2)
        .zip(increments)
        .map(|(w, dw)| (w[1] - w[0]) * dw)
        .collect();
    Ok(pairwise_sum(&terms))
}

//! Particle propagation under a shared common-noise path.
//!
//! `N` exchangeable copies `Y^l` share `ΔW⁰` and each has its own `ΔW^{1,l}`;
//! the conditional law is read off as the empirical measure of the cloud.
//! Per-step particle updates only read the frozen cloud from the start of
//! the stage, so they run in parallel and the result does not depend on the
//! number of threads.

use std::io::Write;

use rayon::prelude::*;

use crate::coeffs::Coefficients;
use crate::correction::{CorrectionOptions, StepCorrection};
use crate::error::{invalid, Error, Result};
use crate::measure::EmpiricalMeasure;
use crate::noise::{NoiseBundle, TimeGrid};
use crate::rng::{standard_normal, Role, StreamKey};

const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeId {
    /// Euler-Maruyama on the Itô form.
    ItoEuler,
    /// Heun on the Stratonovich form with the correction drift.
    StratHeunCorrected,
    /// Heun on the Stratonovich form with the correction dropped. Only
    /// useful as a negative control.
    StratHeunUncorrected,
}

impl SchemeId {
    pub const ALL: [SchemeId; 3] = [
        SchemeId::ItoEuler,
        SchemeId::StratHeunCorrected,
        SchemeId::StratHeunUncorrected,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SchemeId::ItoEuler => "ito_euler",
            SchemeId::StratHeunCorrected => "strat_heun_corrected",
            SchemeId::StratHeunUncorrected => "strat_heun_uncorrected",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Law of `Y₀`; draws are keyed by `(seed, particle, component)`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Dirac(Vec<f64>),
    /// Independent normal components with a common standard deviation.
    Normal { mean: Vec<f64>, sd: f64 },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Dirac(x) => x.len(),
            InitialLaw::Normal { mean, .. } => mean.len(),
        }
    }

    pub fn mean(&self) -> &[f64] {
        match self {
            InitialLaw::Dirac(x) => x,
            InitialLaw::Normal { mean, .. } => mean,
        }
    }

    /// `N × d` i.i.d. draws, row-major.
    pub fn sample(&self, seed: u64, particles: usize) -> Vec<f64> {
        let d = self.dim();
        (0..particles * d)
            .map(|idx| {
                let (l, k) = (idx / d, idx % d);
                match self {
                    InitialLaw::Dirac(x) => x[k],
                    InitialLaw::Normal { mean, sd } => {
                        mean[k] + sd * standard_normal(seed, StreamKey::new(Role::Initial, l, 0, k))
                    }
                }
            })
            .collect()
    }
}

/// Increments for one step: `ΔW⁰` (`m` entries) and `ΔW^{1,l}` for every
/// particle (`N × m`, particle-major).
#[derive(Debug, Clone, Copy)]
pub struct StepNoise<'a> {
    pub common: &'a [f64],
    pub idio: &'a [f64],
}

impl<'a> StepNoise<'a> {
    fn idio_of(&self, l: usize, m: usize) -> &'a [f64] {
        &self.idio[l * m..(l + 1) * m]
    }
}

fn measure_of(states: &[f64], d: usize, step: usize) -> Result<EmpiricalMeasure> {
    EmpiricalMeasure::from_flat(states.to_vec(), d).map_err(|e| match e {
        Error::NonFinitePoint { index } => Error::NonFiniteState {
            step,
            particle: index,
        },
        other => other,
    })
}

fn check_step_inputs(
    cs: &dyn Coefficients,
    states: &[f64],
    mu: &EmpiricalMeasure,
    noise: &StepNoise<'_>,
) -> Result<usize> {
    let (d, m) = (cs.state_dim(), cs.noise_dim());
    if !states.len().is_multiple_of(d) || mu.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: mu.dim(),
        });
    }
    let n = states.len() / d;
    if mu.len() != n {
        return Err(Error::SizeMismatch {
            expected: n,
            got: mu.len(),
        });
    }
    if noise.common.len() != m || noise.idio.len() != n * m {
        return Err(Error::SizeMismatch {
            expected: n * m,
            got: noise.idio.len(),
        });
    }
    Ok(n)
}

fn check_finite(next: &[f64], d: usize, step: usize) -> Result<()> {
    match next.iter().position(|x| !x.is_finite()) {
        Some(pos) => Err(Error::NonFiniteState {
            step,
            particle: pos / d,
        }),
        None => Ok(()),
    }
}

/// Add `σ · Δ` (a `d × m` matrix times an `m`-vector) to `acc`.
#[inline]
fn add_diffusion(acc: &mut [f64], sigma: &[f64], dw: &[f64]) {
    let m = dw.len();
    for (i, a) in acc.iter_mut().enumerate() {
        let row = &sigma[i * m..(i + 1) * m];
        *a += row.iter().zip(dw).map(|(s, w)| s * w).sum::<f64>();
    }
}

/// One Euler-Maruyama step for every particle:
/// `Y⁺ = Y + b dt + σ⁰ ΔW⁰ + σ¹ ΔW^{1,l}` with coefficients at `(t, Y^l, μ)`.
pub fn ito_euler_step(
    cs: &dyn Coefficients,
    t: f64,
    states: &[f64],
    mu: &EmpiricalMeasure,
    noise: StepNoise<'_>,
    dt: f64,
    step: usize,
) -> Result<Vec<f64>> {
    check_step_inputs(cs, states, mu, &noise)?;
    let (d, m) = (cs.state_dim(), cs.noise_dim());
    let mut next = states.to_vec();
    next.par_chunks_mut(CHUNK * d).enumerate().for_each(|(c, block)| {
        let mut drift = vec![0.0; d];
        let mut s0 = vec![0.0; d * m];
        let mut s1 = vec![0.0; d * m];
        for (r, y) in block.chunks_exact_mut(d).enumerate() {
            let l = c * CHUNK + r;
            let x = &states[l * d..(l + 1) * d];
            cs.drift(t, x, mu, &mut drift);
            cs.sigma0(t, x, mu, &mut s0);
            cs.sigma1(t, x, mu, &mut s1);
            for (yi, bi) in y.iter_mut().zip(&drift) {
                *yi += bi * dt;
            }
            add_diffusion(y, &s0, noise.common);
            add_diffusion(y, &s1, noise.idio_of(l, m));
        }
    });
    check_finite(&next, d, step)?;
    Ok(next)
}

/// One Heun step on the Stratonovich form.
///
/// The predictor is a full Euler step with drift `b − C`, where `C` is the
/// correction drift (zero when `corrected` is false). The corrector uses the
/// trapezoidal drift `½(b(t, Y, μ) + b(t + dt, Ỹ, μ̃))`, keeps `C` at the
/// left point, and evaluates both diffusions at the lifted midpoint
/// `Z^l = (Y^l + Ỹ^l)/2` against the empirical measure of `Z`.
#[allow(clippy::too_many_arguments)]
pub fn strat_heun_step(
    cs: &dyn Coefficients,
    t: f64,
    states: &[f64],
    mu: &EmpiricalMeasure,
    noise: StepNoise<'_>,
    dt: f64,
    corrected: bool,
    opts: CorrectionOptions,
    step: usize,
) -> Result<Vec<f64>> {
    let n = check_step_inputs(cs, states, mu, &noise)?;
    let (d, m) = (cs.state_dim(), cs.noise_dim());

    let corrector = if corrected {
        Some(StepCorrection::prepare(cs, t, mu, opts)?)
    } else {
        None
    };

    // Stage 1: drift, correction and predictor at the left point.
    let mut drift0 = vec![0.0; n * d];
    let mut corr = vec![0.0; n * d];
    let mut pred = states.to_vec();
    pred.par_chunks_mut(CHUNK * d)
        .zip(drift0.par_chunks_mut(CHUNK * d))
        .zip(corr.par_chunks_mut(CHUNK * d))
        .enumerate()
        .try_for_each(|(c, ((pblock, bblock), cblock))| -> Result<()> {
            let mut s0 = vec![0.0; d * m];
            let mut s1 = vec![0.0; d * m];
            let mut scratch = vec![0.0; d];
            for r in 0..pblock.len() / d {
                let l = c * CHUNK + r;
                let x = &states[l * d..(l + 1) * d];
                let b = &mut bblock[r * d..(r + 1) * d];
                let cl = &mut cblock[r * d..(r + 1) * d];
                cs.drift(t, x, mu, b);
                if let Some(sc) = &corrector {
                    sc.total_into(x, cl, &mut scratch)?;
                }
                cs.sigma0(t, x, mu, &mut s0);
                cs.sigma1(t, x, mu, &mut s1);
                let y = &mut pblock[r * d..(r + 1) * d];
                for i in 0..d {
                    y[i] += (b[i] - cl[i]) * dt;
                }
                add_diffusion(y, &s0, noise.common);
                add_diffusion(y, &s1, noise.idio_of(l, m));
            }
            Ok(())
        })?;
    check_finite(&pred, d, step)?;

    // Stage 2: predictor cloud and lifted midpoint cloud.
    let mu_pred = measure_of(&pred, d, step)?;
    let mid: Vec<f64> = states.iter().zip(&pred).map(|(a, b)| 0.5 * (a + b)).collect();
    let mu_mid = measure_of(&mid, d, step)?;

    // Stage 3: corrector.
    let t_end = t + dt;
    let t_mid = t + 0.5 * dt;
    let mut next = states.to_vec();
    next.par_chunks_mut(CHUNK * d).enumerate().for_each(|(c, block)| {
        let mut b1 = vec![0.0; d];
        let mut s0 = vec![0.0; d * m];
        let mut s1 = vec![0.0; d * m];
        for (r, y) in block.chunks_exact_mut(d).enumerate() {
            let l = c * CHUNK + r;
            let range = l * d..(l + 1) * d;
            cs.drift(t_end, &pred[range.clone()], &mu_pred, &mut b1);
            let z = &mid[range.clone()];
            cs.sigma0(t_mid, z, &mu_mid, &mut s0);
            cs.sigma1(t_mid, z, &mu_mid, &mut s1);
            let b0 = &drift0[range.clone()];
            let cl = &corr[range];
            for i in 0..d {
                y[i] += (0.5 * (b0[i] + b1[i]) - cl[i]) * dt;
            }
            add_diffusion(y, &s0, noise.common);
            add_diffusion(y, &s1, noise.idio_of(l, m));
        }
    });
    check_finite(&next, d, step)?;
    Ok(next)
}

/// Steps a cloud through a noise bundle one grid step at a time.
pub struct Propagator<'a> {
    cs: &'a dyn Coefficients,
    scheme: SchemeId,
    opts: CorrectionOptions,
    bundle: &'a NoiseBundle,
    step: usize,
    states: Vec<f64>,
    measure: EmpiricalMeasure,
    idio_buf: Vec<f64>,
}

impl<'a> Propagator<'a> {
    pub fn new(
        cs: &'a dyn Coefficients,
        scheme: SchemeId,
        opts: CorrectionOptions,
        bundle: &'a NoiseBundle,
        initial: Vec<f64>,
    ) -> Result<Self> {
        let (d, m) = (cs.state_dim(), cs.noise_dim());
        if bundle.noise_dim() != m {
            return Err(invalid(
                "bundle",
                format!("noise has {} columns, model needs {m}", bundle.noise_dim()),
            ));
        }
        if initial.len() != bundle.particles() * d {
            return Err(Error::SizeMismatch {
                expected: bundle.particles() * d,
                got: initial.len(),
            });
        }
        let measure = measure_of(&initial, d, 0)?;
        Ok(Self {
            cs,
            scheme,
            opts,
            bundle,
            step: 0,
            states: initial,
            measure,
            idio_buf: vec![0.0; bundle.particles() * m],
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.bundle.grid().time(self.step)
    }

    pub fn is_done(&self) -> bool {
        self.step == self.bundle.grid().n_steps()
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn measure(&self) -> &EmpiricalMeasure {
        &self.measure
    }

    pub fn advance(&mut self) -> Result<()> {
        if self.is_done() {
            return Err(invalid("step", "already at the horizon"));
        }
        let m = self.cs.noise_dim();
        let n = self.step;
        for l in 0..self.bundle.particles() {
            self.idio_buf[l * m..(l + 1) * m].copy_from_slice(self.bundle.idio_increment(l, n));
        }
        let noise = StepNoise {
            common: self.bundle.common_increment(n),
            idio: &self.idio_buf,
        };
        let t = self.time();
        let dt = self.bundle.grid().dt();
        let next = match self.scheme {
            SchemeId::ItoEuler => ito_euler_step(self.cs, t, &self.states, &self.measure, noise, dt, n)?,
            SchemeId::StratHeunCorrected | SchemeId::StratHeunUncorrected => strat_heun_step(
                self.cs,
                t,
                &self.states,
                &self.measure,
                noise,
                dt,
                self.scheme == SchemeId::StratHeunCorrected,
                self.opts,
                n,
            )?,
        };
        self.measure = measure_of(&next, self.cs.state_dim(), n + 1)?;
        self.states = next;
        self.step += 1;
        Ok(())
    }

    /// Run to the horizon and return the terminal cloud.
    pub fn run_to_end(mut self) -> Result<Vec<f64>> {
        while !self.is_done() {
            self.advance()?;
        }
        Ok(self.states)
    }
}

/// Full trajectory of a particle cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePath {
    pub grid: TimeGrid,
    pub particles: usize,
    pub dim: usize,
    /// `(n_steps + 1) × N × d`, row-major.
    pub states: Vec<f64>,
    pub scheme: SchemeId,
    pub model: String,
    pub seed: u64,
}

impl EnsemblePath {
    pub fn at(&self, n: usize) -> &[f64] {
        let w = self.particles * self.dim;
        &self.states[n * w..(n + 1) * w]
    }

    pub fn terminal(&self) -> &[f64] {
        self.at(self.grid.n_steps())
    }

    /// Empirical measure of the cloud at step `n`.
    pub fn measure_at(&self, n: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::from_flat(self.at(n).to_vec(), self.dim).expect("validated during simulation")
    }

    /// CSV with columns `t, particle, component, value`.
    pub fn write_trajectory_csv(&self, w: impl Write) -> Result<()> {
        let mut out = crate::csv_writer(w);
        out.write_record(["t", "particle", "component", "value"])?;
        for n in 0..=self.grid.n_steps() {
            let t = self.grid.time(n).to_string();
            for (l, pt) in self.at(n).chunks_exact(self.dim).enumerate() {
                for (k, v) in pt.iter().enumerate() {
                    out.write_record([t.as_str(), &l.to_string(), &k.to_string(), &v.to_string()])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// CSV with columns `t, cond_mean_0 … cond_mean_{d-1}, cond_second_moment`.
    pub fn write_summary_csv(&self, w: impl Write) -> Result<()> {
        let mut out = crate::csv_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim).map(|k| format!("cond_mean_{k}")));
        header.push("cond_second_moment".into());
        out.write_record(&header)?;
        for n in 0..=self.grid.n_steps() {
            let mu = self.measure_at(n);
            let mut row = vec![self.grid.time(n).to_string()];
            row.extend(mu.mean().iter().map(|v| v.to_string()));
            row.push(mu.second_moment().to_string());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Simulate the whole grid of `bundle`, starting from i.i.d. draws of
/// `initial` keyed by the bundle seed.
pub fn simulate(
    cs: &dyn Coefficients,
    scheme: SchemeId,
    opts: CorrectionOptions,
    bundle: &NoiseBundle,
    initial: &InitialLaw,
    model: &str,
) -> Result<EnsemblePath> {
    if initial.dim() != cs.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: cs.state_dim(),
            got: initial.dim(),
        });
    }
    let start = initial.sample(bundle.seed(), bundle.particles());
    let mut prop = Propagator::new(cs, scheme, opts, bundle, start)?;
    let mut states = Vec::with_capacity((bundle.grid().n_steps() + 1) * prop.states().len());
    states.extend_from_slice(prop.states());
    while !prop.is_done() {
        prop.advance()?;
        states.extend_from_slice(prop.states());
    }
    Ok(EnsemblePath {
        grid: bundle.grid(),
        particles: bundle.particles(),
        dim: cs.state_dim(),
        states,
        scheme,
        model: model.to_string(),
        seed: bundle.seed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::Model;

    fn mu(xs: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_scalars(xs).unwrap()
    }

    const OPTS: CorrectionOptions = CorrectionOptions {
        variant: crate::correction::CorrectionVariant::Inside,
        fd_fallback: true,
    };

    #[test]
    fn euler_ode_reduction() {
        let model = Model::LinearMean { beta: 0.7, c: 0.0, a: 0.0, s: 0.0 };
        let states = [0.25, -1.0];
        let noise = StepNoise { common: &[0.3], idio: &[0.1, -0.2] };
        let next = ito_euler_step(&model, 0.0, &states, &mu(&states), noise, 0.01, 0).unwrap();
        assert_eq!(next, vec![0.25 + 0.7 * 0.01, -1.0 + 0.7 * 0.01]);
    }

    #[test]
    fn euler_hand_arithmetic() {
        let model = Model::LinearMean { beta: 0.0, c: 0.5, a: 0.0, s: 0.0 };
        let noise = StepNoise { common: &[0.1], idio: &[0.0] };
        let next = ito_euler_step(&model, 0.0, &[2.0], &mu(&[2.0]), noise, 0.01, 0).unwrap();
        assert!((next[0] - 2.1).abs() < 1e-15);

        let noise = StepNoise { common: &[0.1], idio: &[0.0, 0.0] };
        let next = ito_euler_step(&model, 0.0, &[0.0, 2.0], &mu(&[0.0, 2.0]), noise, 0.01, 0).unwrap();
        assert!((next[0] - 0.05).abs() < 1e-15);
        assert!((next[1] - 2.05).abs() < 1e-15);
    }

    #[test]
    fn heun_hand_arithmetic() {
        let (c, dw, dt, y) = (0.5, 0.1, 0.01, 2.0);
        let model = Model::LinearMean { beta: 0.0, c, a: 0.0, s: 0.0 };
        let noise = StepNoise { common: &[dw], idio: &[0.0] };
        let next = strat_heun_step(&model, 0.0, &[y], &mu(&[y]), noise, dt, true, OPTS, 0).unwrap();
        // Correction ½ c σ⁰ = ½ c (c y); predictor and midpoint by hand.
        let corr = 0.5 * c * (c * y);
        let pred = y - corr * dt + c * y * dw;
        let mid = 0.5 * (y + pred);
        let expected = y - corr * dt + c * mid * dw;
        assert!((next[0] - expected).abs() < 1e-12);
        assert!((expected - 2.0999375).abs() < 1e-12);
    }

    #[test]
    fn heun_ode_reduction_is_trapezoidal() {
        struct Linear;
        impl Coefficients for Linear {
            fn state_dim(&self) -> usize { 1 }
            fn noise_dim(&self) -> usize { 1 }
            fn depends_on_x(&self) -> bool { true }
            fn drift(&self, _t: f64, x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) { out[0] = -2.0 * x[0]; }
            fn sigma0(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) { out[0] = 0.0; }
            fn sigma1(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) { out[0] = 0.0; }
        }
        let (y, dt) = (1.5, 0.1);
        let noise = StepNoise { common: &[0.4], idio: &[0.3] };
        let next = strat_heun_step(&Linear, 0.0, &[y], &mu(&[y]), noise, dt, true, OPTS, 0).unwrap();
        let pred = y - 2.0 * y * dt;
        assert!((next[0] - (y + 0.5 * dt * (-2.0 * y - 2.0 * pred))).abs() < 1e-15);
    }

    #[test]
    fn const_diff_heun_variants_coincide() {
        let model = Model::ConstDiff { sigma0: 0.4, sigma1: 0.3 };
        let states = [0.1, 0.5, -0.7];
        let noise = StepNoise { common: &[0.2], idio: &[0.1, -0.3, 0.05] };
        let a = strat_heun_step(&model, 0.0, &states, &mu(&states), noise, 0.01, true, OPTS, 0).unwrap();
        let b = strat_heun_step(&model, 0.0, &states, &mu(&states), noise, 0.01, false, OPTS, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_output_is_reported() {
        let model = Model::LinearMean { beta: f64::MAX, c: 0.0, a: 0.0, s: 0.0 };
        let noise = StepNoise { common: &[0.0], idio: &[0.0] };
        let err = ito_euler_step(&model, 0.0, &[f64::MAX], &mu(&[f64::MAX]), noise, 10.0, 7).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { step: 7, particle: 0 }));
    }

    #[test]
    fn deterministic_ode_trajectory() {
        let model = Model::LinearMean { beta: 1.0, c: 0.0, a: 0.0, s: 0.0 };
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let bundle = NoiseBundle::generate(3, grid, 1, 1).unwrap();
        let law = InitialLaw::Dirac(vec![0.5]);
        for scheme in SchemeId::ALL {
            let path = simulate(&model, scheme, OPTS, &bundle, &law, "LinearMean").unwrap();
            assert!((path.terminal()[0] - 1.5).abs() < 1e-14, "{scheme:?}");
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let model = Model::FullLinear { beta: 0.1, c: 0.5, gamma: 0.2, s: 0.3 };
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let bundle = NoiseBundle::generate(42, grid, 300, 1).unwrap();
        let law = InitialLaw::Normal { mean: vec![1.0], sd: 0.5 };
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate(&model, SchemeId::StratHeunCorrected, OPTS, &bundle, &law, "FullLinear").unwrap())
        };
        let one = run(1);
        assert_eq!(one, run(8));
        assert_eq!(one, run(3));
    }

    #[test]
    fn csv_exports() {
        let model = Model::LinearMean { beta: 0.1, c: 0.5, a: 0.0, s: 0.3 };
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let bundle = NoiseBundle::generate(1, grid, 2, 1).unwrap();
        let law = InitialLaw::Dirac(vec![1.0]);
        let path = simulate(&model, SchemeId::ItoEuler, OPTS, &bundle, &law, "LinearMean").unwrap();
        let mut buf = Vec::new();
        path.write_trajectory_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,particle,component,value\n0,0,0,1\n0,1,0,1\n0.5,0,0,"));
        assert_eq!(text.lines().count(), 1 + 3 * 2);
        assert!(!text.contains('\r'));

        let mut buf = Vec::new();
        path.write_summary_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,cond_mean_0,cond_second_moment\n0,1,1\n"));
    }
}

//! Studies that turn the Itô/Stratonovich equivalences into numbers, and the
//! fixed pass/fail thresholds applied to them.

use std::io::Write;

use rayon::prelude::*;

use crate::coeffs::{Coefficients, Model};
use crate::correction::{discrete_cross_variation, measure_correction, CorrectionOptions};
use crate::error::{invalid, Result};
use crate::lions::{fd_lions_derivative, Functional, MeasureFunctional};
use crate::measure::EmpiricalMeasure;
use crate::noise::{NoiseBundle, TimeGrid};
use crate::numeric::{log2_slope, pairwise_sum};
use crate::rng::{replicate_seed, standard_normal, Role, StreamKey};
use crate::sim::{InitialLaw, Propagator, SchemeId};

pub const EQUIVALENCE_MIN_DECAY: f64 = 1.3;
pub const EQUIVALENCE_MIN_SEPARATION: f64 = 5.0;
/// Gaps at or below this are treated as already converged.
pub const GAP_FLOOR: f64 = 1e-12;
pub const CLOSED_FORM_SLOPE_RANGE: (f64, f64) = (0.35, 1.1);
pub const CLOSED_FORM_MIN_IMPROVEMENT: f64 = 4.0;
pub const BRACKET_MAX_RELATIVE_DEVIATION: f64 = 0.10;
pub const BRACKET_MAX_Z: f64 = 3.0;
pub const LIONS_MAX_DEVIATION: f64 = 1e-5;
pub const LIONS_REFERENCE_STEP: f64 = 1e-4;
pub const LIONS_SLOPE_TARGET: f64 = 2.0;
pub const LIONS_SLOPE_TOLERANCE: f64 = 0.3;
/// Deviations must exceed this multiple of the rounding floor to enter the
/// h-slope fit.
pub const LIONS_FLOOR_FACTOR: f64 = 10.0;

/// One pass/fail line of a study summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Criterion {
    pub id: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Criterion {
    pub fn new(id: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            id,
            passed,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!("[{}] {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.id, self.detail)
    }
}

pub fn write_summary(criteria: &[Criterion], mut w: impl Write) -> std::io::Result<()> {
    for c in criteria {
        writeln!(w, "{}", c.line())?;
    }
    let failed = criteria.iter().filter(|c| !c.passed).count();
    writeln!(w, "{} criteria, {} failed", criteria.len(), failed)
}

/// Shared knobs of the multi-level studies.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub particles: usize,
    pub horizon: f64,
    /// Steps on the coarsest level.
    pub base_steps: usize,
    /// Number of halvings after the coarsest level.
    pub levels: usize,
    pub seeds: usize,
    pub base_seed: u64,
    pub initial: InitialLaw,
    pub opts: CorrectionOptions,
}

impl StudyConfig {
    fn validate(&self) -> Result<TimeGrid> {
        if self.particles == 0 {
            return Err(invalid("N", "need at least one particle"));
        }
        if self.seeds == 0 {
            return Err(invalid("seeds", "need at least one seed"));
        }
        TimeGrid::new(self.horizon, self.base_steps)
    }

    fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds).map(|i| replicate_seed(self.base_seed, i)).collect()
    }
}

fn run_terminal(
    cs: &dyn Coefficients,
    scheme: SchemeId,
    opts: CorrectionOptions,
    bundle: &NoiseBundle,
    initial: &[f64],
) -> Result<Vec<f64>> {
    Propagator::new(cs, scheme, opts, bundle, initial.to_vec())?.run_to_end()
}

fn sum_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    let v: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect();
    pairwise_sum(&v)
}

fn fmt_f(x: f64) -> String {
    x.to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceRow {
    pub n_steps: usize,
    pub dt: f64,
    /// RMS over particles and seeds of `|Y_T(Itô) − Y_T(Strat, corrected)|`.
    pub gap_corrected: f64,
    pub gap_uncorrected: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub model: String,
    pub particles: usize,
    pub seeds: Vec<u64>,
    pub variant: &'static str,
    pub rows: Vec<EquivalenceRow>,
}

fn decay_ok(coarse: f64, fine: f64) -> bool {
    fine <= GAP_FLOOR || coarse >= EQUIVALENCE_MIN_DECAY * fine
}

impl EquivalenceReport {
    pub fn corrected_ratios(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[0].gap_corrected / w[1].gap_corrected).collect()
    }

    pub fn uncorrected_ratios(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[0].gap_uncorrected / w[1].gap_uncorrected).collect()
    }

    /// Corrected gap shrinks by the minimum factor at every halving.
    pub fn corrected_decays(&self) -> bool {
        self.rows.windows(2).all(|w| decay_ok(w[0].gap_corrected, w[1].gap_corrected))
    }

    pub fn uncorrected_decays(&self) -> bool {
        self.rows.windows(2).all(|w| decay_ok(w[0].gap_uncorrected, w[1].gap_uncorrected))
    }

    /// `true` when dropping the correction changed nothing (the model has no
    /// correction drift).
    pub fn correction_inactive(&self) -> bool {
        self.rows.iter().all(|r| r.gap_corrected == r.gap_uncorrected)
    }

    pub fn finest_separation(&self) -> f64 {
        let last = self.rows.last().expect("at least one level");
        last.gap_uncorrected / last.gap_corrected
    }

    pub fn criteria(&self) -> Vec<Criterion> {
        let fmt_ratios = |r: Vec<f64>| r.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
        let mut out = vec![Criterion::new(
            "scheme_equivalence.decay",
            self.corrected_decays(),
            format!(
                "corrected gap ratios per halving [{}] (need >= {EQUIVALENCE_MIN_DECAY})",
                fmt_ratios(self.corrected_ratios())
            ),
        )];
        if self.correction_inactive() {
            out.push(Criterion::new(
                "scheme_equivalence.separation",
                true,
                "correction identically zero; corrected and uncorrected gaps coincide",
            ));
        } else {
            let sep = self.finest_separation();
            out.push(Criterion::new(
                "scheme_equivalence.separation",
                sep >= EQUIVALENCE_MIN_SEPARATION,
                format!("uncorrected/corrected gap at finest dt = {sep:.3} (need >= {EQUIVALENCE_MIN_SEPARATION})"),
            ));
            out.push(Criterion::new(
                "scheme_equivalence.negative_control",
                !self.uncorrected_decays(),
                format!(
                    "uncorrected gap ratios [{}] must fail the decay test",
                    fmt_ratios(self.uncorrected_ratios())
                ),
            ));
        }
        out
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = crate::csv_writer(w);
        out.write_record(["n_steps", "dt", "gap_corrected", "gap_uncorrected"])?;
        for r in &self.rows {
            out.write_record([
                r.n_steps.to_string(),
                fmt_f(r.dt),
                fmt_f(r.gap_corrected),
                fmt_f(r.gap_uncorrected),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Simulate ItoEuler and both Heun variants on each level of a refined
/// shared noise family and report terminal RMS gaps.
pub fn equivalence_study(cs: &dyn Coefficients, model: &str, cfg: &StudyConfig) -> Result<EquivalenceReport> {
    let grid = cfg.validate()?;
    let seeds = cfg.seed_list();
    let per_seed: Vec<Vec<(f64, f64)>> = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<(f64, f64)>> {
            let base = NoiseBundle::generate(seed, grid, cfg.particles, cs.noise_dim())?;
            let initial = cfg.initial.sample(seed, cfg.particles);
            let mut bundle = base;
            let mut out = Vec::with_capacity(cfg.levels + 1);
            for level in 0..=cfg.levels {
                if level > 0 {
                    bundle = bundle.refine();
                }
                let ito = run_terminal(cs, SchemeId::ItoEuler, cfg.opts, &bundle, &initial)?;
                let corr = run_terminal(cs, SchemeId::StratHeunCorrected, cfg.opts, &bundle, &initial)?;
                let unc = run_terminal(cs, SchemeId::StratHeunUncorrected, cfg.opts, &bundle, &initial)?;
                out.push((sum_sq_diff(&ito, &corr), sum_sq_diff(&ito, &unc)));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let count = (cfg.particles * seeds.len()) as f64;
    let rows = (0..=cfg.levels)
        .map(|level| {
            let n_steps = cfg.base_steps << level;
            let c: Vec<f64> = per_seed.iter().map(|s| s[level].0).collect();
            let u: Vec<f64> = per_seed.iter().map(|s| s[level].1).collect();
            EquivalenceRow {
                n_steps,
                dt: cfg.horizon / n_steps as f64,
                gap_corrected: (pairwise_sum(&c) / count).sqrt(),
                gap_uncorrected: (pairwise_sum(&u) / count).sqrt(),
            }
        })
        .collect();
    Ok(EquivalenceReport {
        model: model.to_string(),
        particles: cfg.particles,
        seeds,
        variant: cfg.opts.variant.name(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub n_steps: usize,
    pub dt: f64,
    /// `E|Y_T(sim) − Y_T(exact)|` over particles and seeds.
    pub error: f64,
    /// `E|m̄_T(sim) − m_T(exact)|` over seeds.
    pub cond_mean_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub model: String,
    pub scheme: SchemeId,
    pub particles: usize,
    pub seeds: Vec<u64>,
    pub metric: &'static str,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    /// Least-squares log₂-log₂ slope of error against dt, leaving out the
    /// coarsest level.
    pub fn slope(&self) -> Option<f64> {
        let rows = if self.rows.len() > 2 { &self.rows[1..] } else { &self.rows[..] };
        let dts: Vec<f64> = rows.iter().map(|r| r.dt).collect();
        let errs: Vec<f64> = rows.iter().map(|r| r.error).collect();
        log2_slope(&dts, &errs)
    }

    pub fn criteria(&self) -> Vec<Criterion> {
        let (lo, hi) = CLOSED_FORM_SLOPE_RANGE;
        let slope = self.slope();
        vec![Criterion::new(
            "closed_form.slope",
            slope.is_some_and(|s| (lo..=hi).contains(&s)),
            format!("strong-error slope {slope:?} over levels 1.. (need within [{lo}, {hi}])"),
        )]
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = crate::csv_writer(w);
        out.write_record(["n_steps", "dt", "error", "cond_mean_error"])?;
        for r in &self.rows {
            out.write_record([r.n_steps.to_string(), fmt_f(r.dt), fmt_f(r.error), fmt_f(r.cond_mean_error)])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Exact terminal conditional mean for `LinearMean` with `a = 0`:
/// `m_T = Φ_T (m₀ + β ∫₀^T Φ_u⁻¹ du)`, `Φ_t = exp(c W⁰_t − c² t / 2)`,
/// with the time integral by the trapezoid rule on the grid of `w0`.
pub fn linear_mean_exact_mean(beta: f64, c: f64, m0: f64, grid: TimeGrid, w0: &[f64]) -> f64 {
    let phi = |n: usize| (c * w0[n] - 0.5 * c * c * grid.time(n)).exp();
    let mut integral = 0.0;
    if beta != 0.0 {
        let inv: Vec<f64> = (0..=grid.n_steps()).map(|n| 1.0 / phi(n)).collect();
        let terms: Vec<f64> = inv.windows(2).map(|w| 0.5 * (w[0] + w[1]) * grid.dt()).collect();
        integral = pairwise_sum(&terms);
    }
    phi(grid.n_steps()) * (m0 + beta * integral)
}

/// Strong error of `scheme` against the closed-form solution of `LinearMean`
/// with `a = 0`: `Y_T = Y₀ + (m_T − m₀) + s W^{1,l}_T`.
pub fn closedform_study(model: Model, scheme: SchemeId, cfg: &StudyConfig) -> Result<ConvergenceReport> {
    let Model::LinearMean { beta, c, a, s } = model else {
        return Err(invalid("model", "closed-form study needs LinearMean"));
    };
    if a != 0.0 {
        return Err(invalid("model.a", "closed form needs a = 0"));
    }
    if cfg.initial.dim() != 1 {
        return Err(invalid("initial", "LinearMean is one-dimensional"));
    }
    let grid = cfg.validate()?;
    let seeds = cfg.seed_list();
    let m0 = cfg.initial.mean()[0];
    let n = cfg.particles;

    let per_seed: Vec<Vec<(f64, f64)>> = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<(f64, f64)>> {
            let family = NoiseBundle::generate(seed, grid, n, 1)?.dyadic_family(cfg.levels);
            let finest = family.last().expect("non-empty");
            let w0 = finest.common_path(0);
            let m_exact = linear_mean_exact_mean(beta, c, m0, finest.grid(), &w0);
            let initial = cfg.initial.sample(seed, n);
            let exact: Vec<f64> = (0..n)
                .map(|l| {
                    let w1 = *finest.idio_path(l, 0).last().expect("non-empty");
                    initial[l] + (m_exact - m0) + s * w1
                })
                .collect();
            family
                .iter()
                .map(|bundle| {
                    let terminal = run_terminal(&model, scheme, cfg.opts, bundle, &initial)?;
                    let abs: Vec<f64> = terminal.iter().zip(&exact).map(|(y, e)| (y - e).abs()).collect();
                    let sim_mean = pairwise_sum(&terminal) / n as f64;
                    Ok((pairwise_sum(&abs) / n as f64, (sim_mean - m_exact).abs()))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let rows = (0..=cfg.levels)
        .map(|level| {
            let n_steps = cfg.base_steps << level;
            let e: Vec<f64> = per_seed.iter().map(|s| s[level].0).collect();
            let m: Vec<f64> = per_seed.iter().map(|s| s[level].1).collect();
            ConvergenceRow {
                n_steps,
                dt: cfg.horizon / n_steps as f64,
                error: pairwise_sum(&e) / seeds.len() as f64,
                cond_mean_error: pairwise_sum(&m) / seeds.len() as f64,
            }
        })
        .collect();
    Ok(ConvergenceReport {
        model: model.to_string(),
        scheme,
        particles: n,
        seeds,
        metric: "mean_abs_terminal_error",
        rows,
    })
}

/// Improvement of the finest level of `fine` over the coarsest of `coarse`.
pub fn closedform_improvement(fine: &ConvergenceReport, coarse: &ConvergenceReport) -> Criterion {
    let best = fine.rows.last().expect("rows").error;
    let worst = coarse.rows.first().expect("rows").error;
    let ratio = worst / best;
    Criterion::new(
        "closed_form.improvement",
        ratio >= CLOSED_FORM_MIN_IMPROVEMENT,
        format!(
            "error(N={}, dt={}) / error(N={}, dt={}) = {ratio:.3} (need >= {CLOSED_FORM_MIN_IMPROVEMENT})",
            coarse.particles,
            coarse.rows[0].dt,
            fine.particles,
            fine.rows.last().expect("rows").dt
        ),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct BracketSeed {
    pub seed: u64,
    /// `Σ_j ⟨σ⁰_ij(·, μ̄), W⁰_j⟩_T` per component `i`.
    pub w0_bracket: Vec<f64>,
    /// `2 ∫₀^T measure_correction_i dt` (left-point sum).
    pub correction_integral: Vec<f64>,
    /// `Σ_j ⟨σ⁰_ij(·, μ̄), W^{1,0}_j⟩_T` against particle 0's own noise.
    pub w1_bracket: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BracketReport {
    pub model: String,
    pub particles: usize,
    pub n_steps: usize,
    pub per_seed: Vec<BracketSeed>,
}

fn seed_mean(xs: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let v: Vec<f64> = xs.collect();
    let n = v.len();
    let mean = pairwise_sum(&v) / n as f64;
    let var = if n > 1 {
        v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    (mean, (var / n as f64).sqrt(), n)
}

impl BracketReport {
    fn dim(&self) -> usize {
        self.per_seed[0].w0_bracket.len()
    }

    pub fn mean_w0_bracket(&self, i: usize) -> f64 {
        seed_mean(self.per_seed.iter().map(|s| s.w0_bracket[i])).0
    }

    pub fn mean_correction_integral(&self, i: usize) -> f64 {
        seed_mean(self.per_seed.iter().map(|s| s.correction_integral[i])).0
    }

    /// `|mean bracket − mean 2∫C| / |mean 2∫C|`, 0 when both vanish.
    pub fn relative_deviation(&self, i: usize) -> f64 {
        let (b, c) = (self.mean_w0_bracket(i), self.mean_correction_integral(i));
        if c == 0.0 {
            if b == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (b - c).abs() / c.abs()
        }
    }

    /// Seed mean, standard error and z-score of the W¹ bracket.
    pub fn w1_statistics(&self, i: usize) -> (f64, f64, f64) {
        let (mean, se, _) = seed_mean(self.per_seed.iter().map(|s| s.w1_bracket[i]));
        let z = if se == 0.0 {
            if mean == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            mean / se
        };
        (mean, se, z)
    }

    pub fn criteria(&self) -> Vec<Criterion> {
        let mut out = Vec::new();
        for i in 0..self.dim() {
            let dev = self.relative_deviation(i);
            out.push(Criterion::new(
                "bracket.common",
                dev <= BRACKET_MAX_RELATIVE_DEVIATION,
                format!(
                    "component {i}: <sigma0, W0> = {:.6}, 2*int correction = {:.6}, relative deviation {dev:.4} (need <= {BRACKET_MAX_RELATIVE_DEVIATION})",
                    self.mean_w0_bracket(i),
                    self.mean_correction_integral(i)
                ),
            ));
            let (mean, se, z) = self.w1_statistics(i);
            out.push(Criterion::new(
                "bracket.idiosyncratic",
                z.abs() <= BRACKET_MAX_Z,
                format!("component {i}: <sigma0, W1> mean {mean:.3e}, se {se:.3e}, z {z:.3} (need |z| <= {BRACKET_MAX_Z})"),
            ));
        }
        out
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = crate::csv_writer(w);
        out.write_record(["seed", "component", "w0_bracket", "correction_integral_x2", "w1_bracket"])?;
        for s in &self.per_seed {
            for i in 0..s.w0_bracket.len() {
                out.write_record([
                    s.seed.to_string(),
                    i.to_string(),
                    fmt_f(s.w0_bracket[i]),
                    fmt_f(s.correction_integral[i]),
                    fmt_f(s.w1_bracket[i]),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Discrete brackets of `σ⁰(·, μ̄_·)` against `W⁰` and against a particle's
/// own `W¹`, next to twice the integrated measure correction, along
/// simulated paths on a single grid (`cfg.levels` is ignored).
pub fn bracket_study(
    cs: &dyn Coefficients,
    model: &str,
    scheme: SchemeId,
    cfg: &StudyConfig,
) -> Result<BracketReport> {
    if cs.depends_on_x() {
        return Err(invalid("model", "bracket study needs a state-independent model"));
    }
    let grid = cfg.validate()?;
    let (d, m) = (cs.state_dim(), cs.noise_dim());
    let seeds = cfg.seed_list();
    let per_seed = seeds
        .par_iter()
        .map(|&seed| -> Result<BracketSeed> {
            let bundle = NoiseBundle::generate(seed, grid, cfg.particles, m)?;
            let initial = cfg.initial.sample(seed, cfg.particles);
            let mut prop = Propagator::new(cs, scheme, cfg.opts, &bundle, initial)?;
            let steps = grid.n_steps();
            // sigma_path[(i * m + j) * (steps + 1) + n]
            let mut sigma_path = vec![0.0; d * m * (steps + 1)];
            let mut corr_terms = vec![0.0; d * steps];
            let mut sigma = vec![0.0; d * m];
            loop {
                let n = prop.step_index();
                let t = prop.time();
                let mu = prop.measure();
                let x = mu.point(0);
                cs.sigma0(t, x, mu, &mut sigma);
                for ij in 0..d * m {
                    sigma_path[ij * (steps + 1) + n] = sigma[ij];
                }
                if prop.is_done() {
                    break;
                }
                let c = measure_correction(cs, t, x, mu, cfg.opts)?;
                for i in 0..d {
                    corr_terms[i * steps + n] = 2.0 * c[i] * grid.dt();
                }
                prop.advance()?;
            }
            let mut w0_bracket = vec![0.0; d];
            let mut w1_bracket = vec![0.0; d];
            for i in 0..d {
                for j in 0..m {
                    let path = &sigma_path[(i * m + j) * (steps + 1)..(i * m + j + 1) * (steps + 1)];
                    let dw0: Vec<f64> = (0..steps).map(|n| bundle.common_increment(n)[j]).collect();
                    let dw1: Vec<f64> = (0..steps).map(|n| bundle.idio_increment(0, n)[j]).collect();
                    w0_bracket[i] += discrete_cross_variation(path, &dw0)?;
                    w1_bracket[i] += discrete_cross_variation(path, &dw1)?;
                }
            }
            let correction_integral = (0..d).map(|i| pairwise_sum(&corr_terms[i * steps..(i + 1) * steps])).collect();
            Ok(BracketSeed {
                seed,
                w0_bracket,
                correction_integral,
                w1_bracket,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BracketReport {
        model: model.to_string(),
        particles: cfg.particles,
        n_steps: grid.n_steps(),
        per_seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LionsRow {
    pub functional: &'static str,
    pub particles: usize,
    pub h: f64,
    /// Worst `|FD − analytic|` over atoms and coordinates.
    pub max_deviation: f64,
    /// Size of the cancellation error expected from floating point alone.
    pub rounding_floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LionsSlope {
    pub functional: &'static str,
    pub particles: usize,
    /// Fitted order in `h`, if at least two steps sit above the rounding floor.
    pub slope: Option<f64>,
    pub steps_used: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LionsSweepReport {
    pub rows: Vec<LionsRow>,
    pub slopes: Vec<LionsSlope>,
}

impl LionsSweepReport {
    pub fn criteria(&self) -> Vec<Criterion> {
        let mut out = Vec::new();
        let at_ref: Vec<&LionsRow> = self.rows.iter().filter(|r| r.h == LIONS_REFERENCE_STEP).collect();
        let worst = at_ref.iter().map(|r| r.max_deviation).fold(0.0, f64::max);
        out.push(Criterion::new(
            "lions_identity.deviation",
            !at_ref.is_empty() && worst <= LIONS_MAX_DEVIATION,
            format!("max |FD - analytic| at h = {LIONS_REFERENCE_STEP}: {worst:.3e} (need <= {LIONS_MAX_DEVIATION})"),
        ));
        for s in &self.slopes {
            if s.functional != Functional::ExpMean.name() {
                continue;
            }
            if let Some(slope) = s.slope {
                out.push(Criterion::new(
                    "lions_identity.slope",
                    (slope - LIONS_SLOPE_TARGET).abs() <= LIONS_SLOPE_TOLERANCE,
                    format!(
                        "{} N={}: h-slope {slope:.3} from h in {:?} (need {LIONS_SLOPE_TARGET} +- {LIONS_SLOPE_TOLERANCE})",
                        s.functional, s.particles, s.steps_used
                    ),
                ));
            }
        }
        if !out.iter().any(|c| c.id == "lions_identity.slope") {
            out.push(Criterion::new(
                "lions_identity.slope",
                false,
                "no cloud size had two steps above the rounding floor",
            ));
        }
        out
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = crate::csv_writer(w);
        out.write_record(["functional", "N", "h", "max_deviation", "rounding_floor"])?;
        for r in &self.rows {
            out.write_record([
                r.functional.to_string(),
                r.particles.to_string(),
                fmt_f(r.h),
                fmt_f(r.max_deviation),
                fmt_f(r.rounding_floor),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Seed-fixed standard normal cloud of `n` scalar points.
pub fn normal_cloud(seed: u64, n: usize) -> EmpiricalMeasure {
    let pts = (0..n)
        .map(|l| standard_normal(seed, StreamKey::new(Role::Cloud, l, 0, 0).with_tag(n as u32)))
        .collect::<Vec<_>>();
    EmpiricalMeasure::from_scalars(&pts).expect("finite draws")
}

fn max_lions_deviation(u: &dyn MeasureFunctional, mu: &EmpiricalMeasure, h: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for j in 0..mu.len() {
        let analytic = u
            .analytic_lions(mu, mu.point(j))
            .ok_or(crate::error::Error::MissingDerivative { what: "an analytic Lions derivative" })?;
        let fd = fd_lions_derivative(u, mu, j, h)?;
        for (a, b) in analytic.iter().zip(&fd) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Finite-difference vs analytic Lions derivatives over cloud sizes and
/// steps, with a fitted order in `h` per functional and size.
///
/// The slope fit only uses steps whose deviation exceeds
/// [`LIONS_FLOOR_FACTOR`] times the rounding floor `N ε max(1, |u|) / h`.
pub fn lions_sweep(
    functionals: &[Functional],
    sizes: &[usize],
    steps: &[f64],
    seed: u64,
) -> Result<LionsSweepReport> {
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for f in functionals {
        for &n in sizes {
            let mu = normal_cloud(seed, n);
            let scale = f.eval(&mu).abs().max(1.0);
            let mut used_h = Vec::new();
            let mut used_dev = Vec::new();
            for &h in steps {
                let dev = max_lions_deviation(f, &mu, h)?;
                let floor = n as f64 * f64::EPSILON * scale / h;
                if dev > LIONS_FLOOR_FACTOR * floor {
                    used_h.push(h);
                    used_dev.push(dev);
                }
                rows.push(LionsRow {
                    functional: f.name(),
                    particles: n,
                    h,
                    max_deviation: dev,
                    rounding_floor: floor,
                });
            }
            slopes.push(LionsSlope {
                functional: f.name(),
                particles: n,
                slope: log2_slope(&used_h, &used_dev),
                steps_used: used_h,
            });
        }
    }
    Ok(LionsSweepReport { rows, slopes })
}

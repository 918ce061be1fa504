//! Two-dimensional state and noise: the tensor-contracted correction against
//! a brute-force correction of the lifted particle system.

use strato_core::coeffs::{fd_check_derivatives, NumericDerivatives};
use strato_core::correction::{correction, CorrectionVariant};
use strato_core::sim::{simulate, InitialLaw, SchemeId};
use strato_core::{Coefficients, CorrectionOptions, EmpiricalMeasure, NoiseBundle, TimeGrid};

const ALPHA: [[f64; 2]; 2] = [[0.4, -0.3], [0.2, 0.5]];
const BETA: [[f64; 2]; 2] = [[0.1, 0.3], [-0.2, 0.15]];

/// `σ⁰_ij = α_ij x_{(i+j) mod 2} m_i + β_ij sin(M₂)`, `m` the mean, `M₂` the
/// second moment; constant diagonal `σ¹`; linear drift.
struct Coupled;

impl Coefficients for Coupled {
    fn state_dim(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        2
    }
    fn depends_on_x(&self) -> bool {
        true
    }
    fn drift(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = -0.5 * x[0] + 0.1 * mu.mean()[1];
        out[1] = 0.2 - 0.3 * x[1];
    }
    fn sigma0(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let m = mu.mean();
        let s = mu.second_moment().sin();
        for i in 0..2 {
            for j in 0..2 {
                out[i * 2 + j] = ALPHA[i][j] * x[(i + j) % 2] * m[i] + BETA[i][j] * s;
            }
        }
    }
    fn sigma1(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out.copy_from_slice(&[0.3, 0.0, 0.0, 0.2]);
    }
    fn dmu_sigma0(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure, v: &[f64], out: &mut [f64]) -> bool {
        let c = mu.second_moment().cos();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let lin = if k == i { ALPHA[i][j] * x[(i + j) % 2] } else { 0.0 };
                    out[(i * 2 + j) * 2 + k] = lin + BETA[i][j] * c * 2.0 * v[k];
                }
            }
        }
        true
    }
    fn dy_sigma0(&self, _t: f64, _x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) -> bool {
        let m = mu.mean();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    out[(i * 2 + j) * 2 + k] = if k == (i + j) % 2 { ALPHA[i][j] * m[i] } else { 0.0 };
                }
            }
        }
        true
    }
    fn dy_sigma1(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) -> bool {
        out.fill(0.0);
        true
    }
}

fn cloud() -> Vec<f64> {
    vec![0.3, -0.8, 1.1, 0.4, -0.5, 0.9, 0.7, 0.2, -1.2, -0.1]
}

/// Lifted common diffusion `Σ(X)_{(l,i),j} = σ⁰_ij(x^l, μ̄(X))`.
fn lifted(points: &[f64]) -> Vec<f64> {
    let n = points.len() / 2;
    let mu = EmpiricalMeasure::from_flat(points.to_vec(), 2).unwrap();
    let mut out = vec![0.0; n * 4];
    for l in 0..n {
        Coupled.sigma0(0.0, &points[2 * l..2 * l + 2], &mu, &mut out[4 * l..4 * l + 4]);
    }
    out
}

/// `½ Σ_j Σ_{(q,k)} ∂_{X_{q,k}} Σ_{(l,i),j} Σ_{(q,k),j}` by central differences
/// on the lifted vector.
fn lifted_correction(points: &[f64]) -> Vec<f64> {
    let big_n = points.len();
    let base = lifted(points);
    let mut out = vec![0.0; big_n];
    let h = 1e-5;
    for qk in 0..big_n {
        let mut up = points.to_vec();
        let mut down = points.to_vec();
        up[qk] += h;
        down[qk] -= h;
        let (su, sd) = (lifted(&up), lifted(&down));
        for li in 0..big_n {
            for j in 0..2 {
                let deriv = (su[li * 2 + j] - sd[li * 2 + j]) / (2.0 * h);
                out[li] += 0.5 * deriv * base[qk * 2 + j];
            }
        }
    }
    out
}

#[test]
fn analytic_derivatives_match_finite_differences() {
    let mu = EmpiricalMeasure::from_flat(cloud(), 2).unwrap();
    let check = fd_check_derivatives(&Coupled, 0.0, &[0.6, -0.4], &mu, 1e-6).unwrap();
    assert!(check.passed, "{check:?}");
}

#[test]
fn tensor_correction_matches_lifted_system() {
    let pts = cloud();
    let mu = EmpiricalMeasure::from_flat(pts.clone(), 2).unwrap();
    let oracle = lifted_correction(&pts);
    let opts = CorrectionOptions::default();
    for l in 0..pts.len() / 2 {
        let x = &pts[2 * l..2 * l + 2];
        for cs in [&Coupled as &dyn Coefficients, &NumericDerivatives(Coupled)] {
            let c = correction(cs, 0.0, x, &mu, opts).unwrap();
            for i in 0..2 {
                let ours = c.measure_part[i] + c.spatial0_part[i];
                assert!((ours - oracle[2 * l + i]).abs() < 1e-7, "atom {l} comp {i}: {ours} vs {}", oracle[2 * l + i]);
                assert_eq!(c.spatial1_part[i], 0.0);
            }
        }
    }
    // The displayed reading uses σ⁰ at x instead of at the atoms and misses
    // the lifted value.
    let displayed = CorrectionOptions { variant: CorrectionVariant::Displayed, ..opts };
    let c = correction(&Coupled, 0.0, &pts[0..2], &mu, displayed).unwrap();
    assert!((c.measure_part[0] + c.spatial0_part[0] - oracle[0]).abs() > 1e-4);
}

#[test]
fn two_dimensional_simulation_runs_for_every_scheme() {
    let bundle = NoiseBundle::generate(5, TimeGrid::new(0.5, 32).unwrap(), 40, 2).unwrap();
    let init = InitialLaw::Normal { mean: vec![0.5, -0.5], sd: 0.3 };
    for scheme in SchemeId::ALL {
        let path = simulate(&Coupled, scheme, CorrectionOptions::default(), &bundle, &init, "Coupled").unwrap();
        assert_eq!(path.terminal().len(), 80);
        assert!(path.terminal().iter().all(|y| y.is_finite()));
    }
}

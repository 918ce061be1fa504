use proptest::prelude::*;

use strato_core::lions::{fd_lions_derivative, FnFunctional, Functional, MeasureFunctional};
use strato_core::measure::{assignment_w2_squared, wasserstein2};
use strato_core::sim::{ito_euler_step, simulate, strat_heun_step, InitialLaw, SchemeId, StepNoise};
use strato_core::{Coefficients, CorrectionOptions, EmpiricalMeasure, Model, NoiseBundle, TimeGrid};

fn scalars(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 1..max)
}

fn pair(max: usize, dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..max).prop_flat_map(move |n| {
        (
            prop::collection::vec(-3.0f64..3.0, n * dim),
            prop::collection::vec(-3.0f64..3.0, n * dim),
        )
    })
}

fn w2(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
    wasserstein2(a, b).unwrap().value
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn w2_sorted_equals_assignment((a, b) in pair(40, 1)) {
        let mu = EmpiricalMeasure::from_scalars(&a).unwrap();
        let nu = EmpiricalMeasure::from_scalars(&b).unwrap();
        let sorted = w2(&mu, &nu);
        prop_assert!((sorted - assignment_w2_squared(&mu, &nu).sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn w2_metric_and_translation((a, b) in pair(20, 2), shift in prop::collection::vec(-2.0f64..2.0, 2)) {
        let mu = EmpiricalMeasure::from_flat(a, 2).unwrap();
        let nu = EmpiricalMeasure::from_flat(b, 2).unwrap();
        let d = w2(&mu, &nu);
        prop_assert_eq!(w2(&mu, &mu), 0.0);
        prop_assert!((d - w2(&nu, &mu)).abs() <= 1e-12);
        let mid = EmpiricalMeasure::from_flat(
            mu.as_flat().iter().zip(nu.as_flat()).map(|(x, y)| 0.3 * x + 0.7 * y).collect(),
            2,
        ).unwrap();
        prop_assert!(d <= w2(&mu, &mid) + w2(&mid, &nu) + 1e-12);
        let shifted = w2(&mu.translated(&shift).unwrap(), &nu.translated(&shift).unwrap());
        prop_assert!((shifted - d).abs() <= 1e-9);
    }

    #[test]
    fn lions_fd_is_linear(pts in scalars(12), j_seed in 0usize..100) {
        let mu = EmpiricalMeasure::from_scalars(&pts).unwrap();
        let j = j_seed % mu.len();
        let combo = FnFunctional::new(|m: &EmpiricalMeasure| {
            Functional::ExpMean.eval(m) * 0.1 + 2.0 * Functional::SecondMoment.eval(m)
        });
        let h = 1e-4;
        let lhs = fd_lions_derivative(&combo, &mu, j, h).unwrap();
        let a = fd_lions_derivative(&Functional::ExpMean, &mu, j, h).unwrap();
        let b = fd_lions_derivative(&Functional::SecondMoment, &mu, j, h).unwrap();
        let scale = 1.0 + lhs[0].abs();
        prop_assert!((lhs[0] - (0.1 * a[0] + 2.0 * b[0])).abs() <= 1e-6 * scale * mu.len() as f64);
    }

    #[test]
    fn lions_permutation_symmetric(pts in scalars(10), rot in 0usize..10) {
        let mu = EmpiricalMeasure::from_scalars(&pts).unwrap();
        let n = mu.len();
        let perm: Vec<usize> = (0..n).map(|l| (l + rot) % n).collect();
        let pm = mu.permuted(&perm).unwrap();
        for f in Functional::GALLERY {
            for (l, &src) in perm.iter().enumerate() {
                // Atom l of pm is atom src of mu.
                let a = f.analytic_lions(&pm, pm.point(l)).unwrap();
                let b = f.analytic_lions(&mu, mu.point(src)).unwrap();
                prop_assert!((a[0] - b[0]).abs() <= 1e-12 * (1.0 + a[0].abs()));
            }
        }
    }

    #[test]
    fn sigma0_lipschitz_in_w2((a, b) in pair(30, 1), c in -2.0f64..2.0) {
        let model = Model::LinearMean { beta: 0.1, c, a: 0.0, s: 0.3 };
        let mu = EmpiricalMeasure::from_scalars(&a).unwrap();
        let nu = EmpiricalMeasure::from_scalars(&b).unwrap();
        let (mut s, mut t) = ([0.0], [0.0]);
        model.sigma0(0.0, &[0.0], &mu, &mut s);
        model.sigma0(0.0, &[0.0], &nu, &mut t);
        let l = model.sigma0_w2_lipschitz().unwrap();
        prop_assert!((s[0] - t[0]).abs() <= l * w2(&mu, &nu) + 1e-12);
    }

    #[test]
    fn steps_are_exchangeable(pts in prop::collection::vec(-2.0f64..2.0, 2..30), rot in 0usize..30, seed in 0u64..1000) {
        let n = pts.len();
        let model = Model::FullLinear { beta: 0.1, c: 0.5, gamma: 0.3, s: 0.3 };
        let bundle = NoiseBundle::generate(seed, TimeGrid::new(1.0, 4).unwrap(), n, 1).unwrap();
        let idio: Vec<f64> = (0..n).map(|l| bundle.idio_increment(l, 0)[0]).collect();
        let perm: Vec<usize> = (0..n).map(|l| (l + rot) % n).collect();
        let p_pts: Vec<f64> = perm.iter().map(|&l| pts[l]).collect();
        let p_idio: Vec<f64> = perm.iter().map(|&l| idio[l]).collect();
        let mu = EmpiricalMeasure::from_scalars(&pts).unwrap();
        let pmu = EmpiricalMeasure::from_scalars(&p_pts).unwrap();
        let common = bundle.common_increment(0);
        let noise = StepNoise { common, idio: &idio };
        let pnoise = StepNoise { common, idio: &p_idio };
        let opts = CorrectionOptions::default();
        let a = strat_heun_step(&model, 0.0, &pts, &mu, noise, 0.25, true, opts, 0).unwrap();
        let b = strat_heun_step(&model, 0.0, &p_pts, &pmu, pnoise, 0.25, true, opts, 0).unwrap();
        let ae = ito_euler_step(&model, 0.0, &pts, &mu, noise, 0.25, 0).unwrap();
        let be = ito_euler_step(&model, 0.0, &p_pts, &pmu, pnoise, 0.25, 0).unwrap();
        for l in 0..n {
            prop_assert!((b[l] - a[perm[l]]).abs() <= 1e-12);
            prop_assert!((be[l] - ae[perm[l]]).abs() <= 1e-12);
        }
    }

    #[test]
    fn dirac_start_without_idiosyncratic_noise_stays_dirac(y0 in -2.0f64..2.0, seed in 0u64..1000) {
        let model = Model::LinearMean { beta: 0.1, c: 0.5, a: 0.2, s: 0.0 };
        let bundle = NoiseBundle::generate(seed, TimeGrid::new(1.0, 16).unwrap(), 7, 1).unwrap();
        for scheme in SchemeId::ALL {
            let path = simulate(&model, scheme, CorrectionOptions::default(), &bundle, &InitialLaw::Dirac(vec![y0]), "LinearMean").unwrap();
            for n in 0..=16 {
                let row = path.at(n);
                prop_assert!(row.iter().all(|y| *y == row[0]));
            }
        }
    }
}

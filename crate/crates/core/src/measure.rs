//! Equal-weight empirical measures and the 2-Wasserstein distance.

use crate::error::{Error, Result};
use crate::numeric::pairwise_sum_by;
use crate::rng::{standard_normal, Role, StreamKey};

/// Largest cloud for which the d > 1 distance is solved exactly.
pub const EXACT_ASSIGNMENT_MAX: usize = 256;
/// Number of random directions used by the sliced estimate.
pub const SLICED_PROJECTIONS: usize = 128;
const SLICED_SEED: u64 = 0x5EED_51CE;

/// `(1/N) Σ δ_{y^l}` over `N` points in `R^d`.
///
/// Points are stored flat and row-major. The first two moments are computed
/// once at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    points: Vec<f64>,
    dim: usize,
    mean: Vec<f64>,
    second_moment: f64,
}

impl EmpiricalMeasure {
    pub fn from_flat(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(crate::error::invalid("dim", "must be at least 1"));
        }
        if points.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        if !points.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: points.len() % dim,
            });
        }
        if let Some(pos) = points.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinitePoint { index: pos / dim });
        }
        let n = points.len() / dim;
        let mean = (0..dim)
            .map(|k| pairwise_sum_by(n, &|l| points[l * dim + k]) / n as f64)
            .collect();
        let second_moment = pairwise_sum_by(n, &|l| {
            points[l * dim..(l + 1) * dim].iter().map(|x| x * x).sum::<f64>()
        }) / n as f64;
        Ok(Self {
            points,
            dim,
            mean,
            second_moment,
        })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map(Vec::len).ok_or(Error::EmptyMeasure)?;
        let mut flat = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            flat.extend_from_slice(p);
        }
        Self::from_flat(flat, dim)
    }

    /// Convenience constructor for one-dimensional clouds.
    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        Self::from_flat(xs.to_vec(), 1)
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::from_flat(point.to_vec(), point.len())
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, l: usize) -> &[f64] {
        &self.points[l * self.dim..(l + 1) * self.dim]
    }

    pub fn points(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.points
    }

    /// First moment `∫ y μ(dy)`.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `(1/N) Σ |y^l|²`.
    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    /// Copy with coordinate `k` of atom `j` moved by `delta`.
    pub fn perturbed(&self, j: usize, k: usize, delta: f64) -> Result<Self> {
        let mut pts = self.points.clone();
        pts[j * self.dim + k] += delta;
        Self::from_flat(pts, self.dim)
    }

    pub fn translated(&self, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: shift.len(),
            });
        }
        let pts = self
            .points
            .chunks_exact(self.dim)
            .flat_map(|p| p.iter().zip(shift).map(|(x, a)| x + a))
            .collect();
        Self::from_flat(pts, self.dim)
    }

    /// Permuted copy: atom `l` of the result is atom `perm[l]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let pts = perm.iter().flat_map(|&l| self.point(l).iter().copied()).collect();
        Self::from_flat(pts, self.dim)
    }
}

pub fn mean(mu: &EmpiricalMeasure) -> Vec<f64> {
    mu.mean().to_vec()
}

pub fn second_moment(mu: &EmpiricalMeasure) -> f64 {
    mu.second_moment()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum W2Method {
    /// d = 1, sorted-sample pairing.
    Sorted,
    /// d > 1, exact optimal assignment.
    Assignment,
    /// d > 1 with more than [`EXACT_ASSIGNMENT_MAX`] atoms.
    Sliced { projections: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wasserstein {
    pub value: f64,
    pub method: W2Method,
}

impl Wasserstein {
    pub fn is_approximate(&self) -> bool {
        matches!(self.method, W2Method::Sliced { .. })
    }
}

fn check_compatible(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            got: nu.dim(),
        });
    }
    if mu.len() != nu.len() {
        return Err(Error::SizeMismatch {
            expected: mu.len(),
            got: nu.len(),
        });
    }
    Ok(())
}

/// W₂ between two clouds of the same size and dimension.
pub fn wasserstein2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<Wasserstein> {
    check_compatible(mu, nu)?;
    if mu.dim() == 1 {
        return Ok(Wasserstein {
            value: sorted_w2_squared(mu.as_flat(), nu.as_flat()).sqrt(),
            method: W2Method::Sorted,
        });
    }
    if mu.len() <= EXACT_ASSIGNMENT_MAX {
        Ok(Wasserstein {
            value: assignment_w2_squared(mu, nu).sqrt(),
            method: W2Method::Assignment,
        })
    } else {
        Ok(Wasserstein {
            value: sliced_w2_squared(mu, nu, SLICED_PROJECTIONS).sqrt(),
            method: W2Method::Sliced {
                projections: SLICED_PROJECTIONS,
            },
        })
    }
}

fn sorted_w2_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    pairwise_sum_by(a.len(), &|i| (a[i] - b[i]) * (a[i] - b[i])) / a.len() as f64
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact W₂² by optimal assignment over the squared-distance cost matrix.
/// Works for any dimension, including d = 1.
pub fn assignment_w2_squared(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let n = mu.len();
    let cost: Vec<f64> = (0..n * n)
        .map(|idx| squared_distance(mu.point(idx / n), nu.point(idx % n)))
        .collect();
    let assign = solve_assignment(&cost, n);
    pairwise_sum_by(n, &|i| cost[i * n + assign[i]]) / n as f64
}

/// Sliced W₂²: average of one-dimensional W₂² over random unit directions.
/// Never exceeds the exact W₂².
pub fn sliced_w2_squared(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, projections: usize) -> f64 {
    let d = mu.dim();
    let mut total = 0.0;
    let mut dir = vec![0.0; d];
    for p in 0..projections {
        for (k, slot) in dir.iter_mut().enumerate() {
            *slot = standard_normal(SLICED_SEED, StreamKey::new(Role::Projection, p, 0, k));
        }
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x /= norm);
        let project = |m: &EmpiricalMeasure| -> Vec<f64> {
            m.points()
                .map(|pt| pt.iter().zip(&dir).map(|(x, u)| x * u).sum())
                .collect()
        };
        total += sorted_w2_squared(&project(mu), &project(nu));
    }
    total / projections as f64
}

/// Minimum-cost perfect matching on a dense `n × n` cost matrix
/// (shortest augmenting paths with dual potentials, O(n³)).
///
/// Returns `assign` with row `i` matched to column `assign[i]`.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays; index 0 is the virtual root column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[col_owner[j] - 1] = j - 1;
    }
    assign
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(seed: u64, n: usize, d: usize) -> EmpiricalMeasure {
        let pts = (0..n * d)
            .map(|i| standard_normal(seed, StreamKey::new(Role::Cloud, i / d, 0, i % d)))
            .collect();
        EmpiricalMeasure::from_flat(pts, d).unwrap()
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(matches!(
            EmpiricalMeasure::from_flat(vec![], 1),
            Err(Error::EmptyMeasure)
        ));
        assert!(matches!(
            EmpiricalMeasure::from_scalars(&[1.0, f64::NAN]),
            Err(Error::NonFinitePoint { index: 1 })
        ));
        assert!(matches!(
            EmpiricalMeasure::from_flat(vec![1.0, f64::INFINITY], 2),
            Err(Error::NonFinitePoint { index: 0 })
        ));
        assert!(EmpiricalMeasure::from_points(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn moments() {
        let mu = EmpiricalMeasure::from_scalars(&[1.0, 3.0]).unwrap();
        assert_eq!(mean(&mu), vec![2.0]);
        assert_eq!(mean(&EmpiricalMeasure::dirac(&[4.5]).unwrap()), vec![4.5]);
        assert_eq!(second_moment(&EmpiricalMeasure::dirac(&[0.0]).unwrap()), 0.0);
        assert_eq!(
            second_moment(&EmpiricalMeasure::from_scalars(&[1.0, -1.0]).unwrap()),
            1.0
        );
        assert_eq!(second_moment(&EmpiricalMeasure::dirac(&[3.0, 4.0]).unwrap()), 25.0);
    }

    #[test]
    fn sample_mean_of_normal_cloud() {
        let mu = cloud(2024, 1000, 1);
        let m = mean(&mu)[0];
        // Frozen from the fixed seed.
        assert!(m.abs() < 0.1, "{m}");
    }

    #[test]
    fn w2_small_cases() {
        let a = EmpiricalMeasure::from_scalars(&[0.0, 2.0]).unwrap();
        let b = EmpiricalMeasure::from_scalars(&[3.0, 1.0]).unwrap();
        let w = wasserstein2(&a, &b).unwrap();
        assert_eq!(w.value, 1.0);
        assert_eq!(w.method, W2Method::Sorted);
        assert_eq!(wasserstein2(&a, &a).unwrap().value, 0.0);
        let c = EmpiricalMeasure::from_scalars(&[0.0]).unwrap();
        assert!(matches!(wasserstein2(&a, &c), Err(Error::SizeMismatch { .. })));
        let d2 = EmpiricalMeasure::dirac(&[0.0, 0.0]).unwrap();
        assert!(matches!(wasserstein2(&c, &d2), Err(Error::DimensionMismatch { .. })));
    }

    fn brute_force_w2_squared(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
        fn permute(k: usize, perm: &mut Vec<usize>, best: &mut f64, cost: &dyn Fn(&[usize]) -> f64) {
            if k == perm.len() {
                *best = best.min(cost(perm));
                return;
            }
            for i in k..perm.len() {
                perm.swap(k, i);
                permute(k + 1, perm, best, cost);
                perm.swap(k, i);
            }
        }
        let n = mu.len();
        let mut best = f64::INFINITY;
        let mut perm: Vec<usize> = (0..n).collect();
        let cost = |p: &[usize]| {
            p.iter()
                .enumerate()
                .map(|(i, &j)| squared_distance(mu.point(i), nu.point(j)))
                .sum::<f64>()
                / n as f64
        };
        permute(0, &mut perm, &mut best, &cost);
        best
    }

    #[test]
    fn assignment_matches_brute_force() {
        for seed in 0..20 {
            let n = 2 + (seed as usize % 6);
            let mu = cloud(seed, n, 2);
            let nu = cloud(seed + 1000, n, 2);
            let exact = assignment_w2_squared(&mu, &nu);
            let brute = brute_force_w2_squared(&mu, &nu);
            assert!((exact - brute).abs() < 1e-12, "{seed}: {exact} vs {brute}");
        }
    }

    #[test]
    fn sliced_is_a_lower_bound() {
        let mu = cloud(5, 64, 2);
        let nu = cloud(6, 64, 2);
        let exact = wasserstein2(&mu, &nu).unwrap();
        assert_eq!(exact.method, W2Method::Assignment);
        let sliced = sliced_w2_squared(&mu, &nu, SLICED_PROJECTIONS).sqrt();
        assert!(sliced <= exact.value + 1e-12);
        assert!(sliced > 0.0);
    }

    #[test]
    fn large_multidimensional_clouds_are_flagged() {
        let mu = cloud(8, 300, 2);
        let nu = cloud(9, 300, 2);
        let w = wasserstein2(&mu, &nu).unwrap();
        assert!(w.is_approximate());
        assert!(w.value > 0.0);
    }
}

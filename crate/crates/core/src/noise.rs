//! Common and idiosyncratic Brownian increments on a uniform grid.
//!
//! Each increment is a pure function of `(seed, role, particle, step, column)`
//! through the counter-based generator in [`crate::rng`], so a bundle never
//! depends on how generation was scheduled. Refinement inserts Brownian-bridge
//! midpoints, so every level of a dyadic family samples the same paths.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::rng::{standard_normal, Role, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if horizon <= 0.0 || !horizon.is_finite() {
            return Err(invalid("T", format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(invalid("n_steps", "need at least one step"));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// `t_n = n T / n_steps`; exact at both ends.
    pub fn time(&self, n: usize) -> f64 {
        if n == self.n_steps {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }

    pub fn refined(&self) -> Self {
        Self {
            horizon: self.horizon,
            n_steps: self.n_steps * 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    grid: TimeGrid,
    seed: u64,
    particles: usize,
    noise_dim: usize,
    /// `n_steps × m`, row-major.
    common: Vec<f64>,
    /// `N × n_steps × m`, row-major.
    idio: Vec<f64>,
}

impl NoiseBundle {
    /// Draw a bundle for `particles` particles with `noise_dim` columns.
    pub fn generate(seed: u64, grid: TimeGrid, particles: usize, noise_dim: usize) -> Result<Self> {
        if particles == 0 {
            return Err(invalid("N", "need at least one particle"));
        }
        if noise_dim == 0 {
            return Err(invalid("m", "need at least one noise column"));
        }
        let (n, m) = (grid.n_steps(), noise_dim);
        let sd = grid.dt().sqrt();
        let common = (0..n * m)
            .into_par_iter()
            .map(|idx| sd * standard_normal(seed, StreamKey::new(Role::Common, 0, idx / m, idx % m)))
            .collect();
        let idio = (0..particles * n * m)
            .into_par_iter()
            .map(|idx| {
                let (l, rest) = (idx / (n * m), idx % (n * m));
                sd * standard_normal(seed, StreamKey::new(Role::Idiosyncratic, l, rest / m, rest % m))
            })
            .collect();
        Ok(Self {
            grid,
            seed,
            particles,
            noise_dim,
            common,
            idio,
        })
    }

    /// Twice as many steps on the same paths.
    ///
    /// For a coarse increment `ΔW` over `dt`, the first fine increment is
    /// `ΔW/2 + sqrt(dt/4) Z` and the second is `ΔW` minus the first. The
    /// bridge draws are keyed by the coarse step count, so repeated
    /// refinement of the same bundle is deterministic.
    pub fn refine(&self) -> Self {
        let (n, m) = (self.grid.n_steps(), self.noise_dim);
        let coarse_dt = self.grid.dt();
        let bridge_sd = (coarse_dt / 4.0).sqrt();
        let tag = n as u32;
        let seed = self.seed;

        let split = |coarse: f64, key: StreamKey| -> (f64, f64) {
            let first = 0.5 * coarse + bridge_sd * standard_normal(seed, key.with_tag(tag));
            (first, coarse - first)
        };

        let mut common = vec![0.0; 2 * n * m];
        common
            .par_chunks_mut(2 * m)
            .enumerate()
            .for_each(|(step, fine)| {
                for j in 0..m {
                    let (a, b) = split(self.common[step * m + j], StreamKey::new(Role::BridgeCommon, 0, step, j));
                    fine[j] = a;
                    fine[m + j] = b;
                }
            });

        let mut idio = vec![0.0; self.particles * 2 * n * m];
        idio.par_chunks_mut(2 * n * m)
            .enumerate()
            .for_each(|(l, fine_row)| {
                let coarse_row = &self.idio[l * n * m..(l + 1) * n * m];
                for step in 0..n {
                    for j in 0..m {
                        let (a, b) = split(
                            coarse_row[step * m + j],
                            StreamKey::new(Role::BridgeIdiosyncratic, l, step, j),
                        );
                        fine_row[2 * step * m + j] = a;
                        fine_row[(2 * step + 1) * m + j] = b;
                    }
                }
            });

        Self {
            grid: self.grid.refined(),
            seed,
            particles: self.particles,
            noise_dim: m,
            common,
            idio,
        }
    }

    /// Bundle followed by `levels` successive refinements.
    pub fn dyadic_family(&self, levels: usize) -> Vec<NoiseBundle> {
        let mut out = vec![self.clone()];
        for _ in 0..levels {
            let next = out.last().expect("non-empty").refine();
            out.push(next);
        }
        out
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn particles(&self) -> usize {
        self.particles
    }
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// `ΔW⁰` over step `n`, all columns.
    pub fn common_increment(&self, n: usize) -> &[f64] {
        &self.common[n * self.noise_dim..(n + 1) * self.noise_dim]
    }

    /// `ΔW^{1,l}` over step `n`, all columns.
    pub fn idio_increment(&self, l: usize, n: usize) -> &[f64] {
        let m = self.noise_dim;
        let base = (l * self.grid.n_steps() + n) * m;
        &self.idio[base..base + m]
    }

    pub fn common_table(&self) -> &[f64] {
        &self.common
    }

    pub fn idio_table(&self) -> &[f64] {
        &self.idio
    }

    /// `W⁰` at grid times `t_0 … t_n` for column `j`.
    pub fn common_path(&self, j: usize) -> Vec<f64> {
        let mut path = Vec::with_capacity(self.grid.n_steps() + 1);
        let mut w = 0.0;
        path.push(w);
        for n in 0..self.grid.n_steps() {
            w += self.common_increment(n)[j];
            path.push(w);
        }
        path
    }

    /// `W^{1,l}` at grid times for column `j`.
    pub fn idio_path(&self, l: usize, j: usize) -> Vec<f64> {
        let mut path = Vec::with_capacity(self.grid.n_steps() + 1);
        let mut w = 0.0;
        path.push(w);
        for n in 0..self.grid.n_steps() {
            w += self.idio_increment(l, n)[j];
            path.push(w);
        }
        path
    }

    /// Little-endian dump: `seed: u64, N: u64, m: u64, n_steps: u64, T: f64`,
    /// then the common table and the idiosyncratic table as `f64`, row-major.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.particles as u64).to_le_bytes())?;
        w.write_all(&(self.noise_dim as u64).to_le_bytes())?;
        w.write_all(&(self.grid.n_steps() as u64).to_le_bytes())?;
        w.write_all(&self.grid.horizon().to_le_bytes())?;
        for x in self.common.iter().chain(&self.idio) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut next = |r: &mut dyn Read| -> Result<[u8; 8]> {
            r.read_exact(&mut word)
                .map_err(|e| Error::Format(format!("truncated input: {e}")))?;
            Ok(word)
        };
        let seed = u64::from_le_bytes(next(&mut r)?);
        let particles = u64::from_le_bytes(next(&mut r)?) as usize;
        let noise_dim = u64::from_le_bytes(next(&mut r)?) as usize;
        let n_steps = u64::from_le_bytes(next(&mut r)?) as usize;
        let horizon = f64::from_le_bytes(next(&mut r)?);
        let grid = TimeGrid::new(horizon, n_steps).map_err(|e| Error::Format(e.to_string()))?;
        if particles == 0 || noise_dim == 0 {
            return Err(Error::Format("zero particles or noise columns".into()));
        }
        let n_common = n_steps
            .checked_mul(noise_dim)
            .ok_or_else(|| Error::Format("table size overflow".into()))?;
        let n_idio = n_common
            .checked_mul(particles)
            .ok_or_else(|| Error::Format("table size overflow".into()))?;
        let mut read_table = |len: usize| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; len * 8];
            r.read_exact(&mut bytes)
                .map_err(|e| Error::Format(format!("truncated table: {e}")))?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let common = read_table(n_common)?;
        let idio = read_table(n_idio)?;
        Ok(Self {
            grid,
            seed,
            particles,
            noise_dim,
            common,
            idio,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_var(xs: &[f64], center: impl Fn(usize) -> f64) -> f64 {
        xs.iter()
            .enumerate()
            .map(|(i, x)| (x - center(i)).powi(2))
            .sum::<f64>()
            / xs.len() as f64
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(0.0, 4).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        let g = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(g.time(0), 0.0);
        assert_eq!(g.time(3), 1.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let a = NoiseBundle::generate(3, g, 5, 2).unwrap();
        let b = NoiseBundle::generate(3, g, 5, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, NoiseBundle::generate(4, g, 5, 2).unwrap());
        assert!(NoiseBundle::generate(3, g, 0, 1).is_err());
    }

    #[test]
    fn increment_variance_and_independence() {
        let dt = 1.0 / 256.0;
        let g = TimeGrid::new(100_000.0 * dt, 100_000).unwrap();
        let b = NoiseBundle::generate(17, g, 1, 1).unwrap();
        let var = sample_var(b.common_table(), |_| 0.0);
        assert!((var / dt - 1.0).abs() < 0.05, "var/dt = {}", var / dt);

        let (x, y) = (b.common_table(), b.idio_table());
        let cov: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / x.len() as f64;
        let rho = cov / (sample_var(x, |_| 0.0) * sample_var(y, |_| 0.0)).sqrt();
        assert!(rho.abs() < 0.02, "rho = {rho}");
    }

    #[test]
    fn refinement_preserves_coarse_increments() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let coarse = NoiseBundle::generate(9, g, 3, 2).unwrap();
        let fine = coarse.refine();
        assert_eq!(fine.grid().n_steps(), 32);
        for n in 0..16 {
            for j in 0..2 {
                let s = fine.common_increment(2 * n)[j] + fine.common_increment(2 * n + 1)[j];
                assert!((s - coarse.common_increment(n)[j]).abs() <= 1e-15);
                for l in 0..3 {
                    let s = fine.idio_increment(l, 2 * n)[j] + fine.idio_increment(l, 2 * n + 1)[j];
                    assert!((s - coarse.idio_increment(l, n)[j]).abs() <= 1e-15);
                }
            }
        }
        let finer = fine.refine();
        for n in 0..16 {
            let s: f64 = (0..4).map(|q| finer.common_increment(4 * n + q)[0]).sum();
            assert!((s - coarse.common_increment(n)[0]).abs() <= 1e-15);
        }
        assert_eq!(coarse.refine(), fine);
    }

    #[test]
    fn paths_agree_across_levels() {
        let g = TimeGrid::new(2.0, 8).unwrap();
        let fam = NoiseBundle::generate(1, g, 2, 1).unwrap().dyadic_family(3);
        let base = fam[0].common_path(0);
        for (lvl, b) in fam.iter().enumerate() {
            let p = b.common_path(0);
            let stride = 1 << lvl;
            for (n, w) in base.iter().enumerate() {
                assert!((p[n * stride] - w).abs() <= 1e-14, "level {lvl} step {n}");
            }
        }
    }

    #[test]
    fn bridge_midpoint_variance() {
        let g = TimeGrid::new(100_000.0, 100_000).unwrap();
        let coarse = NoiseBundle::generate(5, g, 1, 1).unwrap();
        let fine = coarse.refine();
        let firsts: Vec<f64> = (0..100_000).map(|n| fine.common_increment(2 * n)[0]).collect();
        let var = sample_var(&firsts, |n| 0.5 * coarse.common_increment(n)[0]);
        let target = fine.grid().dt() / 2.0;
        assert!((var / target - 1.0).abs() < 0.05, "ratio {}", var / target);
    }

    #[test]
    fn dump_and_load() {
        let g = TimeGrid::new(0.5, 4).unwrap();
        let b = NoiseBundle::generate(77, g, 3, 2).unwrap();
        let mut bytes = Vec::new();
        b.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 5 * 8 + (4 * 2 + 3 * 4 * 2) * 8);
        assert_eq!(&bytes[..8], &77u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &4u64.to_le_bytes());
        assert_eq!(NoiseBundle::read_from(bytes.as_slice()).unwrap(), b);
        assert!(matches!(
            NoiseBundle::read_from(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
    }
}

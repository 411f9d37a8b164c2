//! Truncated cylindrical Brownian motion on a time grid, Itô sums of step
//! processes and the accumulated processes `zeta`.
//!
//! Randomness is counter based: direction `n` of seed `s` always reads the
//! same ChaCha stream, so a path does not depend on how many other
//! directions are drawn or in which order. Refinement inserts one node per
//! cell using the Brownian bridge, which keeps the coarse increments exactly
//! (they are the pairwise sums of the fine ones).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::grid::Field;
use crate::time_grid::TimeGrid;

/// Brownian increments `dw_n(t_i)` for `J` independent directions.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePath {
    grid: TimeGrid,
    directions: usize,
    seed: u64,
    level: u32,
    increments: Vec<f64>,
}

fn stream(seed: u64, level: u32, direction: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((level as u64) << 32) | direction as u64);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws `J` independent Brownian paths sampled on `grid`.
pub fn generate_noise(directions: usize, grid: &TimeGrid, seed: u64) -> Result<NoisePath> {
    if directions == 0 {
        return Err(invalid("J", "need at least one noise direction"));
    }
    let m = grid.steps();
    let mut increments = vec![0.0; m * directions];
    for n in 0..directions {
        let mut rng = stream(seed, 0, n);
        for i in 0..m {
            increments[i * directions + n] = grid.dt(i).sqrt() * normal(&mut rng);
        }
    }
    Ok(NoisePath {
        grid: grid.clone(),
        directions,
        seed,
        level: 0,
        increments,
    })
}

impl NoisePath {
    /// A path with prescribed increments (laid out step-major).
    pub fn from_increments(grid: TimeGrid, directions: usize, increments: Vec<f64>) -> Result<Self> {
        if directions == 0 || increments.len() != grid.steps() * directions {
            return Err(Error::ShapeMismatch(format!(
                "expected {} increments, got {}",
                grid.steps() * directions,
                increments.len()
            )));
        }
        Ok(Self {
            grid,
            directions,
            seed: 0,
            level: 0,
            increments,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn directions(&self) -> usize {
        self.directions
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of bridge refinements applied since generation.
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn increment(&self, step: usize, direction: usize) -> f64 {
        self.increments[step * self.directions + direction]
    }

    pub fn increments_at(&self, step: usize) -> &[f64] {
        &self.increments[step * self.directions..(step + 1) * self.directions]
    }

    /// `w_n(t_i)` for `i = 0..=M`.
    pub fn path(&self, direction: usize) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.grid.steps() + 1);
        let mut acc = 0.0;
        w.push(0.0);
        for i in 0..self.grid.steps() {
            acc += self.increment(i, direction);
            w.push(acc);
        }
        w
    }

    /// Brownian-bridge refinement onto the arithmetic midpoint grid.
    pub fn refine(&self) -> NoisePath {
        self.refine_with(&self.grid.refined())
            .expect("midpoint refinement is always nested")
    }

    /// Brownian-bridge refinement onto `finer`, which must split every cell
    /// of the current grid into exactly two.
    pub fn refine_with(&self, finer: &TimeGrid) -> Result<NoisePath> {
        let m = self.grid.steps();
        if finer.steps() != 2 * m
            || (0..=m).any(|i| (finer.times()[2 * i] - self.grid.times()[i]).abs() > 1e-12 * (1.0 + self.grid.times()[i]))
        {
            return Err(invalid("finer", "grid does not split every cell in two"));
        }
        let j = self.directions;
        let level = self.level + 1;
        let mut increments = vec![0.0; 2 * m * j];
        for n in 0..j {
            let mut rng = stream(self.seed, level, n);
            for i in 0..m {
                let (a, b) = (self.grid.times()[i], self.grid.times()[i + 1]);
                let h = b - a;
                let theta = (finer.times()[2 * i + 1] - a) / h;
                let total = self.increment(i, n);
                let first = theta * total + (theta * (1.0 - theta) * h).sqrt() * normal(&mut rng);
                increments[2 * i * j + n] = first;
                increments[(2 * i + 1) * j + n] = total - first;
            }
        }
        Ok(NoisePath {
            grid: finer.clone(),
            directions: j,
            seed: self.seed,
            level,
            increments,
        })
    }

    /// Sums consecutive pairs of increments (inverse of [`NoisePath::refine`]).
    pub fn coarsen(&self) -> Result<NoisePath> {
        let m = self.grid.steps();
        if m % 2 != 0 {
            return Err(invalid("steps", "coarsening needs an even number of steps"));
        }
        let times: Vec<f64> = self.grid.times().iter().step_by(2).copied().collect();
        let j = self.directions;
        let mut increments = vec![0.0; m / 2 * j];
        for i in 0..m / 2 {
            for n in 0..j {
                increments[i * j + n] = self.increment(2 * i, n) + self.increment(2 * i + 1, n);
            }
        }
        Ok(NoisePath {
            grid: TimeGrid::from_times(times)?,
            directions: j,
            seed: self.seed,
            level: self.level.saturating_sub(1),
            increments,
        })
    }

    /// Same path up to `t_step`; increments from `step` on redrawn from `alt_seed`.
    pub fn resampled_after(&self, step: usize, alt_seed: u64) -> NoisePath {
        let mut out = self.clone();
        let j = self.directions;
        for n in 0..j {
            let mut rng = stream(alt_seed ^ 0x9e37_79b9_7f4a_7c15, u32::MAX, n);
            for i in step..self.grid.steps() {
                out.increments[i * j + n] = self.grid.dt(i).sqrt() * normal(&mut rng);
            }
        }
        out
    }

    /// Increments of `self` before `at`, of `other` from `at` on.
    pub fn splice(&self, other: &NoisePath, at: usize) -> Result<NoisePath> {
        if self.grid != other.grid || self.directions != other.directions {
            return Err(Error::ShapeMismatch("noise paths live on different grids".into()));
        }
        let mut out = self.clone();
        let j = self.directions;
        let from = at.min(self.grid.steps()) * j;
        out.increments[from..].copy_from_slice(&other.increments[from..]);
        Ok(out)
    }

    /// Restriction to steps `start..end`.
    pub fn window(&self, start: usize, end: usize) -> Result<NoisePath> {
        let grid = self.grid.window(start, end)?;
        let j = self.directions;
        Ok(NoisePath {
            grid,
            directions: j,
            seed: self.seed,
            level: self.level,
            increments: self.increments[start * j..end * j].to_vec(),
        })
    }
}

/// Itô sum `sum_i sum_n G(t_i)(e_n) dw_n(t_i)` of a step process.
///
/// `g(noise, i, n)` returns the value of the process on cell `i` applied to
/// direction `n`; it may read the noise. Each cell value is re-evaluated on a
/// path whose increments from `t_i` on are redrawn, and any change is
/// reported as [`Error::NotAdapted`].
pub fn ito_integral<G>(g: G, noise: &NoisePath) -> Result<Field>
where
    G: Fn(&NoisePath, usize, usize) -> Field,
{
    let steps = noise.grid().steps();
    let mut acc: Option<Field> = None;
    for i in 0..steps {
        let alt = noise.resampled_after(i, noise.seed().wrapping_add(i as u64 + 1));
        for n in 0..noise.directions() {
            let value = g(noise, i, n);
            if g(&alt, i, n) != value {
                return Err(Error::NotAdapted { step: i });
            }
            let dw = noise.increment(i, n);
            match acc.as_mut() {
                Some(a) => a.axpy(dw.into(), &value),
                None => acc = Some(value.scaled(dw.into())),
            }
        }
    }
    acc.ok_or_else(|| invalid("noise", "empty time grid"))
}

/// Accumulated Itô sums `zeta_j(t_i) = sum_{l<i} sum_n b_{j,n}(t_l) dw_n(t_l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZetaPath {
    grid: TimeGrid,
    generators: usize,
    values: Vec<f64>,
}

/// Builds `zeta` from integrands `b(step, generator, direction)`.
pub fn zeta_path(
    b: impl Fn(usize, usize, usize) -> f64,
    generators: usize,
    noise: &NoisePath,
) -> ZetaPath {
    let m = noise.grid().steps();
    let mut values = vec![0.0; (m + 1) * generators];
    for i in 0..m {
        for g in 0..generators {
            let inc: f64 = (0..noise.directions())
                .map(|n| b(i, g, n) * noise.increment(i, n))
                .sum();
            values[(i + 1) * generators + g] = values[i * generators + g] + inc;
        }
    }
    ZetaPath {
        grid: noise.grid().clone(),
        generators,
        values,
    }
}

impl ZetaPath {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn generators(&self) -> usize {
        self.generators
    }

    pub fn at_step(&self, step: usize) -> &[f64] {
        &self.values[step * self.generators..(step + 1) * self.generators]
    }

    pub fn value(&self, step: usize, generator: usize) -> f64 {
        self.values[step * self.generators + generator]
    }

    /// Piecewise-linear reconstruction between grid nodes.
    pub fn at_time(&self, t: f64, generator: usize) -> f64 {
        let times = self.grid.times();
        if t <= times[0] {
            return self.value(0, generator);
        }
        let m = self.grid.steps();
        if t >= times[m] {
            return self.value(m, generator);
        }
        let i = times.partition_point(|&s| s <= t) - 1;
        let lam = (t - times[i]) / (times[i + 1] - times[i]);
        (1.0 - lam) * self.value(i, generator) + lam * self.value(i + 1, generator)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TorusGrid;
    use num_complex::Complex64;

    #[test]
    fn single_step_single_draw() {
        let g = TimeGrid::uniform(1.0, 1).unwrap();
        let a = generate_noise(1, &g, 5).unwrap();
        let mut rng = stream(5, 0, 0);
        assert_eq!(a.increment(0, 0), normal(&mut rng));
    }

    #[test]
    fn reproducible_and_seed_sensitive() {
        let g = TimeGrid::uniform(1.0, 64).unwrap();
        assert_eq!(generate_noise(3, &g, 9).unwrap(), generate_noise(3, &g, 9).unwrap());
        assert_ne!(generate_noise(3, &g, 9).unwrap(), generate_noise(3, &g, 10).unwrap());
    }

    #[test]
    fn direction_independent_of_ordering() {
        let g = TimeGrid::uniform(1.0, 32).unwrap();
        let a = generate_noise(1, &g, 4).unwrap();
        let b = generate_noise(5, &g, 4).unwrap();
        for i in 0..32 {
            assert_eq!(a.increment(i, 0), b.increment(i, 0));
        }
    }

    #[test]
    fn refine_then_coarsen_is_identity() {
        let g = TimeGrid::uniform(2.0, 16).unwrap();
        let a = generate_noise(2, &g, 1).unwrap();
        let fine = a.refine();
        assert_eq!(fine.grid().steps(), 32);
        let back = fine.coarsen().unwrap();
        for i in 0..16 {
            for n in 0..2 {
                assert!((back.increment(i, n) - a.increment(i, n)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn resampling_keeps_prefix() {
        let g = TimeGrid::uniform(1.0, 20).unwrap();
        let a = generate_noise(2, &g, 3).unwrap();
        let b = a.resampled_after(7, 99);
        for i in 0..20 {
            let same = a.increments_at(i) == b.increments_at(i);
            assert_eq!(same, i < 7, "step {i}");
        }
        let s = a.splice(&b, 7).unwrap();
        assert_eq!(s, b);
    }

    #[test]
    fn ito_integral_examples() {
        let tg = TimeGrid::uniform(1.0, 8).unwrap();
        let noise = generate_noise(2, &tg, 17).unwrap();
        let grid = TorusGrid::new(1, 8).unwrap();
        let x = Field::from_fn(grid, 1, |p, _| Complex64::new(p[0].cos(), 0.0));
        let out = ito_integral(
            |_, _, n| if n == 0 { x.clone() } else { Field::zeros(grid, 1) },
            &noise,
        )
        .unwrap();
        let w1 = noise.path(0)[8];
        assert!((&out - &x.scaled(w1.into())).sup_norm() < 1e-12);

        let zero = ito_integral(|_, _, _| Field::zeros(grid, 1), &noise).unwrap();
        assert_eq!(zero.sup_norm(), 0.0);
    }

    #[test]
    fn anticipating_integrand_rejected() {
        let tg = TimeGrid::uniform(1.0, 8).unwrap();
        let noise = generate_noise(1, &tg, 2).unwrap();
        let grid = TorusGrid::new(1, 4).unwrap();
        let peek = |nz: &NoisePath, i: usize, _n: usize| {
            let future = nz.increment((i + 1).min(7), 0);
            Field::from_fn(grid, 1, |_, _| Complex64::new(future, 0.0))
        };
        assert!(matches!(ito_integral(peek, &noise), Err(Error::NotAdapted { .. })));
        let adapted = |nz: &NoisePath, i: usize, _n: usize| {
            let past: f64 = nz.path(0)[i];
            Field::from_fn(grid, 1, |_, _| Complex64::new(past, 0.0))
        };
        assert!(ito_integral(adapted, &noise).is_ok());
    }

    #[test]
    fn zeta_examples() {
        let tg = TimeGrid::uniform(1.0, 16).unwrap();
        let noise = generate_noise(1, &tg, 8).unwrap();
        let z0 = zeta_path(|_, _, _| 0.0, 2, &noise);
        assert!((0..=16).all(|i| z0.at_step(i) == [0.0, 0.0]));
        let z1 = zeta_path(|_, _, _| 1.0, 1, &noise);
        let w = noise.path(0);
        for i in 0..=16 {
            assert!((z1.value(i, 0) - w[i]).abs() < 1e-14);
        }
        let sign = |i: usize| if i < 8 { 1.0 } else { -1.0 };
        let zs = zeta_path(|i, _, _| sign(i), 1, &noise);
        let mut acc = 0.0;
        for i in 0..16 {
            acc += sign(i) * noise.increment(i, 0);
            assert_eq!(zs.value(i + 1, 0), acc);
        }
        let mid = 0.5 * (tg.times()[3] + tg.times()[4]);
        assert!((z1.at_time(mid, 0) - 0.5 * (w[3] + w[4])).abs() < 1e-14);
    }
}

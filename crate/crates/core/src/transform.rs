//! Removal of gradient noise by the random shift `U(t) = S_B(zeta(t)) U~(t)`.
//!
//! With x-independent `sigma`, `B_n u = sum_j sigma_jkn d_j u_k` is built
//! from the commuting translation generators `B_(j,k) = e_k d_j`, one per
//! axis and component. `S_B(a)` translates component `k` by
//! `(a_(1,k), ..., a_(d,k))`, which is an exact phase in Fourier space.
//! Generator `(j, k)` has index `j * N + k`.

use num_complex::Complex64;

use crate::coefficients::{OperatorPath, SigmaPath, SpatialTensor};
use crate::error::{invalid, Error, Result};
use crate::evolution::{solve_linear_spectral, Forcing, LinearProblem, SpaceTimePath};
use crate::grid::{Field, SpectralField};
use crate::noise::{zeta_path, NoisePath, ZetaPath};
use crate::time_grid::TimeGrid;

/// `S_B(a)` for one shift vector `a` (one entry per generator).
#[derive(Clone, Debug, PartialEq)]
pub struct Shift {
    dim: usize,
    components: usize,
    amounts: Vec<f64>,
}

impl Shift {
    pub fn new(dim: usize, components: usize, amounts: Vec<f64>) -> Result<Self> {
        if amounts.len() != dim * components {
            return Err(Error::ShapeMismatch(format!(
                "{} shift amounts for {dim} x {components} generators",
                amounts.len()
            )));
        }
        Ok(Self {
            dim,
            components,
            amounts,
        })
    }

    pub fn amounts(&self) -> &[f64] {
        &self.amounts
    }

    pub fn inverse(&self) -> Shift {
        Shift {
            amounts: self.amounts.iter().map(|a| -a).collect(),
            ..self.clone()
        }
    }

    pub fn compose(&self, other: &Shift) -> Result<Shift> {
        Shift::new(
            self.dim,
            self.components,
            self.amounts.iter().zip(&other.amounts).map(|(a, b)| a + b).collect(),
        )
    }

    pub fn apply_spectral(&self, s: &mut SpectralField) {
        let grid = *s.grid();
        let n = self.components;
        for slot in 0..grid.len() {
            let kappa = grid.odd_wavevector(slot);
            for k in 0..n {
                let phase: f64 = (0..self.dim).map(|j| self.amounts[j * n + k] * kappa[j]).sum();
                if phase != 0.0 {
                    let v = s.get(slot, k) * Complex64::from_polar(1.0, phase);
                    s.set(slot, k, v);
                }
            }
        }
    }

    pub fn apply(&self, f: &Field) -> Result<Field> {
        if f.grid().dim() != self.dim || f.components() != self.components {
            return Err(Error::ShapeMismatch("shift and field differ in shape".into()));
        }
        if self.amounts.iter().all(|&a| a == 0.0) {
            return Ok(f.clone());
        }
        let mut s = f.to_spectral();
        self.apply_spectral(&mut s);
        Ok(s.to_physical())
    }
}

/// `S_B(a)` as a field map; rejects x-dependent `sigma`.
pub fn shift_operator(amounts: &[f64], sigma: &SigmaPath) -> Result<Shift> {
    if !sigma.is_x_independent() {
        return Err(Error::NotXIndependent);
    }
    Shift::new(sigma.dim(), sigma.components(), amounts.to_vec())
}

fn generator_count(sigma: &SigmaPath) -> usize {
    sigma.dim() * sigma.components()
}

/// `zeta_(j,k)(t_i) = sum_n int_0^{t_i} sigma_jkn dw_n`.
pub fn zeta_of(sigma: &SigmaPath, noise: &NoisePath) -> Result<ZetaPath> {
    if !sigma.is_x_independent() {
        return Err(Error::NotXIndependent);
    }
    let nj = sigma.directions();
    let per_step: Vec<Vec<f64>> = (0..sigma.times().steps()).map(|i| sigma.sigma_at(i, 0)).collect();
    Ok(zeta_path(
        |i, g, n| if n < nj { per_step[i][g * nj + n] } else { 0.0 },
        generator_count(sigma),
        noise,
    ))
}

/// `A~ = A + 1/2 [B, B]`: the drift correction `-Sigma` added as extra
/// constant-in-x terms with weights `w_r w_s` of the `sigma` terms.
pub fn build_tilde_a(a: &OperatorPath, sigma: &SigmaPath) -> Result<OperatorPath> {
    if a.m() != 1 {
        return Err(invalid("m", "the drift correction is defined for second-order operators"));
    }
    if !sigma.is_x_independent() {
        return Err(Error::NotXIndependent);
    }
    if sigma.dim() != a.dim() || sigma.components() != a.components() {
        return Err(Error::ShapeMismatch("noise coefficients do not match the operator".into()));
    }
    if sigma.is_zero() {
        return Ok(a.clone());
    }
    let (d, n, nj) = (a.dim(), a.components(), sigma.directions());
    let terms = sigma.terms();
    let weights = sigma.weights();
    let mut out = a.clone();
    for r in 0..terms.len() {
        for s in r..terms.len() {
            let (tr, ts) = (terms[r].at(0), terms[s].at(0));
            let mut block = vec![Complex64::new(0.0, 0.0); a.block_len()];
            let mut nonzero = false;
            for i in 0..d {
                for j in 0..d {
                    for k in 0..n {
                        let mut acc = 0.0;
                        for nn in 0..nj {
                            acc += tr[(i * n + k) * nj + nn] * ts[(j * n + k) * nj + nn];
                            if r != s {
                                acc += ts[(i * n + k) * nj + nn] * tr[(j * n + k) * nj + nn];
                            }
                        }
                        if acc != 0.0 {
                            nonzero = true;
                        }
                        block[((i * d + j) * n + k) * n + k] = Complex64::new(-0.5 * acc, 0.0);
                    }
                }
            }
            if nonzero {
                let w: Vec<f64> = weights[r].iter().zip(&weights[s]).map(|(x, y)| x * y).collect();
                out = out.with_extra_term(SpatialTensor::constant(block), w)?;
            }
        }
    }
    Ok(out)
}

/// `[B, g~] = sum_n B_n g~_n` at one step, computed spectrally.
pub fn commutator_forcing(sigma: &SigmaPath, step: usize, g: &[Field]) -> Result<Field> {
    if !sigma.is_x_independent() {
        return Err(Error::NotXIndependent);
    }
    let grid = *sigma.grid();
    let n = sigma.components();
    let nj = sigma.directions();
    let s = sigma.sigma_at(step, 0);
    let mut out = SpectralField::zeros(grid, n);
    for (nn, gn) in g.iter().enumerate().take(nj) {
        let gh = gn.to_spectral();
        for slot in 0..grid.len() {
            let kappa = grid.odd_wavevector(slot);
            for k in 0..n {
                let beta: f64 = (0..grid.dim()).map(|j| s[(j * n + k) * nj + nn] * kappa[j]).sum();
                if beta != 0.0 {
                    let v = out.get(slot, k) + Complex64::new(0.0, beta) * gh.get(slot, k);
                    out.set(slot, k, v);
                }
            }
        }
    }
    Ok(out.to_physical())
}

/// Data of the problem for `U~` (no gradient noise) and the realized `zeta`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedProblem {
    pub problem: LinearProblem,
    pub zeta: ZetaPath,
}

fn forcing_path(f: &Forcing, times: &TimeGrid) -> Result<Option<SpaceTimePath>> {
    Ok(match f {
        Forcing::Zero => None,
        Forcing::Constant(v) => Some(SpaceTimePath::new(times.clone(), vec![v.clone(); times.steps() + 1], 0)?),
        Forcing::Path(p) => Some(p.clone()),
    })
}

/// `A~`, `f~ - [B, g~]` and `g~` from `p` and the realized `zeta`.
pub fn transform_problem(p: &LinearProblem, noise: &NoisePath) -> Result<TransformedProblem> {
    p.validate(noise)?;
    let sigma = &p.sigma;
    let zeta = zeta_of(sigma, noise)?;
    if sigma.is_zero() {
        return Ok(TransformedProblem {
            problem: p.clone(),
            zeta,
        });
    }
    let grid = *p.grid();
    let n = p.components();
    let times = p.times().clone();
    let shifts: Vec<Shift> = (0..=times.steps())
        .map(|i| shift_operator(zeta.at_step(i), sigma).map(|s| s.inverse()))
        .collect::<Result<_>>()?;

    let g_paths: Vec<Option<SpaceTimePath>> = p
        .noise_forcing
        .iter()
        .map(|g| forcing_path(g, &times))
        .collect::<Result<_>>()?;
    let g_tilde: Vec<Option<SpaceTimePath>> = g_paths
        .iter()
        .map(|g| {
            g.as_ref()
                .map(|path| -> Result<SpaceTimePath> {
                    let slices = (0..=times.steps())
                        .map(|i| shifts[i].apply(path.slice(i)))
                        .collect::<Result<_>>()?;
                    SpaceTimePath::new(times.clone(), slices, path.seed())
                })
                .transpose()
        })
        .collect::<Result<_>>()?;

    let f_path = forcing_path(&p.forcing, &times)?;
    let any_g = g_tilde.iter().any(Option::is_some);
    let forcing = if f_path.is_none() && !any_g {
        Forcing::Zero
    } else {
        let slices = (0..=times.steps())
            .map(|i| -> Result<Field> {
                let mut acc = match &f_path {
                    Some(f) => shifts[i].apply(f.slice(i))?,
                    None => Field::zeros(grid, n),
                };
                if any_g {
                    let gs: Vec<Field> = g_tilde
                        .iter()
                        .map(|g| g.as_ref().map_or_else(|| Field::zeros(grid, n), |g| g.slice(i).clone()))
                        .collect();
                    acc -= &commutator_forcing(sigma, i.min(times.steps() - 1), &gs)?;
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        Forcing::Path(SpaceTimePath::new(times.clone(), slices, noise.seed())?)
    };

    let problem = LinearProblem {
        operator: build_tilde_a(&p.operator, sigma)?,
        sigma: SigmaPath::zero(&grid, &times, n, sigma.directions()),
        forcing,
        noise_forcing: g_tilde.into_iter().map(|g| g.map_or(Forcing::Zero, Forcing::Path)).collect(),
        initial: p.initial.clone(),
        alpha: p.alpha,
    };
    Ok(TransformedProblem { problem, zeta })
}

/// `U(t_i) = S_B(zeta(t_i)) U~(t_i)`.
pub fn untransform(u_tilde: &SpaceTimePath, zeta: &ZetaPath, sigma: &SigmaPath) -> Result<SpaceTimePath> {
    if zeta.grid().steps() != u_tilde.times().steps() {
        return Err(Error::ShapeMismatch("zeta and path use different time grids".into()));
    }
    let slices = (0..=zeta.grid().steps())
        .map(|i| shift_operator(zeta.at_step(i), sigma)?.apply(u_tilde.slice(i)))
        .collect::<Result<_>>()?;
    SpaceTimePath::new(u_tilde.times().clone(), slices, u_tilde.seed())
}

/// `||U_direct - S_B(zeta) U~||_{L^2(I x box)}` for one problem and noise.
pub fn equivalence_error_once(p: &LinearProblem, noise: &NoisePath) -> Result<f64> {
    let direct = solve_linear_spectral(p, noise)?;
    let t = transform_problem(p, noise)?;
    let quiet = NoisePath::from_increments(
        noise.grid().clone(),
        noise.directions(),
        vec![0.0; noise.directions() * noise.grid().steps()],
    )?;
    let tilde_noise = if t.problem.noise_forcing.iter().all(Forcing::is_zero) { &quiet } else { noise };
    let u_tilde = solve_linear_spectral(&t.problem, tilde_noise)?;
    let back = untransform(&u_tilde, &t.zeta, &p.sigma)?;
    Ok(direct.difference(&back)?.l2_norm())
}

/// Equivalence errors on `levels` coupled grids: the first level uses
/// `noise`, each further level its Brownian-bridge refinement. The builder
/// samples the problem on each level's noise.
pub fn equivalence_error(
    build: impl Fn(&NoisePath) -> Result<LinearProblem>,
    noise: &NoisePath,
    levels: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(levels);
    let mut current = noise.clone();
    for level in 0..levels {
        if level > 0 {
            current = current.refine();
        }
        out.push(equivalence_error_once(&build(&current)?, &current)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{
        sample_operator_path, sample_sigma_path, stochastic_parabolicity_margin, ellipticity_margin_2m,
        GradientNoiseSpec, OperatorSpec,
    };
    use crate::noise::generate_noise;
    use crate::grid::TorusGrid;
    use std::f64::consts::SQRT_2;

    fn c(v: f64) -> Complex64 {
        Complex64::new(v, 0.0)
    }

    #[test]
    fn shift_is_translation() {
        let grid = TorusGrid::new(1, 16).unwrap();
        let f = Field::plane_wave(grid, 1, 0, &[3], c(1.0));
        let s = Shift::new(1, 1, vec![0.37]).unwrap();
        let out = s.apply(&f).unwrap();
        let expect = Field::from_fn(grid, 1, |x, _| Complex64::from_polar(1.0, 3.0 * (x[0] + 0.37)));
        assert!((&out - &expect).sup_norm() < 1e-12);
        assert_eq!(Shift::new(1, 1, vec![0.0]).unwrap().apply(&f).unwrap(), f);
        let back = s.inverse().apply(&out).unwrap();
        assert!((&back - &f).sup_norm() < 1e-13);
    }

    #[test]
    fn tilde_a_symbol_and_margin() {
        let grid = TorusGrid::new(1, 8).unwrap();
        let noise = generate_noise(1, &TimeGrid::uniform(1.0, 8).unwrap(), 1).unwrap();
        let a = sample_operator_path(&OperatorSpec::second_order(1, 1, &[2.0]).unwrap().with_bound(2.0), &grid, &noise, 0)
            .unwrap();
        let sigma = sample_sigma_path(&GradientNoiseSpec::componentwise(1, 1, 1, &[1.0]).unwrap(), &grid, &noise, 0)
            .unwrap();
        let t = build_tilde_a(&a, &sigma).unwrap();
        let block = t.coefficients_at(3, 0);
        assert!((block[0].re - 1.5).abs() < 1e-15);
        let m1 = ellipticity_margin_2m(&t, 64);
        let m2 = stochastic_parabolicity_margin(&a, &sigma, 64).unwrap();
        assert!((m1 - m2).abs() < 1e-12);
        let zero = SigmaPath::zero(&grid, noise.grid(), 1, 1);
        assert_eq!(build_tilde_a(&a, &zero).unwrap(), a);
    }

    #[test]
    fn commutator_matches_finite_differences() {
        let grid = TorusGrid::new(1, 256).unwrap();
        let noise = generate_noise(1, &TimeGrid::uniform(1.0, 4).unwrap(), 1).unwrap();
        let sigma = sample_sigma_path(&GradientNoiseSpec::componentwise(1, 1, 1, &[0.8]).unwrap(), &grid, &noise, 0)
            .unwrap();
        let g = Field::from_fn(grid, 1, |x, _| c(x[0].sin() + 0.3 * (2.0 * x[0]).cos()));
        let out = commutator_forcing(&sigma, 0, &[g.clone()]).unwrap();
        let h = grid.spacing();
        let n = grid.len();
        for p in 0..n {
            let fd = (g.get((p + 1) % n, 0) - g.get((p + n - 1) % n, 0)) / (2.0 * h) * 0.8;
            assert!((fd - out.get(p, 0)).norm() < 1e-3);
        }
    }

    #[test]
    fn zero_sigma_transform_is_identity() {
        let grid = TorusGrid::new(1, 8).unwrap();
        let times = TimeGrid::uniform(1.0, 32).unwrap();
        let noise = generate_noise(1, &times, 4).unwrap();
        let a = sample_operator_path(&OperatorSpec::polyharmonic(1, 1, 1).unwrap(), &grid, &noise, 0).unwrap();
        let g = Field::plane_wave(grid, 1, 0, &[1], c(1.0));
        let p = LinearProblem::new(a, Field::plane_wave(grid, 1, 0, &[2], c(1.0)))
            .with_noise_forcing(vec![Forcing::Constant(g)]);
        assert_eq!(transform_problem(&p, &noise).unwrap().problem, p);
        assert!(equivalence_error_once(&p, &noise).unwrap() < 1e-12);
    }

    #[test]
    fn transform_error_decays() {
        let grid = TorusGrid::new(1, 8).unwrap();
        let noise = generate_noise(1, &TimeGrid::uniform(1.0, 64).unwrap(), 9).unwrap();
        let build = |nz: &NoisePath| -> Result<LinearProblem> {
            let a = sample_operator_path(&OperatorSpec::polyharmonic(1, 1, 1)?, &grid, nz, 0)?;
            let s = sample_sigma_path(&GradientNoiseSpec::componentwise(1, 1, 1, &[SQRT_2])?.with_bound(2.0), &grid, nz, 0)?;
            Ok(LinearProblem::new(a, Field::plane_wave(grid, 1, 0, &[1], c(1.0))).with_sigma(s))
        };
        let e = equivalence_error(build, &noise, 4).unwrap();
        assert!(e[3] < e[0], "{e:?}");
    }
}

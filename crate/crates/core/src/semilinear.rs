//! Picard iteration for semilinear problems
//! `dU + A U dt = (f + F(U)) dt + (B U + g + G(U)) dW`.
//!
//! Each iterate solves the linear problem with the nonlinearities frozen at
//! the previous iterate. The time interval is covered by windows short
//! enough for the linearized map to contract; each window starts from the
//! end value of the previous one.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::coefficients::{ellipticity_margin_2m, stochastic_parabolicity_margin, DEFAULT_MARGIN_SAMPLES};
use crate::error::{invalid, Error, Result};
use crate::evolution::{solve_linear, Forcing, LinearProblem, SpaceTimePath};
use crate::grid::{self, band_limited_random, Field, SpectralField};
use crate::noise::{generate_noise, NoisePath};
use crate::normlab::{weighted_lp_square_function, weighted_lp_time_norm, SpatialNorm, WeightSpec};

/// Largest `nu` used in the weighted norm, keeping `(1 - nu)^{-1}` finite.
pub const NU_CAP: f64 = 0.99;

/// Built-in nonlinearities, acting pointwise on real and imaginary parts.
#[derive(Clone, Debug, PartialEq)]
pub enum NonlinearityKind {
    Zero,
    /// `lambda u`.
    Linear { lambda: f64 },
    /// `P_K sum_j c_j (P_K u)^j` with `P_K` the projection onto `|k_i| <= cutoff`.
    Polynomial { coeffs: Vec<f64>, cutoff: usize },
    /// `amplitude * sin(u)`.
    Sine { amplitude: f64 },
}

/// A nonlinearity with declared Lipschitz constants: `lipschitz` against the
/// top derivative `||D^{2m} u||_q`, `lipschitz_lower` against `H^{2m-1,q}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Nonlinearity {
    pub kind: NonlinearityKind,
    pub lipschitz: f64,
    pub lipschitz_lower: f64,
}

impl Nonlinearity {
    pub fn zero() -> Self {
        Self {
            kind: NonlinearityKind::Zero,
            lipschitz: 0.0,
            lipschitz_lower: 0.0,
        }
    }

    pub fn linear(lambda: f64) -> Self {
        Self {
            kind: NonlinearityKind::Linear { lambda },
            lipschitz: 0.0,
            lipschitz_lower: lambda.abs(),
        }
    }

    pub fn sine(amplitude: f64) -> Self {
        Self {
            kind: NonlinearityKind::Sine { amplitude },
            lipschitz: 0.0,
            lipschitz_lower: amplitude.abs(),
        }
    }

    /// Polynomial nonlinearity; its constants must be declared.
    pub fn polynomial(coeffs: Vec<f64>, cutoff: usize, lipschitz: f64, lipschitz_lower: f64) -> Self {
        Self {
            kind: NonlinearityKind::Polynomial { coeffs, cutoff },
            lipschitz,
            lipschitz_lower,
        }
    }

    pub fn with_constants(mut self, lipschitz: f64, lipschitz_lower: f64) -> Self {
        self.lipschitz = lipschitz;
        self.lipschitz_lower = lipschitz_lower;
        self
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, NonlinearityKind::Zero)
    }

    pub fn name(&self) -> String {
        match &self.kind {
            NonlinearityKind::Zero => "zero".into(),
            NonlinearityKind::Linear { lambda } => format!("linear({lambda})"),
            NonlinearityKind::Polynomial { coeffs, cutoff } => format!("polynomial({coeffs:?}; K={cutoff})"),
            NonlinearityKind::Sine { amplitude } => format!("sine({amplitude})"),
        }
    }

    pub fn eval(&self, u: &Field) -> Field {
        let pointwise = |f: &dyn Fn(f64) -> f64, u: &Field| {
            let values = u.values().iter().map(|v| Complex64::new(f(v.re), f(v.im))).collect();
            Field::from_values(*u.grid(), u.components(), values).expect("same shape")
        };
        match &self.kind {
            NonlinearityKind::Zero => Field::zeros(*u.grid(), u.components()),
            NonlinearityKind::Linear { lambda } => u * *lambda,
            NonlinearityKind::Sine { amplitude } => pointwise(&|x| amplitude * x.sin(), u),
            NonlinearityKind::Polynomial { coeffs, cutoff } => {
                let pu = project(u, *cutoff);
                let poly = |x: f64| coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c);
                project(&pointwise(&poly, &pu), *cutoff)
            }
        }
    }
}

fn project(u: &Field, cutoff: usize) -> Field {
    let mut s: SpectralField = u.to_spectral();
    let grid = *u.grid();
    let nc = u.components();
    for slot in 0..grid.len() {
        if grid.frequency(slot)[..grid.dim()].iter().any(|k| k.unsigned_abs() as usize > cutoff) {
            for c in 0..nc {
                s.set(slot, c, Complex64::new(0.0, 0.0));
            }
        }
    }
    s.to_physical()
}

/// A linear core plus the nonlinearities `F` (drift) and `G` (noise
/// direction 0).
#[derive(Clone, Debug, PartialEq)]
pub struct SemilinearProblem {
    pub linear: LinearProblem,
    pub f: Nonlinearity,
    pub g: Nonlinearity,
}

impl SemilinearProblem {
    pub fn new(linear: LinearProblem, f: Nonlinearity, g: Nonlinearity) -> Self {
        Self { linear, f, g }
    }

    /// Checks the declared constants on `corpus` seeded field pairs:
    /// `||N(u) - N(v)|| <= L ||D^{2m}(u - v)||_q + L~ ||u - v||_{H^{2m-1,q}}`,
    /// with the left side in `L^q` for `F` and `H^{m,q}` for `G`.
    pub fn verify_lipschitz(&self, q: f64, corpus: usize, seed: u64) -> Result<()> {
        let grid = *self.linear.grid();
        let nc = self.linear.components();
        let m = self.linear.operator.m();
        let band = (grid.n() / 4).max(1);
        for (nl, target, label) in [(&self.f, 0.0, "F"), (&self.g, m as f64, "G")] {
            if nl.is_zero() {
                continue;
            }
            for i in 0..corpus as u64 {
                let u = band_limited_random(grid, nc, band, seed.wrapping_add(2 * i));
                let v = band_limited_random(grid, nc, band, seed.wrapping_add(2 * i + 1));
                let v = &v * (0.5 / (1.0 + i as f64));
                let diff = &u - &v;
                let lhs = grid::bessel_norm(&(&nl.eval(&u) - &nl.eval(&v)), target, q);
                let rhs = nl.lipschitz * grid::derivative_tensor_norm(&diff, 2 * m, q)
                    + nl.lipschitz_lower * grid::bessel_norm(&diff, (2 * m - 1) as f64, q);
                if lhs > rhs * (1.0 + 1e-9) + 1e-12 {
                    return Err(Error::LipschitzViolation(format!(
                        "{label} = {}: {lhs:.6e} > {rhs:.6e} on corpus pair {i}",
                        nl.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Norm exponents of the solution and data spaces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MrNorms {
    pub p: f64,
    pub q: f64,
}

impl MrNorms {
    fn weight(&self, lp: &LinearProblem) -> Result<WeightSpec> {
        WeightSpec::new(self.p, lp.alpha, lp.times().end())
    }
}

/// Empirical maximal-regularity constants (lower bounds of operator norms).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MrConstants {
    pub k_det: f64,
    pub k_st: f64,
}

fn check_parabolic(p: &LinearProblem) -> Result<()> {
    let margin = if p.operator.m() == 1 {
        stochastic_parabolicity_margin(&p.operator, &p.sigma, DEFAULT_MARGIN_SAMPLES)?
    } else {
        ellipticity_margin_2m(&p.operator, DEFAULT_MARGIN_SAMPLES)
    };
    if margin <= 0.0 {
        return Err(Error::NotElliptic { margin });
    }
    Ok(())
}

fn probe_path(p: &LinearProblem, seed: u64) -> Result<SpaceTimePath> {
    let grid = *p.grid();
    let band = (grid.n() / 4).max(1);
    let steps = p.times().steps();
    let slices = (0..=steps)
        .map(|i| band_limited_random(grid, p.components(), band, seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64)))
        .collect();
    SpaceTimePath::new(p.times().clone(), slices, seed)
}

/// Seeds of the noise samples used for the stochastic constant.
const K_ST_SAMPLES: u64 = 4;

/// `K_det = max_f ||U||_{Z_1} / ||f||_{L^p(w; L^q)}` with `g = 0`, and
/// `K_st = max_g (E||U||^p_{Z_1})^{1/p} / ||g||_{L^p(w; H^{m,q})}` with `f = 0`,
/// both from zero initial data; `Z_1 = L^p(w; H^{2m,q})`.
pub fn estimate_mr_constants(p: &LinearProblem, probes: usize, seed: u64, norms: MrNorms) -> Result<MrConstants> {
    check_parabolic(p)?;
    let m = p.operator.m();
    let w = norms.weight(p)?;
    let z1 = SpatialNorm::bessel(2.0 * m as f64, norms.q);
    let base = LinearProblem {
        forcing: Forcing::Zero,
        noise_forcing: Vec::new(),
        initial: Field::zeros(*p.grid(), p.components()),
        ..p.clone()
    };
    let directions = p.sigma.directions().max(1);
    let noises: Vec<NoisePath> = (0..K_ST_SAMPLES)
        .map(|i| generate_noise(directions, p.times(), seed.wrapping_add(0xA11CE + i)))
        .collect::<Result<_>>()?;
    let quiet = NoisePath::from_increments(p.times().clone(), directions, vec![0.0; directions * p.times().steps()])?;
    let ratios: Vec<(f64, f64)> = (0..probes as u64)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let f = probe_path(p, seed.wrapping_add(2 * i))?;
            let denom = weighted_lp_time_norm(&f, &w, SpatialNorm::lq(norms.q));
            let det = if denom > 0.0 {
                let lp = base.clone().with_forcing(Forcing::Path(f));
                weighted_lp_time_norm(&solve_linear(&lp, &quiet)?, &w, z1) / denom
            } else {
                0.0
            };
            let g = probe_path(p, seed.wrapping_add(2 * i + 1))?;
            let denom = weighted_lp_square_function(std::slice::from_ref(&g), &w, m as f64, norms.q)?;
            let st = if denom > 0.0 {
                let lp = base.clone().with_noise_forcing(vec![Forcing::Path(g)]);
                let moment = noises
                    .iter()
                    .map(|noise| Ok(weighted_lp_time_norm(&solve_linear(&lp, noise)?, &w, z1).powf(norms.p)))
                    .collect::<Result<Vec<f64>>>()?
                    .iter()
                    .sum::<f64>()
                    / noises.len() as f64;
                moment.powf(1.0 / norms.p) / denom
            } else {
                0.0
            };
            Ok((det, st))
        })
        .collect::<Result<_>>()?;
    Ok(MrConstants {
        k_det: ratios.iter().map(|r| r.0).fold(0.0, f64::max),
        k_st: ratios.iter().map(|r| r.1).fold(0.0, f64::max),
    })
}

/// Iteration controls.
#[derive(Clone, Debug, PartialEq)]
pub struct PicardOptions {
    pub norms: MrNorms,
    pub tol: f64,
    pub max_iter: usize,
    /// Forces the window length in steps instead of choosing it.
    pub window_steps: Option<usize>,
    /// Random perturbations used when measuring the window contraction.
    pub probes: usize,
    pub seed: u64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            norms: MrNorms { p: 2.0, q: 2.0 },
            tol: 1e-10,
            max_iter: 200,
            window_steps: None,
            probes: 2,
            seed: 0x51C4_2D00,
        }
    }
}

/// What the iteration measured.
#[derive(Clone, Debug, PartialEq)]
pub struct PicardDiagnostics {
    /// `|||phi_{k+1} - phi_k|||` per iteration, one list per window.
    pub residuals: Vec<Vec<f64>>,
    /// Largest per-window geometric fit of the residuals.
    pub fitted_ratio: f64,
    /// Window contraction measured when choosing the window length.
    pub window_ratio: f64,
    /// Window length in time units and in steps.
    pub kappa: f64,
    pub window_steps: usize,
    pub windows: usize,
    /// `1 - K_det L_F - K_st L_G`.
    pub nu: f64,
    /// Weight `M` of the lower-order part of the iteration norm.
    pub m_weight: f64,
    pub constants: MrConstants,
}

impl PicardDiagnostics {
    pub fn iterations(&self) -> usize {
        self.residuals.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Contraction target `1 - nu / 2`.
    pub fn target_ratio(&self) -> f64 {
        1.0 - 0.5 * self.nu.min(NU_CAP)
    }
}

struct Iteration<'a> {
    sp: &'a SemilinearProblem,
    w: WeightSpec,
    q: f64,
    m: usize,
    m_weight: f64,
}

impl Iteration<'_> {
    /// `|||phi||| = ||phi||_{L^p(H^{2m,q})} + M ||phi||_{L^p(H^{2m-1,q})}`.
    fn norm(&self, phi: &SpaceTimePath) -> f64 {
        let top = weighted_lp_time_norm(phi, &self.w, SpatialNorm::bessel(2.0 * self.m as f64, self.q));
        if self.m_weight == 0.0 {
            return top;
        }
        top + self.m_weight * weighted_lp_time_norm(phi, &self.w, SpatialNorm::bessel((2 * self.m - 1) as f64, self.q))
    }

    /// Solution of the linear problem on `start..=end` with the nonlinearities frozen at `phi`.
    fn apply(&self, start: usize, end: usize, initial: &Field, phi: Option<&SpaceTimePath>, noise: &NoisePath) -> Result<SpaceTimePath> {
        let mut lp = self.sp.linear.window(start, end, initial.clone())?;
        if let Some(phi) = phi {
            if !self.sp.f.is_zero() {
                lp.forcing = add_forcing(&lp.forcing, phi.map(|_, u| self.sp.f.eval(u)))?;
            }
            if !self.sp.g.is_zero() {
                let extra = phi.map(|_, u| self.sp.g.eval(u));
                if lp.noise_forcing.is_empty() {
                    lp.noise_forcing.push(Forcing::Zero);
                }
                lp.noise_forcing[0] = add_forcing(&lp.noise_forcing[0], extra)?;
            }
        }
        solve_linear(&lp, &noise.window(start, end)?)
    }
}

fn add_forcing(base: &Forcing, extra: SpaceTimePath) -> Result<Forcing> {
    Ok(Forcing::Path(match base {
        Forcing::Zero => extra,
        Forcing::Constant(f) => extra.map(|_, v| v + f),
        Forcing::Path(p) => p.sum(&extra)?,
    }))
}

fn geometric_fit(residuals: &[f64], tol: f64) -> f64 {
    let pts: Vec<(f64, f64)> = residuals
        .iter()
        .enumerate()
        .filter(|(_, r)| **r > tol.max(1e-300) * 1e-3)
        .map(|(k, r)| (k as f64, r.ln()))
        .collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (cov / var).exp()
}

/// Contraction of one Picard map on `0..=steps`, measured on the first
/// iterates and on smooth random perturbations of the linear lift.
fn window_contraction(it: &Iteration, steps: usize, noise: &NoisePath, seed: u64, probes: usize) -> Result<f64> {
    let u0 = &it.sp.linear.initial;
    let lift = it.apply(0, steps, u0, None, noise)?;
    let phi1 = it.apply(0, steps, u0, Some(&lift), noise)?;
    let phi2 = it.apply(0, steps, u0, Some(&phi1), noise)?;
    let r0 = it.norm(&phi1.difference(&lift)?);
    let r1 = it.norm(&phi2.difference(&phi1)?);
    let mut ratio: f64 = if r0 > 0.0 { r1 / r0 } else { 0.0 };
    let grid = *lift.grid();
    let scale = it.norm(&lift).max(1.0);
    let base = it.apply(0, steps, u0, Some(&lift), noise)?;
    for i in 0..probes as u64 {
        let bump = band_limited_random(grid, lift.components(), 2, seed.wrapping_add(i));
        let end = lift.times().end();
        let delta = lift.map(|k, _| &bump * (lift.times().times()[k] / end));
        let size = it.norm(&delta);
        if size == 0.0 {
            continue;
        }
        let probe = lift.sum(&delta.map(|_, u| u * (scale / size)))?;
        let moved = it.apply(0, steps, u0, Some(&probe), noise)?;
        ratio = ratio.max(it.norm(&moved.difference(&base)?) / scale);
    }
    Ok(ratio)
}

/// Picard solution on the whole time grid.
pub fn picard_solve(
    sp: &SemilinearProblem,
    noise: &NoisePath,
    constants: MrConstants,
    opts: &PicardOptions,
) -> Result<(SpaceTimePath, PicardDiagnostics)> {
    picard_solve_from(sp, noise, constants, opts, None)
}

/// As [`picard_solve`], starting the iteration from `guess` instead of the
/// linear lift.
pub fn picard_solve_from(
    sp: &SemilinearProblem,
    noise: &NoisePath,
    constants: MrConstants,
    opts: &PicardOptions,
    guess: Option<&SpaceTimePath>,
) -> Result<(SpaceTimePath, PicardDiagnostics)> {
    sp.linear.validate(noise)?;
    let product = constants.k_det * sp.f.lipschitz + constants.k_st * sp.g.lipschitz;
    let nu = 1.0 - product;
    if !(nu > 0.0) {
        return Err(Error::PicardRefused {
            k_det: constants.k_det,
            k_st: constants.k_st,
            product,
        });
    }
    let nu_eff = nu.min(NU_CAP);
    let m_weight = (constants.k_det * sp.f.lipschitz_lower + constants.k_st * sp.g.lipschitz_lower) / (1.0 - nu_eff);
    let it = Iteration {
        sp,
        w: opts.norms.weight(&sp.linear)?,
        q: opts.norms.q,
        m: sp.linear.operator.m(),
        m_weight,
    };
    let times = sp.linear.times().clone();
    let total = times.steps();
    let target = 1.0 - 0.5 * nu_eff;
    let linear_only = sp.f.is_zero() && sp.g.is_zero();

    let (window_steps, window_ratio) = match opts.window_steps {
        Some(k) => {
            if k == 0 {
                return Err(invalid("window_steps", "must be positive"));
            }
            (k.min(total), f64::NAN)
        }
        None if linear_only => (total, 0.0),
        None => {
            let measure = |k: usize| window_contraction(&it, k, noise, opts.seed, opts.probes);
            let mut k = total;
            let mut ratio = measure(k)?;
            while ratio > target && k > 1 {
                k = k.div_ceil(2);
                ratio = measure(k)?;
            }
            if ratio > target {
                return Err(Error::PicardDiverged {
                    iterations: 0,
                    last: ratio,
                    residuals: vec![ratio],
                });
            }
            // Bisect back up between the accepted length and its rejected double.
            let (mut lo, mut hi) = (k, (2 * k).min(total));
            while hi - lo > (k / 8).max(1) {
                let mid = (lo + hi) / 2;
                let r = measure(mid)?;
                if r <= target {
                    lo = mid;
                    ratio = r;
                } else {
                    hi = mid;
                }
            }
            (lo, ratio)
        }
    };

    let mut slices: Vec<Field> = Vec::with_capacity(total + 1);
    let mut residuals = Vec::new();
    let mut initial = sp.linear.initial.clone();
    let mut start = 0;
    while start < total {
        let end = (start + window_steps).min(total);
        let mut phi = match guess {
            Some(g) => g.window(start, end)?,
            None => it.apply(start, end, &initial, None, noise)?,
        };
        let mut window_res = Vec::new();
        loop {
            let next = it.apply(start, end, &initial, Some(&phi), noise)?;
            let r = it.norm(&next.difference(&phi)?);
            window_res.push(r);
            phi = next;
            if r <= opts.tol || linear_only {
                break;
            }
            if window_res.len() >= opts.max_iter {
                return Err(Error::PicardDiverged {
                    iterations: window_res.len(),
                    last: r,
                    residuals: window_res,
                });
            }
        }
        let first = if start == 0 { 0 } else { 1 };
        slices.extend(phi.slices()[first..].iter().cloned());
        initial = phi.last().clone();
        residuals.push(window_res);
        start = end;
    }
    let fitted_ratio = residuals.iter().map(|r| geometric_fit(r, opts.tol)).fold(0.0, f64::max);
    let path = SpaceTimePath::new(times.clone(), slices, noise.seed())?;
    let windows = residuals.len();
    Ok((
        path,
        PicardDiagnostics {
            residuals,
            fitted_ratio,
            window_ratio,
            kappa: times.times()[window_steps.min(total)] - times.start(),
            window_steps,
            windows,
            nu,
            m_weight,
            constants,
        },
    ))
}

/// `||U^1 - U^2||_{L^p(w; H^{2m,q})} / ||u_0^1 - u_0^2||_{B^{2m delta}_{q,p}}`
/// with `delta = 1 - (1 + alpha)/p`; `None` for identical data.
pub fn continuous_dependence(
    sp: &SemilinearProblem,
    u1: &Field,
    u2: &Field,
    noise: &NoisePath,
    constants: MrConstants,
    opts: &PicardOptions,
) -> Result<Option<f64>> {
    let diff = u1 - u2;
    if diff.sup_norm() == 0.0 {
        return Ok(None);
    }
    let p = opts.norms.p;
    let m = sp.linear.operator.m() as f64;
    let delta = 1.0 - (1.0 + sp.linear.alpha) / p;
    if delta < 0.0 {
        return Err(invalid("alpha", format!("need (1 + alpha)/p <= 1, got delta = {delta}")));
    }
    let denom = grid::besov_norm(&diff, 2.0 * m * delta, opts.norms.q, p)?;
    let solve = |u0: &Field| {
        let mut s = sp.clone();
        s.linear.initial = u0.clone();
        picard_solve(&s, noise, constants, opts).map(|(u, _)| u)
    };
    let a = solve(u1)?;
    let b = solve(u2)?;
    let w = opts.norms.weight(&sp.linear)?;
    let num = weighted_lp_time_norm(&a.difference(&b)?, &w, SpatialNorm::bessel(2.0 * m, opts.norms.q));
    Ok(Some(num / denom))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{sample_operator_path, OperatorSpec};
    use crate::grid::TorusGrid;
    use crate::time_grid::TimeGrid;

    fn setup(steps: usize, horizon: f64) -> (LinearProblem, NoisePath) {
        let grid = TorusGrid::new(1, 16).unwrap();
        let times = TimeGrid::uniform(horizon, steps).unwrap();
        let noise = generate_noise(1, &times, 3).unwrap();
        let spec = OperatorSpec::polyharmonic(1, 1, 1).unwrap().with_potential(1.0);
        let a = sample_operator_path(&spec, &grid, &noise, 0).unwrap();
        let u0 = Field::from_fn(grid, 1, |x, _| Complex64::new(x[0].cos() + 0.5, 0.0));
        (LinearProblem::new(a, u0), noise)
    }

    const NORMS: MrNorms = MrNorms { p: 2.0, q: 2.0 };

    #[test]
    fn zero_nonlinearity_is_one_step() {
        let (lp, noise) = setup(64, 1.0);
        let sp = SemilinearProblem::new(lp.clone(), Nonlinearity::zero(), Nonlinearity::zero());
        let c = MrConstants { k_det: 1.0, k_st: 1.0 };
        let (u, diag) = picard_solve(&sp, &noise, c, &PicardOptions::default()).unwrap();
        assert_eq!(diag.iterations(), 1);
        assert_eq!(u, solve_linear(&lp, &noise).unwrap().with_seed(noise.seed()));
    }

    #[test]
    fn linear_drift_matches_shifted_operator() {
        let (lp, noise) = setup(1024, 1.0);
        let lambda = 0.5;
        let sp = SemilinearProblem::new(lp.clone(), Nonlinearity::linear(lambda), Nonlinearity::zero());
        let c = MrConstants { k_det: 1.0, k_st: 1.0 };
        let (u, diag) = picard_solve(&sp, &noise, c, &PicardOptions::default()).unwrap();
        assert!(diag.fitted_ratio <= diag.target_ratio() + 0.05, "{diag:?}");
        let t = 1.0;
        let last = u.last().to_spectral();
        for (k, amp) in [(0i64, 0.5), (1, 0.5)] {
            let exact = amp * ((lambda - (k * k) as f64 - 1.0) * t).exp();
            let got = last.mode(&[k], 0).unwrap().re;
            assert!((got - exact).abs() / exact < 1e-3, "mode {k}: {got} vs {exact}");
        }
    }

    #[test]
    fn refusal_when_contraction_fails() {
        let (lp, noise) = setup(16, 1.0);
        let sp = SemilinearProblem::new(lp, Nonlinearity::linear(0.1).with_constants(2.0, 0.0), Nonlinearity::zero());
        let err = picard_solve(&sp, &noise, MrConstants { k_det: 0.8, k_st: 0.0 }, &PicardOptions::default()).unwrap_err();
        assert!(matches!(err, Error::PicardRefused { .. }));
    }

    #[test]
    fn lipschitz_checks() {
        let (lp, _) = setup(4, 1.0);
        let ok = SemilinearProblem::new(lp.clone(), Nonlinearity::sine(0.7), Nonlinearity::linear(0.3));
        ok.verify_lipschitz(2.0, 8, 1).unwrap();
        let bad = SemilinearProblem::new(lp, Nonlinearity::sine(0.7).with_constants(0.0, 0.01), Nonlinearity::zero());
        assert!(matches!(bad.verify_lipschitz(2.0, 8, 1), Err(Error::LipschitzViolation(_))));
    }

    #[test]
    fn polynomial_is_band_limited() {
        let grid = TorusGrid::new(1, 32).unwrap();
        let u = band_limited_random(grid, 1, 8, 4);
        let v = Nonlinearity::polynomial(vec![0.0, 1.0, 0.0, -1.0], 3, 0.0, 1.0).eval(&u).to_spectral();
        for slot in 0..grid.len() {
            if grid.frequency(slot)[0].abs() > 3 {
                assert!(v.get(slot, 0).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn mr_constants_are_finite_and_monotone_in_horizon() {
        let (lp, _) = setup(64, 0.5);
        let short = estimate_mr_constants(&lp, 4, 9, NORMS).unwrap();
        assert!(short.k_det.is_finite() && short.k_det > 0.0 && short.k_st > 0.0);
        let (lp2, _) = setup(128, 1.0);
        let long = estimate_mr_constants(&lp2, 4, 9, NORMS).unwrap();
        assert!(long.k_det >= 0.95 * short.k_det, "{long:?} vs {short:?}");
    }

    #[test]
    fn windows_and_guesses_agree() {
        let (lp, noise) = setup(128, 1.0);
        let sp = SemilinearProblem::new(lp, Nonlinearity::sine(0.6), Nonlinearity::linear(0.2));
        let c = MrConstants { k_det: 1.0, k_st: 1.0 };
        let opts = PicardOptions {
            window_steps: Some(128),
            ..PicardOptions::default()
        };
        let (one, _) = picard_solve(&sp, &noise, c, &opts).unwrap();
        let (two, d2) = picard_solve(&sp, &noise, c, &PicardOptions { window_steps: Some(64), ..opts.clone() }).unwrap();
        assert_eq!(d2.windows, 2);
        let w = WeightSpec::new(2.0, 0.0, 1.0).unwrap();
        let gap = weighted_lp_time_norm(&one.difference(&two).unwrap(), &w, SpatialNorm::lq(2.0));
        assert!(gap < 1e-8, "{gap}");
        let zero = one.map(|_, u| u * 0.0);
        let (other, _) = picard_solve_from(&sp, &noise, c, &opts, Some(&zero)).unwrap();
        let gap = weighted_lp_time_norm(&one.difference(&other).unwrap(), &w, SpatialNorm::lq(2.0));
        assert!(gap < 10.0 * opts.tol, "{gap}");
    }

    #[test]
    fn continuous_dependence_guards() {
        let (lp, noise) = setup(32, 1.0);
        let sp = SemilinearProblem::new(lp.clone(), Nonlinearity::zero(), Nonlinearity::zero());
        let c = MrConstants { k_det: 1.0, k_st: 1.0 };
        let opts = PicardOptions::default();
        assert_eq!(continuous_dependence(&sp, &lp.initial, &lp.initial, &noise, c, &opts).unwrap(), None);
        let u2 = &lp.initial * 0.5;
        let r = continuous_dependence(&sp, &lp.initial, &u2, &noise, c, &opts).unwrap().unwrap();
        assert!(r.is_finite() && r > 0.0);
    }
}

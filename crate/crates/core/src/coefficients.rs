//! Coefficient processes for `A(t)` and `B(t)` and checkers for the
//! structural assumptions placed on them.
//!
//! A realized path is a finite sum `a(t_i, x) = sum_r w_r(t_i) T_r(x)` of
//! spatial tensors with scalar time weights. The built-in families use one
//! constant base term and at most one modulated term; derived operators
//! (homotopies, the drift-corrected operator of the transform) add more.
//!
//! Operator tensors are stored per point as `a_{alpha beta}[k][l]` at index
//! `((a * P + b) * N + k) * N + l`, where `a, b` enumerate the multi-indices
//! of order `m` as returned by [`multi_indices`]. Noise tensors store
//! `sigma_{jkn}` at index `(j * N + k) * J + n`.

use std::f64::consts::{PI, TAU};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::grid::{self, multi_indices, Field, TorusGrid, MAX_DIM};
use crate::noise::NoisePath;
use crate::time_grid::TimeGrid;

pub type CMat = DMatrix<Complex64>;

/// Default number of quasi-random directions used by the margin checkers.
pub const DEFAULT_MARGIN_SAMPLES: usize = 1 << 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Form {
    /// `A u = (-1)^m sum a_{alpha beta} D^alpha D^beta u`
    NonDivergence,
    /// `A u = -sum_i d_i (sum_j a_ij d_j u)`, second order only.
    Divergence,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TimeProfile {
    Constant,
    /// `sin(2 pi frequency t + phase)`
    Sinusoid { frequency: f64, phase: f64 },
    /// Jumps at `switches` seeded grid times; the value after a jump at
    /// `tau` is `tanh(w_1(tau))`, zero before the first jump.
    PiecewiseRandom { switches: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum SpaceProfile {
    Uniform,
    /// Scalar profile `(1/R) sum_r cos(kappa_r . x + r)` times the perturbation.
    Trigonometric { modes: Vec<[i64; MAX_DIM]> },
    /// Divergence-free matrix field built from stream functions, second order
    /// and `d >= 2`; replaces the perturbation tensor.
    StreamFunction { modes: Vec<[i64; MAX_DIM]> },
}

/// Description of a `2m`-th order operator `A(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorSpec {
    pub dim: usize,
    pub m: usize,
    pub components: usize,
    /// Bound `K` on every block `a_{alpha beta}(t, x)` in operator norm.
    pub bound: f64,
    pub form: Form,
    /// Zeroth-order shift `c` so that `A = A_top + c`.
    pub potential: f64,
    pub base: Vec<Complex64>,
    pub perturbation: Vec<Complex64>,
    pub amplitude: f64,
    pub time: TimeProfile,
    pub space: SpaceProfile,
}

/// Description of the gradient noise `b_n u = (sum_j sigma_jkn d_j u_k)_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientNoiseSpec {
    pub dim: usize,
    pub components: usize,
    pub directions: usize,
    /// Bound `K` on `|(sigma_jkn)_n|_{l2}` and on its spatial gradient.
    pub bound: f64,
    pub base: Vec<f64>,
    pub perturbation: Vec<f64>,
    pub amplitude: f64,
    pub time: TimeProfile,
    pub space: SpaceProfile,
}

fn block_len(dim: usize, m: usize, components: usize) -> usize {
    let p = multi_indices(dim, m).len();
    p * p * components * components
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

impl OperatorSpec {
    /// `(-Delta)^m` acting componentwise: `a_{gamma gamma} = m!/gamma! I`.
    pub fn polyharmonic(dim: usize, m: usize, components: usize) -> Result<Self> {
        check_shape(dim, m, components)?;
        let idx = multi_indices(dim, m);
        let p = idx.len();
        let n = components;
        let mut base = vec![Complex64::new(0.0, 0.0); p * p * n * n];
        let mut bound: f64 = 0.0;
        for (a, gamma) in idx.iter().enumerate() {
            let w = factorial(m) / gamma.iter().map(|&g| factorial(g)).product::<f64>();
            bound = bound.max(w);
            for k in 0..n {
                base[((a * p + a) * n + k) * n + k] = Complex64::new(w, 0.0);
            }
        }
        Self::from_tensor(dim, m, components, base, bound)
    }

    /// Second-order operator with scalar coefficients `a_ij` (row-major `d x d`) times `I_N`.
    pub fn second_order(dim: usize, components: usize, a: &[f64]) -> Result<Self> {
        if a.len() != dim * dim {
            return Err(invalid("a", format!("expected {} entries", dim * dim)));
        }
        let n = components;
        let mut base = vec![Complex64::new(0.0, 0.0); dim * dim * n * n];
        for i in 0..dim {
            for j in 0..dim {
                for k in 0..n {
                    base[((i * dim + j) * n + k) * n + k] = Complex64::new(a[i * dim + j], 0.0);
                }
            }
        }
        let bound = a.iter().fold(0.0f64, |b, v| b.max(v.abs())).max(f64::MIN_POSITIVE);
        Self::from_tensor(dim, 1, components, base, bound)
    }

    /// Constant operator from a full tensor in the documented layout.
    pub fn from_tensor(dim: usize, m: usize, components: usize, base: Vec<Complex64>, bound: f64) -> Result<Self> {
        check_shape(dim, m, components)?;
        let len = block_len(dim, m, components);
        if base.len() != len {
            return Err(Error::ShapeMismatch(format!("operator tensor needs {len} entries, got {}", base.len())));
        }
        Ok(Self {
            dim,
            m,
            components,
            bound,
            form: Form::NonDivergence,
            potential: 0.0,
            perturbation: vec![Complex64::new(0.0, 0.0); len],
            base,
            amplitude: 0.0,
            time: TimeProfile::Constant,
            space: SpaceProfile::Uniform,
        })
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = bound;
        self
    }

    pub fn with_form(mut self, form: Form) -> Self {
        self.form = form;
        self
    }

    pub fn with_potential(mut self, c: f64) -> Self {
        self.potential = c;
        self
    }

    pub fn with_perturbation(mut self, perturbation: Vec<Complex64>, amplitude: f64) -> Self {
        self.perturbation = perturbation;
        self.amplitude = amplitude;
        self
    }

    pub fn with_time(mut self, time: TimeProfile) -> Self {
        self.time = time;
        self
    }

    pub fn with_space(mut self, space: SpaceProfile) -> Self {
        self.space = space;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_shape(self.dim, self.m, self.components)?;
        let len = block_len(self.dim, self.m, self.components);
        if self.base.len() != len || self.perturbation.len() != len {
            return Err(Error::ShapeMismatch(format!("operator tensors need {len} entries")));
        }
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(invalid("K", "bound must be positive"));
        }
        if !(self.potential >= 0.0 && self.potential.is_finite()) {
            return Err(invalid("potential", "must be finite and non-negative"));
        }
        if !self.amplitude.is_finite() {
            return Err(invalid("amplitude", "must be finite"));
        }
        if self.form == Form::Divergence && self.m != 1 {
            return Err(invalid("form", "divergence form needs m = 1"));
        }
        check_space(&self.space, self.dim)?;
        if let SpaceProfile::StreamFunction { .. } = self.space {
            if self.m != 1 || self.dim < 2 {
                return Err(invalid("space", "stream-function coefficients need m = 1 and d >= 2"));
            }
        }
        Ok(())
    }
}

impl GradientNoiseSpec {
    pub fn zero(dim: usize, components: usize, directions: usize) -> Self {
        let len = dim * components * directions;
        Self {
            dim,
            components,
            directions,
            bound: 1.0,
            base: vec![0.0; len],
            perturbation: vec![0.0; len],
            amplitude: 0.0,
            time: TimeProfile::Constant,
            space: SpaceProfile::Uniform,
        }
    }

    /// Constant `sigma_jkn` in the documented layout.
    pub fn constant(dim: usize, components: usize, directions: usize, sigma: Vec<f64>) -> Result<Self> {
        let mut s = Self::zero(dim, components, directions);
        if sigma.len() != s.base.len() {
            return Err(Error::ShapeMismatch(format!("sigma needs {} entries", s.base.len())));
        }
        s.bound = l2_bound(&sigma, dim, components, directions).max(f64::MIN_POSITIVE);
        s.base = sigma;
        Ok(s)
    }

    /// Same `sigma_j` for every component: `sigma_jkn = s[j * J + n]`.
    pub fn componentwise(dim: usize, components: usize, directions: usize, s: &[f64]) -> Result<Self> {
        if s.len() != dim * directions {
            return Err(invalid("sigma", format!("expected {} entries", dim * directions)));
        }
        let mut sigma = vec![0.0; dim * components * directions];
        for j in 0..dim {
            for k in 0..components {
                for n in 0..directions {
                    sigma[(j * components + k) * directions + n] = s[j * directions + n];
                }
            }
        }
        Self::constant(dim, components, directions, sigma)
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = bound;
        self
    }

    pub fn with_perturbation(mut self, perturbation: Vec<f64>, amplitude: f64) -> Self {
        self.perturbation = perturbation;
        self.amplitude = amplitude;
        self
    }

    pub fn with_time(mut self, time: TimeProfile) -> Self {
        self.time = time;
        self
    }

    pub fn with_space(mut self, space: SpaceProfile) -> Self {
        self.space = space;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_shape(self.dim, 1, self.components)?;
        if self.directions == 0 {
            return Err(invalid("J", "need at least one noise direction"));
        }
        let len = self.dim * self.components * self.directions;
        if self.base.len() != len || self.perturbation.len() != len {
            return Err(Error::ShapeMismatch(format!("sigma tensors need {len} entries")));
        }
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(invalid("K", "bound must be positive"));
        }
        if let SpaceProfile::StreamFunction { .. } = self.space {
            return Err(invalid("space", "stream-function profile is only defined for operators"));
        }
        check_space(&self.space, self.dim)
    }
}

fn check_shape(dim: usize, m: usize, components: usize) -> Result<()> {
    if dim == 0 || dim > MAX_DIM {
        return Err(invalid("d", format!("dimension {dim} not in 1..=3")));
    }
    if !(1..=3).contains(&m) {
        return Err(invalid("m", format!("order parameter {m} not in 1..=3")));
    }
    if components == 0 {
        return Err(invalid("N", "system size must be positive"));
    }
    Ok(())
}

fn check_space(space: &SpaceProfile, dim: usize) -> Result<()> {
    let modes = match space {
        SpaceProfile::Uniform => return Ok(()),
        SpaceProfile::Trigonometric { modes } | SpaceProfile::StreamFunction { modes } => modes,
    };
    if modes.is_empty() {
        return Err(invalid("modes", "need at least one spatial mode"));
    }
    for k in modes {
        if k.iter().all(|&v| v == 0) || k[dim..].iter().any(|&v| v != 0) {
            return Err(invalid("modes", format!("mode {k:?} is zero or exceeds dimension {dim}")));
        }
    }
    Ok(())
}

fn l2_bound(sigma: &[f64], dim: usize, components: usize, directions: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..dim {
        for k in 0..components {
            let base = (j * components + k) * directions;
            let s: f64 = sigma[base..base + directions].iter().map(|v| v * v).sum();
            worst = worst.max(s.sqrt());
        }
    }
    worst
}

/// A tensor that is either the same at every grid point or stored per point.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialTensor<T> {
    block: usize,
    per_point: bool,
    data: Vec<T>,
}

impl<T: Copy> SpatialTensor<T> {
    pub fn constant(data: Vec<T>) -> Self {
        Self {
            block: data.len(),
            per_point: false,
            data,
        }
    }

    pub fn per_point(block: usize, data: Vec<T>) -> Self {
        assert!(block > 0 && data.len() % block == 0, "per-point data is not a whole number of blocks");
        Self {
            block,
            per_point: true,
            data,
        }
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn is_constant(&self) -> bool {
        !self.per_point
    }

    pub fn at(&self, point: usize) -> &[T] {
        if self.per_point {
            &self.data[point * self.block..(point + 1) * self.block]
        } else {
            &self.data
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            block: self.block,
            per_point: self.per_point,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Weighted sum of spatial tensors, evaluated at one step and one point.
fn accumulate<T>(terms: &[SpatialTensor<T>], weights: &[Vec<f64>], step: usize, point: usize, out: &mut [T])
where
    T: Copy + std::ops::AddAssign + std::ops::Mul<f64, Output = T> + Default,
{
    out.iter_mut().for_each(|v| *v = T::default());
    for (term, w) in terms.iter().zip(weights) {
        let wi = w[step];
        if wi == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(term.at(point)) {
            *o += v * wi;
        }
    }
}

/// Realized coefficients `a_{alpha beta}(t_i, x)` of a `2m`-th order operator.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorPath {
    dim: usize,
    m: usize,
    components: usize,
    form: Form,
    potential: f64,
    bound: f64,
    grid: TorusGrid,
    times: TimeGrid,
    seed: u64,
    terms: Vec<SpatialTensor<Complex64>>,
    weights: Vec<Vec<f64>>,
}

/// Realized gradient-noise coefficients `sigma_jkn(t_i, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaPath {
    dim: usize,
    components: usize,
    directions: usize,
    bound: f64,
    grid: TorusGrid,
    times: TimeGrid,
    seed: u64,
    terms: Vec<SpatialTensor<f64>>,
    weights: Vec<Vec<f64>>,
}

fn time_weights(profile: &TimeProfile, times: &TimeGrid, noise: &NoisePath, seed: u64) -> Result<Vec<f64>> {
    let t = times.times();
    match profile {
        TimeProfile::Constant => Ok(vec![1.0; t.len()]),
        TimeProfile::Sinusoid { frequency, phase } => {
            Ok(t.iter().map(|&s| (TAU * frequency * s + phase).sin()).collect())
        }
        TimeProfile::PiecewiseRandom { switches } => {
            let m = times.steps();
            if *switches == 0 || *switches >= m {
                return Err(invalid(
                    "switches",
                    format!("need 1 <= switches < M = {m}, got {switches}"),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(0xC0EF);
            let mut at: Vec<usize> = rand::seq::index::sample(&mut rng, m - 1, *switches)
                .into_iter()
                .map(|i| i + 1)
                .collect();
            at.sort_unstable();
            let w = noise.path(0);
            let mut out = vec![0.0; m + 1];
            let mut current = 0.0;
            let mut next = 0;
            for (i, o) in out.iter_mut().enumerate() {
                if next < at.len() && at[next] == i {
                    current = w[i].tanh();
                    next += 1;
                }
                *o = current;
            }
            Ok(out)
        }
    }
}

fn trig_profile(grid: &TorusGrid, modes: &[[i64; MAX_DIM]]) -> Vec<f64> {
    let scale = TAU / grid.period();
    let r = modes.len() as f64;
    (0..grid.len())
        .map(|p| {
            let x = grid.coords(p);
            modes
                .iter()
                .enumerate()
                .map(|(idx, k)| {
                    let phase: f64 = (0..MAX_DIM).map(|a| scale * k[a] as f64 * x[a]).sum();
                    (phase + idx as f64).cos()
                })
                .sum::<f64>()
                / r
        })
        .collect()
}

/// `d x d` divergence-free matrix field, row-major per point, entries bounded by one.
/// Column `j` is `(d_2 psi_j, -d_1 psi_j, 0, ...)` for a trigonometric stream function `psi_j`.
pub fn stream_function_matrix(grid: &TorusGrid, modes: &[[i64; MAX_DIM]]) -> Vec<f64> {
    let d = grid.dim();
    let scale = TAU / grid.period();
    let r = modes.len() as f64;
    let mut out = vec![0.0; grid.len() * d * d];
    for p in 0..grid.len() {
        let x = grid.coords(p);
        for j in 0..d {
            let (mut dx, mut dy) = (0.0, 0.0);
            for (idx, k) in modes.iter().enumerate() {
                let kappa: Vec<f64> = (0..MAX_DIM).map(|a| scale * k[a] as f64).collect();
                let norm = kappa.iter().map(|v| v * v).sum::<f64>().sqrt();
                let phase: f64 = (0..MAX_DIM).map(|a| kappa[a] * x[a]).sum::<f64>() + idx as f64 + 1.3 * j as f64;
                let s = -phase.sin() / (norm * r);
                dx += kappa[0] * s;
                dy += kappa[1] * s;
            }
            out[(p * d) * d + j] = dy;
            out[(p * d + 1) * d + j] = -dx;
        }
    }
    out
}

/// Draws a realization of the operator family on `noise`'s time grid.
pub fn sample_operator_path(spec: &OperatorSpec, grid: &TorusGrid, noise: &NoisePath, seed: u64) -> Result<OperatorPath> {
    spec.validate()?;
    if grid.dim() != spec.dim {
        return Err(Error::ShapeMismatch(format!("grid dimension {} != operator dimension {}", grid.dim(), spec.dim)));
    }
    let times = noise.grid().clone();
    let mut terms = vec![SpatialTensor::constant(spec.base.clone())];
    let mut weights = vec![vec![1.0; times.steps() + 1]];
    let n = spec.components;
    let block = spec.base.len();
    let modulated = match &spec.space {
        SpaceProfile::Uniform => {
            let zero = spec.perturbation.iter().all(|v| v.norm() == 0.0);
            (!zero).then(|| SpatialTensor::constant(spec.perturbation.clone()))
        }
        SpaceProfile::Trigonometric { modes } => {
            let profile = trig_profile(grid, modes);
            let mut data = Vec::with_capacity(profile.len() * block);
            for phi in profile {
                data.extend(spec.perturbation.iter().map(|v| v * phi));
            }
            Some(SpatialTensor::per_point(block, data))
        }
        SpaceProfile::StreamFunction { modes } => {
            let d = spec.dim;
            let mat = stream_function_matrix(grid, modes);
            let mut data = vec![Complex64::new(0.0, 0.0); grid.len() * block];
            for p in 0..grid.len() {
                for i in 0..d {
                    for j in 0..d {
                        let v = mat[(p * d + i) * d + j];
                        for k in 0..n {
                            data[p * block + ((i * d + j) * n + k) * n + k] = Complex64::new(v, 0.0);
                        }
                    }
                }
            }
            Some(SpatialTensor::per_point(block, data))
        }
    };
    if let Some(term) = modulated {
        if spec.amplitude != 0.0 {
            let w = time_weights(&spec.time, &times, noise, seed)?;
            terms.push(term);
            weights.push(w.into_iter().map(|v| spec.amplitude * v).collect());
        }
    }
    let path = OperatorPath {
        dim: spec.dim,
        m: spec.m,
        components: n,
        form: spec.form,
        potential: spec.potential,
        bound: spec.bound,
        grid: *grid,
        times,
        seed,
        terms,
        weights,
    };
    path.check_bound()?;
    Ok(path)
}

/// Draws a realization of the gradient-noise coefficients on `noise`'s time grid.
pub fn sample_sigma_path(spec: &GradientNoiseSpec, grid: &TorusGrid, noise: &NoisePath, seed: u64) -> Result<SigmaPath> {
    spec.validate()?;
    if grid.dim() != spec.dim {
        return Err(Error::ShapeMismatch(format!("grid dimension {} != noise dimension {}", grid.dim(), spec.dim)));
    }
    if noise.directions() < spec.directions {
        return Err(Error::ShapeMismatch(format!(
            "noise has {} directions, coefficients need {}",
            noise.directions(),
            spec.directions
        )));
    }
    let times = noise.grid().clone();
    let mut terms = vec![SpatialTensor::constant(spec.base.clone())];
    let mut weights = vec![vec![1.0; times.steps() + 1]];
    let zero = spec.perturbation.iter().all(|&v| v == 0.0);
    if !zero && spec.amplitude != 0.0 {
        let term = match &spec.space {
            SpaceProfile::Trigonometric { modes } => {
                let profile = trig_profile(grid, modes);
                let block = spec.perturbation.len();
                let mut data = Vec::with_capacity(profile.len() * block);
                for phi in profile {
                    data.extend(spec.perturbation.iter().map(|v| v * phi));
                }
                SpatialTensor::per_point(block, data)
            }
            _ => SpatialTensor::constant(spec.perturbation.clone()),
        };
        let w = time_weights(&spec.time, &times, noise, seed)?;
        terms.push(term);
        weights.push(w.into_iter().map(|v| spec.amplitude * v).collect());
    }
    let path = SigmaPath {
        dim: spec.dim,
        components: spec.components,
        directions: spec.directions,
        bound: spec.bound,
        grid: *grid,
        times,
        seed,
        terms,
        weights,
    };
    path.check_bound()?;
    Ok(path)
}

/// Steps whose weight vectors are enough to realize every extreme of a
/// function that is concave (or convex) in the weights.
fn extreme_steps(weights: &[&[f64]]) -> Vec<usize> {
    let steps = weights.first().map_or(0, |w| w.len());
    let varying: Vec<&[f64]> = weights
        .iter()
        .copied()
        .filter(|w| w.iter().any(|&v| v != w[0]))
        .collect();
    match varying.len() {
        0 => vec![0],
        1 => {
            let w = varying[0];
            let (mut lo, mut hi) = (0, 0);
            for i in 0..steps {
                if w[i] < w[lo] {
                    lo = i;
                }
                if w[i] > w[hi] {
                    hi = i;
                }
            }
            if lo == hi { vec![lo] } else { vec![lo, hi] }
        }
        2 => convex_hull_2d(varying[0], varying[1]),
        _ => {
            let mut seen: Vec<Vec<u64>> = Vec::new();
            let mut out = Vec::new();
            for i in 0..steps {
                let key: Vec<u64> = varying.iter().map(|w| w[i].to_bits()).collect();
                if !seen.contains(&key) {
                    seen.push(key);
                    out.push(i);
                }
            }
            out
        }
    }
}

fn convex_hull_2d(x: &[f64], y: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    idx.dedup_by(|a, b| x[*a] == x[*b] && y[*a] == y[*b]);
    if idx.len() <= 2 {
        return idx;
    }
    let cross = |o: usize, a: usize, b: usize| (x[a] - x[o]) * (y[b] - y[o]) - (y[a] - y[o]) * (x[b] - x[o]);
    let mut lower: Vec<usize> = Vec::new();
    for &p in &idx {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<usize> = Vec::new();
    for &p in idx.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn any_per_point<T: Copy>(terms: &[SpatialTensor<T>]) -> bool {
    terms.iter().any(|t| !t.is_constant())
}

fn operator_norm(block: &[Complex64], n: usize) -> f64 {
    if n == 1 {
        return block[0].norm();
    }
    let m = CMat::from_row_slice(n, n, block);
    m.singular_values().iter().fold(0.0, |a, &b| a.max(b))
}

/// Smallest eigenvalue of the Hermitian part of an `n x n` row-major matrix.
fn min_hermitian_eigen(q: &[Complex64], n: usize) -> f64 {
    match n {
        1 => q[0].re,
        2 => {
            let a = q[0].re;
            let d = q[3].re;
            let b = 0.5 * (q[1] + q[2].conj());
            0.5 * (a + d) - ((0.5 * (a - d)).powi(2) + b.norm_sqr()).sqrt()
        }
        _ => {
            let m = CMat::from_row_slice(n, n, q);
            let h = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
            h.symmetric_eigenvalues().iter().fold(f64::INFINITY, |a, &b| a.min(b))
        }
    }
}

impl OperatorPath {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn form(&self) -> Form {
        self.form
    }

    pub fn potential(&self) -> f64 {
        self.potential
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn times(&self) -> &TimeGrid {
        &self.times
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn multi_indices(&self) -> Vec<[usize; MAX_DIM]> {
        multi_indices(self.dim, self.m)
    }

    pub fn block_len(&self) -> usize {
        block_len(self.dim, self.m, self.components)
    }

    pub fn terms(&self) -> &[SpatialTensor<Complex64>] {
        &self.terms
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn is_x_independent(&self) -> bool {
        !any_per_point(&self.terms)
    }

    /// True when the coefficients do not change over the time grid.
    pub fn is_time_constant(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|&v| v == w[0]))
    }

    /// Weight vector at a step; equal vectors mean equal coefficients.
    pub fn weights_at(&self, step: usize) -> Vec<f64> {
        self.weights.iter().map(|w| w[step]).collect()
    }

    /// All blocks `a_{alpha beta}(t_step, x_point)`.
    pub fn coefficients_at(&self, step: usize, point: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.block_len()];
        accumulate(&self.terms, &self.weights, step, point, &mut out);
        out
    }

    /// Per-point blocks at one step, point-major (one block when x-independent).
    pub fn dense_at(&self, step: usize) -> Vec<Complex64> {
        let b = self.block_len();
        let points = if self.is_x_independent() { 1 } else { self.grid.len() };
        let mut out = vec![Complex64::new(0.0, 0.0); points * b];
        for p in 0..points {
            accumulate(&self.terms, &self.weights, step, p, &mut out[p * b..(p + 1) * b]);
        }
        out
    }

    /// `sum_{alpha beta} kappa^{alpha+beta} a_{alpha beta}` for a block, row-major `N x N`.
    pub fn symbol_of(&self, block: &[Complex64], kappa: &[f64; MAX_DIM]) -> Vec<Complex64> {
        symbol_of_block(block, &self.multi_indices(), self.components, kappa)
    }

    /// Top-order symbol (without the potential) of each term at `kappa`.
    pub fn term_symbols(&self, kappa: &[f64; MAX_DIM]) -> Vec<Vec<Complex64>> {
        assert!(self.is_x_independent(), "term symbols need x-independent coefficients");
        let idx = self.multi_indices();
        self.terms
            .iter()
            .map(|t| symbol_of_block(t.at(0), &idx, self.components, kappa))
            .collect()
    }

    fn check_bound(&self) -> Result<()> {
        let p = self.multi_indices().len();
        let n = self.components;
        let cols: Vec<&[f64]> = self.weights.iter().map(|w| w.as_slice()).collect();
        let points = if self.is_x_independent() { 1 } else { self.grid.len() };
        for step in extreme_steps(&cols) {
            for point in 0..points {
                let c = self.coefficients_at(step, point);
                for ab in 0..p * p {
                    let norm = operator_norm(&c[ab * n * n..(ab + 1) * n * n], n);
                    if norm > self.bound * (1.0 + 1e-12) {
                        return Err(Error::BoundViolation {
                            step,
                            norm,
                            bound: self.bound,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Coefficients `a_ij` as scalar fields (row-major `d x d`) at one step.
    /// Needs `m = 1` and `N = 1`.
    pub fn second_order_fields(&self, step: usize) -> Result<Vec<Field>> {
        if self.m != 1 || self.components != 1 {
            return Err(invalid("operator", "scalar second-order coefficients need m = 1 and N = 1"));
        }
        let d = self.dim;
        let dense = self.dense_at(step);
        let points = self.grid.len();
        let x_indep = self.is_x_independent();
        Ok((0..d * d)
            .map(|ij| {
                let values = (0..points)
                    .map(|p| dense[if x_indep { ij } else { p * d * d + ij }])
                    .collect();
                Field::from_values(self.grid, 1, values).expect("shape")
            })
            .collect())
    }

    /// `(1 - lambda) tilde + lambda self`; `tilde` must be constant in `t` and `x`.
    pub fn homotopy(&self, tilde: &OperatorPath, lambda: f64) -> Result<OperatorPath> {
        if tilde.dim != self.dim || tilde.m != self.m || tilde.components != self.components {
            return Err(Error::ShapeMismatch("homotopy between operators of different shape".into()));
        }
        if !tilde.is_x_independent() || !tilde.is_time_constant() {
            return Err(invalid("tilde", "reference operator must be constant"));
        }
        let mut out = self.clone();
        let tilde_block = tilde.coefficients_at(0, 0);
        out.terms = self
            .terms
            .iter()
            .map(|t| t.map(|v| v * lambda))
            .collect();
        out.terms.push(SpatialTensor::constant(
            tilde_block.iter().map(|v| v * (1.0 - lambda)).collect(),
        ));
        out.weights.push(vec![1.0; self.times.steps() + 1]);
        out.potential = (1.0 - lambda) * tilde.potential + lambda * self.potential;
        out.bound = (1.0 - lambda) * tilde.bound + lambda * self.bound;
        Ok(out)
    }

    /// Adds a constant-weight term (used for drift corrections).
    pub fn with_extra_term(&self, term: SpatialTensor<Complex64>, weights: Vec<f64>) -> Result<OperatorPath> {
        if term.block() != self.block_len() || weights.len() != self.times.steps() + 1 {
            return Err(Error::ShapeMismatch("extra term does not match the operator".into()));
        }
        let mut out = self.clone();
        out.terms.push(term);
        out.weights.push(weights);
        Ok(out)
    }

    pub fn with_potential(&self, potential: f64) -> OperatorPath {
        let mut out = self.clone();
        out.potential = potential;
        out
    }

    pub fn with_form(&self, form: Form) -> OperatorPath {
        let mut out = self.clone();
        out.form = form;
        out
    }

    /// Restriction to steps `start..=end` of the time grid.
    pub fn window(&self, start: usize, end: usize) -> Result<OperatorPath> {
        let mut out = self.clone();
        out.times = self.times.window(start, end)?;
        out.weights = self.weights.iter().map(|w| w[start..=end].to_vec()).collect();
        Ok(out)
    }

    /// Same coefficients sampled on another time grid by evaluating the
    /// weights at the latest node not after each new node.
    pub fn resampled_on(&self, times: &TimeGrid) -> OperatorPath {
        let mut out = self.clone();
        let old = self.times.times();
        out.weights = self
            .weights
            .iter()
            .map(|w| {
                times
                    .times()
                    .iter()
                    .map(|&t| {
                        let i = old.partition_point(|&s| s <= t + 1e-12 * (1.0 + t.abs()));
                        w[i.saturating_sub(1).min(w.len() - 1)]
                    })
                    .collect()
            })
            .collect();
        out.times = times.clone();
        out
    }
}

fn symbol_of_block(block: &[Complex64], idx: &[[usize; MAX_DIM]], n: usize, kappa: &[f64; MAX_DIM]) -> Vec<Complex64> {
    let p = idx.len();
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for a in 0..p {
        let ka = grid::monomial(kappa, &idx[a]);
        for b in 0..p {
            let w = ka * grid::monomial(kappa, &idx[b]);
            if w == 0.0 {
                continue;
            }
            let blk = &block[(a * p + b) * n * n..(a * p + b + 1) * n * n];
            for (o, v) in out.iter_mut().zip(blk) {
                *o += v * w;
            }
        }
    }
    out
}

impl SigmaPath {
    /// Zero gradient noise on the given grids.
    pub fn zero(grid: &TorusGrid, times: &TimeGrid, components: usize, directions: usize) -> SigmaPath {
        SigmaPath {
            dim: grid.dim(),
            components,
            directions,
            bound: 1.0,
            grid: *grid,
            times: times.clone(),
            seed: 0,
            terms: vec![SpatialTensor::constant(vec![0.0; grid.dim() * components * directions])],
            weights: vec![vec![1.0; times.steps() + 1]],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn directions(&self) -> usize {
        self.directions
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn times(&self) -> &TimeGrid {
        &self.times
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn terms(&self) -> &[SpatialTensor<f64>] {
        &self.terms
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn is_x_independent(&self) -> bool {
        !any_per_point(&self.terms)
    }

    pub fn is_zero(&self) -> bool {
        self.terms
            .iter()
            .zip(&self.weights)
            .all(|(t, w)| w.iter().all(|&v| v == 0.0) || t.data.iter().all(|&v| v == 0.0))
    }

    pub fn weights_at(&self, step: usize) -> Vec<f64> {
        self.weights.iter().map(|w| w[step]).collect()
    }

    /// `sigma_jkn(t_step, x_point)` in the documented layout.
    pub fn sigma_at(&self, step: usize, point: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.components * self.directions];
        accumulate(&self.terms, &self.weights, step, point, &mut out);
        out
    }

    /// `beta_kn = sum_j sigma_jkn kappa_j` at an x-independent step, laid out `k * J + n`.
    pub fn beta(&self, step: usize, kappa: &[f64; MAX_DIM]) -> Vec<f64> {
        let s = self.sigma_at(step, 0);
        let (nc, nj) = (self.components, self.directions);
        let mut out = vec![0.0; nc * nj];
        for j in 0..self.dim {
            for k in 0..nc {
                for n in 0..nj {
                    out[k * nj + n] += s[(j * nc + k) * nj + n] * kappa[j];
                }
            }
        }
        out
    }

    /// `Sigma_ij` of the parabolicity condition: a `d x d` array of diagonal
    /// `N x N` matrices, entry `(i, j, k)` at `(i * d + j) * N + k`.
    pub fn drift_correction(&self, step: usize, point: usize) -> Vec<f64> {
        let s = self.sigma_at(step, point);
        let (d, nc, nj) = (self.dim, self.components, self.directions);
        let mut out = vec![0.0; d * d * nc];
        for i in 0..d {
            for j in 0..d {
                for k in 0..nc {
                    let mut acc = 0.0;
                    for n in 0..nj {
                        acc += s[(i * nc + k) * nj + n] * s[(j * nc + k) * nj + n];
                    }
                    out[(i * d + j) * nc + k] = 0.5 * acc;
                }
            }
        }
        out
    }

    fn check_bound(&self) -> Result<()> {
        let cols: Vec<&[f64]> = self.weights.iter().map(|w| w.as_slice()).collect();
        let points = if self.is_x_independent() { 1 } else { self.grid.len() };
        let (d, nc, nj) = (self.dim, self.components, self.directions);
        for step in extreme_steps(&cols) {
            for point in 0..points {
                let norm = l2_bound(&self.sigma_at(step, point), d, nc, nj);
                if norm > self.bound * (1.0 + 1e-12) {
                    return Err(Error::BoundViolation { step, norm, bound: self.bound });
                }
            }
            if points > 1 {
                let grad = self.gradient_bound(step);
                if grad > self.bound * (1.0 + 1e-9) {
                    return Err(Error::BoundViolation { step, norm: grad, bound: self.bound });
                }
            }
        }
        Ok(())
    }

    /// `sup_x |grad sigma_jk.(x)|_{l2}` at one step, computed spectrally.
    pub fn gradient_bound(&self, step: usize) -> f64 {
        let (d, nc, nj) = (self.dim, self.components, self.directions);
        let block = d * nc * nj;
        let mut values = Vec::with_capacity(self.grid.len() * block);
        for p in 0..self.grid.len() {
            values.extend(self.sigma_at(step, p).into_iter().map(|v| Complex64::new(v, 0.0)));
        }
        let field = Field::from_values(self.grid, block, values).expect("shape");
        let mut acc = vec![0.0; self.grid.len() * d * nc];
        for axis in 0..d {
            let mut alpha = vec![0usize; d];
            alpha[axis] = 1;
            let g = grid::apply_derivative(&field, &alpha).expect("first derivative");
            for p in 0..self.grid.len() {
                for jk in 0..d * nc {
                    for n in 0..nj {
                        acc[p * d * nc + jk] += g.get(p, jk * nj + n).norm_sqr();
                    }
                }
            }
        }
        acc.into_iter().fold(0.0, |a, v| a.max(v.sqrt()))
    }

    /// `lambda sigma`.
    pub fn scaled(&self, lambda: f64) -> SigmaPath {
        let mut out = self.clone();
        out.terms = self.terms.iter().map(|t| t.map(|v| v * lambda)).collect();
        out
    }

    pub fn window(&self, start: usize, end: usize) -> Result<SigmaPath> {
        let mut out = self.clone();
        out.times = self.times.window(start, end)?;
        out.weights = self.weights.iter().map(|w| w[start..=end].to_vec()).collect();
        Ok(out)
    }
}

/// Regenerates the path with noise redrawn after each checked step and
/// reports the first step whose past values change.
pub fn check_adapted<P: PartialEq>(
    sample: impl Fn(&NoisePath) -> Result<P>,
    values_up_to: impl Fn(&P, usize) -> Vec<f64>,
    noise: &NoisePath,
    checks: usize,
) -> Result<()> {
    let original = sample(noise)?;
    let m = noise.grid().steps();
    let stride = (m / checks.max(1)).max(1);
    for step in (0..=m).step_by(stride) {
        let alt = noise.resampled_after(step, noise.seed() ^ (step as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        let again = sample(&alt)?;
        if values_up_to(&original, step) != values_up_to(&again, step) {
            return Err(Error::NotAdapted { step });
        }
    }
    Ok(())
}

/// Quasi-random unit directions covering the half sphere in `R^dim`
/// (quadratic forms of even degree are invariant under `xi -> -xi`).
fn sphere_directions(dim: usize, samples: usize) -> Vec<[f64; MAX_DIM]> {
    match dim {
        1 => vec![[1.0, 0.0, 0.0]],
        2 => (0..samples)
            .map(|s| {
                let phi = PI * (s as f64 + 0.5) / samples as f64;
                [phi.cos(), phi.sin(), 0.0]
            })
            .collect(),
        _ => {
            // Fibonacci lattice on the upper hemisphere.
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..samples)
                .map(|s| {
                    let z = 1.0 - (s as f64 + 0.5) / samples as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * s as f64;
                    [r * phi.cos(), r * phi.sin(), z]
                })
                .collect()
        }
    }
}

fn angles_to_direction(dim: usize, a: f64, b: f64) -> [f64; MAX_DIM] {
    match dim {
        1 => [1.0, 0.0, 0.0],
        2 => [a.cos(), a.sin(), 0.0],
        _ => [b.sin() * a.cos(), b.sin() * a.sin(), b.cos()],
    }
}

fn direction_to_angles(dim: usize, xi: &[f64; MAX_DIM]) -> (f64, f64) {
    match dim {
        1 => (0.0, 0.0),
        2 => (xi[1].atan2(xi[0]), 0.0),
        _ => (xi[1].atan2(xi[0]), xi[2].clamp(-1.0, 1.0).acos()),
    }
}

/// Minimum over unit `xi` of `lambda_min(Herm Q(xi))`, sampled then polished
/// by a shrinking pattern search around the best samples.
fn minimize_over_sphere(dim: usize, samples: usize, q: impl Fn(&[f64; MAX_DIM]) -> f64) -> f64 {
    let dirs = sphere_directions(dim, samples.max(1));
    let mut vals: Vec<(f64, [f64; MAX_DIM])> = dirs.iter().map(|xi| (q(xi), *xi)).collect();
    if dim == 1 {
        return vals[0].0;
    }
    vals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = vals[0].0;
    let spacing = if dim == 2 {
        PI / samples as f64
    } else {
        (4.0 * PI / samples as f64).sqrt()
    };
    for (v0, xi0) in vals.iter().take(4) {
        let (mut a, mut b) = direction_to_angles(dim, xi0);
        let mut f = *v0;
        let mut h = spacing;
        while h > 1e-10 {
            let mut improved = false;
            let moves: &[(f64, f64)] = if dim == 2 {
                &[(1.0, 0.0), (-1.0, 0.0)]
            } else {
                &[(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)]
            };
            for (da, db) in moves {
                let (na, nb) = (a + da * h, b + db * h);
                let nf = q(&angles_to_direction(dim, na, nb));
                if nf < f {
                    a = na;
                    b = nb;
                    f = nf;
                    improved = true;
                }
            }
            if !improved {
                h *= 0.5;
            }
        }
        best = best.min(f);
    }
    best
}

fn margin_of_blocks(block: &[Complex64], idx: &[[usize; MAX_DIM]], dim: usize, n: usize, samples: usize) -> f64 {
    minimize_over_sphere(dim, samples, |xi| {
        min_hermitian_eigen(&symbol_of_block(block, idx, n, xi), n)
    })
}

/// `min Re sum xi^alpha xi^beta (a_{alpha beta} theta, theta)` over sampled
/// steps, points and unit `xi`; the minimum over `theta` is exact.
///
/// The quadratic form is linear in the time weights, so only the extreme
/// weight vectors need to be visited.
pub fn ellipticity_margin_2m(path: &OperatorPath, samples: usize) -> f64 {
    let idx = path.multi_indices();
    let cols: Vec<&[f64]> = path.weights.iter().map(|w| w.as_slice()).collect();
    let points = if path.is_x_independent() { 1 } else { path.grid.len() };
    let mut margin = f64::INFINITY;
    for step in extreme_steps(&cols) {
        for point in 0..points {
            let block = path.coefficients_at(step, point);
            margin = margin.min(margin_of_blocks(&block, &idx, path.dim, path.components, samples));
        }
    }
    margin
}

/// Second-order coefficient block `a_ij - Sigma_ij` at one step and point.
pub fn effective_block(a: &OperatorPath, sigma: &SigmaPath, step: usize, point: usize) -> Vec<Complex64> {
    let d = a.dim;
    let n = a.components;
    let mut block = a.coefficients_at(step, point);
    let corr = sigma.drift_correction(step, point);
    for i in 0..d {
        for j in 0..d {
            for k in 0..n {
                block[((i * d + j) * n + k) * n + k] -= corr[(i * d + j) * n + k];
            }
        }
    }
    block
}

/// `min Re sum xi_i xi_j ((a_ij - Sigma_ij) theta, theta) / (|xi|^2 |theta|^2)`.
pub fn stochastic_parabolicity_margin(a: &OperatorPath, sigma: &SigmaPath, samples: usize) -> Result<f64> {
    if a.m != 1 {
        return Err(invalid("m", "stochastic parabolicity is defined for second-order systems"));
    }
    if sigma.dim != a.dim || sigma.components != a.components || sigma.times.steps() != a.times.steps() {
        return Err(Error::ShapeMismatch("operator and noise coefficients do not match".into()));
    }
    let idx = a.multi_indices();
    let mut cols: Vec<&[f64]> = a.weights.iter().map(|w| w.as_slice()).collect();
    cols.extend(sigma.weights.iter().map(|w| w.as_slice()));
    let points = if a.is_x_independent() && sigma.is_x_independent() { 1 } else { a.grid.len() };
    let mut margin = f64::INFINITY;
    for step in extreme_steps(&cols) {
        for point in 0..points {
            let block = effective_block(a, sigma, step, point);
            margin = margin.min(margin_of_blocks(&block, &idx, a.dim, a.components, samples));
        }
    }
    Ok(margin)
}

/// `max_j ||sum_i d_i a_ij||_{L^2}` for a `d x d` row-major array of fields.
pub fn divergence_free_defect(a: &[Field]) -> Result<f64> {
    let d = check_matrix_field(a)?;
    let mut worst: f64 = 0.0;
    for j in 0..d {
        let mut div = Field::zeros(*a[0].grid(), a[0].components());
        for i in 0..d {
            let mut alpha = vec![0usize; d];
            alpha[i] = 1;
            div += &grid::apply_derivative(&a[i * d + j], &alpha)?;
        }
        worst = worst.max(div.l2_norm());
    }
    Ok(worst)
}

fn check_matrix_field(a: &[Field]) -> Result<usize> {
    let Some(first) = a.first() else {
        return Err(invalid("a", "empty coefficient array"));
    };
    let d = first.grid().dim();
    if a.len() != d * d || a.iter().any(|f| f.grid() != first.grid() || f.components() != first.components()) {
        return Err(Error::ShapeMismatch(format!("need {} coefficient fields on one grid", d * d)));
    }
    Ok(d)
}

/// `L u = -sum_i d_i (sum_j a_ij d_j u)` with scalar coefficient fields,
/// products in physical space followed by 2/3 truncation.
pub fn apply_divergence_form(a: &[Field], u: &Field) -> Result<Field> {
    let d = check_matrix_field(a)?;
    if a[0].components() != 1 || a[0].grid() != u.grid() {
        return Err(Error::ShapeMismatch("coefficients must be scalar fields on the grid of u".into()));
    }
    let grads: Vec<Field> = (0..d)
        .map(|j| {
            let mut alpha = vec![0usize; d];
            alpha[j] = 1;
            grid::apply_derivative(u, &alpha)
        })
        .collect::<Result<_>>()?;
    let nc = u.components();
    let mut out = Field::zeros(*u.grid(), nc);
    for i in 0..d {
        let mut flux = Field::zeros(*u.grid(), nc);
        for (j, gj) in grads.iter().enumerate() {
            let aij = &a[i * d + j];
            for (p, chunk) in flux.values_mut().chunks_mut(nc).enumerate() {
                let c = aij.get(p, 0);
                for (k, v) in chunk.iter_mut().enumerate() {
                    *v += c * gj.get(p, k);
                }
            }
        }
        let mut s = flux.to_spectral();
        s.dealias();
        let mut alpha = [0usize; MAX_DIM];
        alpha[i] = 1;
        grid::apply_derivative_spectral(&mut s, &alpha);
        out -= &s.to_physical();
    }
    Ok(out)
}

/// `max ||L u||_2 / ||u||_{W^{2,2}}` over a corpus, skipping zero fields.
pub fn bounded_l_ratio(a: &[Field], corpus: &[Field]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for u in corpus {
        let denom = grid::sobolev_norm(u, 2, 2.0);
        if denom == 0.0 {
            continue;
        }
        worst = worst.max(apply_divergence_form(a, u)?.l2_norm() / denom);
    }
    Ok(worst)
}

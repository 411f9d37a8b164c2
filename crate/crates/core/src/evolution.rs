//! Linear solvers for `dU + A U dt = f dt + (B U + g) dW`, the
//! deterministic evolution family of a divergence-form operator, the
//! deterministic and stochastic convolutions, the two-subproblem
//! decomposition and the homotopy sweep.
//!
//! With x-independent coefficients every Fourier mode is an `N`-dimensional
//! SDE and the solver uses an exponential Euler step for the drift with an
//! Euler-Maruyama noise term. With x-dependent second-order coefficients the
//! solver is semi-implicit: `c (-Delta)` is treated implicitly and the rest
//! of the operator explicitly, with products formed in physical space and
//! truncated by the 2/3 rule.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::coefficients::{
    ellipticity_margin_2m, stochastic_parabolicity_margin, Form, OperatorPath, SigmaPath,
};
use crate::error::{invalid, Error, Result};
use crate::grid::{self, Field, SpectralField, TorusGrid, MAX_DIM};
use crate::noise::NoisePath;
use crate::normlab::{self, mc_lp_omega, NormEstimate, SpatialNorm, WeightSpec};
use crate::time_grid::TimeGrid;

/// Growth of the solution norm over the data scale that counts as blow-up.
pub const BLOW_UP_FACTOR: f64 = 1e6;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// One trajectory `U(t_i)` on a time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimePath {
    grid: TorusGrid,
    components: usize,
    times: TimeGrid,
    seed: u64,
    slices: Vec<Field>,
}

const PATH_MAGIC: &[u8; 4] = b"SMRP";
const PATH_VERSION: u32 = 1;

impl SpaceTimePath {
    pub fn new(times: TimeGrid, slices: Vec<Field>, seed: u64) -> Result<Self> {
        let Some(first) = slices.first() else {
            return Err(invalid("slices", "a path needs at least one slice"));
        };
        if slices.len() != times.steps() + 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} slices for {} time nodes",
                slices.len(),
                times.steps() + 1
            )));
        }
        if slices.iter().any(|s| !s.same_shape(first)) {
            return Err(Error::ShapeMismatch("slices live on different grids".into()));
        }
        Ok(Self {
            grid: *first.grid(),
            components: first.components(),
            times,
            seed,
            slices,
        })
    }

    /// Path that is zero at every node.
    pub fn zeros(grid: TorusGrid, components: usize, times: TimeGrid) -> Self {
        let slices = vec![Field::zeros(grid, components); times.steps() + 1];
        Self {
            grid,
            components,
            times,
            seed: 0,
            slices,
        }
    }

    /// Samples `f(t, x, component)` at every node.
    pub fn from_fn(
        grid: TorusGrid,
        components: usize,
        times: TimeGrid,
        f: impl Fn(f64, &[f64], usize) -> Complex64,
    ) -> Self {
        let slices = times
            .times()
            .iter()
            .map(|&t| Field::from_fn(grid, components, |x, c| f(t, x, c)))
            .collect();
        Self {
            grid,
            components,
            times,
            seed: 0,
            slices,
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn times(&self) -> &TimeGrid {
        &self.times
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn slice(&self, i: usize) -> &Field {
        &self.slices[i]
    }

    pub fn slices(&self) -> &[Field] {
        &self.slices
    }

    pub fn last(&self) -> &Field {
        &self.slices[self.slices.len() - 1]
    }

    pub fn map(&self, f: impl Fn(usize, &Field) -> Field) -> SpaceTimePath {
        let slices = self.slices.iter().enumerate().map(|(i, s)| f(i, s)).collect();
        SpaceTimePath::new(self.times.clone(), slices, self.seed).expect("map keeps the shape")
    }

    pub fn difference(&self, other: &SpaceTimePath) -> Result<SpaceTimePath> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn sum(&self, other: &SpaceTimePath) -> Result<SpaceTimePath> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &SpaceTimePath, f: impl Fn(&Field, &Field) -> Field) -> Result<SpaceTimePath> {
        if self.slices.len() != other.slices.len() || !self.slices[0].same_shape(&other.slices[0]) {
            return Err(Error::ShapeMismatch("paths differ in shape".into()));
        }
        let slices = self.slices.iter().zip(&other.slices).map(|(a, b)| f(a, b)).collect();
        SpaceTimePath::new(self.times.clone(), slices, self.seed)
    }

    /// `||u||_{L^2(I x box)}` by the trapezoidal rule.
    pub fn l2_norm(&self) -> f64 {
        let n: Vec<f64> = self.slices.iter().map(|s| s.l2_norm().powi(2)).collect();
        (0..self.times.steps())
            .map(|i| 0.5 * self.times.dt(i) * (n[i] + n[i + 1]))
            .sum::<f64>()
            .sqrt()
    }

    /// Restriction to nodes `start..=end`.
    pub fn window(&self, start: usize, end: usize) -> Result<SpaceTimePath> {
        SpaceTimePath::new(self.times.window(start, end)?, self.slices[start..=end].to_vec(), self.seed)
    }

    /// Header (magic, version, dim, n, components, period, node count,
    /// node times, seed) followed by each slice in the field layout.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PATH_MAGIC);
        out.extend_from_slice(&PATH_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.grid.dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.grid.n() as u32).to_le_bytes());
        out.extend_from_slice(&(self.components as u32).to_le_bytes());
        out.extend_from_slice(&self.grid.period().to_le_bytes());
        out.extend_from_slice(&(self.slices.len() as u64).to_le_bytes());
        for t in self.times.times() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        for s in &self.slices {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |k: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + k)
                .ok_or_else(|| Error::Decode("truncated path".into()))?;
            pos += k;
            Ok(s)
        };
        if take(4)? != PATH_MAGIC {
            return Err(Error::Decode("bad magic".into()));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != PATH_VERSION {
            return Err(Error::Decode(format!("unsupported version {version}")));
        }
        let dim = u32_at(take(4)?) as usize;
        let n = u32_at(take(4)?) as usize;
        let components = u32_at(take(4)?) as usize;
        let period = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let grid = TorusGrid::with_period(dim, n, period).map_err(|e| Error::Decode(e.to_string()))?;
        let mut times = Vec::with_capacity(count);
        for _ in 0..count {
            times.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
        }
        let seed = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let slice_len = grid.len() * components * 16;
        let mut slices = Vec::with_capacity(count);
        for _ in 0..count {
            slices.push(Field::from_le_bytes(grid, components, take(slice_len)?)?);
        }
        if pos != bytes.len() {
            return Err(Error::Decode("trailing bytes after path".into()));
        }
        let times = TimeGrid::from_times(times).map_err(|e| Error::Decode(e.to_string()))?;
        SpaceTimePath::new(times, slices, seed)
    }
}

/// A forcing term held constant on each time cell.
#[derive(Clone, Debug, PartialEq)]
pub enum Forcing {
    Zero,
    Constant(Field),
    /// Value at node `t_i` is used on `[t_i, t_{i+1})`.
    Path(SpaceTimePath),
}

impl Forcing {
    pub fn at(&self, step: usize) -> Option<&Field> {
        match self {
            Forcing::Zero => None,
            Forcing::Constant(f) => Some(f),
            Forcing::Path(p) => Some(p.slice(step)),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Forcing::Zero)
    }

    fn window(&self, start: usize, end: usize) -> Result<Forcing> {
        Ok(match self {
            Forcing::Path(p) => Forcing::Path(p.window(start, end)?),
            other => other.clone(),
        })
    }
}

/// Data of `dU + A U dt = f dt + (B U + g) dW_H`, `U(0) = u0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProblem {
    pub operator: OperatorPath,
    pub sigma: SigmaPath,
    pub forcing: Forcing,
    /// `g_n` for the first `noise_forcing.len()` directions.
    pub noise_forcing: Vec<Forcing>,
    pub initial: Field,
    /// Power-weight exponent used when measuring the solution.
    pub alpha: f64,
}

impl LinearProblem {
    /// Problem with zero noise coefficients and zero forcings.
    pub fn new(operator: OperatorPath, initial: Field) -> Self {
        let sigma = SigmaPath::zero(operator.grid(), operator.times(), operator.components(), 1);
        Self {
            operator,
            sigma,
            forcing: Forcing::Zero,
            noise_forcing: Vec::new(),
            initial,
            alpha: 0.0,
        }
    }

    pub fn with_sigma(mut self, sigma: SigmaPath) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_forcing(mut self, f: Forcing) -> Self {
        self.forcing = f;
        self
    }

    pub fn with_noise_forcing(mut self, g: Vec<Forcing>) -> Self {
        self.noise_forcing = g;
        self
    }

    pub fn with_initial(mut self, u0: Field) -> Self {
        self.initial = u0;
        self
    }

    pub fn times(&self) -> &TimeGrid {
        self.operator.times()
    }

    pub fn grid(&self) -> &TorusGrid {
        self.operator.grid()
    }

    pub fn components(&self) -> usize {
        self.operator.components()
    }

    pub fn has_gradient_noise(&self) -> bool {
        !self.sigma.is_zero()
    }

    pub fn is_x_independent(&self) -> bool {
        self.operator.is_x_independent() && self.sigma.is_x_independent()
    }

    /// Checks shapes against each other and against the noise.
    pub fn validate(&self, noise: &NoisePath) -> Result<()> {
        let grid = *self.grid();
        let nc = self.components();
        let shape_ok = |f: &Field| f.grid() == &grid && f.components() == nc;
        if !shape_ok(&self.initial) {
            return Err(Error::ShapeMismatch("initial value does not match the operator".into()));
        }
        let steps = self.times().steps();
        if noise.grid().steps() != steps
            || noise
                .grid()
                .times()
                .iter()
                .zip(self.times().times())
                .any(|(a, b)| (a - b).abs() > 1e-12 * (1.0 + b.abs()))
        {
            return Err(Error::ShapeMismatch("noise and coefficients use different time grids".into()));
        }
        if self.sigma.times().steps() != steps || self.sigma.grid() != &grid || self.sigma.components() != nc {
            return Err(Error::ShapeMismatch("noise coefficients do not match the operator".into()));
        }
        let j = noise.directions();
        if self.sigma.directions() > j || self.noise_forcing.len() > j {
            return Err(Error::ShapeMismatch(format!("problem needs more than the {j} noise directions")));
        }
        for f in std::iter::once(&self.forcing).chain(&self.noise_forcing) {
            match f {
                Forcing::Zero => {}
                Forcing::Constant(v) => {
                    if !shape_ok(v) {
                        return Err(Error::ShapeMismatch("forcing does not match the operator".into()));
                    }
                }
                Forcing::Path(p) => {
                    if p.times().steps() != steps || !shape_ok(p.slice(0)) {
                        return Err(Error::ShapeMismatch("forcing path does not match the problem".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Problem on steps `start..=end` with a new initial value at `t_start`.
    pub fn window(&self, start: usize, end: usize, initial: Field) -> Result<LinearProblem> {
        Ok(LinearProblem {
            operator: self.operator.window(start, end)?,
            sigma: self.sigma.window(start, end)?,
            forcing: self.forcing.window(start, end)?,
            noise_forcing: self
                .noise_forcing
                .iter()
                .map(|g| g.window(start, end))
                .collect::<Result<_>>()?,
            initial,
            alpha: self.alpha,
        })
    }
}

struct BlowUpGuard {
    reference: f64,
    stage: &'static str,
}

impl BlowUpGuard {
    fn new(stage: &'static str, u0: &Field) -> Self {
        Self {
            reference: u0.l2_norm(),
            stage,
        }
    }

    fn see_data(&mut self, scale: f64) {
        self.reference = self.reference.max(scale);
    }

    fn check(&self, step: usize, norm: f64) -> Result<()> {
        let growth = norm / self.reference.max(1e-300);
        if !norm.is_finite() || (norm > 0.0 && growth > BLOW_UP_FACTOR) {
            return Err(Error::BlowUp {
                stage: self.stage,
                step,
                growth: if norm.is_finite() { growth } else { f64::INFINITY },
            });
        }
        Ok(())
    }
}

fn forcing_scale(p: &LinearProblem, step: usize) -> f64 {
    let t = p.times().end() - p.times().start();
    let f = p.forcing.at(step).map_or(0.0, |f| f.l2_norm() * t);
    let g: f64 = p
        .noise_forcing
        .iter()
        .filter_map(|g| g.at(step))
        .map(|g| g.l2_norm() * t.sqrt())
        .sum();
    f + g
}

/// Per-mode propagators `exp(-A^(kappa) dt)` (row-major `N x N` per mode).
fn propagators(symbols: &[Vec<Complex64>], weights: &[f64], potential: f64, dt: f64, modes: usize, n: usize) -> Vec<Complex64> {
    let mut out = vec![ZERO; modes * n * n];
    let mut a = vec![ZERO; n * n];
    for s in 0..modes {
        a.iter_mut().for_each(|v| *v = ZERO);
        for (sym, &w) in symbols.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            for (o, v) in a.iter_mut().zip(&sym[s * n * n..(s + 1) * n * n]) {
                *o += v * w;
            }
        }
        for k in 0..n {
            a[k * n + k] += potential;
        }
        let dst = &mut out[s * n * n..(s + 1) * n * n];
        if n == 1 {
            dst[0] = (-a[0] * dt).exp();
        } else {
            let m = DMatrix::from_row_slice(n, n, &a) * Complex64::new(-dt, 0.0);
            let e = m.exp();
            for k in 0..n {
                for l in 0..n {
                    dst[k * n + l] = e[(k, l)];
                }
            }
        }
    }
    out
}

fn mode_symbols(op: &OperatorPath) -> Vec<Vec<Complex64>> {
    let grid = op.grid();
    let n = op.components();
    let mut per_term = vec![Vec::with_capacity(grid.len() * n * n); op.terms().len()];
    for s in 0..grid.len() {
        let kappa = grid.wavevector(s);
        for (r, sym) in op.term_symbols(&kappa).into_iter().enumerate() {
            per_term[r].extend(sym);
        }
    }
    per_term
}

fn apply_block(e: &[Complex64], v: &[Complex64], out: &mut [Complex64]) {
    let n = v.len();
    for k in 0..n {
        out[k] = (0..n).map(|l| e[k * n + l] * v[l]).sum();
    }
}

/// Exponential Euler / Euler-Maruyama per Fourier mode. Needs
/// x-independent coefficients.
pub fn solve_linear_spectral(p: &LinearProblem, noise: &NoisePath) -> Result<SpaceTimePath> {
    p.validate(noise)?;
    if !p.is_x_independent() {
        return Err(Error::NotXIndependent);
    }
    let grid = *p.grid();
    let n = p.components();
    let modes = grid.len();
    let times = p.times().clone();
    let symbols = mode_symbols(&p.operator);
    let odd: Vec<[f64; MAX_DIM]> = (0..modes).map(|s| grid.odd_wavevector(s)).collect();
    let mut guard = BlowUpGuard::new("spectral solve", &p.initial);

    let mut u = p.initial.to_spectral();
    let mut slices = Vec::with_capacity(times.steps() + 1);
    slices.push(p.initial.clone());
    let mut cache: Option<(Vec<u64>, Vec<Complex64>)> = None;
    let constant_f = match &p.forcing {
        Forcing::Constant(f) => Some(f.to_spectral()),
        _ => None,
    };
    let constant_g: Vec<Option<SpectralField>> = p
        .noise_forcing
        .iter()
        .map(|g| match g {
            Forcing::Constant(f) => Some(f.to_spectral()),
            _ => None,
        })
        .collect();
    let gradient = p.has_gradient_noise();
    let j = p.sigma.directions();
    let mut v = vec![ZERO; n];
    let mut tmp = vec![ZERO; n];

    for i in 0..times.steps() {
        let dt = times.dt(i);
        let w = p.operator.weights_at(i);
        let mut key: Vec<u64> = w.iter().map(|x| x.to_bits()).collect();
        key.push(dt.to_bits());
        if cache.as_ref().map(|c| &c.0) != Some(&key) {
            let e = propagators(&symbols, &w, p.operator.potential(), dt, modes, n);
            cache = Some((key, e));
        }
        let e = &cache.as_ref().expect("filled above").1;

        guard.see_data(forcing_scale(p, i));
        let f_hat = match (&p.forcing, &constant_f) {
            (_, Some(c)) => Some(c.clone()),
            (Forcing::Path(path), _) => Some(path.slice(i).to_spectral()),
            _ => None,
        };
        let g_hat: Vec<Option<SpectralField>> = p
            .noise_forcing
            .iter()
            .zip(&constant_g)
            .map(|(g, c)| match (g, c) {
                (_, Some(c)) => Some(c.clone()),
                (Forcing::Path(path), _) => Some(path.slice(i).to_spectral()),
                _ => None,
            })
            .collect();
        let sigma = if gradient { Some(p.sigma.sigma_at(i, 0)) } else { None };
        let dw = noise.increments_at(i);

        let coeffs = u.coeffs_mut();
        for s in 0..modes {
            let uk = &mut coeffs[s * n..(s + 1) * n];
            v.copy_from_slice(uk);
            if let Some(f) = &f_hat {
                for k in 0..n {
                    v[k] += f.get(s, k) * dt;
                }
            }
            if let Some(sig) = &sigma {
                let kappa = &odd[s];
                for k in 0..n {
                    let mut b = 0.0;
                    for nn in 0..j {
                        let beta: f64 = (0..grid.dim()).map(|jj| sig[(jj * n + k) * j + nn] * kappa[jj]).sum();
                        b += beta * dw[nn];
                    }
                    v[k] += Complex64::new(0.0, b) * uk[k];
                }
            }
            for (nn, g) in g_hat.iter().enumerate() {
                if let Some(g) = g {
                    for k in 0..n {
                        v[k] += g.get(s, k) * dw[nn];
                    }
                }
            }
            apply_block(&e[s * n * n..(s + 1) * n * n], &v, &mut tmp);
            uk.copy_from_slice(&tmp);
        }
        guard.check(i + 1, u.energy().sqrt())?;
        slices.push(u.to_physical());
    }
    SpaceTimePath::new(times, slices, noise.seed())
}

/// Explicit pieces of the semi-implicit step for second-order operators.
struct PseudoSpectral<'a> {
    op: &'a OperatorPath,
    sigma: &'a SigmaPath,
    grid: TorusGrid,
    components: usize,
    stabilization: f64,
    kappa2: Vec<f64>,
    /// Exact exponential on steps whose coefficients are x-independent.
    exact_when_uniform: bool,
}

impl<'a> PseudoSpectral<'a> {
    fn new(op: &'a OperatorPath, sigma: &'a SigmaPath, exact_when_uniform: bool) -> Result<Self> {
        if op.m() != 1 {
            return Err(invalid("m", "the semi-implicit solver handles second-order operators"));
        }
        let grid = *op.grid();
        Ok(Self {
            op,
            sigma,
            grid,
            components: op.components(),
            stabilization: op.bound() * grid.dim() as f64,
            kappa2: (0..grid.len()).map(|s| grid.wavenumber_sq(s)).collect(),
            exact_when_uniform,
        })
    }

    fn first_derivatives(&self, u_hat: &SpectralField) -> Vec<Field> {
        (0..self.grid.dim())
            .map(|axis| {
                let mut s = u_hat.clone();
                let mut alpha = [0usize; MAX_DIM];
                alpha[axis] = 1;
                grid::apply_derivative_spectral(&mut s, &alpha);
                s.to_physical()
            })
            .collect()
    }

    /// Spectrum of the top-order part `A u` (no potential), dealiased.
    fn drift(&self, step: usize, u_hat: &SpectralField) -> SpectralField {
        let d = self.grid.dim();
        let n = self.components;
        let dense = self.op.dense_at(step);
        let block = d * d * n * n;
        let uniform = self.op.is_x_independent();
        let points = self.grid.len();
        let at = |p: usize| if uniform { &dense[..block] } else { &dense[p * block..(p + 1) * block] };
        match self.op.form() {
            Form::NonDivergence => {
                let mut acc = Field::zeros(self.grid, n);
                for i in 0..d {
                    for j in i..d {
                        let mut s = u_hat.clone();
                        let mut alpha = [0usize; MAX_DIM];
                        alpha[i] += 1;
                        alpha[j] += 1;
                        grid::apply_derivative_spectral(&mut s, &alpha);
                        let dij = s.to_physical();
                        let values = acc.values_mut();
                        for p in 0..points {
                            let a = at(p);
                            for k in 0..n {
                                let mut v = ZERO;
                                for l in 0..n {
                                    let mut c = a[((i * d + j) * n + k) * n + l];
                                    if i != j {
                                        c += a[((j * d + i) * n + k) * n + l];
                                    }
                                    v += c * dij.get(p, l);
                                }
                                values[p * n + k] -= v;
                            }
                        }
                    }
                }
                let mut out = acc.to_spectral();
                out.dealias();
                out
            }
            Form::Divergence => {
                let grads = self.first_derivatives(u_hat);
                let mut out = SpectralField::zeros(self.grid, n);
                for i in 0..d {
                    let mut flux = Field::zeros(self.grid, n);
                    let values = flux.values_mut();
                    for p in 0..points {
                        let a = at(p);
                        for (j, gj) in grads.iter().enumerate() {
                            for k in 0..n {
                                let mut v = ZERO;
                                for l in 0..n {
                                    v += a[((i * d + j) * n + k) * n + l] * gj.get(p, l);
                                }
                                values[p * n + k] += v;
                            }
                        }
                    }
                    let mut s = flux.to_spectral();
                    s.dealias();
                    let mut alpha = [0usize; MAX_DIM];
                    alpha[i] = 1;
                    grid::apply_derivative_spectral(&mut s, &alpha);
                    for (o, v) in out.coeffs_mut().iter_mut().zip(s.coeffs()) {
                        *o -= v;
                    }
                }
                out
            }
        }
    }

    /// Spectra of `b_n u` for every direction, dealiased.
    fn noise_terms(&self, step: usize, u_hat: &SpectralField) -> Vec<SpectralField> {
        let d = self.grid.dim();
        let n = self.components;
        let j = self.sigma.directions();
        let grads = self.first_derivatives(u_hat);
        let uniform = self.sigma.is_x_independent();
        let points = self.grid.len();
        let constant = if uniform { Some(self.sigma.sigma_at(step, 0)) } else { None };
        let mut out = vec![Field::zeros(self.grid, n); j];
        for p in 0..points {
            let local;
            let s = match &constant {
                Some(c) => c,
                None => {
                    local = self.sigma.sigma_at(step, p);
                    &local
                }
            };
            for (nn, o) in out.iter_mut().enumerate() {
                for k in 0..n {
                    let mut v = ZERO;
                    for (jj, g) in grads.iter().enumerate().take(d) {
                        v += g.get(p, k) * s[(jj * n + k) * j + nn];
                    }
                    o.values_mut()[p * n + k] = v;
                }
            }
        }
        out.into_iter()
            .map(|f| {
                let mut s = f.to_spectral();
                s.dealias();
                s
            })
            .collect()
    }

    /// One step from `u_hat` with explicit increments `extra` (forcing and
    /// noise forcing already multiplied by `dt` and `dw`).
    fn step(
        &self,
        step: usize,
        dt: f64,
        u_hat: &SpectralField,
        extra: Option<&SpectralField>,
        dw: Option<&[f64]>,
    ) -> SpectralField {
        let n = self.components;
        let potential = self.op.potential();
        let mut rhs = u_hat.clone();
        if let Some(dw) = dw {
            if !self.sigma.is_zero() {
                for (nn, b) in self.noise_terms(step, u_hat).iter().enumerate() {
                    let w = dw[nn];
                    for (o, v) in rhs.coeffs_mut().iter_mut().zip(b.coeffs()) {
                        *o += v * w;
                    }
                }
            }
        }
        if let Some(e) = extra {
            rhs += e;
        }
        if self.exact_when_uniform && self.op.is_x_independent() {
            let symbols = mode_symbols(self.op);
            let e = propagators(&symbols, &self.op.weights_at(step), potential, dt, self.grid.len(), n);
            let mut out = rhs.clone();
            let mut tmp = vec![ZERO; n];
            for s in 0..self.grid.len() {
                apply_block(&e[s * n * n..(s + 1) * n * n], &rhs.coeffs()[s * n..(s + 1) * n], &mut tmp);
                out.coeffs_mut()[s * n..(s + 1) * n].copy_from_slice(&tmp);
            }
            return out;
        }
        let drift = self.drift(step, u_hat);
        let c = self.stabilization;
        let coeffs = rhs.coeffs_mut();
        for s in 0..self.grid.len() {
            let k2 = self.kappa2[s];
            let denom = 1.0 + dt * (c * k2 + potential);
            for k in 0..n {
                let idx = s * n + k;
                let v = coeffs[idx] - dt * (drift.coeffs()[idx] - c * k2 * u_hat.coeffs()[idx]);
                coeffs[idx] = v / denom;
            }
        }
        rhs
    }
}

fn explicit_increment(p: &LinearProblem, step: usize, dt: f64, dw: &[f64]) -> Option<SpectralField> {
    let mut acc: Option<Field> = p.forcing.at(step).map(|f| f * dt);
    for (nn, g) in p.noise_forcing.iter().enumerate() {
        if let Some(g) = g.at(step) {
            match acc.as_mut() {
                Some(a) => a.axpy(dw[nn].into(), g),
                None => acc = Some(g * dw[nn]),
            }
        }
    }
    acc.map(|f| f.to_spectral())
}

/// Semi-implicit pseudo-spectral solver for second-order systems with
/// x-dependent coefficients.
pub fn solve_linear_pseudospectral(p: &LinearProblem, noise: &NoisePath) -> Result<SpaceTimePath> {
    p.validate(noise)?;
    let stepper = PseudoSpectral::new(&p.operator, &p.sigma, false)?;
    let times = p.times().clone();
    let mut guard = BlowUpGuard::new("pseudo-spectral solve", &p.initial);
    let mut u = p.initial.to_spectral();
    let mut slices = Vec::with_capacity(times.steps() + 1);
    slices.push(p.initial.clone());
    for i in 0..times.steps() {
        let dt = times.dt(i);
        let dw = noise.increments_at(i);
        guard.see_data(forcing_scale(p, i));
        let extra = explicit_increment(p, i, dt, dw);
        u = stepper.step(i, dt, &u, extra.as_ref(), Some(dw));
        guard.check(i + 1, u.energy().sqrt())?;
        slices.push(u.to_physical());
    }
    SpaceTimePath::new(times, slices, noise.seed())
}

/// Spectral solver when the coefficients allow it, semi-implicit otherwise.
pub fn solve_linear(p: &LinearProblem, noise: &NoisePath) -> Result<SpaceTimePath> {
    if p.is_x_independent() {
        solve_linear_spectral(p, noise)
    } else {
        solve_linear_pseudospectral(p, noise)
    }
}

/// Deterministic solution operators `Gamma(t_i, t_j)` of
/// `u' + L(t) u = 0`, `L(t) = -div a(t) grad`, as compositions of single
/// steps. Steps with x-independent coefficients are exact exponentials.
#[derive(Clone, Debug)]
pub struct EvolutionFamily {
    operator: OperatorPath,
    sigma: SigmaPath,
}

impl EvolutionFamily {
    /// Checks order, form and ellipticity (`margin_samples` directions).
    pub fn assemble(operator: &OperatorPath, margin_samples: usize) -> Result<Self> {
        if operator.m() != 1 {
            return Err(invalid("m", "evolution families are assembled for second-order operators"));
        }
        let operator = if operator.is_x_independent() {
            operator.with_form(Form::Divergence)
        } else if operator.form() != Form::Divergence {
            return Err(invalid("form", "x-dependent evolution families need divergence form"));
        } else {
            operator.clone()
        };
        let margin = ellipticity_margin_2m(&operator, margin_samples);
        if margin <= 0.0 {
            return Err(Error::NotElliptic { margin });
        }
        let sigma = SigmaPath::zero(operator.grid(), operator.times(), operator.components(), 1);
        Ok(Self { operator, sigma })
    }

    pub fn times(&self) -> &TimeGrid {
        self.operator.times()
    }

    pub fn operator(&self) -> &OperatorPath {
        &self.operator
    }

    fn stepper(&self) -> PseudoSpectral<'_> {
        PseudoSpectral::new(&self.operator, &self.sigma, true).expect("checked at assembly")
    }

    /// `Gamma(t_i, t_j) v` for `j <= i`.
    pub fn apply(&self, i: usize, j: usize, v: &Field) -> Result<Field> {
        if j > i || i > self.times().steps() {
            return Err(invalid("indices", format!("need j <= i <= M, got ({i}, {j})")));
        }
        if i == j {
            return Ok(v.clone());
        }
        let stepper = self.stepper();
        let mut u = v.to_spectral();
        for step in j..i {
            u = stepper.step(step, self.times().dt(step), &u, None, None);
        }
        Ok(u.to_physical())
    }

    /// `Gamma(t_i, t_j) v` for every `i >= j`, as a path starting at `t_j`.
    pub fn propagate(&self, j: usize, v: &Field) -> Result<SpaceTimePath> {
        let stepper = self.stepper();
        let mut u = v.to_spectral();
        let mut slices = vec![v.clone()];
        for step in j..self.times().steps() {
            u = stepper.step(step, self.times().dt(step), &u, None, None);
            slices.push(u.to_physical());
        }
        SpaceTimePath::new(self.times().window(j, self.times().steps())?, slices, 0)
    }
}

/// `M f(t_i) = sum_{j<i} Gamma(t_i, t_j) f(t_j) dt_j` (left endpoint).
pub fn deterministic_convolution(family: &EvolutionFamily, f: &SpaceTimePath) -> Result<SpaceTimePath> {
    let steps = family.times().steps();
    if f.times().steps() != steps {
        return Err(Error::ShapeMismatch("forcing and family use different time grids".into()));
    }
    let stepper = family.stepper();
    let mut acc = SpectralField::zeros(*f.grid(), f.components());
    let mut slices = vec![Field::zeros(*f.grid(), f.components())];
    let mut guard = BlowUpGuard::new("deterministic convolution", f.slice(0));
    for i in 0..steps {
        let dt = family.times().dt(i);
        let inc = (f.slice(i) * dt).to_spectral();
        guard.see_data(f.slice(i).l2_norm() * (family.times().end() - family.times().start()));
        acc += &inc;
        acc = stepper.step(i, dt, &acc, None, None);
        guard.check(i + 1, acc.energy().sqrt())?;
        slices.push(acc.to_physical());
    }
    SpaceTimePath::new(family.times().clone(), slices, f.seed())
}

/// `sum_{t_j < t_i} Gamma(t_i, t_j) g_n(t_j) dw_n(t_j)`.
pub fn stochastic_convolution(family: &EvolutionFamily, g: &[SpaceTimePath], noise: &NoisePath) -> Result<SpaceTimePath> {
    let steps = family.times().steps();
    let Some(first) = g.first() else {
        return Err(invalid("g", "need at least one noise direction"));
    };
    if noise.grid().steps() != steps || g.len() > noise.directions() || g.iter().any(|p| p.times().steps() != steps) {
        return Err(Error::ShapeMismatch("noise forcing, noise and family do not match".into()));
    }
    let stepper = family.stepper();
    let (grid, nc) = (*first.grid(), first.components());
    let mut acc = SpectralField::zeros(grid, nc);
    let mut slices = vec![Field::zeros(grid, nc)];
    let mut guard = BlowUpGuard::new("stochastic convolution", first.slice(0));
    let horizon = family.times().end() - family.times().start();
    for i in 0..steps {
        let mut inc = Field::zeros(grid, nc);
        for (nn, gn) in g.iter().enumerate() {
            inc.axpy(noise.increment(i, nn).into(), gn.slice(i));
            guard.see_data(gn.slice(i).l2_norm() * horizon.sqrt());
        }
        acc += &inc.to_spectral();
        acc = stepper.step(i, family.times().dt(i), &acc, None, None);
        guard.check(i + 1, acc.energy().sqrt())?;
        slices.push(acc.to_physical());
    }
    SpaceTimePath::new(family.times().clone(), slices, noise.seed())
}

/// Result of [`decompose_solve`].
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    /// `dV1 + A0 V1 dt = g dW`, `V1(0) = 0`.
    pub v1: SpaceTimePath,
    /// `V2' + A V2 = f + (A0 - A) V1`, `V2(0) = u0`.
    pub v2: SpaceTimePath,
    pub u: SpaceTimePath,
}

/// Symbol `(1 + |kappa|^2)^m` of the reference operator `A0 = (1 - Delta)^m`.
pub fn reference_symbol(grid: &TorusGrid, m: usize, slot: usize) -> f64 {
    (1.0 + grid.wavenumber_sq(slot)).powi(m as i32)
}

/// Builds `U = V1 + V2` from a stochastic problem with the fixed reference
/// operator and a pathwise deterministic problem with the true operator.
pub fn decompose_solve(p: &LinearProblem, noise: &NoisePath) -> Result<Decomposition> {
    p.validate(noise)?;
    if p.has_gradient_noise() {
        return Err(invalid("sigma", "the decomposition needs B = 0"));
    }
    let grid = *p.grid();
    let n = p.components();
    let m = p.operator.m();
    let times = p.times().clone();
    let a0: Vec<f64> = (0..grid.len()).map(|s| reference_symbol(&grid, m, s)).collect();

    let mut v1 = SpectralField::zeros(grid, n);
    let mut v1_slices = vec![Field::zeros(grid, n)];
    let mut guard = BlowUpGuard::new("decomposition V1", &p.initial);
    for i in 0..times.steps() {
        let dt = times.dt(i);
        let dw = noise.increments_at(i);
        for (nn, g) in p.noise_forcing.iter().enumerate() {
            if let Some(g) = g.at(i) {
                guard.see_data(g.l2_norm());
                v1 += &(g * dw[nn]).to_spectral();
            }
        }
        for (s, &sym) in a0.iter().enumerate() {
            let e = (-sym * dt).exp();
            for k in 0..n {
                let idx = s * n + k;
                v1.coeffs_mut()[idx] *= e;
            }
        }
        guard.check(i + 1, v1.energy().sqrt())?;
        v1_slices.push(v1.to_physical());
    }
    let v1 = SpaceTimePath::new(times.clone(), v1_slices, noise.seed())?;

    // Forcing of the deterministic problem: f + (A0 - A) V1.
    let sigma0 = SigmaPath::zero(&grid, &times, n, 1);
    let helper = PseudoSpectral::new(&p.operator, &sigma0, false).ok();
    let mut forcing_slices = Vec::with_capacity(times.steps() + 1);
    for i in 0..=times.steps() {
        let step = i.min(times.steps() - 1);
        let v = v1.slice(i).to_spectral();
        let mut out = v.clone();
        for (s, &sym) in a0.iter().enumerate() {
            for k in 0..n {
                out.coeffs_mut()[s * n + k] *= sym - p.operator.potential();
            }
        }
        let av = if p.operator.is_x_independent() {
            let symbols = mode_symbols(&p.operator);
            let w = p.operator.weights_at(step);
            let mut av = SpectralField::zeros(grid, n);
            let mut tmp = vec![ZERO; n];
            for s in 0..grid.len() {
                let mut a = vec![ZERO; n * n];
                for (sym, &wr) in symbols.iter().zip(&w) {
                    for (o, x) in a.iter_mut().zip(&sym[s * n * n..(s + 1) * n * n]) {
                        *o += x * wr;
                    }
                }
                apply_block(&a, &v.coeffs()[s * n..(s + 1) * n], &mut tmp);
                av.coeffs_mut()[s * n..(s + 1) * n].copy_from_slice(&tmp);
            }
            av
        } else {
            helper
                .as_ref()
                .ok_or_else(|| invalid("m", "x-dependent decomposition needs a second-order operator"))?
                .drift(step, &v)
        };
        for (o, x) in out.coeffs_mut().iter_mut().zip(av.coeffs()) {
            *o -= x;
        }
        let mut f = out.to_physical();
        if let Some(fi) = p.forcing.at(i.min(times.steps() - 1)) {
            f += fi;
        }
        forcing_slices.push(f);
    }
    let deterministic = LinearProblem {
        operator: p.operator.clone(),
        sigma: sigma0,
        forcing: Forcing::Path(SpaceTimePath::new(times.clone(), forcing_slices, 0)?),
        noise_forcing: Vec::new(),
        initial: p.initial.clone(),
        alpha: p.alpha,
    };
    let quiet = NoisePath::from_increments(times.clone(), 1, vec![0.0; times.steps()])?;
    let v2 = solve_linear(&deterministic, &quiet)?.with_seed(noise.seed());
    let u = v1.sum(&v2)?;
    Ok(Decomposition { v1, v2, u })
}

/// One point of the homotopy `(1 - lambda) tilde + lambda A`, `lambda B`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub lambda: f64,
    pub margin: f64,
    /// Set when the margin is not positive; no solve is attempted then.
    pub flagged: bool,
    pub estimate: Option<NormEstimate>,
    /// `||U||_{Z1} / (||f||_{Z0} + ||g||_{Z0(l2)})`, absent when the data vanish.
    pub ratio: Option<f64>,
}

/// Norm choices for [`continuity_sweep`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepNorms {
    pub p: f64,
    pub q: f64,
    pub margin_samples: usize,
}

/// Solves the homotopy family on every noise sample and reports the
/// solution norm in `L^p(I, w_alpha; H^{2m,q})` per lambda.
pub fn continuity_sweep(
    p: &LinearProblem,
    tilde: &OperatorPath,
    lambdas: &[f64],
    noises: &[NoisePath],
    norms: SweepNorms,
) -> Result<Vec<SweepPoint>> {
    if noises.is_empty() {
        return Err(invalid("noises", "need at least one noise sample"));
    }
    let m = p.operator.m();
    let weight = WeightSpec::new(norms.p, p.alpha, p.times().end())?;
    let data_norm = data_norm(p, weight, norms.q)?;
    lambdas
        .par_iter()
        .map(|&lambda| {
            let operator = p.operator.homotopy(tilde, lambda)?;
            let sigma = p.sigma.scaled(lambda);
            let margin = if m == 1 {
                stochastic_parabolicity_margin(&operator, &sigma, norms.margin_samples)?
            } else {
                ellipticity_margin_2m(&operator, norms.margin_samples)
            };
            if margin <= 0.0 {
                return Ok(SweepPoint {
                    lambda,
                    margin,
                    flagged: true,
                    estimate: None,
                    ratio: None,
                });
            }
            let problem = LinearProblem {
                operator,
                sigma,
                ..p.clone()
            };
            let values = noises
                .iter()
                .map(|noise| {
                    let u = solve_linear(&problem, noise)?;
                    Ok(normlab::weighted_lp_time_norm(&u, &weight, SpatialNorm::bessel(2.0 * m as f64, norms.q)))
                })
                .collect::<Result<Vec<f64>>>()?;
            let estimate = if values.len() >= 2 {
                mc_lp_omega(&values, norms.p)?
            } else {
                NormEstimate::single(values[0])
            }
            .with_grid(format!("n={} d={} {}", p.grid().n(), p.grid().dim(), p.times().descriptor()))
            .with_descriptor(format!("L^{}(w_{}; H^{},{})", norms.p, p.alpha, 2 * m, norms.q));
            let ratio = (data_norm > 0.0).then(|| estimate.value / data_norm);
            Ok(SweepPoint {
                lambda,
                margin,
                flagged: false,
                estimate: Some(estimate),
                ratio,
            })
        })
        .collect()
}

/// `||f||_{L^p(w; L^q)} + ||g||_{L^p(w; H^{m,q}(l2))}` for deterministic data.
pub fn data_norm(p: &LinearProblem, weight: WeightSpec, q: f64) -> Result<f64> {
    let times = p.times().clone();
    let grid = *p.grid();
    let nc = p.components();
    let as_path = |f: &Forcing| -> Result<Option<SpaceTimePath>> {
        Ok(match f {
            Forcing::Zero => None,
            Forcing::Constant(v) => Some(SpaceTimePath::new(times.clone(), vec![v.clone(); times.steps() + 1], 0)?),
            Forcing::Path(path) => Some(path.clone()),
        })
    };
    let mut total = 0.0;
    if let Some(f) = as_path(&p.forcing)? {
        total += normlab::weighted_lp_time_norm(&f, &weight, SpatialNorm::bessel(0.0, q));
    }
    let gs: Vec<SpaceTimePath> = p.noise_forcing.iter().filter_map(|g| as_path(g).transpose()).collect::<Result<_>>()?;
    if !gs.is_empty() {
        let m = p.operator.m() as f64;
        total += normlab::weighted_lp_square_function(&gs, &weight, m, q)?;
    }
    let _ = (grid, nc);
    Ok(total)
}

/// `exp(-|kappa|^2 t)` decay of a heat mode, used by examples and checks.
pub fn heat_factor(grid: &TorusGrid, k: &[i64], t: f64) -> f64 {
    let scale = TAU / grid.period();
    let k2: f64 = k.iter().map(|&v| (scale * v as f64).powi(2)).sum();
    (-k2 * t).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{sample_operator_path, sample_sigma_path, GradientNoiseSpec, OperatorSpec, SpaceProfile};
    use crate::noise::generate_noise;

    fn c(v: f64) -> Complex64 {
        Complex64::new(v, 0.0)
    }

    fn heat(grid: &TorusGrid, noise: &NoisePath) -> OperatorPath {
        sample_operator_path(&OperatorSpec::polyharmonic(grid.dim(), 1, 1).unwrap(), grid, noise, 0).unwrap()
    }

    #[test]
    fn heat_mode_decay() {
        let grid = TorusGrid::new(2, 8).unwrap();
        let noise = generate_noise(1, &TimeGrid::uniform(0.5, 64).unwrap(), 1).unwrap();
        let u0 = Field::plane_wave(grid, 1, 0, &[2, 0], c(1.0));
        let p = LinearProblem::new(heat(&grid, &noise), u0);
        let u = solve_linear_spectral(&p, &noise).unwrap();
        let amp = u.last().to_spectral().mode(&[2, 0], 0).unwrap();
        assert!((amp.re - (-2.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn constant_forcing_convolution() {
        let grid = TorusGrid::new(1, 8).unwrap();
        let m = 1024;
        let noise = generate_noise(1, &TimeGrid::uniform(1.0, m).unwrap(), 1).unwrap();
        let f = Field::plane_wave(grid, 1, 0, &[2], c(1.0));
        let p = LinearProblem::new(heat(&grid, &noise), Field::zeros(grid, 1)).with_forcing(Forcing::Constant(f));
        let u = solve_linear_spectral(&p, &noise).unwrap();
        let amp = u.last().to_spectral().mode(&[2], 0).unwrap().re;
        let exact = (1.0 - (-4.0f64).exp()) / 4.0;
        assert!((amp - exact).abs() / exact < 4.0 / m as f64);
    }

    #[test]
    fn x_dependent_rejected_by_spectral_solver() {
        let grid = TorusGrid::new(1, 16).unwrap();
        let noise = generate_noise(1, &TimeGrid::uniform(1.0, 16).unwrap(), 1).unwrap();
        let spec = OperatorSpec::second_order(1, 1, &[1.0])
            .unwrap()
            .with_bound(1.5)
            .with_perturbation(vec![c(1.0)], 0.5)
            .with_space(SpaceProfile::Trigonometric { modes: vec![[1, 0, 0]] });
        let op = sample_operator_path(&spec, &grid, &noise, 0).unwrap();
        let p = LinearProblem::new(op, Field::zeros(grid, 1));
        assert_eq!(solve_linear_spectral(&p, &noise), Err(Error::NotXIndependent));
        let zero = solve_linear_pseudospectral(&p, &noise).unwrap();
        assert!(zero.slices().iter().all(|s| s.sup_norm() == 0.0));
    }

    #[test]
    fn pseudospectral_agrees_with_spectral_for_uniform_coefficients() {
        let grid = TorusGrid::new(1, 16).unwrap();
        let m = 512;
        let dt = 1.0 / m as f64;
        let noise = generate_noise(1, &TimeGrid::uniform(1.0, m).unwrap(), 5).unwrap();
        let a = sample_operator_path(&OperatorSpec::second_order(1, 1, &[1.0]).unwrap(), &grid, &noise, 0).unwrap();
        let sigma = sample_sigma_path(&GradientNoiseSpec::componentwise(1, 1, 1, &[0.5]).unwrap(), &grid, &noise, 0).unwrap();
        let u0 = Field::from_fn(grid, 1, |x, _| c(x[0].cos() + 0.5 * (2.0 * x[0]).sin()));
        let p = LinearProblem::new(a, u0).with_sigma(sigma);
        let s = solve_linear_spectral(&p, &noise).unwrap();
        let q = solve_linear_pseudospectral(&p, &noise).unwrap();
        let rel = q.difference(&s).unwrap().l2_norm() / s.l2_norm();
        assert!(rel < 10.0 * dt, "relative difference {rel}");
    }

    #[test]
    fn energy_decays_for_variable_divergence_form() {
        let grid = TorusGrid::new(1, 32).unwrap();
        let noise = generate_noise(1, &TimeGrid::uniform(0.5, 1000).unwrap(), 1).unwrap();
        let spec = OperatorSpec::second_order(1, 1, &[1.0])
            .unwrap()
            .with_bound(1.5)
            .with_form(Form::Divergence)
            .with_perturbation(vec![c(1.0)], 0.5)
            .with_space(SpaceProfile::Trigonometric { modes: vec![[1, 0, 0]] });
        let op = sample_operator_path(&spec, &grid, &noise, 0).unwrap();
        let u0 = Field::from_fn(grid, 1, |x, _| c((x[0]).sin() + 0.3 * (3.0 * x[0]).cos()));
        let u = solve_linear_pseudospectral(&LinearProblem::new(op, u0), &noise).unwrap();
        let norms: Vec<f64> = u.slices().iter().map(|s| s.l2_norm()).collect();
        assert!(norms.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        assert!(norms[1000] < norms[0]);
    }

    #[test]
    fn evolution_family_heat_and_cocycle() {
        let grid = TorusGrid::new(1, 16).unwrap();
        let noise = generate_noise(1, &TimeGrid::uniform(1.0, 32).unwrap(), 1).unwrap();
        let fam = EvolutionFamily::assemble(&heat(&grid, &noise), 16).unwrap();
        let v = Field::plane_wave(grid, 1, 0, &[3], c(1.0));
        assert_eq!(fam.apply(5, 5, &v).unwrap(), v);
        let out = fam.apply(20, 4, &v).unwrap();
        let amp = out.to_spectral().mode(&[3], 0).unwrap().re;
        assert!((amp - (-9.0f64 * 0.5).exp()).abs() < 1e-12);
        let two = fam.apply(20, 10, &fam.apply(10, 4, &v).unwrap()).unwrap();
        assert!((&two - &out).l2_norm() < 1e-13);

        let zero = sample_operator_path(&OperatorSpec::second_order(1, 1, &[0.0]).unwrap(), &grid, &noise, 0).unwrap();
        assert!(matches!(EvolutionFamily::assemble(&zero, 16), Err(Error::NotElliptic { .. })));
    }

    #[test]
    fn convolutions_match_closed_forms() {
        let grid = TorusGrid::new(1, 8).unwrap();
        let times = TimeGrid::uniform(1.0, 256).unwrap();
        let noise = generate_noise(1, &times, 3).unwrap();
        let fam = EvolutionFamily::assemble(&heat(&grid, &noise), 16).unwrap();
        let f = SpaceTimePath::from_fn(grid, 1, times.clone(), |_, x, _| Complex64::from_polar(1.0, 2.0 * x[0]));
        let mf = deterministic_convolution(&fam, &f).unwrap();
        let amp = mf.last().to_spectral().mode(&[2], 0).unwrap().re;
        let exact = (1.0 - (-4.0f64).exp()) / 4.0;
        assert!((amp - exact).abs() / exact < 0.02);

        let zero = SpaceTimePath::zeros(grid, 1, times.clone());
        assert!(deterministic_convolution(&fam, &zero).unwrap().l2_norm() == 0.0);
        assert!(stochastic_convolution(&fam, &[zero], &noise).unwrap().l2_norm() == 0.0);

        let f2 = f.map(|i, s| s * (i as f64 * 0.01));
        let sum = deterministic_convolution(&fam, &f.sum(&f2).unwrap()).unwrap();
        let parts = mf.sum(&deterministic_convolution(&fam, &f2).unwrap()).unwrap();
        assert!(sum.difference(&parts).unwrap().l2_norm() < 1e-12);
    }

    #[test]
    fn stochastic_convolution_matches_spectral_solver() {
        let grid = TorusGrid::new(1, 8).unwrap();
        let times = TimeGrid::uniform(1.0, 128).unwrap();
        let noise = generate_noise(1, &times, 8).unwrap();
        let op = heat(&grid, &noise);
        let g = Field::plane_wave(grid, 1, 0, &[1], c(1.0));
        let p = LinearProblem::new(op.clone(), Field::zeros(grid, 1)).with_noise_forcing(vec![Forcing::Constant(g.clone())]);
        let direct = solve_linear_spectral(&p, &noise).unwrap();
        let fam = EvolutionFamily::assemble(&op, 16).unwrap();
        let gp = SpaceTimePath::new(times.clone(), vec![g; 129], 0).unwrap();
        let conv = stochastic_convolution(&fam, &[gp], &noise).unwrap();
        assert!(conv.difference(&direct).unwrap().l2_norm() < 1e-12);
    }

    #[test]
    fn decomposition_with_reference_operator_is_exact() {
        let grid = TorusGrid::new(1, 8).unwrap();
        let times = TimeGrid::uniform(1.0, 128).unwrap();
        let noise = generate_noise(1, &times, 2).unwrap();
        let a0 = sample_operator_path(&OperatorSpec::polyharmonic(1, 1, 1).unwrap().with_potential(1.0), &grid, &noise, 0).unwrap();
        let g = Field::plane_wave(grid, 1, 0, &[1], c(1.0));
        let u0 = Field::plane_wave(grid, 1, 0, &[2], c(0.5));
        let p = LinearProblem::new(a0, u0).with_noise_forcing(vec![Forcing::Constant(g)]);
        let d = decompose_solve(&p, &noise).unwrap();
        let direct = solve_linear_spectral(&p, &noise).unwrap();
        assert!(d.u.difference(&direct).unwrap().l2_norm() < 1e-12);

        let z = LinearProblem::new(p.operator.clone(), Field::zeros(grid, 1));
        assert_eq!(decompose_solve(&z, &noise).unwrap().u.l2_norm(), 0.0);
    }

    #[test]
    fn path_binary_round_trip() {
        let grid = TorusGrid::new(2, 4).unwrap();
        let times = TimeGrid::uniform(1.0, 3).unwrap();
        let p = SpaceTimePath::from_fn(grid, 2, times, |t, x, c| Complex64::new(t + x[0], c as f64 - x[1]))
            .with_seed(77);
        let bytes = p.to_le_bytes();
        assert_eq!(&bytes[..4], b"SMRP");
        assert_eq!(SpaceTimePath::from_le_bytes(&bytes).unwrap(), p);
        assert!(SpaceTimePath::from_le_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}

//! Tent-space norms on the torus and the maximal-regularity experiments for
//! divergence-form evolution families.
//!
//! A [`TentField`] lives on a log-spaced time grid `t_l = t_0 r^l` and
//! stores one slice per cell at the log-midpoint `sqrt(t_l t_{l+1})`; the
//! measure `dt / t^{1+sigma}` is integrated by the midpoint rule in `log t`.
//! Cone averages use the periodic ball `B(x, a sqrt(t))` of grid points,
//! normalized by its point count, applied by FFT convolution.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::coefficients::OperatorPath;
use crate::error::{invalid, Error, Result};
use crate::evolution::{deterministic_convolution, stochastic_convolution, EvolutionFamily, SpaceTimePath};
use crate::grid::{self, Field, SpectralField, TorusGrid, MAX_DIM};
use crate::noise::NoisePath;
use crate::normlab::{mc_lp_omega, NormEstimate};
use crate::time_grid::TimeGrid;

/// Default ratio of consecutive tent time nodes.
pub const DEFAULT_RATIO: f64 = 1.189_207_115_002_721; // 2^{1/4}

/// Field on `(t_min, t_max) x torus` sampled at log-midpoints of a geometric grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TentField {
    grid: TorusGrid,
    edges: TimeGrid,
    components: usize,
    slices: Vec<Field>,
}

impl TentField {
    pub fn new(edges: TimeGrid, slices: Vec<Field>) -> Result<Self> {
        let Some(first) = slices.first() else {
            return Err(invalid("slices", "a tent field needs at least one slice"));
        };
        if slices.len() != edges.steps() {
            return Err(Error::ShapeMismatch(format!(
                "{} slices for {} time cells",
                slices.len(),
                edges.steps()
            )));
        }
        if slices.iter().any(|s| !s.same_shape(first)) {
            return Err(Error::ShapeMismatch("slices live on different grids".into()));
        }
        let grid = *first.grid();
        if edges.start() <= 0.0 {
            return Err(invalid("edges", "tent time grids start at t > 0"));
        }
        let cap = (0.5 * grid.period()).powi(2);
        if edges.end() > cap * (1.0 + 1e-12) {
            return Err(invalid(
                "edges",
                format!("t_max = {} exceeds (period/2)^2 = {cap}", edges.end()),
            ));
        }
        Ok(Self {
            grid,
            edges,
            components: first.components(),
            slices,
        })
    }

    /// Samples `f(t, x, component)` at every log-midpoint.
    pub fn from_fn(
        grid: TorusGrid,
        edges: TimeGrid,
        components: usize,
        f: impl Fn(f64, &[f64], usize) -> Complex64,
    ) -> Result<Self> {
        let slices = log_midpoints(&edges)
            .into_iter()
            .map(|t| Field::from_fn(grid, components, |x, c| f(t, x, c)))
            .collect();
        Self::new(edges, slices)
    }

    pub fn zeros(grid: TorusGrid, edges: TimeGrid, components: usize) -> Result<Self> {
        let slices = vec![Field::zeros(grid, components); edges.steps()];
        Self::new(edges, slices)
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn edges(&self) -> &TimeGrid {
        &self.edges
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn slices(&self) -> &[Field] {
        &self.slices
    }

    pub fn midpoints(&self) -> Vec<f64> {
        log_midpoints(&self.edges)
    }

    pub fn scaled(&self, c: f64) -> TentField {
        TentField {
            slices: self.slices.iter().map(|s| s * c).collect(),
            ..self.clone()
        }
    }

    pub fn sum(&self, other: &TentField) -> Result<TentField> {
        if self.edges != other.edges || !self.slices[0].same_shape(&other.slices[0]) {
            return Err(Error::ShapeMismatch("tent fields differ in shape".into()));
        }
        Ok(TentField {
            slices: self.slices.iter().zip(&other.slices).map(|(a, b)| a + b).collect(),
            ..self.clone()
        })
    }

    /// Spatial gradient, components ordered `axis * K + component`.
    pub fn gradient(&self) -> Result<TentField> {
        let d = self.grid.dim();
        let k = self.components;
        let slices = self
            .slices
            .iter()
            .map(|s| -> Result<Field> {
                let mut out = Field::zeros(self.grid, d * k);
                for axis in 0..d {
                    let mut alpha = vec![0usize; d];
                    alpha[axis] = 1;
                    let g = grid::apply_derivative(s, &alpha)?;
                    for p in 0..self.grid.len() {
                        for c in 0..k {
                            out.set(p, axis * k + c, g.get(p, c));
                        }
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        TentField::new(self.edges.clone(), slices)
    }

    /// Values of `path` at the log-midpoints; they must be nodes of its grid.
    pub fn sample_path(path: &SpaceTimePath, edges: &TimeGrid) -> Result<TentField> {
        let nodes = path.times().times();
        let slices = log_midpoints(edges)
            .into_iter()
            .map(|t| {
                let i = nodes.partition_point(|&s| s < t * (1.0 - 1e-12));
                if i < nodes.len() && (nodes[i] - t).abs() <= 1e-9 * t {
                    Ok(path.slice(i).clone())
                } else {
                    Err(invalid("path", format!("time {t} is not a node of the path")))
                }
            })
            .collect::<Result<_>>()?;
        TentField::new(edges.clone(), slices)
    }
}

pub fn log_midpoints(edges: &TimeGrid) -> Vec<f64> {
    edges.times().windows(2).map(|w| (w[0] * w[1]).sqrt()).collect()
}

/// Solver grid with each tent cell split into `sub` (even) geometric steps,
/// so every log-midpoint is a node.
pub fn subdivided(edges: &TimeGrid, sub: usize) -> Result<TimeGrid> {
    if sub == 0 || sub % 2 != 0 {
        return Err(invalid("sub", format!("need an even number of substeps, got {sub}")));
    }
    let mut times = Vec::with_capacity(edges.steps() * sub + 1);
    for w in edges.times().windows(2) {
        let r = (w[1] / w[0]).powf(1.0 / sub as f64);
        for j in 0..sub {
            times.push(w[0] * r.powi(j as i32));
        }
    }
    times.push(edges.end());
    TimeGrid::from_times(times)
}

/// Exponent `p`, scale `sigma` and aperture `alpha >= 1` of `T^{p,2}_sigma`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TentNormParams {
    pub p: f64,
    pub sigma: f64,
    pub aperture: f64,
}

impl TentNormParams {
    pub fn new(p: f64, sigma: f64, aperture: f64) -> Result<Self> {
        if !(p >= 1.0 && p.is_finite()) {
            return Err(invalid("p", format!("need 1 <= p < inf, got {p}")));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(invalid("sigma", format!("need sigma >= 0, got {sigma}")));
        }
        if !(aperture >= 1.0 && aperture.is_finite()) {
            return Err(invalid("aperture", format!("need aperture >= 1, got {aperture}")));
        }
        Ok(Self { p, sigma, aperture })
    }
}

/// Normalized indicator of the periodic ball of radius `r` around the origin.
fn ball_kernel(grid: &TorusGrid, r: f64) -> SpectralField {
    let origin = [0.0; MAX_DIM];
    let mut k = Field::zeros(*grid, 1);
    let mut count = 0usize;
    for p in 0..grid.len() {
        if grid.periodic_distance(&grid.coords(p), &origin) <= r * (1.0 + 1e-12) {
            k.set(p, 0, Complex64::new(1.0, 0.0));
            count += 1;
        }
    }
    let mut s = (&k * (1.0 / count as f64)).to_spectral();
    let len = grid.len() as f64;
    s.coeffs_mut().iter_mut().for_each(|c| *c *= len);
    s
}

/// `x -> avg_{B(x, r)} h` for a real scalar field `h`.
fn ball_average(h: &[f64], grid: &TorusGrid, kernel: &SpectralField) -> Vec<f64> {
    let f = Field::from_values(*grid, 1, h.iter().map(|&v| Complex64::new(v, 0.0)).collect()).expect("shape");
    let mut s = f.to_spectral();
    for (c, k) in s.coeffs_mut().iter_mut().zip(kernel.coeffs()) {
        *c *= k;
    }
    s.to_physical().values().iter().map(|v| v.re.max(0.0)).collect()
}

/// Area function `A(x) = sum_l avg_{B(x, a sqrt(t_l))} |g(., t_l)|^2 t_l^{-sigma} log(r_l)`.
fn area_function(g: &TentField, sigma: f64, aperture: f64) -> Vec<f64> {
    let edges = g.edges.times();
    let mids = g.midpoints();
    let parts: Vec<Vec<f64>> = g
        .slices
        .par_iter()
        .enumerate()
        .map(|(l, s)| {
            let w = mids[l].powf(-sigma) * (edges[l + 1] / edges[l]).ln();
            let sq: Vec<f64> = s.pointwise_norms().into_iter().map(|v| v * v).collect();
            if sq.iter().all(|&v| v == 0.0) {
                return vec![0.0; sq.len()];
            }
            let kernel = ball_kernel(&g.grid, aperture * mids[l].sqrt());
            ball_average(&sq, &g.grid, &kernel).into_iter().map(|v| v * w).collect()
        })
        .collect();
    let mut acc = vec![0.0; g.grid.len()];
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part) {
            *a += v;
        }
    }
    acc
}

/// `||g||_{T^{p,2}_sigma}` with aperture `alpha`.
pub fn tent_norm(g: &TentField, params: TentNormParams) -> f64 {
    let area = area_function(g, params.sigma, params.aperture);
    let n = area.len() as f64;
    (area.iter().map(|a| a.powf(0.5 * params.p)).sum::<f64>() / n).powf(1.0 / params.p)
}

/// `sum_l int |g(y, t_l)|^2 dy t_l^{-sigma} log(r_l)`, the square of the `p = 2` norm.
pub fn weighted_l2_square(g: &TentField, sigma: f64) -> f64 {
    let edges = g.edges.times();
    g.midpoints()
        .iter()
        .zip(&g.slices)
        .enumerate()
        .map(|(l, (t, s))| s.l2_norm().powi(2) * t.powf(-sigma) * (edges[l + 1] / edges[l]).ln())
        .sum()
}

/// `||g||_{T^{p,2}_sigma, alpha} / ||g||_{T^{p,2}_sigma, 1}`.
pub fn aperture_ratio(g: &TentField, p: f64, sigma: f64, aperture: f64) -> Result<f64> {
    let base = tent_norm(g, TentNormParams::new(p, sigma, 1.0)?);
    if base == 0.0 {
        return Err(invalid("g", "aperture ratio of the zero field"));
    }
    Ok(tent_norm(g, TentNormParams::new(p, sigma, aperture)?) / base)
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Periodic box `{x : |x_i - c_i|_per <= h for every axis}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxSet {
    pub center: [f64; MAX_DIM],
    pub half_width: f64,
}

impl BoxSet {
    pub fn new(center: [f64; MAX_DIM], half_width: f64) -> Self {
        Self { center, half_width }
    }

    fn axis_distance(grid: &TorusGrid, a: f64, b: f64) -> f64 {
        let l = grid.period();
        let d = (a - b).rem_euclid(l);
        d.min(l - d)
    }

    pub fn contains(&self, grid: &TorusGrid, x: &[f64; MAX_DIM]) -> bool {
        (0..grid.dim()).all(|i| Self::axis_distance(grid, x[i], self.center[i]) <= self.half_width + 1e-12)
    }

    pub fn indicator(&self, grid: &TorusGrid) -> Vec<bool> {
        (0..grid.len()).map(|p| self.contains(grid, &grid.coords(p))).collect()
    }

    /// Gaussian of width `half_width` around the centre, zero outside `support`.
    pub fn gaussian(&self, grid: &TorusGrid, support: &BoxSet) -> Vec<f64> {
        (0..grid.len())
            .map(|p| {
                let x = grid.coords(p);
                if !support.contains(grid, &x) {
                    return 0.0;
                }
                let r2: f64 = (0..grid.dim())
                    .map(|i| (Self::axis_distance(grid, x[i], self.center[i]) / self.half_width).powi(2))
                    .sum();
                (-0.5 * r2).exp()
            })
            .collect()
    }

    /// Periodic distance between two boxes.
    pub fn distance(&self, other: &BoxSet, grid: &TorusGrid) -> f64 {
        (0..grid.dim())
            .map(|i| {
                let gap = Self::axis_distance(grid, self.center[i], other.center[i]) - self.half_width - other.half_width;
                gap.max(0.0).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// One row of an off-diagonal profile.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OffDiagRow {
    pub distance_sq: f64,
    pub elapsed: f64,
    pub attenuation: f64,
}

impl OffDiagRow {
    pub fn ratio(&self) -> f64 {
        self.distance_sq / self.elapsed
    }
}

fn restrict(f: &Field, mask: &[bool]) -> Field {
    let mut out = f.clone();
    let nc = f.components();
    for (p, chunk) in out.values_mut().chunks_mut(nc).enumerate() {
        if !mask[p] {
            chunk.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        }
    }
    out
}

/// Probe corpus supported in `F`: narrow Gaussian windows (width `h/8`,
/// clipped to the box) centred at the middle and near each face of `F`,
/// times 1 and times seeded low-band random fields. Indicator-restricted
/// probes would put slowly decaying tails at the spectral cutoff and swamp
/// the profile.
fn probes(grid: &TorusGrid, f: &BoxSet, count: usize, seed: u64) -> Vec<Field> {
    let band = (grid.n() / 16).max(1);
    let width = f.half_width / 8.0;
    let offset = f.half_width - 5.0 * width;
    let d = grid.dim();
    let mut centers = vec![f.center];
    for axis in 0..d {
        for sign in [-1.0, 1.0] {
            let mut c = f.center;
            c[axis] += sign * offset;
            centers.push(c);
        }
    }
    let modulations: Vec<Field> = std::iter::once(Field::from_fn(*grid, 1, |_, _| Complex64::new(1.0, 0.0)))
        .chain((1..count).map(|i| grid::band_limited_random(*grid, 1, band, seed.wrapping_add(i as u64))))
        .collect();
    let mut out = Vec::with_capacity(centers.len() * modulations.len());
    for c in &centers {
        let window = BoxSet::new(*c, width).gaussian(grid, f);
        for m in &modulations {
            let mut u = m.clone();
            for (v, w) in u.values_mut().iter_mut().zip(&window) {
                *v *= *w;
            }
            out.push(u);
        }
    }
    out
}

/// `max_u ||1_E K(t)(1_F u)||_2 / ||1_F u||_2` over a probe corpus, for
/// every set pair and elapsed time.
pub fn offdiag_profile(
    grid: &TorusGrid,
    family: impl Fn(&Field, f64) -> Result<Field> + Sync,
    pairs: &[(BoxSet, BoxSet)],
    elapsed: &[f64],
    probe_count: usize,
    seed: u64,
) -> Result<Vec<OffDiagRow>> {
    let mut rows = Vec::with_capacity(pairs.len() * elapsed.len());
    for (e, f) in pairs {
        let me = e.indicator(grid);
        let mf = f.indicator(grid);
        if !mf.iter().any(|&b| b) || !me.iter().any(|&b| b) {
            return Err(invalid("sets", "a set contains no grid point"));
        }
        let corpus = probes(grid, f, probe_count.max(1), seed);
        let d2 = e.distance(f, grid).powi(2);
        let per_t: Vec<OffDiagRow> = elapsed
            .par_iter()
            .map(|&t| -> Result<OffDiagRow> {
                let mut worst: f64 = 0.0;
                for u in &corpus {
                    let denom = u.l2_norm();
                    if denom == 0.0 {
                        continue;
                    }
                    worst = worst.max(restrict(&family(u, t)?, &me).l2_norm() / denom);
                }
                Ok(OffDiagRow {
                    distance_sq: d2,
                    elapsed: t,
                    attenuation: worst,
                })
            })
            .collect::<Result<_>>()?;
        rows.extend(per_t);
    }
    Ok(rows)
}

/// Fitted `m` in `attenuation ~ (1 + d^2/t)^{-m}` over rows with ratio in
/// `[lo, hi]`, after subtracting `leakage` (floored at `floor`).
pub fn fit_decay_order(rows: &[OffDiagRow], lo: f64, hi: f64, leakage: f64, floor: f64) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.ratio() >= lo && r.ratio() <= hi)
        .map(|r| (1.0 + r.ratio(), (r.attenuation - leakage).max(floor)))
        .unzip();
    if xs.len() < 2 {
        return None;
    }
    Some(-log_log_slope(&xs, &ys))
}

/// `K(t) = e^{t Delta}`.
pub fn heat_semigroup(u: &Field, t: f64) -> Result<Field> {
    let mut s = u.to_spectral();
    s.apply_multiplier(|k| Complex64::new((-t * k.iter().map(|v| v * v).sum::<f64>()).exp(), 0.0));
    Ok(s.to_physical())
}

/// `K(t) = t L (I - t Delta)^{-1}` with `L = -div a grad` for scalar
/// coefficient fields `a` (row-major `d x d`).
pub fn resolvent_family(a: &[Field], u: &Field, t: f64) -> Result<Field> {
    let mut s = u.to_spectral();
    s.apply_multiplier(|k| Complex64::new(1.0 / (1.0 + t * k.iter().map(|v| v * v).sum::<f64>()), 0.0));
    let v = s.to_physical();
    Ok(&crate::coefficients::apply_divergence_form(a, &v)? * t)
}

/// Result of a tent maximal-regularity experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct TentExperiment {
    pub ratio: f64,
    pub solution: NormEstimate,
    pub data: f64,
}

/// Forcing as a path on the solver grid: the tent slice of the cell that
/// contains each node (zero after the last cell).
fn forcing_on(solver: &TimeGrid, f: &TentField) -> Result<SpaceTimePath> {
    let edges = f.edges.times();
    let slices = solver
        .times()
        .iter()
        .map(|&t| {
            let l = edges.partition_point(|&e| e <= t * (1.0 + 1e-12));
            if l == 0 || l > f.slices.len() {
                Field::zeros(f.grid, f.components)
            } else {
                f.slices[l - 1].clone()
            }
        })
        .collect();
    SpaceTimePath::new(solver.clone(), slices, 0)
}

/// `||M f||_{T^{p,2}_{sigma+2}} / ||f||_{T^{p,2}_sigma}` with `M f(t) =
/// int_0^t Gamma(t, s) f(s) ds` and `f = 0` before the first tent node.
/// `a` must live on `subdivided(f.edges(), sub)`.
pub fn tent_maxreg_experiment(a: &OperatorPath, f: &TentField, p: f64, sigma: f64, margin_samples: usize) -> Result<TentExperiment> {
    let family = EvolutionFamily::assemble(a, margin_samples)?;
    let forcing = forcing_on(a.times(), f)?;
    let mf = deterministic_convolution(&family, &forcing)?;
    let out = TentField::sample_path(&mf, &f.edges)?;
    let num = tent_norm(&out, TentNormParams::new(p, sigma + 2.0, 1.0)?);
    let den = tent_norm(f, TentNormParams::new(p, sigma, 1.0)?);
    Ok(TentExperiment {
        ratio: if den > 0.0 { num / den } else { 0.0 },
        solution: NormEstimate::single(num).with_descriptor(format!("T^{{{p},2}}_{}", sigma + 2.0)),
        data: den,
    })
}

/// Monte-Carlo estimate of `E||U||^p_{T_{sigma+2}} / (E||g||^p_{T_{sigma+1}}
/// + E||grad g||^p_{T_sigma})` for `U = int Gamma(t, s) g(s) dW(s)` with a
/// deterministic `H`-valued `g` (component `n` is `g_n`, scalar equation).
pub fn tent_stochastic_experiment(
    a: &OperatorPath,
    g: &TentField,
    p: f64,
    sigma: f64,
    noises: &[NoisePath],
    margin_samples: usize,
) -> Result<TentExperiment> {
    let family = EvolutionFamily::assemble(a, margin_samples)?;
    let gpath = forcing_on(a.times(), g)?;
    let per_direction: Vec<SpaceTimePath> = (0..g.components)
        .map(|n| gpath.map(|_, s| s.component(n)))
        .collect();
    let data = tent_norm(g, TentNormParams::new(p, sigma + 1.0, 1.0)?).powf(p)
        + tent_norm(&g.gradient()?, TentNormParams::new(p, sigma, 1.0)?).powf(p);
    let params = TentNormParams::new(p, sigma + 2.0, 1.0)?;
    let values: Vec<f64> = noises
        .par_iter()
        .map(|noise| -> Result<f64> {
            let u = stochastic_convolution(&family, &per_direction, noise)?;
            Ok(tent_norm(&TentField::sample_path(&u, &g.edges)?, params))
        })
        .collect::<Result<_>>()?;
    let solution = if values.len() >= 2 {
        mc_lp_omega(&values, p)?
    } else {
        NormEstimate::single(values.first().copied().unwrap_or(0.0))
    };
    let num = solution.value.powf(p);
    Ok(TentExperiment {
        ratio: if data > 0.0 { num / data } else { 0.0 },
        solution,
        data,
    })
}

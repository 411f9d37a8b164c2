//! Weighted space-time norms of sampled paths and Monte-Carlo aggregation
//! over seeds.
//!
//! Time integrals use the midpoint rule on each cell with the field
//! interpolated linearly, so the weight `t^alpha` is never evaluated at 0.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::evolution::SpaceTimePath;
use crate::grid::{self, Field, TorusGrid};
use crate::time_grid::TimeGrid;

/// Default distance between the time smoothness of the surrogate seminorm
/// and the target `theta`.
pub const DEFAULT_BETA_GAP: f64 = 0.05;

/// Number of bootstrap resamples behind every confidence interval.
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

const BOOTSTRAP_SEED: u64 = 0x5EED_B007;

/// Power weight `w_alpha(t) = t^alpha` for `L^p(I, w_alpha; X)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightSpec {
    pub p: f64,
    pub alpha: f64,
    pub horizon: f64,
}

impl WeightSpec {
    pub fn new(p: f64, alpha: f64, horizon: f64) -> Result<Self> {
        if !(p >= 1.0 && p.is_finite()) {
            return Err(invalid("p", format!("need 1 <= p < inf, got {p}")));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(invalid("alpha", format!("only alpha >= 0 is supported, got {alpha}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid("horizon", format!("need T > 0, got {horizon}")));
        }
        Ok(Self { p, alpha, horizon })
    }

    /// Whether `(p, alpha)` lies in the maximal-regularity range
    /// `alpha in [0, p/2 - 1)` (with `alpha = 0` allowed at `p = 2`).
    pub fn is_admissible(&self) -> bool {
        self.p >= 2.0 && (self.alpha < self.p / 2.0 - 1.0 || (self.alpha == 0.0 && self.p == 2.0))
    }

    /// Trace smoothness `delta = 1 - (1 + alpha)/p`.
    pub fn delta(&self) -> f64 {
        1.0 - (1.0 + self.alpha) / self.p
    }

    pub fn at(&self, t: f64) -> f64 {
        if self.alpha == 0.0 {
            1.0
        } else {
            t.powf(self.alpha)
        }
    }
}

/// Spatial norm applied to every time slice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SpatialNorm {
    /// `||J^s u||_{L^q}`; `s = 0` is the plain `L^q` norm.
    Bessel { s: f64, q: f64 },
    /// `(sum_{j<=k} ||D^j u||_q^q)^{1/q}`.
    Sobolev { k: usize, q: f64 },
    /// `||D^k u||_{L^q}` only.
    TopDerivative { k: usize, q: f64 },
}

impl SpatialNorm {
    pub fn lq(q: f64) -> Self {
        SpatialNorm::Bessel { s: 0.0, q }
    }

    pub fn bessel(s: f64, q: f64) -> Self {
        SpatialNorm::Bessel { s, q }
    }

    pub fn of(&self, f: &Field) -> f64 {
        match *self {
            SpatialNorm::Bessel { s, q } => grid::bessel_norm(f, s, q),
            SpatialNorm::Sobolev { k, q } => grid::sobolev_norm(f, k, q),
            SpatialNorm::TopDerivative { k, q } => grid::derivative_tensor_norm(f, k, q),
        }
    }

    /// Linear lift whose `L^q` norm is this norm, when there is one.
    fn lift(&self) -> Option<(f64, f64)> {
        match *self {
            SpatialNorm::Bessel { s, q } => Some((s, q)),
            _ => None,
        }
    }

    pub fn descriptor(&self) -> String {
        match *self {
            SpatialNorm::Bessel { s, q } if s == 0.0 => format!("L^{q}"),
            SpatialNorm::Bessel { s, q } => format!("H^{{{s},{q}}}"),
            SpatialNorm::Sobolev { k, q } => format!("W^{{{k},{q}}}"),
            SpatialNorm::TopDerivative { k, q } => format!("D^{k} L^{q}"),
        }
    }
}

/// A norm value with a 95% Monte-Carlo interval.
#[derive(Clone, Debug, PartialEq)]
pub struct NormEstimate {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub samples: usize,
    pub grid: String,
    pub descriptor: String,
}

impl NormEstimate {
    /// A deterministic value (zero-width interval).
    pub fn single(value: f64) -> Self {
        Self {
            value,
            lower: value,
            upper: value,
            samples: 1,
            grid: String::new(),
            descriptor: String::new(),
        }
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn with_grid(mut self, grid: impl Into<String>) -> Self {
        self.grid = grid.into();
        self
    }

    pub fn with_descriptor(mut self, d: impl Into<String>) -> Self {
        self.descriptor = d.into();
        self
    }
}

/// A path whose every slice is the constant `values[i]` on a two-point grid;
/// all spatial `L^q` norms of slice `i` equal `|values[i]|`.
pub fn scalar_path(times: TimeGrid, values: &[f64]) -> Result<SpaceTimePath> {
    let grid = TorusGrid::new(1, 2)?;
    let slices = values
        .iter()
        .map(|&v| Field::from_fn(grid, 1, |_, _| Complex64::new(v, 0.0)))
        .collect();
    SpaceTimePath::new(times, slices, 0)
}

fn midpoint_slice(a: &Field, b: &Field) -> Field {
    let mut m = a.clone();
    m.axpy(Complex64::new(1.0, 0.0), b);
    m.scaled(Complex64::new(0.5, 0.0))
}

/// `(sum_i ||u(t_{i+1/2})||_X^p w(t_{i+1/2}) dt_i)^{1/p}`.
pub fn weighted_lp_time_norm(path: &SpaceTimePath, w: &WeightSpec, norm: SpatialNorm) -> f64 {
    let times = path.times();
    (0..times.steps())
        .map(|i| {
            let mid = midpoint_slice(path.slice(i), path.slice(i + 1));
            norm.of(&mid).powf(w.p) * w.at(times.midpoint(i)) * times.dt(i)
        })
        .sum::<f64>()
        .powf(1.0 / w.p)
}

/// `L^p(I, w; H^{s,q}(l^2))` norm of a family of paths (one per direction).
pub fn weighted_lp_square_function(family: &[SpaceTimePath], w: &WeightSpec, s: f64, q: f64) -> Result<f64> {
    let Some(first) = family.first() else {
        return Ok(0.0);
    };
    let times = first.times();
    if family.iter().any(|g| g.times() != times) {
        return Err(Error::ShapeMismatch("square-function family uses different time grids".into()));
    }
    Ok((0..times.steps())
        .map(|i| {
            let mids: Vec<Field> = family.iter().map(|g| midpoint_slice(g.slice(i), g.slice(i + 1))).collect();
            grid::square_function_norm(&mids, s, q).powf(w.p) * w.at(times.midpoint(i)) * times.dt(i)
        })
        .sum::<f64>()
        .powf(1.0 / w.p))
}

fn lifted_slices(path: &SpaceTimePath, norm: SpatialNorm) -> (Vec<Field>, Option<f64>) {
    match norm.lift() {
        Some((s, q)) if s != 0.0 => (path.slices().iter().map(|f| grid::bessel_potential(f, s)).collect(), Some(q)),
        Some((_, q)) => (path.slices().to_vec(), Some(q)),
        None => (path.slices().to_vec(), None),
    }
}

fn difference_norm(a: &Field, b: &Field, q: Option<f64>, norm: SpatialNorm) -> f64 {
    match q {
        Some(q) => {
            let mags: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).norm()).collect();
            if a.components() == 1 {
                grid::lq_of_magnitudes(&mags, q)
            } else {
                let nc = a.components();
                let per_point: Vec<f64> =
                    mags.chunks(nc).map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
                grid::lq_of_magnitudes(&per_point, q)
            }
        }
        None => norm.of(&(a - b)),
    }
}

/// Sobolev-Slobodeckij seminorm
/// `(int_0^T int_0^{T-h} ||u(s+h) - u(s)||^p w(s) h^{-beta p - 1} ds dh)^{1/p}`
/// as a double Riemann sum over grid lags `h = k dt` and nodes `s`,
/// with the weight taken at cell midpoints.
pub fn fractional_seminorm(path: &SpaceTimePath, beta: f64, w: &WeightSpec, norm: SpatialNorm) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(invalid("beta", format!("need 0 < beta < 1, got {beta}")));
    }
    let times = path.times();
    if !times.is_uniform() {
        return Err(invalid("time grid", "the fractional seminorm needs a uniform time grid"));
    }
    let m = times.steps();
    let dt = times.dt(0);
    let (lifted, q) = lifted_slices(path, norm);
    let weights: Vec<f64> = (0..m).map(|i| w.at(times.midpoint(i))).collect();
    let mut total = 0.0;
    for k in 1..=m {
        let h = k as f64 * dt;
        let mut inner = 0.0;
        for i in 0..m - k {
            let d = difference_norm(&lifted[i + k], &lifted[i], q, norm);
            if d > 0.0 {
                inner += d.powf(w.p) * weights[i];
            }
        }
        total += inner * dt * h.powf(-beta * w.p - 1.0) * dt;
    }
    Ok(total.powf(1.0 / w.p))
}

/// `max_{s<t} ||u(t) - u(s)|| / |t - s|^gamma` over nodes in `[t_from, T]`.
pub fn holder_seminorm(path: &SpaceTimePath, gamma: f64, t_from: f64, norm: SpatialNorm) -> Result<f64> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid("gamma", format!("need 0 < gamma <= 1, got {gamma}")));
    }
    let times = path.times().times();
    let start = times.iter().position(|&t| t >= t_from).unwrap_or(times.len());
    let (lifted, q) = lifted_slices(path, norm);
    let mut best = 0.0f64;
    for j in start..times.len() {
        for i in start..j {
            let d = difference_norm(&lifted[j], &lifted[i], q, norm);
            best = best.max(d / (times[j] - times[i]).powf(gamma));
        }
    }
    Ok(best)
}

/// Holder seminorm plus the sup norm over the same nodes.
pub fn holder_norm(path: &SpaceTimePath, gamma: f64, t_from: f64, norm: SpatialNorm) -> Result<f64> {
    let semi = holder_seminorm(path, gamma, t_from, norm)?;
    let sup = path
        .times()
        .times()
        .iter()
        .zip(path.slices())
        .filter(|(t, _)| **t >= t_from)
        .map(|(_, f)| norm.of(f))
        .fold(0.0, f64::max);
    Ok(semi + sup)
}

/// `||u||_{L^p(w; H^{s,q})} + [u]_{W^{beta,p}(w; H^{s,q})}`.
pub fn smr_surrogate(path: &SpaceTimePath, beta: f64, s: f64, q: f64, w: &WeightSpec) -> Result<f64> {
    let norm = SpatialNorm::bessel(s, q);
    Ok(weighted_lp_time_norm(path, w, norm) + fractional_seminorm(path, beta, w, norm)?)
}

/// Computable upper surrogate of `||u||_{H^{theta,p}(I, w; H^{2m(1-theta),q})}`:
/// the time smoothness `theta` is replaced by `theta + gap`.
pub fn smr_norm(path: &SpaceTimePath, theta: f64, m: usize, q: f64, w: &WeightSpec, gap: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&theta) {
        return Err(invalid("theta", format!("need 0 <= theta < 1/2, got {theta}")));
    }
    if !(gap > 0.0 && theta + gap < 1.0) {
        return Err(invalid("gap", format!("need gap > 0 and theta + gap < 1, got {gap}")));
    }
    smr_surrogate(path, theta + gap, 2.0 * m as f64 * (1.0 - theta), q, w)
}

fn power_mean(values: &[f64], p: f64) -> f64 {
    (values.iter().map(|v| v.abs().powf(p)).sum::<f64>() / values.len() as f64).powf(1.0 / p)
}

fn percentile(sorted: &[f64], frac: f64) -> f64 {
    let pos = frac * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn bootstrap(values: &[f64], stat: impl Fn(&[f64]) -> f64) -> Result<NormEstimate> {
    if values.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: values.len(),
        });
    }
    let value = stat(values);
    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    let mut resample = vec![0.0; values.len()];
    let mut stats: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            for r in resample.iter_mut() {
                *r = values[rng.random_range(0..values.len())];
            }
            stat(&resample)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    Ok(NormEstimate {
        value,
        lower: percentile(&stats, 0.025).min(value),
        upper: percentile(&stats, 0.975).max(value),
        samples: values.len(),
        grid: String::new(),
        descriptor: String::new(),
    })
}

/// `(mean |x|^p)^{1/p}` over seeds with a percentile-bootstrap interval.
pub fn mc_lp_omega(values: &[f64], p: f64) -> Result<NormEstimate> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(invalid("p", format!("need 1 <= p < inf, got {p}")));
    }
    Ok(bootstrap(values, |v| power_mean(v, p))?.with_descriptor(format!("L^{p}(Omega)")))
}

/// Sample mean with a percentile-bootstrap interval.
pub fn mc_mean(values: &[f64]) -> Result<NormEstimate> {
    Ok(bootstrap(values, |v| v.iter().sum::<f64>() / v.len() as f64)?.with_descriptor("mean"))
}

//! Periodic grids, `C^N`-valued fields, Fourier transforms and the spatial
//! norms built on Fourier multipliers.
//!
//! Fields live on the torus `[0, L)^d` sampled at `n` points per axis. All
//! norms use the normalized measure (the box has measure one), so a unit
//! plane wave has `L^q` norm one for every `q`.
//!
//! Fourier coefficients are normalized so that
//! `f(x) = sum_k c_k exp(i kappa_k . x)` with `kappa_k = 2 pi k / L`; the
//! coefficient array uses the FFT ordering of the frequency lattice.

use std::cell::RefCell;
use std::f64::consts::{FRAC_PI_2, TAU};
use std::ops::{Add, AddAssign, Mul, Sub, SubAssign};

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{invalid, Error, Result};

pub const MAX_DIM: usize = 3;
/// Highest derivative order accepted by [`apply_derivative`] (2m with m <= 3).
pub const MAX_DERIVATIVE_ORDER: usize = 6;

/// Description of the Littlewood-Paley partition used by [`besov_norm`].
pub const LITTLEWOOD_PALEY_PARTITION: &str =
    "dyadic blocks j>=1 on |k| in [2^(j-1), 2^(j+1)], block 0 on |k|<=2; raised-cosine (cos^2 in log2|k|) overlap";

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TorusGrid {
    dim: usize,
    n: usize,
    period: f64,
}

impl TorusGrid {
    /// Grid on the default box `[0, 2 pi)^dim`.
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        Self::with_period(dim, n, TAU)
    }

    pub fn with_period(dim: usize, n: usize, period: f64) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidGrid(format!("dimension {dim} not in 1..=3")));
        }
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "points per axis must be a power of two >= 2, got {n}"
            )));
        }
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::InvalidGrid(format!("period must be positive, got {period}")));
        }
        Ok(Self { dim, n, period })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// Number of grid points, `n^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        self.period / self.n as f64
    }

    /// Quadrature weight of one cell under the normalized measure.
    pub fn cell_weight(&self) -> f64 {
        1.0 / self.len() as f64
    }

    /// Same grid with `factor` times as many points per axis.
    pub fn refined(&self, factor: usize) -> Result<Self> {
        Self::with_period(self.dim, self.n * factor, self.period)
    }

    fn stride(&self, axis: usize) -> usize {
        self.n.pow((self.dim - 1 - axis) as u32)
    }

    pub fn axis_index(&self, point: usize, axis: usize) -> usize {
        (point / self.stride(axis)) % self.n
    }

    pub fn coords(&self, point: usize) -> [f64; MAX_DIM] {
        let mut x = [0.0; MAX_DIM];
        let h = self.spacing();
        for (axis, xi) in x.iter_mut().enumerate().take(self.dim) {
            *xi = self.axis_index(point, axis) as f64 * h;
        }
        x
    }

    /// Signed integer frequency of a coefficient slot; lies in `[-n/2, n/2)`.
    pub fn frequency(&self, slot: usize) -> [i64; MAX_DIM] {
        let mut k = [0i64; MAX_DIM];
        let half = self.n / 2;
        for (axis, ki) in k.iter_mut().enumerate().take(self.dim) {
            let i = self.axis_index(slot, axis);
            *ki = if i < half { i as i64 } else { i as i64 - self.n as i64 };
        }
        k
    }

    /// Physical wave vector `2 pi k / L`.
    pub fn wavevector(&self, slot: usize) -> [f64; MAX_DIM] {
        let scale = TAU / self.period;
        let k = self.frequency(slot);
        let mut w = [0.0; MAX_DIM];
        for axis in 0..self.dim {
            w[axis] = scale * k[axis] as f64;
        }
        w
    }

    /// Wave vector with Nyquist components cleared, the convention used for
    /// odd-order multipliers so that real fields stay real.
    pub fn odd_wavevector(&self, slot: usize) -> [f64; MAX_DIM] {
        let mut w = self.wavevector(slot);
        for (axis, wi) in w.iter_mut().enumerate().take(self.dim) {
            if self.is_nyquist(slot, axis) {
                *wi = 0.0;
            }
        }
        w
    }

    pub fn wavenumber_sq(&self, slot: usize) -> f64 {
        self.wavevector(slot).iter().map(|w| w * w).sum()
    }

    pub fn is_nyquist(&self, slot: usize, axis: usize) -> bool {
        self.axis_index(slot, axis) == self.n / 2
    }

    pub fn slot_of_frequency(&self, k: &[i64]) -> Option<usize> {
        if k.len() != self.dim {
            return None;
        }
        let n = self.n as i64;
        let mut slot = 0usize;
        for (axis, &ki) in k.iter().enumerate() {
            if ki < -n / 2 || ki >= n / 2 {
                return None;
            }
            let i = ki.rem_euclid(n) as usize;
            slot += i * self.stride(axis);
        }
        Some(slot)
    }

    /// 2/3-rule mask: `true` for coefficients kept after a pointwise product.
    pub fn dealias_mask(&self) -> Vec<bool> {
        let cut = (self.n / 3) as i64;
        (0..self.len())
            .map(|slot| {
                let k = self.frequency(slot);
                k.iter().take(self.dim).all(|ki| ki.abs() <= cut)
            })
            .collect()
    }

    /// Periodic distance between two points of the box.
    pub fn periodic_distance(&self, a: &[f64; MAX_DIM], b: &[f64; MAX_DIM]) -> f64 {
        let l = self.period;
        let mut s = 0.0;
        for axis in 0..self.dim {
            let mut d = (a[axis] - b[axis]).rem_euclid(l);
            if d > 0.5 * l {
                d = l - d;
            }
            s += d * d;
        }
        s.sqrt()
    }
}

/// A `C^N`-valued function sampled on a [`TorusGrid`]. Values are stored
/// point-major with the `N` components interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: TorusGrid,
    components: usize,
    values: Vec<Complex64>,
}

/// Fourier coefficients of a [`Field`], same layout as the physical values.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField {
    grid: TorusGrid,
    components: usize,
    coeffs: Vec<Complex64>,
}

impl Field {
    pub fn zeros(grid: TorusGrid, components: usize) -> Self {
        assert!(components > 0, "a field needs at least one component");
        Self {
            grid,
            components,
            values: vec![Complex64::new(0.0, 0.0); grid.len() * components],
        }
    }

    pub fn from_values(grid: TorusGrid, components: usize, values: Vec<Complex64>) -> Result<Self> {
        if components == 0 || values.len() != grid.len() * components {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {} components, got {}",
                grid.len() * components,
                components,
                values.len()
            )));
        }
        Ok(Self {
            grid,
            components,
            values,
        })
    }

    /// Samples `f(x, component)` at every grid point.
    pub fn from_fn(
        grid: TorusGrid,
        components: usize,
        f: impl Fn(&[f64], usize) -> Complex64,
    ) -> Self {
        let mut values = Vec::with_capacity(grid.len() * components);
        for p in 0..grid.len() {
            let x = grid.coords(p);
            for c in 0..components {
                values.push(f(&x[..grid.dim()], c));
            }
        }
        Self {
            grid,
            components,
            values,
        }
    }

    /// `amplitude * exp(i kappa_k . x)` in one component, zero elsewhere.
    pub fn plane_wave(
        grid: TorusGrid,
        components: usize,
        component: usize,
        k: &[i64],
        amplitude: Complex64,
    ) -> Self {
        let scale = TAU / grid.period();
        Self::from_fn(grid, components, |x, c| {
            if c != component {
                return Complex64::new(0.0, 0.0);
            }
            let phase: f64 = x.iter().zip(k).map(|(xi, &ki)| scale * ki as f64 * xi).sum();
            amplitude * Complex64::from_polar(1.0, phase)
        })
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn get(&self, point: usize, component: usize) -> Complex64 {
        self.values[point * self.components + component]
    }

    pub fn set(&mut self, point: usize, component: usize, value: Complex64) {
        self.values[point * self.components + component] = value;
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.grid == other.grid && self.components == other.components
    }

    pub fn scaled(&self, c: Complex64) -> Field {
        Field {
            grid: self.grid,
            components: self.components,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: Complex64, x: &Field) {
        assert!(self.same_shape(x), "field shape mismatch in axpy");
        for (a, b) in self.values.iter_mut().zip(&x.values) {
            *a += alpha * b;
        }
    }

    /// Pointwise Euclidean norm in `C^N`.
    pub fn pointwise_norms(&self) -> Vec<f64> {
        self.values
            .chunks(self.components)
            .map(|c| c.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt())
            .collect()
    }

    /// `L^q` norm under the normalized measure; `q >= 1`.
    pub fn lq_norm(&self, q: f64) -> f64 {
        lq_of_magnitudes(&self.pointwise_norms(), q)
    }

    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.cell_weight()).sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.pointwise_norms().into_iter().fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Restriction to one component as a scalar field.
    pub fn component(&self, c: usize) -> Field {
        Field {
            grid: self.grid,
            components: 1,
            values: self.values.iter().skip(c).step_by(self.components).copied().collect(),
        }
    }

    pub fn to_spectral(&self) -> SpectralField {
        let mut coeffs = self.values.clone();
        transform(&self.grid, self.components, &mut coeffs, FftDirection::Forward);
        let w = self.grid.cell_weight();
        for c in &mut coeffs {
            *c *= w;
        }
        SpectralField {
            grid: self.grid,
            components: self.components,
            coeffs,
        }
    }

    /// Flat little-endian layout: points row-major, components interleaved,
    /// each value as `re, im` 64-bit floats.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * 16);
        for v in &self.values {
            out.extend_from_slice(&v.re.to_le_bytes());
            out.extend_from_slice(&v.im.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(grid: TorusGrid, components: usize, bytes: &[u8]) -> Result<Self> {
        let expected = grid.len() * components * 16;
        if bytes.len() != expected {
            return Err(Error::Decode(format!(
                "expected {expected} bytes, got {}",
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(16)
            .map(|c| {
                let re = f64::from_le_bytes(c[..8].try_into().expect("8 bytes"));
                let im = f64::from_le_bytes(c[8..].try_into().expect("8 bytes"));
                Complex64::new(re, im)
            })
            .collect();
        Self::from_values(grid, components, values)
    }
}

impl SpectralField {
    pub fn zeros(grid: TorusGrid, components: usize) -> Self {
        Self {
            grid,
            components,
            coeffs: vec![Complex64::new(0.0, 0.0); grid.len() * components],
        }
    }

    pub fn from_coeffs(grid: TorusGrid, components: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        if components == 0 || coeffs.len() != grid.len() * components {
            return Err(Error::ShapeMismatch(format!(
                "expected {} coefficients, got {}",
                grid.len() * components,
                coeffs.len()
            )));
        }
        Ok(Self {
            grid,
            components,
            coeffs,
        })
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub fn get(&self, slot: usize, component: usize) -> Complex64 {
        self.coeffs[slot * self.components + component]
    }

    pub fn set(&mut self, slot: usize, component: usize, value: Complex64) {
        self.coeffs[slot * self.components + component] = value;
    }

    /// Coefficient of frequency `k`, or `None` when `k` is off the lattice.
    pub fn mode(&self, k: &[i64], component: usize) -> Option<Complex64> {
        self.grid.slot_of_frequency(k).map(|s| self.get(s, component))
    }

    /// Multiplies every coefficient by `m(kappa)`, the same scalar for all components.
    pub fn apply_multiplier(&mut self, m: impl Fn(&[f64; MAX_DIM]) -> Complex64) {
        let nc = self.components;
        for slot in 0..self.grid.len() {
            let factor = m(&self.grid.wavevector(slot));
            for c in &mut self.coeffs[slot * nc..(slot + 1) * nc] {
                *c *= factor;
            }
        }
    }

    pub fn dealias(&mut self) {
        let mask = self.grid.dealias_mask();
        let nc = self.components;
        for (slot, keep) in mask.into_iter().enumerate() {
            if !keep {
                for c in &mut self.coeffs[slot * nc..(slot + 1) * nc] {
                    *c = Complex64::new(0.0, 0.0);
                }
            }
        }
    }

    /// Sum of squared coefficient moduli; equals the squared `L^2` norm.
    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn to_physical(&self) -> Field {
        let mut values = self.coeffs.clone();
        transform(&self.grid, self.components, &mut values, FftDirection::Inverse);
        Field {
            grid: self.grid,
            components: self.components,
            values,
        }
    }
}

fn transform(grid: &TorusGrid, components: usize, data: &mut [Complex64], direction: FftDirection) {
    let n = grid.n();
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft(n, direction));
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let len = grid.len();
    for axis in 0..grid.dim() {
        let stride = grid.stride(axis);
        let blocks = len / (n * stride);
        for block in 0..blocks {
            for inner in 0..stride {
                let base = block * n * stride + inner;
                for c in 0..components {
                    for (j, l) in line.iter_mut().enumerate() {
                        *l = data[(base + j * stride) * components + c];
                    }
                    fft.process_with_scratch(&mut line, &mut scratch);
                    for (j, l) in line.iter().enumerate() {
                        data[(base + j * stride) * components + c] = *l;
                    }
                }
            }
        }
    }
}

pub(crate) fn lq_of_magnitudes(m: &[f64], q: f64) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let w = 1.0 / m.len() as f64;
    if q == 2.0 {
        return (m.iter().map(|v| v * v).sum::<f64>() * w).sqrt();
    }
    (m.iter().map(|v| v.powf(q)).sum::<f64>() * w).powf(1.0 / q)
}

/// Multi-indices of the given order in `dim` variables, lexicographically
/// descending (`(2,0), (1,1), (0,2)` for order 2 in 2D).
pub fn multi_indices(dim: usize, order: usize) -> Vec<[usize; MAX_DIM]> {
    fn rec(dim: usize, axis: usize, left: usize, cur: &mut [usize; MAX_DIM], out: &mut Vec<[usize; MAX_DIM]>) {
        if axis + 1 == dim {
            cur[axis] = left;
            out.push(*cur);
            return;
        }
        for take in (0..=left).rev() {
            cur[axis] = take;
            rec(dim, axis + 1, left - take, cur, out);
        }
        cur[axis] = 0;
    }
    let mut out = Vec::new();
    let mut cur = [0usize; MAX_DIM];
    rec(dim, 0, order, &mut cur, &mut out);
    out
}

/// Multinomial coefficient `|alpha|! / alpha!`.
pub fn multinomial(alpha: &[usize; MAX_DIM]) -> f64 {
    let total: usize = alpha.iter().sum();
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    fact(total) / alpha.iter().map(|&a| fact(a)).product::<f64>()
}

/// `kappa^alpha` for a wave vector.
pub fn monomial(kappa: &[f64; MAX_DIM], alpha: &[usize; MAX_DIM]) -> f64 {
    kappa
        .iter()
        .zip(alpha)
        .map(|(k, &a)| k.powi(a as i32))
        .product()
}

/// `d^alpha f` via the multiplier `(i kappa)^alpha`. The Nyquist slot is
/// cleared along axes differentiated an odd number of times.
pub fn apply_derivative(f: &Field, alpha: &[usize]) -> Result<Field> {
    let g = f.grid();
    if alpha.len() != g.dim() {
        return Err(invalid("alpha", format!("expected {} entries, got {}", g.dim(), alpha.len())));
    }
    let order: usize = alpha.iter().sum();
    if order > MAX_DERIVATIVE_ORDER {
        return Err(invalid("alpha", format!("order {order} exceeds {MAX_DERIVATIVE_ORDER}")));
    }
    let mut a = [0usize; MAX_DIM];
    a[..alpha.len()].copy_from_slice(alpha);
    let mut s = f.to_spectral();
    apply_derivative_spectral(&mut s, &a);
    Ok(s.to_physical())
}

pub(crate) fn apply_derivative_spectral(s: &mut SpectralField, alpha: &[usize; MAX_DIM]) {
    let grid = *s.grid();
    let nc = s.components();
    let order: usize = alpha.iter().sum();
    let unit = Complex64::new(0.0, 1.0).powi(order as i32);
    for slot in 0..grid.len() {
        let odd_nyquist = (0..grid.dim()).any(|ax| alpha[ax] % 2 == 1 && grid.is_nyquist(slot, ax));
        let factor = if odd_nyquist {
            Complex64::new(0.0, 0.0)
        } else {
            unit * monomial(&grid.wavevector(slot), alpha)
        };
        for c in &mut s.coeffs[slot * nc..(slot + 1) * nc] {
            *c *= factor;
        }
    }
}

/// Bessel potential `J^s f = F^{-1}[(1 + |kappa|^2)^{s/2} f^]`.
pub fn bessel_potential(f: &Field, s: f64) -> Field {
    let mut spec = f.to_spectral();
    spec.apply_multiplier(|k| {
        let k2: f64 = k.iter().map(|v| v * v).sum();
        Complex64::new((1.0 + k2).powf(0.5 * s), 0.0)
    });
    spec.to_physical()
}

/// `H^{s,q}` norm: `||J^s f||_{L^q}`.
pub fn bessel_norm(f: &Field, s: f64, q: f64) -> f64 {
    if s == 0.0 {
        return f.lq_norm(q);
    }
    bessel_potential(f, s).lq_norm(q)
}

/// `||D^k f||_{L^q}` where `|D^k f|^2 = sum over ordered k-tuples of |d_{i1..ik} f|^2`
/// (for `k = 2`, the Frobenius norm of the Hessian).
pub fn derivative_tensor_norm(f: &Field, order: usize, q: f64) -> f64 {
    let g = *f.grid();
    if order == 0 {
        return f.lq_norm(q);
    }
    let spec = f.to_spectral();
    let mut acc = vec![0.0; g.len()];
    for alpha in multi_indices(g.dim(), order) {
        let weight = multinomial(&alpha);
        let mut s = spec.clone();
        apply_derivative_spectral(&mut s, &alpha);
        let d = s.to_physical();
        for (a, m) in acc.iter_mut().zip(d.pointwise_norms()) {
            *a += weight * m * m;
        }
    }
    let mags: Vec<f64> = acc.into_iter().map(f64::sqrt).collect();
    lq_of_magnitudes(&mags, q)
}

/// `W^{k,q}` norm `(sum_{j<=k} ||D^j f||_q^q)^{1/q}`.
pub fn sobolev_norm(f: &Field, k: usize, q: f64) -> f64 {
    (0..=k)
        .map(|j| derivative_tensor_norm(f, j, q).powf(q))
        .sum::<f64>()
        .powf(1.0 / q)
}

/// `||(sum_n |J^s g_n|^2)^{1/2}||_{L^q}`, the `H^{s,q}(l^2)` norm of a
/// finite family of fields.
pub fn square_function_norm(family: &[Field], s: f64, q: f64) -> f64 {
    let Some(first) = family.first() else {
        return 0.0;
    };
    let mut acc = vec![0.0; first.grid().len()];
    for g in family {
        let lifted = if s == 0.0 { g.clone() } else { bessel_potential(g, s) };
        for (a, m) in acc.iter_mut().zip(lifted.pointwise_norms()) {
            *a += m * m;
        }
    }
    let mags: Vec<f64> = acc.into_iter().map(f64::sqrt).collect();
    lq_of_magnitudes(&mags, q)
}

fn lp_cutoff(r: f64) -> f64 {
    if r <= 1.0 {
        1.0
    } else if r >= 2.0 {
        0.0
    } else {
        (FRAC_PI_2 * r.log2()).cos().powi(2)
    }
}

/// Weight of dyadic block `j` at wavenumber magnitude `r`. The weights sum to one.
pub fn littlewood_paley_weight(j: usize, r: f64) -> f64 {
    if j == 0 {
        lp_cutoff(r)
    } else {
        let s = (1u64 << j) as f64;
        lp_cutoff(r / s) - lp_cutoff(2.0 * r / s)
    }
}

/// Littlewood-Paley pieces `Delta_j f` for all blocks that meet the grid spectrum.
pub fn littlewood_paley_blocks(f: &Field) -> Vec<Field> {
    let g = *f.grid();
    let kmax = (0..g.len()).map(|s| g.wavenumber_sq(s).sqrt()).fold(0.0, f64::max);
    let mut jmax = 0usize;
    while ((1u64 << jmax) as f64) < kmax {
        jmax += 1;
    }
    let spec = f.to_spectral();
    (0..=jmax + 1)
        .map(|j| {
            let mut s = spec.clone();
            s.apply_multiplier(|k| {
                let r = k.iter().map(|v| v * v).sum::<f64>().sqrt();
                Complex64::new(littlewood_paley_weight(j, r), 0.0)
            });
            s.to_physical()
        })
        .collect()
}

/// Seeded field with independent standard complex Gaussian coefficients on
/// the modes `|k_i| <= band` and zero elsewhere.
pub fn band_limited_random(grid: TorusGrid, components: usize, band: usize, seed: u64) -> Field {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut s = SpectralField::zeros(grid, components);
    for slot in 0..grid.len() {
        if grid.frequency(slot)[..grid.dim()].iter().all(|k| k.unsigned_abs() as usize <= band) {
            for c in 0..components {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                s.set(slot, c, Complex64::new(re, im));
            }
        }
    }
    s.to_physical()
}

/// Besov norm `B^s_{q,p}`: the `l^p` sum over blocks of `2^{js} ||Delta_j f||_{L^q}`.
pub fn besov_norm(f: &Field, s: f64, q: f64, p: f64) -> Result<f64> {
    if s < 0.0 {
        return Err(invalid("s", "Besov smoothness must be non-negative"));
    }
    if q < 1.0 || p < 1.0 {
        return Err(invalid("p/q", "integrability exponents must be >= 1"));
    }
    let terms: Vec<f64> = littlewood_paley_blocks(f)
        .iter()
        .enumerate()
        .map(|(j, b)| 2f64.powf(j as f64 * s) * b.lq_norm(q))
        .collect();
    Ok(terms.iter().map(|t| t.powf(p)).sum::<f64>().powf(1.0 / p))
}

impl Add<&Field> for &Field {
    type Output = Field;
    fn add(self, rhs: &Field) -> Field {
        let mut out = self.clone();
        out += rhs;
        out
    }
}

impl Sub<&Field> for &Field {
    type Output = Field;
    fn sub(self, rhs: &Field) -> Field {
        let mut out = self.clone();
        out -= rhs;
        out
    }
}

impl AddAssign<&Field> for Field {
    fn add_assign(&mut self, rhs: &Field) {
        assert!(self.same_shape(rhs), "field shape mismatch");
        for (a, b) in self.values.iter_mut().zip(&rhs.values) {
            *a += b;
        }
    }
}

impl SubAssign<&Field> for Field {
    fn sub_assign(&mut self, rhs: &Field) {
        assert!(self.same_shape(rhs), "field shape mismatch");
        for (a, b) in self.values.iter_mut().zip(&rhs.values) {
            *a -= b;
        }
    }
}

impl Mul<f64> for &Field {
    type Output = Field;
    fn mul(self, rhs: f64) -> Field {
        self.scaled(Complex64::new(rhs, 0.0))
    }
}

impl AddAssign<&SpectralField> for SpectralField {
    fn add_assign(&mut self, rhs: &SpectralField) {
        assert!(
            self.grid == rhs.grid && self.components == rhs.components,
            "spectral field shape mismatch"
        );
        for (a, b) in self.coeffs.iter_mut().zip(&rhs.coeffs) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn random_field(grid: TorusGrid, components: usize, seed: u64) -> Field {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values = (0..grid.len() * components)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        Field::from_values(grid, components, values).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(TorusGrid::new(0, 8).is_err());
        assert!(TorusGrid::new(4, 8).is_err());
        assert!(TorusGrid::new(1, 12).is_err());
        assert!(TorusGrid::with_period(1, 8, -1.0).is_err());
        let g = TorusGrid::new(2, 8).unwrap();
        assert_eq!(g.len(), 64);
        assert!((g.cell_weight() * g.len() as f64 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn frequencies_in_lattice_bounds_and_bijective() {
        let g = TorusGrid::new(2, 8).unwrap();
        let mut seen = std::collections::HashSet::new();
        for s in 0..g.len() {
            let k = g.frequency(s);
            assert!(k[0].abs() <= 4 && k[1].abs() <= 4);
            assert_eq!(g.slot_of_frequency(&k[..2]), Some(s));
            assert!(seen.insert(k));
        }
    }

    #[test]
    fn constant_field_is_pure_zero_mode() {
        let g = TorusGrid::new(2, 8).unwrap();
        let f = Field::from_fn(g, 1, |_, _| Complex64::new(2.5, -1.0));
        let s = f.to_spectral();
        for slot in 0..g.len() {
            let expect = if slot == 0 { Complex64::new(2.5, -1.0) } else { c(0.0) };
            assert!((s.get(slot, 0) - expect).norm() < 1e-13);
        }
    }

    #[test]
    fn plane_wave_is_single_coefficient() {
        let g = TorusGrid::new(2, 8).unwrap();
        let f = Field::plane_wave(g, 1, 0, &[2, 0], c(1.0));
        let s = f.to_spectral();
        let target = g.slot_of_frequency(&[2, 0]).unwrap();
        for slot in 0..g.len() {
            let expect = if slot == target { 1.0 } else { 0.0 };
            assert!((s.get(slot, 0) - c(expect)).norm() < 1e-13, "slot {slot}");
        }
    }

    #[test]
    fn round_trip_and_parseval_on_random_fields() {
        for (dim, n, nc) in [(1, 64, 1), (2, 16, 2), (3, 8, 3)] {
            let g = TorusGrid::new(dim, n).unwrap();
            let f = random_field(g, nc, 7 + dim as u64);
            let s = f.to_spectral();
            let back = s.to_physical();
            let err: f64 = (&back - &f).l2_norm() / f.l2_norm();
            assert!(err < 1e-12, "round trip error {err}");
            let rel = (s.energy() - f.l2_norm().powi(2)).abs() / f.l2_norm().powi(2);
            assert!(rel < 1e-10, "Parseval defect {rel}");
        }
    }

    #[test]
    fn derivative_examples() {
        let g = TorusGrid::new(1, 32).unwrap();
        let e = Field::plane_wave(g, 1, 0, &[1], c(1.0));
        let de = apply_derivative(&e, &[1]).unwrap();
        let expect = e.scaled(Complex64::new(0.0, 1.0));
        assert!((&de - &expect).sup_norm() < 1e-12);

        let one = Field::from_fn(g, 1, |_, _| c(3.0));
        assert!(apply_derivative(&one, &[1]).unwrap().sup_norm() < 1e-12);

        let s2 = Field::from_fn(g, 1, |x, _| c((2.0 * x[0]).sin()));
        let d2 = apply_derivative(&s2, &[2]).unwrap();
        let expect = &s2 * -4.0;
        assert!((&d2 - &expect).sup_norm() < 1e-11);

        assert!(apply_derivative(&s2, &[7]).is_err());
        assert!(apply_derivative(&s2, &[1, 0]).is_err());
    }

    #[test]
    fn bessel_norm_examples() {
        let g = TorusGrid::new(2, 16).unwrap();
        let one = Field::from_fn(g, 1, |_, _| c(1.0));
        for s in [-1.0, 0.0, 0.7, 3.0] {
            assert!((bessel_norm(&one, s, 2.0) - 1.0).abs() < 1e-12);
        }
        let e = Field::plane_wave(g, 1, 0, &[2, 0], c(1.0));
        assert!((bessel_norm(&e, 1.0, 2.0) - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bessel_norm_s0_matches_direct_quadrature() {
        let g = TorusGrid::new(2, 16).unwrap();
        let f = random_field(g, 2, 11);
        let direct: f64 = {
            let mut acc = 0.0;
            for p in 0..g.len() {
                let m2: f64 = (0..2).map(|c| f.get(p, c).norm_sqr()).sum();
                acc += m2.powf(1.5);
            }
            (acc / g.len() as f64).powf(1.0 / 3.0)
        };
        assert!((bessel_norm(&f, 0.0, 3.0) - direct).abs() / direct < 1e-10);
    }

    #[test]
    fn lp_weights_partition_unity() {
        for i in 0..400 {
            let r = i as f64 * 0.173;
            let total: f64 = (0..12).map(|j| littlewood_paley_weight(j, r)).sum();
            assert!((total - 1.0).abs() < 1e-12, "r = {r}: {total}");
            let active = (0..12).filter(|&j| littlewood_paley_weight(j, r) > 0.0).count();
            assert!(active <= 2);
        }
    }

    #[test]
    fn besov_examples() {
        let g = TorusGrid::new(1, 64).unwrap();
        assert_eq!(besov_norm(&Field::zeros(g, 1), 1.0, 2.0, 2.0).unwrap(), 0.0);
        for k in 1..20i64 {
            let e = Field::plane_wave(g, 1, 0, &[k], c(1.0));
            for s in [0.0, 0.5, 1.0] {
                let b = besov_norm(&e, s, 2.0, 2.0).unwrap();
                let reference = (1.0 + k as f64).powf(s);
                assert!(b <= 2.0 * reference && b >= 0.5 * reference, "k={k} s={s} b={b}");
            }
        }
        assert!(besov_norm(&Field::zeros(g, 1), -1.0, 2.0, 2.0).is_err());
    }

    #[test]
    fn dealias_mask_keeps_low_modes() {
        let g = TorusGrid::new(1, 32).unwrap();
        let mask = g.dealias_mask();
        let kept = mask.iter().filter(|k| **k).count();
        assert_eq!(kept, 21);
        assert!(mask[0] && mask[10] && !mask[11]);
    }

    #[test]
    fn multi_index_enumeration() {
        assert_eq!(multi_indices(2, 2).len(), 3);
        assert_eq!(multi_indices(3, 2).len(), 6);
        assert_eq!(multi_indices(1, 4), vec![[4, 0, 0]]);
        assert_eq!(multinomial(&[1, 1, 0]), 2.0);
    }

    #[test]
    fn hessian_norm_dominates_laplacian() {
        let g = TorusGrid::new(2, 16).unwrap();
        let f = Field::plane_wave(g, 1, 0, &[2, 3], c(1.0));
        let h = derivative_tensor_norm(&f, 2, 2.0);
        assert!((h - 13.0).abs() < 1e-10);
    }

    #[test]
    fn binary_layout_round_trip() {
        let g = TorusGrid::new(2, 4).unwrap();
        let f = random_field(g, 2, 3);
        let bytes = f.to_le_bytes();
        assert_eq!(bytes.len(), 16 * 2 * 16);
        assert_eq!(&bytes[..8], &f.values()[0].re.to_le_bytes());
        assert_eq!(&bytes[24..32], &f.values()[1].im.to_le_bytes());
        assert_eq!(Field::from_le_bytes(g, 2, &bytes).unwrap(), f);
        assert!(Field::from_le_bytes(g, 2, &bytes[1..]).is_err());
    }
}

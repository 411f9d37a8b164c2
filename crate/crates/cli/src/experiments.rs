//! One driver per experiment kind. Each returns a [`Table`] plus the list of
//! invariant failures; nothing here touches the file system.

use std::f64::consts::TAU;
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;

use smrlab_core::coefficients::{
    divergence_free_defect, ellipticity_margin_2m, sample_operator_path, sample_sigma_path,
    stochastic_parabolicity_margin, Form, GradientNoiseSpec, OperatorPath, OperatorSpec, SpaceProfile, TimeProfile,
};
use smrlab_core::evolution::{continuity_sweep, solve_linear, Forcing, LinearProblem, SpaceTimePath, SweepNorms};
use smrlab_core::grid::MAX_DIM;
use smrlab_core::normlab::{mc_lp_omega, mc_mean, smr_norm, smr_surrogate, NormEstimate, WeightSpec};
use smrlab_core::semilinear::{
    continuous_dependence, estimate_mr_constants, picard_solve, MrNorms, Nonlinearity, PicardOptions, SemilinearProblem,
};
use smrlab_core::tent::{
    aperture_ratio, log_log_slope, subdivided, tent_maxreg_experiment, tent_norm, tent_stochastic_experiment,
    weighted_l2_square, TentField, TentNormParams,
};
use smrlab_core::transform::{build_tilde_a, equivalence_error};
use smrlab_core::{generate_noise, Error, Field, NoisePath, TimeGrid, TorusGrid};

use crate::config::{ConfigError, ExperimentConfig, Kind, ProblemConfig};

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(ConfigError),
    #[error("numerical blow-up in stage `{stage}`: {message}")]
    BlowUp { stage: String, message: String },
    #[error("stage `{stage}` failed: {message}")]
    Numeric { stage: String, message: String },
}

trait AtStage<T> {
    fn at(self, stage: &str) -> Result<T, RunError>;
}

impl<T> AtStage<T> for smrlab_core::Result<T> {
    fn at(self, stage: &str) -> Result<T, RunError> {
        self.map_err(|e| match e {
            Error::BlowUp { stage: inner, .. } => RunError::BlowUp {
                stage: format!("{stage}/{inner}"),
                message: e.to_string(),
            },
            other => RunError::Numeric {
                stage: stage.to_string(),
                message: other.to_string(),
            },
        })
    }
}

fn config_error(field: &str, message: impl Into<String>) -> RunError {
    RunError::Config(ConfigError {
        line: None,
        field: field.to_string(),
        message: message.into(),
    })
}

/// A result table; cells are already formatted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// Everything a run produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub table: Table,
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
    pub stages: Vec<(String, f64)>,
}

/// Round-trip formatting of a float; NaN is an empty cell.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:e}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

struct Stopwatch {
    stages: Vec<(String, f64)>,
    start: Instant,
}

impl Stopwatch {
    fn new() -> Self {
        Self {
            stages: Vec::new(),
            start: Instant::now(),
        }
    }

    fn lap(&mut self, name: &str) {
        let now = Instant::now();
        self.stages.push((name.to_string(), (now - self.start).as_secs_f64()));
        self.start = now;
    }
}

fn pad(k: &[i64]) -> [i64; MAX_DIM] {
    let mut out = [0; MAX_DIM];
    for (o, v) in out.iter_mut().zip(k) {
        *o = *v;
    }
    out
}

/// Builds grids, coefficient specs and problems from a configuration.
pub struct Setup<'a> {
    pub cfg: &'a ExperimentConfig,
    pub grid: TorusGrid,
}

impl<'a> Setup<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Result<Self, RunError> {
        let grid = TorusGrid::with_period(cfg.problem.dim, cfg.numerics.n, cfg.problem.period)
            .map_err(|e| config_error("numerics.n", e.to_string()))?;
        Ok(Self { cfg, grid })
    }

    fn problem(&self) -> &ProblemConfig {
        &self.cfg.problem
    }

    pub fn times(&self) -> TimeGrid {
        TimeGrid::uniform(self.cfg.numerics.horizon, self.cfg.numerics.steps).expect("validated horizon and steps")
    }

    pub fn seed(&self, s: usize) -> u64 {
        self.cfg.numerics.base_seed.wrapping_add(s as u64)
    }

    pub fn noise(&self, times: &TimeGrid, s: usize) -> Result<NoisePath, RunError> {
        generate_noise(self.problem().directions, times, self.seed(s)).at("noise")
    }

    pub fn operator_spec(&self) -> Result<OperatorSpec, RunError> {
        let p = self.problem();
        let identity = OperatorSpec::polyharmonic(p.dim, p.m, p.components).map_err(|e| config_error("problem.m", e.to_string()))?;
        let mut spec = if p.a.is_empty() {
            identity.clone()
        } else {
            OperatorSpec::second_order(p.dim, p.components, &p.a).map_err(|e| config_error("problem.a", e.to_string()))?
        };
        let base_bound = if p.a.is_empty() {
            identity.bound
        } else {
            p.a.iter().fold(0.0f64, |b, v| b.max(v.abs()))
        };
        spec = spec
            .with_potential(p.potential)
            .with_form(if p.form == "divergence" { Form::Divergence } else { Form::NonDivergence })
            .with_perturbation(identity.base.clone(), p.amplitude)
            .with_time(match p.time.as_str() {
                "sinusoid" => TimeProfile::Sinusoid {
                    frequency: p.frequency,
                    phase: 0.0,
                },
                "piecewise" => TimeProfile::PiecewiseRandom { switches: p.switches },
                _ => TimeProfile::Constant,
            })
            .with_space(match p.space.as_str() {
                "trigonometric" => SpaceProfile::Trigonometric {
                    modes: p.space_modes.iter().map(|k| pad(k)).collect(),
                },
                "stream" => SpaceProfile::StreamFunction {
                    modes: p.space_modes.iter().map(|k| pad(k)).collect(),
                },
                _ => SpaceProfile::Uniform,
            })
            .with_bound(p.bound.unwrap_or((base_bound + p.amplitude.abs()).max(f64::MIN_POSITIVE)));
        spec.validate().map_err(|e| config_error("problem", e.to_string()))?;
        Ok(spec)
    }

    pub fn sigma_spec(&self) -> Result<GradientNoiseSpec, RunError> {
        let p = self.problem();
        if p.sigma.is_empty() {
            return Ok(GradientNoiseSpec::zero(p.dim, p.components, p.directions));
        }
        GradientNoiseSpec::componentwise(p.dim, p.components, p.directions, &p.sigma)
            .map_err(|e| config_error("problem.sigma", e.to_string()))
    }

    pub fn operator_on(&self, noise: &NoisePath, seed: u64) -> Result<OperatorPath, RunError> {
        sample_operator_path(&self.operator_spec()?, &self.grid, noise, seed).map_err(|e| config_error("problem", e.to_string()))
    }

    pub fn initial(&self) -> Field {
        let p = self.problem();
        Field::plane_wave(self.grid, p.components, 0, &p.mode(), Complex64::new(p.initial_amplitude, 0.0))
    }

    fn additive_mode(&self) -> Vec<i64> {
        let p = self.problem();
        p.additive_mode.clone().unwrap_or_else(|| p.mode())
    }

    /// Linear problem sampled on `noise` with coefficient seed `seed`.
    pub fn problem_on(&self, noise: &NoisePath, seed: u64) -> Result<LinearProblem, RunError> {
        let p = self.problem();
        let operator = self.operator_on(noise, seed)?;
        let sigma = sample_sigma_path(&self.sigma_spec()?, &self.grid, noise, seed).map_err(|e| config_error("problem.sigma", e.to_string()))?;
        let mut lp = LinearProblem::new(operator, self.initial()).with_sigma(sigma);
        if p.additive_amplitude != 0.0 {
            let g = Field::plane_wave(self.grid, p.components, 0, &self.additive_mode(), Complex64::new(p.additive_amplitude, 0.0));
            lp = lp.with_noise_forcing(vec![Forcing::Constant(g)]);
        }
        lp.alpha = self.cfg.norms.alpha;
        Ok(lp)
    }

    fn weight(&self, horizon: f64) -> Result<WeightSpec, RunError> {
        WeightSpec::new(self.cfg.norms.p, self.cfg.norms.alpha, horizon).map_err(|e| config_error("norms", e.to_string()))
    }

    fn sigma_is_zero(&self) -> bool {
        self.problem().sigma.iter().all(|&s| s == 0.0)
    }
}

/// Runs one experiment kind.
pub fn run_kind(kind: Kind, cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let setup = Setup::new(cfg)?;
    match kind {
        Kind::Simulate => simulate(&setup),
        Kind::VerifyTransform => verify_transform(&setup),
        Kind::Parabolicity => parabolicity(&setup),
        Kind::SmrNorms => smr_norms(&setup),
        Kind::Picard => picard(&setup),
        Kind::Tent => tent(&setup),
        Kind::Sweep => sweep(&setup),
    }
}

/// Decay rate `lambda` and noise symbols `beta_n` of a constant scalar problem at mode `k`.
fn mode_rates(lp: &LinearProblem, k: &[i64]) -> Option<(f64, Vec<f64>)> {
    let op = &lp.operator;
    if op.components() != 1 || !op.is_x_independent() || !op.is_time_constant() || !lp.sigma.is_x_independent() {
        return None;
    }
    let grid = lp.grid();
    let slot = grid.slot_of_frequency(k)?;
    let kappa = grid.wavevector(slot);
    let lambda = op.symbol_of(&op.coefficients_at(0, 0), &kappa)[0].re + op.potential();
    let beta = lp.sigma.beta(0, &grid.odd_wavevector(slot));
    let constant = (1..=lp.times().steps()).all(|s| lp.sigma.beta(s, &grid.odd_wavevector(slot)) == beta);
    constant.then_some((lambda, beta))
}

fn simulate(s: &Setup) -> Result<Outcome, RunError> {
    let mut clock = Stopwatch::new();
    let cfg = s.cfg;
    let times = s.times();
    let every = if cfg.numerics.output_every == 0 {
        (cfg.numerics.steps / 16).max(1)
    } else {
        cfg.numerics.output_every
    };
    let samples: Vec<usize> = (0..=times.steps()).step_by(every).collect();
    let mode = cfg.problem.mode();
    let slot = s
        .grid
        .slot_of_frequency(&mode)
        .ok_or_else(|| config_error("problem.initial_mode", "mode is not resolved by the grid"))?;
    let runs: Vec<Vec<(Complex64, f64)>> = (0..cfg.numerics.seeds)
        .into_par_iter()
        .map(|k| -> Result<_, RunError> {
            let noise = s.noise(&times, k)?;
            let lp = s.problem_on(&noise, s.seed(k))?;
            let u = solve_linear(&lp, &noise).at("simulate")?;
            Ok(samples
                .iter()
                .map(|&i| (u.slice(i).to_spectral().get(slot, 0), u.slice(i).l2_norm()))
                .collect())
        })
        .collect::<Result<_, _>>()?;
    clock.lap("solve");

    let noise0 = s.noise(&times, 0)?;
    let lp0 = s.problem_on(&noise0, s.seed(0))?;
    let rates = mode_rates(&lp0, &mode);
    let u0 = lp0.initial.to_spectral().get(slot, 0);
    let g = if cfg.problem.additive_amplitude != 0.0 && s.additive_mode() == mode {
        cfg.problem.additive_amplitude
    } else {
        0.0
    };
    let deterministic = s.sigma_is_zero() && cfg.problem.additive_amplitude == 0.0;
    let mut table = Table::new(&[
        "t",
        "amplitude",
        "reference_amplitude",
        "second_moment",
        "second_moment_lo",
        "second_moment_hi",
        "reference_second_moment",
        "l2_norm",
    ]);
    for (j, &i) in samples.iter().enumerate() {
        let t = times.times()[i];
        let moments: Vec<f64> = runs.iter().map(|r| r[j].0.norm_sqr()).collect();
        let est = if moments.len() >= 2 {
            mc_mean(&moments).at("simulate/moments")?
        } else {
            NormEstimate::single(moments[0])
        };
        let (ref_amp, ref_mom) = match &rates {
            Some((lambda, beta)) => {
                let amp = deterministic.then(|| u0.norm() * (-lambda * t).exp());
                let b2: f64 = beta.iter().map(|b| b * b).sum();
                let c = 2.0 * lambda - b2;
                let cross_free = b2 == 0.0 || g == 0.0 || u0.norm() == 0.0;
                let mom = cross_free.then(|| {
                    let decay = (-c * t).exp();
                    let forced = if c.abs() < 1e-14 { g * g * t } else { g * g * (1.0 - decay) / c };
                    u0.norm_sqr() * decay + forced
                });
                (amp, mom)
            }
            None => (None, None),
        };
        table.push(vec![
            num(t),
            num(runs[0][j].0.norm()),
            opt(ref_amp),
            num(est.value),
            num(est.lower),
            num(est.upper),
            opt(ref_mom),
            num(runs[0][j].1),
        ]);
    }
    clock.lap("tabulate");
    Ok(Outcome {
        table,
        stages: clock.stages,
        ..Outcome::default()
    })
}

/// Least-squares slope of `-log2(error)` against the refinement level.
pub fn fitted_order(errors: &[f64]) -> f64 {
    let xs: Vec<f64> = (0..errors.len()).map(|l| 2f64.powi(l as i32)).collect();
    -log_log_slope(&xs, errors)
}

fn verify_transform(s: &Setup) -> Result<Outcome, RunError> {
    let mut clock = Stopwatch::new();
    let cfg = s.cfg;
    let levels = cfg.numerics.refinements;
    let times = s.times();
    let per_seed: Vec<Vec<f64>> = (0..cfg.numerics.seeds)
        .into_par_iter()
        .map(|k| -> Result<_, RunError> {
            let noise = s.noise(&times, k)?;
            let seed = s.seed(k);
            equivalence_error(
                |n| {
                    s.problem_on(n, seed).map_err(|e| Error::InvalidParameter {
                        name: "problem",
                        reason: e.to_string(),
                    })
                },
                &noise,
                levels,
            )
            .at("verify-transform")
        })
        .collect::<Result<_, _>>()?;
    clock.lap("solve");
    let rms: Vec<f64> = (0..levels)
        .map(|l| (per_seed.iter().map(|e| e[l] * e[l]).sum::<f64>() / per_seed.len() as f64).sqrt())
        .collect();
    let mut table = Table::new(&["level", "steps", "error_rms", "order"]);
    for (l, e) in rms.iter().enumerate() {
        let order = (l > 0).then(|| (rms[l - 1] / e).log2());
        table.push(vec![l.to_string(), (cfg.numerics.steps << l).to_string(), num(*e), opt(order)]);
    }
    let mut failures = Vec::new();
    if s.sigma_is_zero() {
        if let Some(e) = rms.iter().find(|e| **e >= 1e-10) {
            failures.push(format!("sigma = 0 but equivalence error {e:e} >= 1e-10"));
        }
    } else if levels >= 2 {
        if rms.windows(2).any(|w| w[1] >= w[0]) {
            failures.push("equivalence error does not decrease under refinement".into());
        }
        let order = fitted_order(&rms);
        table.push(vec!["fit".into(), String::new(), String::new(), num(order)]);
        if !(0.4..=0.6).contains(&order) {
            failures.push(format!("fitted order {order:.4} outside [0.4, 0.6]"));
        }
    }
    clock.lap("check");
    Ok(Outcome {
        table,
        failures,
        stages: clock.stages,
        ..Outcome::default()
    })
}

fn parabolicity(s: &Setup) -> Result<Outcome, RunError> {
    let mut clock = Stopwatch::new();
    let cfg = s.cfg;
    let samples = cfg.numerics.margin_samples;
    let times = s.times();
    let rows: Vec<(f64, Option<f64>, Option<f64>)> = (0..cfg.numerics.seeds)
        .into_par_iter()
        .map(|k| -> Result<_, RunError> {
            let noise = s.noise(&times, k)?;
            let lp = s.problem_on(&noise, s.seed(k))?;
            let ell = ellipticity_margin_2m(&lp.operator, samples);
            if lp.operator.m() != 1 {
                return Ok((ell, None, None));
            }
            let st = stochastic_parabolicity_margin(&lp.operator, &lp.sigma, samples).at("parabolicity")?;
            let tilde = if lp.sigma.is_x_independent() {
                Some(ellipticity_margin_2m(&build_tilde_a(&lp.operator, &lp.sigma).at("parabolicity/tilde")?, samples))
            } else {
                None
            };
            Ok((ell, Some(st), tilde))
        })
        .collect::<Result<_, _>>()?;
    clock.lap("margins");
    let mut table = Table::new(&["seed", "ellipticity_margin", "margin", "tilde_margin", "parabolic"]);
    let mut failures = Vec::new();
    for (k, (ell, st, tilde)) in rows.iter().enumerate() {
        let margin = st.unwrap_or(*ell);
        table.push(vec![
            s.seed(k).to_string(),
            num(*ell),
            num(margin),
            opt(*tilde),
            (margin > 0.0).to_string(),
        ]);
        if let (Some(a), Some(b)) = (st, tilde) {
            if (a - b).abs() > 1e-6 {
                failures.push(format!("seed {}: stochastic margin {a:e} != transformed-operator margin {b:e}", s.seed(k)));
            }
        }
    }
    Ok(Outcome {
        table,
        failures,
        stages: clock.stages,
        ..Outcome::default()
    })
}

/// Paths of the configured problem on `levels` coupled dyadic refinements, one list per seed.
fn refined_solutions(s: &Setup, levels: usize) -> Result<Vec<Vec<SpaceTimePath>>, RunError> {
    let times = s.times();
    (0..s.cfg.numerics.seeds)
        .into_par_iter()
        .map(|k| -> Result<_, RunError> {
            let mut noise = s.noise(&times, k)?;
            let mut out = Vec::with_capacity(levels);
            for level in 0..levels {
                if level > 0 {
                    noise = noise.refine();
                }
                let lp = s.problem_on(&noise, s.seed(k))?;
                out.push(solve_linear(&lp, &noise).at("smr-norms/solve")?);
            }
            Ok(out)
        })
        .collect()
}

fn smr_norms(s: &Setup) -> Result<Outcome, RunError> {
    let mut clock = Stopwatch::new();
    let cfg = s.cfg;
    let levels = cfg.numerics.refinements;
    let m = cfg.problem.m;
    let w = s.weight(cfg.numerics.horizon)?;
    let paths = refined_solutions(s, levels)?;
    clock.lap("solve");
    let mut quantities: Vec<(&'static str, f64)> = cfg.norms.theta.iter().map(|&t| ("theta", t)).collect();
    quantities.push(("surrogate_beta", cfg.norms.surrogate_beta));
    let mut table = Table::new(&["level", "steps", "quantity", "parameter", "value", "lo", "hi", "growth"]);
    let mut failures = Vec::new();
    for &(name, param) in &quantities {
        let mut values = Vec::with_capacity(levels);
        for level in 0..levels {
            let samples: Vec<f64> = paths
                .par_iter()
                .map(|p| {
                    let path = &p[level];
                    if name == "theta" {
                        smr_norm(path, param, m, cfg.norms.q, &w, cfg.norms.beta_gap)
                    } else {
                        smr_surrogate(path, param, 2.0 * m as f64 * (1.0 - param), cfg.norms.q, &w)
                    }
                })
                .collect::<smrlab_core::Result<_>>()
                .at("smr-norms/norm")?;
            let est = if samples.len() >= 2 {
                mc_lp_omega(&samples, cfg.norms.p).at("smr-norms/mc")?
            } else {
                NormEstimate::single(samples[0])
            };
            let growth = values.last().map(|prev: &f64| est.value / prev);
            table.push(vec![
                level.to_string(),
                (cfg.numerics.steps << level).to_string(),
                name.into(),
                num(param),
                num(est.value),
                num(est.lower),
                num(est.upper),
                opt(growth),
            ]);
            values.push(est.value);
        }
        if name == "theta" {
            let dev = values.iter().map(|v| (v / values[0] - 1.0).abs()).fold(0.0, f64::max);
            if dev > 0.15 {
                failures.push(format!("theta = {param}: norm moves {:.1}% across refinements", 100.0 * dev));
            }
        }
    }
    clock.lap("norms");
    Ok(Outcome {
        table,
        failures,
        stages: clock.stages,
        ..Outcome::default()
    })
}

fn nonlinearity(
    field: &str,
    name: &str,
    strength: f64,
    declared: Option<[f64; 2]>,
    p: &ProblemConfig,
) -> Result<Nonlinearity, RunError> {
    let nl = match name {
        "zero" => Nonlinearity::zero(),
        "linear" => Nonlinearity::linear(strength),
        "sine" => Nonlinearity::sine(strength),
        _ => {
            let Some([l, lt]) = declared else {
                return Err(config_error(field, "the polynomial nonlinearity needs declared Lipschitz constants"));
            };
            let coeffs = p.polynomial.iter().map(|c| c * strength).collect();
            Nonlinearity::polynomial(coeffs, p.polynomial_cutoff, l, lt)
        }
    };
    Ok(match declared {
        Some([l, lt]) => nl.with_constants(l, lt),
        None => nl,
    })
}

/// Semilinear problem of the configuration on `noise`.
pub fn semilinear_problem(s: &Setup, noise: &NoisePath) -> Result<SemilinearProblem, RunError> {
    let p = s.problem();
    let f = nonlinearity(
        "problem.nonlinearity_lipschitz",
        &p.nonlinearity,
        p.nonlinearity_strength,
        p.nonlinearity_lipschitz,
        p,
    )?;
    let g = nonlinearity(
        "problem.noise_nonlinearity_lipschitz",
        &p.noise_nonlinearity,
        p.noise_nonlinearity_strength,
        p.noise_nonlinearity_lipschitz,
        p,
    )?;
    let sp = SemilinearProblem::new(s.problem_on(noise, s.seed(0))?, f, g);
    sp.verify_lipschitz(s.cfg.norms.q, 16, s.seed(0)).map_err(|e| {
        let field = if e.to_string().contains("G =") {
            "problem.noise_nonlinearity_lipschitz"
        } else {
            "problem.nonlinearity_lipschitz"
        };
        config_error(field, e.to_string())
    })?;
    Ok(sp)
}

pub fn picard_options(cfg: &ExperimentConfig) -> PicardOptions {
    PicardOptions {
        norms: MrNorms {
            p: cfg.norms.p,
            q: cfg.norms.q,
        },
        tol: cfg.numerics.tol,
        max_iter: cfg.numerics.max_iter,
        window_steps: None,
        probes: 2,
        seed: cfg.numerics.base_seed,
    }
}

fn picard(s: &Setup) -> Result<Outcome, RunError> {
    let mut clock = Stopwatch::new();
    let cfg = s.cfg;
    let times = s.times();
    let noise = s.noise(&times, 0)?;
    let sp = semilinear_problem(s, &noise)?;
    clock.lap("setup");
    let opts = picard_options(cfg);
    let constants = estimate_mr_constants(&sp.linear, cfg.numerics.probes, s.seed(0), opts.norms).at("picard/constants")?;
    clock.lap("constants");
    let mut table = Table::new(&["record", "window", "iteration", "value"]);
    let summary = |table: &mut Table, name: &str, v: f64| table.push(vec![name.into(), String::new(), String::new(), num(v)]);
    summary(&mut table, "k_det", constants.k_det);
    summary(&mut table, "k_st", constants.k_st);
    let mut failures = Vec::new();
    match picard_solve(&sp, &noise, constants, &opts) {
        Ok((_, diag)) => {
            clock.lap("iterate");
            for (w, res) in diag.residuals.iter().enumerate() {
                for (i, r) in res.iter().enumerate() {
                    table.push(vec!["residual".into(), w.to_string(), (i + 1).to_string(), num(*r)]);
                }
            }
            summary(&mut table, "nu", diag.nu);
            summary(&mut table, "m_weight", diag.m_weight);
            summary(&mut table, "kappa", diag.kappa);
            summary(&mut table, "windows", diag.windows as f64);
            summary(&mut table, "window_ratio", diag.window_ratio);
            summary(&mut table, "fitted_ratio", diag.fitted_ratio);
            summary(&mut table, "target_ratio", diag.target_ratio());
            if diag.fitted_ratio > diag.target_ratio() + 0.05 {
                failures.push(format!(
                    "measured contraction {:.4} exceeds 1 - nu/2 + 0.05 = {:.4}",
                    diag.fitted_ratio,
                    diag.target_ratio() + 0.05
                ));
            }
            let half = &sp.linear.initial * 0.5;
            let dep = continuous_dependence(&sp, &sp.linear.initial, &half, &noise, constants, &opts).at("picard/dependence")?;
            if let Some(r) = dep {
                summary(&mut table, "continuous_dependence", r);
            }
            clock.lap("dependence");
        }
        Err(e @ (Error::PicardRefused { .. } | Error::PicardDiverged { .. })) => {
            summary(&mut table, "refused", 1.0);
            failures.push(e.to_string());
        }
        Err(e) => return Err(e).at("picard/iterate"),
    }
    Ok(Outcome {
        table,
        failures,
        stages: clock.stages,
        ..Outcome::default()
    })
}

/// Smooth test field `sum_{|k_i| <= 2} c_k (1 + sin(log t + phi_k) / 2) e^{i k x}`
/// whose coefficients do not depend on the grid size.
pub fn smooth_tent_field(grid: TorusGrid, edges: &TimeGrid, components: usize, seed: u64) -> smrlab_core::Result<TentField> {
    use rand::{Rng, SeedableRng};
    let d = grid.dim();
    let mut modes = Vec::new();
    for i in 0..5i64.pow(d as u32) {
        let k: Vec<i64> = (0..d).map(|a| (i / 5i64.pow(a as u32)) % 5 - 2).collect();
        modes.push(k);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let coeffs: Vec<Vec<(Complex64, f64)>> = (0..components)
        .map(|_| {
            modes
                .iter()
                .map(|_| {
                    let c = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    (c, rng.random_range(0.0..TAU))
                })
                .collect()
        })
        .collect();
    let scale = TAU / grid.period();
    TentField::from_fn(grid, edges.clone(), components, |t, x, c| {
        modes
            .iter()
            .zip(&coeffs[c])
            .map(|(k, (a, phi))| {
                let phase: f64 = k.iter().zip(x).map(|(ki, xi)| scale * *ki as f64 * xi).sum();
                a * (1.0 + 0.5 * (t.ln() + phi).sin()) * Complex64::from_polar(1.0, phase)
            })
            .sum()
    })
}

/// One refinement level of the tent experiments.
#[derive(Clone, Debug)]
pub struct TentLevel {
    pub edges: TimeGrid,
    pub solver: TimeGrid,
}

/// Geometric tent grids with ratio `r^{1/2^l}` and their subdivided solver grids.
pub fn tent_levels(t_min: f64, t_max: f64, ratio: f64, substeps: usize, levels: usize) -> smrlab_core::Result<Vec<TentLevel>> {
    (0..levels)
        .map(|l| {
            let r = ratio.powf(1.0 / (1u64 << l) as f64);
            let cells = ((t_max / t_min).ln() / ratio.ln() - 1e-9).ceil().max(1.0) as usize * (1 << l);
            let times = (0..=cells).map(|i| t_min * r.powi(i as i32)).collect();
            let edges = TimeGrid::from_times(times)?;
            let solver = subdivided(&edges, substeps)?;
            Ok(TentLevel { edges, solver })
        })
        .collect()
}

/// Deterministic ratio `||M f||_{T_{sigma+2}} / ||f||_{T_sigma}` per level.
pub fn tent_deterministic_study(
    operator: &OperatorPath,
    levels: &[TentLevel],
    p: f64,
    sigma: f64,
    seed: u64,
    margin_samples: usize,
) -> smrlab_core::Result<Vec<f64>> {
    levels
        .par_iter()
        .map(|lv| {
            let a = operator.resampled_on(&lv.solver);
            let f = smooth_tent_field(*operator.grid(), &lv.edges, 1, seed)?;
            Ok(tent_maxreg_experiment(&a, &f, p, sigma, margin_samples)?.ratio)
        })
        .collect()
}

/// Stochastic ratio per level on coupled noises (one per seed).
pub fn tent_stochastic_study(
    operator: &OperatorPath,
    levels: &[TentLevel],
    directions: usize,
    p: f64,
    sigma: f64,
    seeds: &[u64],
    margin_samples: usize,
) -> smrlab_core::Result<Vec<NormEstimate>> {
    let mut noises: Vec<NoisePath> = seeds
        .iter()
        .map(|&sd| generate_noise(directions, &levels[0].solver, sd))
        .collect::<smrlab_core::Result<_>>()?;
    let mut out = Vec::with_capacity(levels.len());
    for (l, lv) in levels.iter().enumerate() {
        if l > 0 {
            noises = noises.iter().map(|n| n.refine_with(&lv.solver)).collect::<smrlab_core::Result<_>>()?;
        }
        let a = operator.resampled_on(&lv.solver);
        let g = smooth_tent_field(*operator.grid(), &lv.edges, directions, seeds[0] ^ 0x6A09)?;
        let r = tent_stochastic_experiment(&a, &g, p, sigma, &noises, margin_samples)?;
        out.push(NormEstimate {
            value: r.ratio,
            lower: r.solution.lower.powf(p) / r.data,
            upper: r.solution.upper.powf(p) / r.data,
            ..r.solution
        });
    }
    Ok(out)
}

fn tent(s: &Setup) -> Result<Outcome, RunError> {
    let mut clock = Stopwatch::new();
    let cfg = s.cfg;
    let tc = &cfg.tent;
    let d = cfg.problem.dim as f64;
    let levels = tent_levels(tc.t_min, tc.t_max, tc.ratio, tc.substeps, cfg.numerics.refinements).at("tent/grids")?;
    let seed = s.seed(0);
    let mut table = Table::new(&["check", "level", "p", "sigma", "aperture", "value", "reference"]);
    let mut failures = Vec::new();
    let mut warnings = Vec::new();

    let f = smooth_tent_field(s.grid, &levels[0].edges, 1, seed).at("tent/field")?;
    for &sigma in &tc.sigmas {
        let v = tent_norm(&f, TentNormParams::new(2.0, sigma, 1.0).at("tent")?).powi(2);
        let r = weighted_l2_square(&f, sigma);
        table.push(vec!["fubini".into(), "0".into(), num(2.0), num(sigma), num(1.0), num(v), num(r)]);
        if (v - r).abs() > 1e-10 * r {
            failures.push(format!("Fubini identity off by {:e} at sigma = {sigma}", (v - r).abs() / r));
        }
    }
    clock.lap("fubini");

    let sigma0 = tc.sigmas[0];
    for &p in &tc.ps {
        let ratios: Vec<f64> = tc
            .apertures
            .iter()
            .map(|&a| aperture_ratio(&f, p, sigma0, a))
            .collect::<smrlab_core::Result<_>>()
            .at("tent/aperture")?;
        for (a, r) in tc.apertures.iter().zip(&ratios) {
            table.push(vec!["aperture".into(), "0".into(), num(p), num(sigma0), num(*a), num(*r), String::new()]);
        }
        if tc.apertures.len() >= 2 {
            let slope = log_log_slope(&tc.apertures, &ratios);
            let bound = d / p.min(2.0);
            table.push(vec!["aperture_slope".into(), "0".into(), num(p), num(sigma0), String::new(), num(slope), num(bound)]);
            if slope > bound + 0.15 {
                failures.push(format!("aperture slope {slope:.4} exceeds d/min(p,2) + 0.15 = {:.4}", bound + 0.15));
            }
        }
    }
    clock.lap("aperture");

    let noise = s.noise(&levels[0].solver, 0)?;
    let operator = s.operator_on(&noise, seed)?;
    if !operator.is_x_independent() {
        if let Ok(fields) = operator.second_order_fields(0) {
            if let Ok(defect) = divergence_free_defect(&fields) {
                if defect > 1e-8 {
                    warnings.push(format!("coefficients are not divergence free (defect {defect:e})"));
                }
            }
        }
    }
    let samples = cfg.numerics.margin_samples;
    for &p in &tc.ps {
        for &sigma in &tc.sigmas {
            let det = tent_deterministic_study(&operator, &levels, p, sigma, seed, samples).at("tent/maxreg")?;
            for (l, r) in det.iter().enumerate() {
                table.push(vec!["maxreg".into(), l.to_string(), num(p), num(sigma), num(1.0), num(*r), String::new()]);
            }
        }
    }
    clock.lap("maxreg");
    if cfg.problem.components == 1 {
        let seeds: Vec<u64> = (0..cfg.numerics.seeds.max(2)).map(|k| s.seed(k)).collect();
        for &p in &tc.ps {
            let sigma = sigma0;
            let st = tent_stochastic_study(&operator, &levels, cfg.problem.directions, p, sigma, &seeds, samples)
                .at("tent/stochastic")?;
            for (l, r) in st.iter().enumerate() {
                table.push(vec!["stochastic".into(), l.to_string(), num(p), num(sigma), num(1.0), num(r.value), String::new()]);
            }
        }
        clock.lap("stochastic");
    }
    Ok(Outcome {
        table,
        failures,
        warnings,
        stages: clock.stages,
    })
}

fn sweep(s: &Setup) -> Result<Outcome, RunError> {
    let mut clock = Stopwatch::new();
    let cfg = s.cfg;
    let times = s.times();
    let noises: Vec<NoisePath> = (0..cfg.numerics.seeds).map(|k| s.noise(&times, k)).collect::<Result<_, _>>()?;
    let lp = s.problem_on(&noises[0], s.seed(0))?;
    let p = &cfg.problem;
    let tilde_spec = OperatorSpec::polyharmonic(p.dim, p.m, p.components)
        .map_err(|e| config_error("problem.m", e.to_string()))?
        .with_potential(p.potential);
    let tilde = sample_operator_path(&tilde_spec, &s.grid, &noises[0], 0).at("sweep/reference")?;
    let points = continuity_sweep(
        &lp,
        &tilde,
        &cfg.sweep.lambdas,
        &noises,
        SweepNorms {
            p: cfg.norms.p,
            q: cfg.norms.q,
            margin_samples: cfg.numerics.margin_samples,
        },
    )
    .at("sweep")?;
    clock.lap("sweep");
    let mut table = Table::new(&["lambda", "margin", "flagged", "value", "lo", "hi", "ratio"]);
    for pt in &points {
        let est = pt.estimate.as_ref();
        table.push(vec![
            num(pt.lambda),
            num(pt.margin),
            pt.flagged.to_string(),
            opt(est.map(|e| e.value)),
            opt(est.map(|e| e.lower)),
            opt(est.map(|e| e.upper)),
            opt(pt.ratio),
        ]);
    }
    // The margin is concave in lambda, so it stays above the chord between the endpoints.
    let mut failures = Vec::new();
    let at = |l: f64| points.iter().find(|pt| pt.lambda == l).map(|pt| pt.margin);
    if let (Some(m0), Some(m1)) = (at(0.0), at(1.0)) {
        for pt in &points {
            let chord = (1.0 - pt.lambda) * m0 + pt.lambda * m1;
            if pt.margin < chord - 1e-6 {
                failures.push(format!("margin {:e} at lambda = {} is below the chord {chord:e}", pt.margin, pt.lambda));
            }
        }
    }
    Ok(Outcome {
        table,
        failures,
        stages: clock.stages,
        ..Outcome::default()
    })
}

//! Experiment configuration: a TOML file with `[problem]`, `[numerics]`,
//! `[norms]`, `[tent]`, `[sweep]` and `[output]` sections. Every section is
//! optional and unknown keys are rejected.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Experiment kinds understood by the runner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Simulate,
    VerifyTransform,
    Parabolicity,
    SmrNorms,
    Picard,
    Tent,
    Sweep,
}

impl Kind {
    pub const ALL: [Kind; 7] = [
        Kind::Simulate,
        Kind::VerifyTransform,
        Kind::Parabolicity,
        Kind::SmrNorms,
        Kind::Picard,
        Kind::Tent,
        Kind::Sweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Simulate => "simulate",
            Kind::VerifyTransform => "verify-transform",
            Kind::Parabolicity => "parabolicity",
            Kind::SmrNorms => "smr-norms",
            Kind::Picard => "picard",
            Kind::Tent => "tent",
            Kind::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Kind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown experiment kind `{s}`"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Option<String>,
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default)]
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub norms: NormsConfig,
    #[serde(default)]
    pub tent: TentConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    pub dim: usize,
    /// Box side length; the box is normalized to measure 1 whatever the period.
    pub period: f64,
    pub components: usize,
    pub m: usize,
    /// Row-major `d x d` second-order coefficients; identity when empty.
    pub a: Vec<f64>,
    pub potential: f64,
    /// "nondivergence" or "divergence".
    pub form: String,
    /// Perturbation size added to `a` (identity block, or the stream-function field).
    pub amplitude: f64,
    /// "constant", "sinusoid" or "piecewise".
    pub time: String,
    pub frequency: f64,
    pub switches: usize,
    /// "uniform", "trigonometric" or "stream".
    pub space: String,
    pub space_modes: Vec<Vec<i64>>,
    /// Explicit coefficient bound; derived from `a` and `amplitude` when absent.
    pub bound: Option<f64>,
    /// Number of noise directions `J`.
    pub directions: usize,
    /// Gradient-noise coefficients `sigma[j * J + n]`, shared by all components.
    pub sigma: Vec<f64>,
    /// Defaults to `(1, 0, ..)`.
    pub initial_mode: Vec<i64>,
    pub initial_amplitude: f64,
    /// Additive noise `g = amplitude * e^{i k x}` in direction 0.
    pub additive_amplitude: f64,
    pub additive_mode: Option<Vec<i64>>,
    /// "zero", "linear", "sine" or "polynomial".
    pub nonlinearity: String,
    pub nonlinearity_strength: f64,
    pub noise_nonlinearity: String,
    pub noise_nonlinearity_strength: f64,
    /// Declared Lipschitz constants overriding the catalog values.
    pub nonlinearity_lipschitz: Option<[f64; 2]>,
    pub noise_nonlinearity_lipschitz: Option<[f64; 2]>,
    pub polynomial: Vec<f64>,
    pub polynomial_cutoff: usize,
}

impl ProblemConfig {
    pub fn mode(&self) -> Vec<i64> {
        if self.initial_mode.is_empty() {
            let mut k = vec![0; self.dim];
            k[0] = 1;
            k
        } else {
            self.initial_mode.clone()
        }
    }
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            dim: 1,
            period: std::f64::consts::TAU,
            components: 1,
            m: 1,
            a: Vec::new(),
            potential: 0.0,
            form: "nondivergence".into(),
            amplitude: 0.0,
            time: "constant".into(),
            frequency: 1.0,
            switches: 4,
            space: "uniform".into(),
            space_modes: vec![vec![1, 1, 0]],
            bound: None,
            directions: 1,
            sigma: Vec::new(),
            initial_mode: Vec::new(),
            initial_amplitude: 1.0,
            additive_amplitude: 0.0,
            additive_mode: None,
            nonlinearity: "zero".into(),
            nonlinearity_strength: 0.0,
            noise_nonlinearity: "zero".into(),
            noise_nonlinearity_strength: 0.0,
            nonlinearity_lipschitz: None,
            noise_nonlinearity_lipschitz: None,
            polynomial: vec![0.0, 1.0],
            polynomial_cutoff: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsConfig {
    /// Grid points per axis.
    pub n: usize,
    /// Time steps on the coarsest level.
    pub steps: usize,
    pub horizon: f64,
    pub refinements: usize,
    pub seeds: usize,
    pub base_seed: u64,
    /// Rows are written every `output_every` steps; 0 picks 16 rows.
    pub output_every: usize,
    pub probes: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub margin_samples: usize,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self {
            n: 16,
            steps: 256,
            horizon: 1.0,
            refinements: 3,
            seeds: 1,
            base_seed: 0,
            output_every: 0,
            probes: 4,
            tol: 1e-10,
            max_iter: 200,
            margin_samples: 1 << 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormsConfig {
    pub p: f64,
    pub q: f64,
    pub alpha: f64,
    pub theta: Vec<f64>,
    pub beta_gap: f64,
    pub surrogate_beta: f64,
}

impl Default for NormsConfig {
    fn default() -> Self {
        Self {
            p: 2.0,
            q: 2.0,
            alpha: 0.0,
            theta: vec![0.0, 0.2, 0.4],
            beta_gap: 0.05,
            surrogate_beta: 0.55,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TentConfig {
    pub t_min: f64,
    pub t_max: f64,
    pub ratio: f64,
    pub substeps: usize,
    pub ps: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub apertures: Vec<f64>,
}

impl Default for TentConfig {
    fn default() -> Self {
        Self {
            t_min: 0.01,
            t_max: 1.0,
            ratio: smrlab_core::tent::DEFAULT_RATIO,
            substeps: 8,
            ps: vec![2.0],
            sigmas: vec![0.0, 1.0],
            apertures: vec![1.0, 2.0, 4.0, 8.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Defaults to `<kind>.csv`.
    pub csv: Option<String>,
    pub manifest: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            csv: None,
            manifest: "manifest.json".into(),
        }
    }
}

/// Invalid configuration, with the offending line when it can be found.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}, field `{}`: {}", self.field, self.message),
            None => write!(f, "field `{}`: {}", self.field, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside `[section]`, if present.
pub fn locate(text: &str, field: &str) -> Option<usize> {
    let (section, key) = match field.split_once('.') {
        Some((s, k)) => (Some(s), k),
        None => (None, field),
    };
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(name.trim().to_string());
            continue;
        }
        let in_section = match section {
            Some(s) => current.as_deref() == Some(s),
            None => current.is_none(),
        };
        if in_section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

impl ExperimentConfig {
    /// Parses and validates; the kind on the command line wins over none in the file.
    pub fn parse(text: &str, kind: Kind) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start));
            let message = e.message().to_string();
            let field = message
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<syntax>".into());
            ConfigError { line, field, message }
        })?;
        cfg.validate(kind).map_err(|(field, message)| ConfigError {
            line: locate(text, &field),
            field,
            message,
        })?;
        Ok(cfg)
    }

    fn validate(&self, kind: Kind) -> Result<(), (String, String)> {
        fn fail<T>(field: &str, message: impl Into<String>) -> Result<T, (String, String)> {
            Err((field.to_string(), message.into()))
        }
        if let Some(k) = &self.kind {
            if k != kind.name() {
                return fail("kind", format!("file is for `{k}` but `{kind}` was requested"));
            }
        }
        let p = &self.problem;
        if !(1..=3).contains(&p.dim) {
            return fail("problem.dim", "must be 1, 2 or 3");
        }
        if !(p.period > 0.0 && p.period.is_finite()) {
            return fail("problem.period", "must be positive");
        }
        if p.components == 0 {
            return fail("problem.components", "must be positive");
        }
        if p.m == 0 || p.m > 3 {
            return fail("problem.m", "must be 1, 2 or 3");
        }
        if !p.a.is_empty() && p.a.len() != p.dim * p.dim {
            return fail("problem.a", format!("needs {} entries", p.dim * p.dim));
        }
        if !p.a.is_empty() && p.m != 1 {
            return fail("problem.a", "explicit coefficients are only supported for m = 1");
        }
        if !matches!(p.form.as_str(), "nondivergence" | "divergence") {
            return fail("problem.form", "expected `nondivergence` or `divergence`");
        }
        if !matches!(p.time.as_str(), "constant" | "sinusoid" | "piecewise") {
            return fail("problem.time", "expected `constant`, `sinusoid` or `piecewise`");
        }
        if !matches!(p.space.as_str(), "uniform" | "trigonometric" | "stream") {
            return fail("problem.space", "expected `uniform`, `trigonometric` or `stream`");
        }
        if p.space == "stream" && (p.dim < 2 || p.m != 1) {
            return fail("problem.space", "stream-function coefficients need m = 1 and dim >= 2");
        }
        if p.space_modes.iter().any(|k| k.is_empty() || k.len() > 3) {
            return fail("problem.space_modes", "each mode needs 1 to 3 integers");
        }
        if p.directions == 0 {
            return fail("problem.directions", "must be positive");
        }
        if !p.sigma.is_empty() && p.sigma.len() != p.dim * p.directions {
            return fail("problem.sigma", format!("needs dim * directions = {} entries", p.dim * p.directions));
        }
        if !p.sigma.is_empty() && p.m != 1 {
            return fail("problem.sigma", "gradient noise needs m = 1");
        }
        if !p.initial_mode.is_empty() && p.initial_mode.len() != p.dim {
            return fail("problem.initial_mode", format!("needs {} integers", p.dim));
        }
        if let Some(k) = &p.additive_mode {
            if k.len() != p.dim {
                return fail("problem.additive_mode", format!("needs {} integers", p.dim));
            }
        }
        for (field, name) in [
            ("problem.nonlinearity", &p.nonlinearity),
            ("problem.noise_nonlinearity", &p.noise_nonlinearity),
        ] {
            if !matches!(name.as_str(), "zero" | "linear" | "sine" | "polynomial") {
                return fail(field, "expected `zero`, `linear`, `sine` or `polynomial`");
            }
        }
        if p.bound.is_some_and(|b| !(b > 0.0)) {
            return fail("problem.bound", "must be positive");
        }
        for (field, v) in [
            ("problem.potential", p.potential),
            ("problem.amplitude", p.amplitude),
            ("problem.frequency", p.frequency),
            ("problem.initial_amplitude", p.initial_amplitude),
            ("problem.additive_amplitude", p.additive_amplitude),
            ("problem.nonlinearity_strength", p.nonlinearity_strength),
            ("problem.noise_nonlinearity_strength", p.noise_nonlinearity_strength),
        ] {
            if !v.is_finite() {
                return fail(field, "must be finite");
            }
        }

        let n = &self.numerics;
        if n.n < 2 || !n.n.is_power_of_two() {
            return fail("numerics.n", "must be a power of two >= 2");
        }
        if n.n.pow(p.dim as u32) > 1 << 16 {
            return fail("numerics.n", "grid has more than 65536 points");
        }
        if n.steps == 0 {
            return fail("numerics.steps", "must be positive");
        }
        if !(n.horizon > 0.0 && n.horizon.is_finite()) {
            return fail("numerics.horizon", "must be positive");
        }
        if n.refinements == 0 || n.refinements > 8 {
            return fail("numerics.refinements", "must be between 1 and 8");
        }
        if n.seeds == 0 {
            return fail("numerics.seeds", "must be positive");
        }
        if n.probes == 0 {
            return fail("numerics.probes", "must be positive");
        }
        if !(n.tol > 0.0) {
            return fail("numerics.tol", "must be positive");
        }
        if n.max_iter == 0 {
            return fail("numerics.max_iter", "must be positive");
        }
        if n.margin_samples == 0 {
            return fail("numerics.margin_samples", "must be positive");
        }

        let nm = &self.norms;
        if !(nm.p >= 1.0 && nm.p.is_finite()) {
            return fail("norms.p", "must be >= 1");
        }
        if !(nm.q >= 1.0 && nm.q.is_finite()) {
            return fail("norms.q", "must be >= 1");
        }
        if !(nm.alpha >= 0.0 && nm.alpha.is_finite()) {
            return fail("norms.alpha", "must be >= 0");
        }
        if nm.theta.iter().any(|t| !(0.0..0.5).contains(t)) {
            return fail("norms.theta", "every theta must lie in [0, 1/2)");
        }
        if !(nm.beta_gap > 0.0 && nm.beta_gap < 0.5) {
            return fail("norms.beta_gap", "must lie in (0, 1/2)");
        }
        if !(nm.surrogate_beta > 0.0 && nm.surrogate_beta < 1.0) {
            return fail("norms.surrogate_beta", "must lie in (0, 1)");
        }

        let t = &self.tent;
        if !(t.t_min > 0.0 && t.t_max > t.t_min) {
            return fail("tent.t_max", "need 0 < t_min < t_max");
        }
        let cap = (p.period / 2.0).powi(2);
        if t.t_max > cap {
            return fail("tent.t_max", format!("must not exceed (period/2)^2 = {cap:.6}"));
        }
        if !(t.ratio > 1.0) {
            return fail("tent.ratio", "must exceed 1");
        }
        if t.substeps == 0 || t.substeps % 2 != 0 {
            return fail("tent.substeps", "must be a positive even number");
        }
        if t.ps.is_empty() || t.ps.iter().any(|p| !(*p >= 1.0)) {
            return fail("tent.ps", "need at least one p >= 1");
        }
        if t.sigmas.is_empty() || t.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return fail("tent.sigmas", "need at least one sigma >= 0");
        }
        if t.apertures.is_empty() || t.apertures.iter().any(|a| !(*a >= 1.0)) {
            return fail("tent.apertures", "need at least one aperture >= 1");
        }
        if self.sweep.lambdas.is_empty() || self.sweep.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return fail("sweep.lambdas", "need values in [0, 1]");
        }
        if self.output.manifest.is_empty() {
            return fail("output.manifest", "must not be empty");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        for kind in Kind::ALL {
            ExperimentConfig::parse("", kind).unwrap();
            assert_eq!(kind.name().parse::<Kind>().unwrap(), kind);
        }
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = ExperimentConfig::parse("[numerics]\nn = 8\nstesp = 3\n", Kind::Simulate).unwrap_err();
        assert_eq!(err.line, Some(3));
        assert_eq!(err.field, "stesp");
    }

    #[test]
    fn invalid_value_reports_field_and_line() {
        let err = ExperimentConfig::parse("[problem]\ndim = 1\n\n[numerics]\nn = 12\n", Kind::Simulate).unwrap_err();
        assert_eq!(err.field, "numerics.n");
        assert_eq!(err.line, Some(5));
        let err = ExperimentConfig::parse("kind = \"tent\"\n", Kind::Picard).unwrap_err();
        assert_eq!(err.field, "kind");
        let err = ExperimentConfig::parse("[problem]\ndim = \"two\"\n", Kind::Picard).unwrap_err();
        assert_eq!(err.line, Some(2));
    }
}

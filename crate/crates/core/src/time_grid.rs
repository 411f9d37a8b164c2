//! Strictly increasing time grids `t_0 < t_1 < ... < t_M`.

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// `M` equal steps on `[0, horizon]`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        Self::uniform_on(0.0, horizon, steps)
    }

    pub fn uniform_on(start: f64, end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("steps", "need at least one time step"));
        }
        if !(start.is_finite() && end.is_finite() && end > start && start >= 0.0) {
            return Err(invalid("horizon", format!("need 0 <= start < end, got [{start}, {end}]")));
        }
        let dt = (end - start) / steps as f64;
        let mut times: Vec<f64> = (0..=steps).map(|i| start + i as f64 * dt).collect();
        times[steps] = end;
        Ok(Self { times })
    }

    /// Log-spaced grid `t_l = t_min * ratio^l` with the last node at or beyond `t_max`.
    pub fn geometric(t_min: f64, t_max: f64, ratio: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_max > t_min && ratio > 1.0) {
            return Err(invalid(
                "geometric grid",
                format!("need 0 < t_min < t_max and ratio > 1 (got {t_min}, {t_max}, {ratio})"),
            ));
        }
        let cells = ((t_max / t_min).ln() / ratio.ln() - 1e-9).ceil().max(1.0) as usize;
        let times = (0..=cells).map(|l| t_min * ratio.powi(l as i32)).collect();
        Self::from_times(times)
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(invalid("times", "need at least two nodes"));
        }
        if times[0] < 0.0 || !times.iter().all(|t| t.is_finite()) {
            return Err(invalid("times", "nodes must be finite and non-negative"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("times", "nodes must be strictly increasing"));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of steps `M`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.steps()]
    }

    pub fn dt(&self, step: usize) -> f64 {
        self.times[step + 1] - self.times[step]
    }

    pub fn midpoint(&self, step: usize) -> f64 {
        0.5 * (self.times[step] + self.times[step + 1])
    }

    pub fn is_uniform(&self) -> bool {
        let h = self.dt(0);
        (0..self.steps()).all(|i| (self.dt(i) - h).abs() <= 1e-9 * h.max(1.0))
    }

    /// Splits every cell at its arithmetic midpoint.
    pub fn refined(&self) -> Self {
        self.refined_with(|a, b| 0.5 * (a + b))
    }

    /// Splits every cell `[a, b]` at `split(a, b)`, which must lie strictly inside.
    pub fn refined_with(&self, split: impl Fn(f64, f64) -> f64) -> Self {
        let mut times = Vec::with_capacity(2 * self.times.len() - 1);
        for w in self.times.windows(2) {
            times.push(w[0]);
            let mid = split(w[0], w[1]);
            assert!(mid > w[0] && mid < w[1], "split point outside the cell");
            times.push(mid);
        }
        times.push(self.end());
        Self { times }
    }

    /// Sub-grid on nodes `start..=end`.
    pub fn window(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.steps() {
            return Err(invalid("window", format!("bad step range {start}..{end}")));
        }
        Ok(Self {
            times: self.times[start..=end].to_vec(),
        })
    }

    pub fn descriptor(&self) -> String {
        if self.is_uniform() {
            format!("M={} T=[{},{}]", self.steps(), self.start(), self.end())
        } else {
            format!("M={} nonuniform T=[{},{}]", self.steps(), self.start(), self.end())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        assert_eq!(g.times(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(g.is_uniform());
        assert!(TimeGrid::uniform(1.0, 0).is_err());
        assert!(TimeGrid::uniform(-1.0, 3).is_err());
    }

    #[test]
    fn geometric_grid_hits_octave() {
        let g = TimeGrid::geometric(1.0, 2.0, 2f64.powf(0.25)).unwrap();
        assert_eq!(g.steps(), 4);
        assert!((g.end() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn refinement_and_window() {
        let g = TimeGrid::uniform(1.0, 2).unwrap().refined();
        assert_eq!(g.steps(), 4);
        assert!(g.is_uniform());
        let w = g.window(1, 3).unwrap();
        assert_eq!(w.times(), &[0.25, 0.5, 0.75]);
        assert!(g.window(3, 3).is_err());
        assert!(TimeGrid::from_times(vec![0.0, 1.0, 1.0]).is_err());
    }
}

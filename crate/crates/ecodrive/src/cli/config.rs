//! TOML run configuration.
//!
//! Every physical quantity is in SI units: metres, seconds, m/s and m/s².
//! The 45 mph speed limit of the reference setup is 20.12 m/s.
//!
//! ```toml
//! seed = 7                      # Monte Carlo seed
//!
//! [params]                      # road and vehicle; every field optional
//! d_star = -100.0               # target position (m)
//! d_bar = 100.0                 # start of the road (m)
//! d_ell = 0.0                   # stop line (m)
//! v_bar = 20.12                 # speed limit (m/s)
//! alpha = 3.8                   # maximal braking (m/s²)
//! beta = 3.8                    # maximal acceleration (m/s²)
//!
//! [schedule]
//! t_yellow = 0.0                # yellow onset for deterministic traces (s)
//! d_yellow = 3.0                # yellow duration (s)
//! d_red = 60.0                  # red duration (s)
//!
//! [weights]                     # running cost c1 [a]_+ + c2 a² + c3
//! c1 = 0.3333333333333333
//! c2 = 0.3333333333333333
//! c3 = 0.3333333333333333
//!
//! [grid]
//! n_v = 180                     # speed cells; Δt and Δd follow from it
//! gss_tol = 1e-4                # control search width (m/s²)
//! trace_substeps = 4            # tracing steps per Δt
//!
//! [distribution]                # remaining green time; omit for none
//! times = [2.0, 6.0]            # either remaining times T_i (s) ...
//! # durations = [30.0, 34.0]    # ... or full green durations D_i (s)
//! # elapsed = 28.0              #     with the green time already elapsed (s)
//! probs = [0.5, 0.5]
//!
//! [[start]]                     # one table per traced start
//! d = 94.0                      # position (m)
//! v = 0.85                      # speed (m/s)
//! # t = 3.0                     # start time (s); omitted: the scenario tree
//!                               # from t = 0 with a distribution, otherwise
//!                               # the yellow onset
//!
//! [pareto]
//! ratios = [0.1, 1.0, 10.0]     # c1 / c2
//! budgets = [25.0, 35.0, 45.0]  # travel-time budgets (s)
//! d = 80.0                      # start position (m)
//! v = 0.0                       # start speed (m/s)
//! mode = "green"                # or "full"
//!
//! [monte_carlo]
//! samples = 10000
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CostWeights, GreenDurationDistribution, PhysicalParams, SignalSchedule, VehicleState};
use crate::pareto::ParetoMode;
use crate::solver::{SolveConfig, DEFAULT_GSS_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "default_n_v")]
    pub n_v: usize,
    #[serde(default = "default_gss_tol")]
    pub gss_tol: f64,
    #[serde(default = "default_substeps")]
    pub trace_substeps: usize,
}

fn default_n_v() -> usize {
    180
}

fn default_gss_tol() -> f64 {
    DEFAULT_GSS_TOL
}

fn default_substeps() -> usize {
    4
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            n_v: default_n_v(),
            gss_tol: default_gss_tol(),
            trace_substeps: default_substeps(),
        }
    }
}

/// Remaining green time, given directly or as durations minus elapsed time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSection {
    pub times: Option<Vec<f64>>,
    pub durations: Option<Vec<f64>>,
    pub elapsed: Option<f64>,
    pub probs: Vec<f64>,
}

impl DistributionSection {
    pub fn build(&self) -> Result<GreenDurationDistribution> {
        match (&self.times, &self.durations) {
            (Some(t), None) => {
                if self.elapsed.is_some() {
                    return Err(Error::invalid("distribution.elapsed", "only used with durations"));
                }
                GreenDurationDistribution::new(t.clone(), self.probs.clone())
            }
            (None, Some(d)) => GreenDurationDistribution::from_durations(d, self.elapsed.unwrap_or(0.0), self.probs.clone()),
            _ => Err(Error::invalid("distribution", "give exactly one of times or durations")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartSection {
    pub d: f64,
    pub v: f64,
    pub t: Option<f64>,
}

impl StartSection {
    pub fn state(&self) -> VehicleState {
        VehicleState::new(self.d, self.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ParetoModeName {
    #[default]
    Green,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParetoSection {
    pub ratios: Vec<f64>,
    pub budgets: Vec<f64>,
    #[serde(default = "default_pareto_d")]
    pub d: f64,
    #[serde(default)]
    pub v: f64,
    #[serde(default)]
    pub mode: ParetoModeName,
}

fn default_pareto_d() -> f64 {
    80.0
}

impl ParetoSection {
    pub fn mode(&self) -> ParetoMode {
        match self.mode {
            ParetoModeName::Green => ParetoMode::Green,
            ParetoModeName::Full => ParetoMode::FullPipeline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    pub samples: usize,
}

/// A full run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: PhysicalParams,
    #[serde(default)]
    pub schedule: SignalSchedule,
    #[serde(default)]
    pub weights: CostWeights,
    #[serde(default)]
    pub grid: GridSection,
    pub distribution: Option<DistributionSection>,
    #[serde(default)]
    pub start: Vec<StartSection>,
    pub pareto: Option<ParetoSection>,
    pub monte_carlo: Option<MonteCarloSection>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Runs every module-level validation; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        self.solve_config()?;
        if self.grid.trace_substeps == 0 {
            return Err(Error::invalid("grid.trace_substeps", "must be positive"));
        }
        for s in &self.start {
            s.state().validate(&self.params)?;
            if let Some(t) = s.t {
                if !(t.is_finite() && t >= 0.0) {
                    return Err(Error::invalid("start.t", "must be finite and >= 0"));
                }
            }
        }
        if let Some(p) = &self.pareto {
            if p.ratios.is_empty() || p.ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                return Err(Error::invalid("pareto.ratios", "must be nonempty, finite and >= 0"));
            }
            if p.ratios.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::invalid("pareto.ratios", "must be sorted"));
            }
            if p.budgets.is_empty() || p.budgets.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
                return Err(Error::invalid("pareto.budgets", "must be nonempty and positive"));
            }
            VehicleState::new(p.d, p.v).validate(&self.params)?;
        }
        if let Some(mc) = &self.monte_carlo {
            if mc.samples == 0 {
                return Err(Error::invalid("monte_carlo.samples", "must be positive"));
            }
        }
        Ok(())
    }

    /// The solver configuration, including the distribution if any.
    pub fn solve_config(&self) -> Result<SolveConfig> {
        let mut cfg = SolveConfig::new(self.params, self.schedule, self.weights, self.grid.n_v)?;
        cfg.gss_tol = self.grid.gss_tol;
        if let Some(d) = &self.distribution {
            cfg = cfg.with_distribution(d.build()?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whether any requested output needs the yellow and red phases.
    pub fn needs_signal_phases(&self) -> bool {
        if self.distribution.is_some() {
            return true;
        }
        let t_green = self.schedule.t_green();
        self.start.iter().any(|s| s.t.unwrap_or(self.schedule.t_yellow) < t_green)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_sections() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.params, PhysicalParams::default());
        assert_eq!(c.grid.n_v, 180);
        assert!(c.distribution.is_none());
        assert!(!c.needs_signal_phases());
    }

    #[test]
    fn durations_with_elapsed_time() {
        let c = RunConfig::from_toml(
            "[distribution]\ndurations = [30.0, 34.0]\nelapsed = 28.0\nprobs = [0.5, 0.5]\n",
        )
        .unwrap();
        let d = c.distribution.unwrap().build().unwrap();
        assert_eq!(d.times(), &[2.0, 6.0]);
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::from_toml("[weights]\nc1 = 1.0\nc2 = 1.0\nc3 = 0.0\n").unwrap_err();
        assert!(e.to_string().contains("c3"), "{e}");
        let e = RunConfig::from_toml("[[start]]\nd = 500.0\nv = 1.0\n").unwrap_err();
        assert!(e.to_string().contains("d"), "{e}");
        let e = RunConfig::from_toml("[distribution]\ntimes = [1.0]\ndurations = [1.0]\nprobs = [1.0]\n").unwrap_err();
        assert!(e.to_string().contains("distribution"), "{e}");
        assert!(RunConfig::from_toml("[grid]\nbogus = 1\n").is_err());
    }

    #[test]
    fn starts_before_green_need_stage_two() {
        let c = RunConfig::from_toml("[[start]]\nd = 43.0\nv = 10.0\n").unwrap();
        assert!(c.needs_signal_phases());
        let c = RunConfig::from_toml("[[start]]\nd = 80.0\nv = 0.0\nt = 100.0\n").unwrap();
        assert!(!c.needs_signal_phases());
    }
}

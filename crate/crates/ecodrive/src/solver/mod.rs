//! The three-stage Hamilton-Jacobi-Bellman pipeline.
//!
//! * Stage 1 solves the stationary green-phase problem in one ordered sweep.
//! * Stage 2 marches backward through red and yellow in time relative to the
//!   yellow onset, so a single solve serves every possible onset time.
//! * Stage 3 chains the conditional value functions of the uncertain green
//!   phase, reusing the Stage 2 slice at the yellow onset as terminal data.
//!
//! Infeasible nodes carry [`INFEASIBLE`](crate::grid::INFEASIBLE), which loses
//! every comparison inside the minimization.

mod chain;
mod persist;
mod signal;
mod stationary;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use chain::{solve_uncertain_chain, UncertainChain};
pub use persist::{check_resumable, load_bundle, save_bundle};
pub use signal::{
    solve_red_phase, solve_signal_phases, solve_yellow_phase, Quantity, RedPhase, SignalField, Strategy, YellowPhase,
};
pub use stationary::solve_stationary_green;

use crate::error::{Error, Result};
use crate::grid::{build_grid, GridSpec, ValueField, INFEASIBLE};
use crate::model::{cost_rate, step, CostWeights, GreenDurationDistribution, PhysicalParams, SignalSchedule, VehicleState};

/// Default stopping width of the golden section search (m/s²).
pub const DEFAULT_GSS_TOL: f64 = 1e-4;

/// Everything a solve needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub params: PhysicalParams,
    pub schedule: SignalSchedule,
    pub weights: CostWeights,
    /// Spatial grid; its time fields are ignored.
    pub grid: GridSpec,
    /// Width at which the control search stops (m/s²).
    pub gss_tol: f64,
    /// Remaining green-time distribution, used only by Stage 3.
    pub distribution: Option<GreenDurationDistribution>,
}

impl SolveConfig {
    /// Builds a configuration with the coupled grid for `n_v` speed cells.
    pub fn new(params: PhysicalParams, schedule: SignalSchedule, weights: CostWeights, n_v: usize) -> Result<Self> {
        let grid = build_grid(&params, n_v, 1.0, 0.0)?;
        let cfg = Self {
            params,
            schedule,
            weights,
            grid,
            gss_tol: DEFAULT_GSS_TOL,
            distribution: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_distribution(mut self, dist: GreenDurationDistribution) -> Self {
        self.distribution = Some(dist);
        self
    }

    pub fn with_weights(mut self, weights: CostWeights) -> Self {
        self.weights = weights;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.schedule.validate()?;
        self.weights.validate()?;
        if !(self.gss_tol.is_finite() && self.gss_tol > 0.0) {
            return Err(Error::invalid("gss_tol", "must be positive"));
        }
        let g = build_grid(&self.params, self.grid.n_v, 1.0, 0.0)?;
        if g.n_d != self.grid.n_d || g.delta_d != self.grid.delta_d || g.d_origin != self.grid.d_origin {
            return Err(Error::invalid("grid", "spacings do not follow the grid coupling"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Hash of the parts Stages 1 and 2 depend on.
    pub fn stage12_hash(&self) -> String {
        let key = (&self.params, self.schedule.d_yellow, self.schedule.d_red, &self.weights, &self.grid, self.gss_tol);
        hex_digest(serde_json::to_string(&key).expect("config serializes").as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Minimizes `f` over `[lo, hi]`.
///
/// A nine-point scan picks the most promising bracket, golden section search
/// narrows it to width `tol`, and the best point seen anywhere (endpoints
/// included) is returned. Infinite values are legal and lose every comparison.
pub fn gss_minimize(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    if hi - lo <= tol {
        let (flo, fhi) = (f(lo), f(hi));
        return if fhi < flo { (hi, fhi) } else { (lo, flo) };
    }
    const SCAN: usize = 9;
    let step = (hi - lo) / (SCAN - 1) as f64;
    let mut xs = [0.0; SCAN];
    let mut best = (lo, INFINITY_LOSER);
    let mut best_m = 0;
    for (m, x) in xs.iter_mut().enumerate() {
        *x = if m + 1 == SCAN { hi } else { lo + step * m as f64 };
        let fx = f(*x);
        if fx < best.1 || m == 0 {
            best = (*x, fx);
            best_m = m;
        }
    }
    let a = xs[best_m.saturating_sub(1)];
    let b = xs[(best_m + 1).min(SCAN - 1)];
    let (x, fx, _) = golden_section(&mut f, a, b, tol);
    if fx < best.1 {
        (x, fx)
    } else {
        best
    }
}

const INFINITY_LOSER: f64 = f64::INFINITY;

/// Inverse golden ratio.
pub const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Plain golden section search on `[a, b]` until the bracket is at most `tol`
/// wide. Returns the better interior point, its value and the iteration count.
pub fn golden_section(f: &mut impl FnMut(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64, usize) {
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut iters = 0;
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        iters += 1;
    }
    if fd < fc {
        (d, fd, iters)
    } else {
        (c, fc, iters)
    }
}

/// Admissible accelerations at speed row `j`: no braking at rest, no
/// acceleration at the speed limit.
#[inline]
pub fn control_set(params: &PhysicalParams, grid: &GridSpec, j: usize) -> (f64, f64) {
    if j == 0 {
        (0.0, params.beta)
    } else if j == grid.n_v {
        (-params.alpha, 0.0)
    } else {
        (-params.alpha, params.beta)
    }
}

/// One semi-Lagrangian backup at node `(i, j)`.
///
/// Minimizes `tau(a) * K(a) + next(d~, v~, tau(a))` over `a` in `controls`,
/// where `(d~, v~)` is the exact successor after `tau(a)` seconds. The target
/// column is a boundary and returns 0 without a backup.
pub fn sl_backup(
    cfg: &SolveConfig,
    node: (usize, usize),
    controls: (f64, f64),
    tau: impl Fn(f64) -> f64,
    next: impl Fn(f64, f64, f64) -> f64,
) -> (f64, f64) {
    let (i, j) = node;
    if i == 0 {
        return (0.0, 0.0);
    }
    let (d, v) = (cfg.grid.d(i), cfg.grid.v(j));
    let w = &cfg.weights;
    let f = |a: f64| {
        let t = tau(a);
        let (dn, vn) = step(d, v, a, t);
        let rest = next(dn, vn, t);
        if rest.is_finite() {
            t * cost_rate(w, a) + rest
        } else {
            INFEASIBLE
        }
    };
    let (lo, hi) = controls;
    if hi <= lo {
        return (f(lo), lo);
    }
    let (a, val) = gss_minimize(f, lo, hi, cfg.gss_tol);
    if val.is_finite() {
        (val, a)
    } else {
        (INFEASIBLE, 0.0)
    }
}

/// Snapped phase timing shared by every stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnappedTimes {
    /// Time step (s).
    pub delta_t: f64,
    /// Yellow steps.
    pub k_yellow: usize,
    /// Red steps.
    pub k_red: usize,
    /// Snapped yellow duration (s).
    pub d_yellow: f64,
    /// Snapped red duration (s).
    pub d_red: f64,
}

impl SnappedTimes {
    pub fn new(cfg: &SolveConfig) -> Result<Self> {
        let dt = cfg.grid.delta_t;
        let k_yellow = (cfg.schedule.d_yellow / dt).round() as usize;
        let k_red = (cfg.schedule.d_red / dt).round() as usize;
        if k_yellow == 0 || k_red == 0 {
            return Err(Error::invalid(
                "schedule",
                format!("yellow and red must each span at least one time step of {dt} s"),
            ));
        }
        Ok(Self {
            delta_t: dt,
            k_yellow,
            k_red,
            d_yellow: k_yellow as f64 * dt,
            d_red: k_red as f64 * dt,
        })
    }

    /// The schedule with durations replaced by their snapped values.
    pub fn schedule(&self, t_yellow: f64) -> SignalSchedule {
        SignalSchedule {
            t_yellow,
            d_yellow: self.d_yellow,
            d_red: self.d_red,
        }
    }

    /// Snaps an absolute time to the grid.
    pub fn snap(&self, t: f64) -> f64 {
        (t / self.delta_t).round() * self.delta_t
    }
}

/// Wall-clock time spent in each stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub stage1_s: f64,
    pub stage2_s: f64,
    pub stage3_s: f64,
}

/// Outputs of the full pipeline.
#[derive(Debug, Clone)]
pub struct SolutionBundle {
    pub config: SolveConfig,
    pub times: SnappedTimes,
    /// Stationary green-phase value.
    pub q: ValueField,
    /// Yellow and red phases in time relative to the yellow onset. Absent
    /// for runs that only need the green phase.
    pub signal: Option<SignalField>,
    /// Conditional value functions of the uncertain green phase.
    pub chain: Option<UncertainChain>,
    pub timings: StageTimings,
}

impl SolutionBundle {
    /// Runs Stages 1 and 2, and Stage 3 when a distribution is configured.
    pub fn solve(cfg: &SolveConfig) -> Result<Self> {
        cfg.validate()?;
        let times = SnappedTimes::new(cfg)?;
        let t0 = Instant::now();
        let q = solve_stationary_green(cfg)?;
        let t1 = Instant::now();
        let signal = solve_signal_phases(cfg, &q)?;
        let t2 = Instant::now();
        let chain = match &cfg.distribution {
            Some(dist) => Some(solve_uncertain_chain(cfg, signal.delta(), dist)?),
            None => None,
        };
        let t3 = Instant::now();
        Ok(Self {
            config: cfg.clone(),
            times,
            q,
            signal: Some(signal),
            chain,
            timings: StageTimings {
                stage1_s: (t1 - t0).as_secs_f64(),
                stage2_s: (t2 - t1).as_secs_f64(),
                stage3_s: (t3 - t2).as_secs_f64(),
            },
        })
    }

    /// Runs Stage 1 only; enough for starts in the green phase.
    pub fn solve_green_only(cfg: &SolveConfig) -> Result<Self> {
        cfg.validate()?;
        let times = SnappedTimes::new(cfg)?;
        let t0 = Instant::now();
        let q = solve_stationary_green(cfg)?;
        Ok(Self {
            config: cfg.clone(),
            times,
            q,
            signal: None,
            chain: None,
            timings: StageTimings {
                stage1_s: t0.elapsed().as_secs_f64(),
                ..StageTimings::default()
            },
        })
    }

    /// The yellow and red phase solution.
    pub fn signal(&self) -> Result<&SignalField> {
        self.signal
            .as_ref()
            .ok_or_else(|| Error::invalid("bundle", "the yellow and red phases were not solved"))
    }

    /// Replaces the uncertain chain, keeping Stages 1 and 2.
    pub fn resolve_chain(&mut self, dist: GreenDurationDistribution) -> Result<()> {
        let t0 = Instant::now();
        let chain = solve_uncertain_chain(&self.config, self.signal()?.delta(), &dist)?;
        self.config.distribution = Some(dist);
        self.chain = Some(chain);
        self.timings.stage3_s = t0.elapsed().as_secs_f64();
        Ok(())
    }

    /// Value at state `x` and time `t` under a known yellow onset `t_yellow`.
    pub fn deterministic_value(&self, x: VehicleState, t: f64, t_yellow: f64) -> Result<f64> {
        let sched = self.times.schedule(t_yellow);
        if t >= sched.t_green() {
            self.q.value_at(x)
        } else if t >= t_yellow {
            self.signal()?.value_at(&self.config.params, x, t - t_yellow)
        } else {
            Err(Error::OutOfBounds(format!(
                "t={t} precedes the yellow onset {t_yellow}"
            )))
        }
    }

    /// Expected value `w^1(x, t)` or the appropriate conditional value for
    /// `t` inside the uncertain green phase.
    pub fn chain_value(&self, x: VehicleState, t: f64) -> Result<f64> {
        let chain = self
            .chain
            .as_ref()
            .ok_or_else(|| Error::invalid("distribution", "no uncertain chain was solved"))?;
        chain.value_at(x, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gss_symmetric_quadratic() {
        let (a, f) = gss_minimize(|a| (a - 1.0) * (a - 1.0), 0.0, 2.0, 1e-6);
        assert!((a - 1.0).abs() < 1e-6 && f < 1e-11);
    }

    #[test]
    fn gss_boundary_minimum() {
        let (a, f) = gss_minimize(|a| a * a, 0.5, 2.0, 1e-6);
        assert_eq!(a, 0.5);
        assert_eq!(f, 0.25);
    }

    #[test]
    fn golden_contraction_rate() {
        let (lo, hi) = (-3.8, 3.8);
        let tol = 1e-4;
        let mut f = |a: f64| (a - 0.3).powi(2);
        let (_, _, k) = golden_section(&mut f, lo, hi, tol);
        // Width after k iterations is (hi - lo) * 0.618^k.
        let width = |k: usize| (hi - lo) * INV_PHI.powi(k as i32);
        assert!(width(k) <= tol * (1.0 + 1e-9));
        assert!(width(k - 1) > tol);
        assert_eq!(k, 24);
    }

    #[test]
    fn gss_handles_infinite_values() {
        let (a, f) = gss_minimize(|a| if a < 1.0 { f64::INFINITY } else { a }, 0.0, 3.0, 1e-6);
        assert!((a - 1.0).abs() < 1e-5 && (f - 1.0).abs() < 1e-5);
        let (_, f) = gss_minimize(|_| f64::INFINITY, 0.0, 3.0, 1e-6);
        assert!(f.is_infinite());
    }

    #[test]
    fn gss_escapes_local_minimum() {
        // Two wells; the deeper one is near 2.5.
        let f = |a: f64| ((a + 2.0).powi(2)).min((a - 2.5).powi(2) - 1.0);
        let (a, _) = gss_minimize(f, -3.8, 3.8, 1e-5);
        assert!((a - 2.5).abs() < 1e-4);
    }

    #[test]
    fn control_sets_respect_speed_bounds() {
        let p = PhysicalParams::default();
        let g = build_grid(&p, 10, 1.0, 0.0).unwrap();
        assert_eq!(control_set(&p, &g, 0), (0.0, 3.8));
        assert_eq!(control_set(&p, &g, 10), (-3.8, 0.0));
        assert_eq!(control_set(&p, &g, 4), (-3.8, 3.8));
    }

    #[test]
    fn target_column_is_a_boundary() {
        let cfg = SolveConfig::new(PhysicalParams::default(), SignalSchedule::default(), CostWeights::default(), 10).unwrap();
        assert_eq!(sl_backup(&cfg, (0, 3), (-3.8, 3.8), |_| 0.1, |_, _, _| 5.0), (0.0, 0.0));
    }

    #[test]
    fn config_rejects_zero_time_weight() {
        let r = SolveConfig::new(PhysicalParams::default(), SignalSchedule::default(), CostWeights::new(1.0, 1.0, 0.0), 10);
        assert!(r.is_err());
    }
}

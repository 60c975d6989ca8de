//! Independent reference values for tests.
//!
//! None of these touch the grid solver: the time-optimal value is closed form,
//! enumeration simulates piecewise-constant controls exactly, and the Monte
//! Carlo estimator only needs the cost realized under each scenario.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{
    cost_rate, region_membership, GreenDurationDistribution, PhysicalParams, Region, SignalSchedule, VehicleState,
};
use crate::solver::SolveConfig;

/// Minimal time to the target with controls in `[-alpha, beta]`: accelerate
/// fully, then hold the speed limit once it is reached.
pub fn time_optimal_value(params: &PhysicalParams, state: VehicleState) -> f64 {
    let s = (state.d - params.d_star).max(0.0);
    let (v, vb, b) = (state.v.clamp(0.0, params.v_bar), params.v_bar, params.beta);
    let ramp = (vb * vb - v * v) / (2.0 * b);
    if ramp <= s {
        (vb - v) / b + (s - ramp) / vb
    } else {
        ((v * v + 2.0 * b * s).sqrt() - v) / b
    }
}

/// Piecewise-constant control sequences to enumerate.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMesh {
    /// Length of every segment but the last (s).
    pub segment_duration: f64,
    /// Candidate accelerations of each segment. The last segment's control is
    /// held until the target is reached.
    pub candidates: Vec<Vec<f64>>,
}

impl ControlMesh {
    /// `segments` segments with `per_segment` evenly spaced candidates in `[-alpha, beta]`.
    pub fn uniform(params: &PhysicalParams, segments: usize, per_segment: usize, segment_duration: f64) -> Self {
        let vals: Vec<f64> = if per_segment <= 1 {
            vec![0.0]
        } else {
            (0..per_segment)
                .map(|k| -params.alpha + (params.alpha + params.beta) * k as f64 / (per_segment - 1) as f64)
                .collect()
        };
        Self {
            segment_duration,
            candidates: vec![vals; segments],
        }
    }

    /// Number of control sequences.
    pub fn sequences(&self) -> f64 {
        self.candidates.iter().map(|c| c.len() as f64).product()
    }

    pub fn validate(&self, params: &PhysicalParams) -> Result<()> {
        if self.candidates.is_empty() || self.candidates.iter().any(|c| c.is_empty()) {
            return Err(Error::invalid("mesh.candidates", "every segment needs a candidate"));
        }
        if !(self.segment_duration.is_finite() && self.segment_duration > 0.0) {
            return Err(Error::invalid("mesh.segment_duration", "must be positive"));
        }
        let bad = self
            .candidates
            .iter()
            .flatten()
            .any(|a| !a.is_finite() || *a < -params.alpha - 1e-12 || *a > params.beta + 1e-12);
        if bad {
            return Err(Error::invalid("mesh.candidates", "outside [-alpha, beta]"));
        }
        if self.sequences() > MAX_SEQUENCES {
            return Err(Error::invalid("mesh", format!("more than {MAX_SEQUENCES} sequences")));
        }
        Ok(())
    }
}

/// Largest mesh [`enumerate_controls_value`] accepts.
pub const MAX_SEQUENCES: f64 = 2e6;

/// Region checks happen at least this often (s).
const CHECK_STEP: f64 = 0.01;

/// Time after which a held control is declared unable to reach the target (s).
const HOLD_CAP: f64 = 600.0;

#[derive(Debug, Clone, Copy)]
struct SimState {
    d: f64,
    v: f64,
    t: f64,
    cost: f64,
}

struct Simulator<'a> {
    cfg: &'a SolveConfig,
}

enum Hold {
    Running(SimState),
    Reached(f64),
    Infeasible,
}

impl Simulator<'_> {
    /// Holds `a` for `dur` seconds, or until the target if `dur` is `None`.
    /// Speed saturates at the bounds, after which the effective control is 0.
    fn hold(&self, mut s: SimState, a: f64, dur: Option<f64>) -> Hold {
        let p = &self.cfg.params;
        let w = &self.cfg.weights;
        let sched: &SignalSchedule = &self.cfg.schedule;
        let end = dur.map_or(s.t + HOLD_CAP, |d| s.t + d);
        while s.t < end - 1e-12 {
            let at_bound = (a > 0.0 && s.v >= p.v_bar) || (a < 0.0 && s.v <= 0.0);
            let ae = if at_bound { 0.0 } else { a };
            if ae == 0.0 && s.v <= 0.0 {
                // Stalled: nothing changes until the segment ends.
                if dur.is_none() {
                    return Hold::Infeasible;
                }
                let piece = end - s.t;
                s.cost += piece * cost_rate(w, 0.0);
                s.t = end;
                break;
            }
            let mut piece = (end - s.t).min(CHECK_STEP);
            if ae > 0.0 {
                piece = piece.min((p.v_bar - s.v) / ae);
            } else if ae < 0.0 {
                piece = piece.min(s.v / -ae);
            }
            let gap = s.d - p.d_star;
            if let Some(hit) = time_to_cover(s.v, ae, gap) {
                if hit <= piece {
                    return Hold::Reached(s.cost + hit * cost_rate(w, ae));
                }
            }
            s.d -= s.v * piece + 0.5 * ae * piece * piece;
            s.v = (s.v + ae * piece).clamp(0.0, p.v_bar);
            s.t += piece;
            s.cost += piece * cost_rate(w, ae);
            if region_membership(VehicleState::new(s.d, s.v), s.t, sched, p) != Region::Allowed {
                return Hold::Infeasible;
            }
        }
        if dur.is_none() {
            return Hold::Infeasible;
        }
        Hold::Running(s)
    }
}

/// Smallest `tau >= 0` with `v tau + a tau²/2 = gap`, if any.
fn time_to_cover(v: f64, a: f64, gap: f64) -> Option<f64> {
    if gap <= 0.0 {
        return Some(0.0);
    }
    if a == 0.0 {
        return (v > 0.0).then(|| gap / v);
    }
    let disc = v * v + 2.0 * a * gap;
    if disc < 0.0 {
        return None;
    }
    let r = disc.sqrt();
    Some(2.0 * gap / (v + r))
}

/// Cheapest cost over every control sequence of `mesh` from `start` at `t0`,
/// under the schedule of `config`. Sequences that leave the allowed region at
/// any check are discarded. Returns an error if none is feasible.
pub fn enumerate_controls_value(start: VehicleState, t0: f64, config: &SolveConfig, mesh: &ControlMesh) -> Result<f64> {
    let p = &config.params;
    mesh.validate(p)?;
    start.validate(p)?;
    if start.d <= p.d_star {
        return Ok(0.0);
    }
    let sim = Simulator { cfg: config };
    let init = SimState {
        d: start.d,
        v: start.v,
        t: t0,
        cost: 0.0,
    };
    let best = search(&sim, mesh, 0, init, f64::INFINITY);
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::Calibration(format!(
            "no feasible control sequence from ({}, {}) at t={t0}",
            start.d, start.v
        )))
    }
}

fn search(sim: &Simulator, mesh: &ControlMesh, seg: usize, s: SimState, mut best: f64) -> f64 {
    if s.cost >= best {
        return best;
    }
    let last = seg + 1 == mesh.candidates.len();
    for &a in &mesh.candidates[seg] {
        let dur = (!last).then_some(mesh.segment_duration);
        match sim.hold(s, a, dur) {
            Hold::Reached(c) => best = best.min(c),
            Hold::Running(next) => best = search(sim, mesh, seg + 1, next, best),
            Hold::Infeasible => {}
        }
    }
    best
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Estimates the expected cost of a policy by drawing the yellow onset from
/// `dist` with a seeded ChaCha8 stream.
///
/// `scenario_cost(i)` is the cost the policy realizes when the light turns
/// yellow at the `i`-th onset time. It is evaluated at most once per scenario.
pub fn expected_cost_monte_carlo(
    dist: &GreenDurationDistribution,
    n_samples: usize,
    seed: u64,
    mut scenario_cost: impl FnMut(usize) -> Result<f64>,
) -> Result<McEstimate> {
    if n_samples == 0 {
        return Err(Error::invalid("monte_carlo.samples", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cumulative: Vec<f64> = dist
        .probs()
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let mut memo: Vec<Option<f64>> = vec![None; dist.len()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let u: f64 = rng.random();
        let i = cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(dist.len() - 1);
        let c = match memo[i] {
            Some(c) => c,
            None => {
                let c = scenario_cost(i)?;
                memo[i] = Some(c);
                c
            }
        };
        sum += c;
        sum_sq += c * c;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = if n_samples > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_error: (var / n).sqrt(),
        samples: n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CostWeights;
    use proptest::prelude::*;

    fn params() -> PhysicalParams {
        PhysicalParams::default()
    }

    #[test]
    fn coasting_at_speed_limit() {
        let p = params();
        let t = time_optimal_value(&p, VehicleState::new(50.0, p.v_bar));
        assert!((t - 150.0 / p.v_bar).abs() < 1e-12);
    }

    #[test]
    fn example_time_optimal_values() {
        let p = params();
        let t = time_optimal_value(&p, VehicleState::new(80.0, 0.0));
        // 20.12 / 3.8 s of full acceleration, then the rest at the limit.
        let ramp = 20.12 / 3.8;
        let ramp_len = 20.12 * 20.12 / 7.6;
        assert!((t - (ramp + (180.0 - ramp_len) / 20.12)).abs() < 1e-12);
        assert!((t - 11.594).abs() < 1e-3);
        let short = time_optimal_value(&p, VehicleState::new(p.d_star + 10.0, 0.0));
        assert!((short - (20.0f64 / 3.8).sqrt()).abs() < 1e-12);
        assert!((short - 2.294).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn continuous_at_branch(v in 0.0f64..20.0) {
            let p = params();
            let s = (p.v_bar * p.v_bar - v * v) / (2.0 * p.beta);
            let x = VehicleState::new(p.d_star + s, v);
            let a = (p.v_bar - v) / p.beta;
            let b = ((v * v + 2.0 * p.beta * s).sqrt() - v) / p.beta;
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((time_optimal_value(&p, x) - a).abs() < 1e-12);
        }
    }

    fn green_cfg(weights: CostWeights) -> SolveConfig {
        // Yellow far in the future: the light is green at every time used.
        let sched = SignalSchedule::new(1e6, 3.0, 60.0).unwrap();
        SolveConfig::new(params(), sched, weights, 10).unwrap()
    }

    #[test]
    fn enumeration_at_target_is_zero() {
        let cfg = green_cfg(CostWeights::default());
        let mesh = ControlMesh::uniform(&cfg.params, 2, 3, 1.0);
        let v = enumerate_controls_value(VehicleState::new(-100.0, 5.0), 0.0, &cfg, &mesh).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn enumeration_bounds_time_optimum() {
        let cfg = green_cfg(CostWeights::new(0.0, 0.0, 1.0));
        let mesh = ControlMesh::uniform(&cfg.params, 6, 5, 1.5);
        let x = VehicleState::new(80.0, 0.0);
        let e = enumerate_controls_value(x, 0.0, &cfg, &mesh).unwrap();
        let t = time_optimal_value(&cfg.params, x);
        assert!(e >= t - 1e-9);
        assert!(e <= 1.05 * t, "{e} vs {t}");
    }

    #[test]
    fn refinement_never_increases_value() {
        let cfg = green_cfg(CostWeights::default());
        let coarse = ControlMesh::uniform(&cfg.params, 4, 3, 2.0);
        let fine = ControlMesh::uniform(&cfg.params, 4, 5, 2.0);
        for x in [VehicleState::new(80.0, 0.0), VehicleState::new(30.0, 12.0)] {
            let c = enumerate_controls_value(x, 0.0, &cfg, &coarse).unwrap();
            let f = enumerate_controls_value(x, 0.0, &cfg, &fine).unwrap();
            assert!(f <= c + 1e-12, "{f} > {c}");
        }
    }

    #[test]
    fn enumeration_respects_red_light() {
        // Red for the whole first minute: the car must stop before the line.
        let sched = SignalSchedule::new(0.0, 3.0, 60.0).unwrap();
        let cfg = SolveConfig::new(params(), sched, CostWeights::default(), 10).unwrap();
        let mesh = ControlMesh {
            segment_duration: 30.0,
            candidates: vec![vec![3.8], vec![3.8]],
        };
        assert!(enumerate_controls_value(VehicleState::new(50.0, 0.0), 3.0, &cfg, &mesh).is_err());
    }

    #[test]
    fn rejects_oversized_mesh() {
        let cfg = green_cfg(CostWeights::default());
        let mesh = ControlMesh::uniform(&cfg.params, 12, 5, 1.0);
        assert!(enumerate_controls_value(VehicleState::new(80.0, 0.0), 0.0, &cfg, &mesh).is_err());
    }

    #[test]
    fn point_mass_has_zero_error() {
        let dist = GreenDurationDistribution::point_mass(2.0).unwrap();
        let est = expected_cost_monte_carlo(&dist, 100, 7, |_| Ok(4.5)).unwrap();
        assert_eq!(est.mean, 4.5);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn monte_carlo_is_reproducible_and_unbiased() {
        let dist = GreenDurationDistribution::new(vec![2.0, 6.0], vec![0.5, 0.5]).unwrap();
        let cost = |i: usize| Ok(if i == 0 { 10.0 } else { 20.0 });
        let a = expected_cost_monte_carlo(&dist, 10_000, 42, cost).unwrap();
        let b = expected_cost_monte_carlo(&dist, 10_000, 42, cost).unwrap();
        assert_eq!(a, b);
        assert!((a.mean - 15.0).abs() <= 3.0 * a.std_error);
        // The standard error of a fair two-point mixture with spread 10 is 5/sqrt(n).
        assert!((a.std_error - 0.05).abs() < 0.002);
    }

    #[test]
    fn monte_carlo_memoizes_scenarios() {
        let dist = GreenDurationDistribution::new(vec![2.0, 4.0, 6.0], vec![0.25, 0.25, 0.5]).unwrap();
        let mut calls = 0;
        expected_cost_monte_carlo(&dist, 1000, 1, |i| {
            calls += 1;
            Ok(i as f64)
        })
        .unwrap();
        assert!(calls <= 3);
    }
}

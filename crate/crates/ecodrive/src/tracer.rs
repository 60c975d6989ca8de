//! Forward integration of the feedback controls stored in a solution bundle.
//!
//! The control is held constant over steps of `Δt / substeps` and the state is
//! advanced exactly. Steps are shortened so that phase changes, the stop line
//! and the target are hit exactly. A braking step that would stop the car ends
//! when it comes to rest, and acceleration is clamped at the speed limit. Near a constraint curve the interpolated feedback
//! is overridden by the least change that keeps the car on the allowed side.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    constituent_rates, d_alpha, d_beta_remaining, region_membership, CostWeights, PhysicalParams, Region,
    SignalSchedule, VehicleState,
};
use crate::solver::{Quantity, SolutionBundle, Strategy};

/// Integration settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceOptions {
    /// Tracing steps per grid time step.
    pub substeps: usize,
    /// Hard cap on integration steps per trajectory.
    pub max_steps: usize,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            substeps: 4,
            max_steps: 2_000_000,
        }
    }
}

/// Something that happened at a trajectory sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceEvent {
    TurnedYellow,
    TurnedRed,
    TurnedGreen,
    CrossedIntersection,
    ReachedTarget,
}

impl TraceEvent {
    pub fn label(self) -> &'static str {
        match self {
            TraceEvent::TurnedYellow => "turned-yellow",
            TraceEvent::TurnedRed => "turned-red",
            TraceEvent::TurnedGreen => "turned-green",
            TraceEvent::CrossedIntersection => "crossed-intersection",
            TraceEvent::ReachedTarget => "reached-target",
        }
    }
}

/// State at time `t` and the control held until the next sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSample {
    pub t: f64,
    pub d: f64,
    pub v: f64,
    pub a: f64,
    pub events: Vec<TraceEvent>,
}

/// Time-integrated constituent costs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ConstituentCosts {
    /// Integral of `[a]_+`.
    pub j1: f64,
    /// Integral of `a²`.
    pub j2: f64,
    /// Elapsed time.
    pub j3: f64,
}

impl ConstituentCosts {
    pub fn total(&self, w: &CostWeights) -> f64 {
        w.combine(self.j1, self.j2, self.j3)
    }

    fn add(self, o: Self) -> Self {
        Self {
            j1: self.j1 + o.j1,
            j2: self.j2 + o.j2,
            j3: self.j3 + o.j3,
        }
    }
}

/// A traced path.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Trajectory {
    pub samples: Vec<TraceSample>,
    /// Whether the path ends on the target.
    pub reached_target: bool,
}

impl Trajectory {
    pub fn is_empty(&self) -> bool {
        self.samples.len() < 2
    }

    pub fn start_time(&self) -> Option<f64> {
        self.samples.first().map(|s| s.t)
    }

    pub fn end_time(&self) -> Option<f64> {
        self.samples.last().map(|s| s.t)
    }

    /// Time of the first sample carrying `event`.
    pub fn event_time(&self, event: TraceEvent) -> Option<f64> {
        self.samples.iter().find(|s| s.events.contains(&event)).map(|s| s.t)
    }

    /// Exact integrals of the piecewise-constant control.
    pub fn costs(&self) -> ConstituentCosts {
        self.samples.windows(2).fold(ConstituentCosts::default(), |acc, w| {
            let dt = w[1].t - w[0].t;
            let [r1, r2, _] = constituent_rates(w[0].a);
            acc.add(ConstituentCosts {
                j1: r1 * dt,
                j2: r2 * dt,
                j3: dt,
            })
        })
    }

    /// Appends `other`, merging the shared sample at the seam.
    pub fn extend(&mut self, other: &Trajectory) {
        let mut rest = other.samples.iter();
        if let (Some(last), Some(first)) = (self.samples.last_mut(), other.samples.first()) {
            if (last.t - first.t).abs() < 1e-12 {
                last.a = first.a;
                for e in &first.events {
                    if !last.events.contains(e) {
                        last.events.push(*e);
                    }
                }
                rest.next();
            }
        }
        self.samples.extend(rest.cloned());
        self.reached_target = other.reached_target;
    }

    /// Writes `t,d,v,a,K1_rate,K2_rate,branch_id,event` rows.
    pub fn write_csv(&self, out: &mut impl Write, branch_id: usize, header: bool) -> Result<()> {
        if header {
            writeln!(out, "t,d,v,a,K1_rate,K2_rate,branch_id,event")?;
        }
        for s in &self.samples {
            let [r1, r2, _] = constituent_rates(s.a);
            let ev: Vec<&str> = s.events.iter().map(|e| e.label()).collect();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.t,
                s.d,
                s.v,
                s.a,
                r1,
                r2,
                branch_id,
                ev.join(";")
            )?;
        }
        Ok(())
    }
}

/// Constituent costs and their weighted total `(J1, J2, J3, J)`.
pub fn accumulate_costs(traj: &Trajectory, weights: &CostWeights) -> (f64, f64, f64, f64) {
    let c = traj.costs();
    (c.j1, c.j2, c.j3, c.total(weights))
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
    Some(2.0 * gap / (v + disc.sqrt()))
}

#[inline]
fn advance(x: VehicleState, a: f64, tau: f64) -> VehicleState {
    VehicleState::new(x.d - x.v * tau - 0.5 * a * tau * tau, x.v + a * tau)
}

/// Smallest distance to the braking parabola over a step of length `h`
/// holding `a`; negative means the car would be unable to stop in time.
fn min_parabola_gap(params: &PhysicalParams, x: VehicleState, a: f64, h: f64) -> f64 {
    // gap(τ) = g0 + c1 τ + c2 τ², exact for constant acceleration.
    let g0 = x.d - d_alpha(params, x.v);
    let c1 = -x.v * (1.0 + a / params.alpha);
    let c2 = -a * (params.alpha + a) / (2.0 * params.alpha);
    let g = |t: f64| g0 + c1 * t + c2 * t * t;
    let mut m = g0.min(g(h));
    if c2 > 0.0 {
        let tv = -c1 / (2.0 * c2);
        if tv > 0.0 && tv < h {
            m = m.min(g(tv));
        }
    }
    m
}

/// Largest control no greater than `a` that keeps the car able to stop.
fn brake_override(params: &PhysicalParams, x: VehicleState, a: f64, h: f64, lo: f64) -> f64 {
    if min_parabola_gap(params, x, a, h) >= 0.0 || a <= lo {
        return a;
    }
    let (mut safe, mut bad) = (lo, a);
    for _ in 0..60 {
        let mid = 0.5 * (safe + bad);
        if min_parabola_gap(params, x, mid, h) >= 0.0 {
            safe = mid;
        } else {
            bad = mid;
        }
    }
    safe
}

/// Smallest control no less than `a` that keeps the car able to reach the
/// stop line before red, `s_r` seconds from now.
fn accel_override(params: &PhysicalParams, x: VehicleState, a: f64, h: f64, s_r: f64, hi: f64) -> f64 {
    let ok = |a: f64| {
        let y = advance(x, a, h);
        let left = s_r - h;
        let bound = if left <= 1e-12 {
            params.d_ell
        } else {
            d_beta_remaining(params, y.v, left)
        };
        y.d <= bound - 1e-9
    };
    if x.d < params.d_ell || ok(a) || a >= hi {
        return a;
    }
    if !ok(hi) {
        return hi;
    }
    let (mut bad, mut good) = (a, hi);
    for _ in 0..60 {
        let mid = 0.5 * (bad + good);
        if ok(mid) {
            good = mid;
        } else {
            bad = mid;
        }
    }
    good
}

/// Control law evaluated at the start of each step.
trait Policy {
    /// Control for a step of length `h` from `(x, t)`, within `[lo, hi]`.
    fn control(&mut self, x: VehicleState, t: f64, h: f64, lo: f64, hi: f64) -> Result<f64>;
}

struct Integrator<'a> {
    params: &'a PhysicalParams,
    h: f64,
    max_steps: usize,
    /// Schedule used for the safety check, if any.
    schedule: Option<SignalSchedule>,
}

impl Integrator<'_> {
    /// Integrates from `(x, t)` until `t_stop` or the target. Samples are
    /// pushed at every step start; the end state is returned without a sample.
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        traj: &mut Trajectory,
        mut x: VehicleState,
        mut t: f64,
        t_stop: f64,
        breakpoints: &[(f64, TraceEvent)],
        pending: &mut Vec<TraceEvent>,
        policy: &mut dyn Policy,
    ) -> Result<(VehicleState, f64)> {
        let p = self.params;
        let mut steps = 0usize;
        loop {
            if x.d <= p.d_star {
                traj.reached_target = true;
                return Ok((x, t));
            }
            if t >= t_stop - 1e-12 {
                return Ok((x, t_stop.max(t)));
            }
            steps += 1;
            if steps > self.max_steps {
                return Err(self.fail(x, t, "step cap exceeded"));
            }
            let next_bp = breakpoints.iter().map(|b| b.0).find(|&tb| tb > t + 1e-12);
            let mut h = self.h.min(t_stop - t);
            if let Some(tb) = next_bp {
                h = h.min(tb - t);
            }
            let lo = if x.v > 0.0 { -p.alpha } else { 0.0 };
            let hi = p.beta.min((p.v_bar - x.v) / h).max(lo);
            let a = policy.control(x, t, h, lo, hi)?.clamp(lo, hi);
            // Braking that would stop the car inside the step ends the step at rest.
            let stops = a < 0.0 && x.v + a * h <= 0.0;
            if stops {
                h = x.v / -a;
            }
            let mut events = std::mem::take(pending);
            // Hit the target inside this step.
            if let Some(tau) = time_to_cover(x.v, a, x.d - p.d_star).filter(|&tau| tau <= h) {
                traj.samples.push(TraceSample { t, d: x.d, v: x.v, a, events });
                let mut y = advance(x, a, tau);
                y.d = p.d_star;
                pending.push(TraceEvent::ReachedTarget);
                if x.d >= p.d_ell && p.d_star < p.d_ell {
                    self.push_crossing(traj, x, t, a, tau);
                }
                traj.reached_target = true;
                return Ok((y, t + tau));
            }
            let mut y = advance(x, a, h);
            if stops {
                y.v = 0.0;
                // Coming to rest on the stop line must not count as crossing it.
                if x.d >= p.d_ell && y.d < p.d_ell && y.d > p.d_ell - 1e-9 {
                    y.d = p.d_ell;
                }
            }
            y.v = y.v.clamp(0.0, p.v_bar);
            traj.samples.push(TraceSample {
                t,
                d: x.d,
                v: x.v,
                a,
                events: std::mem::take(&mut events),
            });
            if x.d >= p.d_ell && y.d < p.d_ell {
                self.push_crossing(traj, x, t, a, h);
            }
            let mut t_next = t + h;
            if let Some(&(tb, ev)) = breakpoints.iter().find(|b| (b.0 - t_next).abs() <= 1e-9) {
                t_next = tb;
                pending.push(ev);
            }
            y = self.check(y, t_next)?;
            x = y;
            t = t_next;
        }
    }

    /// Inserts a sample where the stop line is crossed during `[t, t + h]`.
    fn push_crossing(&self, traj: &mut Trajectory, x: VehicleState, t: f64, a: f64, h: f64) {
        let tau = time_to_cover(x.v, a, x.d - self.params.d_ell).unwrap_or(0.0);
        if tau <= 0.0 {
            let last = traj.samples.last_mut().expect("sample pushed");
            last.events.push(TraceEvent::CrossedIntersection);
        } else if tau < h {
            let y = advance(x, a, tau);
            traj.samples.push(TraceSample {
                t: t + tau,
                d: self.params.d_ell,
                v: y.v,
                a,
                events: vec![TraceEvent::CrossedIntersection],
            });
        }
    }

    /// Rejects states inside a disallowed region. Round-off below a micron
    /// next to the braking parabola is projected back onto it.
    fn check(&self, y: VehicleState, t: f64) -> Result<VehicleState> {
        let Some(sched) = self.schedule else {
            return Ok(y);
        };
        let p = self.params;
        match region_membership(y, t, &sched, p) {
            Region::Allowed => Ok(y),
            Region::DisallowedRed => {
                let da = d_alpha(p, y.v);
                if da - y.d < 1e-6 {
                    Ok(VehicleState::new(da, y.v))
                } else {
                    Err(self.fail(y, t, "entered the red-phase disallowed region"))
                }
            }
            Region::DisallowedYellow => {
                let da = d_alpha(p, y.v);
                let db = d_beta_remaining(p, y.v, sched.t_red() - t);
                if (y.d - db).min(da - y.d) < 1e-6 {
                    Ok(y)
                } else {
                    Err(self.fail(y, t, "entered the yellow-phase disallowed region"))
                }
            }
        }
    }

    fn fail(&self, x: VehicleState, t: f64, reason: &str) -> Error {
        Error::Trace {
            t,
            d: x.d,
            v: x.v,
            reason: reason.to_string(),
        }
    }
}

/// Phase-G and signal-phase feedback for a known yellow onset.
struct SignalPolicy<'a> {
    bundle: &'a SolutionBundle,
    schedule: SignalSchedule,
}

impl Policy for SignalPolicy<'_> {
    fn control(&mut self, x: VehicleState, t: f64, h: f64, lo: f64, hi: f64) -> Result<f64> {
        let b = self.bundle;
        let p = &b.config.params;
        let sched = &self.schedule;
        if t >= sched.t_green() - 1e-9 {
            return b.q.feedback_at(x);
        }
        let s = t - sched.t_yellow;
        let sig = b.signal()?;
        let fail = |reason: &str| Error::Trace {
            t,
            d: x.d,
            v: x.v,
            reason: reason.to_string(),
        };
        let feedback = |st: Strategy| {
            sig.sample(p, st, x, s, Quantity::Feedback)
                .ok_or_else(|| fail("no feedback nodes around the state"))
        };
        if t >= sched.t_red() - 1e-12 {
            if x.d < p.d_ell {
                return feedback(Strategy::Free);
            }
            let a = feedback(Strategy::Wait)?.clamp(lo, hi);
            return Ok(brake_override(p, x, a, h, lo));
        }
        let (st, _) = sig
            .best_strategy(p, x, s)
            .ok_or_else(|| fail("no admissible strategy during yellow"))?;
        let a = feedback(st)?.clamp(lo, hi);
        Ok(match st {
            Strategy::Wait => brake_override(p, x, a, h, lo),
            Strategy::Cross => accel_override(p, x, a, h, sched.t_red() - t, hi),
            Strategy::Free => a,
        })
    }
}

/// Feedback of one segment of the uncertain green phase.
struct ChainPolicy<'a> {
    bundle: &'a SolutionBundle,
    segment: usize,
}

impl Policy for ChainPolicy<'_> {
    fn control(&mut self, x: VehicleState, t: f64, _h: f64, _lo: f64, _hi: f64) -> Result<f64> {
        let chain = self
            .bundle
            .chain
            .as_ref()
            .ok_or_else(|| Error::invalid("distribution", "bundle has no uncertain chain"))?;
        chain.feedback_at(&self.bundle.config.params, self.segment, x, t)
    }
}

fn integrator<'a>(bundle: &'a SolutionBundle, opts: &TraceOptions, schedule: Option<SignalSchedule>) -> Result<Integrator<'a>> {
    if opts.substeps == 0 {
        return Err(Error::invalid("grid.trace_substeps", "must be positive"));
    }
    Ok(Integrator {
        params: &bundle.config.params,
        h: bundle.config.grid.delta_t / opts.substeps as f64,
        max_steps: opts.max_steps,
        schedule,
    })
}

fn finish(traj: &mut Trajectory, x: VehicleState, t: f64, pending: Vec<TraceEvent>) {
    traj.samples.push(TraceSample {
        t,
        d: x.d,
        v: x.v,
        a: 0.0,
        events: pending,
    });
}

/// Traces from `start` at `t0` under the schedule stored in the bundle.
pub fn trace_deterministic(start: VehicleState, t0: f64, bundle: &SolutionBundle, opts: &TraceOptions) -> Result<Trajectory> {
    trace_with_onset(start, t0, bundle.config.schedule.t_yellow, bundle, opts)
}

/// Traces from `start` at `t0` for a light that turns yellow at `t_yellow`.
///
/// `t0` must not precede the yellow onset. The signal-phase feedback is used
/// until green, and the stationary feedback afterwards.
pub fn trace_with_onset(
    start: VehicleState,
    t0: f64,
    t_yellow: f64,
    bundle: &SolutionBundle,
    opts: &TraceOptions,
) -> Result<Trajectory> {
    let p = &bundle.config.params;
    start.validate(p)?;
    let sched = bundle.times.schedule(t_yellow);
    if t0 < t_yellow - 1e-9 {
        return Err(Error::OutOfBounds(format!(
            "trace start {t0} precedes the yellow onset {t_yellow}"
        )));
    }
    if region_membership(start, t0, &sched, p) != Region::Allowed {
        return Err(Error::Trace {
            t: t0,
            d: start.d,
            v: start.v,
            reason: "start state is not allowed".into(),
        });
    }
    let mut traj = Trajectory::default();
    if start.d <= p.d_star {
        traj.reached_target = true;
        return Ok(traj);
    }
    let integ = integrator(bundle, opts, Some(sched))?;
    let bps = [(sched.t_red(), TraceEvent::TurnedRed), (sched.t_green(), TraceEvent::TurnedGreen)];
    let mut pending = Vec::new();
    if (t0 - t_yellow).abs() < 1e-9 {
        pending.push(TraceEvent::TurnedYellow);
    }
    let mut policy = SignalPolicy { bundle, schedule: sched };
    let (x, t) = integ.run(&mut traj, start, t0, f64::INFINITY, &bps, &mut pending, &mut policy)?;
    finish(&mut traj, x, t, pending);
    Ok(traj)
}

/// One leaf of the scenario tree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Branch {
    /// Scenario indices (0-based) that end in this leaf.
    pub scenarios: Vec<usize>,
    pub probability: f64,
    /// Snapped yellow onset of the branch, if it was reached before the target.
    pub onset: Option<f64>,
    /// Continuation after the onset.
    pub continuation: Trajectory,
    /// Costs of the whole path from the start to the target.
    pub costs: ConstituentCosts,
    pub total_cost: f64,
}

/// The optimal plan under the green-time distribution, branching at each
/// possible yellow onset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchingTrajectory {
    /// Trunk pieces; piece `i` runs on `[T_i, T_{i+1}]` with `T_0 = 0`.
    pub trunk: Vec<Trajectory>,
    pub branches: Vec<Branch>,
    pub expected_cost: f64,
}

impl BranchingTrajectory {
    /// The full path realized in branch `k`.
    pub fn path(&self, k: usize) -> Trajectory {
        let b = &self.branches[k];
        let last = b.scenarios[0];
        let mut out = Trajectory::default();
        for piece in self.trunk.iter().take(last + 1) {
            out.extend(piece);
        }
        if !b.continuation.samples.is_empty() {
            out.extend(&b.continuation);
        }
        out
    }

    /// Tree document with one node per uncertainty interval.
    pub fn to_json(&self, weights: &CostWeights) -> serde_json::Value {
        let nodes: Vec<serde_json::Value> = self
            .trunk
            .iter()
            .enumerate()
            .map(|(i, piece)| {
                let branch = self.branches.iter().find(|b| b.scenarios[0] == i);
                let c = piece.costs();
                serde_json::json!({
                    "interval": [piece.start_time(), piece.end_time()],
                    "child_yellow": branch.map(|b| serde_json::json!({
                        "scenarios": b.scenarios,
                        "onset": b.onset,
                        "crossed_at": self.path(self.branches.iter().position(|x| x == b).unwrap())
                            .event_time(TraceEvent::CrossedIntersection),
                        "costs": b.costs,
                        "total_cost": b.total_cost,
                    })),
                    "child_green": (i + 1 < self.trunk.len()).then_some(i + 1),
                    "probability": branch.map_or(0.0, |b| b.probability),
                    "costs": { "j1": c.j1, "j2": c.j2, "j3": c.j3, "total": c.total(weights) },
                })
            })
            .collect();
        serde_json::json!({ "expected_cost": self.expected_cost, "nodes": nodes })
    }
}

/// Traces the scenario tree of the uncertain green phase from `start` at `t = 0`.
pub fn trace_scenario_tree(start: VehicleState, bundle: &SolutionBundle, opts: &TraceOptions) -> Result<BranchingTrajectory> {
    let chain = bundle
        .chain
        .as_ref()
        .ok_or_else(|| Error::invalid("distribution", "bundle has no uncertain chain"))?;
    let p = &bundle.config.params;
    let w = &bundle.config.weights;
    start.validate(p)?;
    let probs = chain.distribution.probs();
    let n = probs.len();
    let integ = integrator(bundle, opts, None)?;
    let mut trunk = Vec::with_capacity(n);
    let mut branches = Vec::with_capacity(n);
    let mut x = start;
    let mut t = 0.0;
    let mut prefix = ConstituentCosts::default();
    for i in 0..n {
        let t_i = chain.onset_times[i];
        let mut piece = Trajectory::default();
        let mut pending = Vec::new();
        let mut policy = ChainPolicy { bundle, segment: i };
        let (y, te) = integ.run(&mut piece, x, t, t_i, &[], &mut pending, &mut policy)?;
        finish(&mut piece, y, te, pending);
        prefix = prefix.add(piece.costs());
        let reached = piece.reached_target;
        trunk.push(piece);
        if reached {
            let rest: Vec<usize> = (i..n).collect();
            let probability = rest.iter().map(|&k| probs[k]).sum();
            branches.push(Branch {
                scenarios: rest,
                probability,
                onset: None,
                continuation: Trajectory::default(),
                costs: prefix,
                total_cost: prefix.total(w),
            });
            break;
        }
        let cont = trace_with_onset(y, t_i, t_i, bundle, opts)?;
        let costs = prefix.add(cont.costs());
        branches.push(Branch {
            scenarios: vec![i],
            probability: probs[i],
            onset: Some(t_i),
            continuation: cont,
            costs,
            total_cost: costs.total(w),
        });
        x = y;
        t = t_i;
    }
    let expected_cost = branches.iter().map(|b| b.probability * b.total_cost).sum();
    Ok(BranchingTrajectory {
        trunk,
        branches,
        expected_cost,
    })
}

/// The path realized when the light turns yellow at the `scenario`-th onset,
/// traced from scratch.
pub fn trace_scenario(start: VehicleState, bundle: &SolutionBundle, scenario: usize, opts: &TraceOptions) -> Result<Trajectory> {
    let chain = bundle
        .chain
        .as_ref()
        .ok_or_else(|| Error::invalid("distribution", "bundle has no uncertain chain"))?;
    if scenario >= chain.onset_times.len() {
        return Err(Error::OutOfBounds(format!("scenario {scenario}")));
    }
    let integ = integrator(bundle, opts, None)?;
    let mut traj = Trajectory::default();
    let mut x = start;
    let mut t = 0.0;
    let mut pending = Vec::new();
    for seg in 0..=scenario {
        let mut policy = ChainPolicy { bundle, segment: seg };
        let (y, te) = integ.run(&mut traj, x, t, chain.onset_times[seg], &[], &mut pending, &mut policy)?;
        x = y;
        t = te;
        if traj.reached_target {
            finish(&mut traj, x, t, pending);
            return Ok(traj);
        }
    }
    let t_y = chain.onset_times[scenario];
    finish(&mut traj, x, t, pending);
    let cont = trace_with_onset(x, t_y, t_y, bundle, opts)?;
    traj.extend(&cont);
    Ok(traj)
}

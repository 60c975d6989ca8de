//! Physical model of a single car approaching a signalized intersection.
//!
//! The car travels right to left along a single lane: position `d` decreases
//! toward the target `d_star`, the stop line sits at `d_ell`, and the speed `v`
//! stays in `[0, v_bar]`. Controls are signed accelerations in `[-alpha, beta]`.
//!
//! This module holds the exact dynamics, the running cost, the two constraint
//! curves (the last-resort braking parabola and the beat-the-light curve), the
//! analytic boundary costs along those curves and the arithmetic on the
//! distribution of the remaining green time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Road geometry, speed limit and acceleration bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicalParams {
    /// Target position (m).
    pub d_star: f64,
    /// Start of the road (m).
    pub d_bar: f64,
    /// Position of the stop line (m).
    pub d_ell: f64,
    /// Speed limit (m/s). 20.12 m/s is 45 mph.
    pub v_bar: f64,
    /// Maximal braking magnitude (m/s²).
    pub alpha: f64,
    /// Maximal acceleration (m/s²).
    pub beta: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self {
            d_star: -100.0,
            d_bar: 100.0,
            d_ell: 0.0,
            v_bar: 20.12,
            alpha: 3.8,
            beta: 3.8,
        }
    }
}

impl PhysicalParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.d_star,
            self.d_bar,
            self.d_ell,
            self.v_bar,
            self.alpha,
            self.beta,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("params", "all parameters must be finite"));
        }
        if !(self.d_star < self.d_ell && self.d_ell < self.d_bar) {
            return Err(Error::invalid(
                "params.d_star/d_ell/d_bar",
                format!(
                    "need d_star < d_ell < d_bar, got {} / {} / {}",
                    self.d_star, self.d_ell, self.d_bar
                ),
            ));
        }
        if self.v_bar <= 0.0 {
            return Err(Error::invalid("params.v_bar", "must be positive"));
        }
        if self.alpha <= 0.0 {
            return Err(Error::invalid("params.alpha", "must be positive"));
        }
        if self.beta <= 0.0 {
            return Err(Error::invalid("params.beta", "must be positive"));
        }
        Ok(())
    }

    /// Clamps a raw acceleration into `[-alpha, beta]`.
    pub fn clamp_control(&self, a: f64) -> f64 {
        a.clamp(-self.alpha, self.beta)
    }
}

/// Position and speed of the car.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub d: f64,
    pub v: f64,
}

impl VehicleState {
    pub fn new(d: f64, v: f64) -> Self {
        Self { d, v }
    }

    /// Checks `d_star <= d <= d_bar` and `0 <= v <= v_bar`.
    pub fn validate(&self, params: &PhysicalParams) -> Result<()> {
        if !(self.d.is_finite() && self.v.is_finite()) {
            return Err(Error::invalid("state", "position and speed must be finite"));
        }
        if self.d < params.d_star || self.d > params.d_bar {
            return Err(Error::invalid(
                "state.d",
                format!("{} outside [{}, {}]", self.d, params.d_star, params.d_bar),
            ));
        }
        if self.v < 0.0 || self.v > params.v_bar {
            return Err(Error::invalid(
                "state.v",
                format!("{} outside [0, {}]", self.v, params.v_bar),
            ));
        }
        Ok(())
    }
}

/// A signed acceleration known to lie in `[-alpha, beta]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Control(f64);

impl Control {
    pub fn new(a: f64, params: &PhysicalParams) -> Result<Self> {
        if !a.is_finite() || a < -params.alpha || a > params.beta {
            return Err(Error::invalid(
                "control",
                format!("{a} outside [{}, {}]", -params.alpha, params.beta),
            ));
        }
        Ok(Self(a))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Weights of fuel, discomfort and time in the running cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            c1: 1.0 / 3.0,
            c2: 1.0 / 3.0,
            c3: 1.0 / 3.0,
        }
    }
}

impl CostWeights {
    pub fn new(c1: f64, c2: f64, c3: f64) -> Self {
        Self { c1, c2, c3 }
    }

    /// Nonnegative weights with a strictly positive time weight.
    ///
    /// Without a time cost, resting forever is free and the exit-time value
    /// degenerates.
    pub fn validate(&self) -> Result<()> {
        let w = [self.c1, self.c2, self.c3];
        if w.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::invalid(
                "weights",
                "c1, c2, c3 must be finite and nonnegative",
            ));
        }
        if self.c3 <= 0.0 {
            return Err(Error::invalid(
                "weights.c3",
                "the time weight must be strictly positive",
            ));
        }
        Ok(())
    }

    /// Multiplies every weight by `lambda`.
    pub fn scaled(&self, lambda: f64) -> Self {
        Self::new(self.c1 * lambda, self.c2 * lambda, self.c3 * lambda)
    }

    /// Weights rescaled to sum to one, for display.
    pub fn normalized(&self) -> Self {
        let s = self.c1 + self.c2 + self.c3;
        self.scaled(1.0 / s)
    }

    /// Combines constituent costs into the weighted total.
    pub fn combine(&self, j1: f64, j2: f64, j3: f64) -> f64 {
        self.c1 * j1 + self.c2 * j2 + self.c3 * j3
    }
}

/// Fixed-time signal: green until `t_yellow`, yellow for `d_yellow`, red for `d_red`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalSchedule {
    /// Time the light turns yellow (s).
    pub t_yellow: f64,
    /// Yellow duration (s).
    pub d_yellow: f64,
    /// Red duration (s).
    pub d_red: f64,
}

impl Default for SignalSchedule {
    fn default() -> Self {
        Self {
            t_yellow: 0.0,
            d_yellow: 3.0,
            d_red: 60.0,
        }
    }
}

impl SignalSchedule {
    pub fn new(t_yellow: f64, d_yellow: f64, d_red: f64) -> Result<Self> {
        let s = Self {
            t_yellow,
            d_yellow,
            d_red,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_yellow.is_finite() && self.t_yellow >= 0.0) {
            return Err(Error::invalid("schedule.t_yellow", "must be finite and >= 0"));
        }
        if !(self.d_yellow.is_finite() && self.d_yellow > 0.0) {
            return Err(Error::invalid("schedule.d_yellow", "must be positive"));
        }
        if !(self.d_red.is_finite() && self.d_red > 0.0) {
            return Err(Error::invalid("schedule.d_red", "must be positive"));
        }
        Ok(())
    }

    pub fn t_red(&self) -> f64 {
        self.t_yellow + self.d_yellow
    }

    pub fn t_green(&self) -> f64 {
        self.t_red() + self.d_red
    }

    /// The same durations with a different yellow onset.
    pub fn with_yellow_at(&self, t_yellow: f64) -> Self {
        Self { t_yellow, ..*self }
    }
}

/// Discrete distribution of the remaining green time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreenDurationDistribution {
    times: Vec<f64>,
    probs: Vec<f64>,
}

impl GreenDurationDistribution {
    /// Builds a distribution over remaining green times `T_i`.
    pub fn new(times: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::invalid("distribution.times", "must be nonempty"));
        }
        if times.len() != probs.len() {
            return Err(Error::invalid(
                "distribution.probs",
                format!("{} times but {} probabilities", times.len(), probs.len()),
            ));
        }
        if times.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(Error::invalid("distribution.times", "must be finite and positive"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                "distribution.times",
                "must be strictly increasing",
            ));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("distribution.probs", "must be nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(
                "distribution.probs",
                format!("must sum to 1, got {total}"),
            ));
        }
        Ok(Self { times, probs })
    }

    /// Builds a distribution from green durations `D_i` of which `elapsed`
    /// seconds have already passed, so `T_i = D_i - elapsed`.
    pub fn from_durations(durations: &[f64], elapsed: f64, probs: Vec<f64>) -> Result<Self> {
        if !(elapsed.is_finite() && elapsed >= 0.0) {
            return Err(Error::invalid("distribution.elapsed", "must be finite and >= 0"));
        }
        Self::new(durations.iter().map(|d| d - elapsed).collect(), probs)
    }

    /// A single known yellow onset.
    pub fn point_mass(t: f64) -> Result<Self> {
        Self::new(vec![t], vec![1.0])
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Region of the state space at a given time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Allowed,
    /// Between the stop line and the braking parabola during red.
    DisallowedRed,
    /// Too far to beat the light and too close to stop, during yellow.
    DisallowedYellow,
}

/// Exact state after holding acceleration `a` for `tau` seconds.
pub fn step_dynamics(state: VehicleState, a: Control, tau: f64) -> VehicleState {
    let (d, v) = step(state.d, state.v, a.value(), tau);
    VehicleState { d, v }
}

#[inline]
pub(crate) fn step(d: f64, v: f64, a: f64, tau: f64) -> (f64, f64) {
    (d - v * tau - 0.5 * a * tau * tau, v + a * tau)
}

/// Running cost rate `c1 [a]_+ + c2 a² + c3`.
pub fn running_cost(weights: &CostWeights, a: Control) -> f64 {
    cost_rate(weights, a.value())
}

#[inline]
pub(crate) fn cost_rate(w: &CostWeights, a: f64) -> f64 {
    w.c1 * a.max(0.0) + w.c2 * a * a + w.c3
}

/// Constituent rates `([a]_+, a², 1)` of the running cost.
#[inline]
pub fn constituent_rates(a: f64) -> [f64; 3] {
    [a.max(0.0), a * a, 1.0]
}

/// Position from which braking at `-alpha` stops exactly on the stop line.
#[inline]
pub fn d_alpha(params: &PhysicalParams, v: f64) -> f64 {
    params.d_ell + v * v / (2.0 * params.alpha)
}

/// Speed on the braking parabola at position `d >= d_ell`.
#[inline]
pub(crate) fn d_alpha_speed(params: &PhysicalParams, d: f64) -> f64 {
    (2.0 * params.alpha * (d - params.d_ell)).max(0.0).sqrt()
}

/// Largest position from which full acceleration reaches the stop line
/// before the light turns red.
///
/// Defined for `t` in `[T_Y, T_R)`.
pub fn d_beta(params: &PhysicalParams, v: f64, t: f64, schedule: &SignalSchedule) -> Result<f64> {
    if t < schedule.t_yellow || t >= schedule.t_red() {
        return Err(Error::OutOfBounds(format!(
            "d_beta needs t in [{}, {}), got {t}",
            schedule.t_yellow,
            schedule.t_red()
        )));
    }
    Ok(d_beta_remaining(params, v, schedule.t_red() - t))
}

/// Beat-the-light curve written in terms of the remaining yellow time `s_r`.
#[inline]
pub(crate) fn d_beta_remaining(params: &PhysicalParams, v: f64, s_r: f64) -> f64 {
    let v_c = params.v_bar - params.beta * s_r;
    if v <= v_c {
        params.d_ell + v * s_r + 0.5 * params.beta * s_r * s_r
    } else {
        let s_b = (params.v_bar - v) / params.beta;
        params.d_ell + v * s_b + 0.5 * params.beta * s_b * s_b + params.v_bar * (s_r - s_b)
    }
}

/// Speed at which the beat-the-light curve passes through position `d`.
///
/// Returns `None` when `d` lies outside the curve's range over `[0, v_bar]`.
pub(crate) fn d_beta_speed(params: &PhysicalParams, d: f64, s_r: f64) -> Option<f64> {
    let lo = d_beta_remaining(params, 0.0, s_r);
    let hi = d_beta_remaining(params, params.v_bar, s_r);
    if d < lo || d > hi || s_r <= 0.0 {
        return None;
    }
    let v_c = params.v_bar - params.beta * s_r;
    let d_c = if v_c > 0.0 {
        d_beta_remaining(params, v_c, s_r)
    } else {
        lo
    };
    let v = if v_c > 0.0 && d <= d_c {
        (d - params.d_ell - 0.5 * params.beta * s_r * s_r) / s_r
    } else {
        let slack = params.d_ell + params.v_bar * s_r - d;
        params.v_bar - (2.0 * params.beta * slack.max(0.0)).sqrt()
    };
    Some(v.clamp(0.0, params.v_bar))
}

/// Value along the braking parabola: brake at `-alpha` from `(d_alpha(v), v)`,
/// rest at the stop line, and pay the green-phase value at `T_G`.
///
/// `terminal_value` samples the green-phase value `q` at `T_G`.
pub fn boundary_cost_alpha(
    params: &PhysicalParams,
    v: f64,
    t: f64,
    schedule: &SignalSchedule,
    weights: &CostWeights,
    terminal_value: impl Fn(VehicleState) -> f64,
) -> Result<f64> {
    if t >= schedule.t_green() || t < schedule.t_yellow {
        return Err(Error::OutOfBounds(format!(
            "C_alpha needs t in [{}, {}), got {t}",
            schedule.t_yellow,
            schedule.t_green()
        )));
    }
    Ok(alpha_cost(
        params,
        weights,
        v,
        schedule.t_green() - t,
        terminal_value,
    ))
}

/// `C_alpha` in terms of the time `s_g` left until green.
#[inline]
pub(crate) fn alpha_cost(
    params: &PhysicalParams,
    weights: &CostWeights,
    v: f64,
    s_g: f64,
    terminal_value: impl Fn(VehicleState) -> f64,
) -> f64 {
    let s_a = v / params.alpha;
    let s_hat = s_a.min(s_g);
    let v_end = (v - params.alpha * s_hat).max(0.0);
    let end = VehicleState::new(d_alpha(params, v_end), v_end);
    s_hat * weights.c2 * params.alpha * params.alpha + weights.c3 * s_g + terminal_value(end)
}

/// Value along the beat-the-light curve: accelerate at `beta` up to the speed
/// limit, coast, and pay the red-phase value on the stop line at `T_R`.
///
/// `value_at_red` samples `u(., T_R)`.
pub fn boundary_cost_beta(
    params: &PhysicalParams,
    v: f64,
    t: f64,
    schedule: &SignalSchedule,
    weights: &CostWeights,
    value_at_red: impl Fn(VehicleState) -> f64,
) -> Result<f64> {
    if t < schedule.t_yellow || t >= schedule.t_red() {
        return Err(Error::OutOfBounds(format!(
            "C_beta needs t in [{}, {}), got {t}",
            schedule.t_yellow,
            schedule.t_red()
        )));
    }
    Ok(beta_cost(
        params,
        weights,
        v,
        schedule.t_red() - t,
        value_at_red,
    ))
}

/// `C_beta` in terms of the remaining yellow time `s_r`.
#[inline]
pub(crate) fn beta_cost(
    params: &PhysicalParams,
    weights: &CostWeights,
    v: f64,
    s_r: f64,
    value_at_red: impl Fn(VehicleState) -> f64,
) -> f64 {
    let s_b = ((params.v_bar - v) / params.beta).max(0.0);
    let s_hat = s_b.min(s_r);
    let v_end = (v + params.beta * s_hat).min(params.v_bar);
    let accel = weights.c1 * params.beta + weights.c2 * params.beta * params.beta;
    accel * s_hat + weights.c3 * s_r + value_at_red(VehicleState::new(params.d_ell, v_end))
}

/// Classifies a state at time `t` against the signal schedule.
///
/// The curves themselves are allowed.
pub fn region_membership(
    state: VehicleState,
    t: f64,
    schedule: &SignalSchedule,
    params: &PhysicalParams,
) -> Region {
    let (d, v) = (state.d, state.v);
    if d < params.d_ell {
        return Region::Allowed;
    }
    let da = d_alpha(params, v);
    if t >= schedule.t_red() && t < schedule.t_green() {
        if d < da {
            return Region::DisallowedRed;
        }
    } else if t >= schedule.t_yellow && t < schedule.t_red() {
        let db = d_beta_remaining(params, v, schedule.t_red() - t);
        if d > db && d < da {
            return Region::DisallowedYellow;
        }
    }
    Region::Allowed
}

/// Probability that the light turns yellow at `T_i` given it has stayed green
/// through `T_{i-1}`.
///
/// Scenarios whose remaining mass is zero are unreachable; they get hazard 1 so
/// the last reachable scenario and everything after it collapse onto the same
/// terminal data.
pub fn conditional_hazards(dist: &GreenDurationDistribution) -> Vec<f64> {
    let n = dist.len();
    let mut suffix = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + dist.probs[i];
    }
    (0..n)
        .map(|i| {
            if i + 1 == n || suffix[i] <= 0.0 {
                1.0
            } else {
                (dist.probs[i] / suffix[i]).min(1.0)
            }
        })
        .collect()
}

/// Path probabilities `p_i = h_i * prod_{j<i} (1 - h_j)` rebuilt from hazards.
pub fn probabilities_from_hazards(hazards: &[f64]) -> Vec<f64> {
    let mut survive = 1.0;
    hazards
        .iter()
        .map(|h| {
            let p = h * survive;
            survive *= 1.0 - h;
            p
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> PhysicalParams {
        PhysicalParams::default()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn coasting_moves_by_speed_times_tau() {
        let p = params();
        let s = step_dynamics(VehicleState::new(10.0, 5.0), Control::new(0.0, &p).unwrap(), 1.0);
        assert_eq!(s, VehicleState::new(5.0, 5.0));
    }

    #[test]
    fn accelerating_from_rest() {
        let p = params();
        let s = step_dynamics(VehicleState::new(10.0, 0.0), Control::new(3.8, &p).unwrap(), 1.0);
        assert!(close(s.d, 8.1, 1e-12) && close(s.v, 3.8, 1e-12));
    }

    #[test]
    fn braking_step() {
        let p = params();
        let s = step_dynamics(VehicleState::new(5.0, 5.0), Control::new(-3.8, &p).unwrap(), 1.0);
        assert!(close(s.d, 1.9, 1e-12) && close(s.v, 1.2, 1e-12));
    }

    #[test]
    fn control_rejects_out_of_range() {
        let p = params();
        assert!(Control::new(3.81, &p).is_err());
        assert!(Control::new(-3.81, &p).is_err());
        assert!(Control::new(f64::NAN, &p).is_err());
    }

    #[test]
    fn running_cost_examples() {
        let w = CostWeights::new(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0);
        let p = params();
        let c = |a| running_cost(&w, Control::new(a, &p).unwrap());
        assert!(close(c(0.0), 1.0 / 3.0, 1e-15));
        assert!(close(c(3.8), (3.8 + 14.44 + 1.0) / 3.0, 1e-12));
        assert!(close(c(-3.8), (14.44 + 1.0) / 3.0, 1e-12));
    }

    #[test]
    fn parabola_examples() {
        let p = params();
        assert_eq!(d_alpha(&p, 0.0), 0.0);
        assert!(close(d_alpha(&p, 20.12), 20.12 * 20.12 / 7.6, 1e-12));
        assert!(close(d_alpha(&p, 20.12), 53.264, 2e-3));
        assert!(close(d_alpha(&p, 10.0), 13.158, 1e-3));
        assert!(close(d_alpha_speed(&p, d_alpha(&p, 7.3)), 7.3, 1e-12));
    }

    #[test]
    fn beat_the_light_examples() {
        let p = params();
        let sched = SignalSchedule::default();
        let t = sched.t_red() - 3.0;
        assert!(close(d_beta(&p, 20.12, t, &sched).unwrap(), 60.36, 1e-9));
        assert!(close(d_beta(&p, 0.0, t, &sched).unwrap(), 17.1, 1e-9));
        let near_red = sched.t_red() - 1e-12;
        assert!(close(d_beta(&p, 7.0, near_red, &sched).unwrap(), 0.0, 1e-9));
        assert!(d_beta(&p, 1.0, sched.t_red(), &sched).is_err());
        assert!(d_beta(&p, 1.0, sched.t_yellow - 0.1, &sched).is_err());
    }

    #[test]
    fn beat_the_light_inverse_roundtrip() {
        let p = params();
        for s_r in [0.3, 1.0, 2.2, 3.0, 7.0] {
            for k in 0..=40 {
                let v = p.v_bar * k as f64 / 40.0;
                let d = d_beta_remaining(&p, v, s_r);
                let back = d_beta_speed(&p, d, s_r).unwrap();
                // The curve is flat at the speed limit, so compare positions.
                assert!(close(d_beta_remaining(&p, back, s_r), d, 1e-9), "s_r={s_r} v={v}");
            }
        }
    }

    #[test]
    fn alpha_cost_examples() {
        let p = params();
        let sched = SignalSchedule::default();
        let q = |s: VehicleState| 2.5 + s.v;
        let t = sched.t_green() - 5.0;
        let c = boundary_cost_alpha(&p, 0.0, t, &sched, &CostWeights::new(0.0, 0.0, 1.0), q).unwrap();
        assert!(close(c, 5.0 + 2.5, 1e-12));
        let t = sched.t_green() - 10.0;
        let c = boundary_cost_alpha(&p, 3.8, t, &sched, &CostWeights::new(0.0, 1.0, 0.0), |_| 0.0)
            .unwrap();
        assert!(close(c, 14.44, 1e-12));
        // Braking is truncated at T_G: one second of braking from 7.6 m/s.
        let t = sched.t_green() - 1.0;
        let seen = std::cell::Cell::new(VehicleState::new(0.0, 0.0));
        let c = boundary_cost_alpha(&p, 7.6, t, &sched, &CostWeights::new(0.0, 1.0, 0.0), |s| {
            seen.set(s);
            0.0
        })
        .unwrap();
        assert!(close(c, 14.44, 1e-12));
        assert!(close(seen.get().v, 3.8, 1e-12));
        assert!(close(seen.get().d, d_alpha(&p, 3.8), 1e-12));
        assert!(boundary_cost_alpha(&p, 1.0, sched.t_green(), &sched, &CostWeights::default(), |_| 0.0).is_err());
    }

    #[test]
    fn beta_cost_examples() {
        let p = params();
        let sched = SignalSchedule::default();
        let t = sched.t_red() - 2.0;
        let c = boundary_cost_beta(&p, 20.12, t, &sched, &CostWeights::new(0.0, 0.0, 1.0), |_| 0.0)
            .unwrap();
        assert!(close(c, 2.0, 1e-12));
        let c = boundary_cost_beta(&p, 12.52, t, &sched, &CostWeights::new(1.0, 1.0, 0.0), |_| 0.0)
            .unwrap();
        assert!(close(c, 36.48, 1e-9));
        // Acceleration is cut off when the red arrives first.
        let seen = std::cell::Cell::new(0.0);
        let t = sched.t_red() - 1.0;
        let c = boundary_cost_beta(&p, 0.0, t, &sched, &CostWeights::new(1.0, 0.0, 0.0), |s| {
            seen.set(s.v);
            0.0
        })
        .unwrap();
        assert!(close(c, 3.8, 1e-12));
        assert!(close(seen.get(), 3.8, 1e-12));
    }

    #[test]
    fn region_examples() {
        let p = params();
        let sched = SignalSchedule::new(10.0, 3.0, 60.0).unwrap();
        let red = sched.t_red() + 5.0;
        assert_eq!(region_membership(VehicleState::new(-1.0, 20.0), red, &sched, &p), Region::Allowed);
        assert_eq!(
            region_membership(VehicleState::new(5.0, 20.12), red, &sched, &p),
            Region::DisallowedRed
        );
        assert_eq!(
            region_membership(VehicleState::new(d_alpha(&p, 9.0), 9.0), red, &sched, &p),
            Region::Allowed
        );
        for k in 0..=50 {
            for m in 0..=20 {
                let s = VehicleState::new(100.0 * k as f64 / 50.0, p.v_bar * m as f64 / 20.0);
                assert_eq!(region_membership(s, sched.t_yellow, &sched, &p), Region::Allowed);
            }
        }
        let late_yellow = sched.t_red() - 0.5;
        assert_eq!(
            region_membership(VehicleState::new(20.0, 15.0), late_yellow, &sched, &p),
            Region::DisallowedYellow
        );
    }

    #[test]
    fn hazard_examples() {
        let h = |t: Vec<f64>, p: Vec<f64>| conditional_hazards(&GreenDurationDistribution::new(t, p).unwrap());
        assert_eq!(h(vec![2.0], vec![1.0]), vec![1.0]);
        assert_eq!(h(vec![2.0, 6.0], vec![0.5, 0.5]), vec![0.5, 1.0]);
        let three = h(vec![2.0, 4.0, 6.0], vec![0.25, 0.25, 0.5]);
        assert!(close(three[0], 0.25, 1e-15));
        assert!(close(three[1], 1.0 / 3.0, 1e-15));
        assert_eq!(three[2], 1.0);
        assert_eq!(h(vec![2.0, 6.0], vec![1.0, 0.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn distribution_validation() {
        assert!(GreenDurationDistribution::new(vec![2.0, 1.0], vec![0.5, 0.5]).is_err());
        assert!(GreenDurationDistribution::new(vec![1.0, 2.0], vec![0.5, 0.6]).is_err());
        assert!(GreenDurationDistribution::new(vec![1.0], vec![0.5, 0.5]).is_err());
        assert!(GreenDurationDistribution::new(vec![], vec![]).is_err());
        let d = GreenDurationDistribution::from_durations(&[30.0, 34.0], 28.0, vec![0.5, 0.5]).unwrap();
        assert_eq!(d.times(), &[2.0, 6.0]);
    }

    #[test]
    fn weights_validation() {
        assert!(CostWeights::new(1.0, 1.0, 0.0).validate().is_err());
        assert!(CostWeights::new(-1.0, 1.0, 1.0).validate().is_err());
        assert!(CostWeights::default().validate().is_ok());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn two_half_steps_equal_one_step(
                d in -100.0f64..100.0, v in 0.0f64..20.12, a in -3.8f64..3.8, tau in 0.0f64..2.0
            ) {
                let (d1, v1) = step(d, v, a, tau / 2.0);
                let (d2, v2) = step(d1, v1, a, tau / 2.0);
                let (d3, v3) = step(d, v, a, tau);
                prop_assert!((d2 - d3).abs() <= 1e-12 * (1.0 + d3.abs()));
                prop_assert!((v2 - v3).abs() <= 1e-12 * (1.0 + v3.abs()));
            }

            #[test]
            fn beat_the_light_continuous_at_kink(
                s_r in 0.01f64..5.0, v_bar in 5.0f64..40.0, beta in 0.5f64..6.0, d_ell in -10.0f64..10.0
            ) {
                let p = PhysicalParams { d_star: d_ell - 50.0, d_bar: d_ell + 100.0, d_ell, v_bar, alpha: 3.0, beta };
                let v_c = v_bar - beta * s_r;
                prop_assume!(v_c > 0.0);
                let first = d_ell + v_c * s_r + 0.5 * beta * s_r * s_r;
                let s_b = (v_bar - v_c) / beta;
                let second = d_ell + v_c * s_b + 0.5 * beta * s_b * s_b + v_bar * (s_r - s_b);
                prop_assert!((first - second).abs() <= 1e-12 * first.abs().max(1.0));
                prop_assert!((d_beta_remaining(&p, v_c, s_r) - first).abs() <= 1e-12 * first.abs().max(1.0));
            }

            #[test]
            fn beat_the_light_tends_to_stop_line(v in 0.0f64..20.12, eps_exp in 3i32..12) {
                let p = PhysicalParams::default();
                let s_r = 10f64.powi(-eps_exp);
                prop_assert!((d_beta_remaining(&p, v, s_r) - p.d_ell).abs() <= 30.0 * s_r);
            }

            #[test]
            fn beat_the_light_monotone_in_speed(v in 0.0f64..20.0, dv in 0.0f64..0.12, s_r in 0.0f64..3.0) {
                let p = PhysicalParams::default();
                prop_assert!(d_beta_remaining(&p, v + dv, s_r) >= d_beta_remaining(&p, v, s_r) - 1e-12);
            }

            #[test]
            fn yellow_region_grows_into_red_region(
                d in 0.0f64..100.0, v in 0.0f64..20.12, frac in 0.0f64..1.0
            ) {
                let p = PhysicalParams::default();
                let sched = SignalSchedule::default();
                let t1 = sched.t_yellow + frac * sched.d_yellow;
                let t2 = t1 + (sched.t_red() - t1) * 0.5;
                let s = VehicleState::new(d, v);
                // Disallowed sets grow with time and are contained in the red set.
                if region_membership(s, t1, &sched, &p) == Region::DisallowedYellow {
                    prop_assert_eq!(region_membership(s, t2, &sched, &p), Region::DisallowedYellow);
                    prop_assert_eq!(region_membership(s, sched.t_red(), &sched, &p), Region::DisallowedRed);
                }
            }

            #[test]
            fn hazards_roundtrip(raw in proptest::collection::vec(0.01f64..1.0, 1..6)) {
                let total: f64 = raw.iter().sum();
                let mut probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
                let head: f64 = probs[..probs.len() - 1].iter().sum();
                let last = probs.len() - 1;
                probs[last] = 1.0 - head;
                let times: Vec<f64> = (1..=probs.len()).map(|k| k as f64).collect();
                let dist = GreenDurationDistribution::new(times, probs.clone()).unwrap();
                let back = probabilities_from_hazards(&conditional_hazards(&dist));
                for (a, b) in back.iter().zip(&probs) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }

            #[test]
            fn running_cost_scales_linearly(
                c1 in 0.0f64..5.0, c2 in 0.0f64..5.0, c3 in 0.01f64..5.0, a in -3.8f64..3.8, lambda in 0.1f64..20.0
            ) {
                let w = CostWeights::new(c1, c2, c3);
                let lhs = cost_rate(&w.scaled(lambda), a);
                let rhs = lambda * cost_rate(&w, a);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
            }
        }
    }
}

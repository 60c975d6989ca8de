//! Stage 2: yellow and red phases.
//!
//! Time is measured from the yellow onset, so the same solve serves every
//! onset time. The red phase is marched backward from the green-phase value
//! with the braking parabola as a cut-cell boundary. A ghost copy of the first
//! column past the stop line carries the unconstrained value up to the line,
//! which is what a car crossing exactly at the onset of red pays.
//!
//! The yellow phase uses two passes per slice. The waiting pass covers states
//! on or beyond the parabola and never crosses during yellow. The crossing
//! pass covers states that can still reach the stop line before red, with the
//! beat-the-light curve as a cut-cell boundary, and reads the merged slice so
//! it keeps the option of stopping later. The stored slice is the pointwise
//! minimum of the two.

use rayon::prelude::*;

use super::{control_set, sl_backup, SnappedTimes, SolveConfig};
use crate::error::{Error, Result};
use crate::grid::{
    adaptive_tau, bilinear_at, corner_weights, lerp, BoundaryCurve, CutSampler, GridSpec, PhaseTag,
    TimeDepField, ValueField, CURVE_EPS, INFEASIBLE,
};
use crate::model::{alpha_cost, beta_cost, d_alpha, d_beta_remaining, step, PhysicalParams, VehicleState};

/// Red-phase field plus the ghost column at the stop line.
#[derive(Debug, Clone)]
pub struct RedPhase {
    /// Slices from the onset of red to the onset of green.
    pub field: TimeDepField,
    /// First column at or beyond the stop line.
    pub ghost_col: usize,
    /// Unconstrained values of the ghost column, `(n_v + 1)` per slice.
    pub ghost_values: Vec<f64>,
    pub ghost_feedback: Vec<f32>,
}

/// Yellow-phase fields of both passes and their merge.
#[derive(Debug, Clone)]
pub struct YellowPhase {
    /// Waiting pass, finite on and beyond the braking parabola.
    pub wait: TimeDepField,
    /// Crossing pass, finite on and before the beat-the-light curve.
    pub cross: TimeDepField,
    /// Pointwise minimum with the winning pass's control.
    pub merged: TimeDepField,
}

/// Value and feedback over yellow and red, in time since the yellow onset.
#[derive(Debug, Clone)]
pub struct SignalField {
    pub grid: GridSpec,
    pub times: SnappedTimes,
    pub red: RedPhase,
    pub yellow: YellowPhase,
}

/// Which family of nodes a query may blend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Already past the stop line during red.
    Free,
    /// Stay on or beyond the braking parabola until green.
    Wait,
    /// Cross the stop line before red.
    Cross,
}

/// Quantity read by [`SignalField::sample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Value,
    Feedback,
}

struct Ctx<'a> {
    cfg: &'a SolveConfig,
    q: &'a ValueField,
    times: SnappedTimes,
    row_alpha: Vec<f64>,
}

impl Ctx<'_> {
    fn new<'a>(cfg: &'a SolveConfig, q: &'a ValueField) -> Result<Ctx<'a>> {
        let g = cfg.grid;
        Ok(Ctx {
            cfg,
            q,
            times: SnappedTimes::new(cfg)?,
            row_alpha: (0..=g.n_v).map(|j| d_alpha(&cfg.params, g.v(j))).collect(),
        })
    }

    fn k_total(&self) -> usize {
        self.times.k_yellow + self.times.k_red
    }

    #[inline]
    fn c_alpha(&self, v: f64, s_g: f64) -> f64 {
        let q = self.q;
        alpha_cost(&self.cfg.params, &self.cfg.weights, v, s_g, |y| {
            bilinear_at(&q.grid, &q.values, q.grid.locate(y.d, y.v))
        })
    }

    /// Backup for a node on or beyond the parabola, `s_g` seconds before green.
    fn wait_backup(&self, next: &[f64], i: usize, j: usize, s_g: f64) -> (f64, f64) {
        let cfg = self.cfg;
        let g = &cfg.grid;
        let p = &cfg.params;
        let dt = g.delta_t;
        let (d, v) = (g.d(i), g.v(j));
        let sampler = CutSampler {
            grid: g,
            params: p,
            values: next,
            curve: BoundaryCurve::Parabola,
            row_b: &self.row_alpha,
            boundary_value: |vv: f64| self.c_alpha(vv, s_g - dt),
        };
        sl_backup(
            cfg,
            (i, j),
            control_set(p, g, j),
            |a| adaptive_tau(d, v, a, dt, p),
            |dn, vn, t| {
                if t < dt {
                    self.c_alpha(vn, s_g - t)
                } else {
                    sampler.sample(dn, vn)
                }
            },
        )
    }

    fn free_backup(&self, next: &[f64], i: usize, j: usize) -> (f64, f64) {
        let cfg = self.cfg;
        let g = &cfg.grid;
        sl_backup(
            cfg,
            (i, j),
            control_set(&cfg.params, g, j),
            |_| g.delta_t,
            |dn, vn, _| bilinear_at(g, next, g.locate(dn, vn)),
        )
    }

    /// Unconstrained backup of the ghost node `(ghost_col, j)`.
    fn ghost_backup(&self, next: &[f64], ghost_next: &[f64], ic: usize, j: usize) -> (f64, f64) {
        let cfg = self.cfg;
        let g = &cfg.grid;
        let left = ic - 1;
        let dl = g.d(left);
        sl_backup(
            cfg,
            (ic, j),
            control_set(&cfg.params, g, j),
            |_| g.delta_t,
            |dn, vn, _| {
                let c = g.locate(dn, vn);
                let td = ((dn - dl) / g.delta_d).clamp(0.0, 1.0);
                let lo = lerp(next[g.idx(left, c.j)], ghost_next[c.j], td);
                let hi = lerp(next[g.idx(left, c.j + 1)], ghost_next[c.j + 1], td);
                lerp(lo, hi, c.tv)
            },
        )
    }

    /// Backup for a node that can still beat the light, reading the merged
    /// slice and the beat-the-light curve at the next time level.
    fn cross_backup(
        &self,
        next: &[f64],
        i: usize,
        j: usize,
        curve: BoundaryCurve,
        row_b: &[f64],
        boundary: &dyn Fn(f64) -> f64,
    ) -> (f64, f64) {
        let cfg = self.cfg;
        let g = &cfg.grid;
        let p = &cfg.params;
        let dt = g.delta_t;
        let (d, v) = (g.d(i), g.v(j));
        let (lo, hi) = control_set(p, g, j);
        let feasible = |a: f64| {
            let (dn, vn) = step(d, v, a, dt);
            curve.admits(p, dn, vn)
        };
        if !feasible(hi) {
            return (INFEASIBLE, 0.0);
        }
        // Feasibility is monotone in the control: more acceleration ends both
        // further along and faster.
        let a_min = if feasible(lo) {
            lo
        } else {
            let (mut bad, mut good) = (lo, hi);
            for _ in 0..60 {
                let mid = 0.5 * (bad + good);
                if feasible(mid) {
                    good = mid;
                } else {
                    bad = mid;
                }
            }
            good
        };
        let sampler = CutSampler {
            grid: g,
            params: p,
            values: next,
            curve,
            row_b,
            boundary_value: boundary,
        };
        sl_backup(cfg, (i, j), (a_min, hi), |_| dt, |dn, vn, _| sampler.sample(dn, vn))
    }
}

fn solve_failure(stage: &'static str, k: usize) -> Error {
    Error::Solve {
        stage,
        reason: format!("non-finite value at an allowed node in slice {k}"),
    }
}

/// Marches the red phase backward from the green-phase value at its end.
pub fn solve_red_phase(cfg: &SolveConfig, q: &ValueField) -> Result<RedPhase> {
    cfg.validate()?;
    let ctx = Ctx::new(cfg, q)?;
    let g = cfg.grid;
    let p = &cfg.params;
    let times = ctx.times;
    let n_slices = times.k_red + 1;
    let field_grid = g.with_time(times.d_yellow, times.k_red);
    let mut field = TimeDepField::new(field_grid, PhaseTag::Red);
    let ic = g.first_column_at_or_after(p.d_ell);
    if ic == 0 {
        return Err(Error::invalid("params.d_ell", "the stop line must lie past the first column"));
    }
    let rows = g.n_v + 1;
    let mut ghost_values = vec![INFEASIBLE; n_slices * rows];
    let mut ghost_feedback = vec![0.0f32; n_slices * rows];
    {
        let last = times.k_red;
        let (vals, fb) = field.slice_pair_mut(last);
        vals.copy_from_slice(&q.values);
        for (dst, src) in fb.iter_mut().zip(&q.feedback) {
            *dst = *src as f32;
        }
        for j in 0..rows {
            ghost_values[last * rows + j] = q.get(ic, j);
            ghost_feedback[last * rows + j] = q.feedback[g.idx(ic, j)] as f32;
        }
    }
    let row_len = g.n_d + 1;
    let k_total = ctx.k_total();
    for local in (0..times.k_red).rev() {
        let s_g = (k_total - (times.k_yellow + local)) as f64 * g.delta_t;
        let n = g.nodes();
        let (head, tail) = field.values.split_at_mut((local + 1) * n);
        let out = &mut head[local * n..];
        let next = &tail[..n];
        let fb_out = &mut field.feedback[local * n..(local + 1) * n];
        out.par_chunks_mut(row_len)
            .zip(fb_out.par_chunks_mut(row_len))
            .enumerate()
            .for_each(|(j, (vals, fbs))| {
                for i in 0..row_len {
                    let d = g.d(i);
                    let (val, a) = if d < p.d_ell - CURVE_EPS {
                        ctx.free_backup(next, i, j)
                    } else if d >= ctx.row_alpha[j] - CURVE_EPS {
                        ctx.wait_backup(next, i, j, s_g)
                    } else {
                        (INFEASIBLE, 0.0)
                    };
                    vals[i] = val;
                    fbs[i] = a as f32;
                }
            });
        let (gh_head, gh_tail) = ghost_values.split_at_mut((local + 1) * rows);
        let ghost_next = &gh_tail[..rows];
        let ghost_out = &mut gh_head[local * rows..];
        let ghost_fb = &mut ghost_feedback[local * rows..(local + 1) * rows];
        let out_ref: &[f64] = &field.values[(local + 1) * n..(local + 2) * n];
        for j in 0..rows {
            let (val, a) = ctx.ghost_backup(out_ref, ghost_next, ic, j);
            ghost_out[j] = val;
            ghost_fb[j] = a as f32;
        }
        let slice = field.slice(local);
        let bad = (0..rows).any(|j| {
            (0..row_len).any(|i| {
                let d = g.d(i);
                let allowed = d < p.d_ell - CURVE_EPS || d >= ctx.row_alpha[j] - CURVE_EPS;
                allowed && !slice[g.idx(i, j)].is_finite()
            }) || !ghost_out[j].is_finite()
        });
        if bad {
            return Err(solve_failure("red phase", local));
        }
    }
    Ok(RedPhase {
        field,
        ghost_col: ic,
        ghost_values,
        ghost_feedback,
    })
}

impl RedPhase {
    /// Unconstrained value on the stop line at the onset of red, per speed row.
    pub fn stop_line_values(&self, params: &PhysicalParams) -> Vec<f64> {
        let g = &self.field.grid;
        let ic = self.ghost_col;
        let theta = ((params.d_ell - g.d(ic - 1)) / g.delta_d).clamp(0.0, 1.0);
        let first = self.field.slice(0);
        (0..=g.n_v)
            .map(|j| lerp(first[g.idx(ic - 1, j)], self.ghost_values[j], theta))
            .collect()
    }
}

/// Linear interpolation of a per-row array at speed `v`.
#[inline]
fn row_lerp(grid: &GridSpec, rows: &[f64], v: f64) -> f64 {
    let c = grid.locate(grid.d_origin, v);
    lerp(rows[c.j], rows[c.j + 1], c.tv)
}

/// Solves the yellow phase from the red-phase field at its onset.
pub fn solve_yellow_phase(cfg: &SolveConfig, q: &ValueField, red: &RedPhase) -> Result<YellowPhase> {
    let ctx = Ctx::new(cfg, q)?;
    let g = cfg.grid;
    let p = &cfg.params;
    let times = ctx.times;
    let ky = times.k_yellow;
    let k_total = ctx.k_total();
    let yg = g.with_time(0.0, ky);
    let mut wait = TimeDepField::new(yg, PhaseTag::Yellow);
    let mut cross = TimeDepField::new(yg, PhaseTag::Yellow);
    let mut merged = TimeDepField::new(yg, PhaseTag::Yellow);
    let ic = red.ghost_col;
    let on_line = (g.d(ic) - p.d_ell).abs() <= CURVE_EPS;
    let stop_line = red.stop_line_values(p);
    {
        let rv = red.field.slice(0);
        let rf = red.field.feedback_slice(0);
        for j in 0..=g.n_v {
            for i in 0..=g.n_d {
                let id = g.idx(i, j);
                let d = g.d(i);
                if d >= ctx.row_alpha[j] - CURVE_EPS {
                    wait.values[ky * g.nodes() + id] = rv[id];
                    wait.feedback[ky * g.nodes() + id] = rf[id];
                }
                if d < p.d_ell - CURVE_EPS {
                    cross.values[ky * g.nodes() + id] = rv[id];
                    cross.feedback[ky * g.nodes() + id] = rf[id];
                } else if i == ic && on_line {
                    cross.values[ky * g.nodes() + id] = red.ghost_values[j];
                    cross.feedback[ky * g.nodes() + id] = red.ghost_feedback[j];
                }
            }
        }
        merge_slice(&g, &wait, &cross, &mut merged, ky);
    }
    let row_len = g.n_d + 1;
    let n = g.nodes();
    let line_value = |v: f64| row_lerp(&g, &stop_line, v);
    for k in (0..ky).rev() {
        let s_g = (k_total - k) as f64 * g.delta_t;
        let s_r = (ky - k) as f64 * g.delta_t;
        let s_r_next = (ky - k - 1) as f64 * g.delta_t;
        let curve = if k + 1 == ky {
            BoundaryCurve::StopLine
        } else {
            BoundaryCurve::BeatTheLight { s_r: s_r_next }
        };
        let row_b: Vec<f64> = (0..=g.n_v).map(|j| curve.position(p, g.v(j))).collect();
        let row_now: Vec<f64> = (0..=g.n_v).map(|j| d_beta_remaining(p, g.v(j), s_r)).collect();
        let boundary = |v: f64| beta_cost(p, &cfg.weights, v, s_r_next, |y| line_value(y.v));
        let (w_head, w_tail) = wait.values.split_at_mut((k + 1) * n);
        let wait_next = &w_tail[..n];
        let wait_out = &mut w_head[k * n..];
        let wait_fb = &mut wait.feedback[k * n..(k + 1) * n];
        wait_out
            .par_chunks_mut(row_len)
            .zip(wait_fb.par_chunks_mut(row_len))
            .enumerate()
            .for_each(|(j, (vals, fbs))| {
                for i in 0..row_len {
                    let (val, a) = if g.d(i) >= ctx.row_alpha[j] - CURVE_EPS {
                        ctx.wait_backup(wait_next, i, j, s_g)
                    } else {
                        (INFEASIBLE, 0.0)
                    };
                    vals[i] = val;
                    fbs[i] = a as f32;
                }
            });
        let merged_next = &merged.values[(k + 1) * n..(k + 2) * n];
        let cross_out = &mut cross.values[k * n..(k + 1) * n];
        let cross_fb = &mut cross.feedback[k * n..(k + 1) * n];
        cross_out
            .par_chunks_mut(row_len)
            .zip(cross_fb.par_chunks_mut(row_len))
            .enumerate()
            .for_each(|(j, (vals, fbs))| {
                for i in 0..row_len {
                    let (val, a) = if g.d(i) <= row_now[j] + CURVE_EPS {
                        ctx.cross_backup(merged_next, i, j, curve, &row_b, &boundary)
                    } else {
                        (INFEASIBLE, 0.0)
                    };
                    vals[i] = val;
                    fbs[i] = a as f32;
                }
            });
        merge_slice(&g, &wait, &cross, &mut merged, k);
        let bad = (0..=g.n_v).any(|j| {
            (0..=g.n_d).any(|i| {
                let d = g.d(i);
                let allowed = d >= ctx.row_alpha[j] - CURVE_EPS || d <= row_now[j] + CURVE_EPS;
                allowed && !merged.values[k * n + g.idx(i, j)].is_finite()
            })
        });
        if bad {
            return Err(solve_failure("yellow phase", k));
        }
    }
    Ok(YellowPhase { wait, cross, merged })
}

fn merge_slice(g: &GridSpec, wait: &TimeDepField, cross: &TimeDepField, merged: &mut TimeDepField, k: usize) {
    let n = g.nodes();
    let range = k * n..(k + 1) * n;
    let wv = &wait.values[range.clone()];
    let wf = &wait.feedback[range.clone()];
    let cv = &cross.values[range.clone()];
    let cf = &cross.feedback[range.clone()];
    let (mv, mf) = merged.slice_pair_mut(k);
    for id in 0..n {
        // The crossing pass replaces the waiting value only when strictly better.
        if cv[id] < wv[id] {
            mv[id] = cv[id];
            mf[id] = cf[id];
        } else {
            mv[id] = wv[id];
            mf[id] = wf[id];
        }
    }
}

/// Runs the red phase and then the yellow phase.
pub fn solve_signal_phases(cfg: &SolveConfig, q: &ValueField) -> Result<SignalField> {
    let red = solve_red_phase(cfg, q)?;
    let yellow = solve_yellow_phase(cfg, q, &red)?;
    Ok(SignalField {
        grid: cfg.grid,
        times: SnappedTimes::new(cfg)?,
        red,
        yellow,
    })
}

impl SignalField {
    /// The value at the yellow onset, which is the terminal data of every
    /// uncertain-phase segment.
    pub fn delta(&self) -> &[f64] {
        self.yellow.merged.slice(0)
    }

    /// Length of the slab covered, from yellow onset to green onset (s).
    pub fn horizon(&self) -> f64 {
        self.times.d_yellow + self.times.d_red
    }

    /// Value and feedback of node `(i, j)` at slice `k` (counted from the
    /// yellow onset) for `strategy`, or `None` if the node is not valid for it.
    fn node(&self, params: &PhysicalParams, strategy: Strategy, k: usize, i: usize, j: usize) -> Option<(f64, f64)> {
        let g = &self.grid;
        let ky = self.times.k_yellow;
        let id = g.idx(i, j);
        let d = g.d(i);
        let pick = |f: &TimeDepField, kk: usize| {
            let v = f.slice(kk)[id];
            v.is_finite().then(|| (v, f.feedback_slice(kk)[id] as f64))
        };
        if k < ky {
            match strategy {
                Strategy::Wait => pick(&self.yellow.wait, k),
                Strategy::Cross | Strategy::Free => pick(&self.yellow.cross, k),
            }
        } else {
            let local = k - ky;
            let red = &self.red;
            match strategy {
                Strategy::Free | Strategy::Cross => {
                    if i < red.ghost_col && d < params.d_ell - CURVE_EPS {
                        pick(&red.field, local)
                    } else if i == red.ghost_col {
                        let r = g.n_v + 1;
                        Some((
                            red.ghost_values[local * r + j],
                            red.ghost_feedback[local * r + j] as f64,
                        ))
                    } else {
                        None
                    }
                }
                Strategy::Wait => {
                    if d >= d_alpha(params, g.v(j)) - CURVE_EPS {
                        pick(&red.field, local)
                    } else {
                        None
                    }
                }
            }
        }
    }

    /// Interpolates `what` at state `x`, `s` seconds after the yellow onset,
    /// blending only the nodes valid for `strategy`.
    pub fn sample(&self, params: &PhysicalParams, strategy: Strategy, x: VehicleState, s: f64, what: Quantity) -> Option<f64> {
        let g = &self.grid;
        if !g.contains(x.d, x.v) {
            return None;
        }
        let dt = g.delta_t;
        let ky = self.times.k_yellow;
        let k_total = ky + self.times.k_red;
        let xs = (s / dt).clamp(0.0, k_total as f64);
        // Yellow slabs end at the onset of red; a query exactly there uses red.
        let k = if xs < ky as f64 {
            (xs.floor() as usize).min(ky - 1)
        } else {
            (xs.floor() as usize).min(k_total - 1)
        };
        let w = (xs - k as f64).clamp(0.0, 1.0);
        let c = g.locate(x.d, x.v);
        let blend = |kk: usize| {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (i, j, wt) in corner_weights(c) {
                if wt <= 0.0 {
                    continue;
                }
                if let Some((val, fb)) = self.node(params, strategy, kk, i, j) {
                    acc += wt * if what == Quantity::Value { val } else { fb };
                    wsum += wt;
                }
            }
            (wsum > 1e-14).then(|| acc / wsum)
        };
        match (blend(k), blend(k + 1)) {
            (Some(a), Some(b)) => Some(lerp(a, b, w)),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        }
    }

    /// Strategies admissible at state `x`, `s` seconds after the yellow onset.
    pub fn admissible(&self, params: &PhysicalParams, x: VehicleState, s: f64) -> Vec<Strategy> {
        let mut out = Vec::with_capacity(2);
        if s >= self.times.d_yellow - 1e-12 {
            if x.d < params.d_ell {
                out.push(Strategy::Free);
            } else if x.d >= d_alpha(params, x.v) - CURVE_EPS {
                out.push(Strategy::Wait);
            }
        } else {
            if x.d >= d_alpha(params, x.v) - CURVE_EPS {
                out.push(Strategy::Wait);
            }
            if x.d <= d_beta_remaining(params, x.v, self.times.d_yellow - s) + CURVE_EPS {
                out.push(Strategy::Cross);
            }
        }
        out
    }

    /// Cheapest admissible strategy and its value.
    pub fn best_strategy(&self, params: &PhysicalParams, x: VehicleState, s: f64) -> Option<(Strategy, f64)> {
        let mut best: Option<(Strategy, f64)> = None;
        for st in self.admissible(params, x, s) {
            if let Some(v) = self.sample(params, st, x, s, Quantity::Value) {
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((st, v));
                }
            }
        }
        best
    }

    /// Value at state `x`, `s` seconds after the yellow onset.
    pub fn value_at(&self, params: &PhysicalParams, x: VehicleState, s: f64) -> Result<f64> {
        if s < -1e-12 || s > self.horizon() + 1e-9 {
            return Err(Error::OutOfBounds(format!("relative time {s} outside [0, {}]", self.horizon())));
        }
        Ok(self.best_strategy(params, x, s).map_or(INFEASIBLE, |(_, v)| v))
    }

    /// Value slice and feedback at the slice nearest to relative time `s`.
    pub fn slice_at(&self, s: f64) -> (Vec<f64>, Vec<f64>) {
        let dt = self.grid.delta_t;
        let ky = self.times.k_yellow;
        let k = ((s / dt).round().max(0.0) as usize).min(ky + self.times.k_red);
        if k < ky {
            let f = &self.yellow.merged;
            (f.slice(k).to_vec(), f.feedback_slice(k).iter().map(|&a| a as f64).collect())
        } else {
            let f = &self.red.field;
            (
                f.slice(k - ky).to_vec(),
                f.feedback_slice(k - ky).iter().map(|&a| a as f64).collect(),
            )
        }
    }
}

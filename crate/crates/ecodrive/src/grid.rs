//! Cartesian `(d, v, t)` grids, value storage and interpolation.
//!
//! The spacings are coupled so that one semi-Lagrangian step of any admissible
//! control moves a node by at most one cell in each direction:
//! `dv = v_bar / N_v`, `dt = dv / max(alpha, beta)` and `dd = v_bar * dt`.
//!
//! Two-dimensional arrays are stored row-major over `j` (speed) then `i`
//! (position), so node `(i, j)` lives at `j * (N_d + 1) + i`. Raw dumps
//! ([`write_f64s`]) are little-endian 64-bit floats in that order; the solution
//! bundle file built from them is laid out in `solver::persist`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{d_alpha, d_alpha_speed, d_beta_remaining, d_beta_speed, Control, PhysicalParams, VehicleState};

/// Marker for states that no admissible control can reach or leave.
pub const INFEASIBLE: f64 = f64::INFINITY;

/// Distance below which a point counts as lying on a constraint curve.
pub const CURVE_EPS: f64 = 1e-9;

/// Spacing and extent of a `(d, v, t)` grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Number of position cells; positions are `d_star + i * delta_d` for `i` in `0..=n_d`.
    pub n_d: usize,
    /// Number of speed cells; speeds are `j * delta_v` for `j` in `0..=n_v`.
    pub n_v: usize,
    /// Number of time steps; times are `t_start + k * delta_t` for `k` in `0..=n_t`.
    pub n_t: usize,
    pub delta_d: f64,
    pub delta_v: f64,
    pub delta_t: f64,
    pub d_origin: f64,
    pub t_start: f64,
}

/// Builds the coupled grid covering `[d_star, d_bar] x [0, v_bar]` and
/// `horizon` seconds starting at `t_start`.
///
/// `N_d` is rounded up, so the last column may sit slightly past `d_bar`.
pub fn build_grid(params: &PhysicalParams, n_v: usize, horizon: f64, t_start: f64) -> Result<GridSpec> {
    params.validate()?;
    if n_v < 2 {
        return Err(Error::invalid("grid.n_v", "need at least 2 speed cells"));
    }
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::invalid("grid.horizon", "must be positive"));
    }
    if !t_start.is_finite() {
        return Err(Error::invalid("grid.t_start", "must be finite"));
    }
    let delta_v = params.v_bar / n_v as f64;
    let delta_t = delta_v / params.alpha.max(params.beta);
    let delta_d = params.v_bar * delta_t;
    let length = params.d_bar - params.d_star;
    // Guard against the ratio landing a hair above an integer.
    let n_d = ((length / delta_d) - 1e-9).ceil().max(1.0) as usize;
    let n_t = ((horizon / delta_t).round() as usize).max(1);
    Ok(GridSpec {
        n_d,
        n_v,
        n_t,
        delta_d,
        delta_v,
        delta_t,
        d_origin: params.d_star,
        t_start,
    })
}

/// Location of a point inside a cell: lower corner and fractional offsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellPos {
    pub i: usize,
    pub j: usize,
    pub td: f64,
    pub tv: f64,
}

impl GridSpec {
    #[inline]
    pub fn d(&self, i: usize) -> f64 {
        self.d_origin + i as f64 * self.delta_d
    }

    #[inline]
    pub fn v(&self, j: usize) -> f64 {
        j as f64 * self.delta_v
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.delta_t
    }

    /// Nodes per `(d, v)` slice.
    #[inline]
    pub fn nodes(&self) -> usize {
        (self.n_d + 1) * (self.n_v + 1)
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * (self.n_d + 1) + i
    }

    /// Largest position covered by the grid.
    pub fn d_max(&self) -> f64 {
        self.d(self.n_d)
    }

    pub fn v_max(&self) -> f64 {
        self.v(self.n_v)
    }

    /// Index of the first column at or beyond `d`.
    pub fn first_column_at_or_after(&self, d: f64) -> usize {
        let x = (d - self.d_origin) / self.delta_d;
        (x - 1e-12).ceil().clamp(0.0, self.n_d as f64) as usize
    }

    /// Nearest slice index to time `t`.
    pub fn nearest_slice(&self, t: f64) -> usize {
        (((t - self.t_start) / self.delta_t).round().max(0.0) as usize).min(self.n_t)
    }

    /// Same spatial grid with a different time slab.
    pub fn with_time(&self, t_start: f64, n_t: usize) -> Self {
        Self {
            t_start,
            n_t,
            ..*self
        }
    }

    /// Whether `(d, v)` lies in the spatial box, allowing a tiny overshoot.
    pub fn contains(&self, d: f64, v: f64) -> bool {
        let tol = 1e-9;
        d >= self.d_origin - tol && d <= self.d_max() + tol && v >= -tol && v <= self.v_max() + tol
    }

    /// Cell containing `(d, v)`, clamping points on the outer boundary into
    /// the last cell.
    #[inline]
    pub fn locate(&self, d: f64, v: f64) -> CellPos {
        let x = snap((d - self.d_origin) / self.delta_d);
        let y = snap(v / self.delta_v);
        let i = (x.floor().max(0.0) as usize).min(self.n_d - 1);
        let j = (y.floor().max(0.0) as usize).min(self.n_v - 1);
        CellPos {
            i,
            j,
            td: (x - i as f64).clamp(0.0, 1.0),
            tv: (y - j as f64).clamp(0.0, 1.0),
        }
    }
}

/// Rounds coordinates within rounding noise of a grid line onto it.
#[inline]
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Linear interpolation that never multiplies a zero weight into an infinite value.
#[inline]
pub fn lerp(a: f64, b: f64, w: f64) -> f64 {
    if w <= 0.0 {
        a
    } else if w >= 1.0 {
        b
    } else {
        (1.0 - w) * a + w * b
    }
}

#[inline]
pub(crate) fn bilinear_at(grid: &GridSpec, values: &[f64], c: CellPos) -> f64 {
    let n = grid.n_d + 1;
    let base = c.j * n + c.i;
    let lo = lerp(values[base], values[base + 1], c.td);
    let hi = lerp(values[base + n], values[base + n + 1], c.td);
    lerp(lo, hi, c.tv)
}

/// Bilinear interpolation of a nodal array at `x`.
///
/// The weights are nonnegative and sum to one; points outside the grid are an
/// error rather than an extrapolation.
pub fn bilinear_sample(grid: &GridSpec, values: &[f64], x: VehicleState) -> Result<f64> {
    if !grid.contains(x.d, x.v) {
        return Err(Error::OutOfBounds(format!(
            "({}, {}) outside [{}, {}] x [0, {}]",
            x.d,
            x.v,
            grid.d_origin,
            grid.d_max(),
            grid.v_max()
        )));
    }
    Ok(bilinear_at(grid, values, grid.locate(x.d, x.v)))
}

/// Corner nodes of the cell at `c` with their bilinear weights.
#[inline]
pub(crate) fn corner_weights(c: CellPos) -> [(usize, usize, f64); 4] {
    [
        (c.i, c.j, (1.0 - c.td) * (1.0 - c.tv)),
        (c.i + 1, c.j, c.td * (1.0 - c.tv)),
        (c.i, c.j + 1, (1.0 - c.td) * c.tv),
        (c.i + 1, c.j + 1, c.td * c.tv),
    ]
}

/// Stationary value function with its feedback control.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub feedback: Vec<f64>,
}

impl ValueField {
    pub fn value_at(&self, x: VehicleState) -> Result<f64> {
        bilinear_sample(&self.grid, &self.values, x)
    }

    pub fn feedback_at(&self, x: VehicleState) -> Result<f64> {
        bilinear_sample(&self.grid, &self.feedback, x)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }
}

/// Which part of the signal cycle a time-dependent field covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseTag {
    /// Green with an unknown remaining duration, segment `i` (zero based).
    Uncertain(usize),
    Yellow,
    Red,
}

/// Values and feedback controls on a sequence of time slices.
///
/// Feedback is kept in single precision to halve the footprint of long red
/// phases; values stay in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeDepField {
    pub grid: GridSpec,
    pub phase: PhaseTag,
    pub values: Vec<f64>,
    pub feedback: Vec<f32>,
}

impl TimeDepField {
    /// A field of `grid.n_t + 1` slices filled with the infeasible marker.
    pub fn new(grid: GridSpec, phase: PhaseTag) -> Self {
        let len = grid.nodes() * (grid.n_t + 1);
        Self {
            grid,
            phase,
            values: vec![INFEASIBLE; len],
            feedback: vec![0.0; len],
        }
    }

    pub fn slices(&self) -> usize {
        self.grid.n_t + 1
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.grid.nodes();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.grid.nodes();
        &mut self.values[k * n..(k + 1) * n]
    }

    pub fn feedback_slice(&self, k: usize) -> &[f32] {
        let n = self.grid.nodes();
        &self.feedback[k * n..(k + 1) * n]
    }

    /// Mutable value and feedback arrays of slice `k`.
    pub fn slice_pair_mut(&mut self, k: usize) -> (&mut [f64], &mut [f32]) {
        let n = self.grid.nodes();
        (
            &mut self.values[k * n..(k + 1) * n],
            &mut self.feedback[k * n..(k + 1) * n],
        )
    }

    /// Time index of the slab containing `t` and the fractional offset.
    pub fn locate_time(&self, t: f64) -> Result<(usize, f64)> {
        let g = &self.grid;
        let x = (t - g.t_start) / g.delta_t;
        if x < -1e-9 || x > g.n_t as f64 + 1e-9 {
            return Err(Error::OutOfBounds(format!(
                "t={t} outside [{}, {}]",
                g.t_start,
                g.t(g.n_t)
            )));
        }
        let k = (x.floor().max(0.0) as usize).min(g.n_t.saturating_sub(1));
        Ok((k, (x - k as f64).clamp(0.0, 1.0)))
    }

    /// Trilinear value interpolation restricted to finite nodes.
    pub fn value_at(&self, x: VehicleState, t: f64) -> Result<f64> {
        let (k, w) = self.locate_time(t)?;
        let c = self.checked_cell(x)?;
        let a = masked_blend(&self.grid, self.slice(k), c, |v| v.is_finite());
        if self.grid.n_t == 0 {
            return Ok(a.unwrap_or(INFEASIBLE));
        }
        let b = masked_blend(&self.grid, self.slice(k + 1), c, |v| v.is_finite());
        Ok(match (a, b) {
            (Some(a), Some(b)) => lerp(a, b, w),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => INFEASIBLE,
        })
    }

    /// Trilinear interpolation of the stored feedback, clamped to the control bounds.
    ///
    /// Nodes whose value is infeasible are dropped and the remaining weights are
    /// renormalized.
    pub fn feedback_sample(&self, x: VehicleState, t: f64, params: &PhysicalParams) -> Result<Control> {
        self.feedback_sample_where(x, t, params, |_, _, v| v.is_finite())
    }

    /// Feedback interpolation over the nodes accepted by `valid(i, j, value)`.
    pub fn feedback_sample_where(
        &self,
        x: VehicleState,
        t: f64,
        params: &PhysicalParams,
        valid: impl Fn(usize, usize, f64) -> bool,
    ) -> Result<Control> {
        let (k, w) = self.locate_time(t)?;
        let c = self.checked_cell(x)?;
        let pick = |kk: usize| -> Option<f64> {
            let vals = self.slice(kk);
            let fb = self.feedback_slice(kk);
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (i, j, wt) in corner_weights(c) {
                let id = self.grid.idx(i, j);
                if wt > 0.0 && valid(i, j, vals[id]) {
                    acc += wt * fb[id] as f64;
                    wsum += wt;
                }
            }
            (wsum > 1e-14).then(|| acc / wsum)
        };
        let a0 = pick(k);
        let a1 = if self.grid.n_t > 0 { pick(k + 1) } else { None };
        let a = match (a0, a1) {
            (Some(a), Some(b)) => lerp(a, b, w),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => {
                return Err(Error::OutOfBounds(format!(
                    "no valid feedback nodes around ({}, {}) at t={t}",
                    x.d, x.v
                )))
            }
        };
        Control::new(params.clamp_control(a), params)
    }

    fn checked_cell(&self, x: VehicleState) -> Result<CellPos> {
        if !self.grid.contains(x.d, x.v) {
            return Err(Error::OutOfBounds(format!("({}, {}) outside grid", x.d, x.v)));
        }
        Ok(self.grid.locate(x.d, x.v))
    }
}

/// Weighted average of the cell corners accepted by `keep`, renormalized.
pub(crate) fn masked_blend(grid: &GridSpec, values: &[f64], c: CellPos, keep: impl Fn(f64) -> bool) -> Option<f64> {
    let mut acc = 0.0;
    let mut wsum = 0.0;
    for (i, j, wt) in corner_weights(c) {
        let v = values[grid.idx(i, j)];
        if wt > 0.0 && keep(v) {
            acc += wt * v;
            wsum += wt;
        }
    }
    (wsum > 1e-14).then(|| acc / wsum)
}

/// Largest `tau` in `[0, delta_t]` for which holding `a` keeps the car on or
/// beyond the braking parabola.
///
/// Full braking slides along the parabola and always returns `delta_t`.
/// A state already on the parabola returns 0 for every weaker control.
pub fn adaptive_step_to_parabola(state: VehicleState, a: Control, delta_t: f64, params: &PhysicalParams) -> f64 {
    adaptive_tau(state.d, state.v, a.value(), delta_t, params)
}

#[inline]
pub(crate) fn adaptive_tau(d: f64, v: f64, a: f64, delta_t: f64, params: &PhysicalParams) -> f64 {
    if a <= -params.alpha {
        return delta_t;
    }
    // Along the step the gap to the parabola is g0 - (1 + a/alpha) * s(tau),
    // with s the distance travelled.
    let g0 = d - d_alpha(params, v);
    let reach = g0 / (1.0 + a / params.alpha);
    if reach <= 0.0 {
        return if v <= 0.0 && a <= 0.0 { delta_t } else { 0.0 };
    }
    let disc = v * v + 2.0 * a * reach;
    if disc < 0.0 {
        return delta_t;
    }
    let denom = v + disc.sqrt();
    if denom <= 0.0 {
        return delta_t;
    }
    (2.0 * reach / denom).min(delta_t)
}

/// Constraint curve `d = b(v)` used by the cut-cell reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BoundaryCurve {
    /// The last-resort braking parabola; the allowed side is `d >= b(v)`.
    Parabola,
    /// The beat-the-light curve with `s_r` seconds of yellow left; the
    /// allowed side is `d <= b(v)`.
    BeatTheLight { s_r: f64 },
    /// The vertical line `d = d_ell` the beat-the-light curve collapses to at
    /// the onset of red; the allowed side is `d <= d_ell`.
    StopLine,
}

/// Which side of a curve is feasible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// Feasible points satisfy `d >= b(v)`.
    Right,
    /// Feasible points satisfy `d <= b(v)`.
    Left,
}

impl BoundaryCurve {
    #[inline]
    pub fn position(&self, params: &PhysicalParams, v: f64) -> f64 {
        match *self {
            BoundaryCurve::Parabola => d_alpha(params, v),
            BoundaryCurve::BeatTheLight { s_r } => d_beta_remaining(params, v, s_r),
            BoundaryCurve::StopLine => params.d_ell,
        }
    }

    /// Speed at which the curve crosses position `d`, if it does.
    #[inline]
    pub fn speed_at(&self, params: &PhysicalParams, d: f64) -> Option<f64> {
        match *self {
            BoundaryCurve::Parabola => (d >= params.d_ell).then(|| d_alpha_speed(params, d)),
            BoundaryCurve::BeatTheLight { s_r } => d_beta_speed(params, d, s_r),
            BoundaryCurve::StopLine => None,
        }
    }

    pub fn side(&self) -> Side {
        match self {
            BoundaryCurve::Parabola => Side::Right,
            _ => Side::Left,
        }
    }

    /// Whether position `d` at speed `v` is on the feasible side (curve included).
    #[inline]
    pub fn admits(&self, params: &PhysicalParams, d: f64, v: f64) -> bool {
        let b = self.position(params, v);
        match self.side() {
            Side::Right => d >= b - CURVE_EPS,
            Side::Left => d <= b + CURVE_EPS,
        }
    }
}

/// Edge of a grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellEdge {
    /// `v = v_j`, running from `d_i` to `d_{i+1}`.
    Bottom,
    /// `v = v_{j+1}`.
    Top,
    /// `d = d_i`, running from `v_j` to `v_{j+1}`.
    Left,
    /// `d = d_{i+1}`.
    Right,
}

/// Intersection of a curve with a cell edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgePoint {
    pub edge: CellEdge,
    /// Position along the edge in `[0, 1]`.
    pub param: f64,
    pub d: f64,
    pub v: f64,
    /// Boundary value carried by the point.
    pub value: f64,
}

/// A cell crossed by a constraint curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutCell {
    pub i: usize,
    pub j: usize,
    pub curve: BoundaryCurve,
    pub points: Vec<EdgePoint>,
}

/// Intersections of `curve` with the edges of cell `(i, j)`, each carrying
/// `boundary_value(v)`.
pub fn cut_cell_boundary_points(
    grid: &GridSpec,
    params: &PhysicalParams,
    cell: (usize, usize),
    curve: BoundaryCurve,
    boundary_value: impl Fn(f64) -> f64,
) -> Result<CutCell> {
    let (i, j) = cell;
    if i >= grid.n_d || j >= grid.n_v {
        return Err(Error::OutOfBounds(format!("cell ({i}, {j}) outside grid")));
    }
    let (dl, dr) = (grid.d(i), grid.d(i + 1));
    let (v0, v1) = (grid.v(j), grid.v(j + 1));
    let mut points: Vec<EdgePoint> = Vec::new();
    let mut push = |edge, param: f64, d: f64, v: f64| {
        if points
            .iter()
            .any(|p: &EdgePoint| (p.d - d).abs() < 1e-10 && (p.v - v).abs() < 1e-10)
        {
            return;
        }
        points.push(EdgePoint {
            edge,
            param,
            d,
            v,
            value: boundary_value(v),
        });
    };
    for (edge, v) in [(CellEdge::Bottom, v0), (CellEdge::Top, v1)] {
        let b = curve.position(params, v);
        if b >= dl - 1e-12 && b <= dr + 1e-12 {
            let b = b.clamp(dl, dr);
            push(edge, (b - dl) / (dr - dl), b, v);
        }
    }
    for (edge, d) in [(CellEdge::Left, dl), (CellEdge::Right, dr)] {
        if let Some(v) = curve.speed_at(params, d) {
            if v >= v0 - 1e-12 && v <= v1 + 1e-12 {
                let v = v.clamp(v0, v1);
                push(edge, (v - v0) / (v1 - v0), d, v);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::invalid(
            "cell",
            format!("cell ({i}, {j}) is not intersected by {curve:?}"),
        ));
    }
    Ok(CutCell { i, j, curve, points })
}

/// Interpolates a slice on the feasible side of a constraint curve.
///
/// Corners on the infeasible side are replaced by points on the curve that
/// carry the analytic boundary value. The reconstruction first interpolates
/// along the two vertical cell edges, then along the horizontal line through
/// the query, where the curve point takes the place of an infeasible edge.
/// Weights stay nonnegative and sum to one, and a cell with no infeasible
/// corner reduces to plain bilinear interpolation.
pub(crate) struct CutSampler<'a, C: Fn(f64) -> f64> {
    pub grid: &'a GridSpec,
    pub params: &'a PhysicalParams,
    pub values: &'a [f64],
    pub curve: BoundaryCurve,
    /// `b(v_j)` for every row `j`.
    pub row_b: &'a [f64],
    pub boundary_value: C,
}

impl<C: Fn(f64) -> f64> CutSampler<'_, C> {
    #[inline]
    pub fn sample(&self, d: f64, v: f64) -> f64 {
        let g = self.grid;
        let c = g.locate(d, v);
        let (i0, j0) = (c.i, c.j);
        let (i1, j1) = (i0 + 1, j0 + 1);
        let bq = self.curve.position(self.params, v);
        match self.curve.side() {
            Side::Right => {
                if d < bq - CURVE_EPS {
                    return INFEASIBLE;
                }
                if d <= bq + CURVE_EPS {
                    return (self.boundary_value)(v);
                }
                let dl = g.d(i0);
                if dl >= self.row_b[j1] - CURVE_EPS {
                    return bilinear_at(g, self.values, c);
                }
                let dr = g.d(i1);
                let (xl, fl) = if bq > dl {
                    (bq, (self.boundary_value)(v))
                } else {
                    (dl, self.edge(i0, j0, v))
                };
                let fr = self.edge(i1, j0, v);
                span(xl, fl, dr, fr, d)
            }
            Side::Left => {
                if d > bq + CURVE_EPS {
                    return INFEASIBLE;
                }
                if d >= bq - CURVE_EPS {
                    return (self.boundary_value)(v);
                }
                let dr = g.d(i1);
                if dr <= self.row_b[j0] + CURVE_EPS {
                    return bilinear_at(g, self.values, c);
                }
                let dl = g.d(i0);
                let (xr, fr) = if bq < dr {
                    (bq, (self.boundary_value)(v))
                } else {
                    (dr, self.edge(i1, j0, v))
                };
                let fl = self.edge(i0, j0, v);
                span(dl, fl, xr, fr, d)
            }
        }
    }

    /// Value at speed `v` along the vertical edge through column `i`, using
    /// the curve crossing in place of an infeasible end node.
    #[inline]
    fn edge(&self, i: usize, j0: usize, v: f64) -> f64 {
        let g = self.grid;
        let dcol = g.d(i);
        let (v0, v1) = (g.v(j0), g.v(j0 + 1));
        let f0 = self.values[g.idx(i, j0)];
        let f1 = self.values[g.idx(i, j0 + 1)];
        let (ok0, ok1) = match self.curve.side() {
            Side::Right => (
                dcol >= self.row_b[j0] - CURVE_EPS,
                dcol >= self.row_b[j0 + 1] - CURVE_EPS,
            ),
            Side::Left => (
                dcol <= self.row_b[j0] + CURVE_EPS,
                dcol <= self.row_b[j0 + 1] + CURVE_EPS,
            ),
        };
        match (ok0, ok1) {
            (true, true) => lerp(f0, f1, (v - v0) / (v1 - v0)),
            (true, false) => match self.curve.speed_at(self.params, dcol) {
                Some(vs) if vs > v0 + 1e-14 => {
                    let vs = vs.min(v1);
                    lerp(f0, (self.boundary_value)(vs), ((v - v0) / (vs - v0)).min(1.0))
                }
                _ => f0,
            },
            (false, true) => match self.curve.speed_at(self.params, dcol) {
                Some(vs) if vs < v1 - 1e-14 => {
                    let vs = vs.max(v0);
                    lerp((self.boundary_value)(vs), f1, ((v - vs) / (v1 - vs)).max(0.0))
                }
                _ => f1,
            },
            (false, false) => (self.boundary_value)(v),
        }
    }
}

#[inline]
fn span(xl: f64, fl: f64, xr: f64, fr: f64, x: f64) -> f64 {
    let w = xr - xl;
    if w <= 1e-14 {
        return if x - xl < xr - x { fl } else { fr };
    }
    lerp(fl, fr, ((x - xl) / w).clamp(0.0, 1.0))
}

/// Writes a `(d, v)` slice as CSV with columns `d, v, value, feedback`.
///
/// Infeasible nodes are written with the literal `INF`.
pub fn write_slice_csv(
    out: &mut impl Write,
    grid: &GridSpec,
    values: &[f64],
    feedback: impl Fn(usize) -> f64,
) -> Result<()> {
    writeln!(out, "d,v,value,feedback")?;
    for j in 0..=grid.n_v {
        for i in 0..=grid.n_d {
            let id = grid.idx(i, j);
            let val = values[id];
            if val.is_finite() {
                writeln!(out, "{},{},{},{}", grid.d(i), grid.v(j), val, feedback(id))?;
            } else {
                writeln!(out, "{},{},INF,INF", grid.d(i), grid.v(j))?;
            }
        }
    }
    Ok(())
}

/// Appends an array of little-endian 64-bit floats.
pub fn write_f64s(out: &mut impl Write, data: impl IntoIterator<Item = f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * 4096);
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
        if buf.len() >= 8 * 4096 {
            out.write_all(&buf)?;
            buf.clear();
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads `n` little-endian 64-bit floats.
pub fn read_f64s(input: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    input.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::step;

    fn reference_grid(n_v: usize) -> GridSpec {
        build_grid(&PhysicalParams::default(), n_v, 1.0, 0.0).unwrap()
    }

    #[test]
    fn unit_grid() {
        let p = PhysicalParams {
            d_star: -2.0,
            d_bar: 2.0,
            d_ell: 0.0,
            v_bar: 2.0,
            alpha: 1.0,
            beta: 1.0,
        };
        let g = build_grid(&p, 2, 3.0, 0.0).unwrap();
        assert_eq!((g.delta_v, g.delta_t, g.delta_d), (1.0, 1.0, 2.0));
        assert_eq!(g.n_d, 2);
        assert_eq!(g.n_t, 3);
    }

    #[test]
    fn default_spacings() {
        let g = reference_grid(180);
        assert!((g.delta_v - 0.111_78).abs() < 1e-5);
        assert!((g.delta_t - 0.029_415).abs() < 1e-6);
        assert!((g.delta_d - 0.591_83).abs() < 1e-5);
        assert_eq!(g.n_d, 338);
        // The coupling identities hold exactly as stored.
        assert_eq!(g.delta_d, 20.12 * g.delta_t);
        assert_eq!(g.delta_t, g.delta_v / 3.8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = PhysicalParams::default();
        assert!(build_grid(&p, 1, 1.0, 0.0).is_err());
        assert!(build_grid(&p, 10, 0.0, 0.0).is_err());
        assert!(build_grid(&p, 10, -1.0, 0.0).is_err());
    }

    #[test]
    fn one_step_stays_within_one_cell() {
        let p = PhysicalParams {
            alpha: 3.0,
            ..PhysicalParams::default()
        };
        let g = build_grid(&p, 12, 1.0, 0.0).unwrap();
        for j in 0..=g.n_v {
            for i in 1..=g.n_d {
                for m in 0..=16 {
                    let a = -p.alpha + (p.alpha + p.beta) * m as f64 / 16.0;
                    for q in 1..=4 {
                        let tau = g.delta_t * q as f64 / 4.0;
                        let (d, v) = step(g.d(i), g.v(j), a, tau);
                        if v < -1e-12 || v > p.v_bar + 1e-12 {
                            // Excluded by the node's control set.
                            continue;
                        }
                        assert!(d >= g.d(i - 1) - 1e-9 && d <= g.d(i) + 1e-12);
                        assert!((v - g.v(j)).abs() <= g.delta_v + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn bilinear_identities() {
        let g = reference_grid(20);
        let vals: Vec<f64> = (0..g.nodes()).map(|k| (k as f64 * 0.37).sin()).collect();
        let x = VehicleState::new(g.d(5), g.v(7));
        assert_eq!(bilinear_sample(&g, &vals, x).unwrap(), vals[g.idx(5, 7)]);
        let mid = VehicleState::new(g.d(5) + 0.5 * g.delta_d, g.v(7) + 0.5 * g.delta_v);
        let mean = (vals[g.idx(5, 7)] + vals[g.idx(6, 7)] + vals[g.idx(5, 8)] + vals[g.idx(6, 8)]) / 4.0;
        assert!((bilinear_sample(&g, &vals, mid).unwrap() - mean).abs() < 1e-12);
        assert!(bilinear_sample(&g, &vals, VehicleState::new(g.d_max() + 1.0, 0.0)).is_err());
        assert!(bilinear_sample(&g, &vals, VehicleState::new(0.0, -0.5)).is_err());
    }

    #[test]
    fn cut_cell_examples() {
        let p = PhysicalParams::default();
        let g = reference_grid(180);
        let c = g.locate(13.158, 10.0);
        let cut = cut_cell_boundary_points(&g, &p, (c.i, c.j), BoundaryCurve::Parabola, |v| v).unwrap();
        assert!(!cut.points.is_empty() && cut.points.len() <= 2);
        for pt in &cut.points {
            assert!((pt.d - d_alpha(&p, pt.v)).abs() < 1e-9);
            assert_eq!(pt.value, pt.v);
        }
        // Far from the curve nothing is cut.
        assert!(cut_cell_boundary_points(&g, &p, (5, 5), BoundaryCurve::Parabola, |v| v).is_err());
        // At the onset of red the curve is the stop line.
        let s = BoundaryCurve::BeatTheLight { s_r: 0.0 };
        for v in [0.0, 5.0, 20.12] {
            assert!((s.position(&p, v) - p.d_ell).abs() < 1e-12);
        }
    }

    #[test]
    fn cut_cell_points_for_curve_through_corners() {
        // With alpha = 0.5 the parabola is d = v^2; it passes through the
        // corner (1, 1) of cell (5, 1) and leaves through its right edge at v = sqrt(2).
        let p = PhysicalParams {
            d_star: -4.0,
            d_bar: 8.0,
            d_ell: 0.0,
            v_bar: 4.0,
            alpha: 0.5,
            beta: 4.0,
        };
        let g = build_grid(&p, 4, 1.0, 0.0).unwrap();
        assert_eq!(g.delta_d, 1.0);
        let cut = cut_cell_boundary_points(&g, &p, (5, 1), BoundaryCurve::Parabola, |_| 0.0).unwrap();
        assert!(cut.points.iter().all(|pt| (pt.d - pt.v * pt.v).abs() < 1e-9));
        assert_eq!(cut.points.len(), 2);
        assert!(cut.points.iter().any(|pt| pt.d == 1.0 && pt.v == 1.0));
        assert!(cut.points.iter().any(|pt| pt.edge == CellEdge::Right && (pt.v - 2f64.sqrt()).abs() < 1e-12));
    }

    #[test]
    fn adaptive_step_examples() {
        let p = PhysicalParams::default();
        let dt = 0.03;
        let far = VehicleState::new(90.0, 5.0);
        for a in [-3.8, 0.0, 3.8] {
            assert_eq!(adaptive_step_to_parabola(far, Control::new(a, &p).unwrap(), dt, &p), dt);
        }
        let on = VehicleState::new(d_alpha(&p, 10.0), 10.0);
        assert_eq!(adaptive_step_to_parabola(on, Control::new(-3.8, &p).unwrap(), dt, &p), dt);
        assert_eq!(adaptive_step_to_parabola(on, Control::new(0.0, &p).unwrap(), dt, &p), 0.0);
    }

    fn check_cut_weights(curve: BoundaryCurve, params: &PhysicalParams, grid: &GridSpec) {
        // Reproduces the linear function f(d, v) = 2d + 3v when boundary values are consistent.
        let f = |d: f64, v: f64| 2.0 * d + 3.0 * v;
        let row_b: Vec<f64> = (0..=grid.n_v).map(|j| curve.position(params, grid.v(j))).collect();
        let vals: Vec<f64> = (0..grid.nodes())
            .map(|id| {
                let (i, j) = (id % (grid.n_d + 1), id / (grid.n_d + 1));
                if curve.admits(params, grid.d(i), grid.v(j)) {
                    f(grid.d(i), grid.v(j))
                } else {
                    INFEASIBLE
                }
            })
            .collect();
        let sampler = CutSampler {
            grid,
            params,
            values: &vals,
            curve,
            row_b: &row_b,
            boundary_value: |v: f64| f(curve.position(params, v), v),
        };
        let mut seen = 0;
        for a in 0..200 {
            for b in 0..60 {
                let d = grid.d_origin + (grid.d_max() - grid.d_origin) * (a as f64 + 0.31) / 200.0;
                let v = grid.v_max() * (b as f64 + 0.17) / 60.0;
                let s = sampler.sample(d, v);
                if curve.admits(params, d, v) {
                    seen += 1;
                    assert!((s - f(d, v)).abs() < 1e-8, "{curve:?} ({d}, {v}): {s} vs {}", f(d, v));
                } else {
                    assert!(s.is_infinite());
                }
            }
        }
        assert!(seen > 100);
    }

    #[test]
    fn cut_sampler_reproduces_linear_functions() {
        let p = PhysicalParams::default();
        let g = reference_grid(30);
        check_cut_weights(BoundaryCurve::Parabola, &p, &g);
        check_cut_weights(BoundaryCurve::BeatTheLight { s_r: 2.1 }, &p, &g);
        check_cut_weights(BoundaryCurve::BeatTheLight { s_r: 0.4 }, &p, &g);
        check_cut_weights(BoundaryCurve::StopLine, &p, &g);
    }

    #[test]
    fn time_field_feedback_identities() {
        let p = PhysicalParams::default();
        let g = reference_grid(10).with_time(1.0, 4);
        let mut f = TimeDepField::new(g, PhaseTag::Red);
        for k in 0..=g.n_t {
            let t = g.t(k);
            let (vals, fb) = f.slice_pair_mut(k);
            for j in 0..=g.n_v {
                for i in 0..=g.n_d {
                    let id = g.idx(i, j);
                    vals[id] = 1.0;
                    fb[id] = (0.01 * g.d(i) - 0.2 * g.v(j) + 0.05 * t) as f32;
                }
            }
        }
        let at_node = f.feedback_sample(VehicleState::new(g.d(3), g.v(4)), g.t(2), &p).unwrap();
        assert!((at_node.value() - f.feedback_slice(2)[g.idx(3, 4)] as f64).abs() < 1e-12);
        for m in 0..50 {
            let d = -90.0 + 3.7 * m as f64;
            let v = 0.3 + 0.39 * m as f64;
            let t = 1.0 + 0.0021 * m as f64;
            if !g.contains(d, v) || t > g.t(g.n_t) {
                continue;
            }
            let want = (0.01 * d - 0.2 * v + 0.05 * t).clamp(-3.8, 3.8);
            let got = f.feedback_sample(VehicleState::new(d, v), t, &p).unwrap().value();
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn f64_roundtrip() {
        let data = vec![1.5, -0.0, f64::INFINITY, 1e-300];
        let mut buf = Vec::new();
        write_f64s(&mut buf, data.iter().copied()).unwrap();
        assert_eq!(buf.len(), 32);
        assert_eq!(&buf[..8], &1.5f64.to_le_bytes());
        let back = read_f64s(&mut buf.as_slice(), 4).unwrap();
        assert_eq!(back, data);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bilinear_reproduces_linear(d in -100.0f64..100.0, v in 0.0f64..20.12) {
                let g = build_grid(&PhysicalParams::default(), 24, 1.0, 0.0).unwrap();
                let vals: Vec<f64> = (0..g.nodes())
                    .map(|id| 2.0 * g.d(id % (g.n_d + 1)) + 3.0 * g.v(id / (g.n_d + 1)))
                    .collect();
                let s = bilinear_sample(&g, &vals, VehicleState::new(d, v)).unwrap();
                prop_assert!((s - (2.0 * d + 3.0 * v)).abs() < 1e-9);
            }

            #[test]
            fn weights_nonnegative_and_normalized(d in -100.0f64..100.0, v in 0.0f64..20.12) {
                let g = build_grid(&PhysicalParams::default(), 24, 1.0, 0.0).unwrap();
                let w = corner_weights(g.locate(d, v));
                prop_assert!(w.iter().all(|c| c.2 >= 0.0));
                prop_assert!((w.iter().map(|c| c.2).sum::<f64>() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn adaptive_step_keeps_car_beyond_parabola(
                v in 0.0f64..20.12, gap in 0.0f64..2.0, a in -3.8f64..3.8
            ) {
                let p = PhysicalParams::default();
                let d = d_alpha(&p, v) + gap;
                let dt = 0.0294;
                prop_assume!(v + a * dt >= 0.0);
                let tau = adaptive_tau(d, v, a, dt, &p);
                prop_assert!(tau >= 0.0 && tau <= dt);
                let (d2, v2) = crate::model::step(d, v, a, tau);
                prop_assert!(d2 >= d_alpha(&p, v2) - 1e-9);
            }
        }
    }
}

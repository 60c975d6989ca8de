//! Stage 1: the stationary green-phase problem.
//!
//! With only nonnegative accelerations the successor of node `(i, j)` lands in
//! the cell spanned by columns `i-1, i` and rows `j, j+1`. Moving the weight of
//! the node itself to the left-hand side makes the update explicit, so a single
//! sweep with `i` ascending and `j` descending solves the system exactly.

use super::{gss_minimize, SolveConfig};
use crate::error::{Error, Result};
use crate::grid::{ValueField, INFEASIBLE};
use crate::model::{cost_rate, step};

/// Threshold on the self-weight above which a control is treated as infeasible.
const SELF_WEIGHT_LIMIT: f64 = 1.0 - 1e-12;

/// Solves the exit-time problem on the green phase with controls in `[0, beta]`.
pub fn solve_stationary_green(cfg: &SolveConfig) -> Result<ValueField> {
    cfg.validate()?;
    let g = cfg.grid;
    let p = &cfg.params;
    let w = &cfg.weights;
    let dt = g.delta_t;
    let mut values = vec![0.0; g.nodes()];
    let mut feedback = vec![0.0; g.nodes()];
    for i in 1..=g.n_d {
        let d = g.d(i);
        for j in (0..=g.n_v).rev() {
            let v = g.v(j);
            let f = |a: f64| {
                let (dn, vn) = step(d, v, a, dt);
                let td = ((d - dn) / g.delta_d).clamp(0.0, 1.0);
                let tv = ((vn - v) / g.delta_v).clamp(0.0, 1.0);
                let g1 = (1.0 - td) * (1.0 - tv);
                if g1 >= SELF_WEIGHT_LIMIT {
                    return INFEASIBLE;
                }
                let g2 = (1.0 - td) * tv;
                let g3 = td * tv;
                let g4 = td * (1.0 - tv);
                let up = if j < g.n_v {
                    g2 * values[g.idx(i, j + 1)] + g3 * values[g.idx(i - 1, j + 1)]
                } else {
                    0.0
                };
                (dt * cost_rate(w, a) + up + g4 * values[g.idx(i - 1, j)]) / (1.0 - g1)
            };
            let (a, q) = if j == g.n_v {
                (0.0, f(0.0))
            } else {
                gss_minimize(f, 0.0, p.beta, cfg.gss_tol)
            };
            if !q.is_finite() {
                return Err(Error::Solve {
                    stage: "stationary green solve",
                    reason: format!("non-finite value at node ({i}, {j})"),
                });
            }
            let id = g.idx(i, j);
            values[id] = q;
            feedback[id] = a;
        }
    }
    Ok(ValueField {
        grid: g,
        values,
        feedback,
    })
}

//! Time-constrained trade-off between fuel and discomfort.
//!
//! For a fixed ratio `c1 / c2` the time weight `c3` is calibrated by bisection
//! so the traced trajectory takes the requested time. Sweeping the ratio then
//! traces out the front in the `(J1, J2)` plane.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{CostWeights, VehicleState};
use crate::oracle::time_optimal_value;
use crate::solver::{SolutionBundle, SolveConfig};
use crate::tracer::{trace_deterministic, trace_scenario_tree, ConstituentCosts, TraceOptions};

/// Relative tolerance on the traced time.
pub const BUDGET_TOLERANCE: f64 = 0.005;

/// Which problem each calibration step solves and traces.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub enum ParetoMode {
    /// The stationary green-phase problem, traced from the start.
    #[default]
    Green,
    /// The full pipeline: the scenario tree if the configuration has a
    /// distribution (expected times), otherwise a deterministic trace from
    /// the yellow onset.
    FullPipeline,
}

/// Bisection settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationSettings {
    pub c3_lo: f64,
    pub c3_hi: f64,
    /// Largest `c3` tried when expanding the bracket upward.
    pub c3_cap: f64,
    /// Smallest `c3` tried when expanding the bracket downward.
    pub c3_floor: f64,
    pub max_evaluations: usize,
    pub mode: ParetoMode,
    pub trace: TraceSettings,
}

/// Tracing knobs forwarded to the tracer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceSettings {
    pub substeps: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            c3_lo: 1e-2,
            c3_hi: 10.0,
            c3_cap: 1e6,
            c3_floor: 1e-8,
            max_evaluations: 80,
            mode: ParetoMode::Green,
            trace: TraceSettings { substeps: 4 },
        }
    }
}

/// One calibrated point of the front.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoPoint {
    /// `c1 / c2`.
    pub ratio: f64,
    /// Calibrated weights normalized to sum to 1.
    pub weights: CostWeights,
    /// Calibrated weights with `c2 = 1`.
    pub raw_weights: CostWeights,
    pub costs: ConstituentCosts,
    /// `J3 - budget`.
    pub residual: f64,
    pub evaluations: usize,
    /// Observed breaks of the monotone decrease of `J3` in `c3`.
    pub warnings: Vec<String>,
}

/// A front with the ratios that failed to calibrate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoFront {
    pub budget: f64,
    /// Points sorted by `J1`.
    pub points: Vec<ParetoPoint>,
    pub errors: Vec<(f64, String)>,
}

impl ParetoFront {
    /// Writes `ratio,c1,c2,c3,J1,J2,J3` rows with normalized weights.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "ratio,c1,c2,c3,J1,J2,J3")?;
        for p in &self.points {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.ratio, p.weights.c1, p.weights.c2, p.weights.c3, p.costs.j1, p.costs.j2, p.costs.j3
            )?;
        }
        Ok(())
    }
}

fn evaluate(c3: f64, ratio: f64, start: VehicleState, base: &SolveConfig, s: &CalibrationSettings) -> Result<ConstituentCosts> {
    let w = CostWeights::new(ratio, 1.0, c3);
    let cfg = base.clone().with_weights(w);
    let opts = TraceOptions {
        substeps: s.trace.substeps,
        ..TraceOptions::default()
    };
    match s.mode {
        ParetoMode::Green => {
            let b = SolutionBundle::solve_green_only(&cfg)?;
            let t0 = b.times.schedule(cfg.schedule.t_yellow).t_green();
            Ok(trace_deterministic(start, t0, &b, &opts)?.costs())
        }
        ParetoMode::FullPipeline => {
            let b = SolutionBundle::solve(&cfg)?;
            if b.chain.is_some() {
                let tree = trace_scenario_tree(start, &b, &opts)?;
                Ok(tree.branches.iter().fold(ConstituentCosts::default(), |acc, br| ConstituentCosts {
                    j1: acc.j1 + br.probability * br.costs.j1,
                    j2: acc.j2 + br.probability * br.costs.j2,
                    j3: acc.j3 + br.probability * br.costs.j3,
                }))
            } else {
                Ok(trace_deterministic(start, cfg.schedule.t_yellow, &b, &opts)?.costs())
            }
        }
    }
}

/// Finds `c3` with `c1 = ratio`, `c2 = 1` whose traced time meets `budget`
/// within [`BUDGET_TOLERANCE`].
pub fn calibrate_c3(
    ratio: f64,
    budget: f64,
    start: VehicleState,
    base: &SolveConfig,
    settings: &CalibrationSettings,
) -> Result<ParetoPoint> {
    if !(ratio.is_finite() && ratio >= 0.0) {
        return Err(Error::invalid("pareto.ratios", "must be finite and >= 0"));
    }
    start.validate(&base.params)?;
    let floor = time_optimal_value(&base.params, start) + base.grid.delta_t;
    if !(budget.is_finite() && budget >= floor) {
        return Err(Error::Calibration(format!(
            "budget {budget} s is below the time-optimal bound {floor:.4} s (minimal time plus one time step)"
        )));
    }
    let tol = BUDGET_TOLERANCE * budget;
    let mut samples: Vec<(f64, f64)> = Vec::new();
    let mut evals = 0usize;
    let mut eval = |c3: f64, samples: &mut Vec<(f64, f64)>| -> Result<ConstituentCosts> {
        evals += 1;
        if evals > settings.max_evaluations {
            return Err(Error::Calibration(format!(
                "no c3 met the {budget} s budget within {} evaluations",
                settings.max_evaluations
            )));
        }
        let c = evaluate(c3, ratio, start, base, settings)?;
        samples.push((c3, c.j3));
        Ok(c)
    };
    let finish = |c3: f64, c: ConstituentCosts, samples: &[(f64, f64)], evals: usize| {
        let raw = CostWeights::new(ratio, 1.0, c3);
        ParetoPoint {
            ratio,
            weights: raw.normalized(),
            raw_weights: raw,
            costs: c,
            residual: c.j3 - budget,
            evaluations: evals,
            warnings: monotonicity_warnings(samples),
        }
    };
    // Bracket: larger c3 means a faster, shorter trip.
    let mut hi = settings.c3_hi;
    let mut c_hi = eval(hi, &mut samples)?;
    while c_hi.j3 > budget + tol {
        hi *= 4.0;
        if hi > settings.c3_cap {
            return Err(Error::Calibration(format!(
                "J3 stays above {budget} s up to c3 = {}",
                settings.c3_cap
            )));
        }
        c_hi = eval(hi, &mut samples)?;
    }
    if (c_hi.j3 - budget).abs() <= tol {
        return Ok(finish(hi, c_hi, &samples, evals));
    }
    let mut lo = settings.c3_lo.min(hi / 4.0);
    let mut c_lo = eval(lo, &mut samples)?;
    while c_lo.j3 < budget - tol {
        lo /= 4.0;
        if lo < settings.c3_floor {
            return Err(Error::Calibration(format!(
                "J3 stays below {budget} s down to c3 = {}",
                settings.c3_floor
            )));
        }
        c_lo = eval(lo, &mut samples)?;
    }
    if (c_lo.j3 - budget).abs() <= tol {
        return Ok(finish(lo, c_lo, &samples, evals));
    }
    // Bisection in log c3: the calibrated value spans orders of magnitude.
    loop {
        let mid = (lo * hi).sqrt();
        let c = eval(mid, &mut samples)?;
        if (c.j3 - budget).abs() <= tol {
            return Ok(finish(mid, c, &samples, evals));
        }
        if c.j3 > budget {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-12 {
            let best = if (c_lo.j3 - budget).abs() < (c.j3 - budget).abs() { (lo, c_lo) } else { (mid, c) };
            return Err(Error::Calibration(format!(
                "bracket exhausted at c3 = {} with J3 = {} s (budget {budget} s)",
                best.0, best.1.j3
            )));
        }
        c_lo = if c.j3 > budget { c } else { c_lo };
    }
}

/// Pairs along increasing `c3` where `J3` went up.
fn monotonicity_warnings(samples: &[(f64, f64)]) -> Vec<String> {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    s.windows(2)
        .filter(|w| w[1].1 > w[0].1 + 1e-9)
        .map(|w| {
            format!(
                "J3 rose from {} s to {} s as c3 went from {} to {}",
                w[0].1, w[1].1, w[0].0, w[1].0
            )
        })
        .collect()
}

/// Calibrates one point per ratio. Failures are collected, not fatal.
pub fn pareto_front(
    ratios: &[f64],
    budget: f64,
    start: VehicleState,
    base: &SolveConfig,
    settings: &CalibrationSettings,
) -> Result<ParetoFront> {
    if ratios.is_empty() {
        return Err(Error::invalid("pareto.ratios", "must be nonempty"));
    }
    if ratios.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("pareto.ratios", "must be sorted"));
    }
    let results: Vec<(f64, Result<ParetoPoint>)> = ratios
        .par_iter()
        .map(|&r| (r, calibrate_c3(r, budget, start, base, settings)))
        .collect();
    let mut points = Vec::new();
    let mut errors = Vec::new();
    for (r, res) in results {
        match res {
            Ok(p) => points.push(p),
            Err(e) => errors.push((r, e.to_string())),
        }
    }
    points.sort_by(|a, b| a.costs.j1.total_cmp(&b.costs.j1));
    Ok(ParetoFront { budget, points, errors })
}

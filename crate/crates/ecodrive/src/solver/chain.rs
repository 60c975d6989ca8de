//! Stage 3: the uncertain green phase.
//!
//! Segment `i` covers `[T_{i-1}, T_i]` and holds the value conditioned on the
//! light still being green at `T_{i-1}`. At `T_i` the light turns yellow with
//! hazard `h_i`, so the terminal data mixes the yellow-onset value with the
//! next segment's value at that time.

use rayon::prelude::*;

use super::{control_set, sl_backup, SolveConfig};
use crate::error::{Error, Result};
use crate::grid::{bilinear_at, PhaseTag, TimeDepField};
use crate::model::{conditional_hazards, GreenDurationDistribution, PhysicalParams, VehicleState};

/// Conditional value functions `w^1, ..., w^n` of the uncertain green phase.
#[derive(Debug, Clone)]
pub struct UncertainChain {
    pub distribution: GreenDurationDistribution,
    pub hazards: Vec<f64>,
    /// Snapped slice index of each possible yellow onset.
    pub onset_slices: Vec<usize>,
    /// Snapped onset times (s).
    pub onset_times: Vec<f64>,
    /// `segments[i]` is `w^{i+1}` on `[T_i, T_{i+1}]` with `T_0 = 0`.
    pub segments: Vec<TimeDepField>,
}

/// Solves the chain backward from the last possible onset.
///
/// `delta` is the value at the yellow onset on the spatial grid of `cfg`.
pub fn solve_uncertain_chain(
    cfg: &SolveConfig,
    delta: &[f64],
    dist: &GreenDurationDistribution,
) -> Result<UncertainChain> {
    cfg.validate()?;
    let g = cfg.grid;
    if delta.len() != g.nodes() {
        return Err(Error::Mismatch(format!(
            "yellow-onset value has {} nodes, grid has {}",
            delta.len(),
            g.nodes()
        )));
    }
    let dt = g.delta_t;
    let onset_slices: Vec<usize> = dist.times().iter().map(|t| (t / dt).round() as usize).collect();
    if onset_slices[0] == 0 {
        return Err(Error::invalid(
            "distribution.times",
            format!("the first onset {} s is shorter than one time step of {dt} s", dist.times()[0]),
        ));
    }
    if onset_slices.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(
            "distribution.times",
            format!("onsets closer than one time step of {dt} s"),
        ));
    }
    let hazards = conditional_hazards(dist);
    let n = dist.len();
    let row_len = g.n_d + 1;
    let mut segments: Vec<Option<TimeDepField>> = vec![None; n];
    for seg in (0..n).rev() {
        let k0 = if seg == 0 { 0 } else { onset_slices[seg - 1] };
        let k1 = onset_slices[seg];
        let sg = g.with_time(k0 as f64 * dt, k1 - k0);
        let mut field = TimeDepField::new(sg, PhaseTag::Uncertain(seg + 1));
        let h = hazards[seg];
        {
            let last = k1 - k0;
            let (vals, _) = field.slice_pair_mut(last);
            if h >= 1.0 {
                vals.copy_from_slice(delta);
            } else {
                let later = segments[seg + 1].as_ref().expect("later segment solved first");
                let after = later.slice(0);
                for ((out, &dl), &w) in vals.iter_mut().zip(delta).zip(after) {
                    *out = if h <= 0.0 { w } else { h * dl + (1.0 - h) * w };
                }
            }
        }
        let nodes = g.nodes();
        for k in (0..k1 - k0).rev() {
            let (head, tail) = field.values.split_at_mut((k + 1) * nodes);
            let next = &tail[..nodes];
            let out = &mut head[k * nodes..];
            let fb = &mut field.feedback[k * nodes..(k + 1) * nodes];
            out.par_chunks_mut(row_len)
                .zip(fb.par_chunks_mut(row_len))
                .enumerate()
                .for_each(|(j, (vals, fbs))| {
                    for i in 0..row_len {
                        let (val, a) = sl_backup(
                            cfg,
                            (i, j),
                            control_set(&cfg.params, &g, j),
                            |_| dt,
                            |dn, vn, _| bilinear_at(&g, next, g.locate(dn, vn)),
                        );
                        vals[i] = val;
                        fbs[i] = a as f32;
                    }
                });
            // Infinite values are legitimate where a short yellow leaves states
            // that can neither stop nor cross; NaN never is.
            if let Some(bad) = field.slice(k).iter().position(|v| v.is_nan()) {
                return Err(Error::Solve {
                    stage: "uncertain green phase",
                    reason: format!("NaN at node {bad} of segment {} slice {k}", seg + 1),
                });
            }
        }
        segments[seg] = Some(field);
    }
    Ok(UncertainChain {
        distribution: dist.clone(),
        hazards,
        onset_times: onset_slices.iter().map(|&k| k as f64 * dt).collect(),
        onset_slices,
        segments: segments.into_iter().map(|s| s.expect("every segment solved")).collect(),
    })
}

impl UncertainChain {
    /// Index of the segment containing time `t`; onset times belong to the
    /// segment they end.
    pub fn segment_index(&self, t: f64) -> Result<usize> {
        let last = *self.onset_times.last().expect("nonempty chain");
        if t < -1e-9 || t > last + 1e-9 {
            return Err(Error::OutOfBounds(format!("t={t} outside [0, {last}]")));
        }
        Ok(self
            .onset_times
            .iter()
            .position(|&tk| t <= tk + 1e-9)
            .unwrap_or(self.onset_times.len() - 1))
    }

    /// Value of the segment containing `t`. At `t = 0` this is the expected cost.
    pub fn value_at(&self, x: VehicleState, t: f64) -> Result<f64> {
        let seg = self.segment_index(t)?;
        self.segments[seg].value_at(x, t)
    }

    /// Feedback control of segment `seg` at `(x, t)`.
    pub fn feedback_at(&self, params: &PhysicalParams, seg: usize, x: VehicleState, t: f64) -> Result<f64> {
        let field = self
            .segments
            .get(seg)
            .ok_or_else(|| Error::OutOfBounds(format!("segment {seg} of {}", self.segments.len())))?;
        Ok(field.feedback_sample(x, t, params)?.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostWeights, SignalSchedule};

    fn cfg() -> SolveConfig {
        SolveConfig::new(PhysicalParams::default(), SignalSchedule::default(), CostWeights::default(), 16).unwrap()
    }

    fn ramp(cfg: &SolveConfig) -> Vec<f64> {
        let g = cfg.grid;
        (0..=g.n_v)
            .flat_map(|j| (0..=g.n_d).map(move |i| (i + j) as f64))
            .collect()
    }

    #[test]
    fn certain_onset_ends_in_delta() {
        let c = cfg();
        let delta = ramp(&c);
        let dist = GreenDurationDistribution::point_mass(1.0).unwrap();
        let ch = solve_uncertain_chain(&c, &delta, &dist).unwrap();
        let f = &ch.segments[0];
        assert_eq!(f.slice(f.slices() - 1), &delta[..]);
    }

    #[test]
    fn zero_tail_probability_matches_single_scenario() {
        let c = cfg();
        let delta = ramp(&c);
        let one = solve_uncertain_chain(&c, &delta, &GreenDurationDistribution::point_mass(1.0).unwrap()).unwrap();
        let two = solve_uncertain_chain(
            &c,
            &delta,
            &GreenDurationDistribution::new(vec![1.0, 2.0], vec![1.0, 0.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(one.segments[0].values, two.segments[0].values);
    }

    #[test]
    fn mixture_terminal_data() {
        let c = cfg();
        let delta = ramp(&c);
        let dist = GreenDurationDistribution::new(vec![0.5, 1.0], vec![0.25, 0.75]).unwrap();
        let ch = solve_uncertain_chain(&c, &delta, &dist).unwrap();
        assert_eq!(ch.hazards, vec![0.25, 1.0]);
        let f0 = &ch.segments[0];
        let end = f0.slice(f0.slices() - 1);
        let start1 = ch.segments[1].slice(0);
        for id in 0..delta.len() {
            let want = 0.25 * delta[id] + 0.75 * start1[id];
            assert!((end[id] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_onsets_inside_one_step() {
        let c = cfg();
        let delta = ramp(&c);
        let dt = c.grid.delta_t;
        let dist = GreenDurationDistribution::new(vec![dt, dt * 1.2], vec![0.5, 0.5]).unwrap();
        assert!(solve_uncertain_chain(&c, &delta, &dist).is_err());
    }
}

//! Tracing against solved bundles: determinism, Monte Carlo agreement and
//! the bound from the worst known-onset scenario.

use ecodrive::model::{
    region_membership, CostWeights, GreenDurationDistribution, PhysicalParams, Region, SignalSchedule, VehicleState,
};
use ecodrive::oracle::expected_cost_monte_carlo;
use ecodrive::solver::{solve_uncertain_chain, SolutionBundle, SolveConfig};
use ecodrive::tracer::{trace_scenario, trace_scenario_tree, TraceEvent, TraceOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bundle(n_v: usize, times: Vec<f64>, probs: Vec<f64>) -> SolutionBundle {
    let cfg = SolveConfig::new(PhysicalParams::default(), SignalSchedule::default(), CostWeights::default(), n_v)
        .unwrap()
        .with_distribution(GreenDurationDistribution::new(times, probs).unwrap());
    SolutionBundle::solve(&cfg).unwrap()
}

#[test]
fn tracing_twice_is_bitwise_identical() {
    let b = bundle(30, vec![2.0, 6.0], vec![0.5, 0.5]);
    let x = VehicleState::new(94.0, 0.85);
    let opts = TraceOptions::default();
    let one = trace_scenario_tree(x, &b, &opts).unwrap();
    let two = trace_scenario_tree(x, &b, &opts).unwrap();
    assert_eq!(one, two);
    assert_eq!(one.expected_cost.to_bits(), two.expected_cost.to_bits());
}

#[test]
fn tree_expectation_agrees_with_monte_carlo() {
    let b = bundle(30, vec![2.0, 4.0, 6.0], vec![0.25, 0.25, 0.5]);
    let x = VehicleState::new(68.0, 5.0);
    let opts = TraceOptions::default();
    let tree = trace_scenario_tree(x, &b, &opts).unwrap();
    let w = b.config.weights;
    let dist = b.chain.as_ref().unwrap().distribution.clone();
    let mc = expected_cost_monte_carlo(&dist, 2000, 5, |i| Ok(trace_scenario(x, &b, i, &opts)?.costs().total(&w)))
        .unwrap();
    assert!(mc.std_error > 0.0);
    assert!(
        (tree.expected_cost - mc.mean).abs() <= 2.0 * mc.std_error,
        "tree {} vs Monte Carlo {} ± {}",
        tree.expected_cost,
        mc.mean,
        mc.std_error
    );
    let total: f64 = tree.branches.iter().map(|br| br.probability).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn uncertain_value_is_bounded_by_worst_known_onset() {
    let times = vec![2.0, 6.0];
    let b = bundle(30, times.clone(), vec![0.5, 0.5]);
    let delta = b.signal().unwrap().slice_at(0.0).0;
    let known: Vec<_> = times
        .iter()
        .map(|&t| solve_uncertain_chain(&b.config, &delta, &GreenDurationDistribution::point_mass(t).unwrap()).unwrap())
        .collect();
    let g = b.config.grid;
    let tol = g.delta_d + g.delta_t;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 40 {
        let x = VehicleState::new(rng.random_range(-50.0..100.0), rng.random_range(0.0..20.12));
        let per: Vec<f64> = known.iter().map(|c| c.value_at(x, 0.0).unwrap()).collect();
        let worst = per.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !worst.is_finite() {
            continue;
        }
        let w = b.chain_value(x, 0.0).unwrap();
        assert!(w.is_finite() && w >= 0.0);
        assert!(w <= worst + tol, "{x:?}: {w} > {worst}");
        checked += 1;
    }
}

#[test]
fn scenario_traces_respect_the_light() {
    let b = bundle(30, vec![2.0, 6.0], vec![0.5, 0.5]);
    let p = b.config.params;
    let opts = TraceOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..25 {
        let x = VehicleState::new(rng.random_range(0.0..100.0), rng.random_range(0.0..20.12));
        if !b.chain_value(x, 0.0).unwrap().is_finite() {
            continue;
        }
        for s in 0..2 {
            let tr = trace_scenario(x, &b, s, &opts).unwrap();
            assert!(tr.reached_target);
            assert!(tr.event_time(TraceEvent::ReachedTarget).is_some());
            let onset = b.chain.as_ref().unwrap().onset_times[s];
            let sched = b.times.schedule(onset);
            for smp in &tr.samples {
                let st = VehicleState::new(smp.d, smp.v);
                assert!(smp.v <= p.v_bar + 1e-6 && smp.v >= -1e-6);
                assert_ne!(region_membership(st, smp.t, &sched, &p), Region::DisallowedRed, "{x:?} at {smp:?}");
            }
        }
    }
}

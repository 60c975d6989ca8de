//! Command-line front end: configuration, orchestration and file outputs.
//!
//! Subcommands share the global flags `--config`, `--out`, `--threads`,
//! `--seed` and `--resume`:
//!
//! * `solve` runs every stage the configuration needs, traces the requested
//!   starts and writes the bundle, trajectories and metadata;
//! * `trace` traces the starts from a resumed or freshly solved bundle;
//! * `pareto` calibrates the fronts of the `[pareto]` section;
//! * `slice --time T` exports the value and feedback at the slice nearest `T`;
//! * `resume` reruns only the uncertain phase of a saved bundle with the
//!   configuration's distribution.
//!
//! Every output file except `timings.json` is a deterministic function of the
//! configuration and seed.

pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

pub use config::RunConfig;

use crate::error::{Error, Result};
use crate::grid::write_slice_csv;
use crate::oracle::{expected_cost_monte_carlo, McEstimate};
use crate::pareto::{pareto_front, CalibrationSettings, ParetoFront, TraceSettings};
use crate::solver::{check_resumable, load_bundle, save_bundle, SolutionBundle, SolveConfig, StageTimings};
use crate::tracer::{
    trace_scenario, trace_scenario_tree, trace_with_onset, ConstituentCosts, TraceEvent, TraceOptions, Trajectory,
};

#[derive(Debug, Parser)]
#[command(name = "ecodrive", version, about = "Eco-driving through a traffic light with uncertain green time")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for the solver; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Monte Carlo seed; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Saved bundle to start from instead of solving Stages 1 and 2.
    #[arg(long, global = true)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve, trace and write every artifact.
    Solve,
    /// Trace the configured starts.
    Trace,
    /// Calibrate the configured Pareto fronts.
    Pareto,
    /// Export the value slice nearest to an absolute time.
    Slice {
        /// Absolute time (s).
        #[arg(long)]
        time: f64,
    },
    /// Rerun the uncertain phase of a saved bundle.
    Resume,
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid("threads", e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_toml("")?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    std::fs::create_dir_all(&cli.out)?;
    match cli.command {
        Command::Solve => {
            run_pipeline(&cfg, &cli.out, cli.resume.as_deref())?;
        }
        Command::Trace => {
            let (bundle, timings) = obtain_bundle(&cfg, cli.resume.as_deref())?;
            let traces = trace_all(&cfg, &bundle, &cli.out)?;
            write_metadata(&cfg, &bundle, &cli.out, &traces, &[])?;
            write_timings(&cli.out, &timings)?;
        }
        Command::Pareto => {
            let files = run_pareto(&cfg, &cli.out)?;
            let hash = cfg.solve_config()?.hash();
            let outputs: serde_json::Map<_, _> = files.into_iter().map(|f| (f, json!(hash))).collect();
            write_json(
                &cli.out.join("metadata.json"),
                &json!({
                    "software_version": env!("CARGO_PKG_VERSION"),
                    "config_hash": hash,
                    "config": cfg,
                    "outputs": outputs,
                }),
            )?;
        }
        Command::Slice { time } => {
            let (bundle, _) = obtain_bundle(&cfg, cli.resume.as_deref())?;
            let name = format!("slice_t{time}.csv");
            export_value_slice(&bundle, time, &cli.out.join(&name))?;
            write_metadata(&cfg, &bundle, &cli.out, &[], &[name])?;
        }
        Command::Resume => {
            let path = cli
                .resume
                .as_deref()
                .ok_or_else(|| Error::invalid("resume", "the resume command needs --resume BUNDLE"))?;
            resume_stage3(&cfg, path, &cli.out)?;
        }
    }
    Ok(())
}

/// Summary of one traced start, recorded in the metadata.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub index: usize,
    pub start: config::StartSection,
    pub kind: &'static str,
    pub file: String,
    pub costs: ConstituentCosts,
    pub total_cost: f64,
    pub events: Vec<(String, f64)>,
    pub branches: Vec<serde_json::Value>,
    pub monte_carlo: Option<McRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct McRecord {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
    pub seed: u64,
}

impl From<(McEstimate, u64)> for McRecord {
    fn from((e, seed): (McEstimate, u64)) -> Self {
        Self {
            mean: e.mean,
            std_error: e.std_error,
            samples: e.samples,
            seed,
        }
    }
}

fn trace_options(cfg: &RunConfig) -> TraceOptions {
    TraceOptions {
        substeps: cfg.grid.trace_substeps,
        ..TraceOptions::default()
    }
}

/// Loads and checks a saved bundle, or solves the stages `cfg` needs.
fn obtain_bundle(cfg: &RunConfig, resume: Option<&Path>) -> Result<(SolutionBundle, StageTimings)> {
    let solve_cfg = cfg.solve_config()?;
    match resume {
        Some(path) => {
            let mut bundle = load_bundle(path)?;
            check_resumable(&bundle, &solve_cfg)?;
            bundle.config.schedule = solve_cfg.schedule;
            let same_chain = bundle.chain.as_ref().map(|c| &c.distribution) == solve_cfg.distribution.as_ref();
            match (&solve_cfg.distribution, same_chain) {
                (Some(d), false) => bundle.resolve_chain(d.clone())?,
                (None, _) => {
                    bundle.chain = None;
                    bundle.config.distribution = None;
                }
                _ => {}
            }
            let timings = bundle.timings.clone();
            Ok((bundle, timings))
        }
        None => {
            let bundle = if cfg.needs_signal_phases() {
                SolutionBundle::solve(&solve_cfg)?
            } else {
                SolutionBundle::solve_green_only(&solve_cfg)?
            };
            let timings = bundle.timings.clone();
            Ok((bundle, timings))
        }
    }
}

/// Runs every stage the configuration needs, traces its starts and writes
/// the bundle, trajectory files and metadata to `out`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<SolutionBundle> {
    std::fs::create_dir_all(out)?;
    let (bundle, timings) = obtain_bundle(cfg, resume)?;
    save_bundle(&bundle, &out.join("bundle.bin"))?;
    let t0 = Instant::now();
    let traces = trace_all(cfg, &bundle, out)?;
    let trace_s = t0.elapsed().as_secs_f64();
    let mut extra = vec!["bundle.bin".to_string()];
    if cfg.pareto.is_some() {
        extra.extend(run_pareto(cfg, out)?);
    }
    write_metadata(cfg, &bundle, out, &traces, &extra)?;
    write_json(
        &out.join("timings.json"),
        &json!({ "stages": timings, "tracing_s": trace_s }),
    )?;
    Ok(bundle)
}

/// Recomputes only the uncertain phase of the bundle at `path` with the
/// distribution of `cfg`, then retraces and rewrites the artifacts.
pub fn resume_stage3(cfg: &RunConfig, path: &Path, out: &Path) -> Result<SolutionBundle> {
    let solve_cfg = cfg.solve_config()?;
    let dist = solve_cfg
        .distribution
        .clone()
        .ok_or_else(|| Error::invalid("distribution", "resume needs a distribution"))?;
    let mut bundle = load_bundle(path)?;
    check_resumable(&bundle, &solve_cfg)?;
    bundle.config.schedule = solve_cfg.schedule;
    bundle.resolve_chain(dist)?;
    std::fs::create_dir_all(out)?;
    save_bundle(&bundle, &out.join("bundle.bin"))?;
    let traces = trace_all(cfg, &bundle, out)?;
    write_metadata(cfg, &bundle, out, &traces, &["bundle.bin".to_string()])?;
    write_timings(out, &bundle.timings)?;
    Ok(bundle)
}

fn trace_all(cfg: &RunConfig, bundle: &SolutionBundle, out: &Path) -> Result<Vec<TraceRecord>> {
    let opts = trace_options(cfg);
    let mut records = Vec::with_capacity(cfg.start.len());
    for (k, s) in cfg.start.iter().enumerate() {
        let x = s.state();
        let file = format!("trace_{k}.csv");
        let mut w = BufWriter::new(File::create(out.join(&file))?);
        let rec = match (s.t, &bundle.chain) {
            (None, Some(chain)) => {
                let tree = trace_scenario_tree(x, bundle, &opts)?;
                for b in 0..tree.branches.len() {
                    tree.path(b).write_csv(&mut w, b, b == 0)?;
                }
                let mut doc = tree.to_json(&bundle.config.weights);
                doc["config_hash"] = json!(bundle.config.hash());
                write_json(&out.join(format!("tree_{k}.json")), &doc)?;
                let monte_carlo = match &cfg.monte_carlo {
                    Some(mc) => {
                        let w8 = bundle.config.weights;
                        let est = expected_cost_monte_carlo(&chain.distribution, mc.samples, cfg.seed, |i| {
                            Ok(trace_scenario(x, bundle, i, &opts)?.costs().total(&w8))
                        })?;
                        Some(McRecord::from((est, cfg.seed)))
                    }
                    None => None,
                };
                let costs = tree.branches.iter().fold(ConstituentCosts::default(), |acc, b| ConstituentCosts {
                    j1: acc.j1 + b.probability * b.costs.j1,
                    j2: acc.j2 + b.probability * b.costs.j2,
                    j3: acc.j3 + b.probability * b.costs.j3,
                });
                TraceRecord {
                    index: k,
                    start: *s,
                    kind: "scenario-tree",
                    file,
                    costs,
                    total_cost: tree.expected_cost,
                    events: Vec::new(),
                    branches: tree
                        .branches
                        .iter()
                        .enumerate()
                        .map(|(b, br)| {
                            json!({
                                "branch_id": b,
                                "scenarios": br.scenarios,
                                "probability": br.probability,
                                "onset": br.onset,
                                "costs": br.costs,
                                "total_cost": br.total_cost,
                                "events": events_of(&tree.path(b)),
                            })
                        })
                        .collect(),
                    monte_carlo,
                }
            }
            _ => {
                let t_y = bundle.config.schedule.t_yellow;
                let t0 = s.t.unwrap_or(t_y);
                let traj = trace_with_onset(x, t0, t_y, bundle, &opts)?;
                traj.write_csv(&mut w, 0, true)?;
                let costs = traj.costs();
                TraceRecord {
                    index: k,
                    start: *s,
                    kind: "deterministic",
                    file,
                    costs,
                    total_cost: costs.total(&bundle.config.weights),
                    events: events_of(&traj),
                    branches: Vec::new(),
                    monte_carlo: None,
                }
            }
        };
        w.flush()?;
        records.push(rec);
    }
    Ok(records)
}

fn events_of(traj: &Trajectory) -> Vec<(String, f64)> {
    traj.samples
        .iter()
        .flat_map(|s| s.events.iter().map(move |e: &TraceEvent| (e.label().to_string(), s.t)))
        .collect()
}

/// Calibrates every front of the `[pareto]` section and writes one CSV per
/// budget plus `pareto.json`; returns the file names.
pub fn run_pareto(cfg: &RunConfig, out: &Path) -> Result<Vec<String>> {
    let p = cfg
        .pareto
        .as_ref()
        .ok_or_else(|| Error::invalid("pareto", "the configuration has no [pareto] section"))?;
    let base: SolveConfig = cfg.solve_config()?;
    let settings = CalibrationSettings {
        mode: p.mode(),
        trace: TraceSettings {
            substeps: cfg.grid.trace_substeps,
        },
        ..CalibrationSettings::default()
    };
    let mut files = Vec::new();
    let mut fronts: Vec<ParetoFront> = Vec::new();
    for &budget in &p.budgets {
        let front = pareto_front(&p.ratios, budget, crate::model::VehicleState::new(p.d, p.v), &base, &settings)?;
        let name = format!("pareto_{budget}.csv");
        let mut w = BufWriter::new(File::create(out.join(&name))?);
        front.write_csv(&mut w)?;
        w.flush()?;
        files.push(name);
        fronts.push(front);
    }
    write_json(
        &out.join("pareto.json"),
        &json!({ "config_hash": base.hash(), "fronts": fronts }),
    )?;
    files.push("pareto.json".into());
    Ok(files)
}

/// Writes the `(d, v, value, feedback)` slice nearest to absolute time `t`.
pub fn export_value_slice(bundle: &SolutionBundle, t: f64, path: &Path) -> Result<()> {
    let sched = bundle.times.schedule(bundle.config.schedule.t_yellow);
    let g = &bundle.config.grid;
    let mut w = BufWriter::new(File::create(path)?);
    if t >= sched.t_green() - 1e-9 {
        let q = &bundle.q;
        write_slice_csv(&mut w, g, &q.values, |id| q.feedback[id])?;
    } else if t >= sched.t_yellow - 1e-9 {
        let (vals, fb) = bundle.signal()?.slice_at(t - sched.t_yellow);
        write_slice_csv(&mut w, g, &vals, |id| fb[id])?;
    } else {
        let chain = bundle.chain.as_ref().ok_or_else(|| {
            Error::OutOfBounds(format!("t={t} precedes the yellow onset and the bundle has no uncertain chain"))
        })?;
        if t < -1e-9 {
            return Err(Error::OutOfBounds(format!("t={t} is negative")));
        }
        let seg = chain.segment_index(t)?;
        let f = &chain.segments[seg];
        let k = f.grid.nearest_slice(t);
        let fb = f.feedback_slice(k);
        write_slice_csv(&mut w, g, f.slice(k), |id| fb[id] as f64)?;
    }
    w.flush()?;
    Ok(())
}

fn write_metadata(
    cfg: &RunConfig,
    bundle: &SolutionBundle,
    out: &Path,
    traces: &[TraceRecord],
    extra: &[String],
) -> Result<()> {
    let sched = bundle.times.schedule(bundle.config.schedule.t_yellow);
    let hash = bundle.config.hash();
    let outputs: serde_json::Map<String, serde_json::Value> = extra
        .iter()
        .cloned()
        .chain(traces.iter().map(|t| t.file.clone()))
        .chain(
            traces
                .iter()
                .filter(|t| t.kind == "scenario-tree")
                .map(|t| format!("tree_{}.json", t.index)),
        )
        .map(|f| (f, json!(hash)))
        .collect();
    let doc = json!({
        "software_version": env!("CARGO_PKG_VERSION"),
        "config_hash": hash,
        "stage12_hash": bundle.config.stage12_hash(),
        "config": cfg,
        "grid": bundle.config.grid,
        "snapped_times": {
            "delta_t": bundle.times.delta_t,
            "t_yellow": sched.t_yellow,
            "t_red": sched.t_red(),
            "t_green": sched.t_green(),
            "d_yellow": bundle.times.d_yellow,
            "d_red": bundle.times.d_red,
            "onsets": bundle.chain.as_ref().map(|c| c.onset_times.clone()),
            "hazards": bundle.chain.as_ref().map(|c| c.hazards.clone()),
        },
        "stages": {
            "signal_phases": bundle.signal.is_some(),
            "uncertain_chain": bundle.chain.is_some(),
        },
        "traces": traces,
        "outputs": outputs,
        "timings_file": "timings.json",
    });
    write_json(&out.join("metadata.json"), &doc)
}

fn write_timings(out: &Path, timings: &StageTimings) -> Result<()> {
    write_json(&out.join("timings.json"), &json!({ "stages": timings }))
}

fn write_json(path: &Path, doc: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, doc)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

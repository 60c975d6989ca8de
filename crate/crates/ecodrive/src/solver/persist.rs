//! Binary persistence of solution bundles.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes | content                                     |
//! |-------|---------------------------------------------|
//! | 8     | magic `ECODRIVE`                            |
//! | 4     | format version (`u32`)                      |
//! | 8     | header length `n` (`u64`)                   |
//! | n     | UTF-8 JSON header                           |
//! | ...   | arrays in the order listed by the header    |
//!
//! The header carries the solve configuration, the snapped phase times, the
//! configuration hashes and a list of `{name, dtype, len}` array records.
//! Values are `f64`; feedback controls are `f32`. Every array of a field is
//! row-major over `j` then `i` within a slice, slices in increasing time.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RedPhase, SignalField, SnappedTimes, SolutionBundle, SolveConfig, StageTimings, UncertainChain, YellowPhase};
use crate::error::{Error, Result};
use crate::grid::{read_f64s, write_f64s, PhaseTag, TimeDepField, ValueField};
use crate::model::GreenDurationDistribution;

const MAGIC: &[u8; 8] = b"ECODRIVE";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayRecord {
    name: String,
    dtype: Dtype,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChainHeader {
    distribution: GreenDurationDistribution,
    hazards: Vec<f64>,
    onset_slices: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: SolveConfig,
    config_hash: String,
    stage12_hash: String,
    times: SnappedTimes,
    ghost_col: Option<usize>,
    chain: Option<ChainHeader>,
    arrays: Vec<ArrayRecord>,
}

enum Data<'a> {
    F64(&'a [f64]),
    F32(&'a [f32]),
}

fn push<'a>(list: &mut Vec<(ArrayRecord, Data<'a>)>, name: impl Into<String>, data: Data<'a>) {
    let (dtype, len) = match &data {
        Data::F64(d) => (Dtype::F64, d.len()),
        Data::F32(d) => (Dtype::F32, d.len()),
    };
    list.push((ArrayRecord { name: name.into(), dtype, len }, data));
}

fn push_field<'a>(list: &mut Vec<(ArrayRecord, Data<'a>)>, name: &str, f: &'a TimeDepField) {
    push(list, format!("{name}.values"), Data::F64(&f.values));
    push(list, format!("{name}.feedback"), Data::F32(&f.feedback));
}

/// Writes `bundle` to `path`.
pub fn save_bundle(bundle: &SolutionBundle, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    push(&mut arrays, "q.values", Data::F64(&bundle.q.values));
    push(&mut arrays, "q.feedback", Data::F64(&bundle.q.feedback));
    if let Some(sig) = &bundle.signal {
        push_field(&mut arrays, "red", &sig.red.field);
        push(&mut arrays, "red.ghost_values", Data::F64(&sig.red.ghost_values));
        push(&mut arrays, "red.ghost_feedback", Data::F32(&sig.red.ghost_feedback));
        push_field(&mut arrays, "yellow.wait", &sig.yellow.wait);
        push_field(&mut arrays, "yellow.cross", &sig.yellow.cross);
        push_field(&mut arrays, "yellow.merged", &sig.yellow.merged);
    }
    if let Some(ch) = &bundle.chain {
        for (i, seg) in ch.segments.iter().enumerate() {
            push_field(&mut arrays, &format!("w{}", i + 1), seg);
        }
    }
    let header = Header {
        config: bundle.config.clone(),
        config_hash: bundle.config.hash(),
        stage12_hash: bundle.config.stage12_hash(),
        times: bundle.times,
        ghost_col: bundle.signal.as_ref().map(|s| s.red.ghost_col),
        chain: bundle.chain.as_ref().map(|c| ChainHeader {
            distribution: c.distribution.clone(),
            hazards: c.hazards.clone(),
            onset_slices: c.onset_slices.clone(),
        }),
        arrays: arrays.iter().map(|(r, _)| r.clone()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, data) in arrays {
        match data {
            Data::F64(d) => write_f64s(&mut out, d.iter().copied())?,
            Data::F32(d) => {
                let bytes: Vec<u8> = d.iter().flat_map(|x| x.to_le_bytes()).collect();
                out.write_all(&bytes)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

struct Reader<R: Read> {
    input: R,
    records: std::vec::IntoIter<ArrayRecord>,
}

impl<R: Read> Reader<R> {
    fn next(&mut self, name: &str, dtype: Dtype, len: usize) -> Result<ArrayRecord> {
        let rec = self
            .records
            .next()
            .ok_or_else(|| Error::Mismatch(format!("bundle ends before array {name}")))?;
        if rec.name != name || rec.dtype != dtype || rec.len != len {
            return Err(Error::Mismatch(format!(
                "expected array {name} ({dtype:?}, {len}), found {} ({:?}, {})",
                rec.name, rec.dtype, rec.len
            )));
        }
        Ok(rec)
    }

    fn f64s(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        self.next(name, Dtype::F64, len)?;
        read_f64s(&mut self.input, len)
    }

    fn f32s(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        self.next(name, Dtype::F32, len)?;
        let mut bytes = vec![0u8; len * 4];
        self.input.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }

    fn field(&mut self, name: &str, grid: crate::grid::GridSpec, phase: PhaseTag) -> Result<TimeDepField> {
        let len = grid.nodes() * (grid.n_t + 1);
        Ok(TimeDepField {
            grid,
            phase,
            values: self.f64s(&format!("{name}.values"), len)?,
            feedback: self.f32s(&format!("{name}.feedback"), len)?,
        })
    }
}

/// Reads a bundle written by [`save_bundle`]. Stage timings are not stored
/// and come back as zero.
pub fn load_bundle(path: &Path) -> Result<SolutionBundle> {
    let mut input = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Mismatch(format!("{} is not a solution bundle", path.display())));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Mismatch(format!("bundle format {version}, expected {VERSION}")));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let cfg = header.config;
    cfg.validate()?;
    if cfg.hash() != header.config_hash {
        return Err(Error::Mismatch("stored configuration hash does not match its configuration".into()));
    }
    let times = SnappedTimes::new(&cfg)?;
    if times != header.times {
        return Err(Error::Mismatch("stored phase times differ from the configuration".into()));
    }
    let g = cfg.grid;
    let mut r = Reader {
        input,
        records: header.arrays.into_iter(),
    };
    let q = ValueField {
        grid: g,
        values: r.f64s("q.values", g.nodes())?,
        feedback: r.f64s("q.feedback", g.nodes())?,
    };
    let signal = match header.ghost_col {
        Some(ghost_col) => {
            let field = r.field("red", g.with_time(times.d_yellow, times.k_red), PhaseTag::Red)?;
            let rows = (g.n_v + 1) * (times.k_red + 1);
            let ghost_values = r.f64s("red.ghost_values", rows)?;
            let ghost_feedback = r.f32s("red.ghost_feedback", rows)?;
            let yg = g.with_time(0.0, times.k_yellow);
            let wait = r.field("yellow.wait", yg, PhaseTag::Yellow)?;
            let cross = r.field("yellow.cross", yg, PhaseTag::Yellow)?;
            let merged = r.field("yellow.merged", yg, PhaseTag::Yellow)?;
            Some(SignalField {
                grid: g,
                times,
                red: RedPhase {
                    field,
                    ghost_col,
                    ghost_values,
                    ghost_feedback,
                },
                yellow: YellowPhase { wait, cross, merged },
            })
        }
        None => None,
    };
    let chain = match header.chain {
        Some(ch) => {
            let mut segments = Vec::with_capacity(ch.onset_slices.len());
            for (i, &k1) in ch.onset_slices.iter().enumerate() {
                let k0 = if i == 0 { 0 } else { ch.onset_slices[i - 1] };
                let sg = g.with_time(k0 as f64 * g.delta_t, k1 - k0);
                segments.push(r.field(&format!("w{}", i + 1), sg, PhaseTag::Uncertain(i + 1))?);
            }
            Some(UncertainChain {
                onset_times: ch.onset_slices.iter().map(|&k| k as f64 * g.delta_t).collect(),
                distribution: ch.distribution,
                hazards: ch.hazards,
                onset_slices: ch.onset_slices,
                segments,
            })
        }
        None => None,
    };
    if let Some(rest) = r.records.next() {
        return Err(Error::Mismatch(format!("unexpected trailing array {}", rest.name)));
    }
    Ok(SolutionBundle {
        config: cfg,
        times,
        q,
        signal,
        chain,
        timings: StageTimings::default(),
    })
}

/// Checks that `bundle` can serve Stage 3 for `cfg`: every input of Stages 1
/// and 2 must agree. The error lists the differing parts.
pub fn check_resumable(bundle: &SolutionBundle, cfg: &SolveConfig) -> Result<()> {
    if bundle.signal.is_none() {
        return Err(Error::Mismatch("bundle has no yellow and red phase solution".into()));
    }
    let old = &bundle.config;
    if old.stage12_hash() == cfg.stage12_hash() {
        return Ok(());
    }
    let mut diff = Vec::new();
    if old.params != cfg.params {
        diff.push(format!("params: {:?} -> {:?}", old.params, cfg.params));
    }
    if old.schedule.d_yellow != cfg.schedule.d_yellow || old.schedule.d_red != cfg.schedule.d_red {
        diff.push(format!(
            "schedule durations: ({}, {}) -> ({}, {})",
            old.schedule.d_yellow, old.schedule.d_red, cfg.schedule.d_yellow, cfg.schedule.d_red
        ));
    }
    if old.weights != cfg.weights {
        diff.push(format!("weights: {:?} -> {:?}", old.weights, cfg.weights));
    }
    if old.grid != cfg.grid {
        diff.push(format!("grid: n_v {} -> {}", old.grid.n_v, cfg.grid.n_v));
    }
    if old.gss_tol != cfg.gss_tol {
        diff.push(format!("gss_tol: {} -> {}", old.gss_tol, cfg.gss_tol));
    }
    Err(Error::Mismatch(format!("Stage 1-2 inputs differ: {}", diff.join("; "))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostWeights, PhysicalParams, SignalSchedule};

    #[test]
    fn roundtrip_is_bitwise() {
        let cfg = SolveConfig::new(PhysicalParams::default(), SignalSchedule::new(0.0, 1.0, 2.0).unwrap(), CostWeights::default(), 12)
            .unwrap()
            .with_distribution(GreenDurationDistribution::new(vec![1.0, 2.0], vec![0.5, 0.5]).unwrap());
        let b = SolutionBundle::solve(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        save_bundle(&b, &path).unwrap();
        let c = load_bundle(&path).unwrap();
        assert_eq!(c.config, b.config);
        assert_eq!(c.q.values, b.q.values);
        let (s0, s1) = (b.signal.as_ref().unwrap(), c.signal.as_ref().unwrap());
        assert_eq!(s0.red.field, s1.red.field);
        assert_eq!(s0.red.ghost_values, s1.red.ghost_values);
        assert_eq!(s0.yellow.merged, s1.yellow.merged);
        let (c0, c1) = (b.chain.as_ref().unwrap(), c.chain.as_ref().unwrap());
        assert_eq!(c0.segments, c1.segments);
        assert_eq!(c0.onset_times, c1.onset_times);
    }

    #[test]
    fn rejects_foreign_files_and_mismatched_configs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a bundle at all").unwrap();
        assert!(matches!(load_bundle(&path), Err(Error::Mismatch(_))));
        let cfg = SolveConfig::new(PhysicalParams::default(), SignalSchedule::new(0.0, 1.0, 2.0).unwrap(), CostWeights::default(), 10).unwrap();
        let b = SolutionBundle::solve(&cfg).unwrap();
        let other = cfg.clone().with_weights(CostWeights::new(0.1, 0.1, 0.8));
        let err = check_resumable(&b, &other).unwrap_err().to_string();
        assert!(err.contains("weights"), "{err}");
        let moved = SolveConfig {
            schedule: SignalSchedule::new(5.0, 1.0, 2.0).unwrap(),
            ..cfg.clone()
        };
        assert!(check_resumable(&b, &moved).is_ok());
    }
}

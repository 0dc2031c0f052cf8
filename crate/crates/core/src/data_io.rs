//! Cell persistence, train/test splits and the synthetic degradation
//! generator.
//!
//! # Cell file format
//!
//! UTF-8 text, one sample per line, comma separated. Lines starting with `#`
//! are headers:
//!
//! ```text
//! # cellspan cells v1
//! # columns: cycle,stage,time,voltage,current,capacity
//! # cell: id=c000,nominal_capacity=1.1000000000000001e0,lifetime=523,tags=pop-a;fast
//! 0,charge,0.0000000000000000e0,3.3000000000000003e0,1.1000000000000001e0,0.0000000000000000e0
//! ```
//!
//! Every `# cell:` line starts a new cell; the sample rows that follow belong
//! to it. `lifetime` is an integer or `unknown`; tags are `;`-separated.
//! Floats are written with 17 significant digits so a save/load round trip
//! is exact. Cycles may appear in any order and are sorted on load.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::types::{below_threshold, lifetime_from_capacity, validate_cell, CellRecord, CycleSignals, Sample, SplitConfig, Stage};

pub const FORMAT_HEADER: &str = "# cellspan cells v1";
pub const COLUMNS_HEADER: &str = "# columns: cycle,stage,time,voltage,current,capacity";

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn check_token(kind: &str, s: &str, forbidden: &[char]) -> Result<()> {
    if s.is_empty() || s.contains(forbidden) || s.contains(['\n', '\r']) {
        return Err(Error::Config(format!(
            "{kind} {s:?} must be nonempty, single-line and free of {forbidden:?}"
        )));
    }
    Ok(())
}

/// Serializes cells in the documented text format.
pub fn write_cells(cells: &[CellRecord]) -> Result<String> {
    let mut out = String::new();
    out.push_str(FORMAT_HEADER);
    out.push('\n');
    out.push_str(COLUMNS_HEADER);
    out.push('\n');
    for cell in cells {
        check_token("cell id", &cell.cell_id, &[',', '=', ';'])?;
        for t in &cell.condition_tags {
            check_token("tag", t, &[',', ';'])?;
        }
        let lifetime = cell
            .lifetime
            .map_or_else(|| "unknown".to_string(), |l| l.to_string());
        writeln!(
            out,
            "# cell: id={},nominal_capacity={},lifetime={},tags={}",
            cell.cell_id,
            fmt_f64(cell.nominal_capacity),
            lifetime,
            cell.condition_tags.join(";")
        )
        .expect("write to string");
        for cycle in &cell.cycles {
            for stage in [Stage::Charge, Stage::Discharge] {
                for s in cycle.stage(stage) {
                    writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        cycle.cycle_index,
                        stage,
                        fmt_f64(s.time),
                        fmt_f64(s.voltage),
                        fmt_f64(s.current),
                        fmt_f64(s.capacity)
                    )
                    .expect("write to string");
                }
            }
        }
    }
    Ok(out)
}

pub fn save_cells(cells: &[CellRecord], path: &Path) -> Result<()> {
    fs::write(path, write_cells(cells)?).map_err(Error::file(path))?;
    Ok(())
}

pub fn load_cells(path: &Path) -> Result<Vec<CellRecord>> {
    let text = fs::read_to_string(path).map_err(Error::file(path))?;
    parse_cells(&text, path)
}

struct PendingCell {
    line: usize,
    cell_id: String,
    nominal_capacity: f64,
    lifetime: Option<u32>,
    tags: Vec<String>,
    cycles: BTreeMap<usize, CycleSignals>,
}

impl PendingCell {
    fn finish(self, path: &Path) -> Result<CellRecord> {
        let record = CellRecord {
            cell_id: self.cell_id,
            nominal_capacity: self.nominal_capacity,
            cycles: self.cycles.into_values().collect(),
            lifetime: self.lifetime,
            condition_tags: self.tags,
        };
        if let Some(v) = validate_cell(&record).first() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: self.line,
                message: format!("cell {}: {v}", record.cell_id),
            });
        }
        Ok(record)
    }
}

/// Parses the cell text format; `path` is only used in error messages.
pub fn parse_cells(text: &str, path: &Path) -> Result<Vec<CellRecord>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut cells = Vec::new();
    let mut current: Option<PendingCell> = None;
    let mut saw_format = false;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(version) = rest.strip_prefix("cellspan cells v") {
                if version != "1" {
                    return Err(err(line_no, format!("unsupported format version {version}")));
                }
                saw_format = true;
            } else if let Some(header) = rest.strip_prefix("cell:") {
                if let Some(done) = current.take() {
                    cells.push(done.finish(path)?);
                }
                let mut pending = parse_cell_header(header.trim()).map_err(|m| err(line_no, m))?;
                pending.line = line_no;
                current = Some(pending);
            } else if let Some(cols) = rest.strip_prefix("columns:") {
                if cols.trim() != "cycle,stage,time,voltage,current,capacity" {
                    return Err(err(line_no, format!("unexpected columns {:?}", cols.trim())));
                }
            }
            continue;
        }
        if !saw_format {
            return Err(err(line_no, format!("missing {FORMAT_HEADER:?} header")));
        }
        let cell = current
            .as_mut()
            .ok_or_else(|| err(line_no, "sample row before any '# cell:' header".into()))?;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(err(line_no, format!("expected 6 fields, found {}", fields.len())));
        }
        let cycle: usize = fields[0]
            .parse()
            .map_err(|_| err(line_no, format!("bad cycle index {:?}", fields[0])))?;
        let stage = Stage::parse(fields[1])
            .ok_or_else(|| err(line_no, format!("unknown stage {:?}", fields[1])))?;
        let mut nums = [0.0; 4];
        for (k, name) in ["time", "voltage", "current", "capacity"].iter().enumerate() {
            nums[k] = fields[2 + k]
                .parse()
                .map_err(|_| err(line_no, format!("bad {name} {:?}", fields[2 + k])))?;
        }
        let sample = Sample {
            time: nums[0],
            voltage: nums[1],
            current: nums[2],
            capacity: nums[3],
        };
        let entry = cell.cycles.entry(cycle).or_insert_with(|| CycleSignals {
            cycle_index: cycle,
            charge: Vec::new(),
            discharge: Vec::new(),
        });
        let samples = match stage {
            Stage::Charge => &mut entry.charge,
            Stage::Discharge => &mut entry.discharge,
        };
        if let Some(prev) = samples.last() {
            if sample.time <= prev.time {
                return Err(err(
                    line_no,
                    format!("time not increasing in cycle {cycle} {stage}"),
                ));
            }
        }
        samples.push(sample);
    }
    if let Some(done) = current.take() {
        cells.push(done.finish(path)?);
    }
    Ok(cells)
}

fn parse_cell_header(header: &str) -> std::result::Result<PendingCell, String> {
    let mut id = None;
    let mut nominal = None;
    let mut lifetime = None;
    let mut tags = None;
    for part in header.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("malformed header field {part:?}"))?;
        match k.trim() {
            "id" => id = Some(v.trim().to_string()),
            "nominal_capacity" => {
                nominal = Some(
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| format!("bad nominal_capacity {v:?}"))?,
                )
            }
            "lifetime" => {
                lifetime = Some(match v.trim() {
                    "unknown" => None,
                    s => Some(s.parse::<u32>().map_err(|_| format!("bad lifetime {s:?}"))?),
                })
            }
            "tags" => {
                tags = Some(
                    v.split(';')
                        .map(str::trim)
                        .filter(|t| !t.is_empty())
                        .map(String::from)
                        .collect(),
                )
            }
            other => return Err(format!("unknown header field {other:?}")),
        }
    }
    Ok(PendingCell {
        line: 0,
        cell_id: id.ok_or("missing field id")?,
        nominal_capacity: nominal.ok_or("missing field nominal_capacity")?,
        lifetime: lifetime.ok_or("missing field lifetime")?,
        tags: tags.unwrap_or_default(),
        cycles: BTreeMap::new(),
    })
}

/// How to partition cells into train and test sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    /// Random split; `train_fraction` of eligible cells go to training.
    Ratio { train_fraction: f64 },
    /// Fixed id lists.
    Explicit { train: Vec<String>, test: Vec<String> },
    /// Ratio applied separately within groups keyed by the first tag that
    /// starts with `tag_prefix`.
    StratifyByTag { train_fraction: f64, tag_prefix: String },
}

/// Cells usable at horizon `early_cycles`: known lifetime >= H and at least H
/// recorded cycles.
pub fn eligible(cell: &CellRecord, early_cycles: usize) -> bool {
    matches!(cell.lifetime, Some(l) if l as usize >= early_cycles) && cell.cycles.len() >= early_cycles
}

fn ratio_split(ids: &[String], fraction: f64, rng: &mut rng::Rng) -> (Vec<String>, Vec<String>) {
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(rng);
    let n_train = ((fraction * ids.len() as f64).round() as usize).min(ids.len());
    let test = shuffled.split_off(n_train);
    (shuffled, test)
}

pub fn make_split(
    cells: &[CellRecord],
    spec: &SplitSpec,
    early_cycles: usize,
    eol_threshold: f64,
    seed: u64,
) -> Result<SplitConfig> {
    let ok: Vec<&CellRecord> = cells.iter().filter(|c| eligible(c, early_cycles)).collect();
    let ok_ids: Vec<String> = ok.iter().map(|c| c.cell_id.clone()).collect();
    let mut rng = rng::stream(seed, Stream::Split, 0);
    let check_fraction = |f: f64| -> Result<()> {
        if (0.0..=1.0).contains(&f) {
            Ok(())
        } else {
            Err(Error::Split(format!("train fraction {f} outside [0, 1]")))
        }
    };
    let (train, test) = match spec {
        SplitSpec::Ratio { train_fraction } => {
            check_fraction(*train_fraction)?;
            ratio_split(&ok_ids, *train_fraction, &mut rng)
        }
        SplitSpec::Explicit { train, test } => {
            for id in train.iter().chain(test) {
                if !cells.iter().any(|c| &c.cell_id == id) {
                    return Err(Error::Split(format!("unknown cell id {id}")));
                }
            }
            let keep = |ids: &[String]| -> Vec<String> {
                ids.iter().filter(|id| ok_ids.contains(id)).cloned().collect()
            };
            (keep(train), keep(test))
        }
        SplitSpec::StratifyByTag {
            train_fraction,
            tag_prefix,
        } => {
            check_fraction(*train_fraction)?;
            let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for c in &ok {
                let key = c
                    .condition_tags
                    .iter()
                    .find(|t| t.starts_with(tag_prefix.as_str()))
                    .cloned()
                    .unwrap_or_default();
                groups.entry(key).or_default().push(c.cell_id.clone());
            }
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for ids in groups.values() {
                let (a, b) = ratio_split(ids, *train_fraction, &mut rng);
                train.extend(a);
                test.extend(b);
            }
            (train, test)
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::Split(format!(
            "empty side after excluding cells with lifetime < {early_cycles}: {} train, {} test",
            train.len(),
            test.len()
        )));
    }
    SplitConfig::new(train, test, early_cycles, eol_threshold)
}

/// Piecewise-constant current schedule of a cycling protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub tag: String,
    /// `(until_q, c_rate)` segments in increasing `until_q`; the last one
    /// extends to the end of charge.
    pub charge: Vec<[f64; 2]>,
    /// Discharge C-rate (positive).
    pub discharge_rate: f64,
}

impl Protocol {
    fn charge_rate(&self, q: f64) -> f64 {
        self.charge
            .iter()
            .find(|seg| q < seg[0])
            .or(self.charge.last())
            .map_or(1.0, |seg| seg[1])
    }
}

/// After `cycle`, the fade rate is multiplied by `multiplier`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Knee {
    pub cycle: u32,
    pub multiplier: f64,
}

/// Parameters of the synthetic degradation model.
///
/// Normalized capacity at cycle `n` is `1 - a * n^b` (with an optional knee).
/// Voltages are `V_d(Q) = v0 - v1*Q - v2*(1 - cap(n))` and
/// `V_c(Q) = v0 + v1*Q + v2*(1 - cap(n))`, sampled uniformly in Q over
/// `[0, cap(n)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub n_cells: usize,
    pub id_prefix: String,
    pub tags: Vec<String>,
    /// Amp-hours.
    pub nominal_capacity: f64,
    /// Log-uniform range of the fade coefficient `a`.
    pub fade_a: [f64; 2],
    /// Uniform range of the fade exponent `b`.
    pub fade_b: [f64; 2],
    pub knee: Option<Knee>,
    pub v0: f64,
    pub v1: f64,
    pub v2: f64,
    /// One protocol is drawn uniformly per cell.
    pub protocols: Vec<Protocol>,
    pub samples_per_stage: usize,
    /// Cycles of raw signals kept per cell.
    pub stored_cycles: usize,
    /// Gaussian noise on voltage (V) and current (A).
    pub noise_sigma: f64,
    /// Per-sample probability of a single-sample spike (interior samples only).
    pub spike_rate: f64,
    /// Absolute spike amplitude, sign drawn at random.
    pub spike_magnitude: f64,
    pub eol_threshold: f64,
    pub min_lifetime: u32,
    pub max_lifetime: u32,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_cells: 60,
            id_prefix: "syn".into(),
            tags: Vec::new(),
            nominal_capacity: 1.1,
            fade_a: [3e-4, 1.5e-3],
            fade_b: [0.9, 1.1],
            knee: None,
            v0: 3.3,
            v1: 0.4,
            v2: 0.8,
            protocols: vec![
                Protocol {
                    tag: "cc-1c".into(),
                    charge: vec![[1.0, 1.0]],
                    discharge_rate: 2.0,
                },
                Protocol {
                    tag: "fast-4c".into(),
                    charge: vec![[0.5, 4.0], [1.0, 1.0]],
                    discharge_rate: 4.0,
                },
            ],
            samples_per_stage: 40,
            stored_cycles: 100,
            noise_sigma: 1e-3,
            spike_rate: 2e-3,
            spike_magnitude: 0.05,
            eol_threshold: 0.8,
            min_lifetime: 100,
            max_lifetime: 3000,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_cells == 0 {
            return bad("n_cells must be positive".into());
        }
        if !(self.nominal_capacity > 0.0) {
            return bad("nominal_capacity must be positive".into());
        }
        if !(self.fade_a[0] > 0.0 && self.fade_a[0] <= self.fade_a[1]) {
            return bad(format!("fade_a range {:?} invalid", self.fade_a));
        }
        if !(self.fade_b[0] > 0.0 && self.fade_b[0] <= self.fade_b[1]) {
            return bad(format!("fade_b range {:?} invalid", self.fade_b));
        }
        if self.protocols.is_empty() || self.protocols.iter().any(|p| p.charge.is_empty() || !(p.discharge_rate > 0.0) || p.charge.iter().any(|s| !(s[1] > 0.0))) {
            return bad("every protocol needs positive charge and discharge rates".into());
        }
        if self.samples_per_stage < 2 || self.stored_cycles == 0 {
            return bad("samples_per_stage >= 2 and stored_cycles >= 1 required".into());
        }
        if !(self.noise_sigma >= 0.0 && (0.0..=1.0).contains(&self.spike_rate)) {
            return bad("noise_sigma >= 0 and spike_rate in [0, 1] required".into());
        }
        if !(self.eol_threshold > 0.0 && self.eol_threshold < 1.0) {
            return bad("eol_threshold must lie in (0, 1)".into());
        }
        if self.min_lifetime < 1 || self.min_lifetime > self.max_lifetime {
            return bad("need 1 <= min_lifetime <= max_lifetime".into());
        }
        Ok(())
    }
}

/// Fade law of one synthetic cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FadeLaw {
    pub a: f64,
    pub b: f64,
    pub knee: Option<Knee>,
}

impl FadeLaw {
    /// Normalized capacity after `n` cycles.
    pub fn capacity(&self, n: u32) -> f64 {
        let nf = f64::from(n);
        let fade = match self.knee {
            Some(k) if n > k.cycle => {
                let kf = f64::from(k.cycle);
                self.a * kf.powf(self.b) + k.multiplier * self.a * (nf.powf(self.b) - kf.powf(self.b))
            }
            _ => self.a * nf.powf(self.b),
        };
        1.0 - fade
    }
}

/// A generated cell plus its ground-truth degradation law.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCell {
    pub record: CellRecord,
    pub fade: FadeLaw,
    pub protocol: String,
    /// Normalized capacity for cycles `0..=lifetime`.
    pub capacity_trajectory: Vec<f64>,
}

pub fn generate_synthetic(params: &SynthParams) -> Result<Vec<CellRecord>> {
    Ok(generate_synthetic_detailed(params)?
        .into_iter()
        .map(|c| c.record)
        .collect())
}

const MAX_REJECTIONS: usize = 1000;

pub fn generate_synthetic_detailed(params: &SynthParams) -> Result<Vec<SynthCell>> {
    params.validate()?;
    (0..params.n_cells)
        .map(|i| generate_cell(params, i))
        .collect()
}

fn generate_cell(p: &SynthParams, index: usize) -> Result<SynthCell> {
    let mut rng = rng::stream(p.seed, Stream::Synthetic, index as u64);
    let (ln_lo, ln_hi) = (p.fade_a[0].ln(), p.fade_a[1].ln());
    for _ in 0..MAX_REJECTIONS {
        let a = if ln_hi > ln_lo { rng.random_range(ln_lo..ln_hi) } else { ln_lo }.exp();
        let b = if p.fade_b[1] > p.fade_b[0] {
            rng.random_range(p.fade_b[0]..p.fade_b[1])
        } else {
            p.fade_b[0]
        };
        let fade = FadeLaw { a, b, knee: p.knee };
        let mut trajectory = Vec::new();
        let mut lifetime = None;
        for n in 0..=p.max_lifetime {
            let c = fade.capacity(n);
            trajectory.push(c);
            if below_threshold(c, p.eol_threshold) {
                lifetime = Some(n);
                break;
            }
        }
        let Some(lifetime) = lifetime.filter(|&l| l >= p.min_lifetime) else {
            continue;
        };
        let protocol = &p.protocols[rng.random_range(0..p.protocols.len())];
        let noise = Normal::new(0.0, p.noise_sigma).map_err(|e| Error::Synthesis(e.to_string()))?;
        let cycles = (0..p.stored_cycles)
            .map(|n| synth_cycle(p, protocol, fade.capacity(n as u32), n, &noise, &mut rng))
            .collect();
        let mut tags = p.tags.clone();
        tags.push(format!("protocol={}", protocol.tag));
        let record = CellRecord {
            cell_id: format!("{}{:03}", p.id_prefix, index),
            nominal_capacity: p.nominal_capacity,
            cycles,
            lifetime: Some(lifetime),
            condition_tags: tags,
        };
        return Ok(SynthCell {
            record,
            fade,
            protocol: protocol.tag.clone(),
            capacity_trajectory: trajectory,
        });
    }
    Err(Error::Synthesis(format!(
        "cell {index}: no lifetime within [{}, {}] after {MAX_REJECTIONS} draws",
        p.min_lifetime, p.max_lifetime
    )))
}

/// Adds isolated spikes (at least 3 samples apart, never at the endpoints).
fn inject_spikes(values: &mut [f64], p: &SynthParams, rng: &mut rng::Rng) {
    if p.spike_rate <= 0.0 || values.len() < 3 {
        return;
    }
    let mut last: Option<usize> = None;
    for t in 1..values.len() - 1 {
        if rng.random::<f64>() < p.spike_rate && last.is_none_or(|l| t - l >= 3) {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            values[t] += sign * p.spike_magnitude;
            last = Some(t);
        }
    }
}

fn synth_cycle(
    p: &SynthParams,
    protocol: &Protocol,
    cap: f64,
    n: usize,
    noise: &Normal<f64>,
    rng: &mut rng::Rng,
) -> CycleSignals {
    let s = p.samples_per_stage;
    let nominal = p.nominal_capacity;
    let fade = 1.0 - cap;
    let qs: Vec<f64> = (0..s).map(|k| cap * k as f64 / (s - 1) as f64).collect();

    let mut build = |charge: bool, start_time: f64| -> Vec<Sample> {
        let currents: Vec<f64> = qs
            .iter()
            .map(|&q| {
                if charge {
                    protocol.charge_rate(q) * nominal
                } else {
                    -protocol.discharge_rate * nominal
                }
            })
            .collect();
        let mut time = start_time;
        let mut times = Vec::with_capacity(s);
        for k in 0..s {
            if k > 0 {
                let dq_ah = (qs[k] - qs[k - 1]) * nominal;
                time += 3600.0 * dq_ah / currents[k - 1].abs();
            }
            times.push(time);
        }
        let mut voltage: Vec<f64> = qs
            .iter()
            .map(|&q| {
                let v = if charge {
                    p.v0 + p.v1 * q + p.v2 * fade
                } else {
                    p.v0 - p.v1 * q - p.v2 * fade
                };
                v + noise.sample(rng)
            })
            .collect();
        let mut current: Vec<f64> = currents.iter().map(|i| i + noise.sample(rng)).collect();
        inject_spikes(&mut voltage, p, rng);
        inject_spikes(&mut current, p, rng);
        (0..s)
            .map(|k| Sample {
                time: times[k],
                voltage: voltage[k],
                current: current[k],
                capacity: qs[k] * nominal,
            })
            .collect()
    };
    let charge = build(true, 0.0);
    let rest = charge.last().map_or(0.0, |x| x.time) + 600.0;
    let discharge = build(false, rest);
    CycleSignals {
        cycle_index: n,
        charge,
        discharge,
    }
}

/// Independent label check: first crossing of a capacity sequence.
pub fn lifetime_of_trajectory(trajectory: &[f64], threshold: f64) -> Option<u32> {
    lifetime_from_capacity(trajectory, threshold)
}

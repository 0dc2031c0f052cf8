//! Shared domain vocabulary: raw cell recordings, feature maps, difference
//! tensors and train/test splits.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One raw measurement within a charge or discharge stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Seconds.
    pub time: f64,
    /// Volts.
    pub voltage: f64,
    /// Amperes; negative while discharging.
    pub current: f64,
    /// Amp-hours accumulated within the stage.
    pub capacity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Charge,
    Discharge,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Charge => "charge",
            Stage::Discharge => "discharge",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "charge" => Some(Stage::Charge),
            "discharge" => Some(Stage::Discharge),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Raw signals of one cycle. Cycle indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleSignals {
    pub cycle_index: usize,
    pub charge: Vec<Sample>,
    pub discharge: Vec<Sample>,
}

impl CycleSignals {
    pub fn stage(&self, stage: Stage) -> &[Sample] {
        match stage {
            Stage::Charge => &self.charge,
            Stage::Discharge => &self.discharge,
        }
    }
}

/// One battery cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell_id: String,
    /// Amp-hours.
    pub nominal_capacity: f64,
    pub cycles: Vec<CycleSignals>,
    /// Index of the first cycle whose normalized capacity is below the
    /// end-of-life threshold; `None` when unknown.
    pub lifetime: Option<u32>,
    pub condition_tags: Vec<String>,
}

/// One broken invariant found by [`validate_cell`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub cycle: Option<usize>,
    pub stage: Option<Stage>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.cycle, self.stage) {
            (Some(c), Some(s)) => write!(f, "cycle {c} {s}: {}", self.message),
            (Some(c), None) => write!(f, "cycle {c}: {}", self.message),
            _ => f.write_str(&self.message),
        }
    }
}

/// Lists every broken `CellRecord` / `CycleSignals` invariant. Never fails.
pub fn validate_cell(record: &CellRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut cell_level = |message: String| {
        out.push(Violation {
            cycle: None,
            stage: None,
            message,
        })
    };
    if !(record.nominal_capacity > 0.0 && record.nominal_capacity.is_finite()) {
        cell_level(format!(
            "nominal capacity must be positive, got {}",
            record.nominal_capacity
        ));
    }
    if record.lifetime == Some(0) {
        cell_level("lifetime must be at least 1".into());
    }
    for (pos, cycle) in record.cycles.iter().enumerate() {
        if cycle.cycle_index != pos {
            out.push(Violation {
                cycle: Some(cycle.cycle_index),
                stage: None,
                message: format!("expected contiguous cycle index {pos}"),
            });
        }
        for stage in [Stage::Charge, Stage::Discharge] {
            validate_stage(cycle.cycle_index, stage, cycle.stage(stage), &mut out);
        }
    }
    out
}

fn validate_stage(cycle: usize, stage: Stage, samples: &[Sample], out: &mut Vec<Violation>) {
    let mut push = |message: String| {
        out.push(Violation {
            cycle: Some(cycle),
            stage: Some(stage),
            message,
        })
    };
    if samples.len() < 2 {
        push(format!("needs at least 2 samples, has {}", samples.len()));
    }
    if samples.iter().any(|s| {
        !(s.time.is_finite() && s.voltage.is_finite() && s.current.is_finite() && s.capacity.is_finite())
    }) {
        push("non-finite sample value".into());
    }
    if let Some(i) = samples.windows(2).position(|w| w[1].time <= w[0].time) {
        push(format!("time not strictly increasing at sample {}", i + 1));
    }
    if let Some(i) = samples.windows(2).position(|w| w[1].capacity < w[0].capacity) {
        push(format!("capacity decreasing at sample {}", i + 1));
    }
}

/// Named feature planes, in tensor order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    Vc,
    Vd,
    Ic,
    Id,
    DeltaV,
    Resistance,
}

impl Channel {
    pub const ALL: [Channel; 6] = [
        Channel::Vc,
        Channel::Vd,
        Channel::Ic,
        Channel::Id,
        Channel::DeltaV,
        Channel::Resistance,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Vc => "Vc",
            Channel::Vd => "Vd",
            Channel::Ic => "Ic",
            Channel::Id => "Id",
            Channel::DeltaV => "dV",
            Channel::Resistance => "R",
        }
    }
}

pub const NUM_CHANNELS: usize = 6;

/// Capacity-indexed feature tensor of one cell, shape `(6, cycles, width)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub cell_id: String,
    cycles: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(cell_id: impl Into<String>, cycles: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != NUM_CHANNELS * cycles * width {
            return Err(Error::Shape(format!(
                "feature map data has {} values, expected 6 x {cycles} x {width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("feature map contains non-finite values".into()));
        }
        Ok(Self {
            cell_id: cell_id.into(),
            cycles,
            width,
            data,
        })
    }

    pub fn zeros(cell_id: impl Into<String>, cycles: usize, width: usize) -> Self {
        Self {
            cell_id: cell_id.into(),
            cycles,
            width,
            data: vec![0.0; NUM_CHANNELS * cycles * width],
        }
    }

    /// Number of early cycles `H`.
    pub fn cycles(&self) -> usize {
        self.cycles
    }

    /// Q-grid resolution `W`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [NUM_CHANNELS, self.cycles, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, channel: usize, cycle: usize, q: usize) -> f64 {
        self.data[(channel * self.cycles + cycle) * self.width + q]
    }

    pub fn plane(&self, channel: Channel) -> &[f64] {
        let n = self.cycles * self.width;
        &self.data[channel.index() * n..(channel.index() + 1) * n]
    }

    pub fn row(&self, channel: Channel, cycle: usize) -> &[f64] {
        let start = (channel.index() * self.cycles + cycle) * self.width;
        &self.data[start..start + self.width]
    }

    pub(crate) fn row_mut(&mut self, channel: Channel, cycle: usize) -> &mut [f64] {
        let start = (channel.index() * self.cycles + cycle) * self.width;
        &mut self.data[start..start + self.width]
    }

    /// Largest `|dV - (Vc - Vd)|` over the map.
    pub fn delta_v_residual(&self) -> f64 {
        let vc = self.plane(Channel::Vc);
        let vd = self.plane(Channel::Vd);
        let dv = self.plane(Channel::DeltaV);
        vc.iter()
            .zip(vd)
            .zip(dv)
            .map(|((c, d), g)| (g - (c - d)).abs())
            .fold(0.0, f64::max)
    }

    /// Checks the dV-plane consistency invariant to within 1e-9.
    ///
    /// Maps with the Vc, Vd or dV plane masked off are exempt.
    pub fn check_delta_v(&self) -> bool {
        let zero = |c: Channel| self.plane(c).iter().all(|&v| v == 0.0);
        if zero(Channel::DeltaV) || zero(Channel::Vc) || zero(Channel::Vd) {
            return true;
        }
        self.delta_v_residual() <= 1e-9
    }
}

/// What a difference tensor was taken against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DiffReference {
    /// Same cell, fixed reference cycle.
    Cycle(usize),
    /// Another cell with known lifetime.
    Cell { cell_id: String, lifetime: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiffKind {
    IntraCell,
    InterCell,
}

/// Intra-cell or inter-cell difference of feature maps, shape `(6, H, W)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffTensor {
    pub target_id: String,
    pub reference: DiffReference,
    cycles: usize,
    width: usize,
    data: Vec<f64>,
}

impl DiffTensor {
    pub(crate) fn new(
        target_id: String,
        reference: DiffReference,
        cycles: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != NUM_CHANNELS * cycles * width {
            return Err(Error::Shape(format!(
                "difference tensor has {} values, expected 6 x {cycles} x {width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("difference tensor contains non-finite values".into()));
        }
        if let DiffReference::Cell { lifetime, .. } = &reference {
            if !lifetime.is_finite() {
                return Err(Error::Config("inter-cell reference needs a known lifetime".into()));
            }
        }
        Ok(Self {
            target_id,
            reference,
            cycles,
            width,
            data,
        })
    }

    pub fn kind(&self) -> DiffKind {
        match self.reference {
            DiffReference::Cycle(_) => DiffKind::IntraCell,
            DiffReference::Cell { .. } => DiffKind::InterCell,
        }
    }

    /// Reference lifetime for inter-cell tensors.
    pub fn reference_lifetime(&self) -> Option<f64> {
        match self.reference {
            DiffReference::Cell { lifetime, .. } => Some(lifetime),
            DiffReference::Cycle(_) => None,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [NUM_CHANNELS, self.cycles, self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, channel: usize, cycle: usize, q: usize) -> f64 {
        self.data[(channel * self.cycles + cycle) * self.width + q]
    }
}

/// Train/test partition plus the prediction setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// Number of early cycles `H` used as model input.
    pub early_cycles: usize,
    /// End of life as a fraction of nominal capacity.
    pub eol_threshold: f64,
}

impl SplitConfig {
    pub fn new(
        train_ids: Vec<String>,
        test_ids: Vec<String>,
        early_cycles: usize,
        eol_threshold: f64,
    ) -> Result<Self> {
        if train_ids.is_empty() || test_ids.is_empty() {
            return Err(Error::Split("train and test sets must both be nonempty".into()));
        }
        let train: BTreeSet<&String> = train_ids.iter().collect();
        if train.len() != train_ids.len() {
            return Err(Error::Split("duplicate id in train set".into()));
        }
        if let Some(dup) = test_ids.iter().find(|id| train.contains(id)) {
            return Err(Error::Split(format!("cell {dup} is in both train and test")));
        }
        if early_cycles == 0 {
            return Err(Error::Split("early cycle count must be positive".into()));
        }
        if !(eol_threshold > 0.0 && eol_threshold < 1.0) {
            return Err(Error::Split(format!(
                "eol threshold must lie in (0, 1), got {eol_threshold}"
            )));
        }
        Ok(Self {
            train_ids,
            test_ids,
            early_cycles,
            eol_threshold,
        })
    }
}

/// First cycle index whose normalized capacity falls below `threshold`.
/// Values within this distance of the threshold count as "at" it, so a
/// capacity that lands on the threshold only through rounding does not cross.
pub const EOL_TOLERANCE: f64 = 1e-12;

pub fn below_threshold(capacity: f64, threshold: f64) -> bool {
    capacity < threshold - EOL_TOLERANCE
}

pub fn lifetime_from_capacity(normalized: &[f64], threshold: f64) -> Option<u32> {
    normalized
        .iter()
        .position(|&c| below_threshold(c, threshold))
        .map(|i| i as u32)
}

//! Six-channel capacity-indexed feature maps and the difference tensors
//! derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{despike, interp_to_grid, normalize_capacity, FilterParams, QGrid};
use crate::types::{
    CellRecord, Channel, DiffReference, DiffTensor, FeatureMap, Sample, NUM_CHANNELS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturizeConfig {
    /// Q-grid resolution `W`.
    pub grid_points: usize,
    /// Number of early cycles `H`.
    pub early_cycles: usize,
    /// Row subtracted from every cycle for intra-cell differences.
    pub intra_reference_cycle: usize,
    /// Channels in `[Vc, Vd, Ic, Id, dV, R]` order; disabled ones are zero-filled.
    pub channel_mask: [bool; NUM_CHANNELS],
    /// Smallest `|Ic - Id|` used as the resistance denominator, in amperes.
    pub resistance_epsilon: f64,
    pub filter: FilterParams,
    /// Standardize difference tensors with training-set channel statistics.
    pub standardize: bool,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        Self {
            grid_points: 100,
            early_cycles: 100,
            intra_reference_cycle: 9,
            channel_mask: [true; NUM_CHANNELS],
            resistance_epsilon: 1e-3,
            filter: FilterParams::default(),
            standardize: true,
        }
    }
}

impl FeaturizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.early_cycles == 0 {
            return Err(Error::Config("early_cycles must be positive".into()));
        }
        if self.intra_reference_cycle >= self.early_cycles {
            return Err(Error::Config(format!(
                "intra_reference_cycle {} must be below early_cycles {}",
                self.intra_reference_cycle, self.early_cycles
            )));
        }
        if !self.channel_mask.iter().any(|&c| c) {
            return Err(Error::Config("channel_mask must enable at least one channel".into()));
        }
        if !(self.resistance_epsilon > 0.0) {
            return Err(Error::Config("resistance_epsilon must be positive".into()));
        }
        self.filter.validate()?;
        QGrid::uniform(self.grid_points)?;
        Ok(())
    }

    pub fn grid(&self) -> Result<QGrid> {
        QGrid::uniform(self.grid_points)
    }
}

/// Parses a channel mask such as `"111111"` or `"Vc,Vd,dV"`.
pub fn parse_channel_mask(text: &str) -> Result<[bool; NUM_CHANNELS]> {
    let t = text.trim();
    let mut mask = [false; NUM_CHANNELS];
    if t.len() == NUM_CHANNELS && t.chars().all(|c| c == '0' || c == '1') {
        for (m, c) in mask.iter_mut().zip(t.chars()) {
            *m = c == '1';
        }
    } else {
        for name in t.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let ch = Channel::ALL
                .iter()
                .find(|c| c.name().eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::Config(format!("unknown channel {name:?}")))?;
            mask[ch.index()] = true;
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Config(format!("channel mask {text:?} enables nothing")));
    }
    Ok(mask)
}

/// Voltage and current of one stage resampled onto the Q grid.
fn stage_curves(
    samples: &[Sample],
    nominal_capacity: f64,
    grid: &QGrid,
    filter: &FilterParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let voltage: Vec<f64> = samples.iter().map(|s| s.voltage).collect();
    let current: Vec<f64> = samples.iter().map(|s| s.current).collect();
    let (voltage, current) = if samples.len() >= filter.window {
        (despike(&voltage, filter)?, despike(&current, filter)?)
    } else {
        (voltage, current)
    };
    let caps: Vec<f64> = samples.iter().map(|s| s.capacity).collect();
    let q = normalize_capacity(&caps, nominal_capacity)?;
    let v_pts: Vec<(f64, f64)> = q.iter().copied().zip(voltage).collect();
    let i_pts: Vec<(f64, f64)> = q.iter().copied().zip(current).collect();
    Ok((interp_to_grid(&v_pts, grid)?, interp_to_grid(&i_pts, grid)?))
}

/// Builds the `(6, H, W)` map `[Vc, Vd, Ic, Id, dV, R]` from the first `H`
/// cycles of `cell`.
///
/// `R = (Vc - Vd) / (sign(Ic - Id) * max(|Ic - Id|, eps))`, with `sign(0) = +1`.
pub fn build_feature_map(cell: &CellRecord, cfg: &FeaturizeConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    let h_cycles = cfg.early_cycles;
    if cell.cycles.len() < h_cycles {
        return Err(Error::InsufficientCycles {
            cell_id: cell.cell_id.clone(),
            have: cell.cycles.len(),
            need: h_cycles,
        });
    }
    let grid = cfg.grid()?;
    let mut map = FeatureMap::zeros(cell.cell_id.clone(), h_cycles, grid.len());
    for (h, cycle) in cell.cycles.iter().take(h_cycles).enumerate() {
        let (vc, ic) = stage_curves(&cycle.charge, cell.nominal_capacity, &grid, &cfg.filter)
            .map_err(|e| Error::at_cycle(h, e))?;
        let (vd, id) = stage_curves(&cycle.discharge, cell.nominal_capacity, &grid, &cfg.filter)
            .map_err(|e| Error::at_cycle(h, e))?;
        let dv: Vec<f64> = vc.iter().zip(&vd).map(|(c, d)| c - d).collect();
        let r: Vec<f64> = dv
            .iter()
            .zip(ic.iter().zip(&id))
            .map(|(dv, (c, d))| {
                let di = c - d;
                let denom = di.abs().max(cfg.resistance_epsilon);
                if di < 0.0 {
                    -dv / denom
                } else {
                    dv / denom
                }
            })
            .collect();
        for (channel, values) in Channel::ALL.into_iter().zip([vc, vd, ic, id, dv, r]) {
            if cfg.channel_mask[channel.index()] {
                map.row_mut(channel, h).copy_from_slice(&values);
            }
        }
    }
    if map.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape(format!(
            "feature map of {} has non-finite entries",
            cell.cell_id
        )));
    }
    Ok(map)
}

/// Every cycle row minus the row of `reference_cycle`.
pub fn intra_diff(map: &FeatureMap, reference_cycle: usize) -> Result<DiffTensor> {
    let (h, w) = (map.cycles(), map.width());
    if reference_cycle >= h {
        return Err(Error::Config(format!(
            "reference cycle {reference_cycle} outside {h} early cycles"
        )));
    }
    let mut data = Vec::with_capacity(map.data().len());
    for c in Channel::ALL {
        let reference = map.row(c, reference_cycle);
        for cycle in 0..h {
            data.extend(map.row(c, cycle).iter().zip(reference).map(|(a, b)| a - b));
        }
    }
    DiffTensor::new(map.cell_id.clone(), DiffReference::Cycle(reference_cycle), h, w, data)
}

/// `target - reference`, elementwise.
pub fn inter_diff(target: &FeatureMap, reference: &FeatureMap, reference_lifetime: f64) -> Result<DiffTensor> {
    if target.shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "target {:?} vs reference {:?}",
            target.shape(),
            reference.shape()
        )));
    }
    let data = target
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| a - b)
        .collect();
    DiffTensor::new(
        target.cell_id.clone(),
        DiffReference::Cell {
            cell_id: reference.cell_id.clone(),
            lifetime: reference_lifetime,
        },
        target.cycles(),
        target.width(),
        data,
    )
}

/// Per-channel affine normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; NUM_CHANNELS],
    pub std: [f64; NUM_CHANNELS],
}

impl ChannelStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; NUM_CHANNELS],
            std: [1.0; NUM_CHANNELS],
        }
    }

    fn apply(&self, data: &[f64], out: &mut [f64]) {
        let plane = data.len() / NUM_CHANNELS;
        for c in 0..NUM_CHANNELS {
            let (m, inv) = (self.mean[c], 1.0 / self.std[c]);
            for (o, v) in out[c * plane..(c + 1) * plane]
                .iter_mut()
                .zip(&data[c * plane..(c + 1) * plane])
            {
                *o = (v - m) * inv;
            }
        }
    }
}

fn usable_std(var: f64) -> f64 {
    let s = var.max(0.0).sqrt();
    if s > 1e-12 {
        s
    } else {
        1.0
    }
}

/// Channel statistics of the two difference families, fit on training maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub intra: ChannelStats,
    /// Inter-cell differences over ordered pairs have zero mean; only the
    /// scale is fit.
    pub inter: ChannelStats,
}

impl FeatureStats {
    pub fn identity() -> Self {
        Self {
            intra: ChannelStats::identity(),
            inter: ChannelStats::identity(),
        }
    }

    /// Fits intra statistics over all training intra-cell differences and
    /// inter statistics over all ordered training pairs `i != j`.
    pub fn fit(maps: &[FeatureMap], reference_cycle: usize) -> Result<Self> {
        let first = maps.first().ok_or(Error::Empty("no training feature maps"))?;
        let shape = first.shape();
        if maps.iter().any(|m| m.shape() != shape) {
            return Err(Error::Shape("training feature maps differ in shape".into()));
        }
        let plane = shape[1] * shape[2];
        let n = maps.len();

        let mut intra = ChannelStats::identity();
        let mut sums = [0.0; NUM_CHANNELS];
        let mut sq = [0.0; NUM_CHANNELS];
        for m in maps {
            let d = intra_diff(m, reference_cycle)?;
            for c in 0..NUM_CHANNELS {
                for v in &d.data()[c * plane..(c + 1) * plane] {
                    sums[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let count = (n * plane) as f64;
        for c in 0..NUM_CHANNELS {
            let mean = sums[c] / count;
            intra.mean[c] = mean;
            intra.std[c] = usable_std(sq[c] / count - mean * mean);
        }

        // E_{i != j}[(x_i - x_j)^2] = 2N/(N-1) * population variance, per pixel.
        let mut inter = ChannelStats::identity();
        if n >= 2 {
            for c in 0..NUM_CHANNELS {
                let mut acc = 0.0;
                for p in 0..plane {
                    let idx = c * plane + p;
                    let mean = maps.iter().map(|m| m.data()[idx]).sum::<f64>() / n as f64;
                    let var = maps
                        .iter()
                        .map(|m| (m.data()[idx] - mean).powi(2))
                        .sum::<f64>()
                        / n as f64;
                    acc += var;
                }
                let pair_ms = 2.0 * n as f64 / (n - 1) as f64 * acc / plane as f64;
                inter.std[c] = usable_std(pair_ms);
            }
        }
        Ok(Self { intra, inter })
    }

    /// Standardized copy of `diff`'s data.
    pub fn standardize(&self, diff: &DiffTensor) -> Vec<f64> {
        let stats = match diff.kind() {
            crate::types::DiffKind::IntraCell => &self.intra,
            crate::types::DiffKind::InterCell => &self.inter,
        };
        let mut out = vec![0.0; diff.data().len()];
        stats.apply(diff.data(), &mut out);
        out
    }
}

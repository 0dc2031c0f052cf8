//! Browser bindings for three interactive views: spike filtering on a
//! synthetic stage signal, capacity fade of a synthetic population, and the
//! intra-cell and inter-cell difference maps the two model branches read.
//!
//! Each binding returns a JSON string. The plain functions behind them are
//! ordinary Rust so they can be tested natively.

use cellspan::data_io::{generate_synthetic_detailed, SynthParams};
use cellspan::featurize::{build_feature_map, inter_diff, intra_diff, FeaturizeConfig};
use cellspan::preprocess::{despike, FilterMode, FilterParams};
use cellspan::types::Channel;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Settings of the spike-filter view.
#[derive(Debug, Clone, Copy)]
pub struct DespikeInput {
    pub samples: usize,
    pub noise_sigma: f64,
    pub spike_rate: f64,
    pub spike_magnitude: f64,
    pub window: usize,
    pub spike_factor: f64,
    pub literal: bool,
    pub seed: u64,
}

/// Discharge voltage of the first cycle of a synthetic cell, before and
/// after the spike filter, with the replaced indices.
pub fn despike_view(input: &DespikeInput) -> cellspan::Result<Value> {
    let params = SynthParams {
        n_cells: 1,
        samples_per_stage: input.samples,
        stored_cycles: 1,
        min_lifetime: 1,
        noise_sigma: input.noise_sigma,
        spike_rate: input.spike_rate,
        spike_magnitude: input.spike_magnitude,
        seed: input.seed,
        ..SynthParams::default()
    };
    let cell = generate_synthetic_detailed(&params)?.remove(0);
    let raw: Vec<f64> = cell.record.cycles[0].discharge.iter().map(|s| s.voltage).collect();
    let filter = FilterParams {
        window: input.window,
        spike_factor: input.spike_factor,
        mode: if input.literal {
            FilterMode::Literal
        } else {
            FilterMode::DeviationBased
        },
    };
    let cleaned = despike(&raw, &filter)?;
    let replaced: Vec<usize> = (0..raw.len()).filter(|&i| raw[i] != cleaned[i]).collect();
    Ok(json!({ "raw": raw, "cleaned": cleaned, "replaced": replaced }))
}

/// Capacity-fade settings of the population view.
#[derive(Debug, Clone, Copy)]
pub struct PopulationInput {
    pub cells: usize,
    pub fade_a: [f64; 2],
    pub fade_b: [f64; 2],
    pub seed: u64,
}

fn population_params(input: &PopulationInput, stored_cycles: usize) -> SynthParams {
    SynthParams {
        n_cells: input.cells,
        fade_a: input.fade_a,
        fade_b: input.fade_b,
        stored_cycles,
        min_lifetime: SynthParams::default().min_lifetime.max(stored_cycles as _),
        samples_per_stage: 24,
        seed: input.seed,
        ..SynthParams::default()
    }
}

/// Normalized capacity trajectories and lifetimes of a synthetic population.
pub fn population_view(input: &PopulationInput) -> cellspan::Result<Value> {
    let cells = generate_synthetic_detailed(&population_params(input, 1))?;
    let rows: Vec<Value> = cells
        .iter()
        .map(|c| {
            json!({
                "id": c.record.cell_id,
                "protocol": c.protocol,
                "lifetime": c.record.lifetime,
                "a": c.fade.a,
                "b": c.fade.b,
                "capacity": c.capacity_trajectory,
            })
        })
        .collect();
    Ok(json!({ "cells": rows }))
}

/// Settings of the difference-map view.
#[derive(Debug, Clone, Copy)]
pub struct DiffInput {
    pub population: PopulationInput,
    pub early_cycles: usize,
    pub grid_points: usize,
    pub reference_cycle: usize,
    pub channel: usize,
    pub target: usize,
    pub reference: usize,
}

/// One channel of a target's feature map, its intra-cell difference and its
/// difference against a reference cell, each `early_cycles x grid_points`.
pub fn difference_view(input: &DiffInput) -> cellspan::Result<Value> {
    let channel = *Channel::ALL
        .get(input.channel)
        .ok_or_else(|| cellspan::Error::Config(format!("channel {} out of range", input.channel)))?;
    let cells = generate_synthetic_detailed(&population_params(&input.population, input.early_cycles))?;
    let pick = |i: usize| {
        cells
            .get(i)
            .ok_or_else(|| cellspan::Error::Config(format!("cell {i} out of range ({} cells)", cells.len())))
    };
    let (target, reference) = (pick(input.target)?, pick(input.reference)?);
    let cfg = FeaturizeConfig {
        early_cycles: input.early_cycles,
        grid_points: input.grid_points,
        intra_reference_cycle: input.reference_cycle,
        ..FeaturizeConfig::default()
    };
    cfg.validate()?;
    let t = build_feature_map(&target.record, &cfg)?;
    let r = build_feature_map(&reference.record, &cfg)?;
    let reference_lifetime = f64::from(reference.record.lifetime.unwrap_or(0));
    let intra = intra_diff(&t, input.reference_cycle)?;
    let inter = inter_diff(&t, &r, reference_lifetime)?;
    let (h, w) = (input.early_cycles, input.grid_points);
    let plane = |get: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
        (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| get(y, x)).collect()
    };
    let c = channel.index();
    Ok(json!({
        "channel": channel.name(),
        "height": h,
        "width": w,
        "target": { "id": target.record.cell_id, "lifetime": target.record.lifetime },
        "reference": { "id": reference.record.cell_id, "lifetime": reference.record.lifetime },
        "map": plane(&|y, x| t.get(c, y, x)),
        "intra": plane(&|y, x| intra.get(c, y, x)),
        "inter": plane(&|y, x| inter.get(c, y, x)),
    }))
}

#[wasm_bindgen(js_name = despike)]
#[allow(clippy::too_many_arguments)]
pub fn despike_js(
    samples: usize,
    noise_sigma: f64,
    spike_rate: f64,
    spike_magnitude: f64,
    window: usize,
    spike_factor: f64,
    literal: bool,
    seed: u32,
) -> Result<String, JsError> {
    let input = DespikeInput {
        samples,
        noise_sigma,
        spike_rate,
        spike_magnitude,
        window,
        spike_factor,
        literal,
        seed: seed.into(),
    };
    despike_view(&input).map(|v| v.to_string()).map_err(err)
}

#[wasm_bindgen(js_name = population)]
pub fn population_js(cells: usize, a_lo: f64, a_hi: f64, b_lo: f64, b_hi: f64, seed: u32) -> Result<String, JsError> {
    let input = PopulationInput {
        cells,
        fade_a: [a_lo, a_hi],
        fade_b: [b_lo, b_hi],
        seed: seed.into(),
    };
    population_view(&input).map(|v| v.to_string()).map_err(err)
}

#[wasm_bindgen(js_name = differences)]
#[allow(clippy::too_many_arguments)]
pub fn differences_js(
    cells: usize,
    a_lo: f64,
    a_hi: f64,
    b_lo: f64,
    b_hi: f64,
    seed: u32,
    early_cycles: usize,
    grid_points: usize,
    reference_cycle: usize,
    channel: usize,
    target: usize,
    reference: usize,
) -> Result<String, JsError> {
    let input = DiffInput {
        population: PopulationInput {
            cells,
            fade_a: [a_lo, a_hi],
            fade_b: [b_lo, b_hi],
            seed: seed.into(),
        },
        early_cycles,
        grid_points,
        reference_cycle,
        channel,
        target,
        reference,
    };
    difference_view(&input).map(|v| v.to_string()).map_err(err)
}

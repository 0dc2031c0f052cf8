//! Metrics, error curves, reference sweeps, branch ablations and the
//! low-resource scenario runner.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{intra_diff, inter_diff, FeaturizeConfig};
use crate::model::{BatModel, Combine, Geometry, LossWeights};
use crate::preprocess::median;
use crate::rng::{self, Stream};
use crate::train::{train_model, Branches, TrainConfig, TrainSet, TrainState};
use crate::types::{DiffTensor, FeatureMap};

fn check_lengths(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let sq: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Absolute error relative to the ground-truth label.
pub fn ape(pred: f64, truth: f64) -> Result<f64> {
    if truth == 0.0 {
        return Err(Error::ZeroTruth { index: 0 });
    }
    Ok((pred - truth).abs() / truth.abs())
}

pub fn mape(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let mut sum = 0.0;
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        sum += ape(*p, *t).map_err(|_| Error::ZeroTruth { index: i })?;
    }
    Ok(sum / pred.len() as f64)
}

/// Cumulative absolute error after sorting cells by ascending error.
/// Returns `(fraction_of_cells, cumulative_abs_error)` points.
pub fn cumulative_error_curve(abs_errors: &[f64]) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..abs_errors.len()).collect();
    order.sort_by(|&a, &b| abs_errors[a].total_cmp(&abs_errors[b]));
    cumulative_error_curve_ordered(abs_errors, &order)
}

/// Cumulative curve in a caller-fixed cell order, for comparing methods on
/// one shared ordering.
pub fn cumulative_error_curve_ordered(abs_errors: &[f64], order: &[usize]) -> Vec<(f64, f64)> {
    let n = order.len() as f64;
    let mut acc = 0.0;
    order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            acc += abs_errors[i];
            ((k + 1) as f64 / n, acc)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub cell_id: String,
    pub true_lifetime: f64,
    pub predicted: f64,
    pub ape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_cell: Vec<CellScore>,
    pub rmse: f64,
    pub mape: f64,
    pub cumulative_curve: Vec<(f64, f64)>,
    pub config_hash: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn new(
        ids: &[String],
        truth: &[f64],
        pred: &[f64],
        config_hash: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        check_lengths(pred, truth)?;
        if ids.len() != truth.len() {
            return Err(Error::LengthMismatch {
                left: ids.len(),
                right: truth.len(),
            });
        }
        let mut per_cell = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            per_cell.push(CellScore {
                cell_id: id.clone(),
                true_lifetime: truth[i],
                predicted: pred[i],
                ape: ape(pred[i], truth[i]).map_err(|_| Error::ZeroTruth { index: i })?,
            });
        }
        let abs: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
        Ok(Self {
            per_cell,
            rmse: rmse(pred, truth)?,
            mape: mape(pred, truth)?,
            cumulative_curve: cumulative_error_curve(&abs),
            config_hash: config_hash.into(),
            seed,
        })
    }

    /// Recomputes RMSE and MAPE from the per-cell rows; both must match the
    /// stored values within `tol`.
    pub fn recompute_check(&self, tol: f64) -> Result<()> {
        let pred: Vec<f64> = self.per_cell.iter().map(|c| c.predicted).collect();
        let truth: Vec<f64> = self.per_cell.iter().map(|c| c.true_lifetime).collect();
        let r = rmse(&pred, &truth)?;
        let m = self.per_cell.iter().map(|c| c.ape).sum::<f64>() / self.per_cell.len() as f64;
        if (r - self.rmse).abs() > tol || (m - self.mape).abs() > tol {
            return Err(Error::Config(format!(
                "report inconsistent: rmse {} vs {r}, mape {} vs {m}",
                self.rmse, self.mape
            )));
        }
        Ok(())
    }

    /// One JSON object per cell followed by a summary line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.per_cell {
            let mut v = serde_json::to_value(c)?;
            v["config_hash"] = self.config_hash.clone().into();
            v["seed"] = self.seed.into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": true,
            "rmse": self.rmse,
            "mape": self.mape,
            "cells": self.per_cell.len(),
            "config_hash": self.config_hash,
            "seed": self.seed,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        Ok(out)
    }
}

/// Plot data as `series,x,y` rows.
pub fn plot_data(series: &[(&str, &[(f64, f64)])]) -> String {
    let mut out = String::from("series,x,y\n");
    for (name, points) in series {
        for (x, y) in points.iter() {
            writeln!(out, "{name},{x},{y}").expect("write to string");
        }
    }
    out
}

/// Predicts the mean training lifetime for every cell.
pub fn training_mean_baseline(train_lifetimes: &[f64], n: usize) -> Result<Vec<f64>> {
    if train_lifetimes.is_empty() {
        return Err(Error::Empty("training lifetimes"));
    }
    let m = train_lifetimes.iter().sum::<f64>() / train_lifetimes.len() as f64;
    Ok(vec![m; n])
}

/// Inference options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Reference cells per target.
    pub references: usize,
    pub combine: Combine,
    /// Reference counts for sweeps.
    pub sweep_sizes: Vec<usize>,
    /// Evaluation / training seeds for multi-run commands.
    pub seeds: Vec<u64>,
    /// Target-cell budgets for the low-resource runner.
    pub budgets: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            references: 32,
            combine: Combine::Median,
            sweep_sizes: vec![1, 2, 4, 8, 16, 32, 64],
            seeds: (0..8).collect(),
            budgets: vec![1, 2, 4, 8, 16],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.references == 0 || self.sweep_sizes.contains(&0) {
            return Err(Error::Config("reference counts must be positive".into()));
        }
        Ok(())
    }
}

/// `k` distinct pool indices for target `target`, or the whole pool when
/// `k >= pool`.
pub fn sample_references(pool: usize, k: usize, seed: u64, target: usize) -> Vec<usize> {
    if k >= pool {
        return (0..pool).collect();
    }
    let mut rng = rng::stream(seed, Stream::References, target as u64);
    let mut picked = index::sample(&mut rng, pool, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Branch outputs of one model for every target and every pool reference.
/// Any reference subset, blend weight or combine rule can then be scored
/// without running the network again.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseTable {
    /// Intra-branch lifetime estimate per target, in cycles.
    pub intra: Vec<f64>,
    /// `per_reference[t][r]` = reference lifetime + predicted difference.
    pub per_reference: Vec<Vec<f64>>,
}

impl PairwiseTable {
    /// With `with_inter == false` only the intra column is computed.
    pub fn build(model: &BatModel, targets: &[FeatureMap], pool: &TrainSet, with_inter: bool) -> Result<Self> {
        let started = Instant::now();
        let intra_x = targets
            .iter()
            .map(|m| intra_diff(m, model.intra_reference_cycle))
            .collect::<Result<Vec<_>>>()?;
        let intra = model
            .forward_intra(&intra_x.iter().collect::<Vec<_>>())?
            .into_iter()
            .map(|d| model.label_center + d)
            .collect();
        let mut per_reference = Vec::with_capacity(targets.len());
        if with_inter {
            for t in targets {
                let diffs: Vec<DiffTensor> = pool
                    .maps
                    .iter()
                    .zip(&pool.lifetimes)
                    .map(|(m, y)| inter_diff(t, m, *y))
                    .collect::<Result<_>>()?;
                let deltas = model.forward_inter(&diffs.iter().collect::<Vec<_>>())?;
                per_reference.push(deltas.iter().zip(&pool.lifetimes).map(|(d, y)| y + d).collect());
            }
        }
        let secs = started.elapsed().as_secs_f64();
        log::info!(
            "scored {} targets x {} references in {secs:.2}s ({:.1} cells/s)",
            targets.len(),
            if with_inter { pool.len() } else { 0 },
            targets.len() as f64 / secs.max(1e-9)
        );
        Ok(Self { intra, per_reference })
    }

    pub fn inter(&self, target: usize, refs: &[usize], combine: Combine) -> f64 {
        let vals: Vec<f64> = refs.iter().map(|&r| self.per_reference[target][r]).collect();
        combine.apply(&vals)
    }

    /// Blended prediction, clamped below at one cycle.
    pub fn predict(&self, target: usize, refs: &[usize], alpha: f64, combine: Combine) -> f64 {
        if alpha >= 1.0 {
            return self.intra[target].max(1.0);
        }
        (alpha * self.intra[target] + (1.0 - alpha) * self.inter(target, refs, combine)).max(1.0)
    }

    /// Predictions for all targets with `k` sampled references each.
    pub fn predict_all(&self, k: usize, alpha: f64, combine: Combine, seed: u64) -> Vec<f64> {
        let pool = self.per_reference.first().map_or(0, Vec::len);
        (0..self.intra.len())
            .map(|t| self.predict(t, &sample_references(pool, k, seed, t), alpha, combine))
            .collect()
    }
}

/// Held-out cells with known lifetimes.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub ids: Vec<String>,
    pub maps: Vec<FeatureMap>,
    pub lifetimes: Vec<f64>,
}

/// Scores `model` on `test` with references drawn from `pool`; `alpha` is
/// the intra-branch share of the blend.
pub fn evaluate(
    model: &BatModel,
    test: &TestSet,
    pool: &TrainSet,
    alpha: f64,
    cfg: &EvalConfig,
    config_hash: &str,
    seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    LossWeights { lambda: 0.0, alpha }.validate()?;
    let table = PairwiseTable::build(model, &test.maps, pool, alpha < 1.0)?;
    let pred = table.predict_all(cfg.references, alpha, cfg.combine, seed);
    EvalReport::new(&test.ids, &test.lifetimes, &pred, config_hash, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub size: usize,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub per_seed: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// RMSE mean and sample standard deviation across `seeds` for every
/// reference count, in ascending order of count.
pub fn reference_sweep(
    table: &PairwiseTable,
    truth: &[f64],
    sizes: &[usize],
    seeds: &[u64],
    alpha: f64,
    combine: Combine,
) -> Result<Vec<SweepRow>> {
    let pool = table.per_reference.first().map_or(0, Vec::len);
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    if let Some(&max) = sizes.last() {
        if max > pool {
            return Err(Error::TooFewCells { need: max, have: pool });
        }
    }
    if seeds.is_empty() {
        return Err(Error::Empty("sweep seeds"));
    }
    sizes
        .into_iter()
        .map(|k| {
            let per_seed = seeds
                .iter()
                .map(|&s| rmse(&table.predict_all(k, alpha, combine, s), truth))
                .collect::<Result<Vec<_>>>()?;
            let (mean_rmse, std_rmse) = mean_std(&per_seed);
            Ok(SweepRow {
                size: k,
                mean_rmse,
                std_rmse,
                per_seed,
            })
        })
        .collect()
}

/// Per-target absolute errors of single-reference inter predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceExtremes {
    pub best: f64,
    /// Median over references of the single-reference error.
    pub median: f64,
    pub worst: f64,
    /// Error of the median-combined prediction over the whole pool.
    pub combined: f64,
}

pub fn best_worst_median_reference(table: &PairwiseTable, truth: &[f64]) -> Result<Vec<ReferenceExtremes>> {
    if table.per_reference.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: table.per_reference.len(),
            right: truth.len(),
        });
    }
    table
        .per_reference
        .iter()
        .zip(truth)
        .map(|(preds, &y)| {
            if preds.is_empty() {
                return Err(Error::Empty("reference pool"));
            }
            let errs: Vec<f64> = preds.iter().map(|p| (p - y).abs()).collect();
            Ok(ReferenceExtremes {
                best: errs.iter().copied().fold(f64::INFINITY, f64::min),
                median: median(&errs),
                worst: errs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                combined: (median(preds) - y).abs(),
            })
        })
        .collect()
}

/// Model variants compared in branch ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    IntraOnly,
    InterOnly,
    EnsembleOfSeparate,
    Joint,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::IntraOnly,
        Variant::InterOnly,
        Variant::EnsembleOfSeparate,
        Variant::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::IntraOnly => "intra-only",
            Variant::InterOnly => "inter-only",
            Variant::EnsembleOfSeparate => "ensemble-of-separate",
            Variant::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// Data and settings shared by every run of an experiment.
#[derive(Debug, Clone)]
pub struct Experiment<'a> {
    pub train: &'a TrainSet,
    pub test: &'a TestSet,
    pub geometry: Geometry,
    pub featurize: &'a FeaturizeConfig,
    pub train_cfg: &'a TrainConfig,
    pub eval_cfg: &'a EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub variant: Variant,
    pub seed: u64,
    pub rmse: f64,
    pub mape: f64,
    pub predictions: Vec<f64>,
}

fn train_branches(exp: &Experiment, branches: Branches, seed: u64) -> Result<TrainState> {
    let cfg = TrainConfig {
        branches,
        seed,
        ..exp.train_cfg.clone()
    };
    train_model(exp.train, exp.geometry.clone(), exp.featurize, &cfg, |_, _| Ok(()))
}

/// Trains the models the requested variants need for one seed and tabulates
/// their branch outputs on the test set. Models shared between variants
/// (the separate branches feeding the ensemble) are trained once.
pub fn ablation_tables(exp: &Experiment, variants: &[Variant], seed: u64) -> Result<HashMap<Branches, PairwiseTable>> {
    exp.eval_cfg.validate()?;
    let alpha = exp.train_cfg.weights.alpha;
    let needs = |v: Variant| variants.contains(&v) || variants.contains(&Variant::EnsembleOfSeparate);
    let mut tables = HashMap::new();
    let wanted = [
        (Branches::IntraOnly, needs(Variant::IntraOnly), false),
        (Branches::InterOnly, needs(Variant::InterOnly), true),
        (Branches::Joint, variants.contains(&Variant::Joint), alpha < 1.0),
    ];
    for (branches, wanted, with_inter) in wanted {
        if wanted {
            let state = train_branches(exp, branches, seed)?;
            tables.insert(
                branches,
                PairwiseTable::build(&state.model, &exp.test.maps, exp.train, with_inter)?,
            );
        }
    }
    Ok(tables)
}

/// Trains and scores the requested variants for one seed.
pub fn ablation_run(exp: &Experiment, variants: &[Variant], seed: u64) -> Result<Vec<VariantScore>> {
    let tables = ablation_tables(exp, variants, seed)?;
    ablation_scores(exp, &tables, variants, seed)
}

/// Scores variants from tables built by [`ablation_tables`].
pub fn ablation_scores(
    exp: &Experiment,
    tables: &HashMap<Branches, PairwiseTable>,
    variants: &[Variant],
    seed: u64,
) -> Result<Vec<VariantScore>> {
    let cfg = exp.eval_cfg;
    let alpha = exp.train_cfg.weights.alpha;
    let table = |b: Branches| {
        tables
            .get(&b)
            .ok_or_else(|| Error::Config(format!("no {b:?} model was trained")))
    };
    let k = cfg.references;
    variants
        .iter()
        .map(|&variant| {
            let predictions = match variant {
                Variant::IntraOnly => table(Branches::IntraOnly)?.predict_all(k, 1.0, cfg.combine, seed),
                Variant::InterOnly => table(Branches::InterOnly)?.predict_all(k, 0.0, cfg.combine, seed),
                Variant::Joint => table(Branches::Joint)?.predict_all(k, alpha, cfg.combine, seed),
                Variant::EnsembleOfSeparate => {
                    let intra = table(Branches::IntraOnly)?;
                    let inter = table(Branches::InterOnly)?;
                    let pool = exp.train.len();
                    (0..exp.test.maps.len())
                        .map(|t| {
                            let refs = sample_references(pool, k, seed, t);
                            (alpha * intra.intra[t] + (1.0 - alpha) * inter.inter(t, &refs, cfg.combine))
                                .max(1.0)
                        })
                        .collect()
                }
            };
            Ok(VariantScore {
                variant,
                seed,
                rmse: rmse(&predictions, &exp.test.lifetimes)?,
                mape: mape(&predictions, &exp.test.lifetimes)?,
                predictions,
            })
        })
        .collect()
}

/// Ways of using a small target-population budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// Intra-branch model trained on the sampled target cells only.
    Direct,
    /// Intra-branch model trained on the source population, then trained
    /// further on the sampled target cells.
    Finetune,
    /// Joint model on source plus sampled target cells, with inter-cell
    /// pairs drawn across the union.
    Combined,
}

impl Paradigm {
    pub fn parse(s: &str) -> Option<Paradigm> {
        match s {
            "direct" => Some(Paradigm::Direct),
            "finetune" => Some(Paradigm::Finetune),
            "combined" => Some(Paradigm::Combined),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowResourceRow {
    pub budget: usize,
    pub paradigm: Paradigm,
    pub seed: u64,
    pub rmse: f64,
    pub mape: f64,
}

/// Inputs of a low-resource experiment.
#[derive(Debug, Clone)]
pub struct LowResource<'a> {
    pub source: &'a TrainSet,
    /// Labeled target-population cells the budget is drawn from.
    pub target_pool: &'a TrainSet,
    pub target_test: &'a TestSet,
    pub geometry: Geometry,
    pub featurize: &'a FeaturizeConfig,
    pub train_cfg: &'a TrainConfig,
    pub eval_cfg: &'a EvalConfig,
}

/// The target cells used at `budget` for `seed`; identical across paradigms.
pub fn budget_subset(pool: usize, budget: usize, seed: u64) -> Result<Vec<usize>> {
    if budget == 0 || budget > pool {
        return Err(Error::TooFewCells { need: budget, have: pool });
    }
    let mut rng = rng::stream(seed, Stream::Budget, budget as u64);
    let mut picked = index::sample(&mut rng, pool, budget).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn subset(set: &TrainSet, idx: &[usize]) -> Result<TrainSet> {
    TrainSet::new(
        idx.iter().map(|&i| set.maps[i].clone()).collect(),
        idx.iter().map(|&i| set.lifetimes[i]).collect(),
    )
}

pub fn low_resource_run(
    lr: &LowResource,
    budgets: &[usize],
    paradigms: &[Paradigm],
    seeds: &[u64],
) -> Result<Vec<LowResourceRow>> {
    lr.eval_cfg.validate()?;
    let mut rows = Vec::new();
    let truth = &lr.target_test.lifetimes;
    for &seed in seeds {
        let intra_cfg = TrainConfig {
            branches: Branches::IntraOnly,
            seed,
            ..lr.train_cfg.clone()
        };
        let source_state = if paradigms.contains(&Paradigm::Finetune) {
            Some(train_model(lr.source, lr.geometry.clone(), lr.featurize, &intra_cfg, |_, _| Ok(()))?)
        } else {
            None
        };
        for &budget in budgets {
            let picked = budget_subset(lr.target_pool.len(), budget, seed)?;
            let targets = subset(lr.target_pool, &picked)?;
            for &paradigm in paradigms {
                let pred = match paradigm {
                    Paradigm::Direct => {
                        let s = train_model(&targets, lr.geometry.clone(), lr.featurize, &intra_cfg, |_, _| Ok(()))?;
                        PairwiseTable::build(&s.model, &lr.target_test.maps, &targets, false)?.intra
                    }
                    Paradigm::Finetune => {
                        let src = source_state.as_ref().expect("trained above");
                        let mut s = TrainState::new(src.model.clone(), &intra_cfg);
                        crate::train::train_until(&mut s, &targets, &intra_cfg, |_, _| Ok(()))?;
                        PairwiseTable::build(&s.model, &lr.target_test.maps, &targets, false)?.intra
                    }
                    Paradigm::Combined => {
                        let mut maps = lr.source.maps.clone();
                        maps.extend(targets.maps.iter().cloned());
                        let mut lifetimes = lr.source.lifetimes.clone();
                        lifetimes.extend(&targets.lifetimes);
                        let union = TrainSet::new(maps, lifetimes)?;
                        let cfg = TrainConfig {
                            branches: Branches::Joint,
                            seed,
                            ..lr.train_cfg.clone()
                        };
                        let s = train_model(&union, lr.geometry.clone(), lr.featurize, &cfg, |_, _| Ok(()))?;
                        let alpha = lr.train_cfg.weights.alpha;
                        let table = PairwiseTable::build(&s.model, &lr.target_test.maps, &union, alpha < 1.0)?;
                        table.predict_all(lr.eval_cfg.references, alpha, lr.eval_cfg.combine, seed)
                    }
                };
                let pred: Vec<f64> = pred.into_iter().map(|p| p.max(1.0)).collect();
                rows.push(LowResourceRow {
                    budget,
                    paradigm,
                    seed,
                    rmse: rmse(&pred, truth)?,
                    mape: mape(&pred, truth)?,
                });
            }
        }
    }
    Ok(rows)
}

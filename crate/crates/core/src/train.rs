//! Optimization loop for the two-branch model.
//!
//! Every epoch draws its shuffle order and its inter-cell pairs from RNG
//! streams keyed by `(seed, epoch)`, so a run resumed from a checkpoint
//! replays exactly the batches an uninterrupted run would have seen.
//! Gradients are accumulated over fixed-size chunks in a fixed order, which
//! keeps results bitwise independent of the number of worker threads.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featurize::{build_feature_map, intra_diff, inter_diff, FeatureStats, FeaturizeConfig};
use crate::model::{BatModel, Geometry, LossWeights};
use crate::nn::{Tape, Tensor, Var};
use crate::rng::{self, Stream};
use crate::types::{CellRecord, DiffTensor, FeatureMap};

/// Which losses drive the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branches {
    #[default]
    Joint,
    IntraOnly,
    InterOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub weights: LossWeights,
    pub branches: Branches,
    /// Inter-cell pairs drawn per training cell per epoch.
    pub pairs_per_target: usize,
    /// Use all `N (N - 1)` ordered pairs every epoch instead of sampling.
    pub exhaustive_pairs: bool,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            weights: LossWeights::default(),
            branches: Branches::Joint,
            pairs_per_target: 1,
            exhaustive_pairs: false,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.pairs_per_target == 0 {
            return Err(Error::Config("batch_size and pairs_per_target must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        match self.optimizer {
            Optimizer::Adam { beta1, beta2, eps } => {
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                    return Err(Error::Config("adam needs beta in [0, 1) and eps > 0".into()));
                }
            }
            Optimizer::SgdMomentum { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::Config("momentum must lie in [0, 1)".into()));
                }
            }
        }
        Ok(())
    }

    /// Hash of every field that changes the optimization trajectory. The
    /// epoch budget and checkpoint cadence are excluded so a run can be
    /// extended on resume.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        c.checkpoint_every = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Zero-based.
    pub epoch: usize,
    /// Mean batch losses on the normalized label axis.
    pub intra_loss: f64,
    pub inter_loss: f64,
    pub joint_loss: f64,
    /// RMSE in cycles of the intra-branch outputs seen during the epoch
    /// (computed before each update).
    pub train_rmse: f64,
    /// Wall-clock time of the epoch; not stored in checkpoints.
    pub wall_ms: f64,
}

/// Training cells, their feature maps and lifetimes.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub maps: Vec<FeatureMap>,
    pub lifetimes: Vec<f64>,
}

impl TrainSet {
    pub fn new(maps: Vec<FeatureMap>, lifetimes: Vec<f64>) -> Result<Self> {
        if maps.len() != lifetimes.len() {
            return Err(Error::LengthMismatch {
                left: maps.len(),
                right: lifetimes.len(),
            });
        }
        if maps.is_empty() {
            return Err(Error::Empty("training set"));
        }
        Ok(Self { maps, lifetimes })
    }

    /// Featurizes labeled cells.
    pub fn from_cells(cells: &[&CellRecord], cfg: &FeaturizeConfig) -> Result<Self> {
        let mut maps = Vec::with_capacity(cells.len());
        let mut lifetimes = Vec::with_capacity(cells.len());
        for c in cells {
            let life = c.lifetime.ok_or_else(|| {
                Error::Config(format!("training cell {} has no lifetime label", c.cell_id))
            })?;
            maps.push(build_feature_map(c, cfg)?);
            lifetimes.push(f64::from(life));
        }
        Self::new(maps, lifetimes)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Freshly initialized model whose label normalization and feature
/// statistics come from `set`.
pub fn init_model(
    set: &TrainSet,
    geometry: Geometry,
    featurize: &FeaturizeConfig,
    seed: u64,
) -> Result<BatModel> {
    let n = set.lifetimes.len() as f64;
    let center = set.lifetimes.iter().sum::<f64>() / n;
    let var = set.lifetimes.iter().map(|y| (y - center).powi(2)).sum::<f64>() / n;
    let scale = if var.sqrt() > 1e-9 {
        var.sqrt()
    } else {
        center.abs().max(1.0)
    };
    let stats = if featurize.standardize {
        FeatureStats::fit(&set.maps, featurize.intra_reference_cycle)?
    } else {
        FeatureStats::identity()
    };
    BatModel::new(geometry, center, scale, stats, featurize.intra_reference_cycle, seed)
}

/// For each id in `targets` (in the given order), `pairs_per_target`
/// references drawn uniformly from the other ids. Returns `(target,
/// reference)` pairs.
pub fn sample_pairs<T: Clone>(targets: &[T], pairs_per_target: usize, rng: &mut rng::Rng) -> Result<Vec<(T, T)>> {
    let n = targets.len();
    if n < 2 {
        return Err(Error::TooFewCells { need: 2, have: n });
    }
    let mut out = Vec::with_capacity(n * pairs_per_target);
    for (t, target) in targets.iter().enumerate() {
        for _ in 0..pairs_per_target {
            let r = rng.random_range(0..n - 1);
            let r = if r >= t { r + 1 } else { r };
            out.push((target.clone(), targets[r].clone()));
        }
    }
    Ok(out)
}

/// Every ordered pair of distinct cells, `n (n - 1)` in total.
pub fn all_ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|t| (0..n).filter(move |&r| r != t).map(move |r| (t, r)))
        .collect()
}

/// Per-parameter optimizer moments, in [`BatModel::parameters`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(model: &BatModel) -> Self {
        let zeros: Vec<Tensor> = model.parameters().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    fn apply(&mut self, model: &mut BatModel, grads: &[Tensor], lr: f64, opt: Optimizer) {
        self.step += 1;
        let t = self.step as i32;
        for (i, p) in model.parameters_mut().into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            match opt {
                Optimizer::Adam { beta1, beta2, eps } => {
                    let v = self.second[i].data_mut();
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (k, w) in p.data_mut().iter_mut().enumerate() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
                Optimizer::SgdMomentum { momentum } => {
                    for (k, w) in p.data_mut().iter_mut().enumerate() {
                        m[k] = momentum * m[k] + g[k];
                        *w -= lr * m[k];
                    }
                }
            }
        }
    }
}

/// Everything needed to continue a run; also the on-disk checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: BatModel,
    pub optimizer: OptimizerState,
    pub epochs_completed: usize,
    pub config_fingerprint: String,
    pub seed: u64,
    pub log: Vec<EpochLog>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CSPNCKPT";
const CHECKPOINT_VERSION: u32 = 1;

impl TrainState {
    pub fn new(model: BatModel, cfg: &TrainConfig) -> Self {
        Self {
            optimizer: OptimizerState::new(&model),
            model,
            epochs_completed: 0,
            config_fingerprint: cfg.fingerprint(),
            seed: cfg.seed,
            log: Vec::new(),
        }
    }

    /// Checkpoint bytes. Wall-clock timings are zeroed so identical runs
    /// give identical files.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut timeless = self.clone();
        timeless.log.iter_mut().for_each(|l| l.wall_ms = 0.0);
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bincode::serialize_into(&mut out, &timeless).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        bincode::deserialize(&bytes[12..]).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(Error::file(&tmp))?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(Error::file(path))?)
    }
}

/// Samples per gradient chunk; fixed so the summation order never depends
/// on the thread count.
const CHUNK: usize = 4;

struct ChunkResult {
    grads: Vec<(usize, Tensor)>,
    sq_err: f64,
    preds: Vec<f64>,
}

/// Gradient of `scale * sum((g(x) - y)^2)` over one chunk for one branch.
/// Parameter indices follow [`BatModel::parameters`].
fn chunk_gradient(
    model: &BatModel,
    inter: bool,
    xs: &[&DiffTensor],
    ys: &[f64],
    scale: f64,
) -> Result<ChunkResult> {
    let mut tape = Tape::new();
    let (encoder, offset) = if inter {
        (&model.encoder_inter, 6)
    } else {
        (&model.encoder_intra, 0)
    };
    let enc: [Var; 6] = encoder.tensors().map(|t| tape.param(t.clone()));
    let head = tape.param(model.head.clone());
    let kind = if inter {
        crate::types::DiffKind::InterCell
    } else {
        crate::types::DiffKind::IntraCell
    };
    let x = tape.constant(model.batch_input(xs, kind)?);
    let out = model.branch(&mut tape, &enc, head, x)?;
    let target = tape.constant(Tensor::new(vec![ys.len(), 1], ys.to_vec())?);
    let mse = tape.mse(out, target)?;
    let loss = tape.scale(mse, scale * ys.len() as f64);
    let preds = tape.value(out).data().to_vec();
    let sq_err = tape.value(mse).item()? * ys.len() as f64;
    let mut g = tape.backward(loss)?;
    let mut grads: Vec<(usize, Tensor)> = enc
        .iter()
        .enumerate()
        .map(|(i, v)| (offset + i, g.take(*v)))
        .collect();
    grads.push((12, g.take(head)));
    Ok(ChunkResult { grads, sq_err, preds })
}

fn run_chunks(
    model: &BatModel,
    inter: bool,
    xs: &[&DiffTensor],
    ys: &[f64],
    scale: f64,
) -> Result<Vec<ChunkResult>> {
    let starts: Vec<usize> = (0..xs.len()).step_by(CHUNK).collect();
    let job = |&s: &usize| {
        let e = (s + CHUNK).min(xs.len());
        chunk_gradient(model, inter, &xs[s..e], &ys[s..e], scale)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        starts.par_iter().map(job).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        starts.iter().map(job).collect()
    }
}

struct StepOutcome {
    intra_mse: f64,
    inter_mse: f64,
    intra_preds: Vec<f64>,
}

/// One optimizer step on an intra batch and an inter batch (either may be
/// empty depending on the branch mode).
fn step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    intra: (&[&DiffTensor], &[f64]),
    inter: (&[&DiffTensor], &[f64]),
) -> Result<StepOutcome> {
    let model = &state.model;
    let mut grads: Vec<Tensor> = model.parameters().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut outcome = StepOutcome {
        intra_mse: 0.0,
        inter_mse: 0.0,
        intra_preds: Vec::new(),
    };
    let mut accumulate = |results: Vec<ChunkResult>, n: usize| -> (f64, Vec<f64>) {
        let mut sq = 0.0;
        let mut preds = Vec::with_capacity(n);
        for r in results {
            sq += r.sq_err;
            preds.extend(r.preds);
            for (i, g) in r.grads {
                grads[i].add_assign(&g);
            }
        }
        (sq / n as f64, preds)
    };
    if !intra.0.is_empty() {
        let n = intra.0.len();
        let (mse, preds) = accumulate(run_chunks(model, false, intra.0, intra.1, 1.0 / n as f64)?, n);
        outcome.intra_mse = mse;
        outcome.intra_preds = preds;
    }
    if !inter.0.is_empty() {
        let n = inter.0.len();
        let lambda = if cfg.branches == Branches::InterOnly {
            1.0
        } else {
            cfg.weights.lambda
        };
        let (mse, _) = accumulate(run_chunks(model, true, inter.0, inter.1, lambda / n as f64)?, n);
        outcome.inter_mse = mse;
    }
    state
        .optimizer
        .apply(&mut state.model, &grads, cfg.learning_rate, cfg.optimizer);
    Ok(outcome)
}

/// Trains `state` until `cfg.epochs` epochs are complete, calling
/// `on_epoch` after each one (it may write checkpoints or log lines).
pub fn train_until(
    state: &mut TrainState,
    set: &TrainSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState, &EpochLog) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if state.config_fingerprint != cfg.fingerprint() {
        return Err(Error::Checkpoint(
            "training configuration differs from the one the checkpoint was made with".into(),
        ));
    }
    let n = set.len();
    let use_intra = cfg.branches != Branches::InterOnly;
    let use_inter = match cfg.branches {
        Branches::IntraOnly => false,
        Branches::InterOnly => true,
        Branches::Joint => cfg.weights.lambda > 0.0,
    };
    if use_inter && n < 2 {
        return Err(Error::TooFewCells { need: 2, have: n });
    }
    let center = state.model.label_center;
    let scale = state.model.label_scale;
    let ref_cycle = state.model.intra_reference_cycle;
    let intra_x = set
        .maps
        .iter()
        .map(|m| intra_diff(m, ref_cycle))
        .collect::<Result<Vec<_>>>()?;
    let intra_y: Vec<f64> = set.lifetimes.iter().map(|y| (y - center) / scale).collect();

    while state.epochs_completed < cfg.epochs {
        let epoch = state.epochs_completed;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, Stream::Shuffle, epoch as u64));
        let pairs = if use_inter {
            let mut rng = rng::stream(cfg.seed, Stream::Pairs, epoch as u64);
            let mut p = if cfg.exhaustive_pairs {
                all_ordered_pairs(n)
            } else {
                sample_pairs(&order, cfg.pairs_per_target, &mut rng)?
            };
            p.shuffle(&mut rng);
            p
        } else {
            Vec::new()
        };
        // The larger of the two sample sets sets the step count; the other
        // is spread evenly so each epoch visits every sample once.
        let intra_len = if use_intra { n } else { 0 };
        let steps = intra_len
            .div_ceil(cfg.batch_size)
            .max(pairs.len().div_ceil(cfg.batch_size))
            .max(1);
        let intra_per_step = intra_len.div_ceil(steps);
        let inter_per_step = pairs.len().div_ceil(steps);

        let (mut intra_sum, mut inter_sum, mut sq_cycles, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for s in 0..steps {
            let ib = &order[(s * intra_per_step).min(intra_len)..((s + 1) * intra_per_step).min(intra_len)];
            let ix: Vec<&DiffTensor> = ib.iter().map(|&i| &intra_x[i]).collect();
            let iy: Vec<f64> = ib.iter().map(|&i| intra_y[i]).collect();

            let pb = &pairs[(s * inter_per_step).min(pairs.len())..((s + 1) * inter_per_step).min(pairs.len())];
            let px = pb
                .iter()
                .map(|&(t, r)| inter_diff(&set.maps[t], &set.maps[r], set.lifetimes[r]))
                .collect::<Result<Vec<_>>>()?;
            let px_refs: Vec<&DiffTensor> = px.iter().collect();
            let py: Vec<f64> = pb
                .iter()
                .map(|&(t, r)| (set.lifetimes[t] - set.lifetimes[r]) / scale)
                .collect();

            let out = step(state, cfg, (&ix, &iy), (&px_refs, &py))?;
            if !(out.intra_mse.is_finite() && out.inter_mse.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: s,
                    intra: out.intra_mse,
                    inter: out.inter_mse,
                });
            }
            intra_sum += out.intra_mse;
            inter_sum += out.inter_mse;
            for (p, y) in out.intra_preds.iter().zip(&iy) {
                sq_cycles += ((p - y) * scale).powi(2);
            }
            seen += out.intra_preds.len();
        }
        let steps_f = steps.max(1) as f64;
        let lambda = match cfg.branches {
            Branches::Joint => cfg.weights.lambda,
            Branches::IntraOnly => 0.0,
            Branches::InterOnly => 1.0,
        };
        let entry = EpochLog {
            epoch,
            intra_loss: intra_sum / steps_f,
            inter_loss: inter_sum / steps_f,
            joint_loss: (intra_sum + lambda * inter_sum) / steps_f,
            train_rmse: if seen > 0 { (sq_cycles / seen as f64).sqrt() } else { f64::NAN },
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        state.epochs_completed += 1;
        state.log.push(entry.clone());
        on_epoch(state, &entry)?;
    }
    Ok(())
}

/// Continues `state` up to `cfg.epochs`, after checking that the
/// checkpoint was made for `geometry` and for inputs shaped like `set`.
pub fn resume(
    state: &mut TrainState,
    set: &TrainSet,
    geometry: &Geometry,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&TrainState, &EpochLog) -> Result<()>,
) -> Result<()> {
    if &state.model.geometry != geometry {
        return Err(Error::Geometry(format!(
            "checkpoint geometry {:?} does not match configured {:?}",
            state.model.geometry, geometry
        )));
    }
    let want = [crate::types::NUM_CHANNELS, geometry.height, geometry.width];
    if let Some(m) = set.maps.iter().find(|m| m.shape() != want) {
        return Err(Error::Geometry(format!(
            "feature map {:?} does not match model input {want:?}",
            m.shape()
        )));
    }
    train_until(state, set, cfg, on_epoch)
}

/// Initializes and trains a model from scratch.
pub fn train_model(
    set: &TrainSet,
    geometry: Geometry,
    featurize: &FeaturizeConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&TrainState, &EpochLog) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    let model = init_model(set, geometry, featurize, cfg.seed)?;
    let mut state = TrainState::new(model, cfg);
    train_until(&mut state, set, cfg, on_epoch)?;
    Ok(state)
}

/// Appends one JSON line per epoch.
pub fn write_log_line(out: &mut impl std::io::Write, entry: &EpochLog) -> Result<()> {
    serde_json::to_writer(&mut *out, entry)?;
    out.write_all(b"\n")?;
    Ok(())
}

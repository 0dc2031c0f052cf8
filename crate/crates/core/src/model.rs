//! Two-branch lifetime model.
//!
//! An intra-cell encoder and an inter-cell encoder of identical geometry
//! each map a `(6, H, W)` difference tensor to a `hidden_dim` embedding; one
//! shared bias-free linear head turns either embedding into a scalar.
//! Labels are modeled on a centered, scaled axis:
//! `y_norm = (y - label_center) / label_scale`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{intra_diff, inter_diff, FeatureStats};
use crate::nn::{glorot_uniform, Tape, Tensor, Var};
use crate::preprocess::median;
use crate::rng::{self, Stream};
use crate::types::{DiffKind, DiffTensor, FeatureMap, NUM_CHANNELS};

/// Layer geometry shared by both encoders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Geometry {
    /// Input height `H` (early cycles).
    pub height: usize,
    /// Input width `W` (Q grid points).
    pub width: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub kernel: [usize; 2],
    pub pool: [usize; 2],
    pub hidden_dim: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            height: 100,
            width: 100,
            conv1_channels: 16,
            conv2_channels: 32,
            kernel: [3, 3],
            pool: [2, 2],
            hidden_dim: 32,
        }
    }
}

impl Geometry {
    /// Spatial size after conv + pool, twice.
    pub fn encoded_spatial(&self) -> Result<(usize, usize)> {
        let stage = |n: usize, k: usize, p: usize| -> Option<usize> {
            let conv = n.checked_sub(k)? + 1;
            let pooled = conv / p;
            (pooled > 0).then_some(pooled)
        };
        let [kh, kw] = self.kernel;
        let [ph, pw] = self.pool;
        if kh == 0 || kw == 0 || ph == 0 || pw == 0 {
            return Err(Error::Geometry("kernel and pool sizes must be positive".into()));
        }
        let h = stage(self.height, kh, ph).and_then(|h| stage(h, kh, ph));
        let w = stage(self.width, kw, pw).and_then(|w| stage(w, kw, pw));
        match (h, w) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::Geometry(format!(
                "input {}x{} too small for two conv({kh}x{kw}) + pool({ph}x{pw}) stages",
                self.height, self.width
            ))),
        }
    }

    pub fn flat_dim(&self) -> Result<usize> {
        let (h, w) = self.encoded_spatial()?;
        Ok(self.conv2_channels * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv1_channels == 0 || self.conv2_channels == 0 || self.hidden_dim == 0 {
            return Err(Error::Geometry("channel counts must be positive".into()));
        }
        self.flat_dim().map(|_| ())
    }
}

/// conv -> avgpool -> relu -> conv -> avgpool -> relu -> flatten -> dense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub conv1_kernel: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_kernel: Tensor,
    pub conv2_bias: Tensor,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
}

impl Encoder {
    fn shapes(g: &Geometry) -> Result<[Vec<usize>; 6]> {
        let [kh, kw] = g.kernel;
        Ok([
            vec![g.conv1_channels, NUM_CHANNELS, kh, kw],
            vec![g.conv1_channels],
            vec![g.conv2_channels, g.conv1_channels, kh, kw],
            vec![g.conv2_channels],
            vec![g.flat_dim()?, g.hidden_dim],
            vec![g.hidden_dim],
        ])
    }

    pub fn zeros(g: &Geometry) -> Result<Self> {
        let [a, b, c, d, e, f] = Self::shapes(g)?;
        Ok(Self {
            conv1_kernel: Tensor::zeros(&a),
            conv1_bias: Tensor::zeros(&b),
            conv2_kernel: Tensor::zeros(&c),
            conv2_bias: Tensor::zeros(&d),
            fc_weight: Tensor::zeros(&e),
            fc_bias: Tensor::zeros(&f),
        })
    }

    fn init<R: rand::Rng + ?Sized>(g: &Geometry, rng: &mut R) -> Result<Self> {
        let [kh, kw] = g.kernel;
        let [a, b, c, d, e, f] = Self::shapes(g)?;
        let area = kh * kw;
        Ok(Self {
            conv1_kernel: glorot_uniform(&a, NUM_CHANNELS * area, g.conv1_channels * area, rng),
            conv1_bias: Tensor::zeros(&b),
            conv2_kernel: glorot_uniform(&c, g.conv1_channels * area, g.conv2_channels * area, rng),
            conv2_bias: Tensor::zeros(&d),
            fc_weight: glorot_uniform(&e, e[0], g.hidden_dim, rng),
            fc_bias: Tensor::zeros(&f),
        })
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.conv1_kernel,
            &self.conv1_bias,
            &self.conv2_kernel,
            &self.conv2_bias,
            &self.fc_weight,
            &self.fc_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.conv1_kernel,
            &mut self.conv1_bias,
            &mut self.conv2_kernel,
            &mut self.conv2_bias,
            &mut self.fc_weight,
            &mut self.fc_bias,
        ]
    }
}

/// Weights of the joint objective and of the prediction blend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the inter-cell term in the joint loss.
    pub lambda: f64,
    /// Share of the intra-cell prediction in the final blend.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// How per-reference inter-cell predictions are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Median,
    Mean,
}

impl Combine {
    pub fn apply(self, values: &[f64]) -> f64 {
        match self {
            Combine::Median => median(values),
            Combine::Mean => values.iter().sum::<f64>() / values.len() as f64,
        }
    }
}

/// The full model plus everything needed to reproduce its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatModel {
    pub geometry: Geometry,
    pub encoder_intra: Encoder,
    pub encoder_inter: Encoder,
    /// Shared head, `(hidden_dim, 1)`, no bias.
    pub head: Tensor,
    pub label_center: f64,
    pub label_scale: f64,
    pub feature_stats: FeatureStats,
    pub intra_reference_cycle: usize,
    pub seed: u64,
}

/// Model parameters registered on a tape.
pub(crate) struct BoundParams {
    pub intra: [Var; 6],
    pub inter: [Var; 6],
    pub head: Var,
}

/// Per-target prediction with both branch outputs, in cycles.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Intra-cell branch, `label_center + w.h_theta(x)`.
    pub intra: f64,
    /// `y' + w.h_phi(x - x')` for every reference, in input order.
    pub per_reference: Vec<f64>,
    /// Pooled inter-cell prediction, when references were used.
    pub inter: Option<f64>,
    /// `alpha * intra + (1 - alpha) * inter`, clamped below at one cycle.
    pub blended: f64,
}

impl BatModel {
    /// Randomly initialized model. Labels are centered with `label_center`
    /// and scaled by `label_scale`.
    pub fn new(
        geometry: Geometry,
        label_center: f64,
        label_scale: f64,
        feature_stats: FeatureStats,
        intra_reference_cycle: usize,
        seed: u64,
    ) -> Result<Self> {
        geometry.validate()?;
        if !(label_scale > 0.0 && label_scale.is_finite() && label_center.is_finite()) {
            return Err(Error::Config(format!(
                "invalid label normalization ({label_center}, {label_scale})"
            )));
        }
        if intra_reference_cycle >= geometry.height {
            return Err(Error::Geometry(format!(
                "reference cycle {intra_reference_cycle} outside height {}",
                geometry.height
            )));
        }
        let mut rng = rng::stream(seed, Stream::Init, 0);
        let encoder_intra = Encoder::init(&geometry, &mut rng)?;
        let encoder_inter = Encoder::init(&geometry, &mut rng)?;
        let head = glorot_uniform(&[geometry.hidden_dim, 1], geometry.hidden_dim, 1, &mut rng);
        Ok(Self {
            geometry,
            encoder_intra,
            encoder_inter,
            head,
            label_center,
            label_scale,
            feature_stats,
            intra_reference_cycle,
            seed,
        })
    }

    /// All parameters in a fixed order: intra encoder, inter encoder, head.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.encoder_intra.tensors().into();
        v.extend(self.encoder_inter.tensors());
        v.push(&self.head);
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.encoder_intra.tensors_mut().into();
        v.extend(self.encoder_inter.tensors_mut());
        v.push(&mut self.head);
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    pub(crate) fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut reg = |e: &Encoder| -> [Var; 6] { e.tensors().map(|t| tape.param(t.clone())) };
        let intra = reg(&self.encoder_intra);
        let inter = reg(&self.encoder_inter);
        let head = tape.param(self.head.clone());
        BoundParams { intra, inter, head }
    }

    /// Stacks standardized difference tensors into `(B, 6, H, W)`.
    pub(crate) fn batch_input(&self, diffs: &[&DiffTensor], kind: DiffKind) -> Result<Tensor> {
        let shape = [NUM_CHANNELS, self.geometry.height, self.geometry.width];
        let mut data = Vec::with_capacity(diffs.len() * shape.iter().product::<usize>());
        for d in diffs {
            if d.shape() != shape {
                return Err(Error::Shape(format!(
                    "difference tensor {:?} does not match model input {shape:?}",
                    d.shape()
                )));
            }
            if d.kind() != kind {
                return Err(Error::Shape(format!("expected {kind:?} tensor, got {:?}", d.kind())));
            }
            data.extend(self.feature_stats.standardize(d));
        }
        Tensor::new(vec![diffs.len(), shape[0], shape[1], shape[2]], data)
    }

    /// Scalar output `(B, 1)` of one branch on the normalized label axis.
    pub(crate) fn branch(&self, tape: &mut Tape, encoder: &[Var; 6], head: Var, x: Var) -> Result<Var> {
        let [ph, pw] = self.geometry.pool;
        let [k1, b1, k2, b2, fw, fb] = *encoder;
        let h = tape.conv2d(x, k1, b1)?;
        let h = tape.avg_pool2d(h, ph, pw)?;
        let h = tape.relu(h);
        let h = tape.conv2d(h, k2, b2)?;
        let h = tape.avg_pool2d(h, ph, pw)?;
        let h = tape.relu(h);
        let h = tape.flatten(h)?;
        let h = tape.linear(h, fw, fb)?;
        tape.matmul(h, head)
    }

    fn run_branch(&self, diffs: &[&DiffTensor], kind: DiffKind) -> Result<Vec<f64>> {
        if diffs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let x = tape.constant(self.batch_input(diffs, kind)?);
        let enc = match kind {
            DiffKind::IntraCell => p.intra,
            DiffKind::InterCell => p.inter,
        };
        let out = self.branch(&mut tape, &enc, p.head, x)?;
        Ok(tape.value(out).data().iter().map(|v| v * self.label_scale).collect())
    }

    /// Intra-branch outputs `w.h_theta(x)` in cycles, relative to
    /// `label_center`.
    pub fn forward_intra(&self, diffs: &[&DiffTensor]) -> Result<Vec<f64>> {
        self.run_branch(diffs, DiffKind::IntraCell)
    }

    /// Inter-branch lifetime differences `w.h_phi(x - x')` in cycles. The
    /// caller adds the reference lifetime.
    pub fn forward_inter(&self, diffs: &[&DiffTensor]) -> Result<Vec<f64>> {
        self.run_branch(diffs, DiffKind::InterCell)
    }

    /// Joint objective on the normalized label axis:
    /// `mean((f(x) - y)^2) + lambda * mean((g(dx) - dy)^2)`.
    ///
    /// `intra` pairs carry lifetimes in cycles, `inter` pairs carry lifetime
    /// differences in cycles.
    pub fn joint_loss(
        &self,
        intra: &[(DiffTensor, f64)],
        inter: &[(DiffTensor, f64)],
        weights: &LossWeights,
    ) -> Result<f64> {
        weights.validate()?;
        if intra.is_empty() {
            return Err(Error::Empty("intra-cell batch"));
        }
        if inter.is_empty() && weights.lambda > 0.0 {
            return Err(Error::Empty("inter-cell batch with lambda > 0"));
        }
        let intra_x: Vec<&DiffTensor> = intra.iter().map(|(d, _)| d).collect();
        let intra_y: Vec<f64> = intra
            .iter()
            .map(|(_, y)| (y - self.label_center) / self.label_scale)
            .collect();
        let intra_pred = self.forward_intra(&intra_x)?;
        let intra_mse = intra_pred
            .iter()
            .zip(&intra_y)
            .map(|(p, y)| (p / self.label_scale - y).powi(2))
            .sum::<f64>()
            / intra.len() as f64;
        if inter.is_empty() {
            return Ok(intra_mse);
        }
        let inter_x: Vec<&DiffTensor> = inter.iter().map(|(d, _)| d).collect();
        let inter_pred = self.forward_inter(&inter_x)?;
        let inter_mse = inter_pred
            .iter()
            .zip(inter)
            .map(|(p, (_, dy))| ((p - dy) / self.label_scale).powi(2))
            .sum::<f64>()
            / inter.len() as f64;
        Ok(intra_mse + weights.lambda * inter_mse)
    }

    /// [`BatModel::joint_loss`] together with its gradient for every tensor
    /// in [`BatModel::parameters`] order, from one tape through both
    /// branches.
    pub fn joint_loss_gradients(
        &self,
        intra: &[(DiffTensor, f64)],
        inter: &[(DiffTensor, f64)],
        weights: &LossWeights,
    ) -> Result<(f64, Vec<Tensor>)> {
        weights.validate()?;
        if intra.is_empty() {
            return Err(Error::Empty("intra-cell batch"));
        }
        if inter.is_empty() && weights.lambda > 0.0 {
            return Err(Error::Empty("inter-cell batch with lambda > 0"));
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let term = |tape: &mut Tape, enc: &[Var; 6], pairs: &[(DiffTensor, f64)], kind, center: f64| {
            let xs: Vec<&DiffTensor> = pairs.iter().map(|(d, _)| d).collect();
            let x = tape.constant(self.batch_input(&xs, kind)?);
            let out = self.branch(tape, enc, p.head, x)?;
            let ys: Vec<f64> = pairs.iter().map(|(_, y)| (y - center) / self.label_scale).collect();
            let y = tape.constant(Tensor::column(&ys));
            tape.mse(out, y)
        };
        let mut loss = term(&mut tape, &p.intra, intra, DiffKind::IntraCell, self.label_center)?;
        if !inter.is_empty() {
            let inter_mse = term(&mut tape, &p.inter, inter, DiffKind::InterCell, 0.0)?;
            let weighted = tape.scale(inter_mse, weights.lambda);
            loss = tape.add(loss, weighted)?;
        }
        let value = tape.value(loss).item()?;
        let mut g = tape.backward(loss)?;
        let mut grads: Vec<Tensor> = p.intra.iter().map(|v| g.take(*v)).collect();
        grads.extend(p.inter.iter().map(|v| g.take(*v)));
        grads.push(g.take(p.head));
        Ok((value, grads))
    }

    /// Lifetime estimate for `target` using `references` as `(map, lifetime)`
    /// anchors for the inter-cell branch.
    ///
    /// With `alpha == 1` references are ignored.
    pub fn predict(
        &self,
        target: &FeatureMap,
        references: &[(&FeatureMap, f64)],
        weights: &LossWeights,
        combine: Combine,
    ) -> Result<Prediction> {
        weights.validate()?;
        let intra_x = intra_diff(target, self.intra_reference_cycle)?;
        let intra = self.label_center + self.forward_intra(&[&intra_x])?[0];
        if weights.alpha >= 1.0 {
            return Ok(Prediction {
                intra,
                per_reference: Vec::new(),
                inter: None,
                blended: intra.max(1.0),
            });
        }
        if references.is_empty() {
            return Err(Error::Empty("reference cells (alpha < 1)"));
        }
        let diffs = references
            .iter()
            .map(|(m, y)| inter_diff(target, m, *y))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&DiffTensor> = diffs.iter().collect();
        let deltas = self.forward_inter(&refs)?;
        let per_reference: Vec<f64> = deltas
            .iter()
            .zip(references)
            .map(|(d, (_, y))| y + d)
            .collect();
        let inter = combine.apply(&per_reference);
        let blended = (weights.alpha * intra + (1.0 - weights.alpha) * inter).max(1.0);
        Ok(Prediction {
            intra,
            per_reference,
            inter: Some(inter),
            blended,
        })
    }
}

/// Least-squares weights and the contrastive-objective gradient there.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOptimality {
    pub weights: Vec<f64>,
    /// `|| grad_w sum_{i != j} (w.(x_i - x_j) - (y_i - y_j))^2 ||` at `w*`.
    pub gradient_norm: f64,
}

impl LinearOptimality {
    /// `gradient_norm <= 1e-6 * (1 + ||w*||)`.
    pub fn is_stationary(&self) -> bool {
        let wn = self.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        self.gradient_norm <= 1e-6 * (1.0 + wn)
    }
}

/// Solves `min_w sum_i (w.x_i - y_i)^2` by normal equations, then evaluates
/// the exact gradient of the pairwise objective over all ordered pairs at
/// that solution.
///
/// Both `x` (column-wise) and `y` must be zero-centered; otherwise the
/// pairwise objective has a different minimizer.
pub fn linear_optimality_check(x: &[Vec<f64>], y: &[f64]) -> Result<LinearOptimality> {
    let n = x.len();
    if n == 0 {
        return Err(Error::Empty("design matrix"));
    }
    if y.len() != n {
        return Err(Error::LengthMismatch { left: n, right: y.len() });
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("design matrix rows differ in length".into()));
    }
    let scale = x
        .iter()
        .flatten()
        .chain(y)
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale * n as f64;
    if y.iter().sum::<f64>().abs() > tol {
        return Err(Error::NotCentered("labels".into()));
    }
    for j in 0..d {
        if x.iter().map(|r| r[j]).sum::<f64>().abs() > tol {
            return Err(Error::NotCentered(format!("feature column {j}")));
        }
    }

    let xm = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let yv = DVector::from_column_slice(y);
    let svd = xm.clone().svd(false, false);
    let smax = svd.singular_values.max();
    if svd.rank(1e-10 * smax.max(f64::MIN_POSITIVE)) < d {
        return Err(Error::RankDeficient);
    }
    let gram = xm.transpose() * &xm;
    let rhs = xm.transpose() * &yv;
    let w = gram.cholesky().ok_or(Error::RankDeficient)?.solve(&rhs);

    // sum_{i,j} 2 (e_i - e_j)(x_i - x_j) = 4 N X^T e - 4 (sum e)(sum x)
    let e = &xm * &w - &yv;
    let xte = xm.transpose() * &e;
    let sum_e = e.sum();
    let sum_x = xm.row_sum().transpose();
    let grad = xte * (4.0 * n as f64) - sum_x * (4.0 * sum_e);
    Ok(LinearOptimality {
        weights: w.iter().copied().collect(),
        gradient_norm: grad.norm(),
    })
}

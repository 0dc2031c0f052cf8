//! Finite-difference gradient checks shared by the integration tests.

#![allow(dead_code)]

use cellspan::featurize::{inter_diff, intra_diff, FeatureStats};
use cellspan::model::{BatModel, Geometry, LossWeights};
use cellspan::nn::{Tape, Tensor, Var};
use cellspan::types::{DiffTensor, FeatureMap, NUM_CHANNELS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Largest relative error between tape gradients and central differences
/// of the scalar built by `f` from `inputs`, over every input element.
pub fn check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            work[k].data_mut()[i] = x + EPS;
            let up = eval(&work);
            work[k].data_mut()[i] = x - EPS;
            let down = eval(&work);
            work[k].data_mut()[i] = x;
            worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * EPS)));
        }
    }
    worst
}

fn mse_against(tape: &mut Tape, out: Var, rng_seed: u64) -> Var {
    let flat = tape.flatten(out).unwrap();
    let shape = tape.value(flat).shape().to_vec();
    let target = tape.constant(random(&shape, &mut rng(rng_seed ^ 0x5eed)));
    tape.mse(flat, target).unwrap()
}

pub fn check_conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [random(&[2, 3, 7, 6], &mut r), random(&[4, 3, 3, 3], &mut r), random(&[4], &mut r)];
    check(&inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2]).unwrap();
        mse_against(t, y, seed)
    })
}

pub fn check_avg_pool2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [random(&[2, 3, 7, 9], &mut r)];
    let square = check(&inputs, |t, v| {
        let y = t.avg_pool2d(v[0], 2, 2).unwrap();
        mse_against(t, y, seed)
    });
    let oblong = check(&inputs, |t, v| {
        let y = t.avg_pool2d(v[0], 3, 2).unwrap();
        mse_against(t, y, seed)
    });
    square.max(oblong)
}

/// Inputs stay at least 0.1 away from the kink.
pub fn check_relu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let data = (0..30)
        .map(|_| {
            let m = r.random_range(0.1..1.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let inputs = [Tensor::new(vec![3, 10], data).unwrap()];
    check(&inputs, |t, v| {
        let y = t.relu(v[0]);
        mse_against(t, y, seed)
    })
}

pub fn check_linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [random(&[3, 5], &mut r), random(&[5, 4], &mut r), random(&[4], &mut r)];
    let affine = check(&inputs, |t, v| {
        let y = t.linear(v[0], v[1], v[2]).unwrap();
        mse_against(t, y, seed)
    });
    let bare = check(&inputs[..2], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        mse_against(t, y, seed)
    });
    affine.max(bare)
}

pub fn check_mse(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [random(&[4, 1], &mut r), random(&[4, 1], &mut r)];
    check(&inputs, |t, v| {
        let m = t.mse(v[0], v[1]).unwrap();
        let s = t.scale(m, 1.5);
        t.add(s, m).unwrap()
    })
}

/// Small geometry with truncating pools: 14x16 -> 12x14 -> 6x7 -> 4x5 -> 2x2.
pub fn small_geometry() -> Geometry {
    Geometry {
        height: 14,
        width: 16,
        conv1_channels: 2,
        conv2_channels: 2,
        hidden_dim: 4,
        ..Geometry::default()
    }
}

pub fn random_map(id: &str, g: &Geometry, rng: &mut ChaCha8Rng) -> FeatureMap {
    let n = NUM_CHANNELS * g.height * g.width;
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureMap::new(id, g.height, g.width, data).unwrap()
}

/// Two-branch instance: a model plus intra and inter training pairs.
pub struct JointInstance {
    pub model: BatModel,
    pub intra: Vec<(DiffTensor, f64)>,
    pub inter: Vec<(DiffTensor, f64)>,
}

/// Smallest distance of any ReLU input to zero for one branch and batch.
fn relu_margin(model: &BatModel, inter: bool, diffs: &[&DiffTensor]) -> f64 {
    let g = &model.geometry;
    let e = if inter { &model.encoder_inter } else { &model.encoder_intra };
    let mut data = Vec::new();
    for d in diffs {
        data.extend_from_slice(d.data());
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![diffs.len(), NUM_CHANNELS, g.height, g.width], data).unwrap());
    let [k1, b1, k2, b2, ..] = e.tensors().map(|t| tape.constant(t.clone()));
    let h = tape.conv2d(x, k1, b1).unwrap();
    let p1 = tape.avg_pool2d(h, g.pool[0], g.pool[1]).unwrap();
    let a1 = tape.relu(p1);
    let h = tape.conv2d(a1, k2, b2).unwrap();
    let p2 = tape.avg_pool2d(h, g.pool[0], g.pool[1]).unwrap();
    let margin = |v: Var| tape.value(v).data().iter().fold(f64::INFINITY, |m, z| m.min(z.abs()));
    margin(p1).min(margin(p2))
}

/// A random instance whose ReLU inputs all sit at least `1e-3` from the
/// kink, so central differences with a `1e-5` step never straddle it.
pub fn joint_instance(seed: u64) -> JointInstance {
    let g = small_geometry();
    for attempt in 0.. {
        let mut r = rng(seed * 1000 + attempt);
        let mut model = BatModel::new(g.clone(), 500.0, 200.0, FeatureStats::identity(), 2, seed * 1000 + attempt).unwrap();
        for p in model.parameters_mut() {
            for v in p.data_mut() {
                *v += r.random_range(-0.05..0.05);
            }
        }
        let maps: Vec<FeatureMap> = (0..4).map(|i| random_map(&format!("c{i}"), &g, &mut r)).collect();
        let lifetimes: Vec<f64> = (0..4).map(|_| r.random_range(300.0..700.0)).collect();
        let intra: Vec<(DiffTensor, f64)> = (0..3)
            .map(|i| (intra_diff(&maps[i], 2).unwrap(), lifetimes[i]))
            .collect();
        let inter: Vec<(DiffTensor, f64)> = [(0, 1), (2, 3), (3, 0)]
            .iter()
            .map(|&(t, q)| {
                (
                    inter_diff(&maps[t], &maps[q], lifetimes[q]).unwrap(),
                    lifetimes[t] - lifetimes[q],
                )
            })
            .collect();
        let xs: Vec<&DiffTensor> = intra.iter().map(|p| &p.0).collect();
        let dxs: Vec<&DiffTensor> = inter.iter().map(|p| &p.0).collect();
        if relu_margin(&model, false, &xs).min(relu_margin(&model, true, &dxs)) > 1e-3 {
            return JointInstance { model, intra, inter };
        }
    }
    unreachable!()
}

/// Joint-loss gradient of every parameter against central differences of
/// the forward-only loss.
pub fn check_joint(seed: u64, lambda: f64) -> f64 {
    let JointInstance { mut model, intra, inter } = joint_instance(seed);
    let w = LossWeights { lambda, alpha: 0.5 };
    let (_, grads) = model.joint_loss_gradients(&intra, &inter, &w).unwrap();
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let x = model.parameters()[k].data()[i];
            model.parameters_mut()[k].data_mut()[i] = x + EPS;
            let up = model.joint_loss(&intra, &inter, &w).unwrap();
            model.parameters_mut()[k].data_mut()[i] = x - EPS;
            let down = model.joint_loss(&intra, &inter, &w).unwrap();
            model.parameters_mut()[k].data_mut()[i] = x;
            worst = worst.max(rel_err(g.data()[i], (up - down) / (2.0 * EPS)));
        }
    }
    worst
}

use crate::error::{Error, Result};

use super::gemm::gemm;
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, kernel: Var, bias: Var },
    AvgPool2d { x: Var, ph: usize, pw: usize },
    Relu { x: Var },
    Flatten { x: Var },
    MatMul { x: Var, w: Var },
    Linear { x: Var, w: Var, b: Var },
    Mse { pred: Var, target: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in evaluation order; [`Tape::backward`] replays them
/// in exact reverse. Single-threaded by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient (data, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Stride-1, unpadded cross-correlation plus per-channel bias.
    /// `x: (B, Cin, H, W)`, `kernel: (Cout, Cin, kh, kw)`, `bias: (Cout)`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(kernel), self.value(bias))?;
        let rg = self.needs(x) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(out, Op::Conv2d { x, kernel, bias }, rg))
    }

    /// Mean over non-overlapping `ph x pw` blocks; trailing rows/columns that
    /// do not fill a block are dropped.
    pub fn avg_pool2d(&mut self, x: Var, ph: usize, pw: usize) -> Result<Var> {
        let out = avgpool_forward(self.value(x), ph, pw)?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::AvgPool2d { x, ph, pw }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(x);
        self.push(out, Op::Relu { x }, rg)
    }

    /// `(B, ...) -> (B, prod(...))`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let b = *v
            .shape()
            .first()
            .ok_or_else(|| Error::Shape("cannot flatten a scalar".into()))?;
        let rest = v.len().checked_div(b).unwrap_or(0);
        let out = v.clone().reshape(&[b, rest])?;
        let rg = self.needs(x);
        Ok(self.push(out, Op::Flatten { x }, rg))
    }

    /// `x: (B, D) @ w: (D, K)`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = matmul_forward(self.value(x), self.value(w), None)?;
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::MatMul { x, w }, rg))
    }

    /// `x: (B, D) @ w: (D, K) + b: (K)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = matmul_forward(self.value(x), self.value(w), Some(self.value(b)))?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Mean of squared differences over all elements; scalar result.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "mse operands {:?} vs {:?}",
                p.shape(),
                t.shape()
            )));
        }
        if p.is_empty() {
            return Err(Error::Empty("mse of empty tensors"));
        }
        let sum: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(sum / p.len() as f64);
        let rg = self.needs(pred) || self.needs(target);
        Ok(self.push(out, Op::Mse { pred, target }, rg))
    }

    /// Elementwise sum of equal-shape operands.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("add operands {:?} vs {:?}", x.shape(), y.shape())));
        }
        let mut out = x.clone();
        out.add_assign(y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let rg = self.needs(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, kernel, bias } => {
                    let (dx, dk, db) = conv2d_backward(
                        self.value(x),
                        self.value(kernel),
                        &g,
                        self.needs(x),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, x, dx);
                    }
                    if self.needs(kernel) {
                        accumulate(&mut grads, kernel, dk);
                    }
                    if self.needs(bias) {
                        accumulate(&mut grads, bias, db);
                    }
                }
                Op::AvgPool2d { x, ph, pw } => {
                    if self.needs(x) {
                        let dx = avgpool_backward(self.value(x).shape(), &g, ph, pw);
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::Relu { x } => {
                    let mut dx = g;
                    for (d, &a) in dx.data_mut().iter_mut().zip(self.value(x).data()) {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Flatten { x } => {
                    let dx = g.reshape(self.value(x).shape())?;
                    accumulate(&mut grads, x, dx);
                }
                Op::MatMul { x, w } => {
                    let (dx, dw) = matmul_backward(self.value(x), self.value(w), &g, self.needs(x), self.needs(w));
                    if let Some(dx) = dx {
                        accumulate(&mut grads, x, dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads, w, dw);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw) = matmul_backward(self.value(x), self.value(w), &g, self.needs(x), self.needs(w));
                    if let Some(dx) = dx {
                        accumulate(&mut grads, x, dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads, w, dw);
                    }
                    if self.needs(b) {
                        let k = self.value(b).len();
                        let mut db = vec![0.0; k];
                        for row in g.data().chunks_exact(k) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, b, Tensor::new(vec![k], db)?);
                    }
                }
                Op::Mse { pred, target } => {
                    let (p, t) = (self.value(pred), self.value(target));
                    let coef = 2.0 * g.data()[0] / p.len() as f64;
                    let diff: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| coef * (a - b)).collect();
                    if self.needs(target) {
                        let neg = diff.iter().map(|v| -v).collect();
                        accumulate(&mut grads, target, Tensor::new(t.shape().to_vec(), neg)?);
                    }
                    if self.needs(pred) {
                        accumulate(&mut grads, pred, Tensor::new(p.shape().to_vec(), diff)?);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(b) {
                        accumulate(&mut grads, b, g.clone());
                    }
                    if self.needs(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::Scale { x, factor } => {
                    let mut dx = g;
                    dx.data_mut().iter_mut().for_each(|v| *v *= factor);
                    accumulate(&mut grads, x, dx);
                }
            }
        }

        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, k: &Tensor) -> Result<Self> {
        let [batch, cin, h, w] = x.dims::<4>("conv2d input")?;
        let [cout, kcin, kh, kw] = k.dims::<4>("conv2d kernel")?;
        if kcin != cin {
            return Err(Error::Shape(format!(
                "conv2d kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if kh == 0 || kw == 0 || kh > h || kw > w {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} does not fit input {h}x{w}"
            )));
        }
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh: h - kh + 1,
            ow: w - kw + 1,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_sample(&self) -> usize {
        self.cin * self.h * self.w
    }
}

/// Unfolds one sample `(Cin, H, W)` into `(Cin*kh*kw, oh*ow)`.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ohw = g.out_plane();
    for ci in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let src = (ci * g.h + oy + i) * g.w + j;
                    dst[oy * g.ow..(oy + 1) * g.ow].copy_from_slice(&x[src..src + g.ow]);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ohw = g.out_plane();
    for ci in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let dst = (ci * g.h + oy + i) * g.w + j;
                    for (d, s) in dx[dst..dst + g.ow].iter_mut().zip(&src[oy * g.ow..(oy + 1) * g.ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, k: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = ConvGeom::new(x, k)?;
    if bias.shape() != [g.cout] {
        return Err(Error::Shape(format!(
            "conv2d bias must be ({}), got {:?}",
            g.cout,
            bias.shape()
        )));
    }
    let (patch, ohw) = (g.patch(), g.out_plane());
    let mut out = vec![0.0; g.batch * g.cout * ohw];
    let mut cols = vec![0.0; patch * ohw];
    for s in 0..g.batch {
        im2col(&x.data()[s * g.in_sample()..(s + 1) * g.in_sample()], &g, &mut cols);
        let o = &mut out[s * g.cout * ohw..(s + 1) * g.cout * ohw];
        for (co, plane) in o.chunks_exact_mut(ohw).enumerate() {
            plane.fill(bias.data()[co]);
        }
        gemm(g.cout, patch, ohw, k.data(), false, &cols, false, o, true);
    }
    Tensor::new(vec![g.batch, g.cout, g.oh, g.ow], out)
}

fn conv2d_backward(x: &Tensor, k: &Tensor, grad: &Tensor, want_dx: bool) -> (Option<Tensor>, Tensor, Tensor) {
    let g = ConvGeom::new(x, k).expect("validated in forward");
    let (patch, ohw) = (g.patch(), g.out_plane());
    let mut dk = vec![0.0; g.cout * patch];
    let mut db = vec![0.0; g.cout];
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut cols = vec![0.0; patch * ohw];
    let mut dcols = vec![0.0; if want_dx { patch * ohw } else { 0 }];
    for s in 0..g.batch {
        let gs = &grad.data()[s * g.cout * ohw..(s + 1) * g.cout * ohw];
        for (co, plane) in gs.chunks_exact(ohw).enumerate() {
            db[co] += plane.iter().sum::<f64>();
        }
        im2col(&x.data()[s * g.in_sample()..(s + 1) * g.in_sample()], &g, &mut cols);
        gemm(g.cout, ohw, patch, gs, false, &cols, true, &mut dk, true);
        if let Some(dx) = dx.as_mut() {
            gemm(patch, g.cout, ohw, k.data(), true, gs, false, &mut dcols, false);
            col2im_add(&dcols, &g, &mut dx[s * g.in_sample()..(s + 1) * g.in_sample()]);
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("shape")),
        Tensor::new(k.shape().to_vec(), dk).expect("shape"),
        Tensor::new(vec![g.cout], db).expect("shape"),
    )
}

fn avgpool_forward(x: &Tensor, ph: usize, pw: usize) -> Result<Tensor> {
    let [b, c, h, w] = x.dims::<4>("avg_pool2d input")?;
    if ph == 0 || pw == 0 || ph > h || pw > w {
        return Err(Error::Shape(format!("pool {ph}x{pw} does not fit input {h}x{w}")));
    }
    let (oh, ow) = (h / ph, w / pw);
    let inv = 1.0 / (ph * pw) as f64;
    let mut out = vec![0.0; b * c * oh * ow];
    for (plane, src) in out.chunks_exact_mut(oh * ow).zip(x.data().chunks_exact(h * w)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = 0.0;
                for i in 0..ph {
                    let row = (oy * ph + i) * w + ox * pw;
                    sum += src[row..row + pw].iter().sum::<f64>();
                }
                plane[oy * ow + ox] = sum * inv;
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

fn avgpool_backward(in_shape: &[usize], grad: &Tensor, ph: usize, pw: usize) -> Tensor {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (h / ph, w / pw);
    let inv = 1.0 / (ph * pw) as f64;
    let mut dx = vec![0.0; in_shape.iter().product()];
    for (dst, g) in dx.chunks_exact_mut(h * w).zip(grad.data().chunks_exact(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[oy * ow + ox] * inv;
                for i in 0..ph {
                    let row = (oy * ph + i) * w + ox * pw;
                    dst[row..row + pw].iter_mut().for_each(|d| *d = v);
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx).expect("shape")
}

fn matmul_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let [b, d] = x.dims::<2>("matmul input")?;
    let [wd, k] = w.dims::<2>("matmul weight")?;
    if wd != d {
        return Err(Error::Shape(format!(
            "matmul input has {d} features, weight expects {wd}"
        )));
    }
    let mut out = vec![0.0; b * k];
    if let Some(bias) = bias {
        if bias.shape() != [k] {
            return Err(Error::Shape(format!("bias must be ({k}), got {:?}", bias.shape())));
        }
        for row in out.chunks_exact_mut(k) {
            row.copy_from_slice(bias.data());
        }
    }
    gemm(b, d, k, x.data(), false, w.data(), false, &mut out, bias.is_some());
    Tensor::new(vec![b, k], out)
}

fn matmul_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[1];
    let dx = want_dx.then(|| {
        let mut dx = vec![0.0; b * d];
        gemm(b, k, d, grad.data(), false, w.data(), true, &mut dx, false);
        Tensor::new(vec![b, d], dx).expect("shape")
    });
    let dw = want_dw.then(|| {
        let mut dw = vec![0.0; d * k];
        gemm(d, b, k, x.data(), true, grad.data(), false, &mut dw, false);
        Tensor::new(vec![d, k], dw).expect("shape")
    });
    (dx, dw)
}

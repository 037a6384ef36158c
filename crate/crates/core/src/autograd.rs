//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node to the [`Tape`]; node ids grow
//! monotonically, so the tape is topologically ordered by construction and a
//! single reverse sweep visits each node once. There is no broadcasting:
//! elementwise primitives require identical shapes.
//!
//! `relu'(0) = 0`, `abs'(0) = 0`. Min/max route the gradient to the left
//! operand on ties.

use thiserror::Error;

use crate::tensor::{gemm, ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum GradError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
}

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Invert(Var),
    Abs(Var),
    Log(Var),
    Square(Var),
    Min(Var, Var),
    Max(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    L1Norm(Var),
    FrobeniusNorm(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    AvgPool2(Var),
    AvgPool3(Var),
    GlobalAvgPool(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Single-evaluator: build and sweep from one context.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep: `d(output)/d(node)` for every node that
/// requires a gradient and lies upstream of the output.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize), ShapeError> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(ShapeError::new(op, format!("expected (N, C, H, W), got {s:?}"))),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize), ShapeError> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(ShapeError::new(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// Unfold one `(C, H, W)` image into `(C*k*k, H*W)` columns, zero padded so
/// output spatial size equals input size.
fn im2col(img: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad;
                        dst[y * w + x] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            img[(ci * h + sy as usize) * w + sx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, img: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            img[(ci * h + sy as usize) * w + sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(ShapeError::new(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · wᵀ + b` with `x: (N, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, ShapeError> {
        let (n, fin) = dims2("linear", self.value(x))?;
        let (fout, fin2) = dims2("linear", self.value(w))?;
        if fin != fin2 {
            return Err(ShapeError::new(
                "linear",
                format!("input width {fin} vs weight width {fin2}"),
            ));
        }
        let mut out = vec![0.0; n * fout];
        gemm(
            n,
            fin,
            fout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [fout] {
                return Err(ShapeError::new(
                    "linear",
                    format!("bias shape {:?}, expected [{fout}]", bias.shape()),
                ));
            }
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bias.data()).for_each(|(o, b)| *o += b);
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::new(vec![n, fout], out)?, Op::Linear { x, w, b }, &inputs))
    }

    /// Stride-1 convolution with zero padding that preserves spatial size.
    /// `x: (N, C, H, W)`, `w: (O, C, k, k)` with odd `k`, `b: (O)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, ShapeError> {
        let (n, c, h, wd) = dims4("conv2d", self.value(x))?;
        let (o, c2, k, k2) = dims4("conv2d", self.value(w))?;
        if c != c2 || k != k2 || k % 2 == 0 {
            return Err(ShapeError::new(
                "conv2d",
                format!(
                    "input {:?} incompatible with kernel {:?}",
                    self.value(x).shape(),
                    self.value(w).shape()
                ),
            ));
        }
        if k / 2 >= h.max(wd) && k > 1 {
            return Err(ShapeError::new(
                "conv2d",
                format!("kernel {k} does not fit a {h}x{wd} map"),
            ));
        }
        let hw = h * wd;
        let ckk = c * k * k;
        let mut cols = vec![0.0; ckk * hw];
        let mut out = vec![0.0; n * o * hw];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            im2col(&xv[s * c * hw..(s + 1) * c * hw], c, h, wd, k, &mut cols);
            gemm(
                o,
                ckk,
                hw,
                wv,
                false,
                &cols,
                false,
                &mut out[s * o * hw..(s + 1) * o * hw],
                false,
            );
        }
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [o] {
                return Err(ShapeError::new(
                    "conv2d",
                    format!("bias shape {:?}, expected [{o}]", bias.shape()),
                ));
            }
            for plane in out.chunks_mut(hw).enumerate() {
                let bo = bias.data()[plane.0 % o];
                plane.1.iter_mut().for_each(|v| *v += bo);
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::new(vec![n, o, h, wd], out)?, Op::Conv2d { x, w, b }, &inputs))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = *t.shape().last().unwrap();
        let value = Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), cols)).expect("same shape");
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn invert(&mut self, x: Var) -> Var {
        self.unary(x, Op::Invert(x), |v| 1.0 / v)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, ShapeError> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary(a, b, "subtract", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary(a, b, "multiply", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary(a, b, "min", Op::Min(a, b), |x, y| if x <= y { x } else { y })
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary(a, b, "max", Op::Max(a, b), |x, y| if x >= y { x } else { y })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, ShapeError> {
        let (r, c) = dims2("transpose", self.value(x))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, ShapeError> {
        let value = self
            .value(x)
            .reshape(shape)
            .map_err(|e| ShapeError::new("reshape", e.detail))?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn l1_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v.abs()).sum();
        self.push(Tensor::scalar(s), Op::L1Norm(x), &[x])
    }

    pub fn frobenius_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).l2_norm();
        self.push(Tensor::scalar(s), Op::FrobeniusNorm(x), &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, ShapeError> {
        let (n, k) = dims2("cross_entropy", self.value(logits))?;
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(ShapeError::new(
                "cross_entropy",
                format!("{} labels for {n} rows of {k} classes", labels.len()),
            ));
        }
        let data = self.value(logits).data();
        let mut loss = 0.0;
        for (row, &label) in data.chunks(k).zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss / n as f64), op, &[logits]))
    }

    /// 2x2 average pooling with stride 2. Spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, ShapeError> {
        let (n, c, h, w) = dims4("avg_pool2", self.value(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(ShapeError::new("avg_pool2", format!("odd spatial size {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    out[(p * oh + y) * ow + xx] = 0.25 * (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]);
                }
            }
        }
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::AvgPool2(x), &[x]))
    }

    /// 3x3 average pooling, stride 1, zero padding; the divisor is always 9.
    pub fn avg_pool3(&mut self, x: Var) -> Result<Var, ShapeError> {
        let (n, c, h, w) = dims4("avg_pool3", self.value(x))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * h * w];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut out[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for sy in y.saturating_sub(1)..(y + 2).min(h) {
                        for sx in xx.saturating_sub(1)..(xx + 2).min(w) {
                            acc += s[sy * w + sx];
                        }
                    }
                    d[y * w + xx] = acc / 9.0;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![n, c, h, w], out)?, Op::AvgPool3(x), &[x]))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, ShapeError> {
        let (n, c, h, w) = dims4("global_avg_pool", self.value(x))?;
        let hw = (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool(x), &[x]))
    }

    /// Differentiate a scalar output with respect to every upstream node that
    /// requires a gradient.
    pub fn backward(&self, output: Var) -> Result<Gradients, GradError> {
        let out_shape = self.value(output).shape();
        if self.value(output).numel() != 1 {
            return Err(GradError::NonScalar(out_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::ones(out_shape));
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        // drop gradients of nodes that do not require them
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).flatten2d();
                let n = out.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut da, false);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = self.value(*x).flatten2d();
                let fout = out.shape()[1];
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * fin];
                    gemm(
                        n,
                        fout,
                        fin,
                        g.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        &mut dx,
                        false,
                    );
                    self.accumulate(grads, *x, Tensor::new(vec![n, fin], dx).unwrap());
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; fout * fin];
                    gemm(
                        fout,
                        n,
                        fin,
                        g.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        &mut dw,
                        false,
                    );
                    self.accumulate(grads, *w, Tensor::new(vec![fout, fin], dw).unwrap());
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; fout];
                    for row in g.data().chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    self.accumulate(grads, b, Tensor::vector(db));
                }
            }
            Op::Conv2d { x, w, b } => {
                let xs = self.value(*x);
                let ws = self.value(*w);
                let (n, c, h, wd) = (xs.shape()[0], xs.shape()[1], xs.shape()[2], xs.shape()[3]);
                let (o, k) = (ws.shape()[0], ws.shape()[2]);
                let hw = h * wd;
                let ckk = c * k * k;
                let mut cols = vec![0.0; ckk * hw];
                let mut dcols = vec![0.0; ckk * hw];
                let mut dw = vec![0.0; o * ckk];
                let mut dx = if self.wants(*x) {
                    vec![0.0; n * c * hw]
                } else {
                    Vec::new()
                };
                for s in 0..n {
                    let gs = &g.data()[s * o * hw..(s + 1) * o * hw];
                    if self.wants(*w) {
                        im2col(&xs.data()[s * c * hw..(s + 1) * c * hw], c, h, wd, k, &mut cols);
                        gemm(o, hw, ckk, gs, false, &cols, true, &mut dw, true);
                    }
                    if self.wants(*x) {
                        gemm(ckk, o, hw, ws.data(), true, gs, false, &mut dcols, false);
                        col2im(&dcols, c, h, wd, k, &mut dx[s * c * hw..(s + 1) * c * hw]);
                    }
                }
                if self.wants(*w) {
                    self.accumulate(grads, *w, Tensor::new(ws.shape().to_vec(), dw).unwrap());
                }
                if self.wants(*x) {
                    self.accumulate(grads, *x, Tensor::new(xs.shape().to_vec(), dx).unwrap());
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; o];
                    for (i, plane) in g.data().chunks(hw).enumerate() {
                        db[i % o] += plane.iter().sum::<f64>();
                    }
                    self.accumulate(grads, b, Tensor::vector(db));
                }
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .zip_map(g, "relu", |v, gv| if v > 0.0 { gv } else { 0.0 })
                    .unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = out.zip_map(g, "sigmoid", |s, gv| gv * s * (1.0 - s)).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Softmax(x) => {
                let cols = *out.shape().last().unwrap();
                let mut d = vec![0.0; out.numel()];
                for ((s, gr), dr) in out
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(d.chunks_mut(cols))
                {
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..cols {
                        dr[i] = s[i] * (gr[i] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(
                        grads,
                        *a,
                        g.zip_map(self.value(*b), "multiply", |gv, bv| gv * bv).unwrap(),
                    );
                }
                if self.wants(*b) {
                    self.accumulate(
                        grads,
                        *b,
                        g.zip_map(self.value(*a), "multiply", |gv, av| gv * av).unwrap(),
                    );
                }
            }
            Op::Invert(x) => {
                let d = self.value(*x).zip_map(g, "invert", |v, gv| -gv / (v * v)).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Abs(x) => {
                let d = self.value(*x).zip_map(g, "abs", |v, gv| gv * sign(v)).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Log(x) => {
                let d = self.value(*x).zip_map(g, "log", |v, gv| gv / v).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Square(x) => {
                let d = self.value(*x).zip_map(g, "square", |v, gv| 2.0 * v * gv).unwrap();
                self.accumulate(grads, *x, d);
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let left: Vec<bool> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| if is_min { x <= y } else { x >= y })
                    .collect();
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(&left)
                    .map(|(gv, &l)| if l { *gv } else { 0.0 })
                    .collect();
                let db: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(&left)
                    .map(|(gv, &l)| if l { 0.0 } else { *gv })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), da).unwrap());
                self.accumulate(grads, *b, Tensor::new(out.shape().to_vec(), db).unwrap());
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g.map(|v| v * f)),
            Op::Sum(x) => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::full(shape, g.data()[0]));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(t.shape(), g.data()[0] / t.numel() as f64));
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).flatten2d();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g.data()[j * r + i];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![r, c], d).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape).unwrap());
            }
            Op::L1Norm(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, self.value(*x).map(|v| gv * sign(v)));
            }
            Op::FrobeniusNorm(x) => {
                let norm = out.data()[0];
                let gv = g.data()[0];
                let d = if norm > 0.0 {
                    self.value(*x).map(|v| gv * v / norm)
                } else {
                    Tensor::zeros(self.value(*x).shape())
                };
                self.accumulate(grads, *x, d);
            }
            Op::CrossEntropy { logits, labels } => {
                let t = self.value(*logits);
                let (n, k) = t.flatten2d();
                let mut d = softmax_rows(t.data(), k);
                let scale = g.data()[0] / n as f64;
                for (row, &label) in d.chunks_mut(k).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, Tensor::new(t.shape().to_vec(), d).unwrap());
            }
            Op::AvgPool2(x) => {
                let s = self.value(*x).shape().to_vec();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut d = vec![0.0; s.iter().product()];
                for p in 0..s[0] * s[1] {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = 0.25 * g.data()[(p * oh + y) * ow + xx];
                            let base = p * h * w + 2 * y * w + 2 * xx;
                            d[base] += gv;
                            d[base + 1] += gv;
                            d[base + w] += gv;
                            d[base + w + 1] += gv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, d).unwrap());
            }
            Op::AvgPool3(x) => {
                let s = self.value(*x).shape().to_vec();
                let (h, w) = (s[2], s[3]);
                let mut d = vec![0.0; s.iter().product()];
                for p in 0..s[0] * s[1] {
                    let gp = &g.data()[p * h * w..(p + 1) * h * w];
                    let dp = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            let gv = gp[y * w + xx] / 9.0;
                            for sy in y.saturating_sub(1)..(y + 2).min(h) {
                                for sx in xx.saturating_sub(1)..(xx + 2).min(w) {
                                    dp[sy * w + sx] += gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, d).unwrap());
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape().to_vec();
                let hw = s[2] * s[3];
                let mut d = vec![0.0; s.iter().product()];
                for (plane, gv) in d.chunks_mut(hw).zip(g.data()) {
                    plane.iter_mut().for_each(|v| *v = gv / hw as f64);
                }
                self.accumulate(grads, *x, Tensor::new(s, d).unwrap());
            }
        }
    }
}

/// Maximum over coordinates of `|analytic - numeric| / max(1, |numeric|)`,
/// comparing the tape gradient of `f` at `point` with central differences of
/// step `h`.
pub fn gradient_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64, GradError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, GradError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    let analytic = grads.get_or_zeros(x, point.shape());

    let eval = |p: Tensor| -> Result<f64, GradError> {
        let mut tape = Tape::new();
        let x = tape.param(p);
        let y = f(&mut tape, x)?;
        let v = tape.value(y);
        if v.numel() != 1 {
            return Err(GradError::NonScalar(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

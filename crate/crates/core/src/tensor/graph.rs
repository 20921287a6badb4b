use rand::Rng;

use super::kernels::{self, gemm_nt, gemm_tn};
use super::{split_axis, MatmulPlan, Tensor};
use crate::error::{NstError, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    ClampMin(Var, f64),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanAxis0(Var),
    StdAxis0(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Mae(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations. Node creation order is a valid topological
/// order, so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient of the loss with respect to `v`, zero if `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Linear index map for right-hand-side broadcasting: equal shapes, a
/// single-element rhs, or an rhs whose shape is a suffix of the lhs shape.
fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    lhs == rhs || rhs.iter().product::<usize>() == 1 || lhs.ends_with(rhs)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf treated as data.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !broadcast_ok(av.shape(), bv.shape()) {
            return Err(NstError::dim(name, av.shape(), bv.shape()));
        }
        let period = bv.numel();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % period]))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// `max(x, floor)`; the gradient flows only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `x W + b` with `W: [in, out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(perm)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(NstError::dim("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax_rows()?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Softmax(a), ng))
    }

    /// Normalises over the last axis (biased variance, `eps = 1e-5` inside
    /// the square root), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let d = xv.cols();
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(NstError::dim("layer_norm", xv.shape(), self.shape(gain)));
        }
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            xhat.extend(row.iter().map(|v| (v - mean) * is));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + b[i % d])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    fn check_window(&self, x: Var, op: &'static str) -> Result<(usize, usize)> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(NstError::dim(op, xv.shape(), &[]));
        }
        let (s, c) = (xv.shape()[0], xv.shape()[1]);
        if s == 0 {
            return Err(NstError::EmptyWindow(op));
        }
        Ok((s, c))
    }

    /// Population mean and standard deviation over the temporal axis of an
    /// `[S, C]` window.
    pub fn reduce_mean_std(&mut self, x: Var) -> Result<(Var, Var)> {
        let (s, c) = self.check_window(x, "reduce_mean_std")?;
        let (mean, std) = column_mean_std(self.value(x).data(), s, c);
        let ng = self.ng(x);
        let m = self.push(Tensor::vector(mean), Op::MeanAxis0(x), ng);
        let sd = self.push(Tensor::vector(std), Op::StdAxis0(x), ng);
        Ok((m, sd))
    }

    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let (s, c) = self.check_window(x, "mean_axis0")?;
        let (mean, _) = column_mean_std(self.value(x).data(), s, c);
        let ng = self.ng(x);
        Ok(self.push(Tensor::vector(mean), Op::MeanAxis0(x), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), ng))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice(axis, start, len)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Slice(a, axis, start), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(NstError::dim("mse", p.shape(), t.shape()));
        }
        let n = p.numel().max(1) as f64;
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target), ng))
    }

    pub fn mae(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(NstError::dim("mae", p.shape(), t.shape()));
        }
        let n = p.numel().max(1) as f64;
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(Tensor::scalar(s), Op::Mae(pred, target), ng))
    }

    /// Inverted dropout. A rate of zero records nothing.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let shape = self.shape(a).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(a, m)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(NstError::dim("backward", self.shape(loss), &[1]));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Grads {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; len])
                .as_mut_slice(),
        )
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ga) = self.acc(grads, *a) {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let p = gb.len();
                    for (k, s) in g.iter().enumerate() {
                        gb[k % p] += sign * s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let p = bv.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, d) in ga.iter_mut().enumerate() {
                        *d += g[k] * bv[k % p];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (k, s) in g.iter().enumerate() {
                        gb[k % p] += s * av[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let p = bv.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, d) in ga.iter_mut().enumerate() {
                        *d += g[k] / bv[k % p];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (k, s) in g.iter().enumerate() {
                        let bk = bv[k % p];
                        gb[k % p] -= s * av[k] / (bk * bk);
                    }
                }
            }
            Op::Scale(a, k) => self.unary_back(grads, *a, g, y, |_, _| *k),
            Op::AddScalar(a) => self.unary_back(grads, *a, g, y, |_, _| 1.0),
            Op::Exp(a) => self.unary_back(grads, *a, g, y, |_, y| y),
            Op::Log(a) => self.unary_back(grads, *a, g, y, |x, _| 1.0 / x),
            Op::Sqrt(a) => self.unary_back(grads, *a, g, y, |_, y| 0.5 / y),
            Op::Relu(a) => self.unary_back(grads, *a, g, y, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Gelu(a) => self.unary_back(grads, *a, g, y, |x, _| kernels::gelu_grad(x)),
            Op::Tanh(a) => self.unary_back(grads, *a, g, y, |_, y| 1.0 - y * y),
            Op::ClampMin(a, f) => {
                let f = *f;
                self.unary_back(grads, *a, g, y, move |x, _| if x > f { 1.0 } else { 0.0 })
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let plan = MatmulPlan::new(av.shape(), bv.shape()).expect("validated in forward");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if let Some(ga) = self.acc(grads, *a) {
                    for bi in 0..plan.batch {
                        let off = if plan.a_batched { bi * m * k } else { 0 };
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            plan.b_block(bi, bv.data()),
                            &mut ga[off..off + m * k],
                        );
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for bi in 0..plan.batch {
                        let off = if plan.b_batched { bi * k * n } else { 0 };
                        gemm_tn(
                            m,
                            k,
                            n,
                            plan.a_block(bi, av.data()),
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[off..off + k * n],
                        );
                    }
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())
                    .and_then(|t| t.permute(&inv))
                    .expect("inverse permutation");
                if let Some(ga) = self.acc(grads, *a) {
                    for (d, s) in ga.iter_mut().zip(gt.data()) {
                        *d += s;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), dr) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dotp = kernels::dot(gr, yr);
                        for k in 0..c {
                            dr[k] += yr[k] * (gr[k] - dotp);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gv = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (k, s) in g.iter().enumerate() {
                        gg[k % d] += s * xhat[k];
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for (k, s) in g.iter().enumerate() {
                        gb[k % d] += s;
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let df = d as f64;
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for k in 0..d {
                            let dh = gr[k] * gv[k];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[k];
                        }
                        let out = &mut gx[r * d..(r + 1) * d];
                        for k in 0..d {
                            let dh = gr[k] * gv[k];
                            out[k] += is / df * (df * dh - sum_dh - hr[k] * sum_dh_h);
                        }
                    }
                }
            }
            Op::MeanAxis0(a) => {
                let s = self.value(*a).shape()[0];
                if let Some(ga) = self.acc(grads, *a) {
                    let c = g.len();
                    for (k, d) in ga.iter_mut().enumerate() {
                        *d += g[k % c] / s as f64;
                    }
                }
            }
            Op::StdAxis0(a) => {
                let xv = self.value(*a);
                let (s, c) = (xv.shape()[0], xv.shape()[1]);
                let (mean, _) = column_mean_std(xv.data(), s, c);
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, d) in ga.iter_mut().enumerate() {
                        let col = k % c;
                        // d sigma / d x_i = (x_i - mu) / (S sigma); zero at sigma = 0
                        if y[col] > 0.0 {
                            *d += g[col] * (xv.data()[k] - mean[col]) / (s as f64 * y[col]);
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut start = 0;
                for p in parts {
                    let len = self.value(*p).shape()[*axis];
                    if let Some(gp) = self.acc(grads, *p) {
                        for o in 0..outer {
                            let src =
                                &g[(o * total + start) * inner..(o * total + start + len) * inner];
                            let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    start += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let src_shape = self.value(*a).shape();
                let (outer, dim, inner) = split_axis(src_shape, *axis);
                let len = node.value.shape()[*axis];
                if let Some(ga) = self.acc(grads, *a) {
                    for o in 0..outer {
                        let dst =
                            &mut ga[(o * dim + start) * inner..(o * dim + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let n = ga.len() as f64;
                    for d in ga.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::Mse(p, t) | Op::Mae(p, t) => {
                let is_mse = matches!(node.op, Op::Mse(..));
                let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                let n = pv.len() as f64;
                let local = |k: usize| {
                    let e = pv[k] - tv[k];
                    if is_mse {
                        2.0 * e / n
                    } else {
                        sign(e) / n
                    }
                };
                if let Some(gp) = self.acc(grads, *p) {
                    for (k, d) in gp.iter_mut().enumerate() {
                        *d += g[0] * local(k);
                    }
                }
                if let Some(gt) = self.acc(grads, *t) {
                    for (k, d) in gt.iter_mut().enumerate() {
                        *d -= g[0] * local(k);
                    }
                }
            }
        }
    }

    fn unary_back(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        y: &[f64],
        local: impl Fn(f64, f64) -> f64,
    ) {
        let x = self.value(a).data();
        if let Some(ga) = self.acc(grads, a) {
            for k in 0..ga.len() {
                ga[k] += g[k] * local(x[k], y[k]);
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Column means and population standard deviations of a row-major `[s, c]`
/// block.
pub(crate) fn column_mean_std(data: &[f64], s: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; c];
    for row in data.chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= s as f64;
    }
    let mut var = vec![0.0; c];
    for row in data.chunks(c) {
        for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|v| (v / s as f64).sqrt()).collect();
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_subexpression_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), 2.0);
    }

    #[test]
    fn diamond_dag_accumulates() {
        // f = (x*x) + (x*x) => df/dx = 4x
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.5));
        let sq = g.mul(x, x).unwrap();
        let f = g.add(sq, sq).unwrap();
        let grads = g.backward(f).unwrap();
        assert!((grads.get(x).item() - 6.0).abs() < 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.raw(c).is_none());
        assert_eq!(grads.get(x).data(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn broadcast_rules_are_strict() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros([3, 4]));
        let row = g.param(Tensor::zeros([4]));
        let col = g.param(Tensor::zeros([3]));
        let s = g.param(Tensor::scalar(2.0));
        assert!(g.add(a, row).is_ok());
        assert!(g.mul(a, s).is_ok());
        assert!(g.add(a, col).is_err());
    }

    #[test]
    fn mean_std_population() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0], [2.0], [3.0]]).unwrap());
        let (m, s) = g.reduce_mean_std(x).unwrap();
        assert_eq!(g.value(m).data(), &[2.0]);
        assert!((g.value(s).item() - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let mut g = Graph::new();
        let empty = g.constant(Tensor::zeros([0, 2]));
        assert!(matches!(
            g.reduce_mean_std(empty),
            Err(NstError::EmptyWindow(_))
        ));
    }

    #[test]
    fn layer_norm_constant_rows_map_to_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([2, 4], 7.0));
        let gain = g.constant(Tensor::ones([4]));
        let bias = g.constant(Tensor::zeros([4]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).max_abs() < 1e-12);
    }
}

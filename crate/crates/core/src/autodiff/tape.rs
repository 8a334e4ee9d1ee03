use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use super::tensor::{
    broadcast_binary, check_permutation, gemm, split_axis, sum_to_shape, Tensor,
};
use crate::error::{Error, Result};
use crate::grid::{linear_taps, LerpTap, Sampling};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

/// Recording of a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// `x[.., k] · w[k, n] (+ b[n])`
    Linear(usize, usize, Option<usize>),
    /// `a[batch.., m, k] · b[batch.., k, n]`
    BatchMatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    SumAxis(usize, usize),
    Concat(Vec<usize>, usize),
    Narrow(usize, usize, usize),
    IndexSelect(usize, usize, Arc<Vec<usize>>),
    Sigmoid(usize),
    Gelu(usize),
    LayerNorm(usize, f64),
    Softmax(usize),
    L2Normalize(usize, f64),
    Clamp(usize, f64, f64),
    Resize(usize, usize, Arc<Vec<LerpTap>>),
    Unfold(usize, usize),
    CrossEntropy(usize, Arc<Vec<u32>>, u32, f64),
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros when no path reached it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::shape("backward root belongs to another tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            let mut acc = |pid: usize, t: Tensor| {
                if !nodes[pid].needs_grad {
                    return;
                }
                grads[pid] = Some(match grads[pid].take() {
                    None => t,
                    Some(prev) => add_same(&prev, &t),
                });
            };
            let val = |pid: usize| &nodes[pid].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, sum_to_shape(&g, val(*a).shape()));
                    acc(*b, sum_to_shape(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(*a, sum_to_shape(&g, val(*a).shape()));
                    acc(*b, sum_to_shape(&g, val(*b).shape()).map(|v| -v));
                }
                Op::Mul(a, b) => {
                    if nodes[*a].needs_grad {
                        let ga = broadcast_binary(&g, val(*b), |x, y| x * y)?;
                        acc(*a, sum_to_shape(&ga, val(*a).shape()));
                    }
                    if nodes[*b].needs_grad {
                        let gb = broadcast_binary(&g, val(*a), |x, y| x * y)?;
                        acc(*b, sum_to_shape(&gb, val(*b).shape()));
                    }
                }
                Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
                Op::Linear(x, w, b) => {
                    let (xv, wv) = (val(*x), val(*w));
                    let k = wv.shape()[0];
                    let n = wv.shape()[1];
                    let rows = xv.numel() / k;
                    if nodes[*x].needs_grad {
                        let mut gx = vec![0.0; rows * k];
                        gemm(rows, n, k, g.data(), (n, 1), wv.data(), (1, n), &mut gx, 0.0);
                        acc(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
                    }
                    if nodes[*w].needs_grad {
                        let mut gw = vec![0.0; k * n];
                        gemm(k, rows, n, xv.data(), (1, k), g.data(), (n, 1), &mut gw, 0.0);
                        acc(*w, Tensor::from_parts(vec![k, n], gw));
                    }
                    if let Some(b) = b {
                        acc(*b, sum_to_shape(&g, &[n]));
                    }
                }
                Op::BatchMatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let r = av.rank();
                    let (m, k, n) = (av.shape()[r - 2], av.shape()[r - 1], bv.shape()[r - 1]);
                    let batch = av.numel() / (m * k);
                    if nodes[*a].needs_grad {
                        let mut ga = vec![0.0; av.numel()];
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g.data()[i * m * n..],
                                (n, 1),
                                &bv.data()[i * k * n..],
                                (1, n),
                                &mut ga[i * m * k..],
                                0.0,
                            );
                        }
                        acc(*a, Tensor::from_parts(av.shape().to_vec(), ga));
                    }
                    if nodes[*b].needs_grad {
                        let mut gb = vec![0.0; bv.numel()];
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &av.data()[i * m * k..],
                                (1, k),
                                &g.data()[i * m * n..],
                                (n, 1),
                                &mut gb[i * k * n..],
                                0.0,
                            );
                        }
                        acc(*b, Tensor::from_parts(bv.shape().to_vec(), gb));
                    }
                }
                Op::Permute(a, dims) => {
                    let mut inv = vec![0; dims.len()];
                    for (i, &d) in dims.iter().enumerate() {
                        inv[d] = i;
                    }
                    acc(*a, g.permute(&inv)?);
                }
                Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
                Op::SumAxis(a, axis) => {
                    let shape = val(*a).shape();
                    let (outer, n, inner) = split_axis(shape, *axis);
                    let mut out = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let src = &g.data()[o * inner..][..inner];
                        for _ in 0..n {
                            out.extend_from_slice(src);
                        }
                    }
                    acc(*a, Tensor::from_parts(shape.to_vec(), out));
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        if nodes[p].needs_grad {
                            acc(p, narrow_tensor(&g, *axis, start, len));
                        }
                        start += len;
                    }
                }
                Op::Narrow(a, axis, start) => {
                    let shape = val(*a).shape();
                    let (outer, n, inner) = split_axis(shape, *axis);
                    let len = g.shape()[*axis];
                    let mut out = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        out[dst..dst + len * inner]
                            .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                    }
                    acc(*a, Tensor::from_parts(shape.to_vec(), out));
                }
                Op::IndexSelect(a, axis, idx) => {
                    let shape = val(*a).shape();
                    let (outer, n, inner) = split_axis(shape, *axis);
                    let mut out = vec![0.0; outer * n * inner];
                    let gd = g.data();
                    for o in 0..outer {
                        for (j, &i) in idx.iter().enumerate() {
                            let src = &gd[(o * idx.len() + j) * inner..][..inner];
                            let dst = &mut out[(o * n + i) * inner..][..inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    acc(*a, Tensor::from_parts(shape.to_vec(), out));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = y.data().iter().zip(g.data()).map(|(s, g)| g * s * (1.0 - s));
                    acc(*a, Tensor::from_parts(y.shape().to_vec(), d.collect()));
                }
                Op::Gelu(a) => {
                    let x = val(*a);
                    let d = x.data().iter().zip(g.data()).map(|(&x, g)| g * gelu_grad(x));
                    acc(*a, Tensor::from_parts(x.shape().to_vec(), d.collect()));
                }
                Op::LayerNorm(a, eps) => {
                    let x = val(*a);
                    let n = *x.shape().last().unwrap();
                    let mut out = vec![0.0; x.numel()];
                    for ((xr, gr), or) in x
                        .data()
                        .chunks(n)
                        .zip(g.data().chunks(n))
                        .zip(out.chunks_mut(n))
                    {
                        let (mean, inv) = row_moments(xr, *eps);
                        let gm = gr.iter().sum::<f64>() / n as f64;
                        let gy = xr
                            .iter()
                            .zip(gr)
                            .map(|(x, g)| (x - mean) * inv * g)
                            .sum::<f64>()
                            / n as f64;
                        for ((o, x), g) in or.iter_mut().zip(xr).zip(gr) {
                            let y = (x - mean) * inv;
                            *o = inv * (g - gm - y * gy);
                        }
                    }
                    acc(*a, Tensor::from_parts(x.shape().to_vec(), out));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let n = *y.shape().last().unwrap();
                    let mut out = vec![0.0; y.numel()];
                    for ((yr, gr), or) in y
                        .data()
                        .chunks(n)
                        .zip(g.data().chunks(n))
                        .zip(out.chunks_mut(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((o, y), g) in or.iter_mut().zip(yr).zip(gr) {
                            *o = y * (g - dot);
                        }
                    }
                    acc(*a, Tensor::from_parts(y.shape().to_vec(), out));
                }
                Op::L2Normalize(a, eps) => {
                    let x = val(*a);
                    let y = &node.value;
                    let n = *y.shape().last().unwrap();
                    let mut out = vec![0.0; y.numel()];
                    for (((xr, yr), gr), or) in x
                        .data()
                        .chunks(n)
                        .zip(y.data().chunks(n))
                        .zip(g.data().chunks(n))
                        .zip(out.chunks_mut(n))
                    {
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > *eps {
                            let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                            for ((o, y), g) in or.iter_mut().zip(yr).zip(gr) {
                                *o = (g - y * dot) / norm;
                            }
                        } else {
                            for (o, g) in or.iter_mut().zip(gr) {
                                *o = g / eps;
                            }
                        }
                    }
                    acc(*a, Tensor::from_parts(y.shape().to_vec(), out));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = val(*a);
                    let d = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(x, g)| if x >= lo && x <= hi { *g } else { 0.0 });
                    acc(*a, Tensor::from_parts(x.shape().to_vec(), d.collect()));
                }
                Op::Resize(a, axis, taps) => {
                    let shape = val(*a).shape();
                    let (outer, n, inner) = split_axis(shape, *axis);
                    let m = taps.len();
                    let mut out = vec![0.0; outer * n * inner];
                    let gd = g.data();
                    for o in 0..outer {
                        for (j, t) in taps.iter().enumerate() {
                            let src = &gd[(o * m + j) * inner..][..inner];
                            for (i, w) in [(t.i0, t.w0), (t.i1, t.w1)] {
                                if w == 0.0 {
                                    continue;
                                }
                                let dst = &mut out[(o * n + i) * inner..][..inner];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += w * s;
                                }
                            }
                        }
                    }
                    acc(*a, Tensor::from_parts(shape.to_vec(), out));
                }
                Op::Unfold(a, k) => {
                    let shape = val(*a).shape();
                    acc(*a, fold(&g, shape, *k));
                }
                Op::CrossEntropy(a, targets, ignore, norm) => {
                    let x = val(*a);
                    let c = *x.shape().last().unwrap();
                    let scale = g.item() / norm;
                    let mut out = vec![0.0; x.numel()];
                    for ((xr, or), &t) in x.data().chunks(c).zip(out.chunks_mut(c)).zip(targets.iter())
                    {
                        if t == *ignore {
                            continue;
                        }
                        softmax_row(xr, or);
                        or[t as usize] -= 1.0;
                        or.iter_mut().for_each(|v| *v *= scale);
                    }
                    acc(*a, Tensor::from_parts(x.shape().to_vec(), out));
                }
            }
            // Intermediate gradients are no longer needed once propagated.
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn add_same(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|v| *v /= sum);
}

/// `log(sum(exp(x)))` of a row.
fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn narrow_tensor(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, n, inner) = split_axis(t.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&t.data()[(o * n + start) * inner..][..len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, out)
}

/// `[.., h, w] -> [.., h, w, k*k]` zero-padded neighbourhoods.
fn unfold(x: &Tensor, k: usize) -> Tensor {
    let r = x.rank();
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let planes = x.numel() / (h * w);
    let pad = (k / 2) as isize;
    let kk = k * k;
    let mut out = vec![0.0; x.numel() * kk];
    for p in 0..planes {
        let src = &x.data()[p * h * w..][..h * w];
        let dst = &mut out[p * h * w * kk..][..h * w * kk];
        for y in 0..h {
            for xx in 0..w {
                for dy in 0..k {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = xx as isize + dx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[(y * w + xx) * kk + dy * k + dx] = src[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.push(kk);
    Tensor::from_parts(shape, out)
}

fn fold(g: &Tensor, shape: &[usize], k: usize) -> Tensor {
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let planes: usize = shape[..r - 2].iter().product();
    let pad = (k / 2) as isize;
    let kk = k * k;
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g.data()[p * h * w * kk..][..h * w * kk];
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..h {
            for xx in 0..w {
                for dy in 0..k {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = xx as isize + dx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[sy as usize * w + sx as usize] += src[(y * w + xx) * kk + dy * k + dx];
                    }
                }
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.tape.nodes.borrow()[self.id].value.shape()[axis]
    }

    pub fn rank(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.rank()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::shape("operands live on different tapes"))
        }
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, needs)
    }

    fn axis_check(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(Error::shape(format!(
                "axis {axis} out of range for {:?}",
                self.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = broadcast_binary(&self.value(), &other.value(), |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = broadcast_binary(&self.value(), &other.value(), |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let v = broadcast_binary(&self.value(), &other.value(), |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    /// `self[.., k] · weight[k, n] + bias[n]`.
    pub fn linear(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        self.same_tape(weight)?;
        let (x, w) = (self.value(), weight.value());
        if w.rank() != 2 || x.rank() == 0 || *x.shape().last().unwrap() != w.shape()[0] {
            return Err(Error::shape(format!(
                "linear: input {:?} incompatible with weight {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let rows = x.numel() / k;
        let mut out = vec![0.0; rows * n];
        let mut needs = self.requires_grad() || weight.requires_grad();
        let mut bias_id = None;
        if let Some(b) = bias {
            self.same_tape(b)?;
            let bv = b.value();
            if bv.shape() != [n] {
                return Err(Error::shape(format!(
                    "linear: bias {:?} does not match output width {n}",
                    bv.shape()
                )));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv.data());
            }
            needs |= b.requires_grad();
            bias_id = Some(b.id);
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(rows, k, n, x.data(), (k, 1), w.data(), (n, 1), &mut out, beta);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Linear(self.id, weight.id, bias_id),
            needs,
        ))
    }

    /// Batched matrix product over matching leading dimensions.
    pub fn batch_matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        let r = a.rank();
        if r < 2
            || b.rank() != r
            || a.shape()[..r - 2] != b.shape()[..r - 2]
            || a.shape()[r - 1] != b.shape()[r - 2]
        {
            return Err(Error::shape(format!(
                "batch_matmul: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k, n) = (a.shape()[r - 2], a.shape()[r - 1], b.shape()[r - 1]);
        let batch: usize = a.shape()[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..],
                (k, 1),
                &b.data()[i * k * n..],
                (n, 1),
                &mut out[i * m * n..],
                0.0,
            );
        }
        let mut shape = a.shape().to_vec();
        shape[r - 1] = n;
        Ok(self.binary(
            other,
            Tensor::from_parts(shape, out),
            Op::BatchMatMul(self.id, other.id),
        ))
    }

    pub fn permute(&self, dims: &[usize]) -> Result<Var<'t>> {
        check_permutation(dims, self.rank())?;
        let v = self.value().permute(dims)?;
        Ok(self.unary(v, Op::Permute(self.id, dims.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'t>> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose_last needs rank >= 2"));
        }
        let mut dims: Vec<usize> = (0..r).collect();
        dims.swap(r - 2, r - 1);
        self.permute(&dims)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Sum along `axis`, keeping it with length one.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.axis_check(axis)?;
        let x = self.value();
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..][..inner];
            for i in 0..n {
                for (d, s) in dst.iter_mut().zip(&x.data()[(o * n + i) * inner..][..inner]) {
                    *d += s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        Ok(self.unary(Tensor::from_parts(shape, out), Op::SumAxis(self.id, axis)))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let n = self.dim(axis) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    /// Sum of every element as a one-element tensor.
    pub fn sum_all(&self) -> Result<Var<'t>> {
        let n = self.value().numel();
        self.reshape(&[n])?.sum_axis(0)
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        first.axis_check(axis)?;
        let base = first.shape();
        let mut total = 0;
        let values: Vec<Tensor> = parts.iter().map(Var::value).collect();
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along {axis}: {s:?} vs {base:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..][..len]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let needs = parts.iter().any(Var::requires_grad);
        Ok(first.tape.push(
            Tensor::from_parts(shape, out),
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            needs,
        ))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        self.axis_check(axis)?;
        if start + len > self.dim(axis) {
            return Err(Error::shape(format!(
                "narrow {start}+{len} exceeds axis {axis} of {:?}",
                self.shape()
            )));
        }
        let v = narrow_tensor(&self.value(), axis, start, len);
        Ok(self.unary(v, Op::Narrow(self.id, axis, start)))
    }

    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let v = self.value().index_select(axis, indices)?;
        Ok(self.unary(v, Op::IndexSelect(self.id, axis, Arc::new(indices.to_vec()))))
    }

    /// Zero padding at the end of `axis`.
    pub fn pad_end(&self, axis: usize, amount: usize) -> Result<Var<'t>> {
        if amount == 0 {
            return Ok(*self);
        }
        let mut shape = self.shape();
        shape[axis] = amount;
        let zeros = self.tape.constant(Tensor::zeros(&shape));
        Var::concat(&[*self, zeros], axis)
    }

    /// Circular shift by `shift` positions towards lower indices along `axis`.
    pub fn roll_back(&self, axis: usize, shift: usize) -> Result<Var<'t>> {
        let n = self.dim(axis);
        let idx: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        self.index_select(axis, &idx)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.value().map(sigmoid);
        self.unary(v, Op::Sigmoid(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    /// Normalisation over the last axis, without affine terms.
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().ok_or_else(|| Error::shape("layer_norm on a scalar"))?;
        let mut out = vec![0.0; x.numel()];
        for (xr, or) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            let (mean, inv) = row_moments(xr, eps);
            for (o, v) in or.iter_mut().zip(xr) {
                *o = (v - mean) * inv;
            }
        }
        Ok(self.unary(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm(self.id, eps),
        ))
    }

    pub fn softmax_last(&self) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().ok_or_else(|| Error::shape("softmax on a scalar"))?;
        let mut out = vec![0.0; x.numel()];
        for (xr, or) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(xr, or);
        }
        Ok(self.unary(Tensor::from_parts(x.shape().to_vec(), out), Op::Softmax(self.id)))
    }

    /// `x / max(|x|, eps)` over the last axis.
    pub fn l2_normalize(&self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().ok_or_else(|| Error::shape("normalize on a scalar"))?;
        let mut out = vec![0.0; x.numel()];
        for (xr, or) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for (o, v) in or.iter_mut().zip(xr) {
                *o = v / norm;
            }
        }
        Ok(self.unary(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::L2Normalize(self.id, eps),
        ))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.unary(v, Op::Clamp(self.id, lo, hi))
    }

    /// Linear resampling of `axis` to `len` samples.
    pub fn resize_axis(&self, axis: usize, len: usize, sampling: Sampling) -> Result<Var<'t>> {
        self.axis_check(axis)?;
        if len == 0 {
            return Err(Error::shape("resize to zero length"));
        }
        let x = self.value();
        let (outer, n, inner) = split_axis(x.shape(), axis);
        if n == len {
            return Ok(*self);
        }
        let taps = linear_taps(n, len, sampling);
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for (j, t) in taps.iter().enumerate() {
                let dst = &mut out[(o * len + j) * inner..][..inner];
                let a = &x.data()[(o * n + t.i0) * inner..][..inner];
                let b = &x.data()[(o * n + t.i1) * inner..][..inner];
                for ((d, a), b) in dst.iter_mut().zip(a).zip(b) {
                    *d = t.w0 * a + t.w1 * b;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary(
            Tensor::from_parts(shape, out),
            Op::Resize(self.id, axis, Arc::new(taps)),
        ))
    }

    /// Bilinear resize of two adjacent spatial axes `(axis, axis + 1)`.
    pub fn resize_bilinear(
        &self,
        axis: usize,
        out_h: usize,
        out_w: usize,
        sampling: Sampling,
    ) -> Result<Var<'t>> {
        self.resize_axis(axis, out_h, sampling)?
            .resize_axis(axis + 1, out_w, sampling)
    }

    /// `[.., h, w] -> [.., h, w, k*k]` zero-padded `k × k` neighbourhoods.
    pub fn unfold(&self, k: usize) -> Result<Var<'t>> {
        if self.rank() < 2 || k % 2 == 0 {
            return Err(Error::shape(format!(
                "unfold needs rank >= 2 and an odd kernel, got {:?} / {k}",
                self.shape()
            )));
        }
        let v = unfold(&self.value(), k);
        Ok(self.unary(v, Op::Unfold(self.id, k)))
    }

    /// Summed categorical cross-entropy over rows of `[.., classes]` logits,
    /// divided by `norm`. Rows whose target equals `ignore` contribute nothing.
    pub fn cross_entropy(&self, targets: &[u32], ignore: u32, norm: f64) -> Result<Var<'t>> {
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| Error::shape("cross_entropy on a scalar"))?;
        if targets.len() * c != x.numel() {
            return Err(Error::shape(format!(
                "cross_entropy: {} targets for logits {:?}",
                targets.len(),
                x.shape()
            )));
        }
        let mut total = 0.0;
        for (row, &t) in x.data().chunks(c).zip(targets) {
            if t == ignore {
                continue;
            }
            if t as usize >= c {
                return Err(Error::input(format!("target {t} outside [0, {c})")));
            }
            total += log_sum_exp(row) - row[t as usize];
        }
        Ok(self.unary(
            Tensor::scalar(total / norm),
            Op::CrossEntropy(self.id, Arc::new(targets.to_vec()), ignore, norm),
        ))
    }
}

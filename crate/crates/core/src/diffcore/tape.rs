use super::ops::{self, ConvGeom, DROP};
use super::tensor::{numel, Tensor};
use super::DiffError;

type Result<T> = std::result::Result<T, DiffError>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    ClampMin(Var, f64),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize, end: usize },
    Permute(Var, Vec<usize>),
    ReduceSum(Var, usize),
    ReduceMean(Var, usize),
    SumAll(Var),
    ExclusiveCumprod(Var),
    Bilinear { input: Var, coords: Var },
    Trilinear { input: Var, coords: Var },
    ScatterAdd { src: Var, index: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of a forward computation.
///
/// Nodes are appended in execution order, so the record is already a
/// topological order. An op whose inputs are all constant is stored as a
/// constant and never visited by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one reverse replay, keyed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `v` if the loss never touched it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    /// Adds another replay's gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(DiffError::AxisOutOfRange { op, axis, rank });
    }
    Ok(())
}

fn mismatch(op: &'static str, detail: String) -> DiffError {
    DiffError::ShapeMismatch { op, detail }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op: op_name });
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input (parameter or checked quantity).
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push("leaf", t, Op::Leaf, true)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else {
            let shape = ops::broadcast_shape(ta.shape(), tb.shape())
                .ok_or_else(|| mismatch(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())))?;
            let sa = ops::broadcast_strides(ta.shape(), &shape);
            let sb = ops::broadcast_strides(tb.shape(), &shape);
            let mut data = vec![0.0; numel(&shape)];
            let (da, db) = (ta.data(), tb.data());
            ops::for_each_broadcast(&shape, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
            Tensor::new(shape, data)?
        };
        let rg = self.any_grad(&[a, b]);
        self.push(name, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(name, out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, ops::sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Result<Var> {
        self.unary("clamp_min", x, |v| v.max(lo), Op::ClampMin(x, lo))
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{:?} × {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = Tensor::new(vec![m, n], ops::matmul(ta.data(), tb.data(), m, k, n))?;
        let rg = self.any_grad(&[a, b]);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    /// 2-D convolution. `x: [B,Cin,H,W]`, `w: [Cout,Cin,kh,kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(mismatch("conv2d", format!("input {:?}, weight {:?}, stride {stride}", sx, sw)));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [sw[0]] {
                return Err(mismatch("conv2d", format!("bias {:?} for {} outputs", self.value(b).shape(), sw[0])));
            }
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            padding,
        };
        if geom.h + 2 * padding < geom.kh || geom.w + 2 * padding < geom.kw {
            return Err(mismatch("conv2d", "kernel larger than padded input".into()));
        }
        let (ho, wo) = geom.out_hw();
        let data = ops::conv2d(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &geom);
        let out = Tensor::new(vec![geom.batch, geom.c_out, ho, wo], data)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom }, rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("softmax", axis, t.rank())?;
        let out = Tensor::new(t.shape().to_vec(), ops::softmax(t.data(), t.shape(), axis))?;
        let rg = self.any_grad(&[x]);
        self.push("softmax", out, Op::Softmax(x, axis), rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| DiffError::Invalid { op: "concat", detail: "no inputs".into() })?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            let same_rest = s.len() == base.len() && (0..s.len()).all(|i| i == axis || s[i] == base[i]);
            if !same_rest {
                return Err(mismatch("concat", format!("{:?} vs {:?} on axis {axis}", s, base)));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = ops::split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(xs);
        self.push("concat", out, Op::Concat(xs.to_vec(), axis), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        self.push("reshape", out, Op::Reshape(x), rg)
    }

    /// Keeps `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        check_axis("slice", axis, t.rank())?;
        if start > end || end > t.shape()[axis] {
            return Err(mismatch("slice", format!("{start}..{end} on axis {axis} of {:?}", t.shape())));
        }
        let (outer, n, inner) = ops::split_axis(t.shape(), axis);
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            data.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        self.push("slice", out, Op::Slice { x, axis, start, end }, rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.rank()];
        if perm.len() != t.rank() || perm.iter().any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(DiffError::Invalid { op: "permute", detail: format!("{perm:?} for rank {}", t.rank()) });
        }
        let (data, shape) = ops::permute(t.data(), t.shape(), perm);
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        self.push("permute", out, Op::Permute(x, perm.to_vec()), rg)
    }

    fn reduce(&mut self, name: &'static str, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let t = self.value(x);
        check_axis(name, axis, t.rank())?;
        let (outer, n, inner) = ops::split_axis(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &t.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        if mean {
            data.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        let op = if mean { Op::ReduceMean(x, axis) } else { Op::ReduceSum(x, axis) };
        self.push(name, out, op, rg)
    }

    /// Sums out `axis` (the axis is removed).
    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce("reduce_sum", x, axis, false)
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce("reduce_mean", x, axis, true)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push("sum_all", out, Op::SumAll(x), rg)
    }

    /// `y[..., j] = Π_{k<j} x[..., k]` along the last axis.
    pub fn exclusive_cumprod(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().ok_or(DiffError::AxisOutOfRange { op: "exclusive_cumprod", axis: 0, rank: 0 })?;
        let out = Tensor::new(t.shape().to_vec(), ops::exclusive_cumprod(t.data(), n.max(1)))?;
        let rg = self.any_grad(&[x]);
        self.push("exclusive_cumprod", out, Op::ExclusiveCumprod(x), rg)
    }

    /// Samples `input: [C,H,W]` at `coords: [N,2]` given as (x = column,
    /// y = row) in lattice units; returns `[C,N]`. Corners outside the
    /// lattice contribute zero.
    pub fn bilinear_sample_2d(&mut self, input: Var, coords: Var) -> Result<Var> {
        let (ti, tc) = (self.value(input), self.value(coords));
        let (si, sc) = (ti.shape(), tc.shape());
        if si.len() != 3 || sc.len() != 2 || sc[1] != 2 {
            return Err(mismatch("bilinear_sample_2d", format!("input {:?}, coords {:?}", si, sc)));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let out = Tensor::new(vec![c, sc[0]], ops::bilinear_sample(ti.data(), c, h, w, tc.data()))?;
        let rg = self.any_grad(&[input, coords]);
        self.push("bilinear_sample_2d", out, Op::Bilinear { input, coords }, rg)
    }

    /// Samples `input: [C,D,H,W]` at `coords: [N,3]` given as (x, y, z) in
    /// lattice units along (W, H, D); returns `[C,N]`. Corners outside the
    /// lattice contribute zero.
    pub fn trilinear_sample_3d(&mut self, input: Var, coords: Var) -> Result<Var> {
        let (ti, tc) = (self.value(input), self.value(coords));
        let (si, sc) = (ti.shape(), tc.shape());
        if si.len() != 4 || sc.len() != 2 || sc[1] != 3 {
            return Err(mismatch("trilinear_sample_3d", format!("input {:?}, coords {:?}", si, sc)));
        }
        let (c, d, h, w) = (si[0], si[1], si[2], si[3]);
        let out = Tensor::new(vec![c, sc[0]], ops::trilinear_sample(ti.data(), c, d, h, w, tc.data()))?;
        let rg = self.any_grad(&[input, coords]);
        self.push("trilinear_sample_3d", out, Op::Trilinear { input, coords }, rg)
    }

    /// `out[c, index[p]] += src[c, p]` for `src: [C,P]`; `None` entries are dropped.
    pub fn scatter_add(&mut self, src: Var, index: &[Option<usize>], bins: usize) -> Result<Var> {
        let t = self.value(src);
        let s = t.shape();
        if s.len() != 2 || s[1] != index.len() {
            return Err(mismatch("scatter_add", format!("src {:?} with {} indices", s, index.len())));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= bins) {
            return Err(DiffError::Invalid { op: "scatter_add", detail: format!("index {bad} >= {bins} bins") });
        }
        let (c, p) = (s[0], s[1]);
        let flat: Vec<usize> = index.iter().map(|i| i.unwrap_or(DROP)).collect();
        let mut data = vec![0.0; c * bins];
        for ch in 0..c {
            let row = &t.data()[ch * p..(ch + 1) * p];
            let out = &mut data[ch * bins..(ch + 1) * bins];
            for (v, &i) in row.iter().zip(&flat) {
                if i != DROP {
                    out[i] += v;
                }
            }
        }
        let out = Tensor::new(vec![c, bins], data)?;
        let rg = self.any_grad(&[src]);
        self.push("scatter_add", out, Op::ScatterAdd { src, index: flat }, rg)
    }

    /// Reverse replay from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(DiffError::UnknownNode(loss.0));
        }
        let n = self.value(loss).len();
        if n != 1 {
            return Err(DiffError::NotScalar { numel: n });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.value(v).shape();
        debug_assert_eq!(numel(shape), g.len());
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape")),
        }
    }

    /// Reduces an output-shaped gradient onto `v`'s (possibly broadcast) shape,
    /// weighting each element by `w(out_index, a_index, b_index)`.
    fn unbroadcast(
        &self,
        out: &Tensor,
        target: Var,
        other: Var,
        target_is_a: bool,
        w: impl Fn(usize, usize, usize) -> f64,
    ) -> Vec<f64> {
        let ts = self.value(target).shape();
        let os = self.value(other).shape();
        let st = ops::broadcast_strides(ts, out.shape());
        let so = ops::broadcast_strides(os, out.shape());
        let mut g = vec![0.0; numel(ts)];
        if target_is_a {
            ops::for_each_broadcast(out.shape(), &st, &so, |o, i, j| g[i] += w(o, i, j));
        } else {
            ops::for_each_broadcast(out.shape(), &so, &st, |o, i, j| g[j] += w(o, i, j));
        }
        g
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.requires_grad(*a) {
                    let ga = self.unbroadcast(&node.value, *a, *b, true, |o, _, _| gd[o]);
                    self.send(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.unbroadcast(&node.value, *b, *a, false, |o, _, _| sign * gd[o]);
                    self.send(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                if self.requires_grad(*a) {
                    let ga = self.unbroadcast(&node.value, *a, *b, true, |o, _, j| gd[o] * db[j]);
                    self.send(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.unbroadcast(&node.value, *b, *a, false, |o, i, _| gd[o] * da[i]);
                    self.send(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let (da, db) = (val(*a), val(*b));
                if self.requires_grad(*a) {
                    let ga = self.unbroadcast(&node.value, *a, *b, true, |o, _, j| gd[o] / db[j]);
                    self.send(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.unbroadcast(&node.value, *b, *a, false, |o, i, j| -gd[o] * da[i] / (db[j] * db[j]));
                    self.send(grads, *b, gb);
                }
            }
            Op::Scale(x, c) => self.send(grads, *x, gd.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => self.send(grads, *x, gd.to_vec()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (ga, gb) = ops::matmul_backward(val(*a), val(*b), gd, sa[0], sa[1], sb[1]);
                self.send(grads, *a, ga);
                self.send(grads, *b, gb);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = ops::conv2d_backward(val(*x), val(*w), gd, geom);
                self.send(grads, *x, gx);
                self.send(grads, *w, gw);
                if let Some(b) = b {
                    self.send(grads, *b, gb);
                }
            }
            Op::Relu(x) => {
                let gx = val(*x).iter().zip(gd).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                self.send(grads, *x, gx);
            }
            Op::ClampMin(x, lo) => {
                let gx = val(*x).iter().zip(gd).map(|(&v, &g)| if v > *lo { g } else { 0.0 }).collect();
                self.send(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = val(*x)
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > 0.0 { g } else if v < 0.0 { -g } else { 0.0 })
                    .collect();
                self.send(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = node.value.data().iter().zip(gd).map(|(&y, &g)| g * y * (1.0 - y)).collect();
                self.send(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = node.value.data().iter().zip(gd).map(|(&y, &g)| g * y).collect();
                self.send(grads, *x, gx);
            }
            Op::Softmax(x, axis) => {
                let gx = ops::softmax_backward(node.value.data(), gd, node.value.shape(), *axis);
                self.send(grads, *x, gx);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = ops::split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.value(v).shape()[*axis];
                    if self.requires_grad(v) {
                        let mut gv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gv.extend_from_slice(&gd[start..start + n * inner]);
                        }
                        self.send(grads, v, gv);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start, end } => {
                let (outer, n, inner) = ops::split_axis(self.value(*x).shape(), *axis);
                let width = end - start;
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + width * inner].copy_from_slice(&gd[o * width * inner..(o + 1) * width * inner]);
                }
                self.send(grads, *x, gx);
            }
            Op::Permute(x, perm) => {
                let inv = ops::inverse_permutation(perm);
                let (gx, _) = ops::permute(gd, node.value.shape(), &inv);
                self.send(grads, *x, gx);
            }
            Op::ReduceSum(x, axis) | Op::ReduceMean(x, axis) => {
                let (outer, n, inner) = ops::split_axis(self.value(*x).shape(), *axis);
                let scale = if matches!(node.op, Op::ReduceMean(..)) { 1.0 / n as f64 } else { 1.0 };
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            gx[(o * n + k) * inner + i] = gd[o * inner + i] * scale;
                        }
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::SumAll(x) => self.send(grads, *x, vec![gd[0]; self.value(*x).len()]),
            Op::ExclusiveCumprod(x) => {
                let n = *node.value.shape().last().unwrap_or(&1);
                self.send(grads, *x, ops::exclusive_cumprod_backward(val(*x), gd, n.max(1)));
            }
            Op::Bilinear { input, coords } => {
                let s = self.value(*input).shape();
                let (gi, gc) = ops::bilinear_sample_backward(val(*input), s[0], s[1], s[2], val(*coords), gd);
                self.send(grads, *input, gi);
                self.send(grads, *coords, gc);
            }
            Op::Trilinear { input, coords } => {
                let s = self.value(*input).shape();
                let (gi, gc) = ops::trilinear_sample_backward(val(*input), s[0], s[1], s[2], s[3], val(*coords), gd);
                self.send(grads, *input, gi);
                self.send(grads, *coords, gc);
            }
            Op::ScatterAdd { src, index } => {
                let s = self.value(*src).shape();
                let (c, p) = (s[0], s[1]);
                let bins = node.value.shape()[1];
                let mut gs = vec![0.0; c * p];
                for ch in 0..c {
                    for (k, &i) in index.iter().enumerate() {
                        if i != DROP {
                            gs[ch * p + k] = gd[ch * bins + i];
                        }
                    }
                }
                self.send(grads, *src, gs);
            }
        }
    }
}

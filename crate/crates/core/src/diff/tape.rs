//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its forward value. Nodes are
//! stored in creation order, which is already a topological order, so
//! [`Tape::backward`] is a single reverse sweep. Gradients only flow into
//! nodes that transitively depend on a tracked leaf.

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{check_finite, numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    MeanPool { x: Var, window: usize },
    InstanceNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    LogSoftmax(Var),
    Gather { x: Var, index: Vec<usize> },
    SumRows(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Epsilon added to the variance in instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a_t` means `a` is stored as `k x m`; `b_t` means `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides stay in bounds
    // for the stated dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Copies the node value out as an untracked tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("tape values are validated")
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        tracked: bool,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        check_finite(name, &value)?;
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a tensor as a leaf. Gradients are kept when `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            tracked: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an untracked leaf without cloning through a [`Tensor`].
    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(Error::shape("constant", shape, &[value.len()]));
        }
        self.push("constant", shape.to_vec(), value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn either(&self, a: Var, b: Var) -> bool {
        self.is_tracked(a) || self.is_tracked(b)
    }

    fn as_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Invalid(alloc::format!("{op}: expected rank-2 input, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.as_matrix("matmul", a)?;
        let (k2, n) = self.as_matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", &[k, n], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let tracked = self.either(a, b);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), tracked)
    }

    /// `x · wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, fin) = self.as_matrix("linear", x)?;
        let (fout, win) = self.as_matrix("linear", w)?;
        if fin != win {
            return Err(Error::shape("linear", &[fout, fin], &[fout, win]));
        }
        if self.shape(b) != [fout] {
            return Err(Error::shape("linear bias", &[fout], self.shape(b)));
        }
        let mut out = vec![0.0; n * fout];
        for row in out.chunks_exact_mut(fout) {
            row.copy_from_slice(self.value(b));
        }
        gemm(n, fin, fout, self.value(x), false, self.value(w), true, &mut out, 1.0);
        let tracked = self.is_tracked(x) || self.is_tracked(w) || self.is_tracked(b);
        self.push("linear", vec![n, fout], out, Op::Linear { x, w, b }, tracked)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracked = self.either(a, b);
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, tracked)
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

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if y < x { y } else { x }, Op::Minimum(a, b))
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let tracked = self.is_tracked(x);
        let shape = self.shape(x).to_vec();
        self.push(name, shape, out, op, tracked)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, libm::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, libm::exp, Op::Exp(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v <= 0.0) {
            // zero is excluded too: the derivative is unbounded there
            return Err(Error::NonFinite { op: "sqrt" });
        }
        self.unary("sqrt", x, libm::sqrt, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::shape("reshape", shape, self.shape(x)));
        }
        let value = self.value(x).to_vec();
        let tracked = self.is_tracked(x);
        self.push("reshape", shape.to_vec(), value, Op::Reshape(x), tracked)
    }

    /// Convolution without padding. `x: [n,c,h,w]`, `w: [o,c,k,k]`, `b: [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || stride == 0 {
            return Err(Error::Invalid(alloc::format!(
                "conv2d: bad operand shapes {xs:?} / {ws:?} (stride {stride})"
            )));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if ws[1] != c {
            return Err(Error::shape("conv2d channels", &[c], &[ws[1]]));
        }
        if k > h || k > wd {
            return Err(Error::Invalid(alloc::format!(
                "conv2d: kernel {k} exceeds input extent {h}x{wd}"
            )));
        }
        if self.shape(b) != [o] {
            return Err(Error::shape("conv2d bias", &[o], self.shape(b)));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            oh: (h - k) / stride + 1,
            ow: (wd - k) / stride + 1,
        };
        let cols = im2col(self.value(x), &geom);
        let p = geom.oh * geom.ow;
        let ncols = n * p;
        let mut out_mat = vec![0.0; o * ncols];
        gemm(o, c * k * k, ncols, self.value(w), false, &cols, false, &mut out_mat, 0.0);
        let bias = self.value(b);
        let mut out = vec![0.0; n * o * p];
        for ni in 0..n {
            for oi in 0..o {
                let dst = &mut out[(ni * o + oi) * p..(ni * o + oi + 1) * p];
                let src = &out_mat[oi * ncols + ni * p..oi * ncols + (ni + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[oi];
                }
            }
        }
        let tracked = self.is_tracked(x) || self.is_tracked(w) || self.is_tracked(b);
        // the unfolded input is only needed for weight gradients
        let cols = if self.is_tracked(w) { cols } else { Vec::new() };
        self.push(
            "conv2d",
            vec![n, o, geom.oh, geom.ow],
            out,
            Op::Conv2d { x, w, b, geom, cols },
            tracked,
        )
    }

    /// Non-overlapping average pooling over `window x window` blocks.
    pub fn mean_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || window == 0 || s[2] % window != 0 || s[3] % window != 0 {
            return Err(Error::Invalid(alloc::format!(
                "mean_pool: window {window} does not tile input {s:?}"
            )));
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / window, w / window);
        let inv = 1.0 / (window * window) as f64;
        let xv = self.value(x);
        let mut out = vec![0.0; nc * oh * ow];
        for g in 0..nc {
            for y in 0..h {
                for xx in 0..w {
                    out[g * oh * ow + (y / window) * ow + xx / window] += xv[(g * h + y) * w + xx] * inv;
                }
            }
        }
        let tracked = self.is_tracked(x);
        self.push("mean_pool", vec![s[0], s[1], oh, ow], out, Op::MeanPool { x, window }, tracked)
    }

    /// Per-sample, per-channel normalization over the spatial extent.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] * s[3] < 2 {
            return Err(Error::Invalid(alloc::format!(
                "instance_norm: expected [n,c,h,w] with h*w >= 2, got {s:?}"
            )));
        }
        let m = s[2] * s[3];
        let groups = s[0] * s[1];
        let xv = self.value(x);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; groups];
        for g in 0..groups {
            let chunk = &xv[g * m..(g + 1) * m];
            let mean = chunk.iter().sum::<f64>() / m as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / libm::sqrt(var + INSTANCE_NORM_EPS);
            inv_std[g] = inv;
            for (dst, v) in xhat[g * m..(g + 1) * m].iter_mut().zip(chunk) {
                *dst = (v - mean) * inv;
            }
        }
        let tracked = self.is_tracked(x);
        let out = xhat.clone();
        self.push("instance_norm", s, out, Op::InstanceNorm { x, xhat, inv_std }, tracked)
    }

    /// Row-wise log-softmax of a `[n, m]` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, m) = self.as_matrix("log_softmax", x)?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let tracked = self.is_tracked(x);
        let shape = self.shape(x).to_vec();
        self.push("log_softmax", shape, out, Op::LogSoftmax(x), tracked)
    }

    /// Picks `x[i, index[i]]` from a `[n, m]` matrix.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (n, m) = self.as_matrix("gather", x)?;
        if index.len() != n || index.iter().any(|&i| i >= m) {
            return Err(Error::Invalid(alloc::format!(
                "gather: index list incompatible with [{n}, {m}]"
            )));
        }
        let xv = self.value(x);
        let out: Vec<f64> = index.iter().enumerate().map(|(r, &i)| xv[r * m + i]).collect();
        let tracked = self.is_tracked(x);
        self.push("gather", vec![n], out, Op::Gather { x, index: index.to_vec() }, tracked)
    }

    /// Sums over the trailing axis.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let m = *s.last().expect("shape is non-empty");
        let lead: Vec<usize> = if s.len() == 1 { vec![1] } else { s[..s.len() - 1].to_vec() };
        let out: Vec<f64> = self.value(x).chunks_exact(m).map(|r| r.iter().sum()).collect();
        let tracked = self.is_tracked(x);
        self.push("sum_rows", lead, out, Op::SumRows(x), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).iter().sum();
        let tracked = self.is_tracked(x);
        self.push("sum", vec![1], vec![total], Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let total = v.iter().sum::<f64>() / v.len() as f64;
        let tracked = self.is_tracked(x);
        self.push("mean", vec![1], vec![total], Op::Mean(x), tracked)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::NotScalar(loss_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !loss_node.tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            check_finite("backward", &g)?;
            self.backprop(node, &g, &mut grads);
        }
        // only leaves keep their gradients
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.tracked {
                *slot = None;
            } else if let Some(g) = slot {
                check_finite("backward", g)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if tracked(*a) {
                    add_into(grads, *a, m * k, |da| {
                        gemm(m, n, k, g, false, self.value(*b), true, da, 1.0)
                    });
                }
                if tracked(*b) {
                    add_into(grads, *b, k * n, |db| {
                        gemm(k, m, n, self.value(*a), true, g, false, db, 1.0)
                    });
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*w)[0];
                if tracked(*x) {
                    add_into(grads, *x, n * fin, |dx| {
                        gemm(n, fout, fin, g, false, self.value(*w), false, dx, 1.0)
                    });
                }
                if tracked(*w) {
                    add_into(grads, *w, fout * fin, |dw| {
                        gemm(fout, n, fin, g, true, self.value(*x), false, dw, 1.0)
                    });
                }
                if tracked(*b) {
                    add_into(grads, *b, fout, |db| {
                        for row in g.chunks_exact(fout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if tracked(*a) {
                    add_into(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v));
                }
                if tracked(*b) {
                    add_into(grads, *b, g.len(), |d| {
                        d.iter_mut().zip(g).for_each(|(d, v)| *d += sign * v)
                    });
                }
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    let bv = self.value(*b);
                    add_into(grads, *a, g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * bv[i];
                        }
                    });
                }
                if tracked(*b) {
                    let av = self.value(*a);
                    add_into(grads, *b, g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * av[i];
                        }
                    });
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if tracked(*a) {
                    add_into(grads, *a, g.len(), |d| {
                        for i in 0..d.len() {
                            if bv[i] >= av[i] {
                                d[i] += g[i];
                            }
                        }
                    });
                }
                if tracked(*b) {
                    add_into(grads, *b, g.len(), |d| {
                        for i in 0..d.len() {
                            if bv[i] < av[i] {
                                d[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::Scale(x, c) => {
                add_into(grads, *x, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += c * v));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                add_into(grads, *x, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                add_into(grads, *x, g.len(), |d| {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value;
                add_into(grads, *x, g.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.value;
                add_into(grads, *x, g.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                });
            }
            Op::Sqrt(x) => {
                let y = &node.value;
                add_into(grads, *x, g.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * 0.5 / y[i];
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                add_into(grads, *x, g.len(), |d| {
                    for i in 0..d.len() {
                        d[i] += 2.0 * g[i] * xv[i];
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                add_into(grads, *x, g.len(), |d| {
                    for i in 0..d.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let p = geom.oh * geom.ow;
                let ncols = geom.n * p;
                let ckk = geom.c * geom.k * geom.k;
                let mut g_mat = vec![0.0; geom.o * ncols];
                for ni in 0..geom.n {
                    for oi in 0..geom.o {
                        g_mat[oi * ncols + ni * p..oi * ncols + (ni + 1) * p]
                            .copy_from_slice(&g[(ni * geom.o + oi) * p..(ni * geom.o + oi + 1) * p]);
                    }
                }
                if tracked(*w) {
                    add_into(grads, *w, geom.o * ckk, |dw| {
                        gemm(geom.o, ncols, ckk, &g_mat, false, cols, true, dw, 1.0)
                    });
                }
                if tracked(*b) {
                    add_into(grads, *b, geom.o, |db| {
                        for (oi, d) in db.iter_mut().enumerate() {
                            *d += g_mat[oi * ncols..(oi + 1) * ncols].iter().sum::<f64>();
                        }
                    });
                }
                if tracked(*x) {
                    let mut dcols = vec![0.0; ckk * ncols];
                    gemm(ckk, geom.o, ncols, self.value(*w), true, &g_mat, false, &mut dcols, 0.0);
                    add_into(grads, *x, len(*x), |dx| col2im_add(&dcols, geom, dx));
                }
            }
            Op::MeanPool { x, window } => {
                let s = self.shape(*x);
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (oh, ow) = (h / window, w / window);
                let inv = 1.0 / (window * window) as f64;
                add_into(grads, *x, g.len() * window * window, |d| {
                    for gi in 0..nc {
                        for y in 0..h {
                            for xx in 0..w {
                                d[(gi * h + y) * w + xx] +=
                                    g[gi * oh * ow + (y / window) * ow + xx / window] * inv;
                            }
                        }
                    }
                });
            }
            Op::InstanceNorm { x, xhat, inv_std } => {
                let s = self.shape(*x);
                let m = s[2] * s[3];
                add_into(grads, *x, g.len(), |d| {
                    for (gi, inv) in inv_std.iter().enumerate() {
                        let gs = &g[gi * m..(gi + 1) * m];
                        let xs = &xhat[gi * m..(gi + 1) * m];
                        let sum_g: f64 = gs.iter().sum();
                        let sum_gx: f64 = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            d[gi * m + j] +=
                                inv / m as f64 * (m as f64 * gs[j] - sum_g - xs[j] * sum_gx);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let m = self.shape(*x)[1];
                let y = &node.value;
                add_into(grads, *x, g.len(), |d| {
                    for r in 0..g.len() / m {
                        let gs = &g[r * m..(r + 1) * m];
                        let total: f64 = gs.iter().sum();
                        for j in 0..m {
                            d[r * m + j] += gs[j] - libm::exp(y[r * m + j]) * total;
                        }
                    }
                });
            }
            Op::Gather { x, index } => {
                let m = self.shape(*x)[1];
                add_into(grads, *x, len(*x), |d| {
                    for (r, &i) in index.iter().enumerate() {
                        d[r * m + i] += g[r];
                    }
                });
            }
            Op::SumRows(x) => {
                let n = len(*x);
                let m = n / g.len();
                add_into(grads, *x, n, |d| {
                    for (r, row) in d.chunks_exact_mut(m).enumerate() {
                        row.iter_mut().for_each(|v| *v += g[r]);
                    }
                });
            }
            Op::Sum(x) => {
                add_into(grads, *x, len(*x), |d| d.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Mean(x) => {
                let n = len(*x);
                let gv = g[0] / n as f64;
                add_into(grads, *x, n, |d| d.iter_mut().for_each(|v| *v += gv));
            }
        }
    }
}

fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let ConvGeom { n, c, h, w, k, stride, oh, ow, .. } = *geom;
    let p = oh * ow;
    let ncols = n * p;
    let mut cols = vec![0.0; c * k * k * ncols];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    for oy in 0..oh {
                        let src = ((ni * c + ci) * h + oy * stride + ky) * w + kx;
                        let base = ni * p + oy * ow;
                        for ox in 0..ow {
                            dst[base + ox] = x[src + ox * stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], geom: &ConvGeom, dx: &mut [f64]) {
    let ConvGeom { n, c, h, w, k, stride, oh, ow, .. } = *geom;
    let p = oh * ow;
    let ncols = n * p;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    for oy in 0..oh {
                        let dst = ((ni * c + ci) * h + oy * stride + ky) * w + kx;
                        let base = ni * p + oy * ow;
                        for ox in 0..ow {
                            dx[dst + ox * stride] += src[base + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_sum_gradient_is_input() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let w = tape.leaf(&t(&[3], &[0.3, 0.1, -0.7]).tracked());
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.sum(wx).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, -2.0, 0.5]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn squared_error_at_target_has_zero_gradient() {
        let mut tape = Tape::new();
        let target = [0.2, -1.5, 3.0];
        let w = tape.leaf(&t(&[3], &target).tracked());
        let tv = tape.constant(&[3], target.to_vec()).unwrap();
        let diff = tape.sub(w, tv).unwrap();
        let sq = tape.square(diff).unwrap();
        let loss = tape.mean(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).tracked());
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn non_finite_result_names_the_op() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1], vec![800.0]).unwrap();
        assert_eq!(tape.exp(x).unwrap_err(), Error::NonFinite { op: "exp" });
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let (n, c, h, w, o, k, s) = (2, 3, 7, 6, 4, 3, 2);
        let xs: Vec<f64> = (0..n * c * h * w).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let ws: Vec<f64> = (0..o * c * k * k).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        let bs = [0.1, -0.2, 0.3, 0.0];
        let mut tape = Tape::new();
        let x = tape.constant(&[n, c, h, w], xs.clone()).unwrap();
        let wv = tape.constant(&[o, c, k, k], ws.clone()).unwrap();
        let bv = tape.constant(&[o], bs.to_vec()).unwrap();
        let y = tape.conv2d(x, wv, bv, s).unwrap();
        let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
        assert_eq!(tape.shape(y), &[n, o, oh, ow]);
        let out = tape.value(y);
        for ni in 0..n {
            for oi in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bs[oi];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    acc += xs[((ni * c + ci) * h + oy * s + ky) * w + ox * s + kx]
                                        * ws[((oi * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        let got = out[((ni * o + oi) * oh + oy) * ow + ox];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1, 1, 2, 2], vec![0.0; 4]).unwrap();
        let w = tape.constant(&[1, 1, 3, 3], vec![0.0; 9]).unwrap();
        let b = tape.constant(&[1], vec![0.0]).unwrap();
        assert!(tape.conv2d(x, w, b, 1).is_err());
    }
}

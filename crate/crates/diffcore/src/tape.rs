//! Reverse-mode tape.
//!
//! Every op evaluates eagerly and appends a node; node ids are therefore in
//! topological order by construction. `backward` walks the nodes in reverse
//! and accumulates vector-Jacobian products into per-node gradient buffers.
//! A tape can be differentiated once; build a fresh tape per step.

use rand::Rng;

use crate::error::{DiffError, Result};
use crate::linalg;
use crate::tensor::{dot, gemm, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    Dot(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    Row(Var, usize),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    WeightedRowSum(Var, Var),
    MeanRows(Var),
    Mask(Var, Vec<f64>),
    Softmax(Var),
    L2Norm(Var),
    RowNorms(Var),
    Sum(Var),
    CrossEntropy(Var, Vec<f64>),
    Inverse { input: Var, reg_coeff: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    differentiated: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
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

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not influence it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of the loss w.r.t. `v`, zero-filled when unreachable.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    /// `a[m×k] · x[k] -> [m]`
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (ta, tx) = (self.value(a), self.value(x));
        if ta.rank() != 2 || tx.rank() != 1 || ta.cols() != tx.numel() {
            return Err(mismatch("matvec", ta, tx));
        }
        let out: Vec<f64> = (0..ta.rows()).map(|i| dot(ta.row(i), tx.data())).collect();
        let rg = self.needs(&[a, x]);
        self.push("matvec", Tensor::vector(out), Op::MatVec(a, x), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || ta.shape() != tb.shape() {
            return Err(mismatch("dot", ta, tb));
        }
        let out = dot(ta.data(), tb.data());
        let rg = self.needs(&[a, b]);
        self.push("dot", Tensor::scalar(out), Op::Dot(a, b), rg)
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        self.push(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        self.push("affine", value, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.affine(a, factor, 0.0)
    }

    /// Sums a list of same-shaped tensors.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or(DiffError::Empty { op: "add_n" })?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DiffError::Empty { op: "concat" });
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(mismatch("concat", t, t));
            }
            data.extend_from_slice(t.data());
        }
        let rg = self.needs(parts);
        self.push("concat", Tensor::vector(data), Op::Concat(parts.to_vec()), rg)
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or(DiffError::Empty { op: "stack" })?;
        let width = self.value(first).numel();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let t = self.value(r);
            if t.rank() != 1 || t.numel() != width {
                return Err(mismatch("stack", self.value(first), t));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows.len(), width], data)?;
        let rg = self.needs(rows);
        self.push("stack", value, Op::Stack(rows.to_vec()), rg)
    }

    /// `a[start..start + len]` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || start + len > t.numel() {
            return Err(DiffError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                len: t.numel(),
            });
        }
        let value = Tensor::vector(t.data()[start..start + len].to_vec());
        let rg = self.needs(&[a]);
        self.push("slice", value, Op::Slice(a, start), rg)
    }

    /// Selects rows of a matrix (embedding lookup) into a new matrix.
    pub fn gather(&mut self, m: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(m);
        if t.rank() != 2 {
            return Err(mismatch("gather", t, t));
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= t.rows() {
                return Err(DiffError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    len: t.rows(),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![indices.len(), cols], data)?;
        let rg = self.needs(&[m]);
        self.push("gather", value, Op::Gather(m, indices.to_vec()), rg)
    }

    /// Single row of a matrix as a vector.
    pub fn row(&mut self, m: Var, index: usize) -> Result<Var> {
        let t = self.value(m);
        if t.rank() != 2 || index >= t.rows() {
            return Err(DiffError::IndexOutOfRange {
                op: "row",
                index,
                len: t.rows(),
            });
        }
        let value = Tensor::vector(t.row(index).to_vec());
        let rg = self.needs(&[m]);
        self.push("row", value, Op::Row(m, index), rg)
    }

    pub fn transpose(&mut self, m: Var) -> Result<Var> {
        let t = self.value(m);
        if t.rank() != 2 {
            return Err(mismatch("transpose", t, t));
        }
        let value = t.transpose();
        let rg = self.needs(&[m]);
        self.push("transpose", value, Op::Transpose(m), rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        self.push(name, value, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |v| v.max(0.0), Op::Relu(a))
    }

    /// `Σᵢ wᵢ · m[i, :]`
    pub fn weighted_row_sum(&mut self, weights: Var, m: Var) -> Result<Var> {
        let (tw, tm) = (self.value(weights), self.value(m));
        if tw.rank() != 1 || tm.rank() != 2 || tw.numel() != tm.rows() {
            return Err(mismatch("weighted_row_sum", tw, tm));
        }
        let mut out = vec![0.0; tm.cols()];
        for (i, w) in tw.data().iter().enumerate() {
            for (o, v) in out.iter_mut().zip(tm.row(i)) {
                *o += w * v;
            }
        }
        let rg = self.needs(&[weights, m]);
        self.push(
            "weighted_row_sum",
            Tensor::vector(out),
            Op::WeightedRowSum(weights, m),
            rg,
        )
    }

    pub fn mean_rows(&mut self, m: Var) -> Result<Var> {
        let t = self.value(m);
        if t.rank() != 2 || t.rows() == 0 {
            return Err(DiffError::Empty { op: "mean_rows" });
        }
        let n = t.rows() as f64;
        let mut out = vec![0.0; t.cols()];
        for i in 0..t.rows() {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        let rg = self.needs(&[m]);
        self.push("mean_rows", Tensor::vector(out), Op::MeanRows(m), rg)
    }

    /// Elementwise multiplication by a constant mask.
    pub fn apply_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.numel() {
            return Err(DiffError::ShapeMismatch {
                op: "apply_mask",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        self.push("apply_mask", value, Op::Mask(a, mask), rg)
    }

    /// Inverted dropout: at train time zeroes each element with probability
    /// `p` and scales survivors by `1/(1-p)`; identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !train || p <= 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        self.apply_mask(a, mask)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the entries with `keep[i] == true`; the rest get exactly 0.
    pub fn softmax_masked(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 1 || t.numel() == 0 {
            return Err(DiffError::Empty { op: "softmax" });
        }
        if let Some(k) = keep {
            if k.len() != t.numel() {
                return Err(DiffError::ShapeMismatch {
                    op: "softmax",
                    lhs: t.shape().to_vec(),
                    rhs: vec![k.len()],
                });
            }
            if !k.iter().any(|&b| b) {
                return Err(DiffError::Empty { op: "softmax" });
            }
        }
        let value = Tensor::vector(softmax_values(t.data(), keep));
        let rg = self.needs(&[x]);
        self.push("softmax", value, Op::Softmax(x), rg)
    }

    /// Euclidean norm; the subgradient at the origin is 0.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(DiffError::Empty { op: "l2_norm" });
        }
        let value = Tensor::scalar(t.norm());
        let rg = self.needs(&[x]);
        self.push("l2_norm", value, Op::L2Norm(x), rg)
    }

    /// Euclidean norm of every row of a matrix, as a vector.
    pub fn row_norms(&mut self, m: Var) -> Result<Var> {
        let t = self.value(m);
        if t.rank() != 2 {
            return Err(mismatch("row_norms", t, t));
        }
        let norms = (0..t.rows())
            .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.needs(&[m]);
        self.push("row_norms", Tensor::vector(norms), Op::RowNorms(m), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.needs(&[x]);
        self.push("sum", value, Op::Sum(x), rg)
    }

    /// `-Σᵢ targetᵢ · log softmax(logits)ᵢ`
    pub fn cross_entropy(&mut self, logits: Var, target: Vec<f64>) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 1 || t.numel() == 0 {
            return Err(DiffError::Empty { op: "cross_entropy" });
        }
        if target.len() != t.numel() {
            return Err(DiffError::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let lse = log_sum_exp(t.data());
        let loss: f64 = t
            .data()
            .iter()
            .zip(&target)
            .map(|(x, y)| if *y == 0.0 { 0.0 } else { -y * (x - lse) })
            .sum();
        let rg = self.needs(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, target),
            rg,
        )
    }

    /// Matrix inverse. With `regularized`, inverts `w + εI` where
    /// `ε = 1e-6 · trace(w) / d` (the shift is differentiated too).
    pub fn inverse(&mut self, w: Var, regularized: bool) -> Result<Var> {
        let t = self.value(w);
        let (value, reg_coeff) = if regularized {
            (linalg::regularized_inverse(t)?, linalg::REGULARIZATION_COEFF)
        } else {
            (linalg::inverse(t)?, 0.0)
        };
        let rg = self.needs(&[w]);
        self.push("inverse", value, Op::Inverse { input: w, reg_coeff }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Errors on a second call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(DiffError::BackwardTwice);
        }
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(DiffError::NotScalar(shape));
        }
        self.differentiated = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(&shape, 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.node(*a).value, &self.node(*b).value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(a) {
                    accumulate(&mut grads[a.0], ta.shape(), |da| gemm_nt(gd, tb.data(), da, m, n, k));
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], tb.shape(), |db| gemm_tn(ta.data(), gd, db, m, k, n));
                }
            }
            Op::MatVec(a, x) => {
                let (ta, tx) = (&self.node(*a).value, &self.node(*x).value);
                let k = ta.cols();
                if wants(a) {
                    accumulate(&mut grads[a.0], ta.shape(), |da| {
                        for (i, gi) in gd.iter().enumerate() {
                            for (d, xv) in da[i * k..(i + 1) * k].iter_mut().zip(tx.data()) {
                                *d += gi * xv;
                            }
                        }
                    });
                }
                if wants(x) {
                    accumulate(&mut grads[x.0], tx.shape(), |dx| {
                        for (i, gi) in gd.iter().enumerate() {
                            for (d, av) in dx.iter_mut().zip(ta.row(i)) {
                                *d += gi * av;
                            }
                        }
                    });
                }
            }
            Op::Dot(a, b) => {
                let g0 = gd[0];
                let (ta, tb) = (&self.node(*a).value, &self.node(*b).value);
                if wants(a) {
                    accumulate(&mut grads[a.0], ta.shape(), |da| {
                        da.iter_mut().zip(tb.data()).for_each(|(d, v)| *d += g0 * v)
                    });
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], tb.shape(), |db| {
                        db.iter_mut().zip(ta.data()).for_each(|(d, v)| *d += g0 * v)
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        accumulate(&mut grads[v.0], out.shape(), |d| {
                            d.iter_mut().zip(gd).for_each(|(d, g)| *d += g)
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], out.shape(), |d| {
                        d.iter_mut().zip(gd).for_each(|(d, g)| *d += g)
                    });
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], out.shape(), |d| {
                        d.iter_mut().zip(gd).for_each(|(d, g)| *d -= g)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.node(*a).value, &self.node(*b).value);
                if wants(a) {
                    accumulate(&mut grads[a.0], ta.shape(), |d| {
                        for ((d, g), v) in d.iter_mut().zip(gd).zip(tb.data()) {
                            *d += g * v;
                        }
                    });
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], tb.shape(), |d| {
                        for ((d, g), v) in d.iter_mut().zip(gd).zip(ta.data()) {
                            *d += g * v;
                        }
                    });
                }
            }
            Op::Affine(a, scale) => {
                accumulate(&mut grads[a.0], out.shape(), |d| {
                    d.iter_mut().zip(gd).for_each(|(d, g)| *d += scale * g)
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.node(*p).value.numel();
                    if wants(p) {
                        accumulate(&mut grads[p.0], &[n], |d| {
                            d.iter_mut().zip(&gd[offset..offset + n]).for_each(|(d, g)| *d += g)
                        });
                    }
                    offset += n;
                }
            }
            Op::Stack(rows) => {
                let width = out.cols();
                for (i, r) in rows.iter().enumerate() {
                    if wants(r) {
                        accumulate(&mut grads[r.0], &[width], |d| {
                            d.iter_mut().zip(g.row(i)).for_each(|(d, g)| *d += g)
                        });
                    }
                }
            }
            Op::Slice(a, start) => {
                let shape = self.node(*a).value.shape().to_vec();
                accumulate(&mut grads[a.0], &shape, |d| {
                    d[*start..*start + gd.len()]
                        .iter_mut()
                        .zip(gd)
                        .for_each(|(d, g)| *d += g)
                });
            }
            Op::Gather(m, indices) => {
                let tm = &self.node(*m).value;
                let cols = tm.cols();
                accumulate(&mut grads[m.0], tm.shape(), |d| {
                    for (row, &i) in indices.iter().enumerate() {
                        d[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(g.row(row))
                            .for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Row(m, i) => {
                let tm = &self.node(*m).value;
                let cols = tm.cols();
                accumulate(&mut grads[m.0], tm.shape(), |d| {
                    d[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(gd)
                        .for_each(|(d, g)| *d += g)
                });
            }
            Op::Transpose(m) => {
                let gt = g.transpose();
                accumulate(&mut grads[m.0], gt.shape(), |d| d.iter_mut().zip(gt.data()).for_each(|(d, g)| *d += g));
            }
            Op::Sigmoid(a) => {
                accumulate(&mut grads[a.0], out.shape(), |d| {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(out.data()) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                accumulate(&mut grads[a.0], out.shape(), |d| {
                    for ((d, g), y) in d.iter_mut().zip(gd).zip(out.data()) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
            Op::Relu(a) => {
                let ta = &self.node(*a).value;
                accumulate(&mut grads[a.0], out.shape(), |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(ta.data()) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::WeightedRowSum(w, m) => {
                let (tw, tm) = (&self.node(*w).value, &self.node(*m).value);
                if wants(w) {
                    accumulate(&mut grads[w.0], tw.shape(), |d| {
                        for (i, d) in d.iter_mut().enumerate() {
                            *d += dot(gd, tm.row(i));
                        }
                    });
                }
                if wants(m) {
                    let cols = tm.cols();
                    accumulate(&mut grads[m.0], tm.shape(), |d| {
                        for (i, wi) in tw.data().iter().enumerate() {
                            d[i * cols..(i + 1) * cols]
                                .iter_mut()
                                .zip(gd)
                                .for_each(|(d, g)| *d += wi * g);
                        }
                    });
                }
            }
            Op::MeanRows(m) => {
                let tm = &self.node(*m).value;
                let (rows, cols) = (tm.rows(), tm.cols());
                let inv = 1.0 / rows as f64;
                accumulate(&mut grads[m.0], tm.shape(), |d| {
                    for i in 0..rows {
                        d[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(gd)
                            .for_each(|(d, g)| *d += inv * g);
                    }
                });
            }
            Op::Mask(a, mask) => {
                accumulate(&mut grads[a.0], out.shape(), |d| {
                    for ((d, g), m) in d.iter_mut().zip(gd).zip(mask) {
                        *d += g * m;
                    }
                });
            }
            Op::Softmax(x) => {
                let y = out.data();
                let inner = dot(y, gd);
                accumulate(&mut grads[x.0], out.shape(), |d| {
                    for ((d, g), yi) in d.iter_mut().zip(gd).zip(y) {
                        *d += yi * (g - inner);
                    }
                });
            }
            Op::L2Norm(x) => {
                let tx = &self.node(*x).value;
                let norm = out.item();
                if norm > 0.0 {
                    let factor = gd[0] / norm;
                    accumulate(&mut grads[x.0], tx.shape(), |d| {
                        d.iter_mut().zip(tx.data()).for_each(|(d, v)| *d += factor * v)
                    });
                }
            }
            Op::RowNorms(m) => {
                let tm = &self.node(*m).value;
                let cols = tm.cols();
                accumulate(&mut grads[m.0], tm.shape(), |d| {
                    for (i, (&norm, g)) in out.data().iter().zip(gd).enumerate() {
                        if norm > 0.0 {
                            let factor = g / norm;
                            d[i * cols..(i + 1) * cols]
                                .iter_mut()
                                .zip(tm.row(i))
                                .for_each(|(d, v)| *d += factor * v);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let shape = self.node(*x).value.shape().to_vec();
                let g0 = gd[0];
                accumulate(&mut grads[x.0], &shape, |d| d.iter_mut().for_each(|d| *d += g0));
            }
            Op::CrossEntropy(logits, target) => {
                let tl = &self.node(*logits).value;
                let p = softmax_values(tl.data(), None);
                let mass: f64 = target.iter().sum();
                let g0 = gd[0];
                accumulate(&mut grads[logits.0], tl.shape(), |d| {
                    for ((d, pi), yi) in d.iter_mut().zip(&p).zip(target) {
                        *d += g0 * (pi * mass - yi);
                    }
                });
            }
            Op::Inverse { input, reg_coeff } => {
                // d(A⁻¹) = -A⁻¹ dA A⁻¹  =>  Ā = -A⁻ᵀ Ḡ A⁻ᵀ
                let n = out.rows();
                let inv_t = out.transpose();
                let mut tmp = vec![0.0; n * n];
                gemm(inv_t.data(), gd, &mut tmp, n, n, n);
                let mut grad_a = vec![0.0; n * n];
                gemm(&tmp, inv_t.data(), &mut grad_a, n, n, n);
                grad_a.iter_mut().for_each(|v| *v = -*v);
                // ε = c·trace(W)/n contributes (c/n)·trace(Ā)·I
                let trace: f64 = (0..n).map(|i| grad_a[i * n + i]).sum();
                let shift = reg_coeff / n as f64 * trace;
                for i in 0..n {
                    grad_a[i * n + i] += shift;
                }
                accumulate(&mut grads[input.0], out.shape(), |d| {
                    d.iter_mut().zip(&grad_a).for_each(|(d, g)| *d += g)
                });
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax; masked-out entries are 0.
pub fn softmax_values(x: &[f64], keep: Option<&[bool]>) -> Vec<f64> {
    let kept = |i: usize| keep.is_none_or(|k| k[i]);
    let max = x
        .iter()
        .enumerate()
        .filter(|(i, _)| kept(*i))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| if kept(i) { (v - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

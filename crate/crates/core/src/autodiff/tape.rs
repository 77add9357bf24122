//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every op method evaluates eagerly, appends a node and returns its [`Var`].
//! [`Tape::backward`] walks the nodes from last to first, so a node's
//! gradient is complete before it is propagated to its inputs.

use std::collections::HashMap;

use super::loss::{focal_grad, focal_value};
use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_nt_raw, matmul_tn_raw, Tensor};
use super::TensorError;

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    IndexRows { x: Var, rows: Vec<usize> },
    PairAdd(Var, Var),
    GatherCols { x: Var, idx: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum(Var),
    Mean(Var),
    FocalSum { p: Var, targets: Vec<f64>, gamma: f64, alpha: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Records executed operations for one forward pass.
///
/// Not shareable across concurrent training steps; build one per step.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape whose parameters are constants; nothing needs a backward pass.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter as a leaf, once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    /// Parameters bound on this tape, in binding order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<_> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        out.sort_by_key(|(_, v)| v.0);
        out
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize), TensorError> {
        self.nodes[v.0].value.dims2()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            lhs: self.nodes[a.0].value.shape().to_vec(),
            rhs: self.nodes[b.0].value.shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).transpose()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool), TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err(name, a, b));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok((value, self.any_grad(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, rg) = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, rg) = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, rg) = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a `[cols]` vector to every row of a `[rows, cols]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x)?;
        if self.value(bias).numel() != c {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for (o, bv) in data[i * c..(i + 1) * c].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect())
            .expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> (Tensor, bool) {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
            .expect("same shape");
        (value, self.any_grad(&[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (value, rg) = self.map(x, |v| v.max(0.0));
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (value, rg) = self.map(x, sigmoid);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&src[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::SoftmaxRows(x), rg))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let (r, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pr != r {
                return Err(self.shape_err("concat_cols", first, p));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::matrix(r, total, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x)?;
        if start + len > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::matrix(r, len, data)?, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x)?;
        if start + len > r {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                bound: r,
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::matrix(len, c, data)?, Op::SliceRows { x, start }, rg))
    }

    /// Gathers rows by index; serves as embedding lookup when `x` is a table.
    pub fn index_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x)?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(TensorError::Index {
                    op: "index_rows",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.any_grad(&[x]);
        let value = Tensor::matrix(rows.len(), c, data)?;
        Ok(self.push(value, Op::IndexRows { x, rows: rows.to_vec() }, rg))
    }

    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        self.index_rows(table, indices)
    }

    /// All pairwise row sums: row `j * b_rows + t` of the output is `a[j] + b[t]`.
    pub fn pair_add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ra, ca) = self.dims2(a)?;
        let (rb, cb) = self.dims2(b)?;
        if ca != cb {
            return Err(self.shape_err("pair_add", a, b));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ra * rb * ca);
        for j in 0..ra {
            let arow = &da[j * ca..(j + 1) * ca];
            for t in 0..rb {
                let brow = &db[t * cb..(t + 1) * cb];
                data.extend(arow.iter().zip(brow).map(|(x, y)| x + y));
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(ra * rb, ca, data)?, Op::PairAdd(a, b), rg))
    }

    /// Per-row column gather: `out[i][c] = x[i][idx[i * out_cols + c]]`.
    pub fn gather_cols(
        &mut self,
        x: Var,
        idx: &[usize],
        out_cols: usize,
    ) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x)?;
        if idx.len() != r * out_cols {
            return Err(TensorError::DataLength {
                shape: vec![r, out_cols],
                len: idx.len(),
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len());
        for i in 0..r {
            for &j in &idx[i * out_cols..(i + 1) * out_cols] {
                if j >= c {
                    return Err(TensorError::Index {
                        op: "gather_cols",
                        index: j,
                        bound: c,
                    });
                }
                data.push(src[i * c + j]);
            }
        }
        let rg = self.any_grad(&[x]);
        let value = Tensor::matrix(r, out_cols, data)?;
        Ok(self.push(value, Op::GatherCols { x, idx: idx.to_vec() }, rg))
    }

    /// Per-row normalization followed by an affine `gain`/`bias` over columns.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x)?;
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                data[i * c + j] = g[j] * h + b[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::matrix(r, c, data)?, op, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel().max(1) as f64);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Sum of binary focal losses of probabilities `p` against 0/1 `targets`.
    pub fn focal_sum(
        &mut self,
        p: Var,
        targets: &[f64],
        gamma: f64,
        alpha: f64,
    ) -> Result<Var, TensorError> {
        let probs = self.value(p);
        if probs.numel() != targets.len() {
            return Err(TensorError::DataLength {
                shape: probs.shape().to_vec(),
                len: targets.len(),
            });
        }
        let total = probs
            .data()
            .iter()
            .zip(targets)
            .map(|(&pi, &zi)| focal_value(pi, zi, gamma, alpha))
            .sum();
        let rg = self.any_grad(&[p]);
        let op = Op::FocalSum {
            p,
            targets: targets.to_vec(),
            gamma,
            alpha,
        };
        Ok(self.push(Tensor::scalar(total), op, rg))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, TensorError> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(TensorError::NotScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), TensorError> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let (_, n) = tb.dims2()?;
                if self.requires_grad(*a) {
                    let da = matmul_nt_raw(gd, tb.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.requires_grad(*b) {
                    let db = matmul_tn_raw(ta.data(), gd, m, k, n);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose()?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut neg = g.clone();
                neg.scale_assign(-1.0);
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let db = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*bias) {
                    let (r, c) = g.dims2()?;
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for (d, v) in db.iter_mut().zip(&gd[i * c..(i + 1) * c]) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, db)?);
                }
            }
            Op::Scale(x, s) => {
                let mut d = g.clone();
                d.scale_assign(*s);
                self.accumulate(grads, *x, d);
            }
            Op::Relu(x) => {
                let src = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(src)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::SoftmaxRows(x) => {
                let (r, c) = g.dims2()?;
                let y = node.value.data();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let (yr, gr) = (&y[i * c..(i + 1) * c], &gd[i * c..(i + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(r, c, d)?);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(r, w, d)?);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, len) = g.dims2()?;
                let c = self.value(*x).cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor::matrix(r, c, d)?);
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.value(*x).dims2()?;
                let mut d = vec![0.0; r * c];
                d[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, Tensor::matrix(r, c, d)?);
            }
            Op::IndexRows { x, rows } => {
                let (r, c) = self.value(*x).dims2()?;
                let mut d = vec![0.0; r * c];
                for (k, &i) in rows.iter().enumerate() {
                    for (dv, gv) in d[i * c..(i + 1) * c].iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                        *dv += gv;
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(r, c, d)?);
            }
            Op::PairAdd(a, b) => {
                let (ra, c) = self.value(*a).dims2()?;
                let (rb, _) = self.value(*b).dims2()?;
                let mut da = vec![0.0; ra * c];
                let mut db = vec![0.0; rb * c];
                for j in 0..ra {
                    for t in 0..rb {
                        let row = &gd[(j * rb + t) * c..(j * rb + t + 1) * c];
                        for k in 0..c {
                            da[j * c + k] += row[k];
                            db[t * c + k] += row[k];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(ra, c, da)?);
                self.accumulate(grads, *b, Tensor::matrix(rb, c, db)?);
            }
            Op::GatherCols { x, idx } => {
                let (r, c) = self.value(*x).dims2()?;
                let q = idx.len() / r.max(1);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for k in 0..q {
                        d[i * c + idx[i * q + k]] += gd[i * q + k];
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(r, c, d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = g.dims2()?;
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..r {
                    let gr = &gd[i * c..(i + 1) * c];
                    let hr = &xhat[i * c..(i + 1) * c];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..c {
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    let n = c as f64;
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        dx[i * c + j] = rstd[i] / n * (n * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(r, c, dx)?);
                let gshape = self.value(*gain).shape().to_vec();
                self.accumulate(grads, *gain, Tensor::new(gshape, dg)?);
                let bshape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::new(bshape, db)?);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::full(shape, gd[0]));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let v = gd[0] / t.numel().max(1) as f64;
                self.accumulate(grads, *x, Tensor::full(t.shape(), v));
            }
            Op::FocalSum {
                p,
                targets,
                gamma,
                alpha,
            } => {
                let probs = self.value(*p);
                let d = probs
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&pi, &zi)| gd[0] * focal_grad(pi, zi, *gamma, *alpha))
                    .collect();
                self.accumulate(grads, *p, Tensor::new(probs.shape().to_vec(), d)?);
            }
        }
        Ok(())
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

pub(crate) fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

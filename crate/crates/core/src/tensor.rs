//! Dense row-major tensors and a recorded computation supporting reverse-mode
//! gradients.
//!
//! A [`Graph`] is an append-only record of operations. Every node holds its
//! forward value; [`Graph::backward`] walks the record once in reverse and
//! accumulates `∂loss/∂node` into every node that requires a gradient.
//! Gradients accumulate across calls until [`Graph::zero_grad`].

use std::cmp::Ordering;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", &[cols], &[bad.len()]));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    /// (rows, cols), treating a vector as a single row.
    fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [m, n] => (*m, *n),
            other => (other[..other.len() - 1].iter().product(), other[other.len() - 1]),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Reinterprets the data under a new shape; never reorders elements.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn require_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Position in the record, used to drop everything recorded after it.
#[derive(Clone, Copy, Debug)]
pub struct Mark(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    AddN(Vec<Var>),
    MeanRows(Var),
    MaskedMeanRows {
        x: Var,
        selected: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Number of recorded nodes (leaves and operations).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mark(&self) -> Mark {
        Mark(self.nodes.len())
    }

    /// Drops every node recorded after `mark` and clears all gradient state.
    /// Values of surviving nodes are left untouched.
    pub fn truncate(&mut self, mark: Mark) {
        self.nodes.truncate(mark.0);
        self.zero_grad();
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(Arc::new(value), true)
    }

    /// Non-trainable leaf owning its value.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(Arc::new(value), false)
    }

    /// Non-trainable leaf sharing an existing buffer (frozen weights).
    pub fn constant(&mut self, value: Arc<Tensor>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Arc::new(value), requires_grad)
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    // ---- operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.require_2d("matmul")?;
        let (k2, n) = tb.require_2d("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let out = matmul_nn(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_2d("transpose")?;
        let out = transpose_raw(ta.data(), m, n);
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = zip_map(ta.data(), tb.data(), |x, y| x + y);
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        let n = ta.cols();
        if tb.len() != n || ta.shape().len() > 2 {
            return Err(Error::shape("add_row", ta.shape(), tb.shape()));
        }
        let mut data = ta.data.clone();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = zip_map(ta.data(), tb.data(), |x, y| x * y);
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x * c).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Scale(a, c), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x.tanh()).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Tanh(a), &[a]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| gelu(x)).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Gelu(a), &[a]))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_finite() {
            return Err(Error::Numeric("softmax_rows"));
        }
        let n = ta.cols();
        let mut data = ta.data.clone();
        for row in data.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::SoftmaxRows(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = tx.cols();
        if n < 2 || tg.len() != n || tb.len() != n {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let m = tx.rows();
        let mut normalized = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                normalized[i * n + j] = h;
                out[i * n + j] = h * tg.data[j] + tb.data[j];
            }
        }
        let shape = tx.shape.clone();
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// `-log softmax(logits)[label]` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let tl = self.value(logits);
        let k = tl.len();
        if label >= k {
            return Err(Error::Index {
                what: "class label",
                index: label,
                bound: k,
            });
        }
        if !tl.is_finite() {
            return Err(Error::Numeric("cross_entropy"));
        }
        let mut probs = tl.data.clone();
        let lse = log_sum_exp(&probs);
        let loss = lse - probs[label];
        softmax_in_place(&mut probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    /// Element-wise sum of same-shaped tensors, accumulated left to right.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        let first = *terms
            .first()
            .ok_or_else(|| Error::Contract("add_n of no terms".into()))?;
        let shape = self.shape(first).to_vec();
        let mut data = vec![0.0; self.value(first).len()];
        for &t in terms {
            let tv = self.value(t);
            if tv.shape() != shape.as_slice() {
                return Err(Error::shape("add_n", &shape, tv.shape()));
            }
            for (d, v) in data.iter_mut().zip(tv.data()) {
                *d += v;
            }
        }
        Ok(self.push(Tensor { shape, data }, Op::AddN(terms.to_vec()), terms))
    }

    /// Mean over rows of an `[m, n]` matrix, giving `[n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_2d("mean_rows")?;
        if m == 0 {
            return Err(Error::Input("mean of zero rows".into()));
        }
        let mut out = vec![0.0; n];
        for row in ta.data.chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Tensor { shape: vec![n], data: out }, Op::MeanRows(a), &[a]))
    }

    /// Mean over the rows whose mask entry is `true` (all rows when `mask`
    /// is `None`). Rows are summed in a canonical order (lexicographic over
    /// their values) so the result is bit-identical under any permutation of
    /// the rows.
    pub fn masked_mean_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_2d("masked_mean_rows")?;
        if let Some(mask) = mask {
            if mask.len() != m {
                return Err(Error::shape("masked_mean_rows", &[m], &[mask.len()]));
            }
        }
        let mut selected: Vec<usize> = (0..m).filter(|&i| mask.is_none_or(|mk| mk[i])).collect();
        if selected.is_empty() {
            return Err(Error::Input("mean embedding over zero non-pad positions".into()));
        }
        selected.sort_by(|&i, &j| lexicographic(ta.row(i), ta.row(j)));
        let mut out = vec![0.0; n];
        for &i in &selected {
            for (o, v) in out.iter_mut().zip(ta.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / selected.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(
            Tensor { shape: vec![n], data: out },
            Op::MaskedMeanRows { x: a, selected },
            &[a],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of no parts".into()))?;
        let n = self.value(first).require_2d("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            let (m, c) = tp.require_2d("concat_rows")?;
            if c != n {
                return Err(Error::shape("concat_rows", &[rows, n], tp.shape()));
            }
            rows += m;
            data.extend_from_slice(tp.data());
        }
        Ok(self.push(Tensor { shape: vec![rows, n], data }, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of no parts".into()))?;
        let m = self.value(first).require_2d("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            let (r, c) = tp.require_2d("concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", &[m, 0], tp.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Tensor { shape: vec![m, total], data }, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_2d("slice_rows")?;
        if start > end || end > m {
            return Err(Error::shape("slice_rows", ta.shape(), &[start, end]));
        }
        let data = ta.data[start * n..end * n].to_vec();
        Ok(self.push(Tensor { shape: vec![end - start, n], data }, Op::SliceRows(a, start), &[a]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.require_2d("slice_cols")?;
        if start > end || end > n {
            return Err(Error::shape("slice_cols", ta.shape(), &[start, end]));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&ta.data[i * n + start..i * n + end]);
        }
        Ok(self.push(Tensor { shape: vec![m, w], data }, Op::SliceCols(a, start), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Looks up rows of `table` (`[V, d]`) for each id, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = tt.require_2d("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        Ok(self.push(
            Tensor { shape: vec![ids.len(), d], data },
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Accumulates `∂loss/∂node` into every node that requires a gradient and
    /// lies upstream of `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adjoint[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adjoint[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            for (input, contrib) in self.input_grads(&node.op, &node.value, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adjoint[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.data.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                None => {
                    node.grad = Some(Tensor {
                        shape: node.value.shape.clone(),
                        data: g,
                    })
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products for the inputs of one operation. Inputs that
    /// do not require gradients are skipped.
    fn input_grads(&self, op: &Op, out: &Tensor, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if rg(*a) {
                    res.push((*a, matmul_nt(g, tb.data(), m, n, k)));
                }
                if rg(*b) {
                    res.push((*b, matmul_tn(ta.data(), g, m, k, n)));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape[0], out.shape[1]);
                res.push((*a, transpose_raw(g, m, n)));
            }
            Op::Add(a, b) => {
                res.push((*a, g.to_vec()));
                res.push((*b, g.to_vec()));
            }
            Op::AddRow(a, row) => {
                if rg(*a) {
                    res.push((*a, g.to_vec()));
                }
                if rg(*row) {
                    let n = out.cols();
                    let mut acc = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        acc.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
                    }
                    res.push((*row, acc));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    res.push((*a, zip_map(g, val(*b).data(), |x, y| x * y)));
                }
                if rg(*b) {
                    res.push((*b, zip_map(g, val(*a).data(), |x, y| x * y)));
                }
            }
            Op::Scale(a, c) => res.push((*a, g.iter().map(|v| v * c).collect())),
            Op::Tanh(a) => res.push((*a, zip_map(g, out.data(), |d, y| d * (1.0 - y * y)))),
            Op::Gelu(a) => res.push((*a, zip_map(g, val(*a).data(), |d, x| d * gelu_grad(x)))),
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut dx = vec![0.0; g.len()];
                for ((dxr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                res.push((*a, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let n = out.cols();
                let tg = val(*gain).data();
                if rg(*gain) {
                    let mut dg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(normalized.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    res.push((*gain, dg));
                }
                if rg(*bias) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        db.iter_mut().zip(gr).for_each(|(s, v)| *s += v);
                    }
                    res.push((*bias, db));
                }
                if rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let nf = n as f64;
                    for (i, ((dxr, gr), hr)) in dx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(normalized.chunks(n))
                        .enumerate()
                    {
                        let dh: Vec<f64> = (0..n).map(|j| gr[j] * tg[j]).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dxr[j] = inv_std[i] / nf * (nf * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    res.push((*x, dx));
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                d[*label] -= g[0];
                res.push((*logits, d));
            }
            Op::Sum(a) => res.push((*a, vec![g[0]; val(*a).len()])),
            Op::AddN(terms) => {
                for t in terms {
                    res.push((*t, g.to_vec()));
                }
            }
            Op::MeanRows(a) => {
                let m = val(*a).shape[0];
                let inv = 1.0 / m as f64;
                let row: Vec<f64> = g.iter().map(|v| v * inv).collect();
                res.push((*a, row.repeat(m)));
            }
            Op::MaskedMeanRows { x, selected } => {
                let tx = val(*x);
                let n = tx.cols();
                let inv = 1.0 / selected.len() as f64;
                let mut dx = vec![0.0; tx.len()];
                for &i in selected {
                    for j in 0..n {
                        dx[i * n + j] = g[j] * inv;
                    }
                }
                res.push((*x, dx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    res.push((*p, g[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let m = out.rows();
                let mut col = 0;
                for p in parts {
                    let w = val(*p).cols();
                    let mut d = Vec::with_capacity(m * w);
                    for i in 0..m {
                        d.extend_from_slice(&g[i * total + col..i * total + col + w]);
                    }
                    res.push((*p, d));
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = val(*a);
                let n = ta.cols();
                let mut d = vec![0.0; ta.len()];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                res.push((*a, d));
            }
            Op::SliceCols(a, start) => {
                let ta = val(*a);
                let n = ta.cols();
                let w = out.cols();
                let mut d = vec![0.0; ta.len()];
                for i in 0..out.rows() {
                    d[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                res.push((*a, d));
            }
            Op::Reshape(a) => res.push((*a, g.to_vec())),
            Op::GatherRows { table, ids } => {
                let tt = val(*table);
                let d = tt.cols();
                let mut dt = vec![0.0; tt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                res.push((*table, dt));
            }
        }
        res
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise softmax of a matrix, outside any recorded computation.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    if !t.is_finite() {
        return Err(Error::Numeric("softmax_rows"));
    }
    let n = t.cols();
    let mut data = t.data.clone();
    for row in data.chunks_mut(n.max(1)) {
        softmax_in_place(row);
    }
    Ok(Tensor {
        shape: t.shape.clone(),
        data,
    })
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `[m,k] · [k,n]`
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `[m,n] · [k,n]ᵀ`
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `[m,k]ᵀ · [m,n]`
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

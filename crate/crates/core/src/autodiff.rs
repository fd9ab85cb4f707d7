//! Reverse-mode differentiation over a Wengert list.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`] walks
//! the list once in reverse, summing gradient contributions from every use of
//! a node. Parameters enter the tape through [`Tape::param`], which memoises
//! per parameter so that recurrent weights used at every time step share one
//! node and accumulate into one gradient.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamKey, ParamStore};
use crate::tensor::{rows_cols, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamKey),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    GatherRows(usize, Vec<usize>),
    StackRows(Vec<usize>),
    PairSum(usize, usize),
    LogSoftmaxRows(usize),
    Sum(usize),
    Select(usize, Vec<(usize, usize)>),
    /// Scalar output with a precomputed local Jacobian row.
    Fixed(usize, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    entries: Vec<(ParamKey, Vec<f64>)>,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &[f64])> {
        self.entries.iter().map(|(k, g)| (k, g.as_slice()))
    }

    /// Gradient for one parameter of `store`, if it was reached.
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&[f64]> {
        let key = store.key(id);
        self.entries
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, g)| g.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<ParamKey, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.index)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => unreachable!("params are pushed by Tape::param"),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::ConcatCols(a, b)
            | Op::PairSum(a, b) => self.nodes[*a].requires_grad || self.nodes[*b].requires_grad,
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::LogSoftmaxRows(a)
            | Op::Sum(a)
            | Op::Select(a, _)
            | Op::Fixed(a, _) => self.nodes[*a].requires_grad,
            Op::StackRows(xs) => xs.iter().any(|&x| self.nodes[x].requires_grad),
        };
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    /// Records a constant.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared_values(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    pub fn vector(&mut self, values: Vec<f64>) -> Var {
        let shape = vec![values.len()];
        self.push(shape, values, Op::Leaf)
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Var {
        assert_eq!(rows * cols, values.len());
        self.push(vec![rows, cols], values, Op::Leaf)
    }

    /// Records a parameter. Repeated calls for the same parameter return the
    /// same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = store.key(id);
        if let Some(&index) = self.params.get(&key) {
            return Var {
                tape: self.id,
                index,
            };
        }
        let p = store.get(id);
        let index = self.nodes.len();
        self.nodes.push(Node {
            shape: p.tensor.shape().to_vec(),
            value: p.tensor.shared_values(),
            op: Op::Param(key),
            requires_grad: p.trainable,
        });
        self.params.insert(key, index);
        Var {
            tape: self.id,
            index,
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[self.idx(v).expect("var from another tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.idx(v).expect("var from another tape")].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[self.idx(v).expect("var from another tape")];
        Tensor::from_parts(node.shape.clone(), (*node.value).clone())
    }

    fn dims(&self, i: usize) -> (usize, usize) {
        rows_cols(&self.nodes[i].shape)
    }

    /// Matrix product. A rank-1 left operand is treated as a single row and
    /// the result is rank-1.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.dims(ia);
        if self.nodes[ib].shape.len() != 2 || self.nodes[ib].shape[0] != k {
            return Err(shape_err(
                "matmul",
                &self.nodes[ia].shape,
                &self.nodes[ib].shape,
            ));
        }
        let n = self.nodes[ib].shape[1];
        let av = &self.nodes[ia].value;
        let bv = &self.nodes[ib].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &w) in row.iter_mut().zip(brow) {
                    *o += x * w;
                }
            }
        }
        let shape = if self.nodes[ia].shape.len() == 1 {
            vec![n]
        } else {
            vec![m, n]
        };
        Ok(self.push(shape, out, Op::MatMul(ia, ib)))
    }

    fn same_shape(&self, op: &'static str, ia: usize, ib: usize) -> Result<()> {
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(shape_err(op, &self.nodes[ia].shape, &self.nodes[ib].shape));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Vec<usize>, Vec<f64>)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(op, ia, ib)?;
        let out = self.nodes[ia]
            .value
            .iter()
            .zip(self.nodes[ib].value.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((ia, ib, self.nodes[ia].shape.clone(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, shape, out) = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(shape, out, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, shape, out) = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(shape, out, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, shape, out) = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(shape, out, Op::Mul(ia, ib)))
    }

    /// Adds a length-c vector to every row of an r×c matrix (or to a vector).
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (im, iv) = (self.idx(m)?, self.idx(v)?);
        let (r, c) = self.dims(im);
        if self.nodes[iv].value.len() != c || self.nodes[iv].shape.len() != 1 {
            return Err(shape_err("add_row", &self.nodes[im].shape, &self.nodes[iv].shape));
        }
        let mv = &self.nodes[im].value;
        let vv = &self.nodes[iv].value;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(mv[i * c..(i + 1) * c].iter().zip(vv.iter()).map(|(x, y)| x + y));
        }
        let shape = self.nodes[im].shape.clone();
        Ok(self.push(shape, out, Op::AddRow(im, iv)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.iter().map(|x| x * s).collect();
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, out, Op::Scale(ia, s)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.iter().map(|&x| sigmoid(x)).collect();
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, out, Op::Sigmoid(ia)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, out, Op::Tanh(ia)))
    }

    /// Column-wise concatenation; rows must agree. Two vectors give a vector.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ra, ca) = self.dims(ia);
        let (rb, cb) = self.dims(ib);
        let rank_a = self.nodes[ia].shape.len();
        let rank_b = self.nodes[ib].shape.len();
        if ra != rb || rank_a == 0 || rank_a != rank_b {
            return Err(shape_err("concat_cols", &self.nodes[ia].shape, &self.nodes[ib].shape));
        }
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let shape = if rank_a == 1 { vec![ca + cb] } else { vec![ra, ca + cb] };
        Ok(self.push(shape, out, Op::ConcatCols(ia, ib)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims(ia);
        if len == 0 || start + len > c {
            return Err(shape_err("slice_cols", &self.nodes[ia].shape, &[start, len]));
        }
        let av = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let shape = if self.nodes[ia].shape.len() == 1 {
            vec![len]
        } else {
            vec![r, len]
        };
        Ok(self.push(shape, out, Op::SliceCols(ia, start)))
    }

    /// Row gather: output row `i` is input row `rows[i]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims(ia);
        if rows.is_empty() || rows.iter().any(|&x| x >= r) {
            return Err(shape_err("gather_rows", &self.nodes[ia].shape, rows));
        }
        let av = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            out.extend_from_slice(&av[row * c..(row + 1) * c]);
        }
        Ok(self.push(vec![rows.len(), c], out, Op::GatherRows(ia, rows.to_vec())))
    }

    /// Stacks equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let ids = xs.iter().map(|&x| self.idx(x)).collect::<Result<Vec<_>>>()?;
        let Some(&first) = ids.first() else {
            return Err(Error::InvalidTensor("stack_rows of nothing".into()));
        };
        let c = self.nodes[first].value.len();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in &ids {
            if self.nodes[i].shape.len() != 1 || self.nodes[i].value.len() != c {
                return Err(shape_err("stack_rows", &self.nodes[first].shape, &self.nodes[i].shape));
            }
            out.extend_from_slice(&self.nodes[i].value);
        }
        Ok(self.push(vec![ids.len(), c], out, Op::StackRows(ids)))
    }

    /// Outer sum over rows: `a` is T×H, `b` is U×H, the result is (T·U)×H
    /// with row `t·U + u` equal to `a[t] + b[u]`.
    pub fn pair_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (t, h) = self.dims(ia);
        let (u, hb) = self.dims(ib);
        if h != hb {
            return Err(shape_err("pair_sum", &self.nodes[ia].shape, &self.nodes[ib].shape));
        }
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let mut out = Vec::with_capacity(t * u * h);
        for ti in 0..t {
            let arow = &av[ti * h..(ti + 1) * h];
            for ui in 0..u {
                let brow = &bv[ui * h..(ui + 1) * h];
                out.extend(arow.iter().zip(brow).map(|(x, y)| x + y));
            }
        }
        Ok(self.push(vec![t * u, h], out, Op::PairSum(ia, ib)))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims(ia);
        let av = &self.nodes[ia].value;
        if av.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericInput("log_softmax"));
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(log_softmax(&av[i * c..(i + 1) * c]));
        }
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(shape, out, Op::LogSoftmaxRows(ia)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.iter().sum();
        Ok(self.push(Vec::new(), vec![s], Op::Sum(ia)))
    }

    /// Picks `(row, col)` entries into a vector.
    pub fn select(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims(ia);
        if at.is_empty() || at.iter().any(|&(i, j)| i >= r || j >= c) {
            return Err(shape_err("select", &self.nodes[ia].shape, &[at.len()]));
        }
        let av = &self.nodes[ia].value;
        let out = at.iter().map(|&(i, j)| av[i * c + j]).collect();
        Ok(self.push(vec![at.len()], out, Op::Select(ia, at.to_vec())))
    }

    /// Records a scalar function of `a` whose value and gradient were
    /// computed elsewhere. `local_grad` is d(out)/d(a), one entry per element.
    pub fn fixed_scalar(&mut self, a: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        let ia = self.idx(a)?;
        if local_grad.len() != self.nodes[ia].value.len() {
            return Err(shape_err("fixed_scalar", &self.nodes[ia].shape, &[local_grad.len()]));
        }
        Ok(self.push(Vec::new(), vec![value], Op::Fixed(ia, local_grad)))
    }

    /// Reverse sweep from a scalar loss. Each node is visited once, in
    /// reverse recording order; contributions from multiple uses add up.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[root].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(key) => out.entries.push((*key, g)),
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).1;
                    if self.nodes[*a].requires_grad {
                        let bv = &self.nodes[*b].value;
                        let da = slot(&mut grads, *a, m * k);
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                da[r * k + p] += dot(grow, brow);
                            }
                        }
                    }
                    if self.nodes[*b].requires_grad {
                        let av = &self.nodes[*a].value;
                        let db = slot(&mut grads, *b, k * n);
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let x = av[r * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += x * gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, &g, 1.0);
                    self.acc(&mut grads, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, &g, 1.0);
                    self.acc(&mut grads, *b, &g, -1.0);
                }
                Op::AddRow(m, v) => {
                    self.acc(&mut grads, *m, &g, 1.0);
                    if self.nodes[*v].requires_grad {
                        let c = self.nodes[*v].value.len();
                        let dv = slot(&mut grads, *v, c);
                        for row in g.chunks(c) {
                            for (d, x) in dv.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (x, y) in [(*a, *b), (*b, *a)] {
                        if self.nodes[x].requires_grad {
                            let yv = &self.nodes[y].value;
                            let dx = slot(&mut grads, x, g.len());
                            for ((d, gv), w) in dx.iter_mut().zip(&g).zip(yv.iter()) {
                                *d += gv * w;
                            }
                        }
                    }
                }
                Op::Scale(a, s) => self.acc(&mut grads, *a, &g, *s),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, gv), yv) in da.iter_mut().zip(&g).zip(y.iter()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, gv), yv) in da.iter_mut().zip(&g).zip(y.iter()) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (r, ca) = self.dims(*a);
                    let cb = self.dims(*b).1;
                    let w = ca + cb;
                    if self.nodes[*a].requires_grad {
                        let da = slot(&mut grads, *a, r * ca);
                        for i in 0..r {
                            add_into(&mut da[i * ca..(i + 1) * ca], &g[i * w..i * w + ca]);
                        }
                    }
                    if self.nodes[*b].requires_grad {
                        let db = slot(&mut grads, *b, r * cb);
                        for i in 0..r {
                            add_into(&mut db[i * cb..(i + 1) * cb], &g[i * w + ca..(i + 1) * w]);
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.dims(*a);
                    let len = g.len() / r;
                    let da = slot(&mut grads, *a, r * c);
                    for i in 0..r {
                        add_into(
                            &mut da[i * c + start..i * c + start + len],
                            &g[i * len..(i + 1) * len],
                        );
                    }
                }
                Op::GatherRows(a, rows) => {
                    let (r, c) = self.dims(*a);
                    let da = slot(&mut grads, *a, r * c);
                    for (k, &row) in rows.iter().enumerate() {
                        add_into(&mut da[row * c..(row + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
                Op::StackRows(xs) => {
                    let c = g.len() / xs.len();
                    for (k, &x) in xs.iter().enumerate() {
                        if self.nodes[x].requires_grad {
                            let dx = slot(&mut grads, x, c);
                            add_into(dx, &g[k * c..(k + 1) * c]);
                        }
                    }
                }
                Op::PairSum(a, b) => {
                    let (t, h) = self.dims(*a);
                    let u = self.dims(*b).0;
                    if self.nodes[*a].requires_grad {
                        let da = slot(&mut grads, *a, t * h);
                        for ti in 0..t {
                            for ui in 0..u {
                                let row = (ti * u + ui) * h;
                                add_into(&mut da[ti * h..(ti + 1) * h], &g[row..row + h]);
                            }
                        }
                    }
                    if self.nodes[*b].requires_grad {
                        let db = slot(&mut grads, *b, u * h);
                        for ti in 0..t {
                            for ui in 0..u {
                                let row = (ti * u + ui) * h;
                                add_into(&mut db[ui * h..(ui + 1) * h], &g[row..row + h]);
                            }
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let (r, c) = self.dims(*a);
                    let y = &node.value;
                    let da = slot(&mut grads, *a, r * c);
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        let total: f64 = grow.iter().sum();
                        for j in 0..c {
                            da[i * c + j] += grow[j] - y[i * c + j].exp() * total;
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[*a].value.len();
                    let da = slot(&mut grads, *a, n);
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Select(a, at) => {
                    let (r, c) = self.dims(*a);
                    let da = slot(&mut grads, *a, r * c);
                    for (k, &(i, j)) in at.iter().enumerate() {
                        da[i * c + j] += g[k];
                    }
                }
                Op::Fixed(a, local) => {
                    let da = slot(&mut grads, *a, local.len());
                    for (d, l) in da.iter_mut().zip(local) {
                        *d += g[0] * l;
                    }
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], target: usize, g: &[f64], s: f64) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let d = slot(grads, target, g.len());
        for (x, y) in d.iter_mut().zip(g) {
            *x += s * y;
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log-sum-exp; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(xs);
    xs.iter().map(|x| x - z).collect()
}

/// Checked log-softmax for a single vector: rejects empty or non-finite input.
pub fn log_softmax_checked(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::InvalidTensor("log_softmax of empty vector".into()));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericInput("log_softmax"));
    }
    Ok(log_softmax(xs))
}

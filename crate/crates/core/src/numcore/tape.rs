//! Reverse-mode tape over dense 2-D values.
//!
//! A [`Tape`] is built per training step: parameters enter as leaves, the
//! forward pass appends nodes in topological order, [`Tape::backward`] walks
//! them once in reverse. Gradient buffers are allocated only for nodes that
//! require gradients. A tape is confined to one thread by design.

use super::dense;
use super::scalar::{fromf64, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRow { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Affine1 { a: usize, mul: T },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Relu { a: usize },
    Exp { a: usize },
    LnClamped { a: usize, eps: T },
    Softplus { a: usize },
    ConcatCols { a: usize, b: usize },
    ConcatRows { parts: Vec<usize> },
    SliceCols { a: usize, from: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    LogSumExpRow { a: usize },
    Bce { pred: usize, target: Vec<T>, eps: T },
    EmbedMean { table: usize, ids: Vec<usize> },
    GatherRows { table: usize, ids: Vec<usize> },
    SelectColPerRow { a: usize, cols: Vec<usize> },
    L2NormRows { a: usize },
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Reverse-mode tape. One per training step; not shared across threads.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient w.r.t. a leaf that was registered with `requires_grad`.
    pub fn wrt(&self, v: Var) -> &[T] {
        self.get(v).expect("no gradient recorded for this var")
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, needs: bool, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            needs_grad: needs,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        [self.nodes[v.0].rows, self.nodes[v.0].cols]
    }

    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.shape(v), [1, 1]);
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_vec(n.rows, n.cols, n.value.clone()).expect("node value consistent")
    }

    /// Registers a tensor as a leaf; its `requires_grad` flag decides whether
    /// gradients flow into it.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.rows(),
            t.cols(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Registers a constant leaf (no gradient).
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::Dim {
                op: "constant",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(rows, cols, data, false, Op::Leaf))
    }

    pub fn constant_scalar(&mut self, x: T) -> Var {
        self.push(1, 1, vec![x], false, Op::Leaf)
    }

    fn dim_err(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Error {
        Error::Dim {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }
    }

    /// `a (r x k) * b (k x c)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ra, ka] = self.shape(a);
        let [kb, cb] = self.shape(b);
        if ka != kb {
            return Err(Self::dim_err("matmul", [ra, ka], [kb, cb]));
        }
        let mut out = vec![T::zero(); ra * cb];
        dense::matmul(self.value(a), ra, ka, self.value(b), cb, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(ra, cb, out, needs, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// `a (r x k) * b^T` with `b` stored `(n x k)`; result `r x n`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ra, ka] = self.shape(a);
        let [rb, kb] = self.shape(b);
        if ka != kb {
            return Err(Self::dim_err("matmul_nt", [ra, ka], [rb, kb]));
        }
        let mut out = vec![T::zero(); ra * rb];
        dense::matmul_nt(self.value(a), ra, ka, self.value(b), rb, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(ra, rb, out, needs, Op::MatMulNT { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Self::dim_err("add", sa, sb));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(sa[0], sa[1], out, needs, Op::Add { a: a.0, b: b.0 }))
    }

    /// Adds row vector `b (1 x n)` to every row of `a (r x n)`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb[0] != 1 || sa[1] != sb[1] {
            return Err(Self::dim_err("add_row", sa, sb));
        }
        let mut out = self.value(a).to_vec();
        dense::add_row_inplace(&mut out, sa[0], self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(sa[0], sa[1], out, needs, Op::AddRow { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Self::dim_err("sub", sa, sb));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(sa[0], sa[1], out, needs, Op::Sub { a: a.0, b: b.0 }))
    }

    /// Elementwise product. `mul(v, v)` squares with the correct gradient.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Self::dim_err("mul", sa, sb));
        }
        let out: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(sa[0], sa[1], out, needs, Op::Mul { a: a.0, b: b.0 }))
    }

    /// `y = mul * x + add`, elementwise with scalar constants.
    pub fn affine1(&mut self, a: Var, mul: T, add: T) -> Var {
        let [r, c] = self.shape(a);
        let out: Vec<T> = self.value(a).iter().map(|&x| mul * x + add).collect();
        let needs = self.needs(a);
        self.push(r, c, out, needs, Op::Affine1 { a: a.0, mul })
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.affine1(a, k, T::zero())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine1(a, -T::one(), T::zero())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let [r, c] = self.shape(a);
        let out: Vec<T> = self.value(a).iter().map(|&x| dense::sigmoid(x)).collect();
        let needs = self.needs(a);
        self.push(r, c, out, needs, Op::Sigmoid { a: a.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let [r, c] = self.shape(a);
        let out: Vec<T> = self.value(a).iter().map(|&x| x.tanh()).collect();
        let needs = self.needs(a);
        self.push(r, c, out, needs, Op::Tanh { a: a.0 })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let [r, c] = self.shape(a);
        let out: Vec<T> = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let needs = self.needs(a);
        self.push(r, c, out, needs, Op::Relu { a: a.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let [r, c] = self.shape(a);
        let out: Vec<T> = self.value(a).iter().map(|&x| x.exp()).collect();
        let needs = self.needs(a);
        self.push(r, c, out, needs, Op::Exp { a: a.0 })
    }

    /// `ln(max(x, eps))`; gradient is zero in the clamped region.
    pub fn ln_clamped(&mut self, a: Var, eps: T) -> Var {
        let [r, c] = self.shape(a);
        let out: Vec<T> = self.value(a).iter().map(|&x| x.max(eps).ln()).collect();
        let needs = self.needs(a);
        self.push(r, c, out, needs, Op::LnClamped { a: a.0, eps })
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let [r, c] = self.shape(a);
        let out: Vec<T> = self
            .value(a)
            .iter()
            .map(|&x| x.max(T::zero()) + (-x.abs()).exp().ln_1p())
            .collect();
        let needs = self.needs(a);
        self.push(r, c, out, needs, Op::Softplus { a: a.0 })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa[0] != sb[0] {
            return Err(Self::dim_err("concat_cols", sa, sb));
        }
        let (r, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&self.value(a)[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&self.value(b)[i * cb..(i + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(r, ca + cb, out, needs, Op::ConcatCols { a: a.0, b: b.0 }))
    }

    /// Vertically stacks parts with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dim {
                op: "concat_rows",
                lhs: vec![0],
                rhs: vec![],
            });
        }
        let cols = self.shape(parts[0])[1];
        let mut rows = 0;
        let mut out = Vec::new();
        let mut needs = false;
        for &p in parts {
            let sp = self.shape(p);
            if sp[1] != cols {
                return Err(Self::dim_err("concat_rows", [rows, cols], sp));
            }
            rows += sp[0];
            out.extend_from_slice(self.value(p));
            needs |= self.needs(p);
        }
        Ok(self.push(
            rows,
            cols,
            out,
            needs,
            Op::ConcatRows {
                parts: parts.iter().map(|v| v.0).collect(),
            },
        ))
    }

    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if from >= to || to > c {
            return Err(Self::dim_err("slice_cols", [r, c], [from, to]));
        }
        let w = to - from;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.value(a)[i * c + from..i * c + to]);
        }
        let needs = self.needs(a);
        Ok(self.push(r, w, out, needs, Op::SliceCols { a: a.0, from }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = T::zero();
        for &x in self.value(a) {
            acc += x;
        }
        let needs = self.needs(a);
        self.push(1, 1, vec![acc], needs, Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let mut acc = T::zero();
        for &x in self.value(a) {
            acc += x;
        }
        let needs = self.needs(a);
        self.push(
            1,
            1,
            vec![acc / fromf64::<T>(n as f64)],
            needs,
            Op::MeanAll { a: a.0 },
        )
    }

    /// Per-row stable `ln(sum_j exp(x_ij))`; result `r x 1`.
    pub fn log_sum_exp_row(&mut self, a: Var) -> Var {
        let [r, c] = self.shape(a);
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &self.value(a)[i * c..(i + 1) * c];
            let m = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let mut s = T::zero();
            for &x in row {
                s += (x - m).exp();
            }
            out.push(m + s.ln());
        }
        let needs = self.needs(a);
        self.push(r, 1, out, needs, Op::LogSumExpRow { a: a.0 })
    }

    /// Elementwise binary cross-entropy against constant targets in `[0,1]`;
    /// predictions are clamped to `[eps, 1-eps]` before the logs.
    pub fn bce(&mut self, pred: Var, target: &[T], eps: T) -> Result<Var> {
        let [r, c] = self.shape(pred);
        if target.len() != r * c {
            return Err(Error::Dim {
                op: "bce",
                lhs: vec![r, c],
                rhs: vec![target.len()],
            });
        }
        let one = T::one();
        let out: Vec<T> = self
            .value(pred)
            .iter()
            .zip(target.iter())
            .map(|(&p, &t)| {
                let p = p.max(eps).min(one - eps);
                -(t * p.ln() + (one - t) * (one - p).ln())
            })
            .collect();
        let needs = self.needs(pred);
        Ok(self.push(
            r,
            c,
            out,
            needs,
            Op::Bce {
                pred: pred.0,
                target: target.to_vec(),
                eps,
            },
        ))
    }

    /// Mean of embedding rows selected by `ids`; result `1 x d`.
    pub fn embed_mean(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [v, d] = self.shape(table);
        if ids.is_empty() {
            return Err(Error::Dim {
                op: "embed_mean",
                lhs: vec![v, d],
                rhs: vec![0],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Dim {
                op: "embed_mean",
                lhs: vec![v, d],
                rhs: vec![bad],
            });
        }
        let mut out = vec![T::zero(); d];
        for &id in ids {
            let row = &self.value(table)[id * d..(id + 1) * d];
            for (o, &x) in out.iter_mut().zip(row.iter()) {
                *o += x;
            }
        }
        let inv = T::one() / fromf64::<T>(ids.len() as f64);
        out.iter_mut().for_each(|x| *x = *x * inv);
        let needs = self.needs(table);
        Ok(self.push(
            1,
            d,
            out,
            needs,
            Op::EmbedMean {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Gathers rows of `table` by index; result `len(ids) x d`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [v, d] = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Dim {
                op: "gather_rows",
                lhs: vec![v, d],
                rhs: vec![bad],
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&self.value(table)[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            ids.len(),
            d,
            out,
            needs,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Picks one column per row; result `r x 1`.
    pub fn select_col_per_row(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let [r, c] = self.shape(a);
        if cols.len() != r {
            return Err(Error::Dim {
                op: "select_col_per_row",
                lhs: vec![r, c],
                rhs: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Dim {
                op: "select_col_per_row",
                lhs: vec![r, c],
                rhs: vec![bad],
            });
        }
        let out: Vec<T> = cols
            .iter()
            .enumerate()
            .map(|(i, &j)| self.value(a)[i * c + j])
            .collect();
        let needs = self.needs(a);
        Ok(self.push(
            r,
            1,
            out,
            needs,
            Op::SelectColPerRow {
                a: a.0,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Normalizes each row to unit L2 norm (zero rows stay zero).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let [r, c] = self.shape(a);
        let mut out = self.value(a).to_vec();
        dense::l2_normalize_rows(&mut out, r, c);
        let needs = self.needs(a);
        self.push(r, c, out, needs, Op::L2NormRows { a: a.0 })
    }

    /// `x*W + b` with `b (1 x n)` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Mean squared error between `a` and constant targets.
    pub fn mse(&mut self, a: Var, target: &[T]) -> Result<Var> {
        let [r, c] = self.shape(a);
        if target.len() != r * c {
            return Err(Error::Dim {
                op: "mse",
                lhs: vec![r, c],
                rhs: vec![target.len()],
            });
        }
        let t = self.constant(r, c, target.to_vec())?;
        let d = self.sub(a, t)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Reverse pass from a scalar root. Visits each node exactly once.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let [r, c] = self.shape(root);
        if r != 1 || c != 1 {
            return Err(Error::Dim {
                op: "backward",
                lhs: vec![r, c],
                rhs: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(idx, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn ensure<'a>(
        grads: &'a mut [Option<Vec<T>>],
        nodes: &[Node<T>],
        idx: usize,
    ) -> &'a mut Vec<T> {
        if grads[idx].is_none() {
            grads[idx] = Some(vec![T::zero(); nodes[idx].value.len()]);
        }
        grads[idx].as_mut().unwrap()
    }

    fn propagate(&self, _idx: usize, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |i: usize| nodes[i].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ra, ka) = (nodes[*a].rows, nodes[*a].cols);
                let cb = nodes[*b].cols;
                if needs(*a) {
                    let bv = &nodes[*b].value;
                    let mut tmp = vec![T::zero(); ra * ka];
                    dense::matmul_nt(g, ra, cb, bv, ka, &mut tmp);
                    let ga = Self::ensure(grads, nodes, *a);
                    for (x, t) in ga.iter_mut().zip(tmp.iter()) {
                        *x += *t;
                    }
                }
                if needs(*b) {
                    let av = &nodes[*a].value;
                    let gb = Self::ensure(grads, nodes, *b);
                    dense::matmul_tn_acc(av, ra, ka, g, cb, gb);
                }
            }
            Op::MatMulNT { a, b } => {
                let (ra, ka) = (nodes[*a].rows, nodes[*a].cols);
                let rb = nodes[*b].rows;
                if needs(*a) {
                    let bv = &nodes[*b].value;
                    let ga = Self::ensure(grads, nodes, *a);
                    dense::matmul_acc(g, ra, rb, bv, ka, ga);
                }
                if needs(*b) {
                    let av = &nodes[*a].value;
                    let gb = Self::ensure(grads, nodes, *b);
                    dense::matmul_tn_acc(g, ra, rb, av, ka, gb);
                }
            }
            Op::Add { a, b } => {
                for &i in [a, b].iter() {
                    if needs(*i) {
                        let gi = Self::ensure(grads, nodes, *i);
                        for (x, &y) in gi.iter_mut().zip(g.iter()) {
                            *x += y;
                        }
                    }
                }
            }
            Op::AddRow { a, b } => {
                if needs(*a) {
                    let ga = Self::ensure(grads, nodes, *a);
                    for (x, &y) in ga.iter_mut().zip(g.iter()) {
                        *x += y;
                    }
                }
                if needs(*b) {
                    let n = nodes[*b].cols;
                    let rows = node.rows;
                    let gb = Self::ensure(grads, nodes, *b);
                    for i in 0..rows {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    let ga = Self::ensure(grads, nodes, *a);
                    for (x, &y) in ga.iter_mut().zip(g.iter()) {
                        *x += y;
                    }
                }
                if needs(*b) {
                    let gb = Self::ensure(grads, nodes, *b);
                    for (x, &y) in gb.iter_mut().zip(g.iter()) {
                        *x -= y;
                    }
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    let bv = &nodes[*b].value;
                    let ga = Self::ensure(grads, nodes, *a);
                    for ((x, &y), &v) in ga.iter_mut().zip(g.iter()).zip(bv.iter()) {
                        *x += y * v;
                    }
                }
                if needs(*b) {
                    let av = &nodes[*a].value;
                    let gb = Self::ensure(grads, nodes, *b);
                    for ((x, &y), &v) in gb.iter_mut().zip(g.iter()).zip(av.iter()) {
                        *x += y * v;
                    }
                }
            }
            Op::Affine1 { a, mul } => {
                if needs(*a) {
                    let m = *mul;
                    let ga = Self::ensure(grads, nodes, *a);
                    for (x, &y) in ga.iter_mut().zip(g.iter()) {
                        *x += y * m;
                    }
                }
            }
            Op::Sigmoid { a } => {
                if needs(*a) {
                    let yv = &node.value;
                    let one = T::one();
                    let ga = Self::ensure(grads, nodes, *a);
                    for ((x, &y), &s) in ga.iter_mut().zip(g.iter()).zip(yv.iter()) {
                        *x += y * s * (one - s);
                    }
                }
            }
            Op::Tanh { a } => {
                if needs(*a) {
                    let yv = &node.value;
                    let one = T::one();
                    let ga = Self::ensure(grads, nodes, *a);
                    for ((x, &y), &s) in ga.iter_mut().zip(g.iter()).zip(yv.iter()) {
                        *x += y * (one - s * s);
                    }
                }
            }
            Op::Relu { a } => {
                if needs(*a) {
                    let xv = &nodes[*a].value;
                    let ga = Self::ensure(grads, nodes, *a);
                    for ((x, &y), &v) in ga.iter_mut().zip(g.iter()).zip(xv.iter()) {
                        if v > T::zero() {
                            *x += y;
                        }
                    }
                }
            }
            Op::Exp { a } => {
                if needs(*a) {
                    let yv = &node.value;
                    let ga = Self::ensure(grads, nodes, *a);
                    for ((x, &y), &e) in ga.iter_mut().zip(g.iter()).zip(yv.iter()) {
                        *x += y * e;
                    }
                }
            }
            Op::LnClamped { a, eps } => {
                if needs(*a) {
                    let xv = &nodes[*a].value;
                    let e = *eps;
                    let ga = Self::ensure(grads, nodes, *a);
                    for ((x, &y), &v) in ga.iter_mut().zip(g.iter()).zip(xv.iter()) {
                        if v >= e {
                            *x += y / v;
                        }
                    }
                }
            }
            Op::Softplus { a } => {
                if needs(*a) {
                    let xv = &nodes[*a].value;
                    let ga = Self::ensure(grads, nodes, *a);
                    for ((x, &y), &v) in ga.iter_mut().zip(g.iter()).zip(xv.iter()) {
                        *x += y * dense::sigmoid(v);
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let ca = nodes[*a].cols;
                let cb = nodes[*b].cols;
                let rows = node.rows;
                if needs(*a) {
                    let ga = Self::ensure(grads, nodes, *a);
                    for i in 0..rows {
                        for j in 0..ca {
                            ga[i * ca + j] += g[i * (ca + cb) + j];
                        }
                    }
                }
                if needs(*b) {
                    let gb = Self::ensure(grads, nodes, *b);
                    for i in 0..rows {
                        for j in 0..cb {
                            gb[i * cb + j] += g[i * (ca + cb) + ca + j];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let cols = node.cols;
                let mut row0 = 0;
                for &p in parts {
                    let rp = nodes[p].rows;
                    if needs(p) {
                        let gp = Self::ensure(grads, nodes, p);
                        let src = &g[row0 * cols..(row0 + rp) * cols];
                        for (x, &y) in gp.iter_mut().zip(src.iter()) {
                            *x += y;
                        }
                    }
                    row0 += rp;
                }
            }
            Op::SliceCols { a, from } => {
                if needs(*a) {
                    let ca = nodes[*a].cols;
                    let w = node.cols;
                    let rows = node.rows;
                    let f = *from;
                    let ga = Self::ensure(grads, nodes, *a);
                    for i in 0..rows {
                        for j in 0..w {
                            ga[i * ca + f + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if needs(*a) {
                    let s = g[0];
                    let ga = Self::ensure(grads, nodes, *a);
                    for x in ga.iter_mut() {
                        *x += s;
                    }
                }
            }
            Op::MeanAll { a } => {
                if needs(*a) {
                    let n = nodes[*a].value.len();
                    let s = g[0] / fromf64::<T>(n as f64);
                    let ga = Self::ensure(grads, nodes, *a);
                    for x in ga.iter_mut() {
                        *x += s;
                    }
                }
            }
            Op::LogSumExpRow { a } => {
                if needs(*a) {
                    let c = nodes[*a].cols;
                    let rows = node.rows;
                    let xv = &nodes[*a].value;
                    let yv = &node.value;
                    let ga = Self::ensure(grads, nodes, *a);
                    for i in 0..rows {
                        let gy = g[i];
                        for j in 0..c {
                            ga[i * c + j] += gy * (xv[i * c + j] - yv[i]).exp();
                        }
                    }
                }
            }
            Op::Bce { pred, target, eps } => {
                if needs(*pred) {
                    let one = T::one();
                    let e = *eps;
                    let pv = &nodes[*pred].value;
                    let gp = Self::ensure(grads, nodes, *pred);
                    for (i, ((x, &y), &p)) in
                        gp.iter_mut().zip(g.iter()).zip(pv.iter()).enumerate()
                    {
                        if p > e && p < one - e {
                            let t = target[i];
                            *x += y * (p - t) / (p * (one - p));
                        }
                    }
                }
            }
            Op::EmbedMean { table, ids } => {
                if needs(*table) {
                    let d = node.cols;
                    let inv = T::one() / fromf64::<T>(ids.len() as f64);
                    let gt = Self::ensure(grads, nodes, *table);
                    for &id in ids {
                        for j in 0..d {
                            gt[id * d + j] += g[j] * inv;
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if needs(*table) {
                    let d = node.cols;
                    let gt = Self::ensure(grads, nodes, *table);
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[i * d + j];
                        }
                    }
                }
            }
            Op::SelectColPerRow { a, cols } => {
                if needs(*a) {
                    let c = nodes[*a].cols;
                    let ga = Self::ensure(grads, nodes, *a);
                    for (i, &j) in cols.iter().enumerate() {
                        ga[i * c + j] += g[i];
                    }
                }
            }
            Op::L2NormRows { a } => {
                if needs(*a) {
                    let c = node.cols;
                    let rows = node.rows;
                    let tiny = T::from(1e-30).unwrap();
                    let xv = &nodes[*a].value;
                    let yv = &node.value;
                    let ga = Self::ensure(grads, nodes, *a);
                    for i in 0..rows {
                        let xr = &xv[i * c..(i + 1) * c];
                        let yr = &yv[i * c..(i + 1) * c];
                        let n = dense::l2_norm(xr);
                        if n < tiny {
                            continue;
                        }
                        let gy = &g[i * c..(i + 1) * c];
                        let gdoty = dense::dot(gy, yr);
                        let gr = &mut ga[i * c..(i + 1) * c];
                        for j in 0..c {
                            gr[j] += (gy[j] - yr[j] * gdoty) / n;
                        }
                    }
                }
            }
        }
    }
}

//! Reverse-mode differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`] walks it
//! in reverse and accumulates parameter gradients into a [`Gradients`] buffer. Each op's
//! backward rule is written out by hand below.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable matrices. Row vectors (biases, norm gains) are stored as `1×n`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Gradient buffer, one slot per parameter. Embedding lookups only touch a few rows of
/// large tables, so those accumulate sparsely.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    dense: Vec<Option<Mat>>,
    rows: Vec<BTreeMap<usize, Array1<f64>>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Gradients { dense: vec![None; num_params], rows: vec![BTreeMap::new(); num_params] }
    }

    fn ensure(&mut self, id: ParamId) {
        if id.0 >= self.dense.len() {
            self.dense.resize(id.0 + 1, None);
            self.rows.resize(id.0 + 1, BTreeMap::new());
        }
    }

    pub fn add_dense(&mut self, id: ParamId, g: &Mat) {
        self.ensure(id);
        match &mut self.dense[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn add_row(&mut self, id: ParamId, row: usize, g: ArrayView1<f64>) {
        self.ensure(id);
        self.rows[id.0].entry(row).and_modify(|acc| *acc += &g).or_insert_with(|| g.to_owned());
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, d) in other.dense.iter().enumerate() {
            if let Some(d) = d {
                self.add_dense(ParamId(i), d);
            }
        }
        for (i, rows) in other.rows.iter().enumerate() {
            for (r, g) in rows {
                self.add_row(ParamId(i), *r, g.view());
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for d in self.dense.iter_mut().flatten() {
            *d *= f;
        }
        for rows in &mut self.rows {
            for g in rows.values_mut() {
                *g *= f;
            }
        }
    }

    /// Full gradient for one parameter, zeros where nothing flowed.
    pub fn dense_for(&self, id: ParamId, shape: (usize, usize)) -> Mat {
        let mut out = match self.dense.get(id.0).and_then(Option::as_ref) {
            Some(d) => d.clone(),
            None => Mat::zeros(shape),
        };
        if let Some(rows) = self.rows.get(id.0) {
            for (r, g) in rows {
                let mut row = out.row_mut(*r);
                row += g;
            }
        }
        out
    }

    pub fn touched(&self, id: ParamId) -> bool {
        self.dense.get(id.0).is_some_and(Option::is_some) || self.rows.get(id.0).is_some_and(|r| !r.is_empty())
    }

    pub fn all_finite(&self) -> bool {
        self.dense.iter().flatten().all(|d| d.iter().all(|x| x.is_finite()))
            && self.rows.iter().all(|rs| rs.values().all(|g| g.iter().all(|x| x.is_finite())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    Embed {
        table: ParamId,
        rows: Vec<usize>,
    },
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    /// `a + b` with `b` a `1×n` row broadcast down `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Array1<f64>,
    },
    Softmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    MeanGroups {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    ColMax {
        x: Var,
        argmax: Vec<usize>,
    },
    /// Scalar function of `x` whose gradient was computed during the forward pass.
    Scalar {
        x: Var,
        dx: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let v = self.store.get(id).clone();
        self.push(v, Op::Param(id))
    }

    /// Rows of a parameter table, e.g. an embedding lookup.
    pub fn embed(&mut self, table: ParamId, rows: &[usize]) -> Var {
        let t = self.store.get(table);
        let value = t.select(Axis(0), rows);
        self.push(value, Op::Embed { table, rows: rows.to_vec() })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let v = self.value(a) * f;
        self.push(v, Op::Scale(a, f))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Row-wise layer normalization with learned `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Array1::zeros(xv.nrows());
        for (mut row, is) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row -= mean;
            let var = row.mapv(|d| d * d).sum() / n;
            *is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= *is;
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Row-wise softmax. Entries with `allowed[i][j] == false` get probability zero; every
    /// row must allow at least one entry.
    pub fn softmax(&mut self, x: Var, allowed: Option<&Array2<bool>>) -> Var {
        let mut v = self.value(x).clone();
        for (i, mut row) in v.axis_iter_mut(Axis(0)).enumerate() {
            let ok = |j: usize| allowed.is_none_or(|m| m[[i, j]]);
            let max = row.iter().enumerate().filter(|(j, _)| ok(*j)).map(|(_, x)| *x).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                *x = if ok(j) { (*x - max).exp() } else { 0.0 };
                sum += *x;
            }
            row /= sum;
        }
        self.push(v, Op::Softmax(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + width]).to_owned();
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Var {
        let v = self.value(x).select(Axis(0), rows);
        self.push(v, Op::Gather { x, rows: rows.to_vec() })
    }

    /// Output row `i` is the mean of input rows `groups[i]` (each group non-empty).
    pub fn mean_groups(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let mut v = Mat::zeros((groups.len(), xv.ncols()));
        for (i, g) in groups.iter().enumerate() {
            assert!(!g.is_empty(), "empty pooling group");
            let mut row = v.row_mut(i);
            for &r in g {
                row += &xv.row(r);
            }
            row /= g.len() as f64;
        }
        self.push(v, Op::MeanGroups { x, groups })
    }

    /// `1×n` column-wise maximum; ties go to the first row.
    pub fn col_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut argmax = vec![0; xv.ncols()];
        let mut v = Mat::zeros((1, xv.ncols()));
        for (c, col) in xv.axis_iter(Axis(1)).enumerate() {
            let mut best = 0;
            for (r, x) in col.iter().enumerate() {
                if *x > col[best] {
                    best = r;
                }
            }
            argmax[c] = best;
            v[[0, c]] = col[best];
        }
        self.push(v, Op::ColMax { x, argmax })
    }

    /// Record a scalar `value = f(x)` together with `∂f/∂x`.
    pub fn scalar(&mut self, x: Var, value: f64, dx: Mat) -> Var {
        debug_assert_eq!(dx.dim(), self.value(x).dim());
        self.push(Mat::from_elem((1, 1), value), Op::Scalar { x, dx })
    }

    /// Back-propagate from the `1×1` node `loss`, adding parameter gradients into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut g: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Mat::ones((1, 1)));

        fn acc(g: &mut [Option<Mat>], v: Var, d: Mat) {
            match &mut g[v.0] {
                Some(x) => *x += &d,
                slot @ None => *slot = Some(d),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(go) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.add_dense(*id, &go),
                Op::Embed { table, rows } => {
                    for (r, &row) in rows.iter().enumerate() {
                        grads.add_row(*table, row, go.row(r));
                    }
                }
                Op::MatMul(a, b) => {
                    let da = go.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&go);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = go.dot(self.value(*b));
                    let db = go.t().dot(self.value(*a));
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, go.clone());
                    acc(&mut g, *a, go);
                }
                Op::AddRow(a, b) => {
                    let db = go.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut g, *b, db);
                    acc(&mut g, *a, go);
                }
                Op::Scale(a, f) => acc(&mut g, *a, go * *f),
                Op::Relu(a) => {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut g, *a, go * mask);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let n = xhat.ncols() as f64;
                    acc(&mut g, *gain, (&go * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut g, *bias, go.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &go * self.value(*gain);
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = (&dh * &xh).sum();
                        let is = inv_std[r];
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = is / n * (n * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = &go * y;
                    for (mut row, yr) in dx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                        let dot = row.sum();
                        row.scaled_add(-dot, &yr);
                    }
                    acc(&mut g, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    dx.slice_mut(s![.., *start..*start + go.ncols()]).assign(&go);
                    acc(&mut g, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut g, *p, go.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        acc(&mut g, *p, go.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::Gather { x, rows } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut row = dx.row_mut(src);
                        row += &go.row(r);
                    }
                    acc(&mut g, *x, dx);
                }
                Op::MeanGroups { x, groups } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (i, grp) in groups.iter().enumerate() {
                        let share = &go.row(i) / grp.len() as f64;
                        for &r in grp {
                            let mut row = dx.row_mut(r);
                            row += &share;
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::ColMax { x, argmax } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (c, &r) in argmax.iter().enumerate() {
                        dx[[r, c]] += go[[0, c]];
                    }
                    acc(&mut g, *x, dx);
                }
                Op::Scalar { x, dx } => acc(&mut g, *x, dx * go[[0, 0]]),
            }
        }
    }
}

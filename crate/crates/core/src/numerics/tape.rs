use std::fmt::Write as _;
use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

use super::{scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a named tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Registry of trainable tensors, addressed by [`ParamId`] or by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Coordinate-list sparse matrix used for fixed adjacency products.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn to_dense(&self) -> Tensor {
        let mut m = Array2::zeros((self.rows, self.cols));
        for &(r, c, w) in &self.entries {
            m[[r, c]] += w;
        }
        m
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    /// Elementwise map whose local derivative was stored at forward time.
    Unary {
        input: Var,
        deriv: Tensor,
        name: &'static str,
    },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    /// `out[o] += in[i]` for every `(o, i)` pair of flat (row, col) coordinates.
    Place(Var, Rc<[((usize, usize), (usize, usize))]>),
    MaskedSoftmax(Var),
    SegmentSoftmax(Var, Rc<[usize]>),
    Spmm(Rc<SparseMatrix>, Var),
    RowNormalize(Var, f64),
    Cosine(Var, Var),
    BceWithLogits(Var, Rc<Tensor>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddRow(..) => "add_row",
            Op::AddCol(..) => "add_col",
            Op::MulCol(..) => "mul_col",
            Op::Unary { name, .. } => name,
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::ConcatCols(_) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::Place(..) => "place",
            Op::MaskedSoftmax(_) => "masked_softmax",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::Spmm(..) => "spmm",
            Op::RowNormalize(..) => "row_normalize",
            Op::Cosine(..) => "cosine",
            Op::BceWithLogits(..) => "bce_with_logits",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::AddCol(a, b)
            | Op::MulCol(a, b)
            | Op::Cosine(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _)
            | Op::Place(a, _)
            | Op::MaskedSoftmax(a)
            | Op::SegmentSoftmax(a, _)
            | Op::Spmm(_, a)
            | Op::RowNormalize(a, _)
            | Op::BceWithLogits(a, _) => vec![*a],
            Op::Unary { input, .. } => vec![*input],
            Op::ConcatCols(vs) => vs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in evaluation order; `backward` walks them in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

/// Gradients of one backward pass, keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(p, g)| (*p, g))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.dim(), b.dim()),
        ));
    }
    Ok(())
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { op })
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => other.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable input copied from the store. Registering the same id twice
    /// returns the existing node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", va.dim(), vb.dim()),
            ));
        }
        let out = va.dot(vb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::AddScalar(a))
    }

    /// `a + row` with `row` of shape `1 x C` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", va.dim(), vr.dim())));
        }
        let out = va + vr;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// `a + col` with `col` of shape `R x 1` broadcast over columns.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.ncols() != 1 || vc.nrows() != va.nrows() {
            return Err(Error::shape("add_col", format!("{:?} + {:?}", va.dim(), vc.dim())));
        }
        let out = va + vc;
        Ok(self.push(out, Op::AddCol(a, col)))
    }

    /// Scales each row of `a` by the matching entry of the `R x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.ncols() != 1 || vc.nrows() != va.nrows() {
            return Err(Error::shape("mul_col", format!("{:?} * {:?}", va.dim(), vc.dim())));
        }
        let out = va * vc;
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> (f64, f64)) -> Result<Var> {
        let va = self.value(a);
        let mut out = Array2::zeros(va.dim());
        let mut deriv = Array2::zeros(va.dim());
        Zip::from(&mut out)
            .and(&mut deriv)
            .and(va)
            .for_each(|o, d, &x| {
                let (y, dy) = f(x);
                *o = y;
                *d = dy;
            });
        check_finite(name, &out)?;
        Ok(self.push(
            out,
            Op::Unary {
                input: a,
                deriv,
                name,
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, "relu", |x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) })
            .expect("relu preserves finiteness")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, "leaky_relu", |x| {
            if x >= 0.0 {
                (x, 1.0)
            } else {
                (slope * x, slope)
            }
        })
        .expect("leaky_relu preserves finiteness")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, "sigmoid", |x| {
            let s = super::sigmoid(x);
            (s, s * (1.0 - s))
        })
        .expect("sigmoid is bounded")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, "tanh", |x| {
            let t = x.tanh();
            (t, 1.0 - t * t)
        })
        .expect("tanh is bounded")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", |x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "ln", |x| (x.ln(), 1.0 / x))
    }

    /// Elementwise map with a caller-supplied value and derivative.
    pub fn map(
        &mut self,
        a: Var,
        name: &'static str,
        f: impl Fn(f64) -> (f64, f64),
    ) -> Result<Var> {
        self.unary(a, name, f)
    }

    /// Elementwise map that also reads a same-shaped constant (e.g. frozen noise).
    pub fn map_with(
        &mut self,
        a: Var,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> (f64, f64),
    ) -> Result<Var> {
        let va = self.value(a);
        same_shape(name, va, other)?;
        let mut out = Array2::zeros(va.dim());
        let mut deriv = Array2::zeros(va.dim());
        Zip::from(&mut out)
            .and(&mut deriv)
            .and(va)
            .and(other)
            .for_each(|o, d, &x, &c| {
                let (y, dy) = f(x, c);
                *o = y;
                *d = dy;
            });
        check_finite(name, &out)?;
        Ok(self.push(
            out,
            Op::Unary {
                input: a,
                deriv,
                name,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / v.len().max(1) as f64;
        self.push(scalar(m), Op::Mean(a))
    }

    /// Per-row sums as an `R x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(s, Op::RowSum(a))
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.value(*first).nrows();
        if let Some(bad) = vars.iter().find(|v| self.value(**v).nrows() != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts {} vs {}", rows, self.value(*bad).nrows()),
            ));
        }
        let views: Vec<_> = vars.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::shape("concat_cols", e.to_string()))?;
        Ok(self.push(out, Op::ConcatCols(vars.to_vec())))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.nrows()) {
            return Err(Error::Index {
                index: bad,
                len: va.nrows(),
            });
        }
        let out = va.select(Axis(0), &idx);
        Ok(self.push(out, Op::GatherRows(a, idx)))
    }

    /// `out[idx[r]] += a[r]` into a fresh `n x C` matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<[usize]>, n: usize) -> Result<Var> {
        let va = self.value(a);
        if idx.len() != va.nrows() {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("{} indices for {} rows", idx.len(), va.nrows()),
            ));
        }
        let mut out = Array2::zeros((n, va.ncols()));
        for (r, &o) in idx.iter().enumerate() {
            if o >= n {
                return Err(Error::Index { index: o, len: n });
            }
            let mut dst = out.row_mut(o);
            dst += &va.row(r);
        }
        Ok(self.push(out, Op::ScatterAddRows(a, idx)))
    }

    /// Builds an `shape`-sized matrix with `out[o] += a[i]` for each `(o, i)`.
    pub fn place(
        &mut self,
        a: Var,
        shape: (usize, usize),
        map: Rc<[((usize, usize), (usize, usize))]>,
    ) -> Result<Var> {
        let va = self.value(a);
        let mut out = Array2::zeros(shape);
        for &(o, i) in map.iter() {
            if o.0 >= shape.0 || o.1 >= shape.1 || i.0 >= va.nrows() || i.1 >= va.ncols() {
                return Err(Error::shape("place", format!("coordinate {o:?} <- {i:?}")));
            }
            out[o] += va[i];
        }
        Ok(self.push(out, Op::Place(a, map)))
    }

    /// Row-wise softmax over `mask == true` entries; masked entries are exactly 0.
    pub fn masked_softmax(&mut self, a: Var, mask: &Array2<bool>) -> Result<Var> {
        let va = self.value(a);
        if mask.dim() != va.dim() {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask {:?} vs logits {:?}", mask.dim(), va.dim()),
            ));
        }
        let mut out = Array2::zeros(va.dim());
        for (r, (row, mrow)) in va.rows().into_iter().zip(mask.rows()).enumerate() {
            let max = row
                .iter()
                .zip(mrow.iter())
                .filter(|(_, &m)| m)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Domain(format!(
                    "masked_softmax: row {r} has no unmasked entry"
                )));
            }
            let mut total = 0.0;
            for c in 0..row.len() {
                if mrow[c] {
                    let e = (row[c] - max).exp();
                    out[[r, c]] = e;
                    total += e;
                }
            }
            out.row_mut(r).mapv_inplace(|x| x / total);
        }
        check_finite("masked_softmax", &out)?;
        Ok(self.push(out, Op::MaskedSoftmax(a)))
    }

    /// Softmax of an `E x 1` column within groups sharing a segment id.
    pub fn segment_softmax(&mut self, a: Var, segments: Rc<[usize]>) -> Result<Var> {
        let va = self.value(a);
        if va.ncols() != 1 || segments.len() != va.nrows() {
            return Err(Error::shape(
                "segment_softmax",
                format!("{:?} with {} segment ids", va.dim(), segments.len()),
            ));
        }
        let nseg = segments.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; nseg];
        for (e, &s) in segments.iter().enumerate() {
            max[s] = max[s].max(va[[e, 0]]);
        }
        let mut total = vec![0.0; nseg];
        let mut out = Array2::zeros(va.dim());
        for (e, &s) in segments.iter().enumerate() {
            let x = (va[[e, 0]] - max[s]).exp();
            out[[e, 0]] = x;
            total[s] += x;
        }
        for (e, &s) in segments.iter().enumerate() {
            out[[e, 0]] /= total[s];
        }
        check_finite("segment_softmax", &out)?;
        Ok(self.push(out, Op::SegmentSoftmax(a, segments)))
    }

    /// Sparse-dense product `S * a`.
    pub fn spmm(&mut self, s: Rc<SparseMatrix>, a: Var) -> Result<Var> {
        let va = self.value(a);
        if s.cols != va.nrows() {
            return Err(Error::shape(
                "spmm",
                format!("{}x{} * {:?}", s.rows, s.cols, va.dim()),
            ));
        }
        let mut out = Array2::zeros((s.rows, va.ncols()));
        for &(r, c, w) in &s.entries {
            out.row_mut(r).scaled_add(w, &va.row(c));
        }
        Ok(self.push(out, Op::Spmm(s, a)))
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for mut row in out.rows_mut() {
            let norm = row.dot(&row).sqrt().max(eps);
            row.mapv_inplace(|x| x / norm);
        }
        self.push(out, Op::RowNormalize(a, eps))
    }

    /// Row-wise cosine similarity, `R x 1`. A zero row on either side gives 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("cosine", self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Array2::zeros((va.nrows(), 1));
        for (r, (x, y)) in va.rows().into_iter().zip(vb.rows()).enumerate() {
            let (nx, ny) = (x.dot(&x).sqrt(), y.dot(&y).sqrt());
            if nx > 0.0 && ny > 0.0 {
                out[[r, 0]] = x.dot(&y) / (nx * ny);
            }
        }
        Ok(self.push(out, Op::Cosine(a, b)))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Rc<Tensor>) -> Result<Var> {
        let vx = self.value(logits);
        same_shape("bce_with_logits", vx, &labels)?;
        let n = vx.len().max(1) as f64;
        let total: f64 = vx
            .iter()
            .zip(labels.iter())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(scalar(total / n), Op::BceWithLogits(logits, labels)))
    }

    /// Reverse pass from a `1x1` loss. Every registered parameter receives a
    /// gradient, zero when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).dim() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).dim()),
            ));
        }
        check_finite("loss", self.value(loss))?;
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let name = node.op.name();
            let send = |grads: &mut Vec<Option<Tensor>>, v: Var, contrib: Tensor| -> Result<()> {
                if !self.nodes[v.0].needs_grad {
                    return Ok(());
                }
                check_finite(name, &contrib)?;
                match &mut grads[v.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
                Ok(())
            };
            let val = |v: Var| &self.nodes[v.0].value;
            let wants = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        send(&mut grads, *a, g.dot(&val(*b).t()))?;
                    }
                    if wants(*b) {
                        send(&mut grads, *b, val(*a).t().dot(&g))?;
                    }
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone())?;
                    send(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *b, -&g)?;
                    send(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        send(&mut grads, *a, &g * val(*b))?;
                    }
                    if wants(*b) {
                        send(&mut grads, *b, &g * val(*a))?;
                    }
                }
                Op::Scale(a, c) => send(&mut grads, *a, g * *c)?,
                Op::AddScalar(a) => send(&mut grads, *a, g)?,
                Op::AddRow(a, r) => {
                    if wants(*r) {
                        send(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)))?;
                    }
                    send(&mut grads, *a, g)?;
                }
                Op::AddCol(a, c) => {
                    if wants(*c) {
                        send(&mut grads, *c, g.sum_axis(Axis(1)).insert_axis(Axis(1)))?;
                    }
                    send(&mut grads, *a, g)?;
                }
                Op::MulCol(a, c) => {
                    if wants(*c) {
                        let gc = (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        send(&mut grads, *c, gc)?;
                    }
                    if wants(*a) {
                        send(&mut grads, *a, &g * val(*c))?;
                    }
                }
                Op::Unary { input, deriv, .. } => send(&mut grads, *input, g * deriv)?,
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    send(&mut grads, *a, Array2::from_elem(val(*a).dim(), s))?;
                }
                Op::Mean(a) => {
                    let n = val(*a).len().max(1) as f64;
                    let s = g[[0, 0]] / n;
                    send(&mut grads, *a, Array2::from_elem(val(*a).dim(), s))?;
                }
                Op::RowSum(a) => {
                    let (r, c) = val(*a).dim();
                    let mut out = Array2::zeros((r, c));
                    for i in 0..r {
                        out.row_mut(i).fill(g[[i, 0]]);
                    }
                    send(&mut grads, *a, out)?;
                }
                Op::ConcatCols(vs) => {
                    let mut offset = 0;
                    for v in vs {
                        let c = val(*v).ncols();
                        if wants(*v) {
                            let part = g.slice(ndarray::s![.., offset..offset + c]).to_owned();
                            send(&mut grads, *v, part)?;
                        }
                        offset += c;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let mut out = Array2::zeros(val(*a).dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = out.row_mut(src);
                        dst += &g.row(r);
                    }
                    send(&mut grads, *a, out)?;
                }
                Op::ScatterAddRows(a, idx) => {
                    let out = g.select(Axis(0), idx);
                    send(&mut grads, *a, out)?;
                }
                Op::Place(a, map) => {
                    let mut out = Array2::zeros(val(*a).dim());
                    for &(o, i) in map.iter() {
                        out[i] += g[o];
                    }
                    send(&mut grads, *a, out)?;
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let out = y * &(&g - &dot);
                    send(&mut grads, *a, out)?;
                }
                Op::SegmentSoftmax(a, segs) => {
                    let y = &node.value;
                    let nseg = segs.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; nseg];
                    for (e, &s) in segs.iter().enumerate() {
                        dot[s] += g[[e, 0]] * y[[e, 0]];
                    }
                    let mut out = Array2::zeros(y.dim());
                    for (e, &s) in segs.iter().enumerate() {
                        out[[e, 0]] = y[[e, 0]] * (g[[e, 0]] - dot[s]);
                    }
                    send(&mut grads, *a, out)?;
                }
                Op::Spmm(s, a) => {
                    let mut out = Array2::zeros(val(*a).dim());
                    for &(r, c, w) in &s.entries {
                        out.row_mut(c).scaled_add(w, &g.row(r));
                    }
                    send(&mut grads, *a, out)?;
                }
                Op::RowNormalize(a, eps) => {
                    let x = val(*a);
                    let y = &node.value;
                    let mut out = Array2::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let xr = x.row(r);
                        let norm = xr.dot(&xr).sqrt();
                        let gr = g.row(r);
                        if norm > *eps {
                            let yr = y.row(r);
                            let proj = yr.dot(&gr);
                            let row = (&gr - &(&yr * proj)) / norm;
                            out.row_mut(r).assign(&row);
                        } else {
                            out.row_mut(r).assign(&(&gr / *eps));
                        }
                    }
                    send(&mut grads, *a, out)?;
                }
                Op::Cosine(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let mut ga = Array2::zeros(x.dim());
                    let mut gb = Array2::zeros(y.dim());
                    for r in 0..x.nrows() {
                        let (xr, yr) = (x.row(r), y.row(r));
                        let (nx, ny) = (xr.dot(&xr).sqrt(), yr.dot(&yr).sqrt());
                        if nx == 0.0 || ny == 0.0 {
                            continue;
                        }
                        let s = node.value[[r, 0]];
                        let gr = g[[r, 0]];
                        let da = (&yr / (nx * ny) - &(&xr * (s / (nx * nx)))) * gr;
                        let db = (&xr / (nx * ny) - &(&yr * (s / (ny * ny)))) * gr;
                        ga.row_mut(r).assign(&da);
                        gb.row_mut(r).assign(&db);
                    }
                    if wants(*a) {
                        send(&mut grads, *a, ga)?;
                    }
                    if wants(*b) {
                        send(&mut grads, *b, gb)?;
                    }
                }
                Op::BceWithLogits(a, labels) => {
                    let x = val(*a);
                    let n = x.len().max(1) as f64;
                    let s = g[[0, 0]] / n;
                    let mut out = Array2::zeros(x.dim());
                    Zip::from(&mut out)
                        .and(x)
                        .and(labels.as_ref())
                        .for_each(|o, &xi, &yi| *o = (super::sigmoid(xi) - yi) * s);
                    send(&mut grads, *a, out)?;
                }
            }
        }

        let grads_out = self
            .params
            .iter()
            .map(|&(id, v)| {
                let g = if v.0 <= loss.0 {
                    grads[v.0].take()
                } else {
                    None
                };
                (id, g.unwrap_or_else(|| Array2::zeros(self.value(v).dim())))
            })
            .collect();
        Ok(Gradients { grads: grads_out })
    }

    /// Text listing of the recorded graph, one node per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let parents: Vec<String> = n.op.parents().iter().map(|p| format!("%{}", p.0)).collect();
            let _ = writeln!(
                s,
                "%{i} = {}({}) : {:?}{}",
                match &n.op {
                    Op::Param(id) => format!("param#{}", id.0),
                    op => op.name().to_string(),
                },
                parents.join(", "),
                n.value.dim(),
                if n.needs_grad { " grad" } else { "" }
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", scalar(3.0));
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let y = tape.mul(xv, xv).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut store = ParamStore::new();
        let x = store.add("x", scalar(0.0));
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let y = tape.sigmoid(xv);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap()[[0, 0]], 0.25);
    }

    #[test]
    fn unreached_param_gets_zero_and_constants_are_skipped() {
        let mut store = ParamStore::new();
        let x = store.add("x", scalar(2.0));
        let unused = store.add("unused", array![[1.0, 2.0]]);
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let _ = tape.param(&store, unused);
        let c = tape.constant(scalar(5.0));
        assert!(!tape.requires_grad(c));
        let y = tape.mul(xv, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap()[[0, 0]], 5.0);
        assert_eq!(g.get(unused).unwrap(), &array![[0.0, 0.0]]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let c = tape.constant(array![[1.0, 2.0]]);
        assert!(matches!(tape.backward(c), Err(Error::Shape { .. })));
    }

    #[test]
    fn nan_is_reported_with_op_name() {
        let mut store = ParamStore::new();
        let x = store.add("x", scalar(-1.0));
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let err = tape.ln(xv).unwrap_err();
        assert!(matches!(err, Error::Numeric { op: "ln" }));
    }

    #[test]
    fn masked_softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 1.0, 1.0], [1.0, 0.0, 3.0]]);
        let mask = array![[true, true, false], [true, true, false]];
        let y = tape.masked_softmax(a, &mask).unwrap();
        let v = tape.value(y);
        assert_eq!(v[[0, 0]], 0.5);
        assert_eq!(v[[0, 1]], 0.5);
        assert_eq!(v[[0, 2]], 0.0);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(v[[1, 0]], e / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(v[[1, 0]], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(v[[1, 1]], 0.2689, epsilon = 1e-4);
    }

    #[test]
    fn fully_masked_row_names_row() {
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let mask = array![[true, false], [false, false]];
        let err = tape.masked_softmax(a, &mask).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn leaky_relu_value() {
        let mut tape = Tape::new();
        let a = tape.constant(scalar(-2.0));
        let y = tape.leaky_relu(a, 0.2);
        assert_abs_diff_eq!(tape.scalar(y), -0.4, epsilon = 1e-15);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Array2::zeros((2, 3)));
        let b = tape.constant(Array2::zeros((2, 3)));
        assert!(tape.matmul(a, b).is_err());
        let c = tape.constant(Array2::zeros((3, 2)));
        assert!(tape.add(a, c).is_err());
        assert!(tape.mul_col(a, b).is_err());
    }

    #[test]
    fn dump_lists_nodes() {
        let mut store = ParamStore::new();
        let x = store.add("x", scalar(1.0));
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let _ = tape.sigmoid(xv);
        let d = tape.dump();
        assert!(d.contains("%1 = sigmoid(%0)"), "{d}");
    }

    proptest! {
        #[test]
        fn masked_softmax_rows_are_stochastic_and_shift_invariant(
            logits in proptest::collection::vec(-30.0f64..30.0, 12),
            mask_bits in proptest::collection::vec(any::<bool>(), 12),
            shift in -50.0f64..50.0,
        ) {
            let mut mask = Array2::from_shape_vec((3, 4), mask_bits).unwrap();
            for r in 0..3 { mask[[r, r]] = true; }
            let x = Array2::from_shape_vec((3, 4), logits).unwrap();
            let mut shifted = x.clone();
            for ((r, c), v) in shifted.indexed_iter_mut() { if mask[[r, c]] { *v += shift; } }
            let mut tape = Tape::new();
            let a = tape.constant(x);
            let b = tape.constant(shifted);
            let ya = tape.masked_softmax(a, &mask).unwrap();
            let yb = tape.masked_softmax(b, &mask).unwrap();
            let (ya, yb) = (tape.value(ya).clone(), tape.value(yb).clone());
            for r in 0..3 {
                let mut s = 0.0;
                for c in 0..4 {
                    if mask[[r, c]] { s += ya[[r, c]]; } else { prop_assert_eq!(ya[[r, c]], 0.0); }
                    prop_assert!((ya[[r, c]] - yb[[r, c]]).abs() < 1e-10);
                }
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

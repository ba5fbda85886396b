//! Dynamic reverse-mode tape.
//!
//! A tape is built fresh for every forward pass. Parameter leaves borrow their
//! values from the [`ParamStore`]; everything else is owned by the tape.
//! [`Tape::backward`] returns the gradients of the parameters that were used,
//! leaving the store untouched so several tapes can be reduced in order.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};
use crate::hyperbolic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A contiguous block of rows treated as one sequence by the segment ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Recip(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Square(Var),
    Abs(Var),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Transpose(Var),
    Stack(Vec<(Var, usize)>),
    SelectCol(Var, usize),
    Attention { q: Var, k: Var, v: Var, segments: Vec<Segment>, heads: usize, scale: f64, probs: Vec<f64> },
    SegmentMean(Var, Vec<Segment>),
    BatchedVecMat(Var, Var),
    LogMap(Var, f64),
    PoincareDist(Var, Var, f64),
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, lhs: [usize; 2], rhs: [usize; 2]) -> Error {
    Error::Shape { op, lhs, rhs }
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Const, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same variable.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = self.store.param(id);
        self.nodes.push(Node { value: Value::Borrowed(&p.value), op: Op::Param(id), needs_grad: p.requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // -----------------------------------------------------------------------
    // forward ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([m, k], [k2, n]) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(shape_err("matmul", [m, k], [k2, n]));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::new(sa[0], sa[1], data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `a[m,n] + row[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ([m, n], sr) = (self.shape(a), self.shape(row));
        if sr != [1, n] {
            return Err(shape_err("add_row", [m, n], sr));
        }
        let mut t = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            t.row_mut(i).iter_mut().zip(&r).for_each(|(x, b)| *x += b);
        }
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    /// `a[m,n] * row[1,n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ([m, n], sr) = (self.shape(a), self.shape(row));
        if sr != [1, n] {
            return Err(shape_err("mul_row", [m, n], sr));
        }
        let mut t = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            t.row_mut(i).iter_mut().zip(&r).for_each(|(x, b)| *x *= b);
        }
        Ok(self.push(t, Op::MulRow(a, row), &[a, row]))
    }

    /// `a[m,n] * col[m,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let ([m, n], sc) = (self.shape(a), self.shape(col));
        if sc != [m, 1] {
            return Err(shape_err("mul_col", [m, n], sc));
        }
        let mut t = self.value(a).clone();
        let c = self.value(col).data().to_vec();
        for (i, s) in c.iter().enumerate() {
            t.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        Ok(self.push(t, Op::MulCol(a, col), &[a, col]))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor::new(v.rows(), v.cols(), v.data().iter().map(|x| f(*x)).collect())
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.map(a, |x| x + s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| 1.0 / x);
        self.push(t, Op::Recip(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.map(a, |x| x.clamp(lo, hi));
        self.push(t, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * x);
        self.push(t, Op::Square(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::abs);
        self.push(t, Op::Abs(a), &[a])
    }

    /// `[m,n] -> [m,1]`
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows()).map(|i| v.row(i).iter().sum()).collect();
        self.push(Tensor::col_vector(data), Op::RowSum(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for i in 0..t.rows() {
            softmax_in_place(t.row_mut(i));
        }
        self.push(t, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row standardization (no affine part): mean 0, variance 1.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut t = self.value(a).clone();
        let n = t.cols() as f64;
        let mut inv_std = Vec::with_capacity(t.rows());
        for i in 0..t.rows() {
            let row = t.row_mut(i);
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mu) * is);
            inv_std.push(is);
        }
        self.push(t, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let mut t = Tensor::zeros(n, m);
        for i in 0..m {
            for j in 0..n {
                t.set(j, i, v.get(i, j));
            }
        }
        self.push(t, Op::Transpose(a), &[a])
    }

    /// Stack the given rows (possibly from different variables) into a matrix.
    pub fn stack_rows(&mut self, rows: Vec<(Var, usize)>) -> Result<Var> {
        let cols = match rows.first() {
            Some(&(v, _)) => self.shape(v)[1],
            None => return Err(Error::Empty("stack_rows with no rows".into())),
        };
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &(v, r) in &rows {
            let s = self.shape(v);
            if s[1] != cols || r >= s[0] {
                return Err(shape_err("stack_rows", [r, cols], s));
            }
            data.extend_from_slice(self.value(v).row(r));
        }
        let parents: Vec<Var> = rows.iter().map(|&(v, _)| v).collect();
        let t = Tensor::new(rows.len(), cols, data);
        Ok(self.push(t, Op::Stack(rows), &parents))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.stack_rows(idx.iter().map(|&i| (a, i)).collect())
    }

    /// Column `c` of `a` as `[m,1]`.
    pub fn select_col(&mut self, a: Var, c: usize) -> Result<Var> {
        let [m, n] = self.shape(a);
        if c >= n {
            return Err(shape_err("select_col", [m, n], [0, c]));
        }
        let v = self.value(a);
        let data = (0..m).map(|i| v.get(i, c)).collect();
        Ok(self.push(Tensor::col_vector(data), Op::SelectCol(a, c), &[a]))
    }

    /// Multi-head scaled dot-product attention restricted to each segment.
    ///
    /// Rows of different segments never attend to each other, so encoding a
    /// batch of sequences equals encoding them one at a time.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        let [m, d] = self.shape(q);
        for other in [k, v] {
            if self.shape(other) != [m, d] {
                return Err(shape_err("segment_attention", [m, d], self.shape(other)));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; m * d];
        let mut probs = Vec::new();
        for seg in segments {
            if seg.start + seg.len > m {
                return Err(shape_err("segment_attention", [m, d], [seg.start, seg.len]));
            }
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..seg.len {
                    let qi = &qv[(seg.start + i) * d + c0..(seg.start + i) * d + c0 + dh];
                    let mut row: Vec<f64> = (0..seg.len)
                        .map(|j| {
                            let kj = &kv[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dh];
                            scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()
                        })
                        .collect();
                    softmax_in_place(&mut row);
                    let oi = &mut out[(seg.start + i) * d + c0..(seg.start + i) * d + c0 + dh];
                    for (j, p) in row.iter().enumerate() {
                        let vj = &vv[(seg.start + j) * d + c0..(seg.start + j) * d + c0 + dh];
                        oi.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
                    }
                    probs.extend_from_slice(&row);
                }
            }
        }
        let op = Op::Attention { q, k, v, segments: segments.to_vec(), heads, scale, probs };
        Ok(self.push(Tensor::new(m, d, out), op, &[q, k, v]))
    }

    /// Attention probabilities of an attention node, one `len × len` matrix
    /// per (segment, head) in segment-major order.
    pub fn attention_probs(&self, v: Var) -> Option<Vec<Tensor>> {
        match &self.nodes[v.0].op {
            Op::Attention { segments, heads, probs, .. } => {
                let mut out = Vec::new();
                let mut off = 0;
                for seg in segments {
                    for _ in 0..*heads {
                        let n = seg.len * seg.len;
                        out.push(Tensor::new(seg.len, seg.len, probs[off..off + n].to_vec()));
                        off += n;
                    }
                }
                Some(out)
            }
            _ => None,
        }
    }

    /// Mean of the rows of each segment: `[m,d] -> [segments,d]`.
    pub fn segment_mean(&mut self, a: Var, segments: &[Segment]) -> Result<Var> {
        let [m, d] = self.shape(a);
        let v = self.value(a);
        let mut out = Tensor::zeros(segments.len(), d);
        for (s, seg) in segments.iter().enumerate() {
            if seg.len == 0 || seg.start + seg.len > m {
                return Err(shape_err("segment_mean", [m, d], [seg.start, seg.len]));
            }
            for i in seg.start..seg.start + seg.len {
                out.row_mut(s).iter_mut().zip(v.row(i)).for_each(|(o, x)| *o += x / seg.len as f64);
            }
        }
        Ok(self.push(out, Op::SegmentMean(a, segments.to_vec()), &[a]))
    }

    /// Row-wise vector-matrix product: `out[i] = e[i]ᵀ · M_i` where `M_i` is
    /// row `i` of `mats` reshaped to `d × d` (row-major).
    pub fn batched_vec_mat(&mut self, e: Var, mats: Var) -> Result<Var> {
        let ([n, d], sm) = (self.shape(e), self.shape(mats));
        if sm != [n, d * d] {
            return Err(shape_err("batched_vec_mat", [n, d], sm));
        }
        let (ev, mv) = (self.value(e).data(), self.value(mats).data());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let mi = &mv[i * d * d..(i + 1) * d * d];
            let oi = &mut out[i * d..(i + 1) * d];
            for p in 0..d {
                let ep = ev[i * d + p];
                oi.iter_mut().zip(&mi[p * d..(p + 1) * d]).for_each(|(o, x)| *o += ep * x);
            }
        }
        Ok(self.push(Tensor::new(n, d, out), Op::BatchedVecMat(e, mats), &[e, mats]))
    }

    /// Row-wise logarithmic map at the origin of the Poincaré ball.
    pub fn log_map_rows(&mut self, a: Var, curvature: f64) -> Var {
        let mut t = self.value(a).clone();
        let src = self.value(a);
        for i in 0..t.rows() {
            hyperbolic::log_map_origin_into(src.row(i), curvature, t.row_mut(i));
        }
        self.push(t, Op::LogMap(a, curvature), &[a])
    }

    /// Row-wise Poincaré distance: `[m,d] × [m,d] -> [m,1]`.
    pub fn poincare_distance_rows(&mut self, x: Var, y: Var, curvature: f64) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sx != sy {
            return Err(shape_err("poincare_distance_rows", sx, sy));
        }
        let (xv, yv) = (self.value(x), self.value(y));
        let data = (0..sx[0]).map(|i| hyperbolic::distance_slices(xv.row(i), yv.row(i), curvature)).collect();
        Ok(self.push(Tensor::col_vector(data), Op::PoincareDist(x, y, curvature), &[x, y]))
    }

    /// Row-wise Möbius addition composed from differentiable primitives.
    pub fn mobius_add_rows(&mut self, x: Var, y: Var, c: f64) -> Result<Var> {
        let xy = self.mul(x, y)?;
        let xy = self.row_sum(xy);
        let xx = self.square(x);
        let x2 = self.row_sum(xx);
        let yy = self.square(y);
        let y2 = self.row_sum(yy);
        // a = 1 + 2c<x,y> + c|y|², b = 1 - c|x|²
        let two_xy = self.scale(xy, 2.0 * c);
        let cy2 = self.scale(y2, c);
        let a = self.add(two_xy, cy2)?;
        let a = self.add_scalar(a, 1.0);
        let cx2 = self.scale(x2, -c);
        let b = self.add_scalar(cx2, 1.0);
        // den = 1 + 2c<x,y> + c²|x|²|y|²
        let x2y2 = self.mul(x2, y2)?;
        let x2y2 = self.scale(x2y2, c * c);
        let den = self.add(two_xy, x2y2)?;
        let den = self.add_scalar(den, 1.0);
        let ax = self.mul_col(x, a)?;
        let by = self.mul_col(y, b)?;
        let num = self.add(ax, by)?;
        let inv = self.recip(den);
        self.mul_col(num, inv)
    }

    // -----------------------------------------------------------------------
    // backward

    /// Reverse pass from a scalar `loss`. Returns gradients for every
    /// parameter leaf that influenced the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let s = self.shape(loss);
        if s != [1, 1] {
            return Err(Error::Shape { op: "backward (loss must be scalar)", lhs: s, rhs: [1, 1] });
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads, &mut out);
        }
        out.entries.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let node = &self.nodes[i];
        let y = self.value(Var(i));
        let [m, n] = y.shape();

        // Accumulate into a parent's gradient buffer if it wants one.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.needs(v) {
                    let len = self.value(v).len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }

        match &node.op {
            Op::Const => {}
            Op::Param(id) => out.entries.push((*id, g.to_vec())),
            Op::MatMul(a, b) => {
                let k = self.shape(*a)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = slot!(*a) {
                    matmul_bt_acc(g, bv, ga, m, n, k);
                }
                if let Some(gb) = slot!(*b) {
                    matmul_at_acc(av, g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = slot!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::AddRow(a, r) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gr) = slot!(*r) {
                    for row in g.chunks(n) {
                        gr.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (self.value(*a).data(), self.value(*r).data());
                if let Some(ga) = slot!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * rv[j % n];
                    }
                }
                if let Some(gr) = slot!(*r) {
                    for j in 0..g.len() {
                        gr[j % n] += g[j] * av[j];
                    }
                }
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (self.value(*a).data(), self.value(*c).data());
                if let Some(ga) = slot!(*a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * cv[j / n];
                    }
                }
                if let Some(gc) = slot!(*c) {
                    for j in 0..g.len() {
                        gc[j / n] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Recip(a) => {
                let yv = y.data();
                if let Some(ga) = slot!(*a) {
                    for j in 0..g.len() {
                        ga[j] -= g[j] * yv[j] * yv[j];
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = slot!(*a) {
                    for j in 0..g.len() {
                        if av[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).data();
                if let Some(ga) = slot!(*a) {
                    for j in 0..g.len() {
                        if av[j] >= *lo && av[j] <= *hi {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = slot!(*a) {
                    for j in 0..g.len() {
                        ga[j] += 2.0 * av[j] * g[j];
                    }
                }
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = slot!(*a) {
                    for j in 0..g.len() {
                        ga[j] += av[j].signum() * g[j] * if av[j] == 0.0 { 0.0 } else { 1.0 };
                    }
                }
            }
            Op::RowSum(a) => {
                let cols = self.shape(*a)[1];
                if let Some(ga) = slot!(*a) {
                    for (j, x) in ga.iter_mut().enumerate() {
                        *x += g[j / cols];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let len = self.value(*a).len() as f64;
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / len);
                }
            }
            Op::SoftmaxRows(a) => {
                let yv = y.data();
                if let Some(ga) = slot!(*a) {
                    for r in 0..m {
                        let (yr, gr) = (&yv[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                        for j in 0..n {
                            ga[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let yv = y.data();
                if let Some(gx) = slot!(*x) {
                    let nf = n as f64;
                    for r in 0..m {
                        let (yr, gr) = (&yv[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let mg = gr.iter().sum::<f64>() / nf;
                        let mgy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / nf;
                        for j in 0..n {
                            gx[r * n + j] += inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = slot!(*a) {
                    // y is [m,n] = aᵀ, a is [n,m]
                    for r in 0..m {
                        for c in 0..n {
                            ga[c * m + r] += g[r * n + c];
                        }
                    }
                }
            }
            Op::Stack(rows) => {
                for (out_row, &(v, r)) in rows.iter().enumerate() {
                    if let Some(gv) = slot!(v) {
                        let src = &g[out_row * n..(out_row + 1) * n];
                        gv[r * n..(r + 1) * n].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::SelectCol(a, c) => {
                let cols = self.shape(*a)[1];
                if let Some(ga) = slot!(*a) {
                    for r in 0..m {
                        ga[r * cols + c] += g[r];
                    }
                }
            }
            Op::Attention { q, k, v, segments, heads, scale, probs } => {
                self.attention_backward(g, *q, *k, *v, segments, *heads, *scale, probs, grads);
            }
            Op::SegmentMean(a, segments) => {
                if let Some(ga) = slot!(*a) {
                    for (s, seg) in segments.iter().enumerate() {
                        let w = 1.0 / seg.len as f64;
                        for i in seg.start..seg.start + seg.len {
                            for j in 0..n {
                                ga[i * n + j] += w * g[s * n + j];
                            }
                        }
                    }
                }
            }
            Op::BatchedVecMat(e, mats) => {
                let d = n;
                let (ev, mv) = (self.value(*e).data(), self.value(*mats).data());
                if let Some(ge) = slot!(*e) {
                    for i in 0..m {
                        let gi = &g[i * d..(i + 1) * d];
                        for p in 0..d {
                            let row = &mv[i * d * d + p * d..i * d * d + (p + 1) * d];
                            ge[i * d + p] += row.iter().zip(gi).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(gm) = slot!(*mats) {
                    for i in 0..m {
                        let gi = &g[i * d..(i + 1) * d];
                        for p in 0..d {
                            let ep = ev[i * d + p];
                            let dst = &mut gm[i * d * d + p * d..i * d * d + (p + 1) * d];
                            dst.iter_mut().zip(gi).for_each(|(x, y)| *x += ep * y);
                        }
                    }
                }
            }
            Op::LogMap(a, c) => {
                let av = self.value(*a);
                if let Some(ga) = slot!(*a) {
                    let sc = c.sqrt();
                    for r in 0..m {
                        let x = av.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let norm = hyperbolic::sq_norm(x).sqrt();
                        let s = (sc * norm).min(1.0 - 1e-12);
                        let (gs, dgs_over_s) = if s < 1e-4 {
                            (1.0 + s * s / 3.0, 2.0 / 3.0 + 0.8 * s * s)
                        } else {
                            let at = s.atanh();
                            (at / s, (s / (1.0 - s * s) - at) / (s * s * s))
                        };
                        let coeff = c * dgs_over_s;
                        let xg: f64 = x.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga[r * n + j] += gs * gr[j] + coeff * xg * x[j];
                        }
                    }
                }
            }
            Op::PoincareDist(x, yv, c) => {
                let (xt, yt) = (self.value(*x), self.value(*yv));
                let d = xt.cols();
                let mut gx_all = vec![0.0; xt.len()];
                let mut gy_all = vec![0.0; yt.len()];
                for r in 0..m {
                    let (xr, yr) = (xt.row(r), yt.row(r));
                    let u: f64 = xr.iter().zip(yr).map(|(a, b)| (a - b) * (a - b)).sum();
                    if u <= 0.0 || g[r] == 0.0 {
                        continue;
                    }
                    let a = 1.0 - c * hyperbolic::sq_norm(xr);
                    let b = 1.0 - c * hyperbolic::sq_norm(yr);
                    let t = 2.0 * c * u / (a * b);
                    let dd_dz = 1.0 / (c.sqrt() * (t * (2.0 + t)).sqrt());
                    let k = g[r] * dd_dz * 4.0 * c / (a * b);
                    for j in 0..d {
                        gx_all[r * d + j] = k * ((xr[j] - yr[j]) + c * u * xr[j] / a);
                        gy_all[r * d + j] = k * ((yr[j] - xr[j]) + c * u * yr[j] / b);
                    }
                }
                if let Some(gx) = slot!(*x) {
                    gx.iter_mut().zip(&gx_all).for_each(|(a, b)| *a += b);
                }
                if let Some(gy) = slot!(*yv) {
                    gy.iter_mut().zip(&gy_all).for_each(|(a, b)| *a += b);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        scale: f64,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let [m, d] = self.shape(q);
        let dh = d / heads;
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; m * d];
        let mut gk = vec![0.0; m * d];
        let mut gvv = vec![0.0; m * d];
        let mut off = 0;
        for seg in segments {
            let len = seg.len;
            for h in 0..heads {
                let c0 = h * dh;
                let p = &probs[off..off + len * len];
                off += len * len;
                let at = |i: usize| (seg.start + i) * d + c0;
                for i in 0..len {
                    let gi = &g[at(i)..at(i) + dh];
                    // dV and dP
                    let mut dp = vec![0.0; len];
                    for j in 0..len {
                        let pij = p[i * len + j];
                        let vj = &vv[at(j)..at(j) + dh];
                        dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        gvv[at(j)..at(j) + dh].iter_mut().zip(gi).for_each(|(x, y)| *x += pij * y);
                    }
                    let dot: f64 = (0..len).map(|j| p[i * len + j] * dp[j]).sum();
                    for j in 0..len {
                        let ds = p[i * len + j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            gq[at(i) + c] += ds * kv[at(j) + c];
                            gk[at(j) + c] += ds * qv[at(i) + c];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gvv)] {
            if self.needs(var) {
                let dst = grads[var.0].get_or_insert_with(|| vec![0.0; m * d]);
                dst.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation applied
//! to its [`Var`] handles. Parameters are read in place from the store, so a
//! graph is cheap to build. [`Graph::backward`] walks the tape once in
//! reverse and returns the gradient of a scalar with respect to every
//! parameter that took part in it.

use std::collections::HashMap;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MatKind {
    Nn,
    Nt,
    Tn,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var, MatKind),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleVar(Var, Var),
    Recip(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LogSoftmaxPick {
        x: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Select(Var, Vec<usize>),
    MeanRows(Var),
    SumAll(Var),
    Transpose(Var),
    NormalizeRows(Var, Vec<T>),
    Reshape(Var),
}

struct Node<T> {
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by parameter.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    by_param: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.by_param.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.by_param
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    track: bool,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
            param_vars: HashMap::new(),
            track: true,
        }
    }

    /// A graph that never records gradient requirements; backward through it
    /// yields nothing.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        let mut g = Self::new(params);
        g.track = false;
        g
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = self.track && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn out(&self, rows: usize, cols: usize, data: Vec<T>) -> Tensor<T> {
        Tensor::new(vec![rows, cols], data).expect("consistent shape")
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let t = if t.shape().len() == 2 {
            t
        } else {
            let (r, c) = (t.rows(), t.cols());
            self.out(r, c, t.into_data())
        };
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Var {
        let t = self.out(rows, cols, data);
        self.constant(t)
    }

    /// Copy of `v`'s value with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.track,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn matmul_kind(&mut self, a: Var, b: Var, kind: MatKind) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k, n, ok) = match kind {
            MatKind::Nn => (ar, ac, bc, ac == br),
            MatKind::Nt => (ar, ac, br, ac == bc),
            MatKind::Tn => (ac, ar, bc, ar == br),
        };
        if !ok {
            return Err(Error::shape(
                "matmul",
                format!("{ar}x{ac} with {br}x{bc} ({kind:?})"),
            ));
        }
        let mut data = vec![T::zero(); m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            match kind {
                MatKind::Nn => gemm_nn(av, bv, &mut data, m, k, n),
                MatKind::Nt => gemm_nt(av, bv, &mut data, m, k, n),
                MatKind::Tn => gemm_tn(av, bv, &mut data, m, k, n),
            }
        }
        let t = self.out(m, n, data);
        Ok(self.push(t, Op::MatMul(a, b, kind), &[a, b]))
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_kind(a, b, MatKind::Nn)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_kind(a, b, MatKind::Nt)
    }

    /// `aᵀ · b`
    pub fn matmul_at(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_kind(a, b, MatKind::Tn)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn zip_with(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let name = match op {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            _ => "mul",
        };
        let (r, c) = self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = self.out(r, c, data);
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// Adds row vector `b` (1×n) to every row of `a` (m×n).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(b) != (1, c) {
            return Err(Error::shape(
                "add_row",
                format!("{r}x{c} + {:?}", self.shape(b)),
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, &y) in row.iter_mut().zip(&bias) {
                *x += y;
            }
        }
        let t = self.out(r, c, data);
        Ok(self.push(t, Op::AddRow(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().map(|&x| x * s).collect();
        let t = self.out(r, c, data);
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// Multiplies every element of `a` by the 1×1 variable `s`.
    pub fn scale_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::shape("scale_var", format!("{:?}", self.shape(s))));
        }
        let sv = self.scalar(s);
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().map(|&x| x * sv).collect();
        let t = self.out(r, c, data);
        Ok(self.push(t, Op::ScaleVar(a, s), &[a, s]))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.map(a, Op::Recip(a), |x| T::one() / x)
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let (r, c) = self.shape(a);
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let t = self.out(r, c, data);
        self.push(t, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), |x| x.ln())
    }

    /// Row-wise softmax. `mask` (row-major, same size as `a`) marks entries
    /// that take part; masked entries get exactly zero weight.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c == 0 {
            return Err(Error::Empty("softmax over an empty axis".into()));
        }
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::shape("softmax_rows", "mask size"));
            }
        }
        let mut data = self.value(a).data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let m = mask.map(|m| &m[i * c..(i + 1) * c]);
            kernels::softmax_in_place(row, m);
        }
        let t = self.out(r, c, data);
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c == 0 {
            return Err(Error::Empty("log-softmax over an empty axis".into()));
        }
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = kernels::logsumexp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = self.out(r, c, data);
        Ok(self.push(t, Op::LogSoftmax(a), &[a]))
    }

    /// Row-wise log-sum-exp, m×n → m×1.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c == 0 {
            return Err(Error::Empty("log-sum-exp over an empty axis".into()));
        }
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .map(kernels::logsumexp)
            .collect();
        let t = self.out(r, 1, data);
        Ok(self.push(t, Op::LogSumExp(a), &[a]))
    }

    /// `Σ_r w_r · log_softmax(a_r)[targets_r]` as a 1×1 value.
    pub fn log_softmax_pick(&mut self, a: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if targets.len() != r || weights.len() != r {
            return Err(Error::shape(
                "log_softmax_pick",
                format!("{r} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("log_softmax_pick", format!("target {t} >= {c}")));
        }
        let mut total = T::zero();
        for (i, row) in self.value(a).data().chunks(c).enumerate() {
            if weights[i] != T::zero() {
                total += weights[i] * (row[targets[i]] - kernels::logsumexp(row));
            }
        }
        let t = self.out(1, 1, vec![total]);
        Ok(self.push(
            t,
            Op::LogSoftmaxPick {
                x: a,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            &[a],
        ))
    }

    /// Per-row layer normalization with learned gain and bias (both 1×n).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::shape("layer_norm", format!("width {c}")));
        }
        let eps = T::lit(1e-5);
        let n = T::lit(c as f64);
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().cloned().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                data[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = self.out(r, c, data);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {c}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let t = self.out(r, len, data);
        Ok(self.push(t, Op::SliceCols(a, start), &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {r}")));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let t = self.out(len, c, data);
        Ok(self.push(t, Op::SliceRows(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.shape(p).0)
            .ok_or_else(|| Error::Empty("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = self.out(r, total, data);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.shape(p).1)
            .ok_or_else(|| Error::Empty("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.shape(p).1 != c) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        let mut r = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            r += self.shape(p).0;
        }
        let t = self.out(r, c, data);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `idx` of `a`, repeats allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(i) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {i} of {r}")));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let t = self.out(idx.len(), c, data);
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// Flat elements `idx` of `a` as a 1×len row.
    pub fn select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if let Some(i) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("select", format!("element {i} of {n}")));
        }
        let src = self.value(a).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let t = self.out(1, idx.len(), data);
        Ok(self.push(t, Op::Select(a, idx.to_vec()), &[a]))
    }

    /// Column means, m×n → 1×n.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r == 0 {
            return Err(Error::Empty("mean over zero rows".into()));
        }
        let mut data = vec![T::zero(); c];
        for row in self.value(a).data().chunks(c) {
            for (d, &x) in data.iter_mut().zip(row) {
                *d += x;
            }
        }
        let inv = T::one() / T::lit(r as f64);
        data.iter_mut().for_each(|x| *x *= inv);
        let t = self.out(1, c, data);
        Ok(self.push(t, Op::MeanRows(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().cloned().sum();
        let t = self.out(1, 1, vec![s]);
        self.push(t, Op::SumAll(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let t = self.out(c, r, data);
        self.push(t, Op::Transpose(a), &[a])
    }

    /// Scales each row to unit L2 norm (norms floored at 1e-12).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let floor = T::lit(1e-12);
        let mut data = self.value(a).data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(floor);
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let t = self.out(r, c, data);
        self.push(t, Op::NormalizeRows(a, norms), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(Error::shape("reshape", format!("{r}x{c} -> {rows}x{cols}")));
        }
        let t = self.out(rows, cols, self.value(a).data().to_vec());
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Gradient of the 1×1 value `loss` with respect to every parameter that
    /// contributed to it.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", "loss must be 1x1"));
        }
        let mut by_param: Vec<Option<Vec<T>>> = vec![None; self.params.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Grads { by_param });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(Var(i), &node.op, &dy, &mut grads, &mut by_param);
        }
        Ok(Grads { by_param })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc_add(&self, grads: &mut [Option<Vec<T>>], v: Var, dy: &[T], sign: T) {
        if let Some(g) = self.acc(grads, v) {
            for (a, &d) in g.iter_mut().zip(dy) {
                *a += sign * d;
            }
        }
    }

    fn propagate(
        &self,
        out: Var,
        op: &Op<T>,
        dy: &[T],
        grads: &mut [Option<Vec<T>>],
        by_param: &mut [Option<Vec<T>>],
    ) {
        let one = T::one();
        match op {
            Op::Leaf => {}
            Op::Param(id) => match &mut by_param[id.0] {
                Some(g) => g.iter_mut().zip(dy).for_each(|(a, &d)| *a += d),
                slot => *slot = Some(dy.to_vec()),
            },
            Op::MatMul(a, b, kind) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (ar, ac) = self.shape(*a);
                let (br, bc) = self.shape(*b);
                match kind {
                    MatKind::Nn => {
                        let (m, k, n) = (ar, ac, bc);
                        if let Some(ga) = self.acc(grads, *a) {
                            gemm_nt(dy, bv, ga, m, n, k);
                        }
                        if let Some(gb) = self.acc(grads, *b) {
                            gemm_tn(av, dy, gb, k, m, n);
                        }
                    }
                    MatKind::Nt => {
                        let (m, k, n) = (ar, ac, br);
                        if let Some(ga) = self.acc(grads, *a) {
                            gemm_nn(dy, bv, ga, m, n, k);
                        }
                        if let Some(gb) = self.acc(grads, *b) {
                            gemm_tn(dy, av, gb, n, m, k);
                        }
                    }
                    MatKind::Tn => {
                        let (m, k, n) = (ac, ar, bc);
                        if let Some(ga) = self.acc(grads, *a) {
                            gemm_nt(bv, dy, ga, k, n, m);
                        }
                        if let Some(gb) = self.acc(grads, *b) {
                            gemm_nn(av, dy, gb, k, m, n);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_add(grads, *a, dy, one);
                self.acc_add(grads, *b, dy, one);
            }
            Op::Sub(a, b) => {
                self.acc_add(grads, *a, dy, one);
                self.acc_add(grads, *b, dy, -one);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = self.acc(grads, *a) {
                    for ((g, &d), &y) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d * y;
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * x;
                    }
                }
            }
            Op::AddRow(a, b) => {
                self.acc_add(grads, *a, dy, one);
                let c = self.shape(*b).1;
                if let Some(g) = self.acc(grads, *b) {
                    for row in dy.chunks(c) {
                        for (g, &d) in g.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Scale(a, s) => self.acc_add(grads, *a, dy, *s),
            Op::ScaleVar(a, s) => {
                let sv = self.scalar(*s);
                self.acc_add(grads, *a, dy, sv);
                let av = self.value(*a).data();
                if let Some(g) = self.acc(grads, *s) {
                    g[0] += av.iter().zip(dy).map(|(&x, &d)| x * d).sum::<T>();
                }
            }
            Op::Recip(a) => {
                let xv = self.value(*a).data();
                if let Some(g) = self.acc(grads, *a) {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(xv) {
                        *g -= d / (x * x);
                    }
                }
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                if let Some(g) = self.acc(grads, *a) {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(xv) {
                        if x > T::zero() {
                            *g += d;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                let yv = self.value(out).data();
                if let Some(g) = self.acc(grads, *a) {
                    for ((g, &d), &y) in g.iter_mut().zip(dy).zip(yv) {
                        *g += d * y;
                    }
                }
            }
            Op::Log(a) => {
                let xv = self.value(*a).data();
                if let Some(g) = self.acc(grads, *a) {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(xv) {
                        *g += d / x;
                    }
                }
            }
            Op::Softmax(a) => {
                let c = self.shape(*a).1;
                let yv = self.value(out).data();
                if let Some(g) = self.acc(grads, *a) {
                    for ((g, d), y) in g.chunks_mut(c).zip(dy.chunks(c)).zip(yv.chunks(c)) {
                        let s: T = d.iter().zip(y).map(|(&d, &y)| d * y).sum();
                        for j in 0..c {
                            g[j] += y[j] * (d[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = self.shape(*a).1;
                let yv = self.value(out).data();
                if let Some(g) = self.acc(grads, *a) {
                    for ((g, d), y) in g.chunks_mut(c).zip(dy.chunks(c)).zip(yv.chunks(c)) {
                        let s: T = d.iter().cloned().sum();
                        for j in 0..c {
                            g[j] += d[j] - y[j].exp() * s;
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                let c = self.shape(*a).1;
                let xv = self.value(*a).data();
                let yv = self.value(out).data();
                if let Some(g) = self.acc(grads, *a) {
                    for (i, (g, x)) in g.chunks_mut(c).zip(xv.chunks(c)).enumerate() {
                        for j in 0..c {
                            g[j] += dy[i] * (x[j] - yv[i]).exp();
                        }
                    }
                }
            }
            Op::LogSoftmaxPick {
                x,
                targets,
                weights,
            } => {
                let c = self.shape(*x).1;
                let xv = self.value(*x).data();
                if let Some(g) = self.acc(grads, *x) {
                    for (i, (g, row)) in g.chunks_mut(c).zip(xv.chunks(c)).enumerate() {
                        let w = weights[i] * dy[0];
                        if w == T::zero() {
                            continue;
                        }
                        let lse = kernels::logsumexp(row);
                        for j in 0..c {
                            g[j] -= w * (row[j] - lse).exp();
                        }
                        g[targets[i]] += w;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = self.shape(*x).1;
                let gv = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for (d, h) in dy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += d[j] * h[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for d in dy.chunks(c) {
                        for j in 0..c {
                            gb[j] += d[j];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let n = T::lit(c as f64);
                    for (i, (gx, (d, h))) in gx
                        .chunks_mut(c)
                        .zip(dy.chunks(c).zip(xhat.chunks(c)))
                        .enumerate()
                    {
                        let mut mean_dh = T::zero();
                        let mut mean_dhh = T::zero();
                        for j in 0..c {
                            let dh = d[j] * gv[j];
                            mean_dh += dh;
                            mean_dhh += dh * h[j];
                        }
                        mean_dh /= n;
                        mean_dhh /= n;
                        for j in 0..c {
                            let dh = d[j] * gv[j];
                            gx[j] += rstd[i] * (dh - mean_dh - h[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.shape(*a).1;
                let len = self.shape(out).1;
                if let Some(g) = self.acc(grads, *a) {
                    for (i, d) in dy.chunks(len).enumerate() {
                        for (g, &d) in g[i * c + start..i * c + start + len].iter_mut().zip(d) {
                            *g += d;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = self.shape(*a).1;
                if let Some(g) = self.acc(grads, *a) {
                    for (g, &d) in g[start * c..start * c + dy.len()].iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.shape(out).1;
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if let Some(g) = self.acc(grads, p) {
                        for (i, row) in dy.chunks(total).enumerate() {
                            for (g, &d) in g[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&row[offset..offset + w])
                            {
                                *g += d;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc_add(grads, p, &dy[offset..offset + n], one);
                    offset += n;
                }
            }
            Op::GatherRows(a, idx) => {
                let c = self.shape(*a).1;
                if let Some(g) = self.acc(grads, *a) {
                    for (&r, d) in idx.iter().zip(dy.chunks(c)) {
                        for (g, &d) in g[r * c..(r + 1) * c].iter_mut().zip(d) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Select(a, idx) => {
                if let Some(g) = self.acc(grads, *a) {
                    for (&i, &d) in idx.iter().zip(dy) {
                        g[i] += d;
                    }
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let inv = one / T::lit(r as f64);
                if let Some(g) = self.acc(grads, *a) {
                    for row in g.chunks_mut(c) {
                        for (g, &d) in row.iter_mut().zip(dy) {
                            *g += d * inv;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(g) = self.acc(grads, *a) {
                    g.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.shape(*a);
                if let Some(g) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[j * r + i];
                        }
                    }
                }
            }
            Op::NormalizeRows(a, norms) => {
                let c = self.shape(*a).1;
                let yv = self.value(out).data();
                if let Some(g) = self.acc(grads, *a) {
                    for (i, (g, (d, y))) in g
                        .chunks_mut(c)
                        .zip(dy.chunks(c).zip(yv.chunks(c)))
                        .enumerate()
                    {
                        let s: T = d.iter().zip(y).map(|(&d, &y)| d * y).sum();
                        for j in 0..c {
                            g[j] += (d[j] - y[j] * s) / norms[i];
                        }
                    }
                }
            }
            Op::Reshape(a) => self.acc_add(grads, *a, dy, one),
        }
    }
}

//! Reverse-mode differentiation over a tape of matrix primitives.
//!
//! Each primitive computes its forward value eagerly and records what its
//! backward rule needs. [`Tape::backward`] walks the records in reverse and
//! accumulates `d loss / d input` for every node that depends on a leaf.

use std::sync::Arc;

use super::ledger::{BufferId, MemoryLedger};
use super::Tensor;
use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Tanh(Var),
    ScaleRows(Var, Var),
    SpmmMean(Var, Arc<SparseGraph>),
    SegmentMean(Var, Vec<usize>),
    SegmentMax {
        input: Var,
        offsets: Vec<usize>,
        argmax: Vec<usize>,
    },
    ConcatCols(Var, Var),
    Sum(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    VecDot(Var, Var),
    Normalize {
        input: Var,
        norm: T,
        guarded: bool,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::ScaleRows(..) => "scale_rows",
            Op::SpmmMean(..) => "spmm_mean",
            Op::SegmentMean(..) => "segment_mean",
            Op::SegmentMax { .. } => "segment_max",
            Op::ConcatCols(..) => "concat_cols",
            Op::Sum(..) => "sum",
            Op::GatherRows(..) => "gather_rows",
            Op::VecDot(..) => "vecdot",
            Op::Normalize { .. } => "normalize",
            Op::SoftmaxXent { .. } => "softmax_xent",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], kept for leaves only.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Distance of the recorded forward pass from the nearest non-smooth point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KinkMargin<T> {
    /// Smallest `|x|` over every ReLU input.
    pub relu: T,
    /// Smallest gap between the largest and second-largest entry of any
    /// max-reduced column, ignoring ties between exact zeros.
    pub max: T,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    ledger: Option<MemoryLedger>,
    scope: String,
    seen_graphs: Vec<Arc<SparseGraph>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            ledger: None,
            scope: String::new(),
            seen_graphs: Vec::new(),
        }
    }

    /// A tape that declares every buffer it creates to `ledger`.
    pub fn with_ledger(ledger: MemoryLedger) -> Self {
        Self {
            ledger: Some(ledger),
            ..Self::new()
        }
    }

    pub fn ledger(&self) -> Option<&MemoryLedger> {
        self.ledger.as_ref()
    }

    pub fn ledger_mut(&mut self) -> Option<&mut MemoryLedger> {
        self.ledger.as_mut()
    }

    pub fn take_ledger(&mut self) -> Option<MemoryLedger> {
        self.ledger.take()
    }

    /// Prefix for buffer names in the ledger breakdown.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn record(&mut self, kind: &str, floats: usize, indices: usize) -> Option<BufferId> {
        let name = if self.scope.is_empty() {
            kind.to_string()
        } else {
            format!("{}/{kind}", self.scope)
        };
        self.ledger.as_mut().map(|l| l.alloc(name, floats, indices))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let saved_idx = match &op {
            Op::SegmentMean(_, offs) => offs.len(),
            Op::SegmentMax {
                offsets, argmax, ..
            } => offsets.len() + argmax.len(),
            Op::GatherRows(_, idx) => idx.len(),
            Op::SoftmaxXent { labels, .. } => labels.len(),
            _ => 0,
        };
        let saved_floats = match &op {
            Op::SoftmaxXent { probs, .. } => probs.len(),
            _ => 0,
        };
        if self.ledger.is_some() {
            let kind = op.name();
            self.record(kind, value.len(), 0);
            if saved_idx + saved_floats > 0 {
                self.record(&format!("{kind}:saved"), saved_floats, saved_idx);
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", x.shape(), y.shape()),
            ));
        }
        let mut out = x.clone();
        out.add_assign(y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `a + 1 b`: adds the `1 x m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if y.rows() != 1 || y.cols() != x.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", x.shape(), y.shape()),
            ));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(y.values()) {
                *o = *o + b;
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::tanh);
        let rg = self.needs(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Multiplies row `i` of `a` by the scalar `v[i]`; `v` is `n x 1`.
    pub fn scale_rows(&mut self, a: Var, v: Var) -> Result<Var> {
        let (x, s) = (self.value(a), self.value(v));
        if s.cols() != 1 || s.rows() != x.rows() {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} scaled by {:?}", x.shape(), s.shape()),
            ));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            let k = s.values()[r];
            out.row_mut(r).iter_mut().for_each(|o| *o = *o * k);
        }
        let rg = self.needs(&[a, v]);
        Ok(self.push(out, Op::ScaleRows(a, v), rg))
    }

    /// Declares a graph's CSR arrays to the ledger, once per graph.
    pub fn record_graph(&mut self, graph: &Arc<SparseGraph>) {
        if self.ledger.is_some() && !self.seen_graphs.iter().any(|g| Arc::ptr_eq(g, graph)) {
            self.seen_graphs.push(Arc::clone(graph));
            self.record("csr", 0, graph.index_len());
        }
    }

    /// `D̂⁻¹ Â X` over `graph`.
    pub fn spmm_mean(&mut self, graph: &Arc<SparseGraph>, x: Var) -> Result<Var> {
        let out = graph.spmm_mean(self.value(x))?;
        self.record_graph(graph);
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::SpmmMean(x, Arc::clone(graph)), rg))
    }

    /// Column-wise mean within each row segment; `offsets` has one more entry
    /// than there are segments. Output is `segments x cols`.
    pub fn segment_mean(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let x = self.value(a);
        check_segments("segment_mean", x, offsets)?;
        let f = x.cols();
        let mut out = Tensor::zeros(offsets.len() - 1, f);
        for (s, w) in offsets.windows(2).enumerate() {
            let inv = T::one() / T::of((w[1] - w[0]) as f64);
            let acc = out.row_mut(s);
            for r in w[0]..w[1] {
                for (o, &v) in acc.iter_mut().zip(x.row(r)) {
                    *o = *o + v;
                }
            }
            acc.iter_mut().for_each(|o| *o = *o * inv);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::SegmentMean(a, offsets.to_vec()), rg))
    }

    /// Column-wise max within each row segment. Ties go to the first row.
    pub fn segment_max(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let x = self.value(a);
        check_segments("segment_max", x, offsets)?;
        let f = x.cols();
        let segs = offsets.len() - 1;
        let mut out = Tensor::zeros(segs, f);
        let mut argmax = vec![0usize; segs * f];
        for (s, w) in offsets.windows(2).enumerate() {
            for c in 0..f {
                let mut best = w[0];
                for r in w[0] + 1..w[1] {
                    if x.get(r, c) > x.get(best, c) {
                        best = r;
                    }
                }
                argmax[s * f + c] = best;
                out.set(s, c, x.get(best, c));
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(
            out,
            Op::SegmentMax {
                input: a,
                offsets: offsets.to_vec(),
                argmax,
            },
            rg,
        ))
    }

    /// Mean over all rows, `1 x cols`.
    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).rows();
        self.segment_mean(a, &[0, n])
    }

    /// Max over all rows, `1 x cols`.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).rows();
        self.segment_max(a, &[0, n])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} | {:?}", x.shape(), y.shape()),
            ));
        }
        let mut values = Vec::with_capacity(x.len() + y.len());
        for r in 0..x.rows() {
            values.extend_from_slice(x.row(r));
            values.extend_from_slice(y.row(r));
        }
        let out = Tensor::from_vec(x.rows(), x.cols() + y.cols(), values)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    pub fn sum_tensors(&mut self, vars: &[Var]) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::Invalid("sum_tensors: empty list".into()))?;
        let mut out = self.value(*first).clone();
        for v in &vars[1..] {
            let t = self.value(*v);
            if t.shape() != out.shape() {
                return Err(Error::shape(
                    "sum_tensors",
                    format!("{:?} + {:?}", out.shape(), t.shape()),
                ));
            }
            out.add_assign(t);
        }
        let rg = self.needs(vars);
        Ok(self.push(out, Op::Sum(vars.to_vec()), rg))
    }

    /// Rows `idx[0], idx[1], ...` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of {} rows", x.rows()),
            ));
        }
        let out = x.select_rows(idx);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// `a p` for an `n x f` matrix and a length-`f` vector stored as `f x 1`
    /// or `1 x f`; the result is `n x 1`.
    pub fn vecdot(&mut self, a: Var, p: Var) -> Result<Var> {
        let (x, w) = (self.value(a), self.value(p));
        if w.len() != x.cols() || (w.rows() != 1 && w.cols() != 1) {
            return Err(Error::shape(
                "vecdot",
                format!("{:?} . {:?}", x.shape(), w.shape()),
            ));
        }
        let out: Vec<T> = (0..x.rows())
            .map(|r| {
                x.row(r)
                    .iter()
                    .zip(w.values())
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect();
        let rg = self.needs(&[a, p]);
        Ok(self.push(Tensor::column(out), Op::VecDot(a, p), rg))
    }

    /// `p / max(‖p‖₂, floor)`. When the floor is active the divisor is
    /// treated as a constant by the backward rule.
    pub fn normalize(&mut self, p: Var, floor: T) -> Var {
        let x = self.value(p);
        let raw = x.l2_norm();
        let guarded = raw < floor;
        let norm = if guarded { floor } else { raw };
        let out = x.map(|v| v / norm);
        let rg = self.needs(&[p]);
        self.push(
            out,
            Op::Normalize {
                input: p,
                norm,
                guarded,
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy over the rows of `logits`; `1 x 1`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if labels.len() != z.rows() || z.rows() == 0 {
            return Err(Error::shape(
                "softmax_xent",
                format!("{} labels for logits {:?}", labels.len(), z.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= z.cols()) {
            return Err(Error::Invalid(format!(
                "softmax_xent: label {bad} >= {} classes",
                z.cols()
            )));
        }
        let mut probs = Tensor::zeros(z.rows(), z.cols());
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = z.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            total = total + lse - row[label];
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - m).exp() / sum;
            }
        }
        let loss = total / T::of(labels.len() as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::filled(1, 1, loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Non-smoothness margins of the recorded forward pass.
    pub fn kink_margin(&self) -> KinkMargin<T> {
        let mut relu = T::infinity();
        let mut max = T::infinity();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &v in self.value(*a).values() {
                        relu = relu.min(v.abs());
                    }
                }
                Op::SegmentMax {
                    input,
                    offsets,
                    argmax,
                } => {
                    let x = self.value(*input);
                    let f = x.cols();
                    for (s, w) in offsets.windows(2).enumerate() {
                        for c in 0..f {
                            let best = argmax[s * f + c];
                            let top = x.get(best, c);
                            for r in (w[0]..w[1]).filter(|&r| r != best) {
                                // exact zeros come from inactive ReLUs and stay tied
                                if top == T::zero() && x.get(r, c) == T::zero() {
                                    continue;
                                }
                                max = max.min(top - x.get(r, c));
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        KinkMargin { relu, max }
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {:?}", self.value(loss).shape()),
            ));
        }
        if let Some(l) = self.ledger.as_mut() {
            l.set_phase("backward");
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut grad_buf: Vec<Option<BufferId>> = vec![None; n];
        grads[loss.0] = Some(Tensor::filled(1, 1, T::one()));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contribs: Vec<(Var, Tensor<T>)> = Vec::with_capacity(2);
            self.node_backward(node, &g, &mut contribs)?;
            for (v, t) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => {
                        if let Some(l) = self.ledger.as_mut() {
                            grad_buf[v.0] = Some(l.alloc(
                                format!("grad/{}", self.nodes[v.0].op.name()),
                                t.len(),
                                0,
                            ));
                        }
                        *slot = Some(t);
                    }
                }
            }
            if let (Some(l), Some(id)) = (self.ledger.as_mut(), grad_buf[i]) {
                l.free(id);
            }
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        out: &mut Vec<(Var, Tensor<T>)>,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    out.push((*a, g.matmul_t(self.value(*b))?));
                }
                if self.nodes[b.0].requires_grad {
                    out.push((*b, self.value(*a).t_matmul(g)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::AddRow(a, b) => {
                out.push((*a, g.clone()));
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in gb.values_mut().iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                out.push((*b, gb));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (o, &v) in ga.values_mut().iter_mut().zip(x.values()) {
                    if v <= T::zero() {
                        *o = T::zero();
                    }
                }
                out.push((*a, ga));
            }
            Op::Tanh(a) => {
                let mut ga = g.clone();
                for (o, &y) in ga.values_mut().iter_mut().zip(node.value.values()) {
                    *o = *o * (T::one() - y * y);
                }
                out.push((*a, ga));
            }
            Op::ScaleRows(a, v) => {
                let (x, s) = (self.value(*a), self.value(*v));
                if self.nodes[a.0].requires_grad {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let k = s.values()[r];
                        ga.row_mut(r).iter_mut().for_each(|o| *o = *o * k);
                    }
                    out.push((*a, ga));
                }
                if self.nodes[v.0].requires_grad {
                    let gv: Vec<T> = (0..x.rows())
                        .map(|r| {
                            g.row(r)
                                .iter()
                                .zip(x.row(r))
                                .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
                        })
                        .collect();
                    out.push((*v, Tensor::column(gv)));
                }
            }
            Op::SpmmMean(x, graph) => {
                out.push((*x, graph.spmm_mean_transpose(g)?));
            }
            Op::SegmentMean(a, offsets) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for (s, w) in offsets.windows(2).enumerate() {
                    let inv = T::one() / T::of((w[1] - w[0]) as f64);
                    for r in w[0]..w[1] {
                        for (o, &v) in ga.row_mut(r).iter_mut().zip(g.row(s)) {
                            *o = v * inv;
                        }
                    }
                }
                out.push((*a, ga));
            }
            Op::SegmentMax { input, argmax, .. } => {
                let x = self.value(*input);
                let f = x.cols();
                let mut ga = Tensor::zeros(x.rows(), f);
                for s in 0..g.rows() {
                    for c in 0..f {
                        let r = argmax[s * f + c];
                        ga.set(r, c, ga.get(r, c) + g.get(s, c));
                    }
                }
                out.push((*input, ga));
            }
            Op::ConcatCols(a, b) => {
                let fa = self.value(*a).cols();
                let fb = self.value(*b).cols();
                let mut ga = Vec::with_capacity(g.rows() * fa);
                let mut gb = Vec::with_capacity(g.rows() * fb);
                for r in 0..g.rows() {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..fa]);
                    gb.extend_from_slice(&row[fa..]);
                }
                out.push((*a, Tensor::from_vec(g.rows(), fa, ga)?));
                out.push((*b, Tensor::from_vec(g.rows(), fb, gb)?));
            }
            Op::Sum(vars) => {
                for v in vars {
                    out.push((*v, g.clone()));
                }
            }
            Op::GatherRows(a, idx) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &v) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                out.push((*a, ga));
            }
            Op::VecDot(a, p) => {
                let (x, w) = (self.value(*a), self.value(*p));
                if self.nodes[a.0].requires_grad {
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let k = g.values()[r];
                        for (o, &pv) in ga.row_mut(r).iter_mut().zip(w.values()) {
                            *o = k * pv;
                        }
                    }
                    out.push((*a, ga));
                }
                if self.nodes[p.0].requires_grad {
                    let mut gp = Tensor::zeros(w.rows(), w.cols());
                    for r in 0..x.rows() {
                        let k = g.values()[r];
                        for (o, &xv) in gp.values_mut().iter_mut().zip(x.row(r)) {
                            *o = *o + k * xv;
                        }
                    }
                    out.push((*p, gp));
                }
            }
            Op::Normalize {
                input,
                norm,
                guarded,
            } => {
                let y = &node.value;
                let mut gp = g.map(|v| v / *norm);
                if !guarded {
                    // (I - y yᵀ) g / ‖p‖
                    let dot = y
                        .values()
                        .iter()
                        .zip(g.values())
                        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    for (o, &yv) in gp.values_mut().iter_mut().zip(y.values()) {
                        *o = *o - yv * dot / *norm;
                    }
                }
                out.push((*input, gp));
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let scale = g.values()[0] / T::of(labels.len() as f64);
                let mut gl = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    let row = gl.row_mut(r);
                    row[label] = row[label] - T::one();
                    row.iter_mut().for_each(|o| *o = *o * scale);
                }
                out.push((*logits, gl));
            }
        }
        Ok(())
    }
}

fn check_segments<T: Scalar>(op: &'static str, x: &Tensor<T>, offsets: &[usize]) -> Result<()> {
    if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != x.rows() {
        return Err(Error::shape(
            op,
            format!("segments {offsets:?} do not cover {} rows", x.rows()),
        ));
    }
    if offsets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid(format!(
            "{op}: empty segment in {offsets:?}"
        )));
    }
    Ok(())
}

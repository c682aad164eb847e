//! Define-by-run computation tape with reverse-mode gradients.
//!
//! Forward primitives record themselves onto the tape in topological order
//! (every input precedes its consumer, by construction). `backward` walks the
//! nodes in reverse, accumulating vector-Jacobian products, and returns
//! gradients for every parameter leaf reachable from the loss. The tape is
//! rebuilt per batch; nothing is cached across batches.

use std::collections::HashMap;

use crate::error::{GsvrError, Result};
use crate::numerics::Tensor2;

/// Handle to a parameter held outside the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a node recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Read access to parameter storage during the forward pass.
pub trait ParamView {
    fn shape(&self, id: ParamId) -> (usize, usize);
    fn values(&self, id: ParamId) -> &[f64];
    fn name(&self, id: ParamId) -> &str;
}

/// Mutable access, used by the finite-difference oracle to perturb weights.
pub trait ParamsMut: ParamView {
    fn values_mut(&mut self, id: ParamId) -> &mut [f64];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Gather {
        param: ParamId,
        ids: Vec<usize>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Unary {
        kind: UnaryKind,
        x: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    AddScalar {
        x: NodeId,
    },
    Clip {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
    },
    /// Elementwise multiply of an [n x d] tensor by an [n x 1] column.
    MulCol {
        x: NodeId,
        col: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    Concat {
        xs: Vec<NodeId>,
    },
    /// Extract column j as an [n x 1] tensor.
    Column {
        x: NodeId,
        j: usize,
    },
    /// Per-row sum, [n x d] -> [n x 1].
    RowSum {
        x: NodeId,
    },
    /// Mean over all entries, -> [1 x 1].
    MeanAll {
        x: NodeId,
    },
    /// [g*w x d] -> [g x d]: mean over the first counts[i] rows of segment i.
    /// Padding rows beyond the count contribute nothing, forward or backward.
    SegmentMean {
        x: NodeId,
        width: usize,
        counts: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor2,
}

/// Gradient of one parameter: dense, or accumulated per gathered row.
#[derive(Debug, Clone)]
pub enum GradEntry {
    Dense(Tensor2),
    Rows {
        dim: usize,
        rows: HashMap<usize, Vec<f64>>,
    },
}

/// Gradients keyed by parameter leaf. Parameters unreachable from the loss
/// are absent; accessors treat them as zero.
#[derive(Debug, Default)]
pub struct Gradients {
    entries: HashMap<ParamId, GradEntry>,
}

impl Gradients {
    pub fn contains(&self, id: ParamId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn get(&self, id: ParamId) -> Option<&GradEntry> {
        self.entries.get(&id)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.entries.keys().copied().collect();
        ids.sort();
        ids
    }

    /// Materialize the gradient as a dense tensor of the given shape,
    /// zero-filled where nothing was accumulated.
    pub fn dense(&self, id: ParamId, rows: usize, cols: usize) -> Tensor2 {
        match self.entries.get(&id) {
            None => Tensor2::zeros(rows, cols),
            Some(GradEntry::Dense(t)) => {
                assert_eq!(t.shape(), (rows, cols));
                t.clone()
            }
            Some(GradEntry::Rows { dim, rows: map }) => {
                assert_eq!(*dim, cols);
                let mut out = Tensor2::zeros(rows, cols);
                for (&r, g) in map {
                    for (o, v) in out.row_mut(r).iter_mut().zip(g.iter()) {
                        *o += v;
                    }
                }
                out
            }
        }
    }

    fn add_dense(&mut self, id: ParamId, grad: &Tensor2) {
        match self.entries.get_mut(&id) {
            None => {
                self.entries.insert(id, GradEntry::Dense(grad.clone()));
            }
            Some(GradEntry::Dense(t)) => {
                for (o, v) in t.data_mut().iter_mut().zip(grad.iter()) {
                    *o += v;
                }
            }
            Some(GradEntry::Rows { .. }) => {
                let dense = self.dense(id, grad.rows(), grad.cols());
                let mut merged = dense;
                for (o, v) in merged.data_mut().iter_mut().zip(grad.iter()) {
                    *o += v;
                }
                self.entries.insert(id, GradEntry::Dense(merged));
            }
        }
    }

    fn add_row(&mut self, id: ParamId, row: usize, grad: &[f64]) {
        let dim = grad.len();
        let entry = self.entries.entry(id).or_insert_with(|| GradEntry::Rows {
            dim,
            rows: HashMap::new(),
        });
        match entry {
            GradEntry::Rows { dim: d, rows } => {
                debug_assert_eq!(*d, dim);
                let acc = rows.entry(row).or_insert_with(|| vec![0.0; dim]);
                for (o, v) in acc.iter_mut().zip(grad.iter()) {
                    *o += v;
                }
            }
            GradEntry::Dense(t) => {
                for (o, v) in t.row_mut(row).iter_mut().zip(grad.iter()) {
                    *o += v;
                }
            }
        }
    }
}

/// Computation tape over external parameter storage.
pub struct Tape<'a> {
    params: &'a dyn ParamView,
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, detail: String) -> GsvrError {
    GsvrError::Dimension { op, detail }
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a dyn ParamView) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor2) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite output of {op:?}");
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor2) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor2::scalar(value))
    }

    /// Dense parameter leaf; the current weights are copied onto the tape.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        let (r, c) = self.params.shape(id);
        let value = Tensor2::new(r, c, self.params.values(id).to_vec());
        self.push(Op::Param(id), value)
    }

    /// Row gather from an embedding-style parameter. Gradients flow only to
    /// the gathered rows.
    pub fn gather(&mut self, param: ParamId, ids: &[usize]) -> Result<NodeId> {
        let (vocab, dim) = self.params.shape(param);
        let weights = self.params.values(param);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(GsvrError::Vocab {
                    table: self.params.name(param).to_string(),
                    id,
                    vocab,
                });
            }
            data.extend_from_slice(&weights[id * dim..(id + 1) * dim]);
        }
        let value = Tensor2::new(ids.len(), dim, data);
        Ok(self.push(
            Op::Gather {
                param,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    /// out = x W + b with the bias broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d_in) = self.value(x).shape();
        let (wr, d_out) = self.value(w).shape();
        let bs = self.value(b).shape();
        if d_in != wr || bs != (1, d_out) {
            return Err(dim_err(
                "linear",
                format!("x is {n}x{d_in}, W is {wr}x{d_out}, b is {}x{}", bs.0, bs.1),
            ));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = Tensor2::zeros(n, d_out);
        for r in 0..n {
            let xrow = xv.row(r);
            let orow = out.row_mut(r);
            orow.copy_from_slice(bv.row(0));
            for (k, &xk) in xrow.iter().enumerate() {
                let wrow = wv.row(k);
                for (o, &wkj) in orow.iter_mut().zip(wrow.iter()) {
                    *o += xk * wkj;
                }
            }
        }
        Ok(self.push(Op::Linear { x, w, b }, out))
    }

    fn unary(&mut self, kind: UnaryKind, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let out = match kind {
            UnaryKind::Relu => xv.map(|v| v.max(0.0)),
            UnaryKind::Sigmoid => xv.map(sigmoid),
            UnaryKind::Exp => xv.map(f64::exp),
            UnaryKind::Log => {
                if xv.iter().any(|&v| v <= 0.0) {
                    return Err(GsvrError::Domain {
                        op: "log",
                        detail: "input must be strictly positive".to_string(),
                    });
                }
                xv.map(f64::ln)
            }
            UnaryKind::Softplus => xv.map(softplus),
            UnaryKind::Neg => xv.map(|v| -v),
        };
        out.check_finite(match kind {
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            _ => "unary",
        })?;
        Ok(self.push(Op::Unary { kind, x }, out))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        self.push(Op::Scale { x, c }, out)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| v + c);
        self.push(Op::AddScalar { x }, out)
    }

    /// Clamp to [lo, hi]; the gradient is zero outside the open interval.
    pub fn clip(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(Op::Clip { x, lo, hi }, out)
    }

    fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err(
                "elementwise",
                format!("operands are {}x{} and {}x{}", sa.0, sa.1, sb.0, sb.1),
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let data: Vec<f64> = av
            .iter()
            .zip(bv.iter())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            })
            .collect();
        let out = Tensor2::new(sa.0, sa.1, data);
        if kind == BinaryKind::Div {
            out.check_finite("div")?;
        }
        Ok(self.push(Op::Binary { kind, a, b }, out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Multiply each row of x by the matching entry of an [n x 1] column.
    pub fn mul_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let (n, d) = self.value(x).shape();
        let cs = self.value(col).shape();
        if cs != (n, 1) {
            return Err(dim_err(
                "mul_col",
                format!("x is {n}x{d}, column is {}x{}", cs.0, cs.1),
            ));
        }
        let xv = self.value(x);
        let cv = self.value(col);
        let mut out = Tensor2::zeros(n, d);
        for r in 0..n {
            let c = cv.get(r, 0);
            for (o, &v) in out.row_mut(r).iter_mut().zip(xv.row(r).iter()) {
                *o = v * c;
            }
        }
        Ok(self.push(Op::MulCol { x, col }, out))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d) = self.value(x).shape();
        if d == 0 {
            return Err(dim_err("softmax", "zero columns".to_string()));
        }
        let xv = self.value(x);
        let mut out = Tensor2::zeros(n, d);
        for r in 0..n {
            let row = xv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = out.row_mut(r);
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row.iter()) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.push(Op::Softmax { x }, out))
    }

    /// Concatenate columns; all inputs must have the same row count.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(dim_err("concat", "no inputs".to_string()));
        }
        let n = self.value(xs[0]).rows();
        let mut total = 0;
        for &x in xs {
            let (r, c) = self.value(x).shape();
            if r != n {
                return Err(dim_err(
                    "concat",
                    format!("row mismatch: {n} vs {r}"),
                ));
            }
            total += c;
        }
        let mut out = Tensor2::zeros(n, total);
        let mut offset = 0;
        for &x in xs {
            let xv = &self.nodes[nid(x)].value;
            let c = xv.cols();
            for r in 0..n {
                out.row_mut(r)[offset..offset + c].copy_from_slice(xv.row(r));
            }
            offset += c;
        }
        Ok(self.push(Op::Concat { xs: xs.to_vec() }, out))
    }

    /// Column j of x as an [n x 1] tensor.
    pub fn column(&mut self, x: NodeId, j: usize) -> Result<NodeId> {
        let (n, d) = self.value(x).shape();
        if j >= d {
            return Err(dim_err("column", format!("column {j} of {n}x{d}")));
        }
        let xv = self.value(x);
        let data: Vec<f64> = (0..n).map(|r| xv.get(r, j)).collect();
        Ok(self.push(Op::Column { x, j }, Tensor2::new(n, 1, data)))
    }

    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let (n, _) = self.value(x).shape();
        let xv = self.value(x);
        let data: Vec<f64> = (0..n).map(|r| xv.row(r).iter().sum()).collect();
        self.push(Op::RowSum { x }, Tensor2::new(n, 1, data))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mean = xv.iter().sum::<f64>() / xv.len() as f64;
        self.push(Op::MeanAll { x }, Tensor2::scalar(mean))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let m = self.mean_all(x);
        self.scale(m, n as f64)
    }

    /// Mean over the first counts[i] rows of each width-sized segment.
    /// A zero count yields a zero row.
    pub fn segment_mean(
        &mut self,
        x: NodeId,
        width: usize,
        counts: &[usize],
    ) -> Result<NodeId> {
        let (rows, d) = self.value(x).shape();
        if rows != width * counts.len() {
            return Err(dim_err(
                "segment_mean",
                format!("{rows} rows != {} segments x width {width}", counts.len()),
            ));
        }
        if counts.iter().any(|&c| c > width) {
            return Err(dim_err(
                "segment_mean",
                "segment count exceeds width".to_string(),
            ));
        }
        let xv = self.value(x);
        let mut out = Tensor2::zeros(counts.len(), d);
        for (i, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let orow = out.row_mut(i);
            for t in 0..count {
                for (o, &v) in orow.iter_mut().zip(xv.row(i * width + t).iter()) {
                    *o += v;
                }
            }
            let inv = 1.0 / count as f64;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        Ok(self.push(
            Op::SegmentMean {
                x,
                width,
                counts: counts.to_vec(),
            },
            out,
        ))
    }

    /// Reverse-mode gradient accumulation from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(GsvrError::Contract(format!(
                "backward needs a scalar loss node, got {}x{}",
                self.value(loss).rows(),
                self.value(loss).cols()
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[nid(loss)] = Some(Tensor2::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param(id) => out.add_dense(*id, &g),
                Op::Gather { param, ids } => {
                    for (r, &id) in ids.iter().enumerate() {
                        out.add_row(*param, id, g.row(r));
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[nid(*x)].value;
                    let wv = &self.nodes[nid(*w)].value;
                    let (n, d_in) = xv.shape();
                    let d_out = wv.cols();
                    // dX = G W^T
                    let mut dx = Tensor2::zeros(n, d_in);
                    for r in 0..n {
                        let grow = g.row(r);
                        let dxrow = dx.row_mut(r);
                        for (k, dxk) in dxrow.iter_mut().enumerate() {
                            let wrow = wv.row(k);
                            let mut acc = 0.0;
                            for (gj, wj) in grow.iter().zip(wrow.iter()) {
                                acc += gj * wj;
                            }
                            *dxk = acc;
                        }
                    }
                    // dW = X^T G
                    let mut dw = Tensor2::zeros(d_in, d_out);
                    for r in 0..n {
                        let xrow = xv.row(r);
                        let grow = g.row(r);
                        for (k, &xk) in xrow.iter().enumerate() {
                            let dwrow = dw.row_mut(k);
                            for (o, &gj) in dwrow.iter_mut().zip(grow.iter()) {
                                *o += xk * gj;
                            }
                        }
                    }
                    // db = column sums of G
                    let mut db = Tensor2::zeros(1, d_out);
                    for r in 0..n {
                        for (o, &gj) in db.row_mut(0).iter_mut().zip(g.row(r).iter()) {
                            *o += gj;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Unary { kind, x } => {
                    let xv = &self.nodes[nid(*x)].value;
                    let yv = &self.nodes[idx].value;
                    let data: Vec<f64> = match kind {
                        UnaryKind::Relu => g
                            .iter()
                            .zip(xv.iter())
                            .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                            .collect(),
                        UnaryKind::Sigmoid => g
                            .iter()
                            .zip(yv.iter())
                            .map(|(&gi, &yi)| gi * yi * (1.0 - yi))
                            .collect(),
                        UnaryKind::Exp => {
                            g.iter().zip(yv.iter()).map(|(&gi, &yi)| gi * yi).collect()
                        }
                        UnaryKind::Log => {
                            g.iter().zip(xv.iter()).map(|(&gi, &xi)| gi / xi).collect()
                        }
                        UnaryKind::Softplus => g
                            .iter()
                            .zip(xv.iter())
                            .map(|(&gi, &xi)| gi * sigmoid(xi))
                            .collect(),
                        UnaryKind::Neg => g.iter().map(|&gi| -gi).collect(),
                    };
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor2::new(xv.rows(), xv.cols(), data),
                    );
                }
                Op::Scale { x, c } => {
                    let dx = g.map(|v| v * c);
                    accumulate(&mut grads, *x, dx);
                }
                Op::AddScalar { x } => {
                    accumulate(&mut grads, *x, g.clone());
                }
                Op::Clip { x, lo, hi } => {
                    let xv = &self.nodes[nid(*x)].value;
                    let data: Vec<f64> = g
                        .iter()
                        .zip(xv.iter())
                        .map(|(&gi, &xi)| if xi > *lo && xi < *hi { gi } else { 0.0 })
                        .collect();
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor2::new(xv.rows(), xv.cols(), data),
                    );
                }
                Op::Binary { kind, a, b } => {
                    let av = &self.nodes[nid(*a)].value;
                    let bv = &self.nodes[nid(*b)].value;
                    let (da, db): (Vec<f64>, Vec<f64>) = match kind {
                        BinaryKind::Add => (g.data().to_vec(), g.data().to_vec()),
                        BinaryKind::Sub => {
                            (g.data().to_vec(), g.iter().map(|&v| -v).collect())
                        }
                        BinaryKind::Mul => (
                            g.iter().zip(bv.iter()).map(|(&gi, &bi)| gi * bi).collect(),
                            g.iter().zip(av.iter()).map(|(&gi, &ai)| gi * ai).collect(),
                        ),
                        BinaryKind::Div => (
                            g.iter().zip(bv.iter()).map(|(&gi, &bi)| gi / bi).collect(),
                            g.iter()
                                .zip(av.iter().zip(bv.iter()))
                                .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                                .collect(),
                        ),
                    };
                    accumulate(&mut grads, *a, Tensor2::new(av.rows(), av.cols(), da));
                    accumulate(&mut grads, *b, Tensor2::new(bv.rows(), bv.cols(), db));
                }
                Op::MulCol { x, col } => {
                    let xv = &self.nodes[nid(*x)].value;
                    let cv = &self.nodes[nid(*col)].value;
                    let (n, d) = xv.shape();
                    let mut dx = Tensor2::zeros(n, d);
                    let mut dc = Tensor2::zeros(n, 1);
                    for r in 0..n {
                        let c = cv.get(r, 0);
                        let mut acc = 0.0;
                        for ((o, &gi), &xi) in dx
                            .row_mut(r)
                            .iter_mut()
                            .zip(g.row(r).iter())
                            .zip(xv.row(r).iter())
                        {
                            *o = gi * c;
                            acc += gi * xi;
                        }
                        dc.set(r, 0, acc);
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *col, dc);
                }
                Op::Softmax { x } => {
                    let yv = &self.nodes[idx].value;
                    let (n, d) = yv.shape();
                    let mut dx = Tensor2::zeros(n, d);
                    for r in 0..n {
                        let yrow = yv.row(r);
                        let grow = g.row(r);
                        let dot: f64 =
                            yrow.iter().zip(grow.iter()).map(|(&y, &gi)| y * gi).sum();
                        for ((o, &y), &gi) in
                            dx.row_mut(r).iter_mut().zip(yrow.iter()).zip(grow.iter())
                        {
                            *o = y * (gi - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { xs } => {
                    let mut offset = 0;
                    for &x in xs {
                        let xv = &self.nodes[nid(x)].value;
                        let (n, c) = xv.shape();
                        let mut dx = Tensor2::zeros(n, c);
                        for r in 0..n {
                            dx.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        offset += c;
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::Column { x, j } => {
                    let xv = &self.nodes[nid(*x)].value;
                    let (n, d) = xv.shape();
                    let mut dx = Tensor2::zeros(n, d);
                    for r in 0..n {
                        dx.set(r, *j, g.get(r, 0));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::RowSum { x } => {
                    let xv = &self.nodes[nid(*x)].value;
                    let (n, d) = xv.shape();
                    let mut dx = Tensor2::zeros(n, d);
                    for r in 0..n {
                        let gi = g.get(r, 0);
                        for o in dx.row_mut(r).iter_mut() {
                            *o = gi;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanAll { x } => {
                    let xv = &self.nodes[nid(*x)].value;
                    let c = g.item() / xv.len() as f64;
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor2::filled(xv.rows(), xv.cols(), c),
                    );
                }
                Op::SegmentMean { x, width, counts } => {
                    let xv = &self.nodes[nid(*x)].value;
                    let d = xv.cols();
                    let mut dx = Tensor2::zeros(xv.rows(), d);
                    for (i, &count) in counts.iter().enumerate() {
                        if count == 0 {
                            continue;
                        }
                        let inv = 1.0 / count as f64;
                        for t in 0..count {
                            let dst = dx.row_mut(i * width + t);
                            for (o, &gi) in dst.iter_mut().zip(g.row(i).iter()) {
                                *o = gi * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(out)
    }
}

#[inline]
fn nid(id: NodeId) -> usize {
    id.0
}

fn accumulate(grads: &mut [Option<Tensor2>], target: NodeId, delta: Tensor2) {
    match &mut grads[nid(target)] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), delta.shape());
            for (o, v) in existing.data_mut().iter_mut().zip(delta.iter()) {
                *o += v;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), branched to avoid overflow for large |x|.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Central-difference gradients: (f(p+h) - f(p-h)) / 2h per coordinate.
/// The closure must be deterministic given the parameters.
pub fn finite_diff<S, F>(
    store: &mut S,
    params: &[ParamId],
    mut f: F,
    step: f64,
) -> Result<HashMap<ParamId, Tensor2>>
where
    S: ParamsMut + ?Sized,
    F: FnMut(&S) -> Result<f64>,
{
    let mut out = HashMap::new();
    for &p in params {
        let (rows, cols) = store.shape(p);
        let mut grad = Tensor2::zeros(rows, cols);
        for i in 0..rows * cols {
            let orig = store.values(p)[i];
            store.values_mut(p)[i] = orig + step;
            let up = f(store)?;
            store.values_mut(p)[i] = orig - step;
            let down = f(store)?;
            store.values_mut(p)[i] = orig;
            grad.data_mut()[i] = (up - down) / (2.0 * step);
        }
        out.insert(p, grad);
    }
    Ok(out)
}

/// True when every coordinate of `got` is within max(rel_tol * |want|, abs_tol).
pub fn grads_close(got: &Tensor2, want: &Tensor2, rel_tol: f64, abs_tol: f64) -> bool {
    assert_eq!(got.shape(), want.shape());
    got.iter().zip(want.iter()).all(|(&g, &w)| {
        let tol = (rel_tol * w.abs()).max(abs_tol);
        (g - w).abs() <= tol
    })
}

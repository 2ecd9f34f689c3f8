//! Reverse-mode autodiff over dense f64 matrices.
//!
//! A [`Tape`] is an append-only arena of computation nodes. Every op pushes
//! one node holding the forward value (and, for the softmax family, an aux
//! buffer reused by backward); node inputs always precede the node, so the
//! reverse sweep in [`Tape::backward`] is a plain reverse iteration.
//!
//! Scope is deliberately narrow: matrices (scalars are 1×1), no
//! broadcasting beyond row-wise bias addition, and exactly the op set the
//! estimator needs. Masked logits use [`NEG_INF`] (the most negative finite
//! f64) instead of a true −∞ so that arithmetic on them cannot produce NaN;
//! softmax still assigns them exactly zero probability.

use crate::error::{Error, Result};

use super::gemm::dgemm;

/// Stand-in for −∞ in masked logits. Finite, so `x + g` and `x / τ` stay
/// well-defined; far enough down that `exp(NEG_INF - max)` underflows to
/// exactly 0 for any realistic row maximum.
pub const NEG_INF: f64 = f64::MIN;

/// Rows whose maximum is below this are treated as "entirely masked".
const DEGENERATE: f64 = -1e290;

/// Dense row-major matrix of f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(rows > 0 && cols > 0, "tensor must be non-empty");
        assert_eq!(data.len(), rows * cols, "shape {rows}×{cols} vs {} elems", data.len());
        Tensor { shape: vec![rows, cols], data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Tensor::new(rows, cols, vec![v; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    /// Row vector 1×n.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(1, n, data)
    }

    /// Column vector n×1.
    pub fn col(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(n, 1, data)
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    /// [r×c] + [1×c], the only broadcast in the engine.
    AddBias { x: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    /// Also reused for reshape (pure gradient pass-through).
    AddConst { x: NodeId },
    Relu { x: NodeId },
    Exp { x: NodeId },
    Log { x: NodeId },
    LogSoftmax { x: NodeId },
    Softmax { x: NodeId },
    LogSumExpRows { x: NodeId },
    MaskedFill { x: NodeId, mask: Vec<bool> },
    GatherCols { x: NodeId, idx: Vec<u32> },
    SelectRows { x: NodeId, rows: Vec<u32> },
    ScatterRows { x: NodeId, rows: Vec<u32> },
    ScatterAssignCols { base: NodeId, vals: NodeId, rows: Vec<u32>, col_off: usize },
    ConcatCols { a: NodeId, b: NodeId },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    MeanRows { x: NodeId },
    MaxConst { x: NodeId, c: f64 },
    MaxPair { a: NodeId, b: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    /// Op-specific buffer saved by forward for backward (softmax probabilities).
    aux: Option<Vec<f64>>,
    /// False for constants and anything computed only from constants;
    /// backward never allocates gradient buffers for such nodes.
    needs_grad: bool,
}

/// Append-only Wengert list. One tape per forward/backward pass; parameters
/// are registered as leaves each pass and their gradients read back out
/// after [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert!(self.nodes[id.0].value.is_scalar());
        self.nodes[id.0].value.data[0]
    }

    /// Gradient buffer populated by the last `backward` call. `None` for
    /// nodes the loss does not reach (their gradient is zero).
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Untracked leaf: gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, None, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Tracked leaf (model parameter or any input that needs d(loss)/d(input)).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, None, true)
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Option<Vec<f64>>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, aux, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape2(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows(), v.cols())
    }

    // ───────────────────────── linear algebra ─────────────────────────

    /// Matrix product [m×k]·[k×n] → [m×n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape2(a);
        let (kb, n) = self.shape2(b);
        if ka != kb {
            return Err(Error::Dimension(format!("matmul {m}×{ka} · {kb}×{n}")));
        }
        let mut out = vec![0.0; m * n];
        dgemm(
            false,
            false,
            m,
            ka,
            n,
            1.0,
            &self.nodes[a.0].value.data,
            &self.nodes[b.0].value.data,
            0.0,
            &mut out,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, Tensor::new(m, n, out), None, ng))
    }

    /// Row-broadcast bias add: [r×c] + [1×c].
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape2(x);
        let (br, bc) = self.shape2(b);
        if br != 1 || bc != c {
            return Err(Error::Dimension(format!("add_bias {r}×{c} + {br}×{bc}")));
        }
        let xv = &self.nodes[x.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = Vec::with_capacity(r * c);
        for row in xv.chunks_exact(c) {
            out.extend(row.iter().zip(bv).map(|(x, b)| x + b));
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddBias { x, b }, Tensor::new(r, c, out), None, ng))
    }

    fn zip_op(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let (ra, ca) = self.shape2(a);
        let (rb, cb) = self.shape2(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::Dimension(format!("{name} {ra}×{ca} vs {rb}×{cb}")));
        }
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let out: Vec<f64> = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(op(a, b), Tensor::new(ra, ca, out), None, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// Elementwise quotient a/b.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "div", |x, y| x / y, |a, b| Op::Div { a, b })
    }

    /// x · c for a scalar constant c.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[x.0].value;
        let out = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&x| x * c).collect() };
        let ng = self.needs(x);
        self.push(Op::Scale { x, c }, out, None, ng)
    }

    /// x + c elementwise for a scalar constant c.
    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[x.0].value;
        let out = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&x| x + c).collect() };
        let ng = self.needs(x);
        self.push(Op::AddConst { x }, out, None, ng)
    }

    // ───────────────────────── nonlinearities ─────────────────────────

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let out = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&x| x.max(0.0)).collect() };
        let ng = self.needs(x);
        self.push(Op::Relu { x }, out, None, ng)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let out = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&x| x.exp()).collect() };
        let ng = self.needs(x);
        self.push(Op::Exp { x }, out, None, ng)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let out = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&x| x.ln()).collect() };
        let ng = self.needs(x);
        self.push(Op::Log { x }, out, None, ng)
    }

    /// Elementwise max(x, c). Strict: positions with x ≤ c take the constant
    /// and pass zero gradient, so ties contribute nothing (the q-error kink
    /// at est = true resolves to gradient 0).
    pub fn max_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[x.0].value;
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| if x > c { x } else { c }).collect(),
        };
        let ng = self.needs(x);
        self.push(Op::MaxConst { x, c }, out, None, ng)
    }

    /// Elementwise max(a, b); gradient follows the larger input and splits
    /// evenly on exact ties.
    pub fn max_pair(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "max_pair", f64::max, |a, b| Op::MaxPair { a, b })
    }

    // ───────────────────────── softmax family ─────────────────────────

    /// Per-row maxima, rejecting rows that are entirely masked.
    fn row_max(&self, x: NodeId, what: &str) -> Result<Vec<f64>> {
        let v = &self.nodes[x.0].value;
        let c = v.cols();
        let mut maxes = Vec::with_capacity(v.rows());
        for (i, row) in v.data.chunks_exact(c).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m <= DEGENERATE {
                return Err(Error::Degenerate(format!("{what}: row {i} is entirely masked")));
            }
            maxes.push(m);
        }
        Ok(maxes)
    }

    /// Row-wise log-softmax. Masked entries (≈ [`NEG_INF`]) keep exactly zero
    /// probability; a fully masked row is an error.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let maxes = self.row_max(x, "log_softmax")?;
        let v = &self.nodes[x.0].value;
        let (r, c) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(r * c);
        let mut probs = Vec::with_capacity(r * c);
        for (row, &m) in v.data.chunks_exact(c).zip(&maxes) {
            let base = probs.len();
            let mut sum = 0.0;
            for &x in row {
                let e = (x - m).exp();
                probs.push(e);
                sum += e;
            }
            let ln_sum = sum.ln();
            for (j, &x) in row.iter().enumerate() {
                out.push(x - m - ln_sum);
                probs[base + j] /= sum;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::LogSoftmax { x }, Tensor::new(r, c, out), Some(probs), ng))
    }

    /// Row-wise softmax; masked entries get exactly zero mass.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let maxes = self.row_max(x, "softmax")?;
        let v = &self.nodes[x.0].value;
        let (r, c) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(r * c);
        for (row, &m) in v.data.chunks_exact(c).zip(&maxes) {
            let base = out.len();
            let mut sum = 0.0;
            for &x in row {
                let e = (x - m).exp();
                out.push(e);
                sum += e;
            }
            for o in &mut out[base..] {
                *o /= sum;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Op::Softmax { x }, Tensor::new(r, c, out), None, ng))
    }

    /// Row-wise log Σ exp → [r×1].
    pub fn log_sum_exp_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let maxes = self.row_max(x, "log_sum_exp")?;
        let v = &self.nodes[x.0].value;
        let (r, c) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(r);
        let mut probs = Vec::with_capacity(r * c);
        for (row, &m) in v.data.chunks_exact(c).zip(&maxes) {
            let base = probs.len();
            let mut sum = 0.0;
            for &x in row {
                let e = (x - m).exp();
                probs.push(e);
                sum += e;
            }
            for p in &mut probs[base..] {
                *p /= sum;
            }
            out.push(m + sum.ln());
        }
        let ng = self.needs(x);
        Ok(self.push(Op::LogSumExpRows { x }, Tensor::new(r, 1, out), Some(probs), ng))
    }

    // ───────────────────────── masking & indexing ─────────────────────────

    /// out[i] = value where mask[i], else x[i]. Filled positions pass zero
    /// gradient.
    pub fn masked_fill(&mut self, x: NodeId, mask: &[bool], value: f64) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if mask.len() != v.data.len() {
            return Err(Error::Dimension(format!(
                "masked_fill: mask has {} entries, tensor {}",
                mask.len(),
                v.data.len()
            )));
        }
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().zip(mask).map(|(&x, &m)| if m { value } else { x }).collect(),
        };
        let ng = self.needs(x);
        Ok(self.push(Op::MaskedFill { x, mask: mask.to_vec() }, out, None, ng))
    }

    /// Per-row element pick along the last axis: out[r, 0] = x[r, idx[r]].
    pub fn gather_cols(&mut self, x: NodeId, idx: &[u32]) -> Result<NodeId> {
        let (r, c) = self.shape2(x);
        if idx.len() != r {
            return Err(Error::Dimension(format!("gather_cols: {} indices for {r} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j as usize >= c) {
            return Err(Error::Dimension(format!("gather_cols: index {bad} out of {c} columns")));
        }
        let v = &self.nodes[x.0].value.data;
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| v[i * c + j as usize]).collect();
        let ng = self.needs(x);
        Ok(self.push(Op::GatherCols { x, idx: idx.to_vec() }, Tensor::new(r, 1, out), None, ng))
    }

    /// Row subset: out[i, :] = x[rows[i], :]. Rows may repeat.
    pub fn select_rows(&mut self, x: NodeId, rows: &[u32]) -> Result<NodeId> {
        let (r, c) = self.shape2(x);
        if rows.is_empty() {
            return Err(Error::Dimension("select_rows: empty row set".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i as usize >= r) {
            return Err(Error::Dimension(format!("select_rows: row {bad} out of {r}")));
        }
        let v = &self.nodes[x.0].value.data;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&v[i as usize * c..(i as usize + 1) * c]);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::SelectRows { x, rows: rows.to_vec() }, Tensor::new(rows.len(), c, out), None, ng))
    }

    /// Inverse of [`Tape::select_rows`]: place x's rows at `rows` within an
    /// `out_rows`-tall output whose remaining rows are `fill` (a constant —
    /// no gradient flows out of them). `rows` must be strictly increasing.
    pub fn scatter_rows(&mut self, x: NodeId, rows: &[u32], out_rows: usize, fill: f64) -> Result<NodeId> {
        let (r, c) = self.shape2(x);
        if rows.len() != r {
            return Err(Error::Dimension(format!("scatter_rows: {} targets for {r} rows", rows.len())));
        }
        if rows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Dimension("scatter_rows: rows must be strictly increasing".into()));
        }
        if let Some(&last) = rows.last() {
            if last as usize >= out_rows {
                return Err(Error::Dimension(format!("scatter_rows: row {last} out of {out_rows}")));
            }
        }
        let v = &self.nodes[x.0].value.data;
        let mut out = vec![fill; out_rows * c];
        for (i, &dst) in rows.iter().enumerate() {
            out[dst as usize * c..(dst as usize + 1) * c].copy_from_slice(&v[i * c..(i + 1) * c]);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::ScatterRows { x, rows: rows.to_vec() }, Tensor::new(out_rows, c, out), None, ng))
    }

    /// Copy `base`, overwriting the column window `[col_off, col_off + w)` of
    /// the listed rows with `vals` ([rows.len() × w]). Gradients route to
    /// `base` everywhere except the overwritten cells, which route to `vals`.
    pub fn scatter_assign_cols(
        &mut self,
        base: NodeId,
        vals: NodeId,
        rows: &[u32],
        col_off: usize,
    ) -> Result<NodeId> {
        let (br, bc) = self.shape2(base);
        let (vr, vc) = self.shape2(vals);
        if vr != rows.len() {
            return Err(Error::Dimension(format!("scatter_assign: {} rows vs {vr} vals", rows.len())));
        }
        if col_off + vc > bc {
            return Err(Error::Dimension(format!(
                "scatter_assign: window {col_off}+{vc} exceeds {bc} columns"
            )));
        }
        if rows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Dimension("scatter_assign: rows must be strictly increasing".into()));
        }
        if let Some(&last) = rows.last() {
            if last as usize >= br {
                return Err(Error::Dimension(format!("scatter_assign: row {last} out of {br}")));
            }
        }
        let mut out = self.nodes[base.0].value.data.clone();
        let vv = &self.nodes[vals.0].value.data;
        for (i, &dst) in rows.iter().enumerate() {
            let o = dst as usize * bc + col_off;
            out[o..o + vc].copy_from_slice(&vv[i * vc..(i + 1) * vc]);
        }
        let ng = self.needs(base) || self.needs(vals);
        Ok(self.push(
            Op::ScatterAssignCols { base, vals, rows: rows.to_vec(), col_off },
            Tensor::new(br, bc, out),
            None,
            ng,
        ))
    }

    /// [r×ca] ++ [r×cb] → [r×(ca+cb)].
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape2(a);
        let (rb, cb) = self.shape2(b);
        if ra != rb {
            return Err(Error::Dimension(format!("concat_cols: {ra} vs {rb} rows")));
        }
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatCols { a, b }, Tensor::new(ra, ca + cb, out), None, ng))
    }

    // ───────────────────────── reductions ─────────────────────────

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].value.data.iter().sum();
        let ng = self.needs(x);
        self.push(Op::SumAll { x }, Tensor::scalar(s), None, ng)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let s: f64 = v.data.iter().sum::<f64>() / v.data.len() as f64;
        let ng = self.needs(x);
        self.push(Op::MeanAll { x }, Tensor::scalar(s), None, ng)
    }

    /// Row means → [r×1]. Combined with [`Tape::reshape`], this is also the
    /// grouped mean: a [g·s × 1] column reshaped to [g × s] averages every
    /// contiguous block of s entries.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let (r, c) = (v.rows(), v.cols());
        let out: Vec<f64> = v.data.chunks_exact(c).map(|row| row.iter().sum::<f64>() / c as f64).collect();
        let ng = self.needs(x);
        self.push(Op::MeanRows { x }, Tensor::new(r, 1, out), None, ng)
    }

    /// Reinterpret a node's row-major data as [rows×cols] (no data movement;
    /// the gradient is the same buffer reshaped).
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if rows * cols != v.data.len() {
            return Err(Error::Dimension(format!(
                "reshape: {}×{} ≠ {rows}×{cols}",
                v.rows(),
                v.cols()
            )));
        }
        let out = Tensor::new(rows, cols, v.data.clone());
        let ng = self.needs(x);
        Ok(self.push(Op::AddConst { x }, out, None, ng))
    }

    // ───────────────────────── backward ─────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradient buffers for every
    /// tracked node the loss reaches; untouched nodes keep gradient `None`
    /// (meaning exactly zero).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Dimension(format!(
                "backward: loss must be scalar, got {}×{}",
                self.nodes[loss.0].value.rows(),
                self.nodes[loss.0].value.cols()
            )));
        }
        // Gradients live in a local vec during the sweep so node values can
        // be borrowed immutably alongside the buffer being written.
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            apply_backward(&self.nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

/// Zeroed gradient buffer for `id`, allocated on first touch; `None` for
/// untracked nodes (constants), whose rules are skipped entirely.
fn grad_buf<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    id: NodeId,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id.0].needs_grad {
        return None;
    }
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.data.len()]))
}

fn apply_backward(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |n: NodeId| &nodes[n.0].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).cols();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                dgemm(false, true, m, n, k, 1.0, g, &val(*b).data, 1.0, ga);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                dgemm(true, false, k, m, n, 1.0, &val(*a).data, g, 1.0, gb);
            }
        }
        Op::AddBias { x, b } => {
            let c = val(*x).cols();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (gx, &gi) in gx.iter_mut().zip(g) {
                    *gx += gi;
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for row in g.chunks_exact(c) {
                    for (gb, &gi) in gb.iter_mut().zip(row) {
                        *gb += gi;
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for n in [*a, *b] {
                if let Some(gn) = grad_buf(nodes, grads, n) {
                    for (gn, &gi) in gn.iter_mut().zip(g) {
                        *gn += gi;
                    }
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for (ga, &gi) in ga.iter_mut().zip(g) {
                    *ga += gi;
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for (gb, &gi) in gb.iter_mut().zip(g) {
                    *gb -= gi;
                }
            }
        }
        Op::Mul { a, b } => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                let bv = &val(*b).data;
                for i in 0..ga.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                let av = &val(*a).data;
                for i in 0..gb.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Div { a, b } => {
            let bv = &val(*b).data;
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for i in 0..ga.len() {
                    ga[i] += g[i] / bv[i];
                }
            }
            let out = &nodes[id].value.data;
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for i in 0..gb.len() {
                    gb[i] -= g[i] * out[i] / bv[i];
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (gx, &gi) in gx.iter_mut().zip(g) {
                    *gx += c * gi;
                }
            }
        }
        Op::AddConst { x } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (gx, &gi) in gx.iter_mut().zip(g) {
                    *gx += gi;
                }
            }
        }
        Op::Relu { x } => {
            let out = &nodes[id].value.data;
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for i in 0..gx.len() {
                    if out[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::Exp { x } => {
            let out = &nodes[id].value.data;
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for i in 0..gx.len() {
                    gx[i] += g[i] * out[i];
                }
            }
        }
        Op::Log { x } => {
            let xv = &val(*x).data;
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for i in 0..gx.len() {
                    gx[i] += g[i] / xv[i];
                }
            }
        }
        Op::LogSoftmax { x } => {
            let c = val(*x).cols();
            let probs = nodes[id].aux.as_ref().expect("log_softmax aux");
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for r in 0..gx.len() / c {
                    let s = r * c;
                    let gsum: f64 = g[s..s + c].iter().sum();
                    for j in 0..c {
                        gx[s + j] += g[s + j] - probs[s + j] * gsum;
                    }
                }
            }
        }
        Op::Softmax { x } => {
            let c = val(*x).cols();
            let out = &nodes[id].value.data;
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for r in 0..gx.len() / c {
                    let s = r * c;
                    let dot: f64 = (0..c).map(|j| g[s + j] * out[s + j]).sum();
                    for j in 0..c {
                        gx[s + j] += out[s + j] * (g[s + j] - dot);
                    }
                }
            }
        }
        Op::LogSumExpRows { x } => {
            let c = val(*x).cols();
            let probs = nodes[id].aux.as_ref().expect("lse aux");
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for r in 0..gx.len() / c {
                    for j in 0..c {
                        gx[r * c + j] += g[r] * probs[r * c + j];
                    }
                }
            }
        }
        Op::MaskedFill { x, mask } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for i in 0..gx.len() {
                    if !mask[i] {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::GatherCols { x, idx } => {
            let c = val(*x).cols();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (i, &j) in idx.iter().enumerate() {
                    gx[i * c + j as usize] += g[i];
                }
            }
        }
        Op::SelectRows { x, rows } => {
            let c = val(*x).cols();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (i, &src) in rows.iter().enumerate() {
                    let d = src as usize * c;
                    for j in 0..c {
                        gx[d + j] += g[i * c + j];
                    }
                }
            }
        }
        Op::ScatterRows { x, rows } => {
            let c = val(*x).cols();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (i, &dst) in rows.iter().enumerate() {
                    let s = dst as usize * c;
                    for j in 0..c {
                        gx[i * c + j] += g[s + j];
                    }
                }
            }
        }
        Op::ScatterAssignCols { base, vals, rows, col_off } => {
            let bc = val(*base).cols();
            let vc = val(*vals).cols();
            if let Some(gb) = grad_buf(nodes, grads, *base) {
                // Pass everything through, then claw back the overwritten window.
                for (gb, &gi) in gb.iter_mut().zip(g) {
                    *gb += gi;
                }
                for &r in rows {
                    let o = r as usize * bc + col_off;
                    for j in 0..vc {
                        gb[o + j] -= g[o + j];
                    }
                }
            }
            if let Some(gv) = grad_buf(nodes, grads, *vals) {
                for (i, &r) in rows.iter().enumerate() {
                    let o = r as usize * bc + col_off;
                    for j in 0..vc {
                        gv[i * vc + j] += g[o + j];
                    }
                }
            }
        }
        Op::ConcatCols { a, b } => {
            let ca = val(*a).cols();
            let cb = val(*b).cols();
            let c = ca + cb;
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for r in 0..ga.len() / ca {
                    for j in 0..ca {
                        ga[r * ca + j] += g[r * c + j];
                    }
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for r in 0..gb.len() / cb {
                    for j in 0..cb {
                        gb[r * cb + j] += g[r * c + ca + j];
                    }
                }
            }
        }
        Op::SumAll { x } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for gx in gx.iter_mut() {
                    *gx += g[0];
                }
            }
        }
        Op::MeanAll { x } => {
            let n = val(*x).data.len() as f64;
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for gx in gx.iter_mut() {
                    *gx += g[0] / n;
                }
            }
        }
        Op::MeanRows { x } => {
            let c = val(*x).cols();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for r in 0..gx.len() / c {
                    for j in 0..c {
                        gx[r * c + j] += g[r] / c as f64;
                    }
                }
            }
        }
        Op::MaxConst { x, c } => {
            let out = &nodes[id].value.data;
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for i in 0..gx.len() {
                    if out[i] > *c {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::MaxPair { a, b } => {
            let av = &val(*a).data;
            let bv = &val(*b).data;
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for i in 0..ga.len() {
                    if av[i] > bv[i] {
                        ga[i] += g[i];
                    } else if av[i] == bv[i] {
                        ga[i] += 0.5 * g[i];
                    }
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for i in 0..gb.len() {
                    if bv[i] > av[i] {
                        gb[i] += g[i];
                    } else if av[i] == bv[i] {
                        gb[i] += 0.5 * g[i];
                    }
                }
            }
        }
    }
}

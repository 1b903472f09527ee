//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! The tape is a Wengert list: each node records one primitive applied to
//! earlier nodes, values are computed eagerly at record time, and the reverse
//! pass visits nodes strictly in reverse append order, accumulating adjoints.
//! After seeding the scalar root with 1, each leaf's adjoint is the exact
//! derivative of the root with respect to that leaf.
//!
//! The primitive set is closed and fixed on purpose: every operation the
//! training objective needs (dense products, the activation family including
//! its second derivative, slicing, broadcasting, and the block reshapes used
//! by the trace kernel) appears below, and nothing else, which keeps the
//! gradient check auditable. There is no expression-graph layer and no
//! higher-order differentiation.
//!
//! Tapes are single-owner: one tape per recorded batch, confined to the
//! worker that recorded it.

mod record;

pub use record::{
    record_objective, record_spatial_gradient, ObjectiveConfig, ObjectiveRecord, TraceEstimator,
};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::potential::{sigma, sigma_double_prime, sigma_prime, ParamGradient};

/// Index of a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    /// Position in the adjoint vector returned by the backward passes.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. `usize` payloads are structural (slice bounds, block
/// widths, tile counts), `f64` payloads are fixed scalar coefficients; neither
/// is differentiated through.
#[derive(Clone, Debug)]
enum Op {
    /// Input node holding a provided value (parameter or data).
    Leaf,
    /// `a * b`
    MatMul(NodeId, NodeId),
    /// `a' * b`
    MatMulTN(NodeId, NodeId),
    /// `a * b'`
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `a + c * b`
    AddScaled(NodeId, NodeId, f64),
    Scale(NodeId, f64),
    /// `x + v * ones'` for a column vector `v`.
    AddColVec(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Square(NodeId),
    Sigma(NodeId),
    SigmaPrime(NodeId),
    SigmaDoublePrime(NodeId),
    /// Elementwise absolute value; subgradient 0 at exactly 0.
    Abs(NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    VStack(NodeId, NodeId),
    /// Tile an `m x 1` column into `m x n`.
    BroadcastCol(NodeId, usize),
    /// Repeat an `m x d` block `n` times side by side: `m x (n d)`.
    TileCols(NodeId, usize),
    /// Expand each column into `d` consecutive copies: `m x n -> m x (n d)`.
    RepeatCols(NodeId, usize),
    /// Sum each group of `d` consecutive columns: `m x (n d) -> m x n`.
    BlockColSum(NodeId, usize),
    /// `1 x n` column sums.
    ColSums(NodeId),
    /// `m x 1` row sums.
    RowSums(NodeId),
    /// `1 x 1` total.
    SumAll(NodeId),
}

/// Node ids of every registered parameter leaf; consumed when extracting a
/// [`ParamGradient`]. The constant offset `c` never enters the dynamics, so
/// it has no node and its gradient is identically zero.
#[derive(Clone, Debug)]
pub(crate) struct TapedParams {
    pub w: NodeId,
    pub k0: NodeId,
    pub b0: NodeId,
    pub hidden: Vec<(NodeId, NodeId)>,
    pub a: NodeId,
    pub b: NodeId,
}

/// Append-only record of a forward evaluation.
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Mat>,
    root: Option<NodeId>,
    pub(crate) params: Option<TapedParams>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            vals: Vec::new(),
            root: None,
            params: None,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.ops.len()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.vals[id.0]
    }

    /// Differentiable input node.
    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.ops.push(Op::Leaf);
        self.vals.push(value);
        NodeId(self.ops.len() - 1)
    }

    /// Input node whose adjoint is never read. Mechanically identical to
    /// [`leaf`](Self::leaf); the distinction is documentation at call sites.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.leaf(value)
    }

    fn push(&mut self, op: Op) -> NodeId {
        let value = eval_op(&op, &self.vals);
        self.ops.push(op);
        self.vals.push(value);
        NodeId(self.ops.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMulTN(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScaled(a, b, c))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn add_col_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        self.push(Op::AddColVec(x, v))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Hadamard(a, b))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    pub fn sigma(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigma(a))
    }

    pub fn sigma_prime(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SigmaPrime(a))
    }

    pub fn sigma_double_prime(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SigmaDoublePrime(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Abs(a))
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> NodeId {
        self.push(Op::SliceRows(a, r0, r1))
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> NodeId {
        self.push(Op::SliceCols(a, c0, c1))
    }

    pub fn vstack(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::VStack(a, b))
    }

    pub fn broadcast_col(&mut self, v: NodeId, n: usize) -> NodeId {
        self.push(Op::BroadcastCol(v, n))
    }

    pub fn tile_cols(&mut self, x: NodeId, n: usize) -> NodeId {
        self.push(Op::TileCols(x, n))
    }

    pub fn repeat_cols(&mut self, x: NodeId, d: usize) -> NodeId {
        self.push(Op::RepeatCols(x, d))
    }

    pub fn block_col_sum(&mut self, x: NodeId, d: usize) -> NodeId {
        self.push(Op::BlockColSum(x, d))
    }

    pub fn col_sums(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ColSums(a))
    }

    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSums(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a))
    }

    /// Mark the scalar objective node.
    pub fn set_root(&mut self, id: NodeId) {
        self.root = Some(id);
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    /// Value of the root node.
    pub fn root_value(&self) -> f64 {
        let root = self.root.expect("tape has no root");
        self.vals[root.0].at(0, 0)
    }

    /// Recompute the forward sweep from the recorded leaves and return the
    /// root value. Bit-identical to the recorded value: the same primitives
    /// run in the same order.
    pub fn replay_root(&self) -> f64 {
        let root = self.root.expect("tape has no root");
        let mut vals: Vec<Mat> = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let v = match op {
                Op::Leaf => self.vals[i].clone(),
                other => eval_op(other, &vals),
            };
            vals.push(v);
        }
        vals[root.0].at(0, 0)
    }

    /// Reverse pass over the whole tape. Returns one adjoint slot per node;
    /// only leaves and the root keep their adjoints (interior adjoints are
    /// dropped as soon as they have been distributed, which caps backward
    /// memory at roughly the forward footprint).
    pub fn backward_adjoints(&self) -> Result<Vec<Option<Mat>>> {
        let mask = vec![true; self.ops.len()];
        self.backward_masked(&mask)
    }

    /// Reverse pass that propagates only along paths reaching one of the
    /// `targets` — the pruning a general AD system applies when asked for
    /// derivatives with respect to specific inputs.
    pub fn backward_adjoints_toward(&self, targets: &[NodeId]) -> Result<Vec<Option<Mat>>> {
        let mut reach = vec![false; self.ops.len()];
        for t in targets {
            reach[t.0] = true;
        }
        for id in 0..self.ops.len() {
            if reach[id] {
                continue;
            }
            let (a, b) = op_inputs(&self.ops[id]);
            reach[id] = a.map(|n| reach[n.0]).unwrap_or(false)
                || b.map(|n| reach[n.0]).unwrap_or(false);
        }
        self.backward_masked(&reach)
    }

    fn backward_masked(&self, mask: &[bool]) -> Result<Vec<Option<Mat>>> {
        let root = self
            .root
            .ok_or_else(|| Error::Argument("tape has no root".into()))?;
        if self.vals[root.0].shape() != (1, 1) {
            return Err(Error::Argument(format!(
                "backward requires a scalar root, got {}x{}",
                self.vals[root.0].rows(),
                self.vals[root.0].cols()
            )));
        }
        let mut adj: Vec<Option<Mat>> = vec![None; self.ops.len()];
        adj[root.0] = Some(Mat::scalar(1.0));

        for id in (0..self.ops.len()).rev() {
            if matches!(self.ops[id], Op::Leaf) || !mask[id] {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.propagate(id, &g, mask, &mut adj);
        }
        Ok(adj)
    }

    /// Extract the parameter gradient registered by `record_objective`.
    pub fn backward(&self) -> Result<ParamGradient> {
        let layout = self
            .params
            .as_ref()
            .ok_or_else(|| Error::Argument("tape has no registered parameters".into()))?
            .clone();
        let mut adj = self.backward_adjoints()?;
        let mut grab = |id: NodeId| -> Mat {
            let (r, c) = self.vals[id.0].shape();
            adj[id.0].take().unwrap_or_else(|| Mat::zeros(r, c))
        };
        Ok(ParamGradient {
            w: grab(layout.w),
            k0: grab(layout.k0),
            b0: grab(layout.b0),
            hidden: layout
                .hidden
                .iter()
                .map(|&(k, b)| (grab(k), grab(b)))
                .collect(),
            a: grab(layout.a),
            b: grab(layout.b),
            c: 0.0,
        })
    }

    fn propagate(&self, id: usize, g: &Mat, mask: &[bool], adj: &mut Vec<Option<Mat>>) {
        let val = |n: NodeId| &self.vals[n.0];
        let on = |n: NodeId| mask[n.0];
        match self.ops[id] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // d/da += g b', d/db += a' g
                if on(a) {
                    let ga = ensure(adj, a, val(a).shape());
                    g.matmul_nt_acc(val(b), 1.0, ga);
                }
                if on(b) {
                    let gb = ensure(adj, b, val(b).shape());
                    val(a).matmul_tn_acc(g, 1.0, gb);
                }
            }
            Op::MatMulTN(a, b) => {
                // out = a' b: d/da += b g', d/db += a g
                if on(a) {
                    let ga = ensure(adj, a, val(a).shape());
                    val(b).matmul_nt_acc(g, 1.0, ga);
                }
                if on(b) {
                    let gb = ensure(adj, b, val(b).shape());
                    val(a).matmul_acc(g, 1.0, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a b': d/da += g b, d/db += g' a
                if on(a) {
                    let ga = ensure(adj, a, val(a).shape());
                    g.matmul_acc(val(b), 1.0, ga);
                }
                if on(b) {
                    let gb = ensure(adj, b, val(b).shape());
                    g.matmul_tn_acc(val(a), 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                if on(a) {
                    ensure(adj, a, g.shape()).axpy(1.0, g);
                }
                if on(b) {
                    ensure(adj, b, g.shape()).axpy(1.0, g);
                }
            }
            Op::AddScaled(a, b, c) => {
                if on(a) {
                    ensure(adj, a, g.shape()).axpy(1.0, g);
                }
                if on(b) {
                    ensure(adj, b, g.shape()).axpy(c, g);
                }
            }
            Op::Scale(a, c) => {
                if on(a) {
                    ensure(adj, a, g.shape()).axpy(c, g);
                }
            }
            Op::AddColVec(x, v) => {
                if on(x) {
                    ensure(adj, x, g.shape()).axpy(1.0, g);
                }
                if on(v) {
                    let gv = ensure(adj, v, val(v).shape());
                    for r in 0..g.rows() {
                        let s: f64 = g.row(r).iter().sum();
                        gv.as_mut_slice()[r] += s;
                    }
                }
            }
            Op::Hadamard(a, b) => {
                if on(a) {
                    accumulate_zip(ensure(adj, a, g.shape()), g, val(b));
                }
                if on(b) {
                    accumulate_zip(ensure(adj, b, g.shape()), g, val(a));
                }
            }
            Op::Square(a) => {
                if !on(a) {
                    return;
                }
                let ga = ensure(adj, a, g.shape());
                for ((o, &gv), &av) in ga
                    .as_mut_slice()
                    .iter_mut()
                    .zip(g.as_slice())
                    .zip(val(a).as_slice())
                {
                    *o += 2.0 * av * gv;
                }
            }
            Op::Sigma(a) => {
                if !on(a) {
                    return;
                }
                let ga = ensure(adj, a, g.shape());
                for ((o, &gv), &av) in ga
                    .as_mut_slice()
                    .iter_mut()
                    .zip(g.as_slice())
                    .zip(val(a).as_slice())
                {
                    *o += sigma_prime(av) * gv;
                }
            }
            Op::SigmaPrime(a) => {
                if !on(a) {
                    return;
                }
                let ga = ensure(adj, a, g.shape());
                for ((o, &gv), &av) in ga
                    .as_mut_slice()
                    .iter_mut()
                    .zip(g.as_slice())
                    .zip(val(a).as_slice())
                {
                    *o += sigma_double_prime(av) * gv;
                }
            }
            Op::SigmaDoublePrime(a) => {
                if !on(a) {
                    return;
                }
                // d/dx (1 - tanh^2) = -2 tanh (1 - tanh^2)
                let ga = ensure(adj, a, g.shape());
                for ((o, &gv), &av) in ga
                    .as_mut_slice()
                    .iter_mut()
                    .zip(g.as_slice())
                    .zip(val(a).as_slice())
                {
                    let t = av.tanh();
                    *o += -2.0 * t * (1.0 - t * t) * gv;
                }
            }
            Op::Abs(a) => {
                if !on(a) {
                    return;
                }
                let ga = ensure(adj, a, g.shape());
                for ((o, &gv), &av) in ga
                    .as_mut_slice()
                    .iter_mut()
                    .zip(g.as_slice())
                    .zip(val(a).as_slice())
                {
                    *o += av.signum() * gv * if av == 0.0 { 0.0 } else { 1.0 };
                }
            }
            Op::SliceRows(a, r0, _) => {
                if !on(a) {
                    return;
                }
                let ga = ensure(adj, a, val(a).shape());
                for r in 0..g.rows() {
                    let dst = ga.row_mut(r0 + r);
                    for (d, &s) in dst.iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            }
            Op::SliceCols(a, c0, _) => {
                if !on(a) {
                    return;
                }
                let ga = ensure(adj, a, val(a).shape());
                for r in 0..g.rows() {
                    let dst = &mut ga.row_mut(r)[c0..c0 + g.cols()];
                    for (d, &s) in dst.iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            }
            Op::VStack(a, b) => {
                let ra = val(a).rows();
                if on(a) {
                    let top = g.slice_rows(0, ra);
                    ensure(adj, a, val(a).shape()).axpy(1.0, &top);
                }
                if on(b) {
                    let bottom = g.slice_rows(ra, g.rows());
                    ensure(adj, b, val(b).shape()).axpy(1.0, &bottom);
                }
            }
            Op::BroadcastCol(v, _) => {
                if !on(v) {
                    return;
                }
                let gv = ensure(adj, v, val(v).shape());
                for r in 0..g.rows() {
                    let s: f64 = g.row(r).iter().sum();
                    gv.as_mut_slice()[r] += s;
                }
            }
            Op::TileCols(x, n) => {
                if !on(x) {
                    return;
                }
                let d = val(x).cols();
                let gx = ensure(adj, x, val(x).shape());
                for r in 0..g.rows() {
                    let src = g.row(r);
                    let dst = gx.row_mut(r);
                    for block in 0..n {
                        for t in 0..d {
                            dst[t] += src[block * d + t];
                        }
                    }
                }
            }
            Op::RepeatCols(x, d) => {
                if !on(x) {
                    return;
                }
                let n = val(x).cols();
                let gx = ensure(adj, x, val(x).shape());
                for r in 0..g.rows() {
                    let src = g.row(r);
                    let dst = gx.row_mut(r);
                    for j in 0..n {
                        dst[j] += src[j * d..(j + 1) * d].iter().sum::<f64>();
                    }
                }
            }
            Op::BlockColSum(x, d) => {
                if !on(x) {
                    return;
                }
                let gx = ensure(adj, x, val(x).shape());
                for r in 0..g.rows() {
                    let src = g.row(r);
                    let dst = gx.row_mut(r);
                    for (j, &s) in src.iter().enumerate() {
                        for t in 0..d {
                            dst[j * d + t] += s;
                        }
                    }
                }
            }
            Op::ColSums(a) => {
                if !on(a) {
                    return;
                }
                let ga = ensure(adj, a, val(a).shape());
                for r in 0..ga.rows() {
                    for (d, &s) in ga.row_mut(r).iter_mut().zip(g.row(0)) {
                        *d += s;
                    }
                }
            }
            Op::RowSums(a) => {
                if !on(a) {
                    return;
                }
                let ga = ensure(adj, a, val(a).shape());
                for r in 0..ga.rows() {
                    let s = g.as_slice()[r];
                    for d in ga.row_mut(r) {
                        *d += s;
                    }
                }
            }
            Op::SumAll(a) => {
                if !on(a) {
                    return;
                }
                let s = g.at(0, 0);
                let ga = ensure(adj, a, val(a).shape());
                for d in ga.as_mut_slice() {
                    *d += s;
                }
            }
        }
    }
}

fn op_inputs(op: &Op) -> (Option<NodeId>, Option<NodeId>) {
    match *op {
        Op::Leaf => (None, None),
        Op::MatMul(a, b)
        | Op::MatMulTN(a, b)
        | Op::MatMulNT(a, b)
        | Op::Add(a, b)
        | Op::AddScaled(a, b, _)
        | Op::AddColVec(a, b)
        | Op::Hadamard(a, b)
        | Op::VStack(a, b) => (Some(a), Some(b)),
        Op::Scale(a, _)
        | Op::Square(a)
        | Op::Sigma(a)
        | Op::SigmaPrime(a)
        | Op::SigmaDoublePrime(a)
        | Op::Abs(a)
        | Op::SliceRows(a, _, _)
        | Op::SliceCols(a, _, _)
        | Op::BroadcastCol(a, _)
        | Op::TileCols(a, _)
        | Op::RepeatCols(a, _)
        | Op::BlockColSum(a, _)
        | Op::ColSums(a)
        | Op::RowSums(a)
        | Op::SumAll(a) => (Some(a), None),
    }
}

/// Adjoint slot for `id`, created zeroed on first touch.
fn ensure<'a>(adj: &'a mut [Option<Mat>], id: NodeId, shape: (usize, usize)) -> &'a mut Mat {
    let slot = &mut adj[id.0];
    if slot.is_none() {
        *slot = Some(Mat::zeros(shape.0, shape.1));
    }
    slot.as_mut().unwrap()
}

/// `out += g . other` elementwise.
fn accumulate_zip(out: &mut Mat, g: &Mat, other: &Mat) {
    for ((o, &gv), &ov) in out
        .as_mut_slice()
        .iter_mut()
        .zip(g.as_slice())
        .zip(other.as_slice())
    {
        *o += gv * ov;
    }
}

fn eval_op(op: &Op, vals: &[Mat]) -> Mat {
    let v = |n: &NodeId| &vals[n.0];
    match op {
        Op::Leaf => unreachable!("leaf values are provided, not computed"),
        Op::MatMul(a, b) => v(a).matmul(v(b)),
        Op::MatMulTN(a, b) => v(a).matmul_tn(v(b)),
        Op::MatMulNT(a, b) => v(a).matmul_nt(v(b)),
        Op::Add(a, b) => v(a).add(v(b)),
        Op::AddScaled(a, b, c) => v(a).add_scaled(v(b), *c),
        Op::Scale(a, c) => v(a).scale(*c),
        Op::AddColVec(x, vec) => {
            let mut out = v(x).clone();
            crate::potential::add_col(&mut out, v(vec));
            out
        }
        Op::Hadamard(a, b) => v(a).hadamard(v(b)),
        Op::Square(a) => v(a).map(|x| x * x),
        Op::Sigma(a) => v(a).map(sigma),
        Op::SigmaPrime(a) => v(a).map(sigma_prime),
        Op::SigmaDoublePrime(a) => v(a).map(sigma_double_prime),
        Op::Abs(a) => v(a).map(f64::abs),
        Op::SliceRows(a, r0, r1) => v(a).slice_rows(*r0, *r1),
        Op::SliceCols(a, c0, c1) => v(a).slice_cols(*c0, *c1),
        Op::VStack(a, b) => v(a).vstack(v(b)),
        Op::BroadcastCol(vec, n) => v(vec).broadcast_col(*n),
        Op::TileCols(x, n) => {
            let x = v(x);
            let (m, d) = x.shape();
            let mut out = Mat::zeros(m, n * d);
            for r in 0..m {
                let src = x.row(r);
                let dst = out.row_mut(r);
                for block in 0..*n {
                    dst[block * d..(block + 1) * d].copy_from_slice(src);
                }
            }
            out
        }
        Op::RepeatCols(x, d) => {
            let x = v(x);
            let (m, n) = x.shape();
            let mut out = Mat::zeros(m, n * d);
            for r in 0..m {
                let src = x.row(r);
                let dst = out.row_mut(r);
                for j in 0..n {
                    dst[j * d..(j + 1) * d].fill(src[j]);
                }
            }
            out
        }
        Op::BlockColSum(x, d) => {
            let x = v(x);
            let m = x.rows();
            let n = x.cols() / d;
            debug_assert_eq!(x.cols(), n * d);
            let mut out = Mat::zeros(m, n);
            for r in 0..m {
                let src = x.row(r);
                let dst = out.row_mut(r);
                for j in 0..n {
                    dst[j] = src[j * d..(j + 1) * d].iter().sum();
                }
            }
            out
        }
        Op::ColSums(a) => v(a).col_sums(),
        Op::RowSums(a) => v(a).row_sums(),
        Op::SumAll(a) => Mat::scalar(v(a).sum()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Finite-difference derivative of the root with respect to leaf entry
    /// `(idx)` of a rebuilt tape.
    fn fd_leaf(build: impl Fn(&[f64]) -> f64, base: &[f64], idx: usize) -> f64 {
        let h = 1e-6;
        let mut up = base.to_vec();
        let mut dn = base.to_vec();
        up[idx] += h;
        dn[idx] -= h;
        (build(&up) - build(&dn)) / (2.0 * h)
    }

    #[test]
    fn backward_matches_finite_differences_on_mixed_graph() {
        // root = sum( (sigma(K x) . x_sliced)^2 ) exercising matmul, sigma,
        // hadamard, square, slicing and reductions.
        let k_vals = [0.3, -0.7, 1.1, 0.4, 0.9, -0.2];
        let x_vals = [0.5, -1.2];
        let build = |kv: &[f64], xv: &[f64]| -> (Tape, NodeId, NodeId) {
            let mut tape = Tape::new();
            let k = tape.leaf(Mat::from_vec(3, 2, kv.to_vec()));
            let x = tape.leaf(Mat::from_vec(2, 1, xv.to_vec()));
            let kx = tape.matmul(k, x);
            let s = tape.sigma(kx);
            let sl = tape.slice_rows(s, 0, 2);
            let h = tape.hadamard(sl, x);
            let sq = tape.square(h);
            let root = tape.sum_all(sq);
            tape.set_root(root);
            (tape, k, x)
        };
        let (tape, k, x) = build(&k_vals, &x_vals);
        let adj = tape.backward_adjoints().unwrap();
        let gk = adj[k.0].clone().unwrap();
        let gx = adj[x.0].clone().unwrap();

        for i in 0..6 {
            let fd = fd_leaf(
                |kv| build(kv, &x_vals).0.root_value(),
                &k_vals,
                i,
            );
            assert!(
                (gk.as_slice()[i] - fd).abs() < 1e-6,
                "dK[{i}]: {} vs fd {fd}",
                gk.as_slice()[i]
            );
        }
        for i in 0..2 {
            let fd = fd_leaf(
                |xv| build(&k_vals, xv).0.root_value(),
                &x_vals,
                i,
            );
            assert!((gx.as_slice()[i] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn block_reshape_adjoints_match_finite_differences() {
        let x_vals: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.8).collect();
        let build = |xv: &[f64]| -> (Tape, NodeId) {
            let mut tape = Tape::new();
            let x = tape.leaf(Mat::from_vec(2, 3, xv.to_vec()));
            let rep = tape.repeat_cols(x, 2); // 2 x 6
            let sq = tape.square(rep);
            let back = tape.block_col_sum(sq, 2); // 2 x 3
            let tiled = tape.tile_cols(x, 2); // 2 x 6, reuse x as a 2x3 block
            let bsum = tape.block_col_sum(tiled, 3); // 2 x 2
            let r1 = tape.sum_all(back);
            let r2 = tape.sum_all(bsum);
            let root = tape.add(r1, r2);
            tape.set_root(root);
            (tape, x)
        };
        let (tape, x) = build(&x_vals);
        let adj = tape.backward_adjoints().unwrap();
        let gx = adj[x.0].clone().unwrap();
        for i in 0..6 {
            let fd = fd_leaf(|xv| build(xv).0.root_value(), &x_vals, i);
            assert!(
                (gx.as_slice()[i] - fd).abs() < 1e-6,
                "dx[{i}]: {} vs {fd}",
                gx.as_slice()[i]
            );
        }
    }

    #[test]
    fn replay_reproduces_recorded_root_exactly() {
        let mut tape = Tape::new();
        let a = tape.leaf(Mat::from_vec(2, 2, vec![0.3, 0.9, -0.4, 1.7]));
        let b = tape.leaf(Mat::from_vec(2, 2, vec![1.3, -0.2, 0.8, 0.1]));
        let p = tape.matmul(a, b);
        let s = tape.sigma(p);
        let root = tape.sum_all(s);
        tape.set_root(root);
        assert_eq!(tape.root_value().to_bits(), tape.replay_root().to_bits());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.leaf(Mat::zeros(2, 2));
        tape.set_root(a);
        assert!(matches!(
            tape.backward_adjoints(),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn abs_subgradient_zero_at_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(Mat::from_vec(1, 3, vec![-2.0, 0.0, 3.0]));
        let ab = tape.abs(a);
        let root = tape.sum_all(ab);
        tape.set_root(root);
        let adj = tape.backward_adjoints().unwrap();
        let ga = adj[a.0].clone().unwrap();
        assert_eq!(ga.as_slice(), &[-1.0, 0.0, 1.0]);
    }
}

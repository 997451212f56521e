//! Reverse-mode automatic differentiation on a flat arena tape.
//!
//! Values are stored in one growing `f64` arena; each node owns a
//! contiguous `[rows*cols]` slice. The gradient arena mirrors the value
//! arena's offsets, so backward can hand out disjoint mutable parent
//! slices with a single `split_at_mut`. Forward values are computed
//! eagerly as nodes are pushed, using exactly the same raw kernels in
//! [`crate::linalg`] as the no-gradient evaluator — the two paths agree
//! bitwise by construction.
//!
//! The LSTM cell is a fused op: one node application computes the new
//! hidden state, cell state, and (optionally) the output head, caching the
//! activated gates in a separate cache arena. The cell state and output
//! are exposed as *satellite* nodes placed immediately after the cell
//! node; their backward is a no-op — the cell's backward reads their
//! accumulated gradients directly.
//!
//! A tape is rebuilt from scratch for every training step (`reset` keeps
//! the allocations); gradient bookkeeping never leaks across steps.

use crate::linalg::{self, CellDims, CellGradSinks, EmittedHead, Mat, EXP_CLAMP};
use crate::parallel::MAP_CHUNK;

/// Handle to a tape node. Cheap to copy; only valid for the tape (and
/// reset epoch) that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor(usize);

// Some fields are written at record time and only consulted through the
// value arena during the backward sweep; they stay on the op so `Debug`
// output shows full provenance.
#[allow(dead_code)]
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor, f64),
    /// `exp(clamp(x, ±EXP_CLAMP))`; clamped entries get zero gradient.
    Exp(Tensor),
    Ln(Tensor),
    Sigmoid(Tensor),
    Tanh(Tensor),
    Softplus(Tensor),
    PowScalar(Tensor, f64),
    /// `max(x, c)`; entries at the floor get zero gradient.
    ClampMin(Tensor, f64),
    Matmul(Tensor, Tensor),
    VStack(Vec<Tensor>),
    /// Row slice `[r0, r1)` of the parent.
    Rows(Tensor, usize, usize),
    /// Repeat a `1 x c` row `n` times.
    TileRows(Tensor, usize),
    SumRows(Tensor),
    MeanRows(Tensor),
    SumCols(Tensor),
    MeanCols(Tensor),
    SumAll(Tensor),
    MeanAll(Tensor),
    /// Fused LSTM cell. Satellite node indices are patched in right after
    /// the satellites are pushed.
    LstmCell {
        x: Tensor,
        h_prev: Tensor,
        c_prev: Tensor,
        wx: Tensor,
        uh: Tensor,
        b: Tensor,
        wy: Tensor,
        by: Tensor,
        cache_off: usize,
        c_node: usize,
        y_node: Option<usize>,
    },
    /// Satellite carrying the cell state (value filled by the cell op).
    CellC(Tensor),
    /// Satellite carrying the output head value.
    CellY(Tensor),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    off: usize,
    needs_grad: bool,
}

/// Output handles of one fused LSTM cell application.
#[derive(Clone, Copy)]
pub struct CellOut {
    pub h: Tensor,
    pub c: Tensor,
    pub y: Option<Tensor>,
}

/// Parameter leaves of one LSTM policy, pushed onto a tape.
#[derive(Clone, Copy)]
pub struct CellParams {
    pub wx: Tensor,
    pub uh: Tensor,
    pub b: Tensor,
    pub wy: Tensor,
    pub by: Tensor,
}

/// Reverse-mode tape; see the module docs.
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    cache: Vec<f64>,
    grads: Vec<f64>,
    grads_valid: bool,
    scratch: Vec<f64>,
    exp_clamps: usize,
    floor_clamps: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            vals: Vec::new(),
            cache: Vec::new(),
            grads: Vec::new(),
            grads_valid: false,
            scratch: Vec::new(),
            exp_clamps: 0,
            floor_clamps: 0,
        }
    }

    /// Clear the tape, keeping allocations for reuse.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.cache.clear();
        self.grads.clear();
        self.grads_valid = false;
        self.exp_clamps = 0;
        self.floor_clamps = 0;
    }

    /// Number of exponential-argument clamp events since the last reset.
    pub fn exp_clamp_count(&self) -> usize {
        self.exp_clamps
    }

    /// Number of floor-clamp (`clamp_min`) events since the last reset.
    pub fn floor_clamp_count(&self) -> usize {
        self.floor_clamps
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        let n = &self.nodes[t.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        let n = &self.nodes[t.0];
        &self.vals[n.off..n.off + n.rows * n.cols]
    }

    pub fn value_mat(&self, t: Tensor) -> Mat {
        let (r, c) = self.shape(t);
        Mat::new(r, c, self.value(t).to_vec())
    }

    /// Gradient of the last `backward` loss w.r.t. `t`.
    /// Panics if backward has not run or `t` was pushed without gradients.
    pub fn grad(&self, t: Tensor) -> &[f64] {
        assert!(self.grads_valid, "grad: backward has not been run");
        let n = &self.nodes[t.0];
        assert!(n.needs_grad, "grad: node was pushed with needs_grad = false");
        &self.grads[n.off..n.off + n.rows * n.cols]
    }

    /// Leaf tensors that were pushed with `needs_grad = true`, in creation
    /// order. After `backward`, reading [`Self::grad`] for these in order
    /// yields the full gradient of the loss w.r.t. the trainable
    /// parameters as they were lifted onto the tape.
    pub fn grad_leaves(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.needs_grad && matches!(n.op, Op::Leaf))
            .map(|(i, _)| Tensor(i))
            .collect()
    }

    fn needs(&self, t: Tensor) -> bool {
        self.nodes[t.0].needs_grad
    }

    fn alloc(&mut self, len: usize) -> usize {
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        off
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, off: usize, needs_grad: bool) -> Tensor {
        self.grads_valid = false;
        self.nodes.push(Node { op, rows, cols, off, needs_grad });
        Tensor(self.nodes.len() - 1)
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Copy a matrix onto the tape as a leaf.
    pub fn leaf(&mut self, m: &Mat, needs_grad: bool) -> Tensor {
        let off = self.alloc(m.len());
        self.vals[off..off + m.len()].copy_from_slice(m.as_slice());
        self.push(Op::Leaf, m.rows(), m.cols(), off, needs_grad)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, m: &Mat) -> Tensor {
        self.leaf(m, false)
    }

    /// Constant `1 x 1` scalar.
    pub fn scalar(&mut self, v: f64) -> Tensor {
        let off = self.alloc(1);
        self.vals[off] = v;
        self.push(Op::Leaf, 1, 1, off, false)
    }

    // ── element-wise binary ops ─────────────────────────────────────────

    fn binary(
        &mut self,
        a: Tensor,
        b: Tensor,
        op: impl Fn(Tensor, Tensor) -> Op,
        f: impl Fn(f64, f64) -> f64 + Sync,
        name: &str,
    ) -> Tensor {
        let (r, c) = self.shape(a);
        assert_eq!(
            (r, c),
            self.shape(b),
            "{name}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let len = r * c;
        let off = self.alloc(len);
        let (lo, hi) = self.vals.split_at_mut(off);
        let av = &lo[self.nodes[a.0].off..self.nodes[a.0].off + len];
        let bv = &lo[self.nodes[b.0].off..self.nodes[b.0].off + len];
        linalg::map2(&mut hi[..len], av, bv, f);
        let ng = self.needs(a) || self.needs(b);
        self.push(op(a, b), r, c, off, ng)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary(a, b, Op::Add, |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary(a, b, Op::Sub, |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary(a, b, Op::Mul, |x, y| x * y, "mul")
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Tensor {
        self.binary(a, b, Op::Div, |x, y| x / y, "div")
    }

    // ── element-wise unary ops ──────────────────────────────────────────

    fn unary(
        &mut self,
        a: Tensor,
        op: Op,
        f: impl Fn(f64) -> f64 + Sync,
    ) -> Tensor {
        let (r, c) = self.shape(a);
        let len = r * c;
        let off = self.alloc(len);
        let (lo, hi) = self.vals.split_at_mut(off);
        let av = &lo[self.nodes[a.0].off..self.nodes[a.0].off + len];
        linalg::map1(&mut hi[..len], av, f);
        let ng = self.needs(a);
        self.push(op, r, c, off, ng)
    }

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Tensor, s: f64) -> Tensor {
        self.unary(a, Op::Scale(a, s), |x| s * x)
    }

    pub fn add_scalar(&mut self, a: Tensor, s: f64) -> Tensor {
        self.unary(a, Op::AddScalar(a, s), |x| x + s)
    }

    /// Clamped exponential; increments the clamp counter per clamped entry.
    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let (r, c) = self.shape(a);
        let len = r * c;
        let off = self.alloc(len);
        let (lo, hi) = self.vals.split_at_mut(off);
        let av = &lo[self.nodes[a.0].off..self.nodes[a.0].off + len];
        let clamped =
            linalg::map1_count(&mut hi[..len], av, linalg::exp_clamped, |x| x.abs() > EXP_CLAMP);
        self.exp_clamps += clamped;
        let ng = self.needs(a);
        self.push(Op::Exp(a), r, c, off, ng)
    }

    pub fn ln(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Sigmoid(a), linalg::sigmoid)
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softplus(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::Softplus(a), linalg::softplus)
    }

    pub fn powf(&mut self, a: Tensor, p: f64) -> Tensor {
        self.unary(a, Op::PowScalar(a, p), |x| x.powf(p))
    }

    /// `max(x, floor)`; counts clamped entries.
    pub fn clamp_min(&mut self, a: Tensor, floor: f64) -> Tensor {
        let (r, c) = self.shape(a);
        let len = r * c;
        let off = self.alloc(len);
        let (lo, hi) = self.vals.split_at_mut(off);
        let av = &lo[self.nodes[a.0].off..self.nodes[a.0].off + len];
        let clamped = linalg::map1_count(&mut hi[..len], av, |x| x.max(floor), |x| x < floor);
        self.floor_clamps += clamped;
        let ng = self.needs(a);
        self.push(Op::ClampMin(a, floor), r, c, off, ng)
    }

    /// Rectifier `max(x, 0)` (not counted as a clamp event).
    pub fn relu(&mut self, a: Tensor) -> Tensor {
        self.unary(a, Op::ClampMin(a, 0.0), |x| x.max(0.0))
    }

    // ── structural ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let off = self.alloc(m * n);
        let (lo, hi) = self.vals.split_at_mut(off);
        let av = &lo[self.nodes[a.0].off..self.nodes[a.0].off + m * k];
        let bv = &lo[self.nodes[b.0].off..self.nodes[b.0].off + k * n];
        linalg::gemm(&mut hi[..m * n], 0.0, 1.0, av, bv, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), m, n, off, ng)
    }

    /// Stack tensors with equal column counts along rows.
    pub fn vstack(&mut self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "vstack: no inputs");
        let cols = self.shape(parts[0]).1;
        let rows: usize = parts
            .iter()
            .map(|&t| {
                let (r, c) = self.shape(t);
                assert_eq!(c, cols, "vstack: column mismatch");
                r
            })
            .sum();
        let off = self.alloc(rows * cols);
        let (lo, hi) = self.vals.split_at_mut(off);
        let mut cursor = 0usize;
        for &t in parts {
            let n = &self.nodes[t.0];
            let len = n.rows * n.cols;
            hi[cursor..cursor + len].copy_from_slice(&lo[n.off..n.off + len]);
            cursor += len;
        }
        let ng = parts.iter().any(|&t| self.needs(t));
        self.push(Op::VStack(parts.to_vec()), rows, cols, off, ng)
    }

    /// Row slice `[r0, r1)`.
    pub fn rows(&mut self, a: Tensor, r0: usize, r1: usize) -> Tensor {
        let (r, c) = self.shape(a);
        assert!(r0 < r1 && r1 <= r, "rows: [{r0},{r1}) out of {r}");
        let len = (r1 - r0) * c;
        let off = self.alloc(len);
        let (lo, hi) = self.vals.split_at_mut(off);
        let src = self.nodes[a.0].off + r0 * c;
        hi[..len].copy_from_slice(&lo[src..src + len]);
        let ng = self.needs(a);
        self.push(Op::Rows(a, r0, r1), r1 - r0, c, off, ng)
    }

    /// Single row `r` as a `1 x c` tensor.
    pub fn row(&mut self, a: Tensor, r: usize) -> Tensor {
        self.rows(a, r, r + 1)
    }

    /// Repeat a `1 x c` tensor `n` times along rows.
    pub fn tile_rows(&mut self, a: Tensor, n: usize) -> Tensor {
        let (r, c) = self.shape(a);
        assert_eq!(r, 1, "tile_rows: input must be 1 x c");
        let off = self.alloc(n * c);
        let (lo, hi) = self.vals.split_at_mut(off);
        let src = &lo[self.nodes[a.0].off..self.nodes[a.0].off + c];
        for i in 0..n {
            hi[i * c..(i + 1) * c].copy_from_slice(src);
        }
        let ng = self.needs(a);
        self.push(Op::TileRows(a, n), n, c, off, ng)
    }

    // ── reductions ──────────────────────────────────────────────────────

    fn reduce(&mut self, a: Tensor, op: Op, rows: usize, cols: usize) -> Tensor {
        let off = self.alloc(rows * cols);
        let ng = self.needs(a);
        self.push(op, rows, cols, off, ng)
    }

    /// Sum across rows: `[r x c] -> [1 x c]`.
    pub fn sum_rows(&mut self, a: Tensor) -> Tensor {
        let (r, c) = self.shape(a);
        let t = self.reduce(a, Op::SumRows(a), 1, c);
        let (off_a, off_t) = (self.nodes[a.0].off, self.nodes[t.0].off);
        let (lo, hi) = self.vals.split_at_mut(off_t);
        linalg::col_sums(&mut hi[..c], &lo[off_a..off_a + r * c], r, c);
        t
    }

    /// Mean across rows: `[r x c] -> [1 x c]`.
    pub fn mean_rows(&mut self, a: Tensor) -> Tensor {
        let (r, c) = self.shape(a);
        let t = self.reduce(a, Op::MeanRows(a), 1, c);
        let (off_a, off_t) = (self.nodes[a.0].off, self.nodes[t.0].off);
        let (lo, hi) = self.vals.split_at_mut(off_t);
        linalg::col_sums(&mut hi[..c], &lo[off_a..off_a + r * c], r, c);
        let inv = 1.0 / r as f64;
        for v in &mut hi[..c] {
            *v *= inv;
        }
        t
    }

    /// Sum across columns: `[r x c] -> [r x 1]`.
    pub fn sum_cols(&mut self, a: Tensor) -> Tensor {
        let (r, c) = self.shape(a);
        let t = self.reduce(a, Op::SumCols(a), r, 1);
        let (off_a, off_t) = (self.nodes[a.0].off, self.nodes[t.0].off);
        let (lo, hi) = self.vals.split_at_mut(off_t);
        linalg::row_sums(&mut hi[..r], &lo[off_a..off_a + r * c], r, c);
        t
    }

    /// Mean across columns: `[r x c] -> [r x 1]`.
    pub fn mean_cols(&mut self, a: Tensor) -> Tensor {
        let (r, c) = self.shape(a);
        let t = self.reduce(a, Op::MeanCols(a), r, 1);
        let (off_a, off_t) = (self.nodes[a.0].off, self.nodes[t.0].off);
        let (lo, hi) = self.vals.split_at_mut(off_t);
        linalg::row_sums(&mut hi[..r], &lo[off_a..off_a + r * c], r, c);
        let inv = 1.0 / c as f64;
        for v in &mut hi[..r] {
            *v *= inv;
        }
        t
    }

    /// Sum of all entries: `[r x c] -> [1 x 1]`.
    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let (r, c) = self.shape(a);
        let t = self.reduce(a, Op::SumAll(a), 1, 1);
        let (off_a, off_t) = (self.nodes[a.0].off, self.nodes[t.0].off);
        let (lo, hi) = self.vals.split_at_mut(off_t);
        hi[0] = linalg::sum(&lo[off_a..off_a + r * c]);
        t
    }

    /// Mean of all entries: `[r x c] -> [1 x 1]`.
    pub fn mean_all(&mut self, a: Tensor) -> Tensor {
        let (r, c) = self.shape(a);
        let t = self.reduce(a, Op::MeanAll(a), 1, 1);
        let (off_a, off_t) = (self.nodes[a.0].off, self.nodes[t.0].off);
        let (lo, hi) = self.vals.split_at_mut(off_t);
        hi[0] = linalg::sum(&lo[off_a..off_a + r * c]) / (r * c) as f64;
        t
    }

    // ── fused LSTM cell ─────────────────────────────────────────────────

    /// Apply one LSTM cell step. `emit_rows = Some(m)` additionally
    /// computes the affine output head `y = wy h' + by` (`m x B`).
    ///
    /// Pushes the cell node (value = new hidden state) plus satellite
    /// nodes for the cell state and output.
    pub fn lstm_cell(
        &mut self,
        p: CellParams,
        x: Tensor,
        h_prev: Tensor,
        c_prev: Tensor,
        emit_rows: Option<usize>,
    ) -> CellOut {
        let (input, batch) = self.shape(x);
        let (hidden, hb) = self.shape(h_prev);
        assert_eq!(hb, batch, "lstm_cell: h batch mismatch");
        assert_eq!(self.shape(c_prev), (hidden, batch), "lstm_cell: c shape");
        assert_eq!(self.shape(p.wx), (4 * hidden, input), "lstm_cell: wx shape");
        assert_eq!(self.shape(p.uh), (4 * hidden, hidden), "lstm_cell: uh shape");
        assert_eq!(self.shape(p.b), (4 * hidden, 1), "lstm_cell: b shape");
        if let Some(m) = emit_rows {
            assert_eq!(self.shape(p.wy), (m, hidden), "lstm_cell: wy shape");
            assert_eq!(self.shape(p.by), (m, 1), "lstm_cell: by shape");
        }
        let d = CellDims { input, hidden, batch };
        let hb_len = hidden * batch;

        // Allocate: cache (activated gates), h value, c value, y value.
        let cache_off = self.cache.len();
        self.cache.resize(cache_off + 4 * hb_len, 0.0);
        let h_off = self.alloc(hb_len);
        let c_off = self.alloc(hb_len);
        let y_len = emit_rows.map_or(0, |m| m * batch);
        let y_off = self.alloc(y_len);

        {
            let (lo, hi) = self.vals.split_at_mut(h_off);
            let nv = |t: Tensor| {
                let n = &self.nodes[t.0];
                &lo[n.off..n.off + n.rows * n.cols]
            };
            let (h_new, rest) = hi.split_at_mut(hb_len);
            let (c_new, y_new) = rest.split_at_mut(hb_len);
            linalg::lstm_cell_forward(
                nv(p.wx),
                nv(p.uh),
                nv(p.b),
                nv(x),
                nv(h_prev),
                nv(c_prev),
                &mut self.cache[cache_off..cache_off + 4 * hb_len],
                h_new,
                c_new,
                d,
            );
            if let Some(m) = emit_rows {
                linalg::lstm_emit_forward(
                    nv(p.wy),
                    nv(p.by),
                    h_new,
                    &mut y_new[..y_len],
                    hidden,
                    batch,
                    m,
                );
            }
        }

        let ng = self.needs(x)
            || self.needs(h_prev)
            || self.needs(c_prev)
            || self.needs(p.wx)
            || self.needs(p.uh)
            || self.needs(p.b)
            || (emit_rows.is_some() && (self.needs(p.wy) || self.needs(p.by)));
        let cell = self.push(
            Op::LstmCell {
                x,
                h_prev,
                c_prev,
                wx: p.wx,
                uh: p.uh,
                b: p.b,
                wy: p.wy,
                by: p.by,
                cache_off,
                c_node: usize::MAX,
                y_node: None,
            },
            hidden,
            batch,
            h_off,
            ng,
        );
        let c_sat = self.push(Op::CellC(cell), hidden, batch, c_off, ng);
        let y_sat = emit_rows.map(|m| self.push(Op::CellY(cell), m, batch, y_off, ng));
        if let Op::LstmCell { c_node, y_node, .. } = &mut self.nodes[cell.0].op {
            *c_node = c_sat.0;
            *y_node = y_sat.map(|t| t.0);
        }
        CellOut { h: cell, c: c_sat, y: y_sat }
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-accumulate gradients of a scalar loss into every node with
    /// `needs_grad`. Nodes pushed after the loss are ignored.
    pub fn backward(&mut self, loss: Tensor) {
        {
            let n = &self.nodes[loss.0];
            assert_eq!((n.rows, n.cols), (1, 1), "backward: loss must be 1 x 1");
            assert!(n.needs_grad, "backward: loss does not depend on any gradient leaf");
        }
        self.grads.clear();
        self.grads.resize(self.vals.len(), 0.0);
        self.grads[self.nodes[loss.0].off] = 1.0;

        for k in (0..=loss.0).rev() {
            if !self.nodes[k].needs_grad {
                continue;
            }
            self.step_backward(k);
        }
        self.grads_valid = true;
    }

    /// Propagate the gradient of node `k` into its parents.
    fn step_backward(&mut self, k: usize) {
        let (rows, cols, off) = {
            let n = &self.nodes[k];
            (n.rows, n.cols, n.off)
        };
        let len = rows * cols;
        let op = self.nodes[k].op.clone();
        let vals = &self.vals;
        let (glo, ghi) = self.grads.split_at_mut(off);
        let g = &ghi[..len];
        // Parent accessors: values are free reads; gradients live in `glo`
        // because every parent precedes this node in the arena.
        let pval = |t: Tensor| {
            let n = &self.nodes[t.0];
            &vals[n.off..n.off + n.rows * n.cols]
        };
        macro_rules! pgrad {
            ($t:expr) => {{
                let n = &self.nodes[$t.0];
                &mut glo[n.off..n.off + n.rows * n.cols]
            }};
        }
        let needs = |t: Tensor| self.nodes[t.0].needs_grad;

        match op {
            Op::Leaf | Op::CellC(_) | Op::CellY(_) => {}
            Op::Add(a, b) => {
                if needs(a) {
                    linalg::acc1(pgrad!(a), g, |gv| gv);
                }
                if needs(b) {
                    linalg::acc1(pgrad!(b), g, |gv| gv);
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    linalg::acc1(pgrad!(a), g, |gv| gv);
                }
                if needs(b) {
                    linalg::acc1(pgrad!(b), g, |gv| -gv);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    linalg::acc2(pgrad!(a), g, pval(b), |gv, bv| gv * bv);
                }
                if needs(b) {
                    linalg::acc2(pgrad!(b), g, pval(a), |gv, av| gv * av);
                }
            }
            Op::Div(a, b) => {
                if needs(a) {
                    linalg::acc2(pgrad!(a), g, pval(b), |gv, bv| gv / bv);
                }
                if needs(b) {
                    let out = &vals[off..off + len];
                    let bv = pval(b);
                    let gb = pgrad!(b);
                    crate::parallel::for_each_chunk_mut(gb, MAP_CHUNK, |ci, chunk| {
                        let base = ci * MAP_CHUNK;
                        for (i, d) in chunk.iter_mut().enumerate() {
                            let idx = base + i;
                            *d -= g[idx] * out[idx] / bv[idx];
                        }
                    });
                }
            }
            Op::Neg(a) => {
                if needs(a) {
                    linalg::acc1(pgrad!(a), g, |gv| -gv);
                }
            }
            Op::Scale(a, s) => {
                if needs(a) {
                    linalg::acc1(pgrad!(a), g, |gv| s * gv);
                }
            }
            Op::AddScalar(a, _) => {
                if needs(a) {
                    linalg::acc1(pgrad!(a), g, |gv| gv);
                }
            }
            Op::Exp(a) => {
                if needs(a) {
                    let out = &vals[off..off + len];
                    let av = pval(a);
                    let ga = pgrad!(a);
                    crate::parallel::for_each_chunk_mut(ga, MAP_CHUNK, |ci, chunk| {
                        let base = ci * MAP_CHUNK;
                        for (i, d) in chunk.iter_mut().enumerate() {
                            let idx = base + i;
                            if av[idx].abs() <= EXP_CLAMP {
                                *d += g[idx] * out[idx];
                            }
                        }
                    });
                }
            }
            Op::Ln(a) => {
                if needs(a) {
                    linalg::acc2(pgrad!(a), g, pval(a), |gv, av| gv / av);
                }
            }
            Op::Sigmoid(a) => {
                if needs(a) {
                    let out = &vals[off..off + len];
                    linalg::acc2(pgrad!(a), g, out, |gv, y| gv * y * (1.0 - y));
                }
            }
            Op::Tanh(a) => {
                if needs(a) {
                    let out = &vals[off..off + len];
                    linalg::acc2(pgrad!(a), g, out, |gv, y| gv * (1.0 - y * y));
                }
            }
            Op::Softplus(a) => {
                if needs(a) {
                    linalg::acc2(pgrad!(a), g, pval(a), |gv, x| gv * linalg::sigmoid(x));
                }
            }
            Op::PowScalar(a, p) => {
                if needs(a) {
                    linalg::acc2(pgrad!(a), g, pval(a), |gv, x| gv * p * x.powf(p - 1.0));
                }
            }
            Op::ClampMin(a, floor) => {
                if needs(a) {
                    linalg::acc2(
                        pgrad!(a),
                        g,
                        pval(a),
                        |gv, x| if x >= floor { gv } else { 0.0 },
                    );
                }
            }
            Op::Matmul(a, b) => {
                let (m, kk) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                let n = self.nodes[b.0].cols;
                if needs(a) {
                    linalg::gemm_a_bt(pgrad!(a), 1.0, 1.0, g, pval(b), m, n, kk);
                }
                if needs(b) {
                    linalg::gemm_at_b(pgrad!(b), 1.0, 1.0, pval(a), g, kk, m, n);
                }
            }
            Op::VStack(parts) => {
                let mut cursor = 0usize;
                for &t in &parts {
                    let n = &self.nodes[t.0];
                    let plen = n.rows * n.cols;
                    if n.needs_grad {
                        let dst = &mut glo[n.off..n.off + plen];
                        let src = &g[cursor..cursor + plen];
                        linalg::acc1(dst, src, |gv| gv);
                    }
                    cursor += plen;
                }
            }
            Op::Rows(a, r0, _r1) => {
                if needs(a) {
                    let n = &self.nodes[a.0];
                    let dst = &mut glo[n.off + r0 * cols..n.off + r0 * cols + len];
                    linalg::acc1(dst, g, |gv| gv);
                }
            }
            Op::TileRows(a, n) => {
                if needs(a) {
                    let ga = pgrad!(a);
                    for i in 0..n {
                        for (d, &gv) in ga.iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                if needs(a) {
                    let pr = self.nodes[a.0].rows;
                    let w = if matches!(op, Op::MeanRows(_)) { 1.0 / pr as f64 } else { 1.0 };
                    let ga = pgrad!(a);
                    for r in 0..pr {
                        for (d, &gv) in ga[r * cols..(r + 1) * cols].iter_mut().zip(g) {
                            *d += w * gv;
                        }
                    }
                }
            }
            Op::SumCols(a) | Op::MeanCols(a) => {
                if needs(a) {
                    let pc = self.nodes[a.0].cols;
                    let w = if matches!(op, Op::MeanCols(_)) { 1.0 / pc as f64 } else { 1.0 };
                    let ga = pgrad!(a);
                    for r in 0..rows {
                        let gv = w * g[r];
                        for d in &mut ga[r * pc..(r + 1) * pc] {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                if needs(a) {
                    let n = &self.nodes[a.0];
                    let plen = n.rows * n.cols;
                    let w = if matches!(op, Op::MeanAll(_)) { 1.0 / plen as f64 } else { 1.0 };
                    let gv = w * g[0];
                    for d in &mut glo[n.off..n.off + plen] {
                        *d += gv;
                    }
                }
            }
            Op::LstmCell { x, h_prev, c_prev, wx, uh, b, wy, by, cache_off, c_node, y_node } => {
                let hidden = rows;
                let batch = cols;
                let input = self.nodes[x.0].rows;
                let d = CellDims { input, hidden, batch };
                let hb_len = hidden * batch;
                // Own grad = dh; satellite grads live above `off`.
                let dh = &ghi[..hb_len];
                let c_off_rel = self.nodes[c_node].off - off;
                let dc_in = &ghi[c_off_rel..c_off_rel + hb_len];
                let emitted = y_node.map(|yn| {
                    let n = &self.nodes[yn];
                    let y_rel = n.off - off;
                    EmittedHead {
                        wy: pval(wy),
                        h_new: &vals[off..off + hb_len],
                        dy: &ghi[y_rel..y_rel + n.rows * n.cols],
                    }
                });
                // Disjoint parent grad slices out of `glo`. Parameter leaves
                // of frozen players have needs_grad=false, which skips the
                // corresponding GEMMs entirely.
                let node_range = |t: Tensor| {
                    let n = &self.nodes[t.0];
                    (n.off, n.rows * n.cols, n.needs_grad)
                };
                let mut take = |t: Tensor| -> Option<&mut [f64]> {
                    let (poff, plen, ng) = node_range(t);
                    if !ng {
                        return None;
                    }
                    // SAFETY: parents are distinct nodes with disjoint
                    // arena ranges below `off`; each is taken at most once
                    // per call (the LSTM op's parents are all distinct).
                    let ptr = glo.as_mut_ptr();
                    unsafe { Some(std::slice::from_raw_parts_mut(ptr.add(poff), plen)) }
                };
                let sinks = CellGradSinks {
                    dx: take(x),
                    dh_prev: take(h_prev),
                    dc_prev: take(c_prev),
                    dwx: take(wx),
                    duh: take(uh),
                    db: take(b),
                    dwy: if y_node.is_some() { take(wy) } else { None },
                    dby: if y_node.is_some() { take(by) } else { None },
                };
                linalg::lstm_cell_backward(
                    pval(wx),
                    pval(uh),
                    pval(x),
                    pval(h_prev),
                    pval(c_prev),
                    &self.cache[cache_off..cache_off + 4 * hb_len],
                    &vals[self.nodes[c_node].off..self.nodes[c_node].off + hb_len],
                    dh,
                    Some(dc_in),
                    emitted,
                    sinks,
                    &mut self.scratch,
                    d,
                );
            }
        }
    }
}

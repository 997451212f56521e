//! Flat row-major matrices and the raw f64 kernels shared by every
//! execution path (plain evaluation, tape forward, tape backward).
//!
//! Both the autodiff tape and the no-gradient evaluator call *these*
//! functions, so the two paths produce bitwise identical forward values by
//! construction. All kernels follow the determinism contract documented in
//! [`crate::parallel`]: fixed work partitions, sequential reductions.

use crate::parallel::{self, MAP_CHUNK};

/// Exponentials are clamped to `exp(±EXP_CLAMP)` to keep early-training
/// utility values finite; clamp events are counted and surfaced.
pub const EXP_CLAMP: f64 = 50.0;

/// Column chunk width for GEMM dispatch. Output column stripes of this
/// width are computed independently (possibly concurrently); the partition
/// depends only on the matrix shape, keeping results thread-count
/// independent.
const GEMM_COL_CHUNK: usize = 256;

// ─────────────────────────────────────────────────────────────────────────
// Mat: owned row-major matrix
// ─────────────────────────────────────────────────────────────────────────

/// Owned row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    /// Build from explicit data. Panics if `data.len() != rows*cols`.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "Mat::new: {rows}x{cols} needs {} values, got {}",
            rows * cols,
            data.len()
        );
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Mat { rows, cols, data: vec![v; rows * cols] }
    }

    /// Build element-wise from `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    /// Column vector (n x 1) from a slice.
    pub fn col_vec(values: &[f64]) -> Self {
        Mat::new(values.len(), 1, values.to_vec())
    }

    /// Constant row(s): each of the `rows` rows holds `values[r]` repeated
    /// `cols` times (handy for per-player constants across a batch).
    pub fn broadcast_rows(values: &[f64], cols: usize) -> Self {
        let rows = values.len();
        let mut data = Vec::with_capacity(rows * cols);
        for &v in values {
            data.extend(std::iter::repeat(v).take(cols));
        }
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// True if every entry is finite.
    pub fn all_finite(&self) -> bool {
        all_finite(&self.data)
    }
}

/// True if every entry of the slice is finite (no NaN/Inf).
pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|v| v.is_finite())
}

// ─────────────────────────────────────────────────────────────────────────
// GEMM
// ─────────────────────────────────────────────────────────────────────────

/// Raw-pointer wrapper so disjoint column stripes can be written from
/// worker threads. Safety argument: each chunk index addresses a disjoint
/// set of output elements.
#[derive(Clone, Copy)]
struct SendPtr(*mut f64);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}
impl SendPtr {
    // Method (not field) access so edition-2021 closures capture the whole
    // wrapper — capturing the bare field would lose the Sync impl.
    #[inline]
    fn get(self) -> *mut f64 {
        self.0
    }
}

#[derive(Clone, Copy)]
struct SendConstPtr(*const f64);
unsafe impl Send for SendConstPtr {}
unsafe impl Sync for SendConstPtr {}
impl SendConstPtr {
    #[inline]
    fn get(self) -> *const f64 {
        self.0
    }
}

/// `C = beta*C + alpha * op(A) * op(B)` with explicit strides, C row-major
/// `m x n`. Dispatches fixed-width output column stripes to the worker
/// pool; per-element accumulation order is independent of the stripe that
/// computes it, so results do not depend on the thread count.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(c.len(), m * n, "gemm: output buffer size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // matrixmultiply requires k >= 1; the product is the zero matrix.
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let a_ptr = SendConstPtr(a.as_ptr());
    let b_ptr = SendConstPtr(b.as_ptr());
    let c_ptr = SendPtr(c.as_mut_ptr());
    let n_chunks = n.div_ceil(GEMM_COL_CHUNK);
    parallel::for_each_index(n_chunks, move |ci| {
        let j0 = ci * GEMM_COL_CHUNK;
        let width = GEMM_COL_CHUNK.min(n - j0);
        // SAFETY: stripes [j0, j0+width) are disjoint across chunk indices;
        // A and B are read-only; pointers outlive the loop.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                width,
                alpha,
                a_ptr.get(),
                rsa,
                csa,
                b_ptr.get().offset(j0 as isize * csb),
                rsb,
                csb,
                beta,
                c_ptr.get().add(j0),
                n as isize,
                1,
            );
        }
    });
}

/// `C[m x n] = beta*C + alpha*A[m x k] * B[k x n]` (all row-major).
pub fn gemm(
    c: &mut [f64],
    beta: f64,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
) {
    assert_eq!(a.len(), m * k, "gemm: A size");
    assert_eq!(b.len(), k * n, "gemm: B size");
    gemm_strided(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c);
}

/// `C[m x n] = beta*C + alpha*Aᵀ * B` where `A` is `k x m` row-major.
pub fn gemm_at_b(
    c: &mut [f64],
    beta: f64,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
) {
    assert_eq!(a.len(), k * m, "gemm_at_b: A size");
    assert_eq!(b.len(), k * n, "gemm_at_b: B size");
    gemm_strided(m, k, n, alpha, a, 1, m as isize, b, n as isize, 1, beta, c);
}

/// `C[m x n] = beta*C + alpha*A * Bᵀ` where `B` is `n x k` row-major.
pub fn gemm_a_bt(
    c: &mut [f64],
    beta: f64,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
) {
    assert_eq!(a.len(), m * k, "gemm_a_bt: A size");
    assert_eq!(b.len(), n * k, "gemm_a_bt: B size");
    gemm_strided(m, k, n, alpha, a, k as isize, 1, b, 1, k as isize, beta, c);
}

// ─────────────────────────────────────────────────────────────────────────
// Element-wise kernels
// ─────────────────────────────────────────────────────────────────────────

/// `dst[i] = f(a[i])` with the fixed-chunk parallel partition.
pub fn map1(dst: &mut [f64], a: &[f64], f: impl Fn(f64) -> f64 + Sync) {
    assert_eq!(dst.len(), a.len(), "map1: length mismatch");
    parallel::for_each_chunk_mut(dst, MAP_CHUNK, |ci, chunk| {
        let base = ci * MAP_CHUNK;
        for (i, d) in chunk.iter_mut().enumerate() {
            *d = f(a[base + i]);
        }
    });
}

/// `dst[i] = f(a[i], b[i])`.
pub fn map2(dst: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64 + Sync) {
    assert_eq!(dst.len(), a.len(), "map2: length mismatch (a)");
    assert_eq!(dst.len(), b.len(), "map2: length mismatch (b)");
    parallel::for_each_chunk_mut(dst, MAP_CHUNK, |ci, chunk| {
        let base = ci * MAP_CHUNK;
        for (i, d) in chunk.iter_mut().enumerate() {
            *d = f(a[base + i], b[base + i]);
        }
    });
}

/// In-place `dst[i] = f(dst[i])`.
pub fn map1_inplace(dst: &mut [f64], f: impl Fn(f64) -> f64 + Sync) {
    parallel::for_each_chunk_mut(dst, MAP_CHUNK, |_ci, chunk| {
        for d in chunk.iter_mut() {
            *d = f(*d);
        }
    });
}

/// `dst[i] += f(i-th inputs)` accumulation used by backward rules.
pub fn acc2(dst: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64 + Sync) {
    assert_eq!(dst.len(), a.len(), "acc2: length mismatch (a)");
    assert_eq!(dst.len(), b.len(), "acc2: length mismatch (b)");
    parallel::for_each_chunk_mut(dst, MAP_CHUNK, |ci, chunk| {
        let base = ci * MAP_CHUNK;
        for (i, d) in chunk.iter_mut().enumerate() {
            *d += f(a[base + i], b[base + i]);
        }
    });
}

/// `dst[i] += f(a[i])`.
pub fn acc1(dst: &mut [f64], a: &[f64], f: impl Fn(f64) -> f64 + Sync) {
    assert_eq!(dst.len(), a.len(), "acc1: length mismatch");
    parallel::for_each_chunk_mut(dst, MAP_CHUNK, |ci, chunk| {
        let base = ci * MAP_CHUNK;
        for (i, d) in chunk.iter_mut().enumerate() {
            *d += f(a[base + i]);
        }
    });
}

/// Map that also counts how many inputs satisfied a predicate (used for
/// clamp diagnostics). The count is reduced over fixed chunks in order.
pub fn map1_count(
    dst: &mut [f64],
    a: &[f64],
    f: impl Fn(f64) -> f64 + Sync,
    counted: impl Fn(f64) -> bool + Sync,
) -> usize {
    assert_eq!(dst.len(), a.len(), "map1_count: length mismatch");
    let n_chunks = dst.len().div_ceil(MAP_CHUNK).max(1);
    let counts = parallel::map_indexed(n_chunks, |ci| {
        let base = ci * MAP_CHUNK;
        let end = (base + MAP_CHUNK).min(a.len());
        let mut c = 0usize;
        for &v in &a[base..end] {
            if counted(v) {
                c += 1;
            }
        }
        c
    });
    // Writing dst separately keeps the borrow checker happy; the second
    // pass is fused into the same chunk loop.
    parallel::for_each_chunk_mut(dst, MAP_CHUNK, |ci, chunk| {
        let base = ci * MAP_CHUNK;
        for (i, d) in chunk.iter_mut().enumerate() {
            *d = f(a[base + i]);
        }
    });
    counts.into_iter().sum()
}

// ─────────────────────────────────────────────────────────────────────────
// Stable scalar functions
// ─────────────────────────────────────────────────────────────────────────

/// Numerically stable logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Exponential with the `±EXP_CLAMP` argument clamp.
#[inline]
pub fn exp_clamped(x: f64) -> f64 {
    x.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
}

// ─────────────────────────────────────────────────────────────────────────
// Reductions and broadcasts (sequential, fixed order)
// ─────────────────────────────────────────────────────────────────────────

/// Sequential sum in index order.
pub fn sum(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for &v in xs {
        s += v;
    }
    s
}

/// `out[c] = sum_r a[r,c]` for a row-major `rows x cols` buffer.
pub fn col_sums(out: &mut [f64], a: &[f64], rows: usize, cols: usize) {
    assert_eq!(out.len(), cols);
    assert_eq!(a.len(), rows * cols);
    out.fill(0.0);
    for r in 0..rows {
        let row = &a[r * cols..(r + 1) * cols];
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// `out[r] = sum_c a[r,c]`.
pub fn row_sums(out: &mut [f64], a: &[f64], rows: usize, cols: usize) {
    assert_eq!(out.len(), rows);
    assert_eq!(a.len(), rows * cols);
    for r in 0..rows {
        out[r] = sum(&a[r * cols..(r + 1) * cols]);
    }
}

/// `out[r] += sum_c a[r,c]` (accumulating variant for backward rules).
pub fn row_sums_acc(out: &mut [f64], a: &[f64], rows: usize, cols: usize) {
    assert_eq!(out.len(), rows);
    assert_eq!(a.len(), rows * cols);
    for r in 0..rows {
        out[r] += sum(&a[r * cols..(r + 1) * cols]);
    }
}

/// `dst[r,c] = a[r,c] + col[r]` (bias column broadcast across the batch).
pub fn add_col_broadcast(dst: &mut [f64], a: &[f64], col: &[f64], rows: usize, cols: usize) {
    assert_eq!(dst.len(), rows * cols);
    assert_eq!(a.len(), rows * cols);
    assert_eq!(col.len(), rows);
    parallel::for_each_chunk_mut(dst, cols, |r, chunk| {
        let bias = col[r];
        let row = &a[r * cols..r * cols + chunk.len()];
        for (d, &v) in chunk.iter_mut().zip(row) {
            *d = v + bias;
        }
    });
}

// ─────────────────────────────────────────────────────────────────────────
// Fused LSTM cell kernels
// ─────────────────────────────────────────────────────────────────────────

/// Dimensions of one batched LSTM cell application.
#[derive(Clone, Copy, Debug)]
pub struct CellDims {
    /// Input feature count (rows of `x`).
    pub input: usize,
    /// Hidden width `H`.
    pub hidden: usize,
    /// Batch size `B` (columns).
    pub batch: usize,
}

/// Fused LSTM cell forward.
///
/// Pre-activations for all four gates are computed with two GEMMs on the
/// stacked weights (`wx: [4H x I]`, `uh: [4H x H]`, gate row order
/// input/forget/output/candidate), then activated in place:
///
/// ```text
/// i = sigmoid(Wi x + Ui h + bi)        f = sigmoid(Wf x + Uf h + bf)
/// o = sigmoid(Wo x + Uo h + bo)        g = tanh  (Wc x + Uc h + bc)
/// c' = f .* c + i .* g                 h' = o .* tanh(c')
/// ```
///
/// `ifog` receives the *activated* gates (the values needed by backward).
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell_forward(
    wx: &[f64],
    uh: &[f64],
    b: &[f64],
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    ifog: &mut [f64],
    h_new: &mut [f64],
    c_new: &mut [f64],
    d: CellDims,
) {
    let (hh, bb, ii) = (d.hidden, d.batch, d.input);
    let g4 = 4 * hh;
    assert_eq!(wx.len(), g4 * ii, "lstm forward: wx size");
    assert_eq!(uh.len(), g4 * hh, "lstm forward: uh size");
    assert_eq!(b.len(), g4, "lstm forward: b size");
    assert_eq!(x.len(), ii * bb, "lstm forward: x size");
    assert_eq!(h_prev.len(), hh * bb, "lstm forward: h size");
    assert_eq!(c_prev.len(), hh * bb, "lstm forward: c size");
    assert_eq!(ifog.len(), g4 * bb, "lstm forward: ifog size");
    assert_eq!(h_new.len(), hh * bb, "lstm forward: h_new size");
    assert_eq!(c_new.len(), hh * bb, "lstm forward: c_new size");

    // z = wx*x + uh*h + b (broadcast)
    gemm(ifog, 0.0, 1.0, wx, x, g4, ii, bb);
    gemm(ifog, 1.0, 1.0, uh, h_prev, g4, hh, bb);
    parallel::for_each_chunk_mut(ifog, bb, |r, chunk| {
        let bias = b[r];
        for v in chunk.iter_mut() {
            *v += bias;
        }
    });
    // Activate: rows [0,3H) sigmoid, rows [3H,4H) tanh.
    let (sig_part, tanh_part) = ifog.split_at_mut(3 * hh * bb);
    map1_inplace(sig_part, sigmoid);
    map1_inplace(tanh_part, f64::tanh);

    // c' = f.*c + i.*g ; h' = o.*tanh(c')
    let (i_g, rest) = ifog.split_at(hh * bb);
    let (f_g, rest) = rest.split_at(hh * bb);
    let (o_g, g_g) = rest.split_at(hh * bb);
    parallel::for_each_chunk_mut(c_new, MAP_CHUNK, |ci, chunk| {
        let base = ci * MAP_CHUNK;
        for (j, cv) in chunk.iter_mut().enumerate() {
            let idx = base + j;
            *cv = f_g[idx] * c_prev[idx] + i_g[idx] * g_g[idx];
        }
    });
    parallel::for_each_chunk_mut(h_new, MAP_CHUNK, |ci, chunk| {
        let base = ci * MAP_CHUNK;
        for (j, hv) in chunk.iter_mut().enumerate() {
            let idx = base + j;
            *hv = o_g[idx] * c_new[idx].tanh();
        }
    });
}

/// Output head: `y = wy*h + by` (`wy: [m x H]`, `y: [m x B]`).
pub fn lstm_emit_forward(
    wy: &[f64],
    by: &[f64],
    h: &[f64],
    y: &mut [f64],
    hidden: usize,
    batch: usize,
    m_out: usize,
) {
    assert_eq!(wy.len(), m_out * hidden, "lstm emit: wy size");
    assert_eq!(by.len(), m_out, "lstm emit: by size");
    assert_eq!(h.len(), hidden * batch, "lstm emit: h size");
    assert_eq!(y.len(), m_out * batch, "lstm emit: y size");
    gemm(y, 0.0, 1.0, wy, h, m_out, hidden, batch);
    parallel::for_each_chunk_mut(y, batch, |r, chunk| {
        let bias = by[r];
        for v in chunk.iter_mut() {
            *v += bias;
        }
    });
}

/// Gradient sinks for [`lstm_cell_backward`]; `None` skips that gradient
/// (used to avoid computing parameter gradients of frozen players).
/// All sinks are accumulated into (`+=`).
#[derive(Default)]
pub struct CellGradSinks<'a> {
    pub dx: Option<&'a mut [f64]>,
    pub dh_prev: Option<&'a mut [f64]>,
    pub dc_prev: Option<&'a mut [f64]>,
    pub dwx: Option<&'a mut [f64]>,
    pub duh: Option<&'a mut [f64]>,
    pub db: Option<&'a mut [f64]>,
    pub dwy: Option<&'a mut [f64]>,
    pub dby: Option<&'a mut [f64]>,
}

/// Fused LSTM cell backward.
///
/// Inputs are the forward operands plus the activated gates `ifog` and the
/// new cell state `c_new` (tanh is recomputed — cheaper than caching).
/// `dh`/`dc_in` are the incoming gradients of `h_new`/`c_new`; `dy` (with
/// `wy`, `h_new`) is present when the output head was emitted.
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell_backward(
    wx: &[f64],
    uh: &[f64],
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    ifog: &[f64],
    c_new: &[f64],
    dh: &[f64],
    dc_in: Option<&[f64]>,
    emitted: Option<EmittedHead<'_>>,
    sinks: CellGradSinks<'_>,
    scratch: &mut Vec<f64>,
    d: CellDims,
) {
    let (hh, bb, ii) = (d.hidden, d.batch, d.input);
    let g4 = 4 * hh;
    let hb = hh * bb;

    // Scratch layout: [dz: 4H*B][dh_eff: H*B][dc: H*B][tc: H*B]
    scratch.clear();
    scratch.resize(g4 * bb + 3 * hb, 0.0);
    let (dz, rest) = scratch.split_at_mut(g4 * bb);
    let (dh_eff, rest) = rest.split_at_mut(hb);
    let (dc, tc) = rest.split_at_mut(hb);

    // dh_eff = dh (+ wyᵀ dy); head parameter grads.
    dh_eff.copy_from_slice(dh);
    if let Some(head) = &emitted {
        let m_out = head.dy.len() / bb;
        gemm_at_b(dh_eff, 1.0, 1.0, head.wy, head.dy, hh, m_out, bb);
    }

    let i_g = &ifog[0..hb];
    let f_g = &ifog[hb..2 * hb];
    let o_g = &ifog[2 * hb..3 * hb];
    let g_g = &ifog[3 * hb..4 * hb];

    // tc = tanh(c'); dc = dh_eff.*o.*(1-tc^2) + dc_in
    map1(tc, c_new, f64::tanh);
    parallel::for_each_chunk_mut(dc, MAP_CHUNK, |ci, chunk| {
        let base = ci * MAP_CHUNK;
        for (j, v) in chunk.iter_mut().enumerate() {
            let idx = base + j;
            let t = tc[idx];
            let mut g = dh_eff[idx] * o_g[idx] * (1.0 - t * t);
            if let Some(dci) = dc_in {
                g += dci[idx];
            }
            *v = g;
        }
    });

    // Gate pre-activation gradients.
    {
        let (dzi, rest) = dz.split_at_mut(hb);
        let (dzf, rest) = rest.split_at_mut(hb);
        let (dzo, dzg) = rest.split_at_mut(hb);
        parallel::for_each_chunk_mut(dzi, MAP_CHUNK, |ci, chunk| {
            let base = ci * MAP_CHUNK;
            for (j, v) in chunk.iter_mut().enumerate() {
                let idx = base + j;
                let iv = i_g[idx];
                *v = dc[idx] * g_g[idx] * iv * (1.0 - iv);
            }
        });
        parallel::for_each_chunk_mut(dzf, MAP_CHUNK, |ci, chunk| {
            let base = ci * MAP_CHUNK;
            for (j, v) in chunk.iter_mut().enumerate() {
                let idx = base + j;
                let fv = f_g[idx];
                *v = dc[idx] * c_prev[idx] * fv * (1.0 - fv);
            }
        });
        parallel::for_each_chunk_mut(dzo, MAP_CHUNK, |ci, chunk| {
            let base = ci * MAP_CHUNK;
            for (j, v) in chunk.iter_mut().enumerate() {
                let idx = base + j;
                let ov = o_g[idx];
                *v = dh_eff[idx] * tc[idx] * ov * (1.0 - ov);
            }
        });
        parallel::for_each_chunk_mut(dzg, MAP_CHUNK, |ci, chunk| {
            let base = ci * MAP_CHUNK;
            for (j, v) in chunk.iter_mut().enumerate() {
                let idx = base + j;
                let gv = g_g[idx];
                *v = dc[idx] * i_g[idx] * (1.0 - gv * gv);
            }
        });
    }

    let mut sinks = sinks;
    if let Some(dcp) = sinks.dc_prev.as_deref_mut() {
        acc2(dcp, dc, f_g, |a, b| a * b);
    }
    if let Some(dx) = sinks.dx.as_deref_mut() {
        gemm_at_b(dx, 1.0, 1.0, wx, dz, ii, g4, bb);
    }
    if let Some(dhp) = sinks.dh_prev.as_deref_mut() {
        gemm_at_b(dhp, 1.0, 1.0, uh, dz, hh, g4, bb);
    }
    if let Some(dwx) = sinks.dwx.as_deref_mut() {
        gemm_a_bt(dwx, 1.0, 1.0, dz, x, g4, bb, ii);
    }
    if let Some(duh) = sinks.duh.as_deref_mut() {
        gemm_a_bt(duh, 1.0, 1.0, dz, h_prev, g4, bb, hh);
    }
    if let Some(db) = sinks.db.as_deref_mut() {
        row_sums_acc(db, dz, g4, bb);
    }
    if let Some(head) = &emitted {
        let m_out = head.dy.len() / bb;
        if let Some(dwy) = sinks.dwy.as_deref_mut() {
            gemm_a_bt(dwy, 1.0, 1.0, head.dy, head.h_new, m_out, bb, hh);
        }
        if let Some(dby) = sinks.dby.as_deref_mut() {
            row_sums_acc(dby, head.dy, m_out, bb);
        }
    }
}

/// Forward values needed to backpropagate through the emitted output head.
pub struct EmittedHead<'a> {
    pub wy: &'a [f64],
    pub h_new: &'a [f64],
    pub dy: &'a [f64],
}

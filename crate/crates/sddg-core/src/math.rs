//! A small tensor-expression interface with two interpreters.
//!
//! Game dynamics and cost functionals are written once against [`Math`]
//! and executed either on plain matrices ([`RawMath`], used for
//! evaluation, oracles, and streaming Monte Carlo) or on the autodiff
//! tape ([`TapeMath`], used for training). Both interpreters call the
//! identical raw kernels, so forward values agree bitwise — evaluation
//! results never depend on whether gradients were recorded.

use crate::linalg::{self, CellDims, Mat};
use crate::tape::{CellParams, Tape, Tensor};

/// LSTM policy parameters lifted into an interpreter's value type.
#[derive(Clone)]
pub struct PolicyHandles<M> {
    pub wx: M,
    pub uh: M,
    pub b: M,
    pub wy: M,
    pub by: M,
}

/// Tensor-expression operations shared by both interpreters.
///
/// Shapes follow the tape's conventions: row-major `rows x cols`
/// matrices, batch always in columns. Shape misuse panics (programmer
/// error); data-dependent failures are the caller's to detect via
/// [`Math::all_finite`].
pub trait Math {
    type M: Clone;

    fn constant(&mut self, m: &Mat) -> Self::M;
    /// Lift a parameter matrix; `needs_grad` marks it as a gradient leaf
    /// on the recording interpreter (ignored by the raw one).
    fn param(&mut self, m: &Mat, needs_grad: bool) -> Self::M {
        let _ = needs_grad;
        self.constant(m)
    }
    fn shape(&self, x: &Self::M) -> (usize, usize);
    fn to_mat(&self, x: &Self::M) -> Mat;
    fn all_finite(&self, x: &Self::M) -> bool;

    fn add(&mut self, a: &Self::M, b: &Self::M) -> Self::M;
    fn sub(&mut self, a: &Self::M, b: &Self::M) -> Self::M;
    fn mul(&mut self, a: &Self::M, b: &Self::M) -> Self::M;
    fn div(&mut self, a: &Self::M, b: &Self::M) -> Self::M;
    fn neg(&mut self, a: &Self::M) -> Self::M;
    fn scale(&mut self, a: &Self::M, s: f64) -> Self::M;
    fn add_scalar(&mut self, a: &Self::M, s: f64) -> Self::M;
    /// Clamped exponential (`±EXP_CLAMP` argument bound, events counted).
    fn exp(&mut self, a: &Self::M) -> Self::M;
    fn ln(&mut self, a: &Self::M) -> Self::M;
    fn softplus(&mut self, a: &Self::M) -> Self::M;
    fn powf(&mut self, a: &Self::M, p: f64) -> Self::M;
    /// `max(x, floor)`, clamp events counted.
    fn clamp_min(&mut self, a: &Self::M, floor: f64) -> Self::M;

    fn matmul(&mut self, a: &Self::M, b: &Self::M) -> Self::M;
    fn vstack(&mut self, parts: &[Self::M]) -> Self::M;
    fn rows(&mut self, a: &Self::M, r0: usize, r1: usize) -> Self::M;
    fn row(&mut self, a: &Self::M, r: usize) -> Self::M {
        self.rows(a, r, r + 1)
    }
    fn tile_rows(&mut self, a: &Self::M, n: usize) -> Self::M;

    fn sum_rows(&mut self, a: &Self::M) -> Self::M;
    fn mean_rows(&mut self, a: &Self::M) -> Self::M;
    fn sum_cols(&mut self, a: &Self::M) -> Self::M;
    fn mean_cols(&mut self, a: &Self::M) -> Self::M;
    fn sum_all(&mut self, a: &Self::M) -> Self::M;
    fn mean_all(&mut self, a: &Self::M) -> Self::M;

    /// One LSTM cell step; `emit_rows = Some(m)` also returns the affine
    /// output head `y` (`m x batch`).
    fn lstm_cell(
        &mut self,
        p: &PolicyHandles<Self::M>,
        x: &Self::M,
        h: &Self::M,
        c: &Self::M,
        emit_rows: Option<usize>,
    ) -> (Self::M, Self::M, Option<Self::M>);

    /// Exp-argument clamp events seen so far.
    fn exp_clamp_count(&self) -> usize;
    /// Floor clamp events seen so far.
    fn floor_clamp_count(&self) -> usize;
}

// ─────────────────────────────────────────────────────────────────────────
// RawMath: eager evaluation on plain matrices
// ─────────────────────────────────────────────────────────────────────────

/// No-gradient interpreter over [`Mat`].
#[derive(Default)]
pub struct RawMath {
    exp_clamps: usize,
    floor_clamps: usize,
    gate_scratch: Vec<f64>,
}

impl RawMath {
    pub fn new() -> Self {
        Self::default()
    }

    fn map2(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64 + Sync, name: &str) -> Mat {
        assert_eq!(a.shape(), b.shape(), "{name}: shape mismatch");
        let mut out = Mat::zeros(a.rows(), a.cols());
        linalg::map2(out.as_mut_slice(), a.as_slice(), b.as_slice(), f);
        out
    }

    fn map1(a: &Mat, f: impl Fn(f64) -> f64 + Sync) -> Mat {
        let mut out = Mat::zeros(a.rows(), a.cols());
        linalg::map1(out.as_mut_slice(), a.as_slice(), f);
        out
    }
}

impl Math for RawMath {
    type M = Mat;

    fn constant(&mut self, m: &Mat) -> Mat {
        m.clone()
    }

    fn shape(&self, x: &Mat) -> (usize, usize) {
        x.shape()
    }

    fn to_mat(&self, x: &Mat) -> Mat {
        x.clone()
    }

    fn all_finite(&self, x: &Mat) -> bool {
        x.all_finite()
    }

    fn add(&mut self, a: &Mat, b: &Mat) -> Mat {
        Self::map2(a, b, |x, y| x + y, "add")
    }

    fn sub(&mut self, a: &Mat, b: &Mat) -> Mat {
        Self::map2(a, b, |x, y| x - y, "sub")
    }

    fn mul(&mut self, a: &Mat, b: &Mat) -> Mat {
        Self::map2(a, b, |x, y| x * y, "mul")
    }

    fn div(&mut self, a: &Mat, b: &Mat) -> Mat {
        Self::map2(a, b, |x, y| x / y, "div")
    }

    fn neg(&mut self, a: &Mat) -> Mat {
        Self::map1(a, |x| -x)
    }

    fn scale(&mut self, a: &Mat, s: f64) -> Mat {
        Self::map1(a, |x| s * x)
    }

    fn add_scalar(&mut self, a: &Mat, s: f64) -> Mat {
        Self::map1(a, |x| x + s)
    }

    fn exp(&mut self, a: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows(), a.cols());
        self.exp_clamps += linalg::map1_count(
            out.as_mut_slice(),
            a.as_slice(),
            linalg::exp_clamped,
            |x| x.abs() > linalg::EXP_CLAMP,
        );
        out
    }

    fn ln(&mut self, a: &Mat) -> Mat {
        Self::map1(a, f64::ln)
    }

    fn softplus(&mut self, a: &Mat) -> Mat {
        Self::map1(a, linalg::softplus)
    }

    fn powf(&mut self, a: &Mat, p: f64) -> Mat {
        Self::map1(a, |x| x.powf(p))
    }

    fn clamp_min(&mut self, a: &Mat, floor: f64) -> Mat {
        let mut out = Mat::zeros(a.rows(), a.cols());
        self.floor_clamps +=
            linalg::map1_count(out.as_mut_slice(), a.as_slice(), |x| x.max(floor), |x| x < floor);
        out
    }

    fn matmul(&mut self, a: &Mat, b: &Mat) -> Mat {
        let (m, k) = a.shape();
        let (k2, n) = b.shape();
        assert_eq!(k, k2, "matmul: inner dims");
        let mut out = Mat::zeros(m, n);
        linalg::gemm(out.as_mut_slice(), 0.0, 1.0, a.as_slice(), b.as_slice(), m, k, n);
        out
    }

    fn vstack(&mut self, parts: &[Mat]) -> Mat {
        assert!(!parts.is_empty(), "vstack: no inputs");
        let cols = parts[0].cols();
        let rows: usize = parts
            .iter()
            .map(|p| {
                assert_eq!(p.cols(), cols, "vstack: column mismatch");
                p.rows()
            })
            .sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(p.as_slice());
        }
        Mat::new(rows, cols, data)
    }

    fn rows(&mut self, a: &Mat, r0: usize, r1: usize) -> Mat {
        assert!(r0 < r1 && r1 <= a.rows(), "rows: range");
        let c = a.cols();
        Mat::new(r1 - r0, c, a.as_slice()[r0 * c..r1 * c].to_vec())
    }

    fn tile_rows(&mut self, a: &Mat, n: usize) -> Mat {
        assert_eq!(a.rows(), 1, "tile_rows: input must be 1 x c");
        let c = a.cols();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(a.as_slice());
        }
        Mat::new(n, c, data)
    }

    fn sum_rows(&mut self, a: &Mat) -> Mat {
        let mut out = Mat::zeros(1, a.cols());
        linalg::col_sums(out.as_mut_slice(), a.as_slice(), a.rows(), a.cols());
        out
    }

    fn mean_rows(&mut self, a: &Mat) -> Mat {
        let mut out = self.sum_rows(a);
        let inv = 1.0 / a.rows() as f64;
        for v in out.as_mut_slice() {
            *v *= inv;
        }
        out
    }

    fn sum_cols(&mut self, a: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows(), 1);
        linalg::row_sums(out.as_mut_slice(), a.as_slice(), a.rows(), a.cols());
        out
    }

    fn mean_cols(&mut self, a: &Mat) -> Mat {
        let mut out = self.sum_cols(a);
        let inv = 1.0 / a.cols() as f64;
        for v in out.as_mut_slice() {
            *v *= inv;
        }
        out
    }

    fn sum_all(&mut self, a: &Mat) -> Mat {
        Mat::new(1, 1, vec![linalg::sum(a.as_slice())])
    }

    fn mean_all(&mut self, a: &Mat) -> Mat {
        Mat::new(1, 1, vec![linalg::sum(a.as_slice()) / a.len() as f64])
    }

    fn lstm_cell(
        &mut self,
        p: &PolicyHandles<Mat>,
        x: &Mat,
        h: &Mat,
        c: &Mat,
        emit_rows: Option<usize>,
    ) -> (Mat, Mat, Option<Mat>) {
        let (input, batch) = x.shape();
        let hidden = h.rows();
        let d = CellDims { input, hidden, batch };
        self.gate_scratch.clear();
        self.gate_scratch.resize(4 * hidden * batch, 0.0);
        let mut h_new = Mat::zeros(hidden, batch);
        let mut c_new = Mat::zeros(hidden, batch);
        linalg::lstm_cell_forward(
            p.wx.as_slice(),
            p.uh.as_slice(),
            p.b.as_slice(),
            x.as_slice(),
            h.as_slice(),
            c.as_slice(),
            &mut self.gate_scratch,
            h_new.as_mut_slice(),
            c_new.as_mut_slice(),
            d,
        );
        let y = emit_rows.map(|m| {
            let mut y = Mat::zeros(m, batch);
            linalg::lstm_emit_forward(
                p.wy.as_slice(),
                p.by.as_slice(),
                h_new.as_slice(),
                y.as_mut_slice(),
                hidden,
                batch,
                m,
            );
            y
        });
        (h_new, c_new, y)
    }

    fn exp_clamp_count(&self) -> usize {
        self.exp_clamps
    }

    fn floor_clamp_count(&self) -> usize {
        self.floor_clamps
    }
}

// ─────────────────────────────────────────────────────────────────────────
// TapeMath: recording interpreter
// ─────────────────────────────────────────────────────────────────────────

/// Gradient-recording interpreter; wraps a [`Tape`].
pub struct TapeMath<'t> {
    pub tape: &'t mut Tape,
}

impl<'t> TapeMath<'t> {
    pub fn new(tape: &'t mut Tape) -> Self {
        TapeMath { tape }
    }
}

impl Math for TapeMath<'_> {
    type M = Tensor;

    fn constant(&mut self, m: &Mat) -> Tensor {
        self.tape.constant(m)
    }

    fn param(&mut self, m: &Mat, needs_grad: bool) -> Tensor {
        self.tape.leaf(m, needs_grad)
    }

    fn shape(&self, x: &Tensor) -> (usize, usize) {
        self.tape.shape(*x)
    }

    fn to_mat(&self, x: &Tensor) -> Mat {
        self.tape.value_mat(*x)
    }

    fn all_finite(&self, x: &Tensor) -> bool {
        linalg::all_finite(self.tape.value(*x))
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.tape.add(*a, *b)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.tape.sub(*a, *b)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.tape.mul(*a, *b)
    }

    fn div(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.tape.div(*a, *b)
    }

    fn neg(&mut self, a: &Tensor) -> Tensor {
        self.tape.neg(*a)
    }

    fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        self.tape.scale(*a, s)
    }

    fn add_scalar(&mut self, a: &Tensor, s: f64) -> Tensor {
        self.tape.add_scalar(*a, s)
    }

    fn exp(&mut self, a: &Tensor) -> Tensor {
        self.tape.exp(*a)
    }

    fn ln(&mut self, a: &Tensor) -> Tensor {
        self.tape.ln(*a)
    }

    fn softplus(&mut self, a: &Tensor) -> Tensor {
        self.tape.softplus(*a)
    }

    fn powf(&mut self, a: &Tensor, p: f64) -> Tensor {
        self.tape.powf(*a, p)
    }

    fn clamp_min(&mut self, a: &Tensor, floor: f64) -> Tensor {
        self.tape.clamp_min(*a, floor)
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        self.tape.matmul(*a, *b)
    }

    fn vstack(&mut self, parts: &[Tensor]) -> Tensor {
        self.tape.vstack(parts)
    }

    fn rows(&mut self, a: &Tensor, r0: usize, r1: usize) -> Tensor {
        self.tape.rows(*a, r0, r1)
    }

    fn tile_rows(&mut self, a: &Tensor, n: usize) -> Tensor {
        self.tape.tile_rows(*a, n)
    }

    fn sum_rows(&mut self, a: &Tensor) -> Tensor {
        self.tape.sum_rows(*a)
    }

    fn mean_rows(&mut self, a: &Tensor) -> Tensor {
        self.tape.mean_rows(*a)
    }

    fn sum_cols(&mut self, a: &Tensor) -> Tensor {
        self.tape.sum_cols(*a)
    }

    fn mean_cols(&mut self, a: &Tensor) -> Tensor {
        self.tape.mean_cols(*a)
    }

    fn sum_all(&mut self, a: &Tensor) -> Tensor {
        self.tape.sum_all(*a)
    }

    fn mean_all(&mut self, a: &Tensor) -> Tensor {
        self.tape.mean_all(*a)
    }

    fn lstm_cell(
        &mut self,
        p: &PolicyHandles<Tensor>,
        x: &Tensor,
        h: &Tensor,
        c: &Tensor,
        emit_rows: Option<usize>,
    ) -> (Tensor, Tensor, Option<Tensor>) {
        let params = CellParams { wx: p.wx, uh: p.uh, b: p.b, wy: p.wy, by: p.by };
        let out = self.tape.lstm_cell(params, *x, *h, *c, emit_rows);
        (out.h, out.c, out.y)
    }

    fn exp_clamp_count(&self) -> usize {
        self.tape.exp_clamp_count()
    }

    fn floor_clamp_count(&self) -> usize {
        self.tape.floor_clamp_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn test_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        Mat::from_fn(rows, cols, |r, c| {
            rng::uniform_in(seed, &[r as u64, c as u64], -1.2, 1.2)
        })
    }

    /// A formula touching most ops, written once against Math.
    fn formula<MA: Math>(m: &mut MA, a: &Mat, b: &Mat) -> Mat {
        let x = m.constant(a);
        let y = m.constant(b);
        let s = m.add(&x, &y);
        let p = m.mul(&s, &x);
        let e = m.add_scalar(&p, 2.5);
        let l = m.ln(&e);
        let sp = m.softplus(&l);
        let pw = m.powf(&e, 0.7);
        let cm = m.clamp_min(&y, 0.0);
        let st = m.vstack(&[sp, pw, cm]);
        let r = m.rows(&st, 1, 3);
        let mr = m.mean_rows(&r);
        let t = m.tile_rows(&mr, 2);
        let sc = m.scale(&t, -0.3);
        let ex = m.exp(&sc);
        let msc = m.mean_cols(&ex);
        let total = m.sum_all(&msc);
        m.to_mat(&total)
    }

    #[test]
    fn raw_and_tape_agree_bitwise() {
        let a = test_mat(3, 5, 7);
        let b = test_mat(3, 5, 8);
        let mut raw = RawMath::new();
        let want = formula(&mut raw, &a, &b);
        let mut tape = Tape::new();
        let mut tm = TapeMath::new(&mut tape);
        let got = formula(&mut tm, &a, &b);
        assert_eq!(want.as_slice(), got.as_slice(), "raw vs tape forward values must be bitwise equal");
    }

    #[test]
    fn lstm_cell_agrees_bitwise_across_interpreters() {
        let hidden = 4;
        let input = 3;
        let batch = 6;
        let p_raw = PolicyHandles {
            wx: test_mat(4 * hidden, input, 1),
            uh: test_mat(4 * hidden, hidden, 2),
            b: test_mat(4 * hidden, 1, 3),
            wy: test_mat(2, hidden, 4),
            by: test_mat(2, 1, 5),
        };
        let x = test_mat(input, batch, 6);
        let h0 = test_mat(hidden, batch, 7);
        let c0 = test_mat(hidden, batch, 8);

        let mut raw = RawMath::new();
        let (h1, c1, y1) = {
            let xr = raw.constant(&x);
            let hr = raw.constant(&h0);
            let cr = raw.constant(&c0);
            raw.lstm_cell(&p_raw, &xr, &hr, &cr, Some(2))
        };

        let mut tape = Tape::new();
        let mut tm = TapeMath::new(&mut tape);
        let p_tape = PolicyHandles {
            wx: tm.constant(&p_raw.wx),
            uh: tm.constant(&p_raw.uh),
            b: tm.constant(&p_raw.b),
            wy: tm.constant(&p_raw.wy),
            by: tm.constant(&p_raw.by),
        };
        let xt = tm.constant(&x);
        let ht = tm.constant(&h0);
        let ct = tm.constant(&c0);
        let (h1t, c1t, y1t) = tm.lstm_cell(&p_tape, &xt, &ht, &ct, Some(2));
        assert_eq!(h1.as_slice(), tm.to_mat(&h1t).as_slice());
        assert_eq!(c1.as_slice(), tm.to_mat(&c1t).as_slice());
        assert_eq!(y1.unwrap().as_slice(), tm.to_mat(&y1t.unwrap()).as_slice());
    }

    #[test]
    fn clamp_counters_match_across_interpreters() {
        let a = Mat::new(1, 4, vec![-60.0, 0.0, 60.0, 1.0]);
        let mut raw = RawMath::new();
        let ar = raw.constant(&a);
        let _ = raw.exp(&ar);
        let _ = raw.clamp_min(&ar, -1.0);
        let mut tape = Tape::new();
        let mut tm = TapeMath::new(&mut tape);
        let at = tm.constant(&a);
        let _ = tm.exp(&at);
        let _ = tm.clamp_min(&at, -1.0);
        assert_eq!(raw.exp_clamp_count(), 2);
        assert_eq!(raw.floor_clamp_count(), 1);
        assert_eq!(tm.exp_clamp_count(), raw.exp_clamp_count());
        assert_eq!(tm.floor_clamp_count(), raw.floor_clamp_count());
    }
}

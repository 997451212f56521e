//! LSTM policy parameters, initialization, and per-channel output maps.
//!
//! Each player's closed-loop control is an LSTM: at step k the cell
//! consumes `x_k = (t_k, X̂_k)` and the previous hidden/cell state, and
//! (for k ≥ 0) emits the control through an affine head followed by a
//! per-channel output map. Storage is gate-stacked (`[4H x I]`, gate row
//! order input/forget/output/candidate) because the fused kernels want
//! two big GEMMs; the per-gate views expected by the checkpoint format
//! are exposed as accessors.

use crate::diag;
use crate::linalg::Mat;
use crate::math::{Math, PolicyHandles};
use crate::rng;

/// Default hidden width (2^6).
pub const DEFAULT_HIDDEN: usize = 64;

/// Gate blocks in stacking order.
const GATES: [&str; 4] = ["i", "f", "o", "c"];

/// Per-channel transform applied to the affine head's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputMap {
    /// Raw affine output.
    Identity,
    /// Softplus on one channel (row), identity elsewhere. Used for the
    /// consumption rate, which must stay positive by construction.
    SoftplusChannel(usize),
}

impl OutputMap {
    /// Apply to a `m x batch` head output.
    pub fn apply<MA: Math>(&self, m: &mut MA, y: &MA::M) -> MA::M {
        match *self {
            OutputMap::Identity => y.clone(),
            OutputMap::SoftplusChannel(ch) => {
                let (rows, _) = m.shape(y);
                assert!(ch < rows, "output map: channel {ch} out of {rows}");
                let mut parts: Vec<MA::M> = Vec::with_capacity(rows);
                for r in 0..rows {
                    let row = m.row(y, r);
                    parts.push(if r == ch { m.softplus(&row) } else { row });
                }
                m.vstack(&parts)
            }
        }
    }
}

/// LSTM parameters for one player (gate-stacked storage).
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    n_input: usize,
    n_hidden: usize,
    n_output: usize,
    wx: Mat,
    uh: Mat,
    b: Mat,
    wy: Mat,
    by: Mat,
}

impl LstmParams {
    /// Random initialization: weights uniform on ±1/√N_hidden, biases
    /// zero except the forget-gate bias at +1. Deterministic in `seed`.
    pub fn init(seed: u64, n_input: usize, n_hidden: usize, n_output: usize) -> Self {
        let bound = 1.0 / (n_hidden as f64).sqrt();
        let draw = |tag: &str, rows: usize, cols: usize| {
            let s = rng::derive_seed_tagged(seed, tag, &[]);
            Mat::from_fn(rows, cols, |r, c| {
                rng::uniform_in(s, &[r as u64, c as u64], -bound, bound)
            })
        };
        let mut b = Mat::zeros(4 * n_hidden, 1);
        for r in n_hidden..2 * n_hidden {
            b.set(r, 0, 1.0); // forget gate opens near 1: stable early memory
        }
        LstmParams {
            n_input,
            n_hidden,
            n_output,
            wx: draw("wx", 4 * n_hidden, n_input),
            uh: draw("uh", 4 * n_hidden, n_hidden),
            b,
            wy: draw("wy", n_output, n_hidden),
            by: Mat::zeros(n_output, 1),
        }
    }

    /// All-zero parameters (useful for fixed-point tests).
    pub fn zeros(n_input: usize, n_hidden: usize, n_output: usize) -> Self {
        LstmParams {
            n_input,
            n_hidden,
            n_output,
            wx: Mat::zeros(4 * n_hidden, n_input),
            uh: Mat::zeros(4 * n_hidden, n_hidden),
            b: Mat::zeros(4 * n_hidden, 1),
            wy: Mat::zeros(n_output, n_hidden),
            by: Mat::zeros(n_output, 1),
        }
    }

    pub fn n_input(&self) -> usize {
        self.n_input
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    pub fn n_output(&self) -> usize {
        self.n_output
    }

    /// Stacked weights (internal layout), for the simulation kernels.
    pub fn stacked(&self) -> (&Mat, &Mat, &Mat, &Mat, &Mat) {
        (&self.wx, &self.uh, &self.b, &self.wy, &self.by)
    }

    /// Per-gate view of an input/recurrent/bias block: `which` in
    /// {"i","f","o","c"} for the gates, plus "y" for the output head.
    pub fn gate_block(&self, array: &str, which: &str) -> Mat {
        let h = self.n_hidden;
        let gi = GATES.iter().position(|&g| g == which);
        match (array, gi) {
            ("W", Some(g)) => slice_rows(&self.wx, g * h, (g + 1) * h),
            ("U", Some(g)) => slice_rows(&self.uh, g * h, (g + 1) * h),
            ("b", Some(g)) => slice_rows(&self.b, g * h, (g + 1) * h),
            ("W", None) if which == "y" => self.wy.clone(),
            ("b", None) if which == "y" => self.by.clone(),
            _ => panic!("gate_block: unknown block {array}_{which}"),
        }
    }

    /// Named per-gate arrays in checkpoint order:
    /// `W_i, W_f, W_o, W_c, U_i, …, b_y`.
    pub fn named_arrays(&self) -> Vec<(String, Mat)> {
        let mut out = Vec::with_capacity(14);
        for prefix in ["W", "U", "b"] {
            for g in GATES {
                out.push((format!("{prefix}_{g}"), self.gate_block(prefix, g)));
            }
        }
        out.push(("W_y".to_string(), self.wy.clone()));
        out.push(("b_y".to_string(), self.by.clone()));
        out
    }

    /// Rebuild from named arrays (inverse of [`Self::named_arrays`]).
    pub fn from_named_arrays(
        arrays: &[(String, Mat)],
        n_input: usize,
        n_hidden: usize,
        n_output: usize,
    ) -> Result<Self, crate::SddgError> {
        let mut p = LstmParams::zeros(n_input, n_hidden, n_output);
        let find = |name: &str| -> Result<&Mat, crate::SddgError> {
            arrays
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m)
                .ok_or_else(|| crate::SddgError::InvalidContainer(format!("missing array {name}")))
        };
        for (gi, g) in GATES.iter().enumerate() {
            let (r0, r1) = (gi * n_hidden, (gi + 1) * n_hidden);
            copy_rows(&mut p.wx, r0, find(&format!("W_{g}"))?)?;
            copy_rows(&mut p.uh, r0, find(&format!("U_{g}"))?)?;
            copy_rows(&mut p.b, r0, find(&format!("b_{g}"))?)?;
            debug_assert!(r1 <= 4 * n_hidden);
        }
        p.wy = check_shape(find("W_y")?, n_output, n_hidden)?;
        p.by = check_shape(find("b_y")?, n_output, 1)?;
        Ok(p)
    }

    /// Total scalar parameter count.
    pub fn dim(&self) -> usize {
        self.wx.len() + self.uh.len() + self.b.len() + self.wy.len() + self.by.len()
    }

    /// Concatenate all parameters into one flat vector
    /// (order: wx, uh, b, wy, by) — the optimizer's view.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(self.wx.as_slice());
        out.extend_from_slice(self.uh.as_slice());
        out.extend_from_slice(self.b.as_slice());
        out.extend_from_slice(self.wy.as_slice());
        out.extend_from_slice(self.by.as_slice());
        out
    }

    /// Overwrite parameters from a flat vector (inverse of `flatten`).
    pub fn unflatten(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.dim(), "unflatten: length mismatch");
        let mut cur = 0usize;
        for m in [&mut self.wx, &mut self.uh, &mut self.b, &mut self.wy, &mut self.by] {
            let len = m.len();
            m.as_mut_slice().copy_from_slice(&flat[cur..cur + len]);
            cur += len;
        }
    }

    /// Lift into an interpreter. `needs_grad` marks the parameters as
    /// gradient leaves (only meaningful on the tape path).
    pub fn handles<MA: Math>(&self, m: &mut MA, needs_grad: bool) -> PolicyHandles<MA::M> {
        PolicyHandles {
            wx: m.param(&self.wx, needs_grad),
            uh: m.param(&self.uh, needs_grad),
            b: m.param(&self.b, needs_grad),
            wy: m.param(&self.wy, needs_grad),
            by: m.param(&self.by, needs_grad),
        }
    }
}

fn slice_rows(m: &Mat, r0: usize, r1: usize) -> Mat {
    let c = m.cols();
    Mat::new(r1 - r0, c, m.as_slice()[r0 * c..r1 * c].to_vec())
}

fn copy_rows(dst: &mut Mat, r0: usize, src: &Mat) -> Result<(), crate::SddgError> {
    if src.cols() != dst.cols() {
        return Err(crate::SddgError::InvalidContainer(format!(
            "array column mismatch: {} vs {}",
            src.cols(),
            dst.cols()
        )));
    }
    let c = dst.cols();
    let start = r0 * c;
    dst.as_mut_slice()[start..start + src.len()].copy_from_slice(src.as_slice());
    Ok(())
}

fn check_shape(m: &Mat, rows: usize, cols: usize) -> Result<Mat, crate::SddgError> {
    if m.shape() != (rows, cols) {
        return Err(crate::SddgError::InvalidContainer(format!(
            "array shape {:?}, want ({rows}, {cols})",
            m.shape()
        )));
    }
    Ok(m.clone())
}

/// One player's policy: parameters plus the output transform.
#[derive(Clone, Debug)]
pub struct LstmPolicy {
    pub params: LstmParams,
    pub output_map: OutputMap,
}

impl LstmPolicy {
    pub fn new(params: LstmParams, output_map: OutputMap) -> Self {
        LstmPolicy { params, output_map }
    }
}

/// Initial hidden/cell state at the start of the warm-up recurrence:
/// `(X̂ʲ₀, 0, …, 0)` per batch column when the state dimension equals the
/// player count (always true for the benchmark games); zeros plus a
/// warning otherwise.
pub fn init_hidden(x0_player: f64, n_hidden: usize, n_batch: usize, n_equals_players: bool) -> Mat {
    if !n_equals_players {
        diag::warn("init_hidden: state dimension != player count; falling back to zero init");
        return Mat::zeros(n_hidden, n_batch);
    }
    Mat::from_fn(n_hidden, n_batch, |r, _| if r == 0 { x0_player } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::RawMath;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = LstmParams::init(42, 11, 64, 2);
        let b = LstmParams::init(42, 11, 64, 2);
        assert_eq!(a, b);
        let c = LstmParams::init(43, 11, 64, 2);
        assert_ne!(a, c);
        assert_eq!(a.dim(), 4 * 64 * 11 + 4 * 64 * 64 + 4 * 64 + 2 * 64 + 2);
    }

    #[test]
    fn init_biases_zero_except_forget_at_one() {
        let p = LstmParams::init(7, 3, 8, 1);
        for g in ["i", "o", "c"] {
            assert_eq!(p.gate_block("b", g).as_slice(), &[0.0; 8], "b_{g}");
        }
        assert_eq!(p.gate_block("b", "f").as_slice(), &[1.0; 8]);
        assert_eq!(p.gate_block("b", "y").as_slice(), &[0.0]);
    }

    #[test]
    fn init_weights_bounded_and_centered() {
        let h = 64;
        let p = LstmParams::init(123, 11, h, 1);
        let bound = 1.0 / (h as f64).sqrt();
        let w = p.gate_block("W", "i");
        let mut sum = 0.0;
        for &v in w.as_slice() {
            assert!(v.abs() <= bound);
            sum += v;
        }
        let n = w.len() as f64;
        let se = bound / (3.0f64).sqrt() / n.sqrt(); // sd of U(±bound) = bound/√3
        assert!((sum / n).abs() < 3.0 * se, "mean {} beyond 3 SE {se}", sum / n);
    }

    #[test]
    fn flatten_roundtrip() {
        let p = LstmParams::init(11, 5, 8, 2);
        let flat = p.flatten();
        let mut q = LstmParams::zeros(5, 8, 2);
        q.unflatten(&flat);
        assert_eq!(p, q);
    }

    #[test]
    fn named_arrays_roundtrip() {
        let p = LstmParams::init(3, 9, 16, 2);
        let arrays = p.named_arrays();
        assert_eq!(arrays.len(), 14);
        let q = LstmParams::from_named_arrays(&arrays, 9, 16, 2).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn zero_params_cell_fixed_points() {
        // All params zero, c_prev = v → i=f=o=0.5, c' = 0.5 v, h' = 0.5 tanh(0.5 v), y = 0.
        let p = LstmParams::zeros(3, 4, 1);
        let mut m = RawMath::new();
        let handles = p.handles(&mut m, false);
        let x = m.constant(&Mat::full(3, 2, 0.7));
        let h = m.constant(&Mat::zeros(4, 2));
        let c0 = Mat::from_fn(4, 2, |r, c| (r + c) as f64 * 0.3 - 0.2);
        let c = m.constant(&c0);
        let (h1, c1, y) = m.lstm_cell(&handles, &x, &h, &c, Some(1));
        for i in 0..c0.len() {
            let want_c = 0.5 * c0.as_slice()[i];
            assert!((c1.as_slice()[i] - want_c).abs() < 1e-15);
            let want_h = 0.5 * want_c.tanh();
            assert!((h1.as_slice()[i] - want_h).abs() < 1e-15);
        }
        assert_eq!(y.unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn batch_columns_equal_single_column_evaluation() {
        let p = LstmParams::init(77, 4, 6, 2);
        let mut m = RawMath::new();
        let handles = p.handles(&mut m, false);
        let batch = 5;
        let x = Mat::from_fn(4, batch, |r, c| 0.1 * r as f64 - 0.2 * c as f64 + 0.05);
        let h0 = Mat::from_fn(6, batch, |r, c| 0.03 * (r * batch + c) as f64 - 0.1);
        let c0 = Mat::from_fn(6, batch, |r, c| 0.02 * (r + c) as f64);
        let (hb, cb, yb) = {
            let xm = m.constant(&x);
            let hm = m.constant(&h0);
            let cm = m.constant(&c0);
            m.lstm_cell(&handles, &xm, &hm, &cm, Some(2))
        };
        let yb = yb.unwrap();
        for col in 0..batch {
            let take_col = |src: &Mat| Mat::from_fn(src.rows(), 1, |r, _| src.get(r, col));
            let (h1, c1, y1) = {
                let xm = m.constant(&take_col(&x));
                let hm = m.constant(&take_col(&h0));
                let cm = m.constant(&take_col(&c0));
                m.lstm_cell(&handles, &xm, &hm, &cm, Some(2))
            };
            let y1 = y1.unwrap();
            for r in 0..6 {
                assert_eq!(h1.get(r, 0), hb.get(r, col), "h mismatch at ({r},{col})");
                assert_eq!(c1.get(r, 0), cb.get(r, col), "c mismatch at ({r},{col})");
            }
            for r in 0..2 {
                assert_eq!(y1.get(r, 0), yb.get(r, col), "y mismatch at ({r},{col})");
            }
        }
    }

    #[test]
    fn init_hidden_replicates_initial_state() {
        let h = init_hidden(2.0, 4, 3, true);
        for col in 0..3 {
            assert_eq!(h.get(0, col), 2.0);
            for r in 1..4 {
                assert_eq!(h.get(r, col), 0.0);
            }
        }
        let z = init_hidden(5.0, 4, 2, false);
        assert_eq!(z.as_slice(), &[0.0; 8]);
        let _ = crate::diag::take_warnings();
    }

    #[test]
    fn softplus_output_map_transforms_one_channel() {
        let mut m = RawMath::new();
        let y = m.constant(&Mat::new(2, 3, vec![1.0, -2.0, 0.0, 0.0, 3.0, -1.0]));
        let mapped = OutputMap::SoftplusChannel(1).apply(&mut m, &y);
        // Row 0 identity, row 1 softplus.
        assert_eq!(mapped.row(0), &[1.0, -2.0, 0.0]);
        let want: Vec<f64> = [0.0f64, 3.0, -1.0].iter().map(|&v| crate::linalg::softplus(v)).collect();
        for (got, want) in mapped.row(1).iter().zip(&want) {
            assert_eq!(got, want);
        }
        assert!((crate::linalg::softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}

//! Batched Euler–Maruyama simulation of delayed dynamics.
//!
//! The scheme runs on the partition `t_k = k·Δt`, `−N_τ ≤ k ≤ N_T`:
//!
//! ```text
//! X̂_{k+1} = X̂_k + μ̂(t_k, history)·Δt + σ̂(t_k, history)·ΔW_k,   k = 0…N_T−1
//! X̂_k = ζ(t_k) for k ≤ 0,   α̂_k = φ(t_k) for k < 0
//! ```
//!
//! Controls come from a [`ControlSource`]: per-player LSTM policies (with
//! warm-up over the constant initial path from k = −N_τ), or an arbitrary
//! feedback rule (used by the analytic Nash oracles). The simulation body
//! is generic over [`Math`], so the training path records a tape while the
//! evaluation path runs gradient-free — with bitwise identical states.

use crate::error::SddgError;
use crate::linalg::Mat;
use crate::lstm::{init_hidden, LstmPolicy};
use crate::math::{Math, PolicyHandles, RawMath};
use crate::rng;

// ─────────────────────────────────────────────────────────────────────────
// Time grid
// ─────────────────────────────────────────────────────────────────────────

/// Uniform partition of `[−τ, T]` with `τ = N_τ·dt`, `T = N_T·dt`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    n_tau: usize,
    n_t: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, n_tau: usize, n_t: usize) -> Result<Self, SddgError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(SddgError::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if n_t == 0 {
            return Err(SddgError::InvalidParameter("N_T must be positive".into()));
        }
        Ok(TimeGrid { dt, n_tau, n_t })
    }

    /// Build from continuous times; `tau` and `t_final` must be integer
    /// multiples of `dt` (relative tolerance 1e-9).
    pub fn from_times(dt: f64, tau: f64, t_final: f64) -> Result<Self, SddgError> {
        let to_steps = |x: f64, name: &str| -> Result<usize, SddgError> {
            let k = x / dt;
            let rounded = k.round();
            if (k - rounded).abs() > 1e-9 * (1.0 + k.abs()) {
                return Err(SddgError::InvalidParameter(format!(
                    "{name} = {x} is not an integer multiple of dt = {dt}"
                )));
            }
            Ok(rounded as usize)
        };
        Self::new(dt, to_steps(tau, "tau")?, to_steps(t_final, "T")?)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Delay steps `N_τ`.
    pub fn n_tau(&self) -> usize {
        self.n_tau
    }

    /// Horizon steps `N_T`.
    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn tau(&self) -> f64 {
        self.n_tau as f64 * self.dt
    }

    pub fn t_final(&self) -> f64 {
        self.n_t as f64 * self.dt
    }

    /// `t_k = k·dt` (k may be negative).
    pub fn t(&self, k: i64) -> f64 {
        k as f64 * self.dt
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Brownian increments
// ─────────────────────────────────────────────────────────────────────────

/// Materialized batch of Brownian increments, `ΔW_k ~ N(0, dt)`.
///
/// The value at `(k, d, b)` is a pure function of
/// `(seed, k, d, col0 + b)`; `col0` lets a big batch be generated in
/// column windows without changing a single draw (common random numbers
/// across chunked evaluation).
#[derive(Clone, Debug)]
pub struct BrownianBatch {
    increments: Vec<f64>, // [n_t][k_dims][batch]
    n_t: usize,
    k_dims: usize,
    batch: usize,
    seed: u64,
    col0: u64,
}

impl BrownianBatch {
    pub fn sample(grid: &TimeGrid, k_dims: usize, batch: usize, seed: u64) -> Self {
        Self::sample_window(grid, k_dims, seed, 0, batch)
    }

    /// Sample the column window `[col0, col0 + batch)` of a conceptually
    /// larger batch.
    pub fn sample_window(
        grid: &TimeGrid,
        k_dims: usize,
        seed: u64,
        col0: u64,
        batch: usize,
    ) -> Self {
        assert!(batch > 0, "brownian: batch must be positive");
        let n_t = grid.n_t();
        let sd = grid.dt().sqrt();
        let mut increments = vec![0.0; n_t * k_dims * batch];
        crate::parallel::for_each_chunk_mut(&mut increments, k_dims * batch, |k, chunk| {
            for d in 0..k_dims {
                for b in 0..chunk.len() / k_dims {
                    chunk[d * batch + b] =
                        sd * rng::normal(seed, &[k as u64, d as u64, col0 + b as u64]);
                }
            }
        });
        BrownianBatch { increments, n_t, k_dims, batch, seed, col0 }
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn k_dims(&self) -> usize {
        self.k_dims
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// First absolute column index of this window.
    pub fn col0(&self) -> u64 {
        self.col0
    }

    /// Increments at step `k` as a `k_dims x batch` matrix.
    pub fn at_step(&self, k: usize) -> Mat {
        let len = self.k_dims * self.batch;
        Mat::new(self.k_dims, self.batch, self.increments[k * len..(k + 1) * len].to_vec())
    }

    #[inline]
    pub fn get(&self, k: usize, d: usize, b: usize) -> f64 {
        self.increments[(k * self.k_dims + d) * self.batch + b]
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Dynamics
// ─────────────────────────────────────────────────────────────────────────

/// Inputs available to a game's drift/volatility at one Euler step.
pub struct StepInputs<'a, M> {
    /// Step index `k` in `0..N_T`.
    pub k: usize,
    /// `t_k`.
    pub t: f64,
    /// Current state `X̂_k` (`n x batch`).
    pub x: &'a M,
    /// Current controls `α̂_k` (`m_total x batch`).
    pub u: &'a M,
    /// Delayed controls `α̂_{k−N_τ}` (pre-history value for `k < N_τ`).
    pub u_delayed: &'a M,
    /// Auxiliary channel (e.g. the exponentially weighted trailing-average
    /// wealth) at step `k`, when the game defines one.
    pub aux: Option<&'a M>,
    /// True when portfolio controls are dollar amounts rather than wealth
    /// fractions (analytic CARA oracle).
    pub dollar_controls: bool,
}

/// A game's (or test system's) discrete dynamics.
pub trait Dynamics {
    /// State dimension `n`.
    fn state_dim(&self) -> usize;
    /// Number of players `N`.
    fn n_players(&self) -> usize;
    /// Brownian dimensions: 1 (shared) or `n` (independent per state dim).
    fn brownian_dims(&self) -> usize;
    /// Control dimensions per player (`m_i`).
    fn control_dims(&self) -> Vec<usize>;
    fn m_total(&self) -> usize {
        self.control_dims().iter().sum()
    }
    /// Auxiliary channel dimension (0 when unused).
    fn aux_dim(&self) -> usize {
        0
    }
    /// Constant initial path value `ζ(t)` for `t ≤ 0` (length `n`).
    fn initial_state(&self) -> Vec<f64>;
    /// Auxiliary channel value at `t = 0`.
    fn initial_aux(&self) -> Vec<f64> {
        vec![]
    }
    /// Constant control pre-history `φ(t)` for `t < 0` (length `m_total`).
    fn prehistory_control(&self) -> Vec<f64> {
        vec![0.0; self.m_total()]
    }
    /// Drift and volatility loading columns (`n x batch` each). The noise
    /// term is `vol ⊙ ΔW` with `ΔW` broadcast across state dims when
    /// `brownian_dims() == 1`.
    fn drift_vol<MA: Math>(&self, m: &mut MA, s: &StepInputs<'_, MA::M>) -> (MA::M, MA::M);
    /// Advance the auxiliary channel by one forward-Euler step.
    fn aux_step<MA: Math>(&self, m: &mut MA, aux: &MA::M, x: &MA::M, dt: f64) -> MA::M {
        let _ = (aux, x, dt);
        let _ = m;
        unreachable!("aux_step called on dynamics with aux_dim() == 0")
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Control sources
// ─────────────────────────────────────────────────────────────────────────

/// Feedback rule signature: `(k, t, X̂_k, aux_k, controls so far) -> α̂_k`
/// on plain matrices. Used by the analytic Nash oracles; the history slice
/// holds this rule's own previous outputs (k' = 0…k−1).
pub type FeedbackFn<'a> = &'a dyn Fn(usize, f64, &Mat, Option<&Mat>, &[Mat]) -> Mat;

/// Where controls come from during a simulation.
pub enum ControlSource<'a> {
    /// One LSTM policy per player, rolled forward jointly with the state.
    Policies { policies: &'a [LstmPolicy], include_aux_input: bool },
    /// Analytic feedback rule (gradient-free).
    Feedback { f: FeedbackFn<'a>, dollar_controls: bool },
    /// No controls (pure SDE test dynamics, `m_total = 0`).
    None,
}

/// Simulation output on interpreter values; states and controls are in
/// step order (`states[k]` ↔ `X̂_k`, `controls[k]` ↔ `α̂_k`).
pub struct SimOut<M> {
    pub states: Vec<M>,
    pub controls: Vec<M>,
    pub aux: Vec<M>,
    pub dollar_controls: bool,
}

/// Core simulation loop, generic over the interpreter.
///
/// `train_player` marks one player's policy parameters as gradient leaves
/// (tape path only); pass `None` for evaluation.
pub fn simulate_core<MA: Math, D: Dynamics>(
    m: &mut MA,
    dynamics: &D,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    source: &ControlSource<'_>,
    train_player: Option<usize>,
) -> Result<SimOut<MA::M>, SddgError> {
    let n = dynamics.state_dim();
    let n_t = grid.n_t();
    let n_tau = grid.n_tau();
    let batch = noise.batch();
    let k_dims = dynamics.brownian_dims();
    assert_eq!(noise.n_t(), n_t, "simulate: noise steps vs grid");
    assert_eq!(noise.k_dims(), k_dims, "simulate: noise dims vs dynamics");
    assert!(
        k_dims == 1 || k_dims == n,
        "simulate: brownian_dims must be 1 or n (got {k_dims} for n = {n})"
    );
    let dt = grid.dt();

    let init = dynamics.initial_state();
    assert_eq!(init.len(), n, "simulate: initial state length");
    let x0 = m.constant(&Mat::broadcast_rows(&init, batch));

    // Policy rollout state.
    struct PolicyState<M> {
        handles: PolicyHandles<M>,
        h: M,
        c: M,
        m_out: usize,
    }
    let mut policy_states: Vec<PolicyState<MA::M>> = Vec::new();
    let mut policy_list: &[LstmPolicy] = &[];
    let mut include_aux = false;
    if let ControlSource::Policies { policies, include_aux_input } = source {
        policy_list = policies;
        include_aux = *include_aux_input;
        assert_eq!(policies.len(), dynamics.n_players(), "simulate: one policy per player");
        let dims = dynamics.control_dims();
        let expect_input = 1 + n + if include_aux { dynamics.aux_dim() } else { 0 };
        // Warm-up runs at batch 1: the initial path is deterministic, so
        // every batch column of (h, c) at k = 0 would be identical anyway.
        // The hidden states are broadcast to the full batch afterwards.
        for (j, pol) in policies.iter().enumerate() {
            assert_eq!(
                pol.params.n_input(),
                expect_input,
                "simulate: player {j} expects input dim {expect_input}"
            );
            assert_eq!(pol.params.n_output(), dims[j], "simulate: player {j} output dim");
            let needs_grad = train_player == Some(j);
            let handles = pol.params.handles(m, needs_grad);
            let h0 = init_hidden(init[j.min(n - 1)], pol.params.n_hidden(), 1, n == policies.len());
            let h = m.constant(&h0);
            let c = m.constant(&h0);
            policy_states.push(PolicyState { handles, h, c, m_out: dims[j] });
        }
    }

    let aux_dim = dynamics.aux_dim();
    let init_aux_m = if aux_dim > 0 {
        let ia = dynamics.initial_aux();
        assert_eq!(ia.len(), aux_dim, "simulate: initial aux length");
        Some(m.constant(&Mat::broadcast_rows(&ia, batch)))
    } else {
        None
    };

    let m_total = dynamics.m_total();
    let prehist = dynamics.prehistory_control();
    assert_eq!(prehist.len(), m_total, "simulate: pre-history control length");
    let prehist_u = m.constant(&Mat::broadcast_rows(&prehist, batch));

    // LSTM warm-up over the constant initial path: cells advance from
    // h_{−N_τ} consuming x_k = (t_k, ζ(t_k)) for k = −N_τ+1 … −1; no
    // controls are emitted before k = 0. The initial path carries no noise,
    // so the warm-up is computed once (batch 1) and the final hidden states
    // are broadcast across the batch by multiplying with a row of ones.
    if !policy_states.is_empty() {
        let x0_one = m.constant(&Mat::broadcast_rows(&init, 1));
        let aux_one = if include_aux {
            let ia = dynamics.initial_aux();
            Some(m.constant(&Mat::broadcast_rows(&ia, 1)))
        } else {
            None
        };
        for k in (1 - n_tau as i64)..0 {
            let t_row = m.constant(&Mat::full(1, 1, grid.t(k)));
            let mut parts = vec![t_row, x0_one.clone()];
            if let Some(a) = &aux_one {
                parts.push(a.clone());
            }
            let x_in = m.vstack(&parts);
            for ps in policy_states.iter_mut() {
                let (h, c, _) = m.lstm_cell(&ps.handles, &x_in, &ps.h, &ps.c, None);
                ps.h = h;
                ps.c = c;
            }
        }
        let ones = m.constant(&Mat::full(1, batch, 1.0));
        for ps in policy_states.iter_mut() {
            ps.h = m.matmul(&ps.h, &ones);
            ps.c = m.matmul(&ps.c, &ones);
        }
    }

    let dollar_controls = matches!(source, ControlSource::Feedback { dollar_controls: true, .. });

    let mut states: Vec<MA::M> = Vec::with_capacity(n_t + 1);
    let mut controls: Vec<MA::M> = Vec::with_capacity(n_t);
    let mut aux: Vec<MA::M> = Vec::with_capacity(if aux_dim > 0 { n_t + 1 } else { 0 });
    let mut raw_history: Vec<Mat> = Vec::new(); // feedback rules see plain values
    states.push(x0);
    if let Some(a0) = init_aux_m {
        aux.push(a0);
    }

    for k in 0..n_t {
        let t_k = grid.t(k as i64);
        let x_k = states[k].clone();
        let aux_k = if aux_dim > 0 { Some(aux[k].clone()) } else { None };

        // Controls for this step.
        let u_k: MA::M = match source {
            ControlSource::Policies { .. } => {
                let t_row = m.constant(&Mat::full(1, batch, t_k));
                let mut parts = vec![t_row, x_k.clone()];
                if include_aux {
                    parts.push(aux_k.clone().expect("aux input requires aux_dim > 0"));
                }
                let x_in = m.vstack(&parts);
                let mut outs: Vec<MA::M> = Vec::with_capacity(policy_states.len());
                for (j, ps) in policy_states.iter_mut().enumerate() {
                    let (h, c, y) = m.lstm_cell(&ps.handles, &x_in, &ps.h, &ps.c, Some(ps.m_out));
                    ps.h = h;
                    ps.c = c;
                    let y = y.expect("emit requested");
                    outs.push(policy_list[j].output_map.apply(m, &y));
                }
                m.vstack(&outs)
            }
            ControlSource::Feedback { f, .. } => {
                let x_raw = m.to_mat(&x_k);
                let aux_raw = aux_k.as_ref().map(|a| m.to_mat(a));
                let u_raw = f(k, t_k, &x_raw, aux_raw.as_ref(), &raw_history);
                assert_eq!(
                    u_raw.shape(),
                    (m_total, batch),
                    "feedback rule returned wrong control shape"
                );
                raw_history.push(u_raw.clone());
                m.constant(&u_raw)
            }
            ControlSource::None => {
                assert_eq!(m_total, 0, "dynamics expects controls but source is None");
                m.constant(&Mat::zeros(0, batch))
            }
        };
        controls.push(u_k);

        let u_delayed =
            if k >= n_tau { controls[k - n_tau].clone() } else { prehist_u.clone() };

        let inputs = StepInputs {
            k,
            t: t_k,
            x: &x_k,
            u: &controls[k],
            u_delayed: &u_delayed,
            aux: aux_k.as_ref(),
            dollar_controls,
        };
        let (drift, vol) = dynamics.drift_vol(m, &inputs);
        assert_eq!(m.shape(&drift), (n, batch), "drift shape");
        assert_eq!(m.shape(&vol), (n, batch), "vol shape");

        let dw = m.constant(&noise.at_step(k));
        let noise_term = if k_dims == n {
            m.mul(&vol, &dw)
        } else {
            let tiled = m.tile_rows(&dw, n);
            m.mul(&vol, &tiled)
        };
        let drift_term = m.scale(&drift, dt);
        let move_ = m.add(&drift_term, &noise_term);
        let x_next = m.add(&x_k, &move_);
        if !m.all_finite(&x_next) {
            return Err(SddgError::NonFinite {
                step: (k + 1) as i64,
                context: "state after Euler step".into(),
            });
        }
        if aux_dim > 0 {
            let a_next = dynamics.aux_step(m, &aux[k], &x_k, dt);
            if !m.all_finite(&a_next) {
                return Err(SddgError::NonFinite {
                    step: (k + 1) as i64,
                    context: "auxiliary channel".into(),
                });
            }
            aux.push(a_next);
        }
        states.push(x_next);
    }

    Ok(SimOut { states, controls, aux, dollar_controls })
}

// ─────────────────────────────────────────────────────────────────────────
// Trajectory assembly (plain values, includes pre-history)
// ─────────────────────────────────────────────────────────────────────────

/// A complete batch trajectory on the full partition `−N_τ … N_T`,
/// including the initial path and control pre-history.
#[derive(Clone, Debug)]
pub struct TrajectoryBatch {
    pub dt: f64,
    pub n_tau: usize,
    pub n_t: usize,
    /// `states[j]` is `X̂_{j − N_τ}` (`n x batch`), j = 0 … N_τ+N_T.
    pub states: Vec<Mat>,
    /// `controls[j]` is `α̂_{j − N_τ}` (`m_total x batch`), j = 0 … N_τ+N_T−1.
    pub controls: Vec<Mat>,
    /// `aux[k]` for k = 0 … N_T (empty when the game has no aux channel).
    pub aux: Vec<Mat>,
    /// Whether portfolio controls are dollar amounts (oracle) or fractions.
    pub dollar_controls: bool,
}

impl TrajectoryBatch {
    /// State at signed step index `k ∈ [−N_τ, N_T]`.
    pub fn state_at(&self, k: i64) -> &Mat {
        &self.states[(k + self.n_tau as i64) as usize]
    }

    /// Control at signed step index `k ∈ [−N_τ, N_T−1]`.
    pub fn control_at(&self, k: i64) -> &Mat {
        &self.controls[(k + self.n_tau as i64) as usize]
    }

    pub fn batch(&self) -> usize {
        self.states[0].cols()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].rows()
    }

    pub fn m_total(&self) -> usize {
        self.controls.first().map_or(0, |c| c.rows())
    }

    /// CSV export: `path_id, k, t, X_1…X_n, alpha_1…alpha_m, aux_1…`.
    /// 17-significant-digit floats, LF line endings.
    pub fn to_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        let n = self.state_dim();
        let m_total = self.m_total();
        let n_aux = self.aux.first().map_or(0, |a| a.rows());
        write!(w, "path_id,k,t")?;
        for i in 1..=n {
            write!(w, ",X_{i}")?;
        }
        for i in 1..=m_total {
            write!(w, ",alpha_{i}")?;
        }
        for i in 1..=n_aux {
            write!(w, ",aux_{i}")?;
        }
        w.write_all(b"\n")?;
        let n_tau = self.n_tau as i64;
        for b in 0..self.batch() {
            for j in 0..self.states.len() {
                let k = j as i64 - n_tau;
                write!(w, "{b},{k},{}", fmt_g17(k as f64 * self.dt))?;
                for r in 0..n {
                    write!(w, ",{}", fmt_g17(self.states[j].get(r, b)))?;
                }
                for r in 0..m_total {
                    if j < self.controls.len() {
                        write!(w, ",{}", fmt_g17(self.controls[j].get(r, b)))?;
                    } else {
                        write!(w, ",")?; // no control at the terminal index
                    }
                }
                for r in 0..n_aux {
                    if k >= 0 {
                        write!(w, ",{}", fmt_g17(self.aux[k as usize].get(r, b)))?;
                    } else {
                        write!(w, ",")?;
                    }
                }
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

/// Format a float with 17 significant digits (shortest bit-exact form
/// would vary in width; a fixed format keeps CSVs byte-stable).
pub fn fmt_g17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Simulate on plain matrices and assemble the full [`TrajectoryBatch`]
/// (pre-history rows included).
pub fn simulate<D: Dynamics>(
    dynamics: &D,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    source: &ControlSource<'_>,
) -> Result<TrajectoryBatch, SddgError> {
    let mut m = RawMath::new();
    let out = simulate_core(&mut m, dynamics, grid, noise, source, None)?;
    Ok(assemble_trajectory(dynamics, grid, noise.batch(), out))
}

/// Expand a [`SimOut`] on plain matrices into the full trajectory.
pub fn assemble_trajectory<D: Dynamics>(
    dynamics: &D,
    grid: &TimeGrid,
    batch: usize,
    out: SimOut<Mat>,
) -> TrajectoryBatch {
    let n_tau = grid.n_tau();
    let init = Mat::broadcast_rows(&dynamics.initial_state(), batch);
    let prehist = Mat::broadcast_rows(&dynamics.prehistory_control(), batch);
    let mut states = Vec::with_capacity(n_tau + out.states.len());
    let mut controls = Vec::with_capacity(n_tau + out.controls.len());
    for _ in 0..n_tau {
        states.push(init.clone());
        controls.push(prehist.clone());
    }
    states.extend(out.states);
    controls.extend(out.controls);
    TrajectoryBatch {
        dt: grid.dt(),
        n_tau,
        n_t: grid.n_t(),
        states,
        controls,
        aux: out.aux,
        dollar_controls: out.dollar_controls,
    }
}

/// One Euler–Maruyama step on plain values:
/// `X̂_{k+1} = X̂_k + μ̂·dt + σ̂ ⊙ ΔW_k`, with history supplied explicitly
/// (`states[j] = X̂_j`, `controls[j] = α̂_j` for j = 0…k).
#[allow(clippy::too_many_arguments)]
pub fn step<D: Dynamics>(
    dynamics: &D,
    grid: &TimeGrid,
    k: usize,
    states: &[Mat],
    controls: &[Mat],
    aux_k: Option<&Mat>,
    dw_k: &Mat,
    dollar_controls: bool,
) -> Result<Mat, SddgError> {
    assert!(k < grid.n_t(), "step: k out of range");
    assert_eq!(states.len(), k + 1, "step: need states up to k");
    assert_eq!(controls.len(), k + 1, "step: need controls up to k");
    let batch = states[k].cols();
    let n = dynamics.state_dim();
    let n_tau = grid.n_tau();
    let prehist = Mat::broadcast_rows(&dynamics.prehistory_control(), batch);
    let u_delayed = if k >= n_tau { &controls[k - n_tau] } else { &prehist };
    let mut m = RawMath::new();
    let inputs = StepInputs {
        k,
        t: grid.t(k as i64),
        x: &states[k],
        u: &controls[k],
        u_delayed,
        aux: aux_k,
        dollar_controls,
    };
    let (drift, vol) = dynamics.drift_vol(&mut m, &inputs);
    let k_dims = dynamics.brownian_dims();
    assert_eq!(dw_k.shape(), (k_dims, batch), "step: dW shape");
    let noise_term = if k_dims == n {
        m.mul(&vol, dw_k)
    } else {
        let tiled = m.tile_rows(dw_k, n);
        m.mul(&vol, &tiled)
    };
    let mut next = states[k].clone();
    let dt = grid.dt();
    for i in 0..next.len() {
        next.as_mut_slice()[i] += drift.as_slice()[i] * dt + noise_term.as_slice()[i];
    }
    if !next.all_finite() {
        return Err(SddgError::NonFinite { step: (k + 1) as i64, context: "state after Euler step".into() });
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Geometric Brownian motion, no controls: dX = μX dt + σX dW.
    pub(crate) struct Gbm {
        pub mu: f64,
        pub sigma: f64,
        pub x0: f64,
    }

    impl Dynamics for Gbm {
        fn state_dim(&self) -> usize {
            1
        }
        fn n_players(&self) -> usize {
            1
        }
        fn brownian_dims(&self) -> usize {
            1
        }
        fn control_dims(&self) -> Vec<usize> {
            vec![0]
        }
        fn initial_state(&self) -> Vec<f64> {
            vec![self.x0]
        }
        fn drift_vol<MA: Math>(&self, m: &mut MA, s: &StepInputs<'_, MA::M>) -> (MA::M, MA::M) {
            (m.scale(s.x, self.mu), m.scale(s.x, self.sigma))
        }
    }

    #[test]
    fn grid_validates_divisibility() {
        let g = TimeGrid::from_times(0.01, 0.25, 1.0).unwrap();
        assert_eq!(g.n_tau(), 25);
        assert_eq!(g.n_t(), 100);
        assert_eq!(g.t(-25), -0.25);
        assert!(TimeGrid::from_times(0.03, 0.25, 1.0).is_err());
        assert!(TimeGrid::new(0.0, 1, 1).is_err());
        assert!(TimeGrid::new(0.1, 0, 0).is_err());
    }

    #[test]
    fn brownian_is_pure_in_seed_and_window_invariant() {
        let grid = TimeGrid::new(0.1, 0, 10).unwrap();
        let a = BrownianBatch::sample(&grid, 2, 8, 99);
        let b = BrownianBatch::sample(&grid, 2, 8, 99);
        assert_eq!(a.increments, b.increments);
        // A window starting at column 3 reproduces columns 3.. of the full batch.
        let w = BrownianBatch::sample_window(&grid, 2, 99, 3, 4);
        for k in 0..10 {
            for d in 0..2 {
                for b_ in 0..4 {
                    assert_eq!(w.get(k, d, b_), a.get(k, d, b_ + 3));
                }
            }
        }
    }

    #[test]
    fn brownian_moments_match_dt() {
        let grid = TimeGrid::new(0.04, 0, 1).unwrap();
        let batch = 1 << 15;
        let noise = BrownianBatch::sample(&grid, 1, batch, 7);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for b in 0..batch {
            let v = noise.get(0, 0, b);
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / batch as f64;
        let var = sumsq / batch as f64 - mean * mean;
        let se_mean = (0.04f64 / batch as f64).sqrt();
        assert!(mean.abs() < 3.0 * se_mean, "mean {mean} vs SE {se_mean}");
        // SE of the sample variance of N(0,σ²) ≈ σ²√(2/n).
        let se_var = 0.04 * (2.0 / batch as f64).sqrt();
        assert!((var - 0.04).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn zero_drift_zero_vol_keeps_state() {
        struct Still;
        impl Dynamics for Still {
            fn state_dim(&self) -> usize {
                2
            }
            fn n_players(&self) -> usize {
                1
            }
            fn brownian_dims(&self) -> usize {
                2
            }
            fn control_dims(&self) -> Vec<usize> {
                vec![0]
            }
            fn initial_state(&self) -> Vec<f64> {
                vec![1.5, -2.5]
            }
            fn drift_vol<MA: Math>(
                &self,
                m: &mut MA,
                s: &StepInputs<'_, MA::M>,
            ) -> (MA::M, MA::M) {
                let z = m.scale(s.x, 0.0);
                (z.clone(), z)
            }
        }
        let grid = TimeGrid::new(0.1, 0, 5).unwrap();
        let noise = BrownianBatch::sample(&grid, 2, 3, 1);
        let traj = simulate(&Still, &grid, &noise, &ControlSource::None).unwrap();
        for k in 0..=5 {
            assert_eq!(traj.state_at(k).as_slice(), Mat::broadcast_rows(&[1.5, -2.5], 3).as_slice());
        }
    }

    #[test]
    fn gbm_terminal_mean_matches_closed_form() {
        let gbm = Gbm { mu: 0.05, sigma: 0.4, x0: 1.0 };
        let grid = TimeGrid::new(0.01, 0, 100).unwrap();
        let batch = 1 << 15;
        let noise = BrownianBatch::sample(&grid, 1, batch, 2024);
        let traj = simulate(&gbm, &grid, &noise, &ControlSource::None).unwrap();
        let xt = traj.state_at(100);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for b in 0..batch {
            let v = xt.get(0, b);
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / batch as f64;
        let want = (0.05f64).exp(); // X0 e^{μT}
        let sd = (sumsq / batch as f64 - mean * mean).sqrt();
        let se = sd / (batch as f64).sqrt();
        assert!((mean - want).abs() < 3.0 * se, "mean {mean}, want {want}, se {se}");
    }

    #[test]
    fn gbm_strong_order_near_half() {
        // RMS terminal error vs the exact pathwise GBM solution
        // (X_T = X0 exp((μ−σ²/2)T + σW_T)) across three step sizes;
        // the fitted log-log slope must sit in 0.5 ± 0.15.
        let (mu, sigma, x0) = (0.06, 0.5, 1.0);
        let gbm = Gbm { mu, sigma, x0 };
        let batch = 4096;
        let mut pts = Vec::new();
        for &dt in &[1e-1f64, 1e-2, 1e-3] {
            let n_t = (1.0 / dt).round() as usize;
            let grid = TimeGrid::new(dt, 0, n_t).unwrap();
            let noise = BrownianBatch::sample(&grid, 1, batch, 555);
            let traj = simulate(&gbm, &grid, &noise, &ControlSource::None).unwrap();
            let xt = traj.state_at(n_t as i64);
            let mut mse = 0.0;
            for b in 0..batch {
                let mut w_t = 0.0;
                for k in 0..n_t {
                    w_t += noise.get(k, 0, b);
                }
                let exact = x0 * ((mu - 0.5 * sigma * sigma) + sigma * w_t).exp();
                let err = xt.get(0, b) - exact;
                mse += err * err;
            }
            pts.push((dt.ln(), (mse / batch as f64).sqrt().ln()));
        }
        let slope = fit_slope(&pts);
        assert!(
            (slope - 0.5).abs() <= 0.15,
            "strong-order slope {slope:.3}, want 0.5 ± 0.15"
        );
    }

    pub(crate) fn fit_slope(pts: &[(f64, f64)]) -> f64 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    }

    #[test]
    fn causality_noise_after_k_does_not_change_prefix() {
        let gbm = Gbm { mu: 0.1, sigma: 0.3, x0: 1.0 };
        let grid = TimeGrid::new(0.05, 0, 20).unwrap();
        let noise_a = BrownianBatch::sample(&grid, 1, 4, 10);
        let mut noise_b = noise_a.clone();
        // Zero all increments from step 10 on.
        for k in 10..20 {
            let len = noise_b.k_dims * noise_b.batch;
            for v in &mut noise_b.increments[k * len..(k + 1) * len] {
                *v = 0.0;
            }
        }
        let ta = simulate(&gbm, &grid, &noise_a, &ControlSource::None).unwrap();
        let tb = simulate(&gbm, &grid, &noise_b, &ControlSource::None).unwrap();
        for k in 0..=10 {
            assert_eq!(ta.state_at(k).as_slice(), tb.state_at(k).as_slice());
        }
        assert_ne!(ta.state_at(20).as_slice(), tb.state_at(20).as_slice());
    }

    #[test]
    fn step_matches_simulate() {
        let gbm = Gbm { mu: 0.07, sigma: 0.25, x0: 2.0 };
        let grid = TimeGrid::new(0.1, 0, 5).unwrap();
        let noise = BrownianBatch::sample(&grid, 1, 3, 77);
        let traj = simulate(&gbm, &grid, &noise, &ControlSource::None).unwrap();
        // Replay manually with `step`.
        let mut states = vec![traj.state_at(0).clone()];
        let mut controls: Vec<Mat> = Vec::new();
        for k in 0..5usize {
            controls.push(Mat::zeros(0, 3));
            let next = step(
                &gbm,
                &grid,
                k,
                &states,
                &controls,
                None,
                &noise.at_step(k),
                false,
            )
            .unwrap();
            states.push(next);
        }
        for k in 0..=5 {
            assert_eq!(states[k].as_slice(), traj.state_at(k as i64).as_slice());
        }
    }

    #[test]
    fn csv_export_shape_and_header() {
        let gbm = Gbm { mu: 0.0, sigma: 0.1, x0: 1.0 };
        let grid = TimeGrid::new(0.5, 2, 2).unwrap();
        let noise = BrownianBatch::sample(&grid, 1, 2, 5);
        let traj = simulate(&gbm, &grid, &noise, &ControlSource::None).unwrap();
        let mut buf = Vec::new();
        traj.to_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "path_id,k,t,X_1");
        // 2 paths × (2+2+1) rows.
        assert_eq!(text.lines().count(), 1 + 2 * 5);
        assert!(!text.contains('\r'));
        // Pre-history rows carry the initial value.
        let first = lines.next().unwrap();
        assert!(first.starts_with("0,-2,"));
    }
}

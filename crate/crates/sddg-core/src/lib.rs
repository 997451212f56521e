//! Numerical core for computing closed-loop Nash equilibria of N-player
//! stochastic *delay* differential games by deep fictitious play.
//!
//! The library simulates controlled state dynamics of the form
//!
//! ```text
//! dX_t = mu(t, X_[t-tau,t], alpha_[t-tau,t]) dt + sigma(...) dW_t,   t in [0, T]
//! X_t  = zeta(t)  on [-tau, 0],      alpha_t = phi(t)  on [-tau, 0)
//! ```
//!
//! where each of the N players controls some coordinates of `alpha` and pays
//!
//! ```text
//! J^i = E[ integral_0^T f^i(t, X_t, alpha_t) dt + g^i(X_T) ].
//! ```
//!
//! A closed-loop Nash equilibrium (no player can improve by a unilateral
//! deviation) is approximated by *deep fictitious play*: each player's
//! feedback control is an LSTM mapping `(t_k, X_k)` to `alpha^i_k`, and in
//! every stage the players take turns performing one stochastic-gradient step
//! against the other players' current (frozen within the stage, but freshly
//! updated) policies.
//!
//! Module map:
//!
//! - [`linalg`]: flat row-major matrices and the raw f64 kernels (GEMM,
//!   element-wise maps, reductions) shared by every execution path.
//! - [`tape`]: reverse-mode automatic differentiation over batched matrices
//!   (Wengert tape with per-operation backward rules).
//! - [`optim`]: Adam with bias correction and optional global-norm clipping.
//! - [`math`]: the [`math::Math`] abstraction that lets the simulation,
//!   cost, and oracle formulas be written once and executed either on plain
//!   buffers (evaluation) or on the tape (training).
//! - [`rng`]: counter-based normal generator (pure function of
//!   `(seed, step, dim, path)`), the backbone of bitwise reproducibility.
//! - [`lstm`]: LSTM policy parameters, initialization, and rollout step.
//! - [`engine`]: time grid, Brownian batches, Euler-Maruyama stepping for
//!   delayed dynamics, trajectory export.
//! - [`games`]: the four benchmark games (exponential-utility portfolio,
//!   power-utility portfolio, portfolio with consumption, inter-bank
//!   lending with delayed repayment) plus their analytic Nash solutions.
//! - [`pde`]: backward transport solver for the three-function Riccati-type
//!   system that defines the inter-bank equilibrium, with a binary cache.
//! - [`train`]: the fictitious-play training loop.
//! - [`metrics`]: relative 2-norm error and paired trajectory comparison.
//! - [`experiment`]: configuration, artifact writing, and the end-to-end
//!   driver used by the CLI.
//!
//! Determinism contract: for a fixed configuration (game, grid, seeds,
//! batch sizes) every public entry point produces bitwise identical results
//! regardless of the degree of parallelism. See [`parallel`] for how the
//! work partition is kept independent of the thread count.

pub mod checkpoint;
pub mod config;
pub mod diag;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod games;
pub mod linalg;
pub mod lstm;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod parallel;
pub mod pde;
pub mod rng;
pub mod svg;
pub mod tape;
pub mod train;

pub use error::SddgError;

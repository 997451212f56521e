//! The four benchmark games: discrete drift/volatility functionals,
//! reward/cost functionals, parameter tables, and analytic Nash-equilibrium
//! control oracles.
//!
//! Portfolio games (CARA, CRRA, CRRA-with-consumption): `N` agents invest a
//! wealth fraction `π^i` in a common stock under delayed tax billing; the
//! delay enters through the exponentially weighted trailing wealth
//!
//! ```text
//! dX^i = [(μ₁−r)π^iX^i + rX^i − μ₂Y^i]dt + σπ^iX^i dW    (one shared W)
//! dY^i = λ(X^i − Y^i)dt,  Y^i_0 = X^i_0
//! ```
//!
//! with consumption subtracting `c^iX^i` from the drift. Rewards act on the
//! tax-adjusted discounted wealth `Z^i_disc = e^{−(r+λa)t}(X^i + aY^i)`.
//!
//! Inter-bank game: log-reserves with delayed repayment,
//! `dX^i = (α^i_t − α^i_{t−τ})dt + σdW^i` (independent Brownian motions),
//! quadratic running/terminal costs around the ensemble mean.
//!
//! Everything is expressed internally as a **cost to minimize**; the three
//! portfolio games negate their expected utility (`direction` says which
//! way the natural objective points).

use crate::diag;
use crate::engine::{
    simulate_core, BrownianBatch, ControlSource, Dynamics, SimOut, StepInputs, TimeGrid,
    TrajectoryBatch,
};
use crate::error::SddgError;
use crate::linalg::Mat;
use crate::lstm::OutputMap;
use crate::math::{Math, RawMath};
use crate::pde::{EPdeParams, ESolution};
use serde::{Deserialize, Serialize};

/// Slope of the linear penalty added per unit of clamped-positivity
/// shortfall in the CRRA-family utilities.
pub const POSITIVITY_PENALTY: f64 = 1.0;
/// Floor applied to utility arguments that must stay positive.
pub const POSITIVITY_FLOOR: f64 = 1e-10;
/// Column-chunk width for streamed evaluation batches.
pub const EVAL_CHUNK: usize = 2048;

// ─────────────────────────────────────────────────────────────────────────
// Parameters
// ─────────────────────────────────────────────────────────────────────────

/// Parameters of the portfolio games (Tables 1–3 style).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortfolioParams {
    pub n_players: usize,
    /// Horizon in years.
    pub t_final: f64,
    /// Stock drift.
    pub mu1: f64,
    /// Stock volatility.
    pub sigma: f64,
    /// Risk-free rate.
    pub r: f64,
    /// Tax-billing arrival rate.
    pub lambda: f64,
    /// Tax rate.
    pub mu2: f64,
    /// Risk tolerances δ_i.
    pub delta: Vec<f64>,
    /// Competition weights θ_i.
    pub theta: Vec<f64>,
    /// Terminal-wealth weights ε_i (consumption game only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<Vec<f64>>,
    /// Constant initial wealth path per player.
    pub x0: Vec<f64>,
}

impl PortfolioParams {
    /// Ten-player CARA benchmark: T=10, μ₁=0.08, σ=0.2, r=0.04, λ=2,
    /// μ₂=0.01, δ_i=θ_i=0.3+(4/9)(i−1), x₀^i=2+0.1(i−1).
    pub fn table1_cara() -> Self {
        let n = 10;
        let ramp: Vec<f64> = (0..n).map(|i| 0.3 + 4.0 / 9.0 * i as f64).collect();
        PortfolioParams {
            n_players: n,
            t_final: 10.0,
            mu1: 0.08,
            sigma: 0.2,
            r: 0.04,
            lambda: 2.0,
            mu2: 0.01,
            delta: ramp.clone(),
            theta: ramp,
            eps: None,
            x0: (0..n).map(|i| 2.0 + 0.1 * i as f64).collect(),
        }
    }

    /// Ten-player CRRA benchmark: T=1, λ=1, μ₂=0.2, x₀^i=1+0.05(i−1).
    pub fn table2_crra() -> Self {
        let mut p = Self::table1_cara();
        p.t_final = 1.0;
        p.lambda = 1.0;
        p.mu2 = 0.2;
        p.x0 = (0..p.n_players).map(|i| 1.0 + 0.05 * i as f64).collect();
        p
    }

    /// Ten-player consumption benchmark: T=2, λ=1, μ₂=0.01, ε_i=50,
    /// x₀^i=1+0.05(i−1).
    pub fn table3_consumption() -> Self {
        let mut p = Self::table2_crra();
        p.t_final = 2.0;
        p.mu2 = 0.01;
        p.eps = Some(vec![50.0; p.n_players]);
        p
    }

    fn validate(&self, needs_eps: bool) -> Result<(), SddgError> {
        let n = self.n_players;
        let bad = |msg: String| Err(SddgError::InvalidParameter(msg));
        if n == 0 {
            return bad("portfolio: need at least one player".into());
        }
        for (name, v) in
            [("delta", &self.delta), ("theta", &self.theta), ("x0", &self.x0)]
        {
            if v.len() != n {
                return bad(format!("portfolio: {name} must have {n} entries, got {}", v.len()));
            }
            if !crate::linalg::all_finite(v) {
                return bad(format!("portfolio: {name} must be finite"));
            }
        }
        for (name, v) in [
            ("T", self.t_final),
            ("mu1", self.mu1),
            ("sigma", self.sigma),
            ("r", self.r),
            ("lambda", self.lambda),
            ("mu2", self.mu2),
        ] {
            if !v.is_finite() {
                return bad(format!("portfolio: {name} must be finite"));
            }
        }
        if !(self.t_final > 0.0) {
            return bad("portfolio: T must be positive".into());
        }
        if !(self.sigma > 0.0) {
            return bad("portfolio: sigma must be positive".into());
        }
        if !(self.lambda > 0.0) {
            return bad("portfolio: lambda must be positive".into());
        }
        if self.mu2 < 0.0 {
            return bad("portfolio: mu2 must be nonnegative".into());
        }
        if !(self.mu1 > self.r) {
            return bad("portfolio: mu1 must exceed r".into());
        }
        let rl = self.r + self.lambda;
        if !(rl > 0.0) {
            return bad("portfolio: r + lambda must be positive".into());
        }
        if rl * rl - 4.0 * self.lambda * self.mu2 <= 0.0 {
            return bad("portfolio: tax effect too large, (r+lambda)^2 - 4*lambda*mu2 <= 0".into());
        }
        if self.delta.iter().any(|&d| !(d > 0.0)) {
            return bad("portfolio: every delta must be positive".into());
        }
        if self.x0.iter().any(|&x| !(x > 0.0)) {
            return bad("portfolio: every x0 must be positive".into());
        }
        if self.theta.iter().any(|&t| !(0.0 < t && t < 1.0)) {
            diag::warn(
                "portfolio: theta outside (0,1); closed forms are evaluated as written, \
                 but the competition-weight requirement 0 < theta < 1 is violated",
            );
        }
        match (&self.eps, needs_eps) {
            (Some(e), _) => {
                if e.len() != n {
                    return bad(format!("portfolio: eps must have {n} entries, got {}", e.len()));
                }
                if e.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                    return bad("portfolio: every eps must be positive and finite".into());
                }
            }
            (None, true) => {
                return bad("portfolio: the consumption game requires eps (terminal weights)".into())
            }
            (None, false) => {}
        }
        Ok(())
    }

    /// Tax-adjustment root for these parameters.
    pub fn a(&self) -> Result<f64, SddgError> {
        compute_a(self.r, self.lambda, self.mu2)
    }

    /// Discount rate `ρ = r + λa`.
    pub fn rho(&self) -> Result<f64, SddgError> {
        Ok(self.r + self.lambda * self.a()?)
    }

    fn delta_bar(&self) -> f64 {
        self.delta.iter().sum::<f64>() / self.n_players as f64
    }

    fn theta_bar(&self) -> f64 {
        self.theta.iter().sum::<f64>() / self.n_players as f64
    }

    /// `mean_i θ_i(δ_i − 1)`.
    fn theta_delta_m1_bar(&self) -> f64 {
        self.theta
            .iter()
            .zip(&self.delta)
            .map(|(&t, &d)| t * (d - 1.0))
            .sum::<f64>()
            / self.n_players as f64
    }
}

/// Parameters of the inter-bank lending game (Table 4 style).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterBankParams {
    pub n_players: usize,
    pub t_final: f64,
    pub sigma: f64,
    /// Incentive-to-borrow weight q.
    pub q: f64,
    /// Running deviation weight ε.
    pub eps_run: f64,
    /// Terminal deviation weight c.
    pub c_term: f64,
    /// Repayment delay τ.
    pub tau: f64,
    /// Initial log-reserves ξ^i.
    pub xi: Vec<f64>,
}

impl InterBankParams {
    /// Ten-bank benchmark: T=1, σ=0.05, q=1, ε=2, c=0.25, τ=0.25,
    /// ξ^i = 1 + 0.1·1.15^{i−1}.
    pub fn table4() -> Self {
        let n = 10;
        InterBankParams {
            n_players: n,
            t_final: 1.0,
            sigma: 0.05,
            q: 1.0,
            eps_run: 2.0,
            c_term: 0.25,
            tau: 0.25,
            xi: (0..n).map(|i| 1.0 + 0.1 * 1.15f64.powi(i as i32)).collect(),
        }
    }

    fn validate(&self) -> Result<(), SddgError> {
        let bad = |msg: &str| Err(SddgError::InvalidParameter(format!("inter-bank: {msg}")));
        if self.n_players < 2 {
            return bad("need at least two players");
        }
        if self.xi.len() != self.n_players {
            return bad("xi length must equal the player count");
        }
        if !crate::linalg::all_finite(&self.xi) {
            return bad("xi must be finite");
        }
        for (name, v) in [
            ("T", self.t_final),
            ("sigma", self.sigma),
            ("q", self.q),
            ("eps", self.eps_run),
            ("c", self.c_term),
            ("tau", self.tau),
        ] {
            if !v.is_finite() {
                return Err(SddgError::InvalidParameter(format!(
                    "inter-bank: {name} must be finite"
                )));
            }
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if self.q < 0.0 || self.c_term < 0.0 {
            return bad("q and c must be nonnegative");
        }
        if !(self.eps_run > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.tau > 0.0) || self.tau > self.t_final {
            return bad("tau must satisfy 0 < tau <= T");
        }
        Ok(())
    }

    /// The parameter view the E-system solver needs.
    pub fn pde_params(&self) -> EPdeParams {
        EPdeParams {
            n_players: self.n_players,
            q: self.q,
            eps: self.eps_run,
            c: self.c_term,
            tau: self.tau,
            t_final: self.t_final,
        }
    }
}

/// Tax-adjustment root: the negative-branch solution of
/// `λa² + (r+λ)a + μ₂ = 0`, i.e. `a = [−(r+λ) + √((r+λ)² − 4λμ₂)]/(2λ)`.
pub fn compute_a(r: f64, lambda: f64, mu2: f64) -> Result<f64, SddgError> {
    if !(lambda > 0.0) || !(r + lambda > 0.0) {
        return Err(SddgError::InvalidParameter(
            "compute_a: need lambda > 0 and r + lambda > 0".into(),
        ));
    }
    let rl = r + lambda;
    let disc = rl * rl - 4.0 * lambda * mu2;
    if disc <= 0.0 {
        return Err(SddgError::InvalidParameter(format!(
            "compute_a: discriminant (r+lambda)^2 - 4*lambda*mu2 = {disc} must be positive"
        )));
    }
    Ok((-rl + disc.sqrt()) / (2.0 * lambda))
}

// ─────────────────────────────────────────────────────────────────────────
// Game specification
// ─────────────────────────────────────────────────────────────────────────

/// Which way the natural objective points. Internally every game is
/// minimized; `Maximize` games negate their utility to form the cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Maximize,
    Minimize,
}

/// One of the four benchmark games.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params")]
pub enum GameSpec {
    #[serde(rename = "portfolio_cara")]
    PortfolioCara(PortfolioParams),
    #[serde(rename = "portfolio_crra")]
    PortfolioCrra(PortfolioParams),
    #[serde(rename = "consumption_crra")]
    Consumption(PortfolioParams),
    #[serde(rename = "inter_bank")]
    InterBank(InterBankParams),
}

impl GameSpec {
    pub fn validate(&self) -> Result<(), SddgError> {
        match self {
            GameSpec::PortfolioCara(p) | GameSpec::PortfolioCrra(p) => p.validate(false),
            GameSpec::Consumption(p) => p.validate(true),
            GameSpec::InterBank(p) => p.validate(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            GameSpec::PortfolioCara(_) => "portfolio_cara",
            GameSpec::PortfolioCrra(_) => "portfolio_crra",
            GameSpec::Consumption(_) => "consumption_crra",
            GameSpec::InterBank(_) => "inter_bank",
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            GameSpec::InterBank(_) => Direction::Minimize,
            _ => Direction::Maximize,
        }
    }

    pub fn t_final(&self) -> f64 {
        match self {
            GameSpec::PortfolioCara(p) | GameSpec::PortfolioCrra(p) | GameSpec::Consumption(p) => {
                p.t_final
            }
            GameSpec::InterBank(p) => p.t_final,
        }
    }

    /// The per-game default simulation grid: 100 Euler steps across the
    /// horizon; warm-up covers the delay (τ for the inter-bank game, a
    /// 1-year truncation of the infinite delay for the portfolio games).
    pub fn default_grid(&self) -> TimeGrid {
        let (dt, n_tau, n_t) = match self {
            GameSpec::PortfolioCara(_) => (0.1, 10, 100),
            GameSpec::PortfolioCrra(_) => (0.01, 100, 100),
            GameSpec::Consumption(_) => (0.02, 50, 100),
            GameSpec::InterBank(_) => (0.01, 25, 100),
        };
        TimeGrid::new(dt, n_tau, n_t).expect("built-in grid")
    }

    /// Default evaluation batch (figure-caption sizes).
    pub fn default_eval_batch(&self) -> usize {
        match self {
            GameSpec::InterBank(_) => 1 << 12,
            _ => 1 << 15,
        }
    }

    /// Per-player output map for LSTM policies: identity, except the
    /// consumption channel which goes through softplus so consumption
    /// rates are positive by construction.
    pub fn output_map(&self) -> OutputMap {
        match self {
            GameSpec::Consumption(_) => OutputMap::SoftplusChannel(1),
            _ => OutputMap::Identity,
        }
    }

    fn portfolio_params(&self) -> Option<&PortfolioParams> {
        match self {
            GameSpec::PortfolioCara(p) | GameSpec::PortfolioCrra(p) | GameSpec::Consumption(p) => {
                Some(p)
            }
            GameSpec::InterBank(_) => None,
        }
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Dynamics
// ─────────────────────────────────────────────────────────────────────────

/// Per-player `(π, c)` gather for the consumption game's interleaved
/// control rows (player i owns rows 2i and 2i+1).
fn gather_channel<MA: Math>(m: &mut MA, u: &MA::M, n_players: usize, channel: usize) -> MA::M {
    let rows: Vec<MA::M> = (0..n_players).map(|i| m.row(u, 2 * i + channel)).collect();
    m.vstack(&rows)
}

impl Dynamics for GameSpec {
    fn state_dim(&self) -> usize {
        self.n_players()
    }

    fn n_players(&self) -> usize {
        match self {
            GameSpec::PortfolioCara(p) | GameSpec::PortfolioCrra(p) | GameSpec::Consumption(p) => {
                p.n_players
            }
            GameSpec::InterBank(p) => p.n_players,
        }
    }

    fn brownian_dims(&self) -> usize {
        match self {
            // One shared Brownian motion drives the stock.
            GameSpec::PortfolioCara(_) | GameSpec::PortfolioCrra(_) | GameSpec::Consumption(_) => 1,
            // Independent Brownian motion per bank.
            GameSpec::InterBank(p) => p.n_players,
        }
    }

    fn control_dims(&self) -> Vec<usize> {
        let per = match self {
            GameSpec::Consumption(_) => 2,
            _ => 1,
        };
        vec![per; self.n_players()]
    }

    fn aux_dim(&self) -> usize {
        match self {
            GameSpec::InterBank(_) => 0,
            _ => self.n_players(),
        }
    }

    fn initial_state(&self) -> Vec<f64> {
        match self {
            GameSpec::PortfolioCara(p) | GameSpec::PortfolioCrra(p) | GameSpec::Consumption(p) => {
                p.x0.clone()
            }
            GameSpec::InterBank(p) => p.xi.clone(),
        }
    }

    fn initial_aux(&self) -> Vec<f64> {
        match self {
            GameSpec::InterBank(_) => vec![],
            // Y_0 = X_0.
            _ => self.initial_state(),
        }
    }

    fn drift_vol<MA: Math>(&self, m: &mut MA, s: &StepInputs<'_, MA::M>) -> (MA::M, MA::M) {
        match self {
            GameSpec::PortfolioCara(p) | GameSpec::PortfolioCrra(p) => {
                portfolio_drift_vol(p, None, m, s)
            }
            GameSpec::Consumption(p) => {
                let c = gather_channel(m, s.u, p.n_players, 1);
                portfolio_drift_vol(p, Some(&c), m, s)
            }
            GameSpec::InterBank(p) => {
                let drift = m.sub(s.u, s.u_delayed);
                let (_, batch) = m.shape(s.x);
                let vol = m.constant(&Mat::full(p.n_players, batch, p.sigma));
                (drift, vol)
            }
        }
    }

    fn aux_step<MA: Math>(&self, m: &mut MA, aux: &MA::M, x: &MA::M, dt: f64) -> MA::M {
        let lambda = self
            .portfolio_params()
            .expect("aux channel only exists for portfolio games")
            .lambda;
        // Forward Euler of dY = λ(X − Y)dt.
        let diff = m.sub(x, aux);
        let step = m.scale(&diff, lambda * dt);
        m.add(aux, &step)
    }
}

fn portfolio_drift_vol<MA: Math>(
    p: &PortfolioParams,
    consumption: Option<&MA::M>,
    m: &mut MA,
    s: &StepInputs<'_, MA::M>,
) -> (MA::M, MA::M) {
    let y = s.aux.expect("portfolio dynamics need the trailing-wealth aux channel");
    // Dollar exposure: the analytic CARA oracle emits dollars directly;
    // policies emit wealth fractions.
    let dollars = match (consumption.is_some(), s.dollar_controls) {
        (true, true) => gather_channel(m, s.u, p.n_players, 0),
        (true, false) => {
            let pi = gather_channel(m, s.u, p.n_players, 0);
            m.mul(&pi, s.x)
        }
        (false, true) => s.u.clone(),
        (false, false) => m.mul(s.u, s.x),
    };
    let excess = m.scale(&dollars, p.mu1 - p.r);
    let rx = m.scale(s.x, p.r);
    let grow = m.add(&excess, &rx);
    let tax = m.scale(y, p.mu2);
    let mut drift = m.sub(&grow, &tax);
    if let Some(c) = consumption {
        let spend = m.mul(c, s.x);
        drift = m.sub(&drift, &spend);
    }
    let vol = m.scale(&dollars, p.sigma);
    (drift, vol)
}

// ─────────────────────────────────────────────────────────────────────────
// Cost functionals
// ─────────────────────────────────────────────────────────────────────────

/// Broadcast a per-player vector to an `n × batch` constant.
fn per_player<MA: Math>(m: &mut MA, v: &[f64], batch: usize) -> MA::M {
    m.constant(&Mat::from_fn(v.len(), batch, |r, _| v[r]))
}

/// CRRA-family utility rows: `U_i(v)` with `v` given through `ln v`;
/// power branch `v^{p_i}/p_i` (`p_i = 1 − 1/δ_i ≠ 0`) and log branch for
/// `δ_i = 1`, selected by constant masks.
fn crra_utility_rows<MA: Math>(m: &mut MA, ln_v: &MA::M, delta: &[f64], batch: usize) -> MA::M {
    let p: Vec<f64> = delta.iter().map(|&d| 1.0 - 1.0 / d).collect();
    let p_rows = per_player(m, &p, batch);
    let inv_p: Vec<f64> = p.iter().map(|&pi| if pi == 0.0 { 1.0 } else { 1.0 / pi }).collect();
    let inv_rows = per_player(m, &inv_p, batch);
    let mask_pow: Vec<f64> = p.iter().map(|&pi| if pi == 0.0 { 0.0 } else { 1.0 }).collect();
    let mask_log: Vec<f64> = mask_pow.iter().map(|&v| 1.0 - v).collect();
    let powed = {
        let scaled = m.mul(&p_rows, ln_v);
        let e = m.exp(&scaled);
        m.mul(&e, &inv_rows)
    };
    let mp = per_player(m, &mask_pow, batch);
    let ml = per_player(m, &mask_log, batch);
    let pow_part = m.mul(&mp, &powed);
    let log_part = m.mul(&ml, ln_v);
    m.add(&pow_part, &log_part)
}

/// Discounted tax-adjusted wealth rows `Z_disc = e^{−ρt}(X + aY)`.
fn z_disc<MA: Math>(m: &mut MA, x: &MA::M, y: &MA::M, a: f64, rho: f64, t: f64) -> MA::M {
    let ya = m.scale(y, a);
    let z = m.add(x, &ya);
    m.scale(&z, (-rho * t).exp())
}

/// Clamp rows at the positivity floor; returns the clamped value, the
/// linear penalty rows, and the number of clamp events.
fn clamp_positive<MA: Math>(m: &mut MA, v: &MA::M) -> (MA::M, MA::M, u64) {
    let before = m.floor_clamp_count();
    let clamped = m.clamp_min(v, POSITIVITY_FLOOR);
    let violations = (m.floor_clamp_count() - before) as u64;
    let shortfall = m.sub(&clamped, v);
    let penalty = m.scale(&shortfall, POSITIVITY_PENALTY);
    (clamped, penalty, violations)
}

/// Competition-adjusted utility rows for the CRRA family:
/// `U_i(V_i · V̄^{−θ_i})` with `V̄` the geometric mean across players,
/// positivity enforced by clamping (violations counted, linear penalty
/// added to the returned **cost** rows).
fn crra_competition_cost<MA: Math>(
    m: &mut MA,
    v_rows: &MA::M,
    delta: &[f64],
    theta: &[f64],
    weight: Option<&[f64]>,
    batch: usize,
) -> (MA::M, u64) {
    let n = delta.len();
    let (vc, penalty, violations) = clamp_positive(m, v_rows);
    let ln_v = m.ln(&vc);
    let ln_gbar = m.mean_rows(&ln_v);
    let ln_gbar_rows = m.tile_rows(&ln_gbar, n);
    let th = per_player(m, theta, batch);
    let comp = m.mul(&th, &ln_gbar_rows);
    let ln_arg = m.sub(&ln_v, &comp);
    let mut u = crra_utility_rows(m, &ln_arg, delta, batch);
    if let Some(w) = weight {
        let w_rows = per_player(m, w, batch);
        u = m.mul(&w_rows, &u);
    }
    let neg_u = m.neg(&u);
    (m.add(&neg_u, &penalty), violations)
}

impl GameSpec {
    /// Per-path costs `[N × batch]` (the quantity each player minimizes)
    /// plus the positivity-violation count. Generic over the interpreter,
    /// so the same code runs gradient-free and on the tape.
    pub fn path_costs<MA: Math>(
        &self,
        m: &mut MA,
        sim: &SimOut<MA::M>,
        grid: &TimeGrid,
    ) -> Result<(MA::M, u64), SddgError> {
        let out = match self {
            GameSpec::PortfolioCara(p) => {
                let a = p.a()?;
                let rho = p.r + p.lambda * a;
                let xt = sim.states.last().expect("nonempty trajectory");
                let yt = sim.aux.last().expect("portfolio trajectory carries Y");
                let (_, batch) = m.shape(xt);
                let zd = z_disc(m, xt, yt, a, rho, grid.t_final());
                let zbar = m.mean_rows(&zd);
                let zbar_rows = m.tile_rows(&zbar, p.n_players);
                let th = per_player(m, &p.theta, batch);
                let comp = m.mul(&th, &zbar_rows);
                let spread = m.sub(&zd, &comp);
                let dinv: Vec<f64> = p.delta.iter().map(|&d| 1.0 / d).collect();
                let dinv_rows = per_player(m, &dinv, batch);
                let arg = m.mul(&spread, &dinv_rows);
                let narg = m.neg(&arg);
                // cost = −U = exp(−(Z_i − θ_iZ̄)/δ_i)
                (m.exp(&narg), 0)
            }
            GameSpec::PortfolioCrra(p) => {
                let a = p.a()?;
                let rho = p.r + p.lambda * a;
                let xt = sim.states.last().expect("nonempty trajectory");
                let yt = sim.aux.last().expect("portfolio trajectory carries Y");
                let (_, batch) = m.shape(xt);
                let zd = z_disc(m, xt, yt, a, rho, grid.t_final());
                crra_competition_cost(m, &zd, &p.delta, &p.theta, None, batch)
            }
            GameSpec::Consumption(p) => {
                let a = p.a()?;
                let rho = p.r + p.lambda * a;
                let eps = p.eps.as_ref().expect("validated consumption params");
                let (_, batch) = m.shape(&sim.states[0]);
                let mut viol = 0u64;
                let mut cost: Option<MA::M> = None;
                for k in 0..grid.n_t() {
                    let c = gather_channel(m, &sim.controls[k], p.n_players, 1);
                    let spend = m.mul(&c, &sim.states[k]);
                    let cd = m.scale(&spend, (-rho * grid.t(k as i64)).exp());
                    let (step_cost, v) =
                        crra_competition_cost(m, &cd, &p.delta, &p.theta, None, batch);
                    viol += v;
                    let weighted = m.scale(&step_cost, grid.dt());
                    cost = Some(match cost {
                        None => weighted,
                        Some(acc) => m.add(&acc, &weighted),
                    });
                }
                let xt = sim.states.last().expect("nonempty trajectory");
                let yt = sim.aux.last().expect("portfolio trajectory carries Y");
                let zd = z_disc(m, xt, yt, a, rho, grid.t_final());
                let (term_cost, v) =
                    crra_competition_cost(m, &zd, &p.delta, &p.theta, Some(eps), batch);
                viol += v;
                let total = m.add(cost.as_ref().expect("n_t >= 1"), &term_cost);
                (total, viol)
            }
            GameSpec::InterBank(p) => {
                let n = p.n_players;
                let dev = |m: &mut MA, x: &MA::M| {
                    let xbar = m.mean_rows(x);
                    let xbar_rows = m.tile_rows(&xbar, n);
                    m.sub(&xbar_rows, x)
                };
                let mut cost: Option<MA::M> = None;
                for k in 0..grid.n_t() {
                    let alpha = &sim.controls[k];
                    let d = dev(m, &sim.states[k]);
                    let a2 = m.mul(alpha, alpha);
                    let quad = m.scale(&a2, 0.5);
                    let ad = m.mul(alpha, &d);
                    let qterm = m.scale(&ad, p.q);
                    let d2 = m.mul(&d, &d);
                    let eterm = m.scale(&d2, p.eps_run / 2.0);
                    let base = m.sub(&quad, &qterm);
                    let f = m.add(&base, &eterm);
                    let weighted = m.scale(&f, grid.dt());
                    cost = Some(match cost {
                        None => weighted,
                        Some(acc) => m.add(&acc, &weighted),
                    });
                }
                let d_t = dev(m, sim.states.last().expect("nonempty trajectory"));
                let d2 = m.mul(&d_t, &d_t);
                let g = m.scale(&d2, p.c_term / 2.0);
                let total = m.add(cost.as_ref().expect("n_t >= 1"), &g);
                (total, 0)
            }
        };
        if !m.all_finite(&out.0) {
            return Err(SddgError::NonFinite { step: grid.n_t() as i64, context: "path costs".into() });
        }
        Ok(out)
    }

    /// Batch-mean costs from a complete trajectory (pre-history stripped),
    /// with the positivity-violation count.
    pub fn empirical_cost(&self, traj: &TrajectoryBatch) -> Result<(Vec<f64>, u64), SddgError> {
        let grid = TimeGrid::new(traj.dt, traj.n_tau, traj.n_t)?;
        let sim = SimOut {
            states: traj.states[traj.n_tau..].to_vec(),
            controls: traj.controls[traj.n_tau..].to_vec(),
            aux: traj.aux.clone(),
            dollar_controls: traj.dollar_controls,
        };
        let mut m = RawMath::new();
        let (costs, violations) = self.path_costs(&mut m, &sim, &grid)?;
        let means = m.mean_cols(&costs);
        Ok((means.as_slice().to_vec(), violations))
    }

    /// Batch-mean **natural objectives**: expected utility for the
    /// portfolio games (maximize), expected cost for the inter-bank game
    /// (minimize).
    pub fn empirical_objective(&self, traj: &TrajectoryBatch) -> Result<(Vec<f64>, u64), SddgError> {
        let (mut costs, violations) = self.empirical_cost(traj)?;
        if self.direction() == Direction::Maximize {
            for v in &mut costs {
                *v = -*v;
            }
        }
        Ok((costs, violations))
    }
}

/// Expected CARA utilities per player (natural objective of the CARA game).
pub fn reward_cara(p: &PortfolioParams, traj: &TrajectoryBatch) -> Result<Vec<f64>, SddgError> {
    GameSpec::PortfolioCara(p.clone()).empirical_objective(traj).map(|r| r.0)
}

/// Expected CRRA utilities per player.
pub fn reward_crra(p: &PortfolioParams, traj: &TrajectoryBatch) -> Result<Vec<f64>, SddgError> {
    GameSpec::PortfolioCrra(p.clone()).empirical_objective(traj).map(|r| r.0)
}

/// Expected consumption-game utilities per player.
pub fn reward_consumption(
    p: &PortfolioParams,
    traj: &TrajectoryBatch,
) -> Result<Vec<f64>, SddgError> {
    GameSpec::Consumption(p.clone()).empirical_objective(traj).map(|r| r.0)
}

/// Expected inter-bank costs per player.
pub fn cost_interbank(p: &InterBankParams, traj: &TrajectoryBatch) -> Result<Vec<f64>, SddgError> {
    GameSpec::InterBank(p.clone()).empirical_objective(traj).map(|r| r.0)
}

// ─────────────────────────────────────────────────────────────────────────
// Analytic Nash oracles
// ─────────────────────────────────────────────────────────────────────────

/// CARA equilibrium dollar coefficients: the deterministic dollar amount is
/// `coef_i · e^{(r+λa)t}` with `coef_i = (μ₁−r)/σ² · (δ_i + θ_iδ̄/(1−θ̄))`.
pub fn nash_cara_coef(p: &PortfolioParams) -> Result<Vec<f64>, SddgError> {
    let tb = p.theta_bar();
    if (1.0 - tb).abs() < 1e-12 {
        return Err(SddgError::Domain(
            "CARA equilibrium is singular: mean competition weight equals 1".into(),
        ));
    }
    let db = p.delta_bar();
    let merton = (p.mu1 - p.r) / (p.sigma * p.sigma);
    Ok(p.delta.iter().zip(&p.theta).map(|(&d, &t)| merton * (d + t * db / (1.0 - tb))).collect())
}

/// CARA equilibrium dollar amount for player `i` (0-indexed) at time `t`;
/// a pure function of time and parameters (state-independent).
pub fn nash_cara(t: f64, i: usize, p: &PortfolioParams, a: f64) -> Result<f64, SddgError> {
    Ok(nash_cara_coef(p)?[i] * ((p.r + p.lambda * a) * t).exp())
}

/// CRRA equilibrium fraction coefficients:
/// `π_i = coef_i · (X_i + aY_i)/X_i` with
/// `coef_i = (μ₁−r)/σ² · (δ_i − θ_i(δ_i−1)δ̄/(1+mean θ(δ−1)))`.
pub fn nash_crra_coef(p: &PortfolioParams) -> Result<Vec<f64>, SddgError> {
    let mbar = p.theta_delta_m1_bar();
    if (1.0 + mbar).abs() < 1e-12 {
        return Err(SddgError::Domain(
            "CRRA equilibrium is singular: 1 + mean theta(delta-1) = 0".into(),
        ));
    }
    let db = p.delta_bar();
    let merton = (p.mu1 - p.r) / (p.sigma * p.sigma);
    Ok(p.delta
        .iter()
        .zip(&p.theta)
        .map(|(&d, &t)| merton * (d - t * (d - 1.0) * db / (1.0 + mbar)))
        .collect())
}

/// CRRA equilibrium fraction for player `i` at state `(X_i, Y_i)`.
pub fn nash_crra(
    _t: f64,
    x_i: f64,
    y_i: f64,
    i: usize,
    p: &PortfolioParams,
    a: f64,
) -> Result<f64, SddgError> {
    if x_i == 0.0 {
        return Err(SddgError::Domain("CRRA equilibrium fraction undefined at X = 0".into()));
    }
    Ok(nash_crra_coef(p)?[i] * (x_i + a * y_i) / x_i)
}

/// The consumption game's `(β_i, γ_i)` parameter vectors:
///
/// ```text
/// β_i = ½(1−δ_i)((μ₁−r)/σ)² (1 − θ_iδ̄/(1+m)) (δ_i − θ_iδ̄(δ_i−1)/(1+m))
/// γ_i = ε_i^{−δ_i} ((∏_k ε_k^{δ_k})^{1/N})^{θ_i(δ_i−1)/(1+m)}
/// ```
///
/// with `m = mean θ(δ−1)`; `δ_i = 1` collapses exactly to `β_i = 0`,
/// `γ_i = 1/ε_i`.
pub fn consumption_beta_gamma(p: &PortfolioParams) -> Result<(Vec<f64>, Vec<f64>), SddgError> {
    let eps = p
        .eps
        .as_ref()
        .ok_or_else(|| SddgError::InvalidParameter("beta/gamma need eps weights".into()))?;
    let mbar = p.theta_delta_m1_bar();
    if (1.0 + mbar).abs() < 1e-12 {
        return Err(SddgError::Domain(
            "consumption equilibrium is singular: 1 + mean theta(delta-1) = 0".into(),
        ));
    }
    let db = p.delta_bar();
    let sharpe2 = ((p.mu1 - p.r) / p.sigma) * ((p.mu1 - p.r) / p.sigma);
    let beta: Vec<f64> = p
        .delta
        .iter()
        .zip(&p.theta)
        .map(|(&d, &t)| {
            0.5 * (1.0 - d)
                * sharpe2
                * (1.0 - t * db / (1.0 + mbar))
                * (d - t * db / (1.0 + mbar) * (d - 1.0))
        })
        .collect();
    // log of the geometric mean of ε_k^{δ_k}
    let ln_gmean =
        eps.iter().zip(&p.delta).map(|(&e, &d)| d * e.ln()).sum::<f64>() / p.n_players as f64;
    let gamma: Vec<f64> = eps
        .iter()
        .zip(p.delta.iter().zip(&p.theta))
        .map(|(&e, (&d, &t))| {
            if d == 1.0 {
                1.0 / e
            } else {
                e.powf(-d) * (ln_gmean * (t * (d - 1.0) / (1.0 + mbar))).exp()
            }
        })
        .collect();
    if !crate::linalg::all_finite(&beta) || !crate::linalg::all_finite(&gamma) {
        return Err(SddgError::Domain("beta/gamma overflowed for these parameters".into()));
    }
    Ok((beta, gamma))
}

/// Equilibrium consumption **rate factor** at time `t` (the fraction is
/// `rate·(X+aY)/X`): `[β⁻¹ + (γ⁻¹ − β⁻¹)e^{−β(T−t)}]⁻¹`, with the exact
/// `δ = 1` branch `(T − t + γ⁻¹)⁻¹`. Evaluated in the `expm1` form
/// `[(1−e^{−βs})/β + e^{−βs}/γ]⁻¹`, stable as `β → 0`.
fn consumption_rate(beta: f64, gamma: f64, delta: f64, s: f64) -> Result<f64, SddgError> {
    let denom = if delta == 1.0 {
        s + 1.0 / gamma
    } else {
        let em1 = (-beta * s).exp_m1(); // e^{−βs} − 1
        -em1 / beta + (1.0 + em1) / gamma
    };
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(SddgError::Domain(format!(
            "consumption-rate bracket nonpositive (beta {beta}, gamma {gamma}, T-t {s})"
        )));
    }
    Ok(1.0 / denom)
}

/// Equilibrium `(π_i, c_i)` for the consumption game at `(t, X_i, Y_i)`.
pub fn nash_consumption(
    t: f64,
    x_i: f64,
    y_i: f64,
    i: usize,
    p: &PortfolioParams,
    a: f64,
) -> Result<(f64, f64), SddgError> {
    if x_i == 0.0 {
        return Err(SddgError::Domain("equilibrium fractions undefined at X = 0".into()));
    }
    let ratio = (x_i + a * y_i) / x_i;
    let pi = nash_crra_coef(p)?[i] * ratio;
    let (beta, gamma) = consumption_beta_gamma(p)?;
    let rate = consumption_rate(beta[i], gamma[i], p.delta[i], p.t_final - t)?;
    Ok((pi, rate * ratio))
}

/// Analytic Nash feedback rule for one game, usable as an engine control
/// source. `with_deviation(player, factor)` scales that player's emitted
/// control (both channels for the consumption game), which is the
/// unilateral deviation probed by the best-response check.
pub struct NashOracle<'e> {
    rule: OracleRule<'e>,
    scale: Option<(usize, f64)>,
    n_players: usize,
}

enum OracleRule<'e> {
    Cara {
        coef: Vec<f64>,
        rho: f64,
    },
    Crra {
        coef: Vec<f64>,
        a: f64,
    },
    Consumption {
        coef: Vec<f64>,
        a: f64,
        /// Rate factor per player per step (precomputed on the grid).
        rates: Vec<Vec<f64>>,
    },
    InterBank {
        e: &'e ESolution,
        gain: f64,
        qshift: f64,
        dt: f64,
        n_tau: usize,
    },
}

impl<'e> NashOracle<'e> {
    /// Build the oracle for `game` on `grid`. The inter-bank game requires
    /// a solved E-system whose parameters and horizon match exactly.
    pub fn new(
        game: &GameSpec,
        grid: &TimeGrid,
        e: Option<&'e ESolution>,
    ) -> Result<Self, SddgError> {
        game.validate()?;
        let horizon_ok = (grid.t_final() - game.t_final()).abs()
            <= 1e-9 * game.t_final().abs().max(1.0);
        if !horizon_ok {
            return Err(SddgError::InvalidParameter(format!(
                "oracle grid horizon {} does not match the game horizon {}",
                grid.t_final(),
                game.t_final()
            )));
        }
        let rule = match game {
            GameSpec::PortfolioCara(p) => {
                let a = p.a()?;
                OracleRule::Cara { coef: nash_cara_coef(p)?, rho: p.r + p.lambda * a }
            }
            GameSpec::PortfolioCrra(p) => OracleRule::Crra { coef: nash_crra_coef(p)?, a: p.a()? },
            GameSpec::Consumption(p) => {
                let a = p.a()?;
                let (beta, gamma) = consumption_beta_gamma(p)?;
                let mut rates = Vec::with_capacity(p.n_players);
                for i in 0..p.n_players {
                    let mut row = Vec::with_capacity(grid.n_t());
                    for k in 0..grid.n_t() {
                        row.push(consumption_rate(
                            beta[i],
                            gamma[i],
                            p.delta[i],
                            p.t_final - grid.t(k as i64),
                        )?);
                    }
                    rates.push(row);
                }
                OracleRule::Consumption { coef: nash_crra_coef(p)?, a, rates }
            }
            GameSpec::InterBank(p) => {
                let e = e.ok_or_else(|| {
                    SddgError::InvalidParameter(
                        "inter-bank oracle needs a solved E-system".into(),
                    )
                })?;
                if *e.params() != p.pde_params() {
                    return Err(SddgError::InvalidParameter(
                        "E-system was solved for different inter-bank parameters".into(),
                    ));
                }
                if (grid.tau() - p.tau).abs() > 1e-9 * p.tau.abs().max(1.0) {
                    return Err(SddgError::InvalidParameter(format!(
                        "oracle grid delay {} does not match the game delay {}",
                        grid.tau(),
                        p.tau
                    )));
                }
                let gain = 2.0 * (1.0 - 1.0 / p.n_players as f64);
                OracleRule::InterBank {
                    e,
                    gain,
                    qshift: p.q / gain,
                    dt: grid.dt(),
                    n_tau: grid.n_tau(),
                }
            }
        };
        Ok(NashOracle { rule, scale: None, n_players: game.n_players() })
    }

    /// Scale player `player`'s emitted control by `factor`.
    pub fn with_deviation(mut self, player: usize, factor: f64) -> Self {
        assert!(player < self.n_players, "deviation player out of range");
        assert!(factor != 0.0 && factor.is_finite(), "deviation factor must be finite, nonzero");
        self.scale = Some((player, factor));
        self
    }

    /// True when the emitted controls are dollar amounts (CARA oracle)
    /// rather than wealth fractions.
    pub fn dollar_controls(&self) -> bool {
        matches!(self.rule, OracleRule::Cara { .. })
    }

    /// Feedback-rule closure for [`ControlSource::Feedback`].
    pub fn feedback(&self) -> Box<dyn Fn(usize, f64, &Mat, Option<&Mat>, &[Mat]) -> Mat + '_> {
        Box::new(move |k, t, x, aux, hist| self.controls_at(k, t, x, aux, hist))
    }

    /// The equilibrium control columns at step `k` given the current state
    /// and (for the inter-bank rule) this oracle's own past outputs.
    pub fn controls_at(
        &self,
        k: usize,
        t: f64,
        x: &Mat,
        aux: Option<&Mat>,
        hist: &[Mat],
    ) -> Mat {
        let n = self.n_players;
        let batch = x.cols();
        let mut out = match &self.rule {
            OracleRule::Cara { coef, rho } => {
                let discount = (rho * t).exp();
                Mat::from_fn(n, batch, |i, _| coef[i] * discount)
            }
            OracleRule::Crra { coef, a } => {
                let y = aux.expect("CRRA oracle needs the trailing-wealth channel");
                Mat::from_fn(n, batch, |i, b| {
                    let xi = x.get(i, b);
                    coef[i] * (xi + a * y.get(i, b)) / xi
                })
            }
            OracleRule::Consumption { coef, a, rates } => {
                let y = aux.expect("consumption oracle needs the trailing-wealth channel");
                Mat::from_fn(2 * n, batch, |row, b| {
                    let i = row / 2;
                    let xi = x.get(i, b);
                    let ratio = (xi + a * y.get(i, b)) / xi;
                    if row % 2 == 0 {
                        coef[i] * ratio
                    } else {
                        rates[i][k] * ratio
                    }
                })
            }
            OracleRule::InterBank { e, gain, qshift, dt, n_tau } => {
                self.interbank_controls(e, *gain, *qshift, *dt, *n_tau, k, t, x, hist)
            }
        };
        if let Some((p, factor)) = self.scale {
            let skip = matches!(self.rule, OracleRule::Consumption { .. });
            let rows = if skip { vec![2 * p, 2 * p + 1] } else { vec![p] };
            for r in rows {
                for b in 0..batch {
                    out.set(r, b, out.get(r, b) * factor);
                }
            }
        }
        out
    }

    /// Inter-bank equilibrium at one step:
    ///
    /// ```text
    /// α_i = 2(1−1/N)[(E₁(t,0)+E₀(t)+q/(2(1−1/N)))(X̄−X_i)
    ///                + ∫_{t−τ}^t (E₂(t,s−t,0)+E₁(t,s−t))(ᾱ−α_i)(s) ds]
    /// ```
    ///
    /// The trapezoid endpoint at `s = t` involves the unknown current
    /// controls; writing `α_i = b_i + κ(ᾱ−α_i)` with `κ` the endpoint
    /// weight gives `ᾱ = b̄` and `α_i = (b_i + κb̄)/(1+κ)` in closed form.
    /// Past controls are read from this rule's own history; under a
    /// deviation the scaled row is divided back out so the rule's internal
    /// state stays on the equilibrium path (1-ulp rounding, far below the
    /// Monte Carlo noise the deviation check measures).
    #[allow(clippy::too_many_arguments)]
    fn interbank_controls(
        &self,
        e: &ESolution,
        gain: f64,
        qshift: f64,
        dt: f64,
        n_tau: usize,
        k: usize,
        t: f64,
        x: &Mat,
        hist: &[Mat],
    ) -> Mat {
        let n = self.n_players;
        let batch = x.cols();
        let e0 = e.e0_at(t).expect("t inside horizon");
        let e1_0 = e.e1_at(t, 0.0).expect("t inside horizon");
        let base = e1_0 + e0 + qshift;
        // Delay-kernel weights at lags u_j = (j − N_τ)·dt, j = 0…N_τ.
        let w: Vec<f64> = (0..=n_tau)
            .map(|j| {
                let u = (j as f64 - n_tau as f64) * dt;
                e.e2_at(t, u, 0.0).expect("lag inside window")
                    + e.e1_at(t, u).expect("lag inside window")
            })
            .collect();
        let kappa = gain * (dt / 2.0) * w[n_tau];
        let unscale = self.scale;
        let hval = |idx: usize, i: usize, b: usize| -> f64 {
            let v = hist[idx].get(i, b);
            match unscale {
                Some((p, f)) if p == i => v / f,
                _ => v,
            }
        };
        let mut out = Mat::zeros(n, batch);
        let mut b_exp = vec![0.0; n];
        for b in 0..batch {
            let mut xbar = 0.0;
            for i in 0..n {
                xbar += x.get(i, b);
            }
            xbar /= n as f64;
            // Trapezoid over past lags (weight ½ at s = t−τ, 1 inside);
            // pre-history controls are zero.
            for (i, acc) in b_exp.iter_mut().enumerate() {
                *acc = 0.0;
                for j in 0..n_tau {
                    let step = k as i64 - n_tau as i64 + j as i64;
                    if step < 0 {
                        continue;
                    }
                    let idx = step as usize;
                    let mut abar = 0.0;
                    for ii in 0..n {
                        abar += hval(idx, ii, b);
                    }
                    abar /= n as f64;
                    let tw = if j == 0 { 0.5 } else { 1.0 };
                    *acc += tw * dt * w[j] * (abar - hval(idx, i, b));
                }
            }
            let mut bbar = 0.0;
            for i in 0..n {
                b_exp[i] = gain * (base * (xbar - x.get(i, b)) + b_exp[i]);
                bbar += b_exp[i];
            }
            bbar /= n as f64;
            for i in 0..n {
                out.set(i, b, (b_exp[i] + kappa * bbar) / (1.0 + kappa));
            }
        }
        out
    }
}

/// Inter-bank equilibrium controls as a standalone operation (all players,
/// one step).
pub fn nash_interbank(
    k: usize,
    t: f64,
    x: &Mat,
    hist: &[Mat],
    e: &ESolution,
    p: &InterBankParams,
    grid: &TimeGrid,
) -> Result<Mat, SddgError> {
    let game = GameSpec::InterBank(p.clone());
    let oracle = NashOracle::new(&game, grid, Some(e))?;
    Ok(oracle.controls_at(k, t, x, None, hist))
}

/// Simulate the game under its analytic Nash controls (optionally with one
/// player's control scaled by a factor).
pub fn simulate_nash(
    game: &GameSpec,
    grid: &TimeGrid,
    noise: &BrownianBatch,
    e: Option<&ESolution>,
    deviation: Option<(usize, f64)>,
) -> Result<TrajectoryBatch, SddgError> {
    let mut oracle = NashOracle::new(game, grid, e)?;
    if let Some((p, f)) = deviation {
        oracle = oracle.with_deviation(p, f);
    }
    let fb = oracle.feedback();
    let source = ControlSource::Feedback { f: &*fb, dollar_controls: oracle.dollar_controls() };
    crate::engine::simulate(game, grid, noise, &source)
}

// ─────────────────────────────────────────────────────────────────────────
// Streamed evaluation
// ─────────────────────────────────────────────────────────────────────────

/// Per-path costs over a (possibly large) evaluation batch.
pub struct EvalOutcome {
    /// `[N × total]` cost rows.
    pub costs: Mat,
    pub violations: u64,
}

/// Evaluate per-path costs over `total` paths in column chunks. Brownian
/// draws are indexed by absolute path id, and per-path costs never mix
/// columns, so the result is bitwise independent of `chunk`.
pub fn eval_costs(
    game: &GameSpec,
    grid: &TimeGrid,
    source: &ControlSource<'_>,
    seed: u64,
    total: usize,
    chunk: usize,
) -> Result<EvalOutcome, SddgError> {
    assert!(total > 0 && chunk > 0, "eval_costs: empty batch");
    let n = game.n_players();
    let mut costs = Mat::zeros(n, total);
    let mut violations = 0u64;
    let mut col0 = 0usize;
    while col0 < total {
        let w = chunk.min(total - col0);
        let noise =
            BrownianBatch::sample_window(grid, game.brownian_dims(), seed, col0 as u64, w);
        let mut m = RawMath::new();
        let sim = simulate_core(&mut m, game, grid, &noise, source, None)?;
        let (c, v) = game.path_costs(&mut m, &sim, grid)?;
        violations += v;
        for i in 0..n {
            for b in 0..w {
                costs.set(i, col0 + b, c.get(i, b));
            }
        }
        col0 += w;
    }
    Ok(EvalOutcome { costs, violations })
}

/// Evaluate the analytic Nash profile's costs (optionally with one player
/// deviating by a scale factor), streamed in chunks with common random
/// numbers across calls with the same seed.
pub fn eval_nash_costs(
    game: &GameSpec,
    grid: &TimeGrid,
    e: Option<&ESolution>,
    deviation: Option<(usize, f64)>,
    seed: u64,
    total: usize,
) -> Result<EvalOutcome, SddgError> {
    let mut oracle = NashOracle::new(game, grid, e)?;
    if let Some((p, f)) = deviation {
        oracle = oracle.with_deviation(p, f);
    }
    let fb = oracle.feedback();
    let source = ControlSource::Feedback { f: &*fb, dollar_controls: oracle.dollar_controls() };
    eval_costs(game, grid, &source, seed, total, EVAL_CHUNK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn assert_rel(got: f64, want: f64, tol: f64, what: &str) {
        let scale = want.abs().max(1e-300);
        assert!(
            (got - want).abs() <= tol * scale,
            "{what}: got {got}, want {want} (rel err {})",
            (got - want).abs() / scale
        );
    }

    fn assert_vec_rel(got: &[f64], want: &[f64], tol: f64, what: &str) {
        assert_eq!(got.len(), want.len(), "{what}: length");
        for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
            assert_rel(g, w, tol, &format!("{what}[{i}]"));
        }
    }

    // Shared two-player fixtures: terminal states chosen off the initial
    // path so discounting and competition terms are all exercised.
    const XT: [f64; 2] = [1.2, 0.8];
    const YT: [f64; 2] = [1.0, 0.9];

    fn fixture_trajectory(p_dim: usize, m_total: usize, u0: &[f64], with_aux: bool) -> TrajectoryBatch {
        let x0 = Mat::new(p_dim, 1, vec![1.0, 1.5][..p_dim].to_vec());
        let xt = Mat::new(p_dim, 1, XT[..p_dim].to_vec());
        let yt = Mat::new(p_dim, 1, YT[..p_dim].to_vec());
        TrajectoryBatch {
            dt: 1.0,
            n_tau: 1,
            n_t: 1,
            // index 0 is the pre-history slot k = −1 (must be stripped)
            states: vec![x0.clone(), x0.clone(), xt],
            controls: vec![Mat::zeros(m_total, 1), Mat::new(m_total, 1, u0.to_vec())],
            aux: if with_aux { vec![x0, yt] } else { vec![] },
            dollar_controls: false,
        }
    }

    // ── tax-adjustment root ──────────────────────────────────────────

    #[test]
    fn tax_root_matches_frozen_values() {
        assert_rel(compute_a(0.04, 2.0, 0.01).unwrap(), -0.0049257480330243686, 1e-14, "a(table 1)");
        assert_rel(compute_a(0.04, 1.0, 0.2).unwrap(), -0.25467001677156798, 1e-14, "a(table 2)");
        assert_rel(compute_a(0.04, 1.0, 0.01).unwrap(), -0.0097059671130770298, 1e-14, "a(table 3)");
        // No tax, no adjustment.
        assert!(compute_a(0.04, 2.0, 0.0).unwrap().abs() <= 1e-15);
    }

    #[test]
    fn tax_root_rejects_degenerate_inputs() {
        // Discriminant exactly zero.
        assert!(compute_a(0.0, 1.0, 0.25).is_err());
        // Tax so heavy the quadratic has no real root.
        assert!(compute_a(0.04, 1.0, 10.0).is_err());
        assert!(compute_a(0.04, 0.0, 0.01).is_err());
        assert!(compute_a(-2.0, 1.0, 0.01).is_err());
    }

    #[test]
    fn tax_root_solves_its_quadratic() {
        // Property check over 10^4 parameter triples: the returned root must
        // satisfy lambda*a^2 + (r+lambda)*a + mu2 = 0 to near machine
        // precision, and must be the branch in (-1, 0].
        let seed = 0xA11CE;
        for i in 0..10_000u64 {
            let r = rng::uniform_in(seed, &[i, 0], 0.0, 0.10);
            let lambda = rng::uniform_in(seed, &[i, 1], 0.1, 5.0);
            let rl = r + lambda;
            let mu2 = rng::uniform_in(seed, &[i, 2], 0.0, 0.9 * rl * rl / (4.0 * lambda));
            let a = compute_a(r, lambda, mu2).unwrap();
            let residual = lambda * a * a + rl * a + mu2;
            assert!(
                residual.abs() <= 1e-12,
                "triple {i}: residual {residual} for (r={r}, lambda={lambda}, mu2={mu2})"
            );
            assert!(a <= 0.0 && a > -1.0, "triple {i}: root {a} outside (-1, 0]");
        }
    }

    // ── equilibrium coefficients ─────────────────────────────────────

    #[test]
    fn dollar_coefficients_match_frozen_table() {
        let p = PortfolioParams::table1_cara();
        let coef = nash_cara_coef(&p).unwrap();
        let want = [
            -0.23076923076923073,
            -0.5726495726495725,
            -0.91452991452991439,
            -1.2564102564102566,
            -1.5982905982905979,
            -1.9401709401709399,
            -2.2820512820512819,
            -2.623931623931623,
            -2.9658119658119655,
            -3.3076923076923075,
        ];
        assert_vec_rel(&coef, &want, 1e-13, "cara coef");
    }

    #[test]
    fn dollar_coefficient_spot_check_and_singularity() {
        // Two identical log-like players, unit market price of risk:
        // coef = 1 * (1 + 0.5*1/(1-0.5)) = 2.
        let p = PortfolioParams {
            n_players: 2,
            t_final: 1.0,
            mu1: 0.08,
            sigma: 0.2,
            r: 0.04,
            lambda: 2.0,
            mu2: 0.01,
            delta: vec![1.0, 1.0],
            theta: vec![0.5, 0.5],
            eps: None,
            x0: vec![1.0, 1.0],
        };
        let coef = nash_cara_coef(&p).unwrap();
        assert_vec_rel(&coef, &[2.0, 2.0], 1e-15, "spot coef");
        let mut sing = p;
        sing.theta = vec![1.0, 1.0];
        assert!(matches!(nash_cara_coef(&sing), Err(SddgError::Domain(_))));
    }

    #[test]
    fn fraction_coefficients_match_frozen_table() {
        let p = PortfolioParams::table2_crra();
        let coef = nash_crra_coef(&p).unwrap();
        let want = [
            0.38594872470836339,
            0.82230863302503698,
            1.0969778187862942,
            1.209956281992135,
            1.1612440226425593,
            0.95084104073756737,
            0.57874733627715924,
            0.044962909261334609,
            -0.65051224030990695,
            -1.5076781124365639,
        ];
        assert_vec_rel(&coef, &want, 1e-13, "crra coef");
    }

    #[test]
    fn fraction_coefficients_reduce_to_single_agent_forms() {
        let mut p = PortfolioParams::table2_crra();
        let merton = (p.mu1 - p.r) / (p.sigma * p.sigma);
        // Without competition the coefficient is the Merton fraction
        // delta_i * (mu1 - r)/sigma^2, exactly.
        p.theta = vec![0.0; p.n_players];
        let coef = nash_crra_coef(&p).unwrap();
        for (i, &c) in coef.iter().enumerate() {
            assert_eq!(c, merton * p.delta[i], "merton reduction player {i}");
        }
        // Log investors are immune to competition: coefficient == merton.
        let mut q = PortfolioParams::table2_crra();
        q.delta = vec![1.0; q.n_players];
        for (i, &c) in nash_crra_coef(&q).unwrap().iter().enumerate() {
            assert_eq!(c, merton, "log investor player {i}");
        }
    }

    #[test]
    fn consumption_time_constants_match_frozen_table() {
        let p = PortfolioParams::table3_consumption();
        let (beta, gamma) = consumption_beta_gamma(&p).unwrap();
        let want_beta = [
            0.0047398461320870252,
            0.002922342901550638,
            -0.0021276503224568343,
            -0.0050807584468019204,
            -0.0037448731496102761,
            0.00093484711973334091,
            0.004875977140585035,
            0.00085882492104183167,
            -0.021473568302058425,
            -0.075615428063136911,
        ];
        let want_gamma = [
            0.22094526231508874,
            0.040079500295671505,
            0.013685718111204035,
            0.0087967159846082388,
            0.010643420922259735,
            0.024240947606430294,
            0.10392634064082798,
            0.83870525830522191,
            12.740919851790311,
            364.33415713707058,
        ];
        assert_vec_rel(&beta, &want_beta, 1e-12, "beta");
        assert_vec_rel(&gamma, &want_gamma, 1e-12, "gamma");
    }

    #[test]
    fn consumption_constants_collapse_exactly_for_log_utility() {
        let p = PortfolioParams {
            n_players: 2,
            t_final: 2.0,
            mu1: 0.08,
            sigma: 0.2,
            r: 0.04,
            lambda: 1.0,
            mu2: 0.01,
            delta: vec![1.0, 2.0],
            theta: vec![0.3, 0.3],
            eps: Some(vec![4.0, 25.0]),
            x0: vec![1.0, 1.0],
        };
        let (beta, gamma) = consumption_beta_gamma(&p).unwrap();
        assert_eq!(beta[0], 0.0, "beta vanishes at delta = 1");
        assert_eq!(gamma[0], 0.25, "gamma = 1/eps at delta = 1");
    }

    #[test]
    fn consumption_gamma_scaling_identity() {
        // Scaling every terminal weight by kappa rescales gamma_i by
        // kappa^{-delta_i} * kappa^{theta_i(delta_i-1)/(1+m) * mean(delta)}.
        let p = PortfolioParams::table3_consumption();
        let (_, gamma) = consumption_beta_gamma(&p).unwrap();
        let kappa = 3.7;
        let mut ps = p.clone();
        ps.eps = Some(p.eps.as_ref().unwrap().iter().map(|&e| kappa * e).collect());
        let (_, gamma_s) = consumption_beta_gamma(&ps).unwrap();
        let m = p.theta_delta_m1_bar();
        let dbar = p.delta_bar();
        for i in 0..p.n_players {
            let factor = kappa.powf(-p.delta[i])
                * kappa.powf(p.theta[i] * (p.delta[i] - 1.0) / (1.0 + m) * dbar);
            assert_rel(gamma_s[i], factor * gamma[i], 1e-12, &format!("gamma scaling {i}"));
        }
    }

    // ── frozen cost fixtures ─────────────────────────────────────────

    #[test]
    fn exponential_utility_cost_matches_frozen_fixture() {
        let p = PortfolioParams {
            n_players: 2,
            t_final: 1.0,
            mu1: 0.08,
            sigma: 0.2,
            r: 0.04,
            lambda: 2.0,
            mu2: 0.01,
            delta: vec![0.5, 1.0],
            theta: vec![0.4, 0.6],
            eps: None,
            x0: vec![1.0, 1.5],
        };
        let game = GameSpec::PortfolioCara(p.clone());
        let traj = fixture_trajectory(2, 2, &[0.0, 0.0], true);
        let (cost, violations) = game.empirical_cost(&traj).unwrap();
        assert_vec_rel(&cost, &[0.21298026801551101, 0.82490828878472655], 1e-13, "cara cost");
        assert_eq!(violations, 0);
        // The natural objective is the (negative) expected utility.
        let (obj, _) = game.empirical_objective(&traj).unwrap();
        assert_eq!(obj[0], -cost[0]);
        assert_eq!(obj[1], -cost[1]);
    }

    #[test]
    fn power_utility_cost_matches_frozen_fixture() {
        let p = PortfolioParams {
            n_players: 2,
            t_final: 1.0,
            mu1: 0.08,
            sigma: 0.2,
            r: 0.04,
            lambda: 1.0,
            mu2: 0.2,
            delta: vec![0.5, 2.0],
            theta: vec![0.4, 0.6],
            eps: None,
            x0: vec![1.0, 1.5],
        };
        let game = GameSpec::PortfolioCrra(p);
        let traj = fixture_trajectory(2, 2, &[0.0, 0.0], true);
        let (cost, violations) = game.empirical_cost(&traj).unwrap();
        assert_vec_rel(&cost, &[0.82203741649172135, -1.7302428614939276], 1e-13, "crra cost");
        assert_eq!(violations, 0);
    }

    #[test]
    fn consumption_cost_matches_frozen_fixture() {
        let p = PortfolioParams {
            n_players: 2,
            t_final: 1.0,
            mu1: 0.08,
            sigma: 0.2,
            r: 0.04,
            lambda: 1.0,
            mu2: 0.01,
            delta: vec![0.5, 1.0],
            theta: vec![0.4, 0.6],
            eps: Some(vec![2.0, 3.0]),
            x0: vec![1.0, 1.5],
        };
        let game = GameSpec::Consumption(p);
        // Interleaved controls (pi_1, c_1, pi_2, c_2); the investment rows
        // must not affect the cost.
        let traj = fixture_trajectory(2, 4, &[0.7, 0.3, -0.2, 0.2], true);
        let (cost, violations) = game.empirical_cost(&traj).unwrap();
        assert_vec_rel(&cost, &[3.7500295785390367, 1.1663802025397718], 1e-13, "consumption cost");
        assert_eq!(violations, 0);
        let tilted = fixture_trajectory(2, 4, &[5.0, 0.3, 9.9, 0.2], true);
        let (cost2, _) = game.empirical_cost(&tilted).unwrap();
        assert_eq!(cost, cost2, "investment rows must be cost-neutral");
    }

    #[test]
    fn interbank_cost_matches_frozen_fixture() {
        let p = InterBankParams {
            n_players: 2,
            t_final: 1.0,
            sigma: 0.05,
            q: 1.0,
            eps_run: 2.0,
            c_term: 0.25,
            tau: 0.25,
            xi: vec![1.0, 2.0],
        };
        let game = GameSpec::InterBank(p);
        let traj = TrajectoryBatch {
            dt: 0.5,
            n_tau: 0,
            n_t: 2,
            states: vec![
                Mat::new(2, 1, vec![1.0, 2.0]),
                Mat::new(2, 1, vec![1.1, 1.8]),
                Mat::new(2, 1, vec![1.05, 1.9]),
            ],
            controls: vec![Mat::new(2, 1, vec![0.2, -0.1]), Mat::new(2, 1, vec![0.15, 0.0])],
            aux: vec![],
            dollar_controls: false,
        };
        let (cost, violations) = game.empirical_cost(&traj).unwrap();
        assert_vec_rel(&cost, &[0.14820312500000002, 0.18632812499999993], 1e-15, "interbank cost");
        assert_eq!(violations, 0);
        // Minimization game: objective == cost.
        let (obj, _) = game.empirical_objective(&traj).unwrap();
        assert_eq!(obj, cost);
    }

    #[test]
    fn interbank_cost_trivial_identities() {
        let p = InterBankParams {
            n_players: 2,
            t_final: 1.0,
            sigma: 0.05,
            q: 1.0,
            eps_run: 2.0,
            c_term: 0.25,
            tau: 0.5,
            xi: vec![1.3, 1.3],
        };
        let game = GameSpec::InterBank(p.clone());
        let flat = Mat::new(2, 1, vec![1.3, 1.3]);
        let zero_u = Mat::zeros(2, 1);
        let traj = TrajectoryBatch {
            dt: 1.0,
            n_tau: 0,
            n_t: 1,
            states: vec![flat.clone(), flat.clone()],
            controls: vec![zero_u.clone()],
            aux: vec![],
            dollar_controls: false,
        };
        let (cost, _) = game.empirical_cost(&traj).unwrap();
        assert_eq!(cost, vec![0.0, 0.0], "consensus with no lending costs nothing");

        // Static dispersion d: J_i = (eps/2 + c/2) d^2 when nobody acts.
        let spread = Mat::new(2, 1, vec![1.5, 0.5]);
        let traj_d = TrajectoryBatch {
            states: vec![spread.clone(), spread.clone()],
            ..traj.clone()
        };
        let (cost_d, _) = game.empirical_cost(&traj_d).unwrap();
        let want = (p.eps_run / 2.0 + p.c_term / 2.0) * 0.25;
        assert_eq!(cost_d, vec![want, want]);

        // Borrowing toward the mean is rewarded through the q term.
        let aligned = Mat::new(2, 1, vec![-0.5, 0.5]);
        let traj_q = TrajectoryBatch {
            states: vec![spread.clone(), spread.clone()],
            controls: vec![aligned],
            ..traj.clone()
        };
        let (cost_q, _) = game.empirical_cost(&traj_q).unwrap();
        // f gains 1/2 alpha^2 - q alpha dev = 0.125 - 0.25 per player.
        assert_eq!(cost_q, vec![want - 0.125, want - 0.125]);
    }

    // ── analytic oracles ─────────────────────────────────────────────

    #[test]
    fn dollar_equilibrium_is_state_independent() {
        let p = PortfolioParams::table1_cara();
        let game = GameSpec::PortfolioCara(p.clone());
        let grid = game.default_grid();
        let oracle = NashOracle::new(&game, &grid, None).unwrap();
        assert!(oracle.dollar_controls());
        let xa = Mat::from_fn(10, 3, |i, b| 1.0 + 0.3 * i as f64 + 0.1 * b as f64);
        let xb = Mat::from_fn(10, 3, |i, b| 9.0 - 0.2 * i as f64 + 0.4 * b as f64);
        let ya = Mat::full(10, 3, 2.0);
        let yb = Mat::full(10, 3, 7.5);
        let ua = oracle.controls_at(0, 0.0, &xa, Some(&ya), &[]);
        let ub = oracle.controls_at(0, 0.0, &xb, Some(&yb), &[]);
        assert_eq!(ua.as_slice(), ub.as_slice(), "dollar rule must ignore the state");
        // At t = 0 the dollar amount is the coefficient itself.
        let coef = nash_cara_coef(&p).unwrap();
        for i in 0..10 {
            assert_eq!(ua.get(i, 0), coef[i]);
        }
        // Exponential growth in time at rate rho = r + lambda a.
        let rho = p.rho().unwrap();
        let u_late = oracle.controls_at(50, 5.0, &xa, Some(&ya), &[]);
        for i in 0..10 {
            assert_rel(u_late.get(i, 0), coef[i] * (rho * 5.0).exp(), 1e-15, "growth");
        }
    }

    #[test]
    fn fraction_equilibrium_matches_formula() {
        let p = PortfolioParams::table2_crra();
        let game = GameSpec::PortfolioCrra(p.clone());
        let grid = game.default_grid();
        let oracle = NashOracle::new(&game, &grid, None).unwrap();
        assert!(!oracle.dollar_controls());
        let a = p.a().unwrap();
        let coef = nash_crra_coef(&p).unwrap();
        let x = Mat::from_fn(10, 2, |i, b| 1.3 + 0.07 * i as f64 + 0.2 * b as f64);
        let y = Mat::from_fn(10, 2, |i, b| 0.9 + 0.05 * i as f64 + 0.1 * b as f64);
        let u = oracle.controls_at(3, 0.03, &x, Some(&y), &[]);
        for i in 0..10 {
            for b in 0..2 {
                let want = coef[i] * (x.get(i, b) + a * y.get(i, b)) / x.get(i, b);
                assert_eq!(u.get(i, b), want, "player {i} path {b}");
                let f = nash_crra(0.03, x.get(i, b), y.get(i, b), i, &p, a).unwrap();
                assert_eq!(f, want);
            }
        }
        assert!(nash_crra(0.0, 0.0, 1.0, 0, &p, a).is_err());
    }

    #[test]
    fn consumption_equilibrium_channels_match_formulas() {
        let p = PortfolioParams {
            n_players: 2,
            t_final: 2.0,
            mu1: 0.08,
            sigma: 0.2,
            r: 0.04,
            lambda: 1.0,
            mu2: 0.01,
            delta: vec![0.5, 1.0],
            theta: vec![0.4, 0.6],
            eps: Some(vec![2.0, 3.0]),
            x0: vec![1.0, 1.5],
        };
        let game = GameSpec::Consumption(p.clone());
        let grid = TimeGrid::new(0.5, 1, 4).unwrap();
        let oracle = NashOracle::new(&game, &grid, None).unwrap();
        let a = p.a().unwrap();
        let coef = nash_crra_coef(&p).unwrap();
        let (beta, gamma) = consumption_beta_gamma(&p).unwrap();
        let x = Mat::new(2, 1, vec![1.4, 0.9]);
        let y = Mat::new(2, 1, vec![1.1, 1.0]);
        let k = 1;
        let t = grid.t(k as i64);
        let u = oracle.controls_at(k, t, &x, Some(&y), &[]);
        assert_eq!(u.rows(), 4);
        for i in 0..2 {
            let ratio = (x.get(i, 0) + a * y.get(i, 0)) / x.get(i, 0);
            assert_eq!(u.get(2 * i, 0), coef[i] * ratio, "investment channel {i}");
            let s = p.t_final - t;
            let denom = if p.delta[i] == 1.0 {
                s + 1.0 / gamma[i]
            } else {
                let em1 = (-beta[i] * s).exp_m1();
                -em1 / beta[i] + (1.0 + em1) / gamma[i]
            };
            assert_rel(u.get(2 * i + 1, 0), ratio / denom, 1e-14, &format!("consumption channel {i}"));
        }
        // Free-function form agrees.
        let (pi0, c0) = nash_consumption(t, 1.4, 1.1, 0, &p, a).unwrap();
        assert_eq!(pi0, u.get(0, 0));
        assert_eq!(c0, u.get(1, 0));
    }

    #[test]
    fn consumption_rate_limits() {
        // At the horizon the rate is gamma itself (both branches).
        assert_rel(consumption_rate(0.7, 0.35, 2.0, 0.0).unwrap(), 0.35, 1e-15, "rate at T");
        assert_rel(consumption_rate(0.0, 0.5, 1.0, 0.0).unwrap(), 0.5, 1e-15, "log rate at T");
        // Log branch is the reciprocal remaining-horizon rule.
        let got = consumption_rate(0.0, 0.5, 1.0, 1.5).unwrap();
        assert_eq!(got, 1.0 / (1.5 + 2.0));
        // The stabilized general branch tends to the log branch as beta -> 0.
        let tiny = consumption_rate(1e-12, 0.5, 2.0, 1.5).unwrap();
        assert_rel(tiny, 1.0 / 3.5, 1e-9, "beta -> 0 limit");
    }

    fn small_interbank() -> (InterBankParams, ESolution, TimeGrid) {
        let p = InterBankParams {
            n_players: 2,
            t_final: 1.0,
            sigma: 0.05,
            q: 1.0,
            eps_run: 2.0,
            c_term: 0.25,
            tau: 0.25,
            xi: vec![1.0, 1.6],
        };
        let e = ESolution::solve(&p.pde_params(), 200, 25).unwrap();
        let grid = TimeGrid::new(0.0125, 20, 80).unwrap();
        (p, e, grid)
    }

    #[test]
    fn interbank_equilibrium_identities() {
        let (p, e, grid) = small_interbank();
        let game = GameSpec::InterBank(p.clone());
        let oracle = NashOracle::new(&game, &grid, Some(&e)).unwrap();
        assert!(!oracle.dollar_controls());

        // Consensus: nothing to do.
        let flat = Mat::full(2, 3, 1.2);
        let u = oracle.controls_at(0, 0.0, &flat, None, &[]);
        assert_eq!(u.as_slice(), &[0.0; 6][..], "consensus implies zero lending");

        // Lending is a pure transfer: controls sum to zero across players,
        // and for two players they are exact opposites.
        let x = Mat::new(2, 1, vec![1.0, 1.6]);
        let u = oracle.controls_at(0, 0.0, &x, None, &[]);
        assert_eq!(u.get(0, 0), -u.get(1, 0));

        // Wiring check against the defining formula at k = 0 (no history):
        // alpha_i = gain*(E1(0,0)+E0(0)+q/gain)*(xbar-x_i) / (1+kappa).
        let gain = 2.0 * (1.0 - 1.0 / 2.0);
        let base = e.e1_at(0.0, 0.0).unwrap() + e.e0_at(0.0).unwrap() + p.q / gain;
        let kappa =
            gain * (grid.dt() / 2.0) * (e.e2_at(0.0, 0.0, 0.0).unwrap() + e.e1_at(0.0, 0.0).unwrap());
        let want0 = gain * base * 0.3 / (1.0 + kappa);
        assert_rel(u.get(0, 0), want0, 1e-14, "closed-form one-step control");

        // With a running history the transfer identity still holds exactly
        // for two players.
        let hist = vec![Mat::new(2, 1, vec![0.21, -0.17]), Mat::new(2, 1, vec![0.05, 0.30])];
        let u2 = oracle.controls_at(2, grid.t(2), &x, None, &hist);
        assert_eq!(u2.get(0, 0), -u2.get(1, 0), "transfers cancel with history");
    }

    #[test]
    fn interbank_deviation_scales_one_row_and_preserves_others() {
        let (p, e, _) = small_interbank();
        let game = GameSpec::InterBank(p);
        let grid = TimeGrid::new(0.125, 2, 8).unwrap();
        let clean = NashOracle::new(&game, &grid, Some(&e)).unwrap();
        let bent = NashOracle::new(&game, &grid, Some(&e)).unwrap().with_deviation(0, 0.95);

        let x0 = Mat::new(2, 1, vec![1.0, 1.6]);
        let u_eq = clean.controls_at(0, 0.0, &x0, None, &[]);
        let u_dev = bent.controls_at(0, 0.0, &x0, None, &[]);
        assert_eq!(u_dev.get(0, 0), 0.95 * u_eq.get(0, 0));
        assert_eq!(u_dev.get(1, 0), u_eq.get(1, 0));

        // Same state path later on: the non-deviating player's strategy is
        // unchanged because the rule unwinds the scaling in its own history.
        let x1 = Mat::new(2, 1, vec![1.05, 1.55]);
        let v_eq = clean.controls_at(1, grid.t(1), &x1, None, &[u_eq.clone()]);
        let v_dev = bent.controls_at(1, grid.t(1), &x1, None, &[u_dev.clone()]);
        assert_rel(v_dev.get(1, 0), v_eq.get(1, 0), 1e-12, "other player's response");
        assert_rel(v_dev.get(0, 0), 0.95 * v_eq.get(0, 0), 1e-12, "deviator's scaled response");
    }

    #[test]
    fn oracle_rejects_mismatched_setups() {
        let p = PortfolioParams::table2_crra();
        let game = GameSpec::PortfolioCrra(p);
        // Wrong horizon.
        let grid = TimeGrid::new(0.01, 100, 50).unwrap();
        assert!(NashOracle::new(&game, &grid, None).is_err());

        let (ib, e, grid_ib) = small_interbank();
        let game_ib = GameSpec::InterBank(ib.clone());
        // Missing E-system.
        assert!(NashOracle::new(&game_ib, &grid_ib, None).is_err());
        // E-system solved for different parameters.
        let mut other = ib;
        other.q = 2.0;
        let game_other = GameSpec::InterBank(other);
        assert!(NashOracle::new(&game_other, &grid_ib, Some(&e)).is_err());
    }

    // ── simulation-level checks ──────────────────────────────────────

    #[test]
    fn dollar_and_fraction_parameterizations_agree() {
        // Simulating the dollar rule directly and the same rule re-expressed
        // as a wealth fraction must produce nearly identical paths.
        let p = PortfolioParams::table1_cara();
        let game = GameSpec::PortfolioCara(p.clone());
        let grid = game.default_grid();
        let noise = BrownianBatch::sample(&grid, 1, 64, 0x5EED);
        let traj_d = simulate_nash(&game, &grid, &noise, None, None).unwrap();

        let coef = nash_cara_coef(&p).unwrap();
        let rho = p.rho().unwrap();
        let frac = move |_k: usize, t: f64, x: &Mat, _aux: Option<&Mat>, _h: &[Mat]| {
            Mat::from_fn(x.rows(), x.cols(), |i, b| coef[i] * (rho * t).exp() / x.get(i, b))
        };
        let source = ControlSource::Feedback { f: &frac, dollar_controls: false };
        let traj_f = crate::engine::simulate(&game, &grid, &noise, &source).unwrap();

        let xt_d = traj_d.state_at(grid.n_t() as i64);
        let xt_f = traj_f.state_at(grid.n_t() as i64);
        for i in 0..10 {
            for b in 0..64 {
                assert_rel(xt_f.get(i, b), xt_d.get(i, b), 1e-10, &format!("terminal x[{i},{b}]"));
            }
        }
    }

    #[test]
    fn fraction_equilibrium_keeps_wealth_admissible() {
        let p = PortfolioParams::table2_crra();
        let game = GameSpec::PortfolioCrra(p);
        let grid = game.default_grid();
        let noise = BrownianBatch::sample(&grid, 1, 256, 0xB0B);
        let traj = simulate_nash(&game, &grid, &noise, None, None).unwrap();
        let (_, violations) = game.empirical_cost(&traj).unwrap();
        assert_eq!(violations, 0, "equilibrium play must not hit the positivity floor");
    }

    #[test]
    fn consumption_equilibrium_is_positive_by_construction() {
        let p = PortfolioParams::table3_consumption();
        let game = GameSpec::Consumption(p);
        let grid = game.default_grid();
        let noise = BrownianBatch::sample(&grid, 1, 128, 0xC0FFEE);
        let traj = simulate_nash(&game, &grid, &noise, None, None).unwrap();
        for k in 0..grid.n_t() {
            let u = traj.control_at(k as i64);
            for i in 0..10 {
                for b in 0..128 {
                    assert!(u.get(2 * i + 1, b) > 0.0, "consumption rate must stay positive");
                }
            }
        }
        let (_, violations) = game.empirical_cost(&traj).unwrap();
        assert_eq!(violations, 0);
    }

    #[test]
    fn discounted_wealth_mean_matches_closed_form() {
        // Under the fraction equilibrium the adjusted wealth Z = X + aY is a
        // geometric Brownian motion; the Euler scheme preserves its mean
        // recursion exactly, so E[e^{-rho T} Z_T] = Z_0 (1 + mu_z dt)^{N_T}
        // e^{-rho T} with mu_z = (mu1-r) coef_i + rho.
        let p = PortfolioParams::table2_crra();
        let game = GameSpec::PortfolioCrra(p.clone());
        let grid = game.default_grid();
        let batch = 4096;
        let noise = BrownianBatch::sample(&grid, 1, batch, 0xD1CE);
        let traj = simulate_nash(&game, &grid, &noise, None, None).unwrap();
        let a = p.a().unwrap();
        let rho = p.rho().unwrap();
        let coef = nash_crra_coef(&p).unwrap();
        let xt = traj.state_at(grid.n_t() as i64);
        let yt = traj.aux.last().unwrap();
        let disc = (-rho * grid.t_final()).exp();
        for i in 0..p.n_players {
            let z0 = (1.0 + a) * p.x0[i];
            let mu_z = (p.mu1 - p.r) * coef[i] + rho;
            let target = z0 * (1.0 + mu_z * grid.dt()).powi(grid.n_t() as i32) * disc;
            let mut mean = 0.0;
            let mut m2 = 0.0;
            for b in 0..batch {
                let z = disc * (xt.get(i, b) + a * yt.get(i, b));
                mean += z;
            }
            mean /= batch as f64;
            for b in 0..batch {
                let z = disc * (xt.get(i, b) + a * yt.get(i, b));
                m2 += (z - mean) * (z - mean);
            }
            let se = (m2 / (batch as f64 - 1.0) / batch as f64).sqrt();
            assert!(
                (mean - target).abs() <= 4.0 * se,
                "player {i}: mean {mean} vs closed form {target} (se {se})"
            );
        }
    }

    #[test]
    fn evaluation_is_chunk_invariant() {
        let p = PortfolioParams::table2_crra();
        let game = GameSpec::PortfolioCrra(p);
        let grid = game.default_grid();
        let oracle = NashOracle::new(&game, &grid, None).unwrap();
        let fb = oracle.feedback();
        let source = ControlSource::Feedback { f: &*fb, dollar_controls: oracle.dollar_controls() };
        let a = eval_costs(&game, &grid, &source, 0xFEED, 100, 32).unwrap();
        let b = eval_costs(&game, &grid, &source, 0xFEED, 100, 100).unwrap();
        assert_eq!(a.costs.as_slice(), b.costs.as_slice(), "chunking must not change results");
        assert_eq!(a.violations, b.violations);
    }

    #[test]
    fn unilateral_deviation_does_not_pay_portfolio() {
        // Paired common-random-number check of the equilibrium property on a
        // small batch: scaling one player's control by 0.95 or 1.05 must not
        // reduce that player's cost beyond Monte Carlo noise.
        let p = PortfolioParams::table1_cara();
        let game = GameSpec::PortfolioCara(p.clone());
        let grid = game.default_grid();
        let total = 2048;
        let seed = 0xACCE55;
        let eq = eval_nash_costs(&game, &grid, None, None, seed, total).unwrap();
        for &i in &[0usize, 4, 9] {
            for &factor in &[0.95, 1.05] {
                let dev = eval_nash_costs(&game, &grid, None, Some((i, factor)), seed, total).unwrap();
                let mut mean = 0.0;
                for b in 0..total {
                    mean += dev.costs.get(i, b) - eq.costs.get(i, b);
                }
                mean /= total as f64;
                let mut var = 0.0;
                for b in 0..total {
                    let d = dev.costs.get(i, b) - eq.costs.get(i, b) - mean;
                    var += d * d;
                }
                let se = (var / (total as f64 - 1.0) / total as f64).sqrt();
                assert!(
                    mean >= -2.0 * se,
                    "player {i} factor {factor}: deviation lowered cost by {mean} (se {se})"
                );
            }
        }
    }

    #[test]
    fn unilateral_deviation_does_not_pay_interbank() {
        let p = InterBankParams::table4();
        let game = GameSpec::InterBank(p.clone());
        let grid = game.default_grid();
        let e = ESolution::solve(&p.pde_params(), 400, 50).unwrap();
        let total = 1024;
        let seed = 0xBA0BAB;
        let eq = eval_nash_costs(&game, &grid, Some(&e), None, seed, total).unwrap();
        for &i in &[0usize, 9] {
            for &factor in &[0.95, 1.05] {
                let dev =
                    eval_nash_costs(&game, &grid, Some(&e), Some((i, factor)), seed, total).unwrap();
                let mut mean = 0.0;
                for b in 0..total {
                    mean += dev.costs.get(i, b) - eq.costs.get(i, b);
                }
                mean /= total as f64;
                let mut var = 0.0;
                for b in 0..total {
                    let d = dev.costs.get(i, b) - eq.costs.get(i, b) - mean;
                    var += d * d;
                }
                let se = (var / (total as f64 - 1.0) / total as f64).sqrt();
                assert!(
                    mean >= -2.0 * se,
                    "player {i} factor {factor}: deviation lowered cost by {mean} (se {se})"
                );
            }
        }
    }

    // ── validation and plumbing ──────────────────────────────────────

    #[test]
    fn default_grids_are_consistent_with_horizons() {
        let games = [
            GameSpec::PortfolioCara(PortfolioParams::table1_cara()),
            GameSpec::PortfolioCrra(PortfolioParams::table2_crra()),
            GameSpec::Consumption(PortfolioParams::table3_consumption()),
            GameSpec::InterBank(InterBankParams::table4()),
        ];
        for g in &games {
            g.validate().unwrap();
            let grid = g.default_grid();
            assert_rel(grid.t_final(), g.t_final(), 1e-12, "grid horizon");
            assert_eq!(grid.n_t(), 100);
        }
        let ib = GameSpec::InterBank(InterBankParams::table4());
        assert_rel(ib.default_grid().tau(), 0.25, 1e-12, "interbank delay");
        assert_eq!(ib.default_eval_batch(), 1 << 12);
        assert_eq!(games[0].default_eval_batch(), 1 << 15);
    }

    #[test]
    fn validation_warns_on_large_competition_weights() {
        diag::take_warnings();
        PortfolioParams::table1_cara().validate(false).unwrap();
        let warnings = diag::take_warnings();
        assert!(
            warnings.iter().any(|w| w.contains("theta")),
            "expected a competition-weight warning, got {warnings:?}"
        );
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        let mut p = PortfolioParams::table1_cara();
        p.delta[3] = 0.0;
        assert!(p.validate(false).is_err());
        let mut p = PortfolioParams::table1_cara();
        p.mu1 = p.r;
        assert!(p.validate(false).is_err());
        let mut p = PortfolioParams::table2_crra();
        p.x0[0] = -1.0;
        assert!(p.validate(false).is_err());
        let p = PortfolioParams::table2_crra();
        assert!(p.validate(true).is_err(), "consumption game needs eps");
        let mut ib = InterBankParams::table4();
        ib.tau = 2.0;
        assert!(ib.validate().is_err());
        let mut ib = InterBankParams::table4();
        ib.xi.pop();
        assert!(ib.validate().is_err());
    }

    #[test]
    fn game_spec_serde_roundtrip() {
        let games = [
            GameSpec::Consumption(PortfolioParams::table3_consumption()),
            GameSpec::InterBank(InterBankParams::table4()),
        ];
        for g in &games {
            let json = serde_json::to_string(g).unwrap();
            let back: GameSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(&back, g);
        }
    }

    #[test]
    fn interbank_terminal_feedback_gain_frozen() {
        // At the horizon the equilibrium gain on (xbar - x_i) collapses to
        // 2(1 - 1/N)(c/2) + q.
        let p = InterBankParams::table4();
        let e = ESolution::solve(&p.pde_params(), 200, 25).unwrap();
        let gain = 2.0 * (1.0 - 1.0 / p.n_players as f64);
        let terminal = gain * (e.e0_at(p.t_final).unwrap() + e.e1_at(p.t_final, 0.0).unwrap()) + p.q;
        assert_rel(terminal, 1.2250000000000001, 1e-15, "terminal gain");
    }
}

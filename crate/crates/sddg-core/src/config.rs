//! Experiment configuration: the JSON schema users write, the built-in
//! presets for the four benchmark parameter tables, and the resolution
//! step that materializes every default into a [`ResolvedConfig`].
//!
//! Resolution is idempotent: the `config_resolved.json` an experiment
//! writes is itself a valid input config and resolves to the same resolved
//! form, which is what makes bitwise re-runs possible.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{Dynamics, TimeGrid};
use crate::error::SddgError;
use crate::games::{GameSpec, InterBankParams, PortfolioParams};
use crate::metrics::DEFAULT_PLAYER_SUBSET;
use crate::train::{LrStage, TrainingConfig};

// ─────────────────────────────────────────────────────────────────────────
// Presets
// ─────────────────────────────────────────────────────────────────────────

/// Built-in preset names, one per benchmark parameter table.
pub const PRESET_NAMES: [&str; 4] =
    ["cara_table1", "crra_table2", "consumption_table3", "interbank_table4"];

/// Look up a benchmark game by preset name.
pub fn preset_game(name: &str) -> Result<GameSpec, SddgError> {
    match name {
        "cara_table1" => Ok(GameSpec::PortfolioCara(PortfolioParams::table1_cara())),
        "crra_table2" => Ok(GameSpec::PortfolioCrra(PortfolioParams::table2_crra())),
        "consumption_table3" => Ok(GameSpec::Consumption(PortfolioParams::table3_consumption())),
        "interbank_table4" => Ok(GameSpec::InterBank(InterBankParams::table4())),
        other => Err(SddgError::InvalidConfig(format!(
            "unknown preset {other:?}; available presets: {}",
            PRESET_NAMES.join(", ")
        ))),
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Input schema
// ─────────────────────────────────────────────────────────────────────────

/// Run mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Full pipeline: (PDE solve,) training, evaluation, trajectory table.
    Train,
    /// Evaluate a saved checkpoint against the oracle; no training.
    EvalOnly,
    /// Oracle trajectories and objectives only; no policies involved.
    OracleOnly,
    /// Inter-bank PDE solve and residual report only.
    PdeOnly,
}

/// Partial time-grid specification. Any consistent subset of
/// `{dt, n_t, tau, n_tau}` may be given; the rest is derived from the
/// game's horizon and delay (portfolio games default to a warm-up
/// truncation of τ = 1.0).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_tau: Option<usize>,
}

/// Per-field training overrides; anything absent keeps the game's default.
/// Overriding `n_stages` without an explicit `lr_schedule` clips or extends
/// the default schedule to the new round count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingOverrides {
    #[serde(default)]
    pub n_stages: Option<usize>,
    #[serde(default)]
    pub lr_schedule: Option<Vec<LrStage>>,
    #[serde(default)]
    pub batch_train: Option<usize>,
    #[serde(default)]
    pub batch_eval: Option<usize>,
    #[serde(default)]
    pub eval_every: Option<usize>,
    #[serde(default)]
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub steps_per_player: Option<usize>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub include_aux_input: Option<bool>,
    #[serde(default)]
    pub n_hidden: Option<usize>,
    #[serde(default)]
    pub adam_beta1: Option<f64>,
    #[serde(default)]
    pub adam_beta2: Option<f64>,
    #[serde(default)]
    pub adam_eps: Option<f64>,
}

fn default_pde_nt() -> usize {
    800
}
fn default_pde_ns() -> usize {
    50
}

/// Resolution of the inter-bank PDE grid backing the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeOptions {
    #[serde(default = "default_pde_nt")]
    pub n_t: usize,
    #[serde(default = "default_pde_ns")]
    pub n_s: usize,
}

impl Default for PdeOptions {
    fn default() -> Self {
        PdeOptions { n_t: default_pde_nt(), n_s: default_pde_ns() }
    }
}

/// The experiment configuration as written by users (JSON). Give either a
/// `preset` name or an inline `game`; everything else is optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub game: Option<GameSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingOverrides>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Convenience override for `training.master_seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub master_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    /// 1-based players included in the trajectory-comparison table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub players_to_plot: Option<Vec<usize>>,
    /// Parameter checkpoint to load (required for mode "eval-only").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pde: Option<PdeOptions>,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self, SddgError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, SddgError> {
        let s = fs::read_to_string(path).map_err(|e| SddgError::io(path.display().to_string(), e))?;
        Self::from_json(&s)
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct CliOverrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub rounds: Option<usize>,
}

// ─────────────────────────────────────────────────────────────────────────
// Resolved form
// ─────────────────────────────────────────────────────────────────────────

/// Exact time grid in integer steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedGrid {
    pub dt: f64,
    pub n_tau: usize,
    pub n_t: usize,
}

/// Fully materialized configuration: every default spelled out. Writing it
/// to `config_resolved.json` and re-running from that file reproduces the
/// experiment bit for bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub game: GameSpec,
    pub grid: ResolvedGrid,
    pub training: TrainingConfig,
    pub out_dir: PathBuf,
    pub mode: Mode,
    pub players_to_plot: Vec<usize>,
    pub checkpoint: Option<PathBuf>,
    pub pde: PdeOptions,
}

impl ResolvedConfig {
    pub fn time_grid(&self) -> Result<TimeGrid, SddgError> {
        TimeGrid::new(self.grid.dt, self.grid.n_tau, self.grid.n_t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("resolved config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), SddgError> {
        let mut s = self.to_json();
        s.push('\n');
        fs::write(path, s).map_err(|e| SddgError::io(path.display().to_string(), e))
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Resolution
// ─────────────────────────────────────────────────────────────────────────

/// Number of steps covering `total` at step `dt`, requiring an integer
/// multiple (relative tolerance 1e-9).
fn int_steps(total: f64, dt: f64, what: &str) -> Result<usize, SddgError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(SddgError::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    if total == 0.0 {
        return Ok(0);
    }
    let steps = (total / dt).round();
    if steps < 1.0 || (steps * dt - total).abs() > 1e-9 * total.abs().max(1.0) {
        return Err(SddgError::InvalidConfig(format!(
            "{what} = {total} is not an integer multiple of dt = {dt}"
        )));
    }
    Ok(steps as usize)
}

fn default_dt(game: &GameSpec) -> f64 {
    match game {
        GameSpec::PortfolioCara(_) => 0.1,
        GameSpec::PortfolioCrra(_) => 0.01,
        GameSpec::Consumption(_) => 0.02,
        GameSpec::InterBank(_) => 0.01,
    }
}

fn resolve_grid(game: &GameSpec, g: &GridConfig) -> Result<ResolvedGrid, SddgError> {
    let t_final = game.t_final();
    let dt = match (g.dt, g.n_t) {
        (Some(dt), _) => dt,
        (None, Some(n_t)) if n_t > 0 => t_final / n_t as f64,
        (None, Some(_)) => {
            return Err(SddgError::InvalidConfig("grid.n_t must be positive".into()))
        }
        (None, None) => default_dt(game),
    };
    let n_t = int_steps(t_final, dt, "horizon T")?;
    if n_t == 0 {
        return Err(SddgError::InvalidConfig(format!(
            "horizon {t_final} yields no time steps at dt = {dt}"
        )));
    }
    if let Some(want) = g.n_t {
        if want != n_t {
            return Err(SddgError::InvalidConfig(format!(
                "grid.n_t = {want} conflicts with dt = {dt} over horizon {t_final} (n_t = {n_t})"
            )));
        }
    }
    // Delay window: the inter-bank game's true delay, or the warm-up
    // truncation of the portfolio games' trailing-average dependence.
    let tau = match (g.tau, g.n_tau) {
        (Some(tau), _) => {
            if !(tau.is_finite() && tau >= 0.0) {
                return Err(SddgError::InvalidConfig(format!("grid.tau must be >= 0, got {tau}")));
            }
            tau
        }
        (None, Some(n_tau)) => n_tau as f64 * dt,
        (None, None) => match game {
            GameSpec::InterBank(p) => p.tau,
            _ => 1.0,
        },
    };
    let n_tau = int_steps(tau, dt, "delay window tau")?;
    if let Some(want) = g.n_tau {
        if want != n_tau {
            return Err(SddgError::InvalidConfig(format!(
                "grid.n_tau = {want} conflicts with tau = {tau} at dt = {dt} (n_tau = {n_tau})"
            )));
        }
    }
    if let GameSpec::InterBank(p) = game {
        if (n_tau as f64 * dt - p.tau).abs() > 1e-9 * p.tau.abs().max(1.0) {
            return Err(SddgError::InvalidConfig(format!(
                "inter-bank delay {} must equal the grid delay window {} (n_tau·dt)",
                p.tau,
                n_tau as f64 * dt
            )));
        }
    }
    Ok(ResolvedGrid { dt, n_tau, n_t })
}

/// Clip or extend a learning-rate schedule to a new total round count
/// (used by `--rounds` and by `n_stages` overrides without an explicit
/// schedule).
pub fn clamp_schedule(stages: &[LrStage], n_stages: usize) -> Vec<LrStage> {
    if n_stages == 0 {
        return Vec::new();
    }
    let mut out: Vec<LrStage> = Vec::new();
    for s in stages {
        if s.first_round > n_stages {
            break;
        }
        out.push(LrStage {
            first_round: s.first_round,
            last_round: s.last_round.min(n_stages),
            lr: s.lr,
        });
    }
    if let Some(last) = out.last_mut() {
        if last.last_round < n_stages {
            last.last_round = n_stages;
        }
    }
    out
}

fn apply_training(base: &mut TrainingConfig, o: &TrainingOverrides) {
    if let Some(v) = &o.lr_schedule {
        base.lr_schedule = v.clone();
    }
    if let Some(v) = o.n_stages {
        base.n_stages = v;
        if o.lr_schedule.is_none() {
            base.lr_schedule = clamp_schedule(&base.lr_schedule, v);
        }
    }
    if let Some(v) = o.batch_train {
        base.batch_train = v;
    }
    if let Some(v) = o.batch_eval {
        base.batch_eval = v;
    }
    if let Some(v) = o.eval_every {
        base.eval_every = v;
    }
    if let Some(v) = o.master_seed {
        base.master_seed = v;
    }
    if let Some(v) = o.grad_clip {
        base.grad_clip = Some(v);
    }
    if let Some(v) = o.steps_per_player {
        base.steps_per_player = v;
    }
    if let Some(v) = o.checkpoint_every {
        base.checkpoint_every = Some(v);
    }
    if let Some(v) = o.include_aux_input {
        base.include_aux_input = v;
    }
    if let Some(v) = o.n_hidden {
        base.n_hidden = v;
    }
    if let Some(v) = o.adam_beta1 {
        base.adam_beta1 = v;
    }
    if let Some(v) = o.adam_beta2 {
        base.adam_beta2 = v;
    }
    if let Some(v) = o.adam_eps {
        base.adam_eps = v;
    }
}

impl ExperimentConfig {
    /// Materialize every default, applying command-line overrides last
    /// (seed and rounds act on the training config, out/mode on the run).
    pub fn resolve(&self, cli: &CliOverrides) -> Result<ResolvedConfig, SddgError> {
        let game = match (&self.preset, &self.game) {
            (Some(p), None) => preset_game(p)?,
            (None, Some(g)) => g.clone(),
            (Some(_), Some(_)) => {
                return Err(SddgError::InvalidConfig(
                    "give either a preset name or an inline game, not both".into(),
                ))
            }
            (None, None) => {
                return Err(SddgError::InvalidConfig(
                    "config must name a preset or define an inline game".into(),
                ))
            }
        };
        game.validate()?;

        let mut training = TrainingConfig::default_for(&game);
        if let Some(o) = &self.training {
            apply_training(&mut training, o);
        }
        if let Some(seed) = self.master_seed {
            training.master_seed = seed;
        }
        if let Some(seed) = cli.seed {
            training.master_seed = seed;
        }
        if let Some(rounds) = cli.rounds {
            training.n_stages = rounds;
            training.lr_schedule = clamp_schedule(&training.lr_schedule, rounds);
        }
        training.validate()?;

        let grid = resolve_grid(&game, &self.grid.unwrap_or_default())?;

        let n = game.n_players();
        let players_to_plot = match &self.players_to_plot {
            Some(v) => {
                if v.is_empty() {
                    return Err(SddgError::InvalidConfig(
                        "players_to_plot must not be empty".into(),
                    ));
                }
                let mut seen = vec![false; n + 1];
                for &p in v {
                    if p == 0 || p > n {
                        return Err(SddgError::InvalidConfig(format!(
                            "players_to_plot entry {p} out of range 1..={n}"
                        )));
                    }
                    if std::mem::replace(&mut seen[p], true) {
                        return Err(SddgError::InvalidConfig(format!(
                            "players_to_plot lists player {p} twice"
                        )));
                    }
                }
                v.clone()
            }
            None => DEFAULT_PLAYER_SUBSET.iter().copied().filter(|&p| p <= n).collect(),
        };

        let out_dir = cli
            .out_dir
            .clone()
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| {
                PathBuf::from("runs")
                    .join(self.preset.as_deref().unwrap_or_else(|| game.kind_name()))
            });
        let mode = cli.mode.or(self.mode).unwrap_or(Mode::Train);
        let pde = self.pde.unwrap_or_default();
        if pde.n_t < 2 || pde.n_s < 2 {
            return Err(SddgError::InvalidConfig(format!(
                "pde grid must be at least 2x2, got {}x{}",
                pde.n_t, pde.n_s
            )));
        }
        let checkpoint = self.checkpoint.clone();
        if mode == Mode::EvalOnly && checkpoint.is_none() {
            return Err(SddgError::InvalidConfig(
                "mode \"eval-only\" requires a \"checkpoint\" path to load".into(),
            ));
        }
        Ok(ResolvedConfig {
            game,
            grid,
            training,
            out_dir,
            mode,
            players_to_plot,
            checkpoint,
            pde,
        })
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::stage;

    fn resolve_str(json: &str) -> Result<ResolvedConfig, SddgError> {
        ExperimentConfig::from_json(json)?.resolve(&CliOverrides::default())
    }

    #[test]
    fn presets_resolve_to_the_published_tables_and_grids() {
        for name in PRESET_NAMES {
            let r = resolve_str(&format!("{{\"preset\": \"{name}\"}}")).unwrap();
            let want = preset_game(name).unwrap().default_grid();
            let got = r.time_grid().unwrap();
            assert_eq!(got.dt(), want.dt(), "{name} dt");
            assert_eq!(got.n_tau(), want.n_tau(), "{name} n_tau");
            assert_eq!(got.n_t(), want.n_t(), "{name} n_t");
            assert_eq!(r.training, TrainingConfig::default_for(&r.game), "{name} training");
            assert_eq!(r.mode, Mode::Train);
            assert_eq!(r.players_to_plot, vec![1, 3, 5, 7, 9]);
            assert_eq!(r.pde, PdeOptions { n_t: 800, n_s: 50 });
            assert_eq!(r.out_dir, PathBuf::from("runs").join(name));
        }
        assert!(preset_game("unknown_table9").is_err());
    }

    #[test]
    fn config_requires_exactly_one_game_source() {
        assert!(resolve_str("{}").is_err());
        let both = r#"{"preset": "crra_table2",
                       "game": {"kind": "inter_bank", "params": {
                         "n_players": 2, "t_final": 1.0, "sigma": 0.1, "q": 1.0,
                         "eps_run": 2.0, "c_term": 0.25, "tau": 0.25,
                         "xi": [1.0, 1.1]}}}"#;
        assert!(resolve_str(both).is_err());
        assert!(ExperimentConfig::from_json(r#"{"presett": "x"}"#).is_err(), "typos rejected");
    }

    #[test]
    fn seed_and_round_overrides_apply_in_precedence_order() {
        let cfg = ExperimentConfig::from_json(
            r#"{"preset": "crra_table2",
                "training": {"master_seed": 11, "batch_train": 64},
                "master_seed": 22}"#,
        )
        .unwrap();
        // Top-level master_seed beats the nested field.
        let r = cfg.resolve(&CliOverrides::default()).unwrap();
        assert_eq!(r.training.master_seed, 22);
        assert_eq!(r.training.batch_train, 64);
        // The CLI seed beats both; --rounds clips the schedule.
        let cli = CliOverrides { seed: Some(33), rounds: Some(200), ..Default::default() };
        let r = cfg.resolve(&cli).unwrap();
        assert_eq!(r.training.master_seed, 33);
        assert_eq!(r.training.n_stages, 200);
        assert_eq!(r.training.lr_schedule, vec![stage(1, 200, 1e-2)]);
    }

    #[test]
    fn adam_coefficients_configurable_from_file() {
        let r = resolve_str(
            r#"{"preset": "crra_table2",
                "training": {"adam_beta1": 0.85, "adam_beta2": 0.99, "adam_eps": 0.1}}"#,
        )
        .unwrap();
        assert_eq!(r.training.adam_beta1, 0.85);
        assert_eq!(r.training.adam_beta2, 0.99);
        assert_eq!(r.training.adam_eps, 0.1);
        // Defaults when absent: the conventional coefficients.
        let d = resolve_str(r#"{"preset": "crra_table2"}"#).unwrap();
        assert_eq!(
            (d.training.adam_beta1, d.training.adam_beta2, d.training.adam_eps),
            (0.9, 0.999, 1e-8)
        );
        // Out-of-range values are rejected at validation.
        let bad = resolve_str(
            r#"{"preset": "crra_table2", "training": {"adam_beta1": 1.0}}"#,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn round_clamping_clips_and_extends() {
        let base = vec![stage(1, 500, 1e-2), stage(501, 1000, 1e-3), stage(1001, 1500, 1e-4)];
        assert_eq!(clamp_schedule(&base, 200), vec![stage(1, 200, 1e-2)]);
        assert_eq!(
            clamp_schedule(&base, 501),
            vec![stage(1, 500, 1e-2), stage(501, 501, 1e-3)]
        );
        assert_eq!(clamp_schedule(&base, 1500), base);
        assert_eq!(
            clamp_schedule(&base, 2000),
            vec![stage(1, 500, 1e-2), stage(501, 1000, 1e-3), stage(1001, 2000, 1e-4)]
        );
        assert!(clamp_schedule(&base, 0).is_empty());
        // n_stages override without an explicit schedule clamps too.
        let r = resolve_str(r#"{"preset": "cara_table1", "training": {"n_stages": 600}}"#).unwrap();
        assert_eq!(r.training.lr_schedule, vec![stage(1, 500, 1e-2), stage(501, 600, 1e-3)]);
        // ... but an explicit schedule must match n_stages exactly.
        assert!(resolve_str(
            r#"{"preset": "cara_table1", "training": {"n_stages": 600,
                "lr_schedule": [{"first_round": 1, "last_round": 500, "lr": 0.01}]}}"#
        )
        .is_err());
    }

    #[test]
    fn grid_overrides_resolve_and_reject_inconsistency() {
        // Halving dt doubles both counts (warm-up window stays τ = 1).
        let r = resolve_str(r#"{"preset": "crra_table2", "grid": {"dt": 0.005}}"#).unwrap();
        assert_eq!((r.grid.n_t, r.grid.n_tau), (200, 200));
        // n_t alone implies dt = T / n_t.
        let r = resolve_str(r#"{"preset": "crra_table2", "grid": {"n_t": 50}}"#).unwrap();
        assert_eq!(r.grid.dt, 0.02);
        assert_eq!(r.grid.n_tau, 50);
        // A shorter warm-up truncation.
        let r = resolve_str(r#"{"preset": "crra_table2", "grid": {"tau": 0.25}}"#).unwrap();
        assert_eq!(r.grid.n_tau, 25);
        // Non-divisible horizon.
        assert!(resolve_str(r#"{"preset": "crra_table2", "grid": {"dt": 0.3}}"#).is_err());
        // Conflicting pair.
        assert!(
            resolve_str(r#"{"preset": "crra_table2", "grid": {"dt": 0.01, "n_t": 50}}"#).is_err()
        );
        // The inter-bank delay is a model parameter: the grid cannot change it.
        assert!(
            resolve_str(r#"{"preset": "interbank_table4", "grid": {"tau": 0.5}}"#).is_err()
        );
        let r = resolve_str(r#"{"preset": "interbank_table4", "grid": {"dt": 0.005}}"#).unwrap();
        assert_eq!((r.grid.n_t, r.grid.n_tau), (200, 50));
    }

    #[test]
    fn player_subsets_validate() {
        let r = resolve_str(r#"{"preset": "crra_table2", "players_to_plot": [2, 10]}"#).unwrap();
        assert_eq!(r.players_to_plot, vec![2, 10]);
        for bad in ["[0]", "[11]", "[2, 2]", "[]"] {
            assert!(
                resolve_str(&format!(
                    "{{\"preset\": \"crra_table2\", \"players_to_plot\": {bad}}}"
                ))
                .is_err(),
                "subset {bad} must be rejected"
            );
        }
    }

    #[test]
    fn eval_only_requires_a_checkpoint() {
        assert!(resolve_str(r#"{"preset": "crra_table2", "mode": "eval-only"}"#).is_err());
        let r = resolve_str(
            r#"{"preset": "crra_table2", "mode": "eval-only", "checkpoint": "ckpt.bin"}"#,
        )
        .unwrap();
        assert_eq!(r.mode, Mode::EvalOnly);
        assert_eq!(r.checkpoint.as_deref(), Some(Path::new("ckpt.bin")));
    }

    #[test]
    fn resolution_is_idempotent_through_the_resolved_json() {
        let cli = CliOverrides {
            seed: Some(99),
            rounds: Some(40),
            out_dir: Some(PathBuf::from("runs/custom")),
            mode: Some(Mode::Train),
        };
        let first = ExperimentConfig::from_json(
            r#"{"preset": "interbank_table4",
                "training": {"batch_train": 128, "grad_clip": 5.0},
                "pde": {"n_t": 400}}"#,
        )
        .unwrap()
        .resolve(&cli)
        .unwrap();
        let json = first.to_json();
        // The resolved file is a valid input and resolves to itself with no
        // further overrides (that is what a bitwise re-run uses).
        let second =
            ExperimentConfig::from_json(&json).unwrap().resolve(&CliOverrides::default()).unwrap();
        assert_eq!(json, second.to_json());
        assert_eq!(second.training.master_seed, 99);
        assert_eq!(second.training.n_stages, 40);
        assert_eq!(second.pde, PdeOptions { n_t: 400, n_s: 50 });
    }

    #[test]
    fn inline_games_resolve_with_derived_grids() {
        let r = resolve_str(
            r#"{"game": {"kind": "inter_bank", "params": {
                 "n_players": 2, "t_final": 0.5, "sigma": 0.1, "q": 1.0,
                 "eps_run": 2.0, "c_term": 0.25, "tau": 0.1,
                 "xi": [1.0, 1.1]}},
                "grid": {"dt": 0.025}}"#,
        )
        .unwrap();
        assert_eq!((r.grid.n_t, r.grid.n_tau), (20, 4));
        assert_eq!(r.out_dir, PathBuf::from("runs/inter_bank"));
        // Default dt 0.01 also divides tau = 0.1 and T = 0.5 exactly.
        let r = resolve_str(
            r#"{"game": {"kind": "inter_bank", "params": {
                 "n_players": 2, "t_final": 0.5, "sigma": 0.1, "q": 1.0,
                 "eps_run": 2.0, "c_term": 0.25, "tau": 0.1,
                 "xi": [1.0, 1.1]}}}"#,
        )
        .unwrap();
        assert_eq!((r.grid.n_t, r.grid.n_tau), (50, 10));
    }
}

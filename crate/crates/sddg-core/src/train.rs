//! Deep fictitious play: the staged training loop that drives every player's
//! LSTM policy toward the game's Nash equilibrium.
//!
//! One *round* sweeps the players in their fixed order 1…N. For each player
//! the engine rolls out a fresh Brownian batch under **all** current
//! policies on the gradient tape, the sweeping player's empirical cost is
//! the training loss, and a single Adam step updates that player's
//! parameters only. The update is visible to the next player within the
//! same round (strictly sequential sweep — permuting the order changes the
//! result, and a regression test pins it).
//!
//! Evaluation runs on a dedicated random-number stream (common random
//! numbers across evaluations) so that switching evaluation on or off never
//! perturbs the training trajectory.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::ArrayFile;
use crate::engine::{fmt_g17, simulate_core, BrownianBatch, ControlSource, Dynamics, TimeGrid};
use crate::error::SddgError;
use crate::games::{eval_costs, eval_nash_costs, Direction, GameSpec, EVAL_CHUNK};
use crate::linalg::{all_finite, Mat};
use crate::lstm::{LstmParams, LstmPolicy};
use crate::math::{Math, TapeMath};
use crate::metrics::rel_2norm_error;
use crate::optim::{clip_global_norm, AdamState};
use crate::pde::ESolution;
use crate::rng::{derive_seed, derive_seed_tagged};
use crate::tape::Tape;

// ─────────────────────────────────────────────────────────────────────────
// Configuration
// ─────────────────────────────────────────────────────────────────────────

/// One stage of the learning-rate schedule: rounds
/// `first_round..=last_round` (1-based, inclusive) train at rate `lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrStage {
    pub first_round: usize,
    pub last_round: usize,
    pub lr: f64,
}

/// Stage constructor shorthand.
pub fn stage(first_round: usize, last_round: usize, lr: f64) -> LrStage {
    LrStage { first_round, last_round, lr }
}

/// Fully resolved training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Total number of fictitious-play rounds.
    pub n_stages: usize,
    /// Learning-rate stages; must partition `[1, n_stages]` exactly.
    pub lr_schedule: Vec<LrStage>,
    /// Simulated paths per gradient step.
    pub batch_train: usize,
    /// Simulated paths per evaluation.
    pub batch_eval: usize,
    /// Rounds between evaluations.
    pub eval_every: usize,
    /// Master seed; all training, evaluation, and initialization streams
    /// are derived from it.
    pub master_seed: u64,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
    /// Gradient steps per player per round.
    pub steps_per_player: usize,
    /// Extra checkpoint cadence (rounds); the final parameters are always
    /// checkpointed when a directory is supplied.
    pub checkpoint_every: Option<usize>,
    /// Feed the auxiliary channel (trailing-average wealth) to the policies
    /// in addition to `(t, X)`. Off by default.
    pub include_aux_input: bool,
    /// LSTM hidden width.
    pub n_hidden: usize,
    /// Adam first-moment decay β₁.
    #[serde(default = "default_adam_beta1")]
    pub adam_beta1: f64,
    /// Adam second-moment decay β₂.
    #[serde(default = "default_adam_beta2")]
    pub adam_beta2: f64,
    /// Adam denominator offset ε. Raising it caps early steps at
    /// lr·|g|/(|g| + ε) instead of ±lr, which tames aggressive rates.
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

fn default_adam_beta1() -> f64 {
    0.9
}
fn default_adam_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl TrainingConfig {
    /// Built-in schedule, batch, and cadence defaults for each benchmark
    /// game (the staged learning rates used for the reference results).
    pub fn default_for(game: &GameSpec) -> TrainingConfig {
        let (n_stages, lr_schedule) = match game {
            GameSpec::PortfolioCara(_) => (
                1700,
                vec![stage(1, 500, 1e-2), stage(501, 1000, 1e-3), stage(1001, 1700, 1e-4)],
            ),
            GameSpec::PortfolioCrra(_) => (
                1500,
                vec![stage(1, 500, 1e-2), stage(501, 1000, 1e-3), stage(1001, 1500, 1e-4)],
            ),
            GameSpec::Consumption(_) => (
                2000,
                vec![stage(1, 500, 1e-2), stage(501, 1000, 1e-3), stage(1001, 2000, 1e-4)],
            ),
            GameSpec::InterBank(_) => (
                4000,
                vec![
                    stage(1, 500, 1e-2),
                    stage(501, 1000, 1e-3),
                    stage(1001, 1500, 1e-4),
                    stage(1501, 4000, 1e-5),
                ],
            ),
        };
        TrainingConfig {
            n_stages,
            lr_schedule,
            batch_train: 512,
            batch_eval: game.default_eval_batch(),
            eval_every: 20,
            master_seed: 1,
            grad_clip: None,
            steps_per_player: 1,
            checkpoint_every: None,
            include_aux_input: false,
            n_hidden: 64,
            adam_beta1: default_adam_beta1(),
            adam_beta2: default_adam_beta2(),
            adam_eps: default_adam_eps(),
        }
    }

    /// Validate internal consistency (schedule partition, positive sizes).
    pub fn validate(&self) -> Result<(), SddgError> {
        let err = |msg: String| Err(SddgError::InvalidConfig(msg));
        if self.n_stages == 0 {
            if !self.lr_schedule.is_empty() {
                return err("lr_schedule must be empty when n_stages = 0".into());
            }
        } else {
            if self.lr_schedule.is_empty() {
                return err("lr_schedule must not be empty when n_stages > 0".into());
            }
            let mut expect_first = 1usize;
            for (s, st) in self.lr_schedule.iter().enumerate() {
                if st.first_round != expect_first {
                    return err(format!(
                        "lr_schedule stage {s} starts at round {} but round {} is the next \
                         uncovered round (stages must partition 1..=n_stages)",
                        st.first_round, expect_first
                    ));
                }
                if st.last_round < st.first_round {
                    return err(format!(
                        "lr_schedule stage {s} is empty ({}..={})",
                        st.first_round, st.last_round
                    ));
                }
                if !(st.lr.is_finite() && st.lr > 0.0) {
                    return err(format!("lr_schedule stage {s} has non-positive lr {}", st.lr));
                }
                expect_first = st.last_round + 1;
            }
            if expect_first != self.n_stages + 1 {
                return err(format!(
                    "lr_schedule covers rounds 1..={} but n_stages = {}",
                    expect_first - 1,
                    self.n_stages
                ));
            }
        }
        for (what, v) in [
            ("batch_train", self.batch_train),
            ("batch_eval", self.batch_eval),
            ("eval_every", self.eval_every),
            ("steps_per_player", self.steps_per_player),
            ("n_hidden", self.n_hidden),
        ] {
            if v == 0 {
                return err(format!("{what} must be positive"));
            }
        }
        if self.checkpoint_every == Some(0) {
            return err("checkpoint_every must be positive when set".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return err(format!("grad_clip must be positive and finite, got {c}"));
            }
        }
        for (what, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(format!("{what} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return err(format!("adam_eps must be positive and finite, got {}", self.adam_eps));
        }
        Ok(())
    }

    /// Learning rate for a 1-based round index — a pure function of the
    /// round with stage boundaries honored exactly.
    pub fn lr_for(&self, round: usize) -> Result<f64, SddgError> {
        self.lr_schedule
            .iter()
            .find(|s| s.first_round <= round && round <= s.last_round)
            .map(|s| s.lr)
            .ok_or_else(|| {
                SddgError::InvalidConfig(format!("round {round} not covered by lr_schedule"))
            })
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Training record
// ─────────────────────────────────────────────────────────────────────────

/// One evaluation row. `j_*` hold each player's empirical objective in its
/// natural direction (expected utility for the portfolio games, expected
/// cost for the inter-bank game) so the CSV matches what the curves plot.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub round: usize,
    pub rel_error: f64,
    pub j_lstm: Vec<f64>,
    pub j_oracle: Vec<f64>,
    /// Positivity-floor hits during the LSTM evaluation (0 for games
    /// without a positivity constraint).
    pub violations: u64,
}

/// Evaluation history of one training run plus checkpoint references.
#[derive(Clone, Debug, Default)]
pub struct TrainingRecord {
    pub n_players: usize,
    /// Rows in strictly increasing round order.
    pub rows: Vec<EvalRow>,
    /// Final checkpoint file, when a checkpoint directory was supplied.
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainingRecord {
    pub fn csv_header(n_players: usize) -> String {
        let mut s = String::from("round,rel_error");
        for i in 1..=n_players {
            s.push_str(&format!(",J_lstm_{i}"));
        }
        for i in 1..=n_players {
            s.push_str(&format!(",J_oracle_{i}"));
        }
        s.push_str(",violations");
        s
    }

    pub fn csv_row(row: &EvalRow) -> String {
        let mut s = format!("{},{}", row.round, fmt_g17(row.rel_error));
        for v in row.j_lstm.iter().chain(row.j_oracle.iter()) {
            s.push(',');
            s.push_str(&fmt_g17(*v));
        }
        s.push(',');
        s.push_str(&row.violations.to_string());
        s
    }

    /// Render the full record as CSV (LF line endings, 17-significant-digit
    /// floats — identical to what streaming writes).
    pub fn to_csv(&self) -> String {
        let mut s = Self::csv_header(self.n_players);
        s.push('\n');
        for row in &self.rows {
            s.push_str(&Self::csv_row(row));
            s.push('\n');
        }
        s
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Policy initialization and checkpointing
// ─────────────────────────────────────────────────────────────────────────

/// LSTM input width for a game under the given aux-input setting.
pub fn policy_input_dim(game: &GameSpec, include_aux_input: bool) -> usize {
    1 + game.state_dim() + if include_aux_input { game.aux_dim() } else { 0 }
}

/// Fresh per-player policies. Player `j`'s parameters are drawn from the
/// stream `derive_seed_tagged(master_seed, "policy", [j])`, so initial
/// policies never collide with training or evaluation draws.
pub fn init_policies(
    game: &GameSpec,
    master_seed: u64,
    n_hidden: usize,
    include_aux_input: bool,
) -> Vec<LstmPolicy> {
    let n_input = policy_input_dim(game, include_aux_input);
    let dims = game.control_dims();
    (0..game.n_players())
        .map(|j| {
            let seed = derive_seed_tagged(master_seed, "policy", &[j as u64]);
            let params = LstmParams::init(seed, n_input, n_hidden, dims[j]);
            LstmPolicy::new(params, game.output_map())
        })
        .collect()
}

/// Write all players' parameters to one named-array container
/// (`player{j}/W_f`, …). Round-trips bitwise.
pub fn save_policies(path: &Path, policies: &[LstmPolicy]) -> Result<(), SddgError> {
    let mut f = ArrayFile::new();
    f.push_scalar("n_players", policies.len() as f64);
    for (j, pol) in policies.iter().enumerate() {
        f.push_scalar(format!("player{j}/n_input"), pol.params.n_input() as f64);
        f.push_scalar(format!("player{j}/n_hidden"), pol.params.n_hidden() as f64);
        f.push_scalar(format!("player{j}/n_output"), pol.params.n_output() as f64);
        for (name, m) in pol.params.named_arrays() {
            f.push(format!("player{j}/{name}"), m);
        }
    }
    f.save(path)
}

/// Load policies saved by [`save_policies`]; the game supplies the output
/// transform and the expected player count.
pub fn load_policies(path: &Path, game: &GameSpec) -> Result<Vec<LstmPolicy>, SddgError> {
    let f = ArrayFile::load(path)?;
    let n_players = f.get_scalar("n_players")? as usize;
    if n_players != game.n_players() {
        return Err(SddgError::InvalidContainer(format!(
            "checkpoint holds {n_players} players but the game has {}",
            game.n_players()
        )));
    }
    let mut out = Vec::with_capacity(n_players);
    for j in 0..n_players {
        let prefix = format!("player{j}/");
        let arrays = f.with_prefix(&prefix);
        let dim = |name: &str| -> Result<usize, SddgError> {
            Ok(f.get_scalar(&format!("{prefix}{name}"))? as usize)
        };
        let params = LstmParams::from_named_arrays(
            &arrays,
            dim("n_input")?,
            dim("n_hidden")?,
            dim("n_output")?,
        )?;
        out.push(LstmPolicy::new(params, game.output_map()));
    }
    Ok(out)
}

// ─────────────────────────────────────────────────────────────────────────
// Trainer
// ─────────────────────────────────────────────────────────────────────────

/// Mean of each cost row, sign-flipped to the game's natural objective
/// direction (utilities are reported as utilities, costs as costs).
pub fn objective_means(game: &GameSpec, costs: &Mat) -> Vec<f64> {
    let sign = match game.direction() {
        Direction::Maximize => -1.0,
        Direction::Minimize => 1.0,
    };
    let total = costs.cols();
    (0..costs.rows())
        .map(|i| {
            let mut s = 0.0;
            for b in 0..total {
                s += costs.get(i, b);
            }
            sign * s / total as f64
        })
        .collect()
}

/// Deep-fictitious-play state: current policies, one Adam state per player,
/// and a reusable gradient tape.
pub struct Trainer<'g> {
    game: &'g GameSpec,
    grid: TimeGrid,
    cfg: TrainingConfig,
    policies: Vec<LstmPolicy>,
    adam: Vec<AdamState>,
    eval_seed: u64,
    tape: Tape,
}

impl<'g> Trainer<'g> {
    pub fn new(game: &'g GameSpec, grid: &TimeGrid, cfg: TrainingConfig) -> Result<Self, SddgError> {
        game.validate()?;
        cfg.validate()?;
        let t = game.t_final();
        if (grid.t_final() - t).abs() > 1e-9 * t.abs().max(1.0) {
            return Err(SddgError::InvalidConfig(format!(
                "grid horizon {} does not match the game horizon {t}",
                grid.t_final()
            )));
        }
        if let GameSpec::InterBank(p) = game {
            if (grid.tau() - p.tau).abs() > 1e-9 * p.tau.abs().max(1.0) {
                return Err(SddgError::InvalidConfig(format!(
                    "grid delay {} does not match the game delay {}",
                    grid.tau(),
                    p.tau
                )));
            }
        }
        let policies = init_policies(game, cfg.master_seed, cfg.n_hidden, cfg.include_aux_input);
        let adam = policies
            .iter()
            .map(|p| {
                AdamState::with_hyperparams(
                    p.params.dim(),
                    cfg.adam_beta1,
                    cfg.adam_beta2,
                    cfg.adam_eps,
                )
            })
            .collect();
        let eval_seed = derive_seed_tagged(cfg.master_seed, "eval", &[]);
        Ok(Trainer {
            game,
            grid: grid.clone(),
            cfg,
            policies,
            adam,
            eval_seed,
            tape: Tape::new(),
        })
    }

    pub fn policies(&self) -> &[LstmPolicy] {
        &self.policies
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    /// Consume the trainer, releasing the trained policies.
    pub fn into_policies(self) -> Vec<LstmPolicy> {
        self.policies
    }

    /// One gradient step for one player: fresh Brownian batch from the
    /// stream `derive_seed(master, [round, player, step])`, rollout under
    /// all current policies, backward pass w.r.t. this player's parameters
    /// only, one Adam update. Returns the training loss (the player's mean
    /// empirical cost). Every other player's parameters are untouched.
    pub fn player_step(
        &mut self,
        round: usize,
        player: usize,
        step: usize,
    ) -> Result<f64, SddgError> {
        assert!(player < self.policies.len(), "player index out of range");
        let lr = self.cfg.lr_for(round)?;
        let seed =
            derive_seed(self.cfg.master_seed, &[round as u64, player as u64, step as u64]);
        let noise = BrownianBatch::sample(
            &self.grid,
            self.game.brownian_dims(),
            self.cfg.batch_train,
            seed,
        );

        self.tape.reset();
        let mut m = TapeMath::new(&mut self.tape);
        let source = ControlSource::Policies {
            policies: &self.policies,
            include_aux_input: self.cfg.include_aux_input,
        };
        let in_round = |e: SddgError| match e {
            SddgError::NonFinite { step, context } => SddgError::NonFinite {
                step,
                context: format!("round {round}, player {}: {context}", player + 1),
            },
            other => other,
        };
        let sim = simulate_core(&mut m, self.game, &self.grid, &noise, &source, Some(player))
            .map_err(in_round)?;
        let (costs, _train_violations) =
            self.game.path_costs(&mut m, &sim, &self.grid).map_err(in_round)?;
        let own_row = m.row(&costs, player);
        let loss = m.mean_all(&own_row);
        let loss_val = m.to_mat(&loss).get(0, 0);
        if !loss_val.is_finite() {
            return Err(SddgError::NonFinite {
                step: self.grid.n_t() as i64,
                context: format!(
                    "round {round}, player {}: training loss = {loss_val} \
                     (seed {seed}, {} clamped exponentials)",
                    player + 1,
                    m.exp_clamp_count()
                ),
            });
        }

        m.tape.backward(loss);
        let leaves = m.tape.grad_leaves();
        debug_assert_eq!(leaves.len(), 5, "exactly the trained player's parameters are leaves");
        let mut grad = Vec::with_capacity(self.policies[player].params.dim());
        for leaf in leaves {
            grad.extend_from_slice(m.tape.grad(leaf));
        }
        if !all_finite(&grad) {
            return Err(SddgError::NonFiniteGradient(format!(
                "round {round}, player {} (loss {loss_val}, seed {seed})",
                player + 1
            )));
        }
        if let Some(max_norm) = self.cfg.grad_clip {
            clip_global_norm(&mut grad, max_norm);
        }
        let mut flat = self.policies[player].params.flatten();
        assert_eq!(flat.len(), grad.len(), "gradient/parameter layout mismatch");
        self.adam[player].step(&mut flat, &grad, lr)?;
        self.policies[player].params.unflatten(&flat);
        Ok(loss_val)
    }

    /// One fictitious-play round: players update strictly in order 1…N,
    /// each seeing all earlier updates of the same round. Returns each
    /// player's last training loss.
    pub fn round(&mut self, round: usize) -> Result<Vec<f64>, SddgError> {
        let n = self.policies.len();
        let mut losses = Vec::with_capacity(n);
        for player in 0..n {
            let mut last = f64::NAN;
            for step in 0..self.cfg.steps_per_player {
                last = self.player_step(round, player, step)?;
            }
            losses.push(last);
        }
        Ok(losses)
    }

    /// Empirical per-player objectives of the current policies on the fixed
    /// evaluation stream, plus the positivity-violation count.
    pub fn evaluate_policies(&self) -> Result<(Vec<f64>, u64), SddgError> {
        let source = ControlSource::Policies {
            policies: &self.policies,
            include_aux_input: self.cfg.include_aux_input,
        };
        let out = eval_costs(
            self.game,
            &self.grid,
            &source,
            self.eval_seed,
            self.cfg.batch_eval,
            EVAL_CHUNK,
        )?;
        Ok((objective_means(self.game, &out.costs), out.violations))
    }

    /// Empirical per-player objectives of the analytic Nash oracle on the
    /// same evaluation stream. Constant across a run (common random
    /// numbers), so it is computed once.
    pub fn evaluate_oracle(&self, e: Option<&ESolution>) -> Result<Vec<f64>, SddgError> {
        let out =
            eval_nash_costs(self.game, &self.grid, e, None, self.eval_seed, self.cfg.batch_eval)?;
        Ok(objective_means(self.game, &out.costs))
    }
}

// ─────────────────────────────────────────────────────────────────────────
// Full training runs
// ─────────────────────────────────────────────────────────────────────────

/// Result of [`train`]: the final policies and the evaluation record.
pub struct TrainOutput {
    pub policies: Vec<LstmPolicy>,
    pub record: TrainingRecord,
}

/// Run the full deep-fictitious-play schedule.
///
/// Evaluates before the first round, every `eval_every` rounds, and after
/// the final round; rows stream to `csv_sink` as they are produced (header
/// first). When `checkpoint_dir` is given the final parameters are always
/// saved there, plus every `checkpoint_every` rounds when configured.
/// `e` supplies the PDE solution backing the inter-bank oracle.
pub fn train(
    game: &GameSpec,
    grid: &TimeGrid,
    cfg: &TrainingConfig,
    e: Option<&ESolution>,
    mut csv_sink: Option<&mut dyn Write>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutput, SddgError> {
    let mut trainer = Trainer::new(game, grid, cfg.clone())?;
    let n_players = game.n_players();
    let mut record = TrainingRecord {
        n_players,
        rows: Vec::new(),
        final_checkpoint: None,
    };

    let sink_err = |e: std::io::Error| SddgError::io("training-record sink", e);
    if let Some(w) = csv_sink.as_deref_mut() {
        writeln!(w, "{}", TrainingRecord::csv_header(n_players)).map_err(sink_err)?;
        w.flush().map_err(sink_err)?;
    }

    let save_round_checkpoint = |policies: &[LstmPolicy],
                                 round: usize|
     -> Result<(), SddgError> {
        if let Some(dir) = checkpoint_dir {
            save_policies(&dir.join(format!("checkpoint_round_{round:05}.bin")), policies)?;
        }
        Ok(())
    };

    if cfg.n_stages > 0 {
        let j_oracle = trainer.evaluate_oracle(e)?;
        let eval_and_record = |trainer: &Trainer<'_>,
                                   round: usize,
                                   record: &mut TrainingRecord,
                                   csv_sink: &mut Option<&mut dyn Write>|
         -> Result<(), SddgError> {
            let (j_lstm, violations) = trainer.evaluate_policies()?;
            let rel_error = rel_2norm_error(&j_lstm, &j_oracle)?;
            let row = EvalRow {
                round,
                rel_error,
                j_lstm,
                j_oracle: j_oracle.clone(),
                violations,
            };
            if let Some(w) = csv_sink.as_deref_mut() {
                writeln!(w, "{}", TrainingRecord::csv_row(&row)).map_err(sink_err)?;
                w.flush().map_err(sink_err)?;
            }
            record.rows.push(row);
            Ok(())
        };

        eval_and_record(&trainer, 0, &mut record, &mut csv_sink)?;
        for round in 1..=cfg.n_stages {
            trainer.round(round)?;
            if round % cfg.eval_every == 0 || round == cfg.n_stages {
                eval_and_record(&trainer, round, &mut record, &mut csv_sink)?;
            }
            if let Some(k) = cfg.checkpoint_every {
                if round % k == 0 && round != cfg.n_stages {
                    save_round_checkpoint(trainer.policies(), round)?;
                }
            }
        }
    }

    if let Some(dir) = checkpoint_dir {
        let path = dir.join("checkpoint_final.bin");
        save_policies(&path, trainer.policies())?;
        record.final_checkpoint = Some(path);
    }
    Ok(TrainOutput { policies: trainer.into_policies(), record })
}

// ─────────────────────────────────────────────────────────────────────────
// Tests
// ─────────────────────────────────────────────────────────────────────────

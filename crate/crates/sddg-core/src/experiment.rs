//! Experiment orchestration: one entry point that takes a resolved
//! configuration and produces every artifact of a run.
//!
//! Artifacts (all under the output directory):
//! - `config_resolved.json` — written first, before any computation, so
//!   even a failed run can be reproduced from it bit for bit;
//! - `training_curve.csv` / `training_curve.svg` — the evaluation record
//!   and its log-scale chart (mode `train`);
//! - `evaluation.csv` — single-row record (mode `eval-only`);
//! - `trajectories.csv` — paired oracle/policy paths on one realization;
//! - `checkpoints/checkpoint_final.bin` (+ periodic checkpoints);
//! - `pde_cache/…` and `pde_report.txt` — inter-bank E-system artifacts;
//! - `MANIFEST.txt` — always written last: status, artifact list, warnings,
//!   and summary statistics. A failing run keeps its partial artifacts and
//!   the manifest records the error.
//!
//! Nothing in the manifest or the artifacts depends on wall-clock time, so
//! re-running from `config_resolved.json` reproduces the directory exactly.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use crate::config::{Mode, ResolvedConfig};
use crate::diag;
use crate::engine::{fmt_g17, ControlSource, Dynamics, TimeGrid};
use crate::error::SddgError;
use crate::games::{eval_costs, eval_nash_costs, GameSpec, EVAL_CHUNK};
use crate::lstm::LstmPolicy;
use crate::metrics::{compare_trajectories, rel_2norm_error};
use crate::pde::{EPdeParams, ESolution};
use crate::rng::derive_seed_tagged;
use crate::svg::training_curve_svg;
use crate::train::{self, objective_means, TrainingRecord};

/// Completion status recorded in the manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentStatus {
    Complete,
    Incomplete,
}

/// What a run produced. `error` carries the failure message when the run is
/// incomplete; the partial artifacts stay on disk either way.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub status: ExperimentStatus,
    pub out_dir: PathBuf,
    pub artifacts: Vec<String>,
    pub error: Option<String>,
    /// `(key, value)` summary statistics echoed in the manifest.
    pub stats: Vec<(String, String)>,
}

impl ExperimentOutcome {
    pub fn is_complete(&self) -> bool {
        self.status == ExperimentStatus::Complete
    }
}

/// Mutable bookkeeping shared by the mode handlers.
struct RunState<'c> {
    cfg: &'c ResolvedConfig,
    artifacts: Vec<String>,
    stats: Vec<(String, String)>,
}

impl<'c> RunState<'c> {
    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn record(&mut self, name: &str) {
        self.artifacts.push(name.to_string());
    }

    fn stat(&mut self, key: &str, value: impl Into<String>) {
        self.stats.push((key.to_string(), value.into()));
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<(), SddgError> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| SddgError::io(p.display().to_string(), e))?;
        self.record(name);
        Ok(())
    }

    /// Solve (or load from the run-local cache) the inter-bank E-system at
    /// the configured resolution and report its quality statistics.
    fn e_solution(&mut self) -> Result<ESolution, SddgError> {
        let GameSpec::InterBank(p) = &self.cfg.game else {
            unreachable!("E-system requested for a game without one")
        };
        let cache = self.path("pde_cache");
        fs::create_dir_all(&cache).map_err(|e| SddgError::io(cache.display().to_string(), e))?;
        let params: EPdeParams = p.pde_params();
        let sol = ESolution::load_or_solve(Some(&cache), &params, self.cfg.pde.n_t, self.cfg.pde.n_s)?;
        self.record("pde_cache/");
        self.stat("pde_grid", format!("{}x{}", self.cfg.pde.n_t, self.cfg.pde.n_s));
        self.stat("pde_residual_mean", fmt_g17(sol.discrete_residual_mean()));
        self.stat("pde_invariant_max", fmt_g17(sol.max_invariant_violation()));
        self.stat("pde_e0_at_0", fmt_g17(sol.e0_at(0.0)?));
        Ok(sol)
    }

    /// Paired oracle/policy trajectory table on a single realization.
    fn write_trajectories(
        &mut self,
        grid: &TimeGrid,
        policies: Option<&[LstmPolicy]>,
        e: Option<&ESolution>,
    ) -> Result<(), SddgError> {
        let seed = derive_seed_tagged(self.cfg.training.master_seed, "trajectory", &[]);
        let table = compare_trajectories(
            &self.cfg.game,
            policies,
            self.cfg.training.include_aux_input,
            grid,
            e,
            seed,
            &self.cfg.players_to_plot,
        )?;
        let p = self.path("trajectories.csv");
        let mut f = fs::File::create(&p).map_err(|e| SddgError::io(p.display().to_string(), e))?;
        table.to_csv(&mut f).map_err(|e| SddgError::io(p.display().to_string(), e))?;
        self.record("trajectories.csv");
        Ok(())
    }
}

/// Run one experiment end to end. Module failures are caught: the partial
/// artifacts stay on disk, the manifest names the error, and the outcome is
/// returned as `Incomplete`. Only failures to create the output directory
/// or to write the manifest itself surface as `Err`.
pub fn run_experiment(cfg: &ResolvedConfig) -> Result<ExperimentOutcome, SddgError> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| SddgError::io(cfg.out_dir.display().to_string(), e))?;
    let mut state = RunState { cfg, artifacts: Vec::new(), stats: Vec::new() };

    // Reproducibility first: the resolved config is on disk before any
    // numerical work starts.
    let resolved_path = state.path("config_resolved.json");
    cfg.save(&resolved_path)?;
    state.record("config_resolved.json");

    let result = dispatch(&mut state);
    let error = result.err().map(|e| e.to_string());
    let status =
        if error.is_none() { ExperimentStatus::Complete } else { ExperimentStatus::Incomplete };

    let manifest = render_manifest(&state, status, error.as_deref());
    let manifest_path = state.path("MANIFEST.txt");
    fs::write(&manifest_path, manifest)
        .map_err(|e| SddgError::io(manifest_path.display().to_string(), e))?;
    state.record("MANIFEST.txt");

    Ok(ExperimentOutcome {
        status,
        out_dir: cfg.out_dir.clone(),
        artifacts: state.artifacts,
        error,
        stats: state.stats,
    })
}

fn dispatch(state: &mut RunState<'_>) -> Result<(), SddgError> {
    let cfg = state.cfg;
    match cfg.mode {
        Mode::PdeOnly => {
            if !matches!(cfg.game, GameSpec::InterBank(_)) {
                return Err(SddgError::InvalidConfig(
                    "mode \"pde-only\" applies to the inter-bank game only".into(),
                ));
            }
            let sol = state.e_solution()?;
            let report = format!(
                "E-system solve report\n\
                 grid: {} time slices x {} lag nodes\n\
                 mean discrete residual: {}\n\
                 max boundary/edge/symmetry violation: {}\n\
                 E0(0): {}\n",
                state.cfg.pde.n_t,
                state.cfg.pde.n_s,
                fmt_g17(sol.discrete_residual_mean()),
                fmt_g17(sol.max_invariant_violation()),
                fmt_g17(sol.e0_at(0.0)?),
            );
            state.write_text("pde_report.txt", &report)
        }
        Mode::OracleOnly => {
            let grid = cfg.time_grid()?;
            let e = match &cfg.game {
                GameSpec::InterBank(_) => Some(state.e_solution()?),
                _ => None,
            };
            state.write_trajectories(&grid, None, e.as_ref())?;
            let oracle = eval_nash_costs(
                &cfg.game,
                &grid,
                e.as_ref(),
                None,
                derive_seed_tagged(cfg.training.master_seed, "eval", &[]),
                cfg.training.batch_eval,
            )?;
            let n = cfg.game.n_players();
            let mut csv = String::from("player,J_oracle\n");
            let j = objective_means(&cfg.game, &oracle.costs);
            for (i, v) in j.iter().enumerate() {
                csv.push_str(&format!("{},{}\n", i + 1, fmt_g17(*v)));
            }
            state.write_text("oracle_objectives.csv", &csv)?;
            state.stat("players", n.to_string());
            Ok(())
        }
        Mode::EvalOnly => {
            let grid = cfg.time_grid()?;
            let ckpt = cfg.checkpoint.as_ref().expect("resolution enforces a checkpoint");
            let policies = train::load_policies(ckpt, &cfg.game)?;
            let e = match &cfg.game {
                GameSpec::InterBank(_) => Some(state.e_solution()?),
                _ => None,
            };
            let seed = derive_seed_tagged(cfg.training.master_seed, "eval", &[]);
            let source = ControlSource::Policies {
                policies: &policies,
                include_aux_input: cfg.training.include_aux_input,
            };
            let lstm =
                eval_costs(&cfg.game, &grid, &source, seed, cfg.training.batch_eval, EVAL_CHUNK)?;
            let oracle =
                eval_nash_costs(&cfg.game, &grid, e.as_ref(), None, seed, cfg.training.batch_eval)?;
            let j_lstm = objective_means(&cfg.game, &lstm.costs);
            let j_oracle = objective_means(&cfg.game, &oracle.costs);
            let rel = rel_2norm_error(&j_lstm, &j_oracle)?;
            let row = train::EvalRow {
                round: 0,
                rel_error: rel,
                j_lstm,
                j_oracle,
                violations: lstm.violations,
            };
            let n = cfg.game.n_players();
            let csv = format!(
                "{}\n{}\n",
                TrainingRecord::csv_header(n),
                TrainingRecord::csv_row(&row)
            );
            state.write_text("evaluation.csv", &csv)?;
            state.stat("rel_error", fmt_g17(rel));
            state.stat("violations", row.violations.to_string());
            state.write_trajectories(&grid, Some(&policies), e.as_ref())
        }
        Mode::Train => {
            let grid = cfg.time_grid()?;
            let e = match &cfg.game {
                GameSpec::InterBank(_) => Some(state.e_solution()?),
                _ => None,
            };
            let ckpt_dir = state.path("checkpoints");
            fs::create_dir_all(&ckpt_dir)
                .map_err(|err| SddgError::io(ckpt_dir.display().to_string(), err))?;
            let curve_path = state.path("training_curve.csv");
            let mut curve = fs::File::create(&curve_path)
                .map_err(|err| SddgError::io(curve_path.display().to_string(), err))?;
            // The curve file streams row by row; record it now so an
            // aborted run still lists the partial curve.
            state.record("training_curve.csv");
            state.record("checkpoints/");
            let out = train::train(
                &cfg.game,
                &grid,
                &cfg.training,
                e.as_ref(),
                Some(&mut curve as &mut dyn Write),
                Some(&ckpt_dir),
            )?;
            drop(curve);

            let csv_text = fs::read_to_string(&curve_path)
                .map_err(|err| SddgError::io(curve_path.display().to_string(), err))?;
            let chart = training_curve_svg(&csv_text)?;
            state.write_text("training_curve.svg", &chart)?;
            state.write_trajectories(&grid, Some(&out.policies), e.as_ref())?;

            if let Some(last) = out.record.rows.last() {
                state.stat("rounds", cfg.training.n_stages.to_string());
                state.stat("final_rel_error", fmt_g17(last.rel_error));
                state.stat("final_violations", last.violations.to_string());
                // Post-hoc admissibility: positivity-guard hits during the
                // final evaluation, zero by construction for the softplus
                // consumption head.
                let admissible = if last.violations == 0 { "yes" } else { "no" };
                state.stat("final_eval_admissible", admissible);
            }
            Ok(())
        }
    }
}

fn render_manifest(state: &RunState<'_>, status: ExperimentStatus, error: Option<&str>) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "status: {}\n",
        match status {
            ExperimentStatus::Complete => "complete",
            ExperimentStatus::Incomplete => "incomplete",
        }
    ));
    out.push_str(&format!(
        "mode: {}\n",
        match state.cfg.mode {
            Mode::Train => "train",
            Mode::EvalOnly => "eval-only",
            Mode::OracleOnly => "oracle-only",
            Mode::PdeOnly => "pde-only",
        }
    ));
    out.push_str(&format!("game: {}\n", state.cfg.game.kind_name()));
    out.push_str(&format!("master_seed: {}\n", state.cfg.training.master_seed));
    if let Some(e) = error {
        out.push_str(&format!("error: {e}\n"));
    }
    for (k, v) in &state.stats {
        out.push_str(&format!("{k}: {v}\n"));
    }
    out.push_str("artifacts:\n");
    for a in &state.artifacts {
        out.push_str(&format!("  - {a}\n"));
    }
    let warnings = diag::take_warnings();
    if !warnings.is_empty() {
        out.push_str("warnings:\n");
        for w in &warnings {
            out.push_str(&format!("  - {w}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CliOverrides, ExperimentConfig};
    use std::path::Path;

    fn resolve(json: &str, out: &Path) -> ResolvedConfig {
        let cli = CliOverrides { out_dir: Some(out.to_path_buf()), ..Default::default() };
        ExperimentConfig::from_json(json).unwrap().resolve(&cli).unwrap()
    }

    /// Small two-player game JSON shared by the orchestration tests.
    fn tiny_game_json(mode: &str, extra: &str) -> String {
        format!(
            r#"{{"game": {{"kind": "portfolio_crra", "params": {{
                 "n_players": 2, "t_final": 0.5, "mu1": 0.08, "sigma": 0.2,
                 "r": 0.04, "lambda": 1.0, "mu2": 0.2,
                 "delta": [0.8, 1.5], "theta": [0.3, 0.6],
                 "x0": [1.0, 1.2]}}}},
                "grid": {{"dt": 0.1, "tau": 0.2}},
                "training": {{"n_stages": 3, "batch_train": 16, "batch_eval": 32,
                              "eval_every": 2, "n_hidden": 8, "master_seed": 5}},
                "players_to_plot": [1, 2],
                "mode": "{mode}"{extra}}}"#
        )
    }

    fn tiny_interbank_json(mode: &str) -> String {
        format!(
            r#"{{"game": {{"kind": "inter_bank", "params": {{
                 "n_players": 2, "t_final": 0.5, "sigma": 0.1, "q": 1.0,
                 "eps_run": 2.0, "c_term": 0.25, "tau": 0.1,
                 "xi": [1.0, 1.1]}}}},
                "grid": {{"dt": 0.025}},
                "training": {{"n_stages": 2, "batch_train": 8, "batch_eval": 16,
                              "eval_every": 2, "n_hidden": 4, "master_seed": 5}},
                "players_to_plot": [1, 2],
                "pde": {{"n_t": 120, "n_s": 10}},
                "mode": "{mode}"}}"#
        )
    }

    fn read(dir: &Path, name: &str) -> String {
        fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    #[test]
    fn train_mode_emits_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = resolve(&tiny_game_json("train", ""), dir.path());
        let outcome = run_experiment(&cfg).unwrap();
        assert!(outcome.is_complete(), "error: {:?}", outcome.error);
        for f in [
            "config_resolved.json",
            "training_curve.csv",
            "training_curve.svg",
            "trajectories.csv",
            "MANIFEST.txt",
        ] {
            assert!(dir.path().join(f).exists(), "missing {f}");
        }
        assert!(dir.path().join("checkpoints/checkpoint_final.bin").exists());
        let manifest = read(dir.path(), "MANIFEST.txt");
        assert!(manifest.starts_with("status: complete\n"), "{manifest}");
        assert!(manifest.contains("final_rel_error: "));
        let curve = read(dir.path(), "training_curve.csv");
        assert!(curve.starts_with("round,rel_error,J_lstm_1,J_lstm_2,"));
        assert_eq!(curve.lines().count(), 1 + 3); // rounds 0, 2, 3
        let traj = read(dir.path(), "trajectories.csv");
        assert!(traj.starts_with("source,player,k,t,x,u1\n"));
        assert!(traj.contains("\noracle,") && traj.contains("\nlstm,"));
    }

    #[test]
    fn rerunning_from_the_resolved_config_reproduces_the_curve_bitwise() {
        let dir_a = tempfile::tempdir().unwrap();
        let cfg_a = resolve(&tiny_game_json("train", ""), dir_a.path());
        run_experiment(&cfg_a).unwrap();

        // Re-load the resolved JSON, point it at a fresh directory, re-run.
        let resolved_json = read(dir_a.path(), "config_resolved.json");
        let dir_b = tempfile::tempdir().unwrap();
        let cli = CliOverrides { out_dir: Some(dir_b.path().to_path_buf()), ..Default::default() };
        let cfg_b = ExperimentConfig::from_json(&resolved_json).unwrap().resolve(&cli).unwrap();
        run_experiment(&cfg_b).unwrap();

        assert_eq!(
            read(dir_a.path(), "training_curve.csv"),
            read(dir_b.path(), "training_curve.csv"),
            "training curve must reproduce bitwise from config_resolved.json"
        );
        assert_eq!(
            read(dir_a.path(), "trajectories.csv"),
            read(dir_b.path(), "trajectories.csv")
        );
        assert_eq!(
            fs::read(dir_a.path().join("checkpoints/checkpoint_final.bin")).unwrap(),
            fs::read(dir_b.path().join("checkpoints/checkpoint_final.bin")).unwrap()
        );
    }

    #[test]
    fn eval_only_reuses_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = resolve(&tiny_game_json("train", ""), dir.path());
        let trained = run_experiment(&cfg).unwrap();
        assert!(trained.is_complete());

        let eval_dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("checkpoints/checkpoint_final.bin");
        let extra = format!(", \"checkpoint\": {}", serde_json::to_string(&ckpt).unwrap());
        let cfg = resolve(&tiny_game_json("eval-only", &extra), eval_dir.path());
        let outcome = run_experiment(&cfg).unwrap();
        assert!(outcome.is_complete(), "error: {:?}", outcome.error);
        let eval = read(eval_dir.path(), "evaluation.csv");
        assert_eq!(eval.lines().count(), 2);

        // The single evaluation row equals the final row of the training
        // curve: same policies, same evaluation stream.
        let curve = read(dir.path(), "training_curve.csv");
        let last = curve.lines().last().unwrap();
        let eval_row = eval.lines().nth(1).unwrap();
        let strip_round = |s: &str| s.splitn(2, ',').nth(1).unwrap().to_string();
        assert_eq!(strip_round(last), strip_round(eval_row));
        assert!(!eval_dir.path().join("training_curve.csv").exists());
    }

    #[test]
    fn oracle_only_needs_no_policies() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = resolve(&tiny_game_json("oracle-only", ""), dir.path());
        let outcome = run_experiment(&cfg).unwrap();
        assert!(outcome.is_complete(), "error: {:?}", outcome.error);
        assert!(dir.path().join("trajectories.csv").exists());
        assert!(dir.path().join("oracle_objectives.csv").exists());
        assert!(!dir.path().join("training_curve.csv").exists());
        assert!(!dir.path().join("checkpoints").exists());
        // Oracle-vs-oracle: the two sources tabulate identical paths.
        let traj = read(dir.path(), "trajectories.csv");
        let oracle_rows: Vec<&str> = traj
            .lines()
            .filter_map(|l| l.strip_prefix("oracle,"))
            .collect();
        let lstm_rows: Vec<&str> =
            traj.lines().filter_map(|l| l.strip_prefix("lstm,")).collect();
        assert_eq!(oracle_rows, lstm_rows, "self-comparison must be identical");
    }

    #[test]
    fn interbank_pde_only_writes_cache_and_report_and_train_reuses_it() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = resolve(&tiny_interbank_json("pde-only"), dir.path());
        let outcome = run_experiment(&cfg).unwrap();
        assert!(outcome.is_complete(), "error: {:?}", outcome.error);
        let report = read(dir.path(), "pde_report.txt");
        assert!(report.contains("mean discrete residual"));
        let cache_files: Vec<_> = fs::read_dir(dir.path().join("pde_cache"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        assert_eq!(cache_files.len(), 1);
        assert!(!dir.path().join("training_curve.csv").exists());

        // A subsequent training run in the same directory reuses the cache
        // (same single file afterwards) and completes.
        let cfg = resolve(&tiny_interbank_json("train"), dir.path());
        let outcome = run_experiment(&cfg).unwrap();
        assert!(outcome.is_complete(), "error: {:?}", outcome.error);
        let cache_after: Vec<_> = fs::read_dir(dir.path().join("pde_cache"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        assert_eq!(cache_after, cache_files);
        assert!(dir.path().join("training_curve.csv").exists());
    }

    #[test]
    fn pde_only_rejects_games_without_a_pde() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = resolve(&tiny_game_json("pde-only", ""), dir.path());
        let outcome = run_experiment(&cfg).unwrap();
        assert_eq!(outcome.status, ExperimentStatus::Incomplete);
        let manifest = read(dir.path(), "MANIFEST.txt");
        assert!(manifest.starts_with("status: incomplete\n"));
        assert!(manifest.contains("error: "), "{manifest}");
        assert!(dir.path().join("config_resolved.json").exists(), "partial artifacts retained");
    }

    #[test]
    fn failures_keep_partial_artifacts_and_an_incomplete_manifest() {
        // A missing checkpoint file fails after config_resolved.json exists.
        let dir = tempfile::tempdir().unwrap();
        let extra = ", \"checkpoint\": \"does_not_exist.bin\"";
        let cfg = resolve(&tiny_game_json("eval-only", extra), dir.path());
        let outcome = run_experiment(&cfg).unwrap();
        assert_eq!(outcome.status, ExperimentStatus::Incomplete);
        assert!(outcome.error.as_deref().unwrap().contains("does_not_exist.bin"));
        assert!(dir.path().join("config_resolved.json").exists());
        let manifest = read(dir.path(), "MANIFEST.txt");
        assert!(manifest.contains("status: incomplete"));
        assert!(manifest.contains("does_not_exist.bin"));
    }
}

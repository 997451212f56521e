//! Evaluation metrics and the paired trajectory-comparison harness.
//!
//! The headline training metric is the relative 2-norm error between the
//! per-player expected costs under the learned policies and under the
//! analytic Nash controls, both estimated on the same evaluation paths.
//! The comparison harness rolls one Brownian realization forward twice
//! (learned controls vs analytic controls) and tabulates states and
//! controls for a subset of players in the units the figures use.

use crate::engine::{simulate, BrownianBatch, ControlSource, Dynamics, TimeGrid, TrajectoryBatch};
use crate::error::SddgError;
use crate::games::{GameSpec, NashOracle};
use crate::lstm::LstmPolicy;
use crate::pde::ESolution;

/// `‖a − b‖₂ / ‖b‖₂` with `b` the reference vector.
pub fn rel_2norm_error(approx: &[f64], reference: &[f64]) -> Result<f64, SddgError> {
    if approx.len() != reference.len() {
        return Err(SddgError::InvalidParameter(format!(
            "rel_2norm_error: length mismatch ({} vs {})",
            approx.len(),
            reference.len()
        )));
    }
    if !crate::linalg::all_finite(approx) || !crate::linalg::all_finite(reference) {
        return Err(SddgError::InvalidParameter(
            "rel_2norm_error: inputs must be finite".into(),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&a, &b) in approx.iter().zip(reference) {
        num += (a - b) * (a - b);
        den += b * b;
    }
    if den == 0.0 {
        return Err(SddgError::Domain(
            "rel_2norm_error: reference vector has zero norm".into(),
        ));
    }
    Ok((num / den).sqrt())
}

/// Sample mean and Monte Carlo standard error (two-pass, fixed order).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    assert!(!xs.is_empty(), "mean_se: empty sample");
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean and standard error of the per-path differences `a[i] − b[i]`
/// (paired samples, e.g. common-random-number cost comparisons).
pub fn paired_diff_stats(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len(), "paired_diff_stats: length mismatch");
    let diffs: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    mean_se(&diffs)
}

/// One tabulated step of one player under one control source.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    /// `"lstm"` or `"oracle"`.
    pub source: &'static str,
    /// 1-indexed player id (figure convention).
    pub player: usize,
    pub k: usize,
    pub t: f64,
    /// The player's own state coordinate.
    pub x: f64,
    /// First control channel in plotted units (`None` at the final step).
    pub u1: Option<f64>,
    /// Second control channel (consumption game only).
    pub u2: Option<f64>,
}

/// Paired path table produced by [`compare_trajectories`].
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    /// Whether the game has a second control channel.
    pub two_channels: bool,
}

impl ComparisonTable {
    /// CSV export: `source,player,k,t,x,u1[,u2]`, 17-significant-digit
    /// numbers, LF line endings, empty control cells at the final step.
    pub fn to_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        let g = crate::engine::fmt_g17;
        if self.two_channels {
            w.write_all(b"source,player,k,t,x,u1,u2\n")?;
        } else {
            w.write_all(b"source,player,k,t,x,u1\n")?;
        }
        for r in &self.rows {
            let mut line = format!("{},{},{},{},{}", r.source, r.player, r.k, g(r.t), g(r.x));
            line.push(',');
            if let Some(u) = r.u1 {
                line.push_str(&g(u));
            }
            if self.two_channels {
                line.push(',');
                if let Some(u) = r.u2 {
                    line.push_str(&g(u));
                }
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }
}

/// Default plotted player subset (1-indexed), mirroring the figures'
/// "5 out of 10" selection.
pub const DEFAULT_PLAYER_SUBSET: [usize; 5] = [1, 3, 5, 7, 9];

fn tabulate(
    game: &GameSpec,
    traj: &TrajectoryBatch,
    grid: &TimeGrid,
    source: &'static str,
    players: &[usize],
    rows: &mut Vec<ComparisonRow>,
) {
    for &pid in players {
        let i = pid - 1;
        for k in 0..=grid.n_t() {
            let x = traj.state_at(k as i64).get(i, 0);
            let (u1, u2) = if k < grid.n_t() {
                let u = traj.control_at(k as i64);
                match game {
                    GameSpec::PortfolioCara(_) | GameSpec::PortfolioCrra(_) => {
                        // Plotted unit: fraction of wealth. Analytic dollar
                        // controls are converted using the current state.
                        let v = u.get(i, 0);
                        (Some(if traj.dollar_controls { v / x } else { v }), None)
                    }
                    GameSpec::Consumption(_) => {
                        // Investment as a fraction, consumption as a dollar
                        // rate c·X.
                        (Some(u.get(2 * i, 0)), Some(u.get(2 * i + 1, 0) * x))
                    }
                    GameSpec::InterBank(_) => (Some(u.get(i, 0)), None),
                }
            } else {
                (None, None)
            };
            rows.push(ComparisonRow { source, player: pid, k, t: grid.t(k as i64), x, u1, u2 });
        }
    }
}

/// Simulate one Brownian realization twice — once under the learned
/// policies, once under the analytic Nash controls — and tabulate states
/// and controls for `players` (1-indexed; defaults to
/// [`DEFAULT_PLAYER_SUBSET`] when empty). Passing `policies: None` compares
/// the oracle against itself (the differences are identically zero), which
/// is the plumbing self-check.
pub fn compare_trajectories(
    game: &GameSpec,
    policies: Option<&[LstmPolicy]>,
    include_aux_input: bool,
    grid: &TimeGrid,
    e: Option<&ESolution>,
    seed: u64,
    players: &[usize],
) -> Result<ComparisonTable, SddgError> {
    let n = game.n_players();
    let default_players: Vec<usize>;
    let players: &[usize] = if players.is_empty() {
        default_players = DEFAULT_PLAYER_SUBSET.iter().copied().filter(|&p| p <= n).collect();
        &default_players
    } else {
        players
    };
    for &p in players {
        if p == 0 || p > n {
            return Err(SddgError::InvalidParameter(format!(
                "compare_trajectories: player {p} outside 1..={n}"
            )));
        }
    }
    let noise = BrownianBatch::sample(grid, game.brownian_dims(), 1, seed);

    let oracle = NashOracle::new(game, grid, e)?;
    let fb = oracle.feedback();
    let oracle_source =
        ControlSource::Feedback { f: &*fb, dollar_controls: oracle.dollar_controls() };
    let traj_oracle = simulate(game, grid, &noise, &oracle_source)?;

    let traj_learned = match policies {
        Some(pols) => {
            let source = ControlSource::Policies { policies: pols, include_aux_input };
            simulate(game, grid, &noise, &source)?
        }
        None => simulate(game, grid, &noise, &oracle_source)?,
    };

    let mut rows = Vec::new();
    tabulate(game, &traj_learned, grid, "lstm", players, &mut rows);
    tabulate(game, &traj_oracle, grid, "oracle", players, &mut rows);
    Ok(ComparisonTable {
        rows,
        two_channels: matches!(game, GameSpec::Consumption(_)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games::{InterBankParams, PortfolioParams};
    use crate::lstm::{LstmParams, LstmPolicy};
    use crate::pde::ESolution;

    #[test]
    fn relative_error_basic_identities() {
        let v = vec![1.5, -2.0, 3.25];
        assert_eq!(rel_2norm_error(&v, &v).unwrap(), 0.0);
        let double: Vec<f64> = v.iter().map(|&x| 2.0 * x).collect();
        assert_eq!(rel_2norm_error(&double, &v).unwrap(), 1.0);
        let got = rel_2norm_error(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((got - std::f64::consts::SQRT_2).abs() <= 1e-15);
    }

    #[test]
    fn relative_error_is_scale_covariant() {
        let a = vec![0.3, -1.7, 2.2, 0.05];
        let b = vec![0.31, -1.65, 2.31, 0.04];
        let base = rel_2norm_error(&a, &b).unwrap();
        for &kappa in &[3.25f64, 1e-6, 7.0e8] {
            let ka: Vec<f64> = a.iter().map(|&x| kappa * x).collect();
            let kb: Vec<f64> = b.iter().map(|&x| kappa * x).collect();
            let scaled = rel_2norm_error(&ka, &kb).unwrap();
            assert!(
                (scaled - base).abs() <= 1e-12 * base,
                "kappa {kappa}: {scaled} vs {base}"
            );
        }
    }

    #[test]
    fn relative_error_rejects_bad_inputs() {
        assert!(rel_2norm_error(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rel_2norm_error(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
        assert!(matches!(
            rel_2norm_error(&[1.0, 2.0], &[0.0, 0.0]),
            Err(SddgError::Domain(_))
        ));
    }

    #[test]
    fn mean_and_standard_error() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        let want = (5.0f64 / 3.0 / 4.0).sqrt();
        assert!((se - want).abs() <= 1e-15);
        let (m1, se1) = mean_se(&[7.5]);
        assert_eq!((m1, se1), (7.5, 0.0));
        let (dm, dse) = paired_diff_stats(&[2.0, 3.0], &[1.0, 1.0]);
        assert_eq!(dm, 1.5);
        assert!((dse - 0.5).abs() <= 1e-15);
    }

    #[test]
    fn oracle_self_comparison_is_identical() {
        let p = PortfolioParams::table2_crra();
        let game = GameSpec::PortfolioCrra(p);
        let grid = game.default_grid();
        let t = compare_trajectories(&game, None, false, &grid, None, 42, &[]).unwrap();
        // Default subset, both sources, all steps.
        assert_eq!(t.rows.len(), 2 * 5 * (grid.n_t() + 1));
        let half = t.rows.len() / 2;
        for j in 0..half {
            let a = &t.rows[j];
            let b = &t.rows[half + j];
            assert_eq!(a.source, "lstm");
            assert_eq!(b.source, "oracle");
            assert_eq!((a.player, a.k, a.t), (b.player, b.k, b.t));
            assert_eq!(a.x, b.x, "self-comparison states must match");
            assert_eq!(a.u1, b.u1, "self-comparison controls must match");
        }
        // Same seed → identical CSV bytes.
        let t2 = compare_trajectories(&game, None, false, &grid, None, 42, &[]).unwrap();
        let mut csv1 = Vec::new();
        let mut csv2 = Vec::new();
        t.to_csv(&mut csv1).unwrap();
        t2.to_csv(&mut csv2).unwrap();
        assert_eq!(csv1, csv2);
        assert!(csv1.starts_with(b"source,player,k,t,x,u1\n"));
    }

    #[test]
    fn dollar_controls_are_reported_as_fractions() {
        let p = PortfolioParams::table1_cara();
        let game = GameSpec::PortfolioCara(p.clone());
        let grid = game.default_grid();
        let t = compare_trajectories(&game, None, false, &grid, None, 7, &[1]).unwrap();
        let first = t.rows.iter().find(|r| r.source == "oracle" && r.k == 0).unwrap();
        let coef = crate::games::nash_cara_coef(&p).unwrap()[0];
        assert_eq!(first.x, p.x0[0]);
        assert_eq!(first.u1.unwrap(), coef / p.x0[0], "dollar amount over wealth");
    }

    #[test]
    fn consumption_table_has_two_channels_in_plotted_units() {
        let p = PortfolioParams::table3_consumption();
        let game = GameSpec::Consumption(p);
        let grid = game.default_grid();
        let t = compare_trajectories(&game, None, false, &grid, None, 3, &[2, 4]).unwrap();
        assert!(t.two_channels);
        let mut csv = Vec::new();
        t.to_csv(&mut csv).unwrap();
        assert!(csv.starts_with(b"source,player,k,t,x,u1,u2\n"));
        for r in &t.rows {
            assert!(r.player == 2 || r.player == 4);
            if r.k < grid.n_t() {
                // Dollar consumption rate is positive along oracle paths.
                assert!(r.u2.unwrap() > 0.0);
            } else {
                assert_eq!(r.u1, None);
                assert_eq!(r.u2, None);
            }
        }
    }

    #[test]
    fn learned_policies_enter_the_table() {
        let p = InterBankParams::table4();
        let game = GameSpec::InterBank(p.clone());
        let grid = game.default_grid();
        let e = ESolution::solve(&p.pde_params(), 200, 25).unwrap();
        let policies: Vec<LstmPolicy> = (0..p.n_players)
            .map(|j| {
                LstmPolicy::new(
                    LstmParams::init(1000 + j as u64, 1 + p.n_players, 8, 1),
                    game.output_map(),
                )
            })
            .collect();
        let t = compare_trajectories(&game, Some(&policies), false, &grid, Some(&e), 5, &[1, 10])
            .unwrap();
        // Fresh random policies do not match the oracle.
        let lstm_u: Vec<f64> =
            t.rows.iter().filter(|r| r.source == "lstm").filter_map(|r| r.u1).collect();
        let oracle_u: Vec<f64> =
            t.rows.iter().filter(|r| r.source == "oracle").filter_map(|r| r.u1).collect();
        assert_eq!(lstm_u.len(), oracle_u.len());
        assert!(lstm_u.iter().zip(&oracle_u).any(|(a, b)| a != b));
        // Player ids out of range are rejected.
        assert!(compare_trajectories(&game, None, false, &grid, Some(&e), 5, &[11]).is_err());
        assert!(compare_trajectories(&game, None, false, &grid, Some(&e), 5, &[0]).is_err());
    }
}

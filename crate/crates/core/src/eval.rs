//! Interactive evaluation (Dice trajectories, NoC) and the experiment tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::clinician::{Decision, SessionView, SimulatedClinician, Strategy};
use crate::data::make_ground_truth;
use crate::domain::{dice, AnnotatedCase, BinaryMask};
use crate::engine::{derive_seed, Session, SessionConfig, SessionMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::parallel::par_map;
use crate::space::kl_monte_carlo;

/// Interactions after which a case that never reached the threshold counts as failed.
pub const NOC_HORIZON: usize = 6;
/// NoC charged when the threshold is never reached.
pub const NOC_PENALTY: u32 = 10;
/// Interaction count the comparison tables report.
pub const TABLE_INTERACTIONS: usize = 3;

const STREAM_GT: u64 = 0x67;
const STREAM_SESSION: u64 = 0x5E;
const STREAM_CLINICIAN: u64 = 0xC1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub strategy: Strategy,
    pub mode: SessionMode,
    pub session: SessionConfig,
    /// Annotators fused into each case's ground truth.
    pub fusion_size: usize,
    /// Clinician interactions per case (at most `session.max_iterations`).
    pub interactions: usize,
    pub thresholds: Vec<f64>,
    pub seed: u64,
}

impl EvalConfig {
    pub fn new(strategy: Strategy, mode: SessionMode, session: SessionConfig) -> Self {
        Self {
            strategy,
            mode,
            interactions: session.max_iterations,
            session,
            fusion_size: 1,
            thresholds: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseTrajectory {
    pub case_id: String,
    /// Dice of the fused prediction against the ground truth; index 0 is the
    /// initial prediction, index k follows the k-th interaction.
    pub dice: Vec<f64>,
}

impl CaseTrajectory {
    pub fn after(&self, interactions: usize) -> f64 {
        self.dice[interactions.min(self.dice.len() - 1)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub trajectories: Vec<CaseTrajectory>,
    pub mean_dice: Vec<f64>,
    /// Threshold (formatted) → per-case NoC.
    pub noc: BTreeMap<String, Vec<u32>>,
}

/// Interactions needed to reach `threshold`. `dice_after[k]` is the Dice
/// following interaction k+1; only the first [`NOC_HORIZON`] count.
pub fn noc(dice_after: &[f64], threshold: f64) -> u32 {
    dice_after
        .iter()
        .take(NOC_HORIZON)
        .position(|&d| d >= threshold)
        .map_or(NOC_PENALTY, |k| k as u32 + 1)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.4}")
}

/// One session of `cfg` on `case`, returning the trajectory and the final session.
pub fn run_case(model: &Arc<Model>, case: &AnnotatedCase, index: usize, cfg: &EvalConfig) -> Result<(CaseTrajectory, Session)> {
    let gt = case_ground_truth(case, index, cfg.fusion_size, cfg.seed)?;
    let mut session_cfg = cfg.session.clone();
    session_cfg.seed = derive_seed(cfg.seed, STREAM_SESSION, index as u64);
    let mut session = Session::create(case.case_id(), Arc::clone(model), case.image().clone(), session_cfg, cfg.mode)?;
    let clinician = SimulatedClinician::new(
        cfg.strategy,
        gt.clone(),
        format!("r{}", cfg.fusion_size),
        derive_seed(cfg.seed, STREAM_CLINICIAN, index as u64),
    );
    let mut trajectory = vec![dice(session.last_soft().expect("created").binarized(), &gt)?];
    for _ in 0..cfg.interactions.min(cfg.session.max_iterations) {
        let view = SessionView::of(&session).expect("active session");
        match clinician.next_event(&view)? {
            Decision::Event(ev) => {
                let res = session.apply_selection(ev)?;
                trajectory.push(dice(res.soft.binarized(), &gt)?);
            }
            Decision::Done => break,
        }
    }
    // a finished clinician leaves the mask as it is
    let last = *trajectory.last().expect("nonempty");
    trajectory.resize(cfg.interactions.min(cfg.session.max_iterations) + 1, last);
    Ok((CaseTrajectory { case_id: case.case_id().to_string(), dice: trajectory }, session))
}

/// Ground truth a case is scored against; independent of strategy and mode.
pub fn case_ground_truth(case: &AnnotatedCase, index: usize, r: usize, seed: u64) -> Result<BinaryMask> {
    make_ground_truth(case, r, derive_seed(seed, STREAM_GT + r as u64, index as u64))
}

pub fn evaluate_interactive(model: &Arc<Model>, cases: &[&AnnotatedCase], cfg: &EvalConfig) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no cases to evaluate".into()));
    }
    if cfg.interactions > cfg.session.max_iterations {
        return Err(Error::InvalidArgument(format!(
            "{} interactions exceed the session cap of {}",
            cfg.interactions, cfg.session.max_iterations
        )));
    }
    cfg.session.validate(model)?;
    let indexed: Vec<(usize, &AnnotatedCase)> = cases.iter().copied().enumerate().collect();
    let trajectories = par_map(&indexed, |&(i, case)| run_case(model, case, i, cfg).map(|(t, _)| t))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let steps = trajectories[0].dice.len();
    let mean_dice = (0..steps).map(|k| mean(&trajectories.iter().map(|t| t.dice[k]).collect::<Vec<_>>())).collect();
    let noc = cfg
        .thresholds
        .iter()
        .map(|&t| (threshold_key(t), trajectories.iter().map(|tr| noc(&tr.dice[1..], t)).collect()))
        .collect();
    Ok(EvalReport { config: cfg.clone(), trajectories, mean_dice, noc })
}

/// One-sided paired sign test of `a > b`; ties are discarded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: u64,
    pub losses: u64,
    pub ties: u64,
    pub p_value: f64,
}

pub fn sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples of {} and {}", a.len(), b.len())));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count() as u64;
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count() as u64;
    let ties = a.len() as u64 - wins - losses;
    let n = wins + losses;
    let p_value = if wins == 0 {
        1.0
    } else {
        let bin = Binomial::new(0.5, n).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        // P(X ≥ wins)
        bin.sf(wins - 1)
    };
    Ok(SignTest { wins, losses, ties, p_value })
}

// ----- strategy comparison ----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    /// Mean Dice after the table's interaction count, for fusion sizes 1..=R.
    pub by_fusion: Vec<f64>,
    pub average: f64,
    /// Per-case Dice averaged over fusion sizes, in case order (for paired tests).
    pub per_case: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub mode: SessionMode,
    pub interactions: usize,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, strategy: Strategy) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn to_csv(&self) -> String {
        let r = self.rows.first().map_or(0, |row| row.by_fusion.len());
        let mut out = String::from("strategy");
        for i in 1..=r {
            let _ = write!(out, ",r{i}");
        }
        out.push_str(",average\n");
        for row in &self.rows {
            out.push_str(row.strategy.name());
            for v in &row.by_fusion {
                let _ = write!(out, ",{v:.6}");
            }
            let _ = writeln!(out, ",{:.6}", row.average);
        }
        out
    }
}

/// Mean Dice after `interactions` for every strategy and fusion size 1..=R.
pub fn run_strategy_comparison(
    model: &Arc<Model>,
    cases: &[&AnnotatedCase],
    strategies: &[Strategy],
    base: &EvalConfig,
) -> Result<ComparisonTable> {
    let big_r = annotator_count(cases)?;
    let mut rows = Vec::new();
    for &strategy in strategies {
        let mut by_fusion = Vec::new();
        let mut per_case = vec![0.0; cases.len()];
        for r in 1..=big_r {
            let cfg = EvalConfig { strategy, fusion_size: r, thresholds: Vec::new(), ..base.clone() };
            let report = evaluate_interactive(model, cases, &cfg)?;
            let after: Vec<f64> = report.trajectories.iter().map(|t| t.after(base.interactions)).collect();
            for (acc, v) in per_case.iter_mut().zip(&after) {
                *acc += v / big_r as f64;
            }
            by_fusion.push(mean(&after));
        }
        let average = mean(&by_fusion);
        rows.push(ComparisonRow { strategy, by_fusion, average, per_case });
    }
    Ok(ComparisonTable { mode: base.mode, interactions: base.interactions, rows })
}

fn annotator_count(cases: &[&AnnotatedCase]) -> Result<usize> {
    let r = cases.first().ok_or_else(|| Error::InvalidArgument("no cases".into()))?.annotator_count();
    if cases.iter().any(|c| c.annotator_count() != r) {
        return Err(Error::InvalidArgument("cases disagree on annotator count".into()));
    }
    Ok(r)
}

// ----- ablation ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    SamplingOnly,
    MeanVariance,
    Weight,
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 4] = [Self::SamplingOnly, Self::MeanVariance, Self::Weight, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::SamplingOnly => "sampling_only",
            Self::MeanVariance => "mean_variance",
            Self::Weight => "weight",
            Self::Full => "full",
        }
    }

    /// (online mean-variance updates, online weight updates)
    pub fn toggles(self) -> (bool, bool) {
        match self {
            Self::SamplingOnly => (false, false),
            Self::MeanVariance => (true, false),
            Self::Weight => (false, true),
            Self::Full => (true, true),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub strategy: Strategy,
    pub interactions: usize,
    /// (row, mean Dice after the interaction count)
    pub rows: Vec<(AblationRow, f64)>,
}

impl AblationTable {
    pub fn get(&self, row: AblationRow) -> f64 {
        self.rows.iter().find(|(r, _)| *r == row).map_or(f64::NAN, |(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("configuration,adapt_mean_variance,adapt_weights,dice\n");
        for (row, v) in &self.rows {
            let (mv, w) = row.toggles();
            let _ = writeln!(out, "{},{mv},{w},{v:.6}", row.name());
        }
        out
    }
}

/// Adaptive sessions with each combination of online updates, averaged over fusion sizes 1..=R.
pub fn run_ablation(model: &Arc<Model>, cases: &[&AnnotatedCase], base: &EvalConfig) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for row in AblationRow::ALL {
        let (mv, w) = row.toggles();
        let mut cfg = base.clone();
        cfg.mode = SessionMode::Adaptive;
        cfg.session.adapt_mean_variance = mv;
        cfg.session.adapt_weights = w;
        let table = run_strategy_comparison(model, cases, &[base.strategy], &cfg)?;
        rows.push((row, table.rows[0].average));
    }
    Ok(AblationTable { strategy: base.strategy, interactions: base.interactions, rows })
}

// ----- sampling-space statistics ----------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceDraw {
    pub clinician_id: String,
    pub session_id: String,
    pub draw: usize,
    pub component: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceShift {
    pub clinician_id: String,
    pub session_id: String,
    /// Monte-Carlo KL(final ‖ initial) and its standard error.
    pub kl: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpaceStats {
    pub draws: Vec<SpaceDraw>,
    pub shifts: Vec<SpaceShift>,
}

impl SpaceStats {
    pub fn draws_csv(&self) -> String {
        let d = self.draws.first().map_or(0, |r| r.values.len());
        let mut out = String::from("clinician_id,session_id,draw,component");
        for i in 0..d {
            let _ = write!(out, ",z{i}");
        }
        out.push('\n');
        for r in &self.draws {
            let _ = write!(out, "{},{},{},{}", r.clinician_id, r.session_id, r.draw, r.component);
            for v in &r.values {
                let _ = write!(out, ",{v:.9}");
            }
            out.push('\n');
        }
        out
    }

    pub fn kl_csv(&self) -> String {
        let mut out = String::from("clinician_id,session_id,kl,std_error\n");
        for s in &self.shifts {
            let _ = writeln!(out, "{},{},{:.9},{:.9}", s.clinician_id, s.session_id, s.kl, s.std_error);
        }
        out
    }
}

/// Samples each session's final space and measures how far it moved from the initial one.
pub fn export_space_stats(sessions: &[(&str, &Session)], draws: usize, seed: u64) -> Result<SpaceStats> {
    let mut stats = SpaceStats::default();
    for (i, (clinician, session)) in sessions.iter().enumerate() {
        let s = derive_seed(seed, 0x5A, i as u64);
        for (j, sample) in session.space().draw_samples(draws, s)?.into_iter().enumerate() {
            stats.draws.push(SpaceDraw {
                clinician_id: clinician.to_string(),
                session_id: session.id().to_string(),
                draw: j,
                component: sample.component,
                values: sample.vector,
            });
        }
        let (kl, std_error) = kl_monte_carlo(session.space(), session.initial_space(), draws.max(2), s ^ 0xA5A5)?;
        stats.shifts.push(SpaceShift {
            clinician_id: clinician.to_string(),
            session_id: session.id().to_string(),
            kl,
            std_error,
        });
    }
    Ok(stats)
}

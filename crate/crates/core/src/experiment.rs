//! Multi-seed experiment harness: cached runs against uncached references,
//! parameter sweeps, NFE matching between policies and planned-vs-uniform
//! grid comparisons. Seeds run in parallel; results are always returned in
//! seed order.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::metrics::{compare_runs, mse, psnr_from_mse, terminal_peak, RunReport};
use crate::policy::{plan_indices, teacher_forced_decisions, transition_scores, PolicySpec, ReplayPolicy, ScoreKind};
use crate::sampler::{sample_reference, sample_with_policy, TimestepGrid, Trajectory};
use crate::sensitivity::{calibrate, CalibrationConfig, SensitivityProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecisionMode {
    /// Decisions react to the cached trajectory as it unfolds.
    #[default]
    Adaptive,
    /// Decisions are made on the frozen reference's per-step scores, then
    /// replayed in a real cached run.
    TeacherForced,
}

pub fn references(field: &dyn VelocityField, grid: &TimestepGrid, seeds: &[u64]) -> Result<Vec<Trajectory>> {
    seeds.par_iter().map(|&s| sample_reference(field, grid, s)).collect()
}

/// One cached run with fidelity filled in against `reference`. Score-based
/// policies must use a profile calibrated on `grid`.
pub fn run_policy(
    field: &dyn VelocityField,
    grid: &TimestepGrid,
    reference: &Trajectory,
    spec: &PolicySpec,
    profile: Option<&Arc<SensitivityProfile>>,
    mode: DecisionMode,
) -> Result<(Trajectory, RunReport)> {
    let seed = reference.seed;
    if let (true, Some(p)) = (spec.needs_profile(), profile) {
        p.check_grid(grid)?;
    }
    let (traj, mut report) = match (mode, spec) {
        (DecisionMode::TeacherForced, PolicySpec::Score { kind, config }) => {
            let profile = profile.ok_or_else(|| Error::Config("teacher-forced mode needs a profile".into()))?;
            let scores = transition_scores(reference, profile, *kind)?;
            let decisions = teacher_forced_decisions(&scores, config)?;
            let mut replay = ReplayPolicy::new(decisions);
            sample_with_policy(field, grid, seed, &mut replay)?
        }
        _ => {
            let mut policy = spec.build(profile)?;
            sample_with_policy(field, grid, seed, policy.as_mut())?
        }
    };
    report.policy = spec.name().to_string();
    report.fidelity = Some(compare_runs(reference, &traj)?);
    Ok((traj, report))
}

pub fn run_seeds(
    field: &dyn VelocityField,
    grid: &TimestepGrid,
    references: &[Trajectory],
    spec: &PolicySpec,
    profile: Option<&Arc<SensitivityProfile>>,
    mode: DecisionMode,
) -> Result<Vec<RunReport>> {
    references
        .par_iter()
        .map(|r| run_policy(field, grid, r, spec, profile, mode).map(|(_, rep)| rep))
        .collect()
}

/// Seed-averaged outcome of one sweep value.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub value: f64,
    pub mean_nfe: f64,
    pub mean_cache_ratio: f64,
    pub mean_terminal_mse: f64,
    pub mean_terminal_psnr: f64,
    pub mean_rel_l2: f64,
    pub runs: Vec<RunReport>,
}

impl Aggregate {
    pub fn from_runs(value: f64, runs: Vec<RunReport>) -> Self {
        let n = runs.len().max(1) as f64;
        let mean = |f: &dyn Fn(&RunReport) -> f64| runs.iter().map(f).sum::<f64>() / n;
        let fid = |r: &RunReport| r.fidelity.expect("harness runs carry fidelity");
        Self {
            value,
            mean_nfe: mean(&|r| r.nfe as f64),
            mean_cache_ratio: mean(&|r| r.cache_ratio),
            mean_terminal_mse: mean(&|r| fid(r).terminal_mse),
            mean_terminal_psnr: mean(&|r| fid(r).terminal_psnr),
            mean_rel_l2: mean(&|r| fid(r).trajectory_rel_l2),
            runs,
        }
    }

    pub const CSV_HEADER: &'static str =
        "axis,value,runs,mean_nfe,mean_cache_ratio,mean_terminal_mse,mean_terminal_psnr,mean_trajectory_rel_l2";

    pub fn csv_row(&self, axis: &str) -> String {
        format!(
            "{axis},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            self.value,
            self.runs.len(),
            self.mean_nfe,
            self.mean_cache_ratio,
            self.mean_terminal_mse,
            self.mean_terminal_psnr,
            self.mean_rel_l2
        )
    }
}

pub fn sweep_epsilon(
    field: &dyn VelocityField,
    grid: &TimestepGrid,
    references: &[Trajectory],
    spec: &PolicySpec,
    profile: Option<&Arc<SensitivityProfile>>,
    mode: DecisionMode,
    values: &[f64],
) -> Result<Vec<Aggregate>> {
    values
        .iter()
        .map(|&eps| {
            let runs = run_seeds(field, grid, references, &spec.with_epsilon(eps), profile, mode)?;
            Ok(Aggregate::from_runs(eps, runs))
        })
        .collect()
}

pub fn sweep_max_reuse(
    field: &dyn VelocityField,
    grid: &TimestepGrid,
    references: &[Trajectory],
    spec: &PolicySpec,
    profile: Option<&Arc<SensitivityProfile>>,
    mode: DecisionMode,
    values: &[usize],
) -> Result<Vec<Aggregate>> {
    values
        .iter()
        .map(|&n| {
            let runs = run_seeds(field, grid, references, &spec.with_max_reuse(n), profile, mode)?;
            Ok(Aggregate::from_runs(n as f64, runs))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSizePoint {
    pub samples: usize,
    /// Max relative deviation from the largest calibration set.
    pub max_relative_deviation: f64,
    pub profile: SensitivityProfile,
}

/// Calibrates at each size (same seed) and compares every profile against
/// the one from the largest set.
pub fn sweep_calibration_size(
    field: &dyn VelocityField,
    grid: &TimestepGrid,
    base: &CalibrationConfig,
    sizes: &[usize],
) -> Result<Vec<CalibrationSizePoint>> {
    let largest = *sizes.iter().max().ok_or_else(|| Error::Config("empty calibration-size list".into()))?;
    let profiles: Vec<(usize, SensitivityProfile)> = sizes
        .iter()
        .map(|&n| Ok((n, calibrate(field, grid, &CalibrationConfig { num_samples: n, ..base.clone() })?)))
        .collect::<Result<_>>()?;
    let baseline = profiles.iter().find(|(n, _)| *n == largest).unwrap().1.clone();
    profiles
        .into_iter()
        .map(|(samples, profile)| {
            Ok(CalibrationSizePoint {
                samples,
                max_relative_deviation: profile.max_relative_deviation(&baseline)?,
                profile,
            })
        })
        .collect()
}

/// Searches the base tolerance of `spec` (log-bisection) until the mean NFE
/// over `references` lies within `tolerance` of `target`. Returns the best
/// point found.
pub fn match_nfe(
    field: &dyn VelocityField,
    grid: &TimestepGrid,
    references: &[Trajectory],
    spec: &PolicySpec,
    profile: Option<&Arc<SensitivityProfile>>,
    target: f64,
    tolerance: f64,
) -> Result<Aggregate> {
    let eval = |eps: f64| -> Result<Aggregate> {
        let runs = run_seeds(field, grid, references, &spec.with_epsilon(eps), profile, DecisionMode::Adaptive)?;
        Ok(Aggregate::from_runs(eps, runs))
    };
    let (mut lo, mut hi) = (1e-8_f64.ln(), 1e4_f64.ln());
    let mut best: Option<Aggregate> = None;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let agg = eval(mid.exp())?;
        let gap = agg.mean_nfe - target;
        if best.as_ref().is_none_or(|b| gap.abs() < (b.mean_nfe - target).abs()) {
            best = Some(agg);
        }
        if gap.abs() <= tolerance {
            break;
        }
        // larger epsilon -> more hits -> lower NFE
        if gap > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.expect("at least one bisection step"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub seed: u64,
    pub planned_grid: TimestepGrid,
    pub planned_mse: f64,
    pub uniform_mse: f64,
    pub planned_psnr: f64,
    pub uniform_psnr: f64,
}

/// Per seed: plan a `budget`-step grid from that seed's fine reference, run
/// it and an equal-count uniform sub-grid, and measure terminal MSE against
/// the fine reference.
pub fn compare_plan(
    field: &dyn VelocityField,
    fine_grid: &TimestepGrid,
    profile: &SensitivityProfile,
    budget: usize,
    seeds: &[u64],
) -> Result<Vec<PlanOutcome>> {
    let uniform = fine_grid.select(&plan_indices(&vec![1.0; fine_grid.steps()], budget)?)?;
    seeds
        .par_iter()
        .map(|&seed| {
            let fine = sample_reference(field, fine_grid, seed)?;
            let scores = transition_scores(&fine, profile, ScoreKind::Full)?;
            let planned_grid = fine_grid.select(&plan_indices(&scores, budget)?)?;
            let planned = sample_reference(field, &planned_grid, seed)?;
            let coarse = sample_reference(field, &uniform, seed)?;
            let planned_fid = compare_terminal(&fine, &planned)?;
            let uniform_fid = compare_terminal(&fine, &coarse)?;
            Ok(PlanOutcome {
                seed,
                planned_mse: planned_fid.0,
                uniform_mse: uniform_fid.0,
                planned_psnr: planned_fid.1,
                uniform_psnr: uniform_fid.1,
                planned_grid,
            })
        })
        .collect()
}

/// Terminal MSE and PSNR of `candidate` against `reference`; the grids may differ.
fn compare_terminal(reference: &Trajectory, candidate: &Trajectory) -> Result<(f64, f64)> {
    let err = mse(reference.terminal(), candidate.terminal())?;
    Ok((err, psnr_from_mse(err, terminal_peak(reference))?))
}

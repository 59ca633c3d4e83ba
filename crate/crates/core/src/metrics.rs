//! Efficiency and fidelity of cached runs.

use std::fmt::Write as _;

use ndarray::ArrayView1;

use crate::error::{Error, Result};
use crate::sampler::Trajectory;

/// PSNR reported for a zero-error comparison.
pub const PSNR_CAP_DB: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecision {
    /// Index of the state whose output was decided (1..=K).
    pub step: usize,
    pub t: f64,
    pub hit: bool,
    pub score: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fidelity {
    pub terminal_mse: f64,
    pub terminal_psnr: f64,
    pub trajectory_rel_l2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub policy: String,
    pub config_hash: String,
    pub seed: u64,
    /// Number of Euler steps `K`.
    pub steps: usize,
    /// Fresh evaluations, including the first one at `t = T`.
    pub nfe: usize,
    pub hits: usize,
    pub cache_ratio: f64,
    pub decisions: Vec<StepDecision>,
    pub fidelity: Option<Fidelity>,
}

impl RunReport {
    pub fn new(policy: &str, seed: u64, steps: usize, nfe: usize, decisions: Vec<StepDecision>) -> Self {
        let hits = decisions.iter().filter(|d| d.hit).count();
        Self {
            policy: policy.to_string(),
            config_hash: String::new(),
            seed,
            steps,
            nfe,
            hits,
            cache_ratio: if steps == 0 { 0.0 } else { hits as f64 / steps as f64 },
            decisions,
            fidelity: None,
        }
    }

    /// `nfe + hits == K + 1`.
    pub fn accounting_holds(&self) -> bool {
        self.nfe + self.hits == self.steps + 1 && (0.0..=1.0).contains(&self.cache_ratio)
    }

    /// Longest run of consecutive hits.
    pub fn longest_hit_streak(&self) -> usize {
        let mut best = 0;
        let mut cur = 0;
        for d in &self.decisions {
            cur = if d.hit { cur + 1 } else { 0 };
            best = best.max(cur);
        }
        best
    }

    pub const SUMMARY_HEADER: &'static str =
        "config_hash,seed,nfe,cache_ratio,terminal_mse,terminal_psnr,trajectory_rel_l2";

    pub fn summary_row(&self) -> String {
        let (mse, psnr, rel) = match self.fidelity {
            Some(f) => (fmt_f(f.terminal_mse), fmt_f(f.terminal_psnr), fmt_f(f.trajectory_rel_l2)),
            None => (String::new(), String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{},{},{}",
            self.config_hash,
            self.seed,
            self.nfe,
            fmt_f(self.cache_ratio),
            mse,
            psnr,
            rel
        )
    }

    pub const STEPS_HEADER: &'static str = "step,t,decision,S,epsilon_used";

    pub fn steps_csv(&self) -> String {
        let mut out = String::from(Self::STEPS_HEADER);
        out.push('\n');
        for d in &self.decisions {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                d.step,
                fmt_f(d.t),
                if d.hit { "hit" } else { "miss" },
                d.score.map(fmt_f).unwrap_or_default(),
                d.epsilon.map(fmt_f).unwrap_or_default()
            );
        }
        out
    }
}

pub fn summary_csv<'a>(reports: impl IntoIterator<Item = &'a RunReport>) -> String {
    let mut out = String::from(RunReport::SUMMARY_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.summary_row());
        out.push('\n');
    }
    out
}

pub(crate) fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn mse(reference: ArrayView1<'_, f64>, candidate: ArrayView1<'_, f64>) -> Result<f64> {
    if reference.len() != candidate.len() {
        return Err(Error::ShapeMismatch { expected: reference.len(), got: candidate.len() });
    }
    if reference.is_empty() {
        return Err(Error::Domain("mse of empty arrays".into()));
    }
    let diff = &reference - &candidate;
    Ok(diff.dot(&diff) / reference.len() as f64)
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(reference: ArrayView1<'_, f64>, candidate: ArrayView1<'_, f64>, peak: f64) -> Result<f64> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::Domain(format!("psnr peak must be positive, got {peak}")));
    }
    psnr_from_mse(mse(reference, candidate)?, peak)
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> Result<f64> {
    if !(mse >= 0.0) {
        return Err(Error::Domain(format!("mse must be >= 0, got {mse}")));
    }
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean absolute change of the stored field output between consecutive
/// states, one value per transition.
pub fn consecutive_step_mae(trajectory: &Trajectory) -> Result<Vec<f64>> {
    if !trajectory.is_fully_evaluated() {
        return Err(Error::Precondition("consecutive-step MAE needs a fully evaluated trajectory".into()));
    }
    Ok(trajectory
        .states
        .windows(2)
        .map(|w| {
            let d = w[0].velocity.len() as f64;
            (&w[0].velocity - &w[1].velocity).mapv(f64::abs).sum() / d
        })
        .collect())
}

/// Fidelity of `cached` against an uncached `reference` with the same grid
/// and seed. PSNR uses the largest absolute terminal component of the
/// reference as peak (1.0 if that is zero).
pub fn compare_runs(reference: &Trajectory, cached: &Trajectory) -> Result<Fidelity> {
    if reference.seed != cached.seed {
        return Err(Error::GridMismatch(format!(
            "seed mismatch: reference {} vs cached {}",
            reference.seed, cached.seed
        )));
    }
    if reference.times() != cached.times() {
        return Err(Error::GridMismatch("reference and cached runs use different grids".into()));
    }
    let terminal_mse = mse(reference.terminal(), cached.terminal())?;
    let terminal_psnr = psnr_from_mse(terminal_mse, terminal_peak(reference))?;
    let (num, den) = reference.states.iter().zip(&cached.states).fold((0.0, 0.0), |(n, d), (r, c)| {
        let diff = &r.x - &c.x;
        (n + diff.dot(&diff), d + r.x.dot(&r.x))
    });
    let trajectory_rel_l2 = if num == 0.0 { 0.0 } else { (num / den).sqrt() };
    Ok(Fidelity { terminal_mse, terminal_psnr, trajectory_rel_l2 })
}

/// PSNR peak for comparisons against `reference`: its largest absolute
/// terminal component, or 1.0 if the terminal state is zero.
pub(crate) fn terminal_peak(reference: &Trajectory) -> f64 {
    let peak = reference.terminal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        peak
    } else {
        1.0
    }
}

/// Average ranks (1-based), ties sharing the mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { expected: a.len(), got: b.len() });
    }
    if a.len() < 2 {
        return Err(Error::Domain("rank correlation needs at least two points".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Domain("rank correlation undefined for constant input".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

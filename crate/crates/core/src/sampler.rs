//! Explicit Euler integration of the probability-flow ODE from `t = T` to `t = 0`.

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::fingerprint::fingerprint;
use crate::metrics::{RunReport, StepDecision};
use crate::policy::{CachePolicy, StepContext};
use crate::rng::NormalStream;
use crate::schedule::T_MAX;

/// Strictly decreasing time grid `T = t_K > ... > t_0 = 0`, stored in
/// integration order (index 0 is `T`).
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepGrid {
    times: Vec<f64>,
}

impl TimestepGrid {
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("grid needs at least one step".into()));
        }
        let times = (0..=steps)
            .map(|i| match i {
                0 => T_MAX,
                i if i == steps => 0.0,
                i => T_MAX * (1.0 - i as f64 / steps as f64),
            })
            .collect();
        Ok(Self { times })
    }

    /// Explicit grid, given in decreasing order.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Config("grid needs at least two time points".into()));
        }
        if times[0] != T_MAX || *times.last().unwrap() != 0.0 {
            return Err(Error::Config(format!("grid must start at {T_MAX} and end at 0")));
        }
        if times.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Config("grid times must be strictly decreasing".into()));
        }
        Ok(Self { times })
    }

    /// Number of steps `K`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn min_spacing(&self) -> f64 {
        self.times
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(f64::INFINITY, f64::min)
    }

    /// Sub-grid made of the given indices (integration order). The indices
    /// must include both endpoints and be strictly increasing.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("selected indices must be strictly increasing".into()));
        }
        if indices.first() != Some(&0) || indices.last() != Some(&self.steps()) {
            return Err(Error::Config("selection must keep both grid endpoints".into()));
        }
        Self::from_times(indices.iter().map(|&i| self.times[i]).collect())
    }

    /// Every `keep_every`-th point, plus the final endpoint.
    pub fn subsample(&self, keep_every: usize) -> Result<Self> {
        if keep_every == 0 {
            return Err(Error::Config("keep_every must be >= 1".into()));
        }
        let mut idx: Vec<usize> = (0..=self.steps()).step_by(keep_every).collect();
        if *idx.last().unwrap() != self.steps() {
            idx.push(self.steps());
        }
        self.select(&idx)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint("grid", self.times.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryState {
    pub t: f64,
    pub x: Array1<f64>,
    /// Velocity used from this state on: fresh when `evaluated`, otherwise
    /// the most recent fresh evaluation.
    pub velocity: Array1<f64>,
    pub evaluated: bool,
}

/// `K + 1` states in integration order (decreasing `t`).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub states: Vec<TrajectoryState>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }

    pub fn terminal(&self) -> ArrayView1<'_, f64> {
        self.states.last().expect("trajectory is never empty").x.view()
    }

    pub fn is_fully_evaluated(&self) -> bool {
        self.states.iter().all(|s| s.evaluated)
    }

    pub fn nfe(&self) -> usize {
        self.states.iter().filter(|s| s.evaluated).count()
    }

    /// CSV with columns `step_index,t,evaluated,x0,x1,...`.
    pub fn to_csv(&self) -> String {
        let dim = self.states.first().map_or(0, |s| s.x.len());
        let mut out = String::from("step_index,t,evaluated");
        for i in 0..dim {
            out.push_str(&format!(",x{i}"));
        }
        out.push('\n');
        for (k, s) in self.states.iter().enumerate() {
            out.push_str(&format!("{k},{:.16e},{}", s.t, u8::from(s.evaluated)));
            for v in s.x.iter() {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// `x_T ~ N(0, I)` from the documented seeded stream.
pub fn initial_state(dim: usize, seed: u64) -> Array1<f64> {
    Array1::from(NormalStream::new(seed).normal_vec(dim))
}

fn check_finite(v: &Array1<f64>, step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step })
    }
}

fn fresh(field: &dyn VelocityField, x: &Array1<f64>, t: f64, step: usize) -> Result<Array1<f64>> {
    let y = field.evaluate(x.view(), t).map_err(|e| match e {
        Error::NonFinite(_) => Error::Diverged { step },
        other => other,
    })?;
    check_finite(&y, step)?;
    Ok(y)
}

/// Uncached run: every state is evaluated (`K + 1` evaluations; the last one,
/// at `t = 0`, drives no step but is recorded for diagnostics).
pub fn sample_reference(field: &dyn VelocityField, grid: &TimestepGrid, seed: u64) -> Result<Trajectory> {
    let times = grid.times();
    let mut x = initial_state(field.dim(), seed);
    let mut y = fresh(field, &x, times[0], 0)?;
    let mut states = Vec::with_capacity(times.len());
    states.push(TrajectoryState { t: times[0], x: x.clone(), velocity: y.clone(), evaluated: true });
    for (i, w) in times.windows(2).enumerate() {
        let dt = w[1] - w[0];
        let next = &x + &(&y * dt);
        check_finite(&next, i + 1)?;
        y = fresh(field, &next, w[1], i + 1)?;
        x = next;
        states.push(TrajectoryState { t: w[1], x: x.clone(), velocity: y.clone(), evaluated: true });
    }
    Ok(Trajectory { seed, states })
}

/// Euler run in which `policy` decides, per state, whether the velocity is
/// freshly evaluated or reused from the last evaluation.
pub fn sample_with_policy(
    field: &dyn VelocityField,
    grid: &TimestepGrid,
    seed: u64,
    policy: &mut dyn CachePolicy,
) -> Result<(Trajectory, RunReport)> {
    let times = grid.times();
    let steps = grid.steps();
    let mut x = initial_state(field.dim(), seed);
    let mut y = fresh(field, &x, times[0], 0)?;
    policy.refresh(x.view(), times[0], y.view())?;

    let mut states = Vec::with_capacity(times.len());
    states.push(TrajectoryState { t: times[0], x: x.clone(), velocity: y.clone(), evaluated: true });
    let mut decisions = Vec::with_capacity(steps);
    let mut nfe = 1;

    for (i, w) in times.windows(2).enumerate() {
        let (t_from, t_to) = (w[0], w[1]);
        let dt = t_to - t_from;
        let next = &x + &(&y * dt);
        check_finite(&next, i + 1)?;
        let dx = &next - &x;
        let ctx = StepContext {
            index: i,
            steps,
            t_from,
            t_to,
            dx: dx.view(),
            dt,
        };
        let decision = policy.decide(&ctx)?;
        if !decision.hit {
            y = fresh(field, &next, t_to, i + 1)?;
            nfe += 1;
            policy.refresh(next.view(), t_to, y.view())?;
        }
        decisions.push(StepDecision {
            step: i + 1,
            t: t_to,
            hit: decision.hit,
            score: decision.score,
            epsilon: decision.epsilon,
        });
        x = next;
        states.push(TrajectoryState { t: t_to, x: x.clone(), velocity: y.clone(), evaluated: !decision.hit });
    }

    let report = RunReport::new(policy.name(), seed, steps, nfe, decisions);
    Ok((Trajectory { seed, states }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConstantField, GaussianField};
    use crate::policy::{AlwaysCache, NeverCache};
    use crate::schedule::InterpolantSchedule;

    #[test]
    fn uniform_grid_endpoints_exact() {
        let g = TimestepGrid::uniform(7).unwrap();
        assert_eq!(g.steps(), 7);
        assert_eq!(g.times()[0], 1.0);
        assert_eq!(*g.times().last().unwrap(), 0.0);
        assert!(g.times().windows(2).all(|w| w[1] < w[0]));
        assert!(TimestepGrid::uniform(0).is_err());
    }

    #[test]
    fn explicit_grid_validation() {
        assert!(TimestepGrid::from_times(vec![1.0, 0.5, 0.0]).is_ok());
        assert!(TimestepGrid::from_times(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(TimestepGrid::from_times(vec![0.9, 0.5, 0.0]).is_err());
        assert!(TimestepGrid::from_times(vec![1.0, 0.5, 0.1]).is_err());
    }

    #[test]
    fn subsample_keeps_endpoints() {
        let g = TimestepGrid::uniform(250).unwrap();
        let s = g.subsample(10).unwrap();
        assert_eq!(s.steps(), 25);
        assert_eq!(s.times()[1], g.times()[10]);
        let s = TimestepGrid::uniform(10).unwrap().subsample(3).unwrap();
        assert_eq!(s.steps(), 4);
    }

    #[test]
    fn zero_field_leaves_state_untouched() {
        let f = ConstantField::zeros(3);
        let grid = TimestepGrid::uniform(20).unwrap();
        let traj = sample_reference(&f, &grid, 5).unwrap();
        assert_eq!(traj.states.len(), 21);
        assert_eq!(traj.states[0].x, traj.terminal().to_owned());
        assert!(traj.is_fully_evaluated());
        // every state evaluated, including t = 0
        assert_eq!(traj.nfe(), 21);
    }

    #[test]
    fn never_cache_is_bitwise_reference() {
        let f = GaussianField::new(vec![0.5, -1.0], vec![0.3, 2.0], InterpolantSchedule::linear()).unwrap();
        let grid = TimestepGrid::uniform(40).unwrap();
        let reference = sample_reference(&f, &grid, 9).unwrap();
        let (traj, report) = sample_with_policy(&f, &grid, 9, &mut NeverCache).unwrap();
        assert_eq!(traj, reference);
        assert_eq!(report.cache_ratio, 0.0);
        assert_eq!(report.nfe, 41);
    }

    #[test]
    fn always_cache_uses_single_evaluation() {
        let f = GaussianField::standard(2, InterpolantSchedule::linear());
        let grid = TimestepGrid::uniform(30).unwrap();
        let mut policy = AlwaysCache::new(30).unwrap();
        let (traj, report) = sample_with_policy(&f, &grid, 1, &mut policy).unwrap();
        assert_eq!(report.nfe, 1);
        assert_eq!(report.hits, 30);
        assert_eq!(traj.nfe(), 1);
        assert!(traj.states.iter().all(|s| s.velocity == traj.states[0].velocity));
    }

    #[test]
    fn diverging_field_reports_step() {
        let f = crate::field::StiffSyntheticField::new(1.0, 1e300, 1).unwrap();
        let grid = TimestepGrid::uniform(10).unwrap();
        match sample_reference(&f, &grid, 0) {
            Err(Error::Diverged { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn standard_gaussian_terminal_statistics() {
        let f = GaussianField::standard(2, InterpolantSchedule::linear());
        let grid = TimestepGrid::uniform(1000).unwrap();
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        let n = 500;
        for seed in 0..n {
            let traj = sample_reference(&f, &grid, seed).unwrap();
            for i in 0..2 {
                sum[i] += traj.terminal()[i];
                sq[i] += traj.terminal()[i].powi(2);
            }
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.15, "mean {mean}");
            assert!((var - 1.0).abs() < 0.2, "var {var}");
        }
    }

    #[test]
    fn euler_is_first_order() {
        let f = GaussianField::new(vec![0.5, -1.0], vec![0.3, 2.0], InterpolantSchedule::linear()).unwrap();
        let run = |k| sample_reference(&f, &TimestepGrid::uniform(k).unwrap(), 3).unwrap();
        let exact = run(50_000);
        let err = |k| {
            let t = run(k);
            (&t.terminal() - &exact.terminal()).mapv(|v| v * v).sum().sqrt()
        };
        let ratio = err(50) / err(5000);
        assert!((60.0..=140.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn trajectory_csv_layout() {
        let f = ConstantField::new(vec![1.0, 2.0]).unwrap();
        let traj = sample_reference(&f, &TimestepGrid::uniform(2).unwrap(), 0).unwrap();
        let csv = traj.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step_index,t,evaluated,x0,x1");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,1.0000000000000000e0,1,"));
    }
}

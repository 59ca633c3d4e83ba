//! Cache decision rules.
//!
//! [`SensitivityPolicy`] implements sensitivity-aware caching: after each
//! Euler step the latent change `d` and time change `tau` since the last fresh
//! evaluation are accumulated, and the cached output is reused while
//!
//! ```text
//! S = alpha_x * ||d|| + alpha_t * |tau| <= eps   and   m < n
//! ```
//!
//! where `(alpha_x, alpha_t)` are the calibrated sensitivities at the time of
//! the last refresh and `m` counts reuses since then. The same machinery with
//! only one of the two terms gives the timestep-proxy and residual-magnitude
//! baselines.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};
use crate::sampler::{TimestepGrid, Trajectory};
use crate::sensitivity::SensitivityProfile;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub hit: bool,
    pub score: Option<f64>,
    pub epsilon: Option<f64>,
}

impl Decision {
    pub const fn miss() -> Self {
        Self { hit: false, score: None, epsilon: None }
    }

    pub const fn hit() -> Self {
        Self { hit: true, score: None, epsilon: None }
    }
}

/// One Euler transition `t_from -> t_to` as seen by a policy. The policy
/// decides whether the output at `t_to` is reused.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    /// Transition index, `0..steps`.
    pub index: usize,
    pub steps: usize,
    pub t_from: f64,
    pub t_to: f64,
    pub dx: ArrayView1<'a, f64>,
    pub dt: f64,
}

impl StepContext<'_> {
    /// Fraction of the run already completed, by step index.
    pub fn step_fraction(&self) -> f64 {
        self.index as f64 / self.steps as f64
    }
}

/// Per-run decision maker. One instance per sampling run.
pub trait CachePolicy: Send {
    fn name(&self) -> &str;

    /// Called after every fresh evaluation, including the first one.
    fn refresh(&mut self, x: ArrayView1<'_, f64>, t: f64, y: ArrayView1<'_, f64>) -> Result<()>;

    fn decide(&mut self, step: &StepContext<'_>) -> Result<Decision>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachePolicyConfig {
    pub epsilon: f64,
    pub epsilon_guard: f64,
    pub guard_fraction: f64,
    /// Maximum consecutive reuses `n`. `usize::MAX` disables the cap.
    pub max_reuse: usize,
    /// Optional piecewise-constant override: `(start_fraction, epsilon)`
    /// pairs sorted by start fraction, the first starting at 0.
    pub schedule: Option<Vec<(f64, f64)>>,
}

impl CachePolicyConfig {
    pub const DEFAULT_GUARD_FRACTION: f64 = 0.2;
    pub const DEFAULT_EPSILON_GUARD: f64 = 0.01;

    pub fn new(epsilon: f64, max_reuse: usize) -> Self {
        Self {
            epsilon,
            epsilon_guard: Self::DEFAULT_EPSILON_GUARD,
            guard_fraction: Self::DEFAULT_GUARD_FRACTION,
            max_reuse,
            schedule: None,
        }
    }

    pub fn without_guard(mut self) -> Self {
        self.guard_fraction = 0.0;
        self
    }

    pub fn with_guard(mut self, epsilon_guard: f64, guard_fraction: f64) -> Self {
        self.epsilon_guard = epsilon_guard;
        self.guard_fraction = guard_fraction;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.epsilon_guard > 0.0) {
            return Err(Error::Config(format!("epsilon_guard must be > 0, got {}", self.epsilon_guard)));
        }
        if !(0.0..=1.0).contains(&self.guard_fraction) {
            return Err(Error::Config(format!("guard_fraction must lie in [0, 1], got {}", self.guard_fraction)));
        }
        if self.max_reuse == 0 {
            return Err(Error::Config("n (max_reuse) must be >= 1".into()));
        }
        if let Some(pieces) = &self.schedule {
            if pieces.first().map(|p| p.0) != Some(0.0) {
                return Err(Error::Config("epsilon schedule must start at fraction 0".into()));
            }
            if pieces.windows(2).any(|w| !(w[1].0 > w[0].0)) || pieces.iter().any(|p| !(p.1 > 0.0)) {
                return Err(Error::Config("epsilon schedule needs increasing fractions and positive tolerances".into()));
            }
        }
        Ok(())
    }

    /// Tolerance in force at a given step fraction.
    pub fn epsilon_at(&self, step_fraction: f64) -> f64 {
        if let Some(pieces) = &self.schedule {
            return pieces
                .iter()
                .take_while(|(start, _)| *start <= step_fraction)
                .last()
                .map_or(self.epsilon, |p| p.1);
        }
        if step_fraction < self.guard_fraction {
            self.epsilon_guard
        } else {
            self.epsilon
        }
    }
}

/// Which terms of the sensitivity score a policy uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreKind {
    /// `alpha_x ||d|| + alpha_t |tau|`
    Full,
    /// `alpha_t |tau|` only (timestep-embedding proxy).
    TimestepOnly,
    /// `alpha_x ||d||` only (residual-magnitude proxy).
    LatentOnly,
}

impl ScoreKind {
    pub fn policy_name(&self) -> &'static str {
        match self {
            ScoreKind::Full => "sencache",
            ScoreKind::TimestepOnly => "teacache_like",
            ScoreKind::LatentOnly => "magcache_like",
        }
    }

    pub fn score(&self, alpha_x: f64, alpha_t: f64, d_norm: f64, tau_abs: f64) -> Result<f64> {
        let (ax, at) = match self {
            ScoreKind::Full => (alpha_x, alpha_t),
            ScoreKind::TimestepOnly => (0.0, alpha_t),
            ScoreKind::LatentOnly => (alpha_x, 0.0),
        };
        sensitivity_score(ax, at, d_norm, tau_abs)
    }
}

/// `S = alpha_x * d_norm + alpha_t * tau_abs`.
pub fn sensitivity_score(alpha_x: f64, alpha_t: f64, d_norm: f64, tau_abs: f64) -> Result<f64> {
    for (name, v) in [("alpha_x", alpha_x), ("alpha_t", alpha_t), ("d_norm", d_norm), ("tau_abs", tau_abs)] {
        if !(v >= 0.0) {
            return Err(Error::Domain(format!("{name} must be >= 0, got {v}")));
        }
    }
    Ok(alpha_x * d_norm + alpha_t * tau_abs)
}

/// Reference point and accumulators of the caching loop.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheState {
    pub x_ref: Array1<f64>,
    pub t_ref: f64,
    pub y_ref: Array1<f64>,
    pub d_accum: Array1<f64>,
    pub tau_accum: f64,
    pub reuse_count: usize,
    pub alpha_x: f64,
    pub alpha_t: f64,
}

impl CacheState {
    pub fn new(profile: &SensitivityProfile, x: ArrayView1<'_, f64>, t: f64, y: ArrayView1<'_, f64>) -> Result<Self> {
        let (alpha_x, alpha_t) = profile.lookup(t)?;
        Ok(Self {
            x_ref: x.to_owned(),
            t_ref: t,
            y_ref: y.to_owned(),
            d_accum: Array1::zeros(x.len()),
            tau_accum: 0.0,
            reuse_count: 0,
            alpha_x,
            alpha_t,
        })
    }

    /// New reference point after a fresh evaluation.
    pub fn refresh(&mut self, profile: &SensitivityProfile, x: ArrayView1<'_, f64>, t: f64, y: ArrayView1<'_, f64>) -> Result<()> {
        *self = Self::new(profile, x, t, y)?;
        Ok(())
    }
}

fn decide_with(
    kind: ScoreKind,
    state: &mut CacheState,
    config: &CachePolicyConfig,
    dx_step: ArrayView1<'_, f64>,
    dt_step: f64,
    step_fraction: f64,
) -> Result<Decision> {
    if !(dt_step < 0.0) {
        return Err(Error::Domain(format!("integration runs backward in time, got dt = {dt_step}")));
    }
    if dx_step.len() != state.d_accum.len() {
        return Err(Error::ShapeMismatch { expected: state.d_accum.len(), got: dx_step.len() });
    }
    state.d_accum += &dx_step;
    state.tau_accum += dt_step;
    let d_norm = state.d_accum.dot(&state.d_accum).sqrt();
    let score = kind.score(state.alpha_x, state.alpha_t, d_norm, state.tau_accum.abs())?;
    let epsilon = config.epsilon_at(step_fraction);
    let hit = score <= epsilon && state.reuse_count < config.max_reuse;
    if hit {
        state.reuse_count += 1;
    }
    Ok(Decision { hit, score: Some(score), epsilon: Some(epsilon) })
}

/// Accumulates the step into `state` and applies the full-score rule. On a
/// miss the caller evaluates the field and calls [`CacheState::refresh`].
pub fn sencache_decide(
    state: &mut CacheState,
    config: &CachePolicyConfig,
    dx_step: ArrayView1<'_, f64>,
    dt_step: f64,
    step_fraction: f64,
) -> Result<Decision> {
    decide_with(ScoreKind::Full, state, config, dx_step, dt_step, step_fraction)
}

/// Same rule with the timestep term only; blind to latent drift.
pub fn teacache_like_decide(
    state: &mut CacheState,
    config: &CachePolicyConfig,
    dx_step: ArrayView1<'_, f64>,
    dt_step: f64,
    step_fraction: f64,
) -> Result<Decision> {
    decide_with(ScoreKind::TimestepOnly, state, config, dx_step, dt_step, step_fraction)
}

/// Same rule with the latent term only; blind to the timestep gap.
pub fn magcache_like_decide(
    state: &mut CacheState,
    config: &CachePolicyConfig,
    dx_step: ArrayView1<'_, f64>,
    dt_step: f64,
    step_fraction: f64,
) -> Result<Decision> {
    decide_with(ScoreKind::LatentOnly, state, config, dx_step, dt_step, step_fraction)
}

/// Score-driven policy backed by a calibrated profile.
#[derive(Debug, Clone)]
pub struct SensitivityPolicy {
    kind: ScoreKind,
    config: CachePolicyConfig,
    profile: Arc<SensitivityProfile>,
    state: Option<CacheState>,
}

impl SensitivityPolicy {
    pub fn new(kind: ScoreKind, config: CachePolicyConfig, profile: Option<Arc<SensitivityProfile>>) -> Result<Self> {
        config.validate()?;
        let profile = profile.ok_or_else(|| {
            Error::Config(format!("policy `{}` requires a sensitivity profile", kind.policy_name()))
        })?;
        if profile.is_empty() {
            return Err(Error::EmptyProfile);
        }
        Ok(Self { kind, config, profile, state: None })
    }

    pub fn state(&self) -> Option<&CacheState> {
        self.state.as_ref()
    }
}

impl CachePolicy for SensitivityPolicy {
    fn name(&self) -> &str {
        self.kind.policy_name()
    }

    fn refresh(&mut self, x: ArrayView1<'_, f64>, t: f64, y: ArrayView1<'_, f64>) -> Result<()> {
        match &mut self.state {
            Some(state) => state.refresh(&self.profile, x, t, y),
            None => {
                self.state = Some(CacheState::new(&self.profile, x, t, y)?);
                Ok(())
            }
        }
    }

    fn decide(&mut self, step: &StepContext<'_>) -> Result<Decision> {
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::Precondition("decide called before the first evaluation".into()))?;
        decide_with(self.kind, state, &self.config, step.dx, step.dt, step.step_fraction())
    }
}

/// Evaluates every step.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeverCache;

impl CachePolicy for NeverCache {
    fn name(&self) -> &str {
        "none"
    }

    fn refresh(&mut self, _x: ArrayView1<'_, f64>, _t: f64, _y: ArrayView1<'_, f64>) -> Result<()> {
        Ok(())
    }

    fn decide(&mut self, _step: &StepContext<'_>) -> Result<Decision> {
        Ok(Decision::miss())
    }
}

/// Reuses whenever the reuse budget allows, ignoring the score.
#[derive(Debug, Clone)]
pub struct AlwaysCache {
    max_reuse: usize,
    reuse_count: usize,
}

impl AlwaysCache {
    pub fn new(max_reuse: usize) -> Result<Self> {
        if max_reuse == 0 {
            return Err(Error::Config("n (max_reuse) must be >= 1".into()));
        }
        Ok(Self { max_reuse, reuse_count: 0 })
    }
}

impl CachePolicy for AlwaysCache {
    fn name(&self) -> &str {
        "always"
    }

    fn refresh(&mut self, _x: ArrayView1<'_, f64>, _t: f64, _y: ArrayView1<'_, f64>) -> Result<()> {
        self.reuse_count = 0;
        Ok(())
    }

    fn decide(&mut self, _step: &StepContext<'_>) -> Result<Decision> {
        if self.reuse_count < self.max_reuse {
            self.reuse_count += 1;
            Ok(Decision::hit())
        } else {
            Ok(Decision::miss())
        }
    }
}

/// Evaluates at states whose index is a multiple of `keep_every` and reuses
/// elsewhere. The output at `t = 0` drives no step, so it is only evaluated
/// when every step is kept.
#[derive(Debug, Clone, Copy)]
pub struct UniformSkip {
    keep_every: usize,
}

pub fn uniform_skip_policy(keep_every: usize) -> Result<UniformSkip> {
    if keep_every == 0 {
        return Err(Error::Config("keep_every must be >= 1".into()));
    }
    Ok(UniformSkip { keep_every })
}

impl CachePolicy for UniformSkip {
    fn name(&self) -> &str {
        "uniform"
    }

    fn refresh(&mut self, _x: ArrayView1<'_, f64>, _t: f64, _y: ArrayView1<'_, f64>) -> Result<()> {
        Ok(())
    }

    fn decide(&mut self, step: &StepContext<'_>) -> Result<Decision> {
        let state_index = step.index + 1;
        let keep = if self.keep_every == 1 {
            true
        } else if state_index == step.steps {
            false
        } else {
            state_index % self.keep_every == 0
        };
        Ok(if keep { Decision::miss() } else { Decision::hit() })
    }
}

/// Replays a fixed hit mask, e.g. decisions made in teacher-forced mode.
#[derive(Debug, Clone)]
pub struct ReplayPolicy {
    decisions: Vec<Decision>,
}

impl ReplayPolicy {
    pub fn new(decisions: Vec<Decision>) -> Self {
        Self { decisions }
    }
}

impl CachePolicy for ReplayPolicy {
    fn name(&self) -> &str {
        "replay"
    }

    fn refresh(&mut self, _x: ArrayView1<'_, f64>, _t: f64, _y: ArrayView1<'_, f64>) -> Result<()> {
        Ok(())
    }

    fn decide(&mut self, step: &StepContext<'_>) -> Result<Decision> {
        if self.decisions.len() != step.steps {
            return Err(Error::ShapeMismatch { expected: step.steps, got: self.decisions.len() });
        }
        Ok(self.decisions[step.index])
    }
}

/// Buildable description of a policy; each run gets a fresh instance.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    None,
    Always { max_reuse: usize },
    Uniform { keep_every: usize },
    Score { kind: ScoreKind, config: CachePolicyConfig },
}

impl PolicySpec {
    pub fn sencache(config: CachePolicyConfig) -> Self {
        PolicySpec::Score { kind: ScoreKind::Full, config }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PolicySpec::None => "none",
            PolicySpec::Always { .. } => "always",
            PolicySpec::Uniform { .. } => "uniform",
            PolicySpec::Score { kind, .. } => kind.policy_name(),
        }
    }

    pub fn needs_profile(&self) -> bool {
        matches!(self, PolicySpec::Score { .. })
    }

    pub fn build(&self, profile: Option<&Arc<SensitivityProfile>>) -> Result<Box<dyn CachePolicy>> {
        Ok(match self {
            PolicySpec::None => Box::new(NeverCache),
            PolicySpec::Always { max_reuse } => Box::new(AlwaysCache::new(*max_reuse)?),
            PolicySpec::Uniform { keep_every } => Box::new(uniform_skip_policy(*keep_every)?),
            PolicySpec::Score { kind, config } => Box::new(SensitivityPolicy::new(*kind, config.clone(), profile.cloned())?),
        })
    }

    /// Same policy with a different base tolerance (no-op for score-free policies).
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        match self {
            PolicySpec::Score { kind, config } => PolicySpec::Score {
                kind: *kind,
                config: CachePolicyConfig { epsilon, ..config.clone() },
            },
            other => other.clone(),
        }
    }

    pub fn with_max_reuse(&self, max_reuse: usize) -> Self {
        match self {
            PolicySpec::Score { kind, config } => PolicySpec::Score {
                kind: *kind,
                config: CachePolicyConfig { max_reuse, ..config.clone() },
            },
            PolicySpec::Always { .. } => PolicySpec::Always { max_reuse },
            other => other.clone(),
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.policy_name())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sencache" => Ok(ScoreKind::Full),
            "teacache_like" => Ok(ScoreKind::TimestepOnly),
            "magcache_like" => Ok(ScoreKind::LatentOnly),
            other => Err(Error::Config(format!("unknown score policy `{other}`"))),
        }
    }
}

/// Per-transition scores `S_k` along a fully evaluated reference: actual
/// `dx_k`, `dt_k`, sensitivities looked up at the start of each transition.
pub fn transition_scores(reference: &Trajectory, profile: &SensitivityProfile, kind: ScoreKind) -> Result<Vec<f64>> {
    if !reference.is_fully_evaluated() {
        return Err(Error::Precondition("reference trajectory must be fully evaluated".into()));
    }
    reference
        .states
        .windows(2)
        .map(|w| {
            let (ax, at) = profile.lookup(w[0].t)?;
            let dx = &w[1].x - &w[0].x;
            kind.score(ax, at, dx.dot(&dx).sqrt(), (w[1].t - w[0].t).abs())
        })
        .collect()
}

/// Teacher-forced decisions: each transition is judged on its own frozen
/// score `S_k`, with the tolerance schedule and reuse cap applied as usual.
/// Because the scores do not depend on earlier decisions, hit sets nest as
/// the tolerance grows.
pub fn teacher_forced_decisions(scores: &[f64], config: &CachePolicyConfig) -> Result<Vec<Decision>> {
    config.validate()?;
    let steps = scores.len();
    let mut reuse = 0usize;
    Ok(scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let epsilon = config.epsilon_at(i as f64 / steps as f64);
            let hit = s <= epsilon && reuse < config.max_reuse;
            reuse = if hit { reuse + 1 } else { 0 };
            Decision { hit, score: Some(s), epsilon: Some(epsilon) }
        })
        .collect())
}

/// Indices (integration order, endpoints included) of a `budget`-step
/// sub-grid whose segments carry equal shares of the cumulative score.
pub fn plan_indices(scores: &[f64], budget: usize) -> Result<Vec<usize>> {
    let steps = scores.len();
    if budget < 2 {
        return Err(Error::Config(format!("plan budget must be >= 2, got {budget}")));
    }
    if budget > steps {
        return Err(Error::Config(format!("plan budget {budget} exceeds the {steps} available steps")));
    }
    if scores.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Domain("transition scores must be non-negative".into()));
    }
    let mut cumulative = Vec::with_capacity(steps + 1);
    cumulative.push(0.0);
    for s in scores {
        cumulative.push(cumulative.last().unwrap() + s);
    }
    let total = cumulative[steps];
    // Flat profile: fall back to equal-count selection.
    let mass = |j: usize| if total > 0.0 { cumulative[j] / total } else { j as f64 / steps as f64 };

    let mut indices = Vec::with_capacity(budget + 1);
    indices.push(0);
    for m in 1..budget {
        let target = m as f64 / budget as f64;
        let upper = (0..=steps).position(|j| mass(j) >= target).unwrap_or(steps);
        let nearest = if upper > 0 && target - mass(upper - 1) < mass(upper) - target {
            upper - 1
        } else {
            upper
        };
        let lo = indices.last().unwrap() + 1;
        let hi = steps - (budget - m);
        indices.push(nearest.clamp(lo, hi));
    }
    indices.push(steps);
    Ok(indices)
}

/// Static step planner: keeps `budget` of the reference's steps, spending
/// them where the reference accumulates sensitivity score.
pub fn plan_schedule(profile: &SensitivityProfile, reference: &Trajectory, budget: usize) -> Result<TimestepGrid> {
    let scores = transition_scores(reference, profile, ScoreKind::Full)?;
    let indices = plan_indices(&scores, budget)?;
    TimestepGrid::from_times(reference.times())?.select(&indices)
}

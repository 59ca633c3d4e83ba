//! Interpolation paths `x_t = alpha(t) x_0 + sigma(t) eps` between data (`t = 0`)
//! and noise (`t = T = 1`).

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Terminal time. Fixed; grids run from here down to zero.
pub const T_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ScheduleKind {
    /// `alpha = 1 - t`, `sigma = t` (rectified flow).
    #[default]
    Linear,
    /// `alpha = cos(pi t / 2)`, `sigma = sin(pi t / 2)`.
    Trigonometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct InterpolantSchedule {
    kind: ScheduleKind,
}

impl InterpolantSchedule {
    pub const fn new(kind: ScheduleKind) -> Self {
        Self { kind }
    }

    pub const fn linear() -> Self {
        Self::new(ScheduleKind::Linear)
    }

    pub const fn trigonometric() -> Self {
        Self::new(ScheduleKind::Trigonometric)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn terminal_time(&self) -> f64 {
        T_MAX
    }

    /// Short identifier, also the config-file spelling.
    pub fn id(&self) -> &'static str {
        match self.kind {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Trigonometric => "trig",
        }
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.alpha_unchecked(t))
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.sigma_unchecked(t))
    }

    pub fn alpha_dot(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.alpha_dot_unchecked(t))
    }

    pub fn sigma_dot(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.sigma_dot_unchecked(t))
    }

    pub(crate) fn alpha_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => 1.0 - t,
            // cos(pi/2) is not exactly zero in floating point; pin the boundary.
            ScheduleKind::Trigonometric if t == T_MAX => 0.0,
            ScheduleKind::Trigonometric => (FRAC_PI_2 * t).cos(),
        }
    }

    pub(crate) fn sigma_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => t,
            ScheduleKind::Trigonometric if t == T_MAX => 1.0,
            ScheduleKind::Trigonometric => (FRAC_PI_2 * t).sin(),
        }
    }

    pub(crate) fn alpha_dot_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => -1.0,
            ScheduleKind::Trigonometric => -FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
        }
    }

    pub(crate) fn sigma_dot_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => 1.0,
            ScheduleKind::Trigonometric => FRAC_PI_2 * (FRAC_PI_2 * t).cos(),
        }
    }

    /// Second derivatives, needed for exact time-Jacobians of analytic fields.
    pub(crate) fn alpha_ddot_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => 0.0,
            ScheduleKind::Trigonometric => -FRAC_PI_2 * FRAC_PI_2 * self.alpha_unchecked(t),
        }
    }

    pub(crate) fn sigma_ddot_unchecked(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => 0.0,
            ScheduleKind::Trigonometric => -FRAC_PI_2 * FRAC_PI_2 * self.sigma_unchecked(t),
        }
    }
}

impl fmt::Display for InterpolantSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for InterpolantSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::linear()),
            "trig" | "trigonometric" => Ok(Self::trigonometric()),
            other => Err(Error::Config(format!(
                "unknown schedule `{other}` (expected \"linear\" or \"trig\")"
            ))),
        }
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("time {t}")));
    }
    if !(0.0..=T_MAX).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, {T_MAX}]")));
    }
    Ok(())
}

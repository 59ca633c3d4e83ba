//! Velocity fields evaluated by the sampler.
//!
//! The analytic fields carry closed-form Jacobians in `x` and `t`, which serve
//! as oracles for the secant estimators in [`crate::sensitivity`].
//!
//! For Gaussian data `x_0 ~ N(mu, diag(s^2))` the per-coordinate posterior gives
//!
//! ```text
//! v(z, t) = alpha'(t) mu + c(t) (z - alpha(t) mu),
//! c(t)    = (alpha' alpha s^2 + sigma' sigma) / (alpha^2 s^2 + sigma^2)
//! ```
//!
//! so the field is affine in `z`. A mixture of such components weights the
//! per-component velocities by their posterior responsibilities.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::fingerprint::fingerprint;
use crate::schedule::{check_time, InterpolantSchedule};

/// Conditioning token. Inert for analytic fields; held fixed for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Condition(pub u64);

pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;

    /// Identifier stored alongside calibrated profiles.
    fn id(&self) -> String;

    fn condition(&self) -> Condition {
        Condition::default()
    }

    /// Noise path the field was derived from, if any.
    fn schedule(&self) -> Option<InterpolantSchedule> {
        None
    }

    /// Raw velocity, no input validation. Must be deterministic.
    fn velocity(&self, x: ArrayView1<'_, f64>, t: f64) -> Array1<f64>;

    fn evaluate(&self, x: ArrayView1<'_, f64>, t: f64) -> Result<Array1<f64>> {
        validate_input(self.dim(), x, t)?;
        Ok(self.velocity(x, t))
    }

    fn exact_jacobian_x(&self, _x: ArrayView1<'_, f64>, _t: f64) -> Result<Array2<f64>> {
        Err(Error::Unsupported(format!("{} has no x-Jacobian oracle", self.id())))
    }

    fn exact_jacobian_t(&self, _x: ArrayView1<'_, f64>, _t: f64) -> Result<Array1<f64>> {
        Err(Error::Unsupported(format!("{} has no t-Jacobian oracle", self.id())))
    }
}

pub(crate) fn validate_input(dim: usize, x: ArrayView1<'_, f64>, t: f64) -> Result<()> {
    if x.len() != dim {
        return Err(Error::ShapeMismatch { expected: dim, got: x.len() });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("field input".into()));
    }
    check_time(t)
}

/// Per-coordinate posterior coefficient `c(t)` and its time derivative.
#[derive(Debug, Clone, Copy)]
struct Coefficient {
    value: f64,
    derivative: f64,
}

#[derive(Debug, Clone, Copy)]
struct ScheduleAt {
    a: f64,
    s: f64,
    da: f64,
    ds: f64,
    dda: f64,
    dds: f64,
}

impl ScheduleAt {
    fn new(schedule: &InterpolantSchedule, t: f64) -> Self {
        Self {
            a: schedule.alpha_unchecked(t),
            s: schedule.sigma_unchecked(t),
            da: schedule.alpha_dot_unchecked(t),
            ds: schedule.sigma_dot_unchecked(t),
            dda: schedule.alpha_ddot_unchecked(t),
            dds: schedule.sigma_ddot_unchecked(t),
        }
    }

    /// Marginal variance of `x_t` for a coordinate with data variance `var`.
    fn marginal_var(&self, var: f64) -> f64 {
        self.a * self.a * var + self.s * self.s
    }

    fn marginal_var_dot(&self, var: f64) -> f64 {
        2.0 * (self.a * self.da * var + self.s * self.ds)
    }

    fn coefficient(&self, var: f64) -> Coefficient {
        let num = self.da * self.a * var + self.ds * self.s;
        let num_dot = (self.dda * self.a + self.da * self.da) * var + self.dds * self.s + self.ds * self.ds;
        let den = self.marginal_var(var);
        let den_dot = self.marginal_var_dot(var);
        Coefficient {
            value: num / den,
            derivative: (num_dot * den - num * den_dot) / (den * den),
        }
    }
}

/// Gaussian data with diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField {
    mean: Array1<f64>,
    var: Array1<f64>,
    schedule: InterpolantSchedule,
}

impl GaussianField {
    pub fn new(mean: Vec<f64>, var: Vec<f64>, schedule: InterpolantSchedule) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::Config("gaussian field needs dimension >= 1".into()));
        }
        if mean.len() != var.len() {
            return Err(Error::ShapeMismatch { expected: mean.len(), got: var.len() });
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("gaussian mean must be finite".into()));
        }
        if var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("gaussian covariance entries must be positive".into()));
        }
        Ok(Self {
            mean: Array1::from(mean),
            var: Array1::from(var),
            schedule,
        })
    }

    /// Zero-mean, identity-covariance data.
    pub fn standard(dim: usize, schedule: InterpolantSchedule) -> Self {
        Self::new(vec![0.0; dim], vec![1.0; dim], schedule).expect("standard field is valid")
    }

    pub fn mean(&self) -> ArrayView1<'_, f64> {
        self.mean.view()
    }

    pub fn variance(&self) -> ArrayView1<'_, f64> {
        self.var.view()
    }

    /// Diagonal of the x-Jacobian, `c_i(t)`.
    pub fn coefficients(&self, t: f64) -> Array1<f64> {
        let at = ScheduleAt::new(&self.schedule, t);
        self.var.mapv(|v| at.coefficient(v).value)
    }

    /// Operator (spectral) norm of the x-Jacobian: `max_i |c_i(t)|`.
    pub fn jacobian_x_operator_norm(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.coefficients(t).iter().fold(0.0_f64, |m, c| m.max(c.abs())))
    }
}

impl VelocityField for GaussianField {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn schedule(&self) -> Option<InterpolantSchedule> {
        Some(self.schedule)
    }

    fn id(&self) -> String {
        let params = self.mean.iter().chain(self.var.iter()).copied();
        format!("gaussian-{}-{}", self.schedule.id(), fingerprint("gaussian", params))
    }

    fn velocity(&self, x: ArrayView1<'_, f64>, t: f64) -> Array1<f64> {
        let at = ScheduleAt::new(&self.schedule, t);
        let mut out = Array1::zeros(x.len());
        for i in 0..x.len() {
            let c = at.coefficient(self.var[i]).value;
            out[i] = at.da * self.mean[i] + c * (x[i] - at.a * self.mean[i]);
        }
        out
    }

    fn exact_jacobian_x(&self, x: ArrayView1<'_, f64>, t: f64) -> Result<Array2<f64>> {
        validate_input(self.dim(), x, t)?;
        Ok(Array2::from_diag(&self.coefficients(t)))
    }

    fn exact_jacobian_t(&self, x: ArrayView1<'_, f64>, t: f64) -> Result<Array1<f64>> {
        validate_input(self.dim(), x, t)?;
        let at = ScheduleAt::new(&self.schedule, t);
        let mut out = Array1::zeros(x.len());
        for i in 0..x.len() {
            let c = at.coefficient(self.var[i]);
            let mu = self.mean[i];
            out[i] = at.dda * mu + c.derivative * (x[i] - at.a * mu) - c.value * at.da * mu;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-component quantities at a fixed `(z, t)`.
struct ComponentTerms {
    log_lik: f64,
    velocity: Array1<f64>,
    /// d log N / dz
    score: Array1<f64>,
    /// d log N / dt at fixed z
    time_score: f64,
}

/// Mixture of diagonal Gaussians. Nonlinear in `x` through the responsibilities.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureField {
    components: Vec<GaussianField>,
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    schedule: InterpolantSchedule,
}

impl GaussianMixtureField {
    pub fn new(components: Vec<MixtureComponent>, schedule: InterpolantSchedule) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::Config("mixture needs at least one component".into()));
        };
        let dim = first.mean.len();
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        let mut fields = Vec::with_capacity(components.len());
        let mut weights = Vec::with_capacity(components.len());
        for c in components {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::Config("mixture weights must be positive".into()));
            }
            if c.mean.len() != dim {
                return Err(Error::ShapeMismatch { expected: dim, got: c.mean.len() });
            }
            weights.push(c.weight);
            fields.push(GaussianField::new(c.mean, c.var, schedule)?);
        }
        Ok(Self {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            components: fields,
            schedule,
        })
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn terms(&self, z: ArrayView1<'_, f64>, t: f64) -> Vec<ComponentTerms> {
        let at = ScheduleAt::new(&self.schedule, t);
        self.components
            .iter()
            .zip(&self.log_weights)
            .map(|(comp, log_w)| {
                let mut log_lik = *log_w;
                let mut score = Array1::zeros(z.len());
                let mut time_score = 0.0;
                for i in 0..z.len() {
                    let mu = comp.mean[i];
                    let var = comp.var[i];
                    let d = at.marginal_var(var);
                    let d_dot = at.marginal_var_dot(var);
                    let r = z[i] - at.a * mu;
                    log_lik -= 0.5 * ((2.0 * std::f64::consts::PI * d).ln() + r * r / d);
                    score[i] = -r / d;
                    time_score += -0.5 * d_dot / d + r * at.da * mu / d + 0.5 * r * r * d_dot / (d * d);
                }
                ComponentTerms {
                    log_lik,
                    velocity: comp.velocity(z, t),
                    score,
                    time_score,
                }
            })
            .collect()
    }

    /// Posterior responsibilities of the components for `x_t = z`.
    pub fn responsibilities(&self, z: ArrayView1<'_, f64>, t: f64) -> Vec<f64> {
        let logs: Vec<f64> = self.terms(z, t).iter().map(|c| c.log_lik).collect();
        softmax(&logs)
    }
}

/// Max-subtracted normalized exponential.
pub(crate) fn softmax(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl VelocityField for GaussianMixtureField {
    fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn schedule(&self) -> Option<InterpolantSchedule> {
        Some(self.schedule)
    }

    fn id(&self) -> String {
        let params = self.components.iter().zip(&self.weights).flat_map(|(c, w)| {
            std::iter::once(*w)
                .chain(c.mean.iter().copied())
                .chain(c.var.iter().copied())
        });
        format!(
            "mixture{}-{}-{}",
            self.components.len(),
            self.schedule.id(),
            fingerprint("mixture", params.collect::<Vec<_>>())
        )
    }

    fn velocity(&self, x: ArrayView1<'_, f64>, t: f64) -> Array1<f64> {
        let terms = self.terms(x, t);
        let logs: Vec<f64> = terms.iter().map(|c| c.log_lik).collect();
        let resp = softmax(&logs);
        let mut out = Array1::zeros(x.len());
        for (r, c) in resp.iter().zip(&terms) {
            out.scaled_add(*r, &c.velocity);
        }
        out
    }

    fn exact_jacobian_x(&self, x: ArrayView1<'_, f64>, t: f64) -> Result<Array2<f64>> {
        validate_input(self.dim(), x, t)?;
        let d = x.len();
        let terms = self.terms(x, t);
        let logs: Vec<f64> = terms.iter().map(|c| c.log_lik).collect();
        let resp = softmax(&logs);
        let mut mean_score = Array1::<f64>::zeros(d);
        for (r, c) in resp.iter().zip(&terms) {
            mean_score.scaled_add(*r, &c.score);
        }
        // J = sum_j r_j diag(c_j) + sum_j r_j v_j (g_j - g_bar)^T
        let mut jac = Array2::<f64>::zeros((d, d));
        for ((r, c), comp) in resp.iter().zip(&terms).zip(&self.components) {
            let coeffs = comp.coefficients(t);
            for i in 0..d {
                jac[[i, i]] += r * coeffs[i];
                for k in 0..d {
                    jac[[i, k]] += r * c.velocity[i] * (c.score[k] - mean_score[k]);
                }
            }
        }
        Ok(jac)
    }

    fn exact_jacobian_t(&self, x: ArrayView1<'_, f64>, t: f64) -> Result<Array1<f64>> {
        validate_input(self.dim(), x, t)?;
        let terms = self.terms(x, t);
        let logs: Vec<f64> = terms.iter().map(|c| c.log_lik).collect();
        let resp = softmax(&logs);
        let mean_time_score: f64 = resp.iter().zip(&terms).map(|(r, c)| r * c.time_score).sum();
        let mut out = Array1::<f64>::zeros(x.len());
        for ((r, c), comp) in resp.iter().zip(&terms).zip(&self.components) {
            let dv = comp.exact_jacobian_t(x, t)?;
            out.scaled_add(*r, &dv);
            out.scaled_add(r * (c.time_score - mean_time_score), &c.velocity);
        }
        Ok(out)
    }
}

/// `v(x, t) = a sin(w t) x + a cos(w t) 1`.
///
/// Not derived from any data distribution; used to produce profiles in which
/// the time term of the score dominates over parts of the trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct StiffSyntheticField {
    omega: f64,
    amplitude: f64,
    dim: usize,
}

impl StiffSyntheticField {
    pub fn new(omega: f64, amplitude: f64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("stiff field needs dimension >= 1".into()));
        }
        if !omega.is_finite() || !amplitude.is_finite() {
            return Err(Error::Config("stiff field parameters must be finite".into()));
        }
        Ok(Self { omega, amplitude, dim })
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }
}

impl VelocityField for StiffSyntheticField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        format!(
            "stiff-{}",
            fingerprint("stiff", [self.omega, self.amplitude, self.dim as f64])
        )
    }

    fn velocity(&self, x: ArrayView1<'_, f64>, t: f64) -> Array1<f64> {
        let (s, c) = (self.omega * t).sin_cos();
        x.mapv(|xi| self.amplitude * (s * xi + c))
    }

    fn exact_jacobian_x(&self, x: ArrayView1<'_, f64>, t: f64) -> Result<Array2<f64>> {
        validate_input(self.dim, x, t)?;
        let s = (self.omega * t).sin();
        Ok(Array2::from_diag_elem(self.dim, self.amplitude * s))
    }

    fn exact_jacobian_t(&self, x: ArrayView1<'_, f64>, t: f64) -> Result<Array1<f64>> {
        validate_input(self.dim, x, t)?;
        let (s, c) = (self.omega * t).sin_cos();
        let aw = self.amplitude * self.omega;
        Ok(x.mapv(|xi| aw * (c * xi - s)))
    }
}

/// Field independent of both `x` and `t`. `ConstantField::zeros(d)` is the
/// zero-velocity field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField {
    value: Array1<f64>,
}

impl ConstantField {
    pub fn new(value: Vec<f64>) -> Result<Self> {
        if value.is_empty() || value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("constant field needs finite values, dimension >= 1".into()));
        }
        Ok(Self { value: Array1::from(value) })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { value: Array1::zeros(dim) }
    }
}

impl VelocityField for ConstantField {
    fn dim(&self) -> usize {
        self.value.len()
    }

    fn id(&self) -> String {
        format!("constant-{}", fingerprint("constant", self.value.iter().copied()))
    }

    fn velocity(&self, _x: ArrayView1<'_, f64>, _t: f64) -> Array1<f64> {
        self.value.clone()
    }

    fn exact_jacobian_x(&self, x: ArrayView1<'_, f64>, t: f64) -> Result<Array2<f64>> {
        validate_input(self.dim(), x, t)?;
        Ok(Array2::zeros((self.dim(), self.dim())))
    }

    fn exact_jacobian_t(&self, x: ArrayView1<'_, f64>, t: f64) -> Result<Array1<f64>> {
        validate_input(self.dim(), x, t)?;
        Ok(Array1::zeros(self.dim()))
    }
}

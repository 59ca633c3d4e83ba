//! Run configuration: a TOML file with top-level keys plus `[field]`,
//! `[grid]`, `[policy]`, `[calibration]`, `[sweep]`, `[plan]`,
//! `[diagnose.fields.<name>]` and `[output]` sections.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sencache::sensitivity::Aggregation;
use sencache::{
    CachePolicyConfig, CalibrationConfig, ConstantField, Error, GaussianField, GaussianMixtureField,
    InterpolantSchedule, MixtureComponent, PolicySpec, ScoreKind, StiffSyntheticField, TimestepGrid, VelocityField,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schedule")]
    pub schedule: String,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub field: FieldSpec,
    pub grid: GridSpec,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_schedule() -> String {
    "linear".into()
}

/// Analytic velocity field. Numeric lists shorter than `dim` are repeated
/// cyclically; their length must divide `dim`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub family: String,
    pub dim: Option<usize>,
    // gaussian
    pub mean: Option<Vec<f64>>,
    #[serde(alias = "var")]
    pub cov: Option<Vec<f64>>,
    // mixture
    pub weights: Option<Vec<f64>>,
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(alias = "vars")]
    pub covs: Option<Vec<Vec<f64>>>,
    // stiff
    pub omega: Option<f64>,
    pub amplitude: Option<f64>,
    // constant
    pub value: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub steps: Option<usize>,
    pub times: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub policy: String,
    pub epsilon: f64,
    pub epsilon_guard: f64,
    pub guard_fraction: f64,
    pub n: usize,
    pub keep_every: usize,
    /// `adaptive` or `teacher_forced`.
    pub mode: String,
    /// Optional `[[start_fraction, epsilon], ...]` tolerance schedule.
    pub epsilon_schedule: Option<Vec<[f64; 2]>>,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            policy: "sencache".into(),
            epsilon: 0.05,
            epsilon_guard: CachePolicyConfig::DEFAULT_EPSILON_GUARD,
            guard_fraction: CachePolicyConfig::DEFAULT_GUARD_FRACTION,
            n: 3,
            keep_every: 2,
            mode: "adaptive".into(),
            epsilon_schedule: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub samples: usize,
    pub seed: u64,
    pub perturbation_scale: f64,
    pub dt_probe: Option<f64>,
    pub aggregation: String,
    /// Load this profile instead of calibrating. Relative paths resolve
    /// against the config file.
    pub profile: Option<PathBuf>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let base = CalibrationConfig::default();
        Self {
            samples: base.num_samples,
            seed: base.seed,
            perturbation_scale: base.perturbation_scale,
            dt_probe: base.dt_probe,
            aggregation: base.aggregation.id().into(),
            profile: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: Option<String>,
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub budget: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseSection {
    /// Extra fields compared against `[field]`, keyed by label.
    #[serde(default)]
    pub fields: BTreeMap<String, FieldSpec>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Also write per-seed trajectory CSVs from `sample`.
    #[serde(default)]
    pub trajectories: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Adaptive,
    TeacherForced,
}

/// Config file parsed, validated and resolved into library objects.
pub struct Loaded {
    pub raw: RunConfig,
    pub dir: PathBuf,
    pub hash: String,
    pub schedule: InterpolantSchedule,
    pub field: Box<dyn VelocityField>,
    pub grid: TimestepGrid,
    pub policy: PolicySpec,
    pub mode: Mode,
    pub calibration: CalibrationConfig,
}

impl Loaded {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let raw: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::resolve(raw, dir)?)
    }

    fn resolve(raw: RunConfig, dir: PathBuf) -> sencache::Result<Self> {
        let schedule: InterpolantSchedule = raw.schedule.parse()?;
        let field = build_field(&raw.field, schedule, "field")?;
        let grid = build_grid(&raw.grid)?;
        let policy = build_policy(&raw.policy)?;
        let mode = match raw.policy.mode.as_str() {
            "adaptive" => Mode::Adaptive,
            "teacher_forced" => Mode::TeacherForced,
            other => return Err(Error::Config(format!("policy.mode must be `adaptive` or `teacher_forced`, got `{other}`"))),
        };
        let c = &raw.calibration;
        let calibration = CalibrationConfig {
            num_samples: c.samples,
            seed: c.seed,
            perturbation_scale: c.perturbation_scale,
            dt_probe: c.dt_probe,
            aggregation: c.aggregation.parse::<Aggregation>()?,
        };
        calibration.validate(&grid)?;
        for (label, spec) in &raw.diagnose.fields {
            build_field(spec, schedule, &format!("diagnose.fields.{label}"))?;
        }
        let hash = config_hash(&raw);
        Ok(Self { raw, dir, hash, schedule, field, grid, policy, mode, calibration })
    }

    pub fn profile_path(&self) -> Option<PathBuf> {
        self.raw.calibration.profile.as_ref().map(|p| if p.is_absolute() { p.clone() } else { self.dir.join(p) })
    }

    pub fn diagnose_fields(&self) -> sencache::Result<Vec<(String, Box<dyn VelocityField>)>> {
        let mut out = vec![("field".to_string(), build_field(&self.raw.field, self.schedule, "field")?)];
        for (label, spec) in &self.raw.diagnose.fields {
            out.push((label.clone(), build_field(spec, self.schedule, &format!("diagnose.fields.{label}"))?));
        }
        Ok(out)
    }
}

/// 16 hex digits of SHA-256 over the experiment-defining part of the
/// config. Seeds and output location are excluded so a config keeps one
/// hash across seed lists.
fn config_hash(raw: &RunConfig) -> String {
    let canonical = RunConfig { seeds: Vec::new(), out: None, ..raw.clone() };
    let text = toml::to_string(&canonical).expect("config serializes");
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

fn missing(section: &str, key: &str, family: &str) -> Error {
    Error::Config(format!("missing key `{section}.{key}` (required for family `{family}`)"))
}

fn tile(values: &[f64], dim: usize, what: &str) -> sencache::Result<Vec<f64>> {
    if values.is_empty() || dim % values.len() != 0 {
        return Err(Error::Config(format!("`{what}` has {} entries, which does not divide dim {dim}", values.len())));
    }
    Ok((0..dim).map(|i| values[i % values.len()]).collect())
}

pub fn build_field(spec: &FieldSpec, schedule: InterpolantSchedule, section: &str) -> sencache::Result<Box<dyn VelocityField>> {
    let family = spec.family.as_str();
    let need_dim = || spec.dim.ok_or_else(|| missing(section, "dim", family));
    Ok(match family {
        "gaussian" => {
            let mean = spec.mean.as_ref().ok_or_else(|| missing(section, "mean", family))?;
            let cov = spec.cov.as_ref().ok_or_else(|| missing(section, "cov", family))?;
            let dim = spec.dim.unwrap_or(mean.len());
            Box::new(GaussianField::new(tile(mean, dim, "mean")?, tile(cov, dim, "cov")?, schedule)?)
        }
        "mixture" => {
            let dim = need_dim()?;
            let weights = spec.weights.as_ref().ok_or_else(|| missing(section, "weights", family))?;
            let means = spec.means.as_ref().ok_or_else(|| missing(section, "means", family))?;
            let covs = spec.covs.as_ref().ok_or_else(|| missing(section, "covs", family))?;
            if means.len() != weights.len() || covs.len() != weights.len() {
                return Err(Error::Config(format!(
                    "{section}: {} weights, {} means and {} covs must match",
                    weights.len(),
                    means.len(),
                    covs.len()
                )));
            }
            let components = weights
                .iter()
                .zip(means.iter().zip(covs))
                .map(|(&weight, (m, c))| Ok(MixtureComponent { weight, mean: tile(m, dim, "means")?, var: tile(c, dim, "covs")? }))
                .collect::<sencache::Result<Vec<_>>>()?;
            Box::new(GaussianMixtureField::new(components, schedule)?)
        }
        "stiff" => {
            let omega = spec.omega.ok_or_else(|| missing(section, "omega", family))?;
            let amplitude = spec.amplitude.ok_or_else(|| missing(section, "amplitude", family))?;
            Box::new(StiffSyntheticField::new(omega, amplitude, need_dim()?)?)
        }
        "constant" => {
            let value = spec.value.as_ref().ok_or_else(|| missing(section, "value", family))?;
            let dim = spec.dim.unwrap_or(value.len());
            Box::new(ConstantField::new(tile(value, dim, "value")?)?)
        }
        "zero" => Box::new(ConstantField::zeros(need_dim()?)),
        other => {
            return Err(Error::Config(format!(
                "{section}.family must be gaussian, mixture, stiff, constant or zero, got `{other}`"
            )))
        }
    })
}

fn build_grid(spec: &GridSpec) -> sencache::Result<TimestepGrid> {
    match (spec.steps, &spec.times) {
        (Some(k), None) => TimestepGrid::uniform(k),
        (None, Some(times)) => TimestepGrid::from_times(times.clone()),
        (Some(_), Some(_)) => Err(Error::Config("grid: give either `steps` or `times`, not both".into())),
        (None, None) => Err(Error::Config("missing key `grid.steps` (or `grid.times`)".into())),
    }
}

fn build_policy(p: &PolicySection) -> sencache::Result<PolicySpec> {
    let spec = match p.policy.as_str() {
        "none" => PolicySpec::None,
        "uniform" => {
            if p.keep_every == 0 {
                return Err(Error::Config("policy.keep_every must be >= 1".into()));
            }
            PolicySpec::Uniform { keep_every: p.keep_every }
        }
        name => {
            let kind: ScoreKind = name.parse().map_err(|_| {
                Error::Config(format!(
                    "policy.policy must be sencache, teacache_like, magcache_like, uniform or none, got `{name}`"
                ))
            })?;
            let mut config = CachePolicyConfig::new(p.epsilon, p.n).with_guard(p.epsilon_guard, p.guard_fraction);
            config.schedule = p.epsilon_schedule.as_ref().map(|s| s.iter().map(|[a, b]| (*a, *b)).collect());
            config.validate()?;
            PolicySpec::Score { kind, config }
        }
    };
    Ok(spec)
}

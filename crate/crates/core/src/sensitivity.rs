//! Secant estimates of `||J_x||` and `||J_t||`, calibration of per-timestep
//! sensitivity profiles, and their on-disk format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::rng::derive_seed;
use crate::sampler::{sample_reference, TimestepGrid};
use crate::schedule::check_time;

fn l2(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// `||f(x + dx, t) - f(x, t)|| / ||dx||`.
pub fn estimate_jx(field: &dyn VelocityField, x: ArrayView1<'_, f64>, t: f64, dx: ArrayView1<'_, f64>) -> Result<f64> {
    let norm = l2(dx);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Domain(format!("x-probe norm must be positive and finite, got {norm}")));
    }
    let shifted = &x + &dx;
    let base = field.evaluate(x, t)?;
    let moved = field.evaluate(shifted.view(), t)?;
    Ok(l2((&moved - &base).view()) / norm)
}

/// `||f(x, t + dt) - f(x, t)|| / |dt|`.
pub fn estimate_jt(field: &dyn VelocityField, x: ArrayView1<'_, f64>, t: f64, dt: f64) -> Result<f64> {
    if dt == 0.0 || !dt.is_finite() {
        return Err(Error::Domain(format!("time probe must be nonzero and finite, got {dt}")));
    }
    check_time(t)?;
    check_time(t + dt)?;
    let base = field.evaluate(x, t)?;
    let moved = field.evaluate(x, t + dt)?;
    Ok(l2((&moved - &base).view()) / dt.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Mean,
    /// Conservative: worst case over calibration samples.
    Max,
}

impl Aggregation {
    pub fn id(&self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::Max => "max",
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationConfig {
    pub num_samples: usize,
    pub seed: u64,
    /// `||dx||` as a fraction of the Euler step length.
    pub perturbation_scale: f64,
    /// `|dt|` of the time probe. `None` means a quarter of the smallest grid
    /// spacing.
    pub dt_probe: Option<f64>,
    pub aggregation: Aggregation,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            num_samples: 8,
            seed: 0,
            perturbation_scale: 0.1,
            dt_probe: None,
            aggregation: Aggregation::Mean,
        }
    }
}

impl CalibrationConfig {
    pub fn with_samples(num_samples: usize, seed: u64) -> Self {
        Self { num_samples, seed, ..Self::default() }
    }

    pub fn resolved_dt_probe(&self, grid: &TimestepGrid) -> f64 {
        self.dt_probe.unwrap_or(0.25 * grid.min_spacing())
    }

    pub fn validate(&self, grid: &TimestepGrid) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Config("calibration needs at least one sample".into()));
        }
        if !(self.perturbation_scale > 0.0 && self.perturbation_scale.is_finite()) {
            return Err(Error::Config("perturbation_scale must be positive".into()));
        }
        let probe = self.resolved_dt_probe(grid);
        if !(probe > 0.0 && probe < grid.min_spacing()) {
            return Err(Error::Config(format!(
                "dt_probe {probe} must be positive and below the grid spacing {}",
                grid.min_spacing()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileEntry {
    pub t: f64,
    pub alpha_x: f64,
    pub alpha_t: f64,
    pub samples: usize,
}

/// Calibrated `(||J_x||, ||J_t||)` per grid time, in decreasing `t`. Every
/// grid time except `t = 0` has an entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityProfile {
    pub entries: Vec<ProfileEntry>,
    pub field_id: String,
    pub schedule_id: String,
    pub grid_hash: String,
    /// Free-form calibration settings, persisted in the sidecar.
    pub meta: BTreeMap<String, String>,
}

impl SensitivityProfile {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Entry at the grid time nearest `t_ref`. Ties go to the larger `t`;
    /// queries outside the table clamp to the boundary entry.
    pub fn lookup(&self, t_ref: f64) -> Result<(f64, f64)> {
        let entry = self.lookup_entry(t_ref)?;
        Ok((entry.alpha_x, entry.alpha_t))
    }

    pub fn lookup_entry(&self, t_ref: f64) -> Result<&ProfileEntry> {
        if self.entries.is_empty() {
            return Err(Error::EmptyProfile);
        }
        if t_ref.is_nan() {
            return Err(Error::NonFinite("lookup time".into()));
        }
        // first index whose t is <= t_ref (entries are decreasing)
        let idx = self.entries.partition_point(|e| e.t > t_ref);
        let entry = if idx == 0 {
            &self.entries[0]
        } else if idx == self.entries.len() {
            &self.entries[idx - 1]
        } else {
            let above = &self.entries[idx - 1];
            let below = &self.entries[idx];
            if above.t - t_ref <= t_ref - below.t {
                above
            } else {
                below
            }
        };
        Ok(entry)
    }

    /// Fails unless the profile was calibrated on `grid`.
    pub fn check_grid(&self, grid: &TimestepGrid) -> Result<()> {
        if self.grid_hash != grid.fingerprint() {
            return Err(Error::GridMismatch(format!(
                "profile calibrated on grid {} but run uses grid {}",
                self.grid_hash,
                grid.fingerprint()
            )));
        }
        Ok(())
    }

    /// Largest `|a - b| / |b|` over both columns, against `baseline`.
    pub fn max_relative_deviation(&self, baseline: &SensitivityProfile) -> Result<f64> {
        if self.entries.len() != baseline.entries.len() {
            return Err(Error::ShapeMismatch { expected: baseline.entries.len(), got: self.entries.len() });
        }
        let rel = |a: f64, b: f64| if b == 0.0 { if a == 0.0 { 0.0 } else { f64::INFINITY } } else { (a - b).abs() / b.abs() };
        Ok(self
            .entries
            .iter()
            .zip(&baseline.entries)
            .map(|(a, b)| rel(a.alpha_x, b.alpha_x).max(rel(a.alpha_t, b.alpha_t)))
            .fold(0.0, f64::max))
    }

    pub const CSV_HEADER: &'static str = "t,alpha_x,alpha_t,samples";

    /// Table in the fixed interchange format: 17 significant digits, one row
    /// per grid time in decreasing `t`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.entries {
            let _ = writeln!(out, "{:.16e},{:.16e},{:.16e},{}", e.t, e.alpha_x, e.alpha_t, e.samples);
        }
        out
    }

    pub fn metadata_block(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "field_id={}", self.field_id);
        let _ = writeln!(out, "schedule_id={}", self.schedule_id);
        let _ = writeln!(out, "grid_hash={}", self.grid_hash);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        let mut name = csv_path.as_os_str().to_owned();
        name.push(".meta");
        PathBuf::from(name)
    }

    pub fn save(&self, csv_path: &Path) -> Result<()> {
        fs::write(csv_path, self.to_csv())?;
        fs::write(Self::sidecar_path(csv_path), self.metadata_block())?;
        Ok(())
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let table = fs::read_to_string(csv_path)?;
        let meta = fs::read_to_string(Self::sidecar_path(csv_path))?;
        Self::parse(&table, &meta)
    }

    pub fn parse(table: &str, metadata: &str) -> Result<Self> {
        let mut lines = table.lines();
        match lines.next() {
            Some(h) if h.trim() == Self::CSV_HEADER => {}
            other => return Err(Error::Parse(format!("bad profile header {other:?}"))),
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(Error::Parse(format!("profile row {}: expected 4 columns", n + 1)));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("profile row {}: {e}", n + 1)));
            let entry = ProfileEntry {
                t: num(cols[0])?,
                alpha_x: num(cols[1])?,
                alpha_t: num(cols[2])?,
                samples: cols[3].trim().parse().map_err(|e| Error::Parse(format!("profile row {}: {e}", n + 1)))?,
            };
            if !(entry.alpha_x >= 0.0 && entry.alpha_t >= 0.0) {
                return Err(Error::Parse(format!("profile row {}: negative sensitivity", n + 1)));
            }
            entries.push(entry);
        }
        if entries.windows(2).any(|w| !(w[1].t < w[0].t)) {
            return Err(Error::Parse("profile times must be strictly decreasing".into()));
        }
        let mut meta = BTreeMap::new();
        for line in metadata.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad metadata line `{line}`")))?;
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |key: &str| meta.remove(key).ok_or_else(|| Error::Parse(format!("metadata missing `{key}`")));
        Ok(Self {
            field_id: take("field_id")?,
            schedule_id: take("schedule_id")?,
            grid_hash: take("grid_hash")?,
            entries,
            meta,
        })
    }
}

/// Per-sample `(alpha_x, alpha_t)` rows, one per grid time except `t = 0`.
fn calibrate_sample(
    field: &dyn VelocityField,
    grid: &TimestepGrid,
    config: &CalibrationConfig,
    dt_probe: f64,
    sample: usize,
) -> Result<Vec<(f64, f64)>> {
    let seed = derive_seed(config.seed, sample as u64);
    let traj = sample_reference(field, grid, seed).map_err(|e| match e {
        Error::Diverged { step } => Error::CalibrationDiverged { sample, step },
        other => other,
    })?;
    let dim = field.dim();
    traj.states
        .windows(2)
        .map(|w| {
            let (cur, next) = (&w[0], &w[1]);
            let step = &cur.velocity * (next.t - cur.t);
            let step_norm = l2(step.view());
            // A stalled solver has no step direction; probe along the
            // diagonal with the same relative size instead.
            let dx: Array1<f64> = if step_norm > 0.0 {
                step * config.perturbation_scale
            } else {
                Array1::from_elem(dim, config.perturbation_scale * (cur.t - next.t) / (dim as f64).sqrt())
            };
            let ax = estimate_jx(field, cur.x.view(), cur.t, dx.view())?;
            let at = estimate_jt(field, cur.x.view(), cur.t, -dt_probe)?;
            Ok((ax, at))
        })
        .collect()
}

/// Runs `num_samples` seeded reference trajectories and aggregates the secant
/// sensitivities at each grid time. Samples run in parallel; the reduction
/// is in sample order, so the result does not depend on scheduling.
pub fn calibrate(field: &dyn VelocityField, grid: &TimestepGrid, config: &CalibrationConfig) -> Result<SensitivityProfile> {
    config.validate(grid)?;
    let dt_probe = config.resolved_dt_probe(grid);
    let per_sample: Vec<Vec<(f64, f64)>> = (0..config.num_samples)
        .into_par_iter()
        .map(|s| calibrate_sample(field, grid, config, dt_probe, s))
        .collect::<Result<_>>()?;

    let n = config.num_samples as f64;
    let entries = grid.times()[..grid.steps()]
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let (alpha_x, alpha_t) = match config.aggregation {
                Aggregation::Mean => {
                    let (sx, st) = per_sample.iter().fold((0.0, 0.0), |(sx, st), rows| (sx + rows[k].0, st + rows[k].1));
                    (sx / n, st / n)
                }
                Aggregation::Max => per_sample
                    .iter()
                    .fold((0.0_f64, 0.0_f64), |(mx, mt), rows| (mx.max(rows[k].0), mt.max(rows[k].1))),
            };
            ProfileEntry { t, alpha_x, alpha_t, samples: config.num_samples }
        })
        .collect();

    let mut meta = BTreeMap::new();
    meta.insert("num_samples".into(), config.num_samples.to_string());
    meta.insert("seed".into(), config.seed.to_string());
    meta.insert("perturbation_scale".into(), format!("{:.16e}", config.perturbation_scale));
    meta.insert("dt_probe".into(), format!("{dt_probe:.16e}"));
    meta.insert("aggregation".into(), config.aggregation.id().into());
    meta.insert("steps".into(), grid.steps().to_string());

    Ok(SensitivityProfile {
        entries,
        field_id: field.id(),
        schedule_id: field.schedule().map_or("none", |s| s.id()).to_string(),
        grid_hash: grid.fingerprint(),
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConstantField, GaussianField, GaussianMixtureField, MixtureComponent, StiffSyntheticField};
    use crate::schedule::InterpolantSchedule;
    use ndarray::array;

    fn mixture() -> GaussianMixtureField {
        GaussianMixtureField::new(
            vec![
                MixtureComponent { weight: 0.5, mean: vec![1.0, -0.5], var: vec![0.3, 0.5] },
                MixtureComponent { weight: 0.5, mean: vec![-1.5, 0.5], var: vec![0.2, 0.4] },
            ],
            InterpolantSchedule::linear(),
        )
        .unwrap()
    }

    #[test]
    fn constant_field_has_zero_sensitivity() {
        let f = ConstantField::new(vec![1.0, 2.0]).unwrap();
        let x = array![0.3, 0.4];
        assert_eq!(estimate_jx(&f, x.view(), 0.5, array![0.1, 0.0].view()).unwrap(), 0.0);
        assert_eq!(estimate_jt(&f, x.view(), 0.5, -0.01).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_secant_at_t0_is_one() {
        let f = GaussianField::standard(2, InterpolantSchedule::linear());
        let x = array![0.3, -0.4];
        for dx in [array![1e-3, 0.0], array![0.5, -2.0], array![-1e-6, 3e-6]] {
            let est = estimate_jx(&f, x.view(), 0.0, dx.view()).unwrap();
            assert!((est - 1.0).abs() < 1e-9, "{est}");
        }
    }

    #[test]
    fn gaussian_time_secant_near_four() {
        let f = GaussianField::standard(2, InterpolantSchedule::linear());
        let est = estimate_jt(&f, array![1.0, 0.0].view(), 0.5, 1e-6).unwrap();
        assert!((est - 4.0).abs() < 1e-3);
    }

    #[test]
    fn mixture_secant_matches_directional_derivative() {
        let f = mixture();
        let x = array![0.2, 0.1];
        let t = 0.4;
        let dir = array![0.6, 0.8];
        let jac = f.exact_jacobian_x(x.view(), t).unwrap();
        let exact = l2(jac.dot(&dir).view());
        let est = estimate_jx(&f, x.view(), t, (&dir * 1e-4).view()).unwrap();
        assert!((est - exact).abs() < 1e-3);
    }

    #[test]
    fn time_secant_error_halves_with_probe() {
        let f = StiffSyntheticField::new(6.0, 1.5, 2).unwrap();
        let x = array![0.4, -0.9];
        let t = 0.6;
        let exact = l2(f.exact_jacobian_t(x.view(), t).unwrap().view());
        let e1 = (estimate_jt(&f, x.view(), t, -1e-3).unwrap() - exact).abs();
        let e2 = (estimate_jt(&f, x.view(), t, -5e-4).unwrap() - exact).abs();
        let ratio = e1 / e2;
        assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn probe_errors() {
        let f = GaussianField::standard(1, InterpolantSchedule::linear());
        let x = array![0.5];
        assert!(matches!(estimate_jx(&f, x.view(), 0.5, array![0.0].view()), Err(Error::Domain(_))));
        assert!(matches!(estimate_jt(&f, x.view(), 0.05, -0.1), Err(Error::Domain(_))));
        assert!(matches!(estimate_jt(&f, x.view(), 0.5, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn single_sample_gaussian_profile_matches_coefficient() {
        let f = GaussianField::standard(2, InterpolantSchedule::linear());
        let grid = TimestepGrid::uniform(50).unwrap();
        let profile = calibrate(&f, &grid, &CalibrationConfig::with_samples(1, 7)).unwrap();
        assert_eq!(profile.len(), 50);
        for e in &profile.entries {
            let c = (2.0 * e.t - 1.0) / ((1.0 - e.t).powi(2) + e.t * e.t);
            assert!((e.alpha_x - c.abs()).abs() < 1e-6, "t={} {} vs {}", e.t, e.alpha_x, c.abs());
            assert!(e.alpha_x >= 0.0 && e.alpha_t >= 0.0);
        }
    }

    #[test]
    fn calibration_is_deterministic() {
        let f = mixture();
        let grid = TimestepGrid::uniform(30).unwrap();
        let cfg = CalibrationConfig::with_samples(6, 3);
        assert_eq!(calibrate(&f, &grid, &cfg).unwrap(), calibrate(&f, &grid, &cfg).unwrap());
    }

    #[test]
    fn max_aggregation_dominates_mean() {
        let f = mixture();
        let grid = TimestepGrid::uniform(20).unwrap();
        let mean = calibrate(&f, &grid, &CalibrationConfig::with_samples(8, 1)).unwrap();
        let max = calibrate(&f, &grid, &CalibrationConfig { aggregation: Aggregation::Max, ..CalibrationConfig::with_samples(8, 1) }).unwrap();
        for (a, b) in mean.entries.iter().zip(&max.entries) {
            assert!(b.alpha_x >= a.alpha_x && b.alpha_t >= a.alpha_t);
        }
    }

    #[test]
    fn zero_field_calibrates_without_step_direction() {
        let f = ConstantField::zeros(3);
        let grid = TimestepGrid::uniform(10).unwrap();
        let p = calibrate(&f, &grid, &CalibrationConfig::default()).unwrap();
        assert!(p.entries.iter().all(|e| e.alpha_x == 0.0 && e.alpha_t == 0.0));
    }

    #[test]
    fn config_validation() {
        let grid = TimestepGrid::uniform(10).unwrap();
        assert!(CalibrationConfig::with_samples(0, 0).validate(&grid).is_err());
        let cfg = CalibrationConfig { dt_probe: Some(0.2), ..Default::default() };
        assert!(cfg.validate(&grid).is_err());
        let cfg = CalibrationConfig { perturbation_scale: 0.0, ..Default::default() };
        assert!(cfg.validate(&grid).is_err());
    }

    fn toy_profile() -> SensitivityProfile {
        SensitivityProfile {
            entries: vec![
                ProfileEntry { t: 1.0, alpha_x: 1.0, alpha_t: 10.0, samples: 1 },
                ProfileEntry { t: 0.75, alpha_x: 2.0, alpha_t: 20.0, samples: 1 },
                ProfileEntry { t: 0.5, alpha_x: 3.0, alpha_t: 30.0, samples: 1 },
                ProfileEntry { t: 0.25, alpha_x: 4.0, alpha_t: 40.0, samples: 1 },
            ],
            field_id: "toy".into(),
            schedule_id: "linear".into(),
            grid_hash: "abc".into(),
            meta: BTreeMap::new(),
        }
    }

    #[test]
    fn lookup_rules() {
        let p = toy_profile();
        assert_eq!(p.lookup(0.75).unwrap(), (2.0, 20.0));
        assert_eq!(p.lookup(0.7).unwrap(), (2.0, 20.0));
        assert_eq!(p.lookup(0.6).unwrap(), (3.0, 30.0));
        // tie between 0.75 and 0.5 goes to the larger t
        assert_eq!(p.lookup(0.625).unwrap(), (2.0, 20.0));
        assert_eq!(p.lookup(0.0).unwrap(), (4.0, 40.0));
        assert_eq!(p.lookup(1.5).unwrap(), (1.0, 10.0));
        let empty = SensitivityProfile { entries: vec![], ..p };
        assert!(matches!(empty.lookup(0.5), Err(Error::EmptyProfile)));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let f = mixture();
        let grid = TimestepGrid::uniform(25).unwrap();
        let p = calibrate(&f, &grid, &CalibrationConfig::with_samples(3, 9)).unwrap();
        let csv = p.to_csv();
        assert!(csv.starts_with("t,alpha_x,alpha_t,samples\n"));
        let back = SensitivityProfile::parse(&csv, &p.metadata_block()).unwrap();
        assert_eq!(back, p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profile.csv");
        p.save(&path).unwrap();
        assert_eq!(SensitivityProfile::load(&path).unwrap(), p);
        assert!(back.check_grid(&grid).is_ok());
        assert!(matches!(back.check_grid(&TimestepGrid::uniform(26).unwrap()), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn parse_rejects_malformed_tables() {
        let meta = "field_id=a\nschedule_id=b\ngrid_hash=c\n";
        assert!(SensitivityProfile::parse("t,ax,at,n\n", meta).is_err());
        assert!(SensitivityProfile::parse("t,alpha_x,alpha_t,samples\n0.5,1,2\n", meta).is_err());
        assert!(SensitivityProfile::parse("t,alpha_x,alpha_t,samples\n0.5,-1,2,1\n", meta).is_err());
        assert!(SensitivityProfile::parse("t,alpha_x,alpha_t,samples\n0.5,1,2,1\n", "field_id=a\n").is_err());
    }
}

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use sencache::experiment::{
    compare_plan, references, run_policy, sweep_calibration_size, sweep_epsilon, sweep_max_reuse, Aggregate,
    DecisionMode,
};
use sencache::metrics::summary_csv;
use sencache::{calibrate, consecutive_step_mae, sample_reference, Error, SensitivityProfile};

use crate::config::{Loaded, Mode};

pub struct Common {
    pub out: PathBuf,
    pub seeds: Vec<u64>,
}

impl Common {
    pub fn resolve(cfg: &Loaded, out: Option<PathBuf>, seeds: Option<Vec<u64>>) -> Result<Self> {
        let out = out
            .or_else(|| cfg.raw.out.as_ref().map(|p| if p.is_absolute() { p.clone() } else { cfg.dir.join(p) }))
            .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))?;
        let seeds = seeds.unwrap_or_else(|| cfg.raw.seeds.clone());
        let seeds = if seeds.is_empty() { vec![0] } else { seeds };
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self { out, seeds })
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
        Ok(path)
    }
}

fn mode(cfg: &Loaded) -> DecisionMode {
    match cfg.mode {
        Mode::Adaptive => DecisionMode::Adaptive,
        Mode::TeacherForced => DecisionMode::TeacherForced,
    }
}

/// The configured profile file if there is one (checked against the run
/// grid), otherwise a fresh calibration.
fn profile(cfg: &Loaded) -> Result<Arc<SensitivityProfile>> {
    let profile = match cfg.profile_path() {
        Some(path) => {
            let p = SensitivityProfile::load(&path).with_context(|| format!("loading profile {}", path.display()))?;
            p.check_grid(&cfg.grid)?;
            p
        }
        None => calibrate(cfg.field.as_ref(), &cfg.grid, &cfg.calibration)?,
    };
    Ok(Arc::new(profile))
}

fn profile_if_needed(cfg: &Loaded) -> Result<Option<Arc<SensitivityProfile>>> {
    Ok(if cfg.policy.needs_profile() { Some(profile(cfg)?) } else { None })
}

pub fn calibrate_cmd(cfg: &Loaded, common: &Common) -> Result<()> {
    let profile = calibrate(cfg.field.as_ref(), &cfg.grid, &cfg.calibration)?;
    let path = common.out.join("profile.csv");
    profile.save(&path).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} ({} entries)", path.display(), profile.len());
    Ok(())
}

pub fn sample_cmd(cfg: &Loaded, common: &Common) -> Result<()> {
    let profile = profile_if_needed(cfg)?;
    let refs = references(cfg.field.as_ref(), &cfg.grid, &common.seeds)?;
    let runs = refs
        .par_iter()
        .map(|r| run_policy(cfg.field.as_ref(), &cfg.grid, r, &cfg.policy, profile.as_ref(), mode(cfg)))
        .collect::<sencache::Result<Vec<_>>>()?;
    let mut reports = Vec::with_capacity(runs.len());
    for (traj, mut report) in runs {
        report.config_hash = cfg.hash.clone();
        common.write(&format!("steps_seed{}.csv", report.seed), &report.steps_csv())?;
        if cfg.raw.output.trajectories {
            common.write(&format!("trajectory_seed{}.csv", report.seed), &traj.to_csv())?;
        }
        reports.push(report);
    }
    common.write("summary.csv", &summary_csv(&reports))?;
    Ok(())
}

pub fn parse_values(values: &str) -> Result<Vec<f64>> {
    values
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad sweep value `{s}`: {e}")).into()))
        .collect()
}

fn as_counts(values: &[f64], axis: &str) -> Result<Vec<usize>> {
    values
        .iter()
        .map(|&v| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{axis} sweep values must be positive integers, got {v}")).into())
            }
        })
        .collect()
}

pub fn sweep_cmd(cfg: &Loaded, common: &Common, axis: Option<String>, values: Option<Vec<f64>>) -> Result<()> {
    let axis = axis
        .or_else(|| cfg.raw.sweep.axis.clone())
        .ok_or_else(|| Error::Config("missing key `sweep.axis` (or pass --axis)".into()))?;
    let values = values
        .or_else(|| cfg.raw.sweep.values.clone())
        .ok_or_else(|| Error::Config("missing key `sweep.values` (or pass --values)".into()))?;
    if values.is_empty() {
        bail!(Error::Config("sweep needs at least one value".into()));
    }
    let field = cfg.field.as_ref();
    if axis == "calib_size" {
        let sizes = as_counts(&values, &axis)?;
        let points = sweep_calibration_size(field, &cfg.grid, &cfg.calibration, &sizes)?;
        let mut csv = String::from("samples,max_relative_deviation\n");
        for p in &points {
            let _ = writeln!(csv, "{},{:.16e}", p.samples, p.max_relative_deviation);
        }
        common.write("sweep_calib_size.csv", &csv)?;
        return Ok(());
    }
    let profile = profile_if_needed(cfg)?;
    let refs = references(field, &cfg.grid, &common.seeds)?;
    let aggregates = match axis.as_str() {
        "epsilon" => sweep_epsilon(field, &cfg.grid, &refs, &cfg.policy, profile.as_ref(), mode(cfg), &values)?,
        "n" => sweep_max_reuse(field, &cfg.grid, &refs, &cfg.policy, profile.as_ref(), mode(cfg), &as_counts(&values, &axis)?)?,
        other => bail!(Error::Config(format!("sweep axis must be epsilon, n or calib_size, got `{other}`"))),
    };
    write_sweep(cfg, common, &axis, aggregates)
}

fn write_sweep(cfg: &Loaded, common: &Common, axis: &str, aggregates: Vec<Aggregate>) -> Result<()> {
    let mut table = format!("{}\n", Aggregate::CSV_HEADER);
    let mut runs = format!("value,{}\n", sencache::RunReport::SUMMARY_HEADER);
    for a in aggregates {
        table.push_str(&a.csv_row(axis));
        table.push('\n');
        for mut r in a.runs {
            r.config_hash = cfg.hash.clone();
            let _ = writeln!(runs, "{},{}", a.value, r.summary_row());
        }
    }
    common.write(&format!("sweep_{axis}.csv"), &table)?;
    common.write(&format!("sweep_{axis}_runs.csv"), &runs)?;
    Ok(())
}

pub fn plan_cmd(cfg: &Loaded, common: &Common, budget: Option<usize>) -> Result<()> {
    let budget = budget
        .or(cfg.raw.plan.budget)
        .ok_or_else(|| Error::Config("missing key `plan.budget` (or pass --budget)".into()))?;
    let profile = profile(cfg)?;
    let outcomes = compare_plan(cfg.field.as_ref(), &cfg.grid, &profile, budget, &common.seeds)?;
    let mut report = String::from("seed,budget,planned_mse,planned_psnr,uniform_mse,uniform_psnr\n");
    for o in &outcomes {
        let mut grid = String::from("index,t\n");
        for (i, t) in o.planned_grid.times().iter().enumerate() {
            let _ = writeln!(grid, "{i},{t:.16e}");
        }
        common.write(&format!("plan_grid_seed{}.csv", o.seed), &grid)?;
        let _ = writeln!(
            report,
            "{},{budget},{:.16e},{:.16e},{:.16e},{:.16e}",
            o.seed, o.planned_mse, o.planned_psnr, o.uniform_mse, o.uniform_psnr
        );
    }
    common.write("plan_report.csv", &report)?;
    Ok(())
}

pub fn diagnose_cmd(cfg: &Loaded, common: &Common) -> Result<()> {
    let mut csv = String::from("field,seed,step,t_from,t_to,mae\n");
    for (label, field) in cfg.diagnose_fields()? {
        let rows = common
            .seeds
            .par_iter()
            .map(|&seed| {
                let r = sample_reference(field.as_ref(), &cfg.grid, seed)?;
                Ok((seed, r.times(), consecutive_step_mae(&r)?))
            })
            .collect::<sencache::Result<Vec<_>>>()?;
        for (seed, times, mae) in rows {
            for (k, m) in mae.iter().enumerate() {
                let _ = writeln!(csv, "{label},{seed},{},{:.16e},{:.16e},{m:.16e}", k + 1, times[k], times[k + 1]);
            }
        }
    }
    common.write("mae.csv", &csv)?;
    Ok(())
}

/// `0,3,5..8` -> `[0, 3, 5, 6, 7]` (ranges are half-open).
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let bad = |e: std::num::ParseIntError| Error::Config(format!("bad seed `{part}`: {e}"));
        if let Some((a, b)) = part.split_once("..") {
            let (a, b): (u64, u64) = (a.parse().map_err(bad)?, b.parse().map_err(bad)?);
            out.extend(a..b);
        } else {
            out.push(part.parse().map_err(bad)?);
        }
    }
    if out.is_empty() {
        bail!(Error::Config(format!("empty seed list `{spec}`")));
    }
    Ok(out)
}

//! Acceptance suite. Runs every criterion, prints one line each and exits
//! nonzero if any of them failed (or overran its time budget).

mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::Array1;
use sencache::experiment::{
    compare_plan, match_nfe, references, run_policy, run_seeds, sweep_calibration_size, sweep_epsilon,
    sweep_max_reuse, Aggregate, DecisionMode,
};
use sencache::metrics::spearman;
use sencache::policy::{transition_scores, ScoreKind};
use sencache::rng::NormalStream;
use sencache::{
    calibrate, consecutive_step_mae, estimate_jt, estimate_jx, sample_reference, sample_with_policy,
    CachePolicyConfig, CalibrationConfig, PolicySpec, Result, SensitivityPolicy, TimestepGrid, VelocityField,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = norm(&v);
    v / n
}

/// Exact `||J_x u||` for a unit direction `u`.
fn directional(field: &dyn VelocityField, x: &Array1<f64>, t: f64, u: &Array1<f64>) -> Result<f64> {
    Ok(norm(&field.exact_jacobian_x(x.view(), t)?.dot(u)))
}

fn profile_for(field: &dyn VelocityField, grid: &TimestepGrid) -> Result<Arc<sencache::SensitivityProfile>> {
    Ok(Arc::new(calibrate(field, grid, &CalibrationConfig::with_samples(8, 7))?))
}

fn secant_exactness() -> Result<Outcome> {
    let field = common::gaussian();
    let grid = TimestepGrid::uniform(50)?;
    let reference = sample_reference(&field, &grid, 11)?;
    let mut rng = NormalStream::new(3);
    let probes = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2];
    let mut worst = vec![0.0_f64; probes.len()];
    for state in reference.states.iter().step_by(5) {
        let u = unit(Array1::from(rng.normal_vec(field.dim())));
        let exact = directional(&field, &state.x, state.t, &u)?;
        for (w, &h) in worst.iter_mut().zip(&probes) {
            let est = estimate_jx(&field, state.x.view(), state.t, (&u * h).view())?;
            *w = w.max((est - exact).abs() / exact);
        }
    }
    let overall = worst.iter().cloned().fold(0.0, f64::max);
    let holds_from = probes.iter().zip(&worst).rev().take_while(|(_, w)| **w <= 1e-9).last().map(|(h, _)| *h);
    outcome(
        overall <= 1e-9,
        format!(
            "worst relative error {overall:.2e} over probes 1e-8..1e-2 (tol 1e-9); per probe {:?}; tolerance holds for probes >= {}",
            worst.iter().map(|w| format!("{w:.1e}")).collect::<Vec<_>>(),
            holds_from.map_or("none".into(), |h| format!("{h:e}"))
        ),
    )
}

fn jacobian_oracle_agreement() -> Result<Outcome> {
    let field = common::oracle_mixture();
    let grid = TimestepGrid::uniform(50)?;
    let mut rng = NormalStream::new(21);
    let (mut worst_x, mut worst_t) = (0.0_f64, 0.0_f64);
    let (mut slopes, mut slope_bad) = (0usize, 0usize);
    let (mut slope_lo, mut slope_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut check_slope = |e: &[f64; 3], exact: f64| {
        // Where the secant is exact to roundoff there is no truncation
        // error to measure.
        if e[0] <= 1e-9 * exact {
            return;
        }
        let s = (e[0] / e[2]).log10() / 2.0;
        slopes += 1;
        slope_lo = slope_lo.min(s);
        slope_hi = slope_hi.max(s);
        if (s - 1.0).abs() > 0.2 {
            slope_bad += 1;
        }
    };
    for seed in 0..4 {
        let reference = sample_reference(&field, &grid, seed)?;
        // The terminal state has no room for a backward time probe.
        for state in reference.states[..grid.steps()].iter().step_by(5) {
            let u = unit(Array1::from(rng.normal_vec(field.dim())));
            let exact_x = directional(&field, &state.x, state.t, &u)?;
            let exact_t = norm(&field.exact_jacobian_t(state.x.view(), state.t)?);
            let mut ex = [0.0; 3];
            let mut et = [0.0; 3];
            for (i, h) in [1e-2, 1e-3, 1e-4].into_iter().enumerate() {
                ex[i] = (estimate_jx(&field, state.x.view(), state.t, (&u * h).view())? - exact_x).abs();
                et[i] = (estimate_jt(&field, state.x.view(), state.t, -h)? - exact_t).abs();
            }
            worst_x = worst_x.max(ex[2] / exact_x);
            worst_t = worst_t.max(et[2] / exact_t);
            check_slope(&ex, exact_x);
            check_slope(&et, exact_t);
        }
    }
    outcome(
        worst_x <= 1e-3 && worst_t <= 1e-3 && slope_bad == 0 && slopes > 0,
        format!(
            "relative error at probe 1e-4: x {worst_x:.2e}, t {worst_t:.2e} (tol 1e-3); log-log slopes in [{slope_lo:.3}, {slope_hi:.3}] over {slopes} fits, {slope_bad} outside 1.0 +/- 0.2"
        ),
    )
}

const BOUND_C: f64 = 10.0;

fn first_order_bound() -> Result<Outcome> {
    let field = common::gaussian();
    let grid = TimestepGrid::uniform(200)?;
    let profile = profile_for(&field, &grid)?;
    let (mut violations, mut transitions, mut worst) = (0usize, 0usize, 0.0_f64);
    let (mut profile_violations, mut profile_worst) = (0usize, 0.0_f64);
    for seed in 0..20 {
        let reference = sample_reference(&field, &grid, seed)?;
        let profile_scores = transition_scores(&reference, &profile, ScoreKind::Full)?;
        for (w, s_profile) in reference.states.windows(2).zip(profile_scores) {
            let truth = norm(&(&w[1].velocity - &w[0].velocity));
            let dt = (w[0].t - w[1].t).abs();
            let alpha_x = field.jacobian_x_operator_norm(w[0].t)?;
            let alpha_t = norm(&field.exact_jacobian_t(w[0].x.view(), w[0].t)?);
            let s = alpha_x * norm(&(&w[1].x - &w[0].x)) + alpha_t * dt;
            transitions += 1;
            worst = worst.max(truth / s);
            if truth > s * (1.0 + BOUND_C * dt) {
                violations += 1;
            }
            profile_worst = profile_worst.max(truth / s_profile);
            if truth > s_profile * (1.0 + BOUND_C * dt) {
                profile_violations += 1;
            }
        }
    }
    outcome(
        violations == 0,
        format!(
            "local sensitivities: {violations}/{transitions} violations with C={BOUND_C}, worst change/S {worst:.4}; \
             for reference, calibrated-profile S: {profile_violations} violations, worst ratio {profile_worst:.3}"
        ),
    )
}

fn zero_tolerance_equivalence() -> Result<Outcome> {
    let field = common::oracle_mixture();
    let grid = TimestepGrid::uniform(50)?;
    let profile = profile_for(&field, &grid)?;
    let mut failures = Vec::new();
    for seed in 0..5 {
        let reference = sample_reference(&field, &grid, seed)?;
        let min_s = transition_scores(&reference, &profile, ScoreKind::Full)?.into_iter().fold(f64::INFINITY, f64::min);
        let eps = 0.5 * min_s;
        let config = CachePolicyConfig::new(eps, 3).with_guard(eps, 0.2);
        let mut policy = SensitivityPolicy::new(ScoreKind::Full, config, Some(profile.clone()))?;
        let (traj, report) = sample_with_policy(&field, &grid, seed, &mut policy)?;
        let identical = traj.states.len() == reference.states.len()
            && traj.states.iter().zip(&reference.states).all(|(a, b)| {
                a.t.to_bits() == b.t.to_bits()
                    && a.x.iter().zip(&b.x).all(|(p, q)| p.to_bits() == q.to_bits())
                    && a.velocity.iter().zip(&b.velocity).all(|(p, q)| p.to_bits() == q.to_bits())
            });
        if !(identical && report.nfe == grid.steps() + 1 && report.cache_ratio == 0.0) {
            failures.push(seed);
        }
    }
    outcome(failures.is_empty(), format!("5 seeds, K=50: bit-identical with NFE=K+1 and cache ratio 0; failing seeds {failures:?}"))
}

fn static_epsilon_nesting() -> Result<Outcome> {
    let field = common::oracle_mixture();
    let grid = TimestepGrid::uniform(50)?;
    let profile = profile_for(&field, &grid)?;
    let refs = references(&field, &grid, &(0..5).collect::<Vec<_>>())?;
    let all: Vec<f64> =
        refs.iter().map(|r| transition_scores(r, &profile, ScoreKind::Full)).collect::<Result<Vec<_>>>()?.concat();
    let (lo, hi) = all.iter().fold((f64::INFINITY, 0.0_f64), |(a, b), &s| (a.min(s), b.max(s)));
    let eps: Vec<f64> = (0..8).map(|i| lo * (hi / lo).powf(i as f64 / 7.0)).collect();
    let (mut exceptions, mut sizes) = (0usize, Vec::new());
    for r in &refs {
        let mut previous: Option<Vec<bool>> = None;
        for &e in &eps {
            let spec = PolicySpec::sencache(CachePolicyConfig::new(e, grid.steps()).without_guard());
            let (_, report) = run_policy(&field, &grid, r, &spec, Some(&profile), DecisionMode::TeacherForced)?;
            let hits: Vec<bool> = report.decisions.iter().map(|d| d.hit).collect();
            if let Some(prev) = &previous {
                exceptions += prev.iter().zip(&hits).filter(|(p, h)| **p && !**h).count();
            }
            if r.seed == 0 {
                sizes.push(hits.iter().filter(|h| **h).count());
            }
            previous = Some(hits);
        }
    }
    outcome(exceptions == 0, format!("5 seeds x 8 tolerances (n unbounded, no guard): {exceptions} exceptions; hit counts seed 0 {sizes:?}"))
}

fn mixture_setup(seeds: std::ops::Range<u64>) -> Result<(sencache::GaussianMixtureField, TimestepGrid, Arc<sencache::SensitivityProfile>, Vec<sencache::Trajectory>)> {
    let field = common::mixture();
    let grid = TimestepGrid::uniform(50)?;
    let profile = profile_for(&field, &grid)?;
    let refs = references(&field, &grid, &seeds.collect::<Vec<_>>())?;
    Ok((field, grid, profile, refs))
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

fn non_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0])
}

fn short(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" ")
}

fn reuse_ablation() -> Result<Outcome> {
    let (field, grid, profile, refs) = mixture_setup(1000..1020)?;
    let spec = PolicySpec::sencache(CachePolicyConfig::new(6.0, 1));
    let ns: Vec<usize> = (1..=8).collect();
    let aggs = sweep_max_reuse(&field, &grid, &refs, &spec, Some(&profile), DecisionMode::Adaptive, &ns)?;
    let nfe: Vec<f64> = aggs.iter().map(|a| a.mean_nfe).collect();
    let err: Vec<f64> = aggs.iter().map(|a| a.mean_terminal_mse).collect();
    let last = *nfe.last().unwrap();
    // Saturation: the first n from which NFE stays at its final value.
    let sat = nfe.iter().position(|&v| v == last).unwrap();
    let saturates = sat > 0 && sat < ns.len() - 1;
    let pass = non_increasing(&nfe) && saturates && non_decreasing(&err[sat..]);
    outcome(
        pass,
        format!(
            "eps=6, 20 seeds: mean NFE {:?}; saturates at n={}; terminal_mse {}",
            nfe,
            ns[sat],
            short(&err)
        ),
    )
}

fn tolerance_ablation() -> Result<Outcome> {
    let (field, grid, profile, refs) = mixture_setup(1000..1020)?;
    let spec = PolicySpec::sencache(CachePolicyConfig::new(1.0, 3));
    let values = [0.1, 0.3, 1.0, 2.0, 3.0, 5.0, 8.0, 12.0];
    let aggs = sweep_epsilon(&field, &grid, &refs, &spec, Some(&profile), DecisionMode::Adaptive, &values)?;
    let nfe: Vec<f64> = aggs.iter().map(|a| a.mean_nfe).collect();
    let err: Vec<f64> = aggs.iter().map(|a| a.mean_terminal_mse).collect();
    let pass = non_increasing(&nfe) && non_decreasing(&err) && nfe.last() < nfe.first();
    outcome(pass, format!("n=3, eps {values:?}, 20 seeds: mean NFE {nfe:?}; terminal_mse {}", short(&err)))
}

fn calibration_size() -> Result<Outcome> {
    let field = common::mixture();
    let grid = TimestepGrid::uniform(50)?;
    let points = sweep_calibration_size(&field, &grid, &CalibrationConfig::with_samples(8, 7), &[1, 8, 64, 512])?;
    let dev = |n: usize| points.iter().find(|p| p.samples == n).unwrap().max_relative_deviation;
    outcome(
        dev(8) < 0.05,
        format!("max relative deviation from 512 samples: n=1 {:.4}, n=8 {:.4}, n=64 {:.4} (tol 0.05 at n=8)", dev(1), dev(8), dev(64)),
    )
}

fn planned_grid() -> Result<Outcome> {
    let field = common::stiff();
    let fine = TimestepGrid::uniform(250)?;
    let profile = profile_for(&field, &fine)?;
    let seeds: Vec<u64> = (0..20).collect();
    let results = compare_plan(&field, &fine, &profile, 25, &seeds)?;
    let wins = results.iter().filter(|o| o.planned_mse < o.uniform_mse).count();
    let mean = |f: &dyn Fn(&sencache::experiment::PlanOutcome) -> f64| results.iter().map(f).sum::<f64>() / 20.0;
    outcome(
        wins >= 18,
        format!(
            "25 of 250 steps: planned beats uniform on {wins}/20 seeds; mean terminal mse planned {:.3e}, uniform {:.3e}",
            mean(&|o| o.planned_mse),
            mean(&|o| o.uniform_mse)
        ),
    )
}

fn separation_on(field: &dyn VelocityField, epsilon: f64, label: &str) -> Result<(bool, String)> {
    let grid = TimestepGrid::uniform(50)?;
    let profile = profile_for(field, &grid)?;
    let refs = references(field, &grid, &(2000..2020).collect::<Vec<_>>())?;
    let config = CachePolicyConfig::new(epsilon, 3);
    let sen = Aggregate::from_runs(
        epsilon,
        run_seeds(field, &grid, &refs, &PolicySpec::sencache(config.clone()), Some(&profile), DecisionMode::Adaptive)?,
    );
    let mut pass = true;
    let mut detail = format!("{label} (eps={epsilon}): sencache nfe {:.2} mse {:.3e}", sen.mean_nfe, sen.mean_terminal_mse);
    for kind in [ScoreKind::TimestepOnly, ScoreKind::LatentOnly] {
        let spec = PolicySpec::Score { kind, config: config.clone() };
        let b = match_nfe(field, &grid, &refs, &spec, Some(&profile), sen.mean_nfe, 1.0)?;
        let matched = (b.mean_nfe - sen.mean_nfe).abs() <= 1.0;
        pass &= matched && sen.mean_terminal_mse <= b.mean_terminal_mse;
        detail.push_str(&format!(", {kind} nfe {:.2} mse {:.3e}", b.mean_nfe, b.mean_terminal_mse));
    }
    Ok((pass, detail))
}

fn baseline_separation() -> Result<Outcome> {
    let (a, da) = separation_on(&common::mixture(), 2.0, "mixture")?;
    let (b, db) = separation_on(&common::stiff(), 1.0, "stiff")?;
    outcome(a && b, format!("{da}; {db}"))
}

fn predictor_correlation() -> Result<Outcome> {
    let (_, _, profile, refs) = mixture_setup(100..110)?;
    let rhos: Vec<f64> = refs
        .iter()
        .map(|r| spearman(&transition_scores(r, &profile, ScoreKind::Full)?, &consecutive_step_mae(r)?))
        .collect::<Result<_>>()?;
    let min = rhos.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    outcome(min > 0.8, format!("Spearman(S, consecutive MAE) over 10 reference runs: min {min:.3}, mean {mean:.3} (threshold 0.8)"))
}

type Check = fn() -> Result<Outcome>;

fn main() {
    let checks: [(&str, u64, Check); 11] = [
        ("secant exactness on a Gaussian field", 1, secant_exactness),
        ("Jacobian oracle agreement on a mixture", 5, jacobian_oracle_agreement),
        ("first-order output-change bound", 5, first_order_bound),
        ("zero tolerance reproduces the reference", 1, zero_tolerance_equivalence),
        ("teacher-forced hit sets nest in epsilon", 10, static_epsilon_nesting),
        ("reuse-cap ablation trend", 60, reuse_ablation),
        ("tolerance ablation trade-off", 60, tolerance_ablation),
        ("8-sample calibration matches 512", 30, calibration_size),
        ("planned grid beats uniform grid", 60, planned_grid),
        ("matched-NFE separation from baselines", 120, baseline_separation),
        ("score predicts consecutive-step change", 10, predictor_correlation),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in checks.into_iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let (pass, detail) = match result {
            Ok(o) => (o.pass && in_time, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {} {name}: {detail} [{:.2}s of {budget}s{}]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

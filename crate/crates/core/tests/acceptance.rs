//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the lines appear in `cargo test` output. The
//! process exits 0 after reporting; the verdicts are the content.

mod common;

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use aggspread::closed_forms::{critical_exponent, StationaryProfile};
use aggspread::entropy::{csiszar_kullback_ratio, equi_integrability_bound, log_sobolev_slack, CsiszarKullback};
use aggspread::experiment::{fit_rate, lambda_sweep, random_bumps, run_single, Classification, RunRecord, ScenarioConfig};
use aggspread::solver::{simulate, Horizon, TerminationStatus, Variables};
use aggspread::{DensityField, SolverConfig};
use common::semigroup::*;
use common::*;

struct Report {
    lines: Vec<String>,
}

impl Report {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        let line = format!("criterion {id}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push(line);
    }
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn pks_run(mass: f64, t_end: f64) -> aggspread::solver::SimulationOutput {
    let (n, r_max) = (512, 20.0);
    let mut cfg = SolverConfig::new(2, n, r_max, Horizon::Time(t_end));
    cfg.kernel = Some(std::sync::Arc::new(aggspread::InteractionKernel::newtonian(2)));
    cfg.variables = Variables::Similarity;
    cfg.diag_every = 0.02;
    let g = grid(2, n, r_max);
    let u0 = DensityField::from_profile(g, |r| mass / (2.0 * PI) * (-r * r / 2.0).exp());
    simulate(cfg, &u0).unwrap()
}

fn criterion_1(rep: &mut Report) {
    let sub = pks_run(4.0 * PI, 100.0);
    let fit = fit_rate(&sub.series.points("linf", "t"), (10.0, 100.0));
    let t_last = sub.series.samples.last().unwrap().t;
    let sub_ok = sub.series.status == TerminationStatus::Completed
        && (t_last - 100.0).abs() < 1e-6
        && fit.as_ref().is_ok_and(|f| f.exponent >= -1.15 && f.exponent <= -0.85);
    let sup = pks_run(12.0 * PI, 10.0);
    let t_blow = sup.series.samples.last().unwrap().t;
    let sup_ok = sup.series.status == TerminationStatus::BlowupDetected && t_blow < 10.0;
    rep.record(
        "1",
        sub_ok && sup_ok,
        format!(
            "M = 4π: {} to t = {t_last:.3}, L∞ exponent {}; M = 12π: {} at t = {t_blow:.4}",
            sub.series.status.as_str(),
            fit.map_or_else(|e| e.to_string(), |f| format!("{:.4}", f.exponent)),
            sup.series.status.as_str()
        ),
    );
}

fn scenario(text: &str) -> ScenarioConfig {
    ScenarioConfig::from_toml_str(text, Path::new("acceptance.toml")).unwrap()
}

const SWEEP: &str = r#"
name = "spreading-d3"
[solver]
d = 3
variables = "similarity"
kernel = { family = "gaussian", sigma = 1.0 }
tau_span = 2.5
diag_every = 0.02
reference = "barenblatt"
[grid]
n = 192
r_max = 8.0
[initial]
profile = "gaussian"
mass = 251.32741228718345
[sweep]
lambdas = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0]
[fit]
series = ["l1_ref"]
"#;

fn l1_fit(r: &RunRecord) -> Option<f64> {
    r.fits.iter().find(|f| f.series == "l1_ref").and_then(|f| f.fit).map(|f| f.exponent)
}

/// Criteria 2, 3 and 4a share the sweep; 9 uses its conservation data.
fn criteria_2_to_4(rep: &mut Report) -> Vec<RunRecord> {
    let sweep = lambda_sweep(&scenario(SWEEP)).unwrap();
    let classes: Vec<String> = sweep
        .runs
        .iter()
        .map(|r| format!("λ={}:{}", r.lambda, serde_json::to_value(r.classification).unwrap().as_str().unwrap()))
        .collect();
    let top_two = sweep.runs.iter().rev().take(2).all(|r| r.classification == Classification::GlobalSpreading);
    let bracket = format!("bracket [{:?}, {:?}]{}", sweep.bracket.lower, sweep.bracket.upper,
        sweep.bracket.hint.as_ref().map_or(String::new(), |h| format!(", hint: {h}")));
    rep.record(
        "2",
        top_two && sweep.violations.is_empty(),
        format!("{}; violations {}; {bracket}", classes.join(" "), sweep.violations.len()),
    );

    let spreading: Vec<&RunRecord> =
        sweep.runs.iter().filter(|r| r.classification == Classification::GlobalSpreading).collect();
    let linf: Vec<(f64, Option<f64>)> = spreading.iter().map(|r| (r.lambda, r.linf_fit.map(|f| f.exponent))).collect();
    let ok3 = !linf.is_empty() && linf.iter().all(|(_, e)| e.is_some_and(|e| (-1.15..=-0.85).contains(&e)));
    rep.record("3", ok3, format!("L∞ exponents {}", fmt_pairs(&linf)));

    let l1: Vec<(f64, Option<f64>)> = spreading.iter().map(|r| (r.lambda, l1_fit(r))).collect();
    let ok4a = !l1.is_empty() && l1.iter().all(|(_, e)| e.is_some_and(|e| within(e, -1.0 / 3.0, 0.1)));
    rep.record("4a", ok4a, format!("‖u − 𝒰‖₁ exponents {} (target −1/3 ± 0.1)", fmt_pairs(&l1)));
    sweep.runs
}

fn fmt_pairs(v: &[(f64, Option<f64>)]) -> String {
    v.iter()
        .map(|(l, e)| format!("λ={l}:{}", e.map_or("n/a".into(), |e| format!("{e:.4}"))))
        .collect::<Vec<_>>()
        .join(" ")
}

fn criterion_4b(rep: &mut Report) -> RunRecord {
    let text = SWEEP
        .replace(r#"kernel = { family = "gaussian", sigma = 1.0 }"#, r#"kernel = { family = "power_decay", gamma = 2.5, r0 = 1.0 }"#)
        .replace("lambdas = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0]", "lambdas = [256.0]");
    let cfg = scenario(&text);
    let (rec, _) = run_single(&cfg, 256.0, None).unwrap();
    let e = l1_fit(&rec);
    let ok = rec.status == TerminationStatus::Completed && e.is_some_and(|e| within(e, -1.0 / 6.0, 0.12));
    rep.record(
        "4b",
        ok,
        format!("power_decay γ = 2.5, λ = 256: {}, exponent {} (target −1/6 ± 0.12)", rec.status.as_str(), fmt_opt(e)),
    );
    rec
}

fn fmt_opt(e: Option<f64>) -> String {
    e.map_or("n/a".into(), |e| format!("{e:.4}"))
}

fn criterion_5(rep: &mut Report) -> RunRecord {
    let text = r#"
name = "linear-d2"
[solver]
d = 2
variables = "similarity"
kernel = { family = "bessel", alpha = 1.0 }
tau_span = 4.6
diag_every = 0.05
reference = "heat"
[grid]
n = 512
r_max = 20.0
[initial]
profile = "gaussian"
mass = 12.566370614359172
[fit]
series = ["l1_ref"]
"#;
    let cfg = scenario(text);
    let (rec, _) = run_single(&cfg, 16.0, None).unwrap();
    let e = l1_fit(&rec);
    let ok = rec.status == TerminationStatus::Completed && e.is_some_and(|e| within(e, -0.5, 0.12));
    rep.record(
        "5",
        ok,
        format!("bessel α = 1, M = 4π, λ = 16: {}, ‖u − e^{{tΔ}}u₀‖₁ exponent {} (target −1/2 ± 0.12)", rec.status.as_str(), fmt_opt(e)),
    );
    rec
}

fn criterion_6(rep: &mut Report) -> EntropyRun {
    let coarse = entropy_run(512);
    let fine = entropy_run(1024);
    let ratio = coarse.residual / fine.residual;
    let ok = fine.residual <= 0.05 && ratio >= 1.8 && fine.rate >= 1.9;
    rep.record(
        "6",
        ok,
        format!(
            "dissipation residual {:.3e} (n = 512) → {:.3e} (n = 1024), ratio {ratio:.2}; H_rel rate {:.3}",
            coarse.residual, fine.residual, fine.rate
        ),
    );
    fine
}

fn criterion_7(rep: &mut Report) {
    let d = 3;
    let m = critical_exponent(d);
    let g = grid(d, 160, 10.0);
    let (mut worst_slack, mut eq_ok, mut slicing_ok) = (f64::INFINITY, true, true);
    for seed in 0..100u64 {
        let mass = 0.5 + (seed as f64 * 0.37) % 30.0;
        let f = random_bumps(g.clone(), mass, seed, 1 + (seed % 4) as usize);
        let s = log_sobolev_slack(&f, d).unwrap();
        worst_slack = worst_slack.min(s.slack / (s.h_rel + 1.0));
        let peak = f.lp_norm(f64::INFINITY).unwrap();
        for level in [0.02, 0.1, 0.5, 0.9] {
            let k = level * peak;
            let (tail, bound) = equi_integrability_bound(&f, k, m).unwrap();
            eq_ok &= tail <= bound * (1.0 + 1e-12);
            for p in [1.5, m, 2.0, 4.0] {
                let lhs = f.lp_norm(p).unwrap().powf(p);
                let rhs = 2f64.powf(p - 1.0) * (f.truncated_part(k).lp_norm(p).unwrap().powf(p) + k.powf(p - 1.0) * f.mass());
                slicing_ok &= lhs <= rhs * (1.0 + 1e-12);
            }
        }
    }
    let g = grid(d, 400, 12.0);
    let theta = StationaryProfile::new(10.0, d).unwrap();
    let mut ratios = Vec::new();
    for s in [0.5f64, 0.7, 0.9, 0.97, 0.99, 1.01, 1.03, 1.1, 1.3, 1.6] {
        let f = DensityField::from_profile(g.clone(), |r| s.powi(-(d as i32)) * theta.eval(r / s));
        let f = DensityField::new(g.clone(), f.values().iter().map(|v| v * 10.0 / f.mass()).collect()).unwrap();
        if let CsiszarKullback::Ratio(r) = csiszar_kullback_ratio(&f, 10.0, d).unwrap() {
            ratios.push(r);
        }
    }
    let ck_max = ratios.iter().cloned().fold(0.0, f64::max);
    let ok = worst_slack >= -1e-4 && eq_ok && slicing_ok && ck_max.is_finite() && ratios.len() >= 8;
    rep.record(
        "7",
        ok,
        format!(
            "min normalized log-Sobolev slack {worst_slack:.3e}; equi-integrability {}; slicing {}; CK ratio max {ck_max:.3} over {} dilations",
            if eq_ok { "holds" } else { "violated" },
            if slicing_ok { "holds" } else { "violated" },
            ratios.len()
        ),
    );
}

fn criterion_8(rep: &mut Report) {
    let id = identity_error();
    let fixed = fixed_point_error();
    let rate = zero_mass_rate();
    let (c1, c2) = (commutation_residual(0.1), commutation_residual(0.05));
    let order = (c1 / c2).log2();
    let comp = composition_error();
    let ok = id < 1e-12 && fixed < 1e-7 && within(rate, 0.5, 0.05) && order >= 1.8 && comp < 1e-6;
    rep.record(
        "8",
        ok,
        format!(
            "S(0) error {id:.1e}; Gaussian fixed point {fixed:.2e}; zero-mass rate {rate:.4}; commutation {c1:.2e} → {c2:.2e} (order {order:.2}); composition {comp:.2e}"
        ),
    );
}

fn criterion_9(rep: &mut Report, runs: &[RunRecord], entropy: &EntropyRun) {
    let heat: Vec<f64> = [64, 128, 256].iter().map(|&n| heat_run_error(n)).collect();
    let heat_orders = orders(&heat);
    let stat: Vec<f64> = [100, 200, 400].iter().map(|&n| stationarity_residual(n)).collect();
    let stat_orders = orders(&stat);
    let drift = runs
        .iter()
        .map(|r| (r.mass_final - r.mass_initial).abs() / r.mass_initial)
        .fold(entropy.mass_drift, f64::max);
    let clipped = runs.iter().map(|r| r.clipped_mass / r.mass_initial).fold(entropy.clipped, f64::max);
    let ok = heat_orders.iter().all(|&p| p >= 1.8) && stat_orders.iter().all(|&p| p >= 1.0) && drift <= 1e-8 && clipped <= 1e-10;
    rep.record(
        "9",
        ok,
        format!(
            "heat L¹ orders {:?}; stationarity orders {:?}; max relative mass drift {drift:.2e}; max clipped/M {clipped:.2e}",
            heat_orders.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>(),
            stat_orders.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>()
        ),
    );
}

fn main() {
    // `cargo test -- --list` and filters are forwarded to every target
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let start = Instant::now();
    let mut rep = Report { lines: Vec::new() };
    criterion_1(&mut rep);
    let mut runs = criteria_2_to_4(&mut rep);
    runs.push(criterion_4b(&mut rep));
    runs.push(criterion_5(&mut rep));
    let entropy = criterion_6(&mut rep);
    criterion_7(&mut rep);
    criterion_8(&mut rep);
    criterion_9(&mut rep, &runs, &entropy);
    let passed = rep.lines.iter().filter(|l| l.contains(": PASS")).count();
    println!("acceptance: {passed}/{} criteria passed in {:.0} s", rep.lines.len(), start.elapsed().as_secs_f64());
}

//! Measurements shared by the scheme tests and the acceptance report.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::sync::Arc;

use aggspread::closed_forms::StationaryProfile;
use aggspread::solver::{dissipation_residual, simulate, Horizon, Solver, SolverState, Variables};
use aggspread::{DensityField, RadialGrid, SolverConfig};

pub fn grid(d: usize, n: usize, r_max: f64) -> Arc<RadialGrid> {
    Arc::new(RadialGrid::new(d, n, r_max).unwrap())
}

/// Observed order of `errs` measured on grids refined by two.
pub fn orders(errs: &[f64]) -> Vec<f64> {
    errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

/// L¹ error of a pure heat run (d = 2, m = 1) against the exact Gaussian at `t = 1`.
pub fn heat_run_error(n: usize) -> f64 {
    let (r_max, v0, t_end) = (10.0, 0.5, 1.0);
    let gauss = |v: f64| move |r: f64| (2.0 * PI * v).recip() * (-r * r / (2.0 * v)).exp();
    let g = grid(2, n, r_max);
    let u0 = DensityField::from_profile(g.clone(), gauss(v0));
    let mut cfg = SolverConfig::new(2, n, r_max, Horizon::Time(t_end));
    cfg.diag_every = t_end;
    let out = simulate(cfg, &u0).unwrap();
    let exact = DensityField::from_profile(g, gauss(v0 + 2.0 * t_end));
    out.final_state.field.l1_distance(&exact).unwrap()
}

/// `‖Δθ‖₁/Δt` after one short step from the sampled stationary profile.
pub fn stationarity_residual(n: usize) -> f64 {
    let (d, mass) = (3, 1.0);
    let theta = StationaryProfile::new(mass, d).unwrap();
    let r_max = 2.0 * theta.support_radius();
    let mut cfg = SolverConfig::new(d, n, r_max, Horizon::TauSpan(1.0));
    cfg.variables = Variables::Similarity;
    let mut solver = Solver::new(cfg).unwrap();
    let field = theta.sample(solver.grid().clone()).unwrap();
    let mut state = SolverState { field: field.clone(), time: 0.0, steps: 0, clipped_mass: 0.0, outflow: 0.0 };
    let dt = 0.1 * solver.cfl_dt(&state).unwrap();
    let taken = solver.step(&mut state, dt).unwrap();
    state.field.l1_distance(&field).unwrap() / taken
}

pub struct EntropyRun {
    pub residual: f64,
    pub rate: f64,
    pub mass_drift: f64,
    pub clipped: f64,
}

/// Pure diffusion in similarity variables from a dilated stationary profile.
pub fn entropy_run(n: usize) -> EntropyRun {
    let (d, mass) = (3, 1.0);
    let theta = StationaryProfile::new(mass, d).unwrap();
    let r_max = 3.0 * theta.support_radius();
    let s: f64 = 1.6;
    let g = grid(d, n, r_max);
    let f = DensityField::from_profile(g.clone(), |r| s.powi(-(d as i32)) * theta.eval(r / s));
    let f = DensityField::new(g, f.values().iter().map(|v| v * mass / f.mass()).collect()).unwrap();
    let mut cfg = SolverConfig::new(d, n, r_max, Horizon::TauSpan(3.0));
    cfg.variables = Variables::Similarity;
    cfg.diag_every = 0.02;
    let out = simulate(cfg, &f).unwrap();
    let residual = dissipation_residual(&out.series).unwrap();
    let h0 = out.series.samples[0].h_rel.unwrap();
    let pts: Vec<(f64, f64)> = out
        .series
        .samples
        .iter()
        .filter_map(|x| Some((x.tau?, x.h_rel?)))
        .filter(|(_, h)| *h > 1e-6 * h0)
        .collect();
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (t, h)| (a + t, b + h.ln()));
    let k = pts.len() as f64;
    let (mx, my) = (sx / k, sy / k);
    let num: f64 = pts.iter().map(|(t, h)| (t - mx) * (h.ln() - my)).sum();
    let den: f64 = pts.iter().map(|(t, _)| (t - mx) * (t - mx)).sum();
    let last = out.series.samples.last().unwrap();
    EntropyRun {
        residual,
        rate: -num / den,
        mass_drift: (last.mass - f.mass()).abs() / f.mass(),
        clipped: out.final_state.clipped_mass / mass,
    }
}

pub mod semigroup {
    use super::*;
    use aggspread::closed_forms::{fokker_planck_apply, fokker_planck_semigroup, AngularMode};
    use aggspread::experiment::fit_rate;

    pub fn max_diff(a: &DensityField, b: &DensityField) -> f64 {
        a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    pub fn bumpy(g: &Arc<RadialGrid>) -> DensityField {
        DensityField::from_profile(g.clone(), |r| (-(r - 1.5) * (r - 1.5)).exp() + 0.5 * (-r * r / 0.5).exp())
    }

    pub fn identity_error() -> f64 {
        let g = grid(3, 200, 12.0);
        let w = bumpy(&g);
        max_diff(&fokker_planck_semigroup(&w, 0.0).unwrap(), &w)
    }

    pub fn fixed_point_error() -> f64 {
        let mut worst: f64 = 0.0;
        for d in [2usize, 3] {
            let g = grid(d, 300, 16.0);
            let c = 2.0 * (4.0 * PI).powf(-0.5 * d as f64);
            let w = DensityField::from_profile(g.clone(), |r| c * (-r * r / 4.0).exp());
            for tau in [0.3, 1.0, 3.0] {
                worst = worst.max(max_diff(&fokker_planck_semigroup(&w, tau).unwrap(), &w));
            }
        }
        worst
    }

    pub fn composition_error() -> f64 {
        let g = grid(3, 300, 14.0);
        let w = bumpy(&g);
        let direct = fokker_planck_semigroup(&w, 1.1).unwrap();
        let twice = fokker_planck_semigroup(&fokker_planck_semigroup(&w, 0.7).unwrap(), 0.4).unwrap();
        max_diff(&direct, &twice)
    }

    /// `‖S(τ)g‖_{L²(β)}` decay rate for the zero-mass dipole `g = r e^{−r²/8} x₁/|x|`.
    pub fn zero_mass_rate() -> f64 {
        let d = 3;
        let beta = 2.5;
        let g = |r: f64| r * (-r * r / 8.0).exp();
        let norm = |tau: f64| {
            let (n, r_max) = (1200, 24.0);
            let h = r_max / n as f64;
            (0..n)
                .map(|i| {
                    let r = (i as f64 + 0.5) * h;
                    let v = fokker_planck_apply(d, AngularMode::Dipole, g, tau, r);
                    h * r.powi(d as i32 - 1) * (1.0 + r * r).powf(2.0 * beta) * v * v
                })
                .sum::<f64>()
                .sqrt()
        };
        let pts: Vec<(f64, f64)> = (0..=24).map(|k| 2.0 + 0.25 * k as f64).map(|tau| (tau.exp(), norm(tau))).collect();
        -fit_rate(&pts, (2.0f64.exp(), 8.0f64.exp())).unwrap().exponent
    }

    /// Max residual of `∂_r S(τ)w = e^{τ/2} S(τ)[∂_r w]` with centered differences of step `h`.
    pub fn commutation_residual(h: f64) -> f64 {
        let (d, tau) = (3, 0.8);
        let w = |r: f64| (-(r - 1.0) * (r - 1.0)).exp();
        let dw = move |r: f64| if r < h { 0.0 } else { (w(r + h) - w(r - h)) / (2.0 * h) };
        let sw = |r: f64| fokker_planck_apply(d, AngularMode::Radial, w, tau, r);
        [0.5, 1.0, 1.5, 2.0, 3.0]
            .iter()
            .map(|&r| {
                let lhs = (sw(r + h) - sw(r - h)) / (2.0 * h);
                let rhs = (0.5 * tau).exp() * fokker_planck_apply(d, AngularMode::Dipole, dw, tau, r);
                (lhs - rhs).abs()
            })
            .fold(0.0, f64::max)
    }
}

mod common;

use aggspread::closed_forms::{fokker_planck_semigroup, heat_semigroup, BarenblattProfile, SimilarityFrame, StationaryProfile};
use aggspread::{DensityField, RescaleMode};
use common::grid;
use common::semigroup::*;

#[test]
fn zero_time_is_identity() {
    assert!(identity_error() < 1e-14);
    let g = grid(3, 200, 12.0);
    let w = bumpy(&g);
    assert!(max_diff(&heat_semigroup(&w, 0.0).unwrap(), &w) < 1e-14);
}

#[test]
fn gaussian_is_fixed() {
    let e = fixed_point_error();
    assert!(e < 1e-7, "{e}");
}

#[test]
fn composition() {
    let e = composition_error();
    assert!(e < 1e-6, "{e}");
    let g = grid(3, 300, 14.0);
    let w = bumpy(&g);
    let direct = heat_semigroup(&w, 1.1).unwrap();
    let twice = heat_semigroup(&heat_semigroup(&w, 0.7).unwrap(), 0.4).unwrap();
    assert!(max_diff(&direct, &twice) < 1e-6, "{}", max_diff(&direct, &twice));
}

#[test]
fn weighted_contraction() {
    let g = grid(3, 300, 16.0);
    let beta = 2.5;
    let fields = [
        bumpy(&g),
        DensityField::from_profile(g.clone(), |r| if r < 2.0 { 1.0 } else { 0.0 }),
        DensityField::from_profile(g.clone(), |r| (-(r - 3.0).powi(2) * 4.0).exp()),
    ];
    let mut ratios = Vec::new();
    for w in &fields {
        let n0 = w.weighted_l2_norm(beta);
        for k in 0..=10 {
            let tau = 0.5 * k as f64;
            ratios.push(fokker_planck_semigroup(w, tau).unwrap().weighted_l2_norm(beta) / n0);
        }
    }
    let c = ratios.iter().cloned().fold(0.0, f64::max);
    assert!(c.is_finite() && c < 10.0, "fitted constant {c}");
}

#[test]
fn zero_mass_data_decay_at_rate_one_half() {
    let rate = zero_mass_rate();
    assert!((rate - 0.5).abs() <= 0.05, "rate {rate}");
}

#[test]
fn gradient_commutes_with_the_flow() {
    let (coarse, fine) = (commutation_residual(0.1), commutation_residual(0.05));
    assert!(fine < 1e-3, "residual {fine}");
    let order = (coarse / fine).log2();
    assert!(order > 1.8, "observed order {order} ({coarse} → {fine})");
}

#[test]
fn stationary_profile_maps_to_shifted_barenblatt() {
    let d = 3;
    let mass = 5.0;
    let theta = StationaryProfile::new(mass, d).unwrap();
    let b = BarenblattProfile::new(mass, d).unwrap();
    for lambda in [1.0, 2.0, 5.0] {
        let frame = SimilarityFrame::from_lambda(lambda, RescaleMode::Nonlinear, d).unwrap();
        for t in [0.0, 0.7, 10.0] {
            let (a, s) = (frame.amplitude(t), frame.spatial_scale(t));
            for k in 0..40 {
                let x = 0.1 * k as f64 * s;
                let u = theta.eval(x / s) / a;
                let exact = b.eval(t + frame.shift + 1.0 / d as f64, x).unwrap();
                assert!((u - exact).abs() <= 1e-12 * exact.abs().max(1e-3), "λ = {lambda}, t = {t}, x = {x}");
            }
        }
    }
}

//! Sphere areas and angular integrals in `d` dimensions.

use std::f64::consts::PI;

/// Γ(k/2) for a positive integer `k`, exact recursion on the half-integers.
pub fn gamma_half(k: usize) -> f64 {
    assert!(k >= 1);
    let mut g = if k % 2 == 0 { 1.0 } else { PI.sqrt() };
    let mut x = if k % 2 == 0 { 1.0 } else { 0.5 };
    while 2.0 * x < k as f64 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Surface area of the unit sphere S^{d-1} in ℝ^d (2π for d = 2, 4π for d = 3).
pub fn sphere_area(d: usize) -> f64 {
    assert!(d >= 1);
    2.0 * PI.powf(d as f64 / 2.0) / gamma_half(d)
}

/// Volume of the ball of radius `r` in ℝ^d.
pub fn ball_volume(d: usize, r: f64) -> f64 {
    sphere_area(d) * r.powi(d as i32) / d as f64
}

/// Measure of the set of directions on S^{d-1} at polar angle φ, i.e. the factor
/// `σ_{d-2} sin^{d-2} φ` with `σ_0 = 2` for the circle.
#[inline]
pub fn polar_weight(d: usize, phi: f64) -> f64 {
    let base = if d == 2 { 2.0 } else { sphere_area(d - 1) };
    base * phi.sin().powi(d as i32 - 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn low_dimensional_areas() {
        assert!((sphere_area(2) - 2.0 * PI).abs() < 1e-14);
        assert!((sphere_area(3) - 4.0 * PI).abs() < 1e-14);
        assert!((sphere_area(4) - 2.0 * PI * PI).abs() < 1e-13);
        assert!((ball_volume(3, 2.0) - 4.0 / 3.0 * PI * 8.0).abs() < 1e-12);
    }

    #[test]
    fn polar_weight_integrates_to_sphere_area() {
        let gl = crate::quadrature::GaussLegendre::new(32);
        for d in 2..=5 {
            let s = gl.integrate(0.0, PI, |phi| polar_weight(d, phi));
            assert!((s - sphere_area(d)).abs() < 1e-12, "d = {d}");
        }
    }
}

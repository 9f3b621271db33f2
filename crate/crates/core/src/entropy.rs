//! Entropy `H[θ] = (1/(m−1))∫θ^m + ½∫|ξ|²θ`, its production `I`, and the
//! inequalities relating them to the stationary profile.

use std::sync::Arc;

use serde::Serialize;

use crate::closed_forms::{critical_exponent, StationaryProfile};
use crate::error::{Error, Result};
use crate::fields::{DensityField, RadialGrid};
use crate::geometry::sphere_area;
use crate::quadrature::bisect;

/// Cells below `FLOOR × max θ` count as outside the support when differentiating.
pub const SUPPORT_FLOOR: f64 = 1e-12;

fn check_m(m: f64) -> Result<()> {
    if !(m > 1.0) || !m.is_finite() {
        return Err(Error::Domain(format!("entropy needs m > 1, got {m}")));
    }
    Ok(())
}

/// `Σ ω θ^m/(m−1) + ½ ∫|ξ|²θ`, the confinement term integrated exactly on each shell.
pub fn entropy_h(theta: &DensityField, m: f64) -> Result<f64> {
    check_m(m)?;
    let internal: f64 = theta
        .values()
        .iter()
        .zip(theta.grid().volumes())
        .map(|(u, w)| w * u.powf(m))
        .sum::<f64>()
        / (m - 1.0);
    Ok(internal + 0.5 * theta.second_moment())
}

/// Pressure-gradient velocity `m/(m−1)∇θ^{m−1} + ξ` at cell centers (zero off the support).
pub fn entropy_velocity(theta: &DensityField, m: f64) -> Result<Vec<f64>> {
    entropy_velocity_floored(theta, m, SUPPORT_FLOOR)
}

/// As [`entropy_velocity`], treating cells below `floor × max θ` as vacuum.
pub fn entropy_velocity_floored(theta: &DensityField, m: f64, floor: f64) -> Result<Vec<f64>> {
    check_m(m)?;
    let g = theta.grid();
    let u = theta.values();
    let n = u.len();
    let h = g.h();
    let floor = floor * u.iter().cloned().fold(0.0, f64::max);
    let inside = |i: usize| u[i] > floor;
    let p: Vec<f64> = u.iter().map(|&v| m / (m - 1.0) * v.powf(m - 1.0)).collect();
    let r = g.centers();
    Ok((0..n)
        .map(|i| {
            if !inside(i) {
                return 0.0;
            }
            // symmetric ghost at the origin, one-sided differences at the support edge
            let left = if i == 0 { Some(p[0]) } else if inside(i - 1) { Some(p[i - 1]) } else { None };
            let right = if i + 1 < n && inside(i + 1) { Some(p[i + 1]) } else { None };
            let dp = match (left, right) {
                (Some(l), Some(rt)) => (rt - l) / (2.0 * h),
                (Some(l), None) => (p[i] - l) / h,
                (None, Some(rt)) => (rt - p[i]) / h,
                (None, None) => 0.0,
            };
            dp + r[i]
        })
        .collect())
}

/// `I[θ] = ∫ θ |m/(m−1)∇θ^{m−1} + ξ|²`.
pub fn entropy_i(theta: &DensityField, m: f64) -> Result<f64> {
    entropy_i_floored(theta, m, SUPPORT_FLOOR)
}

pub fn entropy_i_floored(theta: &DensityField, m: f64, floor: f64) -> Result<f64> {
    let v = entropy_velocity_floored(theta, m, floor)?;
    Ok(theta
        .values()
        .iter()
        .zip(theta.grid().volumes())
        .zip(&v)
        .map(|((u, w), v)| w * u * v * v)
        .sum())
}

/// The minimizer of the discrete entropy among grid densities of mass `mass`:
/// `θ_i = ((m−1)/m (C − ⟨|ξ|²⟩_i/2))_+^{1/(m−1)}` with the shell average of `|ξ|²`.
///
/// It converges to the closed-form `θ_M` as the grid is refined and makes the
/// discrete relative entropy nonnegative without a tolerance.
pub fn discrete_minimizer(grid: Arc<RadialGrid>, mass: f64) -> Result<DensityField> {
    let d = grid.d();
    let exact = StationaryProfile::new(mass, d)?;
    let m = exact.m;
    let sigma = sphere_area(d);
    let faces = grid.faces();
    let di = d as i32;
    let shell_r2: Vec<f64> = (0..grid.n())
        .map(|i| {
            let m2 = sigma * (faces[i + 1].powi(di + 2) - faces[i].powi(di + 2)) / (d as f64 + 2.0);
            m2 / grid.volumes()[i]
        })
        .collect();
    let profile = |c: f64| -> Vec<f64> {
        shell_r2
            .iter()
            .map(|s| ((m - 1.0) / m * (c - 0.5 * s)).max(0.0).powf(1.0 / (m - 1.0)))
            .collect()
    };
    let mass_of = |c: f64| -> f64 { profile(c).iter().zip(grid.volumes()).map(|(u, w)| u * w).sum() };
    if exact.support_radius() >= grid.r_max() {
        return Err(Error::DomainTooSmall { clipped: f64::NAN, mass, r_max: grid.r_max() });
    }
    let mut hi = 2.0 * exact.c + 1.0;
    while mass_of(hi) < mass {
        hi *= 2.0;
    }
    let c = bisect(|c| mass_of(c) - mass, 0.0, hi, 1e-15)
        .ok_or_else(|| Error::Domain("could not fit the discrete minimizer".into()))?;
    Ok(DensityField::from_raw(grid, profile(c)))
}

/// `H[θ] − H[θ_M]` for the mass of `θ`, which must equal `mass` to 1e-6.
pub fn relative_entropy(theta: &DensityField, mass: f64, d: usize) -> Result<f64> {
    check_mass(theta, mass, d)?;
    let m = critical_exponent(d);
    let reference = discrete_minimizer(theta.grid().clone(), mass)?;
    Ok(entropy_h(theta, m)? - entropy_h(&reference, m)?)
}

fn check_mass(theta: &DensityField, mass: f64, d: usize) -> Result<()> {
    if theta.grid().d() != d {
        return Err(Error::GridMismatch(format!("field has d = {}, expected {d}", theta.grid().d())));
    }
    let actual = theta.mass();
    if (actual - mass).abs() > 1e-6 * mass {
        return Err(Error::MassMismatch { expected: mass, actual });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogSobolevSlack {
    pub h_rel: f64,
    pub half_i: f64,
    /// `I/2 − H_rel`, nonnegative up to discretization error.
    pub slack: f64,
}

/// Both sides of `H[f|θ_M] ≤ ½ I[f]`, with `θ_M` of the same mass as `f`.
pub fn log_sobolev_slack(f: &DensityField, d: usize) -> Result<LogSobolevSlack> {
    let mass = f.mass();
    let h_rel = relative_entropy(f, mass, d)?;
    let half_i = 0.5 * entropy_i(f, critical_exponent(d))?;
    Ok(LogSobolevSlack { h_rel, half_i, slack: half_i - h_rel })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum CsiszarKullback {
    Ratio(f64),
    /// `H_rel` at or below the tolerance: the ratio is 0/0.
    Indeterminate,
}

/// Relative entropy below which the Csiszár–Kullback ratio is not evaluated.
pub const CK_TOLERANCE: f64 = 1e-12;

/// `‖θ − θ_M‖₁ / √H_rel`.
pub fn csiszar_kullback_ratio(theta: &DensityField, mass: f64, d: usize) -> Result<CsiszarKullback> {
    check_mass(theta, mass, d)?;
    let m = critical_exponent(d);
    let reference = discrete_minimizer(theta.grid().clone(), mass)?;
    let h_rel = entropy_h(theta, m)? - entropy_h(&reference, m)?;
    if h_rel <= CK_TOLERANCE * (1.0 + mass) {
        return Ok(CsiszarKullback::Indeterminate);
    }
    Ok(CsiszarKullback::Ratio(theta.l1_distance(&reference)? / h_rel.sqrt()))
}

/// `(‖θ_k‖₁, k^{1−m}‖θ‖_m^m)`; the first never exceeds the second.
pub fn equi_integrability_bound(theta: &DensityField, k: f64, m: f64) -> Result<(f64, f64)> {
    if !(k > 0.0) {
        return Err(Error::Domain(format!("truncation level must be positive, got {k}")));
    }
    check_m(m)?;
    let tail = theta.truncated_part(k).mass();
    let norm = theta.lp_norm(m)?.powf(m);
    Ok((tail, k.powf(1.0 - m) * norm))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Exponents {
    pub p: f64,
    pub epsilon: f64,
}

/// `1/p = 1 + (m−1)/(2m) − 1/q` and `ε = d/q − d + 1`, for `1 ≤ q < d/(d−1)`.
pub fn exponents(q: f64, m: f64, d: usize) -> Result<Exponents> {
    if d < 3 {
        return Err(Error::Domain(format!("exponents are defined for d >= 3, got {d}")));
    }
    if (m - critical_exponent(d)).abs() > 1e-12 {
        return Err(Error::Domain(format!("m must equal 2 - 2/d = {}, got {m}", critical_exponent(d))));
    }
    let df = d as f64;
    let q_crit = df / (df - 1.0);
    if !(q >= 1.0 && q < q_crit) {
        return Err(Error::InvalidExponent(q));
    }
    let inv_p = 1.0 + (m - 1.0) / (2.0 * m) - 1.0 / q;
    Ok(Exponents { p: 1.0 / inv_p, epsilon: df / q - df + 1.0 })
}

/// Everything `entropy-audit` reports for one snapshot.
#[derive(Clone, Debug, Serialize)]
pub struct EntropyReport {
    #[serde(rename = "H")]
    pub h: f64,
    #[serde(rename = "I")]
    pub i: f64,
    #[serde(rename = "H_rel")]
    pub h_rel: f64,
    #[serde(rename = "M")]
    pub mass: f64,
    pub m: f64,
    pub log_sobolev_slack: f64,
    pub csiszar_kullback: CsiszarKullback,
    pub grid: GridInfo,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GridInfo {
    pub d: usize,
    pub n: usize,
    pub r_max: f64,
    pub h: f64,
}

impl GridInfo {
    pub fn of(grid: &RadialGrid) -> Self {
        Self { d: grid.d(), n: grid.n(), r_max: grid.r_max(), h: grid.h() }
    }
}

impl EntropyReport {
    /// Audits `theta` against the stationary profile of mass `mass`.
    pub fn audit(theta: &DensityField, mass: f64, d: usize) -> Result<Self> {
        let m = critical_exponent(d);
        check_mass(theta, mass, d)?;
        let h = entropy_h(theta, m)?;
        let i = entropy_i(theta, m)?;
        let h_rel = relative_entropy(theta, mass, d)?;
        Ok(Self {
            h,
            i,
            h_rel,
            mass,
            m,
            log_sobolev_slack: 0.5 * i - h_rel,
            csiszar_kullback: csiszar_kullback_ratio(theta, mass, d)?,
            grid: GridInfo::of(theta.grid()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, r: f64) -> Arc<RadialGrid> {
        Arc::new(RadialGrid::new(3, n, r).unwrap())
    }

    #[test]
    fn exponent_arithmetic() {
        let m = critical_exponent(3);
        let e = exponents(1.0, m, 3).unwrap();
        assert!((e.p - 8.0).abs() < 1e-12 && (e.epsilon - 1.0).abs() < 1e-12);
        let e = exponents(1.2, m, 3).unwrap();
        assert!((e.p - 24.0 / 7.0).abs() < 1e-12 && (e.epsilon - 0.5).abs() < 1e-12);
        assert!(exponents(1.5, m, 3).is_err());
        assert!(exponents(1.0, 1.5, 3).is_err());
    }

    #[test]
    fn zero_field() {
        let u = DensityField::zeros(grid(50, 5.0));
        assert_eq!(entropy_h(&u, 4.0 / 3.0).unwrap(), 0.0);
        assert_eq!(entropy_i(&u, 4.0 / 3.0).unwrap(), 0.0);
        assert!(entropy_h(&u, 1.0).is_err());
    }

    #[test]
    fn stationary_profile_is_critical() {
        let g = grid(400, 6.0);
        let th = StationaryProfile::new(1.0, 3).unwrap();
        let u = th.sample(g.clone()).unwrap();
        let i = entropy_i(&u, th.m).unwrap();
        assert!(i < 1e-3, "I = {i}");
        let h_rel = relative_entropy(&u, u.mass(), 3).unwrap();
        assert!(h_rel.abs() < 1e-5, "{h_rel}");
        let (dil, _) = u.dilate(1.0 / 1.1, g.clone()).unwrap();
        assert!(entropy_i(&dil, th.m).unwrap() > 1e-2);
        assert!(relative_entropy(&dil, dil.mass(), 3).unwrap() > 0.0);
        assert!(matches!(
            csiszar_kullback_ratio(&discrete_minimizer(g, 1.0).unwrap(), 1.0, 3).unwrap(),
            CsiszarKullback::Indeterminate
        ));
    }

    #[test]
    fn mass_mismatch_is_rejected() {
        let g = grid(100, 6.0);
        let u = StationaryProfile::new(1.0, 3).unwrap().sample(g).unwrap();
        assert!(matches!(relative_entropy(&u, 1.1, 3), Err(Error::MassMismatch { .. })));
    }
}

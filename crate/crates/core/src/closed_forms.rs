//! Exact reference solutions and the similarity change of variables.
//!
//! * [`BarenblattProfile`]: the self-similar porous-medium solution with
//!   `m = 2 − 2/d`, `𝒰(t,x) = t^{-1}(C1 − (m−1)/(2md)·|x|²t^{-2/d})_+^{1/(m−1)}`.
//! * [`StationaryProfile`]: its steady state `θ_M` in similarity variables.
//! * Heat and Fokker–Planck semigroups, evaluated through the radial reduction
//!   of the Gaussian kernel.
//! * [`SimilarityFrame`]: `(t, x, u) ↔ (τ, ξ, θ)`.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{DensityField, QuadraticReconstruction, RadialGrid, RescaleMode};
use crate::geometry::{polar_weight, sphere_area};
use crate::quadrature::{bisect, GaussLegendre};

/// Diffusion exponent `m = 2 − 2/d` of the critical nonlinear model.
pub fn critical_exponent(d: usize) -> f64 {
    2.0 - 2.0 / d as f64
}

fn rule(order: usize) -> &'static GaussLegendre {
    static R4: OnceLock<GaussLegendre> = OnceLock::new();
    static R8: OnceLock<GaussLegendre> = OnceLock::new();
    static R16: OnceLock<GaussLegendre> = OnceLock::new();
    static R32: OnceLock<GaussLegendre> = OnceLock::new();
    match order {
        4 => R4.get_or_init(|| GaussLegendre::new(4)),
        8 => R8.get_or_init(|| GaussLegendre::new(8)),
        16 => R16.get_or_init(|| GaussLegendre::new(16)),
        _ => R32.get_or_init(|| GaussLegendre::new(32)),
    }
}

/// `∫_0^1 (1 − s²)^p s^{d−1} ds`, via `s = sin θ` so the integrand stays smooth.
fn cap_integral(p: f64, d: usize) -> f64 {
    rule(32).composite(0.0, 0.5 * PI, 8, |th| th.cos().powf(2.0 * p + 1.0) * th.sin().powi(d as i32 - 1))
}

/// Finds `x > 0` with `f(x) = target` for an increasing `f` with `f(0+) = 0`.
fn solve_increasing<F: Fn(f64) -> f64>(f: F, target: f64) -> Result<f64> {
    let mut hi = 1.0;
    let mut guard = 0;
    while f(hi) < target {
        hi *= 2.0;
        guard += 1;
        if guard > 2000 {
            return Err(Error::Domain(format!("no root bracket for target {target}")));
        }
    }
    let mut lo = hi;
    while f(lo) > target {
        lo *= 0.5;
        guard += 1;
        if guard > 4000 {
            return Err(Error::Domain(format!("no root bracket for target {target}")));
        }
    }
    bisect(|x| f(x) / target - 1.0, lo, hi, 1e-15)
        .ok_or_else(|| Error::Domain(format!("root find failed for target {target}")))
}

fn check_nonlinear(mass: f64, d: usize) -> Result<()> {
    if d < 3 {
        return Err(Error::Domain(format!(
            "the nonlinear model needs d >= 3 (d = {d} degenerates to linear diffusion)"
        )));
    }
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::Domain(format!("mass must be positive, got {mass}")));
    }
    Ok(())
}

/// `C1` such that `∫ 𝒰(1, x; M) dx = M`.
pub fn barenblatt_c1(mass: f64, d: usize) -> Result<f64> {
    check_nonlinear(mass, d)?;
    let m = critical_exponent(d);
    let p = 1.0 / (m - 1.0);
    let k = (m - 1.0) / (2.0 * m * d as f64);
    let j = cap_integral(p, d);
    let sigma = sphere_area(d);
    let mass_of = |c1: f64| sigma * j * (c1 / k).powf(0.5 * d as f64) * c1.powf(p);
    solve_increasing(mass_of, mass)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarenblattProfile {
    pub mass: f64,
    pub d: usize,
    pub m: f64,
    pub c1: f64,
}

impl BarenblattProfile {
    pub fn new(mass: f64, d: usize) -> Result<Self> {
        let c1 = barenblatt_c1(mass, d)?;
        Ok(Self { mass, d, m: critical_exponent(d), c1 })
    }

    fn quadratic_coefficient(&self) -> f64 {
        (self.m - 1.0) / (2.0 * self.m * self.d as f64)
    }

    pub fn support_radius(&self, t: f64) -> f64 {
        t.powf(1.0 / self.d as f64) * (self.c1 / self.quadratic_coefficient()).sqrt()
    }

    pub fn eval(&self, t: f64, r: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("Barenblatt profile needs t > 0, got {t}")));
        }
        let z = r / t.powf(1.0 / self.d as f64);
        let base = (self.c1 - self.quadratic_coefficient() * z * z).max(0.0);
        Ok(base.powf(1.0 / (self.m - 1.0)) / t)
    }

    /// Cell averages of `𝒰(t, ·)` on `grid`.
    pub fn sample(&self, t: f64, grid: Arc<RadialGrid>) -> Result<DensityField> {
        if grid.d() != self.d {
            return Err(Error::GridMismatch("Barenblatt profile sampled on a grid of another dimension".into()));
        }
        self.eval(t, 0.0)?;
        Ok(DensityField::from_profile(grid, |r| self.eval(t, r).unwrap_or(0.0)))
    }
}

pub fn barenblatt_eval(profile: &BarenblattProfile, t: f64, r: f64) -> Result<f64> {
    profile.eval(t, r)
}

/// `θ_M(ξ) = ((m−1)/m · (C − |ξ|²/2))_+^{1/(m−1)}`, the steady state of
/// `θ_τ = Δθ^m + ∇·(ξθ)` with mass `M`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryProfile {
    pub mass: f64,
    pub d: usize,
    pub m: f64,
    /// Pressure constant `C`.
    pub c: f64,
}

impl StationaryProfile {
    pub fn new(mass: f64, d: usize) -> Result<Self> {
        check_nonlinear(mass, d)?;
        let m = critical_exponent(d);
        let p = 1.0 / (m - 1.0);
        let j = cap_integral(p, d);
        let sigma = sphere_area(d);
        let a = (m - 1.0) / m;
        let mass_of = |c: f64| sigma * j * a.powf(p) * c.powf(p) * (2.0 * c).powf(0.5 * d as f64);
        let c = solve_increasing(mass_of, mass)?;
        Ok(Self { mass, d, m, c })
    }

    pub fn support_radius(&self) -> f64 {
        (2.0 * self.c).sqrt()
    }

    pub fn eval(&self, xi: f64) -> f64 {
        let base = (self.m - 1.0) / self.m * (self.c - 0.5 * xi * xi);
        base.max(0.0).powf(1.0 / (self.m - 1.0))
    }

    pub fn sample(&self, grid: Arc<RadialGrid>) -> Result<DensityField> {
        if grid.d() != self.d {
            return Err(Error::GridMismatch("stationary profile sampled on a grid of another dimension".into()));
        }
        Ok(DensityField::from_profile(grid, |r| self.eval(r)))
    }

    /// The Barenblatt profile that this steady state describes in physical variables:
    /// with no shift, `θ_M` at time `t` is `𝒰(t + 1/d)`.
    pub fn barenblatt(&self) -> BarenblattProfile {
        let c1 = (self.m - 1.0) / self.m * self.c / (self.d as f64).powf(self.m - 1.0);
        BarenblattProfile { mass: self.mass, d: self.d, m: self.m, c1 }
    }
}

pub fn stationary_profile_eval(mass: f64, d: usize, xi: f64) -> Result<f64> {
    Ok(StationaryProfile::new(mass, d)?.eval(xi))
}

/// Angular content of a radial profile: `u(x) = g(|x|)` or `u(x) = g(|x|)·x₁/|x|`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AngularMode {
    Radial,
    Dipole,
}

/// `∫_0^π e^{-z(1−cos φ)} P(φ) σ_{d−2} sin^{d−2}φ dφ` with `P = 1` or `cos φ`.
fn angular_factor(d: usize, mode: AngularMode, z: f64) -> f64 {
    let order = match mode {
        AngularMode::Radial => 0,
        AngularMode::Dipole => 1,
    };
    match d {
        2 => 2.0 * PI * bessel_i_scaled(order, z),
        3 => 4.0 * PI * spherical_i_scaled(order, z),
        _ => angular_quadrature(d, mode, z),
    }
}

fn angular_quadrature(d: usize, mode: AngularMode, z: f64) -> f64 {
    let gl = rule(16);
    // beyond this angle the weight is below e^{-40}
    let end = if z > 10.0 { 2.0 * (20.0 / z).sqrt().asin() } else { PI };
    let first = if z > 4.0 { 0.5 / z.sqrt() } else { end };
    gl.graded(0.0, end, first, |phi| {
        let half = (0.5 * phi).sin();
        let e = (-2.0 * z * half * half).exp();
        let p = match mode {
            AngularMode::Radial => 1.0,
            AngularMode::Dipole => 1.0 - 2.0 * half * half,
        };
        e * p * polar_weight(d, phi)
    })
}

/// `e^{-z} I_n(z)` for `n ∈ {0, 1}`, `z ≥ 0`.
pub(crate) fn bessel_i_scaled(n: u32, z: f64) -> f64 {
    if z < 40.0 {
        // periodic trapezoid on (1/π)∫_0^π e^{-z(1−cos φ)} cos(nφ) dφ; the
        // aliasing error is of size I_{2N}(z)/I_0(z)
        let big_n = (12.0 + 1.3 * z).ceil() as usize;
        let h = PI / big_n as f64;
        let mut acc = 0.0;
        for k in 0..=big_n {
            let phi = k as f64 * h;
            let half = (0.5 * phi).sin();
            let w = if k == 0 || k == big_n { 0.5 } else { 1.0 };
            acc += w * (-2.0 * z * half * half).exp() * (n as f64 * phi).cos();
        }
        acc / big_n as f64
    } else {
        // Hankel expansion, terms fall below 1e-16 well before they start to grow
        let mu = 4.0 * (n * n) as f64;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..=20 {
            let j = (2 * k - 1) as f64;
            term *= -(mu - j * j) / (k as f64 * 8.0 * z);
            sum += term;
            if term.abs() < 1e-17 {
                break;
            }
        }
        sum / (2.0 * PI * z).sqrt()
    }
}

/// `e^{-z} i_n(z)` (modified spherical Bessel) for `n ∈ {0, 1}`, i.e. the
/// average of `e^{-z(1−c)} c^n` over `c ∈ [−1, 1]` up to the factor 2.
pub(crate) fn spherical_i_scaled(n: u32, z: f64) -> f64 {
    let e2 = (-2.0 * z).exp();
    match n {
        0 if z == 0.0 => 1.0,
        0 => -(-2.0 * z).exp_m1() / (2.0 * z),
        _ if z < 0.5 => {
            // e^{-z} Σ z^{2k+1}/((2k+3)!!(2k)!!)·… as a plain series
            let mut term = z / 3.0;
            let mut sum = term;
            for k in 1..12 {
                let kf = k as f64;
                term *= z * z / ((2.0 * kf) * (2.0 * kf + 3.0));
                sum += term;
            }
            (-z).exp() * sum
        }
        _ => 0.5 * ((1.0 + e2) / z + (e2 - 1.0) / (z * z)),
    }
}

/// Width of the Gaussian window, in units of `√t`; the weight there is below `e^{-42}`.
const WINDOW: f64 = 13.0;

/// Radial heat-kernel density `(4πt)^{-d/2} ρ^{d−1} e^{-(r−ρ)²/4t} A(rρ/2t)`.
/// The `(4πt)^{-d/2}` prefactor is left to the caller.
#[inline]
fn heat_weight(d: usize, mode: AngularMode, t: f64, r: f64, rho: f64) -> f64 {
    let g = (-(r - rho) * (r - rho) / (4.0 * t)).exp();
    if g == 0.0 {
        return 0.0;
    }
    rho.powi(d as i32 - 1) * g * angular_factor(d, mode, r * rho / (2.0 * t))
}

fn heat_norm(d: usize, t: f64) -> f64 {
    (4.0 * PI * t).powf(-0.5 * d as f64)
}

/// `(e^{tΔ}u)(r)` for `u = f(|x|)` (or the dipole `f(|x|)x₁/|x|`, returning the radial factor).
pub fn heat_apply<F: Fn(f64) -> f64>(d: usize, mode: AngularMode, f: F, t: f64, r: f64) -> f64 {
    if t == 0.0 {
        return f(r);
    }
    let w = WINDOW * t.sqrt();
    let lo = (r - w).max(0.0);
    let hi = r + w;
    let panels = ((hi - lo) / t.sqrt()).ceil().max(1.0) as usize;
    heat_norm(d, t) * rule(16).composite(lo, hi, panels, |rho| f(rho) * heat_weight(d, mode, t, r, rho))
}

/// `a(τ) = 1 − e^{-τ}`.
pub fn fokker_planck_time(tau: f64) -> f64 {
    -(-tau).exp_m1()
}

/// `S(τ)w = e^{a(τ)Δ}[D_τ w]` with `D_τ w(y) = e^{dτ/2} w(e^{τ/2}y)`: the flow of
/// `∂_τ w = Δw + ½∇·(ξw)`.
pub fn fokker_planck_apply<F: Fn(f64) -> f64>(d: usize, mode: AngularMode, f: F, tau: f64, r: f64) -> f64 {
    let s = (0.5 * tau).exp();
    let amp = (0.5 * d as f64 * tau).exp();
    heat_apply(d, mode, |y| amp * f(s * y), fokker_planck_time(tau), r)
}

/// Applies `e^{tΔ}` to the mass-exact reconstruction of `u` dilated by `s`
/// (`s^d u(s y)`), returning cell averages on the same grid.
fn heat_of_field(u: &DensityField, s: f64, t: f64) -> DensityField {
    let grid = u.grid().clone();
    let d = grid.d();
    let recon = QuadraticReconstruction::new(u);
    let amp = s.powi(d as i32);
    let faces: Vec<f64> = grid.faces().iter().map(|f| f / s).collect();
    let sqrt_t = t.sqrt();
    // the kernel is nearly polynomial across cells much narrower than √t
    let gl = if grid.h() / s < 0.25 * sqrt_t { rule(4) } else { rule(8) };
    let w = WINDOW * sqrt_t;
    let norm = amp * heat_norm(d, t);
    let eval = |r: f64| -> f64 {
        let lo = (r - w).max(0.0);
        let hi = r + w;
        let first = grid.locate(s * lo);
        let last = grid.locate(s * hi);
        let mut acc = 0.0;
        for i in first..=last {
            let (a, b) = (faces[i].max(lo), faces[i + 1].min(hi));
            if b <= a || u.values()[i] == 0.0 {
                continue;
            }
            let panels = ((b - a) / sqrt_t).ceil().clamp(1.0, 64.0) as usize;
            acc += gl.composite(a, b, panels, |y| {
                recon.eval(i, s * y) * heat_weight(d, AngularMode::Radial, t, r, y)
            });
        }
        norm * acc
    };
    let values = grid.par_sample(eval);
    DensityField::new(grid, values.into_iter().map(|v| v.max(0.0)).collect()).expect("nonnegative by construction")
}

/// `e^{tΔ}u0` on the grid of `u0`.
pub fn heat_semigroup(u0: &DensityField, t: f64) -> Result<DensityField> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("heat semigroup needs t >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(u0.clone());
    }
    Ok(heat_of_field(u0, 1.0, t))
}

/// `S(τ)w` on the grid of `w`.
pub fn fokker_planck_semigroup(w: &DensityField, tau: f64) -> Result<DensityField> {
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("Fokker-Planck semigroup needs τ >= 0, got {tau}")));
    }
    if tau == 0.0 {
        return Ok(w.clone());
    }
    Ok(heat_of_field(w, (0.5 * tau).exp(), fokker_planck_time(tau)))
}

/// `λ ↦ T`: `λ² − 1` in the linear frame and `(λ^d − 1)/d` in the nonlinear one.
pub fn shift_from_lambda(lambda: f64, mode: RescaleMode, d: usize) -> Result<f64> {
    if !(lambda >= 1.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("λ must be at least 1, got {lambda}")));
    }
    Ok(match mode {
        RescaleMode::LinearD2 => lambda * lambda - 1.0,
        RescaleMode::Nonlinear => (lambda.powi(d as i32) - 1.0) / d as f64,
    })
}

/// Similarity variables. With `A(t) = d(t+T)+1` (nonlinear) or `A(t) = t+T+1`
/// (linear, d = 2) and `S = A^{1/d}` or `A^{1/2}` respectively, the frame maps
/// `ξ = x/S`, `θ = A·u`, and `τ = log S` (nonlinear) or `τ = log A` (linear).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityFrame {
    pub mode: RescaleMode,
    pub d: usize,
    pub shift: f64,
}

impl SimilarityFrame {
    pub fn new(mode: RescaleMode, d: usize, shift: f64) -> Result<Self> {
        if mode == RescaleMode::LinearD2 && d != 2 {
            return Err(Error::Domain("the linear similarity frame is defined for d = 2 only".into()));
        }
        if d < 2 {
            return Err(Error::Domain(format!("dimension must be at least 2, got {d}")));
        }
        if !(shift >= 0.0) || !shift.is_finite() {
            return Err(Error::Domain(format!("time shift must be nonnegative, got {shift}")));
        }
        Ok(Self { mode, d, shift })
    }

    pub fn from_lambda(lambda: f64, mode: RescaleMode, d: usize) -> Result<Self> {
        Self::new(mode, d, shift_from_lambda(lambda, mode, d)?)
    }

    /// `A(t)`, the factor relating `θ` to `u`.
    pub fn amplitude(&self, t: f64) -> f64 {
        match self.mode {
            RescaleMode::Nonlinear => self.d as f64 * (t + self.shift) + 1.0,
            RescaleMode::LinearD2 => t + self.shift + 1.0,
        }
    }

    /// Spatial scale `S(t)` with `x = S ξ`.
    pub fn spatial_scale(&self, t: f64) -> f64 {
        let a = self.amplitude(t);
        match self.mode {
            RescaleMode::Nonlinear => a.powf(1.0 / self.d as f64),
            RescaleMode::LinearD2 => a.sqrt(),
        }
    }

    /// `τ = (1/d)·log A` (nonlinear) or `τ = log A` (linear).
    pub fn tau_of(&self, t: f64) -> f64 {
        match self.mode {
            RescaleMode::Nonlinear => self.amplitude(t).ln() / self.d as f64,
            RescaleMode::LinearD2 => self.amplitude(t).ln(),
        }
    }

    pub fn t_of(&self, tau: f64) -> f64 {
        match self.mode {
            RescaleMode::Nonlinear => (self.d as f64 * tau).exp_m1() / self.d as f64 - self.shift,
            RescaleMode::LinearD2 => tau.exp_m1() - self.shift,
        }
    }

    /// Initial similarity time `τ₀ = τ(t = 0)`.
    pub fn tau0(&self) -> f64 {
        self.tau_of(0.0)
    }

    /// Spatial scale expressed through `τ`: `e^τ` (nonlinear) or `e^{τ/2}` (linear).
    pub fn scale_at_tau(&self, tau: f64) -> f64 {
        match self.mode {
            RescaleMode::Nonlinear => tau.exp(),
            RescaleMode::LinearD2 => (0.5 * tau).exp(),
        }
    }

    /// Dilation and amplitude turning `k'` into the similarity-frame profile
    /// `ρ ↦ amplitude · k'(dilation · ρ)` at time `τ`.
    pub fn kernel_scaling(&self, tau: f64) -> (f64, f64) {
        let s = self.scale_at_tau(tau);
        match self.mode {
            RescaleMode::Nonlinear => (s, s.powi(self.d as i32 - 1)),
            RescaleMode::LinearD2 => (s, s),
        }
    }

    /// Confinement coefficient `c` in the drift `−c ξ`: 1 (nonlinear) or 1/2 (linear).
    pub fn confinement(&self) -> f64 {
        match self.mode {
            RescaleMode::Nonlinear => 1.0,
            RescaleMode::LinearD2 => 0.5,
        }
    }

    fn check_dim(&self, g: &RadialGrid) -> Result<()> {
        if g.d() != self.d {
            return Err(Error::GridMismatch(format!("frame has d = {}, grid has d = {}", self.d, g.d())));
        }
        Ok(())
    }

    /// `θ(τ, ξ) = A u(t, Sξ)` resampled onto `target`; returns `(θ, τ)`.
    pub fn to_similarity(&self, u: &DensityField, t: f64, target: Arc<RadialGrid>) -> Result<(DensityField, f64)> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("physical time must be nonnegative, got {t}")));
        }
        self.check_dim(&target)?;
        let (theta, _) = u.dilate(self.spatial_scale(t), target)?;
        Ok((theta, self.tau_of(t)))
    }

    /// Inverse of [`Self::to_similarity`]; returns `(u, t)`.
    pub fn from_similarity(&self, theta: &DensityField, tau: f64, target: Arc<RadialGrid>) -> Result<(DensityField, f64)> {
        let tau0 = self.tau0();
        if tau < tau0 - 1e-12 {
            return Err(Error::Domain(format!("τ = {tau} precedes the initial similarity time {tau0}")));
        }
        self.check_dim(&target)?;
        let t = self.t_of(tau).max(0.0);
        let (u, _) = theta.dilate(1.0 / self.spatial_scale(t), target)?;
        Ok((u, t))
    }
}

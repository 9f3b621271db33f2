//! Radial interaction potentials and the discrete attraction operator `∇K ∗ u`.
//!
//! Every potential is stored as `K(x) = k(|x|)`. The equation is advanced as
//! `u_t + ∇·(u ∇(K ∗ u)) = Δu^m`, so for the built-in attractive families
//! (`k' ≤ 0`) the velocity `∇K ∗ u` points toward the mass.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{DensityField, RadialGrid};
use crate::geometry::{polar_weight, sphere_area};
use crate::quadrature::GaussLegendre;

/// Config-level description of a kernel, e.g. `{ family = "bessel", alpha = 1.0 }`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Newtonian,
    Bessel { alpha: f64 },
    Gaussian { sigma: f64 },
    PowerDecay { gamma: f64, r0: f64 },
    Tabulated { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub enum KernelFamily {
    /// Fundamental solution of `-Δ`.
    Newtonian,
    /// Fundamental solution of `-Δ + α`.
    Bessel { alpha: f64 },
    /// Unit-mass Gaussian `(2πσ²)^{-d/2} exp(-r²/2σ²)`.
    Gaussian { sigma: f64 },
    /// `k'(r) = -r / (r0² + r²)^{(γ+1)/2}`.
    PowerDecay { gamma: f64, r0: f64 },
    /// Linear interpolation of sampled `k'`.
    Tabulated { r: Vec<f64>, k_prime: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionKernel {
    family: KernelFamily,
    d: usize,
    gamma_decay: Option<f64>,
}

/// Outcome of [`InteractionKernel::lq_gradient_norm`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LqNorm {
    Finite(f64),
    Divergent,
}

impl LqNorm {
    pub fn is_finite(&self) -> bool {
        matches!(self, LqNorm::Finite(_))
    }
}

impl InteractionKernel {
    pub fn new(family: KernelFamily, d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::Domain(format!("kernels need d >= 2, got {d}")));
        }
        let gamma_decay = match &family {
            KernelFamily::Newtonian => Some((d - 1) as f64),
            KernelFamily::Bessel { alpha } => {
                positive("alpha", *alpha)?;
                Some(f64::INFINITY)
            }
            KernelFamily::Gaussian { sigma } => {
                positive("sigma", *sigma)?;
                Some(f64::INFINITY)
            }
            KernelFamily::PowerDecay { gamma, r0 } => {
                positive("gamma", *gamma)?;
                positive("r0", *r0)?;
                Some(*gamma)
            }
            KernelFamily::Tabulated { r, k_prime } => {
                if r.len() != k_prime.len() || r.len() < 2 {
                    return Err(Error::InsufficientResolution(format!(
                        "tabulated kernel needs matching r/k' columns with at least 2 rows, got {} and {}",
                        r.len(),
                        k_prime.len()
                    )));
                }
                if r[0] <= 0.0 || r.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Domain("tabulated radii must be positive and increasing".into()));
                }
                None
            }
        };
        Ok(Self { family, d, gamma_decay })
    }

    pub fn newtonian(d: usize) -> Self {
        Self::new(KernelFamily::Newtonian, d).expect("valid dimension")
    }
    pub fn bessel(alpha: f64, d: usize) -> Result<Self> {
        Self::new(KernelFamily::Bessel { alpha }, d)
    }
    pub fn gaussian(sigma: f64, d: usize) -> Result<Self> {
        Self::new(KernelFamily::Gaussian { sigma }, d)
    }
    pub fn power_decay(gamma: f64, r0: f64, d: usize) -> Result<Self> {
        Self::new(KernelFamily::PowerDecay { gamma, r0 }, d)
    }
    pub fn tabulated(r: Vec<f64>, k_prime: Vec<f64>, d: usize) -> Result<Self> {
        Self::new(KernelFamily::Tabulated { r, k_prime }, d)
    }

    /// Builds a kernel from its config description; tabulated paths are resolved
    /// relative to `base_dir`.
    pub fn from_spec(spec: &KernelSpec, d: usize, base_dir: &Path) -> Result<Self> {
        match spec {
            KernelSpec::Newtonian => Self::new(KernelFamily::Newtonian, d),
            KernelSpec::Bessel { alpha } => Self::bessel(*alpha, d),
            KernelSpec::Gaussian { sigma } => Self::gaussian(*sigma, d),
            KernelSpec::PowerDecay { gamma, r0 } => Self::power_decay(*gamma, *r0, d),
            KernelSpec::Tabulated { path } => {
                let full = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                let (r, kp) = read_two_column_csv(&full)?;
                Self::tabulated(r, kp, d)
            }
        }
    }

    pub fn family(&self) -> &KernelFamily {
        &self.family
    }
    pub fn d(&self) -> usize {
        self.d
    }
    /// Exponent γ with `|∇K| ≲ r^{-γ}`; `∞` for exponentially decaying families.
    pub fn gamma_decay(&self) -> Option<f64> {
        self.gamma_decay
    }
    pub fn is_newtonian(&self) -> bool {
        matches!(self.family, KernelFamily::Newtonian)
    }

    fn singular_at_origin(&self) -> bool {
        matches!(self.family, KernelFamily::Newtonian | KernelFamily::Bessel { .. })
    }

    /// Characteristic length over which `k'` varies; `None` for the scale-free Newtonian kernel.
    pub fn length_scale(&self) -> Option<f64> {
        match &self.family {
            KernelFamily::Newtonian => None,
            KernelFamily::Bessel { alpha } => Some(1.0 / alpha.sqrt()),
            KernelFamily::Gaussian { sigma } => Some(*sigma),
            KernelFamily::PowerDecay { r0, .. } => Some(*r0),
            KernelFamily::Tabulated { r, .. } => {
                Some(r.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min))
            }
        }
    }

    /// Radius beyond which `|k'|` is below double precision relative to its scale.
    fn negligible_beyond(&self) -> f64 {
        match &self.family {
            KernelFamily::Gaussian { sigma } => 12.0 * sigma,
            KernelFamily::Bessel { alpha } => 40.0 / alpha.sqrt(),
            _ => f64::INFINITY,
        }
    }

    /// Signed `dk/dr`.
    pub fn eval_gradient(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) || !r.is_finite() {
            return Err(Error::Domain(format!("radius must be finite and nonnegative, got {r}")));
        }
        if r == 0.0 {
            if self.singular_at_origin() {
                return Err(Error::Domain("k'(0) is singular for this kernel".into()));
            }
            return Ok(0.0);
        }
        if let KernelFamily::Tabulated { r: rs, .. } = &self.family {
            let (lo, hi) = (rs[0], rs[rs.len() - 1]);
            if r < lo || r > hi {
                return Err(Error::Extrapolation { r, lo, hi });
            }
        }
        Ok(self.gradient_unchecked(r))
    }

    /// `k'(r)` without domain checks. Tabulated kernels are clamped to their end samples.
    #[inline]
    pub fn gradient_unchecked(&self, r: f64) -> f64 {
        let d = self.d;
        match &self.family {
            KernelFamily::Newtonian => -r.powi(1 - d as i32) / sphere_area(d),
            KernelFamily::Bessel { alpha } => {
                let s = alpha.sqrt();
                let nu = 0.5 * d as f64 - 1.0;
                let x = s * r;
                -(2.0 * PI).powf(-0.5 * d as f64) * s.powf(nu + 1.0) * r.powf(-nu) * bessel_k_scaled(nu + 1.0, x) * (-x).exp()
            }
            KernelFamily::Gaussian { sigma } => {
                let s2 = sigma * sigma;
                -r / s2 * (2.0 * PI * s2).powf(-0.5 * d as f64) * (-0.5 * r * r / s2).exp()
            }
            KernelFamily::PowerDecay { gamma, r0 } => -r * (r0 * r0 + r * r).powf(-0.5 * (gamma + 1.0)),
            KernelFamily::Tabulated { r: rs, k_prime } => interpolate(rs, k_prime, r),
        }
    }

    /// The potential `k(r)`; not available for tabulated kernels.
    pub fn eval_potential(&self, r: f64) -> Result<f64> {
        if !(r > 0.0) {
            return Err(Error::Domain(format!("potential needs r > 0, got {r}")));
        }
        let d = self.d;
        Ok(match &self.family {
            KernelFamily::Newtonian => {
                if d == 2 {
                    -r.ln() / (2.0 * PI)
                } else {
                    r.powi(2 - d as i32) / ((d - 2) as f64 * sphere_area(d))
                }
            }
            KernelFamily::Bessel { alpha } => {
                let s = alpha.sqrt();
                let nu = 0.5 * d as f64 - 1.0;
                let x = s * r;
                (2.0 * PI).powf(-0.5 * d as f64) * (s / r).powf(nu) * bessel_k_scaled(nu, x) * (-x).exp()
            }
            KernelFamily::Gaussian { sigma } => {
                let s2 = sigma * sigma;
                (2.0 * PI * s2).powf(-0.5 * d as f64) * (-0.5 * r * r / s2).exp()
            }
            KernelFamily::PowerDecay { gamma, r0 } => {
                let q = r0 * r0 + r * r;
                if (gamma - 1.0).abs() < 1e-12 {
                    -0.5 * q.ln()
                } else {
                    q.powf(0.5 * (1.0 - gamma)) / (gamma - 1.0)
                }
            }
            KernelFamily::Tabulated { .. } => {
                return Err(Error::Domain("tabulated kernels carry k' only".into()));
            }
        })
    }

    /// `‖∇K‖_q = (σ_{d-1} ∫ |k'|^q r^{d-1} dr)^{1/q}`, or `Divergent` when the core or
    /// tail integral keeps growing as the cutoffs move out.
    pub fn lq_gradient_norm(&self, q: f64) -> Result<LqNorm> {
        if !(q >= 1.0) || !q.is_finite() {
            return Err(Error::InvalidExponent(q));
        }
        let d = self.d as f64;
        if let KernelFamily::Tabulated { r, .. } = &self.family {
            let gl = GaussLegendre::new(8);
            let (lo, hi) = (r[0], r[r.len() - 1]);
            let val = gl.composite(lo, hi, 4 * r.len(), |x| self.gradient_unchecked(x).abs().powf(q) * x.powf(d - 1.0));
            return Ok(LqNorm::Finite((sphere_area(self.d) * val).powf(1.0 / q)));
        }
        let gl = GaussLegendre::new(16);
        // r = e^{-s} on the core, r = e^{s} on the tail
        let core = |s: f64| {
            let r = (-s).exp();
            self.gradient_unchecked(r).abs().powf(q) * (-s * d).exp()
        };
        let tail = |s: f64| {
            let r = s.exp();
            self.gradient_unchecked(r).abs().powf(q) * (s * d).exp()
        };
        // Integrate to a far cutoff, then look at the integrand's exponential rate
        // there: a positive rate gives a convergent remainder f(S)/κ, a zero or
        // negative rate is a power-law divergence.
        let settle = |f: &dyn Fn(f64) -> f64| -> Option<f64> {
            const S: f64 = 128.0;
            let body = gl.composite(0.0, S, 256, |s| f(s));
            let end = f(S);
            if !body.is_finite() || !end.is_finite() {
                return None;
            }
            if end <= 1e-18 * body.abs() {
                return Some(body);
            }
            let rate = (f(S - 8.0) / end).ln() / 8.0;
            if rate > 1e-4 {
                Some(body + end / rate)
            } else {
                None
            }
        };
        let (Some(c), Some(t)) = (settle(&core), settle(&tail)) else {
            return Ok(LqNorm::Divergent);
        };
        let total = sphere_area(self.d) * (c + t);
        Ok(LqNorm::Finite(total.powf(1.0 / q)))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("kernel parameter {name} must be positive, got {v}")))
    }
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let i = xs.partition_point(|&v| v <= x) - 1;
    let s = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] * (1.0 - s) + ys[i + 1] * s
}

/// Reads a two-column CSV `(r, k_prime)`; a non-numeric first line is a header.
pub fn read_two_column_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = cols.iter().take(2).map(|c| c.parse::<f64>()).collect();
        match parsed {
            Ok(v) if v.len() == 2 => {
                a.push(v[0]);
                b.push(v[1]);
            }
            _ if i == 0 => continue,
            _ => {
                return Err(Error::Parse { path: path.into(), line: i + 1, message: format!("expected two numbers, got `{line}`") });
            }
        }
    }
    Ok((a, b))
}

/// `e^x K_ν(x)` from `K_ν(x) = ∫_0^∞ exp(-x cosh t) cosh(νt) dt`.
///
/// The trapezoid rule is spectrally accurate here (the integrand is even and
/// analytic in the strip |Im t| < π/2), so modest steps reach ~1e-15.
pub fn bessel_k_scaled(nu: f64, x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let twice = 2.0 * nu;
    if twice == twice.round() && nu >= 0.0 && nu <= 64.0 {
        return bessel_k_scaled_recurrence(nu, x);
    }
    bessel_k_scaled_integral(nu, x)
}

/// Integer and half-integer orders by upward recurrence
/// `K_{ν+1} = K_{ν−1} + (2ν/x) K_ν`, which is stable for `K`.
fn bessel_k_scaled_recurrence(nu: f64, x: f64) -> f64 {
    let (mut lo, mut hi, mut order) = if nu.fract() == 0.0 {
        let (k0, k1) = bessel_k01_scaled(x);
        (k0, k1, 0.0)
    } else {
        let k = (PI / (2.0 * x)).sqrt();
        (k, k * (1.0 + 1.0 / x), 0.5)
    };
    if nu == order {
        return lo;
    }
    while order + 1.0 < nu {
        let next = lo + 2.0 * (order + 1.0) / x * hi;
        lo = hi;
        hi = next;
        order += 1.0;
    }
    hi
}

/// `(e^x K_0(x), e^x K_1(x))`: ascending series for `x ≤ 2`, Steed's continued
/// fraction beyond.
fn bessel_k01_scaled(x: f64) -> (f64, f64) {
    const EULER: f64 = 0.577_215_664_901_532_9;
    if x <= 2.0 {
        let t = 0.25 * x * x;
        let log_half = (0.5 * x).ln();
        // term_k = t^k / (k!)², harmonic H_k
        let (mut term0, mut i0, mut s0) = (1.0, 1.0, 0.0);
        let (mut term1, mut i1, mut s1) = (1.0, 1.0, 1.0 - 2.0 * EULER);
        let mut harmonic = 0.0;
        for k in 1..40 {
            let kf = k as f64;
            harmonic += 1.0 / kf;
            term0 *= t / (kf * kf);
            term1 *= t / (kf * (kf + 1.0));
            i0 += term0;
            s0 += term0 * harmonic;
            i1 += term1;
            // ψ(k+1) + ψ(k+2) = 2H_k + 1/(k+1) − 2γ
            s1 += term1 * (2.0 * harmonic + 1.0 / (kf + 1.0) - 2.0 * EULER);
            if term0 < 1e-17 * i0 {
                break;
            }
        }
        let k0 = -(log_half + EULER) * i0 + s0;
        let i1 = 0.5 * x * i1;
        let k1 = 1.0 / x + log_half * i1 - 0.25 * x * s1;
        let e = x.exp();
        return (k0 * e, k1 * e);
    }
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut h = d;
    let mut delh = d;
    let (mut q1, mut q2) = (0.0, 1.0);
    let a1 = 0.25;
    let (mut q, mut c) = (a1, a1);
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..10_000 {
        let fi = i as f64;
        a -= 2.0 * (fi - 1.0);
        c = -a * c / fi;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh *= b * d - 1.0;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < 1e-16 {
            break;
        }
    }
    h *= a1;
    let k0 = (PI / (2.0 * x)).sqrt() / s;
    let k1 = k0 * (x + 0.5 - h) / x;
    (k0, k1)
}

fn bessel_k_scaled_integral(nu: f64, x: f64) -> f64 {
    // the integrand narrows like x^{-1/2} for large x
    let step = (0.5 / x.sqrt()).min(0.25);
    let mut acc = 0.5;
    let mut k = 1;
    loop {
        let t = step * k as f64;
        // cosh t − 1 = 2 sinh²(t/2), stable for small t
        let e = -x * 2.0 * (0.5 * t).sinh().powi(2);
        let term = (e + nu * t).exp() * 0.5 * (1.0 + (-2.0 * nu * t).exp());
        acc += term;
        if term < 1e-18 * acc && e < -40.0 {
            break;
        }
        k += 1;
        if k > 100_000 {
            break;
        }
    }
    acc * step
}

/// Settings for [`InteractionKernel::admissibility_probe`].
#[derive(Clone, Debug)]
pub struct ProbeSettings {
    /// Width of the monotonicity window `(0, δ)`; defaults to `min(1, r_max/10)`.
    pub delta: Option<f64>,
    /// Threshold for `sup |D³K| r^{d+1}`.
    pub bd_constant: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self { delta: None, bd_constant: 10.0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AdmissibilityReport {
    pub kn_ok: bool,
    pub mn_ok: bool,
    pub bd_ok: bool,
    pub delta: f64,
    pub bd_sup: f64,
    pub details: Vec<String>,
}

impl InteractionKernel {
    /// Numeric probes of the admissibility conditions on `(0, r_max]`.
    pub fn admissibility_probe(&self, r_max: f64, n_samples: usize, settings: &ProbeSettings) -> Result<AdmissibilityReport> {
        if let KernelFamily::Tabulated { r, .. } = &self.family {
            if r.len() < 16 {
                return Err(Error::InsufficientResolution(format!(
                    "admissibility probe needs at least 16 tabulated samples, got {}",
                    r.len()
                )));
            }
        }
        if n_samples < 8 || !(r_max > 0.0) {
            return Err(Error::InsufficientResolution(format!("need r_max > 0 and >= 8 samples, got {n_samples}")));
        }
        let (lo, hi) = match &self.family {
            KernelFamily::Tabulated { r, .. } => (r[0] * 1.01, r_max.min(r[r.len() - 1] * 0.99)),
            _ => (r_max * 1e-4, r_max),
        };
        let delta = settings.delta.unwrap_or_else(|| (r_max / 10.0).min(1.0));
        let samples: Vec<f64> = (0..n_samples)
            .map(|i| lo * (hi / lo).powf(i as f64 / (n_samples - 1) as f64))
            .collect();
        let kp = |r: f64| self.gradient_unchecked(r);
        let k2 = |r: f64| {
            let e = 1e-4 * r;
            (kp(r + e) - kp(r - e)) / (2.0 * e)
        };
        let k3 = |r: f64| {
            let e = 2e-3 * r;
            (kp(r + e) - 2.0 * kp(r) + kp(r - e)) / (e * e)
        };
        let near: Vec<f64> = samples.iter().cloned().filter(|&r| r < delta).collect();
        let mut details = Vec::new();

        let kn_ok = sign_constant(near.iter().map(|&r| kp(r)));
        if !kn_ok {
            details.push(format!("k' changes sign on (0, {delta})"));
        }
        let mono_k2 = monotone(&near.iter().map(|&r| k2(r)).collect::<Vec<_>>());
        let mono_kr = monotone(&near.iter().map(|&r| kp(r) / r).collect::<Vec<_>>());
        if !mono_k2 {
            details.push(format!("k'' is not monotone on (0, {delta})"));
        }
        if !mono_kr {
            details.push(format!("k'/r is not monotone on (0, {delta})"));
        }
        let dim = self.d as i32;
        let bd_sup = samples
            .iter()
            .map(|&r| {
                let radial = (k2(r) - kp(r) / r).abs() / r;
                k3(r).abs().max(radial) * r.powi(dim + 1)
            })
            .fold(0.0, f64::max);
        let bd_ok = bd_sup.is_finite() && bd_sup <= settings.bd_constant;
        if !bd_ok {
            details.push(format!("sup |D^3 K| r^(d+1) = {bd_sup:.3e} exceeds {}", settings.bd_constant));
        }
        Ok(AdmissibilityReport { kn_ok, mn_ok: mono_k2 && mono_kr, bd_ok, delta, bd_sup, details })
    }
}

fn sign_constant<I: Iterator<Item = f64>>(it: I) -> bool {
    let mut sign = 0.0;
    for v in it {
        if v == 0.0 {
            continue;
        }
        if sign == 0.0 {
            sign = v.signum();
        } else if v.signum() != sign {
            return false;
        }
    }
    true
}

fn monotone(v: &[f64]) -> bool {
    let scale = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let tol = 1e-7 * scale;
    let diffs = v.windows(2).map(|w| w[1] - w[0]).filter(|dv| dv.abs() > tol);
    sign_constant(diffs)
}

/// `k_eff'(ρ) = amplitude · k'(dilation · ρ)`: the interaction kernel as seen in
/// similarity variables.
#[derive(Clone, Debug)]
pub struct ScaledKernel {
    pub kernel: Arc<InteractionKernel>,
    pub dilation: f64,
    pub amplitude: f64,
}

impl ScaledKernel {
    pub fn identity(kernel: Arc<InteractionKernel>) -> Self {
        Self { kernel, dilation: 1.0, amplitude: 1.0 }
    }

    #[inline]
    pub fn gradient(&self, rho: f64) -> f64 {
        self.amplitude * self.kernel.gradient_unchecked(self.dilation * rho)
    }

    fn length_scale(&self) -> f64 {
        self.kernel.length_scale().map_or(f64::INFINITY, |l| l / self.dilation)
    }

    fn negligible_beyond(&self) -> f64 {
        self.kernel.negligible_beyond() / self.dilation
    }
}

/// `r^{d−1} k'(r)` of the base kernel on a uniform grid in `ln r`, interpolated
/// with four-point Lagrange weights. Used where direct evaluation is costly.
#[derive(Clone, Debug)]
struct GradientTable {
    u0: f64,
    inv_du: f64,
    values: Vec<f64>,
}

impl GradientTable {
    const DU: f64 = 1e-3;

    fn new(kernel: &InteractionKernel, r_lo: f64, r_hi: f64) -> Self {
        let (u0, u1) = (r_lo.ln(), r_hi.ln());
        let n = ((u1 - u0) / Self::DU).ceil() as usize + 4;
        let d = kernel.d() as i32;
        let values = (0..n)
            .map(|j| {
                let r = (u0 + (j as f64 - 1.0) * Self::DU).exp();
                r.powi(d - 1) * kernel.gradient_unchecked(r)
            })
            .collect();
        Self { u0: u0 - Self::DU, inv_du: 1.0 / Self::DU, values }
    }

    /// `None` outside the tabulated range.
    #[inline]
    fn eval(&self, r: f64) -> Option<f64> {
        let x = (r.ln() - self.u0) * self.inv_du;
        let j = x.floor();
        if !(j >= 1.0) || j as usize + 2 >= self.values.len() {
            return None;
        }
        let j = j as usize;
        let t = x - j as f64;
        let v = &self.values[j - 1..j + 3];
        // Lagrange weights on nodes −1, 0, 1, 2
        let w0 = -t * (t - 1.0) * (t - 2.0) / 6.0;
        let w1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
        let w2 = -(t + 1.0) * t * (t - 2.0) / 2.0;
        let w3 = (t + 1.0) * t * (t - 1.0) / 6.0;
        Some(w0 * v[0] + w1 * v[1] + w2 * v[2] + w3 * v[3])
    }
}

/// Gradient evaluation used while assembling a matrix.
struct FastGradient<'a> {
    kernel: &'a ScaledKernel,
    table: Option<GradientTable>,
}

impl<'a> FastGradient<'a> {
    fn new(kernel: &'a ScaledKernel) -> Self {
        let base = &kernel.kernel;
        let table = match base.family() {
            KernelFamily::Bessel { .. } => {
                let ell = base.length_scale().expect("bessel kernels have a length scale");
                Some(GradientTable::new(base, 1e-6 * ell, base.negligible_beyond()))
            }
            _ => None,
        };
        Self { kernel, table }
    }

    #[inline]
    fn gradient(&self, rho: f64) -> f64 {
        let x = self.kernel.dilation * rho;
        if let Some(g) = self.table.as_ref().and_then(|t| t.eval(x)) {
            return self.kernel.amplitude * g * x.powi(1 - self.kernel.kernel.d() as i32);
        }
        self.kernel.amplitude * self.kernel.kernel.gradient_unchecked(x)
    }
}

#[derive(Clone, Debug)]
enum Route {
    /// Row-major `targets × n` weights.
    Matrix(Vec<f64>),
    /// Enclosed mass over sphere area, times this prefactor.
    ShellTheorem(f64),
}

/// Linear map from cell densities to the radial component of `∇K ∗ u` at a set of radii.
#[derive(Clone, Debug)]
pub struct RadialConvolutionOperator {
    grid: Arc<RadialGrid>,
    targets: Vec<f64>,
    route: Route,
    quadrature_order: usize,
    kernel: ScaledKernel,
}

/// Options for [`RadialConvolutionOperator::build`].
#[derive(Clone, Debug)]
pub struct ConvolutionOptions {
    /// Gauss–Legendre order per graded panel of the polar-angle integral (≥ 8).
    pub quadrature_order: usize,
    /// Largest permitted number of matrix entries.
    pub matrix_cap: usize,
    /// Use the matrix even for Newtonian kernels.
    pub force_matrix: bool,
}

impl Default for ConvolutionOptions {
    fn default() -> Self {
        Self { quadrature_order: 16, matrix_cap: 50_000_000, force_matrix: false }
    }
}

/// Operator evaluating at the cell centers of `grid`.
pub fn build_convolution(kernel: &InteractionKernel, grid: Arc<RadialGrid>, quadrature_order: usize) -> Result<RadialConvolutionOperator> {
    let targets = grid.centers().to_vec();
    let opts = ConvolutionOptions { quadrature_order, ..Default::default() };
    RadialConvolutionOperator::build(ScaledKernel::identity(Arc::new(kernel.clone())), grid, targets, &opts)
}

impl RadialConvolutionOperator {
    pub fn build(kernel: ScaledKernel, grid: Arc<RadialGrid>, targets: Vec<f64>, opts: &ConvolutionOptions) -> Result<Self> {
        if opts.quadrature_order < 8 {
            return Err(Error::Domain(format!("quadrature order must be at least 8, got {}", opts.quadrature_order)));
        }
        if kernel.kernel.d() != grid.d() {
            return Err(Error::GridMismatch(format!("kernel built for d = {}, grid has d = {}", kernel.kernel.d(), grid.d())));
        }
        if kernel.kernel.is_newtonian() && !opts.force_matrix {
            let prefactor = kernel.amplitude * kernel.dilation.powi(1 - grid.d() as i32);
            return Ok(Self { grid, targets, route: Route::ShellTheorem(prefactor), quadrature_order: opts.quadrature_order, kernel });
        }
        let n = grid.n();
        let entries = targets.len().saturating_mul(n);
        if entries > opts.matrix_cap {
            return Err(Error::MatrixTooLarge { rows: targets.len(), cols: n, cap: opts.matrix_cap });
        }
        if let KernelFamily::Tabulated { r, .. } = kernel.kernel.family() {
            let far = kernel.dilation * (grid.r_max() + targets.iter().cloned().fold(0.0, f64::max));
            if r[r.len() - 1] < far {
                return Err(Error::Extrapolation { r: far, lo: r[0], hi: r[r.len() - 1] });
            }
        }
        let angular = GaussLegendre::new(opts.quadrature_order);
        let radial = GaussLegendre::new(6);
        let mut matrix = vec![0.0; entries];
        let grad = FastGradient::new(&kernel);
        matrix
            .par_chunks_mut(n)
            .zip(targets.par_iter())
            .for_each(|(row, &r)| fill_row(row, r, &grad, &grid, &angular, &radial));
        Ok(Self { grid, targets, route: Route::Matrix(matrix), quadrature_order: opts.quadrature_order, kernel })
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }
    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
    pub fn quadrature_order(&self) -> usize {
        self.quadrature_order
    }
    pub fn kernel(&self) -> &ScaledKernel {
        &self.kernel
    }
    pub fn uses_shell_theorem(&self) -> bool {
        matches!(self.route, Route::ShellTheorem(_))
    }

    /// Matrix weights, row-major; `None` on the shell-theorem route.
    pub fn matrix(&self) -> Option<&[f64]> {
        match &self.route {
            Route::Matrix(m) => Some(m),
            Route::ShellTheorem(_) => None,
        }
    }

    /// Radial component of `∇K ∗ u` at each target radius.
    pub fn attraction_velocity(&self, u: &DensityField) -> Result<Vec<f64>> {
        if **u.grid() != *self.grid {
            return Err(Error::GridMismatch("density lives on a different grid than the operator".into()));
        }
        let mut out = vec![0.0; self.targets.len()];
        self.apply_into(u.values(), &mut out);
        Ok(out)
    }

    /// Unchecked application to raw cell values.
    pub fn apply_into(&self, values: &[f64], out: &mut [f64]) {
        let n = self.grid.n();
        match &self.route {
            Route::Matrix(m) => {
                for (o, row) in out.iter_mut().zip(m.chunks(n)) {
                    *o = row.iter().zip(values).map(|(a, b)| a * b).sum();
                }
            }
            Route::ShellTheorem(pref) => {
                let g = &self.grid;
                let d = g.d() as i32;
                let sigma = sphere_area(g.d());
                let faces = g.faces();
                let vols = g.volumes();
                // targets are visited in any order; cumulative masses make each O(1)
                let mut cum = Vec::with_capacity(n + 1);
                cum.push(0.0);
                for i in 0..n {
                    cum.push(cum[i] + vols[i] * values[i]);
                }
                for (o, &r) in out.iter_mut().zip(&self.targets) {
                    if r <= 0.0 {
                        *o = 0.0;
                        continue;
                    }
                    let enclosed = if r >= g.r_max() {
                        cum[n]
                    } else {
                        let i = g.locate(r);
                        cum[i] + values[i] * sigma * (r.powi(d) - faces[i].powi(d)) / d as f64
                    };
                    *o = -pref * enclosed / (sigma * r.powi(d - 1));
                }
            }
        }
    }
}

/// `W(r, ρ) = ∫_{S^{d-1}} k'(s) (r − ρ cos φ)/s dω`, `s = |r e − ρ ω|`: the radial
/// velocity at radius `r` induced by a unit-density sphere of radius `ρ`.
fn shell_response(r: f64, rho: f64, grad: &FastGradient, d: usize, gl: &GaussLegendre) -> f64 {
    let kernel = grad.kernel;
    let dr = r - rho;
    let big = r.max(rho);
    let ell = kernel.length_scale();
    let cutoff = kernel.negligible_beyond();
    if dr.abs() > cutoff {
        return 0.0;
    }
    // beyond φ_max the separation exceeds the cutoff
    let reach = (cutoff * cutoff - dr * dr) / (4.0 * r * rho);
    let phi_max = if reach < 1.0 { 2.0 * reach.sqrt().asin() } else { PI };
    let first = (dr.abs().min(ell) / big).clamp(1e-12, phi_max);
    let integrand = |phi: f64| {
        let sh = (0.5 * phi).sin();
        let s2 = dr * dr + 4.0 * r * rho * sh * sh;
        let s = s2.sqrt();
        if s > cutoff || s == 0.0 {
            return 0.0;
        }
        let proj = dr + 2.0 * rho * sh * sh;
        grad.gradient(s) * proj / s * polar_weight(d, phi)
    };
    gl.graded(0.0, phi_max, first, integrand)
}

fn fill_row(row: &mut [f64], r: f64, grad: &FastGradient, grid: &RadialGrid, angular: &GaussLegendre, radial: &GaussLegendre) {
    let kernel = grad.kernel;
    if r <= 0.0 {
        return;
    }
    let d = grid.d();
    let n = grid.n();
    let h = grid.h();
    let ell = kernel.length_scale();
    let cutoff = kernel.negligible_beyond();
    let first = (0.25 * ell).min(0.125 * h);
    let weight = |rho: f64| shell_response(r, rho, grad, d, angular) * rho.powi(d as i32 - 1);

    // ∫_a^b weight(ρ) · basis(ρ) with panels graded toward r
    let integrate = |a: f64, b: f64, basis: &dyn Fn(f64) -> f64| -> f64 {
        let mut pieces = Vec::with_capacity(2);
        if r > a && r < b {
            pieces.push((a, r));
            pieces.push((r, b));
        } else {
            pieces.push((a, b));
        }
        let mut acc = 0.0;
        for (p, q) in pieces {
            let dist = if r <= p { p - r } else if r >= q { r - q } else { 0.0 };
            if dist > cutoff {
                continue;
            }
            let f = |rho: f64| weight(rho) * basis(rho);
            if dist < 2.0 * h || dist < 12.0 * ell {
                // grade from the end nearest r
                let toward_p = (r - p).abs() <= (r - q).abs();
                if toward_p {
                    acc += radial.graded(p, q, first.max(dist.min(q - p)), f);
                } else {
                    acc += radial.graded(0.0, q - p, first.max(dist.min(q - p)), |x| f(q - x));
                }
            } else {
                acc += radial.integrate(p, q, f);
            }
        }
        acc
    };

    // cell indicators: each column carries exactly its cell's mass
    let f = grid.faces();
    for k in 0..n {
        row[k] = integrate(f[k], f[k + 1], &|_| 1.0);
    }
}

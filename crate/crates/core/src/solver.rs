//! Explicit finite-volume integration of `u_t + ∇·(u ∇(K ∗ u)) = Δu^m` on a radial
//! mesh, in physical variables or in the similarity frame
//! `θ_τ = Δθ^m + ∇·(c ξ θ) − ∇·(θ ∇K_τ ∗ θ)`.
//!
//! Time stepping is SSP-RK2. Face fluxes come in four flavours (see [`FluxScheme`]);
//! all of them are conservative, so mass changes only through clipping and the
//! (recorded, not applied) outflow at `R_max`.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::closed_forms::{fokker_planck_semigroup, heat_semigroup, BarenblattProfile, SimilarityFrame};
use crate::entropy::{discrete_minimizer, entropy_h, entropy_i_floored};
use crate::error::{Error, Result};
use crate::fields::{minmod, DensityField, RadialGrid, RescaleMode};
use crate::kernels::{ConvolutionOptions, InteractionKernel, RadialConvolutionOperator, ScaledKernel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variables {
    Physical,
    Similarity,
}

/// Face-flux discretization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluxScheme {
    /// `EntropyUpwind` for `m > 1`, `ScharfetterGummel` for `m = 1`.
    #[default]
    Auto,
    /// Upwinding of the total velocity `−∇(m/(m−1)θ^{m−1}) + v`; steady states of
    /// the form `m/(m−1)θ^{m−1} + Φ = const` are reproduced exactly.
    EntropyUpwind,
    /// Exponentially fitted two-point flux for `m = 1`; exact for Gibbs states `e^{-Φ}`.
    ScharfetterGummel,
    /// Two-point `u^m` gradient plus first-order upwind advection.
    Upwind,
    /// As `Upwind` with minmod-limited face values for the advective part.
    UpwindMinmod,
}

/// Which closed-form solution the L¹ distance is measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    #[default]
    None,
    /// `𝒰(t, ·; M)`, for `m = 2 − 2/d`.
    Barenblatt,
    /// `e^{tΔ}u0`, for `m = 1`.
    Heat,
}

/// End of the integration window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    /// Physical end time `t_end`.
    Time(f64),
    /// Similarity-time span `τ_end − τ₀` (similarity variables only).
    TauSpan(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlowupThresholds {
    /// Peak must reach this multiple of the initial peak.
    pub peak_factor: f64,
    /// Step size must fall to this fraction of the first step.
    pub dt_floor_ratio: f64,
    /// Number of trailing steps over which the second moment must decrease.
    pub window: usize,
}

impl Default for BlowupThresholds {
    fn default() -> Self {
        Self { peak_factor: 1e3, dt_floor_ratio: 0.5, window: 50 }
    }
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub d: usize,
    pub m: f64,
    pub kernel: Option<Arc<InteractionKernel>>,
    pub variables: Variables,
    /// Time shift `T` of the similarity frame.
    pub shift: f64,
    pub n: usize,
    pub r_max: f64,
    pub cfl: f64,
    pub horizon: Horizon,
    /// Diagnostics cadence in the integration time (`t` or `τ`).
    pub diag_every: f64,
    pub snapshot_every: Option<f64>,
    pub blowup: BlowupThresholds,
    /// Support floor (relative to the peak) for the entropy production.
    pub theta_floor: f64,
    pub scheme: FluxScheme,
    /// Similarity-time interval between rebuilds of the scaled attraction operator.
    pub rebuild_interval: f64,
    pub quadrature_order: usize,
    pub reference: Reference,
    /// Exponent of the recorded `L^p` norm.
    pub lp_exponent: f64,
    /// Weight exponent of the recorded `L²(β)` norm.
    pub beta: f64,
    pub max_steps: u64,
}

impl SolverConfig {
    /// Defaults for the critical exponent of dimension `d` (`m = 1` in d = 2).
    pub fn new(d: usize, n: usize, r_max: f64, horizon: Horizon) -> Self {
        let m = if d == 2 { 1.0 } else { 2.0 - 2.0 / d as f64 };
        let lp = if m > 1.0 { 2.0 * m / (m - 1.0) } else { 2.0 };
        Self {
            d,
            m,
            kernel: None,
            variables: Variables::Physical,
            shift: 0.0,
            n,
            r_max,
            cfl: 0.4,
            horizon,
            diag_every: 0.05,
            snapshot_every: None,
            blowup: BlowupThresholds::default(),
            theta_floor: 1e-12,
            scheme: FluxScheme::Auto,
            rebuild_interval: 0.1,
            quadrature_order: 16,
            reference: Reference::None,
            lp_exponent: lp,
            beta: 2.5,
            max_steps: 20_000_000,
        }
    }

    pub fn frame_mode(&self) -> RescaleMode {
        if self.m == 1.0 {
            RescaleMode::LinearD2
        } else {
            RescaleMode::Nonlinear
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config { field: field.into(), message: msg });
        if self.d < 2 {
            return bad("d", format!("dimension must be at least 2, got {}", self.d));
        }
        if self.m == 1.0 {
            if self.d != 2 {
                return bad("m", format!("m = 1 is the critical case only in d = 2, got d = {}", self.d));
            }
        } else if (self.m - (2.0 - 2.0 / self.d as f64)).abs() > 1e-12 || self.d < 3 {
            return bad(
                "m",
                format!("m must be 2 - 2/d = {} for d = {} or 1 in d = 2", 2.0 - 2.0 / self.d as f64, self.d),
            );
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return bad("cfl", format!("CFL number must lie in (0, 1], got {}", self.cfl));
        }
        if self.n < 4 {
            return bad("grid.n", format!("need at least 4 cells, got {}", self.n));
        }
        if !(self.r_max > 0.0) {
            return bad("grid.r_max", format!("must be positive, got {}", self.r_max));
        }
        if !(self.shift >= 0.0) {
            return bad("shift", format!("time shift must be nonnegative, got {}", self.shift));
        }
        match self.horizon {
            Horizon::Time(t) if !(t > 0.0) => return bad("t_end", format!("must be positive, got {t}")),
            Horizon::TauSpan(s) if !(s > 0.0) => return bad("tau_span", format!("must be positive, got {s}")),
            Horizon::TauSpan(_) if self.variables == Variables::Physical => {
                return bad("tau_span", "a similarity-time horizon needs similarity variables".into())
            }
            _ => {}
        }
        if !(self.diag_every > 0.0) {
            return bad("diag_every", format!("must be positive, got {}", self.diag_every));
        }
        if let Some(s) = self.snapshot_every {
            if !(s > 0.0) {
                return bad("snapshot_every", format!("must be positive, got {s}"));
            }
        }
        if let Some(k) = &self.kernel {
            if k.d() != self.d {
                return bad("kernel", format!("kernel built for d = {}, solver has d = {}", k.d(), self.d));
            }
        }
        match (self.scheme, self.m == 1.0) {
            (FluxScheme::EntropyUpwind, true) => {
                return bad("scheme", "entropy_upwind needs m > 1; use scharfetter_gummel for m = 1".into())
            }
            (FluxScheme::ScharfetterGummel, false) => return bad("scheme", "scharfetter_gummel is for m = 1".into()),
            _ => {}
        }
        match (self.reference, self.m == 1.0) {
            (Reference::Barenblatt, true) => return bad("reference", "the Barenblatt reference needs m = 2 - 2/d".into()),
            (Reference::Heat, false) => return bad("reference", "the heat reference needs m = 1".into()),
            _ => {}
        }
        if !(self.blowup.peak_factor > 1.0) || !(self.blowup.dt_floor_ratio > 0.0) || self.blowup.window < 2 {
            return bad("blowup", "need peak_factor > 1, dt_floor_ratio > 0 and window >= 2".into());
        }
        if !(self.rebuild_interval > 0.0) {
            return bad("rebuild_interval", "must be positive".into());
        }
        if !(self.lp_exponent >= 1.0) {
            return bad("lp_exponent", format!("need p >= 1, got {}", self.lp_exponent));
        }
        Ok(())
    }

    fn resolved_scheme(&self) -> FluxScheme {
        match self.scheme {
            FluxScheme::Auto if self.m == 1.0 => FluxScheme::ScharfetterGummel,
            FluxScheme::Auto => FluxScheme::EntropyUpwind,
            s => s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationStatus {
    Completed,
    BlowupDetected,
    DomainExhausted,
}

impl TerminationStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            TerminationStatus::Completed => "completed",
            TerminationStatus::BlowupDetected => "blowup_detected",
            TerminationStatus::DomainExhausted => "domain_exhausted",
        }
    }
}

/// The integrated density (`u` or `θ`) with its clock and bookkeeping.
#[derive(Clone, Debug)]
pub struct SolverState {
    pub field: DensityField,
    /// `t` in physical variables, `τ` in similarity variables.
    pub time: f64,
    pub steps: u64,
    /// Total mass removed by clipping negative cells.
    pub clipped_mass: f64,
    /// Mass that would have left through `R_max` had the boundary been open.
    pub outflow: f64,
}

#[inline]
fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - 0.5 * x
    } else {
        x / x.exp_m1()
    }
}

/// Stepper for one configuration. Holds the attraction operator cache.
pub struct Solver {
    config: SolverConfig,
    grid: Arc<RadialGrid>,
    frame: Option<SimilarityFrame>,
    scheme: FluxScheme,
    operator: Option<RadialConvolutionOperator>,
    /// Similarity-time window `[lo, hi)` in which the cached operator is used.
    operator_window: (f64, f64),
    /// Drift velocities at faces `1..=n`.
    velocity: Vec<f64>,
}

impl Solver {
    pub fn new(config: SolverConfig) -> Result<Self> {
        config.validate()?;
        let grid = Arc::new(RadialGrid::new(config.d, config.n, config.r_max)?);
        let frame = match config.variables {
            Variables::Similarity => Some(SimilarityFrame::new(config.frame_mode(), config.d, config.shift)?),
            Variables::Physical => None,
        };
        let scheme = config.resolved_scheme();
        let n = grid.n();
        Ok(Self { config, grid, frame, scheme, operator: None, operator_window: (f64::NAN, f64::NAN), velocity: vec![0.0; n] })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }
    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }
    pub fn frame(&self) -> Option<&SimilarityFrame> {
        self.frame.as_ref()
    }
    pub fn scheme(&self) -> FluxScheme {
        self.scheme
    }

    /// Integration start time: 0, or `τ₀` in similarity variables.
    pub fn start_time(&self) -> f64 {
        self.frame.map_or(0.0, |f| f.tau0())
    }

    /// Integration end time in the integration clock.
    pub fn end_time(&self) -> f64 {
        match (self.config.horizon, &self.frame) {
            (Horizon::Time(t), None) => t,
            (Horizon::Time(t), Some(f)) => f.tau_of(t),
            (Horizon::TauSpan(s), Some(f)) => f.tau0() + s,
            (Horizon::TauSpan(s), None) => s,
        }
    }

    /// Physical time for an integration time.
    pub fn physical_time(&self, time: f64) -> f64 {
        self.frame.map_or(time, |f| f.t_of(time))
    }

    /// `L^∞` of the physical density given the integrated field.
    pub fn physical_peak(&self, state: &SolverState) -> f64 {
        let peak = state.field.lp_norm(f64::INFINITY).unwrap_or(f64::NAN);
        match &self.frame {
            Some(f) => peak / f.amplitude(self.physical_time(state.time)),
            None => peak,
        }
    }

    fn ensure_operator(&mut self, time: f64) -> Result<()> {
        let Some(kernel) = self.config.kernel.clone() else {
            return Ok(());
        };
        let scaled = match &self.frame {
            None => {
                if self.operator.is_some() {
                    return Ok(());
                }
                ScaledKernel::identity(kernel)
            }
            Some(frame) => {
                if kernel.is_newtonian() && self.operator.is_some() {
                    // the Newtonian kernel is invariant under the similarity scaling
                    return Ok(());
                }
                let (lo, hi) = self.operator_window;
                if self.operator.is_some() && time >= lo && time < hi {
                    return Ok(());
                }
                let dtau = self.config.rebuild_interval;
                let tau0 = frame.tau0();
                let k = ((time - tau0) / dtau).floor();
                let lo = tau0 + k * dtau;
                self.operator_window = (lo, lo + dtau);
                let (dilation, amplitude) = frame.kernel_scaling(lo + 0.5 * dtau);
                ScaledKernel { kernel, dilation, amplitude }
            }
        };
        let targets = self.grid.faces()[1..].to_vec();
        let opts = ConvolutionOptions { quadrature_order: self.config.quadrature_order, ..Default::default() };
        self.operator = Some(RadialConvolutionOperator::build(scaled, self.grid.clone(), targets, &opts)?);
        Ok(())
    }

    /// Total drift at faces `1..=n` for the density `values`.
    fn update_velocity(&mut self, values: &[f64]) {
        let n = self.grid.n();
        match &self.operator {
            Some(op) => op.apply_into(values, &mut self.velocity),
            None => self.velocity.iter_mut().for_each(|v| *v = 0.0),
        }
        if let Some(frame) = &self.frame {
            let c = frame.confinement();
            let faces = self.grid.faces();
            for j in 0..n {
                self.velocity[j] -= c * faces[j + 1];
            }
        }
    }

    /// Coefficients `(a, b)` with `F = a θ_L − b θ_R` (a, b ≥ 0) at interior face `j`,
    /// or an upper bound for schemes whose flux is not linear in the neighbours.
    fn face_coefficients(&self, u: &[f64], j: usize) -> (f64, f64) {
        let h = self.grid.h();
        let m = self.config.m;
        let v = self.velocity[j - 1];
        let (l, r) = (u[j - 1], u[j]);
        match self.scheme {
            FluxScheme::EntropyUpwind => {
                let c = m / (m - 1.0);
                let s = -(c * r.powf(m - 1.0) - c * l.powf(m - 1.0)) / h + v;
                (s.max(0.0), (-s).max(0.0))
            }
            FluxScheme::ScharfetterGummel => (bernoulli(-h * v) / h, bernoulli(h * v) / h),
            FluxScheme::Upwind => (l.powf(m - 1.0) / h + v.max(0.0), r.powf(m - 1.0) / h + (-v).max(0.0)),
            FluxScheme::UpwindMinmod => {
                (l.powf(m - 1.0) / h + 1.5 * v.max(0.0), r.powf(m - 1.0) / h + 1.5 * (-v).max(0.0))
            }
            FluxScheme::Auto => unreachable!("scheme resolved at construction"),
        }
    }

    /// Outward flux densities at faces `0..=n` (zero at both ends) and the
    /// would-be outflow density at `R_max`.
    fn fluxes(&self, u: &[f64], out: &mut [f64]) -> f64 {
        let n = u.len();
        let h = self.grid.h();
        let m = self.config.m;
        out[0] = 0.0;
        out[n] = 0.0;
        match self.scheme {
            FluxScheme::UpwindMinmod => {
                let slope = |i: usize| {
                    let left = if i == 0 { 0.0 } else { (u[i] - u[i - 1]) / h };
                    let right = if i + 1 == n { 0.0 } else { (u[i + 1] - u[i]) / h };
                    minmod(left, right)
                };
                for j in 1..n {
                    let v = self.velocity[j - 1];
                    let face_l = u[j - 1] + 0.5 * h * slope(j - 1);
                    let face_r = u[j] - 0.5 * h * slope(j);
                    out[j] = -(u[j].powf(m) - u[j - 1].powf(m)) / h + v.max(0.0) * face_l + v.min(0.0) * face_r;
                }
            }
            _ => {
                for j in 1..n {
                    let (a, b) = self.face_coefficients(u, j);
                    out[j] = match self.scheme {
                        FluxScheme::Upwind => {
                            let v = self.velocity[j - 1];
                            -(u[j].powf(m) - u[j - 1].powf(m)) / h + v.max(0.0) * u[j - 1] + v.min(0.0) * u[j]
                        }
                        _ => a * u[j - 1] - b * u[j],
                    };
                }
            }
        }
        // outer face against an empty ghost cell
        let v = self.velocity[n - 1];
        let l = u[n - 1];
        let rate = match self.scheme {
            FluxScheme::EntropyUpwind => (m / (m - 1.0) * l.powf(m - 1.0) / h + v).max(0.0),
            FluxScheme::ScharfetterGummel => bernoulli(-h * v) / h,
            _ => l.powf(m - 1.0) / h + v.max(0.0),
        };
        rate * l
    }

    /// Largest step keeping a forward-Euler update nonnegative.
    fn positivity_dt(&self, u: &[f64]) -> f64 {
        let n = u.len();
        let areas = self.grid.face_areas();
        let vols = self.grid.volumes();
        let mut worst: f64 = 0.0;
        let mut right_b = vec![0.0; n + 1];
        let mut left_a = vec![0.0; n + 1];
        for j in 1..n {
            let (a, b) = self.face_coefficients(u, j);
            left_a[j] = a;
            right_b[j] = b;
        }
        for i in 0..n {
            let rate = (areas[i + 1] * left_a[i + 1] + areas[i] * right_b[i]) / vols[i];
            worst = worst.max(rate);
        }
        if worst > 0.0 {
            1.0 / worst
        } else {
            f64::INFINITY
        }
    }

    /// Largest stable step for the current state (and operator), scaled by the CFL number.
    ///
    /// `dt = CFL · min( min_faces h²/(2d·D_f + h|v_f| + floor), positivity bound )`,
    /// with `D_f` the arithmetic mean of `m u^{m−1}` (1 for `m = 1`).
    pub fn cfl_dt(&mut self, state: &SolverState) -> Result<f64> {
        self.ensure_operator(state.time)?;
        let u = state.field.values().to_vec();
        self.update_velocity(&u);
        Ok(self.cfl_dt_current(&u))
    }

    fn cfl_dt_current(&self, u: &[f64]) -> f64 {
        const FLOOR: f64 = 1e-14;
        let h = self.grid.h();
        let m = self.config.m;
        let d = self.config.d as f64;
        let n = u.len();
        let diff = |x: f64| if m == 1.0 { 1.0 } else { m * x.powf(m - 1.0) };
        let mut dt = f64::INFINITY;
        for j in 1..=n {
            let dface = if j < n { 0.5 * (diff(u[j - 1]) + diff(u[j])) } else { diff(u[n - 1]) };
            let v = self.velocity[j - 1].abs();
            dt = dt.min(h * h / (2.0 * d * dface + h * v + FLOOR));
        }
        self.config.cfl * dt.min(self.positivity_dt(u))
    }

    fn rhs(&self, u: &[f64], flux: &mut [f64], out: &mut [f64]) -> f64 {
        let outer = self.fluxes(u, flux);
        let areas = self.grid.face_areas();
        let vols = self.grid.volumes();
        for i in 0..u.len() {
            out[i] = -(areas[i + 1] * flux[i + 1] - areas[i] * flux[i]) / vols[i];
        }
        outer * areas[u.len()]
    }

    /// One SSP-RK2 step of size at most `dt`; returns the step actually taken
    /// (halved until the second stage also satisfies the positivity bound).
    pub fn step(&mut self, state: &mut SolverState, dt: f64) -> Result<f64> {
        self.ensure_operator(state.time)?;
        let n = self.grid.n();
        let u0 = state.field.values().to_vec();
        let mut flux = vec![0.0; n + 1];
        let mut k0 = vec![0.0; n];
        self.update_velocity(&u0);
        let out0 = self.rhs(&u0, &mut flux, &mut k0);
        let mut dt = dt;
        let mut attempts = 0;
        let (u1, out1, k1) = loop {
            let u1: Vec<f64> = u0.iter().zip(&k0).map(|(u, k)| u + dt * k).collect();
            self.update_velocity(&u1);
            let bound = self.positivity_dt(&u1);
            if dt <= bound || attempts >= 30 {
                let mut k1 = vec![0.0; n];
                let out1 = self.rhs(&u1, &mut flux, &mut k1);
                break (u1, out1, k1);
            }
            dt *= 0.5;
            attempts += 1;
            self.update_velocity(&u0);
        };
        let vols = self.grid.volumes();
        let values = state.field.values_mut();
        let mut clipped = 0.0;
        for i in 0..n {
            let v = 0.5 * u0[i] + 0.5 * (u1[i] + dt * k1[i]);
            if v < 0.0 {
                clipped += -v * vols[i];
                values[i] = 0.0;
            } else {
                values[i] = v;
            }
        }
        state.clipped_mass += clipped;
        state.outflow += 0.5 * dt * (out0 + out1);
        state.time += dt;
        state.steps += 1;
        Ok(dt)
    }
}

/// Trailing-window data for [`detect_blowup`].
#[derive(Clone, Debug)]
pub struct BlowupMonitor {
    pub thresholds: BlowupThresholds,
    pub initial_peak: f64,
    pub initial_dt: f64,
    second_moments: VecDeque<f64>,
}

impl BlowupMonitor {
    pub fn new(thresholds: BlowupThresholds, initial_peak: f64, initial_dt: f64) -> Self {
        Self { thresholds, initial_peak, initial_dt, second_moments: VecDeque::with_capacity(thresholds.window) }
    }

    pub fn record(&mut self, second_moment: f64) {
        if self.second_moments.len() == self.thresholds.window {
            self.second_moments.pop_front();
        }
        self.second_moments.push_back(second_moment);
    }

    fn second_moment_decreasing(&self) -> bool {
        self.second_moments.len() == self.thresholds.window
            && self.second_moments.back().unwrap() < self.second_moments.front().unwrap()
    }
}

/// Blow-up is declared only when the peak has grown by `peak_factor`, the step
/// has shrunk to `dt_floor_ratio` of the first step, and the second moment is
/// decreasing over the trailing window.
pub fn detect_blowup(monitor: &BlowupMonitor, state: &SolverState, dt: f64) -> bool {
    let peak = state.field.lp_norm(f64::INFINITY).unwrap_or(0.0);
    peak >= monitor.thresholds.peak_factor * monitor.initial_peak
        && dt <= monitor.thresholds.dt_floor_ratio * monitor.initial_dt
        && monitor.second_moment_decreasing()
}

/// One diagnostics record. Norms refer to the integrated field (`θ` in
/// similarity variables) except `linf`, which is the physical `‖u(t)‖_∞`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSample {
    pub time: f64,
    pub t: f64,
    pub tau: Option<f64>,
    pub mass: f64,
    pub linf: f64,
    pub lp: f64,
    pub l2_beta: f64,
    pub second_moment: f64,
    #[serde(rename = "H")]
    pub h: Option<f64>,
    #[serde(rename = "I")]
    pub i: Option<f64>,
    #[serde(rename = "H_rel")]
    pub h_rel: Option<f64>,
    pub l1_ref: Option<f64>,
    pub dt: f64,
    pub clipped_mass: f64,
    pub steps: u64,
}

/// Column order shared by the JSON-lines and CSV exports.
pub const DIAGNOSTIC_COLUMNS: [&str; 15] = [
    "time", "t", "tau", "mass", "linf", "lp", "l2_beta", "second_moment", "H", "I", "H_rel", "l1_ref", "dt", "clipped_mass", "steps",
];

fn fmt_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        "null".to_string()
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("null".to_string(), fmt_float)
}

impl DiagnosticSample {
    fn cells(&self) -> [String; 15] {
        [
            fmt_float(self.time),
            fmt_float(self.t),
            fmt_opt(self.tau),
            fmt_float(self.mass),
            fmt_float(self.linf),
            fmt_float(self.lp),
            fmt_float(self.l2_beta),
            fmt_float(self.second_moment),
            fmt_opt(self.h),
            fmt_opt(self.i),
            fmt_opt(self.h_rel),
            fmt_opt(self.l1_ref),
            fmt_float(self.dt),
            fmt_float(self.clipped_mass),
            self.steps.to_string(),
        ]
    }

    /// One JSON object, fields in [`DIAGNOSTIC_COLUMNS`] order, floats at 17 significant digits.
    pub fn to_json_line(&self) -> String {
        let body: Vec<String> =
            DIAGNOSTIC_COLUMNS.iter().zip(self.cells()).map(|(k, v)| format!("\"{k}\":{v}")).collect();
        format!("{{{}}}", body.join(","))
    }

    /// Value of a named series.
    pub fn series(&self, name: &str) -> Option<f64> {
        match name {
            "time" => Some(self.time),
            "t" => Some(self.t),
            "tau" => self.tau,
            "mass" => Some(self.mass),
            "linf" => Some(self.linf),
            "lp" => Some(self.lp),
            "l2_beta" => Some(self.l2_beta),
            "second_moment" => Some(self.second_moment),
            "H" | "h" => self.h,
            "I" | "i" => self.i,
            "H_rel" | "h_rel" => self.h_rel,
            "l1_ref" => self.l1_ref,
            "dt" => Some(self.dt),
            "clipped_mass" => Some(self.clipped_mass),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiagnosticsSeries {
    pub samples: Vec<DiagnosticSample>,
    pub status: TerminationStatus,
    pub variables: Variables,
    /// Whether the run had no interaction kernel.
    pub pure_diffusion: bool,
}

impl DiagnosticsSeries {
    /// `(t_i, y_i)` for a named series, skipping missing values.
    pub fn points(&self, name: &str, clock: &str) -> Vec<(f64, f64)> {
        self.samples.iter().filter_map(|s| Some((s.series(clock)?, s.series(name)?))).collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_diagnostics_jsonl(&self.samples, path)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_diagnostics_csv(&self.samples, path)
    }
}

pub fn write_diagnostics_jsonl(samples: &[DiagnosticSample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in samples {
        writeln!(w, "{}", s.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// CSV with one header line; missing values are left empty.
pub fn write_diagnostics_csv(samples: &[DiagnosticSample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{}", DIAGNOSTIC_COLUMNS.join(",")).map_err(|e| Error::io(path, e))?;
    for s in samples {
        let row: Vec<String> = s.cells().into_iter().map(|c| if c == "null" { String::new() } else { c }).collect();
        writeln!(w, "{}", row.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_diagnostics_jsonl(path: &Path) -> Result<Vec<DiagnosticSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: DiagnosticSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            message: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}

/// A saved density at one integration time.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub time: f64,
    pub t: f64,
    pub field: DensityField,
}

#[derive(Clone, Debug)]
pub struct SimulationOutput {
    pub series: DiagnosticsSeries,
    pub snapshots: Vec<Snapshot>,
    pub final_state: SolverState,
}

/// Evaluates the diagnostics of one state.
struct Recorder {
    initial: DensityField,
    entropy_floor: Option<f64>,
    barenblatt: Option<BarenblattProfile>,
}

impl Recorder {
    fn new(solver: &Solver, initial: &DensityField) -> Result<Self> {
        let cfg = solver.config();
        let nonlinear_similarity = cfg.m > 1.0 && cfg.variables == Variables::Similarity;
        let entropy_floor = if nonlinear_similarity {
            discrete_minimizer(solver.grid().clone(), initial.mass()).ok().map(|th| entropy_h(&th, cfg.m)).transpose()?
        } else {
            None
        };
        let barenblatt = match cfg.reference {
            Reference::Barenblatt => Some(BarenblattProfile::new(initial.mass(), cfg.d)?),
            _ => None,
        };
        Ok(Self { initial: initial.clone(), entropy_floor, barenblatt })
    }

    fn reference(&self, solver: &Solver, state: &SolverState) -> Result<Option<DensityField>> {
        let cfg = solver.config();
        let grid = solver.grid().clone();
        let t = solver.physical_time(state.time);
        match (cfg.reference, solver.frame()) {
            (Reference::None, _) => Ok(None),
            (Reference::Heat, None) => Ok(Some(heat_semigroup(&self.initial, t)?)),
            (Reference::Heat, Some(f)) => Ok(Some(fokker_planck_semigroup(&self.initial, (state.time - f.tau0()).max(0.0))?)),
            (Reference::Barenblatt, frame) => {
                if !(t > 0.0) {
                    return Ok(None);
                }
                let b = self.barenblatt.expect("built with the reference");
                let s = frame.map_or(1.0, |f| f.spatial_scale(t));
                let sd = s.powi(cfg.d as i32);
                Ok(Some(DensityField::from_profile(grid, |xi| sd * b.eval(t, s * xi).unwrap_or(0.0))))
            }
        }
    }

    fn sample(&self, solver: &Solver, state: &SolverState, dt: f64) -> Result<DiagnosticSample> {
        let cfg = solver.config();
        let u = &state.field;
        let (h, i, h_rel) = match self.entropy_floor {
            Some(h_min) => {
                let h = entropy_h(u, cfg.m)?;
                let i = entropy_i_floored(u, cfg.m, cfg.theta_floor)?;
                (Some(h), Some(i), Some(h - h_min))
            }
            None => (None, None, None),
        };
        let l1_ref = match self.reference(solver, state)? {
            Some(r) => Some(u.l1_distance(&r)?),
            None => None,
        };
        Ok(DiagnosticSample {
            time: state.time,
            t: solver.physical_time(state.time),
            tau: solver.frame().map(|_| state.time),
            mass: u.mass(),
            linf: solver.physical_peak(state),
            lp: u.lp_norm(cfg.lp_exponent)?,
            l2_beta: u.weighted_l2_norm(cfg.beta),
            second_moment: u.second_moment(),
            h,
            i,
            h_rel,
            l1_ref,
            dt,
            clipped_mass: state.clipped_mass,
            steps: state.steps,
        })
    }
}

/// Integrates `initial` (in the integration variables: `u0`, or `θ(τ₀)` in
/// similarity variables) until the horizon or a termination event.
pub fn simulate(config: SolverConfig, initial: &DensityField) -> Result<SimulationOutput> {
    let mut solver = Solver::new(config)?;
    if **initial.grid() != **solver.grid() {
        return Err(Error::GridMismatch("initial data must live on the configured grid".into()));
    }
    let grid = solver.grid().clone();
    let initial = DensityField::new(grid, initial.values().to_vec())?;
    let mass0 = initial.mass();
    let recorder = Recorder::new(&solver, &initial)?;
    let start = solver.start_time();
    let end = solver.end_time();
    let cfg = solver.config().clone();
    let mut state = SolverState { field: initial.clone(), time: start, steps: 0, clipped_mass: 0.0, outflow: 0.0 };

    let dt0 = solver.cfl_dt(&state)?;
    let mut monitor = BlowupMonitor::new(cfg.blowup, initial.lp_norm(f64::INFINITY)?, dt0);
    let mut samples = vec![recorder.sample(&solver, &state, dt0)?];
    let mut snapshots = Vec::new();
    if cfg.snapshot_every.is_some() {
        snapshots.push(Snapshot { time: start, t: solver.physical_time(start), field: state.field.clone() });
    }
    let mut k_diag = 1u64;
    let mut k_snap = 1u64;
    let eps = 1e-12 * (1.0 + end.abs());
    let mut status = TerminationStatus::Completed;
    let mut last_dt = dt0;

    while state.time < end - eps {
        if state.steps >= cfg.max_steps {
            return Err(Error::InsufficientResolution(format!(
                "step budget of {} exhausted at time {} (dt = {last_dt:.3e})",
                cfg.max_steps, state.time
            )));
        }
        let next_diag = start + k_diag as f64 * cfg.diag_every;
        let next_snap = cfg.snapshot_every.map_or(f64::INFINITY, |s| start + k_snap as f64 * s);
        let stable = solver.cfl_dt(&state)?;
        let dt = stable.min(end - state.time).min(next_diag - state.time).min(next_snap - state.time);
        let taken = solver.step(&mut state, dt)?;
        // ignore the shortened steps that only land on output times
        if taken >= 0.999 * stable {
            last_dt = taken;
        } else {
            last_dt = last_dt.min(stable);
        }
        monitor.record(state.field.second_moment());

        if state.outflow > 1e-6 * mass0 {
            status = TerminationStatus::DomainExhausted;
        } else if detect_blowup(&monitor, &state, last_dt) {
            status = TerminationStatus::BlowupDetected;
        }
        let at_diag = state.time >= next_diag - eps;
        if at_diag {
            k_diag += 1;
        }
        if status != TerminationStatus::Completed || at_diag || state.time >= end - eps {
            samples.push(recorder.sample(&solver, &state, last_dt)?);
        }
        if let Some(s) = cfg.snapshot_every {
            if state.time >= start + k_snap as f64 * s - eps {
                k_snap += 1;
                snapshots.push(Snapshot { time: state.time, t: solver.physical_time(state.time), field: state.field.clone() });
            }
        }
        if status != TerminationStatus::Completed {
            log::info!("terminated with {} at time {}", status.as_str(), state.time);
            break;
        }
    }
    // duplicate end-of-run samples can arise when the horizon is a diagnostics time
    samples.dedup_by(|a, b| a.time == b.time);
    let series = DiagnosticsSeries { samples, status, variables: cfg.variables, pure_diffusion: cfg.kernel.is_none() };
    Ok(SimulationOutput { series, snapshots, final_state: state })
}

/// `max_k |ΔH_rel/Δτ + Ī| / (1 + Ī)` over consecutive samples, with `Ī` the
/// trapezoidal mean of `I`. Defined only for pure diffusion in similarity variables.
pub fn dissipation_residual(series: &DiagnosticsSeries) -> Result<f64> {
    if !series.pure_diffusion {
        return Err(Error::Domain("the dissipation identity holds only without an interaction kernel".into()));
    }
    if series.variables != Variables::Similarity {
        return Err(Error::Domain("the dissipation identity is stated in similarity variables".into()));
    }
    let pts: Vec<(f64, f64, f64)> =
        series.samples.iter().filter_map(|s| Some((s.tau?, s.h_rel?, s.i?))).collect();
    if pts.len() < 2 {
        return Err(Error::InsufficientResolution("need at least two entropy samples".into()));
    }
    Ok(pts
        .windows(2)
        .filter(|w| w[1].0 > w[0].0)
        .map(|w| {
            let rate = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
            let i_mean = 0.5 * (w[0].2 + w[1].2);
            (rate + i_mean).abs() / (1.0 + i_mean)
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_of(field: DensityField, time: f64) -> SolverState {
        SolverState { field, time, steps: 0, clipped_mass: 0.0, outflow: 0.0 }
    }

    #[test]
    fn pure_heat_limit_of_dt() {
        let cfg = SolverConfig::new(2, 100, 10.0, Horizon::Time(1.0));
        let mut s = Solver::new(cfg.clone()).unwrap();
        let st = state_of(DensityField::zeros(s.grid().clone()), 0.0);
        let dt = s.cfl_dt(&st).unwrap();
        let h: f64 = 0.1;
        let expect = cfg.cfl * h * h / 4.0;
        assert!((dt - expect).abs() < 1e-9 * expect, "{dt} vs {expect}");
    }

    #[test]
    fn dt_shrinks_with_peak_and_kernel() {
        let mut cfg = SolverConfig::new(3, 100, 10.0, Horizon::Time(1.0));
        let mut s = Solver::new(cfg.clone()).unwrap();
        let g = s.grid().clone();
        let u = DensityField::from_profile(g.clone(), |r| (-r * r).exp());
        let u2 = DensityField::from_profile(g.clone(), |r| 2.0 * (-r * r).exp());
        let a = s.cfl_dt(&state_of(u.clone(), 0.0)).unwrap();
        let b = s.cfl_dt(&state_of(u2, 0.0)).unwrap();
        assert!(b < a);
        cfg.kernel = Some(Arc::new(InteractionKernel::gaussian(1.0, 3).unwrap()));
        let mut sk = Solver::new(cfg).unwrap();
        assert!(sk.cfl_dt(&state_of(u, 0.0)).unwrap() <= a);
    }

    #[test]
    fn validation_names_the_hypothesis() {
        let mut cfg = SolverConfig::new(3, 100, 10.0, Horizon::Time(1.0));
        cfg.m = 1.0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("d = 2"), "{err}");
        cfg.m = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = SolverConfig::new(2, 100, 10.0, Horizon::Time(1.0));
        cfg.cfl = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stationary_profile_is_discretely_steady() {
        let mut cfg = SolverConfig::new(3, 200, 6.0, Horizon::TauSpan(1.0));
        cfg.variables = Variables::Similarity;
        let mut s = Solver::new(cfg).unwrap();
        let th = crate::closed_forms::StationaryProfile::new(1.0, 3).unwrap();
        // point values: the pressure plus |ξ|²/2 is constant on the support
        let vals: Vec<f64> = s.grid().centers().iter().map(|&r| th.eval(r)).collect();
        let field = DensityField::new(s.grid().clone(), vals).unwrap();
        let mut st = state_of(field.clone(), 0.0);
        let dt = s.cfl_dt(&st).unwrap();
        s.step(&mut st, dt).unwrap();
        let change = st.field.l1_distance(&field).unwrap() / dt;
        assert!(change < 0.05, "{change}");
    }

    #[test]
    fn conservation_and_positivity() {
        let mut cfg = SolverConfig::new(2, 128, 10.0, Horizon::Time(0.5));
        cfg.kernel = Some(Arc::new(InteractionKernel::newtonian(2)));
        let mut s = Solver::new(cfg).unwrap();
        let u = DensityField::from_profile(s.grid().clone(), |r| 4.0 * (-r * r).exp());
        let m0 = u.mass();
        let mut st = state_of(u, 0.0);
        for _ in 0..200 {
            let dt = s.cfl_dt(&st).unwrap();
            s.step(&mut st, dt).unwrap();
            assert!(st.field.values().iter().all(|v| *v >= 0.0));
        }
        assert!((st.field.mass() - m0).abs() < 1e-12 * m0);
        assert_eq!(st.clipped_mass, 0.0);
    }

    #[test]
    fn jsonl_round_trip() {
        let s = DiagnosticSample {
            time: 0.1,
            t: 1.0 / 3.0,
            tau: None,
            mass: 1.0,
            linf: 2.0,
            lp: 3.0,
            l2_beta: 4.0,
            second_moment: 5.0,
            h: Some(6.0),
            i: None,
            h_rel: Some(f64::NAN),
            l1_ref: None,
            dt: 1e-5,
            clipped_mass: 0.0,
            steps: 7,
        };
        let line = s.to_json_line();
        assert!(line.starts_with("{\"time\":1.0000000000000001e-1,\"t\":3.3333333333333331e-1,\"tau\":null"));
        let back: DiagnosticSample = serde_json::from_str(&line).unwrap();
        assert_eq!(back.t, s.t);
        assert_eq!(back.h_rel, None);
        assert_eq!(back.steps, 7);
    }
}

//! Scenario files, λ-sweeps, power-law fits and export.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! name = "pks-subcritical"
//!
//! [solver]
//! d = 2
//! variables = "similarity"
//! kernel = { family = "newtonian" }
//! t_end = 100.0
//! diag_every = 0.05
//! reference = "heat"
//!
//! [grid]
//! n = 512
//! r_max = 20.0
//!
//! [initial]
//! profile = "gaussian"
//! mass = 12.566370614359172
//!
//! [sweep]
//! lambdas = [1.0, 4.0, 16.0]
//!
//! [output]
//! dir = "runs/pks"
//! ```
//!
//! In similarity variables the initial profile is `θ(τ₀) = f` and λ only sets the
//! frame shift `T`; in physical variables `u0 = λ^{-d} f(·/λ)` on the grid.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::closed_forms::{shift_from_lambda, BarenblattProfile};
use crate::error::{Error, Result};
use crate::fields::{DensityField, RadialGrid, RescaleMode};
use crate::kernels::{InteractionKernel, KernelSpec, LqNorm};
use crate::solver::{
    simulate, write_diagnostics_csv, write_diagnostics_jsonl, BlowupThresholds, DiagnosticSample, FluxScheme, Horizon,
    Reference, SimulationOutput, SolverConfig, TerminationStatus, Variables,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub solver: SolverSection,
    pub grid: GridSection,
    pub initial: InitialSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub fit: Option<FitSection>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub blowup: Option<BlowupThresholds>,
    /// Directory against which relative paths in the file are resolved.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub d: usize,
    /// Defaults to the critical exponent (1 in d = 2, 2 − 2/d otherwise).
    pub m: Option<f64>,
    pub kernel: Option<KernelSpec>,
    #[serde(default = "default_variables")]
    pub variables: Variables,
    pub t_end: Option<f64>,
    pub tau_span: Option<f64>,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    #[serde(default = "default_diag")]
    pub diag_every: f64,
    pub snapshot_every: Option<f64>,
    #[serde(default)]
    pub scheme: FluxScheme,
    #[serde(default)]
    pub reference: Reference,
    #[serde(default = "default_theta_floor")]
    pub theta_floor: f64,
    #[serde(default = "default_rebuild")]
    pub rebuild_interval: f64,
    #[serde(default = "default_order")]
    pub quadrature_order: usize,
    pub lp_exponent: Option<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub max_steps: Option<u64>,
}

fn default_variables() -> Variables {
    Variables::Physical
}
fn default_cfl() -> f64 {
    0.4
}
fn default_diag() -> f64 {
    0.05
}
fn default_theta_floor() -> f64 {
    1e-12
}
fn default_rebuild() -> f64 {
    0.1
}
fn default_order() -> usize {
    16
}
fn default_beta() -> f64 {
    2.5
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n: usize,
    pub r_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSection {
    /// `M (2πv)^{-d/2} e^{-r²/2v}`.
    Gaussian {
        mass: f64,
        #[serde(default = "one")]
        variance: f64,
    },
    /// Uniform density on the ball of radius `radius`.
    Ball { mass: f64, radius: f64 },
    /// `𝒰(t0, ·; M)`.
    Barenblatt {
        mass: f64,
        #[serde(default = "one")]
        t0: f64,
    },
    /// Snapshot on the scenario grid; rescaled to `mass` when given.
    Csv { path: PathBuf, mass: Option<f64> },
    /// Sum of `count` Gaussian shells with seeded random radii, widths and weights.
    RandomBumps {
        mass: f64,
        seed: u64,
        #[serde(default = "three")]
        count: usize,
    },
}

fn one() -> f64 {
    1.0
}
fn three() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub lambdas: Option<Vec<f64>>,
    /// Geometric range `start, start·factor, …` up to `stop`.
    pub range: Option<LambdaRange>,
    /// Bounded worker pool size (defaults to the available parallelism).
    pub workers: Option<usize>,
    /// Band of `L^∞` exponents accepted as global spreading.
    #[serde(default = "default_band")]
    pub spreading_band: [f64; 2],
}

fn default_band() -> [f64; 2] {
    [-1.25, -0.75]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaRange {
    pub start: f64,
    pub stop: f64,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    /// Series names, e.g. `["linf", "l1_ref"]`.
    pub series: Vec<String>,
    /// Physical-time window; defaults to the last decade `[t_end/10, t_end]`.
    pub window: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub csv: bool,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let mut cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::Parse { path: path.to_path_buf(), line, message: e.message().to_string() }
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn m(&self) -> f64 {
        self.solver.m.unwrap_or(if self.solver.d == 2 { 1.0 } else { 2.0 - 2.0 / self.solver.d as f64 })
    }

    pub fn mode(&self) -> RescaleMode {
        if self.m() == 1.0 {
            RescaleMode::LinearD2
        } else {
            RescaleMode::Nonlinear
        }
    }

    /// λ values to run, ascending; `[1]` without a sweep section.
    pub fn lambdas(&self) -> Result<Vec<f64>> {
        let mut out = match &self.sweep {
            None => vec![1.0],
            Some(s) => match (&s.lambdas, &s.range) {
                (Some(l), None) => l.clone(),
                (None, Some(r)) => {
                    if !(r.factor > 1.0) || !(r.start >= 1.0) || r.stop < r.start {
                        return Err(Error::config("sweep.range", "need start >= 1, stop >= start and factor > 1"));
                    }
                    let mut v = Vec::new();
                    let mut l = r.start;
                    while l <= r.stop * (1.0 + 1e-12) {
                        v.push(l);
                        l *= r.factor;
                    }
                    v
                }
                _ => return Err(Error::config("sweep", "give exactly one of `lambdas` or `range`")),
            },
        };
        if out.is_empty() {
            return Err(Error::config("sweep.lambdas", "no λ values"));
        }
        if let Some(bad) = out.iter().find(|l| !(**l >= 1.0)) {
            return Err(Error::config("sweep.lambdas", format!("λ values must be >= 1, got {bad}")));
        }
        out.sort_by(f64::total_cmp);
        out.dedup();
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::config("name", "scenario name is empty"));
        }
        match (self.solver.t_end, self.solver.tau_span) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::config("solver.t_end", "give exactly one of `t_end` or `tau_span`"))
            }
            _ => {}
        }
        self.lambdas()?;
        let probe = self.solver_config(1.0)?;
        probe.validate()?;
        if let Some(fit) = &self.fit {
            if let Some([a, b]) = fit.window {
                if !(a > 0.0 && b > a) {
                    return Err(Error::config("fit.window", format!("need 0 < a < b, got [{a}, {b}]")));
                }
                if let Some(t_end) = self.solver.t_end {
                    if b > t_end * (1.0 + 1e-12) {
                        return Err(Error::config("fit.window", format!("window end {b} lies beyond t_end = {t_end}")));
                    }
                }
            }
        }
        if let Some(s) = &self.sweep {
            let [lo, hi] = s.spreading_band;
            if !(lo < hi) {
                return Err(Error::config("sweep.spreading_band", "need lower < upper"));
            }
            if s.workers == Some(0) {
                return Err(Error::config("sweep.workers", "need at least one worker"));
            }
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<Option<Arc<InteractionKernel>>> {
        self.solver
            .kernel
            .as_ref()
            .map(|spec| InteractionKernel::from_spec(spec, self.solver.d, &self.base_dir).map(Arc::new))
            .transpose()
            .map_err(|e| Error::config("solver.kernel", e.to_string()))
    }

    /// The solver configuration for one λ.
    pub fn solver_config(&self, lambda: f64) -> Result<SolverConfig> {
        let s = &self.solver;
        let horizon = match (s.t_end, s.tau_span) {
            (Some(t), None) => Horizon::Time(t),
            (None, Some(span)) => Horizon::TauSpan(span),
            _ => return Err(Error::config("solver.t_end", "give exactly one of `t_end` or `tau_span`")),
        };
        let mut cfg = SolverConfig::new(s.d.max(2), self.grid.n, self.grid.r_max, horizon);
        cfg.d = s.d;
        cfg.m = self.m();
        cfg.kernel = self.kernel()?;
        cfg.variables = s.variables;
        cfg.cfl = s.cfl;
        cfg.diag_every = s.diag_every;
        cfg.snapshot_every = s.snapshot_every;
        cfg.scheme = s.scheme;
        cfg.reference = s.reference;
        cfg.theta_floor = s.theta_floor;
        cfg.rebuild_interval = s.rebuild_interval;
        cfg.quadrature_order = s.quadrature_order;
        cfg.beta = s.beta;
        if let Some(p) = s.lp_exponent {
            cfg.lp_exponent = p;
        }
        if let Some(k) = s.max_steps {
            cfg.max_steps = k;
        }
        if let Some(b) = self.blowup {
            cfg.blowup = b;
        }
        if s.variables == Variables::Similarity {
            if s.d == 2 && cfg.m != 1.0 || s.d != 2 && cfg.m == 1.0 {
                // leave the detailed message to SolverConfig::validate
            } else {
                cfg.shift = shift_from_lambda(lambda, self.mode(), s.d)?;
            }
        }
        Ok(cfg)
    }

    /// The profile `f` sampled on the scenario grid.
    pub fn base_profile(&self, grid: Arc<RadialGrid>) -> Result<DensityField> {
        let d = grid.d();
        let df = d as f64;
        let field = match &self.initial {
            InitialSection::Gaussian { mass, variance } => {
                positive("initial.mass", *mass)?;
                positive("initial.variance", *variance)?;
                let c = mass * (2.0 * std::f64::consts::PI * variance).powf(-0.5 * df);
                DensityField::from_profile(grid, |r| c * (-r * r / (2.0 * variance)).exp())
            }
            InitialSection::Ball { mass, radius } => {
                positive("initial.mass", *mass)?;
                positive("initial.radius", *radius)?;
                let height = mass / crate::geometry::ball_volume(d, *radius);
                let f = DensityField::from_profile(grid, |r| if r <= *radius { height } else { 0.0 });
                renormalized(f, *mass)
            }
            InitialSection::Barenblatt { mass, t0 } => {
                positive("initial.t0", *t0)?;
                let b = BarenblattProfile::new(*mass, d).map_err(|e| Error::config("initial", e.to_string()))?;
                b.sample(*t0, grid)?
            }
            InitialSection::Csv { path, mass } => {
                let full = if path.is_absolute() { path.clone() } else { self.base_dir.join(path) };
                let f = DensityField::read_csv(&full, d)?;
                if **f.grid() != *grid {
                    return Err(Error::config(
                        "initial.path",
                        format!("snapshot grid (n = {}, R = {}) differs from the scenario grid", f.grid().n(), f.grid().r_max()),
                    ));
                }
                let f = DensityField::new(grid, f.into_values())?;
                match mass {
                    Some(m) => renormalized(f, *m),
                    None => f,
                }
            }
            InitialSection::RandomBumps { mass, seed, count } => {
                positive("initial.mass", *mass)?;
                random_bumps(grid, *mass, *seed, *count)
            }
        };
        if !(field.mass() > 0.0) {
            return Err(Error::config("initial", "initial profile has no mass on the grid"));
        }
        Ok(field)
    }

    /// Initial data in the integration variables for one λ.
    pub fn initial_state(&self, lambda: f64, grid: Arc<RadialGrid>) -> Result<DensityField> {
        let f = self.base_profile(grid.clone())?;
        match self.solver.variables {
            Variables::Similarity => Ok(f),
            Variables::Physical => {
                if lambda == 1.0 {
                    return Ok(f);
                }
                // resample f on a grid wide enough to hold it, then dilate onto the run grid
                Ok(f.rescale_initial(lambda, self.mode(), grid)?.field)
            }
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        match &self.output.dir {
            Some(d) if d.is_absolute() => d.clone(),
            Some(d) => self.base_dir.join(d),
            None => self.base_dir.join("runs").join(&self.name),
        }
    }
}

fn positive(field: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::config(field, format!("must be positive, got {x}")));
    }
    Ok(())
}

fn renormalized(f: DensityField, mass: f64) -> DensityField {
    let m = f.mass();
    let grid = f.grid().clone();
    let values = f.into_values().into_iter().map(|v| v * mass / m).collect();
    DensityField::new(grid, values).expect("scaling keeps values nonnegative")
}

/// Seeded sum of Gaussian shells `w_k exp(−(r − c_k)²/2s_k²)` normalized to `mass`.
pub fn random_bumps(grid: Arc<RadialGrid>, mass: f64, seed: u64, count: usize) -> DensityField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reach = 0.3 * grid.r_max();
    let bumps: Vec<(f64, f64, f64)> = (0..count.max(1))
        .map(|_| (rng.gen_range(0.1..1.0), rng.gen_range(0.0..reach), rng.gen_range(0.05 * reach..0.3 * reach)))
        .collect();
    let f = DensityField::from_profile(grid, |r| {
        bumps.iter().map(|(w, c, s)| w * (-(r - c) * (r - c) / (2.0 * s * s)).exp()).sum()
    });
    renormalized(f, mass)
}

/// Least-squares power law `y ≈ C t^exponent`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r2: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Slope of `log y` against `log t` over samples with `t ∈ [lo, hi]`.
pub fn fit_rate(points: &[(f64, f64)], window: (f64, f64)) -> Result<RateFit> {
    let (lo, hi) = window;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Fit(format!("window must satisfy 0 < a < b, got [{lo}, {hi}]")));
    }
    let sel: Vec<(f64, f64)> = points.iter().cloned().filter(|(t, _)| *t >= lo && *t <= hi).collect();
    if sel.len() < 10 {
        return Err(Error::Fit(format!("{} samples in [{lo}, {hi}]; need at least 10", sel.len())));
    }
    if let Some((t, y)) = sel.iter().find(|(_, y)| !(*y > 0.0) || !y.is_finite()) {
        return Err(Error::Fit(format!("nonpositive sample y = {y} at t = {t}")));
    }
    let xs: Vec<f64> = sel.iter().map(|(t, _)| t.ln()).collect();
    let ys: Vec<f64> = sel.iter().map(|(_, y)| y.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Fit("all samples share one time".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let stderr = (sse / (n - 2.0) / sxx).sqrt();
    Ok(RateFit { exponent: slope, intercept, r2, stderr, samples: sel.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    GlobalSpreading,
    Blowup,
    Inconclusive,
}

/// Outcome of one λ.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub lambda: f64,
    pub status: TerminationStatus,
    pub classification: Classification,
    pub t_final: f64,
    pub tau_final: Option<f64>,
    pub steps: u64,
    pub mass_initial: f64,
    pub mass_final: f64,
    pub clipped_mass: f64,
    pub outflow: f64,
    /// `L^∞` fit over the last decade of physical time.
    pub linf_fit: Option<RateFit>,
    pub fits: Vec<NamedFit>,
}

#[derive(Clone, Debug, Serialize)]
pub struct NamedFit {
    pub series: String,
    pub window: [f64; 2],
    pub fit: Option<RateFit>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaBracket {
    /// Largest λ classified as blow-up.
    pub lower: Option<f64>,
    /// Smallest λ above it classified as global spreading.
    pub upper: Option<f64>,
    pub hint: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepResult {
    pub scenario: String,
    pub runs: Vec<RunRecord>,
    pub bracket: LambdaBracket,
    /// λ pairs that violated monotone consistency (both marked inconclusive).
    pub violations: Vec<[f64; 2]>,
}

/// Last-decade `L^∞` window of a run.
fn last_decade(samples: &[DiagnosticSample]) -> Option<(f64, f64)> {
    let t_end = samples.last()?.t;
    (t_end > 0.0).then_some((0.1 * t_end, t_end))
}

fn classify(out: &SimulationOutput, band: [f64; 2]) -> (Classification, Option<RateFit>) {
    match out.series.status {
        TerminationStatus::BlowupDetected => (Classification::Blowup, None),
        TerminationStatus::DomainExhausted => (Classification::Inconclusive, None),
        TerminationStatus::Completed => {
            let fit = last_decade(&out.series.samples)
                .and_then(|w| fit_rate(&out.series.points("linf", "t"), w).ok());
            match fit {
                Some(f) if f.exponent >= band[0] && f.exponent <= band[1] => (Classification::GlobalSpreading, Some(f)),
                other => (Classification::Inconclusive, other),
            }
        }
    }
}

/// Runs one λ, writing its artifacts when `dir` is given.
pub fn run_single(cfg: &ScenarioConfig, lambda: f64, dir: Option<&Path>) -> Result<(RunRecord, SimulationOutput)> {
    let solver_cfg = cfg.solver_config(lambda)?;
    let grid = Arc::new(RadialGrid::new(solver_cfg.d, solver_cfg.n, solver_cfg.r_max)?);
    let initial = cfg.initial_state(lambda, grid)?;
    let mass_initial = initial.mass();
    let out = simulate(solver_cfg, &initial)?;
    let band = cfg.sweep.as_ref().map_or(default_band(), |s| s.spreading_band);
    let (classification, linf_fit) = classify(&out, band);
    let last = out.series.samples.last().expect("at least the initial sample");
    let mut fits = Vec::new();
    if let Some(fit_cfg) = &cfg.fit {
        let window = fit_cfg.window.map(|[a, b]| (a, b)).or_else(|| last_decade(&out.series.samples));
        for name in &fit_cfg.series {
            let (w, res) = match window {
                Some(w) => (w, fit_rate(&out.series.points(name, "t"), w)),
                None => ((0.0, 0.0), Err(Error::Fit("empty run".into()))),
            };
            fits.push(NamedFit {
                series: name.clone(),
                window: [w.0, w.1],
                fit: res.as_ref().ok().copied(),
                error: res.err().map(|e| e.to_string()),
            });
        }
    }
    let record = RunRecord {
        lambda,
        status: out.series.status,
        classification,
        t_final: last.t,
        tau_final: last.tau,
        steps: out.final_state.steps,
        mass_initial,
        mass_final: out.final_state.field.mass(),
        clipped_mass: out.final_state.clipped_mass,
        outflow: out.final_state.outflow,
        linf_fit,
        fits,
    };
    if let Some(dir) = dir {
        write_run(dir, cfg, &record, &out)?;
    }
    Ok((record, out))
}

fn run_dir_name(lambda: f64) -> String {
    format!("lambda_{lambda}")
}

fn write_run(dir: &Path, cfg: &ScenarioConfig, record: &RunRecord, out: &SimulationOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_diagnostics_jsonl(&out.series.samples, &dir.join("diagnostics.jsonl"))?;
    if cfg.output.csv {
        write_diagnostics_csv(&out.series.samples, &dir.join("diagnostics.csv"))?;
    }
    for (k, snap) in out.snapshots.iter().enumerate() {
        snap.field.write_csv(&dir.join(format!("snapshot_{k:04}.csv")))?;
    }
    out.final_state.field.write_csv(&dir.join("final.csv"))?;
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let summary = serde_json::json!({
        "scenario": cfg.name,
        "run": record,
        "snapshot_times": out.snapshots.iter().map(|s| s.time).collect::<Vec<_>>(),
        "h_rel": out.series.points("H_rel", "time"),
        "created_unix": created,
    });
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Everything [`run_scenario`] produced.
#[derive(Clone, Debug, Serialize)]
pub struct ScenarioOutcome {
    pub scenario: String,
    pub output_dir: PathBuf,
    pub runs: Vec<RunRecord>,
    pub sweep: Option<SweepResult>,
}

impl ScenarioOutcome {
    pub fn any_blowup(&self) -> bool {
        self.runs.iter().any(|r| r.status == TerminationStatus::BlowupDetected)
    }
    pub fn any_exhausted(&self) -> bool {
        self.runs.iter().any(|r| r.status == TerminationStatus::DomainExhausted)
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Domain(format!("could not start worker pool: {e}")))
}

fn run_all(cfg: &ScenarioConfig, lambdas: &[f64], root: Option<&Path>) -> Result<Vec<RunRecord>> {
    use rayon::prelude::*;
    let default_workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let workers = cfg.sweep.as_ref().and_then(|s| s.workers).unwrap_or(default_workers).min(lambdas.len()).max(1);
    let mut records: Vec<RunRecord> = pool(workers)?.install(|| {
        lambdas
            .par_iter()
            .map(|&l| {
                let dir = root.map(|r| r.join(run_dir_name(l)));
                run_single(cfg, l, dir.as_deref()).map(|(rec, _)| rec)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    records.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    Ok(records)
}

/// Runs every λ of the scenario and writes per-run directories, plus a sweep
/// summary when more than one λ is present.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioOutcome> {
    let lambdas = cfg.lambdas()?;
    if lambdas.len() > 1 {
        check_sweep_kernel(cfg.kernel()?.as_deref())?;
    }
    let root = cfg.output_dir();
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let runs = run_all(cfg, &lambdas, Some(&root))?;
    let sweep = (lambdas.len() > 1).then(|| summarize_sweep(&cfg.name, runs.clone()));
    if let Some(s) = &sweep {
        write_sweep_summary(&root.join("sweep.json"), s)?;
    }
    Ok(ScenarioOutcome { scenario: cfg.name.clone(), output_dir: root, runs, sweep })
}

/// Rejects kernels whose gradient lies in no `L^q`, `1 ≤ q < d/(d−1)`.
pub fn check_sweep_kernel(kernel: Option<&InteractionKernel>) -> Result<()> {
    let Some(k) = kernel else { return Ok(()) };
    let d = k.d() as f64;
    let q_crit = d / (d - 1.0);
    let qs = (0..8).map(|i| 1.0 + (q_crit - 1.0) * i as f64 / 8.0);
    for q in qs {
        if let Ok(LqNorm::Finite(_)) = k.lq_gradient_norm(q) {
            return Ok(());
        }
    }
    Err(Error::config(
        "solver.kernel",
        format!(
            "λ-sweeps need ∇K ∈ L^q for some q < d/(d−1) = {q_crit}; the gradient norm is divergent for every such q{}",
            if k.is_newtonian() { " (Newtonian kernel)" } else { "" }
        ),
    ))
}

/// Runs the λ list on a bounded worker pool and classifies each run.
pub fn lambda_sweep(cfg: &ScenarioConfig) -> Result<SweepResult> {
    let kernel = cfg.kernel()?;
    check_sweep_kernel(kernel.as_deref())?;
    let lambdas = cfg.lambdas()?;
    let root = cfg.output.dir.as_ref().map(|_| cfg.output_dir());
    let runs = run_all(cfg, &lambdas, root.as_deref())?;
    let result = summarize_sweep(&cfg.name, runs);
    if let Some(r) = root {
        write_sweep_summary(&r.join("sweep.json"), &result)?;
    }
    Ok(result)
}

/// Monotone-consistency marking and the λ₀ bracket, for records sorted by λ.
pub fn summarize_sweep(name: &str, mut runs: Vec<RunRecord>) -> SweepResult {
    runs.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    let mut violations = Vec::new();
    let mut bad = vec![false; runs.len()];
    for a in 0..runs.len() {
        for b in a + 1..runs.len() {
            if runs[a].classification == Classification::GlobalSpreading && runs[b].classification == Classification::Blowup {
                violations.push([runs[a].lambda, runs[b].lambda]);
                bad[a] = true;
                bad[b] = true;
            }
        }
    }
    for (r, b) in runs.iter_mut().zip(&bad) {
        if *b {
            r.classification = Classification::Inconclusive;
        }
    }
    let bracket = bracket_of(&runs);
    SweepResult { scenario: name.to_string(), runs, bracket, violations }
}

fn bracket_of(runs: &[RunRecord]) -> LambdaBracket {
    let last_blowup = runs.iter().rposition(|r| r.classification == Classification::Blowup);
    let first_spread_after =
        runs.iter().enumerate().position(|(i, r)| last_blowup.map_or(true, |b| i > b) && r.classification == Classification::GlobalSpreading);
    match (last_blowup, first_spread_after) {
        (Some(b), Some(s)) if s == b + 1 => {
            LambdaBracket { lower: Some(runs[b].lambda), upper: Some(runs[s].lambda), hint: None }
        }
        (Some(b), Some(s)) => LambdaBracket {
            lower: None,
            upper: None,
            hint: Some(format!(
                "inconclusive runs between λ = {} and λ = {}; refine the λ grid or the mesh there",
                runs[b].lambda, runs[s].lambda
            )),
        },
        (Some(b), None) => LambdaBracket {
            lower: Some(runs[b].lambda),
            upper: None,
            hint: Some("no global spreading observed; widen the λ range upward".into()),
        },
        (None, Some(s)) => LambdaBracket {
            lower: None,
            upper: Some(runs[s].lambda),
            hint: Some("no blow-up observed; widen the λ range downward (or λ₀ < smallest λ)".into()),
        },
        (None, None) => LambdaBracket { lower: None, upper: None, hint: Some("no run was classified".into()) },
    }
}

pub fn write_sweep_summary(path: &Path, result: &SweepResult) -> Result<()> {
    let text = serde_json::to_string_pretty(result).expect("sweep serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Export formats for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

pub fn export(samples: &[DiagnosticSample], format: ExportFormat, path: &Path) -> Result<()> {
    match format {
        ExportFormat::Csv => write_diagnostics_csv(samples, path),
        ExportFormat::Jsonl => write_diagnostics_jsonl(samples, path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let pts: Vec<(f64, f64)> = (1..=20).map(|k| (k as f64, 3.0 / k as f64)).collect();
        let f = fit_rate(&pts, (1.0, 20.0)).unwrap();
        assert!((f.exponent + 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(fit_rate(&pts, (1.0, 5.0)).is_err());
        let mut bad = pts.clone();
        bad[3].1 = 0.0;
        assert!(fit_rate(&bad, (1.0, 20.0)).is_err());
    }

    #[test]
    fn barenblatt_peak_decays_like_one_over_t() {
        let b = crate::closed_forms::BarenblattProfile::new(1.0, 3).unwrap();
        let pts: Vec<(f64, f64)> = (0..60)
            .map(|k| 10f64.powf(1.0 + k as f64 / 59.0))
            .map(|t| (t, b.eval(t, 0.0).unwrap()))
            .collect();
        let f = fit_rate(&pts, (10.0, 100.0)).unwrap();
        assert!((f.exponent + 1.0).abs() < 1e-6, "{}", f.exponent);
    }

    #[test]
    fn geometric_lambda_range() {
        let text = r#"
name = "r"
[solver]
d = 3
t_end = 1.0
[grid]
n = 32
r_max = 5.0
[initial]
profile = "gaussian"
mass = 1.0
[sweep]
range = { start = 1.0, stop = 64.0, factor = 2.0 }
"#;
        let cfg = ScenarioConfig::from_toml_str(text, Path::new("x.toml")).unwrap();
        assert_eq!(cfg.lambdas().unwrap(), vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]);
    }

    #[test]
    fn parse_errors_carry_lines() {
        let text = "name = \"x\"\n[solver]\nd = 3\nbogus = 1\n";
        match ScenarioConfig::from_toml_str(text, Path::new("bad.toml")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn record(lambda: f64, c: Classification) -> RunRecord {
        RunRecord {
            lambda,
            status: TerminationStatus::Completed,
            classification: c,
            t_final: 1.0,
            tau_final: None,
            steps: 1,
            mass_initial: 1.0,
            mass_final: 1.0,
            clipped_mass: 0.0,
            outflow: 0.0,
            linf_fit: None,
            fits: vec![],
        }
    }

    #[test]
    fn bracket_and_monotone_consistency() {
        use Classification::*;
        let s = summarize_sweep("s", vec![record(4.0, GlobalSpreading), record(1.0, Blowup), record(2.0, Blowup)]);
        assert_eq!(s.bracket.lower, Some(2.0));
        assert_eq!(s.bracket.upper, Some(4.0));
        let s = summarize_sweep("s", vec![record(1.0, GlobalSpreading), record(2.0, Blowup), record(4.0, GlobalSpreading)]);
        assert_eq!(s.violations, vec![[1.0, 2.0]]);
        assert_eq!(s.runs[0].classification, Inconclusive);
        assert_eq!(s.runs[1].classification, Inconclusive);
        let s = summarize_sweep("s", vec![record(1.0, GlobalSpreading), record(2.0, GlobalSpreading)]);
        assert_eq!(s.bracket.upper, Some(1.0));
        assert!(s.bracket.hint.is_some());
    }
}

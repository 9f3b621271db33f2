//! Radial meshes and density fields: norms, moments, dilations and truncation.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::sphere_area;

/// Uniform cell-centered mesh on the ball of radius `r_max` in ℝ^d.
#[derive(Clone, Debug)]
pub struct RadialGrid {
    d: usize,
    r_max: f64,
    h: f64,
    centers: Vec<f64>,
    faces: Vec<f64>,
    volumes: Vec<f64>,
    face_areas: Vec<f64>,
    centroids: Vec<f64>,
}

impl PartialEq for RadialGrid {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d && self.n() == other.n() && self.r_max == other.r_max
    }
}

impl RadialGrid {
    pub fn new(d: usize, n: usize, r_max: f64) -> Result<Self> {
        if d < 2 {
            return Err(Error::Domain(format!("dimension must be at least 2, got {d}")));
        }
        if n < 2 {
            return Err(Error::Domain(format!("grid needs at least 2 cells, got {n}")));
        }
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(Error::Domain(format!("R_max must be positive, got {r_max}")));
        }
        let h = r_max / n as f64;
        let sigma = sphere_area(d);
        let df = d as f64;
        let faces: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
        let centers: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) * h).collect();
        let mut volumes = Vec::with_capacity(n);
        let mut centroids = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b) = (faces[i], faces[i + 1]);
            let vol = sigma * (b.powi(d as i32) - a.powi(d as i32)) / df;
            let first = sigma * (b.powi(d as i32 + 1) - a.powi(d as i32 + 1)) / (df + 1.0);
            volumes.push(vol);
            centroids.push(first / vol);
        }
        let face_areas = faces.iter().map(|&r| sigma * r.powi(d as i32 - 1)).collect();
        Ok(Self { d, r_max, h, centers, faces, volumes, face_areas, centroids })
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn n(&self) -> usize {
        self.centers.len()
    }
    pub fn r_max(&self) -> f64 {
        self.r_max
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }
    /// Face radii `r_{i-1/2}`, `n + 1` entries starting at 0.
    pub fn faces(&self) -> &[f64] {
        &self.faces
    }
    /// Shell volumes ω_i.
    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }
    pub fn face_areas(&self) -> &[f64] {
        &self.face_areas
    }
    /// Volume-weighted centroid radius of each shell.
    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn total_volume(&self) -> f64 {
        self.volumes.iter().sum()
    }

    /// Index of the cell containing `r` (clamped to the mesh).
    pub fn locate(&self, r: f64) -> usize {
        ((r / self.h).floor().max(0.0) as usize).min(self.n() - 1)
    }

    /// Cell averages of `f` computed with a 3-point Gauss rule per cell (weight r^{d-1}).
    pub fn sample<F: Fn(f64) -> f64>(&self, f: F) -> Vec<f64> {
        (0..self.n()).map(|i| self.cell_average(i, &f)).collect()
    }

    /// [`RadialGrid::sample`] spread over the rayon pool, for expensive `f`.
    pub fn par_sample<F: Fn(f64) -> f64 + Sync>(&self, f: F) -> Vec<f64> {
        use rayon::prelude::*;
        (0..self.n()).into_par_iter().map(|i| self.cell_average(i, &f)).collect()
    }

    fn cell_average<F: Fn(f64) -> f64>(&self, i: usize, f: &F) -> f64 {
        const X: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
        const W: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let (a, b) = (self.faces[i], self.faces[i + 1]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for k in 0..3 {
            let r = mid + half * X[k];
            acc += W[k] * f(r) * r.powi(self.d as i32 - 1);
        }
        sphere_area(self.d) * acc * half / self.volumes[i]
    }
}

/// Nonnegative cell averages on a shared radial grid.
#[derive(Clone, Debug)]
pub struct DensityField {
    grid: Arc<RadialGrid>,
    values: Vec<f64>,
}

/// Which λ-rescaling of initial data to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    /// `u0(x) = λ^{-2} f(x/λ)` in two dimensions.
    LinearD2,
    /// `u0(x) = λ^{-d} f(x/λ)`.
    Nonlinear,
}

/// Output of [`DensityField::rescale_initial`].
#[derive(Clone, Debug)]
pub struct Rescaled {
    pub field: DensityField,
    /// Mass that fell outside the target domain (below the rejection tolerance).
    pub clipped_mass: f64,
}

impl DensityField {
    pub fn new(grid: Arc<RadialGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} cells",
                values.len(),
                grid.n()
            )));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(Error::Domain(format!("density must be nonnegative, cell {i} holds {v}")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<RadialGrid>) -> Self {
        let n = grid.n();
        Self { grid, values: vec![0.0; n] }
    }

    /// Cell averages of a closed-form radial profile.
    pub fn from_profile<F: Fn(f64) -> f64>(grid: Arc<RadialGrid>, f: F) -> Self {
        let values = grid.sample(|r| f(r).max(0.0));
        Self { grid, values }
    }

    pub(crate) fn from_raw(grid: Arc<RadialGrid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.n());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_grid(&self, other: &DensityField) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().zip(self.grid.volumes()).map(|(u, w)| u * w).sum()
    }

    pub fn second_moment(&self) -> f64 {
        // ∫ r^2 over each shell, exact for piecewise-constant data.
        let d = self.grid.d() as i32;
        let sigma = sphere_area(self.grid.d());
        let faces = self.grid.faces();
        self.values
            .iter()
            .enumerate()
            .map(|(i, u)| {
                let m2 = sigma * (faces[i + 1].powi(d + 2) - faces[i].powi(d + 2)) / (d as f64 + 2.0);
                u * m2
            })
            .sum()
    }

    /// `(Σ ω_i u_i^p)^{1/p}`, or the cell max for `p = ∞`.
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        if !(p >= 1.0) {
            return Err(Error::InvalidExponent(p));
        }
        if p.is_infinite() {
            return Ok(self.values.iter().cloned().fold(0.0, f64::max));
        }
        let s: f64 = self
            .values
            .iter()
            .zip(self.grid.volumes())
            .map(|(u, w)| w * u.abs().powf(p))
            .sum();
        Ok(s.powf(1.0 / p))
    }

    /// `‖u‖_{L²(β)} = (Σ ω_i (1 + r_i²)^{2β} u_i²)^{1/2}`.
    pub fn weighted_l2_norm(&self, beta: f64) -> f64 {
        self.values
            .iter()
            .zip(self.grid.volumes())
            .zip(self.grid.centers())
            .map(|((u, w), r)| w * (1.0 + r * r).powf(2.0 * beta) * u * u)
            .sum::<f64>()
            .sqrt()
    }

    /// L¹ distance between two fields on the same grid.
    pub fn l1_distance(&self, other: &DensityField) -> Result<f64> {
        if !self.same_grid(other) {
            return Err(Error::GridMismatch("l1 distance between different grids".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .zip(self.grid.volumes())
            .map(|((a, b), w)| w * (a - b).abs())
            .sum())
    }

    /// `θ_k = (θ − k)_+`.
    pub fn truncated_part(&self, k: f64) -> DensityField {
        let values = self.values.iter().map(|u| (u - k).max(0.0)).collect();
        Self { grid: self.grid.clone(), values }
    }

    /// Piecewise-linear value through the cell centers (constant beyond the end cells).
    pub fn value_at(&self, r: f64) -> f64 {
        let c = self.grid.centers();
        let n = c.len();
        if r <= c[0] {
            return self.values[0];
        }
        if r >= c[n - 1] {
            return if r <= self.grid.r_max() { self.values[n - 1] } else { 0.0 };
        }
        let h = self.grid.h();
        let i = (((r - c[0]) / h).floor() as usize).min(n - 2);
        let s = (r - c[i]) / h;
        self.values[i] * (1.0 - s) + self.values[i + 1] * s
    }

    /// Limited slopes for a mass-exact linear reconstruction about each shell centroid.
    pub(crate) fn reconstruction_slopes(&self) -> Vec<f64> {
        let u = &self.values;
        let n = u.len();
        let h = self.grid.h();
        let cen = self.grid.centroids();
        let faces = self.grid.faces();
        (0..n)
            .map(|i| {
                let left = if i == 0 { 0.0 } else { (u[i] - u[i - 1]) / h };
                let right = if i + 1 == n { 0.0 } else { (u[i + 1] - u[i]) / h };
                let mut s = minmod(left, right);
                // keep the reconstruction nonnegative on the whole shell
                let lo = u[i] + s * (faces[i] - cen[i]);
                let hi = u[i] + s * (faces[i + 1] - cen[i]);
                if lo < 0.0 || hi < 0.0 {
                    s = 0.0;
                }
                s
            })
            .collect()
    }

    /// Mass of the reconstructed density inside `[a, b]`.
    fn mass_between(&self, slopes: &[f64], a: f64, b: f64) -> f64 {
        let g = &self.grid;
        let a = a.max(0.0);
        let b = b.min(g.r_max());
        if b <= a {
            return 0.0;
        }
        let d = g.d() as i32;
        let df = d as f64;
        let sigma = sphere_area(g.d());
        let faces = g.faces();
        let first = g.locate(a);
        let last = g.locate(b);
        let mut acc = 0.0;
        for i in first..=last {
            let lo = a.max(faces[i]);
            let hi = b.min(faces[i + 1]);
            if hi <= lo {
                continue;
            }
            let m0 = (hi.powi(d) - lo.powi(d)) / df;
            let m1 = (hi.powi(d + 1) - lo.powi(d + 1)) / (df + 1.0);
            let c = g.centroids()[i];
            acc += sigma * (self.values[i] * m0 + slopes[i] * (m1 - c * m0));
        }
        acc
    }

    /// Mass-preserving dilation `g(x) = s^d f(s x)` resampled onto `target`.
    ///
    /// Returns the resampled field and the mass of `g` lying beyond `target.r_max()`.
    pub fn dilate(&self, s: f64, target: Arc<RadialGrid>) -> Result<(DensityField, f64)> {
        if target.d() != self.grid.d() {
            return Err(Error::GridMismatch("dilation between different dimensions".into()));
        }
        if !(s > 0.0) {
            return Err(Error::Domain(format!("dilation factor must be positive, got {s}")));
        }
        let slopes = self.reconstruction_slopes();
        let faces = target.faces();
        let vols = target.volumes();
        let values: Vec<f64> = (0..target.n())
            .map(|i| (self.mass_between(&slopes, s * faces[i], s * faces[i + 1]) / vols[i]).max(0.0))
            .collect();
        let outside = self.mass_between(&slopes, s * target.r_max(), f64::INFINITY);
        Ok((Self { grid: target, values }, outside))
    }

    /// `u0(x) = λ^{-d} f(x/λ)` sampled on `target`.
    pub fn rescale_initial(&self, lambda: f64, mode: RescaleMode, target: Arc<RadialGrid>) -> Result<Rescaled> {
        if !(lambda >= 1.0) {
            return Err(Error::Domain(format!("λ must be at least 1, got {lambda}")));
        }
        if mode == RescaleMode::LinearD2 && self.grid.d() != 2 {
            return Err(Error::Domain("linear-mode rescaling is defined for d = 2 only".into()));
        }
        let (field, clipped) = self.dilate(1.0 / lambda, target.clone())?;
        let mass = self.mass();
        if clipped > 1e-6 * mass {
            return Err(Error::DomainTooSmall { clipped, mass, r_max: target.r_max() });
        }
        if clipped > 0.0 {
            log::warn!("rescale_initial clipped {clipped:.3e} of mass {mass:.6e}");
        }
        Ok(Rescaled { field, clipped_mass: clipped })
    }

    /// Writes `r_center,u` rows with 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            writeln!(w, "r_center,u")?;
            for (r, u) in self.grid.centers().iter().zip(&self.values) {
                writeln!(w, "{r:.16e},{u:.16e}")?;
            }
            w.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }

    /// Reads a snapshot written by [`write_csv`](Self::write_csv); the mesh is
    /// reconstructed from the uniformly spaced cell centers.
    pub fn read_csv(path: &Path, d: usize) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rs = Vec::new();
        let mut us = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let trimmed = line.trim();
            if trimmed.is_empty() || (lineno == 0 && trimmed.starts_with(|c: char| c.is_alphabetic())) {
                continue;
            }
            let parse_err = |message: String| Error::Parse { path: path.into(), line: lineno + 1, message };
            let mut cols = trimmed.split(',');
            let r: f64 = cols
                .next()
                .ok_or_else(|| parse_err("missing r column".into()))?
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad r: {e}")))?;
            let u: f64 = cols
                .next()
                .ok_or_else(|| parse_err("missing density column".into()))?
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad density: {e}")))?;
            rs.push(r);
            us.push(u);
        }
        if rs.len() < 2 {
            return Err(Error::Parse { path: path.into(), line: 0, message: "need at least two rows".into() });
        }
        let h = 2.0 * rs[0];
        for (i, r) in rs.iter().enumerate() {
            let expect = (i as f64 + 0.5) * h;
            if (r - expect).abs() > 1e-9 * h.max(1.0) * (i as f64 + 1.0) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: i + 2,
                    message: format!("cell centers must be uniform starting at h/2; got {r}, expected {expect}"),
                });
            }
        }
        let grid = Arc::new(RadialGrid::new(d, rs.len(), h * rs.len() as f64)?);
        DensityField::new(grid, us)
    }
}

/// Mass-exact piecewise-quadratic reconstruction
/// `q_i(r) = u_i + a_i (r − c_i) + b_i ((r − c_i)² − μ_i)` fitted to the two
/// neighbouring cell averages. Cells where the parabola would turn negative fall
/// back to the limited linear slope.
pub(crate) struct QuadraticReconstruction {
    values: Vec<f64>,
    centroids: Vec<f64>,
    mu: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl QuadraticReconstruction {
    pub(crate) fn new(field: &DensityField) -> Self {
        let g = field.grid();
        let n = g.n();
        let u = field.values();
        let faces = g.faces();
        let cen = g.centroids();
        let gl = crate::quadrature::GaussLegendre::new(8);
        let dm1 = g.d() as i32 - 1;
        // shell-weighted average of (r − c)^k over cell j
        let moment = |j: usize, c: f64, k: i32| {
            let w = gl.integrate(faces[j], faces[j + 1], |r| r.powi(dm1));
            gl.integrate(faces[j], faces[j + 1], |r| r.powi(dm1) * (r - c).powi(k)) / w
        };
        let linear = field.reconstruction_slopes();
        let mut mu = vec![0.0; n];
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        for i in 0..n {
            mu[i] = moment(i, cen[i], 2);
            let (j1, j2) = match i {
                0 => (1, 2),
                _ if i + 1 == n => (n - 3, n - 2),
                _ => (i - 1, i + 1),
            };
            let row = |j: usize| (moment(j, cen[i], 1), moment(j, cen[i], 2) - mu[i], u[j] - u[i]);
            let (p1, q1, r1) = row(j1);
            let (p2, q2, r2) = row(j2);
            let det = p1 * q2 - p2 * q1;
            let (mut ai, mut bi) = if det.abs() > 0.0 {
                ((r1 * q2 - r2 * q1) / det, (p1 * r2 - p2 * r1) / det)
            } else {
                (linear[i], 0.0)
            };
            let q = |r: f64| u[i] + ai * (r - cen[i]) + bi * ((r - cen[i]).powi(2) - mu[i]);
            let mut low = q(faces[i]).min(q(faces[i + 1]));
            if bi > 0.0 {
                let vertex = cen[i] - ai / (2.0 * bi);
                if vertex > faces[i] && vertex < faces[i + 1] {
                    low = low.min(q(vertex));
                }
            }
            if low < 0.0 {
                ai = linear[i];
                bi = 0.0;
            }
            a[i] = ai;
            b[i] = bi;
        }
        Self { values: u.to_vec(), centroids: cen.to_vec(), mu, a, b }
    }

    /// Reconstruction on cell `i`, evaluated at `r` (which should lie in that cell).
    #[inline]
    pub(crate) fn eval(&self, i: usize, r: f64) -> f64 {
        let x = r - self.centroids[i];
        (self.values[i] + self.a[i] * x + self.b[i] * (x * x - self.mu[i])).max(0.0)
    }
}

#[inline]
pub(crate) fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(d: usize, n: usize, r: f64) -> Arc<RadialGrid> {
        Arc::new(RadialGrid::new(d, n, r).unwrap())
    }

    #[test]
    fn shell_volumes_sum_to_ball() {
        for d in 2..=4 {
            let g = grid(d, 37, 3.0);
            assert!(g.volumes().iter().all(|&w| w > 0.0));
            let ball = crate::geometry::ball_volume(d, 3.0);
            assert!((g.total_volume() - ball).abs() < 1e-12 * ball);
        }
    }

    #[test]
    fn norms_of_simple_fields() {
        let g = grid(3, 100, 2.0);
        let zero = DensityField::zeros(g.clone());
        assert_eq!(zero.lp_norm(1.0).unwrap(), 0.0);
        assert_eq!(zero.lp_norm(f64::INFINITY).unwrap(), 0.0);
        assert_eq!(zero.mass(), 0.0);
        assert_eq!(zero.second_moment(), 0.0);
        let ball: Vec<f64> = g.centers().iter().map(|&r| if r < 1.0 { 1.0 } else { 0.0 }).collect();
        let ball = DensityField::new(g.clone(), ball).unwrap();
        assert!((ball.lp_norm(1.0).unwrap() - 4.0 * PI / 3.0).abs() < 1e-12);
        assert!(matches!(ball.lp_norm(0.5), Err(Error::InvalidExponent(_))));
    }

    #[test]
    fn weighted_norm_of_disc() {
        let g = grid(2, 200, 2.0);
        let disc: Vec<f64> = g.centers().iter().map(|&r| if r < 1.0 { 1.0 } else { 0.0 }).collect();
        let disc = DensityField::new(g, disc).unwrap();
        assert!((disc.weighted_l2_norm(0.0) - disc.lp_norm(2.0).unwrap()).abs() < 1e-14);
        // midpoint rule in r on the weight; closed form (7π/3)^{1/2}
        let exact = (PI * 7.0 / 3.0).sqrt();
        assert!((disc.weighted_l2_norm(1.0) - exact).abs() < 1e-4);
    }

    #[test]
    fn heat_kernel_second_moment() {
        // mass-M Gaussian with variance 2t per axis in d = 2 has second moment 4tM
        let (m, t) = (3.0, 0.7);
        let g = grid(2, 800, 12.0);
        let u = DensityField::from_profile(g, |r| m / (4.0 * PI * t) * (-r * r / (4.0 * t)).exp());
        assert!((u.mass() - m).abs() < 1e-8);
        assert!((u.second_moment() - 4.0 * t * m).abs() < 1e-3);
    }

    #[test]
    fn rescale_preserves_mass_and_scales_peak() {
        let g = grid(3, 400, 40.0);
        let f = DensityField::from_profile(g.clone(), |r| (-r * r).exp());
        let same = f.rescale_initial(1.0, RescaleMode::Nonlinear, g.clone()).unwrap();
        for (a, b) in same.field.values().iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-14);
        }
        for lambda in [2.0, 8.0] {
            let out = f.rescale_initial(lambda, RescaleMode::Nonlinear, g.clone()).unwrap();
            let u0 = out.field;
            assert!((u0.mass() + out.clipped_mass - f.mass()).abs() < 1e-12 * f.mass());
            let ratio = u0.lp_norm(f64::INFINITY).unwrap() / f.lp_norm(f64::INFINITY).unwrap();
            assert!((ratio - lambda.powi(-3)).abs() < 1e-12);
        }
        assert!(f.rescale_initial(0.5, RescaleMode::Nonlinear, g.clone()).is_err());
        assert!(f.rescale_initial(2.0, RescaleMode::LinearD2, g).is_err());
    }

    #[test]
    fn rescale_rejects_small_domain() {
        let g = grid(2, 100, 5.0);
        let f = DensityField::from_profile(g.clone(), |r| (-r * r).exp());
        let err = f.rescale_initial(4.0, RescaleMode::LinearD2, g).unwrap_err();
        assert!(matches!(err, Error::DomainTooSmall { .. }));
    }

    #[test]
    fn truncation_edges() {
        let g = grid(2, 50, 3.0);
        let f = DensityField::from_profile(g, |r| 2.0 * (-r * r).exp());
        assert_eq!(f.truncated_part(0.0).values(), f.values());
        let top = f.lp_norm(f64::INFINITY).unwrap();
        assert_eq!(f.truncated_part(top).mass(), 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let g = grid(3, 64, 4.0);
        let f = DensityField::from_profile(g, |r| (-r).exp());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.csv");
        f.write_csv(&path).unwrap();
        let back = DensityField::read_csv(&path, 3).unwrap();
        assert_eq!(back.values(), f.values());
        assert_eq!(back.grid().n(), 64);
        assert!((back.grid().r_max() - 4.0).abs() < 1e-12);
    }
}

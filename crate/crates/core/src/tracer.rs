//! Frozen-flow passive-scalar transport on a structured cylindrical grid.
//!
//! The liquid column `r < R, 0 < z < H` is split into `n_r × n_θ × n_z`
//! cells (periodic in θ, rigid lid at the free surface). Each step solves
//! `(I + Δt A) c' = c` with first-order upwind advection on face-normal
//! velocities and central diffusion; the system is solved with
//! Jacobi-preconditioned BiCGSTAB.

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{DomainBounds, FlowField, OperatingCondition, Query, Var};
use crate::error::{Error, Result};
use crate::par;

const CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct CylGrid {
    pub n_r: usize,
    pub n_theta: usize,
    pub n_z: usize,
    pub radius: f64,
    pub height: f64,
    pub dr: f64,
    pub dtheta: f64,
    pub dz: f64,
    /// All cells of the column lie in the liquid; kept for callers that mask.
    pub liquid: Vec<bool>,
}

impl CylGrid {
    pub fn new(bounds: &DomainBounds, height: f64, resolution: [usize; 3]) -> Result<Self> {
        let [n_r, n_theta, n_z] = resolution;
        if n_r < 2 || n_theta < 2 || n_z < 2 {
            return Err(Error::Argument(format!(
                "grid needs at least 2 cells per direction, got {resolution:?}"
            )));
        }
        if !(height > 0.0 && height <= bounds.tank_height) {
            return Err(Error::Argument(format!(
                "liquid height {height} outside (0, {}]",
                bounds.tank_height
            )));
        }
        let radius = bounds.radius();
        Ok(Self {
            n_r,
            n_theta,
            n_z,
            radius,
            height,
            dr: radius / n_r as f64,
            dtheta: TAU / n_theta as f64,
            dz: height / n_z as f64,
            liquid: vec![true; n_r * n_theta * n_z],
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_r * self.n_theta * self.n_z
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n_r * (j + self.n_theta * k)
    }

    pub fn ijk(&self, idx: usize) -> (usize, usize, usize) {
        (
            idx % self.n_r,
            (idx / self.n_r) % self.n_theta,
            idx / (self.n_r * self.n_theta),
        )
    }

    pub fn r_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dr
    }

    pub fn theta_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.dtheta
    }

    pub fn z_center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.dz
    }

    pub fn volume(&self, i: usize) -> f64 {
        self.r_center(i) * self.dr * self.dtheta * self.dz
    }

    pub fn volumes(&self) -> Vec<f64> {
        (0..self.n_cells())
            .map(|c| self.volume(c % self.n_r))
            .collect()
    }

    pub fn center(&self, idx: usize) -> [f64; 3] {
        let (i, j, k) = self.ijk(idx);
        cart(self.r_center(i), self.theta_center(j), self.z_center(k))
    }

    // face areas
    fn area_r(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.dr * self.dtheta * self.dz
    }

    fn area_theta(&self) -> f64 {
        self.dr * self.dz
    }

    fn area_z(&self, i: usize) -> f64 {
        self.volume(i) / self.dz
    }

    fn n_faces(&self) -> [usize; 3] {
        [
            (self.n_r - 1) * self.n_theta * self.n_z,
            self.n_r * self.n_theta * self.n_z,
            self.n_r * self.n_theta * (self.n_z - 1),
        ]
    }
}

fn cart(r: f64, theta: f64, z: f64) -> [f64; 3] {
    [r * theta.cos(), r * theta.sin(), z]
}

/// Face-normal velocities and cell diffusivities.
///
/// * `u_r[i + (n_r-1)(j + n_θ k)]`: face between radial cells `i` and `i+1`.
/// * `u_theta[idx(i, j, k)]`: face between `j` and `j+1 (mod n_θ)`.
/// * `u_z[idx(i, j, k)]`: face between `k` and `k+1`.
///
/// Wall, axis, bottom and lid faces carry no flux and are not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenField {
    pub u_r: Vec<f64>,
    pub u_theta: Vec<f64>,
    pub u_z: Vec<f64>,
    pub diffusivity: Vec<f64>,
}

impl FrozenField {
    pub fn zeros(grid: &CylGrid, d: f64) -> Self {
        let [a, b, c] = grid.n_faces();
        Self {
            u_r: vec![0.0; a],
            u_theta: vec![0.0; b],
            u_z: vec![0.0; c],
            diffusivity: vec![d; grid.n_cells()],
        }
    }

    /// Samples Cartesian velocities `vel(x, y, z)` at face centres.
    pub fn from_velocity(grid: &CylGrid, d: f64, vel: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let (ur, ut, uz) = face_sites(grid);
        Self {
            u_r: ur.iter().map(|s| project(s, vel(s.pos))).collect(),
            u_theta: ut.iter().map(|s| project(s, vel(s.pos))).collect(),
            u_z: uz.iter().map(|s| project(s, vel(s.pos))).collect(),
            diffusivity: vec![d; grid.n_cells()],
        }
    }

    fn check(&self, grid: &CylGrid) -> Result<()> {
        let [a, b, c] = grid.n_faces();
        crate::error::ensure_len("radial faces", a, self.u_r.len())?;
        crate::error::ensure_len("azimuthal faces", b, self.u_theta.len())?;
        crate::error::ensure_len("axial faces", c, self.u_z.len())?;
        crate::error::ensure_len("cell diffusivities", grid.n_cells(), self.diffusivity.len())?;
        if self.diffusivity.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Domain("diffusivity must be non-negative".into()));
        }
        Ok(())
    }
}

struct FaceSite {
    pos: [f64; 3],
    normal: [f64; 3],
}

fn project(s: &FaceSite, u: [f64; 3]) -> f64 {
    s.normal[0] * u[0] + s.normal[1] * u[1] + s.normal[2] * u[2]
}

fn face_sites(g: &CylGrid) -> (Vec<FaceSite>, Vec<FaceSite>, Vec<FaceSite>) {
    let mut ur = Vec::new();
    let mut ut = Vec::new();
    let mut uz = Vec::new();
    for k in 0..g.n_z {
        for j in 0..g.n_theta {
            let th = g.theta_center(j);
            for i in 0..g.n_r - 1 {
                let r = (i + 1) as f64 * g.dr;
                ur.push(FaceSite {
                    pos: cart(r, th, g.z_center(k)),
                    normal: [th.cos(), th.sin(), 0.0],
                });
            }
        }
    }
    for k in 0..g.n_z {
        for j in 0..g.n_theta {
            let th = (j + 1) as f64 * g.dtheta;
            for i in 0..g.n_r {
                ut.push(FaceSite {
                    pos: cart(g.r_center(i), th, g.z_center(k)),
                    normal: [-th.sin(), th.cos(), 0.0],
                });
            }
        }
    }
    for k in 0..g.n_z - 1 {
        for j in 0..g.n_theta {
            for i in 0..g.n_r {
                uz.push(FaceSite {
                    pos: cart(g.r_center(i), g.theta_center(j), (k + 1) as f64 * g.dz),
                    normal: [0.0, 0.0, 1.0],
                });
            }
        }
    }
    (ur, ut, uz)
}

/// Molecular diffusivity only, or with an eddy contribution `ν_t / Sc_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum DiffusivityMode {
    #[default]
    Molecular,
    Turbulent {
        schmidt: f64,
    },
}

/// Evaluates a flow field at the face centres of `grid` for condition `cond`.
pub fn sample_frozen_field(
    source: &dyn FlowField,
    grid: &CylGrid,
    cond: OperatingCondition,
    d_m: f64,
    mode: DiffusivityMode,
) -> Result<FrozenField> {
    let (ur, ut, uz) = face_sites(grid);
    let eval = |sites: &[FaceSite]| -> Result<Vec<f64>> {
        let qs: Vec<Query> = sites.iter().map(|s| Query::new(s.pos, cond)).collect();
        let f = source.fields_batch(&qs)?;
        Ok(sites
            .iter()
            .zip(&f)
            .map(|(s, f)| project(s, f.velocity()))
            .collect())
    };
    let mut field = FrozenField {
        u_r: eval(&ur)?,
        u_theta: eval(&ut)?,
        u_z: eval(&uz)?,
        diffusivity: vec![d_m; grid.n_cells()],
    };
    if let DiffusivityMode::Turbulent { schmidt } = mode {
        if !(schmidt > 0.0) {
            return Err(Error::Argument(
                "turbulent Schmidt number must be positive".into(),
            ));
        }
        let qs: Vec<Query> = (0..grid.n_cells())
            .map(|c| Query::new(grid.center(c), cond))
            .collect();
        for (d, f) in field.diffusivity.iter_mut().zip(source.fields_batch(&qs)?) {
            let (nu_t, _) = crate::physics::eddy_viscosity(f.get(Var::K), f.get(Var::Omega), 1e-8);
            *d += nu_t / schmidt;
        }
    }
    if [&field.u_r, &field.u_theta, &field.u_z]
        .iter()
        .any(|v| v.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::Divergence {
            term: "sampled face velocity".into(),
        });
    }
    Ok(field)
}

/// One face of a cell as seen from that cell: neighbour, outward volume
/// flux, and diffusive conductance `D A / d`.
#[derive(Clone, Copy)]
struct Link {
    nbr: usize,
    flux: f64,
    cond: f64,
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

fn links(grid: &CylGrid, f: &FrozenField, idx: usize, out: &mut Vec<Link>) {
    out.clear();
    let (i, j, k) = grid.ijk(idx);
    let d = &f.diffusivity;
    let (nr, nt) = (grid.n_r, grid.n_theta);
    let r_face = |i: usize, j: usize, k: usize| i + (nr - 1) * (j + nt * k);
    let mut push = |nbr: usize, flux: f64, area: f64, dist: f64| {
        out.push(Link {
            nbr,
            flux,
            cond: harmonic(d[idx], d[nbr]) * area / dist,
        })
    };
    if i + 1 < nr {
        push(
            grid.index(i + 1, j, k),
            f.u_r[r_face(i, j, k)] * grid.area_r(i),
            grid.area_r(i),
            grid.dr,
        );
    }
    if i > 0 {
        push(
            grid.index(i - 1, j, k),
            -f.u_r[r_face(i - 1, j, k)] * grid.area_r(i - 1),
            grid.area_r(i - 1),
            grid.dr,
        );
    }
    let arc = grid.r_center(i) * grid.dtheta;
    let jp = (j + 1) % nt;
    let jm = (j + nt - 1) % nt;
    push(
        grid.index(i, jp, k),
        f.u_theta[idx] * grid.area_theta(),
        grid.area_theta(),
        arc,
    );
    push(
        grid.index(i, jm, k),
        -f.u_theta[grid.index(i, jm, k)] * grid.area_theta(),
        grid.area_theta(),
        arc,
    );
    if k + 1 < grid.n_z {
        push(
            grid.index(i, j, k + 1),
            f.u_z[idx] * grid.area_z(i),
            grid.area_z(i),
            grid.dz,
        );
    }
    if k > 0 {
        push(
            grid.index(i, j, k - 1),
            -f.u_z[grid.index(i, j, k - 1)] * grid.area_z(i),
            grid.area_z(i),
            grid.dz,
        );
    }
}

/// Per-cell discrete divergence `Σ_f u_n A / V` (1/s).
pub fn cell_divergence(field: &FrozenField, grid: &CylGrid) -> Result<Vec<f64>> {
    field.check(grid)?;
    Ok(par::map_indexed(grid.n_cells(), |c| {
        let mut l = Vec::with_capacity(6);
        links(grid, field, c, &mut l);
        l.iter().map(|x| x.flux).sum::<f64>() / grid.volume(c % grid.n_r)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSummary {
    pub max_abs: f64,
    pub mean_abs: f64,
}

pub fn divergence_diagnostic(field: &FrozenField, grid: &CylGrid) -> Result<DivergenceSummary> {
    let div = cell_divergence(field, grid)?;
    Ok(DivergenceSummary {
        max_abs: div.iter().fold(0.0, |m, d| m.max(d.abs())),
        mean_abs: div.iter().map(|d| d.abs()).sum::<f64>() / div.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Flux form `∇·(u c)`: conserves mass for any field.
    Conservative,
    /// Advective form `u·∇c`: bounded (discrete maximum principle) for any field.
    #[default]
    Advective,
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conservative" => Ok(Scheme::Conservative),
            "advective" => Ok(Scheme::Advective),
            _ => Err(Error::Argument(format!(
                "unknown scheme {s:?} (expected conservative or advective)"
            ))),
        }
    }
}

/// Linear-solver controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-13,
            max_iter: 1000,
        }
    }
}

/// The assembled `(I + Δt A)` as a 7-point stencil.
pub struct StepOperator {
    diag: Vec<f64>,
    nbr: Vec<[usize; 6]>,
    off: Vec<[f64; 6]>,
    solver: SolverConfig,
}

impl StepOperator {
    pub fn assemble(
        field: &FrozenField,
        grid: &CylGrid,
        dt: f64,
        scheme: Scheme,
        solver: SolverConfig,
    ) -> Result<Self> {
        field.check(grid)?;
        if !(dt > 0.0) {
            return Err(Error::Argument("time step must be positive".into()));
        }
        let rows = par::map_indexed(grid.n_cells(), |c| {
            let mut l = Vec::with_capacity(6);
            links(grid, field, c, &mut l);
            let s = dt / grid.volume(c % grid.n_r);
            let mut diag = 1.0;
            let mut nbr = [usize::MAX; 6];
            let mut off = [0.0; 6];
            for (n, link) in l.iter().enumerate() {
                let inflow = link.flux.min(0.0);
                diag += s * link.cond
                    + match scheme {
                        Scheme::Conservative => s * link.flux.max(0.0),
                        Scheme::Advective => -s * inflow,
                    };
                nbr[n] = link.nbr;
                off[n] = s * (inflow - link.cond);
            }
            (diag, nbr, off)
        });
        let mut op = Self {
            diag: Vec::with_capacity(rows.len()),
            nbr: Vec::with_capacity(rows.len()),
            off: Vec::with_capacity(rows.len()),
            solver,
        };
        for (d, n, o) in rows {
            op.diag.push(d);
            op.nbr.push(n);
            op.off.push(o);
        }
        Ok(op)
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        par::for_each_chunk_mut(y, CHUNK, |ci, out| {
            let base = ci * CHUNK;
            for (o, yi) in out.iter_mut().enumerate() {
                let i = base + o;
                let mut s = self.diag[i] * x[i];
                for n in 0..6 {
                    let j = self.nbr[i][n];
                    if j != usize::MAX {
                        s += self.off[i][n] * x[j];
                    }
                }
                *yi = s;
            }
        });
    }

    /// Solves `M c' = c` starting from `c`.
    pub fn solve(&self, c: &[f64]) -> Result<Vec<f64>> {
        bicgstab(self, c)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let parts = par::map_slice(&par::chunk_ranges(a.len(), CHUNK), |r| {
        a[r.clone()]
            .iter()
            .zip(&b[r.clone()])
            .map(|(x, y)| x * y)
            .sum::<f64>()
    });
    parts.iter().sum()
}

fn axpy_into(out: &mut [f64], a: &[f64], s: f64, b: &[f64]) {
    par::for_each_chunk_mut(out, CHUNK, |ci, o| {
        let base = ci * CHUNK;
        for (k, v) in o.iter_mut().enumerate() {
            *v = a[base + k] + s * b[base + k];
        }
    });
}

fn bicgstab(op: &StepOperator, b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let tol = op.solver.rel_tol * bnorm;
    let inv_diag: Vec<f64> = op.diag.iter().map(|d| 1.0 / d).collect();
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&inv_diag).map(|(a, d)| a * d).collect() };

    let mut x = b.to_vec();
    let mut ax = vec![0.0; n];
    op.apply(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut res = dot(&r, &r).sqrt();
    for it in 0..op.solver.max_iter {
        if res <= tol {
            return Ok(x);
        }
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            return Err(Error::Solver {
                iterations: it,
                residual: res / bnorm,
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let ph = precond(&p);
        op.apply(&ph, &mut v);
        alpha = rho / dot(&r_hat, &v);
        axpy_into(&mut s, &r, -alpha, &v);
        let sh = precond(&s);
        op.apply(&sh, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * ph[i] + omega * sh[i];
        }
        // recompute the true residual to avoid drift at tight tolerances
        op.apply(&x, &mut ax);
        for i in 0..n {
            r[i] = b[i] - ax[i];
        }
        res = dot(&r, &r).sqrt();
        if !res.is_finite() {
            break;
        }
    }
    if res <= tol {
        return Ok(x);
    }
    Err(Error::Solver {
        iterations: op.solver.max_iter,
        residual: res / bnorm,
    })
}

/// One implicit step; see [`StepOperator`] for repeated use.
pub fn step(
    c: &[f64],
    field: &FrozenField,
    grid: &CylGrid,
    dt: f64,
    scheme: Scheme,
) -> Result<Vec<f64>> {
    crate::error::ensure_len("concentration", grid.n_cells(), c.len())?;
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite concentration".into()));
    }
    StepOperator::assemble(field, grid, dt, scheme, SolverConfig::default())?.solve(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TracerConfig {
    /// Molecular diffusivity (m²/s).
    pub d_m: f64,
    pub dt: f64,
    pub t_end: f64,
    pub grid: [usize; 3],
    pub scheme: Scheme,
    pub diffusivity: DiffusivityMode,
    pub patch_r: f64,
    /// Depth of the patch centre below the liquid surface (m).
    pub patch_depth: f64,
    pub patch_radius: f64,
    pub probe_r: f64,
    pub probe_theta: f64,
    pub probe_z: f64,
    pub solver: SolverConfig,
}

impl Default for TracerConfig {
    fn default() -> Self {
        Self {
            d_m: 6e-10,
            dt: 0.05,
            t_end: 200.0,
            grid: [32, 16, 48],
            scheme: Scheme::Advective,
            diffusivity: DiffusivityMode::Molecular,
            patch_r: 0.7,
            patch_depth: 0.5,
            patch_radius: 0.1,
            probe_r: 0.7,
            probe_theta: 0.0,
            probe_z: 0.5,
            solver: SolverConfig::default(),
        }
    }
}

impl TracerConfig {
    pub fn validate(&self, bounds: &DomainBounds, height: f64) -> Result<()> {
        let r = bounds.radius();
        let patch_z = height - self.patch_depth;
        let ok = self.dt > 0.0
            && self.t_end >= 0.0
            && self.d_m >= 0.0
            && self.patch_radius > 0.0
            && self.patch_r + self.patch_radius <= r
            && patch_z - self.patch_radius >= 0.0
            && self.patch_depth >= self.patch_radius
            && self.probe_r <= r
            && (0.0..height).contains(&self.probe_z);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "tracer patch/probe/time settings invalid for H = {height}: {self:?}"
            )))
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt + 1e-9).floor() as usize
    }
}

/// Probe readings normalized by the fully mixed concentration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbeSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Total tracer mass (concentration × m³) at each time.
    pub total_mass: Vec<f64>,
    pub max_c: Vec<f64>,
    pub min_c: Vec<f64>,
}

impl ProbeSeries {
    /// CSV columns `t, c_probe, total_mass, max_c, min_c`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let header: Vec<String> = ["t", "c_probe", "total_mass", "max_c", "min_c"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<f64>> = (0..self.times.len())
            .map(|i| {
                vec![
                    self.times[i],
                    self.values[i],
                    self.total_mass[i],
                    self.max_c[i],
                    self.min_c[i],
                ]
            })
            .collect();
        crate::evaluation::write_csv(path, &header, &rows)
    }
}

/// Concentration field with the patch set to 1 (sub-cell sampled volume
/// fraction inside the sphere).
pub fn patch_initial_condition(grid: &CylGrid, center: [f64; 3], radius: f64) -> Vec<f64> {
    const SUB: usize = 5;
    par::map_indexed(grid.n_cells(), |c| {
        let (i, j, k) = grid.ijk(c);
        let mut inside = 0.0;
        let mut total = 0.0;
        for a in 0..SUB {
            let r = (i as f64 + (a as f64 + 0.5) / SUB as f64) * grid.dr;
            for b in 0..SUB {
                let th = (j as f64 + (b as f64 + 0.5) / SUB as f64) * grid.dtheta;
                for e in 0..SUB {
                    let z = (k as f64 + (e as f64 + 0.5) / SUB as f64) * grid.dz;
                    let p = cart(r, th, z);
                    let d2: f64 = (0..3).map(|q| (p[q] - center[q]).powi(2)).sum();
                    // weight by r: sub-cells are not equal-volume
                    total += r;
                    if d2 <= radius * radius {
                        inside += r;
                    }
                }
            }
        }
        inside / total
    })
}

/// Trilinear interpolation of cell-centred values in `(r, θ, z)`; clamps to
/// the outermost centres radially and axially, periodic in θ.
pub fn probe_value(grid: &CylGrid, c: &[f64], r: f64, theta: f64, z: f64) -> f64 {
    let axis = |x: f64, h: f64, n: usize| {
        let s = (x / h - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = (s.floor() as usize).min(n - 2);
        (lo, s - lo as f64)
    };
    let (i0, fr) = axis(r, grid.dr, grid.n_r);
    let (k0, fz) = axis(z, grid.dz, grid.n_z);
    let st = (theta.rem_euclid(TAU) / grid.dtheta - 0.5).rem_euclid(grid.n_theta as f64);
    let j0 = (st.floor() as usize) % grid.n_theta;
    let ft = st - st.floor();
    let j1 = (j0 + 1) % grid.n_theta;
    let mut v = 0.0;
    for (i, wi) in [(i0, 1.0 - fr), (i0 + 1, fr)] {
        for (j, wj) in [(j0, 1.0 - ft), (j1, ft)] {
            for (k, wk) in [(k0, 1.0 - fz), (k0 + 1, fz)] {
                v += wi * wj * wk * c[grid.index(i, j, k)];
            }
        }
    }
    v
}

/// Outcome of a tracer run: probe series plus the field diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct TracerRun {
    pub series: ProbeSeries,
    pub divergence: DivergenceSummary,
    pub final_state: Vec<f64>,
}

/// Integrates a patch release in the frozen `field` and records the probe.
pub fn simulate_field(
    field: &FrozenField,
    grid: &CylGrid,
    cfg: &TracerConfig,
) -> Result<TracerRun> {
    let divergence = divergence_diagnostic(field, grid)?;
    let op = StepOperator::assemble(field, grid, cfg.dt, cfg.scheme, cfg.solver)?;
    let center = cart(cfg.patch_r, 0.0, grid.height - cfg.patch_depth);
    let mut c = patch_initial_condition(grid, center, cfg.patch_radius);
    let vols = grid.volumes();
    let volume: f64 = vols.iter().sum();
    let mass = |c: &[f64]| dot(c, &vols);
    let m0 = mass(&c);
    if !(m0 > 0.0) {
        return Err(Error::Argument(
            "tracer patch does not overlap any cell".into(),
        ));
    }
    let mixed = m0 / volume;
    let mut series = ProbeSeries::default();
    let record = |t: f64, c: &[f64], s: &mut ProbeSeries| {
        s.times.push(t);
        s.values
            .push(probe_value(grid, c, cfg.probe_r, cfg.probe_theta, cfg.probe_z) / mixed);
        s.total_mass.push(mass(c));
        s.max_c
            .push(c.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        s.min_c
            .push(c.iter().copied().fold(f64::INFINITY, f64::min));
    };
    record(0.0, &c, &mut series);
    for n in 1..=cfg.n_steps() {
        c = op.solve(&c)?;
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                term: format!("tracer concentration at step {n}"),
            });
        }
        record(n as f64 * cfg.dt, &c, &mut series);
    }
    Ok(TracerRun {
        series,
        divergence,
        final_state: c,
    })
}

/// Samples `source` at condition `cond` and runs [`simulate_field`].
pub fn simulate(
    source: &dyn FlowField,
    bounds: &DomainBounds,
    cond: OperatingCondition,
    cfg: &TracerConfig,
) -> Result<TracerRun> {
    cfg.validate(bounds, cond.height)?;
    let grid = CylGrid::new(bounds, cond.height, cfg.grid)?;
    let field = sample_frozen_field(source, &grid, cond, cfg.d_m, cfg.diffusivity)?;
    log::info!(
        "tracer field divergence: {:?}",
        divergence_diagnostic(&field, &grid)?
    );
    simulate_field(&field, &grid, cfg)
}

/// Rigid-body rotation `Ω × r` about the tank axis.
pub fn solid_swirl(omega: f64) -> impl Fn([f64; 3]) -> [f64; 3] {
    move |p| [-omega * p[1], omega * p[0], 0.0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mms::{MmsSolution, MmsSpec};
    use crate::physics::PhysicsContext;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn grid(res: [usize; 3], h: f64) -> CylGrid {
        CylGrid::new(&DomainBounds::default(), h, res).unwrap()
    }

    fn mms() -> MmsSolution {
        let b = DomainBounds::default();
        MmsSolution::new(MmsSpec::default(), b, PhysicsContext::default_for(&b))
    }

    #[test]
    fn grid_volume_and_spacing() {
        let g = grid([7, 5, 9], 3.3);
        let v: f64 = g.volumes().iter().sum();
        let exact = PI * g.radius * g.radius * 3.3;
        assert!((v - exact).abs() / exact < 1e-10);
        let g2 = grid([14, 5, 9], 3.3);
        assert_eq!(g2.dr * 2.0, g.dr);
        assert!(CylGrid::new(&DomainBounds::default(), 9.0, [4, 4, 4]).is_err());
        let g4 = grid([2, 4, 2], 1.0);
        let mut l = Vec::new();
        links(
            &g4,
            &FrozenField::zeros(&g4, 0.0),
            g4.index(0, 0, 0),
            &mut l,
        );
        assert!(l.iter().any(|x| x.nbr == g4.index(0, 3, 0)));
    }

    #[test]
    fn swirl_has_no_radial_or_axial_velocity_and_no_divergence() {
        let g = grid([8, 8, 6], 2.0);
        let f = FrozenField::from_velocity(&g, 0.0, solid_swirl(3.0));
        assert!(f.u_r.iter().chain(&f.u_z).all(|u| u.abs() < 1e-14));
        assert!(divergence_diagnostic(&f, &g).unwrap().max_abs < 1e-12);
    }

    #[test]
    fn zero_source_gives_zero_field() {
        let g = grid([4, 4, 4], 2.0);
        let f = FrozenField::from_velocity(&g, 0.0, |_| [0.0; 3]);
        assert_eq!(f, FrozenField::zeros(&g, 0.0));
    }

    #[test]
    fn lid_divergence_of_uniform_axial_flow() {
        let g = grid([4, 4, 6], 2.0);
        let f = FrozenField::from_velocity(&g, 0.0, |_| [0.0, 0.0, 0.2]);
        let div = cell_divergence(&f, &g).unwrap();
        for (c, d) in div.iter().enumerate() {
            let (_, _, k) = g.ijk(c);
            if k == 0 || k == g.n_z - 1 {
                assert!(d.abs() > 0.0);
            } else {
                assert!(d.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mms_divergence_converges_at_second_order() {
        let sol = mms();
        let cond = OperatingCondition::new(120.0, 4.0);
        let mut errs = Vec::new();
        for n in [8usize, 16, 32] {
            let g = grid([n, n, n], cond.height);
            let f = sample_frozen_field(&sol, &g, cond, 0.0, DiffusivityMode::Molecular).unwrap();
            errs.push(divergence_diagnostic(&f, &g).unwrap().mean_abs);
        }
        let slope =
            ((errs[0] / errs[2]).ln() / 4f64.ln()).min((errs[1] / errs[2]).ln() / 2f64.ln());
        assert!(slope >= 1.8, "{errs:?} slope {slope}");
    }

    #[test]
    fn uniform_state_is_fixed_point() {
        let g = grid([5, 6, 7], 3.0);
        let c = vec![0.37; g.n_cells()];
        let still = FrozenField::zeros(&g, 1e-3);
        assert_eq!(step(&c, &still, &g, 0.1, Scheme::Conservative).unwrap(), c);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut noisy = FrozenField::zeros(&g, 1e-4);
        for u in noisy
            .u_r
            .iter_mut()
            .chain(noisy.u_theta.iter_mut())
            .chain(noisy.u_z.iter_mut())
        {
            *u = rng.random_range(-0.5..0.5);
        }
        let out = step(&c, &noisy, &g, 0.1, Scheme::Advective).unwrap();
        assert!(out.iter().all(|v| (v - 0.37).abs() < 1e-12));
        let swirl = FrozenField::from_velocity(&g, 1e-4, solid_swirl(2.0));
        let out = step(&c, &swirl, &g, 0.1, Scheme::Conservative).unwrap();
        assert!(out.iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn diffusion_conserves_point_mass() {
        let g = grid([6, 6, 6], 3.0);
        let mut c = vec![0.0; g.n_cells()];
        c[g.index(2, 3, 4)] = 1.0;
        let f = FrozenField::zeros(&g, 1e-2);
        let vols = g.volumes();
        let m0 = dot(&c, &vols);
        for _ in 0..10 {
            c = step(&c, &f, &g, 0.5, Scheme::Conservative).unwrap();
        }
        assert!((dot(&c, &vols) - m0).abs() / m0 < 1e-12);
    }

    // Independent 1-D implicit upwind + diffusion with closed ends (Thomas algorithm).
    fn tridiagonal_oracle(c: &[f64], w: f64, d: f64, dz: f64, dt: f64) -> Vec<f64> {
        let n = c.len();
        let (a_adv, a_dif) = (dt * w / dz, dt * d / (dz * dz));
        let mut lower = vec![0.0; n];
        let mut diag = vec![1.0; n];
        let mut upper = vec![0.0; n];
        for k in 0..n {
            if k + 1 < n {
                diag[k] += a_adv + a_dif;
                upper[k] -= a_dif;
            }
            if k > 0 {
                lower[k] -= a_adv + a_dif;
                diag[k] += a_dif;
            }
        }
        let mut cp = vec![0.0; n];
        let mut dp = vec![0.0; n];
        cp[0] = upper[0] / diag[0];
        dp[0] = c[0] / diag[0];
        for k in 1..n {
            let m = diag[k] - lower[k] * cp[k - 1];
            cp[k] = upper[k] / m;
            dp[k] = (c[k] - lower[k] * dp[k - 1]) / m;
        }
        let mut x = vec![0.0; n];
        x[n - 1] = dp[n - 1];
        for k in (0..n - 1).rev() {
            x[k] = dp[k] - cp[k] * x[k + 1];
        }
        x
    }

    #[test]
    fn axial_column_matches_tridiagonal_oracle() {
        let g = grid([2, 2, 20], 4.0);
        let (w, d, dt) = (0.3, 2e-3, 0.2);
        let f = FrozenField::from_velocity(&g, d, |_| [0.0, 0.0, w]);
        let mut col: Vec<f64> = (0..g.n_z).map(|k| (k as f64 * 0.7).sin().abs()).collect();
        let mut c: Vec<f64> = (0..g.n_cells()).map(|i| col[g.ijk(i).2]).collect();
        for _ in 0..5 {
            c = step(&c, &f, &g, dt, Scheme::Conservative).unwrap();
            col = tridiagonal_oracle(&col, w, d, g.dz, dt);
        }
        for i in 0..g.n_cells() {
            assert!((c[i] - col[g.ijk(i).2]).abs() < 1e-10);
        }
    }

    #[test]
    fn advective_scheme_respects_bounds_for_random_fields() {
        let g = grid([6, 8, 8], 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut f = FrozenField::zeros(&g, 1e-3);
        for u in f
            .u_r
            .iter_mut()
            .chain(f.u_theta.iter_mut())
            .chain(f.u_z.iter_mut())
        {
            *u = rng.random_range(-1.0..1.0);
        }
        let mut c: Vec<f64> = (0..g.n_cells())
            .map(|_| rng.random_range(0.2..0.9))
            .collect();
        let (lo, hi) = (
            c.iter().copied().fold(1.0, f64::min),
            c.iter().copied().fold(0.0, f64::max),
        );
        for _ in 0..50 {
            c = step(&c, &f, &g, 0.3, Scheme::Advective).unwrap();
            assert!(c.iter().all(|v| *v >= lo - 1e-10 && *v <= hi + 1e-10));
        }
    }

    #[test]
    fn probe_interpolation_is_exact_for_linear_in_z() {
        let g = grid([4, 4, 10], 2.0);
        let c: Vec<f64> = (0..g.n_cells()).map(|i| g.z_center(g.ijk(i).2)).collect();
        assert!((probe_value(&g, &c, 0.5, 1.0, 0.77) - 0.77).abs() < 1e-14);
        let ones = vec![1.0; g.n_cells()];
        assert!((probe_value(&g, &ones, 0.01, -2.0, 0.05) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn still_liquid_keeps_probe_dry() {
        let b = DomainBounds::default();
        let cfg = TracerConfig {
            d_m: 0.0,
            t_end: 1.0,
            grid: [8, 8, 8],
            ..TracerConfig::default()
        };
        let g = CylGrid::new(&b, 3.0, cfg.grid).unwrap();
        let run = simulate_field(&FrozenField::zeros(&g, 0.0), &g, &cfg).unwrap();
        assert_eq!(run.series.times.len(), 21);
        assert!(run.series.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn conservative_run_keeps_mixed_mean_at_one() {
        let b = DomainBounds::default();
        let cfg = TracerConfig {
            t_end: 2.0,
            grid: [8, 8, 8],
            scheme: Scheme::Conservative,
            ..TracerConfig::default()
        };
        let run = simulate(&mms(), &b, OperatingCondition::new(100.0, 3.0), &cfg).unwrap();
        let g = CylGrid::new(&b, 3.0, cfg.grid).unwrap();
        let vols = g.volumes();
        let v: f64 = vols.iter().sum();
        let m0 = run.series.total_mass[0];
        let mean = dot(&run.final_state, &vols) / v / (m0 / v);
        assert!((mean - 1.0).abs() < 1e-9);
    }
}

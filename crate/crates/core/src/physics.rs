//! Pointwise residuals of the steady RANS system written in the inertial
//! frame with multiple-reference-frame (MRF) rotating zones.
//!
//! All operators take field values together with their physical gradients
//! and Laplacians ([`SpatialDerivs`]) so they work the same for trained
//! surrogates (autodiff derivatives) and the analytic manufactured solution.

use serde::{Deserialize, Serialize};

use crate::domain::{DomainBounds, Query, SpatialDerivs, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FluidProperties {
    /// Kinematic viscosity (m²/s).
    pub nu: f64,
    /// Density (kg/m³).
    pub rho: f64,
    pub gravity: [f64; 3],
}

impl Default for FluidProperties {
    fn default() -> Self {
        Self {
            nu: 1e-6,
            rho: 1000.0,
            gravity: [0.0, 0.0, -9.81],
        }
    }
}

/// A rotating cylindrical shell around the tank axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub z_low: f64,
    pub z_high: f64,
    pub radius: f64,
}

impl Zone {
    pub fn contains(&self, pos: [f64; 3]) -> bool {
        pos[2] >= self.z_low && pos[2] <= self.z_high && pos[0].hypot(pos[1]) <= self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotatingZoneSpec {
    pub zones: Vec<Zone>,
}

impl RotatingZoneSpec {
    /// Four impeller zones of radius `0.6 T/2`, centred at `(2i + 1) H_tank / 8`
    /// with half-height `T/10`.
    pub fn default_for(bounds: &DomainBounds) -> Self {
        let half = bounds.diameter / 10.0;
        let zones = (0..4)
            .map(|i| {
                let zc = (2 * i + 1) as f64 * bounds.tank_height / 8.0;
                Zone {
                    z_low: zc - half,
                    z_high: zc + half,
                    radius: 0.6 * bounds.radius(),
                }
            })
            .collect();
        Self { zones }
    }

    pub fn none() -> Self {
        Self { zones: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        for z in &self.zones {
            if !(z.z_low < z.z_high && z.radius > 0.0) {
                return Err(Error::Config(format!("degenerate rotating zone {z:?}")));
            }
        }
        let mut sorted = self.zones.clone();
        sorted.sort_by(|a, b| a.z_low.total_cmp(&b.z_low));
        if sorted.windows(2).any(|w| w[1].z_low < w[0].z_high) {
            return Err(Error::Config("rotating zones overlap".into()));
        }
        Ok(())
    }

    pub fn contains(&self, pos: [f64; 3]) -> bool {
        self.zones.iter().any(|z| z.contains(pos))
    }
}

/// Constants and floors of the two-equation closure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosureConstants {
    pub sigma_k: f64,
    pub sigma_omega: f64,
    pub beta_star: f64,
    pub beta: f64,
    pub alpha_omega: f64,
    pub omega_floor: f64,
    pub k_floor: f64,
}

impl Default for ClosureConstants {
    fn default() -> Self {
        Self {
            sigma_k: 2.0,
            sigma_omega: 2.0,
            beta_star: 0.09,
            beta: 0.075,
            alpha_omega: 5.0 / 9.0,
            omega_floor: 1e-8,
            k_floor: 1e-12,
        }
    }
}

/// Everything the residual operators need besides the fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsContext {
    pub fluid: FluidProperties,
    pub zones: RotatingZoneSpec,
    pub closure: ClosureConstants,
}

impl PhysicsContext {
    pub fn default_for(bounds: &DomainBounds) -> Self {
        Self {
            fluid: FluidProperties::default(),
            zones: RotatingZoneSpec::default_for(bounds),
            closure: ClosureConstants::default(),
        }
    }
}

/// Body force in the momentum equation and the k / ω source terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Forcing {
    pub f: [f64; 3],
    pub s_k: f64,
    pub s_omega: f64,
}

impl Forcing {
    pub fn gravity(fluid: &FluidProperties) -> Self {
        Self {
            f: fluid.gravity,
            s_k: 0.0,
            s_omega: 0.0,
        }
    }
}

/// Evaluated residuals at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ResidualBundle {
    /// 1/s
    pub r_cont: f64,
    /// m/s²
    pub r_mom: [f64; 3],
    /// m²/s³
    pub r_k: f64,
    /// 1/s²
    pub r_omega: f64,
    /// A floor or clamp was applied to k or ω.
    pub flagged: bool,
}

/// Angular velocity `(0, 0, 2π rpm / 60)` inside a rotating zone, zero outside.
pub fn omega_at(pos: [f64; 3], zones: &RotatingZoneSpec, rpm: f64) -> [f64; 3] {
    if zones.contains(pos) {
        [0.0, 0.0, 2.0 * std::f64::consts::PI * rpm / 60.0]
    } else {
        [0.0; 3]
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// `∂u/∂x + ∂v/∂y + ∂w/∂z`.
pub fn continuity_residual(grad: &[[f64; 3]; 7]) -> f64 {
    grad[Var::U as usize][0] + grad[Var::V as usize][1] + grad[Var::W as usize][2]
}

/// `ν_t = max(k, 0) / max(ω, ω_floor)`; the flag reports whether a clamp fired.
pub fn eddy_viscosity(k: f64, omega: f64, omega_floor: f64) -> (f64, bool) {
    let flagged = k < 0.0 || omega < omega_floor;
    (k.max(0.0) / omega.max(omega_floor), flagged)
}

/// Eddy viscosity with its gradient (quotient rule on the clamped inputs).
#[derive(Debug, Clone, Copy)]
struct Viscosity {
    nu_t: f64,
    grad: [f64; 3],
    k: f64,
    omega: f64,
    k_active: bool,
    omega_active: bool,
    flagged: bool,
}

fn viscosity(d: &SpatialDerivs, closure: &ClosureConstants) -> Viscosity {
    let k_raw = d.fields.get(Var::K);
    let w_raw = d.fields.get(Var::Omega);
    let k_active = k_raw >= 0.0;
    let omega_active = w_raw >= closure.omega_floor;
    let k = k_raw.max(0.0);
    let omega = w_raw.max(closure.omega_floor);
    let gk = if k_active {
        d.grad[Var::K as usize]
    } else {
        [0.0; 3]
    };
    let gw = if omega_active {
        d.grad[Var::Omega as usize]
    } else {
        [0.0; 3]
    };
    let grad = std::array::from_fn(|j| gk[j] / omega - k * gw[j] / (omega * omega));
    Viscosity {
        nu_t: k / omega,
        grad,
        k,
        omega,
        k_active,
        omega_active,
        flagged: !(k_active && omega_active),
    }
}

fn velocity_gradient(d: &SpatialDerivs) -> [[f64; 3]; 3] {
    [
        d.grad[Var::U as usize],
        d.grad[Var::V as usize],
        d.grad[Var::W as usize],
    ]
}

/// Momentum residual
/// `(u_rel·∇)u + Ω×u + ∇p/ρ − (ν+ν_t)Δu − (∇ν_t·∇)u − f` with `u_rel = u − Ω×r`.
///
/// Returns the residual and whether a k/ω clamp fired.
pub fn momentum_residual(
    d: &SpatialDerivs,
    pos: [f64; 3],
    rpm: f64,
    ctx: &PhysicsContext,
    forcing: [f64; 3],
) -> ([f64; 3], bool) {
    let omega = omega_at(pos, &ctx.zones, rpm);
    let u = d.fields.velocity();
    let frame = cross(omega, pos);
    let u_rel = [u[0] - frame[0], u[1] - frame[1], u[2] - frame[2]];
    let coriolis = cross(omega, u);
    let vis = viscosity(d, &ctx.closure);
    let g = velocity_gradient(d);
    let gp = d.grad[Var::P as usize];
    let lap = [
        d.lap[Var::U as usize],
        d.lap[Var::V as usize],
        d.lap[Var::W as usize],
    ];
    let nu_eff = ctx.fluid.nu + vis.nu_t;
    let r = std::array::from_fn(|i| {
        dot(u_rel, g[i]) + coriolis[i] + gp[i] / ctx.fluid.rho
            - nu_eff * lap[i]
            - dot(vis.grad, g[i])
            - forcing[i]
    });
    (r, vis.flagged)
}

/// Non-rotating RANS momentum residual (`u_rel = u`, no Coriolis term).
pub fn momentum_residual_inertial(
    d: &SpatialDerivs,
    ctx: &PhysicsContext,
    forcing: [f64; 3],
) -> [f64; 3] {
    let u = d.fields.velocity();
    let vis = viscosity(d, &ctx.closure);
    let g = velocity_gradient(d);
    let gp = d.grad[Var::P as usize];
    let nu_eff = ctx.fluid.nu + vis.nu_t;
    std::array::from_fn(|i| {
        dot(u, g[i]) + gp[i] / ctx.fluid.rho
            - nu_eff * d.lap[Var::U as usize + i]
            - dot(vis.grad, g[i])
            - forcing[i]
    })
}

/// `S² = 2 S_ij S_ij` from the velocity gradient.
pub fn strain_rate_squared(g: &[[f64; 3]; 3]) -> f64 {
    let mut s2 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let s = 0.5 * (g[i][j] + g[j][i]);
            s2 += s * s;
        }
    }
    2.0 * s2
}

/// Transport residuals of k and ω with the standard k–ω closure:
/// `G_k = ν_t S²`, `Y_k = β* k ω`, `G_ω = α_ω (ω/k) G_k`, `Y_ω = β ω²`.
pub fn k_omega_residuals(
    d: &SpatialDerivs,
    pos: [f64; 3],
    rpm: f64,
    ctx: &PhysicsContext,
    s_k: f64,
    s_omega: f64,
) -> (f64, f64, bool) {
    let c = &ctx.closure;
    let omega_vec = omega_at(pos, &ctx.zones, rpm);
    let u = d.fields.velocity();
    let frame = cross(omega_vec, pos);
    let u_rel = [u[0] - frame[0], u[1] - frame[1], u[2] - frame[2]];
    let vis = viscosity(d, c);
    let g = velocity_gradient(d);
    let s2 = strain_rate_squared(&g);
    let gk = d.grad[Var::K as usize];
    let gw = d.grad[Var::Omega as usize];
    let nu = ctx.fluid.nu;

    let g_k = vis.nu_t * s2;
    let y_k = c.beta_star * vis.k * vis.omega;
    let r_k = dot(u_rel, gk)
        - (nu + vis.nu_t / c.sigma_k) * d.lap[Var::K as usize]
        - dot(vis.grad, gk) / c.sigma_k
        - g_k
        + y_k
        - s_k;

    let g_w = c.alpha_omega * vis.omega / vis.k.max(c.k_floor) * g_k;
    let y_w = c.beta * vis.omega * vis.omega;
    let r_w = dot(u_rel, gw)
        - (nu + vis.nu_t / c.sigma_omega) * d.lap[Var::Omega as usize]
        - dot(vis.grad, gw) / c.sigma_omega
        - g_w
        + y_w
        - s_omega;
    (r_k, r_w, vis.flagged)
}

/// All four residuals at a liquid-region point; `None` above the liquid
/// surface, where the single-phase equations do not apply.
pub fn evaluate_residuals(
    d: &SpatialDerivs,
    q: &Query,
    ctx: &PhysicsContext,
    forcing: &Forcing,
) -> Option<ResidualBundle> {
    if !q.in_liquid() {
        return None;
    }
    let (r_mom, f1) = momentum_residual(d, q.pos, q.cond.rpm, ctx, forcing.f);
    let (r_k, r_omega, f2) =
        k_omega_residuals(d, q.pos, q.cond.rpm, ctx, forcing.s_k, forcing.s_omega);
    Some(ResidualBundle {
        r_cont: continuity_residual(&d.grad),
        r_mom,
        r_k,
        r_omega,
        flagged: f1 || f2,
    })
}

/// `R_cont²` and its derivative with respect to the field jet.
pub fn continuity_sq_adjoint(d: &SpatialDerivs) -> (f64, SpatialDerivs) {
    let r = continuity_residual(&d.grad);
    let mut adj = SpatialDerivs::default();
    adj.grad[Var::U as usize][0] = 2.0 * r;
    adj.grad[Var::V as usize][1] = 2.0 * r;
    adj.grad[Var::W as usize][2] = 2.0 * r;
    (r * r, adj)
}

/// `|R_mom|²` and its derivative with respect to every field value, gradient
/// and Laplacian entry that enters the momentum residual.
pub fn momentum_sq_adjoint(
    d: &SpatialDerivs,
    pos: [f64; 3],
    rpm: f64,
    ctx: &PhysicsContext,
    forcing: [f64; 3],
) -> (f64, SpatialDerivs) {
    let (r, _) = momentum_residual(d, pos, rpm, ctx, forcing);
    let a: [f64; 3] = r.map(|ri| 2.0 * ri);
    let omega = omega_at(pos, &ctx.zones, rpm);
    let u = d.fields.velocity();
    let frame = cross(omega, pos);
    let vis = viscosity(d, &ctx.closure);
    let g = velocity_gradient(d);
    let lap = [
        d.lap[Var::U as usize],
        d.lap[Var::V as usize],
        d.lap[Var::W as usize],
    ];
    let nu_eff = ctx.fluid.nu + vis.nu_t;

    let mut adj = SpatialDerivs::default();
    // velocity values: advection plus Ω×u (a · (Ω×δu) = δu · (a×Ω))
    let a_cross = cross(a, omega);
    for j in 0..3 {
        let adv: f64 = (0..3).map(|i| a[i] * g[i][j]).sum();
        adj.fields.0[Var::U as usize + j] = adv + a_cross[j];
    }
    for i in 0..3 {
        for j in 0..3 {
            adj.grad[Var::U as usize + i][j] = a[i] * (u[j] - frame[j] - vis.grad[j]);
        }
        adj.grad[Var::P as usize][i] = a[i] / ctx.fluid.rho;
        adj.lap[Var::U as usize + i] = -a[i] * nu_eff;
    }
    // through ν_t and ∇ν_t
    let d_nut = -dot(a, lap);
    let d_ngrad: [f64; 3] = std::array::from_fn(|j| -(0..3).map(|i| a[i] * g[i][j]).sum::<f64>());
    let (k, w) = (vis.k, vis.omega);
    let gk = d.grad[Var::K as usize];
    let gw = d.grad[Var::Omega as usize];
    if vis.k_active {
        let mut dk = d_nut / w;
        for j in 0..3 {
            if vis.omega_active {
                dk += d_ngrad[j] * (-gw[j] / (w * w));
            }
            adj.grad[Var::K as usize][j] = d_ngrad[j] / w;
        }
        adj.fields.0[Var::K as usize] = dk;
    }
    if vis.omega_active {
        let mut dw = -d_nut * k / (w * w);
        for j in 0..3 {
            let gkj = if vis.k_active { gk[j] } else { 0.0 };
            dw += d_ngrad[j] * (-gkj / (w * w) + 2.0 * k * gw[j] / (w * w * w));
            adj.grad[Var::Omega as usize][j] = d_ngrad[j] * (-k / (w * w));
        }
        adj.fields.0[Var::Omega as usize] = dw;
    }
    (dot(r, r), adj)
}

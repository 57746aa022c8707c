//! Manufactured stirred-vessel flow used in place of CFD data.
//!
//! The velocity is built from an axisymmetric Stokes streamfunction plus a
//! swirl, so it is exactly solenoidal. Every profile is a polynomial in
//! `q = (x² + y²) / R²`, which keeps the fields smooth on the tank axis.
//! With `ζ = clamp(z / H, 0, 1)`, `U` the impeller tip speed and
//! `a = C_ψ U R²`:
//!
//! ```text
//! ψ   = a q (1 − q)² sin²(πζ)
//! u_r = −(1/r) ∂ψ/∂z        u_z = (1/r) ∂ψ/∂r
//! u_θ = C_θ U (3√3/2) s (1 − q) sin(πζ)          (peak C_θ U)
//! p   = ρ|g| (H − z) + ½ ρ U² q (1 − q)² sin²(πζ)
//! k   = U² (k0 + 4 k1 q (1 − q) sin²(πζ))
//! ω   = (U / R) (ω0 + ω1 q)
//! α   = ½ (1 − tanh((z − H) / δ))
//! ```
//!
//! Derivatives are exact: fields are evaluated on [`LapJet`] numbers that
//! carry the gradient and the Laplacian through every operation. The body
//! force and k/ω sources that make these fields exact solutions are assembled
//! here directly on jets, independently of the residual operators in
//! [`crate::physics`].

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::domain::{
    DomainBounds, FieldVector, FlowField, OperatingCondition, Query, SpatialDerivs, Var, N_VARS,
};
use crate::error::{Error, Result};
use crate::physics::{omega_at, Forcing, PhysicsContext};

/// Amplitudes of the manufactured solution and the sampling density knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmsSpec {
    pub c_psi: f64,
    pub c_theta: f64,
    pub k0: f64,
    pub k1: f64,
    pub omega0: f64,
    pub omega1: f64,
    /// Free-surface interface thickness (m).
    pub delta: f64,
    /// Wall refinement exponent of the radial sampling density.
    pub q: f64,
    /// Fraction of sampled points drawn inside rotating zones.
    pub zone_fraction: f64,
}

impl Default for MmsSpec {
    fn default() -> Self {
        Self {
            c_psi: 0.05,
            c_theta: 1.0,
            k0: 1e-4,
            k1: 9e-3,
            omega0: 5.0,
            omega1: 5.0,
            delta: 0.05,
            q: 2.0,
            zone_fraction: 0.2,
        }
    }
}

impl MmsSpec {
    pub fn validate(&self, bounds: &DomainBounds) -> Result<()> {
        let positive = [
            self.c_psi,
            self.c_theta,
            self.k0,
            self.k1,
            self.omega0,
            self.omega1,
            self.delta,
            self.q,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!(
                "manufactured-solution constants must be positive: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.zone_fraction) {
            return Err(Error::Config("zone_fraction must lie in [0, 1)".into()));
        }
        if self.delta * 10.0 > bounds.height_min {
            return Err(Error::Config(format!(
                "interface thickness {} is not small against the minimum liquid height {}",
                self.delta, bounds.height_min
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding; identifies generated data.
    pub fn hash(&self) -> String {
        crate::framed::sha256_hex(&serde_json::to_vec(self).expect("spec serializes"))
    }
}

/// Value, gradient and Laplacian of a scalar field at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LapJet {
    pub v: f64,
    pub g: [f64; 3],
    pub l: f64,
}

impl LapJet {
    pub fn constant(v: f64) -> Self {
        Self {
            v,
            g: [0.0; 3],
            l: 0.0,
        }
    }

    /// The coordinate `x_axis` itself.
    pub fn coordinate(v: f64, axis: usize) -> Self {
        let mut g = [0.0; 3];
        g[axis] = 1.0;
        Self { v, g, l: 0.0 }
    }

    fn grad_sq(&self) -> f64 {
        self.g.iter().map(|x| x * x).sum()
    }

    /// Applies a scalar function given its value and first two derivatives.
    fn chain(self, f: f64, f1: f64, f2: f64) -> Self {
        Self {
            v: f,
            g: self.g.map(|gi| f1 * gi),
            l: f1 * self.l + f2 * self.grad_sq(),
        }
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }

    pub fn tanh(self) -> Self {
        let t = self.v.tanh();
        let s1 = 1.0 - t * t;
        self.chain(t, s1, -2.0 * t * s1)
    }

    pub fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r, 2.0 * r * r * r)
    }

    pub fn dot_grad(&self, other: &LapJet) -> f64 {
        (0..3).map(|i| self.g[i] * other.g[i]).sum()
    }
}

impl Add for LapJet {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            g: std::array::from_fn(|i| self.g[i] + o.g[i]),
            l: self.l + o.l,
        }
    }
}

impl Sub for LapJet {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Neg for LapJet {
    type Output = Self;
    fn neg(self) -> Self {
        self * -1.0
    }
}

impl Mul for LapJet {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            g: std::array::from_fn(|i| self.g[i] * o.v + self.v * o.g[i]),
            l: self.l * o.v + self.v * o.l + 2.0 * self.dot_grad(&o),
        }
    }
}

impl Mul<f64> for LapJet {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self {
            v: self.v * s,
            g: self.g.map(|g| g * s),
            l: self.l * s,
        }
    }
}

impl Add<f64> for LapJet {
    type Output = Self;
    fn add(self, s: f64) -> Self {
        Self {
            v: self.v + s,
            ..self
        }
    }
}

/// The manufactured solution for one geometry and fluid.
#[derive(Debug, Clone, PartialEq)]
pub struct MmsSolution {
    pub spec: MmsSpec,
    pub bounds: DomainBounds,
    pub ctx: PhysicsContext,
}

impl MmsSolution {
    pub fn new(spec: MmsSpec, bounds: DomainBounds, ctx: PhysicsContext) -> Self {
        Self { spec, bounds, ctx }
    }

    /// The seven fields as jets, in [`Var`] order.
    pub fn jets(&self, pos: [f64; 3], cond: OperatingCondition) -> [LapJet; N_VARS] {
        use std::f64::consts::PI;
        let s = &self.spec;
        let r_tank = self.bounds.radius();
        let h_liq = cond.height;
        let u_tip = self.bounds.tip_speed(cond.rpm);
        let rho = self.ctx.fluid.rho;
        let g_abs = -self.ctx.fluid.gravity[2];

        let x = LapJet::coordinate(pos[0], 0);
        let y = LapJet::coordinate(pos[1], 1);
        let z = LapJet::coordinate(pos[2], 2);
        let q = (x * x + y * y) * (1.0 / (r_tank * r_tank));
        let one_q = -q + 1.0;
        let zeta = if pos[2] < h_liq {
            z * (1.0 / h_liq)
        } else {
            LapJet::constant(1.0)
        };
        let sin_pz = (zeta * PI).sin();
        let h = sin_pz * sin_pz;
        // dh/dζ = π sin(2πζ)
        let dh = (zeta * (2.0 * PI)).sin() * PI;

        let a = s.c_psi * u_tip * r_tank * r_tank;
        // u_r / r and u_θ / r
        let radial = one_q * one_q * dh * (-a / (h_liq * r_tank * r_tank));
        let swirl = one_q * sin_pz * (s.c_theta * u_tip * 1.5 * 3f64.sqrt() / r_tank);
        let u = radial * x - swirl * y;
        let v = radial * y + swirl * x;
        let w = one_q * (q * -3.0 + 1.0) * h * (2.0 * a / (r_tank * r_tank));

        let p = (-z + h_liq) * (rho * g_abs) + q * one_q * one_q * h * (0.5 * rho * u_tip * u_tip);
        let k = (q * one_q * h * (4.0 * s.k1) + s.k0) * (u_tip * u_tip);
        let omega = (q * s.omega1 + s.omega0) * (u_tip / r_tank);
        let alpha = (-((z + -h_liq) * (1.0 / s.delta)).tanh() + 1.0) * 0.5;
        [alpha, u, v, w, p, k, omega]
    }

    pub fn derivs(&self, pos: [f64; 3], cond: OperatingCondition) -> SpatialDerivs {
        let jets = self.jets(pos, cond);
        SpatialDerivs {
            fields: FieldVector(jets.map(|j| j.v)),
            grad: jets.map(|j| j.g),
            lap: jets.map(|j| j.l),
        }
    }

    pub fn fields_at(&self, pos: [f64; 3], cond: OperatingCondition) -> FieldVector {
        FieldVector(self.jets(pos, cond).map(|j| j.v))
    }

    /// Body force and k/ω sources for which the manufactured fields satisfy
    /// the momentum and transport equations exactly.
    pub fn forcing(&self, pos: [f64; 3], cond: OperatingCondition) -> Forcing {
        let jets = self.jets(pos, cond);
        let fluid = &self.ctx.fluid;
        let c = &self.ctx.closure;
        let vel = [
            jets[Var::U as usize],
            jets[Var::V as usize],
            jets[Var::W as usize],
        ];
        let p = jets[Var::P as usize];
        let k = jets[Var::K as usize];
        let omega = jets[Var::Omega as usize];

        let om = omega_at(pos, &self.ctx.zones, cond.rpm)[2];
        // Ω × r and Ω × u for Ω along z
        let frame = [-om * pos[1], om * pos[0], 0.0];
        let u_rel: [f64; 3] = std::array::from_fn(|j| vel[j].v - frame[j]);
        let coriolis = [-om * vel[1].v, om * vel[0].v, 0.0];

        let omega_c = if omega.v >= c.omega_floor {
            omega
        } else {
            LapJet::constant(c.omega_floor)
        };
        let k_c = if k.v >= 0.0 { k } else { LapJet::constant(0.0) };
        let nu_t = k_c * omega_c.recip();

        let mut f = [0.0; 3];
        for i in 0..3 {
            let advection: f64 = (0..3).map(|j| u_rel[j] * vel[i].g[j]).sum();
            let diffusion = (fluid.nu + nu_t.v) * vel[i].l + nu_t.dot_grad(&vel[i]);
            f[i] = advection + coriolis[i] + p.g[i] / fluid.rho - diffusion;
        }

        let mut s2 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let sij = 0.5 * (vel[i].g[j] + vel[j].g[i]);
                s2 += 2.0 * sij * sij;
            }
        }
        let production_k = nu_t.v * s2;
        let adv_k: f64 = (0..3).map(|j| u_rel[j] * k.g[j]).sum();
        let s_k = adv_k
            - (fluid.nu + nu_t.v / c.sigma_k) * k.l
            - nu_t.dot_grad(&k) / c.sigma_k
            - production_k
            + c.beta_star * k_c.v * omega_c.v;

        let production_w = c.alpha_omega * omega_c.v / k_c.v.max(c.k_floor) * production_k;
        let adv_w: f64 = (0..3).map(|j| u_rel[j] * omega.g[j]).sum();
        let s_omega = adv_w
            - (fluid.nu + nu_t.v / c.sigma_omega) * omega.l
            - nu_t.dot_grad(&omega) / c.sigma_omega
            - production_w
            + c.beta * omega_c.v * omega_c.v;

        Forcing { f, s_k, s_omega }
    }
}

impl FlowField for MmsSolution {
    fn fields(&self, q: &Query) -> Result<FieldVector> {
        Ok(self.fields_at(q.pos, q.cond))
    }

    fn spatial_derivs(&self, q: &Query) -> Result<SpatialDerivs> {
        Ok(self.derivs(q.pos, q.cond))
    }
}

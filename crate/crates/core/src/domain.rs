//! Shared domain vocabulary: vessel geometry, operating conditions, and the
//! seven-variable flow state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of predicted flow variables.
pub const N_VARS: usize = 7;

/// Flow variable order used everywhere (network outputs, files, reports).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    Alpha = 0,
    U = 1,
    V = 2,
    W = 3,
    P = 4,
    K = 5,
    Omega = 6,
}

impl Var {
    pub const ALL: [Var; N_VARS] = [
        Var::Alpha,
        Var::U,
        Var::V,
        Var::W,
        Var::P,
        Var::K,
        Var::Omega,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Var::Alpha => "alpha",
            Var::U => "u",
            Var::V => "v",
            Var::W => "w",
            Var::P => "p",
            Var::K => "k",
            Var::Omega => "omega",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// `(alpha, u, v, w, p, k, omega)` in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FieldVector(pub [f64; N_VARS]);

impl FieldVector {
    pub fn get(&self, v: Var) -> f64 {
        self.0[v as usize]
    }

    pub fn velocity(&self) -> [f64; 3] {
        [self.0[1], self.0[2], self.0[3]]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Field values with physical-unit first derivatives and Laplacians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SpatialDerivs {
    pub fields: FieldVector,
    /// `grad[var][axis]` with axes `(x, y, z)`.
    pub grad: [[f64; 3]; N_VARS],
    /// Sum of pure second derivatives per variable.
    pub lap: [f64; N_VARS],
}

/// Stirring rate (1/min) and liquid height (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingCondition {
    pub rpm: f64,
    pub height: f64,
}

impl OperatingCondition {
    pub fn new(rpm: f64, height: f64) -> Self {
        Self { rpm, height }
    }

    /// Impeller angular speed in rad/s.
    pub fn angular_speed(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.rpm / 60.0
    }
}

/// A spatial point paired with the operating condition it belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub pos: [f64; 3],
    pub cond: OperatingCondition,
}

impl Query {
    pub fn new(pos: [f64; 3], cond: OperatingCondition) -> Self {
        Self { pos, cond }
    }

    pub fn radius(&self) -> f64 {
        self.pos[0].hypot(self.pos[1])
    }

    pub fn in_liquid(&self) -> bool {
        self.pos[2] < self.cond.height
    }
}

/// Tank extent and the operating-condition ranges the surrogate covers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainBounds {
    /// Tank diameter `T` (m).
    pub diameter: f64,
    /// Total vessel height (m).
    pub tank_height: f64,
    pub rpm_min: f64,
    pub rpm_max: f64,
    pub height_min: f64,
    pub height_max: f64,
}

impl Default for DomainBounds {
    fn default() -> Self {
        Self {
            diameter: 2.09,
            tank_height: 8.12,
            rpm_min: 50.0,
            rpm_max: 150.0,
            height_min: 1.5,
            height_max: 6.5,
        }
    }
}

impl DomainBounds {
    pub fn radius(&self) -> f64 {
        0.5 * self.diameter
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.diameter > 0.0
            && self.tank_height > 0.0
            && self.rpm_min < self.rpm_max
            && self.height_min < self.height_max
            && self.height_max <= self.tank_height;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "inconsistent domain bounds {self:?}"
            )))
        }
    }

    /// `(lo, hi)` per normalized input axis: x, y, z, rpm, H.
    pub fn axis_ranges(&self) -> [(f64, f64); 5] {
        let r = self.radius();
        [
            (-r, r),
            (-r, r),
            (0.0, self.tank_height),
            (self.rpm_min, self.rpm_max),
            (self.height_min, self.height_max),
        ]
    }

    pub fn contains_condition(&self, c: &OperatingCondition) -> bool {
        (self.rpm_min..=self.rpm_max).contains(&c.rpm)
            && (self.height_min..=self.height_max).contains(&c.height)
    }

    pub fn check_condition(&self, c: &OperatingCondition) -> Result<()> {
        if self.contains_condition(c) {
            Ok(())
        } else {
            Err(Error::Argument(format!(
                "operating condition rpm={} H={} outside [{}, {}] x [{}, {}]",
                c.rpm, c.height, self.rpm_min, self.rpm_max, self.height_min, self.height_max
            )))
        }
    }

    /// Impeller tip speed `pi * (T/3) * rpm / 60` (m/s).
    pub fn tip_speed(&self, rpm: f64) -> f64 {
        std::f64::consts::PI * (self.diameter / 3.0) * rpm / 60.0
    }
}

/// Anything that can be queried for the flow state at a point: trained
/// surrogates and the analytic manufactured solution alike.
pub trait FlowField: Sync {
    fn fields(&self, q: &Query) -> Result<FieldVector>;

    fn spatial_derivs(&self, q: &Query) -> Result<SpatialDerivs>;

    fn fields_batch(&self, qs: &[Query]) -> Result<Vec<FieldVector>> {
        crate::par::map_slice(qs, |q| self.fields(q))
            .into_iter()
            .collect()
    }

    fn derivs_batch(&self, qs: &[Query]) -> Result<Vec<SpatialDerivs>> {
        crate::par::map_slice(qs, |q| self.spatial_derivs(q))
            .into_iter()
            .collect()
    }
}

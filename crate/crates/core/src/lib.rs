#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod dataset;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod framed;
pub mod inr;
pub mod mms;
pub mod objective;
pub mod par;
pub mod physics;
pub mod tracer;
pub mod trainer;

pub use domain::{
    DomainBounds, FieldVector, FlowField, OperatingCondition, Query, SpatialDerivs, Var, N_VARS,
};
pub use error::{Error, Result};

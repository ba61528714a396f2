//! Accuracy limits and estimator performance of RSS positioning from a
//! beam-sweeping millimeter-wave uniform linear array.
//!
//! A single base station at the origin sweeps `N` steered beams across the
//! half plane `y > 0`; the UE reports one RSS sample per beam. From these the
//! crate computes the Cramer-Rao bound on position RMSE and runs a nonlinear
//! least-squares position estimator, and sweeps both over a room grid.

pub mod arraymodel;
pub mod error;
pub mod estimator;
pub mod fisher;
pub mod rfchannel;
pub mod rng;
pub mod simharness;

pub use arraymodel::{ArrayConfig, BeamSet};
pub use error::{Error, Result};
pub use estimator::{EstimatorConfig, EstimatorResult, Method, Region};
pub use fisher::{DerivativeMode, FisherInfo, JacobianMatrix};
pub use rfchannel::{LinkBudget, ObservationVector, Position};
pub use simharness::{FieldKind, FieldMap, MaskMode, MetricsSummary, MonteCarlo, RoomSpec, Scenario, Variant};

//! Simulation and verification toolkit for gradient flow and gradient descent
//! on deep linear networks whose narrowest layer has width one.
//!
//! With whitened data the end-to-end loss depends on the layer product
//! `W = W_N ... W_1` only through `W - Z`, where `Z` is the target matrix.
//! A width-one layer forces `rank(W) <= 1`, so `W = s * u * v^T` and the whole
//! flow reduces to an ODE on the scale `s` and the coefficient vectors of `u`
//! and `v` in the singular bases of `Z`. This crate provides:
//!
//! * [`model`]: target/network/state types, validation, and conversions
//!   between layer stacks, induced weights, and singular-basis coordinates;
//! * [`dynamics`]: right-hand sides, ODE integrators (adaptive and fixed
//!   step), and a plain gradient-descent driver on the layer matrices;
//! * [`init`]: balanced initializations, including the construction that
//!   cancels the first `k` alignment indicators exactly;
//! * [`theory`]: limit prediction from the initial state, runtime invariant
//!   monitors, stage detection, closed-form envelopes/bounds with their
//!   verification harness, analytic special-case solutions, and rate fitting.
//!
//! Everything is generic over the scalar type via [`Scalar`] (any
//! `nalgebra::RealField + num_traits::FromPrimitive + Copy`, in practice
//! `f32` or `f64`); concrete `f64`/`f32` aliases live at the crate root.

pub mod dynamics;
pub mod init;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod theory;

pub use scalar::Scalar;

/// Default scalar used by the CLI and most tests.
pub type F = f64;

pub type TargetSpec64 = model::TargetSpec<f64>;
pub type TargetSpec32 = model::TargetSpec<f32>;
pub type CoordState64 = model::CoordState<f64>;
pub type CoordState32 = model::CoordState<f32>;
pub type Trajectory64 = model::Trajectory<f64>;
pub type Trajectory32 = model::Trajectory<f32>;
pub type LayerStack64 = model::LayerStack<f64>;
pub type LayerStack32 = model::LayerStack<f32>;
pub type Tolerances64 = model::Tolerances<f64>;
pub type BoundParams64 = theory::BoundParams<f64>;

//! Multi-model asynchronous federated learning over a wireless edge network.
//!
//! The crate simulates several learning tasks sharing one pool of edge devices,
//! evaluates a staleness-aware convergence bound for a given device schedule and
//! resource plan, and searches for schedules and plans that trade that bound off
//! against device and base-station energy.

pub mod autodiff;
pub mod bound;
pub mod config;
pub mod data;
pub mod domain;
pub mod io;
pub mod optimizer;
pub mod plan;
pub mod scheduling;
pub mod simulator;
pub mod trainer;
pub mod wireless;

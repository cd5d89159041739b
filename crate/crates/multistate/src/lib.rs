//! Multi-state survival modeling with excess-hazard transitions.
//!
//! The pipeline: fit a population expected-rate model on two timescales
//! (attained age, calendar year), fit flexible parametric models on the log
//! cumulative (excess) hazard scale for the remaining transitions, declare a
//! transition matrix with the illness state partitioned into excess and
//! expected components, then predict state-occupation probabilities and
//! derived quantities by simulating trajectories, with parametric-bootstrap
//! confidence intervals.

pub mod expected;
pub mod files;
pub mod msm;
pub mod newton;
pub mod num;
pub mod ode;
pub mod sim;
pub mod spline;
pub mod survival;
pub mod table;

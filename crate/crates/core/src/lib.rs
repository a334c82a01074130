//! Numerical engine for backward SDEs with convex constraints on the gains
//! process: payoff facelift transforms, a deep backward scheme with one-step
//! regressions, and closed-form / Monte Carlo reference pricers.

pub mod bsde;
pub mod constraint;
pub mod error;
pub mod facelift;
pub mod net;
pub mod pricer;
pub mod sde;

pub use constraint::{ConvexBall, TimeGrids};
pub use error::{Error, Result};
pub use net::{Activation, Mlp};
pub use sde::BlackScholesModel;

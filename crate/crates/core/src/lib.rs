//! Differentiable planar simulator for everting vine robots.
//!
//! The vine is a chain of rigid links in maximal coordinates. Each time step solves a small
//! convex QP for the next velocities (revolute joints, tip growth and obstacle contact as
//! constraints); the QP layer is differentiable, so whole rollouts can be differentiated
//! with respect to physical parameters and fitted to observed trajectories.

pub mod ad;
pub mod dynamics;
pub mod engine;
pub mod fit;
pub mod io;
pub mod presets;
pub mod qpdiff;
pub mod rng;
pub mod scene;
pub mod stiffness;

pub use ad::{Real, Tape, Var};
pub use dynamics::{ParamId, PhysParams, VineState};
pub use engine::{RolloutConfig, Trajectory};
pub use fit::{FitReport, OptimizerConfig, TrajectoryDataset};
pub use qpdiff::{QpProblem, QpSolution, QpStatus};
pub use scene::{Obstacle, Scene};
pub use stiffness::Stiffness;

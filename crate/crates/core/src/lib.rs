//! Optimization-based hybrid force/motion control for a fixed-base serial
//! manipulator sliding a tool over a constrained surface.
//!
//! The crate is organised bottom-up:
//!
//! * [`dynamics`]: kinematics and rigid-body dynamics of revolute open chains.
//! * [`contact`]: wrench bases, contact maps and constrained Jacobians.
//! * [`outer_loop`]: PID-style virtual input over joint, position, orientation
//!   and force tasks.
//! * [`qp`]: dense primal active-set QP solver.
//! * [`inner_loop`]: control-affine task model and the tracking QP.
//! * [`simulator`]: ground-truth constrained simulation and scenario runner.
//! * [`impedance`]: DTW alignment, GMM/EM, GMR and covariance-derived stiffness.
//! * [`guidance`]: heatmap-based lateral guidance for surface scans.
//! * [`config`] and [`cli`]: configuration files, logs and subcommands.

pub mod cli;
pub mod config;
pub mod contact;
pub mod dynamics;
pub mod error;
pub mod guidance;
pub mod ik;
pub mod impedance;
pub mod inner_loop;
pub mod outer_loop;
pub mod qp;
pub mod simulator;
pub mod so3;

pub use error::{Error, Result};

//! Active detection of prevented-actuation attacks on constrained stochastic linear systems.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: the mode-indexed linear Gaussian system, trajectory moments and rollouts.
//! - [`detector`]: Kalman filter banks, mode posteriors and staggered detectors.
//! - [`objectives`]: explicit control cost, detection bound and expanded constraints.
//! - [`optimizer`]: the pure-control QP and the two side-constrained designs.
//! - [`scenario`]: the two-pool irrigation channel case study and the closed-loop runner.
//!
//! Numerical modules are generic over [`Real`]; the aliases below fix the scalar to `f64`.

pub mod detector;
pub mod error;
pub mod io;
pub mod model;
pub mod objectives;
pub mod optimizer;
pub mod oracle;
pub mod scalar;
pub mod scenario;

pub use error::{Error, Result};
pub use scalar::Real;

pub type System = model::LinearGaussianSystem<f64>;
pub type Modes = model::ModeSet<f64>;
pub type Controls = model::ControlSequence<f64>;
pub type Moments = model::TrajectoryMoments<f64>;
pub type Posterior = detector::ModePosterior<f64>;
pub type Bank = detector::DetectorBank<f64>;
pub type ControlForm = objectives::ControlObjectiveForm<f64>;
pub type DetectionForm = objectives::DetectionBoundForm<f64>;
pub type Constraints = objectives::ExpandedConstraints<f64>;
pub type Problem = optimizer::ProblemSpec<f64>;
pub type SolutionF64 = optimizer::Solution<f64>;

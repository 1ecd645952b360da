//! Penalized multivariate categorical response regression with association
//! structure learning through an orthonormal subspace decomposition of the
//! joint-category coefficient matrix.

pub mod basis;
pub mod blocks;
pub mod error;
pub mod interpreter;
pub mod io;
pub mod layout;
pub mod likelihood;
pub mod penalty;
pub mod simulation;
pub mod solver;

pub use basis::BasisSet;
pub use blocks::CoefficientBlocks;
pub use error::{Error, Result};
pub use layout::{Effect, ResponseLayout};
pub use likelihood::{Dataset, Family, ProbabilityVector};
pub use penalty::{GroupStructure, PenaltyMode};
pub use solver::{FitResult, PathResult, SolverConfig};

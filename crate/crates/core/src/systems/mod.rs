//! Ground-truth generators for the environments the models are trained on.

pub mod capacitor;
pub mod charges;
pub mod dataset;
pub mod manipulator;
pub mod synthetic;

pub use capacitor::{CapacitorGeometry, CapacitorProblem, PotentialGrid};
pub use charges::ChargeSystem;
pub use dataset::{build_meta_dataset, grid_points, ContextSampler, SamplingSpec};
pub use manipulator::{Acrobot, Cartpole, Manipulator, ManipulatorSystem, Pendulum, Trajectory};
pub use synthetic::SyntheticLinearSystem;

use crate::error::Result;

/// An environment family `y = f⋆(x; φ)` indexed by a physical context `φ ∈ R^n`.
pub trait PhysicalSystem {
    fn name(&self) -> &str;
    fn context_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn evaluate(&self, context: &[f64], x: &[f64]) -> Result<f64>;
}

/// Systems of the form `f⋆(x; φ) = κ(x) + φᵀ ν(x)`.
pub trait LinearSystem: PhysicalSystem {
    /// Context-independent part `κ(x)`.
    fn offset(&self, x: &[f64]) -> Result<f64>;
    /// Context basis `ν(x) ∈ R^n`.
    fn basis(&self, x: &[f64]) -> Result<Vec<f64>>;
}

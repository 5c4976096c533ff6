//! Meta-models and joint meta-training.
//!
//! All variants share the context-affine form `F(x; θ, w) = c(x; θ) + wᵀ v(x; θ)`
//! and differ only in how the task weight `w_t` is produced:
//!
//! | variant  | `w_t`                          | extra meta-parameters |
//! |----------|--------------------------------|-----------------------|
//! | CAMEL    | `ω_t` (stored)                 | `Ω ∈ R^{T×r}`         |
//! | CoDA     | `w₀ + Θ ξ_t`                   | `w₀, Θ, ξ_t`          |
//! | ANIL-FO  | `w₀ − α ∇_w ℓ(D_t; θ, w₀)`     | `w₀`                  |

mod dataset;
mod model;
mod normalize;
mod train;

pub use dataset::{MetaDataset, TaskDataset};
pub use model::{MetaGradient, MetaModel, RegConfig, TaskParams, Variant};
pub use normalize::Normalizer;
pub use train::{train, TrainConfig, TrainOutcome};

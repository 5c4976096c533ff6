//! Test-time task weights: closed-form least squares, recursive least
//! squares, zero-shot inference from physical contexts, and the
//! gradient-descent adaptation used by the gradient-based baselines.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::identification::InverseContextMap;
use crate::linalg::least_squares;
use crate::meta::{MetaModel, TaskDataset, TaskParams, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptResult {
    pub w: Vec<f64>,
    /// Mean squared error on the adaptation data.
    pub residual_mse: f64,
    /// Condition number of the feature Gram matrix (infinite if singular).
    pub condition: f64,
}

/// `argmin_w Σ ½ (c(x) + wᵀ v(x) − y)² + ½ λ ‖w‖²`, minimum-norm when the
/// features are rank-deficient.
pub fn ols_adapt(model: &MetaModel, dataset: &TaskDataset, ridge: f64) -> Result<AdaptResult> {
    let out = model.net().forward_batch(dataset.inputs())?;
    let corrected = dataset.targets() - &out.bias;
    ols_from_features(&out.features, &corrected, ridge)
}

/// Same as [`ols_adapt`] on precomputed features and offset-corrected targets.
pub fn ols_from_features(features: &DMatrix<f64>, targets: &DVector<f64>, ridge: f64) -> Result<AdaptResult> {
    if features.nrows() == 0 {
        return Err(Error::Precondition("adaptation needs at least one sample".into()));
    }
    let rhs = DMatrix::from_column_slice(targets.len(), 1, targets.as_slice());
    let ls = least_squares(features, &rhs, ridge)?;
    let w = ls.coef.column(0).clone_owned();
    let residual_mse = (features * &w - targets).norm_squared() / targets.len() as f64;
    Ok(AdaptResult {
        w: w.iter().cloned().collect(),
        residual_mse,
        condition: ls.condition,
    })
}

/// Recursive least squares over a stream of `(v_s, u_s)` pairs, starting
/// from `M₀ = I`, `ω₀ = 0`. After `s` updates `ω_s` equals the ridge
/// solution `(I + Σ v vᵀ)⁻¹ Σ u v` and `M_s = (I + Σ v vᵀ)⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct RlsState {
    m: DMatrix<f64>,
    w: DVector<f64>,
    count: usize,
}

impl RlsState {
    pub fn new(r: usize) -> Self {
        Self {
            m: DMatrix::identity(r, r),
            w: DVector::zeros(r),
            count: 0,
        }
    }

    /// Starts from given weights with the unit prior around them.
    pub fn with_weights(w: &[f64]) -> Self {
        let mut s = Self::new(w.len());
        s.w.copy_from_slice(w);
        s
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn weights(&self) -> &[f64] {
        self.w.as_slice()
    }

    pub fn inverse_gram(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// `M ← M − M v (M v)ᵀ / (1 + vᵀ M v)`, `ω ← ω − (vᵀ ω − u) M v`.
    pub fn update(&mut self, v: &[f64], u: f64) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::shape(format!("feature must have length {}, got {}", self.dim(), v.len())));
        }
        if !u.is_finite() || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Precondition("non-finite sample in least-squares stream".into()));
        }
        let v = DVector::from_column_slice(v);
        let mv = &self.m * &v;
        let denom = 1.0 + v.dot(&mv);
        self.m -= &mv * mv.transpose() / denom;
        let mv_next = &self.m * &v;
        let err = v.dot(&self.w) - u;
        self.w -= mv_next * err;
        self.count += 1;
        Ok(())
    }

    /// Symmetry to `1e-10` (relative) and a successful Cholesky factorization.
    pub fn check(&self) -> Result<()> {
        let scale = self.m.abs().max().max(1.0);
        if (&self.m - self.m.transpose()).abs().max() > 1e-10 * scale {
            return Err(Error::State("inverse Gram matrix lost symmetry".into()));
        }
        if self.m.clone().cholesky().is_none() {
            return Err(Error::State("inverse Gram matrix is not positive definite".into()));
        }
        Ok(())
    }

    /// Condition number of `M⁻¹ = I + Σ v vᵀ`; near 1 when the stream has
    /// carried little information in some direction relative to others.
    pub fn information_condition(&self) -> f64 {
        let eig = self.m.clone().symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if lo > 0.0 {
            hi / lo
        } else {
            f64::INFINITY
        }
    }

    /// Smallest eigenvalue of `M⁻¹ − I`: the information gathered along the
    /// least excited direction.
    pub fn min_information(&self) -> f64 {
        let eig = self.m.clone().symmetric_eigenvalues();
        1.0 / eig.max() - 1.0
    }
}

/// Functional form of [`RlsState::update`].
pub fn rls_update(state: &RlsState, v: &[f64], u: f64) -> Result<RlsState> {
    let mut next = state.clone();
    next.update(v, u)?;
    Ok(next)
}

/// `ω̂(φ)` from the inverse regression fitted on the training tasks.
pub fn zero_shot_weights(inv_map: &InverseContextMap, phi: &[f64]) -> Result<Vec<f64>> {
    inv_map.fit.apply(phi)
}

/// Fixed-step gradient descent on the task loss, as used by the
/// gradient-based baselines: ANIL moves the head weight `w`, CoDA moves the
/// low-dimensional context `ξ` with `w = w₀ + Θ ξ`. Each step re-runs the
/// network forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientAdaptConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

pub fn gradient_adapt(model: &MetaModel, dataset: &TaskDataset, cfg: GradientAdaptConfig) -> Result<AdaptResult> {
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::config("adaptation learning rate must be positive"));
    }
    let mut w = model.prior_weights();
    match model.task_params() {
        TaskParams::Coda { base, hyper, .. } => {
            let mut xi = DVector::zeros(hyper.ncols());
            for _ in 0..cfg.steps {
                let wv = base + hyper * &xi;
                let g = DVector::from_vec(model.weight_gradient(wv.as_slice(), dataset)?);
                xi -= hyper.transpose() * g * cfg.learning_rate;
            }
            w = (base + hyper * &xi).iter().cloned().collect();
        }
        _ => {
            for _ in 0..cfg.steps {
                w = model.anil_inner_step(dataset, &w, cfg.learning_rate)?;
            }
        }
    }
    let residual_mse = model.mse(&w, dataset)?;
    if !residual_mse.is_finite() {
        return Err(Error::Divergence {
            step: cfg.steps,
            reason: "gradient adaptation diverged".into(),
        });
    }
    Ok(AdaptResult {
        w,
        residual_mse,
        condition: f64::NAN,
    })
}

/// Each variant's own test-time rule: least squares for CAMEL, gradient
/// steps for the baselines.
pub fn adapt(model: &MetaModel, dataset: &TaskDataset, ridge: f64, gradient: GradientAdaptConfig) -> Result<AdaptResult> {
    match model.variant() {
        Variant::Camel => ols_adapt(model, dataset, ridge),
        Variant::Coda | Variant::AnilFo => gradient_adapt(model, dataset, gradient),
    }
}

#[cfg(test)]
mod tests;

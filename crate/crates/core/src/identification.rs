//! Linear maps between learned task weights and physical contexts.
//!
//! A trained context-affine model identifies the physical parameters up to
//! a linear (or, with a bias head, affine) change of coordinates. The maps
//! here are fitted by least squares on the training tasks only.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{frobenius, least_squares, numerical_rank};
use crate::meta::{MetaDataset, MetaModel, RegConfig};
use crate::systems::LinearSystem;

/// Relative singular-value cutoff for the span preconditions.
pub const SPAN_CUTOFF: f64 = 1e-8;

/// `y ≈ A x (+ b)` fitted row-wise by least squares.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffineFit {
    /// `out x in`.
    pub coef: DMatrix<f64>,
    pub intercept: Option<DVector<f64>>,
    /// `‖X Aᵀ (+ b) − Y‖_F / ‖Y‖_F`; absolute when `Y = 0`.
    pub residual: f64,
    /// Number of samples the map was fitted on.
    pub samples: usize,
    /// False when the design was rank-deficient and the minimum-norm
    /// solution was returned.
    pub well_posed: bool,
}

impl AffineFit {
    /// Fits on rows of `inputs` (`S x in`) and `targets` (`S x out`).
    pub fn fit(inputs: &DMatrix<f64>, targets: &DMatrix<f64>, affine: bool) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::shape(format!(
                "{} input rows vs {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if inputs.nrows() == 0 {
            return Err(Error::Precondition("cannot fit a map on zero samples".into()));
        }
        let design = if affine { augment(inputs) } else { inputs.clone() };
        let ls = least_squares(&design, targets, 0.0)?;
        let well_posed = ls.is_full_rank();
        if !well_posed {
            warn!(
                "map fitted on a rank-deficient design (rank {} of {}); using the minimum-norm solution",
                ls.rank,
                design.ncols()
            );
        }
        let k = inputs.ncols();
        let coef = ls.coef.rows(0, k).transpose();
        let intercept = affine.then(|| ls.coef.row(k).transpose());
        let mut fit = Self {
            coef,
            intercept,
            residual: 0.0,
            samples: inputs.nrows(),
            well_posed,
        };
        let pred = fit.apply_rows(inputs)?;
        let err = frobenius(&(pred - targets));
        let scale = frobenius(targets);
        fit.residual = if scale > 0.0 { err / scale } else { err };
        Ok(fit)
    }

    pub fn input_dim(&self) -> usize {
        self.coef.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.coef.nrows()
    }

    pub fn is_fitted(&self) -> bool {
        self.samples > 0
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !self.is_fitted() {
            return Err(Error::State("map has not been fitted".into()));
        }
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!("map expects {} inputs, got {}", self.input_dim(), x.len())));
        }
        let mut y = &self.coef * DVector::from_column_slice(x);
        if let Some(b) = &self.intercept {
            y += b;
        }
        Ok(y.iter().cloned().collect())
    }

    /// Applies the map to every row of `x`.
    pub fn apply_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!("map expects {} inputs, got {}", self.input_dim(), x.ncols())));
        }
        let mut y = x * self.coef.transpose();
        if let Some(b) = &self.intercept {
            for mut row in y.row_iter_mut() {
                row += b.transpose();
            }
        }
        Ok(y)
    }
}

fn augment(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().insert_column(m.ncols(), 1.0)
}

/// `φ̂(ω) = P̂ ω (+ b̂)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdentificationMap {
    pub fit: AffineFit,
}

/// `ω̂(φ) = Ŵ φ (+ b̂)`, the inverse regression used for zero-shot weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InverseContextMap {
    pub fit: AffineFit,
}

/// Fits `P̂` on the training bank `weights` (`T x r`) and `contexts` (`T x n`).
pub fn fit_identification(weights: &DMatrix<f64>, contexts: &DMatrix<f64>, affine: bool) -> Result<IdentificationMap> {
    Ok(IdentificationMap {
        fit: AffineFit::fit(weights, contexts, affine)?,
    })
}

pub fn estimate_context(map: &IdentificationMap, w: &[f64]) -> Result<Vec<f64>> {
    map.fit.apply(w)
}

pub fn fit_inverse(contexts: &DMatrix<f64>, weights: &DMatrix<f64>, affine: bool) -> Result<InverseContextMap> {
    Ok(InverseContextMap {
        fit: AffineFit::fit(contexts, weights, affine)?,
    })
}

impl IdentificationMap {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.fit.coef
    }
}

impl InverseContextMap {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.fit.coef
    }
}

/// `‖φ̂ − φ‖ / ‖φ‖`.
pub fn relative_error(estimate: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = truth.iter().map(|b| b * b).sum::<f64>().sqrt();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// Identifiability diagnostics: `P` fitted on `ω_t → φ_t`, `Q` fitted on
/// `v(x_i) → ν(x_i)`, and how far `Q Pᵀ` is from the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PropositionDiagnostics {
    /// `n x r` (augmented dimensions in the affine case).
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub p_residual: f64,
    pub q_residual: f64,
    pub identity_error: f64,
    /// Meta-loss reached by the model the diagnostics were computed on.
    pub meta_loss: Option<f64>,
}

impl PropositionDiagnostics {
    /// From the training bank `Ω` (`T x r`), contexts `Φ` (`T x n`), learned
    /// features `V` (`N x r`) and true basis `N_ν` (`N x n`) on a shared grid.
    pub fn from_matrices(
        weights: &DMatrix<f64>,
        contexts: &DMatrix<f64>,
        features: &DMatrix<f64>,
        basis: &DMatrix<f64>,
    ) -> Result<Self> {
        let n = contexts.ncols();
        if basis.ncols() != n || features.ncols() != weights.ncols() {
            return Err(Error::shape("context and basis dimensions, or weight and feature dimensions, differ"));
        }
        if numerical_rank(contexts, SPAN_CUTOFF) < n {
            return Err(Error::Precondition("training contexts do not span the context space".into()));
        }
        if numerical_rank(basis, SPAN_CUTOFF) < n {
            return Err(Error::Precondition("system basis does not span the context space on the grid".into()));
        }
        let p = AffineFit::fit(weights, contexts, false)?;
        let q = AffineFit::fit(features, basis, false)?;
        let gap = &q.coef * p.coef.transpose() - DMatrix::<f64>::identity(n, n);
        Ok(Self {
            identity_error: frobenius(&gap),
            p: p.coef,
            q: q.coef,
            p_residual: p.residual,
            q_residual: q.residual,
            meta_loss: None,
        })
    }

    /// Diagnostics of a trained CAMEL model on the shared-grid meta-dataset
    /// it was trained on. With `affine` the offset coordinates `(ω, 1)`,
    /// `(φ, 1)`, `(v, c)`, `(ν, κ)` are used.
    pub fn from_model(
        model: &MetaModel,
        system: &dyn LinearSystem,
        meta: &MetaDataset,
        reg: RegConfig,
        affine: bool,
    ) -> Result<Self> {
        if !meta.shared_grid() {
            return Err(Error::Precondition("identifiability diagnostics need a shared training grid".into()));
        }
        let contexts = meta
            .contexts()
            .ok_or_else(|| Error::Precondition("training tasks carry no contexts".into()))?;
        let weights = model.weight_bank(meta)?;
        let grid = meta.tasks()[0].inputs();
        let out = model.net().forward_batch(grid)?;
        let mut basis = DMatrix::zeros(grid.nrows(), system.context_dim());
        let mut offset = DVector::zeros(grid.nrows());
        for i in 0..grid.nrows() {
            let x: Vec<f64> = grid.row(i).iter().cloned().collect();
            let nu = system.basis(&x)?;
            basis.row_mut(i).copy_from_slice(&nu);
            offset[i] = system.offset(&x)?;
        }
        let mut diag = if affine {
            let features = out.features.clone().insert_column(out.features.ncols(), 0.0);
            let mut features = features;
            features.column_mut(out.features.ncols()).copy_from(&out.bias);
            let mut b = basis.clone().insert_column(basis.ncols(), 0.0);
            b.column_mut(basis.ncols()).copy_from(&offset);
            Self::from_matrices(&augment(&weights), &augment(&contexts), &features, &b)?
        } else {
            Self::from_matrices(&weights, &contexts, &out.features, &basis)?
        };
        diag.meta_loss = Some(model.meta_loss(meta, reg)?);
        Ok(diag)
    }

    /// Whether all three quantities are below `tol`.
    pub fn identified(&self, tol: f64) -> bool {
        self.p_residual <= tol && self.q_residual <= tol && self.identity_error <= tol
    }
}

/// Constructive maps for `V Wᵀ = V' W'ᵀ` with `V'`, `W'` of full column
/// rank: `P` regresses `V` on `V'` and `Q` regresses `W` on `W'`, so that
/// `Q Pᵀ = I`.
#[derive(Debug, Clone, PartialEq)]
pub struct LemmaCheck {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub identity_error: f64,
}

pub fn lemma_check(
    v: &DMatrix<f64>,
    w: &DMatrix<f64>,
    v_prime: &DMatrix<f64>,
    w_prime: &DMatrix<f64>,
) -> Result<LemmaCheck> {
    let k = v_prime.ncols();
    if w_prime.ncols() != k || v.ncols() != w.ncols() {
        return Err(Error::shape("factor dimensions differ"));
    }
    if numerical_rank(v_prime, SPAN_CUTOFF) < k || numerical_rank(w_prime, SPAN_CUTOFF) < k {
        return Err(Error::Precondition("primed factors must have full column rank".into()));
    }
    // V' P = V and W' Q = W in the least-squares sense
    let p = least_squares(v_prime, v, 0.0)?.coef;
    let q = least_squares(w_prime, w, 0.0)?.coef;
    let gap = &q * p.transpose() - DMatrix::<f64>::identity(k, k);
    Ok(LemmaCheck {
        identity_error: frobenius(&gap),
        p,
        q,
    })
}

#[cfg(test)]
mod tests;

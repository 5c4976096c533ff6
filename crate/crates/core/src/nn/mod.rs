//! Dense feed-forward network with hand-written reverse mode.
//!
//! The network maps `x ∈ R^d_in` to a feature vector `v(x) ∈ R^r` and, when
//! the bias head is enabled, one extra scalar `c(x)` produced by the same
//! output layer. Hidden layers use a smooth activation; the output layer is
//! linear.
//!
//! Parameters live in one flat `Vec<f64>`. Layer `k` stores its weight
//! matrix row-major with shape `(out, in)` followed by its bias.

mod adam;
pub mod checkpoint;

pub use adam::AdamState;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activated value `a = σ(z)`.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Tanh => write!(f, "tanh"),
            Activation::Identity => write!(f, "identity"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Network topology. `layer_sizes` ends with the feature dimension `r`; the
/// bias head, when enabled, adds one output to the last layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    layer_sizes: Vec<usize>,
    activation: Activation,
    bias_head: bool,
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, bias_head: bool) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config(format!(
                "need at least an input and an output layer, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::config(format!("layer sizes must be positive, got {layer_sizes:?}")));
        }
        Ok(Self {
            layer_sizes,
            activation,
            bias_head,
        })
    }

    pub fn tanh(layer_sizes: Vec<usize>, bias_head: bool) -> Result<Self> {
        Self::new(layer_sizes, Activation::Tanh, bias_head)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn bias_head(&self) -> bool {
        self.bias_head
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Feature dimension `r`.
    pub fn rank(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn output_dim(&self) -> usize {
        self.rank() + usize::from(self.bias_head)
    }

    /// Layer widths as actually allocated (output widened by the bias head).
    fn widths(&self) -> Vec<usize> {
        let mut w = self.layer_sizes.clone();
        *w.last_mut().unwrap() = self.output_dim();
        w
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    fn layer_offsets(&self) -> Vec<LayerSlot> {
        let widths = self.widths();
        let mut off = 0;
        widths
            .windows(2)
            .map(|p| {
                let slot = LayerSlot {
                    fan_in: p[0],
                    fan_out: p[1],
                    weight: off,
                    bias: off + p[0] * p[1],
                };
                off += p[0] * p[1] + p[1];
                slot
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
pub struct NetworkParams {
    arch: Architecture,
    slots: Vec<LayerSlot>,
    values: Vec<f64>,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.values == other.values
    }
}

/// Initializes weights from `U(-1/√fan_in, 1/√fan_in)` and zeroes biases.
pub fn init_network(arch: Architecture, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = NetworkParams::zeros(arch);
    for slot in net.slots.clone() {
        let limit = 1.0 / (slot.fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        for w in &mut net.values[slot.weight..slot.bias] {
            *w = dist.sample(&mut rng);
        }
    }
    net
}

/// Batch outputs: `features` is `N x r`, `bias` has length `N` (zeros when
/// the bias head is disabled).
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub features: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Activations kept from a forward pass for the reverse sweep.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.activations[0].nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn split_output(out: &DMatrix<f64>, bias_head: bool) -> BatchOutput {
    let n = out.nrows();
    if bias_head {
        let r = out.ncols() - 1;
        BatchOutput {
            features: out.columns(0, r).into_owned(),
            bias: out.column(r).into_owned(),
        }
    } else {
        BatchOutput {
            features: out.clone(),
            bias: DVector::zeros(n),
        }
    }
}

impl NetworkParams {
    pub fn zeros(arch: Architecture) -> Self {
        let slots = arch.layer_offsets();
        let values = vec![0.0; arch.param_count()];
        Self { arch, slots, values }
    }

    pub fn from_flat(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::shape(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                values.len()
            )));
        }
        let slots = arch.layer_offsets();
        Ok(Self { arch, slots, values })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.arch.rank()
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    /// Row-major `(out, in)` weight of layer `k`.
    pub fn layer_weight(&self, k: usize) -> &[f64] {
        let s = self.slots[k];
        &self.values[s.weight..s.bias]
    }

    pub fn layer_bias(&self, k: usize) -> &[f64] {
        let s = self.slots[k];
        &self.values[s.bias..s.bias + s.fan_out]
    }

    pub fn layer_weight_mut(&mut self, k: usize) -> &mut [f64] {
        let s = self.slots[k];
        &mut self.values[s.weight..s.bias]
    }

    pub fn layer_bias_mut(&mut self, k: usize) -> &mut [f64] {
        let s = self.slots[k];
        &mut self.values[s.bias..s.bias + s.fan_out]
    }

    /// `Wᵀ` as an `(in, out)` column-major view over the row-major storage.
    fn weight_t(&self, k: usize) -> DMatrixView<'_, f64> {
        let s = self.slots[k];
        DMatrixView::from_slice(&self.values[s.weight..s.bias], s.fan_in, s.fan_out)
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects inputs of dimension {}, got {cols}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass over the rows of `inputs` (`N x d_in`).
    pub fn forward_cached(&self, inputs: &DMatrix<f64>) -> Result<ForwardCache> {
        self.check_input(inputs.ncols())?;
        let last = self.slots.len() - 1;
        let mut activations = Vec::with_capacity(self.slots.len() + 1);
        activations.push(inputs.clone());
        for (k, slot) in self.slots.iter().enumerate() {
            let mut z: DMatrix<f64> = &activations[k] * self.weight_t(k);
            let bias = &self.values[slot.bias..slot.bias + slot.fan_out];
            let act = if k == last { Activation::Identity } else { self.arch.activation };
            for (j, mut col) in z.column_iter_mut().enumerate() {
                let b = bias[j];
                for v in col.iter_mut() {
                    *v = act.apply(*v + b);
                }
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> Result<BatchOutput> {
        let cache = self.forward_cached(inputs)?;
        Ok(self.split(&cache))
    }

    pub fn split(&self, cache: &ForwardCache) -> BatchOutput {
        split_output(cache.activations.last().unwrap(), self.arch.bias_head)
    }

    /// Single-sample forward pass returning `(v(x), c(x))`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let inputs = DMatrix::from_row_slice(1, x.len(), x);
        let out = self.forward_batch(&inputs)?;
        Ok((out.features.row(0).iter().cloned().collect(), out.bias[0]))
    }

    /// Reverse sweep. `d_features` is `N x r`, `d_bias` has length `N`
    /// (ignored without a bias head). Returns the flat parameter gradient of
    /// `Σ_i ⟨d_i, (v_i, c_i)⟩` and, if requested, the input gradient `N x d_in`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_features: &DMatrix<f64>,
        d_bias: Option<&DVector<f64>>,
        want_input_grad: bool,
    ) -> Result<(Vec<f64>, Option<DMatrix<f64>>)> {
        let n = cache.activations[0].nrows();
        let r = self.rank();
        if d_features.nrows() != n || d_features.ncols() != r {
            return Err(Error::shape(format!(
                "feature cotangent must be {n} x {r}, got {} x {}",
                d_features.nrows(),
                d_features.ncols()
            )));
        }
        let mut delta = DMatrix::zeros(n, self.arch.output_dim());
        delta.columns_mut(0, r).copy_from(d_features);
        if self.arch.bias_head {
            if let Some(db) = d_bias {
                if db.len() != n {
                    return Err(Error::shape(format!("bias cotangent must have length {n}")));
                }
                delta.column_mut(r).copy_from(db);
            }
        }

        let mut grad = vec![0.0; self.values.len()];
        for k in (0..self.slots.len()).rev() {
            let slot = self.slots[k];
            let input = &cache.activations[k];
            // dWᵀ = Hᵀ δ, which is exactly the row-major (out, in) layout
            let gw = input.transpose() * &delta;
            grad[slot.weight..slot.bias].copy_from_slice(gw.as_slice());
            for (j, col) in delta.column_iter().enumerate() {
                grad[slot.bias + j] = col.sum();
            }
            if k == 0 && !want_input_grad {
                break;
            }
            let mut d_input = &delta * self.weight_t(k).transpose();
            if k > 0 {
                let act = self.arch.activation;
                d_input.zip_apply(input, |d, a| *d *= act.derivative_from_output(a));
            }
            delta = d_input;
            if k == 0 {
                return Ok((grad, Some(delta)));
            }
        }
        Ok((grad, None))
    }

    /// Gradient of `⟨(dv, dc), (v(x), c(x))⟩` with respect to the parameters,
    /// for a single sample.
    pub fn backward_params(&self, x: &[f64], d_features: &[f64], d_bias: f64) -> Result<Vec<f64>> {
        if d_features.len() != self.rank() {
            return Err(Error::shape(format!(
                "feature cotangent must have length {}, got {}",
                self.rank(),
                d_features.len()
            )));
        }
        let inputs = DMatrix::from_row_slice(1, x.len(), x);
        let cache = self.forward_cached(&inputs)?;
        let df = DMatrix::from_row_slice(1, d_features.len(), d_features);
        let db = DVector::from_element(1, d_bias);
        Ok(self.backward(&cache, &df, Some(&db), false)?.0)
    }

    /// Jacobian of the raw outputs `(v(x), c(x))` with respect to the
    /// parameters, `output_dim x len`.
    pub fn output_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let inputs = DMatrix::from_row_slice(1, x.len(), x);
        let cache = self.forward_cached(&inputs)?;
        let (r, out) = (self.rank(), self.arch.output_dim());
        let mut jac = DMatrix::zeros(out, self.values.len());
        for o in 0..out {
            let mut df = DMatrix::zeros(1, r);
            let db = DVector::from_element(1, if o == r { 1.0 } else { 0.0 });
            if o < r {
                df[(0, o)] = 1.0;
            }
            let (g, _) = self.backward(&cache, &df, Some(&db), false)?;
            jac.row_mut(o).copy_from_slice(&g);
        }
        Ok(jac)
    }

    /// `∇_x [c(x) + wᵀ v(x)]` for each row of `inputs`.
    pub fn input_gradient_batch(&self, w: &[f64], inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if w.len() != self.rank() {
            return Err(Error::shape(format!("weight must have length {}, got {}", self.rank(), w.len())));
        }
        let cache = self.forward_cached(inputs)?;
        let n = inputs.nrows();
        let df = DMatrix::from_fn(n, w.len(), |_, j| w[j]);
        let db = DVector::from_element(n, 1.0);
        let (_, dx) = self.backward(&cache, &df, Some(&db), true)?;
        Ok(dx.unwrap())
    }

    pub fn input_gradient(&self, w: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let inputs = DMatrix::from_row_slice(1, x.len(), x);
        let g = self.input_gradient_batch(w, &inputs)?;
        Ok(g.row(0).iter().cloned().collect())
    }
}

/// Stacks equal-length rows into an `N x d` matrix.
pub fn rows_to_matrix(rows: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>> {
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::shape(format!("expected rows of length {dim}, found {}", bad.len())));
    }
    Ok(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]))
}

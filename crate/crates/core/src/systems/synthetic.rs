use super::{LinearSystem, PhysicalSystem};
use crate::error::{Error, Result};
use crate::nn::{init_network, Architecture, NetworkParams};

/// Exactly context-linear toy system whose basis `ν(x)` is a fixed random
/// tanh network, so a model of at least the same width can represent it
/// without error.
#[derive(Debug, Clone)]
pub struct SyntheticLinearSystem {
    teacher: NetworkParams,
    with_offset: bool,
}

impl SyntheticLinearSystem {
    /// `ν: R^input_dim → R^context_dim` through one hidden layer of `hidden`
    /// units. When `with_offset` is set the system gains a nonzero `κ(x)`.
    pub fn new(input_dim: usize, hidden: usize, context_dim: usize, with_offset: bool, seed: u64) -> Result<Self> {
        let arch = Architecture::tanh(vec![input_dim, hidden, context_dim], with_offset)?;
        let mut teacher = init_network(arch, seed);
        // scale hidden weights up so the basis is visibly nonlinear on [-1, 1]
        for w in teacher.layer_weight_mut(0) {
            *w *= 2.0;
        }
        let hidden_bias: Vec<f64> = (0..hidden).map(|i| ((i as f64) * 1.7).sin() * 0.5).collect();
        teacher.layer_bias_mut(0).copy_from_slice(&hidden_bias);
        Ok(Self { teacher, with_offset })
    }

    pub fn teacher(&self) -> &NetworkParams {
        &self.teacher
    }
}

impl PhysicalSystem for SyntheticLinearSystem {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn context_dim(&self) -> usize {
        self.teacher.rank()
    }

    fn input_dim(&self) -> usize {
        self.teacher.input_dim()
    }

    fn evaluate(&self, context: &[f64], x: &[f64]) -> Result<f64> {
        if context.len() != self.context_dim() {
            return Err(Error::shape(format!(
                "context must have length {}, got {}",
                self.context_dim(),
                context.len()
            )));
        }
        let (nu, kappa) = self.teacher.forward(x)?;
        Ok(kappa + context.iter().zip(&nu).map(|(a, b)| a * b).sum::<f64>())
    }
}

impl LinearSystem for SyntheticLinearSystem {
    fn offset(&self, x: &[f64]) -> Result<f64> {
        if !self.with_offset {
            return Ok(0.0);
        }
        Ok(self.teacher.forward(x)?.1)
    }

    fn basis(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.teacher.forward(x)?.0)
    }
}

//! Named parameter storage with gradient slots and optimizer state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Gradients, Matrix, Scalar};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {name:?}; step aborted")]
    NonFiniteGradient { name: String },
    #[error("gradient shape {got} does not match parameter {name:?} of shape {expected}")]
    GradientShape {
        name: String,
        expected: String,
        got: String,
    },
}

/// Adam hyperparameters. Defaults follow the common IQN/DQN settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Default)]
struct AdamSlot {
    m: Option<Matrix>,
    v: Option<Matrix>,
}

/// Named parameter tensors plus accumulated gradients and Adam moments.
///
/// Parameter names are unique by construction (map keys); iteration order is
/// the sorted name order, which keeps serialization and update sweeps
/// deterministic.
#[derive(Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Matrix>,
    grads: BTreeMap<String, Matrix>,
    adam: BTreeMap<String, AdamSlot>,
    adam_t: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Matrix::len).sum()
    }

    pub fn grad(&self, name: &str) -> Option<&Matrix> {
        self.grads.get(name)
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    /// Adds the named gradients from a backward pass into the store's
    /// gradient slots. Parameters untouched by the pass keep a zero
    /// (absent) gradient.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<(), OptimError> {
        for (name, g) in &grads.by_name {
            let Some(p) = self.params.get(name) else {
                continue;
            };
            if p.raw_dim() != g.raw_dim() {
                return Err(OptimError::GradientShape {
                    name: name.clone(),
                    expected: format!("{}x{}", p.nrows(), p.ncols()),
                    got: format!("{}x{}", g.nrows(), g.ncols()),
                });
            }
            match self.grads.get_mut(name) {
                Some(acc) => *acc += g,
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    /// Global L2 gradient-norm clipping. Returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: Scalar) -> Scalar {
        let sq: Scalar = self
            .grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<Scalar>())
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let factor = max_norm / norm;
            for g in self.grads.values_mut() {
                g.mapv_inplace(|v| v * factor);
            }
        }
        norm
    }

    fn check_finite(&self) -> Result<(), OptimError> {
        for (name, g) in &self.grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGradient { name: name.clone() });
            }
        }
        Ok(())
    }

    /// Plain gradient descent: `p -= lr * g`. Aborts without touching any
    /// parameter when a non-finite gradient is present.
    pub fn sgd_step(&mut self, lr: Scalar) -> Result<(), OptimError> {
        self.check_finite()?;
        for (name, g) in &self.grads {
            if let Some(p) = self.params.get_mut(name) {
                p.scaled_add(-lr, g);
            }
        }
        Ok(())
    }

    /// One Adam update with bias correction over all parameters that have a
    /// gradient. Aborts without touching parameters or moments on
    /// non-finite gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), OptimError> {
        self.check_finite()?;
        self.adam_t += 1;
        let t = self.adam_t as Scalar;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for (name, g) in &self.grads {
            let Some(p) = self.params.get_mut(name) else {
                continue;
            };
            let slot = self.adam.entry(name.clone()).or_default();
            let m = slot.m.get_or_insert_with(|| Matrix::zeros(g.raw_dim()));
            let v = slot.v.get_or_insert_with(|| Matrix::zeros(g.raw_dim()));
            azip(m, v, p, g, cfg, bc1, bc2);
        }
        Ok(())
    }

    /// Number of optimizer steps taken so far.
    pub fn optimizer_steps(&self) -> u64 {
        self.adam_t
    }

    /// Copies parameter values from another store (used for target-network
    /// synchronization). Optimizer state is not copied.
    pub fn copy_params_from(&mut self, other: &ParamStore) {
        self.params = other.params.clone();
    }

    /// Named tensors as `(name, rows, cols, row-major data)` for
    /// checkpointing.
    pub fn export(&self) -> Vec<(String, usize, usize, Vec<Scalar>)> {
        self.params
            .iter()
            .map(|(name, p)| {
                (
                    name.clone(),
                    p.nrows(),
                    p.ncols(),
                    p.iter().cloned().collect(),
                )
            })
            .collect()
    }

    /// Rebuilds a store from exported tensors.
    pub fn import(tensors: &[(String, usize, usize, Vec<Scalar>)]) -> Option<Self> {
        let mut store = ParamStore::new();
        for (name, rows, cols, data) in tensors {
            let m = Matrix::from_shape_vec((*rows, *cols), data.clone()).ok()?;
            store.insert(name, m);
        }
        Some(store)
    }
}

fn azip(
    m: &mut Matrix,
    v: &mut Matrix,
    p: &mut Matrix,
    g: &Matrix,
    cfg: &AdamConfig,
    bc1: Scalar,
    bc2: Scalar,
) {
    for ((m, v), (p, &g)) in m
        .iter_mut()
        .zip(v.iter_mut())
        .zip(p.iter_mut().zip(g.iter()))
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

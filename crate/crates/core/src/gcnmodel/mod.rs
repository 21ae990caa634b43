//! Shared-parameter graph network over state graphs.
//!
//! Node features pass through per-type input encoders into a common
//! hidden width, then through sigmoid GCN propagation layers over the
//! normalized adjacency. TSC rows of the last layer form the embedding ψ.
//! A linear head maps ψ to the two action values; the distributional head
//! evaluates the same mapping on ψ ⊙ φ(τ) for quantile samples τ, with
//! φ built from cosine features of τ through a learned ReLU layer.
//!
//! One parameter set serves every controller and every node instance of a
//! type, so the parameter count does not depend on the graph.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Matrix, ParamStore, Scalar, Tape, TensorId};
use crate::obsgraph::{FeatureScaling, StateGraph, CONN_FEATS, LANE_FEATS, TSC_FEATS, VEH_FEATS};

/// Number of actions (prolong, switch).
pub const ACTIONS: usize = 2;

/// Version tag written into checkpoints.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("quantile fraction {0} outside [0, 1]")]
    TauRange(Scalar),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint format version {0} unsupported")]
    CheckpointVersion(u32),
    #[error("checkpoint config hash {got:#x} does not match expected {expected:#x}")]
    CheckpointHash { expected: u64, got: u64 },
    #[error("malformed checkpoint: {0}")]
    CheckpointParse(String),
}

/// Architecture and quantile-sampling sizes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GcnConfig {
    /// GCN propagation layers N (also the receptive-field radius).
    pub layers: usize,
    /// Hidden width d.
    pub hidden: usize,
    /// Quantile embedding input size n (number of cosine features).
    pub quantile_embed: usize,
    /// Quantile samples M for the current side of the distributional loss.
    pub m_current: usize,
    /// Quantile samples M' for the target side.
    pub m_target: usize,
    /// Evaluation quantiles K for action selection.
    pub k_eval: usize,
    /// Huber threshold λ of the quantile regression loss.
    pub huber_lambda: Scalar,
    /// Optional hidden width for the value head; `None` keeps the linear
    /// head.
    pub head_hidden: Option<usize>,
    pub scaling: FeatureScaling,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden: 32,
            quantile_embed: 64,
            m_current: 8,
            m_target: 8,
            k_eval: 32,
            huber_lambda: 1.0,
            head_hidden: None,
            scaling: FeatureScaling::default(),
        }
    }
}

impl GcnConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers < 2 {
            return Err(ModelError::Config("layers must be >= 2".into()));
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("quantile_embed", self.quantile_embed),
            ("m_current", self.m_current),
            ("m_target", self.m_target),
            ("k_eval", self.k_eval),
        ] {
            if v < 1 {
                return Err(ModelError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.huber_lambda <= 0.0 {
            return Err(ModelError::Config("huber_lambda must be positive".into()));
        }
        if self.head_hidden == Some(0) {
            return Err(ModelError::Config("head_hidden must be >= 1 when set".into()));
        }
        Ok(())
    }

    /// Stable FNV-1a hash of the canonical JSON form, used to pair
    /// checkpoints with configs.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        fnv1a(json.as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

/// The model: configuration plus forward-pass builders. Parameters live in
/// a [`ParamStore`] so deterministic and distributional agents can hold
/// separately trained sets of the same shape.
#[derive(Debug, Clone)]
pub struct GcnModel {
    pub config: GcnConfig,
}

impl GcnModel {
    pub fn new(config: GcnConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Xavier-uniform initialization of all parameters: per-type input
    /// encoders, propagation layers, the value head, and the quantile
    /// embedding.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = self.config.hidden;
        let mut store = ParamStore::new();
        let xavier = |rows: usize, cols: usize, rng: &mut ChaCha12Rng| {
            let limit = (6.0 / (rows + cols) as Scalar).sqrt();
            Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
        };
        for (name, width) in [
            ("enc.tsc", TSC_FEATS),
            ("enc.conn", CONN_FEATS),
            ("enc.lane", LANE_FEATS),
            ("enc.veh", VEH_FEATS),
        ] {
            store.insert(&format!("{name}.w"), xavier(width, d, &mut rng));
            store.insert(&format!("{name}.b"), Matrix::zeros((1, d)));
        }
        for layer in 0..self.config.layers {
            store.insert(&format!("gcn.{layer}.w"), xavier(d, d, &mut rng));
        }
        match self.config.head_hidden {
            Some(h) => {
                store.insert("head.hidden.w", xavier(d, h, &mut rng));
                store.insert("head.hidden.b", Matrix::zeros((1, h)));
                store.insert("head.w", xavier(h, ACTIONS, &mut rng));
            }
            None => {
                store.insert("head.w", xavier(d, ACTIONS, &mut rng));
            }
        }
        store.insert("head.b", Matrix::zeros((1, ACTIONS)));
        store.insert("quant.w", xavier(self.config.quantile_embed, d, &mut rng));
        store.insert("quant.b", Matrix::zeros((1, d)));
        store
    }

    /// Graph embedding ψ: one row per TSC node of the graph.
    pub fn embed(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        graph: &StateGraph,
    ) -> Result<TensorId, ModelError> {
        let features = graph.scaled_features(&self.config.scaling);
        let mut blocks = Vec::with_capacity(4);
        for (block, name) in ["enc.tsc", "enc.conn", "enc.lane", "enc.veh"].iter().enumerate() {
            let x = tape.constant(features[block].clone());
            let w = tape.param(params, &format!("{name}.w"))?;
            let b = tape.param(params, &format!("{name}.b"))?;
            let xw = tape.matmul(x, w)?;
            let pre = tape.add_row(xw, b)?;
            blocks.push(tape.sigmoid(pre));
        }
        let mut h = tape.concat_rows(&blocks)?;
        for layer in 0..self.config.layers {
            let w = tape.param(params, &format!("gcn.{layer}.w"))?;
            let propagated = tape.spmm(Arc::clone(&graph.norm_adj), h)?;
            let hw = tape.matmul(propagated, w)?;
            h = tape.sigmoid(hw);
        }
        let tsc_rows = Arc::new((0..graph.n_tsc()).collect::<Vec<_>>());
        Ok(tape.gather_rows(h, tsc_rows)?)
    }

    /// The value head f: maps embedding rows to one value per action.
    pub fn q_head(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        psi: TensorId,
    ) -> Result<TensorId, ModelError> {
        let mut x = psi;
        if self.config.head_hidden.is_some() {
            let w = tape.param(params, "head.hidden.w")?;
            let b = tape.param(params, "head.hidden.b")?;
            let xw = tape.matmul(x, w)?;
            let pre = tape.add_row(xw, b)?;
            x = tape.relu(pre);
        }
        let w = tape.param(params, "head.w")?;
        let b = tape.param(params, "head.b")?;
        let xw = tape.matmul(x, w)?;
        Ok(tape.add_row(xw, b)?)
    }

    /// Quantile embedding φ(τ) for a batch of fractions, one row per τ:
    /// `φ_j(τ) = ReLU(Σ_{i<n} cos(π i τ) w_ij + b_j)`.
    pub fn quantile_phi(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        taus: &[Scalar],
    ) -> Result<TensorId, ModelError> {
        for &tau in taus {
            if !(0.0..=1.0).contains(&tau) {
                return Err(ModelError::TauRange(tau));
            }
        }
        let n = self.config.quantile_embed;
        let angles = Matrix::from_shape_fn((taus.len(), n), |(k, i)| {
            std::f64::consts::PI as Scalar * i as Scalar * taus[k]
        });
        let a = tape.constant(angles);
        let c = tape.cos(a);
        let w = tape.param(params, "quant.w")?;
        let b = tape.param(params, "quant.b")?;
        let cw = tape.matmul(c, w)?;
        let pre = tape.add_row(cw, b)?;
        Ok(tape.relu(pre))
    }

    /// Quantile returns `Z_τ(s, ·) = f(ψ ⊙ φ(τ))`, laid out row-major by
    /// TSC then τ: row `t * taus.len() + k`.
    pub fn z_values(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        psi: TensorId,
        taus: &[Scalar],
    ) -> Result<TensorId, ModelError> {
        let phi = self.quantile_phi(tape, params, taus)?;
        let rows = tape.value(psi).nrows();
        let k = taus.len();
        let psi_idx: Arc<Vec<usize>> =
            Arc::new((0..rows).flat_map(|t| std::iter::repeat_n(t, k)).collect());
        let phi_idx: Arc<Vec<usize>> = Arc::new((0..rows).flat_map(|_| 0..k).collect());
        let psi_rep = tape.gather_rows(psi, psi_idx)?;
        let phi_rep = tape.gather_rows(phi, phi_idx)?;
        let combined = tape.mul(psi_rep, phi_rep)?;
        self.q_head(tape, params, combined)
    }

    /// Deterministic evaluation grid: midpoints `(k − 0.5) / K`.
    pub fn eval_taus(&self) -> Vec<Scalar> {
        let k = self.config.k_eval;
        (0..k).map(|i| (i as Scalar + 0.5) / k as Scalar).collect()
    }

    /// Uniform τ draws for sampled (training-time) evaluation.
    pub fn sample_taus(&self, rng: &mut ChaCha12Rng, count: usize) -> Vec<Scalar> {
        (0..count).map(|_| rng.random::<Scalar>()).collect()
    }

    /// Forward-only deterministic action values per TSC.
    pub fn q_values(&self, params: &ParamStore, graph: &StateGraph) -> Result<Matrix, ModelError> {
        let mut tape = Tape::new();
        let psi = self.embed(&mut tape, params, graph)?;
        let q = self.q_head(&mut tape, params, psi)?;
        Ok(tape.value(q).clone())
    }

    /// Forward-only quantile values, rows ordered TSC-major.
    pub fn z_matrix(
        &self,
        params: &ParamStore,
        graph: &StateGraph,
        taus: &[Scalar],
    ) -> Result<Matrix, ModelError> {
        let mut tape = Tape::new();
        let psi = self.embed(&mut tape, params, graph)?;
        let z = self.z_values(&mut tape, params, psi, taus)?;
        Ok(tape.value(z).clone())
    }

    /// Distributional action values: the mean of `Z_τ` over the given τ
    /// batch, per TSC.
    pub fn q_from_quantiles(
        &self,
        params: &ParamStore,
        graph: &StateGraph,
        taus: &[Scalar],
    ) -> Result<Matrix, ModelError> {
        let z = self.z_matrix(params, graph, taus)?;
        Ok(mean_per_block(&z, graph.n_tsc(), taus.len()))
    }
}

/// Mean over each consecutive block of `k` rows.
pub fn mean_per_block(z: &Matrix, blocks: usize, k: usize) -> Matrix {
    let mut out = Matrix::zeros((blocks, z.ncols()));
    for t in 0..blocks {
        for row in 0..k {
            for col in 0..z.ncols() {
                out[(t, col)] += z[(t * k + row, col)];
            }
        }
        for col in 0..z.ncols() {
            out[(t, col)] /= k as Scalar;
        }
    }
    out
}

/// Serialized parameter set with its architecture fingerprint.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Which agent these parameters belong to ("igrl" or "dgrl").
    pub agent: String,
    pub config: GcnConfig,
    pub config_hash: u64,
    /// Episodes already trained (for resuming).
    pub episodes_trained: u32,
    pub params: Vec<(String, usize, usize, Vec<Scalar>)>,
}

impl Checkpoint {
    pub fn new(agent: &str, config: &GcnConfig, episodes_trained: u32, params: &ParamStore) -> Self {
        Self {
            version: CHECKPOINT_FORMAT_VERSION,
            agent: agent.to_string(),
            config: config.clone(),
            config_hash: config.hash(),
            episodes_trained,
            params: params.export(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| ModelError::CheckpointParse(e.to_string()))?;
        if ck.version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::CheckpointVersion(ck.version));
        }
        if ck.config.hash() != ck.config_hash {
            return Err(ModelError::CheckpointHash {
                expected: ck.config.hash(),
                got: ck.config_hash,
            });
        }
        Ok(ck)
    }

    /// Rebuilds the parameter store, checking the hash against an expected
    /// configuration.
    pub fn restore(&self, expected: &GcnConfig) -> Result<ParamStore, ModelError> {
        if self.config_hash != expected.hash() {
            return Err(ModelError::CheckpointHash {
                expected: expected.hash(),
                got: self.config_hash,
            });
        }
        ParamStore::import(&self.params)
            .ok_or_else(|| ModelError::CheckpointParse("bad tensor shape".into()))
    }
}

#[cfg(test)]
mod tests;

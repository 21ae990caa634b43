//! Agents and objectives: the deterministic DQN loss, the implicit-quantile
//! regression loss, ε-greedy action selection for both, the softmax policy
//! ensemble combining them at inference time, replay storage, and the two
//! transportation baselines (fixed-time and greedy).

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    AdamConfig, Matrix, OptimError, ParamStore, Scalar, Tape, TensorId,
};
use crate::gcnmodel::{mean_per_block, GcnModel, ModelError};
use crate::obsgraph::StateGraph;
use crate::roadnet::{NodeId, RoadNetwork};
use crate::simcore::{Action, SimState};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("empty transition batch")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("ensemble inputs invalid: {0}")]
    Ensemble(String),
    #[error("fixed-time configuration invalid: {0}")]
    FixedTime(String),
    #[error("loss diverged (non-finite value)")]
    Diverged,
}

/// Which objective trained a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentKind {
    /// Deterministic graph Q-learning.
    Igrl,
    /// Distributional (implicit-quantile) graph Q-learning.
    Dgrl,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Igrl => "igrl",
            AgentKind::Dgrl => "dgrl",
        }
    }
}

/// One stored experience of a single controller. Graphs are the agent's
/// local receptive-field views, shared through `Arc` with the other
/// controllers observed at the same step.
#[derive(Clone)]
pub struct Transition {
    pub graph: Arc<StateGraph>,
    pub tsc_row: usize,
    pub action: Action,
    pub reward: Scalar,
    pub next_graph: Arc<StateGraph>,
    pub next_tsc_row: usize,
    pub terminal: bool,
}

/// Fixed-capacity ring buffer with uniform sampling (with replacement).
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    write: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { items: Vec::with_capacity(capacity.min(4096)), capacity, write: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.write] = t;
        }
        self.write = (self.write + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn sample(&self, rng: &mut ChaCha12Rng, count: usize) -> Vec<&Transition> {
        (0..count)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

/// Squared TD-error averaged over the batch. Targets come from the
/// periodically synced `target` parameters; terminal transitions bootstrap
/// to the reward alone.
pub fn dqn_loss(
    tape: &mut Tape,
    model: &GcnModel,
    params: &ParamStore,
    target: &ParamStore,
    batch: &[&Transition],
    gamma: Scalar,
) -> Result<TensorId, AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let mut targets = Matrix::zeros((batch.len(), 1));
    for (row, t) in batch.iter().enumerate() {
        let mut y = t.reward;
        if !t.terminal {
            let next_q = model.q_values(target, &t.next_graph)?;
            let row_q = next_q.row(t.next_tsc_row);
            y += gamma * row_q.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
        }
        targets[(row, 0)] = y;
    }

    let mut rows = Vec::with_capacity(batch.len());
    for t in batch {
        let psi = model.embed(tape, params, &t.graph)?;
        let agent = tape.gather_rows(psi, Arc::new(vec![t.tsc_row]))?;
        rows.push(agent);
    }
    let psi_batch = tape.concat_rows(&rows)?;
    let q_all = model.q_head(tape, params, psi_batch)?;
    let actions: Arc<Vec<usize>> = Arc::new(batch.iter().map(|t| t.action.index()).collect());
    let q_taken = tape.select_per_row(q_all, actions)?;

    let y = tape.constant(targets);
    let err = tape.sub(y, q_taken)?;
    let sq = tape.mul(err, err)?;
    Ok(tape.mean_all(sq))
}

/// Asymmetric quantile weight `|τ − 1{δ < 0}|`.
pub fn quantile_weight(tau: Scalar, delta: Scalar) -> Scalar {
    let indicator = if delta < 0.0 { 1.0 } else { 0.0 };
    (tau - indicator).abs()
}

/// Quantile-Huber penalty `ρ_τ^λ(δ) = |τ − 1{δ<0}| · L_λ(δ) / λ`.
pub fn quantile_huber(tau: Scalar, delta: Scalar, lambda: Scalar) -> Scalar {
    let huber = if delta.abs() <= lambda {
        0.5 * delta * delta
    } else {
        lambda * (delta.abs() - 0.5 * lambda)
    };
    quantile_weight(tau, delta) * huber / lambda
}

/// Implicit-quantile regression loss. For each transition, `M` current and
/// `M'` target fractions are drawn uniformly; the target-side policy is the
/// greedy action of the mean of the target quantiles. The pairwise
/// TD-errors `δ = r + γ Z_τ'(s', π(s')) − Z_τ(s, a)` pass through the
/// quantile-Huber penalty, summed over pairs, scaled by `1/M'`, and
/// averaged over the batch.
pub fn iqn_loss(
    tape: &mut Tape,
    model: &GcnModel,
    params: &ParamStore,
    target: &ParamStore,
    batch: &[&Transition],
    gamma: Scalar,
    rng: &mut ChaCha12Rng,
) -> Result<TensorId, AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let m = model.config.m_current;
    let m_t = model.config.m_target;
    let lambda = model.config.huber_lambda;

    let mut contributions = Vec::with_capacity(batch.len());
    for t in batch {
        let taus: Vec<Scalar> = model.sample_taus(rng, m);
        let taus_target: Vec<Scalar> = model.sample_taus(rng, m_t);

        // Target side, no gradient.
        let mut y = Matrix::from_elem((m * m_t, 1), t.reward);
        if !t.terminal {
            let z_next = model.z_matrix(target, &t.next_graph, &taus_target)?;
            let block_start = t.next_tsc_row * m_t;
            let means = mean_per_block(&z_next, z_next.nrows() / m_t, m_t);
            let best = greedy_action(
                means[(t.next_tsc_row, 0)],
                means[(t.next_tsc_row, 1)],
            );
            for i in 0..m {
                for j in 0..m_t {
                    y[(i * m_t + j, 0)] += gamma * z_next[(block_start + j, best.index())];
                }
            }
        }

        // Current side.
        let psi = model.embed(tape, params, &t.graph)?;
        let agent = tape.gather_rows(psi, Arc::new(vec![t.tsc_row]))?;
        let z = model.z_values(tape, params, agent, &taus)?;
        let z_taken = tape.select_per_row(z, Arc::new(vec![t.action.index(); m]))?;
        let z_rep = tape.gather_rows(
            z_taken,
            Arc::new((0..m).flat_map(|i| std::iter::repeat_n(i, m_t)).collect()),
        )?;
        let y_const = tape.constant(y);
        let delta = tape.sub(y_const, z_rep)?;

        // The asymmetric weight uses the sign of δ as a constant.
        let weights = {
            let d = tape.value(delta);
            Matrix::from_shape_fn((m * m_t, 1), |(row, _)| {
                quantile_weight(taus[row / m_t], d[(row, 0)])
            })
        };
        let huber = tape.huber(delta, lambda);
        let scaled = tape.scale(huber, 1.0 / lambda);
        let w = tape.constant(weights);
        contributions.push(tape.mul(scaled, w)?);
    }
    let all = tape.concat_rows(&contributions)?;
    let total = tape.sum_all(all);
    Ok(tape.scale(total, 1.0 / (m_t as Scalar * batch.len() as Scalar)))
}

/// Greedy action with the documented tie-break toward prolong.
pub fn greedy_action(q_prolong: Scalar, q_switch: Scalar) -> Action {
    if q_switch > q_prolong {
        Action::Switch
    } else {
        Action::Prolong
    }
}

fn epsilon_greedy_rows(
    q: &Matrix,
    epsilon: Scalar,
    rng: &mut ChaCha12Rng,
) -> Vec<Action> {
    q.rows()
        .into_iter()
        .map(|row| {
            if epsilon > 0.0 && rng.random::<Scalar>() < epsilon {
                Action::from_index(rng.random_range(0..2usize))
            } else {
                greedy_action(row[0], row[1])
            }
        })
        .collect()
}

/// ε-greedy over the deterministic head, one action per TSC node.
pub fn act_igrl(
    graph: &StateGraph,
    model: &GcnModel,
    params: &ParamStore,
    epsilon: Scalar,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Action>, AgentError> {
    let q = model.q_values(params, graph)?;
    Ok(epsilon_greedy_rows(&q, epsilon, rng))
}

/// How DGRL draws its evaluation fractions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauMode {
    /// Fixed midpoint grid; deterministic and seed-independent.
    FixedGrid,
    /// Uniform samples from the acting RNG (training-time behavior).
    Sampled,
}

/// ε-greedy over the distributional head's expectation across `K`
/// quantiles.
pub fn act_dgrl(
    graph: &StateGraph,
    model: &GcnModel,
    params: &ParamStore,
    epsilon: Scalar,
    k: usize,
    mode: TauMode,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Action>, AgentError> {
    let taus = match mode {
        TauMode::FixedGrid => model.eval_taus(),
        TauMode::Sampled => model.sample_taus(rng, k),
    };
    let q = model.q_from_quantiles(params, graph, &taus)?;
    Ok(epsilon_greedy_rows(&q, epsilon, rng))
}

/// Mixing weights of the inference-time policy ensemble.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    /// Relative importance κ of the deterministic head.
    pub kappa: Scalar,
    /// Softmax temperature T.
    pub temperature: Scalar,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { kappa: 0.6, temperature: 5.0 }
    }
}

/// Normalizes both value vectors with a temperature softmax, combines them
/// convexly, and picks the greedy action (prolong on ties). Combination
/// happens at inference only; the two parameter sets are trained apart.
pub fn ensemble_q(
    q_deter: &[Scalar],
    q_dis: &[Scalar],
    cfg: &EnsembleConfig,
) -> Result<(Vec<Scalar>, Action), AgentError> {
    if q_deter.len() != q_dis.len() || q_deter.is_empty() {
        return Err(AgentError::Ensemble(format!(
            "value lengths {} vs {}",
            q_deter.len(),
            q_dis.len()
        )));
    }
    if cfg.temperature <= 0.0 {
        return Err(AgentError::Ensemble("temperature must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.kappa) {
        return Err(AgentError::Ensemble("kappa must lie in [0, 1]".into()));
    }
    let soft = |values: &[Scalar]| -> Vec<Scalar> {
        let m = Matrix::from_shape_vec((1, values.len()), values.to_vec()).expect("row");
        crate::autodiff::softmax_rows(&m, cfg.temperature)
            .row(0)
            .to_vec()
    };
    let deter = soft(q_deter);
    let dis = soft(q_dis);
    let combined: Vec<Scalar> = deter
        .iter()
        .zip(dis.iter())
        .map(|(a, b)| cfg.kappa * a + (1.0 - cfg.kappa) * b)
        .collect();
    let mut best = 0usize;
    for idx in 1..combined.len() {
        if combined[idx] > combined[best] {
            best = idx;
        }
    }
    Ok((combined, Action::from_index(best)))
}

/// RGLight: per-TSC ensemble of the two heads' values.
pub fn act_rglight(
    graph: &StateGraph,
    model: &GcnModel,
    igrl_params: &ParamStore,
    dgrl_params: &ParamStore,
    cfg: &EnsembleConfig,
) -> Result<Vec<Action>, AgentError> {
    let q_deter = model.q_values(igrl_params, graph)?;
    let q_dis = model.q_from_quantiles(dgrl_params, graph, &model.eval_taus())?;
    let mut actions = Vec::with_capacity(graph.n_tsc());
    for t in 0..graph.n_tsc() {
        let (_, action) = ensemble_q(
            q_deter.row(t).as_slice().expect("contiguous"),
            q_dis.row(t).as_slice().expect("contiguous"),
            cfg,
        )?;
        actions.push(action);
    }
    Ok(actions)
}

/// Open-loop fixed-time control: each green phase runs a configured
/// duration, clearance phases run their program minimum, and the switch is
/// requested exactly when the duration elapses, regardless of traffic.
#[derive(Debug, Clone)]
pub struct FixedTimeController {
    pub green_duration: u32,
}

impl FixedTimeController {
    pub fn new(net: &RoadNetwork, green_duration: u32) -> Result<Self, AgentError> {
        for node in net.signalized() {
            let program = net.program(node).expect("validated network");
            if green_duration < program.min_phase_duration {
                return Err(AgentError::FixedTime(format!(
                    "green duration {green_duration} below minimum {} at {:?}",
                    program.min_phase_duration, node
                )));
            }
        }
        Ok(Self { green_duration })
    }

    pub fn decide(&self, state: &SimState, net: &RoadNetwork) -> Vec<(NodeId, Action)> {
        state
            .signals()
            .iter()
            .map(|s| {
                let program = net.program(s.node).expect("validated network");
                let phase = &program.phases[s.phase_index];
                let is_green = phase.entries.iter().any(|e| e.open);
                let duration = if is_green {
                    u64::from(self.green_duration)
                } else {
                    u64::from(phase.min_duration)
                };
                let elapsed = state.clock - s.phase_entry_step;
                let action = if elapsed >= duration { Action::Switch } else { Action::Prolong };
                (s.node, action)
            })
            .collect()
    }
}

/// Greedy transportation baseline: switch exactly when the intersection's
/// inbound lanes hold strictly more stopped than moving vehicles.
pub fn baseline_greedy(state: &SimState, net: &RoadNetwork, tsc: NodeId) -> Action {
    let (stopped, moving) = state.stopped_and_moving(net, tsc);
    if stopped > moving {
        Action::Switch
    } else {
        Action::Prolong
    }
}

/// Hyperparameters of the Q-learning loop shared by both agents.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub gamma: Scalar,
    pub batch_size: usize,
    /// Environment steps between gradient updates.
    pub train_every: u32,
    /// Gradient updates between target-network syncs.
    pub target_sync: u32,
    pub replay_capacity: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<Scalar>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            batch_size: 64,
            train_every: 4,
            target_sync: 500,
            replay_capacity: 50_000,
            adam: AdamConfig::default(),
            grad_clip: Some(10.0),
        }
    }
}

/// One agent's training state: online and target parameters, replay, and
/// the update counters. All controllers share these parameters and the
/// replay pool.
pub struct Trainer {
    pub kind: AgentKind,
    pub model: GcnModel,
    pub params: ParamStore,
    target: ParamStore,
    pub replay: ReplayBuffer,
    pub hyper: TrainHyper,
    pub updates: u64,
    env_steps: u64,
    rng: ChaCha12Rng,
}

impl Trainer {
    pub fn new(kind: AgentKind, model: GcnModel, hyper: TrainHyper, seed: u64) -> Self {
        let params = model.init_params(seed);
        Self::from_params(kind, model, params, hyper, seed)
    }

    pub fn from_params(
        kind: AgentKind,
        model: GcnModel,
        params: ParamStore,
        hyper: TrainHyper,
        seed: u64,
    ) -> Self {
        let target = params.clone();
        let replay = ReplayBuffer::new(hyper.replay_capacity);
        Self {
            kind,
            model,
            params,
            target,
            replay,
            hyper,
            updates: 0,
            env_steps: 0,
            rng: ChaCha12Rng::seed_from_u64(seed ^ 0x7261_6E64),
        }
    }

    pub fn act(&mut self, graph: &StateGraph, epsilon: Scalar) -> Result<Vec<Action>, AgentError> {
        match self.kind {
            AgentKind::Igrl => act_igrl(graph, &self.model, &self.params, epsilon, &mut self.rng),
            AgentKind::Dgrl => act_dgrl(
                graph,
                &self.model,
                &self.params,
                epsilon,
                self.model.config.m_current,
                TauMode::Sampled,
                &mut self.rng,
            ),
        }
    }

    pub fn observe(&mut self, transitions: impl IntoIterator<Item = Transition>) {
        for t in transitions {
            self.replay.push(t);
        }
    }

    /// Advances the step counter and runs one gradient update when due.
    /// Returns the loss value when an update happened.
    pub fn on_env_step(&mut self) -> Result<Option<Scalar>, AgentError> {
        self.env_steps += 1;
        if !self.env_steps.is_multiple_of(u64::from(self.hyper.train_every)) {
            return Ok(None);
        }
        if self.replay.len() < self.hyper.batch_size {
            return Ok(None);
        }
        let loss = self.update()?;
        Ok(Some(loss))
    }

    fn update(&mut self) -> Result<Scalar, AgentError> {
        let batch = self.replay.sample(&mut self.rng, self.hyper.batch_size);
        let mut tape = Tape::new();
        let loss_id = match self.kind {
            AgentKind::Igrl => dqn_loss(
                &mut tape,
                &self.model,
                &self.params,
                &self.target,
                &batch,
                self.hyper.gamma,
            )?,
            AgentKind::Dgrl => iqn_loss(
                &mut tape,
                &self.model,
                &self.params,
                &self.target,
                &batch,
                self.hyper.gamma,
                &mut self.rng,
            )?,
        };
        let loss = tape.value(loss_id)[(0, 0)];
        if !loss.is_finite() {
            return Err(AgentError::Diverged);
        }
        let grads = tape.backward(loss_id).expect("fresh tape");
        self.params.zero_grads();
        self.params.accumulate(&grads)?;
        if let Some(max_norm) = self.hyper.grad_clip {
            self.params.clip_grad_norm(max_norm);
        }
        self.params.adam_step(&self.hyper.adam)?;
        self.updates += 1;
        if self.updates.is_multiple_of(u64::from(self.hyper.target_sync)) {
            self.target.copy_params_from(&self.params);
        }
        Ok(loss)
    }
}

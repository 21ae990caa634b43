//! Training orchestration for the IGRL and DGRL agents.
//!
//! Each episode runs on one of a pool of random irregular networks with
//! fresh trip demand. All controllers of the network share the agent's
//! parameters and feed one replay pool; ε anneals linearly over the first
//! configured episodes. Training uses clean observations unless the config
//! explicitly injects failures (which is flagged as a protocol deviation).

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::agents::{AgentKind, Trainer, Transition};
use crate::autodiff::Scalar;
use crate::gcnmodel::{Checkpoint, GcnModel};
use crate::obsgraph::{build_state_graph, inject_failures, FailureModel, StateGraph};
use crate::roadnet::{generate_random_network, NodeId, RoadNetwork};
use crate::simcore::{generate_trips, Action, SimState};

use super::config::RunConfig;
use super::{derive_seed, HarnessError};

/// One line of the per-episode training log.
#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRow {
    pub agent: String,
    pub episode: u32,
    pub epsilon: f64,
    pub mean_loss: f64,
    pub mean_reward: f64,
    pub updates: u64,
}

/// Checkpoints and logs produced by one training invocation.
pub struct TrainArtifacts {
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<TrainLogRow>,
}

fn epsilon_at(config: &RunConfig, episode: u32) -> f64 {
    let t = &config.train;
    if t.eps_anneal_episodes == 0 || episode >= t.eps_anneal_episodes {
        return t.eps_end;
    }
    let frac = f64::from(episode) / f64::from(t.eps_anneal_episodes);
    t.eps_start + (t.eps_end - t.eps_start) * frac
}

/// The pool of training networks, derived from the root seed.
pub(crate) fn training_networks(config: &RunConfig) -> Result<Vec<RoadNetwork>, HarnessError> {
    let t = &config.train;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.root_seed, &["train-nets"]));
    (0..t.network_count)
        .map(|idx| {
            let n = rng.random_range(t.network_size_min..=t.network_size_max);
            let seed = derive_seed(config.root_seed, &["train-net", &idx.to_string()]);
            Ok(generate_random_network(seed, n, t.lanes_per_route)?)
        })
        .collect()
}

/// Trains the requested agents sequentially, resuming from the given
/// checkpoints when provided. Returns fresh checkpoints plus the episode
/// log. NaN losses abort with a diagnostic.
pub fn train(
    config: &RunConfig,
    kinds: &[AgentKind],
    resume: &[Option<Checkpoint>],
) -> Result<TrainArtifacts, HarnessError> {
    config.validate()?;
    let networks = training_networks(config)?;
    let model = GcnModel::new(config.model.clone())?;
    let mut checkpoints = Vec::new();
    let mut log = Vec::new();

    for (slot, &kind) in kinds.iter().enumerate() {
        let resume_from = resume.get(slot).and_then(|r| r.as_ref());
        let (params, start_episode) = match resume_from {
            Some(ck) => (ck.restore(&config.model)?, ck.episodes_trained),
            None => {
                let seed = derive_seed(config.root_seed, &["init", kind.name()]);
                (model.init_params(seed), 0)
            }
        };
        let trainer_seed = derive_seed(config.root_seed, &["trainer", kind.name()]);
        let mut trainer = Trainer::from_params(
            kind,
            model.clone(),
            params,
            config.train.hyper.clone(),
            trainer_seed,
        );

        for episode in start_episode..start_episode + config.train.episodes {
            let net = &networks[(episode as usize) % networks.len()];
            let row = run_training_episode(config, &mut trainer, net, episode)?;
            log.push(row);
        }
        checkpoints.push(Checkpoint::new(
            kind.name(),
            &config.model,
            start_episode + config.train.episodes,
            &trainer.params,
        ));
    }
    Ok(TrainArtifacts { checkpoints, log })
}

fn run_training_episode(
    config: &RunConfig,
    trainer: &mut Trainer,
    net: &RoadNetwork,
    episode: u32,
) -> Result<TrainLogRow, HarnessError> {
    let t = &config.train;
    let horizon = t.episode_horizon;
    let kind_name = trainer.kind.name().to_string();
    let trips_seed = derive_seed(
        config.root_seed,
        &["train-trips", &kind_name, &episode.to_string()],
    );
    let schedule = generate_trips(net, t.period, horizon, trips_seed)?;
    let mut state = SimState::new(net, horizon);
    let epsilon = epsilon_at(config, episode);
    let hops = trainer.model.config.layers;
    let failure = if t.missing_probability > 0.0 {
        Some(FailureModel::new(
            t.missing_probability,
            derive_seed(config.root_seed, &["train-fail", &kind_name, &episode.to_string()]),
        )?)
    } else {
        None
    };

    let observe = |state: &SimState| -> (StateGraph, Vec<(Arc<StateGraph>, usize)>) {
        let mut graph = build_state_graph(state, net, hops);
        if let Some(model) = &failure {
            graph = inject_failures(&graph, model);
        }
        let locals: Vec<(Arc<StateGraph>, usize)> = (0..graph.n_tsc())
            .map(|t| {
                let (local, row) = graph.extract_local(t);
                (Arc::new(local), row)
            })
            .collect();
        (graph, locals)
    };

    let (mut graph, mut locals) = observe(&state);
    let mut loss_sum = 0.0;
    let mut loss_count = 0u64;
    let mut reward_sum = 0.0;
    let mut reward_count = 0u64;

    for step in 0..horizon {
        let actions = trainer.act(&graph, epsilon)?;
        let paired: Vec<(NodeId, Action)> = graph
            .tsc_ids
            .iter()
            .zip(actions.iter())
            .map(|(&id, &a)| (NodeId(id), a))
            .collect();
        state.step(net, &schedule, &paired)?;

        let (next_graph, next_locals) = observe(&state);
        let terminal = step + 1 == horizon;
        let transitions: Vec<Transition> = (0..graph.n_tsc())
            .map(|t_idx| {
                let reward = state
                    .reward(net, NodeId(graph.tsc_ids[t_idx]))
                    .expect("tsc exists") as Scalar;
                reward_sum += reward as f64;
                reward_count += 1;
                Transition {
                    graph: Arc::clone(&locals[t_idx].0),
                    tsc_row: locals[t_idx].1,
                    action: actions[t_idx],
                    reward,
                    next_graph: Arc::clone(&next_locals[t_idx].0),
                    next_tsc_row: next_locals[t_idx].1,
                    terminal,
                }
            })
            .collect();
        trainer.observe(transitions);
        match trainer.on_env_step() {
            Ok(Some(loss)) => {
                loss_sum += loss;
                loss_count += 1;
            }
            Ok(None) => {}
            Err(crate::agents::AgentError::Diverged) => {
                return Err(HarnessError::Diverged(format!(
                    "agent {kind_name} episode {episode} step {step}: non-finite loss"
                )));
            }
            Err(e) => return Err(e.into()),
        }
        graph = next_graph;
        locals = next_locals;
    }

    Ok(TrainLogRow {
        agent: kind_name,
        episode,
        epsilon,
        mean_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { 0.0 },
        mean_reward: if reward_count > 0 { reward_sum / reward_count as f64 } else { 0.0 },
        updates: trainer.updates,
    })
}

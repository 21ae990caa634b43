//! Scenario evaluation: frozen policies on paired trip schedules.
//!
//! Every method in a comparison consumes the byte-identical trip schedule
//! for a given (scenario, seed) cell; sensor failures are injected into the
//! observation graph only, so methods that never observe the graph are
//! exactly unaffected. Cells run in parallel; assembly is single-threaded
//! and sorted, so reports are deterministic.

use std::path::PathBuf;

use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::Serialize;

use crate::agents::{
    act_dgrl, act_igrl, act_rglight, baseline_greedy, EnsembleConfig, FixedTimeController,
    TauMode,
};
use crate::autodiff::ParamStore;
use crate::gcnmodel::GcnModel;
use crate::obsgraph::{build_state_graph, inject_failures, FailureModel, StateGraph};
use crate::roadnet::{NodeId, RoadNetwork};
use crate::simcore::{generate_trips, Action, MetricsFrame, SimState, TripSchedule};

use super::config::{Method, RunConfig, ScenarioSpec};
use super::{derive_seed, HarnessError};

/// Trained parameter sets available to the evaluator.
#[derive(Default, Clone)]
pub struct Checkpoints {
    pub igrl: Option<ParamStore>,
    pub dgrl: Option<ParamStore>,
}

impl Checkpoints {
    pub fn require(&self, methods: &[Method]) -> Result<(), HarnessError> {
        for m in methods {
            let ok = match m {
                Method::Igrl => self.igrl.is_some(),
                Method::Dgrl => self.dgrl.is_some(),
                Method::Rglight => self.igrl.is_some() && self.dgrl.is_some(),
                _ => true,
            };
            if !ok {
                return Err(HarnessError::Config(format!(
                    "method {} requires a checkpoint that was not provided",
                    m.name()
                )));
            }
        }
        Ok(())
    }
}

/// A frozen decision rule for evaluation.
pub enum Policy<'a> {
    Fixed(FixedTimeController),
    Greedy,
    Igrl { model: &'a GcnModel, params: &'a ParamStore },
    Dgrl { model: &'a GcnModel, params: &'a ParamStore },
    Rglight {
        model: &'a GcnModel,
        igrl: &'a ParamStore,
        dgrl: &'a ParamStore,
        ensemble: EnsembleConfig,
    },
}

impl Policy<'_> {
    pub fn needs_graph(&self) -> bool {
        !matches!(self, Policy::Fixed(_) | Policy::Greedy)
    }

    pub fn decide(
        &self,
        state: &SimState,
        net: &RoadNetwork,
        graph: Option<&StateGraph>,
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<(NodeId, Action)>, HarnessError> {
        match self {
            Policy::Fixed(controller) => Ok(controller.decide(state, net)),
            Policy::Greedy => Ok(net
                .signalized()
                .into_iter()
                .map(|node| (node, baseline_greedy(state, net, node)))
                .collect()),
            Policy::Igrl { model, params } => {
                let graph = graph.expect("graph built for RL policies");
                let actions = act_igrl(graph, model, params, 0.0, rng)?;
                Ok(pair_actions(graph, actions))
            }
            Policy::Dgrl { model, params } => {
                let graph = graph.expect("graph built for RL policies");
                let actions = act_dgrl(
                    graph,
                    model,
                    params,
                    0.0,
                    model.config.k_eval,
                    TauMode::FixedGrid,
                    rng,
                )?;
                Ok(pair_actions(graph, actions))
            }
            Policy::Rglight { model, igrl, dgrl, ensemble } => {
                let graph = graph.expect("graph built for RL policies");
                let actions = act_rglight(graph, model, igrl, dgrl, ensemble)?;
                Ok(pair_actions(graph, actions))
            }
        }
    }
}

fn pair_actions(graph: &StateGraph, actions: Vec<Action>) -> Vec<(NodeId, Action)> {
    graph
        .tsc_ids
        .iter()
        .zip(actions)
        .map(|(&id, a)| (NodeId(id), a))
        .collect()
}

/// Per-seed aggregates over one run.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SeedRow {
    pub seed: u64,
    pub steps: u64,
    pub tsc_count: u32,
    pub delay_sum: f64,
    pub queue_sum: u64,
    pub travel_time_sum: u64,
    pub arrived: u32,
    pub departed: u64,
    pub switches_requested: u64,
    pub switches_executed: u64,
}

/// Results of one (scenario, method) pair over all paired seeds.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub scenario: String,
    pub method: Method,
    pub missing_probability: f64,
    pub rows: Vec<SeedRow>,
    /// Per-step delay averaged over seeds (for evolution plots).
    pub delay_per_step: Vec<f64>,
}

impl EvalRecord {
    pub fn mean_delay_sum(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.delay_sum))
    }

    pub fn std_delay_sum(&self) -> f64 {
        std_dev(self.rows.iter().map(|r| r.delay_sum))
    }

    pub fn mean_queue_sum(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.queue_sum as f64))
    }

    pub fn std_queue_sum(&self) -> f64 {
        std_dev(self.rows.iter().map(|r| r.queue_sum as f64))
    }

    pub fn mean_travel_time_sum(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.travel_time_sum as f64))
    }

    pub fn std_travel_time_sum(&self) -> f64 {
        std_dev(self.rows.iter().map(|r| r.travel_time_sum as f64))
    }

    /// Mean delay per step (the generalization-matrix statistic).
    pub fn mean_step_delay(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.delay_sum / r.steps.max(1) as f64))
    }

    /// Mean per-step fraction of controllers requesting a switch.
    pub fn switch_rate_requested(&self) -> f64 {
        mean(self.rows.iter().map(|r| {
            r.switches_requested as f64 / (r.steps.max(1) as f64 * f64::from(r.tsc_count.max(1)))
        }))
    }

    /// Mean per-step fraction of controllers executing a switch.
    pub fn switch_rate_executed(&self) -> f64 {
        mean(self.rows.iter().map(|r| {
            r.switches_executed as f64 / (r.steps.max(1) as f64 * f64::from(r.tsc_count.max(1)))
        }))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Per-run options beyond the scenario itself.
#[derive(Default, Clone)]
pub struct RunOptions {
    /// Dump the observation graph as JSON every N steps into the directory.
    pub dump_graph_every: Option<(u64, PathBuf)>,
    /// Keep the full per-step metrics stream in memory.
    pub collect_frames: bool,
}

/// Runs one policy for `horizon` steps on a prepared schedule. Returns the
/// aggregate row, the per-step delay curve, and (optionally) all frames.
pub fn run_scenario_seed(
    net: &RoadNetwork,
    schedule: &TripSchedule,
    policy: &Policy,
    horizon: u64,
    failure: Option<&FailureModel>,
    hops: usize,
    rng_seed: u64,
    options: &RunOptions,
) -> Result<(SeedRow, Vec<f64>, Vec<MetricsFrame>), HarnessError> {
    let mut state = SimState::new(net, horizon);
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let mut delay_curve = Vec::with_capacity(horizon as usize);
    let mut frames = Vec::new();
    let mut row = SeedRow {
        seed: 0,
        steps: horizon,
        tsc_count: net.signalized().len() as u32,
        delay_sum: 0.0,
        queue_sum: 0,
        travel_time_sum: 0,
        arrived: 0,
        departed: 0,
        switches_requested: 0,
        switches_executed: 0,
    };

    for step in 0..horizon {
        let graph = if policy.needs_graph() {
            let mut g = build_state_graph(&state, net, hops);
            if let Some(model) = failure {
                if model.missing_probability > 0.0 {
                    g = inject_failures(&g, model);
                }
            }
            Some(g)
        } else {
            None
        };
        if let (Some((every, dir)), Some(g)) = (&options.dump_graph_every, graph.as_ref()) {
            if *every > 0 && step % *every == 0 {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("step_{step:06}.json"));
                std::fs::write(path, serde_json::to_string(g).expect("graph serializes"))?;
            }
        }
        let actions = policy.decide(&state, net, graph.as_ref(), &mut rng)?;
        let frame = state.step(net, schedule, &actions)?;
        row.delay_sum += frame.delay;
        row.queue_sum += u64::from(frame.queue_sum);
        row.switches_requested += u64::from(frame.switches_requested);
        row.switches_executed += u64::from(frame.switches_executed);
        row.arrived += frame.arrivals;
        delay_curve.push(frame.delay);
        if options.collect_frames {
            frames.push(frame);
        }
    }
    row.departed = state.departed_total();
    row.travel_time_sum = state.travel_times().iter().map(|(_, t)| t).sum();
    Ok((row, delay_curve, frames))
}

/// Evaluates the given methods on every scenario with paired seeds.
///
/// For each (scenario, seed) cell the network and trip schedule are built
/// once and consumed by every method; RL policies run frozen (ε = 0, fixed
/// quantile grid).
pub fn evaluate(
    config: &RunConfig,
    scenarios: &[ScenarioSpec],
    methods: &[Method],
    checkpoints: &Checkpoints,
) -> Result<Vec<EvalRecord>, HarnessError> {
    checkpoints.require(methods)?;
    if scenarios.is_empty() || methods.is_empty() {
        return Err(HarnessError::Config("nothing to evaluate".into()));
    }
    let model = GcnModel::new(config.model.clone()).map_err(HarnessError::Model)?;

    let mut cells: Vec<(usize, usize)> = Vec::new();
    for (s_idx, spec) in scenarios.iter().enumerate() {
        for seed_idx in 0..spec.seeds.len() {
            cells.push((s_idx, seed_idx));
        }
    }

    let run_cell = |&(s_idx, seed_idx): &(usize, usize)| -> Result<
        Vec<(usize, Method, SeedRow, Vec<f64>)>,
        HarnessError,
    > {
        let spec = &scenarios[s_idx];
        let seed = spec.seeds[seed_idx];
        let net = spec.network.build()?;
        let pairing = spec.pairing_key();
        let trips_seed = derive_seed(config.root_seed, &["trips", &pairing, &seed.to_string()]);
        let schedule = generate_trips(&net, spec.period, spec.horizon, trips_seed)?;
        let failure = FailureModel::new(
            spec.missing_probability,
            derive_seed(config.root_seed, &["fail", &pairing, &seed.to_string()]),
        )?;
        let mut out = Vec::with_capacity(methods.len());
        for &method in methods {
            let policy = build_policy(method, &model, checkpoints, config)?;
            let act_seed =
                derive_seed(config.root_seed, &["act", &pairing, &seed.to_string(), method.name()]);
            let (mut row, curve, _) = run_scenario_seed(
                &net,
                &schedule,
                &policy,
                spec.horizon,
                Some(&failure),
                model.config.layers,
                act_seed,
                &RunOptions::default(),
            )?;
            row.seed = seed;
            out.push((s_idx, method, row, curve));
        }
        Ok(out)
    };

    let results: Result<Vec<_>, HarnessError> = if config.workers == 1 {
        cells.iter().map(run_cell).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        pool.install(|| cells.par_iter().map(run_cell).collect())
    };

    // Deterministic assembly: sort by (scenario, method, seed).
    let mut records: Vec<EvalRecord> = Vec::new();
    for spec in scenarios {
        for &method in methods {
            records.push(EvalRecord {
                scenario: spec.key.clone(),
                method,
                missing_probability: spec.missing_probability,
                rows: Vec::new(),
                delay_per_step: vec![0.0; spec.horizon as usize],
            });
        }
    }
    let index_of = |s_idx: usize, method: Method| -> usize {
        s_idx * methods.len() + methods.iter().position(|&m| m == method).unwrap()
    };
    for cell in results? {
        for (s_idx, method, row, curve) in cell {
            let record = &mut records[index_of(s_idx, method)];
            record.rows.push(row);
            for (acc, d) in record.delay_per_step.iter_mut().zip(curve) {
                *acc += d;
            }
        }
    }
    for record in &mut records {
        record.rows.sort_by_key(|r| r.seed);
        let n = record.rows.len().max(1) as f64;
        for d in &mut record.delay_per_step {
            *d /= n;
        }
    }
    Ok(records)
}

/// Builds the frozen policy for a method from the available checkpoints.
pub fn build_policy<'a>(
    method: Method,
    model: &'a GcnModel,
    checkpoints: &'a Checkpoints,
    config: &RunConfig,
) -> Result<Policy<'a>, HarnessError> {
    Ok(match method {
        Method::Fixed => {
            // Validation happens per network inside the controller; the
            // configured duration is shared by every scenario.
            Policy::Fixed(FixedTimeController { green_duration: config.eval.green_duration })
        }
        Method::Greedy => Policy::Greedy,
        Method::Igrl => Policy::Igrl {
            model,
            params: checkpoints.igrl.as_ref().expect("checked by require"),
        },
        Method::Dgrl => Policy::Dgrl {
            model,
            params: checkpoints.dgrl.as_ref().expect("checked by require"),
        },
        Method::Rglight => Policy::Rglight {
            model,
            igrl: checkpoints.igrl.as_ref().expect("checked by require"),
            dgrl: checkpoints.dgrl.as_ref().expect("checked by require"),
            ensemble: config.ensemble,
        },
    })
}

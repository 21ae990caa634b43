//! Trip demand generation.
//!
//! Departures per step are binomial draws with mean `1/period` vehicles per
//! second. Origin and destination weights over the network's source and
//! sink lanes are resampled every 120 seconds, so both the demand level and
//! the spatial distribution vary over a run. Routes are shortest paths by
//! lane length. Deterministic for a fixed seed.

use std::collections::{BTreeMap, BinaryHeap};

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::VehicleId;
use crate::roadnet::{LaneId, RoadNetwork};

/// Seconds between origin-destination weight resamples.
pub const REGIME_BLOCK_SECONDS: u64 = 120;

#[derive(Debug, Error)]
pub enum TripGenError {
    #[error("period must be positive, got {0}")]
    NonPositivePeriod(f64),
    #[error("horizon must be at least 1 step")]
    EmptyHorizon,
}

/// One scheduled departure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trip {
    pub vehicle: VehicleId,
    /// Scheduled departure step.
    pub depart_step: u64,
    /// Connected lane sequence from a source lane to a sink lane.
    pub route: Vec<LaneId>,
    pub max_speed: f64,
}

/// Origin/destination weights for one 120 s regime block, aligned with the
/// network's sorted source and sink lane lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdWeights {
    pub origins: Vec<f64>,
    pub destinations: Vec<f64>,
}

/// Full demand schedule for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripSchedule {
    pub period: f64,
    pub horizon: u64,
    /// Departures per step; index = step.
    trips_by_step: Vec<Vec<Trip>>,
    /// One entry per 120 s block.
    od_blocks: Vec<OdWeights>,
}

impl TripSchedule {
    pub fn trips_at(&self, step: u64) -> &[Trip] {
        self.trips_by_step
            .get(step as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn total_trips(&self) -> usize {
        self.trips_by_step.iter().map(Vec::len).sum()
    }

    /// The weight block in effect at the given step.
    pub fn od_weights_at(&self, step: u64) -> &OdWeights {
        &self.od_blocks[(step / REGIME_BLOCK_SECONDS) as usize]
    }

    /// Canonical serialization used by the paired-seed fairness checks.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("schedule serialization cannot fail")
    }
}

/// Binomial trial count and success probability giving mean `1/period`
/// departures per second with `p <= 0.5`.
fn binomial_params(period: f64) -> (u64, f64) {
    let n = (2.0 / period).ceil().max(1.0) as u64;
    (n, 1.0 / (period * n as f64))
}

/// Generates the demand schedule for `horizon` steps at arrival rate
/// `1/period` vehicles per second.
pub fn generate_trips(
    net: &RoadNetwork,
    period: f64,
    horizon: u64,
    seed: u64,
) -> Result<TripSchedule, TripGenError> {
    if period <= 0.0 {
        return Err(TripGenError::NonPositivePeriod(period));
    }
    if horizon == 0 {
        return Err(TripGenError::EmptyHorizon);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (n, p) = binomial_params(period);
    let binomial = Binomial::new(n, p).expect("valid binomial parameters");

    let sources = net.source_lanes();
    let sinks = net.sink_lanes();
    let router = Router::new(net);

    let blocks = horizon.div_ceil(REGIME_BLOCK_SECONDS) as usize;
    let od_blocks: Vec<OdWeights> = (0..blocks)
        .map(|_| OdWeights {
            origins: (0..sources.len()).map(|_| rng.random_range(0.05..1.0)).collect(),
            destinations: (0..sinks.len()).map(|_| rng.random_range(0.05..1.0)).collect(),
        })
        .collect();

    let mut trips_by_step = Vec::with_capacity(horizon as usize);
    let mut next_id = 0u64;
    for step in 0..horizon {
        let weights = &od_blocks[(step / REGIME_BLOCK_SECONDS) as usize];
        let count = binomial.sample(&mut rng);
        let mut trips = Vec::with_capacity(count as usize);
        for _ in 0..count {
            // Redraw on unreachable pairs (e.g. a sink behind the origin's
            // own terminal); skip the trip if none is found.
            let mut found = None;
            for _ in 0..20 {
                let origin = sources[weighted_pick(&mut rng, &weights.origins)];
                let dest = sinks[weighted_pick(&mut rng, &weights.destinations)];
                if let Some(route) = router.route(origin, dest) {
                    found = Some(route);
                    break;
                }
            }
            if let Some(route) = found {
                trips.push(Trip {
                    vehicle: VehicleId(next_id),
                    depart_step: step,
                    route,
                    max_speed: crate::roadnet::DEFAULT_SPEED_LIMIT,
                });
                next_id += 1;
            }
        }
        trips_by_step.push(trips);
    }

    Ok(TripSchedule { period, horizon, trips_by_step, od_blocks })
}

fn weighted_pick(rng: &mut ChaCha12Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.random::<f64>() * total;
    for (idx, w) in weights.iter().enumerate() {
        target -= w;
        if target <= 0.0 {
            return idx;
        }
    }
    weights.len() - 1
}

/// Shortest-path routing over the lane graph, one Dijkstra tree per source
/// lane, cached. Costs are lane lengths in millimeters so ties resolve
/// deterministically by lane id.
struct Router<'a> {
    net: &'a RoadNetwork,
    trees: std::cell::RefCell<BTreeMap<LaneId, Vec<Option<LaneId>>>>,
}

impl<'a> Router<'a> {
    fn new(net: &'a RoadNetwork) -> Self {
        Self { net, trees: std::cell::RefCell::new(BTreeMap::new()) }
    }

    fn route(&self, from: LaneId, to: LaneId) -> Option<Vec<LaneId>> {
        {
            let mut trees = self.trees.borrow_mut();
            trees
                .entry(from)
                .or_insert_with(|| self.shortest_tree(from));
        }
        let trees = self.trees.borrow();
        let prev = &trees[&from];
        prev[to.index()]?;
        let mut route = vec![to];
        let mut cur = to;
        while cur != from {
            let p = prev[cur.index()].expect("reached lanes have predecessors");
            route.push(p);
            if p == from {
                break;
            }
            cur = p;
        }
        route.reverse();
        Some(route)
    }

    fn shortest_tree(&self, from: LaneId) -> Vec<Option<LaneId>> {
        let n = self.net.lanes.len();
        let mut dist: Vec<u64> = vec![u64::MAX; n];
        let mut prev: Vec<Option<LaneId>> = vec![None; n];
        let mut heap: BinaryHeap<std::cmp::Reverse<(u64, u32)>> = BinaryHeap::new();
        let start_cost = (self.net.lane(from).length * 1000.0) as u64;
        dist[from.index()] = start_cost;
        prev[from.index()] = Some(from);
        heap.push(std::cmp::Reverse((start_cost, from.0)));
        while let Some(std::cmp::Reverse((d, lane))) = heap.pop() {
            let lane = LaneId(lane);
            if d > dist[lane.index()] {
                continue;
            }
            for conn in &self.net.lane(lane).successors {
                let next = self.net.connection(*conn).to_lane;
                let cost = d + (self.net.lane(next).length * 1000.0) as u64;
                if cost < dist[next.index()] {
                    dist[next.index()] = cost;
                    prev[next.index()] = Some(lane);
                    heap.push(std::cmp::Reverse((cost, next.0)));
                }
            }
        }
        prev
    }
}

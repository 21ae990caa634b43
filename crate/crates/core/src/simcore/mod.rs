//! Discrete-time microscopic traffic simulation, one second per step.
//!
//! Vehicles follow a simplified Krauss-style update: the speed chosen each
//! step is the minimum of acceleration-limited, vehicle, lane, and safety
//! speeds, where the safety speed guarantees the vehicle can come to rest
//! behind its leader (or a closed stop line) braking no harder than `b`.
//! Vehicles cross an intersection only when the connection is open and the
//! whole crossing completes within the step, so red-light compliance and
//! same-lane ordering hold by construction. There is no dawdling noise;
//! the simulation is fully deterministic.

mod trips;

pub use trips::{generate_trips, Trip, TripGenError, TripSchedule};

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roadnet::{ConnectionId, LaneId, NodeId, RoadNetwork};

/// Maximum acceleration, m/s².
pub const ACCEL: f64 = 2.6;
/// Comfortable/maximum deceleration assumed by the safety rule, m/s².
pub const DECEL: f64 = 4.5;
/// Space one vehicle occupies: length plus minimal standstill gap, meters.
pub const VEHICLE_SPACE: f64 = 7.5;
/// Vehicles slower than this count as standing when measuring queues, m/s.
pub const STANDING_SPEED: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("action for unknown or non-signalized intersection {0:?}")]
    UnknownTsc(NodeId),
    #[error("duplicate action for intersection {0:?}")]
    DuplicateAction(NodeId),
    #[error("missing action for intersection {0:?}")]
    MissingAction(NodeId),
    #[error("step at clock {clock} would exceed horizon {horizon}")]
    HorizonExceeded { clock: u64, horizon: u64 },
}

/// The binary signal action: keep the current phase or advance the cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Prolong,
    Switch,
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Prolong => 0,
            Action::Switch => 1,
        }
    }

    pub fn from_index(idx: usize) -> Action {
        if idx == 1 {
            Action::Switch
        } else {
            Action::Prolong
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u64);

#[derive(Debug, Clone)]
pub struct Vehicle {
    pub id: VehicleId,
    pub route: Arc<Vec<LaneId>>,
    /// Index of the current lane within the route.
    pub route_pos: usize,
    /// Front-bumper position, meters from the lane start.
    pub lane_position: f64,
    pub speed: f64,
    /// Clock value at which the vehicle entered the network.
    pub depart_step: u64,
    /// Vehicle-type maximum speed, m/s.
    pub max_speed: f64,
}

impl Vehicle {
    pub fn current_lane(&self) -> LaneId {
        self.route[self.route_pos]
    }
}

/// Per-intersection signal execution state.
#[derive(Debug, Clone)]
pub struct SignalRuntime {
    pub node: NodeId,
    pub phase_index: usize,
    /// Clock value at which the current phase was entered.
    pub phase_entry_step: u64,
    /// Clock value of the most recent executed switch (0 if none yet).
    pub last_switch_step: u64,
}

/// Record of a completed trip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Arrival {
    pub vehicle: VehicleId,
    pub depart_step: u64,
    pub arrival_step: u64,
}

/// Per-step metrics extracted while stepping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsFrame {
    pub step: u64,
    /// Total delay over in-network vehicles.
    pub delay: f64,
    /// Queue length per (intersection, inbound lane).
    pub queues: BTreeMap<(u32, u32), u32>,
    pub queue_sum: u32,
    /// Switches requested by the actions this step.
    pub switches_requested: u32,
    /// Switches actually executed (requests before min green are masked to
    /// prolong and only counted here when honored).
    pub switches_executed: u32,
    pub arrivals: u32,
    pub departures: u32,
    pub vehicles_in_network: u32,
}

/// Dynamic world state.
pub struct SimState {
    pub clock: u64,
    pub horizon: u64,
    vehicles: BTreeMap<VehicleId, Vehicle>,
    /// Occupancy per lane, ordered front (largest position) first.
    lane_order: Vec<Vec<VehicleId>>,
    signals: Vec<SignalRuntime>,
    signal_index: BTreeMap<u32, usize>,
    pending: BTreeMap<LaneId, VecDeque<Trip>>,
    arrived: Vec<Arrival>,
    departed_total: u64,
}

impl SimState {
    pub fn new(net: &RoadNetwork, horizon: u64) -> Self {
        let signals: Vec<SignalRuntime> = net
            .signalized()
            .into_iter()
            .map(|node| SignalRuntime {
                node,
                phase_index: 0,
                phase_entry_step: 0,
                last_switch_step: 0,
            })
            .collect();
        let signal_index = signals
            .iter()
            .enumerate()
            .map(|(idx, s)| (s.node.0, idx))
            .collect();
        Self {
            clock: 0,
            horizon,
            vehicles: BTreeMap::new(),
            lane_order: vec![Vec::new(); net.lanes.len()],
            signals,
            signal_index,
            pending: BTreeMap::new(),
            arrived: Vec::new(),
            departed_total: 0,
        }
    }

    pub fn vehicles(&self) -> impl Iterator<Item = &Vehicle> {
        self.vehicles.values()
    }

    pub fn vehicle(&self, id: VehicleId) -> Option<&Vehicle> {
        self.vehicles.get(&id)
    }

    /// Vehicles on the lane, front (closest to the lane end) first.
    pub fn lane_vehicles(&self, lane: LaneId) -> &[VehicleId] {
        &self.lane_order[lane.index()]
    }

    pub fn signals(&self) -> &[SignalRuntime] {
        &self.signals
    }

    pub fn signal(&self, node: NodeId) -> Option<&SignalRuntime> {
        self.signal_index.get(&node.0).map(|&i| &self.signals[i])
    }

    /// Completed seconds in the current phase.
    pub fn seconds_in_phase(&self, node: NodeId) -> Option<u64> {
        self.signal(node).map(|s| self.clock - s.phase_entry_step)
    }

    pub fn arrived(&self) -> &[Arrival] {
        &self.arrived
    }

    pub fn departed_total(&self) -> u64 {
        self.departed_total
    }

    pub fn in_network_count(&self) -> u64 {
        self.vehicles.len() as u64
    }

    /// Vehicle conservation: departed equals in-network plus arrived.
    pub fn conservation_holds(&self) -> bool {
        self.departed_total == self.in_network_count() + self.arrived.len() as u64
    }

    /// Whether the connection is open under the current phase.
    pub fn connection_open(&self, net: &RoadNetwork, conn: ConnectionId) -> bool {
        let c = net.connection(conn);
        let Some(signal) = self.signal(c.intersection) else {
            // Unsignalized junction: always passable.
            return true;
        };
        let program = net.program(c.intersection).expect("validated network");
        program.phases[signal.phase_index]
            .entry(conn)
            .is_some_and(|e| e.open)
    }

    /// One simulation second. Requires exactly one action per signalized
    /// intersection.
    pub fn step(
        &mut self,
        net: &RoadNetwork,
        schedule: &TripSchedule,
        actions: &[(NodeId, Action)],
    ) -> Result<MetricsFrame, SimError> {
        if self.clock >= self.horizon {
            return Err(SimError::HorizonExceeded { clock: self.clock, horizon: self.horizon });
        }
        let mut chosen: BTreeMap<u32, Action> = BTreeMap::new();
        for (node, action) in actions {
            if !self.signal_index.contains_key(&node.0) {
                return Err(SimError::UnknownTsc(*node));
            }
            if chosen.insert(node.0, *action).is_some() {
                return Err(SimError::DuplicateAction(*node));
            }
        }
        for s in &self.signals {
            if !chosen.contains_key(&s.node.0) {
                return Err(SimError::MissingAction(s.node));
            }
        }

        // 1. Signals. A switch before the phase's minimum duration is
        //    masked: it executes as a prolong and is reported as requested
        //    but not executed.
        let mut requested = 0u32;
        let mut executed = 0u32;
        for s in &mut self.signals {
            let program = net.program(s.node).expect("validated network");
            let action = chosen[&s.node.0];
            if action == Action::Switch {
                requested += 1;
                let in_phase = self.clock - s.phase_entry_step;
                if in_phase >= u64::from(program.phases[s.phase_index].min_duration) {
                    s.phase_index = program.next_index(s.phase_index);
                    s.phase_entry_step = self.clock;
                    s.last_switch_step = self.clock;
                    executed += 1;
                }
            }
        }

        // 2. Plan speeds from a snapshot of the current state, claiming
        //    junction entries in deterministic lane order so that two
        //    vehicles never cross into the same spot.
        let plans = self.plan_moves(net);

        // 3. Apply moves, handling lane changes at junctions and arrivals.
        let arrivals = self.apply_moves(net, plans);

        // 4. Release scheduled departures when there is room.
        let departures = self.insert_pending(net, schedule);

        self.clock += 1;

        // 5. Metrics for this step.
        let queues = self.compute_queues(net);
        let queue_sum = queues.values().sum();
        Ok(MetricsFrame {
            step: self.clock - 1,
            delay: self.compute_delay(net),
            queues,
            queue_sum,
            switches_requested: requested,
            switches_executed: executed,
            arrivals,
            departures,
            vehicles_in_network: self.vehicles.len() as u32,
        })
    }

    /// Margin around the standing floor when crediting another vehicle's
    /// travel. Accumulated position rounding can push a braking step one
    /// ULP below the floor, zeroing it; steps this close to the floor are
    /// never credited.
    const FLOOR_MARGIN: f64 = 1e-6;

    /// Worst-case future travel of a braking leader: `Σ_{k≥1} max(0,
    /// v − k·DECEL)`, minus a final step at or below the standing floor
    /// (the leader parks instead of taking it), capped by `travel_cap`
    /// (a leader never passes its stop line without crossing).
    fn leader_credit(leader_speed: f64, travel_cap: f64) -> f64 {
        let b = DECEL;
        let steps = (leader_speed / b).floor();
        let mut travel = steps * leader_speed - b * steps * (steps + 1.0) / 2.0;
        let final_step = leader_speed - steps * b;
        if final_step < STANDING_SPEED + Self::FLOOR_MARGIN {
            travel = (travel - final_step).max(0.0);
        }
        travel.min(travel_cap.max(0.0))
    }

    /// Krauss safe speed in discrete time: the fastest speed `v` such that
    /// the follower, moving `v` this step and braking at `DECEL` afterward,
    /// stays behind a leader that brakes at `DECEL` starting this step and
    /// travels at most `travel_cap`.
    ///
    /// With braking travel `T(v) = Σ_k max(0, v − k·DECEL)` (k ≥ 0 for the
    /// follower, k ≥ 1 for the leader) the condition is
    /// `T_f(v) ≤ gap + credit`, solved exactly per linear branch of the
    /// piecewise-quadratic `T_f`.
    fn safe_speed(gap: f64, leader_speed: f64, travel_cap: f64) -> f64 {
        let budget = gap + Self::leader_credit(leader_speed, travel_cap);
        if budget <= 0.0 {
            return 0.0;
        }
        let b = DECEL;
        // T_f equals its continuous relaxation at multiples of b and lies
        // above it between them, so the true branch index matches the
        // relaxed solution's.
        let relaxed = -b / 2.0 + (b * b / 4.0 + 2.0 * b * budget).sqrt();
        let m0 = (relaxed / b).floor().max(0.0) as i64;
        let mut best = 0.0f64;
        for m in m0.saturating_sub(1)..=m0 + 1 {
            let m = m as f64;
            if m < 0.0 {
                continue;
            }
            let v = budget / (m + 1.0) + b * m / 2.0;
            if v >= m * b - 1e-9 && v <= (m + 1.0) * b + 1e-9 {
                best = best.max(v.min((m + 1.0) * b));
            }
        }
        best.max(0.0)
    }

    /// Worst-case distance a leader advances within the current step
    /// (braking hard, parking below the standing floor).
    fn leader_first_move(leader_speed: f64) -> f64 {
        let braked = (leader_speed - DECEL).max(0.0);
        if braked < STANDING_SPEED + Self::FLOOR_MARGIN {
            0.0
        } else {
            braked
        }
    }

    fn plan_moves(&self, net: &RoadNetwork) -> Vec<(VehicleId, f64, bool)> {
        // Snapshot: (position, speed) per vehicle as of the step start.
        let snapshot: BTreeMap<VehicleId, (f64, f64)> = self
            .vehicles
            .iter()
            .map(|(&id, v)| (id, (v.lane_position, v.speed)))
            .collect();
        // Claimed entry per target lane: (position, planned speed) of the
        // most recent claimant, used as a virtual leader for later ones.
        let mut claims: BTreeMap<LaneId, (f64, f64)> = BTreeMap::new();
        let mut plans: Vec<(VehicleId, f64, bool)> = Vec::with_capacity(self.vehicles.len());

        for (lane_idx, order) in self.lane_order.iter().enumerate() {
            let lane = &net.lanes[lane_idx];
            for (rank, &vid) in order.iter().enumerate() {
                let vehicle = &self.vehicles[&vid];
                let (pos, speed) = snapshot[&vid];
                let mut v_new = (speed + ACCEL).min(vehicle.max_speed).min(lane.speed_limit);
                let to_end = lane.length - pos;
                let last_lane = vehicle.route_pos + 1 >= vehicle.route.len();
                let mut crossed = false;

                if rank > 0 {
                    let (lead_pos, lead_speed) = snapshot[&order[rank - 1]];
                    let gap = lead_pos - VEHICLE_SPACE - pos;
                    // The leader never travels beyond its stop line without
                    // vacating the lane, so cap the credited travel there.
                    v_new = v_new.min(Self::safe_speed(gap, lead_speed, lane.length - lead_pos));
                } else if !last_lane {
                    // Front vehicle: try to cross the lane end this step.
                    let next_lane = vehicle.route[vehicle.route_pos + 1];
                    let conn = connection_for(net, lane.id, next_lane);
                    let open = conn.is_some_and(|c| self.connection_open(net, c));
                    if open {
                        let next_len = net.lane(next_lane).length;
                        let mut v_go = v_new;
                        // Virtual leaders on the target lane: its rearmost
                        // occupant (start-of-step snapshot) and any earlier
                        // claimant this step. A claim stores an end-of-step
                        // position, so its gap also caps this step's travel
                        // directly; for the occupant the direct cap uses
                        // its worst-case move within this step.
                        if let Some((o_pos, o_speed)) =
                            self.lane_order[next_lane.index()].last().map(|id| snapshot[id])
                        {
                            let gap = to_end + o_pos - VEHICLE_SPACE;
                            v_go = v_go
                                .min(Self::safe_speed(gap, o_speed, next_len - o_pos))
                                .min((gap + Self::leader_first_move(o_speed)).max(0.0));
                        }
                        if let Some((c_pos, c_speed)) = claims.get(&next_lane).copied() {
                            let gap = to_end + c_pos - VEHICLE_SPACE;
                            v_go = v_go
                                .min(gap.max(0.0))
                                .min(Self::safe_speed(gap, c_speed, next_len - c_pos));
                        }
                        if v_go < STANDING_SPEED {
                            v_go = 0.0;
                        }
                        // Cross only when the whole crossing fits in this
                        // step; otherwise fall back to the stop-line
                        // envelope, which past steps kept satisfiable with
                        // ordinary braking.
                        if v_go > to_end {
                            claims.insert(next_lane, (v_go - to_end, v_go));
                            v_new = v_go;
                            crossed = true;
                        }
                    }
                }
                if !crossed && !last_lane {
                    v_new = v_new.min(Self::safe_speed(to_end, 0.0, f64::INFINITY));
                }
                let mut v_new = v_new.max(0.0);
                // Sub-crawl speeds park the vehicle; standing queues stay
                // standing instead of creeping by millimeters.
                if v_new < STANDING_SPEED {
                    v_new = 0.0;
                }
                plans.push((vid, v_new, crossed || (last_lane && rank == 0)));
            }
        }
        plans
    }

    fn apply_moves(&mut self, net: &RoadNetwork, plans: Vec<(VehicleId, f64, bool)>) -> u32 {
        let mut arrivals = 0u32;
        let mut crossings: Vec<(VehicleId, LaneId, f64)> = Vec::new();
        let mut done: Vec<VehicleId> = Vec::new();

        for (vid, v_new, may_exit) in plans {
            let vehicle = self.vehicles.get_mut(&vid).expect("planned vehicle exists");
            let lane_len = net.lane(vehicle.current_lane()).length;
            let new_pos = vehicle.lane_position + v_new;
            vehicle.speed = v_new;
            // Only moves the planner marked as exits may leave the lane;
            // rounding in an exact-to-the-line stop must not cross.
            if may_exit && new_pos > lane_len {
                if vehicle.route_pos + 1 >= vehicle.route.len() {
                    done.push(vid);
                } else {
                    crossings.push((vid, vehicle.route[vehicle.route_pos + 1], new_pos - lane_len));
                }
            } else {
                vehicle.lane_position = new_pos.min(lane_len);
            }
        }

        for vid in done {
            let vehicle = self.vehicles.remove(&vid).expect("arriving vehicle");
            let lane = vehicle.current_lane();
            remove_from_lane(&mut self.lane_order[lane.index()], vid);
            self.arrived.push(Arrival {
                vehicle: vid,
                depart_step: vehicle.depart_step,
                arrival_step: self.clock + 1,
            });
            arrivals += 1;
        }

        // Crossings in deterministic order (planning already reserved the
        // space, so appends keep each lane sorted front-first).
        crossings.sort_by_key(|(vid, _, _)| *vid);
        for (vid, next_lane, overflow) in crossings {
            let vehicle = self.vehicles.get_mut(&vid).expect("crossing vehicle");
            let old_lane = vehicle.current_lane();
            remove_from_lane(&mut self.lane_order[old_lane.index()], vid);
            vehicle.route_pos += 1;
            vehicle.lane_position = overflow;
            self.lane_order[next_lane.index()].push(vid);
            self.lane_order[next_lane.index()]
                .sort_by(|a, b| position_desc(&self.vehicles, *a, *b));
        }
        arrivals
    }

    fn insert_pending(&mut self, net: &RoadNetwork, schedule: &TripSchedule) -> u32 {
        for trip in schedule.trips_at(self.clock) {
            self.pending
                .entry(trip.route[0])
                .or_default()
                .push_back(trip.clone());
        }
        let mut inserted = 0u32;
        for (lane, queue) in self.pending.iter_mut() {
            loop {
                if queue.front().is_none() {
                    break;
                }
                let room = match self.lane_order[lane.index()].last() {
                    Some(last) => self.vehicles[last].lane_position >= VEHICLE_SPACE,
                    None => net.lane(*lane).length >= VEHICLE_SPACE,
                };
                if !room {
                    break;
                }
                let trip = queue.pop_front().expect("checked front");
                let vid = trip.vehicle;
                self.vehicles.insert(
                    vid,
                    Vehicle {
                        id: vid,
                        route: Arc::new(trip.route),
                        route_pos: 0,
                        lane_position: 0.0,
                        speed: 0.0,
                        depart_step: self.clock + 1,
                        max_speed: trip.max_speed,
                    },
                );
                self.lane_order[lane.index()].push(vid);
                self.departed_total += 1;
                inserted += 1;
            }
        }
        inserted
    }

    /// Total delay: per in-network vehicle, the relative shortfall from its
    /// maximum theoretically reachable speed `min(vehicle max, lane limit)`.
    pub fn compute_delay(&self, net: &RoadNetwork) -> f64 {
        self.vehicles
            .values()
            .map(|v| {
                let limit = net.lane(v.current_lane()).speed_limit;
                per_vehicle_delay(v.max_speed, limit, v.speed)
            })
            .sum()
    }

    /// Queue length per (intersection, inbound lane): standing vehicles
    /// (speed below [`STANDING_SPEED`]) contiguous from the stop line — the
    /// run ends at the first moving vehicle or spatial break — capped at
    /// the lane's vehicle capacity.
    pub fn compute_queues(&self, net: &RoadNetwork) -> BTreeMap<(u32, u32), u32> {
        // Standing vehicles park within centimeters of their envelope, so
        // one meter of slack separates a queue from a lone stopped vehicle.
        const QUEUE_SLACK: f64 = 1.0;
        let mut queues = BTreeMap::new();
        for signal in &self.signals {
            for lane in net.inbound_lanes(signal.node) {
                let mut q = 0u32;
                let mut expected = net.lane(lane).length;
                for vid in &self.lane_order[lane.index()] {
                    let v = &self.vehicles[vid];
                    if v.speed < STANDING_SPEED && expected - v.lane_position <= QUEUE_SLACK {
                        q += 1;
                        expected = v.lane_position - VEHICLE_SPACE;
                    } else {
                        break;
                    }
                }
                let capacity = (net.lane(lane).length / VEHICLE_SPACE).floor() as u32;
                queues.insert((signal.node.0, lane.0), q.min(capacity.max(1)));
            }
        }
        queues
    }

    /// Reward for one controller: negative sum of its inbound queue lengths.
    pub fn reward(&self, net: &RoadNetwork, tsc: NodeId) -> Result<f64, SimError> {
        if self.signal(tsc).is_none() {
            return Err(SimError::UnknownTsc(tsc));
        }
        let queues = self.compute_queues(net);
        Ok(-f64::from(
            queues
                .iter()
                .filter(|((node, _), _)| *node == tsc.0)
                .map(|(_, q)| *q)
                .sum::<u32>(),
        ))
    }

    /// Travel time per arrived vehicle (arrival minus departure, seconds).
    pub fn travel_times(&self) -> Vec<(VehicleId, u64)> {
        self.arrived
            .iter()
            .map(|a| (a.vehicle, a.arrival_step - a.depart_step))
            .collect()
    }

    /// Stopped and moving vehicle counts over the intersection's inbound
    /// lanes (used by the greedy baseline).
    pub fn stopped_and_moving(&self, net: &RoadNetwork, tsc: NodeId) -> (u32, u32) {
        let mut stopped = 0;
        let mut moving = 0;
        for lane in net.inbound_lanes(tsc) {
            for vid in &self.lane_order[lane.index()] {
                if self.vehicles[vid].speed < STANDING_SPEED {
                    stopped += 1;
                } else {
                    moving += 1;
                }
            }
        }
        (stopped, moving)
    }

    /// Test support: place a vehicle directly onto a lane.
    pub fn spawn_vehicle(
        &mut self,
        net: &RoadNetwork,
        route: Vec<LaneId>,
        route_pos: usize,
        lane_position: f64,
        speed: f64,
        max_speed: f64,
    ) -> VehicleId {
        let vid = VehicleId(1_000_000 + self.departed_total);
        debug_assert!(lane_position <= net.lane(route[route_pos]).length);
        let lane = route[route_pos];
        self.vehicles.insert(
            vid,
            Vehicle {
                id: vid,
                route: Arc::new(route),
                route_pos,
                lane_position,
                speed,
                depart_step: self.clock,
                max_speed,
            },
        );
        self.lane_order[lane.index()].push(vid);
        self.lane_order[lane.index()].sort_by(|a, b| position_desc(&self.vehicles, *a, *b));
        self.departed_total += 1;
        vid
    }
}

/// Per-vehicle delay term: `(s* - v) / s*` with `s* = min(max, limit)`.
pub fn per_vehicle_delay(max_speed: f64, lane_limit: f64, speed: f64) -> f64 {
    let reachable = max_speed.min(lane_limit);
    if reachable <= 0.0 {
        return 0.0;
    }
    ((reachable - speed) / reachable).clamp(0.0, 1.0)
}

fn connection_for(net: &RoadNetwork, from: LaneId, to: LaneId) -> Option<ConnectionId> {
    net.lane(from)
        .successors
        .iter()
        .copied()
        .find(|&c| net.connection(c).to_lane == to)
}

fn remove_from_lane(order: &mut Vec<VehicleId>, vid: VehicleId) {
    if let Some(idx) = order.iter().position(|&v| v == vid) {
        order.remove(idx);
    }
}

fn position_desc(
    vehicles: &BTreeMap<VehicleId, Vehicle>,
    a: VehicleId,
    b: VehicleId,
) -> std::cmp::Ordering {
    let pa = vehicles[&a].lane_position;
    let pb = vehicles[&b].lane_position;
    pb.partial_cmp(&pa)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.cmp(&b))
}

#[cfg(test)]
mod tests;

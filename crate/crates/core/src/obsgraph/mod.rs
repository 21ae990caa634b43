//! Per-step heterogeneous state graphs and the vehicle-sensor failure
//! model.
//!
//! Nodes are traffic signal controllers, lane-to-lane connections, lanes,
//! and vehicles, stored in that block order. Edges link each connection to
//! its controller and its entry/exit lanes, and each vehicle to its current
//! lane. The normalized adjacency follows the self-loop construction
//! `Â = D^{-1/2}(A + I)D^{-1/2}`, kept as a symmetric weighted edge list.
//!
//! All functions here are pure: building a graph never touches the
//! simulation state, and failure injection returns a new graph.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{EdgeWeights, Matrix, Scalar};
use crate::roadnet::RoadNetwork;
use crate::simcore::SimState;

/// Feature widths per node type.
pub const TSC_FEATS: usize = 1;
pub const CONN_FEATS: usize = 4;
pub const LANE_FEATS: usize = 1;
pub const VEH_FEATS: usize = 2;

#[derive(Debug, Error)]
pub enum ObsError {
    #[error("missing probability {0} outside [0, 1]")]
    BadProbability(f64),
}

/// Vehicle-sensor failure model: with probability `missing_probability`
/// a vehicle's speed and position read zero. Lane membership is never
/// lost, so the vehicle node and its lane edge stay in the graph.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FailureModel {
    pub missing_probability: f64,
    pub seed: u64,
}

impl FailureModel {
    pub fn new(missing_probability: f64, seed: u64) -> Result<Self, ObsError> {
        if !(0.0..=1.0).contains(&missing_probability) || missing_probability.is_nan() {
            return Err(ObsError::BadProbability(missing_probability));
        }
        Ok(Self { missing_probability, seed })
    }
}

/// Division constants mapping raw features into roughly unit scale before
/// they enter the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureScaling {
    /// Seconds-since-switch divisor.
    pub tsc_seconds: Scalar,
    /// Lane-length divisor.
    pub lane_length: Scalar,
    /// Speed divisor; vehicle positions are normalized by their lane length.
    pub speed: Scalar,
}

impl Default for FeatureScaling {
    fn default() -> Self {
        Self { tsc_seconds: 60.0, lane_length: 300.0, speed: 13.89 }
    }
}

/// Heterogeneous snapshot of the world at one step.
///
/// Node order is `[TSCs | connections | lanes | vehicles]`; feature vectors
/// are stored raw (seconds, meters, m/s) and scaled on the way into the
/// model. `local_masks[t]` lists the node indices within the receptive
/// field of TSC `t` used when extracting per-agent views.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateGraph {
    pub step: u64,
    /// Seconds since last switch, one per TSC node.
    pub tsc_feats: Vec<Scalar>,
    /// Per connection: open now, priority now, switches until next opening,
    /// next opening has priority.
    pub conn_feats: Vec<Scalar>,
    /// Lane lengths.
    pub lane_feats: Vec<Scalar>,
    /// Per vehicle: speed, lane position.
    pub veh_feats: Vec<Scalar>,
    /// Global node index of each vehicle's lane (for position scaling).
    pub veh_lane_node: Vec<u32>,
    /// Undirected unique edges between global node indices.
    pub edges: Vec<(u32, u32)>,
    /// `D^{-1/2}(A+I)D^{-1/2}` as a symmetric weighted list with self-loops.
    /// Local views inherit these weights from their parent graph.
    pub norm_adj: Arc<EdgeWeights>,
    /// Domain ids per node block.
    pub tsc_ids: Vec<u32>,
    pub conn_ids: Vec<u32>,
    pub lane_ids: Vec<u32>,
    pub veh_ids: Vec<u64>,
    /// Sorted node indices within the receptive field of each TSC.
    pub local_masks: Vec<Vec<u32>>,
}

impl StateGraph {
    pub fn n_tsc(&self) -> usize {
        self.tsc_ids.len()
    }

    pub fn n_conn(&self) -> usize {
        self.conn_ids.len()
    }

    pub fn n_lane(&self) -> usize {
        self.lane_ids.len()
    }

    pub fn n_veh(&self) -> usize {
        self.veh_ids.len()
    }

    pub fn node_count(&self) -> usize {
        self.n_tsc() + self.n_conn() + self.n_lane() + self.n_veh()
    }

    /// Global node index ranges per type block.
    pub fn block_offsets(&self) -> [usize; 4] {
        [
            0,
            self.n_tsc(),
            self.n_tsc() + self.n_conn(),
            self.n_tsc() + self.n_conn() + self.n_lane(),
        ]
    }

    /// Raw features of one node type as a matrix (rows = nodes of the type).
    fn raw_block(&self, block: usize) -> Matrix {
        let (data, width, rows) = match block {
            0 => (&self.tsc_feats, TSC_FEATS, self.n_tsc()),
            1 => (&self.conn_feats, CONN_FEATS, self.n_conn()),
            2 => (&self.lane_feats, LANE_FEATS, self.n_lane()),
            _ => (&self.veh_feats, VEH_FEATS, self.n_veh()),
        };
        Matrix::from_shape_vec((rows, width), data.clone()).expect("consistent block shape")
    }

    /// Scaled feature matrices per node type, in block order.
    pub fn scaled_features(&self, scaling: &FeatureScaling) -> [Matrix; 4] {
        let mut tsc = self.raw_block(0);
        tsc.mapv_inplace(|v| v / scaling.tsc_seconds);
        let conn = self.raw_block(1);
        let mut lane = self.raw_block(2);
        lane.mapv_inplace(|v| v / scaling.lane_length);
        let mut veh = self.raw_block(3);
        let lane_offset = self.block_offsets()[2];
        for (row, &lane_node) in self.veh_lane_node.iter().enumerate() {
            let lane_len = self.lane_feats[lane_node as usize - lane_offset];
            veh[(row, 0)] /= scaling.speed;
            veh[(row, 1)] /= lane_len.max(1.0);
        }
        [tsc, conn, lane, veh]
    }

    /// Extracts the per-agent view: the subgraph induced by the TSC's
    /// receptive-field mask, with adjacency weights inherited from the full
    /// graph. Returns the graph and the agent's row within its TSC block.
    /// Inherited weights keep the agent's embedding bit-compatible with the
    /// full-graph forward pass.
    pub fn extract_local(&self, tsc_index: usize) -> (StateGraph, usize) {
        let mask = &self.local_masks[tsc_index];
        let mut global_to_local = vec![u32::MAX; self.node_count()];
        for (local, &global) in mask.iter().enumerate() {
            global_to_local[global as usize] = local as u32;
        }
        let offsets = self.block_offsets();
        let in_mask = |g: usize| global_to_local[g] != u32::MAX;

        let mut tsc_feats = Vec::new();
        let mut tsc_ids = Vec::new();
        let mut agent_row = 0;
        for (i, &id) in self.tsc_ids.iter().enumerate() {
            if in_mask(i) {
                if i == tsc_index {
                    agent_row = tsc_ids.len();
                }
                tsc_feats.push(self.tsc_feats[i]);
                tsc_ids.push(id);
            }
        }
        let mut conn_feats = Vec::new();
        let mut conn_ids = Vec::new();
        for (i, &id) in self.conn_ids.iter().enumerate() {
            if in_mask(offsets[1] + i) {
                conn_feats.extend_from_slice(
                    &self.conn_feats[i * CONN_FEATS..(i + 1) * CONN_FEATS],
                );
                conn_ids.push(id);
            }
        }
        let mut lane_feats = Vec::new();
        let mut lane_ids = Vec::new();
        // Local index per original lane row, for vehicle lane pointers.
        let mut lane_local = vec![u32::MAX; self.n_lane()];
        for (i, &id) in self.lane_ids.iter().enumerate() {
            if in_mask(offsets[2] + i) {
                lane_local[i] = lane_ids.len() as u32;
                lane_feats.push(self.lane_feats[i]);
                lane_ids.push(id);
            }
        }
        let mut veh_feats = Vec::new();
        let mut veh_ids = Vec::new();
        let mut veh_lane_node = Vec::new();
        let local_lane_offset = (tsc_ids.len() + conn_ids.len()) as u32;
        for (i, &id) in self.veh_ids.iter().enumerate() {
            if in_mask(offsets[3] + i) {
                veh_feats.extend_from_slice(&self.veh_feats[i * VEH_FEATS..(i + 1) * VEH_FEATS]);
                let lane_row = self.veh_lane_node[i] as usize - offsets[2];
                debug_assert!(lane_local[lane_row] != u32::MAX, "vehicle lane inside mask");
                veh_lane_node.push(local_lane_offset + lane_local[lane_row]);
                veh_ids.push(id);
            }
        }

        let edges: Vec<(u32, u32)> = self
            .edges
            .iter()
            .filter(|(a, b)| in_mask(*a as usize) && in_mask(*b as usize))
            .map(|(a, b)| (global_to_local[*a as usize], global_to_local[*b as usize]))
            .collect();
        let norm_adj: EdgeWeights = self
            .norm_adj
            .iter()
            .filter(|(a, b, _)| in_mask(*a as usize) && in_mask(*b as usize))
            .map(|(a, b, w)| (global_to_local[*a as usize], global_to_local[*b as usize], *w))
            .collect();

        let graph = StateGraph {
            step: self.step,
            tsc_feats,
            conn_feats,
            lane_feats,
            veh_feats,
            veh_lane_node,
            edges,
            norm_adj: Arc::new(norm_adj),
            tsc_ids,
            conn_ids,
            lane_ids,
            veh_ids,
            // Local views are leaves; they carry no masks of their own.
            local_masks: Vec::new(),
        };
        (graph, agent_row)
    }

    /// Test support: reorders nodes within each type block.
    #[cfg(test)]
    pub(crate) fn permute_within_blocks(
        &self,
        perms: [&[usize]; 4],
    ) -> StateGraph {
        let offsets = self.block_offsets();
        let sizes = [self.n_tsc(), self.n_conn(), self.n_lane(), self.n_veh()];
        // new index of old node g.
        let mut relocation = vec![0u32; self.node_count()];
        for block in 0..4 {
            assert_eq!(perms[block].len(), sizes[block]);
            for (new_row, &old_row) in perms[block].iter().enumerate() {
                relocation[offsets[block] + old_row] = (offsets[block] + new_row) as u32;
            }
        }
        let widths = [TSC_FEATS, CONN_FEATS, LANE_FEATS, VEH_FEATS];
        let gather = |block: usize, feats: &[Scalar]| -> Vec<Scalar> {
            let w = widths[block];
            perms[block]
                .iter()
                .flat_map(|&old| feats[old * w..(old + 1) * w].to_vec())
                .collect()
        };
        StateGraph {
            step: self.step,
            tsc_feats: gather(0, &self.tsc_feats),
            conn_feats: gather(1, &self.conn_feats),
            lane_feats: gather(2, &self.lane_feats),
            veh_feats: gather(3, &self.veh_feats),
            veh_lane_node: perms[3]
                .iter()
                .map(|&old| relocation[self.veh_lane_node[old] as usize])
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|(a, b)| (relocation[*a as usize], relocation[*b as usize]))
                .collect(),
            norm_adj: Arc::new(
                self.norm_adj
                    .iter()
                    .map(|(a, b, w)| (relocation[*a as usize], relocation[*b as usize], *w))
                    .collect(),
            ),
            tsc_ids: perms[0].iter().map(|&old| self.tsc_ids[old]).collect(),
            conn_ids: perms[1].iter().map(|&old| self.conn_ids[old]).collect(),
            lane_ids: perms[2].iter().map(|&old| self.lane_ids[old]).collect(),
            veh_ids: perms[3].iter().map(|&old| self.veh_ids[old]).collect(),
            local_masks: self
                .local_masks
                .iter()
                .map(|mask| {
                    let mut m: Vec<u32> =
                        mask.iter().map(|&g| relocation[g as usize]).collect();
                    m.sort_unstable();
                    m
                })
                .collect(),
        }
    }
}

/// Builds the state graph for the current simulation state. `hops` is the
/// receptive-field radius recorded in the per-TSC masks and normally
/// equals the model's GCN layer count.
pub fn build_state_graph(state: &SimState, net: &RoadNetwork, hops: usize) -> StateGraph {
    let signalized = net.signalized();
    let n_tsc = signalized.len();
    let n_conn = net.connections.len();
    let n_lane = net.lanes.len();

    let mut tsc_feats = Vec::with_capacity(n_tsc);
    let mut tsc_ids = Vec::with_capacity(n_tsc);
    let mut tsc_row = std::collections::BTreeMap::new();
    for (row, node) in signalized.iter().enumerate() {
        let signal = state.signal(*node).expect("signalized node has runtime");
        tsc_feats.push((state.clock - signal.last_switch_step) as Scalar);
        tsc_ids.push(node.0);
        tsc_row.insert(node.0, row);
    }

    let mut conn_feats = Vec::with_capacity(n_conn * CONN_FEATS);
    let mut conn_ids = Vec::with_capacity(n_conn);
    for conn in &net.connections {
        let program = net.program(conn.intersection).expect("validated network");
        let signal = state.signal(conn.intersection).expect("signal runtime");
        let current = &program.phases[signal.phase_index];
        let entry = current.entry(conn.id).expect("phase covers connections");
        // Next opening assuming the controller only prolongs: walk the
        // cycle forward counting switch actions until the connection opens.
        let mut switches_until = 0 as Scalar;
        let mut next_priority = 0.0;
        for k in 0..program.phase_count() {
            let phase = &program.phases[(signal.phase_index + k) % program.phase_count()];
            let e = phase.entry(conn.id).expect("phase covers connections");
            if e.open {
                switches_until = k as Scalar;
                next_priority = if e.priority { 1.0 } else { 0.0 };
                break;
            }
        }
        conn_feats.extend_from_slice(&[
            if entry.open { 1.0 } else { 0.0 },
            if entry.priority { 1.0 } else { 0.0 },
            switches_until,
            next_priority,
        ]);
        conn_ids.push(conn.id.0);
    }

    let mut lane_feats = Vec::with_capacity(n_lane);
    let mut lane_ids = Vec::with_capacity(n_lane);
    for lane in &net.lanes {
        lane_feats.push(lane.length as Scalar);
        lane_ids.push(lane.id.0);
    }

    let lane_offset = n_tsc + n_conn;
    let veh_offset = lane_offset + n_lane;
    let mut veh_feats = Vec::new();
    let mut veh_ids = Vec::new();
    let mut veh_lane_node = Vec::new();
    let mut edges: Vec<(u32, u32)> = Vec::new();
    for lane in &net.lanes {
        for vid in state.lane_vehicles(lane.id) {
            let v = state.vehicle(*vid).expect("occupancy is consistent");
            let node = (veh_offset + veh_ids.len()) as u32;
            veh_feats.push(v.speed as Scalar);
            veh_feats.push(v.lane_position as Scalar);
            veh_ids.push(vid.0);
            let lane_node = (lane_offset + lane.id.index()) as u32;
            veh_lane_node.push(lane_node);
            edges.push((node, lane_node));
        }
    }
    for conn in &net.connections {
        let conn_node = (n_tsc + conn.id.index()) as u32;
        let tsc_node = tsc_row[&conn.intersection.0] as u32;
        edges.push((conn_node, tsc_node));
        edges.push((conn_node, (lane_offset + conn.from_lane.index()) as u32));
        edges.push((conn_node, (lane_offset + conn.to_lane.index()) as u32));
    }

    let node_count = veh_offset + veh_ids.len();
    let norm_adj = Arc::new(normalized_edge_weights(&edges, node_count));
    let local_masks = (0..n_tsc)
        .map(|t| bfs_mask(&edges, node_count, t as u32, hops))
        .collect();

    StateGraph {
        step: state.clock,
        tsc_feats,
        conn_feats,
        lane_feats,
        veh_feats,
        veh_lane_node,
        edges,
        norm_adj,
        tsc_ids,
        conn_ids,
        lane_ids,
        veh_ids,
        local_masks,
    }
}

/// Zeroes the speed and position features of each vehicle independently
/// with the model's missing probability. Topology, ids, and non-vehicle
/// features are untouched. Deterministic in `(model.seed, graph.step)`.
pub fn inject_failures(graph: &StateGraph, model: &FailureModel) -> StateGraph {
    use rand::prelude::*;
    let mut out = graph.clone();
    if model.missing_probability <= 0.0 {
        return out;
    }
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(
        model
            .seed
            .wrapping_add(graph.step.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
    );
    for row in 0..out.n_veh() {
        if rng.random_bool(model.missing_probability) {
            out.veh_feats[row * VEH_FEATS] = 0.0;
            out.veh_feats[row * VEH_FEATS + 1] = 0.0;
        }
    }
    out
}

/// Symmetric normalized adjacency with self-loops as a weighted edge list:
/// entry `(i, i)` has weight `1/d_i` and `(i, j)` has `1/sqrt(d_i d_j)`,
/// where `d` counts neighbors plus the self-loop.
pub fn normalized_edge_weights(edges: &[(u32, u32)], node_count: usize) -> EdgeWeights {
    let mut degree = vec![1.0 as Scalar; node_count];
    for &(a, b) in edges {
        degree[a as usize] += 1.0;
        degree[b as usize] += 1.0;
    }
    let mut weights: EdgeWeights = Vec::with_capacity(node_count + edges.len() * 2);
    for (i, &d) in degree.iter().enumerate() {
        weights.push((i as u32, i as u32, 1.0 / d));
    }
    for &(a, b) in edges {
        let w = 1.0 / (degree[a as usize] * degree[b as usize]).sqrt();
        weights.push((a, b, w));
        weights.push((b, a, w));
    }
    weights
}

/// Dense `Â = D^{-1/2}(A+I)D^{-1/2}` for the same edge set; the reference
/// form of [`normalized_edge_weights`] used by small-scale checks.
pub fn normalize_adjacency(edges: &[(u32, u32)], node_count: usize) -> Matrix {
    let mut dense = Matrix::zeros((node_count, node_count));
    for (i, j, w) in normalized_edge_weights(edges, node_count) {
        dense[(i as usize, j as usize)] += w;
    }
    dense
}

fn bfs_mask(edges: &[(u32, u32)], node_count: usize, start: u32, hops: usize) -> Vec<u32> {
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); node_count];
    for &(a, b) in edges {
        adj[a as usize].push(b);
        adj[b as usize].push(a);
    }
    let mut dist = vec![usize::MAX; node_count];
    dist[start as usize] = 0;
    let mut queue = VecDeque::from([start]);
    let mut mask = vec![start];
    while let Some(node) = queue.pop_front() {
        let d = dist[node as usize];
        if d == hops {
            continue;
        }
        for &next in &adj[node as usize] {
            if dist[next as usize] == usize::MAX {
                dist[next as usize] = d + 1;
                mask.push(next);
                queue.push_back(next);
            }
        }
    }
    mask.sort_unstable();
    mask
}

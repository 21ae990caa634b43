//! Network generators: rectangular grids and random irregular layouts.
//!
//! Both generators build on the same internal materializer: nodes are
//! placed with 2D coordinates, edges are wired between them, and every
//! signalized node gets a cyclic program alternating green between two
//! approach groups with an all-red clearance phase in between. The
//! coordinates exist only while generating; the resulting network carries
//! lane lengths, not geometry.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use super::{
    Connection, ConnectionId, Intersection, Lane, LaneId, NodeId, Phase, PhaseEntry,
    PhaseProgram, RoadNetwork, RoadnetError, DEFAULT_CLEARANCE, DEFAULT_GREEN_MIN,
    DEFAULT_SPEED_LIMIT,
};

/// Grid spacing (and stub length) in meters; inside the [100, 300] band.
const GRID_EDGE_LEN: f64 = 200.0;
/// Probability of wiring an extra in-range edge in the random generator.
const EXTRA_EDGE_PROB: f64 = 0.35;
/// Minimum node separation accepted while placing random intersections.
const MIN_NODE_SPACING: f64 = 90.0;
/// A movement within this bearing change of straight-ahead keeps priority.
const THROUGH_ANGLE_DEG: f64 = 45.0;

/// Knobs shared by the generators.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub speed_limit: f64,
    pub green_min: u32,
    pub clearance: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            speed_limit: DEFAULT_SPEED_LIMIT,
            green_min: DEFAULT_GREEN_MIN,
            clearance: DEFAULT_CLEARANCE,
        }
    }
}

struct BuildNode {
    pos: (f64, f64),
    signalized: bool,
}

struct BuildEdge {
    a: usize,
    b: usize,
    length: f64,
}

struct Builder {
    nodes: Vec<BuildNode>,
    edges: Vec<BuildEdge>,
    lanes_per_route: u32,
    cfg: GenConfig,
}

impl Builder {
    fn new(lanes_per_route: u32, cfg: GenConfig) -> Self {
        Self { nodes: Vec::new(), edges: Vec::new(), lanes_per_route, cfg }
    }

    fn add_node(&mut self, pos: (f64, f64), signalized: bool) -> usize {
        self.nodes.push(BuildNode { pos, signalized });
        self.nodes.len() - 1
    }

    fn add_edge(&mut self, a: usize, b: usize) {
        let length = dist(self.nodes[a].pos, self.nodes[b].pos);
        self.edges.push(BuildEdge { a, b, length });
    }

    fn degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.a == node || e.b == node).count()
    }

    fn neighbors(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|e| {
                if e.a == node {
                    Some(e.b)
                } else if e.b == node {
                    Some(e.a)
                } else {
                    None
                }
            })
            .collect()
    }

    fn bearing(&self, from: usize, to: usize) -> f64 {
        let (x0, y0) = self.nodes[from].pos;
        let (x1, y1) = self.nodes[to].pos;
        (y1 - y0).atan2(x1 - x0)
    }

    /// Materializes lanes, connections, and programs.
    fn build(self) -> RoadNetwork {
        let lanes_per_route = self.lanes_per_route as usize;
        let mut lanes: Vec<Lane> = Vec::new();
        // Directed edge (a, b) -> lane ids a->b.
        let mut dir_lanes: BTreeMap<(usize, usize), Vec<LaneId>> = BTreeMap::new();

        for edge in &self.edges {
            for (from, to) in [(edge.a, edge.b), (edge.b, edge.a)] {
                let mut ids = Vec::with_capacity(lanes_per_route);
                for _ in 0..lanes_per_route {
                    let id = LaneId(lanes.len() as u32);
                    lanes.push(Lane {
                        id,
                        from: NodeId(from as u32),
                        to: NodeId(to as u32),
                        length: edge.length,
                        speed_limit: self.cfg.speed_limit,
                        successors: Vec::new(),
                    });
                    ids.push(id);
                }
                dir_lanes.insert((from, to), ids);
            }
        }

        let mut connections: Vec<Connection> = Vec::new();
        // Per node: approach groups as (inbound-neighbor, connection ids,
        // through flags) for program assembly.
        let mut programs: BTreeMap<u32, PhaseProgram> = BTreeMap::new();

        for (node_idx, node) in self.nodes.iter().enumerate() {
            if !node.signalized {
                continue;
            }
            let mut inbound = self.neighbors(node_idx);
            inbound.sort();
            inbound.dedup();

            // Movement wiring: every inbound lane connects to the matching
            // lane index of every outbound edge except the U-turn.
            let mut conn_meta: Vec<(ConnectionId, usize /*from node*/, bool /*through*/)> =
                Vec::new();
            for &u in &inbound {
                let in_bearing = self.bearing(u, node_idx);
                for &w in &inbound {
                    if w == u {
                        continue;
                    }
                    let out_bearing = self.bearing(node_idx, w);
                    let through = angle_diff(in_bearing, out_bearing).to_degrees().abs()
                        <= THROUGH_ANGLE_DEG;
                    for idx in 0..lanes_per_route {
                        let from_lane = dir_lanes[&(u, node_idx)][idx];
                        let to_lane = dir_lanes[&(node_idx, w)][idx];
                        let id = ConnectionId(connections.len() as u32);
                        connections.push(Connection {
                            id,
                            from_lane,
                            to_lane,
                            intersection: NodeId(node_idx as u32),
                        });
                        conn_meta.push((id, u, through));
                    }
                }
            }

            // Approach groups: inbound edges sorted by bearing, assigned
            // alternately, which pairs opposite approaches at four-ways.
            let mut by_bearing: Vec<(f64, usize)> = inbound
                .iter()
                .map(|&u| (self.bearing(u, node_idx), u))
                .collect();
            by_bearing.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut group_of: BTreeMap<usize, usize> = BTreeMap::new();
            for (rank, (_, u)) in by_bearing.iter().enumerate() {
                group_of.insert(*u, rank % 2);
            }

            let greens: Vec<Vec<(ConnectionId, bool)>> = (0..2)
                .map(|g| {
                    conn_meta
                        .iter()
                        .filter(|(_, u, _)| group_of[u] == g)
                        .map(|(id, _, through)| (*id, *through))
                        .collect::<Vec<_>>()
                })
                .filter(|v: &Vec<_>| !v.is_empty())
                .collect();
            let all_conns: Vec<ConnectionId> = conn_meta.iter().map(|(id, _, _)| *id).collect();
            programs.insert(
                node_idx as u32,
                assemble_program(&all_conns, &greens, &self.cfg),
            );
        }

        // Successor lists.
        let mut network = RoadNetwork {
            intersections: self
                .nodes
                .iter()
                .enumerate()
                .map(|(idx, n)| Intersection { id: NodeId(idx as u32), signalized: n.signalized })
                .collect(),
            lanes,
            connections,
            programs,
        };
        for c in &network.connections {
            let id = c.id;
            let from = c.from_lane.index();
            network.lanes[from].successors.push(id);
        }
        for lane in &mut network.lanes {
            lane.successors.sort();
        }
        network
    }
}

/// Cyclic program: one green phase per approach group with an all-red
/// clearance phase after each green.
fn assemble_program(
    all_conns: &[ConnectionId],
    greens: &[Vec<(ConnectionId, bool)>],
    cfg: &GenConfig,
) -> PhaseProgram {
    let mut phases = Vec::new();
    for green in greens {
        let entries = all_conns
            .iter()
            .map(|&c| {
                let open = green.iter().find(|(id, _)| *id == c);
                PhaseEntry {
                    connection: c,
                    open: open.is_some(),
                    priority: open.map(|(_, through)| *through).unwrap_or(false),
                }
            })
            .collect();
        phases.push(Phase { entries, min_duration: cfg.green_min });
        let clearance = all_conns
            .iter()
            .map(|&c| PhaseEntry { connection: c, open: false, priority: false })
            .collect();
        phases.push(Phase { entries: clearance, min_duration: cfg.clearance });
    }
    PhaseProgram { phases, min_phase_duration: cfg.green_min }
}

/// Rectangular lattice of `rows x cols` signalized intersections with
/// boundary stubs.
///
/// Lattice rule: every grid-node side that does not face another grid node
/// carries one stub edge to a non-signalized terminal, which acts as a trip
/// source and sink.
pub fn generate_grid_network(
    rows: u32,
    cols: u32,
    lanes_per_route: u32,
) -> Result<RoadNetwork, RoadnetError> {
    if rows < 2 || cols < 2 {
        return Err(RoadnetError::GridDims { rows, cols });
    }
    check_lanes(lanes_per_route)?;
    let cfg = GenConfig::default();
    let mut b = Builder::new(lanes_per_route, cfg);

    let mut grid = vec![vec![0usize; cols as usize]; rows as usize];
    for (r, row) in grid.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            *cell =
                b.add_node((c as f64 * GRID_EDGE_LEN, r as f64 * GRID_EDGE_LEN), true);
        }
    }
    for r in 0..rows as usize {
        for c in 0..cols as usize {
            if c + 1 < cols as usize {
                b.add_edge(grid[r][c], grid[r][c + 1]);
            }
            if r + 1 < rows as usize {
                b.add_edge(grid[r][c], grid[r + 1][c]);
            }
        }
    }
    // Boundary stubs.
    for r in 0..rows as usize {
        for c in 0..cols as usize {
            let (x, y) = (c as f64 * GRID_EDGE_LEN, r as f64 * GRID_EDGE_LEN);
            let mut stubs = Vec::new();
            if r == 0 {
                stubs.push((x, y - GRID_EDGE_LEN));
            }
            if r == rows as usize - 1 {
                stubs.push((x, y + GRID_EDGE_LEN));
            }
            if c == 0 {
                stubs.push((x - GRID_EDGE_LEN, y));
            }
            if c == cols as usize - 1 {
                stubs.push((x + GRID_EDGE_LEN, y));
            }
            for pos in stubs {
                let t = b.add_node(pos, false);
                b.add_edge(grid[r][c], t);
            }
        }
    }
    let net = b.build();
    net.validate()?;
    Ok(net)
}

/// Random irregular network with `n_intersections` signalized junctions.
///
/// Placement is incremental: each new intersection is dropped at a random
/// bearing and a random 100–300 m distance from an existing anchor, which
/// wires a spanning tree whose edge lengths are in range by construction.
/// Extra edges are added between nearby pairs, every junction is topped up
/// with boundary stubs until it is at least a three-way, and the result is
/// validated for connectivity. Deterministic for a fixed seed.
pub fn generate_random_network(
    seed: u64,
    n_intersections: u32,
    lanes_per_route: u32,
) -> Result<RoadNetwork, RoadnetError> {
    if !(2..=10).contains(&n_intersections) {
        return Err(RoadnetError::IntersectionCount(n_intersections));
    }
    generate_random_network_unchecked(seed, n_intersections, lanes_per_route)
}

/// Same as [`generate_random_network`] but without the 2–10 intersection
/// training-profile bound.
pub fn generate_random_network_unchecked(
    seed: u64,
    n_intersections: u32,
    lanes_per_route: u32,
) -> Result<RoadNetwork, RoadnetError> {
    if n_intersections < 2 {
        return Err(RoadnetError::IntersectionCount(n_intersections));
    }
    check_lanes(lanes_per_route)?;
    let mut attempt_seed = seed;
    let mut last_err = None;
    for _ in 0..8 {
        match try_random_network(attempt_seed, n_intersections, lanes_per_route) {
            Ok(net) => return Ok(net),
            Err(e) => last_err = Some(e),
        }
        attempt_seed = attempt_seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    }
    Err(last_err.expect("at least one attempt"))
}

fn try_random_network(
    seed: u64,
    n: u32,
    lanes_per_route: u32,
) -> Result<RoadNetwork, RoadnetError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut b = Builder::new(lanes_per_route, GenConfig::default());

    b.add_node((0.0, 0.0), true);
    for _ in 1..n {
        let mut placed = None;
        for _ in 0..200 {
            let anchor = rng.random_range(0..b.nodes.len());
            let d = rng.random_range(100.0..=300.0);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let (ax, ay) = b.nodes[anchor].pos;
            let pos = (ax + d * theta.cos(), ay + d * theta.sin());
            let ok = b
                .nodes
                .iter()
                .all(|node| dist(node.pos, pos) >= MIN_NODE_SPACING);
            if ok {
                placed = Some((anchor, pos));
                break;
            }
        }
        let (anchor, pos) =
            placed.ok_or_else(|| RoadnetError::Validation("node placement failed".into()))?;
        let idx = b.add_node(pos, true);
        b.add_edge(anchor, idx);
    }

    // Extra edges between nearby pairs, capped at four-way junctions.
    let count = b.nodes.len();
    for i in 0..count {
        for j in (i + 1)..count {
            let already = b.edges.iter().any(|e| {
                (e.a == i && e.b == j) || (e.a == j && e.b == i)
            });
            if already {
                continue;
            }
            let d = dist(b.nodes[i].pos, b.nodes[j].pos);
            if (100.0..=300.0).contains(&d)
                && b.degree(i) < 4
                && b.degree(j) < 4
                && rng.random_bool(EXTRA_EDGE_PROB)
            {
                b.add_edge(i, j);
            }
        }
    }

    // Boundary stubs until every junction is at least a three-way; the
    // stub points into the widest angular gap between existing approaches.
    for node in 0..count {
        while b.degree(node) < 3 {
            let mut bearings: Vec<f64> =
                b.neighbors(node).iter().map(|&m| b.bearing(node, m)).collect();
            bearings.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let theta = widest_gap_bisector(&bearings, &mut rng);
            let d = rng.random_range(100.0..=300.0);
            let (x, y) = b.nodes[node].pos;
            let pos = (x + d * theta.cos(), y + d * theta.sin());
            let t = b.add_node(pos, false);
            b.add_edge(node, t);
        }
    }

    let net = b.build();
    net.validate()?;
    Ok(net)
}

/// Constructs the fallback cyclic program for one intersection directly
/// from topology (no geometry): inbound roads are ordered by origin node id
/// and assigned alternately to two approach groups; each green is followed
/// by an all-red clearance phase. Within an inbound lane the connection
/// with the highest exit-lane id is treated as the yielding movement.
pub fn default_program(
    network: &RoadNetwork,
    intersection: NodeId,
) -> Result<PhaseProgram, RoadnetError> {
    let conns = network.connections_of(intersection);
    if conns.is_empty() {
        return Err(RoadnetError::NoConnections(intersection));
    }
    let cfg = GenConfig::default();

    let mut origins: Vec<NodeId> = conns
        .iter()
        .map(|&c| network.lane(network.connection(c).from_lane).from)
        .collect();
    origins.sort();
    origins.dedup();
    let group_of = |origin: NodeId| -> usize {
        origins.iter().position(|&o| o == origin).unwrap() % 2
    };

    // Yield flag per connection: last exit per inbound lane yields.
    let mut yields: BTreeMap<ConnectionId, bool> = BTreeMap::new();
    let mut by_lane: BTreeMap<LaneId, Vec<ConnectionId>> = BTreeMap::new();
    for &c in &conns {
        by_lane
            .entry(network.connection(c).from_lane)
            .or_default()
            .push(c);
    }
    for (_, mut cs) in by_lane {
        cs.sort_by_key(|&c| network.connection(c).to_lane);
        let last = *cs.last().unwrap();
        for c in cs {
            yields.insert(c, c == last && conns.len() > 1);
        }
    }

    let greens: Vec<Vec<(ConnectionId, bool)>> = (0..2)
        .map(|g| {
            conns
                .iter()
                .filter(|&&c| {
                    group_of(network.lane(network.connection(c).from_lane).from) == g
                })
                .map(|&c| (c, !yields[&c]))
                .collect::<Vec<_>>()
        })
        .filter(|v: &Vec<_>| !v.is_empty())
        .collect();
    Ok(assemble_program(&conns, &greens, &cfg))
}

fn check_lanes(lanes_per_route: u32) -> Result<(), RoadnetError> {
    if !(1..=4).contains(&lanes_per_route) {
        return Err(RoadnetError::LanesPerRoute(lanes_per_route));
    }
    Ok(())
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Smallest signed difference between two angles, in radians.
fn angle_diff(a: f64, b: f64) -> f64 {
    let mut d = b - a;
    while d > std::f64::consts::PI {
        d -= std::f64::consts::TAU;
    }
    while d < -std::f64::consts::PI {
        d += std::f64::consts::TAU;
    }
    d
}

fn widest_gap_bisector(sorted_bearings: &[f64], rng: &mut ChaCha12Rng) -> f64 {
    if sorted_bearings.is_empty() {
        return rng.random_range(0.0..std::f64::consts::TAU);
    }
    let n = sorted_bearings.len();
    let mut best = (0.0, sorted_bearings[0]);
    for i in 0..n {
        let a = sorted_bearings[i];
        let b = if i + 1 < n {
            sorted_bearings[i + 1]
        } else {
            sorted_bearings[0] + std::f64::consts::TAU
        };
        let gap = b - a;
        if gap > best.0 {
            best = (gap, a + gap / 2.0);
        }
    }
    best.1
}

//! Smart-block network: flooding with per-hop latency, heartbeat failure
//! detection and localization queries. Times are in milliseconds.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{neighbors, BlockState, Face, GridCoord, Structure};

/// Size of one smart-block packet.
pub const PACKET_BYTES: u64 = 62;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub per_hop_ms: u64,
    pub heartbeat_period_ms: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self { per_hop_ms: 500, heartbeat_period_ms: 1000 }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.per_hop_ms == 0 {
            return Err(NetError::ZeroLatency);
        }
        if self.heartbeat_period_ms == 0 {
            return Err(NetError::ZeroHeartbeat);
        }
        Ok(())
    }

    /// Link throughput implied by one packet per hop interval, in bit/s.
    pub fn implied_bit_rate(&self) -> f64 {
        (PACKET_BYTES * 8 * 1000) as f64 / self.per_hop_ms as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Payload {
    BlockAdded(GridCoord),
    BlockRemoved(GridCoord),
    StatusQuery,
    StatusReply(u64),
    PositionQuery(Face),
    PositionReply(GridCoord),
    NewBlockAvailable(GridCoord),
    DivisionAssignment { agent: usize, division: usize },
    BlueprintChunk(Vec<GridCoord>),
    LayerComplete(i32),
    ConstructionComplete,
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::BlockAdded(_) => "BlockAdded",
            Payload::BlockRemoved(_) => "BlockRemoved",
            Payload::StatusQuery => "StatusQuery",
            Payload::StatusReply(_) => "StatusReply",
            Payload::PositionQuery(_) => "PositionQuery",
            Payload::PositionReply(_) => "PositionReply",
            Payload::NewBlockAvailable(_) => "NewBlockAvailable",
            Payload::DivisionAssignment { .. } => "DivisionAssignment",
            Payload::BlueprintChunk(_) => "BlueprintChunk",
            Payload::LayerComplete(_) => "LayerComplete",
            Payload::ConstructionComplete => "ConstructionComplete",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: u64,
    pub origin: GridCoord,
    pub payload: Payload,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("per-hop latency must be positive")]
    ZeroLatency,
    #[error("heartbeat period must be positive")]
    ZeroHeartbeat,
    #[error("cell {0} holds no block")]
    Vacant(GridCoord),
    #[error("no relay path between {0} and {1}")]
    Disconnected(GridCoord, GridCoord),
    #[error("face {0} is not an exposed face of the structure")]
    StaleFace(Face),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InFlight {
    pub deliver_at: u64,
    pub to: GridCoord,
    pub from: GridCoord,
    pub msg_id: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Delivery {
    pub at: u64,
    pub msg_id: u64,
    pub origin: GridCoord,
    pub to: GridCoord,
    pub kind: &'static str,
}

/// Which hop count to report between two blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HopConvention {
    /// Shortest relay path length through occupied cells.
    GraphDistance,
    /// Blocks traversed per axis, endpoints inclusive: sum of |d_i| + 1.
    TraversedBlocks,
}

#[derive(Clone, Debug, Default)]
pub struct NetState {
    pub seen: BTreeMap<GridCoord, BTreeSet<u64>>,
    pub in_flight: BTreeSet<InFlight>,
    messages: BTreeMap<u64, Message>,
    next_id: u64,
    pub sent: u64,
    pub delivered: u64,
}

impl NetState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a message with a fresh id.
    pub fn message(&mut self, origin: GridCoord, payload: Payload, now: u64) -> Message {
        let id = self.next_id;
        self.next_id += 1;
        Message { id, origin, payload, created_at: now }
    }

    pub fn get(&self, id: u64) -> Option<&Message> {
        self.messages.get(&id)
    }

    pub fn pending(&self) -> usize {
        self.in_flight.len()
    }

    /// Pops every hop due at or before `now`, in delivery order, dropping
    /// duplicates and hops into cells that no longer relay.
    pub fn deliver_due(&mut self, structure: &Structure, now: u64) -> Vec<Delivery> {
        let mut out = Vec::new();
        while let Some(first) = self.in_flight.first().cloned() {
            if first.deliver_at > now {
                break;
            }
            self.in_flight.pop_first();
            if !structure.state(first.to).is_some_and(BlockState::relays) {
                continue;
            }
            if !self.seen.entry(first.to).or_default().insert(first.msg_id) {
                continue;
            }
            let msg = &self.messages[&first.msg_id];
            self.delivered += 1;
            out.push(Delivery {
                at: first.deliver_at,
                msg_id: msg.id,
                origin: msg.origin,
                to: first.to,
                kind: msg.payload.kind(),
            });
        }
        out
    }
}

/// Breadth-first relay distances from `origin` through blocks that relay.
fn relay_distances(structure: &Structure, origin: GridCoord) -> BTreeMap<GridCoord, (u32, GridCoord)> {
    let mut dist = BTreeMap::new();
    if !structure.state(origin).is_some_and(BlockState::relays) {
        return dist;
    }
    dist.insert(origin, (0, origin));
    let mut queue = VecDeque::from([origin]);
    while let Some(c) = queue.pop_front() {
        let d = dist[&c].0;
        for n in neighbors(c) {
            if structure.state(n).is_some_and(BlockState::relays) && !dist.contains_key(&n) {
                dist.insert(n, (d + 1, c));
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Broadcasts `msg` from its origin. Every relaying block in the origin's
/// component is scheduled exactly once, `per_hop` per relay hop after
/// creation. Returns the schedule sorted by cell.
pub fn flood(net: &mut NetState, structure: &Structure, msg: Message, latency: &LatencyModel) -> Vec<(GridCoord, u64)> {
    let dist = relay_distances(structure, msg.origin);
    let mut schedule = Vec::with_capacity(dist.len());
    for (cell, (hops, parent)) in &dist {
        let at = msg.created_at + latency.per_hop_ms * u64::from(*hops);
        net.in_flight.insert(InFlight { deliver_at: at, to: *cell, from: *parent, msg_id: msg.id });
        schedule.push((*cell, at));
    }
    net.sent += 1;
    net.next_id = net.next_id.max(msg.id + 1);
    net.messages.insert(msg.id, msg);
    schedule
}

/// Shortest relay path length between two blocks.
pub fn hop_count(structure: &Structure, from: GridCoord, to: GridCoord) -> Result<u32, NetError> {
    for c in [from, to] {
        if !structure.is_occupied(c) {
            return Err(NetError::Vacant(c));
        }
    }
    relay_distances(structure, from).get(&to).map(|(d, _)| *d).ok_or(NetError::Disconnected(from, to))
}

/// Hop count under the chosen convention.
pub fn hops(structure: &Structure, from: GridCoord, to: GridCoord, convention: HopConvention) -> Result<u32, NetError> {
    match convention {
        HopConvention::GraphDistance => hop_count(structure, from, to),
        HopConvention::TraversedBlocks => {
            hop_count(structure, from, to)?;
            Ok(traversed_blocks(from, to))
        }
    }
}

/// Blocks traversed along each axis counting both ends: the x + y + z figure
/// for a path that walks one axis at a time.
pub fn traversed_blocks(from: GridCoord, to: GridCoord) -> u32 {
    (from.x.abs_diff(to.x) + 1) + (from.y.abs_diff(to.y) + 1) + (from.z.abs_diff(to.z) + 1)
}

/// Latency of a one-way message between two blocks.
pub fn one_way_latency_ms(
    structure: &Structure,
    from: GridCoord,
    to: GridCoord,
    latency: &LatencyModel,
    convention: HopConvention,
) -> Result<u64, NetError> {
    Ok(latency.per_hop_ms * u64::from(hops(structure, from, to, convention)?))
}

/// Compares the current configuration with the previous one and returns the
/// blocks that must raise a neighbour alert.
///
/// A cell counts as lost if it held a structural block before and is now
/// missing or offline. Its surviving structural neighbours alert.
pub fn heartbeat_tick(structure: &Structure, previous_config: &Structure) -> Vec<(GridCoord, BlockState)> {
    let mut alerts = BTreeSet::new();
    for (cell, prev) in previous_config.iter() {
        if !prev.is_foothold() {
            continue;
        }
        let lost = match structure.state(cell) {
            None | Some(BlockState::Offline) => true,
            Some(_) => false,
        };
        if !lost {
            continue;
        }
        for n in neighbors(cell) {
            if structure.state(n).is_some_and(BlockState::is_foothold) {
                alerts.insert(n);
            }
        }
    }
    alerts.into_iter().map(|c| (c, BlockState::NeighborAlert)).collect()
}

/// Resolves a foot face to the block it rests on.
pub fn localize(structure: &Structure, f: Face) -> Result<GridCoord, NetError> {
    if structure.is_exposed(f) && structure.state(f.cell).is_some_and(BlockState::relays) {
        Ok(f.cell)
    } else {
        Err(NetError::StaleFace(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::FaceDir;

    fn g(x: i32, y: i32, z: i32) -> GridCoord {
        GridCoord::new(x, y, z)
    }

    fn cube(n: i32) -> Structure {
        let cells = (0..n).flat_map(move |x| (0..n).flat_map(move |y| (0..n).map(move |z| g(x, y, z))));
        Structure::from_cells(g(0, 0, 0), cells).unwrap()
    }

    #[test]
    fn row_flood_timing() {
        let s = Structure::from_cells(g(0, 0, 0), [g(1, 0, 0), g(2, 0, 0)]).unwrap();
        let mut net = NetState::new();
        let lat = LatencyModel::default();
        let msg = net.message(g(0, 0, 0), Payload::StatusQuery, 0);
        let sched = flood(&mut net, &s, msg, &lat);
        assert_eq!(sched, vec![(g(0, 0, 0), 0), (g(1, 0, 0), 500), (g(2, 0, 0), 1000)]);
        assert_eq!(net.deliver_due(&s, 499).len(), 1);
        assert_eq!(net.deliver_due(&s, 1000).len(), 2);
        assert_eq!(net.pending(), 0);
    }

    #[test]
    fn bit_rate() {
        assert_eq!(LatencyModel::default().implied_bit_rate(), 992.0);
    }

    #[test]
    fn cube_corner_conventions() {
        let s = cube(10);
        assert_eq!(hop_count(&s, g(0, 0, 0), g(9, 9, 9)), Ok(27));
        assert_eq!(hops(&s, g(0, 0, 0), g(9, 9, 9), HopConvention::TraversedBlocks), Ok(30));
        let lat = LatencyModel::default();
        let paper = one_way_latency_ms(&s, g(0, 0, 0), g(9, 9, 9), &lat, HopConvention::TraversedBlocks);
        assert_eq!(paper, Ok(15_000));
        let graph = one_way_latency_ms(&s, g(0, 0, 0), g(9, 9, 9), &lat, HopConvention::GraphDistance);
        assert_eq!(graph, Ok(13_500));
    }

    #[test]
    fn u_wall_uses_graph_distance() {
        // (0,0,0) and (2,0,0) are two apart but joined only through y = 0..3.
        let mut cells = vec![];
        for y in 0..=3 {
            cells.push(g(0, y, 0));
            cells.push(g(2, y, 0));
        }
        cells.push(g(1, 3, 0));
        let s = Structure::from_cells(g(0, 0, 0), cells).unwrap();
        assert_eq!(hop_count(&s, g(0, 0, 0), g(2, 0, 0)), Ok(8));
        assert_eq!(hop_count(&s, g(0, 0, 0), g(0, 0, 0)), Ok(0));
    }

    #[test]
    fn hop_count_errors() {
        let s = Structure::new(g(0, 0, 0)).unwrap();
        assert_eq!(hop_count(&s, g(0, 0, 0), g(4, 0, 0)), Err(NetError::Vacant(g(4, 0, 0))));
    }

    #[test]
    fn offline_blocks_do_not_relay() {
        let mut s = Structure::from_cells(g(0, 0, 0), [g(1, 0, 0), g(2, 0, 0)]).unwrap();
        s.set_state(g(1, 0, 0), BlockState::Offline).unwrap();
        assert_eq!(hop_count(&s, g(0, 0, 0), g(2, 0, 0)), Err(NetError::Disconnected(g(0, 0, 0), g(2, 0, 0))));
    }

    #[test]
    fn heartbeat_two_stack() {
        let prev = Structure::from_cells(g(0, 0, 0), [g(0, 0, 1)]).unwrap();
        let mut now = prev.clone();
        now.remove(g(0, 0, 1)).unwrap();
        assert_eq!(heartbeat_tick(&now, &prev), vec![(g(0, 0, 0), BlockState::NeighborAlert)]);
        assert!(heartbeat_tick(&prev, &prev).is_empty());
    }

    #[test]
    fn heartbeat_interior_offline() {
        let cells = (0..3).flat_map(|x| (0..3).map(move |y| g(x, y, 0)));
        let prev = Structure::from_cells(g(0, 0, 0), cells).unwrap();
        let mut now = prev.clone();
        now.set_state(g(1, 1, 0), BlockState::Offline).unwrap();
        let alerts: Vec<GridCoord> = heartbeat_tick(&now, &prev).into_iter().map(|(c, _)| c).collect();
        assert_eq!(alerts, vec![g(0, 1, 0), g(1, 0, 0), g(1, 2, 0), g(2, 1, 0)]);
    }

    #[test]
    fn loose_block_pickup_does_not_alert() {
        let mut prev = Structure::new(g(0, 0, 0)).unwrap();
        prev.insert(g(1, 0, 0), BlockState::AwaitingPlacement).unwrap();
        let now = Structure::new(g(0, 0, 0)).unwrap();
        assert!(heartbeat_tick(&now, &prev).is_empty());
    }

    #[test]
    fn localize_faces() {
        let s = Structure::from_cells(g(0, 0, 0), (1..4).map(|x| g(x, 0, 0))).unwrap();
        assert_eq!(localize(&s, Face::new(g(0, 0, 0), FaceDir::PosZ)), Ok(g(0, 0, 0)));
        assert_eq!(localize(&s, Face::new(g(3, 0, 0), FaceDir::PosZ)), Ok(g(3, 0, 0)));
        assert_eq!(hop_count(&s, g(3, 0, 0), g(0, 0, 0)), Ok(3));
        let covered = Face::new(g(0, 0, 0), FaceDir::PosX);
        assert_eq!(localize(&s, covered), Err(NetError::StaleFace(covered)));
        let mut t = s.clone();
        t.remove(g(3, 0, 0)).unwrap();
        let stale = Face::new(g(3, 0, 0), FaceDir::PosZ);
        assert_eq!(localize(&t, stale), Err(NetError::StaleFace(stale)));
    }

    #[test]
    fn dedup_on_repeat_delivery() {
        let s = Structure::from_cells(g(0, 0, 0), [g(1, 0, 0)]).unwrap();
        let mut net = NetState::new();
        let lat = LatencyModel::default();
        let msg = net.message(g(0, 0, 0), Payload::ConstructionComplete, 0);
        flood(&mut net, &s, msg.clone(), &lat);
        // A second copy of the same id arriving later is ignored.
        net.in_flight.insert(InFlight { deliver_at: 900, to: g(1, 0, 0), from: g(0, 0, 0), msg_id: msg.id });
        assert_eq!(net.deliver_due(&s, 10_000).len(), 2);
        assert_eq!(net.delivered, 2);
    }
}

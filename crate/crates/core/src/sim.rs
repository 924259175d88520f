//! Deterministic tick engine: structure, network, planner and agents.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{
    self, mobility, pose_for, ActionCosts, AgentState, BehaviorKind, WorldCommand, WorldView, LOOSE_MOBILITY_FLOOR,
    MOBILITY_FLOOR,
};
use crate::blocknet::{flood, LatencyModel, NetState, Payload};
use crate::kinematics::{InchwormGeometry, MoveCache};
use crate::lattice::{
    check_buildable, flood_within, neighbors, BlockState, Blueprint, Face, FaceDir, GridCoord, LatticeError, Structure,
};
use crate::planner::{LooseBlock, PlannerContext, PlannerError, PlannerEvent, PlannerState, Target};

pub const DEFAULT_DIVISION_EXTENT: u32 = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedSchedule {
    /// A block appears whenever the feed point is free and blocks are needed.
    Saturating,
    /// At most one block every `interval` ticks.
    Periodic { interval: u64 },
    /// One block released at each listed tick; late releases queue.
    Scripted { ticks: Vec<u64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub blueprint: Blueprint,
    pub agent_count: usize,
    /// Fixed start faces on the home block; random staged deployment if `None`.
    pub agent_start_faces: Option<Vec<Face>>,
    pub action_costs: ActionCosts,
    pub latency: LatencyModel,
    pub feed_schedule: FeedSchedule,
    pub failure_injections: Vec<(u64, GridCoord)>,
    pub rng_seed: u64,
    pub max_ticks: u64,
    pub geometry: InchwormGeometry,
    pub division_extent: u32,
}

impl Scenario {
    pub fn new(blueprint: Blueprint, agent_count: usize) -> Self {
        Self {
            blueprint,
            agent_count,
            agent_start_faces: None,
            action_costs: ActionCosts::default(),
            latency: LatencyModel::default(),
            feed_schedule: FeedSchedule::Saturating,
            failure_injections: Vec::new(),
            rng_seed: 0,
            max_ticks: 2_000_000,
            geometry: InchwormGeometry::default(),
            division_extent: DEFAULT_DIVISION_EXTENT,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.agent_count == 0 {
            return Err(SimError::NoAgents);
        }
        self.action_costs.validate().map_err(SimError::Config)?;
        self.latency.validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.geometry.validate().map_err(|e| SimError::Config(e.to_string()))?;
        if let FeedSchedule::Periodic { interval: 0 } = self.feed_schedule {
            return Err(SimError::Config("feed interval must be positive".into()));
        }
        let bp = &self.blueprint;
        if let Some(v) = check_buildable(bp).violations() {
            return Err(SimError::Unbuildable(v.to_vec()));
        }
        let home = bp.home();
        let feed = bp.feeding();
        if feed != home && home.manhattan(feed) != 1 {
            return Err(SimError::Config(format!("feeding cell {feed} must be home or adjacent to it")));
        }
        let column: Vec<i32> = bp.cells().iter().filter(|c| c.column() == feed.column()).map(|c| c.z).collect();
        if column.iter().enumerate().any(|(i, &z)| z != i as i32) {
            return Err(SimError::Config(format!("feeding column at {feed} must be contiguous from the ground")));
        }
        for z in 0..=bp.max_z() {
            let feed_here = GridCoord::new(feed.x, feed.y, z);
            let layer: BTreeSet<GridCoord> = bp.layer(z).filter(|&c| c != feed_here || c == home).collect();
            let seeds: Vec<GridCoord> = if z == 0 {
                vec![home]
            } else {
                layer.iter().copied().filter(|c| bp.contains(c.step(FaceDir::NegZ))).collect()
            };
            let reached = flood_within(&layer, &seeds);
            if let Some(&c) = layer.difference(&reached).next() {
                return Err(SimError::Config(format!("cell {c} is only reachable through the feeding cell")));
            }
        }
        if let Some(faces) = &self.agent_start_faces {
            if faces.len() != self.agent_count {
                return Err(SimError::Config(format!("{} start faces for {} agents", faces.len(), self.agent_count)));
            }
            let initial = Structure::new(home).map_err(SimError::Lattice)?;
            let mut seen = BTreeSet::new();
            for &f in faces {
                if !initial.is_foothold(f) || !seen.insert(f) {
                    return Err(SimError::Config(format!("start face {f:?} is not a free exposed home face")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("scenario needs at least one agent")]
    NoAgents,
    #[error("blueprint is not buildable; unreachable cells: {0:?}")]
    Unbuildable(Vec<GridCoord>),
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error("cannot fail {0}: {1}")]
    Failure(GridCoord, &'static str),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub id: usize,
    /// Milliseconds per behaviour.
    pub tallies: BTreeMap<BehaviorKind, u64>,
    pub total_ms: u64,
    pub ferry_share: f64,
    pub steps: u64,
    pub placed: u64,
    pub dropped: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivisionTiming {
    pub id: usize,
    pub layer_z: i32,
    pub cells: usize,
    pub claimed_at: Option<u64>,
    pub built_at: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub completed: bool,
    pub total_ticks: u64,
    pub total_seconds: f64,
    pub agents: Vec<AgentMetrics>,
    pub messages_sent: u64,
    pub deliveries: u64,
    pub queries: u64,
    pub blocks_fed: u64,
    pub rejections: u64,
    pub divisions: Vec<DivisionTiming>,
    pub diagnostics: Vec<String>,
}

impl RunMetrics {
    /// Aggregate share of total agent time spent in `kinds`.
    pub fn share(&self, kinds: &[BehaviorKind]) -> f64 {
        let total: u64 = self.agents.iter().map(|a| a.total_ms).sum();
        if total == 0 {
            return 0.0;
        }
        let part: u64 =
            self.agents.iter().flat_map(|a| kinds.iter().map(move |k| a.tallies.get(k).copied().unwrap_or(0))).sum();
        part as f64 / total as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: u64,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agent: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cell: Option<GridCoord>,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// Writes records as line-delimited JSON.
pub fn trace_to_jsonl(trace: &[TraceRecord]) -> String {
    let mut out = String::new();
    for r in trace {
        out.push_str(&serde_json::to_string(r).expect("trace serialize"));
        out.push('\n');
    }
    out
}

/// Mutable simulation world.
pub struct World {
    pub tick: u64,
    pub structure: Structure,
    pub planner: PlannerState,
    pub net: NetState,
    pub agents: Vec<AgentState>,
    pub loose: BTreeMap<GridCoord, LooseBlock>,
    pub trace: Vec<TraceRecord>,
    scenario: Scenario,
    rng: ChaCha8Rng,
    moves: RefCell<MoveCache>,
    previous: Structure,
    events: Vec<PlannerEvent>,
    /// Offline blocks waiting to be detached, with the tick they failed.
    offline: BTreeMap<GridCoord, u64>,
    /// Cells lost to failure and not yet replaced, with their alerted neighbours.
    lost: BTreeMap<GridCoord, BTreeSet<GridCoord>>,
    /// Faces whose agents would be trapped by a refused placement.
    nudged: BTreeSet<Face>,
    assignments: BTreeMap<u64, (usize, usize)>,
    next_feed: u64,
    feed_credit: usize,
    queries: u64,
    blocks_fed: u64,
    rejections: u64,
    steps: Vec<u64>,
    placed: Vec<u64>,
    dropped: Vec<u64>,
}

impl World {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        scenario.validate()?;
        let structure = Structure::new(scenario.blueprint.home())?;
        let planner = PlannerState::new(&scenario.blueprint, scenario.division_extent)?;
        let n = scenario.agent_count;
        let mut agents: Vec<AgentState> = (0..n).map(AgentState::new).collect();
        let mut events = Vec::new();
        if let Some(faces) = &scenario.agent_start_faces {
            for (a, &f) in agents.iter_mut().zip(faces) {
                a.pose = Some(pose_for(f, false));
                events.push(PlannerEvent::AgentIdle(a.id));
            }
        }
        Ok(Self {
            tick: 0,
            previous: structure.clone(),
            structure,
            planner,
            net: NetState::new(),
            agents,
            loose: BTreeMap::new(),
            trace: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(scenario.rng_seed),
            scenario,
            moves: RefCell::new(MoveCache::new()),
            events,
            offline: BTreeMap::new(),
            lost: BTreeMap::new(),
            nudged: BTreeSet::new(),
            assignments: BTreeMap::new(),
            next_feed: 0,
            feed_credit: 0,
            queries: 0,
            blocks_fed: 0,
            rejections: 0,
            steps: vec![0; n],
            placed: vec![0; n],
            dropped: vec![0; n],
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    fn now_ms(&self) -> u64 {
        self.tick * self.scenario.action_costs.tick_ms
    }

    fn record(&mut self, kind: &str, agent: Option<usize>, cell: Option<GridCoord>, detail: String) {
        self.trace.push(TraceRecord { tick: self.tick, kind: kind.to_string(), agent, cell, detail });
    }

    /// Occupied cells equal the blueprint and every block is incorporated.
    pub fn is_complete(&self) -> bool {
        let bp = self.scenario.blueprint.cells();
        self.structure.len() == bp.len()
            && self.structure.iter().all(|(c, s)| s == BlockState::Incorporated && bp.contains(&c))
    }

    fn anchors(&self) -> BTreeMap<usize, Face> {
        self.agents.iter().filter_map(|a| a.anchor().map(|f| (a.id, f))).collect()
    }

    fn covers_anchor(&self, c: GridCoord) -> bool {
        self.agents.iter().any(|a| a.anchor().is_some_and(|f| f.outward() == c))
    }

    /// Agents whose mobility adding a block at `c` would cut.
    fn trapped_by(&self, c: GridCoord, state: BlockState) -> Vec<usize> {
        let near: Vec<&AgentState> =
            self.agents.iter().filter(|a| a.anchor().is_some_and(|f| chebyshev(f.cell, c) <= TRAP_RADIUS)).collect();
        if near.is_empty() {
            return Vec::new();
        }
        let mut after = self.structure.clone();
        if after.insert(c, state).is_err() {
            return Vec::new();
        }
        let geo = &self.scenario.geometry;
        let floor = if state == BlockState::AwaitingPlacement { LOOSE_MOBILITY_FLOOR } else { MOBILITY_FLOOR };
        near.iter()
            .filter(|a| {
                let f = a.anchor().expect("filtered on anchor");
                let carrying = a.carried.is_some();
                let now = mobility(&self.structure, geo, f, carrying, floor);
                mobility(&after, geo, f, carrying, floor) < now.min(floor)
            })
            .map(|a| a.id)
            .collect()
    }

    /// Whether adding a block at `c` would trap an agent; trapped agents are
    /// asked to move on.
    fn would_trap(&mut self, c: GridCoord, state: BlockState) -> bool {
        let victims = self.trapped_by(c, state);
        for &v in &victims {
            if let Some(f) = self.agents[v].anchor() {
                self.nudged.insert(f);
            }
        }
        !victims.is_empty()
    }

    /// Marks a block failed. The next heartbeat raises alerts around it and
    /// the block is detached one tick later.
    pub fn inject_failure(&mut self, cell: GridCoord) -> Result<(), SimError> {
        let why = if cell == self.structure.home() {
            Some("home block is the single point of coordination")
        } else if !self.structure.is_occupied(cell) {
            Some("cell is empty")
        } else if self.loose.contains_key(&cell) {
            Some("block is not part of the structure")
        } else if self.offline.contains_key(&cell) {
            Some("block already failed")
        } else if self.structure.removal_disconnects(cell) {
            Some("removal would disconnect the structure")
        } else {
            None
        };
        if let Some(why) = why {
            return Err(SimError::Failure(cell, why));
        }
        if !self.previous.is_occupied(cell) {
            // Placed since the last heartbeat; its neighbours already see it.
            self.previous.insert(cell, BlockState::Incorporated)?;
        }
        self.structure.set_state(cell, BlockState::Offline)?;
        self.offline.insert(cell, self.tick);
        self.record("failure", None, Some(cell), String::new());
        Ok(())
    }

    fn heartbeat(&mut self) {
        if self.now_ms() % self.scenario.latency.heartbeat_period_ms >= self.scenario.action_costs.tick_ms {
            return;
        }
        if self.previous.version() == self.structure.version() && self.previous == self.structure {
            return;
        }
        let alerts = crate::blocknet::heartbeat_tick(&self.structure, &self.previous);
        let mut raised = Vec::new();
        for (c, s) in alerts {
            if self.structure.state(c) != Some(s) {
                self.structure.set_state(c, s).expect("alerting block exists");
                raised.push(c);
                self.record("alert", None, Some(c), String::new());
            }
        }
        let failed: Vec<GridCoord> = self.offline.keys().copied().filter(|c| !self.lost.contains_key(c)).collect();
        for cell in failed {
            let around: BTreeSet<GridCoord> = neighbors(cell)
                .into_iter()
                .filter(|&n| self.structure.state(n) == Some(BlockState::NeighborAlert))
                .collect();
            if let Some(&origin) = around.first() {
                let msg = self.net.message(origin, Payload::BlockRemoved(cell), self.now_ms());
                flood(&mut self.net, &self.structure, msg, &self.scenario.latency);
            }
            self.lost.insert(cell, around);
        }
        self.previous = self.structure.clone();
    }

    fn detach_failed(&mut self) {
        let due: Vec<GridCoord> = self.offline.iter().filter(|(_, &t)| t < self.tick).map(|(&c, _)| c).collect();
        for cell in due {
            self.offline.remove(&cell);
            self.structure.remove(cell).expect("failed block present");
            self.moves.borrow_mut().invalidate_near(&[cell]);
            self.record("detach", None, Some(cell), String::new());
            for i in 0..self.agents.len() {
                let Some(f) = self.agents[i].anchor() else { continue };
                if self.structure.is_foothold(f) {
                    continue;
                }
                let taken: BTreeSet<Face> =
                    self.agents.iter().filter(|a| a.id != i).filter_map(|a| a.anchor()).collect();
                let origin = f.center2();
                let spot = self.structure.footholds().into_iter().filter(|g| !taken.contains(g)).min_by_key(|g| {
                    let c = g.center2();
                    ((0..3).map(|k| origin[k].abs_diff(c[k])).sum::<u32>(), *g)
                });
                let agent = &mut self.agents[i];
                agent.plan = None;
                agent.stale = true;
                match spot {
                    Some(g) => {
                        agent.pose = Some(pose_for(g, agent.carried.is_some()));
                        self.record("relocate", Some(i), Some(g.cell), format!("{:?}", g.dir));
                    }
                    None => agent.pose = None,
                }
            }
        }
    }

    fn deliver(&mut self) {
        let deliveries = self.net.deliver_due(&self.structure, self.now_ms());
        let home = self.structure.home();
        let mut reached: BTreeMap<u64, BTreeSet<usize>> = BTreeMap::new();
        for d in &deliveries {
            for a in &mut self.agents {
                if a.anchor().is_some_and(|f| f.cell == d.to) {
                    a.inbox.push(d.msg_id);
                    reached.entry(d.msg_id).or_default().insert(a.id);
                }
            }
            if d.to == home {
                if let Some(Payload::BlockRemoved(c)) = self.net.get(d.msg_id).map(|m| m.payload.clone()) {
                    self.events.push(PlannerEvent::BlockLost(c));
                }
            }
        }
        let pending: Vec<u64> = self.assignments.keys().copied().collect();
        for id in pending {
            let (agent, division) = self.assignments[&id];
            let arrived = reached.get(&id).is_some_and(|s| s.contains(&agent));
            let exhausted = !self.net.in_flight.iter().any(|f| f.msg_id == id);
            if arrived || exhausted {
                self.assignments.remove(&id);
                self.agents[agent].assignment = Some(division);
            }
        }
    }

    fn broadcast(&mut self, payloads: Vec<Payload>) {
        let home = self.structure.home();
        for p in payloads {
            match &p {
                Payload::DivisionAssignment { agent, division } => {
                    self.record("assign", Some(*agent), None, format!("division {division}"));
                }
                Payload::LayerComplete(z) => self.record("layer_complete", None, None, format!("z {z}")),
                Payload::ConstructionComplete => self.record("construction_complete", None, None, String::new()),
                _ => {}
            }
            let assignment = match p {
                Payload::DivisionAssignment { agent, division } => Some((agent, division)),
                _ => None,
            };
            let msg = self.net.message(home, p, self.now_ms());
            let id = msg.id;
            flood(&mut self.net, &self.structure, msg, &self.scenario.latency);
            if let Some(a) = assignment {
                self.assignments.insert(id, a);
            }
        }
    }

    fn planner_events(&mut self) -> Result<(), SimError> {
        let events = std::mem::take(&mut self.events);
        let anchors: Vec<(usize, Face)> = self.anchors().into_iter().collect();
        for e in events {
            let ctx = PlannerContext { structure: &self.structure, agents: &anchors, tick: self.tick };
            let out = self.planner.on_event(e, &ctx)?;
            self.broadcast(out);
        }
        Ok(())
    }

    fn supply(&self) -> usize {
        self.loose.len() + self.agents.iter().filter(|a| a.carried.is_some()).count()
    }

    fn feed(&mut self) -> Result<(), SimError> {
        if let Some(c) = self.planner.feed_cell_due(&self.structure) {
            let ok = if self.loose.remove(&c).is_some() {
                self.structure.set_state(c, BlockState::Incorporated)?;
                true
            } else if !self.structure.is_occupied(c)
                && !self.covers_anchor(c)
                && !self.would_trap(c, BlockState::Incorporated)
            {
                self.structure.insert(c, BlockState::Incorporated)?;
                self.blocks_fed += 1;
                true
            } else {
                false
            };
            if ok {
                self.moves.borrow_mut().invalidate_near(&[c]);
                self.events.push(PlannerEvent::BlockPlaced(c));
                self.record("feed_place", None, Some(c), String::new());
                return Ok(());
            }
        }
        match &self.scenario.feed_schedule {
            FeedSchedule::Saturating => self.feed_credit = 1,
            FeedSchedule::Periodic { interval } => {
                if self.tick >= self.next_feed {
                    self.feed_credit = 1;
                    self.next_feed = self.tick + interval;
                }
            }
            FeedSchedule::Scripted { ticks } => {
                self.feed_credit += ticks.iter().filter(|&&t| t == self.tick).count();
            }
        }
        if self.feed_credit == 0 || self.planner.is_complete() {
            return Ok(());
        }
        if self.planner.blocks_needed(&self.structure) <= self.supply() {
            return Ok(());
        }
        let p = self.planner.feed_point(&self.structure);
        if self.structure.is_occupied(p) || self.covers_anchor(p) || self.would_trap(p, BlockState::AwaitingPlacement) {
            return Ok(());
        }
        self.structure.insert(p, BlockState::AwaitingPlacement)?;
        self.moves.borrow_mut().invalidate_near(&[p]);
        self.loose.insert(p, LooseBlock { target: None, last_carrier: None });
        self.feed_credit -= 1;
        self.blocks_fed += 1;
        self.events.push(PlannerEvent::BlockFed(p));
        self.record("spawn", None, Some(p), String::new());
        Ok(())
    }

    /// Gives blocks without a live target a new one.
    fn retarget(&mut self) {
        let mut in_transit: BTreeMap<Target, usize> = BTreeMap::new();
        let keep = |t: Option<Target>, planner: &PlannerState| t.filter(|&t| planner.target_valid(t));
        for b in self.loose.values_mut() {
            b.target = keep(b.target, &self.planner);
            if let Some(t) = b.target {
                *in_transit.entry(t).or_default() += 1;
            }
        }
        for a in &mut self.agents {
            if let Some(b) = &mut a.carried {
                b.target = keep(b.target, &self.planner);
                if let Some(t) = b.target {
                    *in_transit.entry(t).or_default() += 1;
                }
            }
        }
        for a in &mut self.agents {
            if let Some(b) = &mut a.carried {
                if b.target.is_none() {
                    b.target = self.planner.choose_target(&self.structure, &in_transit);
                    if let Some(t) = b.target {
                        *in_transit.entry(t).or_default() += 1;
                    }
                }
            }
        }
        for b in self.loose.values_mut() {
            if b.target.is_none() {
                b.target = self.planner.choose_target(&self.structure, &in_transit);
                if let Some(t) = b.target {
                    *in_transit.entry(t).or_default() += 1;
                }
            }
        }
    }

    fn handlers(&self) -> BTreeMap<GridCoord, usize> {
        let deployed: Vec<usize> = self.agents.iter().filter(|a| a.pose.is_some()).map(|a| a.id).collect();
        let mut out = BTreeMap::new();
        for (&c, b) in &self.loose {
            if let Some(a) = self.planner.handler(c, b, &deployed) {
                if self.agents[a].carried.is_none() {
                    out.insert(c, a);
                }
            }
        }
        out
    }

    fn wanted(&self) -> BTreeSet<GridCoord> {
        let mut out = BTreeSet::new();
        if !self.planner.is_complete() {
            out.insert(self.planner.feed_point(&self.structure));
        }
        out.extend(self.planner.repairs().iter().copied());
        for a in &self.agents {
            if let Some(plan) = &a.plan {
                if let behavior::Purpose::Place { at, .. } = plan.purpose {
                    out.insert(at);
                }
            }
        }
        for d in self.planner.divisions() {
            if d.state == crate::planner::DivisionState::Building {
                if let Some(c) = self.planner.next_target(d, &self.structure, |_| false) {
                    out.insert(c);
                }
            }
        }
        out
    }

    fn deploy(&mut self) {
        let Some(i) = self.agents.iter().position(|a| a.pose.is_none()) else { return };
        let home = self.structure.home();
        let feed = self.scenario.blueprint.feeding();
        let z = self.planner.layer_z();
        let taken: BTreeSet<Face> = self.agents.iter().filter_map(|a| a.anchor()).collect();
        let wanted = self.wanted();
        let candidates: Vec<Face> = FaceDir::ALL
            .iter()
            .map(|&d| Face::new(home, d))
            .filter(|f| {
                let out = f.outward();
                self.structure.is_foothold(*f)
                    && !taken.contains(f)
                    && out.column() != feed.column()
                    && !wanted.contains(&out)
                    && !(out.z == z && self.scenario.blueprint.contains(out))
                    && !taken.iter().any(|t| t.outward() == out)
            })
            .collect();
        // Keep one home face free so a carrier can always get off the feed.
        if candidates.len() < 2 {
            return;
        }
        let Some(&f) = candidates.choose(&mut self.rng) else { return };
        self.agents[i].pose = Some(pose_for(f, false));
        self.events.push(PlannerEvent::AgentIdle(i));
        self.record("deploy", Some(i), Some(home), format!("{:?}", f.dir));
    }

    fn reject(&mut self, i: usize, command: &WorldCommand, why: &str) {
        let quantum = self.scenario.action_costs.tick_ms;
        let a = &mut self.agents[i];
        if let Some(t) = a.tallies.get_mut(&a.active) {
            *t -= quantum;
        }
        a.tally(BehaviorKind::Wait, quantum);
        a.active = BehaviorKind::Wait;
        a.busy_ticks = 0;
        a.plan = None;
        self.rejections += 1;
        let cell = match command {
            WorldCommand::TakeStep(f) => Some(f.cell),
            WorldCommand::PickBlock(c) | WorldCommand::PlaceBlock { at: c, .. } => Some(*c),
            _ => None,
        };
        self.record("reject", Some(i), cell, format!("{} {why}", command.kind()));
    }

    /// Applies commands in agent-id order. Earlier commands in the same tick
    /// take precedence; illegal or conflicting ones become a Wait.
    fn arbitrate(&mut self, commands: Vec<(usize, WorldCommand)>) -> Result<(), SimError> {
        let mut changed = Vec::new();
        for (i, cmd) in commands {
            match &cmd {
                WorldCommand::None => {}
                WorldCommand::SendQuery { .. } => {
                    self.queries += 1;
                    self.record("query", Some(i), self.agents[i].anchor().map(|f| f.cell), String::new());
                }
                WorldCommand::TakeStep(to) => {
                    let from = self.agents[i].anchor().expect("deployed");
                    let carrying = self.agents[i].carried.is_some();
                    let taken = self.agents.iter().any(|a| a.id != i && a.anchor() == Some(*to));
                    let legal = self.structure.is_foothold(*to)
                        && !taken
                        && self.moves.borrow_mut().check(&self.structure, &self.scenario.geometry, from, *to, carrying);
                    if !legal {
                        self.reject(i, &cmd, if taken { "face taken" } else { "illegal step" });
                        continue;
                    }
                    self.agents[i].pose = Some(pose_for(*to, carrying));
                    self.steps[i] += 1;
                    self.record("step", Some(i), Some(to.cell), format!("{:?}", to.dir));
                }
                WorldCommand::PickBlock(c) => {
                    let Some(block) = self.loose.get(c).copied() else {
                        self.reject(i, &cmd, "no loose block");
                        continue;
                    };
                    if self.agents[i].carried.is_some() {
                        self.reject(i, &cmd, "hands full");
                        continue;
                    }
                    self.loose.remove(c);
                    self.structure.remove(*c)?;
                    changed.push(*c);
                    self.agents[i].carried = Some(block);
                    self.record("pick", Some(i), Some(*c), String::new());
                }
                WorldCommand::PlaceBlock { at, incorporate } => {
                    let Some(mut block) = self.agents[i].carried else {
                        self.reject(i, &cmd, "nothing carried");
                        continue;
                    };
                    let c = *at;
                    let state = if *incorporate { BlockState::Incorporated } else { BlockState::AwaitingPlacement };
                    let why = if c.z < 0 || self.structure.is_occupied(c) {
                        Some("cell occupied")
                    } else if self.covers_anchor(c) {
                        Some("cell covers an agent")
                    } else if *incorporate
                        && !(self.scenario.blueprint.contains(c) && PlannerState::is_placeable(&self.structure, c))
                    {
                        Some("cell not placeable")
                    } else if !*incorporate
                        && !self.structure.state(c.step(FaceDir::NegZ)).is_some_and(BlockState::is_foothold)
                    {
                        Some("no support for drop")
                    } else if self.would_trap(c, state) {
                        let tick = self.tick;
                        let refused = &mut self.agents[i].refused;
                        refused.retain(|_, until| *until > tick);
                        refused.insert(c, tick + REFUSAL_TICKS);
                        Some("would trap an agent")
                    } else {
                        None
                    };
                    if let Some(why) = why {
                        self.reject(i, &cmd, why);
                        continue;
                    }
                    self.agents[i].carried = None;
                    changed.push(c);
                    if *incorporate {
                        self.structure.insert(c, BlockState::Incorporated)?;
                        self.placed[i] += 1;
                        self.events.push(PlannerEvent::BlockPlaced(c));
                        self.record("place", Some(i), Some(c), String::new());
                        if let Some(around) = self.lost.remove(&c) {
                            for n in around {
                                if self.structure.state(n) == Some(BlockState::NeighborAlert) {
                                    self.structure.set_state(n, BlockState::Incorporated)?;
                                }
                            }
                            self.record("repaired", Some(i), Some(c), String::new());
                        }
                    } else {
                        self.structure.insert(c, BlockState::AwaitingPlacement)?;
                        block.last_carrier = Some(i);
                        self.loose.insert(c, block);
                        self.dropped[i] += 1;
                        self.record("drop", Some(i), Some(c), String::new());
                    }
                }
            }
        }
        if !changed.is_empty() {
            self.moves.borrow_mut().invalidate_near(&changed);
        }
        Ok(())
    }

    /// Advances one tick.
    pub fn step(&mut self) -> Result<(), SimError> {
        let injections: Vec<GridCoord> =
            self.scenario.failure_injections.iter().filter(|(t, _)| *t == self.tick).map(|(_, c)| *c).collect();
        for c in injections {
            if let Err(e) = self.inject_failure(c) {
                self.record("failure_rejected", None, Some(c), e.to_string());
            }
        }
        self.detach_failed();
        self.heartbeat();
        self.deliver();
        self.planner_events()?;
        self.feed()?;
        self.retarget();
        for a in &mut self.agents {
            if a.assignment.is_some_and(|d| self.planner.division(d).is_none()) {
                a.assignment = None;
            }
        }
        self.deploy();
        let handlers = self.handlers();
        let wanted = self.wanted();
        let anchors = self.anchors();
        let mut requested: BTreeSet<Face> = self.agents.iter().filter_map(|a| a.request).collect();
        requested.append(&mut self.nudged);
        let mut next = Vec::with_capacity(self.agents.len());
        let mut commands = Vec::new();
        {
            let view = WorldView {
                tick: self.tick,
                structure: &self.structure,
                geometry: &self.scenario.geometry,
                costs: &self.scenario.action_costs,
                latency: &self.scenario.latency,
                planner: &self.planner,
                loose: &self.loose,
                anchors: &anchors,
                handlers: &handlers,
                wanted: &wanted,
                requested: &requested,
                moves: &self.moves,
            };
            for a in &self.agents {
                let (s, cmd) = behavior::tick(a, &view);
                if cmd != WorldCommand::None {
                    commands.push((a.id, cmd));
                }
                next.push(s);
            }
        }
        self.agents = next;
        self.arbitrate(commands)?;
        #[cfg(debug_assertions)]
        if self.structure.version() != self.previous.version() {
            self.structure.validate()?;
        }
        self.tick += 1;
        Ok(())
    }

    pub fn metrics(&self) -> RunMetrics {
        let agents = self
            .agents
            .iter()
            .map(|a| {
                let total = a.total_ms();
                let ferry = a.tallies.get(&BehaviorKind::Ferry).copied().unwrap_or(0);
                AgentMetrics {
                    id: a.id,
                    tallies: a.tallies.clone(),
                    total_ms: total,
                    ferry_share: if total == 0 { 0.0 } else { ferry as f64 / total as f64 },
                    steps: self.steps[a.id],
                    placed: self.placed[a.id],
                    dropped: self.dropped[a.id],
                }
            })
            .collect();
        let completed = self.is_complete();
        let mut diagnostics = Vec::new();
        if !completed {
            diagnostics.push(format!(
                "stopped at tick {} with {} of {} blueprint cells incorporated",
                self.tick,
                self.structure
                    .iter()
                    .filter(|(c, s)| *s == BlockState::Incorporated && self.scenario.blueprint.contains(*c))
                    .count(),
                self.scenario.blueprint.len()
            ));
            diagnostics.push(format!("current layer z={}", self.planner.layer_z()));
            for d in self.planner.divisions() {
                let left = self.planner.outstanding(d, &self.structure).len();
                if left > 0 {
                    diagnostics.push(format!(
                        "division {} {:?} claimed by {:?}: {} cells outstanding",
                        d.id, d.state, d.claimed_by, left
                    ));
                }
            }
            for (c, b) in &self.loose {
                diagnostics.push(format!("loose block at {c} target {:?}", b.target));
            }
            for a in &self.agents {
                diagnostics.push(format!(
                    "agent {} at {} carrying {:?} assignment {:?} active {:?}",
                    a.id,
                    a.anchor().map_or_else(|| "nowhere".to_string(), |f| f.to_string()),
                    a.carried.and_then(|b| b.target),
                    a.assignment,
                    a.active
                ));
            }
        }
        RunMetrics {
            completed,
            total_ticks: self.tick,
            total_seconds: (self.tick * self.scenario.action_costs.tick_ms) as f64 / 1000.0,
            agents,
            messages_sent: self.net.sent,
            deliveries: self.net.delivered,
            queries: self.queries,
            blocks_fed: self.blocks_fed,
            rejections: self.rejections,
            divisions: self
                .planner
                .records()
                .into_iter()
                .map(|r| DivisionTiming {
                    id: r.id,
                    layer_z: r.layer_z,
                    cells: r.cells,
                    claimed_at: r.claimed_at,
                    built_at: r.built_at,
                })
                .collect(),
            diagnostics,
        }
    }
}

const TRAP_RADIUS: i32 = 4;
/// Ticks an agent avoids a cell after a placement there was refused.
const REFUSAL_TICKS: u64 = 60;

fn chebyshev(a: GridCoord, b: GridCoord) -> i32 {
    (a.x - b.x).abs().max((a.y - b.y).abs()).max((a.z - b.z).abs())
}

/// Runs a scenario to completion or `max_ticks` and returns metrics and the
/// event trace.
pub fn run_traced(scenario: Scenario) -> Result<(RunMetrics, Vec<TraceRecord>), SimError> {
    let mut world = World::new(scenario)?;
    while !world.is_complete() && world.tick < world.scenario.max_ticks {
        world.step()?;
    }
    let metrics = world.metrics();
    Ok((metrics, std::mem::take(&mut world.trace)))
}

pub fn run(scenario: Scenario) -> Result<RunMetrics, SimError> {
    run_traced(scenario).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(x: i32, y: i32, z: i32) -> GridCoord {
        GridCoord::new(x, y, z)
    }

    fn plane(n: i32) -> Blueprint {
        let cells: Vec<GridCoord> = (0..n).flat_map(|x| (0..n).map(move |y| g(x, y, 0))).collect();
        Blueprint::new(cells, g(0, 0, 0), g(1, 0, 0)).unwrap()
    }

    #[test]
    fn home_only_completes_at_tick_zero() {
        let bp = Blueprint::new([g(0, 0, 0)], g(0, 0, 0), g(0, 0, 0)).unwrap();
        let m = run(Scenario::new(bp, 1)).unwrap();
        assert!(m.completed);
        assert_eq!(m.total_ticks, 0);
    }

    #[test]
    fn small_plane_completes() {
        for agents in 1..=2 {
            let m = run(Scenario::new(plane(3), agents)).unwrap();
            assert!(m.completed, "{agents} agents: {:?}", m.diagnostics);
            for a in &m.agents {
                assert_eq!(a.total_ms, m.total_ticks * 1000);
            }
        }
    }

    #[test]
    fn max_ticks_reports_diagnostics() {
        let mut s = Scenario::new(plane(3), 1);
        s.max_ticks = 1;
        let m = run(s).unwrap();
        assert!(!m.completed);
        assert!(!m.diagnostics.is_empty());
    }

    #[test]
    fn rejects_bad_scenarios() {
        assert_eq!(Scenario::new(plane(3), 0).validate(), Err(SimError::NoAgents));
        let far = Blueprint::new((0..4).map(|x| g(x, 0, 0)), g(0, 0, 0), g(3, 0, 0)).unwrap();
        assert!(matches!(Scenario::new(far, 1).validate(), Err(SimError::Config(_))));
    }

    #[test]
    fn failure_rules() {
        let mut w = World::new(Scenario::new(plane(3), 1)).unwrap();
        assert!(w.inject_failure(g(0, 0, 0)).is_err());
        assert!(w.inject_failure(g(2, 2, 0)).is_err());
    }

    #[test]
    fn failure_alerts_neighbours_and_is_repaired() {
        let mut w = World::new(Scenario::new(plane(4), 2)).unwrap();
        let cell = g(2, 2, 0);
        while !w.structure.is_occupied(cell) || w.agents.iter().any(|a| a.anchor().is_some_and(|f| f.cell == cell)) {
            w.step().unwrap();
        }
        let expected: BTreeSet<GridCoord> = neighbors(cell)
            .into_iter()
            .filter(|&n| w.structure.state(n).is_some_and(BlockState::is_foothold))
            .collect();
        w.inject_failure(cell).unwrap();
        w.step().unwrap();
        let alerted: BTreeSet<GridCoord> =
            w.structure.iter().filter(|&(_, s)| s == BlockState::NeighborAlert).map(|(c, _)| c).collect();
        assert_eq!(alerted, expected);
        while !w.is_complete() && w.tick < 100_000 {
            w.step().unwrap();
        }
        assert!(w.is_complete());
        assert!(w.trace.iter().any(|r| r.kind == "repaired" && r.cell == Some(cell)));
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let mut s = Scenario::new(plane(4), 3);
        s.rng_seed = 7;
        let (m1, t1) = run_traced(s.clone()).unwrap();
        let (m2, t2) = run_traced(s).unwrap();
        assert_eq!(m1.to_json(), m2.to_json());
        assert_eq!(trace_to_jsonl(&t1), trace_to_jsonl(&t2));
    }

    #[test]
    fn periodic_feed_is_no_faster() {
        let fast = run(Scenario::new(plane(3), 1)).unwrap();
        let mut s = Scenario::new(plane(3), 1);
        s.feed_schedule = FeedSchedule::Periodic { interval: 500 };
        let slow = run(s).unwrap();
        assert!(slow.completed);
        assert!(slow.total_ticks >= fast.total_ticks);
    }

    #[test]
    fn fixed_start_faces() {
        let mut s = Scenario::new(plane(3), 2);
        s.agent_start_faces = Some(vec![Face::new(g(0, 0, 0), FaceDir::PosZ), Face::new(g(0, 0, 0), FaceDir::NegX)]);
        let w = World::new(s.clone()).unwrap();
        assert_eq!(w.agents[1].anchor(), Some(Face::new(g(0, 0, 0), FaceDir::NegX)));
        assert!(run(s.clone()).unwrap().completed);
        s.agent_start_faces = Some(vec![Face::new(g(0, 0, 0), FaceDir::NegZ); 2]);
        assert!(matches!(s.validate(), Err(SimError::Config(_))));
    }
}

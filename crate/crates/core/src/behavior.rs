//! Inchworm behaviour tree and per-behaviour time accounting.
//!
//! Root selector, ticked top to bottom, left to right:
//!
//! 1. Update: inbox non-empty, pose stale, or plan invalidated.
//! 2. Move (yield): the anchor blocks a cell or face someone else needs.
//! 3. Job: fetch, carry and place or drop a block (Build or Ferry).
//! 4. Move (station): walk to the claimed division.
//! 5. Wait.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::blocknet::{hop_count, LatencyModel, Payload};
use crate::facestar::{face_neighbors, search, PathPlan};
use crate::kinematics::{is_reachable_and_collision_free, FreeEnd, InchwormGeometry, MoveCache, Pose};
use crate::lattice::{BlockState, Face, FaceDir, GridCoord, Structure};
use crate::planner::{DivisionState, LooseBlock, PlannerState, Target};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BehaviorKind {
    Update,
    Wait,
    Move,
    Build,
    Ferry,
}

impl BehaviorKind {
    pub const ALL: [BehaviorKind; 5] =
        [BehaviorKind::Update, BehaviorKind::Wait, BehaviorKind::Move, BehaviorKind::Build, BehaviorKind::Ferry];

    pub fn label(self) -> &'static str {
        match self {
            BehaviorKind::Update => "update",
            BehaviorKind::Wait => "wait",
            BehaviorKind::Move => "move",
            BehaviorKind::Build => "build",
            BehaviorKind::Ferry => "ferry",
        }
    }
}

/// Action durations in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionCosts {
    pub step_ms: u64,
    pub engage_ms: u64,
    pub disengage_ms: u64,
    pub pick_ms: u64,
    pub place_ms: u64,
    pub tick_ms: u64,
}

impl Default for ActionCosts {
    fn default() -> Self {
        Self {
            step_ms: 40_000,
            engage_ms: 20_000,
            disengage_ms: 10_000,
            pick_ms: 30_000,
            place_ms: 30_000,
            tick_ms: 1_000,
        }
    }
}

impl ActionCosts {
    /// Free motion part of a step once engaging and disengaging are removed.
    pub fn motion_ms(&self) -> u64 {
        self.step_ms.saturating_sub(self.engage_ms + self.disengage_ms)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.tick_ms == 0 {
            return Err("tick quantum must be positive".into());
        }
        if self.step_ms < self.engage_ms + self.disengage_ms {
            return Err(format!(
                "step ({} ms) must cover engage ({} ms) plus disengage ({} ms)",
                self.step_ms, self.engage_ms, self.disengage_ms
            ));
        }
        Ok(())
    }

    /// Number of ticks an action of `ms` occupies (at least one).
    pub fn ticks(&self, ms: u64) -> u64 {
        ms.div_ceil(self.tick_ms).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorldCommand {
    TakeStep(Face),
    PickBlock(GridCoord),
    /// Set the carried block down at `at`; `incorporate` marks a final
    /// placement rather than a ferry drop.
    PlaceBlock {
        at: GridCoord,
        incorporate: bool,
    },
    /// A query routed `hops` blocks to home and back.
    SendQuery {
        payload: Payload,
        hops: u32,
    },
    None,
}

impl WorldCommand {
    pub fn kind(&self) -> &'static str {
        match self {
            WorldCommand::TakeStep(_) => "step",
            WorldCommand::PickBlock(_) => "pick",
            WorldCommand::PlaceBlock { incorporate: true, .. } => "place",
            WorldCommand::PlaceBlock { incorporate: false, .. } => "drop",
            WorldCommand::SendQuery { .. } => "query",
            WorldCommand::None => "none",
        }
    }
}

/// Simulated duration of a command.
pub fn classify_duration(command: &WorldCommand, costs: &ActionCosts, latency: &LatencyModel) -> u64 {
    match command {
        WorldCommand::TakeStep(_) => costs.step_ms,
        WorldCommand::PickBlock(_) => costs.pick_ms,
        WorldCommand::PlaceBlock { .. } => costs.place_ms,
        WorldCommand::SendQuery { hops, .. } => 2 * u64::from(*hops) * latency.per_hop_ms,
        WorldCommand::None => costs.tick_ms,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Purpose {
    Pick(GridCoord),
    Place { at: GridCoord, incorporate: bool },
    Station(usize),
    Yield,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPlan {
    pub path: PathPlan,
    /// Index in `path.faces` of the face currently anchored.
    pub at: usize,
    pub purpose: Purpose,
    pub version: u64,
}

impl AgentPlan {
    fn next_face(&self) -> Option<Face> {
        self.path.faces.get(self.at + 1).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: usize,
    /// `None` until the agent is set onto the structure.
    pub pose: Option<Pose>,
    pub carried: Option<LooseBlock>,
    pub assignment: Option<usize>,
    pub active: BehaviorKind,
    pub plan: Option<AgentPlan>,
    pub tallies: BTreeMap<BehaviorKind, u64>,
    /// Ticks still owed to the action in progress.
    pub busy_ticks: u64,
    pub inbox: Vec<u64>,
    pub stale: bool,
    pub blocked_ticks: u32,
    /// Face this agent tried to enter but found occupied.
    pub request: Option<Face>,
    /// Cells where a placement was refused, with the tick each refusal lapses.
    pub refused: BTreeMap<GridCoord, u64>,
}

impl AgentState {
    pub fn new(id: usize) -> Self {
        Self {
            id,
            pose: None,
            carried: None,
            assignment: None,
            active: BehaviorKind::Wait,
            plan: None,
            tallies: BehaviorKind::ALL.iter().map(|&k| (k, 0)).collect(),
            busy_ticks: 0,
            inbox: Vec::new(),
            stale: false,
            blocked_ticks: 0,
            request: None,
            refused: BTreeMap::new(),
        }
    }

    pub fn anchor(&self) -> Option<Face> {
        self.pose.map(|p| p.anchored_face)
    }

    pub fn total_ms(&self) -> u64 {
        self.tallies.values().sum()
    }

    /// Whether a recent refusal rules out `c` at `tick`.
    pub fn refuses(&self, c: GridCoord, tick: u64) -> bool {
        self.refused.get(&c).is_some_and(|&until| tick < until)
    }

    pub fn tally(&mut self, kind: BehaviorKind, ms: u64) {
        *self.tallies.entry(kind).or_insert(0) += ms;
    }
}

/// Read-only snapshot an agent decides on.
pub struct WorldView<'a> {
    pub tick: u64,
    pub structure: &'a Structure,
    pub geometry: &'a InchwormGeometry,
    pub costs: &'a ActionCosts,
    pub latency: &'a LatencyModel,
    pub planner: &'a PlannerState,
    pub loose: &'a BTreeMap<GridCoord, LooseBlock>,
    /// Anchored faces of every deployed agent.
    pub anchors: &'a BTreeMap<usize, Face>,
    /// Handler agent for each loose block.
    pub handlers: &'a BTreeMap<GridCoord, usize>,
    /// Cells that must not be covered by an anchored foot.
    pub wanted: &'a BTreeSet<GridCoord>,
    /// Faces other agents are waiting to enter.
    pub requested: &'a BTreeSet<Face>,
    /// Memo for the collision predicate; caching does not change results.
    pub moves: &'a RefCell<MoveCache>,
}

impl WorldView<'_> {
    fn occupied_by_other(&self, me: usize, f: Face) -> bool {
        self.anchors.iter().any(|(&a, &g)| a != me && g == f)
    }

    fn covers_anchor(&self, me: usize, c: GridCoord) -> bool {
        self.anchors.iter().any(|(&a, &g)| a != me && g.outward() == c)
    }

    fn edge_ok(&self, a: Face, b: Face, carrying: bool) -> bool {
        self.moves.borrow_mut().check(self.structure, self.geometry, a, b, carrying)
    }
}

/// Gripper faces tried when grasping or setting down at a cell.
const GRIP_ORDER: [FaceDir; 6] =
    [FaceDir::PosZ, FaceDir::PosX, FaceDir::NegX, FaceDir::PosY, FaceDir::NegY, FaceDir::NegZ];

/// Ferried blocks allowed to wait on one division border.
pub const MAX_WAITING_DROPS: usize = 2;

/// Doubled-coordinate reach used to prefilter swing targets (3.5 units).
const SWING_REACH2: u32 = 7;

/// An agent that can reach fewer faces than this is considered trapped.
pub(crate) const MOBILITY_FLOOR: usize = 6;
/// Loose blocks are picked up again, so they only need to leave an agent some room.
pub(crate) const LOOSE_MOBILITY_FLOOR: usize = 3;

/// Faces reachable from `start` by legal steps, counted up to `cap`.
pub(crate) fn mobility(
    structure: &Structure,
    geo: &InchwormGeometry,
    start: Face,
    carrying: bool,
    cap: usize,
) -> usize {
    let mut seen = BTreeSet::from([start]);
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(f) = queue.pop_front() {
        for (g, _) in face_neighbors(structure, f) {
            if seen.len() >= cap {
                return seen.len();
            }
            if !seen.contains(&g) && is_reachable_and_collision_free(structure, f, g, geo, carrying) {
                seen.insert(g);
                queue.push_back(g);
            }
        }
    }
    seen.len()
}

/// Whether setting a block at `at` from `face` would leave this agent hemmed in.
fn traps_self(view: &WorldView<'_>, face: Face, at: GridCoord) -> bool {
    let mut after = view.structure.clone();
    if after.insert(at, BlockState::Incorporated).is_err() {
        return false;
    }
    let now = mobility(view.structure, view.geometry, face, false, MOBILITY_FLOOR);
    mobility(&after, view.geometry, face, false, MOBILITY_FLOOR) < now.min(MOBILITY_FLOOR)
}

fn reach2(anchor: Face, cell: GridCoord) -> u32 {
    let a = anchor.center2();
    let c = [2 * cell.x, 2 * cell.y, 2 * cell.z];
    a[0].abs_diff(c[0]) + a[1].abs_diff(c[1]) + a[2].abs_diff(c[2])
}

/// Whether the free end can grasp or set down a block at `cell` from
/// `anchor` without moving the anchor.
pub fn can_swing_to(view: &WorldView<'_>, anchor: Face, cell: GridCoord, carrying: bool) -> bool {
    if anchor.cell == cell || anchor.outward() == cell || reach2(anchor, cell) > SWING_REACH2 {
        return false;
    }
    GRIP_ORDER.iter().any(|&d| {
        let grip = Face::new(cell, d);
        let out = grip.outward();
        out.z >= 0 && !view.structure.is_occupied(out) && view.edge_ok(anchor, grip, carrying)
    })
}

/// Node of the behaviour tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BehaviorNode {
    Sequence(Vec<BehaviorNode>),
    Selector(Vec<BehaviorNode>),
    Condition(Condition),
    Action(ActionKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    NeedsUpdate,
    MustYield,
    HasJob,
    AwayFromStation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionKind {
    Update,
    Yield,
    Job,
    Station,
    Wait,
}

/// The fixed tree every agent runs.
pub fn behavior_tree() -> BehaviorNode {
    use BehaviorNode::*;
    Selector(vec![
        Sequence(vec![Condition(self::Condition::NeedsUpdate), Action(ActionKind::Update)]),
        Sequence(vec![Condition(self::Condition::MustYield), Action(ActionKind::Yield)]),
        Sequence(vec![Condition(self::Condition::HasJob), Action(ActionKind::Job)]),
        Sequence(vec![Condition(self::Condition::AwayFromStation), Action(ActionKind::Station)]),
        Action(ActionKind::Wait),
    ])
}

/// Result of ticking the tree once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub kind: BehaviorKind,
    pub command: WorldCommand,
    pub plan: PlanChange,
    pub request: Option<Face>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PlanChange {
    Keep,
    Clear,
    Set(AgentPlan),
}

impl Outcome {
    fn new(kind: BehaviorKind, command: WorldCommand) -> Self {
        Self { kind, command, plan: PlanChange::Keep, request: None }
    }
}

fn eval(node: &BehaviorNode, agent: &AgentState, view: &WorldView<'_>) -> Option<Outcome> {
    match node {
        BehaviorNode::Selector(children) => children.iter().find_map(|c| eval(c, agent, view)),
        BehaviorNode::Sequence(children) => {
            let mut last = None;
            for c in children {
                last = Some(eval(c, agent, view)?);
            }
            last
        }
        BehaviorNode::Condition(c) => {
            check(*c, agent, view).then(|| Outcome::new(BehaviorKind::Wait, WorldCommand::None))
        }
        BehaviorNode::Action(a) => act(*a, agent, view),
    }
}

fn check(cond: Condition, agent: &AgentState, view: &WorldView<'_>) -> bool {
    let Some(anchor) = agent.anchor() else { return false };
    match cond {
        Condition::NeedsUpdate => {
            !agent.inbox.is_empty() || agent.stale || !view.structure.is_foothold(anchor) || plan_invalid(agent, view)
        }
        Condition::MustYield => {
            if agent.carried.is_some() && job_purpose(agent, view).is_some() {
                return false;
            }
            view.wanted.contains(&anchor.outward()) || view.requested.contains(&anchor)
        }
        Condition::HasJob => agent.carried.is_some() || my_pickups(agent, view).next().is_some(),
        Condition::AwayFromStation => station_division(agent, view).is_some_and(|d| !at_station(anchor, d, view)),
    }
}

/// Whether the stored plan was made against an older structure and no
/// longer replays.
fn plan_invalid(agent: &AgentState, view: &WorldView<'_>) -> bool {
    let Some(plan) = &agent.plan else { return false };
    if plan.version == view.structure.version() {
        return false;
    }
    let carrying = agent.carried.is_some();
    let faces = &plan.path.faces[plan.at..];
    for w in faces.windows(2) {
        if !view.structure.is_foothold(w[1])
            || !face_neighbors(view.structure, w[0]).iter().any(|(f, _)| *f == w[1])
            || !view.edge_ok(w[0], w[1], carrying)
        {
            return true;
        }
    }
    let last = *faces.last().expect("plan has faces");
    !accepts(plan.purpose, last, agent, view)
}

fn accepts(purpose: Purpose, face: Face, agent: &AgentState, view: &WorldView<'_>) -> bool {
    if !view.structure.is_foothold(face) || view.occupied_by_other(agent.id, face) {
        return false;
    }
    match purpose {
        Purpose::Pick(c) => view.loose.contains_key(&c) && can_swing_to(view, face, c, false),
        Purpose::Place { at, .. } => {
            face.outward().z + 1 >= at.z
                && !view.structure.is_occupied(at)
                && can_swing_to(view, face, at, true)
                && !traps_self(view, face, at)
        }
        Purpose::Station(d) => view.planner.division(d).is_some_and(|d| on_division(face, d)),
        Purpose::Yield => {
            Some(face) != agent.anchor()
                && face.dir == FaceDir::PosZ
                && !view.wanted.contains(&face.outward())
                && !view.requested.contains(&face)
        }
    }
}

fn act(action: ActionKind, agent: &AgentState, view: &WorldView<'_>) -> Option<Outcome> {
    let anchor = agent.anchor()?;
    match action {
        ActionKind::Update => Some(update(agent, view, anchor)),
        ActionKind::Yield => travel(agent, view, Purpose::Yield, BehaviorKind::Move),
        ActionKind::Job => {
            let (purpose, kind) = job_purpose(agent, view)?;
            if accepts(purpose, anchor, agent, view) {
                let command = match purpose {
                    Purpose::Pick(c) => WorldCommand::PickBlock(c),
                    Purpose::Place { at, incorporate } => WorldCommand::PlaceBlock { at, incorporate },
                    _ => WorldCommand::None,
                };
                let mut o = Outcome::new(kind, command);
                o.plan = PlanChange::Clear;
                return Some(o);
            }
            travel(agent, view, purpose, kind)
        }
        ActionKind::Station => {
            let d = station_division(agent, view)?;
            travel(agent, view, Purpose::Station(d), BehaviorKind::Move)
        }
        ActionKind::Wait => Some(Outcome::new(BehaviorKind::Wait, WorldCommand::None)),
    }
}

fn update(agent: &AgentState, view: &WorldView<'_>, anchor: Face) -> Outcome {
    if agent.stale || !view.structure.is_foothold(anchor) {
        let hops = hop_count(view.structure, anchor.cell, view.structure.home()).unwrap_or(0);
        let mut o = Outcome::new(
            BehaviorKind::Update,
            WorldCommand::SendQuery { payload: Payload::PositionQuery(anchor), hops },
        );
        o.plan = PlanChange::Clear;
        return o;
    }
    let mut o = Outcome::new(BehaviorKind::Update, WorldCommand::None);
    if plan_invalid(agent, view) {
        o.plan = PlanChange::Clear;
    }
    o
}

/// Loose blocks this agent should fetch, nearest first.
fn my_pickups<'a>(agent: &'a AgentState, view: &'a WorldView<'_>) -> impl Iterator<Item = GridCoord> + 'a {
    let anchor = agent.anchor();
    let mut cells: Vec<GridCoord> = view.handlers.iter().filter(|(_, &a)| a == agent.id).map(|(&c, _)| c).collect();
    if let Some(a) = anchor {
        cells.sort_by_key(|&c| (reach2(a, c), c));
    }
    cells.into_iter()
}

fn is_ferrier(agent: &AgentState, view: &WorldView<'_>) -> bool {
    agent.assignment.and_then(|d| view.planner.division(d)).is_some_and(|d| d.state.is_built())
}

/// What the job branch is working towards right now.
fn job_purpose(agent: &AgentState, view: &WorldView<'_>) -> Option<(Purpose, BehaviorKind)> {
    match &agent.carried {
        Some(block) => destination(agent, block, view),
        None => {
            let c = my_pickups(agent, view).next()?;
            let ferry = is_ferrier(agent, view)
                && !matches!(view.loose.get(&c).and_then(|b| b.target), Some(Target::Repair(_)));
            let kind = if ferry { BehaviorKind::Ferry } else { BehaviorKind::Build };
            Some((Purpose::Pick(c), kind))
        }
    }
}

fn place_free(view: &WorldView<'_>, me: usize, c: GridCoord) -> bool {
    c.z >= 0 && !view.structure.is_occupied(c) && !view.covers_anchor(me, c)
}

/// Where a carried block goes next.
fn destination(agent: &AgentState, block: &LooseBlock, view: &WorldView<'_>) -> Option<(Purpose, BehaviorKind)> {
    let planner = view.planner;
    let build = |at| Some((Purpose::Place { at, incorporate: true }, BehaviorKind::Build));
    match block.target? {
        Target::Repair(c) => build(c),
        Target::Division(t) => {
            let target = planner.division(t)?;
            let blocked = |c: GridCoord| view.covers_anchor(agent.id, c) || agent.refuses(c, view.tick);
            let direct = planner.next_target(target, view.structure, blocked);
            if agent.assignment == Some(t) {
                return build(direct?);
            }
            if let Some(mine) = agent.assignment.and_then(|d| planner.division(d)).filter(|d| d.state.is_built()) {
                let route = planner.route(mine.id, t);
                if route.len() >= 2 {
                    let next = planner.division(route[1])?;
                    let cols = crate::planner::ferry_dropoffs(mine, next).ok()?;
                    let slots: Vec<GridCoord> =
                        cols.into_iter().map(|(x, y)| GridCoord::new(x, y, mine.layer_z + 1)).collect();
                    let waiting = slots.iter().filter(|s| view.loose.contains_key(s)).count();
                    if waiting >= MAX_WAITING_DROPS {
                        return None;
                    }
                    let slot = slots.into_iter().find(|&s| {
                        place_free(view, agent.id, s)
                            && !agent.refuses(s, view.tick)
                            && view.structure.state(s.step(FaceDir::NegZ)).is_some_and(|b| b.is_foothold())
                            && (!view.wanted.contains(&s) || own_target(agent, s))
                            && ![FaceDir::PosX, FaceDir::NegX, FaceDir::PosY, FaceDir::NegY]
                                .iter()
                                .any(|&d| view.loose.contains_key(&s.step(d)))
                    });
                    return slot.map(|s| (Purpose::Place { at: s, incorporate: false }, BehaviorKind::Ferry));
                }
            }
            build(direct?)
        }
    }
}

/// Whether `c` is the target of this agent's own plan.
fn own_target(agent: &AgentState, c: GridCoord) -> bool {
    matches!(agent.plan, Some(AgentPlan { purpose: Purpose::Place { at, .. }, .. }) if at == c)
}

fn station_division(agent: &AgentState, view: &WorldView<'_>) -> Option<usize> {
    let d = view.planner.division(agent.assignment?)?;
    matches!(d.state, DivisionState::Building | DivisionState::FerryRoute).then_some(d.id)
}

fn on_division(face: Face, d: &crate::planner::Division) -> bool {
    face.dir == FaceDir::PosZ
        && d.contains(face.cell.column())
        && (face.cell.z == d.layer_z || face.cell.z == d.layer_z - 1)
}

fn at_station(anchor: Face, division: usize, view: &WorldView<'_>) -> bool {
    let Some(d) = view.planner.division(division) else { return true };
    if on_division(anchor, d) {
        return true;
    }
    // Nothing to stand on yet: stay put.
    !d.cells.iter().any(|&(x, y)| {
        [d.layer_z - 1, d.layer_z].into_iter().any(|z| {
            let f = Face::new(GridCoord::new(x, y, z), FaceDir::PosZ);
            z >= 0 && view.structure.is_foothold(f)
        })
    })
}

/// Takes the next step towards a face accepted by `purpose`, following the
/// stored plan when it still applies.
fn travel(agent: &AgentState, view: &WorldView<'_>, purpose: Purpose, kind: BehaviorKind) -> Option<Outcome> {
    let anchor = agent.anchor()?;
    let carrying = agent.carried.is_some();
    let plan = match &agent.plan {
        Some(p) if p.purpose == purpose && p.path.faces.get(p.at) == Some(&anchor) => p.clone(),
        _ => {
            let p = [Avoid::AgentsAndWanted, Avoid::Wanted, Avoid::Nothing]
                .into_iter()
                .find_map(|avoid| plan_path(agent, view, anchor, purpose, carrying, avoid))?;
            AgentPlan { path: p, at: 0, purpose, version: view.structure.version() }
        }
    };
    let next = plan.next_face()?;
    if view.occupied_by_other(agent.id, next) {
        let mut o = Outcome::new(BehaviorKind::Wait, WorldCommand::None);
        o.request = Some(next);
        o.plan = if agent.blocked_ticks >= 3 { PlanChange::Clear } else { PlanChange::Set(plan) };
        return Some(o);
    }
    let mut advanced = plan;
    advanced.at += 1;
    advanced.version = view.structure.version();
    let mut o = Outcome::new(kind, WorldCommand::TakeStep(next));
    o.plan = PlanChange::Set(advanced);
    Some(o)
}

/// What path planning steers around, strictest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Avoid {
    AgentsAndWanted,
    Wanted,
    Nothing,
}

fn plan_path(
    agent: &AgentState,
    view: &WorldView<'_>,
    start: Face,
    purpose: Purpose,
    carrying: bool,
    avoid: Avoid,
) -> Option<PathPlan> {
    let clear = |f: Face| {
        let other_agent = avoid == Avoid::AgentsAndWanted && view.occupied_by_other(agent.id, f);
        let in_way = avoid != Avoid::Nothing && view.wanted.contains(&f.outward());
        !other_agent && !in_way
    };
    let target_cell = match purpose {
        Purpose::Pick(c) | Purpose::Place { at: c, .. } => Some(c),
        _ => None,
    };
    let station = match purpose {
        Purpose::Station(d) => view.planner.division(d),
        _ => None,
    };
    let heuristic = |f: Face| match (target_cell, station) {
        (Some(c), _) => reach2(f, c).saturating_sub(SWING_REACH2).div_ceil(2),
        (None, Some(d)) => d.cells.iter().map(|&(x, y)| f.cell.x.abs_diff(x) + f.cell.y.abs_diff(y)).min().unwrap_or(0),
        _ => 0,
    };
    let plan = search(
        view.structure,
        start,
        |f| accepts(purpose, f, agent, view),
        heuristic,
        |_| Vec::new(),
        |a, b| clear(b) && view.edge_ok(a, b, carrying),
    )?;
    (plan.faces.len() >= 2).then_some(plan)
}

/// One behaviour-tree tick. Returns the new agent state and at most one
/// command; time is tallied against the chosen behaviour.
pub fn tick(agent: &AgentState, world_view: &WorldView<'_>) -> (AgentState, WorldCommand) {
    let mut next = agent.clone();
    let quantum = world_view.costs.tick_ms;
    if agent.pose.is_none() {
        next.active = BehaviorKind::Wait;
        next.tally(BehaviorKind::Wait, quantum);
        return (next, WorldCommand::None);
    }
    if agent.busy_ticks > 0 {
        next.busy_ticks -= 1;
        next.tally(agent.active, quantum);
        return (next, WorldCommand::None);
    }
    let mut outcome = eval(&behavior_tree(), agent, world_view)
        .unwrap_or_else(|| Outcome::new(BehaviorKind::Wait, WorldCommand::None));
    if agent.carried.is_some() && outcome.kind == BehaviorKind::Wait {
        // Holding a block is part of the job it is carried for.
        outcome.kind = if is_ferrier(agent, world_view) { BehaviorKind::Ferry } else { BehaviorKind::Build };
    }
    next.active = outcome.kind;
    match outcome.plan {
        PlanChange::Keep => {}
        PlanChange::Clear => next.plan = None,
        PlanChange::Set(p) => next.plan = Some(p),
    }
    next.request = outcome.request;
    if outcome.request.is_some() {
        next.blocked_ticks += 1;
    } else {
        next.blocked_ticks = 0;
    }
    if outcome.kind == BehaviorKind::Update {
        next.inbox.clear();
        next.stale = false;
    }
    let ticks = world_view.costs.ticks(classify_duration(&outcome.command, world_view.costs, world_view.latency));
    next.busy_ticks = ticks - 1;
    next.tally(outcome.kind, quantum);
    (next, outcome.command)
}

/// Builds a pose with a retracted free end, or carrying if `block` is set.
pub fn pose_for(anchor: Face, carrying: bool) -> Pose {
    Pose { anchored_face: anchor, free_end: if carrying { FreeEnd::CarryingAt(anchor) } else { FreeEnd::Retracted } }
}

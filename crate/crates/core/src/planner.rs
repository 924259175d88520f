//! Home-block construction planner.
//!
//! The blueprint is built layer by layer. Each layer is chunked into
//! divisions, ranked by a wavefront from the feeding column, and claimed by
//! agents through an auction. Builders fill their division in spiral order;
//! agents whose division is finished ferry blocks towards the divisions that
//! are still being built.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocknet::Payload;
use crate::facestar::face_graph_distances;
use crate::lattice::{check_buildable, neighbors, BlockState, Blueprint, Face, FaceDir, GridCoord, Structure};

pub type Col = (i32, i32);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlannerError {
    #[error("blueprint has no cells")]
    EmptyBlueprint,
    #[error("blueprint is not buildable bottom-up: {0:?}")]
    Unbuildable(Vec<GridCoord>),
    #[error("division extent must be at least 1")]
    ZeroExtent,
    #[error("layer has no cells")]
    EmptyLayer,
    #[error("divisions {0} and {1} are the same division")]
    SameDivision(usize, usize),
    #[error("divisions {0} and {1} do not share a border")]
    NotAdjacent(usize, usize),
    #[error("unknown division {0}")]
    UnknownDivision(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub z: i32,
    pub cells: BTreeSet<Col>,
}

pub fn extract_layers(blueprint: &Blueprint) -> Result<Vec<Layer>, PlannerError> {
    if let Some(bad) = check_buildable(blueprint).violations() {
        return Err(PlannerError::Unbuildable(bad.to_vec()));
    }
    layers_from_cells(blueprint.cells())
}

/// Groups cells by height, lowest first.
pub fn layers_from_cells(cells: &BTreeSet<GridCoord>) -> Result<Vec<Layer>, PlannerError> {
    if cells.is_empty() {
        return Err(PlannerError::EmptyBlueprint);
    }
    let mut by_z: BTreeMap<i32, BTreeSet<Col>> = BTreeMap::new();
    for c in cells {
        by_z.entry(c.z).or_default().insert(c.column());
    }
    Ok(by_z.into_iter().map(|(z, cells)| Layer { z, cells }).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DivisionState {
    Unbuilt,
    Building,
    Built,
    FerryRoute,
}

impl DivisionState {
    pub fn is_built(self) -> bool {
        matches!(self, DivisionState::Built | DivisionState::FerryRoute)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Division {
    pub id: usize,
    pub layer_z: i32,
    pub cells: BTreeSet<Col>,
    pub priority: u32,
    pub state: DivisionState,
    pub claimed_by: Option<usize>,
}

impl Division {
    pub fn new(id: usize, layer_z: i32, cells: BTreeSet<Col>) -> Self {
        Self { id, layer_z, cells, priority: 0, state: DivisionState::Unbuilt, claimed_by: None }
    }

    pub fn contains(&self, col: Col) -> bool {
        self.cells.contains(&col)
    }

    pub fn extent(&self) -> (u32, u32) {
        extent_of(&self.cells)
    }

    pub fn is_adjacent(&self, other: &Division) -> bool {
        self.cells.iter().any(|&c| col_neighbors(c).iter().any(|n| other.cells.contains(n)))
    }

    /// Cells touching `other` across a shared edge.
    pub fn border_with(&self, other: &Division) -> Vec<Col> {
        self.cells.iter().copied().filter(|&c| col_neighbors(c).iter().any(|n| other.cells.contains(n))).collect()
    }

    pub fn coord(&self, col: Col) -> GridCoord {
        GridCoord::new(col.0, col.1, self.layer_z)
    }
}

fn col_neighbors((x, y): Col) -> [Col; 4] {
    [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)]
}

fn extent_of(cells: &BTreeSet<Col>) -> (u32, u32) {
    let (mut x0, mut x1, mut y0, mut y1) = (i32::MAX, i32::MIN, i32::MAX, i32::MIN);
    for &(x, y) in cells {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if cells.is_empty() {
        (0, 0)
    } else {
        ((x1 - x0 + 1) as u32, (y1 - y0 + 1) as u32)
    }
}

fn components(cells: &BTreeSet<Col>) -> Vec<BTreeSet<Col>> {
    let mut left = cells.clone();
    let mut out = Vec::new();
    while let Some(&start) = left.iter().next() {
        left.remove(&start);
        let mut comp = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(c) = queue.pop_front() {
            for n in col_neighbors(c) {
                if left.remove(&n) {
                    comp.insert(n);
                    queue.push_back(n);
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Smallest fragment kept as its own division when a neighbour can absorb it.
pub const MIN_FRAGMENT: usize = 3;

/// Chunks a layer into square tiles of side `max_division_extent`, anchored
/// at the layer's bounding-box minimum, then splits tiles into connected
/// pieces. Pieces under three cells merge into a neighbouring division when
/// the merged extent still fits. Ids are assigned from 0 in cell order.
pub fn create_divisions(layer: &Layer, max_division_extent: u32) -> Result<Vec<Division>, PlannerError> {
    if max_division_extent == 0 {
        return Err(PlannerError::ZeroExtent);
    }
    if layer.cells.is_empty() {
        return Err(PlannerError::EmptyLayer);
    }
    let e = max_division_extent as i32;
    let x0 = layer.cells.iter().map(|c| c.0).min().unwrap_or(0);
    let y0 = layer.cells.iter().map(|c| c.1).min().unwrap_or(0);
    let mut tiles: BTreeMap<(i32, i32), BTreeSet<Col>> = BTreeMap::new();
    for &(x, y) in &layer.cells {
        tiles.entry(((x - x0).div_euclid(e), (y - y0).div_euclid(e))).or_default().insert((x, y));
    }
    let mut pieces: Vec<BTreeSet<Col>> = tiles.values().flat_map(components).collect();
    pieces.sort();

    let mut merged = true;
    while merged {
        merged = false;
        for i in 0..pieces.len() {
            if pieces[i].len() >= MIN_FRAGMENT {
                continue;
            }
            let host = (0..pieces.len()).find(|&j| {
                if j == i || !touches(&pieces[i], &pieces[j]) {
                    return false;
                }
                let union: BTreeSet<Col> = pieces[i].union(&pieces[j]).copied().collect();
                let (w, h) = extent_of(&union);
                w <= max_division_extent && h <= max_division_extent
            });
            if let Some(j) = host {
                let frag = std::mem::take(&mut pieces[i]);
                pieces[j].extend(frag);
                pieces.remove(i);
                pieces.sort();
                merged = true;
                break;
            }
        }
    }
    Ok(pieces.into_iter().enumerate().map(|(id, cells)| Division::new(id, layer.z, cells)).collect())
}

fn touches(a: &BTreeSet<Col>, b: &BTreeSet<Col>) -> bool {
    a.iter().any(|&c| col_neighbors(c).iter().any(|n| b.contains(n)))
}

/// Division adjacency as sorted index lists.
fn adjacency(divisions: &[Division]) -> Vec<Vec<usize>> {
    (0..divisions.len())
        .map(|i| (0..divisions.len()).filter(|&j| j != i && divisions[i].is_adjacent(&divisions[j])).collect())
        .collect()
}

fn col_distance(a: Col, b: Col) -> u32 {
    a.0.abs_diff(b.0) + a.1.abs_diff(b.1)
}

fn nearest_index(divisions: &[Division], idx: &[usize], col: Col) -> Option<usize> {
    idx.iter().copied().min_by_key(|&i| {
        let d = divisions[i].cells.iter().map(|&c| col_distance(c, col)).min().unwrap_or(u32::MAX);
        (d, divisions[i].id)
    })
}

/// Assigns wavefront ranks: BFS over division adjacency from the division
/// holding (or nearest to) the feeding column. Components not reached get
/// their own seed, ranked after everything already ranked.
pub fn wavefront_order(divisions: &mut [Division], feeding: GridCoord) {
    let adj = adjacency(divisions);
    let mut rank: Vec<Option<u32>> = vec![None; divisions.len()];
    let mut base = 0;
    loop {
        let unranked: Vec<usize> = (0..divisions.len()).filter(|&i| rank[i].is_none()).collect();
        let Some(seed) = nearest_index(divisions, &unranked, feeding.column()) else {
            break;
        };
        rank[seed] = Some(base);
        let mut queue = VecDeque::from([seed]);
        let mut top = base;
        while let Some(i) = queue.pop_front() {
            let r = rank[i].unwrap_or(base);
            top = top.max(r);
            for &j in &adj[i] {
                if rank[j].is_none() {
                    rank[j] = Some(r + 1);
                    queue.push_back(j);
                }
            }
        }
        base = top + 1;
    }
    for (d, r) in divisions.iter_mut().zip(rank) {
        d.priority = r.unwrap_or(0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bid {
    pub agent: usize,
    pub division: usize,
    pub distance: u32,
}

/// Iterative auction. Each round every unassigned agent bids its distance to
/// its nearest unclaimed division; the largest bid wins that division.
/// Ties go to the lower agent id, and nearest-division ties to the lower
/// division id. Agents left over map to `None` (wait).
pub fn run_auction(
    agents: &[usize],
    divisions: &[usize],
    distance: impl Fn(usize, usize) -> u32,
) -> BTreeMap<usize, Option<usize>> {
    let mut result: BTreeMap<usize, Option<usize>> = agents.iter().map(|&a| (a, None)).collect();
    let mut free_agents: BTreeSet<usize> = agents.iter().copied().collect();
    let mut free_divs: BTreeSet<usize> = divisions.iter().copied().collect();
    while !free_agents.is_empty() && !free_divs.is_empty() {
        let mut best: Option<Bid> = None;
        for &a in &free_agents {
            let (dist, div) = free_divs.iter().map(|&d| (distance(a, d), d)).min().expect("free divisions non-empty");
            let bid = Bid { agent: a, division: div, distance: dist };
            if best.is_none_or(|b| bid.distance > b.distance) {
                best = Some(bid);
            }
        }
        let win = best.expect("free agents non-empty");
        result.insert(win.agent, Some(win.division));
        free_agents.remove(&win.agent);
        free_divs.remove(&win.division);
    }
    result
}

/// Inching distance from `face` to the division: face-graph distance to the
/// nearest top face resting under or within the division, or the lattice
/// Manhattan distance when no such face is reachable.
fn bid_distance(dist: &BTreeMap<Face, u32>, from: Face, division: &Division) -> u32 {
    let graph = dist
        .iter()
        .filter(|(f, _)| {
            f.dir == FaceDir::PosZ
                && division.contains(f.cell.column())
                && (f.cell.z == division.layer_z - 1 || f.cell.z == division.layer_z)
        })
        .map(|(_, d)| *d)
        .min();
    graph.unwrap_or_else(|| division.cells.iter().map(|&c| from.cell.manhattan(division.coord(c))).min().unwrap_or(0))
}

/// Runs the auction for `agents` (id, anchored face) over all `divisions`.
pub fn claim_divisions(
    agents: &[(usize, Face)],
    divisions: &[Division],
    structure: &Structure,
) -> BTreeMap<usize, Option<usize>> {
    let dists: BTreeMap<usize, (Face, BTreeMap<Face, u32>)> =
        agents.iter().map(|&(a, f)| (a, (f, face_graph_distances(structure, f)))).collect();
    let by_id: BTreeMap<usize, &Division> = divisions.iter().map(|d| (d.id, d)).collect();
    let ids: Vec<usize> = agents.iter().map(|a| a.0).collect();
    let divs: Vec<usize> = divisions.iter().map(|d| d.id).collect();
    run_auction(&ids, &divs, |a, d| {
        let (face, dist) = &dists[&a];
        bid_distance(dist, *face, by_id[&d])
    })
}

/// Cell minimizing the maximum Chebyshev distance to all division cells;
/// ties go to the smallest (x, y).
pub fn division_center(division: &Division) -> Col {
    *division
        .cells
        .iter()
        .min_by_key(|&&c| {
            let r = division.cells.iter().map(|&o| c.0.abs_diff(o.0).max(c.1.abs_diff(o.1))).max().unwrap_or(0);
            (r, c)
        })
        .expect("division has cells")
}

/// Position of `(dx, dy)` around its Chebyshev ring, counter-clockwise from
/// the east side.
fn ring_index(dx: i32, dy: i32, r: i32) -> i32 {
    if r == 0 {
        0
    } else if dx == r && dy > -r {
        dy + r
    } else if dy == r && dx < r {
        2 * r + (r - dx)
    } else if dx == -r && dy < r {
        4 * r + (r - dy)
    } else {
        6 * r + (dx + r)
    }
}

/// Division cells from the centre outward, ring by ring.
pub fn spiral_order(division: &Division) -> Vec<Col> {
    let (cx, cy) = division_center(division);
    let mut cells: Vec<Col> = division.cells.iter().copied().collect();
    cells.sort_by_key(|&(x, y)| {
        let (dx, dy) = (x - cx, y - cy);
        let r = dx.abs().max(dy.abs());
        (r, ring_index(dx, dy, r))
    });
    cells
}

/// Border cells of `division` facing `next`, best drop-off first: nearest
/// to the centroid of `next`, ties by smallest (x, y).
pub fn ferry_dropoffs(division: &Division, next: &Division) -> Result<Vec<Col>, PlannerError> {
    if division.id == next.id {
        return Err(PlannerError::SameDivision(division.id, next.id));
    }
    let mut border = division.border_with(next);
    if border.is_empty() {
        return Err(PlannerError::NotAdjacent(division.id, next.id));
    }
    let n = next.cells.len() as i64;
    let sx: i64 = next.cells.iter().map(|c| i64::from(c.0)).sum();
    let sy: i64 = next.cells.iter().map(|c| i64::from(c.1)).sum();
    border.sort_by_key(|&(x, y)| {
        let dx = n * i64::from(x) - sx;
        let dy = n * i64::from(y) - sy;
        (dx * dx + dy * dy, (x, y))
    });
    Ok(border)
}

pub fn ferry_dropoff(division: &Division, next_division: &Division) -> Result<Col, PlannerError> {
    Ok(ferry_dropoffs(division, next_division)?[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    Division(usize),
    Repair(GridCoord),
}

/// A block set down but not yet incorporated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LooseBlock {
    pub target: Option<Target>,
    pub last_carrier: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlannerEvent {
    BlockFed(GridCoord),
    BlockPlaced(GridCoord),
    DivisionBuilt(usize),
    AgentIdle(usize),
    BlockLost(GridCoord),
}

/// Read-only world inputs the planner needs for an event.
pub struct PlannerContext<'a> {
    pub structure: &'a Structure,
    /// Deployed agents and their anchored faces.
    pub agents: &'a [(usize, Face)],
    pub tick: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivisionRecord {
    pub id: usize,
    pub layer_z: i32,
    pub cells: usize,
    pub claimed_at: Option<u64>,
    pub built_at: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct PlannerState {
    blueprint: Blueprint,
    layers: Vec<Layer>,
    extent: u32,
    current: usize,
    divisions: Vec<Division>,
    next_id: usize,
    repairs: BTreeSet<GridCoord>,
    complete: bool,
    records: BTreeMap<usize, DivisionRecord>,
}

impl PlannerState {
    pub fn new(blueprint: &Blueprint, max_division_extent: u32) -> Result<Self, PlannerError> {
        if max_division_extent == 0 {
            return Err(PlannerError::ZeroExtent);
        }
        let layers = extract_layers(blueprint)?;
        let mut state = Self {
            blueprint: blueprint.clone(),
            layers,
            extent: max_division_extent,
            current: 0,
            divisions: Vec::new(),
            next_id: 0,
            repairs: BTreeSet::new(),
            complete: false,
            records: BTreeMap::new(),
        };
        state.load_layer()?;
        Ok(state)
    }

    fn load_layer(&mut self) -> Result<(), PlannerError> {
        let mut divs = create_divisions(&self.layers[self.current], self.extent)?;
        for d in &mut divs {
            d.id += self.next_id;
        }
        self.next_id += divs.len();
        wavefront_order(&mut divs, self.blueprint.feeding());
        for d in &divs {
            self.records.insert(
                d.id,
                DivisionRecord { id: d.id, layer_z: d.layer_z, cells: d.cells.len(), claimed_at: None, built_at: None },
            );
        }
        self.divisions = divs;
        Ok(())
    }

    pub fn blueprint(&self) -> &Blueprint {
        &self.blueprint
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn layer_z(&self) -> i32 {
        self.layers[self.current].z
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn divisions(&self) -> &[Division] {
        &self.divisions
    }

    pub fn division(&self, id: usize) -> Option<&Division> {
        self.divisions.iter().find(|d| d.id == id)
    }

    fn division_mut(&mut self, id: usize) -> Result<&mut Division, PlannerError> {
        self.divisions.iter_mut().find(|d| d.id == id).ok_or(PlannerError::UnknownDivision(id))
    }

    pub fn repairs(&self) -> &BTreeSet<GridCoord> {
        &self.repairs
    }

    pub fn records(&self) -> Vec<DivisionRecord> {
        self.records.values().cloned().collect()
    }

    /// Division claimed by `agent`, if any.
    pub fn assignment(&self, agent: usize) -> Option<&Division> {
        self.divisions.iter().find(|d| d.claimed_by == Some(agent))
    }

    /// The feeding cell of the current layer, when the blueprint has one.
    pub fn layer_feed_cell(&self) -> Option<GridCoord> {
        let f = self.blueprint.feeding();
        let c = GridCoord::new(f.x, f.y, self.layer_z());
        self.blueprint.contains(c).then_some(c)
    }

    /// Lowest cell of the feeding column that is not yet incorporated.
    pub fn feed_point(&self, structure: &Structure) -> GridCoord {
        let f = self.blueprint.feeding();
        let mut c = GridCoord::new(f.x, f.y, 0);
        while structure.state(c).is_some_and(BlockState::is_foothold) {
            c = c.step(FaceDir::PosZ);
        }
        c
    }

    fn is_built_cell(structure: &Structure, c: GridCoord) -> bool {
        structure.state(c).is_some_and(BlockState::is_foothold)
    }

    /// Whether a block could be incorporated at `c` right now.
    pub fn is_placeable(structure: &Structure, c: GridCoord) -> bool {
        c.z >= 0 && !structure.is_occupied(c) && neighbors(c).iter().any(|&n| Self::is_built_cell(structure, n))
    }

    /// Cells of `division` still to be placed by agents.
    pub fn outstanding(&self, division: &Division, structure: &Structure) -> Vec<GridCoord> {
        let feed = self.layer_feed_cell();
        division
            .cells
            .iter()
            .map(|&c| division.coord(c))
            .filter(|&c| Some(c) != feed && !Self::is_built_cell(structure, c) && !self.repairs.contains(&c))
            .collect()
    }

    /// Blocks agents still have to move into place for the current layer and
    /// pending repairs.
    pub fn blocks_needed(&self, structure: &Structure) -> usize {
        let z = self.layer_z();
        let feed = self.layer_feed_cell();
        let layer = self.layers[self.current]
            .cells
            .iter()
            .map(|&(x, y)| GridCoord::new(x, y, z))
            .filter(|&c| Some(c) != feed && !Self::is_built_cell(structure, c) && !self.repairs.contains(&c))
            .count();
        layer + self.repairs.len()
    }

    /// The feed cell is ready to be incorporated in place once every other
    /// cell of the layer is built.
    pub fn feed_cell_due(&self, structure: &Structure) -> Option<GridCoord> {
        let feed = self.layer_feed_cell()?;
        if Self::is_built_cell(structure, feed) {
            return None;
        }
        let z = self.layer_z();
        let rest_done = self.layers[self.current]
            .cells
            .iter()
            .map(|&(x, y)| GridCoord::new(x, y, z))
            .filter(|&c| c != feed)
            .all(|c| Self::is_built_cell(structure, c));
        rest_done.then_some(feed)
    }

    /// Next cell a builder should place in `division`: the first spiral cell
    /// that is placeable and not `blocked`, else the first placeable one.
    pub fn next_target(
        &self,
        division: &Division,
        structure: &Structure,
        blocked: impl Fn(GridCoord) -> bool,
    ) -> Option<GridCoord> {
        let feed = self.layer_feed_cell();
        let candidates: Vec<GridCoord> = spiral_order(division)
            .into_iter()
            .map(|c| division.coord(c))
            .filter(|&c| Some(c) != feed && !self.repairs.contains(&c) && Self::is_placeable(structure, c))
            .collect();
        candidates.iter().copied().find(|&c| !blocked(c)).or_else(|| candidates.first().copied())
    }

    fn is_open(&self, idx: usize, adj: &[Vec<usize>], structure: &Structure) -> bool {
        let d = &self.divisions[idx];
        if d.state.is_built() || !self.has_placeable(d, structure) {
            return false;
        }
        let lower: Vec<usize> = adj[idx].iter().copied().filter(|&j| self.divisions[j].priority < d.priority).collect();
        lower.is_empty() || lower.iter().any(|&j| self.divisions[j].state.is_built())
    }

    fn has_placeable(&self, d: &Division, structure: &Structure) -> bool {
        let feed = self.layer_feed_cell();
        d.cells
            .iter()
            .map(|&c| d.coord(c))
            .any(|c| Some(c) != feed && !self.repairs.contains(&c) && Self::is_placeable(structure, c))
    }

    /// Divisions that may be claimed now. If the wavefront rule leaves none
    /// open while work remains, every division with a placeable cell opens.
    pub fn open_divisions(&self, structure: &Structure) -> Vec<usize> {
        let adj = adjacency(&self.divisions);
        let open: Vec<usize> = (0..self.divisions.len()).filter(|&i| self.is_open(i, &adj, structure)).collect();
        let ids: Vec<usize> = if open.is_empty() {
            (0..self.divisions.len())
                .filter(|&i| !self.divisions[i].state.is_built() && self.has_placeable(&self.divisions[i], structure))
                .collect()
        } else {
            open
        };
        ids.into_iter().map(|i| self.divisions[i].id).collect()
    }

    /// Marks finished divisions built and returns their ids.
    fn sweep_built(&mut self, structure: &Structure, tick: u64) -> Vec<usize> {
        let mut done = Vec::new();
        for i in 0..self.divisions.len() {
            let d = &self.divisions[i];
            if !d.state.is_built() && self.outstanding(d, structure).is_empty() {
                done.push(d.id);
            }
        }
        for &id in &done {
            if let Ok(d) = self.division_mut(id) {
                d.state = if d.claimed_by.is_some() { DivisionState::FerryRoute } else { DivisionState::Built };
            }
            if let Some(r) = self.records.get_mut(&id) {
                r.built_at = Some(tick);
            }
        }
        done
    }

    /// Re-runs claiming. Unassigned agents always bid; ferriers join only
    /// when open divisions outnumber unassigned agents.
    fn reassign(&mut self, ctx: &PlannerContext<'_>) -> Vec<Payload> {
        let open: Vec<usize> = self
            .open_divisions(ctx.structure)
            .into_iter()
            .filter(|&id| self.division(id).is_some_and(|d| d.claimed_by.is_none()))
            .collect();
        if open.is_empty() {
            return Vec::new();
        }
        let claimed: BTreeMap<usize, usize> =
            self.divisions.iter().filter_map(|d| d.claimed_by.map(|a| (a, d.id))).collect();
        let unassigned: Vec<(usize, Face)> =
            ctx.agents.iter().copied().filter(|(a, _)| !claimed.contains_key(a)).collect();
        let mut pool = unassigned.clone();
        if open.len() > unassigned.len() {
            pool.extend(
                ctx.agents.iter().copied().filter(|(a, _)| {
                    claimed.get(a).and_then(|&d| self.division(d)).is_some_and(|d| d.state.is_built())
                }),
            );
            pool.sort();
        }
        if pool.is_empty() {
            return Vec::new();
        }
        let candidates: Vec<Division> = open.iter().filter_map(|&id| self.division(id).cloned()).collect();
        let result = claim_divisions(&pool, &candidates, ctx.structure);
        let mut msgs = Vec::new();
        for (agent, div) in result {
            let Some(div) = div else { continue };
            if let Some(&old) = claimed.get(&agent) {
                if let Ok(d) = self.division_mut(old) {
                    d.claimed_by = None;
                    d.state = DivisionState::Built;
                }
            }
            if let Ok(d) = self.division_mut(div) {
                d.claimed_by = Some(agent);
                d.state = DivisionState::Building;
            }
            if let Some(r) = self.records.get_mut(&div) {
                r.claimed_at.get_or_insert(ctx.tick);
            }
            msgs.push(Payload::DivisionAssignment { agent, division: div });
        }
        msgs
    }

    fn layer_done(&self, structure: &Structure) -> bool {
        let z = self.layer_z();
        self.layers[self.current].cells.iter().all(|&(x, y)| Self::is_built_cell(structure, GridCoord::new(x, y, z)))
    }

    fn advance(&mut self, ctx: &PlannerContext<'_>) -> Result<Vec<Payload>, PlannerError> {
        let mut msgs = Vec::new();
        while self.layer_done(ctx.structure) {
            let z = self.layer_z();
            let tick = ctx.tick;
            for d in &self.divisions {
                if let Some(r) = self.records.get_mut(&d.id) {
                    r.built_at.get_or_insert(tick);
                }
            }
            msgs.push(Payload::LayerComplete(z));
            if self.current + 1 == self.layers.len() {
                if self.repairs.is_empty()
                    && self.blueprint.cells().iter().all(|&c| Self::is_built_cell(ctx.structure, c))
                {
                    self.complete = true;
                    self.divisions.clear();
                    msgs.push(Payload::ConstructionComplete);
                }
                return Ok(msgs);
            }
            self.current += 1;
            self.load_layer()?;
        }
        msgs.extend(self.reassign(ctx));
        Ok(msgs)
    }

    /// Handles one planner event and returns the broadcasts it triggers.
    pub fn on_event(&mut self, event: PlannerEvent, ctx: &PlannerContext<'_>) -> Result<Vec<Payload>, PlannerError> {
        match event {
            PlannerEvent::BlockFed(cell) => Ok(vec![Payload::NewBlockAvailable(cell)]),
            PlannerEvent::BlockPlaced(cell) => {
                self.repairs.remove(&cell);
                let mut msgs = vec![Payload::BlockAdded(cell)];
                if self.complete {
                    return Ok(msgs);
                }
                for id in self.sweep_built(ctx.structure, ctx.tick) {
                    msgs.extend(self.on_event(PlannerEvent::DivisionBuilt(id), ctx)?);
                }
                if self.layer_done(ctx.structure) {
                    msgs.extend(self.advance(ctx)?);
                } else {
                    self.check_complete(ctx, &mut msgs);
                }
                Ok(msgs)
            }
            PlannerEvent::DivisionBuilt(id) => {
                let d = self.division_mut(id)?;
                if !d.state.is_built() {
                    d.state = if d.claimed_by.is_some() { DivisionState::FerryRoute } else { DivisionState::Built };
                }
                Ok(self.reassign(ctx))
            }
            PlannerEvent::AgentIdle(_) => {
                if self.complete {
                    return Ok(Vec::new());
                }
                Ok(self.reassign(ctx))
            }
            PlannerEvent::BlockLost(cell) => {
                if self.blueprint.contains(cell) && !Self::is_built_cell(ctx.structure, cell) {
                    self.repairs.insert(cell);
                    self.complete = false;
                }
                Ok(Vec::new())
            }
        }
    }

    fn check_complete(&mut self, ctx: &PlannerContext<'_>, msgs: &mut Vec<Payload>) {
        if !self.complete
            && self.current + 1 == self.layers.len()
            && self.repairs.is_empty()
            && self.blueprint.cells().iter().all(|&c| Self::is_built_cell(ctx.structure, c))
        {
            self.complete = true;
            self.divisions.clear();
            msgs.push(Payload::ConstructionComplete);
        }
    }

    /// Target for a newly available block: a pending repair first, then the
    /// building division with the largest unmet demand.
    pub fn choose_target(&self, structure: &Structure, in_transit: &BTreeMap<Target, usize>) -> Option<Target> {
        if let Some(&c) = self.repairs.iter().find(|&&c| !in_transit.contains_key(&Target::Repair(c))) {
            return Some(Target::Repair(c));
        }
        self.divisions
            .iter()
            .filter(|d| d.state == DivisionState::Building && d.claimed_by.is_some())
            .filter_map(|d| {
                let need = self.outstanding(d, structure).len();
                let have = in_transit.get(&Target::Division(d.id)).copied().unwrap_or(0);
                (need > have).then_some((need - have, d))
            })
            .max_by_key(|(gap, d)| (*gap, std::cmp::Reverse((d.priority, d.id))))
            .map(|(_, d)| Target::Division(d.id))
    }

    /// Whether a target is still worth carrying a block to.
    pub fn target_valid(&self, target: Target) -> bool {
        match target {
            Target::Repair(c) => self.repairs.contains(&c),
            Target::Division(id) => {
                self.division(id).is_some_and(|d| d.state == DivisionState::Building && d.claimed_by.is_some())
            }
        }
    }

    /// Current-layer division holding (or nearest to) a column.
    pub fn source_division(&self, col: Col) -> Option<usize> {
        let all: Vec<usize> = (0..self.divisions.len()).collect();
        nearest_index(&self.divisions, &all, col).map(|i| self.divisions[i].id)
    }

    /// Division route from `from` to `to` through built divisions.
    pub fn route(&self, from: usize, to: usize) -> Vec<usize> {
        let idx = |id: usize| self.divisions.iter().position(|d| d.id == id);
        let (Some(s), Some(t)) = (idx(from), idx(to)) else {
            return Vec::new();
        };
        let adj = adjacency(&self.divisions);
        let mut parent: BTreeMap<usize, usize> = BTreeMap::from([(s, s)]);
        let mut queue = VecDeque::from([s]);
        while let Some(i) = queue.pop_front() {
            if i == t {
                break;
            }
            for &j in &adj[i] {
                let passable = j == t || self.divisions[j].state.is_built();
                if passable && !parent.contains_key(&j) {
                    parent.insert(j, i);
                    queue.push_back(j);
                }
            }
        }
        if !parent.contains_key(&t) {
            return Vec::new();
        }
        let mut path = vec![t];
        let mut cur = t;
        while cur != s {
            cur = parent[&cur];
            path.push(cur);
        }
        path.reverse();
        path.into_iter().map(|i| self.divisions[i].id).collect()
    }

    /// Agent responsible for moving a loose block next: the first claimant
    /// along the division route that did not just carry it.
    pub fn handler(&self, cell: GridCoord, block: &LooseBlock, agents: &[usize]) -> Option<usize> {
        let target = block.target?;
        let source = self.source_division(cell.column());
        match target {
            Target::Repair(_) => {
                let owner = source.and_then(|s| self.division(s)).and_then(|d| d.claimed_by);
                owner
                    .filter(|&a| Some(a) != block.last_carrier)
                    .or_else(|| agents.iter().copied().find(|&a| Some(a) != block.last_carrier))
                    .or_else(|| agents.first().copied())
            }
            Target::Division(t) => {
                let builder = self.division(t)?.claimed_by?;
                let Some(source) = source else { return Some(builder) };
                let route = self.route(source, t);
                for id in route {
                    let d = self.division(id)?;
                    if let Some(a) = d.claimed_by {
                        if Some(a) != block.last_carrier && (id == t || d.state.is_built()) {
                            return Some(a);
                        }
                    }
                }
                Some(builder)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(x: i32, y: i32, z: i32) -> GridCoord {
        GridCoord::new(x, y, z)
    }

    fn square(x0: i32, y0: i32, n: i32) -> BTreeSet<Col> {
        (x0..x0 + n).flat_map(|x| (y0..y0 + n).map(move |y| (x, y))).collect()
    }

    fn layer(cells: BTreeSet<Col>) -> Layer {
        Layer { z: 0, cells }
    }

    fn div(id: usize, cells: BTreeSet<Col>) -> Division {
        Division::new(id, 0, cells)
    }

    #[test]
    fn layers_of_plane_and_pyramid() {
        let plane: Vec<GridCoord> = square(0, 0, 10).into_iter().map(|(x, y)| g(x, y, 0)).collect();
        let bp = Blueprint::new(plane, g(0, 0, 0), g(1, 0, 0)).unwrap();
        let layers = extract_layers(&bp).unwrap();
        assert_eq!(layers.len(), 1);
        assert_eq!(layers[0].cells.len(), 100);

        let mut cells = Vec::new();
        for (z, (o, n)) in [(0, 5), (1, 3), (2, 1)].into_iter().enumerate() {
            cells.extend(square(o, o, n).into_iter().map(|(x, y)| g(x, y, z as i32)));
        }
        let bp = Blueprint::new(cells, g(0, 0, 0), g(1, 0, 0)).unwrap();
        let sizes: Vec<usize> = extract_layers(&bp).unwrap().iter().map(|l| l.cells.len()).collect();
        assert_eq!(sizes, vec![25, 9, 1]);
        assert_eq!(layers_from_cells(&BTreeSet::new()), Err(PlannerError::EmptyBlueprint));
    }

    #[test]
    fn plane_splits_into_four() {
        let divs = create_divisions(&layer(square(0, 0, 10)), 5).unwrap();
        assert_eq!(divs.len(), 4);
        for (d, (x0, y0)) in divs.iter().zip([(0, 0), (0, 5), (5, 0), (5, 5)]) {
            assert_eq!(d.cells, square(x0, y0, 5));
        }
    }

    #[test]
    fn single_cell_layer() {
        let divs = create_divisions(&layer(BTreeSet::from([(3, 3)])), 5).unwrap();
        assert_eq!(divs.len(), 1);
        assert_eq!(create_divisions(&layer(BTreeSet::new()), 5), Err(PlannerError::EmptyLayer));
        assert_eq!(create_divisions(&layer(BTreeSet::from([(0, 0)])), 0), Err(PlannerError::ZeroExtent));
    }

    #[test]
    fn small_fragments_merge_when_extent_allows() {
        // 4x5 block plus a 1-cell stub in the next tile column.
        let mut cells = square(0, 0, 4);
        cells.extend([(0, 4), (1, 4), (2, 4), (3, 4)]);
        let l = layer(cells.clone());
        let divs = create_divisions(&l, 4).unwrap();
        // Row y = 4 is a 4-cell strip (kept); nothing under 3.
        assert_eq!(divs.len(), 2);
        let mut stub = square(0, 0, 4);
        stub.insert((4, 0));
        let divs = create_divisions(&layer(stub.clone()), 5).unwrap();
        assert_eq!(divs.len(), 1);
        let divs = create_divisions(&layer(stub), 4).unwrap();
        // Merging would exceed extent 4, so the stub stays separate.
        assert_eq!(divs.len(), 2);
        assert!(divs.iter().all(|d| d.extent().0 <= 4 && d.extent().1 <= 4));
    }

    #[test]
    fn wavefront_ranks() {
        let mut divs = create_divisions(&layer(square(0, 0, 10)), 5).unwrap();
        wavefront_order(&mut divs, g(1, 0, 0));
        let ranks: Vec<u32> = divs.iter().map(|d| d.priority).collect();
        assert_eq!(ranks, vec![0, 1, 1, 2]);

        let mut one = vec![div(0, square(0, 0, 2))];
        wavefront_order(&mut one, g(9, 9, 0));
        assert_eq!(one[0].priority, 0);

        let mut strip: Vec<Division> = (0..4).map(|i| div(i, square(2 * i as i32, 0, 2))).collect();
        wavefront_order(&mut strip, g(0, 0, 0));
        assert_eq!(strip.iter().map(|d| d.priority).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn disconnected_components_get_later_ranks() {
        let mut divs =
            vec![div(0, BTreeSet::from([(0, 0)])), div(1, BTreeSet::from([(3, 0)])), div(2, BTreeSet::from([(6, 0)]))];
        wavefront_order(&mut divs, g(0, 0, 0));
        assert_eq!(divs.iter().map(|d| d.priority).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn auction_cases() {
        let r = run_auction(&[7], &[3], |_, _| 99);
        assert_eq!(r[&7], Some(3));
        // A is 6 from its nearest, B is 2: A claims first and takes div 0.
        let dist = |a: usize, d: usize| match (a, d) {
            (0, 0) => 6,
            (0, 1) => 9,
            (1, 0) => 2,
            (1, 1) => 3,
            _ => unreachable!(),
        };
        let r = run_auction(&[0, 1], &[0, 1], dist);
        assert_eq!(r[&0], Some(0));
        assert_eq!(r[&1], Some(1));
        let r = run_auction(&[0, 1, 2], &[0, 1], |a, d| (a + d) as u32);
        assert_eq!(r.values().filter(|v| v.is_none()).count(), 1);
    }

    #[test]
    fn spiral_cases() {
        let d = div(0, square(0, 0, 3));
        let s = spiral_order(&d);
        assert_eq!(s[0], (1, 1));
        assert_eq!(s.len(), 9);
        assert_eq!(spiral_order(&div(0, BTreeSet::from([(4, 4)]))), vec![(4, 4)]);

        let d5 = div(0, square(0, 0, 5));
        let s5 = spiral_order(&d5);
        let rings: Vec<i32> = s5.iter().map(|&(x, y)| (x - 2).abs().max((y - 2).abs())).collect();
        assert_eq!(rings[0], 0);
        assert!(rings.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(rings.iter().filter(|&&r| r == 2).count(), 16);
    }

    #[test]
    fn spiral_ring_is_a_walk() {
        // Consecutive cells within one ring are edge or corner neighbours.
        let s = spiral_order(&div(0, square(0, 0, 5)));
        for w in s[1..9].windows(2) {
            assert_eq!(w[0].0.abs_diff(w[1].0).max(w[0].1.abs_diff(w[1].1)), 1);
        }
    }

    #[test]
    fn dropoff_side_by_side() {
        let a = div(0, square(0, 0, 5));
        let b = div(1, square(5, 0, 5));
        assert_eq!(ferry_dropoff(&a, &b), Ok((4, 2)));
        assert_eq!(ferry_dropoff(&a, &a), Err(PlannerError::SameDivision(0, 0)));
        let far = div(2, square(20, 0, 2));
        assert_eq!(ferry_dropoff(&a, &far), Err(PlannerError::NotAdjacent(0, 2)));
    }

    #[test]
    fn planner_rejects_unknown_division() {
        let cells: Vec<GridCoord> = square(0, 0, 3).into_iter().map(|(x, y)| g(x, y, 0)).collect();
        let bp = Blueprint::new(cells, g(0, 0, 0), g(1, 0, 0)).unwrap();
        let mut p = PlannerState::new(&bp, 5).unwrap();
        let s = Structure::new(g(0, 0, 0)).unwrap();
        let ctx = PlannerContext { structure: &s, agents: &[], tick: 0 };
        assert_eq!(p.on_event(PlannerEvent::DivisionBuilt(42), &ctx), Err(PlannerError::UnknownDivision(42)));
    }
}

//! Face*: A* over exposed block faces.
//!
//! Nodes are foothold faces, edges are single inching steps (coplanar,
//! convex or concave transitions, all cost 1), and each expansion is filtered
//! by the three-pose kinematic predicate.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{is_reachable_and_collision_free, FreeEnd, InchwormGeometry, Pose};
use crate::lattice::{Face, GridCoord, Structure};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathPlan {
    pub faces: Vec<Face>,
    pub total_cost: u32,
}

impl PathPlan {
    pub fn single(face: Face) -> Self {
        Self { faces: vec![face], total_cost: 0 }
    }

    pub fn start(&self) -> Face {
        self.faces[0]
    }

    pub fn goal(&self) -> Face {
        *self.faces.last().expect("plans are never empty")
    }

    pub fn steps(&self) -> impl Iterator<Item = (Face, Face)> + '_ {
        self.faces.windows(2).map(|w| (w[0], w[1]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SearchNode {
    pub face: Face,
    pub g_cost: u32,
    pub parent: Option<Face>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("no collision-free path exists")]
    NoPath,
    #[error("start face {0} is not a foothold")]
    InvalidStart(Face),
    #[error("goal face {0} is neither a foothold nor a placement target")]
    InvalidGoal(Face),
}

/// Single-step neighbours of `f` under the given occupancy and foothold tests.
fn neighbors_with(f: Face, occupied: impl Fn(GridCoord) -> bool, foothold: impl Fn(Face) -> bool) -> Vec<(Face, u32)> {
    let mut out = Vec::with_capacity(4);
    let out_cell = f.outward();
    for t in f.dir.tangents() {
        let corner = out_cell.step(t);
        let side = f.cell.step(t);
        let next = if occupied(corner) {
            Face::new(corner, t.opposite())
        } else if occupied(side) {
            Face::new(side, f.dir)
        } else {
            Face::new(f.cell, t)
        };
        if foothold(next) {
            out.push((next, 1));
        }
    }
    out
}

/// Faces reachable from `f` in one inching step, each with cost 1.
///
/// For each of the four edges of the face, exactly one transition applies:
/// concave if the cell diagonally outward is occupied, coplanar if the side
/// neighbour is occupied, convex around the edge otherwise.
pub fn face_neighbors(structure: &Structure, f: Face) -> Vec<(Face, u32)> {
    neighbors_with(f, |c| structure.is_occupied(c), |n| structure.is_foothold(n))
}

/// A placement target: a free cell with free outward neighbour, touching the
/// structure. The face is where the gripper holds the carried block.
pub fn is_placement_target(structure: &Structure, f: Face) -> bool {
    let out = f.outward();
    f.cell.z >= 0
        && out.z >= 0
        && !structure.is_occupied(f.cell)
        && !structure.is_occupied(out)
        && crate::lattice::neighbors(f.cell).iter().any(|n| structure.is_occupied(*n))
}

/// Real foothold faces adjacent to a placement target, found by treating the
/// target cell as occupied.
fn virtual_support(structure: &Structure, goal: Face) -> Vec<Face> {
    let occ = |c: GridCoord| c == goal.cell || structure.is_occupied(c);
    neighbors_with(goal, occ, |n| n.cell != goal.cell && structure.is_foothold(n)).into_iter().map(|(f, _)| f).collect()
}

/// Generic best-first search over the face graph.
///
/// Ties in the open list break on (f, h, face). `edge_ok` is consulted on
/// every expansion; rejected successors are skipped.
pub fn search(
    structure: &Structure,
    start: Face,
    is_goal: impl Fn(Face) -> bool,
    heuristic: impl Fn(Face) -> u32,
    mut extra_edges: impl FnMut(Face) -> Vec<Face>,
    mut edge_ok: impl FnMut(Face, Face) -> bool,
) -> Option<PathPlan> {
    let mut open = BinaryHeap::new();
    let mut nodes: BTreeMap<Face, SearchNode> = BTreeMap::new();
    let mut closed = std::collections::BTreeSet::new();
    let h0 = heuristic(start);
    open.push(Reverse((h0, h0, start)));
    nodes.insert(start, SearchNode { face: start, g_cost: 0, parent: None });
    while let Some(Reverse((_, _, current))) = open.pop() {
        if !closed.insert(current) {
            continue;
        }
        let g = nodes[&current].g_cost;
        if is_goal(current) {
            return Some(reconstruct(&nodes, current));
        }
        let mut succ = face_neighbors(structure, current);
        succ.extend(extra_edges(current).into_iter().map(|f| (f, 1)));
        for (next, cost) in succ {
            if closed.contains(&next) {
                continue;
            }
            let ng = g + cost;
            if nodes.get(&next).is_some_and(|n| n.g_cost <= ng) {
                continue;
            }
            if !edge_ok(current, next) {
                continue;
            }
            nodes.insert(next, SearchNode { face: next, g_cost: ng, parent: Some(current) });
            let h = heuristic(next);
            open.push(Reverse((ng + h, h, next)));
        }
    }
    None
}

fn reconstruct(nodes: &BTreeMap<Face, SearchNode>, goal: Face) -> PathPlan {
    let mut faces = vec![goal];
    let mut cur = goal;
    while let Some(p) = nodes[&cur].parent {
        faces.push(p);
        cur = p;
    }
    faces.reverse();
    PathPlan { total_cost: nodes[&goal].g_cost, faces }
}

fn check_endpoints(structure: &Structure, start: Face, goal: Face) -> Result<bool, PlanError> {
    if !structure.is_foothold(start) {
        return Err(PlanError::InvalidStart(start));
    }
    if structure.is_foothold(goal) {
        Ok(false)
    } else if is_placement_target(structure, goal) {
        Ok(true)
    } else {
        Err(PlanError::InvalidGoal(goal))
    }
}

/// Face* with a caller-supplied transition filter.
pub fn face_star_filtered(
    structure: &Structure,
    start: Face,
    goal: Face,
    edge_ok: impl FnMut(Face, Face) -> bool,
) -> Result<PathPlan, PlanError> {
    let is_virtual = check_endpoints(structure, start, goal)?;
    let support = if is_virtual { virtual_support(structure, goal) } else { Vec::new() };
    search(
        structure,
        start,
        |f| f == goal,
        |f| f.manhattan(goal),
        |f| if support.contains(&f) { vec![goal] } else { Vec::new() },
        edge_ok,
    )
    .ok_or(PlanError::NoPath)
}

/// Minimal-cost inching path from `start` to `goal` under the collision filter.
pub fn face_star(
    structure: &Structure,
    start: Face,
    goal: Face,
    geometry: &InchwormGeometry,
    carrying: bool,
) -> Result<PathPlan, PlanError> {
    face_star_filtered(structure, start, goal, |a, b| {
        is_reachable_and_collision_free(structure, a, b, geometry, carrying)
    })
}

/// Face* with the collision filter disabled: pure face-graph shortest path.
pub fn face_star_unfiltered(structure: &Structure, start: Face, goal: Face) -> Result<PathPlan, PlanError> {
    face_star_filtered(structure, start, goal, |_, _| true)
}

/// Unfiltered inching distances from `start` to every reachable foothold.
pub fn face_graph_distances(structure: &Structure, start: Face) -> BTreeMap<Face, u32> {
    let mut dist = BTreeMap::new();
    if !structure.is_foothold(start) {
        return dist;
    }
    let mut queue = std::collections::VecDeque::from([start]);
    dist.insert(start, 0);
    while let Some(f) = queue.pop_front() {
        let d = dist[&f];
        for (n, _) in face_neighbors(structure, f) {
            if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(n) {
                e.insert(d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Plans for whichever end effector should move.
///
/// If the anchored end can swing the free end straight onto the goal, the
/// plan is a single move. Otherwise Face* runs from the end nearer the goal.
pub fn plan_for_nearest_end(
    agent_pose: &Pose,
    structure: &Structure,
    goal: Face,
    geometry: &InchwormGeometry,
) -> Result<PathPlan, PlanError> {
    let carrying = matches!(agent_pose.free_end, FreeEnd::CarryingAt(_));
    let anchor = agent_pose.anchored_face;
    if anchor == goal || agent_pose.free_face() == Some(goal) {
        return Ok(PathPlan::single(goal));
    }
    if is_reachable_and_collision_free(structure, anchor, goal, geometry, carrying) {
        return Ok(PathPlan { faces: vec![anchor, goal], total_cost: 1 });
    }
    let start = match agent_pose.free_face() {
        Some(free) if structure.is_foothold(free) && free.manhattan(goal) < anchor.manhattan(goal) => free,
        _ => anchor,
    };
    face_star(structure, start, goal, geometry, carrying)
}

/// Shortest inching path from `start` to any face accepted by `accept`.
pub fn search_to_any(
    structure: &Structure,
    start: Face,
    accept: impl Fn(Face) -> bool,
    edge_ok: impl FnMut(Face, Face) -> bool,
) -> Option<PathPlan> {
    if !structure.is_foothold(start) {
        return None;
    }
    search(structure, start, accept, |_| 0, |_| Vec::new(), edge_ok)
}

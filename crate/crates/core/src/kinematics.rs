//! Inchworm geometry and the three-pose reachability / collision predicate.
//!
//! The robot is a 4-link chain A-B-C-D. Link A rises from the anchored end
//! effector along the anchor face normal, link D does the same from the free
//! end effector, and B and C form a two-link elbow between them. The body is
//! approximated as the union of the four segments inflated by a clearance.
//! A carried block is modelled by sweeping its centre from the lifted start
//! to the lifted goal.
//! All geometry is evaluated in lattice units (block side = 1).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{Face, GridCoord, Structure};

pub const LEN_AD_RATIO: f64 = 1.375;
pub const LEN_BC_RATIO: f64 = 1.506;
pub const CLEARANCE_RATIO: f64 = 0.25;

const SAMPLE_STEP: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("block side length must be positive and finite, got {0}")]
    NonPositiveSide(f64),
    #[error("link lengths and clearance must be positive")]
    NonPositiveLength,
    #[error("paired links must match: A = D and B = C")]
    Asymmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InchwormGeometry {
    pub block_side_l: f64,
    pub len_a: f64,
    pub len_b: f64,
    pub len_c: f64,
    pub len_d: f64,
    pub clearance: f64,
}

impl Default for InchwormGeometry {
    fn default() -> Self {
        derive_link_lengths(1.0).expect("unit block side is valid")
    }
}

impl InchwormGeometry {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.block_side_l.is_finite() && self.block_side_l > 0.0) {
            return Err(GeometryError::NonPositiveSide(self.block_side_l));
        }
        let all = [self.len_a, self.len_b, self.len_c, self.len_d, self.clearance];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(GeometryError::NonPositiveLength);
        }
        if self.len_a != self.len_d || self.len_b != self.len_c {
            return Err(GeometryError::Asymmetric);
        }
        Ok(())
    }

    /// The same geometry expressed in block-side units.
    fn normalized(&self) -> Lengths {
        let l = self.block_side_l;
        Lengths {
            a: self.len_a / l,
            b: self.len_b / l,
            c: self.len_c / l,
            d: self.len_d / l,
            clearance: self.clearance / l,
        }
    }
}

pub fn derive_link_lengths(block_side_l: f64) -> Result<InchwormGeometry, GeometryError> {
    if !(block_side_l.is_finite() && block_side_l > 0.0) {
        return Err(GeometryError::NonPositiveSide(block_side_l));
    }
    Ok(InchwormGeometry {
        block_side_l,
        len_a: LEN_AD_RATIO * block_side_l,
        len_b: LEN_BC_RATIO * block_side_l,
        len_c: LEN_BC_RATIO * block_side_l,
        len_d: LEN_AD_RATIO * block_side_l,
        clearance: CLEARANCE_RATIO * block_side_l,
    })
}

/// Fully extended span of the chain.
pub fn reach_radius(geometry: &InchwormGeometry) -> f64 {
    geometry.len_a + geometry.len_b + geometry.len_c + geometry.len_d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FreeEnd {
    Retracted,
    At(Face),
    CarryingAt(Face),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub anchored_face: Face,
    pub free_end: FreeEnd,
}

impl Pose {
    pub fn anchored(face: Face) -> Self {
        Self { anchored_face: face, free_end: FreeEnd::Retracted }
    }

    pub fn free_face(&self) -> Option<Face> {
        match self.free_end {
            FreeEnd::Retracted => None,
            FreeEnd::At(f) | FreeEnd::CarryingAt(f) => Some(f),
        }
    }
}

type V3 = [f64; 3];

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: V3) -> Option<V3> {
    let n = norm(a);
    (n > 1e-9).then(|| scale(a, 1.0 / n))
}

#[derive(Clone, Copy, Debug)]
struct Lengths {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    clearance: f64,
}

/// Occupancy lookups used by the collision test.
struct Obstacles<'a> {
    structure: &'a Structure,
    ground: f64,
}

impl Obstacles<'_> {
    /// Whether `p` lies strictly inside an occupied cell inflated by
    /// `clearance`, or below the ground plane plus the base clearance,
    /// ignoring `skip`.
    fn hits(&self, p: V3, clearance: f64, skip: Option<GridCoord>) -> bool {
        let half = 0.5 + clearance;
        if p[2] < -0.5 + self.ground {
            return true;
        }
        let lo = |v: f64| (v - half).ceil() as i32;
        let hi = |v: f64| (v + half).floor() as i32;
        for x in lo(p[0])..=hi(p[0]) {
            if (p[0] - x as f64).abs() >= half {
                continue;
            }
            for y in lo(p[1])..=hi(p[1]) {
                if (p[1] - y as f64).abs() >= half {
                    continue;
                }
                for z in lo(p[2]).max(0)..=hi(p[2]) {
                    if (p[2] - z as f64).abs() >= half {
                        continue;
                    }
                    let c = GridCoord::new(x, y, z);
                    if Some(c) != skip && self.structure.is_occupied(c) {
                        return true;
                    }
                }
            }
        }
        false
    }

    fn segment_hits(&self, a: V3, b: V3, clearance: f64, skip: Option<GridCoord>) -> bool {
        let n = ((norm(sub(b, a)) / SAMPLE_STEP).ceil() as usize).max(1);
        (0..=n).any(|i| {
            let t = i as f64 / n as f64;
            self.hits(add(a, scale(sub(b, a), t)), clearance, skip)
        })
    }
}

/// Candidate elbow directions for the B-C joint, in preference order.
fn elbow_candidates(axis: V3, bisector: V3, toward: V3) -> Vec<V3> {
    let perp = |v: V3| unit(sub(v, scale(axis, dot(v, axis))));
    let mut out = Vec::with_capacity(10);
    out.extend(perp(bisector));
    out.extend(perp(toward));
    let seed = if axis[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    if let Some(u) = perp(seed) {
        let v = cross(axis, u);
        for k in 0..8 {
            let th = k as f64 * std::f64::consts::FRAC_PI_4;
            out.push(add(scale(u, th.cos()), scale(v, th.sin())));
        }
    }
    out
}

/// Checks one pose of the chain: anchor end at `p1` (normal `na`), free end at
/// `pf` (normal `nf`). `goal_skip` is the cell the free end may touch. Only the
/// engaged pose has to close the B-C elbow exactly.
#[allow(clippy::too_many_arguments)]
fn pose_clear(
    obs: &Obstacles<'_>,
    len: &Lengths,
    p1: V3,
    na: V3,
    anchor_cell: GridCoord,
    pf: V3,
    nf: V3,
    goal_skip: Option<GridCoord>,
    must_close: bool,
) -> bool {
    let j1 = add(p1, scale(na, len.a));
    let j3 = add(pf, scale(nf, len.d));
    let span = sub(j3, j1);
    let dist = norm(span);
    let closes = dist <= len.b + len.c + 1e-9 && dist >= (len.b - len.c).abs() - 1e-9;
    if must_close && !closes {
        return false;
    }
    if obs.segment_hits(p1, j1, len.clearance, Some(anchor_cell)) {
        return false;
    }
    if obs.segment_hits(j3, pf, len.clearance, goal_skip) {
        return false;
    }

    if !closes {
        // Transit pose beyond the elbow's span: approximate B-C as the wrist chord.
        return !obs.segment_hits(j1, j3, len.clearance, None);
    }
    let Some(axis) = unit(span) else {
        // Joints coincide: B and C fold onto each other.
        let j2 = add(j1, scale(na, len.b));
        return !obs.segment_hits(j1, j2, len.clearance, None);
    };
    // Distance from j1 to the elbow's projection on the axis.
    let along = (dist * dist + len.b * len.b - len.c * len.c) / (2.0 * dist);
    let h = (len.b * len.b - along * along).max(0.0).sqrt();
    let foot = add(j1, scale(axis, along));
    for e in elbow_candidates(axis, add(na, nf), sub(pf, p1)) {
        let j2 = add(foot, scale(e, h));
        if !obs.segment_hits(j1, j2, len.clearance, None) && !obs.segment_hits(j2, j3, len.clearance, None) {
            return true;
        }
    }
    false
}

/// One-directional swing check: anchored at `from`, free end moves to `to`.
fn swing_clear(structure: &Structure, from: Face, to: Face, len: &Lengths, carrying: bool) -> bool {
    let obs = Obstacles { structure, ground: len.clearance };
    let p1 = from.center();
    let na = from.dir.vector();
    let p2 = to.center();
    let nb = to.dir.vector();
    // Disengaged: free end lifted one unit off the anchor face.
    let lifted = add(p1, na);
    if !pose_clear(&obs, len, p1, na, from.cell, lifted, na, None, false) {
        return false;
    }
    // Above goal: one unit outward along the goal normal.
    let above = add(p2, nb);
    if !pose_clear(&obs, len, p1, na, from.cell, above, nb, None, false) {
        return false;
    }
    // A carried block travels with its centre half a unit beyond the free
    // end, from above the anchor to above the goal.
    if carrying && obs.segment_hits(add(p1, scale(na, 0.5)), add(p2, scale(nb, 0.5)), 0.0, None) {
        return false;
    }
    // Engaged with the goal face.
    pose_clear(&obs, len, p1, na, from.cell, p2, nb, Some(to.cell), true)
}

/// Whether the free end can travel from `from` to `to` without collision.
///
/// The move is accepted only if the swing is clear in both directions, so the
/// predicate is symmetric in its two faces.
pub fn is_reachable_and_collision_free(
    structure: &Structure,
    from: Face,
    to: Face,
    geometry: &InchwormGeometry,
    carrying: bool,
) -> bool {
    let len = geometry.normalized();
    let reach = len.a + len.b + len.c + len.d;
    if norm(sub(to.center(), from.center())) > reach {
        return false;
    }
    if from == to {
        return true;
    }
    swing_clear(structure, from, to, &len, carrying) && swing_clear(structure, to, from, &len, carrying)
}

/// Memo for the collision predicate over a changing structure.
///
/// Entries near a changed cell are dropped by [`MoveCache::invalidate_near`];
/// everything farther than [`MoveCache::RADIUS`] from both faces is unaffected
/// because no sampled body point comes that close.
#[derive(Debug, Default, Clone)]
pub struct MoveCache {
    map: std::collections::HashMap<(Face, Face, bool), bool>,
    pub hits: u64,
    pub misses: u64,
}

impl MoveCache {
    pub const RADIUS: i32 = 5;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn check(
        &mut self,
        structure: &Structure,
        geometry: &InchwormGeometry,
        from: Face,
        to: Face,
        carrying: bool,
    ) -> bool {
        let key = if from <= to { (from, to, carrying) } else { (to, from, carrying) };
        if let Some(v) = self.map.get(&key) {
            self.hits += 1;
            return *v;
        }
        self.misses += 1;
        let v = is_reachable_and_collision_free(structure, from, to, geometry, carrying);
        self.map.insert(key, v);
        v
    }

    pub fn invalidate_near(&mut self, cells: &[GridCoord]) {
        if cells.is_empty() {
            return;
        }
        let near = |a: GridCoord, b: GridCoord| {
            (a.x - b.x).abs() <= Self::RADIUS && (a.y - b.y).abs() <= Self::RADIUS && (a.z - b.z).abs() <= Self::RADIUS
        };
        self.map.retain(|(a, b, _), _| !cells.iter().any(|&c| near(c, a.cell) || near(c, b.cell)));
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{BlockState, FaceDir, FaceDir::*};

    fn g(x: i32, y: i32, z: i32) -> GridCoord {
        GridCoord::new(x, y, z)
    }

    fn f(x: i32, y: i32, z: i32, d: FaceDir) -> Face {
        Face::new(g(x, y, z), d)
    }

    fn structure(cells: &[(i32, i32, i32)]) -> Structure {
        Structure::from_cells(g(0, 0, 0), cells.iter().map(|&c| c.into())).unwrap()
    }

    #[test]
    fn paper_lengths_at_three_inches() {
        let geo = derive_link_lengths(3.0).unwrap();
        assert_eq!(geo.len_a, 4.125);
        assert_eq!(geo.len_d, 4.125);
        assert_eq!(geo.len_b, 4.518);
        assert_eq!(geo.len_c, 4.518);
        assert_eq!(geo.clearance, 0.75);
    }

    #[test]
    fn unit_lengths_and_scaling() {
        let one = derive_link_lengths(1.0).unwrap();
        assert_eq!((one.len_a, one.len_b, one.len_c, one.len_d), (1.375, 1.506, 1.506, 1.375));
        assert_eq!(one.clearance, 0.25);
        let two = derive_link_lengths(2.0).unwrap();
        assert_eq!(two.len_a, 2.0 * one.len_a);
        assert_eq!(two.len_b, 2.0 * one.len_b);
        assert_eq!(two.clearance, 2.0 * one.clearance);
    }

    #[test]
    fn rejects_bad_side() {
        assert!(derive_link_lengths(0.0).is_err());
        assert!(derive_link_lengths(-1.0).is_err());
        assert!(derive_link_lengths(f64::NAN).is_err());
    }

    #[test]
    fn reach_radius_values() {
        assert!((reach_radius(&derive_link_lengths(1.0).unwrap()) - 5.762).abs() < 1e-12);
        assert!((reach_radius(&derive_link_lengths(3.0).unwrap()) - 17.286).abs() < 1e-12);
    }

    #[test]
    fn inching_step_on_plane() {
        let s = structure(&[(1, 0, 0), (2, 0, 0), (0, 1, 0), (1, 1, 0)]);
        let geo = InchwormGeometry::default();
        assert!(is_reachable_and_collision_free(&s, f(0, 0, 0, PosZ), f(1, 0, 0, PosZ), &geo, false));
        assert!(is_reachable_and_collision_free(&s, f(0, 0, 0, PosZ), f(1, 0, 0, PosZ), &geo, true));
    }

    #[test]
    fn four_fundamental_motions() {
        let geo = InchwormGeometry::default();
        let ok = |s: &Structure, a: Face, b: Face| is_reachable_and_collision_free(s, a, b, &geo, false);

        let plane = structure(&[(1, 0, 0)]);
        assert!(ok(&plane, f(0, 0, 0, PosZ), f(1, 0, 0, PosZ)), "step");

        let column = structure(&[(0, 0, 1), (0, 0, 2)]);
        assert!(ok(&column, f(0, 0, 0, PosX), f(0, 0, 1, PosX)), "vertical");

        let wall = structure(&[(1, 0, 0), (1, 0, 1)]);
        assert!(ok(&wall, f(0, 0, 0, PosZ), f(1, 0, 1, NegX)), "concave corner");

        let ledge = structure(&[(0, 0, 1), (1, 0, 1)]);
        assert!(ok(&ledge, f(1, 0, 1, PosZ), f(1, 0, 1, PosX)), "convex corner");
        let high = structure(&[(0, 0, 1), (0, 0, 2), (0, 0, 3), (1, 0, 3)]);
        assert!(ok(&high, f(1, 0, 3, PosX), f(1, 0, 3, NegZ)), "convex corner under ledge");
        // The approach pose needs room below the ledge for link D.
        assert!(!ok(&ledge, f(1, 0, 1, PosX), f(1, 0, 1, NegZ)));
    }

    #[test]
    fn convex_corner_span_fits_reach() {
        // Engaged convex pose: both wrist joints sit one link A/D out from
        // perpendicular face centres on the same block.
        let geo = InchwormGeometry::default();
        let j1 = [0.0, 0.0, 0.5 + geo.len_a];
        let j3 = [0.5 + geo.len_d, 0.0, 0.0];
        let wrist_gap = norm(sub(j3, j1));
        assert!(wrist_gap <= geo.len_b + geo.len_c);
        let required = geo.len_a + wrist_gap + geo.len_d;
        assert!(reach_radius(&geo) > required);
        let diagonal = 2f64.sqrt();
        assert!(reach_radius(&geo) >= 2.0 * diagonal);
    }

    #[test]
    fn far_faces_are_unreachable() {
        let cells: Vec<_> = (0..=10).map(|x| (x, 0, 0)).collect();
        let s = structure(&cells);
        let geo = InchwormGeometry::default();
        assert!(!is_reachable_and_collision_free(&s, f(0, 0, 0, PosZ), f(10, 0, 0, PosZ), &geo, false));
    }

    #[test]
    fn swing_through_a_wall_is_blocked() {
        // Top of (0,0,0) to top of (2,0,0) with a 3-high wall at x = 1.
        let s = structure(&[(1, 0, 0), (1, 0, 1), (1, 0, 2), (2, 0, 0)]);
        let geo = InchwormGeometry::default();
        assert!(!is_reachable_and_collision_free(&s, f(0, 0, 0, PosZ), f(2, 0, 0, PosZ), &geo, false));
    }

    #[test]
    fn facing_into_a_block_is_blocked() {
        // The goal's outward cell is occupied, so link D must pass through it.
        let s = structure(&[(1, 0, 0), (1, 0, 1)]);
        let geo = InchwormGeometry::default();
        assert!(!is_reachable_and_collision_free(&s, f(0, 0, 0, PosZ), f(1, 0, 0, PosZ), &geo, false));
    }

    #[test]
    fn offline_blocks_still_obstruct() {
        let mut s = structure(&[(1, 0, 0), (1, 0, 1), (1, 0, 2), (2, 0, 0)]);
        s.set_state(g(1, 0, 2), BlockState::Offline).unwrap();
        let geo = InchwormGeometry::default();
        assert!(!is_reachable_and_collision_free(&s, f(0, 0, 0, PosZ), f(2, 0, 0, PosZ), &geo, false));
    }

    #[test]
    fn identical_faces_trivially_reachable() {
        let s = structure(&[]);
        let geo = InchwormGeometry::default();
        assert!(is_reachable_and_collision_free(&s, f(0, 0, 0, PosZ), f(0, 0, 0, PosZ), &geo, false));
    }

    #[test]
    fn carried_block_sweeps_over_bumps() {
        let s = structure(&[(1, 0, 0), (2, 0, 0), (1, 0, 1)]);
        let geo = InchwormGeometry::default();
        let (a, b) = (f(0, 0, 0, PosZ), f(2, 0, 0, PosZ));
        assert!(is_reachable_and_collision_free(&s, a, b, &geo, false));
        assert!(!is_reachable_and_collision_free(&s, a, b, &geo, true));
    }

    #[test]
    fn carrying_along_a_flat_row() {
        let s = structure(&[(1, 0, 0), (2, 0, 0)]);
        let geo = InchwormGeometry::default();
        assert!(is_reachable_and_collision_free(&s, f(0, 0, 0, PosZ), f(1, 0, 0, PosZ), &geo, true));
        assert!(is_reachable_and_collision_free(&s, f(0, 0, 0, PosZ), f(2, 0, 0, PosZ), &geo, true));
    }
}

//! Voxel lattice data model: coordinates, faces, blueprints and the live
//! structure of placed smart blocks.
//!
//! One lattice unit equals one block side length. Cell `(x, y, z)` spans
//! `[x - 0.5, x + 0.5]` along each axis, so the ground plane sits at
//! `z = -0.5` and every placed block has `z >= 0`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCoord {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl GridCoord {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    pub fn step(self, dir: FaceDir) -> Self {
        let [dx, dy, dz] = dir.offset();
        Self::new(self.x + dx, self.y + dy, self.z + dz)
    }

    pub fn manhattan(self, other: Self) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y) + self.z.abs_diff(other.z)
    }

    pub fn column(self) -> (i32, i32) {
        (self.x, self.y)
    }

    pub fn to_array(self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }
}

impl fmt::Display for GridCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.x, self.y, self.z)
    }
}

impl From<(i32, i32, i32)> for GridCoord {
    fn from((x, y, z): (i32, i32, i32)) -> Self {
        Self::new(x, y, z)
    }
}

/// One of the six axis directions a block face can point in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaceDir {
    PosX,
    NegX,
    PosY,
    NegY,
    PosZ,
    NegZ,
}

impl FaceDir {
    /// Fixed iteration order used everywhere: +X, -X, +Y, -Y, +Z, -Z.
    pub const ALL: [FaceDir; 6] =
        [FaceDir::PosX, FaceDir::NegX, FaceDir::PosY, FaceDir::NegY, FaceDir::PosZ, FaceDir::NegZ];

    pub const fn offset(self) -> [i32; 3] {
        match self {
            FaceDir::PosX => [1, 0, 0],
            FaceDir::NegX => [-1, 0, 0],
            FaceDir::PosY => [0, 1, 0],
            FaceDir::NegY => [0, -1, 0],
            FaceDir::PosZ => [0, 0, 1],
            FaceDir::NegZ => [0, 0, -1],
        }
    }

    pub fn vector(self) -> [f64; 3] {
        let [x, y, z] = self.offset();
        [x as f64, y as f64, z as f64]
    }

    pub const fn opposite(self) -> FaceDir {
        match self {
            FaceDir::PosX => FaceDir::NegX,
            FaceDir::NegX => FaceDir::PosX,
            FaceDir::PosY => FaceDir::NegY,
            FaceDir::NegY => FaceDir::PosY,
            FaceDir::PosZ => FaceDir::NegZ,
            FaceDir::NegZ => FaceDir::PosZ,
        }
    }

    /// 0 for X, 1 for Y, 2 for Z.
    pub const fn axis(self) -> usize {
        match self {
            FaceDir::PosX | FaceDir::NegX => 0,
            FaceDir::PosY | FaceDir::NegY => 1,
            FaceDir::PosZ | FaceDir::NegZ => 2,
        }
    }

    /// The four directions perpendicular to `self`, in `ALL` order.
    pub fn tangents(self) -> [FaceDir; 4] {
        let mut out = [FaceDir::PosX; 4];
        let mut i = 0;
        for d in FaceDir::ALL {
            if d.axis() != self.axis() {
                out[i] = d;
                i += 1;
            }
        }
        out
    }

    pub fn from_offset(offset: [i32; 3]) -> Option<FaceDir> {
        FaceDir::ALL.into_iter().find(|d| d.offset() == offset)
    }

    pub fn label(self) -> &'static str {
        match self {
            FaceDir::PosX => "+X",
            FaceDir::NegX => "-X",
            FaceDir::PosY => "+Y",
            FaceDir::NegY => "-Y",
            FaceDir::PosZ => "+Z",
            FaceDir::NegZ => "-Z",
        }
    }

    pub fn parse(s: &str) -> Option<FaceDir> {
        FaceDir::ALL.into_iter().find(|d| d.label().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for FaceDir {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A face of the block at `cell`, pointing in `dir`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Face {
    pub cell: GridCoord,
    pub dir: FaceDir,
}

impl Face {
    pub const fn new(cell: GridCoord, dir: FaceDir) -> Self {
        Self { cell, dir }
    }

    /// The cell this face looks into.
    pub fn outward(self) -> GridCoord {
        self.cell.step(self.dir)
    }

    /// Face centre in doubled lattice coordinates (always integral).
    pub fn center2(self) -> [i32; 3] {
        let [dx, dy, dz] = self.dir.offset();
        [2 * self.cell.x + dx, 2 * self.cell.y + dy, 2 * self.cell.z + dz]
    }

    pub fn center(self) -> [f64; 3] {
        let c = self.center2();
        [c[0] as f64 / 2.0, c[1] as f64 / 2.0, c[2] as f64 / 2.0]
    }

    /// Manhattan distance between face centres, in lattice units.
    ///
    /// The doubled-coordinate difference of two face centres always has an
    /// even component sum, so the halving is exact.
    pub fn manhattan(self, other: Face) -> u32 {
        let a = self.center2();
        let b = other.center2();
        (a[0].abs_diff(b[0]) + a[1].abs_diff(b[1]) + a[2].abs_diff(b[2])) / 2
    }
}

impl fmt::Display for Face {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.cell, self.dir)
    }
}

/// Six face-adjacent cells in the fixed order +X, -X, +Y, -Y, +Z, -Z.
pub fn neighbors(cell: GridCoord) -> [GridCoord; 6] {
    FaceDir::ALL.map(|d| cell.step(d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockState {
    /// Green: part of the structure.
    Incorporated,
    /// Flashing yellow: set down but not yet added (fed or ferried blocks).
    AwaitingPlacement,
    /// Flashing red: a neighbouring block went missing or failed.
    NeighborAlert,
    Offline,
}

impl BlockState {
    /// Whether an inchworm may anchor to this block.
    pub fn is_foothold(self) -> bool {
        matches!(self, BlockState::Incorporated | BlockState::NeighborAlert)
    }

    /// Whether the block takes part in message relaying.
    pub fn relays(self) -> bool {
        !matches!(self, BlockState::Offline)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LatticeError {
    #[error("cell {0} is already occupied")]
    Occupied(GridCoord),
    #[error("cell {0} is not occupied")]
    Vacant(GridCoord),
    #[error("cell {0} lies below the ground plane")]
    BelowGround(GridCoord),
    #[error("cell {0} has no occupied face neighbour")]
    Floating(GridCoord),
    #[error("the home block at {0} cannot be removed")]
    HomeRemoval(GridCoord),
    #[error("structure is disconnected: {0} cells unreachable from home")]
    Disconnected(usize),
}

/// Dense occupancy lookup over a growable bounding box.
#[derive(Clone, Debug)]
struct DenseGrid {
    min: [i32; 3],
    dims: [i32; 3],
    cells: Vec<u8>,
}

impl DenseGrid {
    const MARGIN: i32 = 4;

    fn around(c: GridCoord) -> Self {
        let min = [c.x - Self::MARGIN, c.y - Self::MARGIN, 0];
        let dims = [2 * Self::MARGIN + 1, 2 * Self::MARGIN + 1, c.z + Self::MARGIN + 1];
        let len = (dims[0] * dims[1] * dims[2]) as usize;
        Self { min, dims, cells: vec![0; len] }
    }

    fn index(&self, c: GridCoord) -> Option<usize> {
        let p = [c.x - self.min[0], c.y - self.min[1], c.z - self.min[2]];
        if (0..3).all(|i| p[i] >= 0 && p[i] < self.dims[i]) {
            Some(((p[2] * self.dims[1] + p[1]) * self.dims[0] + p[0]) as usize)
        } else {
            None
        }
    }

    fn get(&self, c: GridCoord) -> u8 {
        self.index(c).map_or(0, |i| self.cells[i])
    }

    fn set(&mut self, c: GridCoord, v: u8) {
        if self.index(c).is_none() {
            self.grow_to(c);
        }
        let i = self.index(c).expect("grid grown to cover cell");
        self.cells[i] = v;
    }

    fn grow_to(&mut self, c: GridCoord) {
        let mut min = self.min;
        let mut max = [self.min[0] + self.dims[0] - 1, self.min[1] + self.dims[1] - 1, self.min[2] + self.dims[2] - 1];
        let p = c.to_array();
        for i in 0..3 {
            if p[i] < min[i] {
                min[i] = p[i] - Self::MARGIN;
            }
            if p[i] > max[i] {
                max[i] = p[i] + Self::MARGIN;
            }
        }
        min[2] = min[2].max(0);
        let dims = [max[0] - min[0] + 1, max[1] - min[1] + 1, max[2] - min[2] + 1];
        let mut grown = DenseGrid { min, dims, cells: vec![0; (dims[0] * dims[1] * dims[2]) as usize] };
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    let cell = GridCoord::new(x + self.min[0], y + self.min[1], z + self.min[2]);
                    let v = self.get(cell);
                    if v != 0 {
                        let i = grown.index(cell).expect("grown grid covers old grid");
                        grown.cells[i] = v;
                    }
                }
            }
        }
        *self = grown;
    }
}

fn state_code(s: BlockState) -> u8 {
    match s {
        BlockState::Incorporated => 1,
        BlockState::AwaitingPlacement => 2,
        BlockState::NeighborAlert => 3,
        BlockState::Offline => 4,
    }
}

fn code_state(c: u8) -> Option<BlockState> {
    match c {
        1 => Some(BlockState::Incorporated),
        2 => Some(BlockState::AwaitingPlacement),
        3 => Some(BlockState::NeighborAlert),
        4 => Some(BlockState::Offline),
        _ => None,
    }
}

/// The live configuration of placed smart blocks.
///
/// Every mutation bumps `version`, which planners use to detect stale plans.
#[derive(Clone, Debug)]
pub struct Structure {
    blocks: BTreeMap<GridCoord, BlockState>,
    grid: DenseGrid,
    home: GridCoord,
    version: u64,
}

impl PartialEq for Structure {
    fn eq(&self, other: &Self) -> bool {
        self.home == other.home && self.blocks == other.blocks
    }
}

impl Structure {
    /// A structure holding only the home block.
    pub fn new(home: GridCoord) -> Result<Self, LatticeError> {
        if home.z < 0 {
            return Err(LatticeError::BelowGround(home));
        }
        let mut grid = DenseGrid::around(home);
        grid.set(home, state_code(BlockState::Incorporated));
        let mut blocks = BTreeMap::new();
        blocks.insert(home, BlockState::Incorporated);
        Ok(Self { blocks, grid, home, version: 0 })
    }

    /// Builds a structure of incorporated blocks, inserting cells in
    /// breadth-first order from `home`.
    pub fn from_cells<I>(home: GridCoord, cells: I) -> Result<Self, LatticeError>
    where
        I: IntoIterator<Item = GridCoord>,
    {
        let wanted: BTreeSet<GridCoord> = cells.into_iter().chain([home]).collect();
        if let Some(c) = wanted.iter().find(|c| c.z < 0) {
            return Err(LatticeError::BelowGround(*c));
        }
        let order = bfs_order(&wanted, home);
        if order.len() != wanted.len() {
            return Err(LatticeError::Disconnected(wanted.len() - order.len()));
        }
        let mut s = Structure::new(home)?;
        for c in order.into_iter().skip(1) {
            s.insert(c, BlockState::Incorporated)?;
        }
        Ok(s)
    }

    pub fn home(&self) -> GridCoord {
        self.home
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn is_occupied(&self, c: GridCoord) -> bool {
        self.grid.get(c) != 0
    }

    pub fn state(&self, c: GridCoord) -> Option<BlockState> {
        code_state(self.grid.get(c))
    }

    pub fn iter(&self) -> impl Iterator<Item = (GridCoord, BlockState)> + '_ {
        self.blocks.iter().map(|(c, s)| (*c, *s))
    }

    pub fn cells(&self) -> impl Iterator<Item = GridCoord> + '_ {
        self.blocks.keys().copied()
    }

    /// Cells holding incorporated (or alerting) blocks, i.e. the built part.
    pub fn built_cells(&self) -> impl Iterator<Item = GridCoord> + '_ {
        self.blocks.iter().filter(|(_, s)| s.is_foothold()).map(|(c, _)| *c)
    }

    /// Places a block; it must touch an already occupied cell.
    pub fn insert(&mut self, c: GridCoord, state: BlockState) -> Result<(), LatticeError> {
        if c.z < 0 {
            return Err(LatticeError::BelowGround(c));
        }
        if self.is_occupied(c) {
            return Err(LatticeError::Occupied(c));
        }
        if !neighbors(c).iter().any(|n| self.is_occupied(*n)) {
            return Err(LatticeError::Floating(c));
        }
        self.blocks.insert(c, state);
        self.grid.set(c, state_code(state));
        self.version += 1;
        Ok(())
    }

    pub fn remove(&mut self, c: GridCoord) -> Result<BlockState, LatticeError> {
        if c == self.home {
            return Err(LatticeError::HomeRemoval(c));
        }
        let state = self.blocks.remove(&c).ok_or(LatticeError::Vacant(c))?;
        self.grid.set(c, 0);
        self.version += 1;
        Ok(state)
    }

    pub fn set_state(&mut self, c: GridCoord, state: BlockState) -> Result<(), LatticeError> {
        let slot = self.blocks.get_mut(&c).ok_or(LatticeError::Vacant(c))?;
        if *slot != state {
            *slot = state;
            self.grid.set(c, state_code(state));
            self.version += 1;
        }
        Ok(())
    }

    /// A face an inchworm can anchor to: an incorporated block whose
    /// outward cell is free and above ground.
    pub fn is_foothold(&self, f: Face) -> bool {
        let out = f.outward();
        out.z >= 0 && !self.is_occupied(out) && self.state(f.cell).is_some_and(BlockState::is_foothold)
    }

    pub fn is_exposed(&self, f: Face) -> bool {
        self.is_occupied(f.cell) && !self.is_occupied(f.outward())
    }

    pub fn footholds(&self) -> Vec<Face> {
        let mut out = Vec::new();
        for (c, s) in &self.blocks {
            if !s.is_foothold() {
                continue;
            }
            for d in FaceDir::ALL {
                let f = Face::new(*c, d);
                if self.is_foothold(f) {
                    out.push(f);
                }
            }
        }
        out
    }

    /// Whether every occupied cell is reachable from home through occupied
    /// face-adjacent cells.
    pub fn is_connected(&self) -> bool {
        self.unreachable_from_home().is_empty()
    }

    pub fn unreachable_from_home(&self) -> Vec<GridCoord> {
        let all: BTreeSet<GridCoord> = self.blocks.keys().copied().collect();
        let reached: BTreeSet<GridCoord> = bfs_order(&all, self.home).into_iter().collect();
        all.difference(&reached).copied().collect()
    }

    /// Checks the structure invariants: home occupied, all cells at or above
    /// ground, one connected component.
    pub fn validate(&self) -> Result<(), LatticeError> {
        if !self.is_occupied(self.home) {
            return Err(LatticeError::Vacant(self.home));
        }
        if let Some(c) = self.blocks.keys().find(|c| c.z < 0) {
            return Err(LatticeError::BelowGround(*c));
        }
        let missing = self.unreachable_from_home();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(LatticeError::Disconnected(missing.len()))
        }
    }

    /// Whether removing `c` would split the structure.
    pub fn removal_disconnects(&self, c: GridCoord) -> bool {
        let rest: BTreeSet<GridCoord> = self.blocks.keys().copied().filter(|x| *x != c).collect();
        bfs_order(&rest, self.home).len() != rest.len()
    }
}

/// Breadth-first visiting order over `cells` from `start` using face adjacency.
pub(crate) fn bfs_order(cells: &BTreeSet<GridCoord>, start: GridCoord) -> Vec<GridCoord> {
    if !cells.contains(&start) {
        return Vec::new();
    }
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    let mut order = Vec::with_capacity(cells.len());
    while let Some(c) = queue.pop_front() {
        order.push(c);
        for n in neighbors(c) {
            if cells.contains(&n) && seen.insert(n) {
                queue.push_back(n);
            }
        }
    }
    order
}

/// All faces whose outward neighbour cell is unoccupied. Ground-facing faces
/// are included.
pub fn exposed_faces(structure: &Structure) -> BTreeSet<Face> {
    let mut out = BTreeSet::new();
    for c in structure.cells() {
        for d in FaceDir::ALL {
            let f = Face::new(c, d);
            if !structure.is_occupied(f.outward()) {
                out.insert(f);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlueprintError {
    #[error("blueprint has no cells")]
    Empty,
    #[error("home cell {0} is not part of the blueprint")]
    HomeMissing(GridCoord),
    #[error("home cell {0} must be on layer z=0")]
    HomeNotOnGround(GridCoord),
    #[error("feeding cell {0} is not part of the blueprint")]
    FeedingMissing(GridCoord),
    #[error("feeding cell {0} must be on layer z=0")]
    FeedingNotOnGround(GridCoord),
    #[error("cell {0} lies below the ground plane")]
    BelowGround(GridCoord),
    #[error("blueprint is not a single connected component ({unreached} cells unreachable from home)")]
    Disconnected { unreached: usize },
}

/// Target structure: a set of cells with designated home and feeding cells.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blueprint {
    cells: BTreeSet<GridCoord>,
    home: GridCoord,
    feeding: GridCoord,
}

impl Blueprint {
    pub fn new<I>(cells: I, home: GridCoord, feeding: GridCoord) -> Result<Self, BlueprintError>
    where
        I: IntoIterator<Item = GridCoord>,
    {
        let cells: BTreeSet<GridCoord> = cells.into_iter().collect();
        if cells.is_empty() {
            return Err(BlueprintError::Empty);
        }
        if let Some(c) = cells.iter().find(|c| c.z < 0) {
            return Err(BlueprintError::BelowGround(*c));
        }
        if !cells.contains(&home) {
            return Err(BlueprintError::HomeMissing(home));
        }
        if home.z != 0 {
            return Err(BlueprintError::HomeNotOnGround(home));
        }
        if !cells.contains(&feeding) {
            return Err(BlueprintError::FeedingMissing(feeding));
        }
        if feeding.z != 0 {
            return Err(BlueprintError::FeedingNotOnGround(feeding));
        }
        let reached = bfs_order(&cells, home).len();
        if reached != cells.len() {
            return Err(BlueprintError::Disconnected { unreached: cells.len() - reached });
        }
        Ok(Self { cells, home, feeding })
    }

    pub fn cells(&self) -> &BTreeSet<GridCoord> {
        &self.cells
    }

    pub fn home(&self) -> GridCoord {
        self.home
    }

    pub fn feeding(&self) -> GridCoord {
        self.feeding
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, c: GridCoord) -> bool {
        self.cells.contains(&c)
    }

    pub fn max_z(&self) -> i32 {
        self.cells.iter().map(|c| c.z).max().unwrap_or(0)
    }

    pub fn layer(&self, z: i32) -> impl Iterator<Item = GridCoord> + '_ {
        self.cells.iter().copied().filter(move |c| c.z == z)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Buildability {
    Buildable,
    /// Cells that, when their layer is built, can only be reached from above.
    Unbuildable(Vec<GridCoord>),
}

impl Buildability {
    pub fn is_buildable(&self) -> bool {
        matches!(self, Buildability::Buildable)
    }

    pub fn violations(&self) -> Option<&[GridCoord]> {
        match self {
            Buildability::Buildable => None,
            Buildability::Unbuildable(v) => Some(v),
        }
    }
}

/// Bottom-up buildability check.
///
/// Layers are processed in increasing `z`. Within a layer the placement order
/// is free, so a block is placeable iff it is connected, inside its own layer,
/// to a block resting on the layer below (or, on layer 0, to home).
pub fn check_buildable(blueprint: &Blueprint) -> Buildability {
    let mut violations = Vec::new();
    for z in 0..=blueprint.max_z() {
        let layer: BTreeSet<GridCoord> = blueprint.layer(z).collect();
        let seeds: Vec<GridCoord> = if z == 0 {
            vec![blueprint.home()]
        } else {
            layer.iter().copied().filter(|c| blueprint.contains(c.step(FaceDir::NegZ))).collect()
        };
        let reached = flood_within(&layer, &seeds);
        violations.extend(layer.difference(&reached).copied());
    }
    if violations.is_empty() {
        Buildability::Buildable
    } else {
        Buildability::Unbuildable(violations)
    }
}

/// Validates raw cells as a blueprint and then checks buildability, keeping
/// malformed input distinct from unbuildable input.
pub fn assess_blueprint<I>(cells: I, home: GridCoord, feeding: GridCoord) -> Result<Buildability, BlueprintError>
where
    I: IntoIterator<Item = GridCoord>,
{
    Blueprint::new(cells, home, feeding).map(|bp| check_buildable(&bp))
}

pub(crate) fn flood_within(cells: &BTreeSet<GridCoord>, seeds: &[GridCoord]) -> BTreeSet<GridCoord> {
    let mut reached: BTreeSet<GridCoord> = seeds.iter().copied().filter(|s| cells.contains(s)).collect();
    let mut queue: VecDeque<GridCoord> = reached.iter().copied().collect();
    while let Some(c) = queue.pop_front() {
        for n in neighbors(c) {
            if cells.contains(&n) && reached.insert(n) {
                queue.push_back(n);
            }
        }
    }
    reached
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(x: i32, y: i32, z: i32) -> GridCoord {
        GridCoord::new(x, y, z)
    }

    fn plane(n: i32) -> Vec<GridCoord> {
        (0..n).flat_map(|x| (0..n).map(move |y| g(x, y, 0))).collect()
    }

    #[test]
    fn neighbor_order_is_fixed() {
        assert_eq!(neighbors(g(0, 0, 0)), [g(1, 0, 0), g(-1, 0, 0), g(0, 1, 0), g(0, -1, 0), g(0, 0, 1), g(0, 0, -1)]);
        for n in neighbors(g(2, 3, 1)) {
            assert_eq!(n.manhattan(g(2, 3, 1)), 1);
        }
    }

    #[test]
    fn neighbors_are_symmetric() {
        for c in [g(0, 0, 0), g(-3, 7, 2), g(5, 5, 5)] {
            for n in neighbors(c) {
                assert!(neighbors(n).contains(&c));
            }
        }
    }

    #[test]
    fn every_dir_has_unique_opposite() {
        for d in FaceDir::ALL {
            assert_ne!(d, d.opposite());
            assert_eq!(d.opposite().opposite(), d);
            let o = d.offset();
            assert_eq!(d.opposite().offset(), [-o[0], -o[1], -o[2]]);
        }
    }

    #[test]
    fn exposed_face_counts() {
        let single = Structure::new(g(0, 0, 0)).unwrap();
        assert_eq!(exposed_faces(&single).len(), 6);

        let stack = Structure::from_cells(g(0, 0, 0), [g(0, 0, 1)]).unwrap();
        assert_eq!(exposed_faces(&stack).len(), 10);

        let p = Structure::from_cells(g(0, 0, 0), plane(10)).unwrap();
        // brute force: count (cell, dir) pairs with a free neighbour
        let cells: BTreeSet<_> = plane(10).into_iter().collect();
        let mut brute = 0;
        for c in &cells {
            for n in neighbors(*c) {
                if !cells.contains(&n) {
                    brute += 1;
                }
            }
        }
        assert_eq!(brute, 240);
        assert_eq!(exposed_faces(&p).len(), brute);
    }

    #[test]
    fn exposed_faces_point_into_free_cells() {
        let s = Structure::from_cells(g(0, 0, 0), [g(1, 0, 0), g(1, 0, 1), g(1, 1, 1)]).unwrap();
        for f in exposed_faces(&s) {
            assert!(s.is_occupied(f.cell));
            assert!(!s.is_occupied(f.outward()));
        }
    }

    #[test]
    fn structure_rejects_floating_and_home_removal() {
        let mut s = Structure::new(g(0, 0, 0)).unwrap();
        assert_eq!(s.insert(g(3, 0, 0), BlockState::Incorporated), Err(LatticeError::Floating(g(3, 0, 0))));
        assert_eq!(s.remove(g(0, 0, 0)), Err(LatticeError::HomeRemoval(g(0, 0, 0))));
        assert_eq!(s.insert(g(0, 0, -1), BlockState::Incorporated), Err(LatticeError::BelowGround(g(0, 0, -1))));
        s.insert(g(1, 0, 0), BlockState::Incorporated).unwrap();
        assert_eq!(s.insert(g(1, 0, 0), BlockState::Incorporated), Err(LatticeError::Occupied(g(1, 0, 0))));
        assert_eq!(s.version(), 1);
    }

    #[test]
    fn removing_a_bridge_is_flagged() {
        let s = Structure::from_cells(g(0, 0, 0), [g(1, 0, 0), g(2, 0, 0)]).unwrap();
        assert!(s.removal_disconnects(g(1, 0, 0)));
        assert!(!s.removal_disconnects(g(2, 0, 0)));
        let mut t = s.clone();
        t.remove(g(1, 0, 0)).unwrap();
        assert_eq!(t.validate(), Err(LatticeError::Disconnected(1)));
    }

    #[test]
    fn dense_grid_grows() {
        let mut s = Structure::new(g(0, 0, 0)).unwrap();
        for x in 1..30 {
            s.insert(g(x, 0, 0), BlockState::Incorporated).unwrap();
        }
        for z in 1..20 {
            s.insert(g(29, 0, z), BlockState::Incorporated).unwrap();
        }
        assert!(s.is_occupied(g(29, 0, 19)));
        assert!(s.is_occupied(g(0, 0, 0)));
        assert!(!s.is_occupied(g(28, 0, 19)));
        assert_eq!(s.len(), 49);
    }

    #[test]
    fn blueprint_validation() {
        assert_eq!(Blueprint::new([], g(0, 0, 0), g(0, 0, 0)), Err(BlueprintError::Empty));
        assert_eq!(
            Blueprint::new([g(0, 0, 0), g(2, 0, 0)], g(0, 0, 0), g(0, 0, 0)),
            Err(BlueprintError::Disconnected { unreached: 1 })
        );
        assert_eq!(
            Blueprint::new([g(0, 0, 0), g(0, 0, 1)], g(0, 0, 0), g(0, 0, 1)),
            Err(BlueprintError::FeedingNotOnGround(g(0, 0, 1)))
        );
        assert!(Blueprint::new(plane(3), g(0, 0, 0), g(1, 0, 0)).is_ok());
    }

    #[test]
    fn plane_and_pyramid_are_buildable() {
        let bp = Blueprint::new(plane(10), g(0, 0, 0), g(1, 0, 0)).unwrap();
        assert_eq!(check_buildable(&bp), Buildability::Buildable);

        let mut cells = Vec::new();
        for (z, (lo, hi)) in [(0, 4), (1, 3), (2, 2)].into_iter().enumerate() {
            for x in lo..=hi {
                for y in lo..=hi {
                    cells.push(g(x, y, z as i32));
                }
            }
        }
        let bp = Blueprint::new(cells, g(0, 0, 0), g(1, 0, 0)).unwrap();
        assert!(check_buildable(&bp).is_buildable());
    }

    #[test]
    fn side_supported_overhang_is_fine() {
        let bp = Blueprint::new([g(0, 0, 0), g(0, 0, 1), g(0, 0, 2), g(1, 0, 2)], g(0, 0, 0), g(0, 0, 0)).unwrap();
        assert!(check_buildable(&bp).is_buildable());
    }

    #[test]
    fn inverted_l_is_rejected() {
        // (2,0,1) hangs from (2,0,2) with nothing beside or below it.
        let bp = Blueprint::new(
            [g(0, 0, 0), g(0, 0, 1), g(0, 0, 2), g(1, 0, 2), g(2, 0, 2), g(2, 0, 1)],
            g(0, 0, 0),
            g(0, 0, 0),
        )
        .unwrap();
        assert_eq!(check_buildable(&bp), Buildability::Unbuildable(vec![g(2, 0, 1)]));
    }

    #[test]
    fn malformed_is_distinct_from_unbuildable() {
        let r = assess_blueprint([g(0, 0, 0), g(5, 0, 0)], g(0, 0, 0), g(0, 0, 0));
        assert!(matches!(r, Err(BlueprintError::Disconnected { .. })));
    }
}

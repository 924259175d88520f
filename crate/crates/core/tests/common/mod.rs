#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smac_core::facestar::face_neighbors;
use smac_core::{parse_blueprint, Blueprint, Face, FaceDir, GridCoord, Structure};

pub const SUITE: [&str; 5] = ["plane10", "pyramid316", "temple", "overhang", "hollow_box"];

pub fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(format!("{name}.txt"))
}

pub fn fixture_text(name: &str) -> String {
    std::fs::read_to_string(fixture_path(name)).expect("fixture readable")
}

pub fn fixture(name: &str) -> Blueprint {
    parse_blueprint(&fixture_text(name)).expect("fixture parses")
}

pub fn g(x: i32, y: i32, z: i32) -> GridCoord {
    GridCoord::new(x, y, z)
}

/// Cells that no bottom-up placement order can reach, found by exploring
/// every reachable set of placed cells layer by layer.
pub fn exhaustive_unplaceable(bp: &Blueprint) -> BTreeSet<GridCoord> {
    let mut placed: BTreeSet<GridCoord> = BTreeSet::new();
    let mut stuck = BTreeSet::new();
    for z in 0..=bp.max_z() {
        let layer: Vec<GridCoord> = bp.layer(z).collect();
        let n = layer.len();
        let start: u32 = if z == 0 {
            let i = layer.iter().position(|&c| c == bp.home()).expect("home on layer 0");
            1 << i
        } else {
            0
        };
        let supported = |i: usize, mask: u32| {
            let c = layer[i];
            [FaceDir::PosX, FaceDir::NegX, FaceDir::PosY, FaceDir::NegY, FaceDir::PosZ, FaceDir::NegZ]
                .iter()
                .map(|&d| c.step(d))
                .any(|nb| {
                    placed.contains(&nb) || layer.iter().enumerate().any(|(j, &o)| o == nb && mask & (1 << j) != 0)
                })
        };
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        let mut ever = start;
        while let Some(mask) = queue.pop_front() {
            for i in 0..n {
                if mask & (1 << i) == 0 && supported(i, mask) {
                    let next = mask | (1 << i);
                    ever |= next;
                    if seen.insert(next) {
                        queue.push_back(next);
                    }
                }
            }
        }
        for (i, &c) in layer.iter().enumerate() {
            if ever & (1 << i) == 0 {
                stuck.insert(c);
            }
        }
        // Later layers are judged as if the whole blueprint below were built.
        placed.extend(layer);
    }
    stuck
}

/// Random blueprint of up to `max` cells in a small box, grown from home so
/// it is connected. Some come out buildable, some not.
pub fn random_small_blueprint(rng: &mut ChaCha8Rng, max: usize) -> Blueprint {
    let home = g(0, 0, 0);
    let target = rng.random_range(1..=max);
    let mut cells = BTreeSet::from([home]);
    while cells.len() < target {
        let all: Vec<GridCoord> = cells.iter().copied().collect();
        let from = all[rng.random_range(0..all.len())];
        let d = FaceDir::ALL[rng.random_range(0..6)];
        let c = from.step(d);
        if c.z >= 0 && c.z <= 3 && c.x.abs() <= 2 && c.y.abs() <= 2 {
            cells.insert(c);
        }
    }
    Blueprint::new(cells, home, home).expect("connected by construction")
}

/// Random connected structure of `n` cells grown from home above ground.
pub fn random_structure(rng: &mut ChaCha8Rng, n: usize, flat: bool) -> Structure {
    let home = g(0, 0, 0);
    let mut cells = BTreeSet::from([home]);
    while cells.len() < n {
        let all: Vec<GridCoord> = cells.iter().copied().collect();
        let from = all[rng.random_range(0..all.len())];
        let d = FaceDir::ALL[rng.random_range(0..6)];
        let c = from.step(d);
        if c.z >= 0 && (!flat || c.z == 0) && c.z <= 3 {
            cells.insert(c);
        }
    }
    Structure::from_cells(home, cells).expect("connected by construction")
}

/// Breadth-first inching distances over the face graph.
pub fn bfs_distances(s: &Structure, start: Face) -> BTreeMap<Face, u32> {
    let mut dist = BTreeMap::from([(start, 0)]);
    let mut queue = VecDeque::from([start]);
    while let Some(f) = queue.pop_front() {
        let d = dist[&f];
        for (n, _) in face_neighbors(s, f) {
            dist.entry(n).or_insert_with(|| {
                queue.push_back(n);
                d + 1
            });
        }
    }
    dist
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

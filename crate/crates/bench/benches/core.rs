use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use smac_bench::fixture;
use smac_core::{
    check_buildable, face_star, is_reachable_and_collision_free, run, Face, FaceDir, GridCoord, InchwormGeometry,
    Scenario, Structure,
};

fn pyramid_structure() -> Structure {
    let bp = fixture("pyramid316");
    Structure::from_cells(bp.home(), bp.cells().iter().copied()).unwrap()
}

fn planning(c: &mut Criterion) {
    let s = pyramid_structure();
    let geo = InchwormGeometry::default();
    let start = Face::new(GridCoord::new(0, 0, 0), FaceDir::NegY);
    let top = s.cells().max_by_key(|c| (c.z, c.x, c.y)).unwrap();
    let goal = Face::new(top, FaceDir::PosZ);
    c.bench_function("face_star pyramid corner to apex", |b| {
        b.iter(|| face_star(black_box(&s), start, goal, &geo, false).unwrap())
    });
    let a = start;
    let b2 = Face::new(GridCoord::new(1, 0, 0), FaceDir::NegY);
    c.bench_function("reachability predicate", |b| {
        b.iter(|| is_reachable_and_collision_free(black_box(&s), a, b2, &geo, true))
    });
}

fn validation(c: &mut Criterion) {
    let bp = fixture("hollow_box");
    c.bench_function("check_buildable hollow box", |b| b.iter(|| check_buildable(black_box(&bp))));
}

fn simulation(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulation");
    g.sample_size(10);
    for agents in [1, 4] {
        g.bench_function(format!("plane10 {agents} agents"), |b| {
            b.iter(|| run(Scenario::new(fixture("plane10"), agents)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, planning, validation, simulation);
criterion_main!(benches);

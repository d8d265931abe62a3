use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use marsnav_bench::random_world;
use marsnav_core::canny::canny_edges;
use marsnav_core::{distance_field, generate_terrain, value_iteration, TerrainParams};

fn planners(c: &mut Criterion) {
    let mut g = c.benchmark_group("planner");
    for n in [16, 32] {
        let world = random_world(n, 0.2, 7);
        g.bench_function(format!("distance_field_{n}"), |b| b.iter(|| distance_field(black_box(&world))));
        g.bench_function(format!("value_iteration_{n}"), |b| {
            b.iter(|| value_iteration(black_box(&world), 0.99, 1e-8).unwrap())
        });
    }
    g.finish();
}

fn terrain(c: &mut Criterion) {
    let mut g = c.benchmark_group("terrain");
    for m in [64, 128] {
        let params = TerrainParams::for_size(m);
        g.bench_function(format!("generate_{m}"), |b| b.iter(|| generate_terrain(black_box(11), &params).unwrap()));
        let map = generate_terrain(11, &params).unwrap();
        g.bench_function(format!("canny_{m}"), |b| b.iter(|| canny_edges(black_box(&map.gray), &params.canny)));
    }
    g.finish();
}

criterion_group!(benches, planners, terrain);
criterion_main!(benches);

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dualmap_core::encoder::{encode_instruction, gcmt, Model, ModelConfig};
use dualmap_core::geometry::{Point, Pose};
use dualmap_core::grid_mapper::build_grid_map;
use dualmap_core::policy::{run_episode, PolicyConfig};
use dualmap_core::sim_env::generator::generate_suite;
use dualmap_core::sim_env::{render_panorama, Environment, FeatureModel, SimConfig};
use dualmap_core::training::Episode;
use dualmap_core::util::rng_from;
use dualmap_core::vgwg::{fuse_heatmaps, ground_truth_gah, sample_waypoints};

fn episode() -> Episode {
    let (name, _, scene) = generate_suite(7, 1).swap_remove(0);
    Episode::new(name, Environment::new(scene, SimConfig::default()).unwrap())
}

fn perception(c: &mut Criterion) {
    let ep = episode();
    let cfg = PolicyConfig::default();
    let mc = ModelConfig::default();
    let fm = FeatureModel::new(mc.dim);
    let model = Model::new(mc.clone(), 1);
    let pose = ep.env.start();
    c.bench_function("render_panorama", |b| {
        b.iter(|| render_panorama(&ep.env.scene, black_box(pose), &cfg.sensor, &fm))
    });
    let pano = render_panorama(&ep.env.scene, pose, &cfg.sensor, &fm).to_panorama(cfg.sensor.patch);
    c.bench_function("build_grid_map", |b| {
        b.iter(|| build_grid_map(black_box(&pano), pose, &mc.grid, &cfg.sensor.projection))
    });
    let grid = build_grid_map(&pano, pose, &mc.grid, &cfg.sensor.projection);
    let instr = encode_instruction(&model, &ep.tokens);
    c.bench_function("gcmt", |b| b.iter(|| gcmt(&model, black_box(&grid), &instr)));
}

fn waypoints(c: &mut Criterion) {
    let spec = ModelConfig::default().grid;
    let gah = PolicyConfig::default().gah;
    let pose = Pose::new(0.0, 0.0, 0.0);
    let (h, _) = ground_truth_gah(Point::new(2.0, 1.0), pose, &spec, &gah);
    let (p, _) = ground_truth_gah(Point::new(-1.0, 3.0), pose, &spec, &gah);
    let mask = vec![true; h.len()];
    let mut rng = rng_from(3, &[]);
    c.bench_function("fuse_and_sample", |b| {
        b.iter(|| {
            let fused = fuse_heatmaps(black_box(&h), &p, gah.delta).unwrap();
            sample_waypoints(&fused, gah.k_candidates, &mask, gah.min_separation, pose, &spec, &mut rng)
        })
    });
}

fn full_episode(c: &mut Criterion) {
    let ep = episode();
    let cfg = PolicyConfig::default();
    let mc = ModelConfig::default();
    let fm = FeatureModel::new(mc.dim);
    let model = Model::new(mc, 1);
    let mut g = c.benchmark_group("episode");
    g.sample_size(10);
    g.bench_function("run_episode", |b| b.iter(|| run_episode(&ep.env, &ep.name, &model, &fm, &ep.tokens, &cfg, 5)));
    g.finish();
}

criterion_group!(benches, perception, waypoints, full_episode);
criterion_main!(benches);

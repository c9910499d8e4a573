//! Checks shared by the integration tests and the acceptance target. Every
//! check recomputes its expectation independently of the code under test
//! and returns a short detail line, or the first violation.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dualmap_core::encoder::{Model, ModelConfig};
use dualmap_core::geometry::{
    backproject_view, cell_center, compose_pose, subcell_center, world_to_cell, world_to_subcell, Action, DepthPatch,
    GridSpec, Point, Pose, ProjectionConfig, ViewRay, NUM_VIEWS,
};
use dualmap_core::grid_mapper::build_grid_map;
use dualmap_core::harness::{compute_metrics, episode_metrics, scene_map};
use dualmap_core::mgaf::discount_matrix;
use dualmap_core::nn::ParamId;
use dualmap_core::policy::{
    make_candidates, run_episode, run_episode_with, EpisodeRecord, PolicyConfig, StepContext, StepHook, StopReason,
};
use dualmap_core::sim_env::generator::{generate_suite, Split};
use dualmap_core::sim_env::{
    render_panorama, surrogate_wp, Disturbance, DisturbanceKind, Environment, FeatureModel, SimConfig,
};
use dualmap_core::topo_mapper::{NodeId, TopoGraph, STOP_NODE};
use dualmap_core::training::{batch_loss, collect_expert_data, grad_check, Episode, Snapshot, TrainConfig};
use dualmap_core::util::{rng_from, Rng};
use dualmap_core::vgwg::{fuse_heatmaps, ground_truth_gah, sample_waypoints, GahConfig, Heatmap};
use rand::Rng as _;

pub type Check = Result<String, String>;

pub const SCENE_SEED: u64 = 7;

pub fn split_episodes(seed: u64, per_family: usize) -> (Vec<Episode>, Vec<Episode>) {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (name, split, scene) in generate_suite(seed, per_family) {
        let ep = Episode::new(name, Environment::new(scene, SimConfig::default()).expect("generated scenes load"));
        match split {
            Split::Train => train.push(ep),
            Split::Eval => eval.push(ep),
        }
    }
    (train, eval)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_free_pose(env: &Environment, rng: &mut Rng) -> Pose {
    let [w, h] = env.scene.bounds;
    loop {
        let p = Point::new(rng.gen_range(0.0..w), rng.gen_range(0.0..h));
        if env.raster.is_free(p) && env.geodesic_to_goal(p).is_finite() {
            return Pose::new(p.x, p.y, 15.0 * rng.gen_range(0..24) as f64);
        }
    }
}

/// Cell round trips, the origin cell, turn reversibility and back-projected
/// ranges.
pub fn check_projection(rng: &mut Rng) -> Check {
    let mut n = 0;
    for spec in [GridSpec::default(), GridSpec::new(7, 9, 0.5, 3, 3).unwrap()] {
        ensure(world_to_cell(Point::ORIGIN, &spec) == Some(((spec.rows - 1) / 2, (spec.cols - 1) / 2)), || {
            format!("origin cell wrong for {spec:?}")
        })?;
        for u in 0..spec.rows {
            for v in 0..spec.cols {
                let back = world_to_cell(cell_center(u, v, &spec), &spec);
                ensure(back == Some((u, v)), || format!("cell ({u},{v}) round trip gave {back:?}"))?;
                n += 1;
            }
        }
        for _ in 0..2000 {
            let p = Point::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
            if let Some((u, v)) = world_to_cell(p, &spec) {
                ensure(u < spec.rows && v < spec.cols, || format!("{p:?} mapped outside"))?;
            }
        }
    }
    for _ in 0..200 {
        let start = Pose::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), 15.0 * rng.gen_range(0..24) as f64);
        let k = rng.gen_range(0..30);
        let mut p = start;
        for _ in 0..k {
            p = compose_pose(p, Action::TurnLeft);
        }
        for _ in 0..k {
            p = compose_pose(p, Action::TurnRight);
        }
        ensure(p == start, || format!("{k} turns each way moved {start:?} to {p:?}"))?;
    }
    let proj = ProjectionConfig::default();
    let mut pts = 0;
    for view in 0..NUM_VIEWS {
        let data: Vec<f64> =
            (0..14 * 14).map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.2..9.0) }).collect();
        let depth = DepthPatch::new(14, 14, data);
        for (idx, p) in backproject_view(&depth, &ViewRay::new(view, proj.hfov_deg), &proj).points {
            let d = depth.data[idx];
            ensure((p.norm() - d).abs() <= 1e-9 * d, || format!("range {} vs depth {d}", p.norm()))?;
            pts += 1;
        }
    }
    Ok(format!("{n} cell round trips, 200 turn sequences, {pts} back-projected ranges"))
}

/// Feature mass and point counts of the grid map against a direct re-projection.
pub fn check_grid_mass(envs: &[Episode], fm: &FeatureModel, rng: &mut Rng) -> Check {
    ensure(!envs.is_empty(), || "no scenes given".into())?;
    let spec = GridSpec::default();
    let sensor = dualmap_core::sim_env::SensorConfig::default();
    let mut maps = 0;
    for e in envs {
        for _ in 0..3 {
            let pose = random_free_pose(&e.env, rng);
            let pano = render_panorama(&e.env.scene, pose, &sensor, fm).to_panorama(sensor.patch);
            let grid = build_grid_map(&pano, pose, &spec, &sensor.projection);
            let d = pano.dim;
            let mut want = vec![0.0; d];
            let mut count = 0u64;
            for (view, depth) in pano.depths.iter().enumerate() {
                for (idx, p) in
                    backproject_view(depth, &ViewRay::new(view, sensor.projection.hfov_deg), &sensor.projection).points
                {
                    if world_to_cell(p, &spec).is_some() {
                        count += 1;
                        for (w, x) in want.iter_mut().zip(pano.feature(view, idx)) {
                            *w += x;
                        }
                    }
                }
            }
            ensure(grid.total_count() == count, || format!("{} counted vs {count} points", grid.total_count()))?;
            let mut got = vec![0.0; d];
            for ci in 0..spec.num_cells() {
                let n = grid.counts[ci] as f64;
                for (g, x) in got.iter_mut().zip(&grid.features[ci * d..(ci + 1) * d]) {
                    *g += n * x;
                }
            }
            for k in 0..d {
                ensure((got[k] - want[k]).abs() <= 1e-9 * want[k].abs().max(1.0), || {
                    format!("mass dim {k}: {} vs {}", got[k], want[k])
                })?;
            }
            maps += 1;
        }
    }
    Ok(format!("{maps} maps conserve feature mass"))
}

/// Bounds, node-cell value and farthest-cell value of every discount matrix.
pub fn check_discount() -> Check {
    let mut n = 0;
    for (rows, cols) in [(11, 11), (3, 3), (5, 8)] {
        for u in 0..rows {
            for v in 0..cols {
                let m = discount_matrix((u, v), rows, cols);
                ensure(m.values.iter().all(|&x| (0.0..=1.0).contains(&x)), || {
                    format!("entry outside [0,1] at node ({u},{v})")
                })?;
                ensure(m.get(u, v) == 1.0, || format!("node cell ({u},{v}) = {}", m.get(u, v)))?;
                let dist = |a: usize, b: usize| ((a as f64 - u as f64).powi(2) + (b as f64 - v as f64).powi(2)).sqrt();
                let far = (0..rows * cols).map(|i| dist(i / cols, i % cols)).fold(0.0, f64::max);
                let far_cells: Vec<usize> = (0..rows * cols).filter(|&i| dist(i / cols, i % cols) == far).collect();
                for i in far_cells {
                    ensure(m.values[i] == 0.0, || format!("farthest cell {i} of node ({u},{v}) = {}", m.values[i]))?;
                }
                n += 1;
            }
        }
    }
    Ok(format!("{n} discount matrices"))
}

/// Waypoint distributions are normalized with no mass in obstacles, and
/// fusing at δ = 0 is the identity.
pub fn check_heatmaps(envs: &[Episode], rng: &mut Rng) -> Check {
    ensure(!envs.is_empty(), || "no scenes given".into())?;
    let spec = GridSpec::default();
    let mut n = 0;
    for e in envs {
        for _ in 0..3 {
            let pose = random_free_pose(&e.env, rng);
            let out = surrogate_wp(&e.env, pose, &spec, &Default::default(), &GahConfig::default(), rng);
            ensure(out.distribution.is_distribution(1e-6), || format!("{}: not a distribution", e.name))?;
            for (i, &v) in out.distribution.values.iter().enumerate() {
                if v > 0.0 && !out.enclosed {
                    let w = pose.ego_to_world(subcell_center(i / spec.sub_cols(), i % spec.sub_cols(), &spec));
                    ensure(e.env.raster.is_free(w), || format!("{}: mass {v} on blocked sub-cell {i}", e.name))?;
                }
            }
            let h = Heatmap {
                values: (0..out.distribution.len()).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                ..out.distribution.clone()
            };
            let fused = fuse_heatmaps(&h, &out.distribution, 0.0).unwrap();
            ensure(fused.values.iter().zip(&out.distribution.values).all(|(a, b)| a.to_bits() == b.to_bits()), || {
                "delta 0 fusion changed P".into()
            })?;
            n += 1;
        }
    }
    Ok(format!("{n} waypoint distributions"))
}

/// Steps forward through the first current candidate until `steps` is reached.
pub struct Wander {
    pub steps: u32,
}

impl StepHook for Wander {
    fn decide(&mut self, ctx: &mut StepContext<'_>) -> Option<NodeId> {
        if ctx.t >= self.steps {
            return Some(STOP_NODE);
        }
        Some(ctx.graph.current_candidates().first().copied().unwrap_or(STOP_NODE))
    }
}

/// Rebuilds every persisted graph from the recorded adjusted candidates
/// and compares snapshot hashes; stage-1 graphs are rebuilt from the
/// original candidates on the previous snapshot.
pub fn replay_stage_isolation(
    env: &Environment,
    rec: &EpisodeRecord,
    fm: &FeatureModel,
    cfg: &PolicyConfig,
) -> Result<usize, String> {
    let mut g = TopoGraph::new(fm.dim, cfg.topo);
    let mut differing = 0;
    let to_pts = |v: &[[f64; 2]]| v.iter().map(|p| Point::new(p[0], p[1])).collect::<Vec<_>>();
    for s in &rec.steps {
        let pose = Pose::new(s.pose[0], s.pose[1], s.pose[2]);
        let obs = render_panorama(&env.scene, pose, &cfg.sensor, fm);
        let mean = obs.mean_feature();
        let stage1 = dualmap_core::topo_mapper::update_graph(
            &g,
            pose,
            &make_candidates(&to_pts(&s.candidates), pose, &obs),
            &mean,
            s.t,
        )
        .map_err(|e| e.to_string())?;
        ensure(stage1.content_hash(true) == s.stage1_graph_hash, || format!("step {}: stage-1 graph mismatch", s.t))?;
        g.update(pose, &make_candidates(&to_pts(&s.adjusted), pose, &obs), &mean, s.t).map_err(|e| e.to_string())?;
        ensure(g.content_hash(true) == s.graph_hash, || format!("step {}: persisted graph differs from replay", s.t))?;
        g.check_invariants().map_err(|e| format!("step {}: {e}", s.t))?;
        if s.stage1_graph_hash != s.graph_hash {
            differing += 1;
        }
    }
    Ok(differing)
}

/// Determinism, record shape, metric bounds and stage isolation over
/// model-driven and wandering episodes.
pub fn check_episodes(envs: &[Episode], model: &Model, fm: &FeatureModel) -> Check {
    ensure(!envs.is_empty(), || "no scenes given".into())?;
    let mut cfg = PolicyConfig::default();
    cfg.gah.delta = 1.0;
    let mut records = Vec::new();
    let mut differing = 0;
    for (i, e) in envs.iter().enumerate() {
        let seed = 100 + i as u64;
        let a = run_episode_with(&e.env, &e.name, model, fm, &e.tokens, &cfg, seed, &mut Wander { steps: 6 });
        let b = run_episode_with(&e.env, &e.name, model, fm, &e.tokens, &cfg, seed, &mut Wander { steps: 6 });
        ensure(a.to_json_line() == b.to_json_line(), || format!("{}: episode not deterministic", e.name))?;
        let c = run_episode(&e.env, &e.name, model, fm, &e.tokens, &cfg, seed);
        ensure(c.hash() == run_episode(&e.env, &e.name, model, fm, &e.tokens, &cfg, seed).hash(), || {
            format!("{}: model episode not deterministic", e.name)
        })?;
        for r in [&a, &c] {
            ensure(r.steps.len() <= cfg.max_steps, || format!("{}: {} steps", e.name, r.steps.len()))?;
            ensure(r.stop_reason == StopReason::StopAction || r.steps.len() == cfg.max_steps, || {
                format!("{}: max_steps reason after {} steps", e.name, r.steps.len())
            })?;
            differing += replay_stage_isolation(&e.env, r, fm, &cfg)?;
        }
        records.push(a);
        records.push(c);
    }
    ensure(differing > 0, || "no step had distinct stage-1 and stage-2 graphs; isolation untested".into())?;
    let report = compute_metrics(&records, &scene_map(envs), "").map_err(|e| e.to_string())?;
    for m in &report.episodes {
        let spl = m.spl.unwrap_or(0.0);
        ensure((0.0..=1.0).contains(&spl) && spl <= m.sr, || format!("{}: SPL {spl} SR {}", m.scene, m.sr))?;
    }
    ensure(report.aggregate.spl <= report.aggregate.sr && report.aggregate.osr >= report.aggregate.sr, || {
        format!("aggregate SPL {} SR {} OSR {}", report.aggregate.spl, report.aggregate.sr, report.aggregate.osr)
    })?;
    Ok(format!("{} episodes deterministic, {differing} isolated stage-1 graphs replayed", records.len()))
}

/// Level-0 disturbances leave whole episode records bit-identical.
pub fn check_level_zero(envs: &[Episode], model: &Model, fm: &FeatureModel) -> Check {
    ensure(!envs.is_empty(), || "no scenes given".into())?;
    let base = PolicyConfig::default();
    let mut n = 0;
    for (i, e) in envs.iter().enumerate() {
        let seed = 500 + i as u64;
        let want =
            run_episode_with(&e.env, &e.name, model, fm, &e.tokens, &base, seed, &mut Wander { steps: 5 }).hash();
        for kind in [DisturbanceKind::FovLoss, DisturbanceKind::LocalNoise, DisturbanceKind::MemoryDecay] {
            let mut cfg = base.clone();
            cfg.disturbance = Some(Disturbance { kind, level: 0.0, seed: 9 });
            let got =
                run_episode_with(&e.env, &e.name, model, fm, &e.tokens, &cfg, seed, &mut Wander { steps: 5 }).hash();
            ensure(got == want, || format!("{}: {} at level 0 changed the record", e.name, kind.name()))?;
            n += 1;
        }
    }
    Ok(format!("{n} level-0 episodes identical"))
}

/// Expert snapshots with at least two current candidates, for gradient checks.
pub fn gradient_snapshots(envs: &[Episode], model: &Model, fm: &FeatureModel, n: usize) -> Vec<Snapshot> {
    let data = collect_expert_data(envs, model, fm, &PolicyConfig::default(), &TrainConfig::default());
    data.into_iter()
        .filter(|s| s.graph.current_candidates().len() >= 2 && s.graph.node_ids().len() > 4)
        .take(n)
        .collect()
}

pub const GRAD_GROUPS: &[&str] =
    &["head.graph", "head.grid", "head.gamma", "hffn.", "mlm.", "mgaf.", "tcmt.", "gcmt.", "tok_emb", "pos_emb"];

/// Central differences against the tape through the full pretraining loss.
pub fn check_gradients(model: &Model, snaps: &[Snapshot], per_group: usize, tol: f64) -> Check {
    let batch: Vec<&Snapshot> = snaps.iter().collect();
    let cfg = TrainConfig::default();
    let loss = |p: &dualmap_core::nn::ParamStore| {
        let mut m = model.clone();
        m.params = p.clone();
        let mut f = dualmap_core::encoder::Fwd::new(&m);
        let (l, _) = batch_loss(&mut f, &batch, &cfg, true, 5.5, &mut rng_from(77, &[])).expect("labels present");
        (f.tape.value(l).scalar(), f.tape.backward(l))
    };
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (gi, g) in GRAD_GROUPS.iter().enumerate() {
        let ids: Vec<ParamId> = model.group(g);
        ensure(!ids.is_empty(), || format!("no parameters under {g}"))?;
        let r = grad_check(&loss, &model.params, &ids, per_group, 1e-4, &mut rng_from(31, &[gi as u64]));
        if let Some((name, k)) = &r.non_finite {
            return Err(format!("non-finite gradient at {name}[{k}]"));
        }
        ensure(r.max_rel_error < tol, || format!("{g}: rel error {:.3e} at {:?}", r.max_rel_error, r.worst))?;
        worst = worst.max(r.max_rel_error);
        lines.push(format!("{g} {:.1e}", r.max_rel_error));
    }
    Ok(format!(
        "max rel error {worst:.2e} over {} groups x {per_group} coords ({})",
        GRAD_GROUPS.len(),
        lines.join(", ")
    ))
}

/// TL, NE, OSR, SR, SPL.
pub type OracleRow = (f64, f64, f64, f64, Option<f64>);

/// Per-episode metrics recomputed from raw trajectories.
pub fn oracle_metrics(rec: &EpisodeRecord, env: &Environment) -> OracleRow {
    let g = env.scene.goal;
    let mut tl = 0.0;
    for i in 1..rec.trajectory.len() {
        let (a, b) = (rec.trajectory[i - 1], rec.trajectory[i]);
        tl += (b[0] - a[0]).hypot(b[1] - a[1]);
    }
    let ne = (rec.final_pose[0] - g[0]).hypot(rec.final_pose[1] - g[1]);
    let mut osr = 0.0;
    for p in &rec.trajectory {
        if (p[0] - g[0]).hypot(p[1] - g[1]) <= 3.0 {
            osr = 1.0;
        }
    }
    let sr = if rec.stop_reason == StopReason::StopAction && rec.aborted.is_none() && ne <= 3.0 { 1.0 } else { 0.0 };
    let l = env.geodesic_to_goal(Point::new(rec.start[0], rec.start[1]));
    let spl = if l.is_finite() {
        Some(if sr == 0.0 {
            0.0
        } else if tl > l {
            l / tl
        } else {
            1.0
        })
    } else {
        None
    };
    (tl, ne, osr, sr, spl)
}

pub fn random_record(name: &str, env: &Environment, rng: &mut Rng) -> EpisodeRecord {
    let start = random_free_pose(env, rng);
    let goal = env.goal();
    let mut traj = vec![[start.x, start.y]];
    let n = rng.gen_range(0..12);
    for i in 0..n {
        // some walks head for the goal so successes occur
        let p = if rng.gen_bool(0.3) && i == n - 1 {
            Point::new(goal.x + rng.gen_range(-3.5..3.5), goal.y + rng.gen_range(-3.5..3.5))
        } else {
            random_free_pose(env, rng).position()
        };
        traj.push([p.x, p.y]);
    }
    let last = *traj.last().unwrap();
    EpisodeRecord {
        schema: 1,
        scene: name.to_string(),
        seed: rng.gen(),
        instruction: vec![],
        start: [start.x, start.y, start.heading],
        goal: [goal.x, goal.y],
        steps: vec![],
        trajectory: traj,
        path_length: 0.0,
        final_pose: [last[0], last[1], 0.0],
        stop_reason: if rng.gen_bool(0.7) { StopReason::StopAction } else { StopReason::MaxSteps },
        aborted: if rng.gen_bool(0.05) { Some("env failure".into()) } else { None },
    }
}

/// `compute_metrics` against the brute-force oracle on random records,
/// plus order invariance of the aggregate.
pub fn check_metrics_oracle(envs: &[Episode], rng: &mut Rng, n: usize) -> Check {
    ensure(!envs.is_empty(), || "no scenes given".into())?;
    let scenes: BTreeMap<String, Environment> = scene_map(envs);
    let recs: Vec<EpisodeRecord> = (0..n)
        .map(|_| {
            let e = &envs[rng.gen_range(0..envs.len())];
            random_record(&e.name, &e.env, rng)
        })
        .collect();
    let report = compute_metrics(&recs, &scenes, "h").map_err(|e| e.to_string())?;
    let mut successes = 0;
    for (r, m) in recs.iter().zip(&report.episodes) {
        let (tl, ne, osr, sr, spl) = oracle_metrics(r, &scenes[&r.scene]);
        ensure(m.tl == tl && m.ne == ne && m.osr == osr && m.sr == sr && m.spl == spl, || {
            format!("{m:?} vs oracle tl {tl} ne {ne} osr {osr} sr {sr} spl {spl:?}")
        })?;
        successes += sr as usize;
        let again = episode_metrics(r, &scenes[&r.scene]);
        ensure(&again == m, || "episode metrics not a pure function".into())?;
    }
    ensure(successes > 0 && successes < n, || format!("{successes} successes; oracle not exercised"))?;
    let mut shuffled = recs.clone();
    rand::seq::SliceRandom::shuffle(&mut shuffled[..], rng);
    let again = compute_metrics(&shuffled, &scenes, "h").map_err(|e| e.to_string())?;
    ensure(again.aggregate == report.aggregate, || "aggregate depends on order".into())?;
    let mean = |f: &dyn Fn(&OracleRow) -> f64| {
        recs.iter().map(|r| f(&oracle_metrics(r, &scenes[&r.scene]))).sum::<f64>() / n as f64
    };
    ensure((report.aggregate.sr - mean(&|o| o.3)).abs() < 1e-12, || "aggregate SR".into())?;
    ensure((report.aggregate.tl - mean(&|o| o.0)).abs() < 1e-9, || "aggregate TL".into())?;
    Ok(format!("{n} records match the oracle ({successes} successes)"))
}

/// Expected total-variation distance between an `n`-draw empirical
/// histogram and `p` (normal approximation per bin).
pub fn expected_tv(p: &[f64], n: usize) -> f64 {
    0.5 * (2.0 / std::f64::consts::PI).sqrt() * p.iter().map(|&q| (q * (1.0 - q) / n as f64).sqrt()).sum::<f64>()
}

/// Empirical k = 1 sampling frequencies against the normalized, masked
/// fused heatmap.
pub fn sampling_tv(fused: &Heatmap, mask: &[bool], draws: usize, rng: &mut Rng) -> (f64, f64) {
    let spec = GridSpec::default();
    let w: Vec<f64> = fused.values.iter().zip(mask).map(|(&v, &m)| if m && v > 0.0 { v } else { 0.0 }).collect();
    let z: f64 = w.iter().sum();
    let p: Vec<f64> = w.iter().map(|v| v / z).collect();
    let mut counts = vec![0usize; p.len()];
    let pose = Pose::new(0.0, 0.0, 0.0);
    for _ in 0..draws {
        let s = sample_waypoints(fused, 1, mask, 1, pose, &spec, rng);
        let (su, sv) = s.subcells[0];
        counts[su * fused.cols + sv] += 1;
    }
    let tv = 0.5 * counts.iter().zip(&p).map(|(&c, &q)| (c as f64 / draws as f64 - q).abs()).sum::<f64>();
    (tv, expected_tv(&p, draws))
}

/// Fused heatmap `δ·H + P` where P has compact support among masked-out
/// sub-cells and H is a ground-truth heatmap.
pub fn compact_fused(rng: &mut Rng) -> (Heatmap, Vec<bool>) {
    let spec = GridSpec::default();
    let mut p = Heatmap::zeros(&spec);
    let cols = p.cols;
    let mut mask = vec![true; p.len()];
    for _ in 0..16 {
        let i = rng.gen_range(0..p.len());
        p.values[i] += rng.gen_range(0.2..1.0);
    }
    let z = p.sum();
    p.values.iter_mut().for_each(|v| *v /= z);
    // mass that must never be drawn
    for i in 0..8 {
        let k = 5 * cols + 3 * i;
        p.values[k] += 0.3;
        mask[k] = false;
    }
    let narrow = GahConfig { sigma: 0.35, ..GahConfig::default() };
    let (h, _) = ground_truth_gah(Point::new(1.0, -0.6), Pose::new(0.0, 0.0, 0.0), &spec, &narrow);
    (fuse_heatmaps(&h, &p, 0.05).unwrap(), mask)
}

/// H* peak location and height for random on-grid waypoints.
pub fn check_gah_exactness(rng: &mut Rng, n: usize) -> Check {
    let spec = GridSpec::default();
    let cfg = GahConfig::default();
    let lo = subcell_center(0, 0, &spec);
    let hi = subcell_center(spec.sub_rows() - 1, spec.sub_cols() - 1, &spec);
    let (hx, hy) = (spec.sub_res_x() / 2.0 - 1e-9, spec.sub_res_y() / 2.0 - 1e-9);
    for _ in 0..n {
        let pose = Pose::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(0.0..360.0));
        let ego = Point::new(rng.gen_range(lo.x - hx..hi.x + hx), rng.gen_range(lo.y - hy..hi.y + hy));
        let wp = pose.ego_to_world(ego);
        let (h, clamped) = ground_truth_gah(wp, pose, &spec, &cfg);
        ensure(!clamped, || format!("{ego:?} reported off-grid"))?;
        let cell = world_to_subcell(pose.world_to_ego(wp), &spec);
        ensure(Some(h.argmax()) == cell, || format!("argmax {:?} vs waypoint sub-cell {cell:?}", h.argmax()))?;
        ensure((h.max() - 10.0).abs() <= 1e-9, || format!("max {}", h.max()))?;
        ensure(h.values.iter().all(|&v| v >= 0.0), || "negative value".into())?;
    }
    Ok(format!("{n} waypoints: argmax holds the waypoint, max = 10"))
}

pub fn default_model(seed: u64) -> Model {
    Model::new(ModelConfig::default(), seed)
}

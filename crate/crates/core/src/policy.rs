//! Hybrid action prediction and the two-stage episode loop.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::{node_feature_matrix, Fwd, Model, NodeInputs};
use crate::geometry::{
    angle_diff_deg, normalize_deg, subcell_center, world_to_cell, Action, GridSpec, Point, Pose, NUM_VIEWS,
    VIEW_SPACING_DEG,
};
use crate::grid_mapper::{build_grid_map, GridMap};
use crate::mgaf::{cell2node, discount_columns, project_neighborhood};
use crate::nn::{Tensor, Var};
use crate::sim_env::{
    apply_disturbance, surrogate_wp, Disturbance, DisturbanceKind, DisturbanceTarget, Environment, FeatureModel,
    Observation, SensorConfig, WpConfig,
};
use crate::topo_mapper::{Candidate, NodeId, TopoConfig, TopoGraph, STOP_NODE};
use crate::util::{rng_from, Rng, StableHasher};
use crate::vgwg::{fuse_heatmaps, heatmap_from_blocks, sample_waypoints, GahConfig, Heatmap};

pub const RECORD_SCHEMA: u32 = 1;
/// Arrival tolerance of the low-level executor.
pub const ARRIVAL_TOLERANCE_M: f64 = 0.25;
const HEADING_TOLERANCE_DEG: f64 = 7.5;
const LOOKAHEAD_M: f64 = 0.5;

// RNG stream tags under the episode seed
const STREAM_SAMPLE: u64 = 1;
const STREAM_STUDENT: u64 = 3;
const STREAM_DISTURB: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertMode {
    /// Graph scores only.
    Topo,
    /// Grid scores rank the current candidates; the graph decides stopping.
    Grid,
    #[default]
    Hybrid,
}

impl ExpertMode {
    pub const ALL: [ExpertMode; 3] = [ExpertMode::Topo, ExpertMode::Grid, ExpertMode::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            Self::Topo => "topo",
            Self::Grid => "grid",
            Self::Hybrid => "hybrid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    /// Decision-step cap `t_m`.
    pub max_steps: usize,
    pub gah: GahConfig,
    pub wp: WpConfig,
    pub sensor: SensorConfig,
    pub topo: TopoConfig,
    pub expert: ExpertMode,
    /// Cell2Node/GF and Node2Cell/MF; when off both fusions are bypassed.
    pub mgaf: bool,
    /// Radius of the visited-node neighborhood `N_t`, meters.
    pub neighborhood_radius: f64,
    /// Low-level action budget per decision step.
    pub max_actions: usize,
    pub record_heatmaps: bool,
    pub disturbance: Option<Disturbance>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            max_steps: 15,
            gah: GahConfig::default(),
            wp: WpConfig::default(),
            sensor: SensorConfig::default(),
            topo: TopoConfig::default(),
            expert: ExpertMode::Hybrid,
            mgaf: true,
            neighborhood_radius: 5.5,
            max_actions: 150,
            record_heatmaps: false,
            disturbance: None,
        }
    }
}

/// Tape handles produced by one full forward pass over a map pair.
pub struct StepVars {
    pub node_ids: Vec<NodeId>,
    /// Navigation targets in ascending id order (stop first).
    pub targets: Vec<NodeId>,
    /// Current candidates that project inside the grid, ascending.
    pub grid_candidates: Vec<NodeId>,
    /// `N x D` aligned node features.
    pub aligned: Var,
    /// `L x D` instruction-side features after TCMT.
    pub text: Var,
    /// `U*V x D` fused grid.
    pub fused: Var,
    /// `U*V x m*n` HFFN output.
    pub hblocks: Var,
    /// `T x 1`.
    pub graph_scores: Var,
    /// `C x 1`, absent when no current candidate lies on the grid.
    pub grid_scores: Option<Var>,
    /// `1 x 1`.
    pub gamma: Var,
}

/// Encoder, MGAF, HFFN and the three action heads on one (graph, grid) pair.
pub fn forward_step(
    f: &mut Fwd<'_>,
    graph: &TopoGraph,
    grid: &GridMap,
    pose: Pose,
    tokens: &[u32],
    mgaf: bool,
    radius: f64,
) -> StepVars {
    let model = f.model;
    let spec = model.cfg.grid;
    let text_in = f.embed_tokens(tokens);

    let inp = NodeInputs::from_graph(graph, pose, model.cfg.max_time);
    let g = f.tape.constant(node_feature_matrix(graph));
    let gf = if mgaf {
        let c2n = cell2node(grid, graph, pose);
        let gp = f.tape.constant(c2n.features);
        let cat = f.tape.concat_cols(&[gp, g]);
        f.linear(cat, model.gf)
    } else {
        g
    };
    let ne = f.node_embedding(gf, &inp);
    let (aligned, text) = f.tcmt_layers(ne, text_in, &inp);

    let cells = f.tape.constant(Tensor::new(spec.num_cells(), grid.dim, grid.features.clone()));
    let ce = f.cell_embedding(cells);
    let m_tilde = f.gcmt_layers(ce, text_in);

    let fused = if mgaf {
        let hood = project_neighborhood(graph, pose, &spec, radius);
        let b = if hood.rows.is_empty() {
            f.tape.constant(Tensor::zeros(spec.num_cells(), model.cfg.dim))
        } else {
            let dcols = f.tape.constant(discount_columns(&hood.cells, &spec));
            let feats = f.tape.gather_rows(aligned, &hood.rows);
            f.tape.matmul(dcols, feats)
        };
        let cat = f.tape.concat_cols(&[b, m_tilde]);
        f.linear(cat, model.mf)
    } else {
        m_tilde
    };
    let hblocks = f.ffn(fused, model.hffn);

    let targets = graph.targets();
    let rows: Vec<usize> = targets.iter().map(|&id| inp.row_of(id).expect("target is a node")).collect();
    let tg = f.tape.gather_rows(aligned, &rows);
    let graph_scores = f.linear(tg, model.graph_head);

    let mut current: Vec<NodeId> = graph.current_candidates().to_vec();
    current.sort_unstable();
    let mut grid_candidates = Vec::new();
    let mut cells_idx = Vec::new();
    for id in current {
        let node = graph.node(id).expect("candidate exists");
        if let Some((u, v)) = world_to_cell(pose.world_to_ego(node.position), &spec) {
            grid_candidates.push(id);
            cells_idx.push(spec.cell_index(u, v));
        }
    }
    let grid_scores = (!cells_idx.is_empty()).then(|| {
        let sel = f.tape.gather_rows(fused, &cells_idx);
        f.linear(sel, model.grid_head)
    });

    let stop_row = inp.row_of(STOP_NODE).expect("stop node present");
    let stop = f.tape.gather_rows(aligned, &[stop_row]);
    let pooled = f.tape.mean_rows(fused);
    let cat = f.tape.concat_cols(&[stop, pooled]);
    let logit = f.linear(cat, model.gamma_head);
    let gamma = f.tape.sigmoid(logit);

    StepVars {
        node_ids: inp.ids,
        targets,
        grid_candidates,
        aligned,
        text,
        fused,
        hblocks,
        graph_scores,
        grid_scores,
        gamma,
    }
}

/// Fused per-target logits `1 x T`: current candidates with a grid score
/// mix `gamma * graph + (1 - gamma) * grid`, all other targets keep their
/// graph score.
pub fn fused_logits(f: &mut Fwd<'_>, sv: &StepVars) -> Var {
    let t = sv.targets.len();
    let Some(grid) = sv.grid_scores else {
        return f.tape.transpose(sv.graph_scores);
    };
    let pos: Vec<usize> =
        sv.grid_candidates.iter().map(|id| sv.targets.binary_search(id).expect("candidate is a target")).collect();
    let g_c = f.tape.gather_rows(sv.graph_scores, &pos);
    let diff = f.tape.sub(g_c, grid);
    let mixed = f.tape.mul_scalar(diff, sv.gamma);
    let mixed = f.tape.add(grid, mixed);
    let col = f.tape.concat_rows(&[sv.graph_scores, mixed]);
    let idx: Vec<usize> = (0..t)
        .map(|i| match pos.iter().position(|&p| p == i) {
            Some(c) => t + c,
            None => i,
        })
        .collect();
    let col = f.tape.gather_rows(col, &idx);
    f.tape.transpose(col)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionScores {
    pub targets: Vec<NodeId>,
    /// `a^G_t`, aligned with `targets`.
    pub graph_scores: Vec<f64>,
    pub grid_candidates: Vec<NodeId>,
    /// `a^M_t`, aligned with `grid_candidates`.
    pub grid_scores: Vec<f64>,
    pub gamma: f64,
}

impl ActionScores {
    pub fn from_vars(f: &Fwd<'_>, sv: &StepVars) -> Self {
        Self {
            targets: sv.targets.clone(),
            graph_scores: f.tape.value(sv.graph_scores).data.clone(),
            grid_candidates: sv.grid_candidates.clone(),
            grid_scores: sv.grid_scores.map(|g| f.tape.value(g).data.clone()).unwrap_or_default(),
            gamma: f.tape.value(sv.gamma).scalar(),
        }
    }

    fn graph_score(&self, id: NodeId) -> Option<f64> {
        self.targets.iter().position(|&t| t == id).map(|i| self.graph_scores[i])
    }

    fn grid_score(&self, id: NodeId) -> Option<f64> {
        self.grid_candidates.iter().position(|&t| t == id).map(|i| self.grid_scores[i])
    }
}

/// Action heads on a (graph, grid) pair, plus the predicted heatmap.
pub fn predict_actions(
    model: &Model,
    graph: &TopoGraph,
    grid: &GridMap,
    pose: Pose,
    tokens: &[u32],
    cfg: &PolicyConfig,
) -> (ActionScores, Heatmap) {
    let mut f = Fwd::new(model);
    let sv = forward_step(&mut f, graph, grid, pose, tokens, cfg.mgaf, cfg.neighborhood_radius);
    let scores = ActionScores::from_vars(&f, &sv);
    let h = heatmap_from_blocks(f.tape.value(sv.hblocks), &model.cfg.grid);
    (scores, h)
}

fn argmax_first(items: impl Iterator<Item = (NodeId, f64)>) -> Option<NodeId> {
    let mut best: Option<(NodeId, f64)> = None;
    for (id, s) in items {
        match best {
            Some((bid, bs)) if s < bs || (s == bs && id > bid) => {}
            _ => best = Some((id, s)),
        }
    }
    best.map(|b| b.0)
}

/// Chooses a target node (or [`STOP_NODE`]). Ties go to the lowest id.
pub fn fuse_action(scores: &ActionScores, current_candidates: &[NodeId], mode: ExpertMode) -> NodeId {
    let a_g =
        argmax_first(scores.targets.iter().copied().zip(scores.graph_scores.iter().copied())).unwrap_or(STOP_NODE);
    let mut current: Vec<NodeId> =
        current_candidates.iter().copied().filter(|&c| scores.graph_score(c).is_some()).collect();
    current.sort_unstable();
    match mode {
        ExpertMode::Topo => a_g,
        ExpertMode::Grid => {
            if a_g == STOP_NODE {
                return STOP_NODE;
            }
            argmax_first(current.iter().filter_map(|&c| scores.grid_score(c).map(|s| (c, s)))).unwrap_or(a_g)
        }
        ExpertMode::Hybrid => {
            if !current.contains(&a_g) {
                return a_g;
            }
            let gamma = scores.gamma;
            argmax_first(current.iter().map(|&c| {
                let g = scores.graph_score(c).expect("filtered");
                let m = scores.grid_score(c).unwrap_or(g);
                (c, gamma * g + (1.0 - gamma) * m)
            }))
            .unwrap_or(a_g)
        }
    }
}

/// View whose optical axis is nearest the ego bearing of `ego`.
pub fn view_of(ego: Point) -> usize {
    let bearing = normalize_deg(ego.y.atan2(ego.x).to_degrees()).rem_euclid(360.0);
    ((bearing / VIEW_SPACING_DEG).round() as usize) % NUM_VIEWS
}

/// Candidate nodes carry the feature of the view they fall in.
pub fn make_candidates(positions: &[Point], pose: Pose, obs: &Observation) -> Vec<Candidate> {
    positions
        .iter()
        .map(|&p| {
            let vi = view_of(pose.world_to_ego(p));
            Candidate { position: p, view_index: vi, feature: obs.views[vi].feature.clone() }
        })
        .collect()
}

/// Result of driving toward one target.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub pose: Pose,
    pub moved: f64,
    pub actions: usize,
    /// Positions after every forward move.
    pub trajectory: Vec<Point>,
    pub reached: bool,
}

fn dense_path(env: &Environment, from: Point, to: Point) -> Option<Vec<Point>> {
    if env.raster.line_of_sight(from, to) {
        return Some(vec![from, to]);
    }
    let r = &env.raster;
    let cells = r.astar(r.cell_of(from)?, r.cell_of(to)?)?;
    let mut pts = vec![from];
    pts.extend(cells.iter().skip(1).take(cells.len().saturating_sub(2)).map(|&c| r.center(c)));
    pts.push(to);
    Some(pts)
}

/// Farthest visible path point within the look-ahead, searching forward
/// from `idx`.
fn aim_point(env: &Environment, here: Point, path: &[Point], idx: &mut usize) -> Point {
    while *idx + 1 < path.len() && path[*idx].dist(&here) < 0.15 {
        *idx += 1;
    }
    let mut aim = path[*idx];
    for p in &path[*idx..] {
        if p.dist(&here) > LOOKAHEAD_M {
            break;
        }
        if env.raster.line_of_sight(here, *p) {
            aim = *p;
        }
    }
    aim
}

/// Greedy fallback: rotates toward a look-ahead point on the raster path
/// and steps forward, re-planning after blocked moves.
fn pursue(env: &Environment, start: Pose, target: Point, max_actions: usize) -> Execution {
    let mut pose = start;
    let mut exec = Execution { pose, moved: 0.0, actions: 0, trajectory: Vec::new(), reached: false };
    let mut path = dense_path(env, pose.position(), target).unwrap_or_else(|| vec![pose.position(), target]);
    let mut idx = 1;
    let mut blocked_streak = 0;
    while exec.actions < max_actions {
        let here = pose.position();
        if here.dist(&target) <= ARRIVAL_TOLERANCE_M {
            exec.reached = true;
            break;
        }
        let aim = aim_point(env, here, &path, &mut idx);
        let desired = (aim.y - here.y).atan2(aim.x - here.x).to_degrees();
        let diff = angle_diff_deg(desired, pose.heading);
        let action = if blocked_streak == 1 {
            // try the other 15° heading bracketing the desired direction
            if diff > 0.0 {
                Action::TurnLeft
            } else {
                Action::TurnRight
            }
        } else if diff.abs() > HEADING_TOLERANCE_DEG {
            if diff > 0.0 {
                Action::TurnLeft
            } else {
                Action::TurnRight
            }
        } else {
            Action::Forward
        };
        let (next, d) = env.step(pose, action);
        exec.actions += 1;
        if action == Action::Forward {
            if d == 0.0 {
                blocked_streak += 1;
                if blocked_streak > 3 {
                    break;
                }
                if blocked_streak >= 2 {
                    match dense_path(env, here, target) {
                        Some(p) => {
                            path = p;
                            idx = 1;
                        }
                        None => break,
                    }
                }
            } else {
                blocked_streak = 0;
                exec.moved += d;
                exec.trajectory.push(next.position());
            }
        } else if blocked_streak == 1 {
            // after the bracketing turn, step once before re-aiming
            let (n2, d2) = env.step(next, Action::Forward);
            exec.actions += 1;
            if d2 > 0.0 {
                blocked_streak = 0;
                exec.moved += d2;
                exec.trajectory.push(n2.position());
                pose = n2;
                continue;
            }
            blocked_streak = 2;
        }
        pose = next;
    }
    exec.pose = pose;
    exec.reached |= pose.position().dist(&target) <= ARRIVAL_TOLERANCE_M;
    exec
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    order: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.f.total_cmp(&self.f).then_with(|| other.order.cmp(&self.order))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

const TURN_COST: f64 = 0.3;
const PLAN_KEY_RES: f64 = 0.1;
const PLAN_MAX_EXPANSIONS: usize = 200_000;
const PLAN_WEIGHT: f64 = 1.5;

/// Weighted A* over the agent's own motion primitives (15° turns and
/// 0.25 m steps), so every planned move is collision-free in the simulator.
/// Costs count forward steps plus a small charge per turn.
pub fn plan_actions(env: &Environment, start: Pose, target: Point, max_actions: usize) -> Option<Vec<Action>> {
    use std::collections::{BinaryHeap, HashMap};
    let step = crate::geometry::FORWARD_STEP_M;
    let h = |p: Point| ((p.dist(&target) - ARRIVAL_TOLERANCE_M).max(0.0) / step).ceil();
    let key = |p: &Pose| {
        let hi = (normalize_deg(p.heading).rem_euclid(360.0) / crate::geometry::TURN_STEP_DEG).round() as i64;
        ((p.x / PLAN_KEY_RES).round() as i64, (p.y / PLAN_KEY_RES).round() as i64, hi)
    };
    // (pose, parent, action, cost, actions)
    let mut nodes: Vec<(Pose, usize, Action, f64, usize)> = vec![(start, usize::MAX, Action::Stop, 0.0, 0)];
    let mut best: HashMap<(i64, i64, i64), f64> = HashMap::new();
    best.insert(key(&start), 0.0);
    let mut heap = BinaryHeap::new();
    heap.push(Open { f: PLAN_WEIGHT * h(start.position()), order: 0 });
    let mut expansions = 0;
    while let Some(Open { order, .. }) = heap.pop() {
        let (pose, _, _, cost, n) = nodes[order];
        if pose.position().dist(&target) <= ARRIVAL_TOLERANCE_M {
            let mut actions = Vec::new();
            let mut i = order;
            while nodes[i].1 != usize::MAX {
                actions.push(nodes[i].2);
                i = nodes[i].1;
            }
            actions.reverse();
            return Some(actions);
        }
        if best.get(&key(&pose)).is_some_and(|&c| c < cost) || n >= max_actions {
            continue;
        }
        expansions += 1;
        if expansions > PLAN_MAX_EXPANSIONS {
            return None;
        }
        for a in [Action::Forward, Action::TurnLeft, Action::TurnRight] {
            let (next, moved) = env.step(pose, a);
            if a == Action::Forward && moved == 0.0 {
                continue;
            }
            let c = cost + if a == Action::Forward { 1.0 } else { TURN_COST };
            let k = key(&next);
            if best.get(&k).is_some_and(|&b| b <= c) {
                continue;
            }
            best.insert(k, c);
            nodes.push((next, order, a, c, n + 1));
            heap.push(Open { f: c + PLAN_WEIGHT * h(next.position()), order: nodes.len() - 1 });
        }
    }
    None
}

/// Drives from `start` to within [`ARRIVAL_TOLERANCE_M`] of `target` using
/// 15° rotations and 0.25 m steps.
pub fn execute_to(env: &Environment, start: Pose, target: Point, max_actions: usize) -> Execution {
    let Some(plan) = plan_actions(env, start, target, max_actions) else {
        return pursue(env, start, target, max_actions);
    };
    let mut exec = Execution { pose: start, moved: 0.0, actions: 0, trajectory: Vec::new(), reached: false };
    for a in plan {
        let (next, d) = env.step(exec.pose, a);
        exec.actions += 1;
        if d > 0.0 {
            exec.moved += d;
            exec.trajectory.push(next.position());
        }
        exec.pose = next;
    }
    exec.reached = exec.pose.position().dist(&target) <= ARRIVAL_TOLERANCE_M;
    exec
}

/// Drives to a target node, through the graph's shortest path when the
/// target is not adjacent to the current node.
pub fn navigate_to_node(
    env: &Environment,
    graph: &TopoGraph,
    pose: Pose,
    target: NodeId,
    max_actions: usize,
) -> Execution {
    let goal = graph.node(target).expect("target exists").position;
    let legs: Vec<Point> = match graph.current().and_then(|c| graph.shortest_path(c, target)) {
        Some(path) if path.len() > 2 => {
            path[1..].iter().map(|&id| graph.node(id).expect("path node").position).collect()
        }
        _ => vec![goal],
    };
    let mut total = Execution { pose, moved: 0.0, actions: 0, trajectory: Vec::new(), reached: false };
    for leg in legs {
        let e = execute_to(env, total.pose, leg, max_actions - total.actions);
        total.pose = e.pose;
        total.moved += e.moved;
        total.actions += e.actions;
        total.trajectory.extend(e.trajectory);
        if total.actions >= max_actions {
            break;
        }
    }
    total.reached = total.pose.position().dist(&goal) <= ARRIVAL_TOLERANCE_M;
    total
}

pub fn grid_hash(grid: &GridMap) -> String {
    let mut h = StableHasher::new();
    h.f64s(&grid.features);
    for &c in &grid.counts {
        h.u64(c as u64);
    }
    h.finish_hex()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    StopAction,
    MaxSteps,
}

fn pts(p: &[Point]) -> Vec<[f64; 2]> {
    p.iter().map(|q| [q.x, q.y]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u32,
    pub pose: [f64; 3],
    /// `w_{t,k}`.
    pub candidates: Vec<[f64; 2]>,
    /// `ŵ_{t,k}`.
    pub adjusted: Vec<[f64; 2]>,
    /// Chosen target node; the stop node means stop.
    pub chosen: NodeId,
    pub chosen_position: Option<[f64; 2]>,
    pub gamma: Option<f64>,
    pub stage1_graph_hash: String,
    pub graph_hash: String,
    pub grid_hash: String,
    pub wp_fallback: bool,
    pub sample_fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_t: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_t: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_hat: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub schema: u32,
    pub scene: String,
    pub seed: u64,
    pub instruction: Vec<u32>,
    pub start: [f64; 3],
    pub goal: [f64; 2],
    pub steps: Vec<StepRecord>,
    /// Agent positions: the start, then one entry per forward move.
    pub trajectory: Vec<[f64; 2]>,
    pub path_length: f64,
    pub final_pose: [f64; 3],
    pub stop_reason: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

impl EpisodeRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn hash(&self) -> String {
        crate::util::sha256_hex(self.to_json_line().as_bytes())
    }
}

/// What a hook sees after the stage-2 maps are built.
pub struct StepContext<'a> {
    pub env: &'a Environment,
    pub model: &'a Model,
    pub cfg: &'a PolicyConfig,
    pub graph: &'a TopoGraph,
    pub grid: &'a GridMap,
    pub pose: Pose,
    pub tokens: &'a [u32],
    pub t: u32,
    pub rng: &'a mut Rng,
}

/// Overrides the model's decision, e.g. for expert rollouts or training.
pub trait StepHook {
    /// Returns the target to execute, or `None` to let the model decide.
    fn decide(&mut self, ctx: &mut StepContext<'_>) -> Option<NodeId>;
}

pub struct NoHook;

impl StepHook for NoHook {
    fn decide(&mut self, _: &mut StepContext<'_>) -> Option<NodeId> {
        None
    }
}

/// Sub-cell centers (world frame) in free space inside the footprint.
pub fn free_subcells(env: &Environment, pose: Pose, spec: &GridSpec) -> Vec<Point> {
    let mut out = Vec::new();
    for su in 0..spec.sub_rows() {
        for sv in 0..spec.sub_cols() {
            let w = pose.ego_to_world(subcell_center(su, sv, spec));
            if env.raster.is_free(w) {
                out.push(w);
            }
        }
    }
    out
}

fn disturb_rng(seed: u64, t: u32, d: &Disturbance) -> Rng {
    let kind = match d.kind {
        DisturbanceKind::FovLoss => 0,
        DisturbanceKind::LocalNoise => 1,
        DisturbanceKind::MemoryDecay => 2,
    };
    rng_from(seed, &[t as u64, STREAM_DISTURB + kind, d.seed])
}

fn pose_arr(p: Pose) -> [f64; 3] {
    [p.x, p.y, p.heading]
}

/// Runs one episode: per step observe, sample `w` from the waypoint
/// distribution, build stage-1 maps and the GAH, sample `ŵ` from the fused
/// heatmap, rebuild the maps from the previous snapshot with `ŵ`, decide and
/// execute.
#[allow(clippy::too_many_arguments)]
pub fn run_episode_with(
    env: &Environment,
    scene_name: &str,
    model: &Model,
    fm: &FeatureModel,
    tokens: &[u32],
    cfg: &PolicyConfig,
    seed: u64,
    hook: &mut dyn StepHook,
) -> EpisodeRecord {
    let spec = model.cfg.grid;
    let mut pose = env.start();
    let mut graph = TopoGraph::new(fm.dim, cfg.topo);
    let mut record = EpisodeRecord {
        schema: RECORD_SCHEMA,
        scene: scene_name.to_string(),
        seed,
        instruction: tokens.to_vec(),
        start: pose_arr(pose),
        goal: [env.goal().x, env.goal().y],
        steps: Vec::new(),
        trajectory: vec![[pose.x, pose.y]],
        path_length: 0.0,
        final_pose: pose_arr(pose),
        stop_reason: StopReason::MaxSteps,
        aborted: None,
    };
    let dist = cfg.disturbance.filter(|d| d.level > 0.0);
    let mut student_rng = rng_from(seed, &[STREAM_STUDENT]);

    for step in 1..=cfg.max_steps {
        let t = step as u32;
        if let Some(d) = dist.filter(|d| d.kind == DisturbanceKind::MemoryDecay) {
            apply_disturbance(&d, DisturbanceTarget::Graph(&mut graph), &mut disturb_rng(seed, t, &d));
        }
        let mut obs = crate::sim_env::render_panorama(&env.scene, pose, &cfg.sensor, fm);
        if let Some(d) = dist.filter(|d| d.kind == DisturbanceKind::LocalNoise) {
            apply_disturbance(&d, DisturbanceTarget::Observation(&mut obs), &mut disturb_rng(seed, t, &d));
        }
        let pano_mean = obs.mean_feature();
        let grid = build_grid_map(&obs.to_panorama(cfg.sensor.patch), pose, &spec, &cfg.sensor.projection);

        let mut wp_rng = rng_from(seed, &[t as u64, STREAM_SAMPLE]);
        let wp = surrogate_wp(env, pose, &spec, &cfg.wp, &cfg.gah, &mut wp_rng);
        let fov = dist.filter(|d| d.kind == DisturbanceKind::FovLoss);
        let pool = if fov.is_some() { free_subcells(env, pose, &spec) } else { Vec::new() };
        let mut w = wp.candidates.positions.clone();
        if let Some(d) = fov {
            apply_disturbance(
                &d,
                DisturbanceTarget::Candidates { positions: &mut w, free_pool: &pool },
                &mut disturb_rng(seed, t, &d),
            );
        }

        // stage 1
        let stage1 =
            match crate::topo_mapper::update_graph(&graph, pose, &make_candidates(&w, pose, &obs), &pano_mean, t) {
                Ok(g) => g,
                Err(e) => {
                    record.aborted = Some(e.to_string());
                    break;
                }
            };
        let need_stage1 = cfg.gah.delta != 0.0 || cfg.record_heatmaps;
        let (h_t, h_hat, w_hat, sample_fallback) = if need_stage1 {
            let (_, h) = predict_actions(model, &stage1, &grid, pose, tokens, cfg);
            let fused = fuse_heatmaps(&h, &wp.distribution, cfg.gah.delta).expect("same lattice");
            let mut rng = rng_from(seed, &[t as u64, STREAM_SAMPLE]);
            let s = sample_waypoints(
                &fused,
                cfg.gah.k_candidates,
                &wp.nav_mask,
                cfg.gah.min_separation,
                pose,
                &spec,
                &mut rng,
            );
            (Some(h), Some(fused), s.positions, s.fallback)
        } else {
            (None, None, wp.candidates.positions.clone(), wp.candidates.fallback)
        };
        let mut w_hat = w_hat;
        if let Some(d) = fov {
            apply_disturbance(
                &d,
                DisturbanceTarget::Candidates { positions: &mut w_hat, free_pool: &pool },
                &mut disturb_rng(seed, t, &d),
            );
        }

        // stage 2 branches from the previous snapshot again
        if let Err(e) = graph.update(pose, &make_candidates(&w_hat, pose, &obs), &pano_mean, t) {
            record.aborted = Some(e.to_string());
            break;
        }
        let mut ctx =
            StepContext { env, model, cfg, graph: &graph, grid: &grid, pose, tokens, t, rng: &mut student_rng };
        let (chosen, gamma) = match hook.decide(&mut ctx) {
            Some(c) => (c, None),
            None => {
                let (scores, _) = predict_actions(model, &graph, &grid, pose, tokens, cfg);
                (fuse_action(&scores, graph.current_candidates(), cfg.expert), Some(scores.gamma))
            }
        };
        let chosen_pos = (chosen != STOP_NODE).then(|| graph.node(chosen).expect("chosen exists").position);
        record.steps.push(StepRecord {
            t,
            pose: pose_arr(pose),
            candidates: pts(&w),
            adjusted: pts(&w_hat),
            chosen,
            chosen_position: chosen_pos.map(|p| [p.x, p.y]),
            gamma,
            stage1_graph_hash: stage1.content_hash(true),
            graph_hash: graph.content_hash(true),
            grid_hash: grid_hash(&grid),
            wp_fallback: wp.enclosed,
            sample_fallback,
            p_t: cfg.record_heatmaps.then(|| wp.distribution.values.clone()),
            h_t: if cfg.record_heatmaps { h_t.map(|h| h.values) } else { None },
            h_hat: if cfg.record_heatmaps { h_hat.map(|h| h.values) } else { None },
        });
        if chosen == STOP_NODE {
            record.stop_reason = StopReason::StopAction;
            break;
        }
        let exec = navigate_to_node(env, &graph, pose, chosen, cfg.max_actions);
        record.path_length += exec.moved;
        record.trajectory.extend(exec.trajectory.iter().map(|p| [p.x, p.y]));
        pose = exec.pose;
    }
    record.final_pose = pose_arr(pose);
    record
}

/// Model-driven episode.
pub fn run_episode(
    env: &Environment,
    scene_name: &str,
    model: &Model,
    fm: &FeatureModel,
    tokens: &[u32],
    cfg: &PolicyConfig,
    seed: u64,
) -> EpisodeRecord {
    run_episode_with(env, scene_name, model, fm, tokens, cfg, seed, &mut NoHook)
}

/// Samples an index from `softmax(logits)`.
pub fn sample_softmax(logits: &[f64], rng: &mut Rng) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut r = rng.gen::<f64>() * z;
    for (i, x) in w.iter().enumerate() {
        r -= x;
        if r < 0.0 {
            return i;
        }
    }
    w.len() - 1
}

//! Pretraining objectives (MLM, HSAP, GAHP), gradient verification, expert
//! data collection and the teacher-to-student fine-tuning loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::{node_feature_matrix, Fwd, Model, NodeInputs, MASK_ID};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::grid_mapper::GridMap;
use crate::mgaf::cell2node;
use crate::nn::{Gradients, ParamId, ParamStore, Var};
use crate::policy::{
    forward_step, fused_logits, run_episode_with, sample_softmax, PolicyConfig, StepContext, StepHook,
};
use crate::sim_env::instructions::generate_instruction;
use crate::sim_env::{expert_action, Environment, FeatureModel};
use crate::topo_mapper::{NodeId, NodeKind, TopoGraph, STOP_NODE};
use crate::util::{derive_seed, rng_from, Rng};
use crate::vgwg::{ground_truth_gah, heatmap_to_blocks, Heatmap};

pub const MLM_MASK_PROB: f64 = 0.15;

/// Masks each position independently with probability `prob`, forcing one
/// mask when none was drawn. Returns the masked tokens and the positions.
pub fn mask_for_mlm(tokens: &[u32], prob: f64, rng: &mut Rng) -> (Vec<u32>, Vec<usize>) {
    assert!(!tokens.is_empty(), "cannot mask an empty instruction");
    let mut positions: Vec<usize> = (0..tokens.len()).filter(|_| rng.gen::<f64>() < prob).collect();
    if positions.is_empty() {
        positions.push(rng.gen_range(0..tokens.len()));
    }
    let mut masked = tokens.to_vec();
    for &p in &positions {
        masked[p] = MASK_ID;
    }
    (masked, positions)
}

/// Mean over steps of `-log softmax(scores)[label]`.
pub fn hsap_loss(step_scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if step_scores.len() != labels.len() || step_scores.is_empty() {
        return Err(Error::MissingTarget(format!("{} score rows for {} labels", step_scores.len(), labels.len())));
    }
    let mut total = 0.0;
    for (s, &l) in step_scores.iter().zip(labels) {
        if l >= s.len() {
            return Err(Error::MissingTarget(format!("label {l} outside {} targets", s.len())));
        }
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - s[l];
    }
    Ok(total / labels.len() as f64)
}

/// Mean squared difference over all sub-cells and steps.
pub fn gahp_loss(h: &[Heatmap], h_star: &[Heatmap]) -> Result<f64> {
    if h.len() != h_star.len() {
        return Err(Error::ShapeMismatch { expected: (h_star.len(), 1), got: (h.len(), 1) });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in h.iter().zip(h_star) {
        if (a.rows, a.cols) != (b.rows, b.cols) {
            return Err(Error::ShapeMismatch { expected: (b.rows, b.cols), got: (a.rows, a.cols) });
        }
        sum += a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        n += a.values.len();
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Linear anneal from 1 at iteration 0 to 0 at `total`.
pub fn forcing_schedule(iteration: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (1.0 - iteration as f64 / total as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// First coordinate whose analytic or numeric gradient was not finite.
    pub non_finite: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_error < tol
    }
}

/// Denominator floor so coordinates with vanishing gradients compare on an
/// absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients with central differences at `samples`
/// random coordinates of the parameters in `ids`.
pub fn grad_check(
    loss: &dyn Fn(&ParamStore) -> (f64, Gradients),
    params: &ParamStore,
    ids: &[ParamId],
    samples: usize,
    h: f64,
    rng: &mut Rng,
) -> GradCheckReport {
    let (_, grads) = loss(params);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, non_finite: None };
    let sizes: Vec<usize> = ids.iter().map(|&id| params.get(id).data.len()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return report;
    }
    let mut work = params.clone();
    for _ in 0..samples {
        let mut k = rng.gen_range(0..total);
        let mut which = 0;
        while k >= sizes[which] {
            k -= sizes[which];
            which += 1;
        }
        let id = ids[which];
        let name = params.name(id).to_string();
        let analytic = grads.get(id).map_or(0.0, |g| g.data[k]);
        let orig = params.get(id).data[k];
        work.get_mut(id).data[k] = orig + h;
        let (lp, _) = loss(&work);
        work.get_mut(id).data[k] = orig - h;
        let (lm, _) = loss(&work);
        work.get_mut(id).data[k] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        report.checked += 1;
        if !analytic.is_finite() || !numeric.is_finite() {
            report.non_finite.get_or_insert((name, k));
            continue;
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel >= report.max_rel_error {
                report.worst = Some((name, k));
            }
        }
    }
    report
}

/// Expert target on a stage-2 graph: stop once the agent is within
/// `stop_radius` (geodesic) of the goal, otherwise the observed node with
/// the smallest geodesic distance to the goal (ties to the lowest id).
pub fn expert_label(env: &Environment, graph: &TopoGraph, pose: Pose, stop_radius: f64) -> NodeId {
    if env.geodesic_to_goal(pose.position()) < stop_radius {
        return STOP_NODE;
    }
    graph
        .nodes()
        .filter(|n| n.kind == NodeKind::Observed)
        .map(|n| (n.id, env.geodesic_to_goal(n.position)))
        .filter(|(_, d)| d.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map_or(STOP_NODE, |(id, _)| id)
}

/// One supervised step: the persisted maps and its targets.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub graph: TopoGraph,
    pub grid: GridMap,
    pub pose: Pose,
    pub tokens: Vec<u32>,
    /// `a*_t`, a member of `graph.targets()`.
    pub label: NodeId,
    /// `H*_t` in HFFN block order.
    pub h_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub pretrain_iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub w_mlm: f64,
    pub w_hsap: f64,
    pub w_gahp: f64,
    pub mask_prob: f64,
    pub finetune_episodes: usize,
    /// Geodesic radius inside which the expert stops.
    pub stop_radius: f64,
    /// Expert rollouts per training scene.
    pub rollouts_per_scene: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_iters: 2000,
            batch: 4,
            lr: 1e-2,
            w_mlm: 1.0,
            w_hsap: 1.0,
            w_gahp: 1.0,
            mask_prob: MLM_MASK_PROB,
            finetune_episodes: 500,
            stop_radius: 1.5,
            rollouts_per_scene: 1,
        }
    }
}

/// A training scene with its instruction.
#[derive(Debug, Clone)]
pub struct Episode {
    pub name: String,
    pub env: Environment,
    pub tokens: Vec<u32>,
}

impl Episode {
    pub fn new(name: impl Into<String>, env: Environment) -> Self {
        let tokens = generate_instruction(&env);
        Self { name: name.into(), env, tokens }
    }
}

struct ExpertHook<'a> {
    stop_radius: f64,
    gah: crate::vgwg::GahConfig,
    out: &'a mut Vec<Snapshot>,
}

impl StepHook for ExpertHook<'_> {
    fn decide(&mut self, ctx: &mut StepContext<'_>) -> Option<NodeId> {
        let label = expert_label(ctx.env, ctx.graph, ctx.pose, self.stop_radius);
        let spec = ctx.model.cfg.grid;
        let wp = expert_action(ctx.env, ctx.pose, ctx.env.goal())
            .map(|e| e.next_waypoint)
            .unwrap_or_else(|_| ctx.env.goal());
        let (h_star, _) = ground_truth_gah(wp, ctx.pose, &spec, &self.gah);
        self.out.push(Snapshot {
            graph: ctx.graph.clone(),
            grid: ctx.grid.clone(),
            pose: ctx.pose,
            tokens: ctx.tokens.to_vec(),
            label,
            h_star: heatmap_to_blocks(&h_star, &spec),
        });
        Some(label)
    }
}

/// Expert rollouts over the training scenes; every decision step becomes a
/// snapshot.
pub fn collect_expert_data(
    episodes: &[Episode],
    model: &Model,
    fm: &FeatureModel,
    policy: &PolicyConfig,
    train: &TrainConfig,
) -> Vec<Snapshot> {
    let mut cfg = policy.clone();
    cfg.gah.delta = 0.0;
    cfg.record_heatmaps = false;
    cfg.disturbance = None;
    let mut out = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        for r in 0..train.rollouts_per_scene {
            let seed = derive_seed(train.seed, &[0xe4, i as u64, r as u64]);
            let mut hook = ExpertHook { stop_radius: train.stop_radius, gah: cfg.gah, out: &mut out };
            run_episode_with(&ep.env, &ep.name, model, fm, &ep.tokens, &cfg, seed, &mut hook);
        }
    }
    out
}

/// Masked-token logits from the instruction stream of TCMT.
fn mlm_term(f: &mut Fwd<'_>, s: &Snapshot, masked: &[u32], positions: &[usize], mgaf: bool) -> Var {
    let model = f.model;
    let text = f.embed_tokens(masked);
    let inp = NodeInputs::from_graph(&s.graph, s.pose, model.cfg.max_time);
    let g = f.tape.constant(node_feature_matrix(&s.graph));
    let gf = if mgaf {
        let gp = f.tape.constant(cell2node(&s.grid, &s.graph, s.pose).features);
        let cat = f.tape.concat_cols(&[gp, g]);
        f.linear(cat, model.gf)
    } else {
        g
    };
    let ne = f.node_embedding(gf, &inp);
    let (_, t) = f.tcmt_layers(ne, text, &inp);
    let sel = f.tape.gather_rows(t, positions);
    let logits = f.linear(sel, model.mlm_head);
    let targets: Vec<usize> = positions.iter().map(|&p| crate::encoder::clamp_token(model, s.tokens[p])).collect();
    f.tape.nll_rows(logits, &targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub mlm: f64,
    pub hsap: f64,
    pub gahp: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub row: LossRow,
    /// `(group prefix, gradient norm)`.
    pub grad_norms: Vec<(String, f64)>,
}

pub const PARAM_GROUPS: &[&str] = &["tok_emb", "pos_emb", "tcmt.", "gcmt.", "mgaf.", "hffn.", "head.", "mlm."];

/// Weighted pretraining loss over a batch of snapshots, built on `f`.
/// Returns the total and the three unweighted terms.
pub fn batch_loss(
    f: &mut Fwd<'_>,
    batch: &[&Snapshot],
    cfg: &TrainConfig,
    mgaf: bool,
    radius: f64,
    rng: &mut Rng,
) -> Result<(Var, [f64; 3])> {
    let n = batch.len() as f64;
    let mut terms: Vec<Var> = Vec::new();
    let mut parts = [0.0; 3];
    for s in batch {
        let sv = forward_step(f, &s.graph, &s.grid, s.pose, &s.tokens, mgaf, radius);
        let label = sv
            .targets
            .binary_search(&s.label)
            .map_err(|_| Error::MissingTarget(format!("label {} not among {:?}", s.label, sv.targets)))?;
        let logits = fused_logits(f, &sv);
        let hsap = f.tape.nll_rows(logits, &[label]);
        let gahp = f.tape.mse(sv.hblocks, &s.h_star);
        let (masked, positions) = mask_for_mlm(&s.tokens, cfg.mask_prob, rng);
        let mlm = mlm_term(f, s, &masked, &positions, mgaf);
        parts[0] += f.tape.value(mlm).scalar() / n;
        parts[1] += f.tape.value(hsap).scalar() / n;
        parts[2] += f.tape.value(gahp).scalar() / n;
        for (v, w) in [(mlm, cfg.w_mlm), (hsap, cfg.w_hsap), (gahp, cfg.w_gahp)] {
            if w != 0.0 {
                terms.push(f.tape.scale(v, w / n));
            }
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = f.tape.add(total, t);
    }
    Ok((total, parts))
}

fn grad_norms(model: &Model, g: &Gradients) -> Vec<(String, f64)> {
    PARAM_GROUPS.iter().map(|p| (p.to_string(), g.norm_of(model.group(p).iter()))).collect()
}

/// One pretraining iteration on `batch`.
pub fn pretrain_step(
    model: &mut Model,
    batch: &[&Snapshot],
    cfg: &TrainConfig,
    policy: &PolicyConfig,
    iteration: usize,
    rng: &mut Rng,
) -> Result<LossReport> {
    let (grads, parts, total) = {
        let mut f = Fwd::new(model);
        let (total, parts) = batch_loss(&mut f, batch, cfg, policy.mgaf, policy.neighborhood_radius, rng)?;
        let t = f.tape.value(total).scalar();
        (f.tape.backward(total), parts, t)
    };
    let grad_norms = grad_norms(model, &grads);
    model.params.sgd_step(&grads, cfg.lr);
    Ok(LossReport { row: LossRow { iteration, mlm: parts[0], hsap: parts[1], gahp: parts[2], total }, grad_norms })
}

/// Pretraining with MLM, HSAP and GAHP over uniformly drawn batches.
pub fn pretrain(
    model: &mut Model,
    data: &[Snapshot],
    cfg: &TrainConfig,
    policy: &PolicyConfig,
) -> Result<Vec<LossRow>> {
    if data.is_empty() {
        return Err(Error::Config("no expert snapshots to train on".into()));
    }
    let mut rng = rng_from(cfg.seed, &[0x9e7]);
    let mut rows = Vec::with_capacity(cfg.pretrain_iters);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    for it in 0..cfg.pretrain_iters {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch.max(1) {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let report = pretrain_step(model, &batch, cfg, policy, it, &mut rng)?;
        if !report.row.total.is_finite() {
            return Err(Error::Config(format!("non-finite loss at iteration {it}")));
        }
        if it % 100 == 0 {
            log::info!(
                "pretrain {it}: total {:.4} hsap {:.4} gahp {:.4}",
                report.row.total,
                report.row.hsap,
                report.row.gahp
            );
        }
        rows.push(report.row);
    }
    Ok(rows)
}

struct FinetuneHook {
    teacher_prob: f64,
    stop_radius: f64,
    grads: Gradients,
    losses: Vec<f64>,
}

impl StepHook for FinetuneHook {
    fn decide(&mut self, ctx: &mut StepContext<'_>) -> Option<NodeId> {
        let label = expert_label(ctx.env, ctx.graph, ctx.pose, self.stop_radius);
        let mut f = Fwd::new(ctx.model);
        let sv =
            forward_step(&mut f, ctx.graph, ctx.grid, ctx.pose, ctx.tokens, ctx.cfg.mgaf, ctx.cfg.neighborhood_radius);
        let idx = sv.targets.binary_search(&label).expect("expert label is a target");
        let logits = fused_logits(&mut f, &sv);
        let loss = f.tape.nll_rows(logits, &[idx]);
        self.losses.push(f.tape.value(loss).scalar());
        self.grads.accumulate(&f.tape.backward(loss), 1.0);
        if ctx.rng.gen::<f64>() < self.teacher_prob {
            Some(label)
        } else {
            let l = f.tape.value(logits).data.clone();
            Some(sv.targets[sample_softmax(&l, ctx.rng)])
        }
    }
}

/// Fine-tunes on HSAP over whole episodes, annealing from teacher forcing
/// to student forcing. One parameter update per episode.
pub fn finetune(
    model: &mut Model,
    episodes: &[Episode],
    fm: &FeatureModel,
    cfg: &TrainConfig,
    policy: &PolicyConfig,
) -> Result<Vec<LossRow>> {
    if episodes.is_empty() {
        return Err(Error::Config("no training episodes".into()));
    }
    let mut pcfg = policy.clone();
    pcfg.gah.delta = 0.0;
    pcfg.record_heatmaps = false;
    pcfg.disturbance = None;
    let mut rng = rng_from(cfg.seed, &[0xf1e]);
    let mut rows = Vec::with_capacity(cfg.finetune_episodes);
    for it in 0..cfg.finetune_episodes {
        let ep = &episodes[rng.gen_range(0..episodes.len())];
        let mut hook = FinetuneHook {
            teacher_prob: forcing_schedule(it, cfg.finetune_episodes),
            stop_radius: cfg.stop_radius,
            grads: Gradients::default(),
            losses: Vec::new(),
        };
        let seed = derive_seed(cfg.seed, &[0xf1e, it as u64]);
        run_episode_with(&ep.env, &ep.name, model, fm, &ep.tokens, &pcfg, seed, &mut hook);
        let n = hook.losses.len().max(1) as f64;
        hook.grads.scale(1.0 / n);
        model.params.sgd_step(&hook.grads, cfg.lr);
        let hsap = hook.losses.iter().sum::<f64>() / n;
        if !hsap.is_finite() {
            return Err(Error::Config(format!("non-finite fine-tuning loss at episode {it}")));
        }
        rows.push(LossRow { iteration: cfg.pretrain_iters + it, mlm: 0.0, hsap, gahp: 0.0, total: cfg.w_hsap * hsap });
    }
    Ok(rows)
}

pub fn write_loss_csv<W: Write>(mut w: W, rows: &[LossRow]) -> Result<()> {
    writeln!(w, "iteration,mlm,hsap,gahp,total")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.iteration, r.mlm, r.hsap, r.gahp, r.total)?;
    }
    Ok(())
}

//! Metrics, batch evaluation, sweeps, run configuration and renders.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::policy::{run_episode, EpisodeRecord, ExpertMode, PolicyConfig, StopReason};
use crate::sim_env::{Disturbance, Environment, FeatureModel, SimConfig};
use crate::training::{collect_expert_data, finetune, pretrain, Episode, LossRow, TrainConfig};
use crate::util::{derive_seed, sha256_hex};
use crate::vgwg::Heatmap;

pub const SUCCESS_RADIUS_M: f64 = 3.0;

/// Everything a run depends on. Serialized into reports by hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub scenes_per_family: usize,
    /// Evaluation episodes per eval scene.
    pub eval_repeats: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            sim: SimConfig::default(),
            scenes_per_family: 50,
            eval_repeats: 1,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn hash(&self) -> String {
        content_hash(self)
    }
}

/// SHA-256 of the JSON serialization.
pub fn content_hash<T: Serialize>(v: &T) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("serializable"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub scene: String,
    pub seed: u64,
    pub tl: f64,
    pub ne: f64,
    pub osr: f64,
    pub sr: f64,
    /// `None` when the start-goal geodesic is unavailable.
    pub spl: Option<f64>,
    pub geodesic: Option<f64>,
    pub stopped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub episodes: usize,
    /// Informational; neither direction is better.
    pub tl: f64,
    pub ne: f64,
    pub osr: f64,
    pub sr: f64,
    pub spl: f64,
    pub spl_episodes: usize,
    pub aborted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub episodes: Vec<EpisodeMetrics>,
    pub aggregate: Aggregate,
}

/// Mean over a value set, summed in sorted order so the result does not
/// depend on episode order.
fn stable_mean(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn trajectory_length(points: &[[f64; 2]]) -> f64 {
    points.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum()
}

pub fn episode_metrics(rec: &EpisodeRecord, env: &Environment) -> EpisodeMetrics {
    let goal = env.goal();
    let d = |p: &[f64; 2]| Point::new(p[0], p[1]).dist(&goal);
    let tl = trajectory_length(&rec.trajectory);
    let ne = d(&[rec.final_pose[0], rec.final_pose[1]]);
    let stopped = rec.stop_reason == StopReason::StopAction && rec.aborted.is_none();
    let sr = if stopped && ne <= SUCCESS_RADIUS_M { 1.0 } else { 0.0 };
    let osr = if rec.trajectory.iter().any(|p| d(p) <= SUCCESS_RADIUS_M) { 1.0 } else { 0.0 };
    let l = env.geodesic_to_goal(Point::new(rec.start[0], rec.start[1]));
    let geodesic = l.is_finite().then_some(l);
    let spl = geodesic.map(|l| if l.max(tl) > 0.0 { sr * l / l.max(tl) } else { sr });
    EpisodeMetrics { scene: rec.scene.clone(), seed: rec.seed, tl, ne, osr, sr, spl, geodesic, stopped }
}

pub fn aggregate(eps: &[EpisodeMetrics], aborted: usize) -> Aggregate {
    let spls: Vec<f64> = eps.iter().filter_map(|e| e.spl).collect();
    Aggregate {
        episodes: eps.len(),
        tl: stable_mean(eps.iter().map(|e| e.tl).collect()),
        ne: stable_mean(eps.iter().map(|e| e.ne).collect()),
        osr: stable_mean(eps.iter().map(|e| e.osr).collect()),
        sr: stable_mean(eps.iter().map(|e| e.sr).collect()),
        spl_episodes: spls.len(),
        spl: stable_mean(spls),
        aborted,
    }
}

pub fn compute_metrics(
    records: &[EpisodeRecord],
    scenes: &BTreeMap<String, Environment>,
    config_hash: &str,
) -> Result<MetricsReport> {
    let mut eps = Vec::with_capacity(records.len());
    for r in records {
        let env = scenes
            .get(&r.scene)
            .ok_or_else(|| Error::Config(format!("record references unknown scene {:?}", r.scene)))?;
        eps.push(episode_metrics(r, env));
    }
    let aborted = records.iter().filter(|r| r.aborted.is_some()).count();
    Ok(MetricsReport { config_hash: config_hash.to_string(), aggregate: aggregate(&eps, aborted), episodes: eps })
}

/// Loads a directory of scenes as instruction-annotated episodes.
pub fn load_episodes(dir: &Path) -> Result<Vec<Episode>> {
    Ok(crate::sim_env::generator::load_scene_dir(dir)?.into_iter().map(|(name, env)| Episode::new(name, env)).collect())
}

pub fn scene_map(episodes: &[Episode]) -> BTreeMap<String, Environment> {
    episodes.iter().map(|e| (e.name.clone(), e.env.clone())).collect()
}

/// Runs every episode `repeats` times with seeds derived from `master_seed`
/// and the episode index. Work is split over threads; output order is fixed.
pub fn run_suite(
    episodes: &[Episode],
    model: &Model,
    fm: &FeatureModel,
    cfg: &PolicyConfig,
    master_seed: u64,
    repeats: usize,
) -> Vec<EpisodeRecord> {
    let jobs: Vec<(usize, usize)> = (0..episodes.len()).flat_map(|i| (0..repeats).map(move |r| (i, r))).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let run = |&(i, r): &(usize, usize)| {
        let e = &episodes[i];
        let seed = derive_seed(master_seed, &[i as u64, r as u64]);
        run_episode(&e.env, &e.name, model, fm, &e.tokens, cfg, seed)
    };
    if workers <= 1 {
        return jobs.iter().map(run).collect();
    }
    let chunk = jobs.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> =
            jobs.chunks(chunk).map(|c| s.spawn(move || c.iter().map(run).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// `run_suite` followed by `compute_metrics`.
pub fn evaluate(
    episodes: &[Episode],
    model: &Model,
    fm: &FeatureModel,
    cfg: &PolicyConfig,
    master_seed: u64,
    repeats: usize,
    config_hash: &str,
) -> Result<(MetricsReport, Vec<EpisodeRecord>)> {
    let records = run_suite(episodes, model, fm, cfg, master_seed, repeats);
    let report = compute_metrics(&records, &scene_map(episodes), config_hash)?;
    Ok((report, records))
}

/// Expert data collection, pretraining and fine-tuning from a fresh model
/// seeded by `cfg.train.seed`. MGAF follows `cfg.policy.mgaf`.
pub fn train_model(cfg: &Config, train: &[Episode], fm: &FeatureModel) -> Result<(Model, Vec<LossRow>)> {
    let mut model = Model::new(cfg.model.clone(), derive_seed(cfg.train.seed, &[0x30de]));
    let data = collect_expert_data(train, &model, fm, &cfg.policy, &cfg.train);
    log::info!("{} expert snapshots from {} scenes", data.len(), train.len());
    let mut rows = pretrain(&mut model, &data, &cfg.train, &cfg.policy)?;
    rows.extend(finetune(&mut model, train, fm, &cfg.train, &cfg.policy)?);
    Ok((model, rows))
}

/// One evaluated configuration of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub key: String,
    pub delta: f64,
    pub mgaf: bool,
    pub vgwg: bool,
    pub expert: ExpertMode,
    pub disturbance: Option<String>,
    pub aggregate: Aggregate,
}

/// Variant of a base policy configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub mgaf: bool,
    /// Off means the heatmap guidance is dropped (`δ = 0`).
    pub vgwg: bool,
    pub delta: f64,
    pub expert: ExpertMode,
    pub disturbance: Option<Disturbance>,
}

impl Variant {
    pub fn of(cfg: &PolicyConfig) -> Self {
        Self {
            mgaf: cfg.mgaf,
            vgwg: cfg.gah.delta != 0.0,
            delta: cfg.gah.delta,
            expert: cfg.expert,
            disturbance: cfg.disturbance,
        }
    }

    pub fn apply(&self, base: &PolicyConfig) -> PolicyConfig {
        let mut c = base.clone();
        c.mgaf = self.mgaf;
        c.gah.delta = if self.vgwg { self.delta } else { 0.0 };
        c.expert = self.expert;
        c.disturbance = self.disturbance;
        c
    }

    pub fn key(&self) -> String {
        let mut k = format!(
            "expert={} mgaf={} vgwg={} delta={:e}",
            self.expert.name(),
            u8::from(self.mgaf),
            u8::from(self.vgwg),
            if self.vgwg { self.delta } else { 0.0 }
        );
        if let Some(d) = self.disturbance {
            k.push_str(&format!(" disturb={d}"));
        }
        k
    }
}

/// Models for the two MGAF settings. They may be the same model.
#[derive(Clone, Copy)]
pub struct ModelPair<'a> {
    pub with_mgaf: &'a Model,
    pub without_mgaf: &'a Model,
}

impl<'a> ModelPair<'a> {
    pub fn single(m: &'a Model) -> Self {
        Self { with_mgaf: m, without_mgaf: m }
    }

    pub fn pick(&self, mgaf: bool) -> &'a Model {
        if mgaf {
            self.with_mgaf
        } else {
            self.without_mgaf
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn sweep(
    episodes: &[Episode],
    models: ModelPair<'_>,
    fm: &FeatureModel,
    base: &PolicyConfig,
    variants: &[Variant],
    master_seed: u64,
    repeats: usize,
    config_hash: &str,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let cfg = v.apply(base);
        let (report, _) = evaluate(episodes, models.pick(v.mgaf), fm, &cfg, master_seed, repeats, config_hash)?;
        log::info!("{}: SR {:.3} SPL {:.3}", v.key(), report.aggregate.sr, report.aggregate.spl);
        rows.push(SweepRow {
            key: v.key(),
            delta: if v.vgwg { v.delta } else { 0.0 },
            mgaf: v.mgaf,
            vgwg: v.vgwg,
            expert: v.expert,
            disturbance: v.disturbance.map(|d| d.to_string()),
            aggregate: report.aggregate,
        });
    }
    Ok(rows)
}

pub const DELTA_SWEEP: [f64; 4] = [0.0, 1e-6, 1e-5, 1e-4];

pub fn delta_variants(base: &PolicyConfig, deltas: &[f64]) -> Vec<Variant> {
    deltas.iter().map(|&d| Variant { vgwg: d != 0.0, delta: d, ..Variant::of(base) }).collect()
}

/// Expert mode × MGAF × VGWG, 12 variants for the three experts.
pub fn ablation_variants(base: &PolicyConfig) -> Vec<Variant> {
    let delta = if base.gah.delta != 0.0 { base.gah.delta } else { crate::vgwg::GahConfig::default().delta };
    let mut out = Vec::new();
    for expert in ExpertMode::ALL {
        for mgaf in [false, true] {
            for vgwg in [false, true] {
                out.push(Variant { mgaf, vgwg, delta, expert, disturbance: base.disturbance });
            }
        }
    }
    out
}

pub fn disturbance_variants(
    base: &PolicyConfig,
    kind: crate::sim_env::DisturbanceKind,
    levels: &[f64],
) -> Vec<Variant> {
    levels
        .iter()
        .map(|&level| Variant { disturbance: Some(Disturbance { kind, level, seed: 0 }), ..Variant::of(base) })
        .collect()
}

/// Report file contents; `hash` covers every other field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub config_hash: String,
    pub master_seed: u64,
    pub metrics: Option<MetricsReport>,
    pub rows: Vec<SweepRow>,
    pub records_hash: String,
    pub hash: String,
}

impl SuiteReport {
    pub fn new(
        config_hash: &str,
        master_seed: u64,
        metrics: Option<MetricsReport>,
        rows: Vec<SweepRow>,
        records: &[EpisodeRecord],
    ) -> Self {
        let mut r = Self {
            config_hash: config_hash.to_string(),
            master_seed,
            metrics,
            rows,
            records_hash: records_hash(records),
            hash: String::new(),
        };
        r.hash = content_hash(&r);
        r
    }

    pub fn verify(&self) -> bool {
        let mut c = self.clone();
        c.hash.clear();
        content_hash(&c) == self.hash
    }
}

pub fn records_hash(records: &[EpisodeRecord]) -> String {
    let mut buf = Vec::new();
    for r in records {
        buf.extend_from_slice(r.to_json_line().as_bytes());
        buf.push(b'\n');
    }
    sha256_hex(&buf)
}

pub fn write_records<W: Write>(mut w: W, records: &[EpisodeRecord]) -> Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_json_line())?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(Error::from)).collect()
}

pub const RENDER_PX_PER_M: f64 = 20.0;

fn put(img: &mut [u8], w: usize, h: usize, x: i64, y: i64, rgb: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
        let i = 3 * (y as usize * w + x as usize);
        img[i..i + 3].copy_from_slice(&rgb);
    }
}

fn to_px(p: Point, h: usize) -> (i64, i64) {
    ((p.x * RENDER_PX_PER_M) as i64, h as i64 - 1 - (p.y * RENDER_PX_PER_M) as i64)
}

/// Top-down binary RGB map (`P6`): free space white, obstacles dark,
/// trajectory blue, start red, goal green with its success circle. An
/// optional egocentric heatmap is tinted orange under the map at `pose`.
pub fn render_episode(
    env: &Environment,
    rec: &EpisodeRecord,
    overlay: Option<(&Heatmap, crate::geometry::Pose)>,
) -> Vec<u8> {
    let [bw, bh] = env.scene.bounds;
    let (w, h) = ((bw * RENDER_PX_PER_M).ceil() as usize, (bh * RENDER_PX_PER_M).ceil() as usize);
    let mut img = vec![0u8; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let p = Point::new(
                (x as f64 + 0.5) / RENDER_PX_PER_M,
                (h - 1 - y) as f64 / RENDER_PX_PER_M + 0.5 / RENDER_PX_PER_M,
            );
            let c = if env.raster.is_free(p) { [255, 255, 255] } else { [60, 60, 60] };
            put(&mut img, w, h, x as i64, y as i64, c);
        }
    }
    if let Some((hm, pose)) = overlay {
        let max = hm.max();
        if max > 0.0 {
            let spec = crate::geometry::GridSpec::default();
            for su in 0..hm.rows {
                for sv in 0..hm.cols {
                    let v = (hm.get(su, sv) / max).clamp(0.0, 1.0);
                    if v < 0.05 {
                        continue;
                    }
                    let wpt = pose.ego_to_world(crate::geometry::subcell_center(su, sv, &spec));
                    let (x, y) = to_px(wpt, h);
                    let tint = [255, (255.0 * (1.0 - 0.6 * v)) as u8, (255.0 * (1.0 - v)) as u8];
                    for dx in 0..4 {
                        for dy in 0..4 {
                            put(&mut img, w, h, x + dx - 2, y + dy - 2, tint);
                        }
                    }
                }
            }
        }
    }
    let goal = env.goal();
    for k in 0..360 {
        let a = (k as f64).to_radians();
        let p = Point::new(goal.x + SUCCESS_RADIUS_M * a.cos(), goal.y + SUCCESS_RADIUS_M * a.sin());
        let (x, y) = to_px(p, h);
        put(&mut img, w, h, x, y, [120, 200, 120]);
    }
    for seg in rec.trajectory.windows(2) {
        let (a, b) = (Point::new(seg[0][0], seg[0][1]), Point::new(seg[1][0], seg[1][1]));
        let n = (a.dist(&b) * RENDER_PX_PER_M * 2.0).ceil().max(1.0) as usize;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let (x, y) = to_px(Point::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t), h);
            put(&mut img, w, h, x, y, [30, 60, 220]);
        }
    }
    let dot = |img: &mut [u8], p: Point, c: [u8; 3]| {
        let (x, y) = to_px(p, h);
        for dx in -3..=3 {
            for dy in -3..=3 {
                put(img, w, h, x + dx, y + dy, c);
            }
        }
    };
    dot(&mut img, Point::new(rec.start[0], rec.start[1]), [220, 30, 30]);
    dot(&mut img, goal, [30, 170, 30]);
    let mut out = format!("P6 {w} {h} 255\n").into_bytes();
    out.extend_from_slice(&img);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_mean_ignores_order() {
        let a = stable_mean(vec![0.1, 0.2, 0.3, 1e16, -1e16]);
        let b = stable_mean(vec![-1e16, 0.3, 1e16, 0.2, 0.1]);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn variant_keys_and_grid() {
        let base = PolicyConfig::default();
        let grid = ablation_variants(&base);
        assert_eq!(grid.len(), 12);
        let keys: std::collections::BTreeSet<String> = grid.iter().map(|v| v.key()).collect();
        assert_eq!(keys.len(), 12);
        let off = grid.iter().find(|v| !v.vgwg).unwrap().apply(&base);
        assert_eq!(off.gah.delta, 0.0);
        assert_eq!(delta_variants(&base, &DELTA_SWEEP).len(), 4);
    }

    #[test]
    fn config_round_trip() {
        let c = Config::default();
        let s = serde_json::to_string(&c).unwrap();
        let back: Config = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let partial: Config = serde_json::from_str(r#"{"seed": 3}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.policy, PolicyConfig::default());
    }
}

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dualmap_core::encoder::Model;
use dualmap_core::harness::{
    ablation_variants, compute_metrics, delta_variants, disturbance_variants, evaluate, load_episodes, read_records,
    render_episode, scene_map, sweep, write_records, Config, ModelPair, SuiteReport, DELTA_SWEEP,
};
use dualmap_core::policy::{run_episode, ExpertMode, PolicyConfig};
use dualmap_core::sim_env::generator::write_suite;
use dualmap_core::sim_env::{Disturbance, DisturbanceKind, FeatureModel};
use dualmap_core::training::{collect_expert_data, finetune, pretrain, write_loss_csv, Episode};
use dualmap_core::vgwg::Heatmap;

#[derive(Parser)]
#[command(name = "dualmap", version, about = "Dual-map instruction-following navigation: scenes, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// GAH fusion weight.
    #[arg(long)]
    delta: Option<f64>,
    /// `kind:level`, e.g. `fov_loss:0.5`.
    #[arg(long)]
    disturb: Option<Disturbance>,
    /// `mgaf`, `vgwg` or `expert=topo|grid|hybrid`; repeatable.
    #[arg(long)]
    ablate: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the scene suite into `<out>/train` and `<out>/eval`.
    GenScenes {
        #[command(flatten)]
        c: Common,
        #[arg(long)]
        per_family: Option<usize>,
    },
    /// Expert data collection and pretraining (MLM, HSAP, GAHP).
    Pretrain {
        #[command(flatten)]
        c: Common,
    },
    /// Teacher-to-student fine-tuning from a checkpoint.
    Finetune {
        #[command(flatten)]
        c: Common,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[command(flatten)]
        c: Common,
        /// Write trajectory renders for the first N episodes.
        #[arg(long, default_value_t = 0)]
        render: usize,
    },
    /// Evaluate a grid of variants: `delta`, `ablation` or `disturb:<kind>`.
    Sweep {
        #[command(flatten)]
        c: Common,
        #[arg(long, default_value = "delta")]
        kind: String,
        /// Checkpoint used for MGAF-off rows; defaults to `--ckpt`.
        #[arg(long)]
        ckpt_no_mgaf: Option<PathBuf>,
    },
    /// Dump heatmaps and trajectory images for a few episodes.
    Render {
        #[command(flatten)]
        c: Common,
        #[arg(long, default_value_t = 3)]
        episodes: usize,
    },
    /// Recompute metrics from a records file.
    Metrics {
        #[command(flatten)]
        c: Common,
        #[arg(long)]
        records: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(d) = c.delta {
        cfg.policy.gah.delta = d;
    }
    if let Some(d) = c.disturb {
        cfg.policy.disturbance = Some(d);
    }
    for a in &c.ablate {
        apply_ablation(&mut cfg.policy, a)?;
    }
    Ok(cfg)
}

fn apply_ablation(p: &mut PolicyConfig, a: &str) -> Result<()> {
    match a {
        "mgaf" => p.mgaf = false,
        "vgwg" => p.gah.delta = 0.0,
        _ => match a.strip_prefix("expert=") {
            Some(e) => {
                p.expert = ExpertMode::ALL
                    .into_iter()
                    .find(|m| m.name() == e)
                    .with_context(|| format!("unknown expert {e:?}"))?;
            }
            None => bail!("unknown ablation {a:?}; expected mgaf, vgwg or expert=..."),
        },
    }
    Ok(())
}

/// `<dir>/<split>` when present, otherwise `dir` itself.
fn split_dir(dir: &Path, split: &str) -> PathBuf {
    let sub = dir.join(split);
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn scenes(c: &Common, split: &str) -> Result<Vec<Episode>> {
    let dir = c.scenes.as_ref().context("--scenes is required")?;
    load_episodes(&split_dir(dir, split)).with_context(|| format!("loading scenes from {}", dir.display()))
}

fn load_model(cfg: &Config, path: Option<&PathBuf>) -> Result<Model> {
    let path = path.context("--ckpt is required")?;
    if !path.exists() {
        bail!("checkpoint {} not found", path.display());
    }
    let mut m = Model::new(cfg.model.clone(), 0);
    m.params.load_into(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(m)
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::GenScenes { c, per_family } => {
            let cfg = load_config(&c)?;
            let n = per_family.unwrap_or(cfg.scenes_per_family);
            let paths = write_suite(&c.out, cfg.seed, n)?;
            println!("wrote {} scenes to {}", paths.len(), c.out.display());
        }
        Cmd::Pretrain { c } => {
            let cfg = load_config(&c)?;
            let train = scenes(&c, "train")?;
            fs::create_dir_all(&c.out)?;
            let fm = FeatureModel::new(cfg.model.dim);
            let mut model = Model::new(cfg.model.clone(), dualmap_core::util::derive_seed(cfg.train.seed, &[0x30de]));
            let data = collect_expert_data(&train, &model, &fm, &cfg.policy, &cfg.train);
            let rows = pretrain(&mut model, &data, &cfg.train, &cfg.policy)?;
            model.params.save(&c.out.join("model.ckpt"))?;
            write_loss_csv(BufWriter::new(fs::File::create(c.out.join("pretrain_loss.csv"))?), &rows)?;
            write_json(&c.out.join("config.json"), &cfg)?;
            let last = rows.last().map_or(f64::NAN, |r| r.total);
            println!("pretrained on {} snapshots, final loss {last:.4}", data.len());
        }
        Cmd::Finetune { c } => {
            let cfg = load_config(&c)?;
            let train = scenes(&c, "train")?;
            let mut model = load_model(&cfg, c.ckpt.as_ref())?;
            fs::create_dir_all(&c.out)?;
            let fm = FeatureModel::new(cfg.model.dim);
            let rows = finetune(&mut model, &train, &fm, &cfg.train, &cfg.policy)?;
            model.params.save(&c.out.join("model.ckpt"))?;
            write_loss_csv(BufWriter::new(fs::File::create(c.out.join("finetune_loss.csv"))?), &rows)?;
            write_json(&c.out.join("config.json"), &cfg)?;
            println!("fine-tuned for {} episodes", rows.len());
        }
        Cmd::Eval { c, render } => {
            let cfg = load_config(&c)?;
            let eval = scenes(&c, "eval")?;
            let model = load_model(&cfg, c.ckpt.as_ref())?;
            fs::create_dir_all(&c.out)?;
            let fm = FeatureModel::new(cfg.model.dim);
            let h = cfg.hash();
            let (metrics, records) = evaluate(&eval, &model, &fm, &cfg.policy, cfg.seed, cfg.eval_repeats, &h)?;
            write_records(BufWriter::new(fs::File::create(c.out.join("records.jsonl"))?), &records)?;
            let agg = metrics.aggregate.clone();
            let report = SuiteReport::new(&h, cfg.seed, Some(metrics), Vec::new(), &records);
            write_json(&c.out.join("report.json"), &report)?;
            if render > 0 {
                let dir = c.out.join("renders");
                fs::create_dir_all(&dir)?;
                let map = scene_map(&eval);
                for (i, r) in records.iter().take(render).enumerate() {
                    fs::write(dir.join(format!("{i:03}_{}.ppm", r.scene)), render_episode(&map[&r.scene], r, None))?;
                }
            }
            println!(
                "episodes {} SR {:.3} SPL {:.3} OSR {:.3} NE {:.2} TL {:.2}",
                agg.episodes, agg.sr, agg.spl, agg.osr, agg.ne, agg.tl
            );
            println!("report hash {}", report.hash);
            return Ok(agg.aborted == 0);
        }
        Cmd::Sweep { c, kind, ckpt_no_mgaf } => {
            let cfg = load_config(&c)?;
            let eval = scenes(&c, "eval")?;
            let a = load_model(&cfg, c.ckpt.as_ref())?;
            let b = match &ckpt_no_mgaf {
                Some(p) => Some(load_model(&cfg, Some(p))?),
                None => None,
            };
            let pair = ModelPair { with_mgaf: &a, without_mgaf: b.as_ref().unwrap_or(&a) };
            let variants = match kind.as_str() {
                "delta" => delta_variants(&cfg.policy, &DELTA_SWEEP),
                "ablation" => ablation_variants(&cfg.policy),
                k => match k.strip_prefix("disturb:") {
                    Some(name) => {
                        let kind: DisturbanceKind = format!("{name}:0").parse::<Disturbance>()?.kind;
                        disturbance_variants(&cfg.policy, kind, &[0.0, 0.25, 0.5, 0.75, 1.0])
                    }
                    None => bail!("unknown sweep kind {k:?}"),
                },
            };
            fs::create_dir_all(&c.out)?;
            let fm = FeatureModel::new(cfg.model.dim);
            let h = cfg.hash();
            let rows = sweep(&eval, pair, &fm, &cfg.policy, &variants, cfg.seed, cfg.eval_repeats, &h)?;
            for r in &rows {
                println!(
                    "{:64} SR {:.3} SPL {:.3} OSR {:.3} NE {:.2}",
                    r.key, r.aggregate.sr, r.aggregate.spl, r.aggregate.osr, r.aggregate.ne
                );
            }
            let aborted: usize = rows.iter().map(|r| r.aggregate.aborted).sum();
            let report = SuiteReport::new(&h, cfg.seed, None, rows, &[]);
            write_json(&c.out.join("sweep.json"), &report)?;
            println!("report hash {}", report.hash);
            return Ok(aborted == 0);
        }
        Cmd::Render { c, episodes } => {
            let mut cfg = load_config(&c)?;
            cfg.policy.record_heatmaps = true;
            let eval = scenes(&c, "eval")?;
            let model = load_model(&cfg, c.ckpt.as_ref())?;
            let fm = FeatureModel::new(cfg.model.dim);
            let spec = cfg.model.grid;
            fs::create_dir_all(&c.out)?;
            for (i, e) in eval.iter().take(episodes).enumerate() {
                let seed = dualmap_core::util::derive_seed(cfg.seed, &[i as u64, 0]);
                let r = run_episode(&e.env, &e.name, &model, &fm, &e.tokens, &cfg.policy, seed);
                let base = c.out.join(&e.name);
                fs::create_dir_all(&base)?;
                let mut overlay = None;
                for s in &r.steps {
                    for (tag, vals) in [("p", &s.p_t), ("h", &s.h_t), ("fused", &s.h_hat)] {
                        if let Some(v) = vals {
                            let hm = Heatmap { values: v.clone(), ..Heatmap::zeros(&spec) };
                            fs::write(base.join(format!("t{:02}_{tag}.pgm", s.t)), hm.to_pgm())?;
                            hm.write_float_grid(BufWriter::new(fs::File::create(
                                base.join(format!("t{:02}_{tag}.txt", s.t)),
                            )?))?;
                            if tag == "h" && overlay.is_none() {
                                overlay =
                                    Some((hm, dualmap_core::geometry::Pose::new(s.pose[0], s.pose[1], s.pose[2])));
                            }
                        }
                    }
                }
                let img = render_episode(&e.env, &r, overlay.as_ref().map(|(h, p)| (h, *p)));
                fs::write(base.join("trajectory.ppm"), img)?;
                println!("{}: {} steps, {:?}", e.name, r.steps.len(), r.stop_reason);
            }
        }
        Cmd::Metrics { c, records } => {
            let cfg = load_config(&c)?;
            let eps = scenes(&c, "eval")?;
            let recs = read_records(&records)?;
            let report = compute_metrics(&recs, &scene_map(&eps), &cfg.hash())?;
            println!("{}", serde_json::to_string_pretty(&report.aggregate)?);
            return Ok(report.aggregate.aborted == 0);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

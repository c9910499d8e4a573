//! Procedural floorplans: open rooms, corridor chains and multi-room layouts.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::util::{rng_from, Rng};

use super::instructions::LANDMARK_LABELS;
use super::{Environment, Landmark, Raster, Scene, SimConfig, SCENE_VERSION};

const BLOCK: f64 = 0.5;
pub const SCENES_PER_FAMILY: usize = 50;
pub const TRAIN_PER_FAMILY: usize = 40;
const GOAL_OFFSET_M: f64 = 0.7;
const LANDMARK_RADIUS: f64 = 0.3;
const MIN_START_GEODESIC: f64 = 4.0;
const MAX_START_GEODESIC: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    OpenRoom,
    Corridor,
    MultiRoom,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::OpenRoom, Family::Corridor, Family::MultiRoom];

    pub fn name(self) -> &'static str {
        match self {
            Self::OpenRoom => "open_room",
            Self::Corridor => "corridor",
            Self::MultiRoom => "multi_room",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Self::OpenRoom => 1,
            Self::Corridor => 2,
            Self::MultiRoom => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Eval => "eval",
        }
    }
}

/// Free-space layout on a block lattice; everything not free becomes an
/// obstacle.
struct BlockMap {
    nx: usize,
    ny: usize,
    free: Vec<bool>,
}

impl BlockMap {
    fn new(nx: usize, ny: usize, free: bool) -> Self {
        Self { nx, ny, free: vec![free; nx * ny] }
    }

    fn set_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, v: bool) {
        for i in x0..x1.min(self.nx) {
            for j in y0..y1.min(self.ny) {
                self.free[i * self.ny + j] = v;
            }
        }
    }

    /// Vertical runs of blocked blocks, merged across equal neighboring runs.
    fn obstacles(&self) -> Vec<[f64; 4]> {
        // (x0, width, y0, height) in blocks
        let mut open: Vec<(usize, usize, usize, usize)> = Vec::new();
        let mut done = Vec::new();
        for i in 0..self.nx {
            let mut runs = Vec::new();
            let mut j = 0;
            while j < self.ny {
                if self.free[i * self.ny + j] {
                    j += 1;
                    continue;
                }
                let s = j;
                while j < self.ny && !self.free[i * self.ny + j] {
                    j += 1;
                }
                runs.push((s, j - s));
            }
            let mut next = Vec::new();
            for (y0, h) in runs {
                if let Some(k) = open.iter().position(|r| r.2 == y0 && r.3 == h && r.0 + r.1 == i) {
                    let mut r = open.swap_remove(k);
                    r.1 += 1;
                    next.push(r);
                } else {
                    next.push((i, 1, y0, h));
                }
            }
            done.append(&mut open);
            open = next;
        }
        done.append(&mut open);
        done.sort();
        done.into_iter()
            .map(|(x0, w, y0, h)| [x0 as f64 * BLOCK, y0 as f64 * BLOCK, w as f64 * BLOCK, h as f64 * BLOCK])
            .collect()
    }
}

fn open_room(rng: &mut Rng) -> ([f64; 2], Vec<[f64; 4]>) {
    let w = 8.0 + 0.5 * rng.gen_range(0..9) as f64;
    let h = 7.0 + 0.5 * rng.gen_range(0..7) as f64;
    let n = rng.gen_range(3..=6);
    let mut obs = Vec::new();
    for _ in 0..n {
        let ow = 0.5 + 0.25 * rng.gen_range(0..5) as f64;
        let oh = 0.5 + 0.25 * rng.gen_range(0..5) as f64;
        let x = rng.gen_range(1.0..(w - ow - 1.0));
        let y = rng.gen_range(1.0..(h - oh - 1.0));
        obs.push([x, y, ow, oh]);
    }
    ([w, h], obs)
}

fn corridor(rng: &mut Rng) -> ([f64; 2], Vec<[f64; 4]>) {
    let (nx, ny) = (28, 20);
    let width = 3;
    let mut map = BlockMap::new(nx, ny, false);
    let mut p = (rng.gen_range(1..6usize), rng.gen_range(1..(ny - width - 1)));
    let segments = rng.gen_range(3..=5);
    let mut horizontal = true;
    for _ in 0..segments {
        let len = rng.gen_range(5..12usize);
        let q = if horizontal {
            let fwd = p.0 + len < nx - width;
            let x = if fwd || p.0 < len + 1 { (p.0 + len).min(nx - width - 1) } else { p.0 - len };
            (x, p.1)
        } else {
            let up = rng.gen_bool(0.5);
            let y = if (up && p.1 + len < ny - width) || p.1 < len + 1 {
                (p.1 + len).min(ny - width - 1)
            } else {
                p.1 - len
            };
            (p.0, y)
        };
        map.set_rect(p.0.min(q.0), p.1.min(q.1), p.0.max(q.0) + width, p.1.max(q.1) + width, true);
        p = q;
        horizontal = !horizontal;
    }
    ([nx as f64 * BLOCK, ny as f64 * BLOCK], map.obstacles())
}

fn multi_room(rng: &mut Rng) -> ([f64; 2], Vec<[f64; 4]>) {
    let (rx, ry) = if rng.gen_bool(0.5) { (2, 2) } else { (3, 2) };
    let room = rng.gen_range(8..=10usize);
    let (nx, ny) = (rx * room + 1, ry * room + 1);
    let mut map = BlockMap::new(nx, ny, true);
    for i in 0..=rx {
        map.set_rect(i * room, 0, i * room + 1, ny, false);
    }
    for j in 0..=ry {
        map.set_rect(0, j * room, nx, j * room + 1, false);
    }
    // doors on a random spanning tree over rooms, plus a few extra
    let id = |i: usize, j: usize| i * ry + j;
    let mut edges = Vec::new();
    for i in 0..rx {
        for j in 0..ry {
            if i + 1 < rx {
                edges.push((id(i, j), id(i + 1, j), true, i, j));
            }
            if j + 1 < ry {
                edges.push((id(i, j), id(i, j + 1), false, i, j));
            }
        }
    }
    edges.shuffle(rng);
    let mut parent: Vec<usize> = (0..rx * ry).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut x = x;
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (a, b, vertical_wall, i, j) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        let joins = ra != rb;
        if joins {
            parent[ra] = rb;
        }
        if joins || rng.gen_bool(0.3) {
            let off = rng.gen_range(2..room - 3);
            if vertical_wall {
                let x = (i + 1) * room;
                map.set_rect(x, j * room + off, x + 1, j * room + off + 2, true);
            } else {
                let y = (j + 1) * room;
                map.set_rect(i * room + off, y, i * room + off + 2, y + 1, true);
            }
        }
    }
    let mut obs = map.obstacles();
    for i in 0..rx {
        for j in 0..ry {
            if rng.gen_bool(0.5) {
                let base = Point::new((i * room) as f64 * BLOCK, (j * room) as f64 * BLOCK);
                let side = room as f64 * BLOCK;
                let x = base.x + rng.gen_range(1.5..side - 2.0);
                let y = base.y + rng.gen_range(1.5..side - 2.0);
                obs.push([x, y, 0.5, 0.5]);
            }
        }
    }
    ([nx as f64 * BLOCK, ny as f64 * BLOCK], obs)
}

fn random_free(raster: &Raster, bounds: [f64; 2], rng: &mut Rng) -> Option<Point> {
    (0..500)
        .map(|_| Point::new(rng.gen_range(0.0..bounds[0]), rng.gen_range(0.0..bounds[1])))
        .find(|&p| raster.is_free(p))
}

fn try_populate(bounds: [f64; 2], obstacles: Vec<[f64; 4]>, seed: u64, rng: &mut Rng) -> Option<Scene> {
    let cfg = SimConfig::default();
    let mut scene = Scene {
        version: SCENE_VERSION,
        bounds,
        obstacles,
        landmarks: Vec::new(),
        start: [0.0; 3],
        goal: [0.0; 2],
        seed,
    };
    // landmarks keep a wider margin than the agent's clearance
    let margin = Raster::build(&scene, cfg.raster_res, LANDMARK_RADIUS);
    let mut labels: Vec<&str> = LANDMARK_LABELS.to_vec();
    labels.shuffle(rng);
    let n = rng.gen_range(4..=6);
    for label in labels.into_iter().take(n) {
        let pos = (0..200)
            .filter_map(|_| random_free(&margin, bounds, rng))
            .find(|p| scene.landmarks.iter().all(|l| l.position().dist(p) >= 1.5))?;
        scene.landmarks.push(Landmark { label: label.to_string(), pos: [pos.x, pos.y], r: LANDMARK_RADIUS });
    }
    let raster = Raster::build(&scene, cfg.raster_res, cfg.clearance);
    let goal_lm = scene.landmarks[rng.gen_range(0..scene.landmarks.len())].position();
    let goal = (0..64)
        .map(|_| {
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            Point::new(goal_lm.x + GOAL_OFFSET_M * a.cos(), goal_lm.y + GOAL_OFFSET_M * a.sin())
        })
        .find(|&g| raster.is_free(g))?;
    let field = raster.distance_field(raster.cell_of(goal)?);
    let starts: Vec<_> = raster
        .free_cells()
        .filter(|&c| {
            let d = field[raster.index(c)];
            (MIN_START_GEODESIC + 0.5..=MAX_START_GEODESIC).contains(&d)
        })
        .collect();
    let c = *starts.choose(rng)?;
    let p = raster.center(c);
    scene.goal = [goal.x, goal.y];
    scene.start = [p.x, p.y, 15.0 * rng.gen_range(0..24) as f64];
    let env = Environment::new(scene.clone(), cfg).ok()?;
    (env.geodesic_to_goal(p) >= MIN_START_GEODESIC).then_some(scene)
}

/// Deterministic scene `idx` of a family under a master seed.
pub fn generate_scene(family: Family, idx: usize, seed: u64) -> Scene {
    let scene_seed = crate::util::derive_seed(seed, &[family.tag(), idx as u64]);
    let mut rng = rng_from(scene_seed, &[]);
    loop {
        let (bounds, obstacles) = match family {
            Family::OpenRoom => open_room(&mut rng),
            Family::Corridor => corridor(&mut rng),
            Family::MultiRoom => multi_room(&mut rng),
        };
        if let Some(s) = try_populate(bounds, obstacles, scene_seed, &mut rng) {
            return s;
        }
    }
}

pub fn split_of(idx: usize) -> Split {
    if idx < TRAIN_PER_FAMILY {
        Split::Train
    } else {
        Split::Eval
    }
}

/// File name used for scene `idx` of `family`.
pub fn scene_name(family: Family, idx: usize) -> String {
    format!("{}_{idx:03}", family.name())
}

/// Writes `per_family` scenes of every family under `dir/train` and
/// `dir/eval`, returning the written paths.
pub fn write_suite(dir: &Path, seed: u64, per_family: usize) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for split in [Split::Train, Split::Eval] {
        std::fs::create_dir_all(dir.join(split.dir_name()))?;
    }
    for family in Family::ALL {
        for idx in 0..per_family {
            let scene = generate_scene(family, idx, seed);
            let path = dir.join(split_of(idx).dir_name()).join(format!("{}.json", scene_name(family, idx)));
            std::fs::write(&path, serde_json::to_string_pretty(&scene)?)?;
            out.push(path);
        }
    }
    Ok(out)
}

/// Loads every `*.json` scene in `dir`, sorted by file name.
pub fn load_scene_dir(dir: &Path) -> Result<Vec<(String, Environment)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::Config(format!("scene dir {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> =
        rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "json")).collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no scenes in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((name, super::load_scene(&p)?))
        })
        .collect()
}

/// In-memory suite: `(name, split, scene)` for every family.
pub fn generate_suite(seed: u64, per_family: usize) -> Vec<(String, Split, Scene)> {
    Family::ALL
        .iter()
        .flat_map(|&f| (0..per_family).map(move |i| (scene_name(f, i), split_of(i), generate_scene(f, i, seed))))
        .collect()
}

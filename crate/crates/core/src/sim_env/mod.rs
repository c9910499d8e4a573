//! Deterministic 2D floorplan simulator: scenes, occupancy raster, shortest
//! paths, panoramic sensing, the surrogate waypoint predictor, expert
//! supervision, instructions and disturbances.

pub mod disturb;
pub mod generator;
pub mod instructions;
pub mod raster;
pub mod render;
pub mod wp;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose_pose, Action, Point, Pose};

pub use disturb::{apply_disturbance, Disturbance, DisturbanceKind, DisturbanceTarget};
pub use raster::Raster;
pub use render::{render_panorama, FeatureModel, Observation, SensorConfig, ViewObservation};
pub use wp::{surrogate_wp, WpConfig, WpOutput};

pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub label: String,
    pub pos: [f64; 2],
    pub r: f64,
}

impl Landmark {
    pub fn position(&self) -> Point {
        Point::new(self.pos[0], self.pos[1])
    }
}

/// On-disk scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub version: u32,
    /// Width and height in meters; the floor spans `[0, w] x [0, h]`.
    pub bounds: [f64; 2],
    /// Axis-aligned rectangles `[x, y, w, h]`.
    pub obstacles: Vec<[f64; 4]>,
    pub landmarks: Vec<Landmark>,
    /// `[x, y, heading_deg]`.
    pub start: [f64; 3],
    pub goal: [f64; 2],
    pub seed: u64,
}

impl Scene {
    pub fn start_pose(&self) -> Pose {
        Pose::new(self.start[0], self.start[1], self.start[2])
    }

    pub fn goal_point(&self) -> Point {
        Point::new(self.goal[0], self.goal[1])
    }

    fn check_shape(&self) -> Result<()> {
        if self.version != SCENE_VERSION {
            return Err(Error::MalformedScene(format!("unsupported version {}", self.version)));
        }
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        if !(self.bounds[0] > 0.0 && self.bounds[1] > 0.0 && finite(&self.bounds)) {
            return Err(Error::MalformedScene("bounds must be positive".into()));
        }
        for o in &self.obstacles {
            if !finite(o) || o[2] < 0.0 || o[3] < 0.0 {
                return Err(Error::MalformedScene(format!("bad obstacle {o:?}")));
            }
        }
        for l in &self.landmarks {
            if !finite(&l.pos) || l.r.is_nan() || l.r <= 0.0 || l.label.is_empty() {
                return Err(Error::MalformedScene(format!("bad landmark {}", l.label)));
            }
        }
        if !finite(&self.start) || !finite(&self.goal) {
            return Err(Error::MalformedScene("non-finite start or goal".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub raster_res: f64,
    /// Obstacle inflation used for planning and collision checks.
    pub clearance: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { raster_res: 0.1, clearance: 0.1 }
    }
}

/// A validated scene with its occupancy raster and the goal distance field.
#[derive(Debug, Clone)]
pub struct Environment {
    pub scene: Scene,
    pub raster: Raster,
    goal_field: Vec<f64>,
}

/// Parses and validates a scene file.
pub fn load_scene(path: &Path) -> Result<Environment> {
    let text = std::fs::read_to_string(path)?;
    let scene: Scene =
        serde_json::from_str(&text).map_err(|e| Error::MalformedScene(format!("{}: {e}", path.display())))?;
    Environment::new(scene, SimConfig::default())
}

impl Environment {
    pub fn new(scene: Scene, cfg: SimConfig) -> Result<Self> {
        scene.check_shape()?;
        let raster = Raster::build(&scene, cfg.raster_res, cfg.clearance);
        if !raster.is_free(scene.goal_point()) {
            return Err(Error::GoalBlocked);
        }
        if !raster.is_free(scene.start_pose().position()) {
            return Err(Error::StartBlocked);
        }
        let goal_cell = raster.cell_of(scene.goal_point()).expect("goal inside bounds");
        let goal_field = raster.distance_field(goal_cell);
        let start_cell = raster.cell_of(scene.start_pose().position()).expect("start inside bounds");
        if !goal_field[raster.index(start_cell)].is_finite() {
            return Err(Error::Unreachable);
        }
        Ok(Self { scene, raster, goal_field })
    }

    pub fn goal(&self) -> Point {
        self.scene.goal_point()
    }

    pub fn start(&self) -> Pose {
        self.scene.start_pose()
    }

    /// Approximate geodesic distance from `p` to the goal: exact when the
    /// goal is in line of sight, otherwise the raster distance field plus
    /// the offsets to cell centers. Infinite when unreachable.
    pub fn geodesic_to_goal(&self, p: Point) -> f64 {
        let goal = self.goal();
        if self.raster.line_of_sight(p, goal) {
            return p.dist(&goal);
        }
        match self.raster.cell_of(p) {
            Some(c) => {
                let f = self.goal_field[self.raster.index(c)];
                let gc = self.raster.cell_of(goal).expect("goal inside");
                f + p.dist(&self.raster.center(c)) + goal.dist(&self.raster.center(gc))
            }
            None => f64::INFINITY,
        }
    }

    /// Applies one action with collision handling: a blocked forward move
    /// leaves the pose unchanged. Returns the new pose and the distance moved.
    pub fn step(&self, pose: Pose, a: Action) -> (Pose, f64) {
        let next = compose_pose(pose, a);
        if a == Action::Forward {
            let (p, q) = (pose.position(), next.position());
            if !self.raster.segment_free(p, q) {
                return (pose, 0.0);
            }
            return (next, p.dist(&q));
        }
        (next, 0.0)
    }
}

/// Expert supervision at one pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertStep {
    /// Farthest visible point on the shortest path within the look-ahead.
    pub next_waypoint: Point,
    /// Shortest-path length from the pose to the goal.
    pub length: f64,
}

pub const EXPERT_LOOKAHEAD_M: f64 = 2.5;

/// A* on the raster (Euclidean heuristic), string-pulled into a polyline
/// from `from` to `to`.
pub fn shortest_polyline(raster: &Raster, from: Point, to: Point) -> Result<Vec<Point>> {
    if raster.line_of_sight(from, to) {
        return Ok(vec![from, to]);
    }
    let a = raster.cell_of(from).ok_or(Error::Unreachable)?;
    let b = raster.cell_of(to).ok_or(Error::Unreachable)?;
    let cells = raster.astar(a, b).ok_or(Error::Unreachable)?;
    let mut dense = Vec::with_capacity(cells.len() + 2);
    dense.push(from);
    dense.extend(cells.iter().skip(1).take(cells.len().saturating_sub(2)).map(|&c| raster.center(c)));
    dense.push(to);
    Ok(raster.string_pull(&dense))
}

pub fn polyline_length(pts: &[Point]) -> f64 {
    pts.windows(2).map(|w| w[0].dist(&w[1])).sum()
}

/// Next expert waypoint and remaining shortest-path length from `pose`.
pub fn expert_action(env: &Environment, pose: Pose, goal: Point) -> Result<ExpertStep> {
    let here = pose.position();
    if here.dist(&goal) < 1e-12 {
        return Ok(ExpertStep { next_waypoint: goal, length: 0.0 });
    }
    let path = shortest_polyline(&env.raster, here, goal)?;
    let length = polyline_length(&path);
    // walk the polyline densely and keep the last visible point in range
    let mut best = here;
    'outer: for w in path.windows(2) {
        let seg = w[0].dist(&w[1]);
        let n = (seg / (env.raster.res * 0.5)).ceil().max(1.0) as usize;
        for i in 1..=n {
            let t = i as f64 / n as f64;
            let p = Point::new(w[0].x + t * (w[1].x - w[0].x), w[0].y + t * (w[1].y - w[0].y));
            if p.dist(&here) > EXPERT_LOOKAHEAD_M {
                break 'outer;
            }
            if env.raster.line_of_sight(here, p) {
                best = p;
            }
        }
    }
    Ok(ExpertStep { next_waypoint: best, length })
}

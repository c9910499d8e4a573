//! Panoramic surrogate sensing: ray-cast depth images and seeded random
//! projection features.

use serde::{Deserialize, Serialize};

use crate::geometry::{
    normalize_deg, pixel_offset_deg, DepthPatch, Point, Pose, ProjectionConfig, INVALID_DEPTH, NUM_VIEWS,
    VIEW_SPACING_DEG,
};
use crate::grid_mapper::{pool_depth, PanoramaFeatures};
use crate::nn::{matmul, Tensor};
use crate::util::rng_from;

use super::instructions::{token_id, VOCAB};
use super::Scene;

pub const DESCRIPTOR_RAYS: usize = 16;
const LANDMARK_GAIN: f64 = 3.0;
/// Extra slack when deciding whether a column ray grazes a landmark.
const LANDMARK_HIT_SLACK: f64 = 0.2;
const FEATURE_SEED: u64 = 0x5eed_f3a7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    /// Side of the square depth image per view.
    pub depth_size: usize,
    /// Pooled patch side `P`.
    pub patch: usize,
    pub max_range: f64,
    pub projection: ProjectionConfig,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self { depth_size: 28, patch: 14, max_range: 10.0, projection: ProjectionConfig::default() }
    }
}

/// Fixed random projections from descriptors to feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureModel {
    pub dim: usize,
    view_proj: Tensor,
    col_proj: Tensor,
}

impl FeatureModel {
    pub fn new(dim: usize) -> Self {
        let mut rng = rng_from(FEATURE_SEED, &[dim as u64]);
        let k = DESCRIPTOR_RAYS + VOCAB.len();
        let kc = 1 + VOCAB.len();
        Self {
            dim,
            view_proj: Tensor::randn(k, dim, 1.0 / (k as f64).sqrt() * 2.0, &mut rng),
            col_proj: Tensor::randn(kc, dim, 1.0 / (kc as f64).sqrt() * 2.0, &mut rng),
        }
    }

    pub fn view_descriptor_len(&self) -> usize {
        self.view_proj.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewObservation {
    pub feature: Vec<f64>,
    pub depth: DepthPatch,
    /// One feature row per depth-image column.
    pub column_features: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub views: Vec<ViewObservation>,
}

impl Observation {
    pub fn dim(&self) -> usize {
        self.views[0].feature.len()
    }

    /// Mean of the twelve view features.
    pub fn mean_feature(&self) -> Vec<f64> {
        crate::util::mean_vectors(self.views.iter().map(|v| v.feature.as_slice()), self.dim())
    }

    /// Pools depths to `patch x patch` and attaches to every patch the view
    /// feature plus the mean column feature of its block.
    pub fn to_panorama(&self, patch: usize) -> PanoramaFeatures {
        let d = self.dim();
        let mut features = Vec::with_capacity(NUM_VIEWS * patch * patch * d);
        let mut depths = Vec::with_capacity(NUM_VIEWS);
        for v in &self.views {
            depths.push(pool_depth(&v.depth, patch));
            let cols = v.column_features.rows;
            let block = cols.div_ceil(patch);
            let mut col_means = Vec::with_capacity(patch);
            for pc in 0..patch {
                let members: Vec<&[f64]> =
                    (pc * block..(pc + 1) * block).map(|c| v.column_features.row(c.min(cols - 1))).collect();
                col_means.push(crate::util::mean_vectors(members, d));
            }
            for _r in 0..patch {
                for cm in &col_means {
                    features.extend(v.feature.iter().zip(cm).map(|(a, b)| a + b));
                }
            }
        }
        PanoramaFeatures { patch, dim: d, features, depths }
    }
}

/// Distance along a ray to the first obstacle or boundary.
pub fn ray_distance(scene: &Scene, origin: Point, az_rad: f64, max_range: f64) -> f64 {
    let (dy, dx) = az_rad.sin_cos();
    let mut best = max_range;
    // boundary: ray leaves [0,W]x[0,H]
    let (w, h) = (scene.bounds[0], scene.bounds[1]);
    if dx > 1e-15 {
        best = best.min((w - origin.x) / dx);
    } else if dx < -1e-15 {
        best = best.min(-origin.x / dx);
    }
    if dy > 1e-15 {
        best = best.min((h - origin.y) / dy);
    } else if dy < -1e-15 {
        best = best.min(-origin.y / dy);
    }
    for o in &scene.obstacles {
        if let Some(t) = ray_rect(origin, dx, dy, o) {
            best = best.min(t);
        }
    }
    best.max(0.0)
}

/// Slab intersection; `Some(0)` when the origin is inside.
fn ray_rect(p: Point, dx: f64, dy: f64, r: &[f64; 4]) -> Option<f64> {
    let (x0, x1, y0, y1) = (r[0], r[0] + r[2], r[1], r[1] + r[3]);
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for (o, d, lo, hi) in [(p.x, dx, x0, x1), (p.y, dy, y0, y1)] {
        if d.abs() < 1e-15 {
            if o < lo || o > hi {
                return None;
            }
        } else {
            let (a, b) = ((lo - o) / d, (hi - o) / d);
            tmin = tmin.max(a.min(b));
            tmax = tmax.min(a.max(b));
        }
    }
    if tmax < tmin.max(0.0) {
        return None;
    }
    Some(tmin.max(0.0))
}

/// Renders the twelve views at `pose`. View `i` looks at world heading
/// `pose.heading + 30 i`.
pub fn render_panorama(scene: &Scene, pose: Pose, cfg: &SensorConfig, fm: &FeatureModel) -> Observation {
    let origin = pose.position();
    let n = cfg.depth_size;
    let proj = &cfg.projection;
    let vhalf = (proj.vfov_deg / 2.0).to_radians().tan();
    let vocab = VOCAB.len();
    let lm_ids: Vec<usize> = scene.landmarks.iter().map(|l| token_id(&l.label) as usize).collect();
    let mut views = Vec::with_capacity(NUM_VIEWS);
    for i in 0..NUM_VIEWS {
        let view_az = normalize_deg(pose.heading + VIEW_SPACING_DEG * i as f64);

        let mut desc = vec![0.0; fm.view_descriptor_len()];
        for (k, slot) in desc.iter_mut().take(DESCRIPTOR_RAYS).enumerate() {
            let az = view_az - pixel_offset_deg(k, DESCRIPTOR_RAYS, proj.hfov_deg);
            *slot = ray_distance(scene, origin, az.to_radians(), cfg.max_range) / cfg.max_range;
        }
        for (lm, &tok) in scene.landmarks.iter().zip(&lm_ids) {
            let rel = Point::new(lm.pos[0] - origin.x, lm.pos[1] - origin.y);
            let dist = rel.norm();
            if dist > cfg.max_range {
                continue;
            }
            let bearing = rel.y.atan2(rel.x).to_degrees();
            let off = crate::geometry::angle_diff_deg(bearing, view_az);
            if off.abs() > proj.hfov_deg / 2.0 {
                continue;
            }
            let visible =
                dist < 1e-9 || ray_distance(scene, origin, bearing.to_radians(), cfg.max_range) + 1e-9 >= dist;
            if visible {
                desc[DESCRIPTOR_RAYS + tok] += LANDMARK_GAIN / (1.0 + dist);
            }
        }
        let feature = matmul(&Tensor::row_vec(desc), &fm.view_proj).data;

        let mut depth = vec![INVALID_DEPTH; n * n];
        let mut col_desc = vec![0.0; n * (1 + vocab)];
        for c in 0..n {
            let az = view_az - pixel_offset_deg(c, n, proj.hfov_deg);
            let az_rad = az.to_radians();
            let wall = ray_distance(scene, origin, az_rad, cfg.max_range);
            let row = &mut col_desc[c * (1 + vocab)..(c + 1) * (1 + vocab)];
            row[0] = wall / cfg.max_range;
            let (s, co) = az_rad.sin_cos();
            for (lm, &tok) in scene.landmarks.iter().zip(&lm_ids) {
                let (rx, ry) = (lm.pos[0] - origin.x, lm.pos[1] - origin.y);
                let t = rx * co + ry * s;
                if t <= 0.0 || t > wall {
                    continue;
                }
                let perp = (rx * s - ry * co).abs();
                if perp <= lm.r + LANDMARK_HIT_SLACK {
                    row[1 + tok] += LANDMARK_GAIN / (1.0 + t);
                }
            }
            for r in 0..n {
                let elev_tan = vhalf * (n as f64 - 1.0 - 2.0 * r as f64) / n as f64;
                let mut d = wall;
                if elev_tan < 0.0 {
                    d = d.min(proj.camera_height / -elev_tan);
                }
                depth[r * n + c] = if d > 0.0 && d <= cfg.max_range { d } else { INVALID_DEPTH };
            }
        }
        let column_features = matmul(&Tensor::new(n, 1 + vocab, col_desc), &fm.col_proj);
        views.push(ViewObservation { feature, depth: DepthPatch::new(n, n, depth), column_features });
    }
    Observation { views }
}

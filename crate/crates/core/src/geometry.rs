//! Planar pose arithmetic, depth back-projection and grid-cell indexing.
//!
//! Conventions used everywhere in the crate:
//! * world and ego frames are right-handed, headings in degrees, 0° = +x,
//!   counter-clockwise positive;
//! * the ego frame has +x pointing along the agent heading and +y to its left;
//! * view `i` of a panorama looks at ego azimuth `30° * i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORWARD_STEP_M: f64 = 0.25;
pub const TURN_STEP_DEG: f64 = 15.0;
pub const NUM_VIEWS: usize = 12;
pub const VIEW_SPACING_DEG: f64 = 30.0;

/// Wraps an angle in degrees into `[0, 360)`.
pub fn normalize_deg(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Signed smallest difference `a - b` in degrees, in `(-180, 180]`.
pub fn angle_diff_deg(a: f64, b: f64) -> f64 {
    let d = normalize_deg(a - b);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const ORIGIN: Point = Point { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Agent pose in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Degrees in `[0, 360)`.
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading: normalize_deg(heading) }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn heading_rad(&self) -> f64 {
        self.heading.to_radians()
    }

    /// Ego-frame coordinates of a world point.
    pub fn world_to_ego(&self, p: Point) -> Point {
        let (s, c) = self.heading_rad().sin_cos();
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        Point::new(c * dx + s * dy, -s * dx + c * dy)
    }

    /// World coordinates of an ego-frame point.
    pub fn ego_to_world(&self, p: Point) -> Point {
        let (s, c) = self.heading_rad().sin_cos();
        Point::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }
}

/// Low-level action space of the continuous environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
}

/// Applies one low-level action without collision handling.
pub fn compose_pose(p: Pose, a: Action) -> Pose {
    match a {
        Action::Forward => {
            let (s, c) = p.heading_rad().sin_cos();
            Pose { x: p.x + FORWARD_STEP_M * c, y: p.y + FORWARD_STEP_M * s, heading: p.heading }
        }
        Action::TurnLeft => Pose::new(p.x, p.y, p.heading + TURN_STEP_DEG),
        Action::TurnRight => Pose::new(p.x, p.y, p.heading - TURN_STEP_DEG),
        Action::Stop => p,
    }
}

/// Egocentric raster layout shared by grid maps and heatmaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cells along ego +x.
    pub rows: usize,
    /// Cells along ego +y.
    pub cols: usize,
    /// Meters per cell.
    pub cell_res: f64,
    pub upsample_m: usize,
    pub upsample_n: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { rows: 11, cols: 11, cell_res: 1.0, upsample_m: 5, upsample_n: 5 }
    }
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, cell_res: f64, upsample_m: usize, upsample_n: usize) -> Result<Self> {
        let spec = Self { rows, cols, cell_res, upsample_m, upsample_n };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 3 || self.cols < 3 || self.rows.is_multiple_of(2) || self.cols.is_multiple_of(2) {
            return Err(Error::InvalidGridSpec(format!(
                "dimensions must be odd and >= 3, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !self.cell_res.is_finite() || self.cell_res <= 0.0 {
            return Err(Error::InvalidGridSpec(format!("cell_res {} must be > 0", self.cell_res)));
        }
        if self.upsample_m == 0 || self.upsample_n == 0 {
            return Err(Error::InvalidGridSpec("upsample factors must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn center_cell(&self) -> (usize, usize) {
        ((self.rows - 1) / 2, (self.cols - 1) / 2)
    }

    pub fn cell_index(&self, u: usize, v: usize) -> usize {
        u * self.cols + v
    }

    /// Half of the map's smaller footprint side, in meters.
    pub fn half_footprint(&self) -> f64 {
        (self.rows.min(self.cols) as f64 * self.cell_res) / 2.0
    }

    pub fn sub_rows(&self) -> usize {
        self.rows * self.upsample_m
    }

    pub fn sub_cols(&self) -> usize {
        self.cols * self.upsample_n
    }

    pub fn sub_res_x(&self) -> f64 {
        self.cell_res / self.upsample_m as f64
    }

    pub fn sub_res_y(&self) -> f64 {
        self.cell_res / self.upsample_n as f64
    }
}

/// Cell containing an ego-frame point, or `None` when it falls outside the map.
pub fn world_to_cell(ego: Point, spec: &GridSpec) -> Option<(usize, usize)> {
    if !ego.is_finite() {
        return None;
    }
    let (cu, cv) = spec.center_cell();
    let u = (ego.x / spec.cell_res).floor() + cu as f64;
    let v = (ego.y / spec.cell_res).floor() + cv as f64;
    if u < 0.0 || v < 0.0 || u >= spec.rows as f64 || v >= spec.cols as f64 {
        return None;
    }
    Some((u as usize, v as usize))
}

/// Ego-frame center of cell `(u, v)`.
pub fn cell_center(u: usize, v: usize, spec: &GridSpec) -> Point {
    let (cu, cv) = spec.center_cell();
    Point::new((u as f64 - cu as f64 + 0.5) * spec.cell_res, (v as f64 - cv as f64 + 0.5) * spec.cell_res)
}

/// Sub-cell of the upsampled lattice containing an ego point. Sub-cell blocks
/// are aligned with grid cells: cell `(u, v)` owns sub-cells
/// `u*m .. (u+1)*m` by `v*n .. (v+1)*n`.
pub fn world_to_subcell(ego: Point, spec: &GridSpec) -> Option<(usize, usize)> {
    if !ego.is_finite() {
        return None;
    }
    let (cu, cv) = spec.center_cell();
    let su = (ego.x / spec.sub_res_x()).floor() + (cu * spec.upsample_m) as f64;
    let sv = (ego.y / spec.sub_res_y()).floor() + (cv * spec.upsample_n) as f64;
    if su < 0.0 || sv < 0.0 || su >= spec.sub_rows() as f64 || sv >= spec.sub_cols() as f64 {
        return None;
    }
    Some((su as usize, sv as usize))
}

/// Ego-frame center of sub-cell `(su, sv)`.
pub fn subcell_center(su: usize, sv: usize, spec: &GridSpec) -> Point {
    let (cu, cv) = spec.center_cell();
    Point::new(
        (su as f64 - (cu * spec.upsample_m) as f64 + 0.5) * spec.sub_res_x(),
        (sv as f64 - (cv * spec.upsample_n) as f64 + 0.5) * spec.sub_res_y(),
    )
}

/// One of the twelve panoramic views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewRay {
    pub view_index: usize,
    pub azimuth: f64,
    pub hfov: f64,
}

impl ViewRay {
    pub fn new(view_index: usize, hfov: f64) -> Self {
        Self { view_index, azimuth: VIEW_SPACING_DEG * view_index as f64, hfov }
    }
}

/// Camera model for turning depth patches into planar points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    pub camera_height: f64,
    pub min_height: f64,
    pub max_height: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self { hfov_deg: 90.0, vfov_deg: 90.0, camera_height: 1.0, min_height: 0.2, max_height: 1.8 }
    }
}

/// Angular offset of the center of pixel `idx` out of `count` for a pinhole
/// camera with field of view `fov_deg`. Index 0 maps to the negative edge.
pub fn pixel_offset_deg(idx: usize, count: usize, fov_deg: f64) -> f64 {
    let half = (fov_deg / 2.0).to_radians().tan();
    (half * (2.0 * idx as f64 + 1.0 - count as f64) / count as f64).atan().to_degrees()
}

/// Ego azimuth of column `col` in a view. Column 0 is the leftmost column,
/// i.e. the one rotated furthest counter-clockwise.
pub fn column_azimuth_deg(ray: &ViewRay, col: usize, cols: usize) -> f64 {
    ray.azimuth - pixel_offset_deg(col, cols, ray.hfov)
}

/// A square (or rectangular) patch of planar ranges, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthPatch {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DepthPatch {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "depth patch size");
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Marker for an invalid depth entry.
pub const INVALID_DEPTH: f64 = 0.0;

pub fn is_valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// Result of projecting one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Backprojection {
    /// `(row-major patch index, ego position)` per kept entry.
    pub points: Vec<(usize, Point)>,
    /// Entries dropped for an invalid depth.
    pub invalid: usize,
    /// Entries dropped by the height band.
    pub out_of_band: usize,
}

/// Projects a depth patch of one view into ego-frame planar points.
pub fn backproject_view(depth: &DepthPatch, ray: &ViewRay, cfg: &ProjectionConfig) -> Backprojection {
    let mut points = Vec::with_capacity(depth.data.len());
    let mut invalid = 0;
    let mut out_of_band = 0;
    let col_dirs: Vec<(f64, f64)> =
        (0..depth.cols).map(|c| column_azimuth_deg(ray, c, depth.cols).to_radians().sin_cos()).collect();
    let vhalf = (cfg.vfov_deg / 2.0).to_radians().tan();
    for r in 0..depth.rows {
        // row 0 is the top of the image
        let elev_tan = vhalf * (depth.rows as f64 - 1.0 - 2.0 * r as f64) / depth.rows as f64;
        for (c, &(s, co)) in col_dirs.iter().enumerate() {
            let d = depth.get(r, c);
            if !is_valid_depth(d) {
                invalid += 1;
                continue;
            }
            let h = cfg.camera_height + d * elev_tan;
            if h < cfg.min_height || h > cfg.max_height {
                out_of_band += 1;
                continue;
            }
            points.push((r * depth.cols + c, Point::new(d * co, d * s)));
        }
    }
    Backprojection { points, invalid, out_of_band }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: Point, b: Point) -> bool {
        a.dist(&b) < 1e-12
    }

    #[test]
    fn forward_from_origin() {
        let p = compose_pose(Pose::new(0.0, 0.0, 0.0), Action::Forward);
        assert_eq!(p, Pose::new(0.25, 0.0, 0.0));
    }

    #[test]
    fn full_turn_returns_to_start() {
        let mut p = Pose::new(0.0, 0.0, 0.0);
        for _ in 0..24 {
            p = compose_pose(p, Action::TurnLeft);
        }
        assert_eq!(p.heading, 0.0);
        assert_eq!(p.position(), Point::ORIGIN);
    }

    #[test]
    fn forward_along_plus_y() {
        let p = compose_pose(Pose::new(1.0, 1.0, 90.0), Action::Forward);
        assert!((p.x - 1.0).abs() < 1e-15);
        assert!((p.y - 1.25).abs() < 1e-15);
        assert_eq!(p.heading, 90.0);
    }

    #[test]
    fn stop_is_identity() {
        let p = Pose::new(3.0, -2.0, 45.0);
        assert_eq!(compose_pose(p, Action::Stop), p);
    }

    #[test]
    fn on_axis_backprojection() {
        let cfg = ProjectionConfig::default();
        // 3x3 patch, center entry only
        let mut d = DepthPatch::filled(3, 3, INVALID_DEPTH);
        d.data[4] = 2.0;
        let out = backproject_view(&d, &ViewRay::new(0, 90.0), &cfg);
        assert_eq!(out.points.len(), 1);
        assert_eq!(out.invalid, 8);
        assert!(close(out.points[0].1, Point::new(2.0, 0.0)));
    }

    #[test]
    fn view_three_points_left() {
        let cfg = ProjectionConfig::default();
        let mut d = DepthPatch::filled(3, 3, INVALID_DEPTH);
        d.data[4] = 2.0;
        let out = backproject_view(&d, &ViewRay::new(3, 90.0), &cfg);
        let p = out.points[0].1;
        // counter-clockwise azimuths: 90 degrees is ego +y
        assert!(p.x.abs() < 1e-12 && (p.y - 2.0).abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn zero_depths_are_omitted() {
        let cfg = ProjectionConfig { min_height: f64::NEG_INFINITY, max_height: f64::INFINITY, ..Default::default() };
        let mut d = DepthPatch::filled(4, 4, 1.0);
        d.data[0] = 0.0;
        d.data[5] = 0.0;
        d.data[9] = -1.0;
        let out = backproject_view(&d, &ViewRay::new(0, 90.0), &cfg);
        assert_eq!(out.points.len(), 13);
        assert_eq!(out.invalid, 3);
    }

    #[test]
    fn leftmost_column_is_counter_clockwise() {
        let ray = ViewRay::new(0, 90.0);
        assert!(column_azimuth_deg(&ray, 0, 14) > 0.0);
        assert!(column_azimuth_deg(&ray, 13, 14) < 0.0);
        assert!((column_azimuth_deg(&ray, 0, 14) + column_azimuth_deg(&ray, 13, 14)).abs() < 1e-12);
    }

    #[test]
    fn cell_indexing_examples() {
        let spec = GridSpec::default();
        assert_eq!(world_to_cell(Point::new(0.0, 0.0), &spec), Some((5, 5)));
        assert_eq!(world_to_cell(Point::new(1.4, -0.6), &spec), Some((6, 4)));
        assert_eq!(world_to_cell(Point::new(6.0, 0.0), &spec), None);
        assert_eq!(world_to_cell(Point::new(-5.0, -5.0), &spec), Some((0, 0)));
        assert_eq!(world_to_cell(Point::new(-5.0001, 0.0), &spec), None);
        assert_eq!(world_to_cell(Point::new(f64::NAN, 0.0), &spec), None);
    }

    #[test]
    fn grid_spec_validation() {
        assert!(GridSpec::new(11, 11, 1.0, 5, 5).is_ok());
        assert!(GridSpec::new(10, 11, 1.0, 5, 5).is_err());
        assert!(GridSpec::new(1, 1, 1.0, 5, 5).is_err());
        assert!(GridSpec::new(3, 3, 0.0, 5, 5).is_err());
        assert!(GridSpec::new(3, 3, 1.0, 0, 5).is_err());
    }

    #[test]
    fn subcells_nest_in_cells() {
        let spec = GridSpec::default();
        for su in 0..spec.sub_rows() {
            for sv in 0..spec.sub_cols() {
                let c = subcell_center(su, sv, &spec);
                assert_eq!(world_to_subcell(c, &spec), Some((su, sv)));
                assert_eq!(world_to_cell(c, &spec), Some((su / 5, sv / 5)));
            }
        }
        assert_eq!(world_to_subcell(Point::ORIGIN, &spec), Some((25, 25)));
    }

    #[test]
    fn ego_world_roundtrip() {
        let pose = Pose::new(2.0, -1.0, 135.0);
        let w = Point::new(4.5, 0.25);
        let back = pose.ego_to_world(pose.world_to_ego(w));
        assert!(close(w, back));
        // straight ahead
        let ahead = pose.ego_to_world(Point::new(1.0, 0.0));
        let e = pose.world_to_ego(ahead);
        assert!(close(e, Point::new(1.0, 0.0)));
    }

    #[test]
    fn angle_helpers() {
        assert_eq!(normalize_deg(-15.0), 345.0);
        assert_eq!(normalize_deg(360.0), 0.0);
        assert_eq!(normalize_deg(-1e-18), 0.0);
        assert!((angle_diff_deg(10.0, 350.0) - 20.0).abs() < 1e-12);
        assert!((angle_diff_deg(350.0, 10.0) + 20.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn turns_cancel(x in -50.0..50.0f64, y in -50.0..50.0f64, h in 0.0..359.0f64, k in 0usize..40) {
            let start = Pose::new(x, y, (h / 15.0).round() * 15.0);
            let mut p = start;
            for _ in 0..k { p = compose_pose(p, Action::TurnLeft); }
            for _ in 0..k { p = compose_pose(p, Action::TurnRight); }
            prop_assert_eq!(p, start);
        }

        #[test]
        fn backprojected_range_matches_depth(
            view in 0usize..12,
            depths in proptest::collection::vec(0.05..8.0f64, 9),
        ) {
            let cfg = ProjectionConfig { min_height: f64::NEG_INFINITY, max_height: f64::INFINITY, ..Default::default() };
            let d = DepthPatch::new(3, 3, depths.clone());
            let out = backproject_view(&d, &ViewRay::new(view, 90.0), &cfg);
            prop_assert_eq!(out.points.len(), 9);
            for (idx, p) in out.points {
                let rel = (p.norm() - depths[idx]).abs() / depths[idx];
                prop_assert!(rel < 1e-9);
            }
        }

        #[test]
        fn cell_index_in_range(x in -20.0..20.0f64, y in -20.0..20.0f64, half_u in 1usize..8, half_v in 1usize..8, res in 0.1..2.0f64) {
            let spec = GridSpec::new(2 * half_u + 1, 2 * half_v + 1, res, 1, 1).unwrap();
            if let Some((u, v)) = world_to_cell(Point::new(x, y), &spec) {
                prop_assert!(u < spec.rows && v < spec.cols);
            }
            prop_assert_eq!(world_to_cell(Point::ORIGIN, &spec), Some(spec.center_cell()));
        }

        #[test]
        fn cell_center_roundtrip(half_u in 1usize..8, half_v in 1usize..8, res in 0.1..2.0f64) {
            let spec = GridSpec::new(2 * half_u + 1, 2 * half_v + 1, res, 1, 1).unwrap();
            for u in 0..spec.rows {
                for v in 0..spec.cols {
                    prop_assert_eq!(world_to_cell(cell_center(u, v, &spec), &spec), Some((u, v)));
                }
            }
        }
    }
}

//! Egocentric BEV feature grid built from one panoramic observation.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    backproject_view, is_valid_depth, world_to_cell, DepthPatch, GridSpec, Pose, ProjectionConfig, ViewRay,
    INVALID_DEPTH, NUM_VIEWS,
};

/// Patch-level view features and pooled depths for a full panorama.
#[derive(Debug, Clone, PartialEq)]
pub struct PanoramaFeatures {
    pub patch: usize,
    pub dim: usize,
    /// `12 x P x P x D`, row-major.
    pub features: Vec<f64>,
    /// One `P x P` pooled depth patch per view.
    pub depths: Vec<DepthPatch>,
}

impl PanoramaFeatures {
    pub fn feature(&self, view: usize, patch_index: usize) -> &[f64] {
        let off = (view * self.patch * self.patch + patch_index) * self.dim;
        &self.features[off..off + self.dim]
    }

    pub fn num_points(&self) -> usize {
        NUM_VIEWS * self.patch * self.patch
    }
}

/// Averages a depth image into a `p x p` layout, ignoring invalid entries.
/// Images whose sides are not multiples of `p` are padded by replicating the
/// last row / column.
pub fn pool_depth(image: &DepthPatch, p: usize) -> DepthPatch {
    assert!(p >= 1, "pool size must be >= 1");
    let rows = image.rows.div_ceil(p) * p;
    let cols = image.cols.div_ceil(p) * p;
    let br = rows / p;
    let bc = cols / p;
    let mut out = vec![INVALID_DEPTH; p * p];
    for (pi, out_row) in out.chunks_mut(p).enumerate() {
        for (pj, slot) in out_row.iter_mut().enumerate() {
            let mut sum = 0.0;
            let mut n = 0usize;
            for r in pi * br..(pi + 1) * br {
                let sr = r.min(image.rows - 1);
                for c in pj * bc..(pj + 1) * bc {
                    let d = image.get(sr, c.min(image.cols - 1));
                    if is_valid_depth(d) {
                        sum += d;
                        n += 1;
                    }
                }
            }
            if n > 0 {
                *slot = sum / n as f64;
            }
        }
    }
    DepthPatch::new(p, p, out)
}

/// `U x V x D` feature raster with per-cell point counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    pub spec: GridSpec,
    pub dim: usize,
    /// `U x V x D`, row-major over `(u, v)`.
    pub features: Vec<f64>,
    pub counts: Vec<u32>,
    pub origin_pose: Pose,
}

impl GridMap {
    pub fn empty(spec: GridSpec, dim: usize, origin_pose: Pose) -> Self {
        Self { spec, dim, features: vec![0.0; spec.num_cells() * dim], counts: vec![0; spec.num_cells()], origin_pose }
    }

    pub fn cell_feature(&self, u: usize, v: usize) -> &[f64] {
        let off = self.spec.cell_index(u, v) * self.dim;
        &self.features[off..off + self.dim]
    }

    pub fn count(&self, u: usize, v: usize) -> u32 {
        self.counts[self.spec.cell_index(u, v)]
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    /// Flat indices of cells holding at least one point.
    pub fn occupied_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(i, _)| i)
    }

    /// Writes the float-grid text format: a `U V D` header line followed by
    /// one line per cell in row-major order.
    pub fn write_float_grid<W: Write>(&self, mut w: W) -> Result<()> {
        write_float_grid(&mut w, self.spec.rows, self.spec.cols, self.dim, &self.features)
    }

    pub fn to_float_grid_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_float_grid(&mut buf).expect("write to vec");
        String::from_utf8(buf).expect("ascii")
    }
}

pub fn write_float_grid<W: Write>(w: &mut W, rows: usize, cols: usize, dim: usize, values: &[f64]) -> Result<()> {
    if values.len() != rows * cols * dim {
        return Err(Error::ShapeMismatch { expected: (rows * cols, dim), got: (values.len(), 1) });
    }
    writeln!(w, "{rows} {cols} {dim}")?;
    let mut line = String::new();
    for cell in values.chunks(dim.max(1)) {
        line.clear();
        for (i, x) in cell.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            write!(line, "{x:?}").expect("string write");
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Parses the float-grid text format into `(rows, cols, dim, values)`.
pub fn read_float_grid<R: BufRead>(r: R) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| Error::Config("empty float grid".into()))??;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| Error::Config(format!("bad header: {e}"))))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(Error::Config(format!("header must be `U V D`, got {header:?}")));
    }
    let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for line in lines {
        for t in line?.split_whitespace() {
            values.push(t.parse::<f64>().map_err(|e| Error::Config(format!("bad value: {e}")))?);
        }
    }
    if values.len() != dims[0] * dims[1] * dims[2] {
        return Err(Error::ShapeMismatch { expected: (dims[0] * dims[1], dims[2]), got: (values.len(), 1) });
    }
    Ok((dims[0], dims[1], dims[2], values))
}

/// Rasterizes a panorama into the agent-centered, heading-aligned grid with
/// mean aggregation per cell.
pub fn build_grid_map(pano: &PanoramaFeatures, pose: Pose, spec: &GridSpec, proj: &ProjectionConfig) -> GridMap {
    let d = pano.dim;
    let mut grid = GridMap::empty(*spec, d, pose);
    let mut sums = vec![0.0; spec.num_cells() * d];
    for (view, depth) in pano.depths.iter().enumerate().take(NUM_VIEWS) {
        let ray = ViewRay::new(view, proj.hfov_deg);
        let proj_pts = backproject_view(depth, &ray, proj);
        for (patch_idx, p) in proj_pts.points {
            if let Some((u, v)) = world_to_cell(p, spec) {
                let ci = spec.cell_index(u, v);
                grid.counts[ci] += 1;
                let f = pano.feature(view, patch_idx);
                for (acc, x) in sums[ci * d..(ci + 1) * d].iter_mut().zip(f) {
                    *acc += x;
                }
            }
        }
    }
    for (ci, &n) in grid.counts.iter().enumerate() {
        if n > 0 {
            let inv = n as f64;
            for (dst, s) in grid.features[ci * d..(ci + 1) * d].iter_mut().zip(&sums[ci * d..(ci + 1) * d]) {
                *dst = s / inv;
            }
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;

    fn open_band() -> ProjectionConfig {
        ProjectionConfig { min_height: f64::NEG_INFINITY, max_height: f64::INFINITY, ..Default::default() }
    }

    fn blank_pano(p: usize, dim: usize) -> PanoramaFeatures {
        PanoramaFeatures {
            patch: p,
            dim,
            features: vec![0.0; NUM_VIEWS * p * p * dim],
            depths: (0..NUM_VIEWS).map(|_| DepthPatch::filled(p, p, INVALID_DEPTH)).collect(),
        }
    }

    #[test]
    fn pool_examples() {
        let img = DepthPatch::new(2, 2, vec![1.0, 1.0, 3.0, 3.0]);
        assert_eq!(pool_depth(&img, 1).data, vec![2.0]);
        let img = DepthPatch::new(2, 2, vec![2.0, 0.0, 0.0, 0.0]);
        assert_eq!(pool_depth(&img, 1).data, vec![2.0]);
        let img = DepthPatch::filled(4, 4, 1.5);
        assert_eq!(pool_depth(&img, 2).data, vec![1.5; 4]);
        let img = DepthPatch::filled(2, 2, 0.0);
        assert_eq!(pool_depth(&img, 1).data, vec![INVALID_DEPTH]);
    }

    #[test]
    fn pool_pads_by_replication() {
        // 3x3 into 2x2: padded to 4x4 by repeating the last row/col
        let img = DepthPatch::new(3, 3, vec![1.0, 1.0, 5.0, 1.0, 1.0, 5.0, 7.0, 7.0, 9.0]);
        let out = pool_depth(&img, 2);
        assert_eq!(out.data, vec![1.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn two_points_one_cell_average() {
        let spec = GridSpec::default();
        let mut pano = blank_pano(3, 2);
        // view 0, center entry and the entry below it both land in (7,5)
        pano.depths[0].data[4] = 2.2;
        pano.depths[0].data[7] = 2.3;
        let fo = 4 * 2;
        pano.features[fo..fo + 2].copy_from_slice(&[1.0, 0.0]);
        let fo = 7 * 2;
        pano.features[fo..fo + 2].copy_from_slice(&[0.0, 1.0]);
        let g = build_grid_map(&pano, Pose::new(0.0, 0.0, 0.0), &spec, &open_band());
        assert_eq!(g.count(7, 5), 2);
        assert_eq!(g.cell_feature(7, 5), &[0.5, 0.5]);
        assert_eq!(g.total_count(), 2);
    }

    #[test]
    fn on_axis_point_lands_two_cells_ahead() {
        let spec = GridSpec::default();
        let mut pano = blank_pano(3, 1);
        pano.depths[0].data[4] = 2.0;
        pano.features[4] = 1.0;
        let g = build_grid_map(&pano, Pose::new(0.0, 0.0, 0.0), &spec, &ProjectionConfig::default());
        assert_eq!(g.count(7, 5), 1);
        assert_eq!(g.total_count(), 1);
    }

    #[test]
    fn all_invalid_gives_empty_map() {
        let spec = GridSpec::default();
        let mut pano = blank_pano(4, 3);
        pano.features.iter_mut().for_each(|x| *x = 1.0);
        let g = build_grid_map(&pano, Pose::new(1.0, 2.0, 30.0), &spec, &ProjectionConfig::default());
        assert!(g.is_empty());
        assert!(g.features.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn default_footprint_is_eleven_meters() {
        let spec = GridSpec::default();
        assert_eq!(spec.rows as f64 * spec.cell_res, 11.0);
        assert_eq!(spec.cols as f64 * spec.cell_res, 11.0);
        assert_eq!(world_to_cell(Point::new(-5.0, 5.99), &spec), Some((0, 10)));
    }

    #[test]
    fn float_grid_roundtrip() {
        let spec = GridSpec::new(3, 3, 1.0, 1, 1).unwrap();
        let mut g = GridMap::empty(spec, 2, Pose::new(0.0, 0.0, 0.0));
        g.features[3] = 0.1;
        g.features[17] = -2.5e-7;
        let text = g.to_float_grid_string();
        assert!(text.starts_with("3 3 2\n"));
        let (u, v, d, vals) = read_float_grid(text.as_bytes()).unwrap();
        assert_eq!((u, v, d), (3, 3, 2));
        assert_eq!(vals, g.features);
    }
}

//! Guided attention heatmaps: ground truth, HFFN prediction, fusion with the
//! waypoint distribution, and candidate sampling.

use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::{Fwd, Model};
use crate::error::{Error, Result};
use crate::geometry::{subcell_center, GridSpec, Point, Pose};
use crate::grid_mapper::write_float_grid;
use crate::nn::Tensor;
use crate::util::Rng;

/// Scalar field on the upsampled egocentric lattice, row-major over
/// `(su, sv)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub sub_res: f64,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(spec: &GridSpec) -> Self {
        Self {
            rows: spec.sub_rows(),
            cols: spec.sub_cols(),
            sub_res: spec.sub_res_x(),
            values: vec![0.0; spec.sub_rows() * spec.sub_cols()],
        }
    }

    pub fn get(&self, su: usize, sv: usize) -> f64 {
        self.values[su * self.cols + sv]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// First index of the maximum, as `(su, sv)`.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.cols, best % self.cols)
    }

    pub fn is_distribution(&self, tol: f64) -> bool {
        self.values.iter().all(|&v| v >= 0.0 && v.is_finite()) && (self.sum() - 1.0).abs() <= tol
    }

    /// Binary grayscale map (`P5`) with a one-line header, min mapped to 0
    /// and max to 255. Forward (+x) is up and left (+y) is left.
    pub fn to_pgm(&self) -> Vec<u8> {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.max();
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut out = format!("P5 {} {} 255\n", self.cols, self.rows).into_bytes();
        for i in 0..self.rows {
            let su = self.rows - 1 - i;
            for j in 0..self.cols {
                let sv = self.cols - 1 - j;
                let x = (self.get(su, sv) - lo) / span;
                out.push((x * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn write_float_grid<W: Write>(&self, mut w: W) -> Result<()> {
        write_float_grid(&mut w, self.rows, self.cols, 1, &self.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GahConfig {
    pub delta: f64,
    pub rho: f64,
    /// Kernel width in sub-cells.
    pub sigma: f64,
    pub k_candidates: usize,
    /// Minimum Chebyshev distance between sampled sub-cells.
    pub min_separation: usize,
}

impl Default for GahConfig {
    fn default() -> Self {
        Self { delta: 1e-5, rho: 10.0, sigma: 2.0, k_candidates: 5, min_separation: 2 }
    }
}

/// Sub-cell of an ego point, clamped onto the lattice; the flag reports
/// whether clamping happened.
pub fn clamped_subcell(ego: Point, spec: &GridSpec) -> ((usize, usize), bool) {
    let (cu, cv) = spec.center_cell();
    let su = (ego.x / spec.sub_res_x()).floor() + (cu * spec.upsample_m) as f64;
    let sv = (ego.y / spec.sub_res_y()).floor() + (cv * spec.upsample_n) as f64;
    let max_u = (spec.sub_rows() - 1) as f64;
    let max_v = (spec.sub_cols() - 1) as f64;
    let cu_ = if su.is_finite() { su.clamp(0.0, max_u) } else { 0.0 };
    let cv_ = if sv.is_finite() { sv.clamp(0.0, max_v) } else { 0.0 };
    ((cu_ as usize, cv_ as usize), cu_ != su || cv_ != sv)
}

/// Gaussian target `rho * exp(-|s - s*|^2 / (2 sigma^2))` around the next
/// waypoint's sub-cell. Returns the heatmap and whether the waypoint had to
/// be clamped onto the border.
pub fn ground_truth_gah(next_waypoint: Point, pose: Pose, spec: &GridSpec, cfg: &GahConfig) -> (Heatmap, bool) {
    let ego = pose.world_to_ego(next_waypoint);
    let ((pu, pv), clamped) = clamped_subcell(ego, spec);
    let mut h = Heatmap::zeros(spec);
    let denom = 2.0 * cfg.sigma * cfg.sigma;
    for su in 0..h.rows {
        let du = su as f64 - pu as f64;
        for sv in 0..h.cols {
            let dv = sv as f64 - pv as f64;
            h.values[su * h.cols + sv] = cfg.rho * (-(du * du + dv * dv) / denom).exp();
        }
    }
    (h, clamped)
}

/// Assembles per-cell `m*n` blocks (`U*V x m*n`) into a heatmap.
pub fn heatmap_from_blocks(blocks: &Tensor, spec: &GridSpec) -> Heatmap {
    let (m, n) = (spec.upsample_m, spec.upsample_n);
    assert_eq!(blocks.shape(), (spec.num_cells(), m * n), "HFFN block shape");
    let mut h = Heatmap::zeros(spec);
    for u in 0..spec.rows {
        for v in 0..spec.cols {
            let row = blocks.row(spec.cell_index(u, v));
            for a in 0..m {
                for b in 0..n {
                    h.values[(u * m + a) * h.cols + v * n + b] = row[a * n + b];
                }
            }
        }
    }
    h
}

/// Inverse of [`heatmap_from_blocks`]: flattens a heatmap in block order.
pub fn heatmap_to_blocks(h: &Heatmap, spec: &GridSpec) -> Vec<f64> {
    let (m, n) = (spec.upsample_m, spec.upsample_n);
    let mut out = Vec::with_capacity(h.values.len());
    for u in 0..spec.rows {
        for v in 0..spec.cols {
            for a in 0..m {
                for b in 0..n {
                    out.push(h.values[(u * m + a) * h.cols + v * n + b]);
                }
            }
        }
    }
    out
}

/// HFFN applied cell-wise to a fused grid (`U*V x D`).
pub fn predict_gah(model: &Model, fused_grid: &Tensor) -> Heatmap {
    let mut f = Fwd::new(model);
    let x = f.tape.constant(fused_grid.clone());
    let y = f.ffn(x, model.hffn);
    heatmap_from_blocks(f.tape.value(y), &model.cfg.grid)
}

/// `delta * h + p`, not renormalized.
pub fn fuse_heatmaps(h: &Heatmap, p: &Heatmap, delta: f64) -> Result<Heatmap> {
    if (h.rows, h.cols) != (p.rows, p.cols) {
        return Err(Error::ShapeMismatch { expected: (p.rows, p.cols), got: (h.rows, h.cols) });
    }
    Ok(Heatmap {
        rows: p.rows,
        cols: p.cols,
        sub_res: p.sub_res,
        values: h.values.iter().zip(&p.values).map(|(hv, pv)| delta * hv + pv).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledWaypoints {
    pub subcells: Vec<(usize, usize)>,
    /// World positions of the sub-cell centers.
    pub positions: Vec<Point>,
    /// Set when the heatmap had no mass on reachable sub-cells.
    pub fallback: bool,
}

fn draw(weights: &[f64], total: f64, rng: &mut Rng) -> usize {
    let r = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if r < acc {
                return i;
            }
        }
    }
    last
}

/// Draws up to `k` distinct sub-cells proportionally to the clamped,
/// masked heatmap, keeping at least `min_separation` sub-cells (Chebyshev)
/// between picks.
pub fn sample_waypoints(
    hm: &Heatmap,
    k: usize,
    nav_mask: &[bool],
    min_separation: usize,
    pose: Pose,
    spec: &GridSpec,
    rng: &mut Rng,
) -> SampledWaypoints {
    assert_eq!(nav_mask.len(), hm.values.len(), "mask shape");
    let mut weights: Vec<f64> =
        hm.values.iter().zip(nav_mask).map(|(&v, &ok)| if ok && v.is_finite() && v > 0.0 { v } else { 0.0 }).collect();
    let mut total: f64 = weights.iter().sum();
    let fallback = !(total > 0.0 && total.is_finite());
    if fallback {
        weights = nav_mask.iter().map(|&ok| if ok { 1.0 } else { 0.0 }).collect();
        total = weights.iter().sum();
    }
    let mut subcells = Vec::with_capacity(k);
    let sep = min_separation.max(1) as isize;
    while subcells.len() < k && total > 0.0 {
        let i = draw(&weights, total, rng);
        let (su, sv) = (i / hm.cols, i % hm.cols);
        subcells.push((su, sv));
        for du in -(sep - 1)..sep {
            for dv in -(sep - 1)..sep {
                let (a, b) = (su as isize + du, sv as isize + dv);
                if a >= 0 && b >= 0 && (a as usize) < hm.rows && (b as usize) < hm.cols {
                    weights[a as usize * hm.cols + b as usize] = 0.0;
                }
            }
        }
        total = weights.iter().sum();
    }
    let positions = subcells.iter().map(|&(su, sv)| pose.ego_to_world(subcell_center(su, sv, spec))).collect();
    SampledWaypoints { subcells, positions, fallback }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::world_to_subcell;
    use crate::util::rng_from;

    #[test]
    fn gt_peak_at_subcell_center() {
        let spec = GridSpec::default();
        let pose = Pose::new(3.0, -1.0, 45.0);
        let cfg = GahConfig::default();
        let ego = subcell_center(30, 12, &spec);
        let (h, clamped) = ground_truth_gah(pose.ego_to_world(ego), pose, &spec, &cfg);
        assert!(!clamped);
        assert_eq!(h.argmax(), (30, 12));
        assert!((h.max() - 10.0).abs() < 1e-9);
        assert_eq!((h.rows, h.cols), (55, 55));
    }

    #[test]
    fn gt_origin_lands_in_block_aligned_center() {
        let spec = GridSpec::default();
        let pose = Pose::new(0.0, 0.0, 0.0);
        let (h, _) = ground_truth_gah(Point::ORIGIN, pose, &spec, &GahConfig::default());
        assert_eq!(h.argmax(), world_to_subcell(Point::ORIGIN, &spec).unwrap());
        assert_eq!(h.argmax(), (25, 25));
    }

    #[test]
    fn gt_narrow_kernel_decays() {
        let spec = GridSpec::default();
        let cfg = GahConfig { sigma: 0.1, ..Default::default() };
        let (h, _) = ground_truth_gah(Point::new(1.0, 1.0), Pose::new(0.0, 0.0, 0.0), &spec, &cfg);
        let peak = h.argmax();
        for su in 0..h.rows {
            for sv in 0..h.cols {
                if (su, sv) != peak {
                    assert!(h.get(su, sv) < 1e-6 * cfg.rho);
                }
            }
        }
    }

    #[test]
    fn gt_far_waypoint_is_clamped() {
        let spec = GridSpec::default();
        let (h, clamped) =
            ground_truth_gah(Point::new(40.0, 0.0), Pose::new(0.0, 0.0, 0.0), &spec, &GahConfig::default());
        assert!(clamped);
        assert_eq!(h.argmax().0, 54);
    }

    #[test]
    fn blocks_roundtrip() {
        let spec = GridSpec::new(3, 5, 1.0, 2, 3).unwrap();
        let mut rng = rng_from(1, &[]);
        let t = Tensor::randn(15, 6, 1.0, &mut rng);
        let h = heatmap_from_blocks(&t, &spec);
        assert_eq!((h.rows, h.cols), (6, 15));
        assert_eq!(heatmap_to_blocks(&h, &spec), t.data);
        // cell (1, 2), sub (1, 0) -> heatmap (3, 6)
        assert_eq!(h.get(3, 6), t.row(spec.cell_index(1, 2))[3]);
    }

    fn uniform(spec: &GridSpec) -> Heatmap {
        let mut h = Heatmap::zeros(spec);
        let n = h.len() as f64;
        h.values.iter_mut().for_each(|v| *v = 1.0 / n);
        h
    }

    #[test]
    fn fuse_examples() {
        let spec = GridSpec::default();
        let p = uniform(&spec);
        let mut rng = rng_from(2, &[]);
        let h = Heatmap { values: Tensor::randn(55, 55, 3.0, &mut rng).data, ..Heatmap::zeros(&spec) };
        assert_eq!(fuse_heatmaps(&h, &p, 0.0).unwrap(), p);

        let mut p2 = p.clone();
        p2.values[77] *= 3.0;
        let flat = Heatmap { values: vec![4.0; 3025], ..Heatmap::zeros(&spec) };
        assert_eq!(fuse_heatmaps(&flat, &p2, 0.3).unwrap().argmax(), p2.argmax());

        let (gt, _) = ground_truth_gah(Point::new(2.0, 1.0), Pose::new(0.0, 0.0, 0.0), &spec, &GahConfig::default());
        let f = fuse_heatmaps(&gt, &p, 1e-5).unwrap();
        assert_eq!(f.argmax(), gt.argmax());
        assert!((f.max() - (1.0 / 3025.0 + 1e-4)).abs() < 1e-12);

        let small = Heatmap::zeros(&GridSpec::new(3, 3, 1.0, 1, 1).unwrap());
        assert!(fuse_heatmaps(&small, &p, 1.0).is_err());
    }

    #[test]
    fn sample_point_mass() {
        let spec = GridSpec::default();
        let mut h = Heatmap::zeros(&spec);
        h.values[30 * 55 + 20] = 1.0;
        let mask = vec![true; h.len()];
        let pose = Pose::new(1.0, 2.0, 90.0);
        for seed in 0..5 {
            let s = sample_waypoints(&h, 1, &mask, 2, pose, &spec, &mut rng_from(seed, &[]));
            assert_eq!(s.subcells, vec![(30, 20)]);
            assert_eq!(s.positions[0], pose.ego_to_world(subcell_center(30, 20, &spec)));
            assert!(!s.fallback);
        }
    }

    #[test]
    fn sample_reproducible_and_separated() {
        let spec = GridSpec::default();
        let h = uniform(&spec);
        let mask = vec![true; h.len()];
        let pose = Pose::new(0.0, 0.0, 0.0);
        let a = sample_waypoints(&h, 4, &mask, 2, pose, &spec, &mut rng_from(9, &[]));
        let b = sample_waypoints(&h, 4, &mask, 2, pose, &spec, &mut rng_from(9, &[]));
        assert_eq!(a, b);
        assert_eq!(a.subcells.len(), 4);
        for i in 0..4 {
            for j in i + 1..4 {
                let (p, q) = (a.subcells[i], a.subcells[j]);
                let cheb = p.0.abs_diff(q.0).max(p.1.abs_diff(q.1));
                assert!(cheb >= 2);
            }
        }
    }

    #[test]
    fn sample_masked_mass_falls_back() {
        let spec = GridSpec::default();
        let mut h = Heatmap::zeros(&spec);
        h.values[0] = 1.0;
        let mut mask = vec![false; h.len()];
        mask[100] = true;
        mask[200] = true;
        let s = sample_waypoints(&h, 1, &mask, 1, Pose::new(0.0, 0.0, 0.0), &spec, &mut rng_from(1, &[]));
        assert!(s.fallback);
        assert!(s.subcells[0] == (100 / 55, 100 % 55) || s.subcells[0] == (200 / 55, 200 % 55));
    }

    #[test]
    fn pgm_header_and_size() {
        let spec = GridSpec::default();
        let (h, _) = ground_truth_gah(Point::new(1.0, 0.0), Pose::new(0.0, 0.0, 0.0), &spec, &GahConfig::default());
        let img = h.to_pgm();
        let header = b"P5 55 55 255\n";
        assert!(img.starts_with(header));
        assert_eq!(img.len(), header.len() + 55 * 55);
        assert_eq!(*img[header.len()..].iter().max().unwrap(), 255);
    }
}

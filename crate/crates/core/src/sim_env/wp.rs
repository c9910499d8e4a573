//! Geometric surrogate for the waypoint predictor.

use serde::{Deserialize, Serialize};

use crate::geometry::{subcell_center, world_to_subcell, GridSpec, Point, Pose};
use crate::util::Rng;
use crate::vgwg::{sample_waypoints, GahConfig, Heatmap, SampledWaypoints};

use super::Environment;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WpConfig {
    /// Preferred candidate range band, meters.
    pub peak_min: f64,
    pub peak_max: f64,
    /// Width of the logit fall-off outside the band, meters.
    pub falloff: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for WpConfig {
    fn default() -> Self {
        Self { peak_min: 1.5, peak_max: 2.5, falloff: 0.5, min_range: 0.5, max_range: 5.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WpOutput {
    /// Distribution over the sub-cell lattice (`P_t`).
    pub distribution: Heatmap,
    /// Sub-cells that candidates may be placed on.
    pub nav_mask: Vec<bool>,
    /// Set when no sub-cell was reachable and the agent's own neighborhood
    /// was used instead.
    pub enclosed: bool,
    /// Candidates `w_{t,k}` drawn from the distribution.
    pub candidates: SampledWaypoints,
}

/// Mask of sub-cells that are free, in range and visible from the agent.
pub fn reachable_mask(env: &Environment, pose: Pose, spec: &GridSpec, cfg: &WpConfig) -> Vec<bool> {
    let (rows, cols) = (spec.sub_rows(), spec.sub_cols());
    let here = pose.position();
    let mut mask = vec![false; rows * cols];
    for su in 0..rows {
        for sv in 0..cols {
            let ego = subcell_center(su, sv, spec);
            let r = ego.norm();
            if r < cfg.min_range || r > cfg.max_range {
                continue;
            }
            let w = pose.ego_to_world(ego);
            mask[su * cols + sv] = env.raster.is_free(w) && env.raster.line_of_sight(here, w);
        }
    }
    mask
}

/// Band-peaked softmax over reachable sub-cells, then `k` samples.
pub fn surrogate_wp(
    env: &Environment,
    pose: Pose,
    spec: &GridSpec,
    cfg: &WpConfig,
    gah: &GahConfig,
    rng: &mut Rng,
) -> WpOutput {
    let (rows, cols) = (spec.sub_rows(), spec.sub_cols());
    let mut nav_mask = reachable_mask(env, pose, spec, cfg);
    let mut dist = Heatmap::zeros(spec);
    let enclosed = !nav_mask.iter().any(|&m| m);
    if enclosed {
        let (cu, cv) = world_to_subcell(Point::ORIGIN, spec).expect("origin on lattice");
        let mut n = 0;
        for su in cu.saturating_sub(1)..=(cu + 1).min(rows - 1) {
            for sv in cv.saturating_sub(1)..=(cv + 1).min(cols - 1) {
                nav_mask[su * cols + sv] = true;
                n += 1;
            }
        }
        for (v, &m) in dist.values.iter_mut().zip(&nav_mask) {
            if m {
                *v = 1.0 / n as f64;
            }
        }
    } else {
        let logits: Vec<f64> = (0..rows * cols)
            .map(|i| {
                if !nav_mask[i] {
                    return f64::NEG_INFINITY;
                }
                let r = subcell_center(i / cols, i % cols, spec).norm();
                let gap = if r < cfg.peak_min {
                    cfg.peak_min - r
                } else if r > cfg.peak_max {
                    r - cfg.peak_max
                } else {
                    0.0
                };
                -(gap / cfg.falloff).powi(2)
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| if l.is_finite() { (l - max).exp() } else { 0.0 }).collect();
        let z: f64 = exps.iter().sum();
        for (v, e) in dist.values.iter_mut().zip(&exps) {
            *v = e / z;
        }
    }
    let candidates = sample_waypoints(&dist, gah.k_candidates, &nav_mask, gah.min_separation, pose, spec, rng);
    WpOutput { distribution: dist, nav_mask, enclosed, candidates }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim_env::tests::room;
    use crate::sim_env::SimConfig;
    use crate::util::rng_from;

    fn env(obstacles: Vec<[f64; 4]>, start: [f64; 3], goal: [f64; 2]) -> Environment {
        let mut s = room(obstacles, start, goal);
        s.bounds = [12.0, 12.0];
        Environment::new(s, SimConfig::default()).unwrap()
    }

    #[test]
    fn open_room_is_a_distribution_in_free_space() {
        let e = env(vec![[7.0, 5.0, 1.0, 1.0]], [5.0, 5.0, 0.0], [0.5, 0.5]);
        let spec = GridSpec::default();
        let out =
            surrogate_wp(&e, e.start(), &spec, &WpConfig::default(), &GahConfig::default(), &mut rng_from(1, &[]));
        assert!(out.distribution.is_distribution(1e-6));
        assert!(!out.enclosed);
        for (i, &v) in out.distribution.values.iter().enumerate() {
            if v > 0.0 {
                let w = e.start().ego_to_world(subcell_center(i / 55, i % 55, &spec));
                assert!(e.raster.is_free(w));
            }
        }
        assert_eq!(out.candidates.positions.len(), 5);
    }

    #[test]
    fn corridor_mass_stays_in_corridor() {
        // corridor y in [5, 7] across the room
        let e = env(vec![[0.0, 0.0, 12.0, 5.0], [0.0, 7.0, 12.0, 5.0]], [6.0, 6.0, 0.0], [1.0, 6.0]);
        let spec = GridSpec::default();
        let out =
            surrogate_wp(&e, e.start(), &spec, &WpConfig::default(), &GahConfig::default(), &mut rng_from(2, &[]));
        let inside: f64 = out
            .distribution
            .values
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let w = e.start().ego_to_world(subcell_center(i / 55, i % 55, &spec));
                w.y > 5.0 && w.y < 7.0
            })
            .map(|(_, v)| v)
            .sum();
        assert!(inside > 0.9, "{inside}");
    }

    #[test]
    fn boxed_in_agent_falls_back() {
        let e = env(
            vec![[4.5, 4.5, 1.0, 0.2], [4.5, 5.3, 1.0, 0.2], [4.5, 4.5, 0.2, 1.0], [5.3, 4.5, 0.2, 1.0]],
            [5.0, 5.0, 0.0],
            [5.05, 5.05],
        );
        let spec = GridSpec::default();
        let out =
            surrogate_wp(&e, e.start(), &spec, &WpConfig::default(), &GahConfig::default(), &mut rng_from(3, &[]));
        assert!(out.enclosed);
        assert!(out.distribution.is_distribution(1e-9));
        assert_eq!(out.nav_mask.iter().filter(|&&m| m).count(), 9);
    }
}

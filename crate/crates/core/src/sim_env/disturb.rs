//! Field-of-view loss, local sensor noise and long-term memory decay.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{is_valid_depth, Point, INVALID_DEPTH};
use crate::topo_mapper::{NodeKind, TopoGraph};
use crate::util::Rng;

use super::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    FovLoss,
    LocalNoise,
    MemoryDecay,
}

impl DisturbanceKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::FovLoss => "fov_loss",
            Self::LocalNoise => "local_noise",
            Self::MemoryDecay => "memory_decay",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub kind: DisturbanceKind,
    /// In `[0, 1]`.
    pub level: f64,
    pub seed: u64,
}

impl fmt::Display for Disturbance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.level)
    }
}

impl FromStr for Disturbance {
    type Err = Error;

    /// Parses `kind:level`, e.g. `fov_loss:0.5`.
    fn from_str(s: &str) -> Result<Self, Error> {
        let (k, l) =
            s.split_once(':').ok_or_else(|| Error::Config(format!("disturbance must be kind:level, got {s:?}")))?;
        let kind = match k {
            "fov_loss" => DisturbanceKind::FovLoss,
            "local_noise" => DisturbanceKind::LocalNoise,
            "memory_decay" => DisturbanceKind::MemoryDecay,
            _ => return Err(Error::Config(format!("unknown disturbance kind {k:?}"))),
        };
        let level: f64 = l.parse().map_err(|e| Error::Config(format!("bad level {l:?}: {e}")))?;
        if !(0.0..=1.0).contains(&level) {
            return Err(Error::Config(format!("level {level} outside [0, 1]")));
        }
        Ok(Self { kind, level, seed: 0 })
    }
}

/// The piece of episode state a disturbance acts on.
pub enum DisturbanceTarget<'a> {
    /// Candidate waypoints and the free-space positions replacements are
    /// drawn from.
    Candidates {
        positions: &'a mut Vec<Point>,
        free_pool: &'a [Point],
    },
    Observation(&'a mut Observation),
    Graph(&'a mut TopoGraph),
}

fn count(level: f64, n: usize) -> usize {
    ((level * n as f64).round() as usize).min(n)
}

/// Horizontal box blur over valid entries with half-width `w`.
fn blur_rows(data: &mut [f64], rows: usize, cols: usize, w: usize) {
    let src = data.to_vec();
    for r in 0..rows {
        for c in 0..cols {
            let lo = c.saturating_sub(w);
            let hi = (c + w).min(cols - 1);
            let (mut s, mut n) = (0.0, 0);
            for k in lo..=hi {
                let v = src[r * cols + k];
                if is_valid_depth(v) {
                    s += v;
                    n += 1;
                }
            }
            data[r * cols + c] = if n > 0 { s / n as f64 } else { INVALID_DEPTH };
        }
    }
}

/// Applies `d` when the target matches its kind and returns how many items
/// were changed. Level 0 never touches the target or the RNG.
pub fn apply_disturbance(d: &Disturbance, target: DisturbanceTarget<'_>, rng: &mut Rng) -> usize {
    if d.level <= 0.0 {
        return 0;
    }
    match (d.kind, target) {
        (DisturbanceKind::FovLoss, DisturbanceTarget::Candidates { positions, free_pool }) => {
            if free_pool.is_empty() {
                return 0;
            }
            let n = count(d.level, positions.len());
            let mut idx: Vec<usize> = (0..positions.len()).collect();
            idx.shuffle(rng);
            for &i in &idx[..n] {
                positions[i] = free_pool[rng.gen_range(0..free_pool.len())];
            }
            n
        }
        (DisturbanceKind::LocalNoise, DisturbanceTarget::Observation(obs)) => {
            let w = (d.level * 3.0).round() as usize;
            if w > 0 {
                for v in &mut obs.views {
                    let (r, c) = (v.depth.rows, v.depth.cols);
                    blur_rows(&mut v.depth.data, r, c, w);
                }
            }
            let n = count(d.level, obs.views.len());
            let mut idx: Vec<usize> = (0..obs.views.len()).collect();
            idx.shuffle(rng);
            for &i in &idx[..n] {
                let v = &mut obs.views[i];
                v.feature.iter_mut().for_each(|x| *x = 0.0);
                v.column_features.data.iter_mut().for_each(|x| *x = 0.0);
            }
            n
        }
        (DisturbanceKind::MemoryDecay, DisturbanceTarget::Graph(g)) => {
            let current = g.current();
            let mut old: Vec<_> =
                g.nodes().filter(|n| n.kind == NodeKind::Visited && Some(n.id) != current).map(|n| n.id).collect();
            let n = count(d.level, old.len());
            old.shuffle(rng);
            g.remove_visited(&old[..n])
        }
        _ => 0,
    }
}

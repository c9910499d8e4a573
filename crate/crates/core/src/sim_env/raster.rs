//! Occupancy raster with line-of-sight tests, A* and Dijkstra fields.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::geometry::Point;

use super::Scene;

pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub res: f64,
    pub nx: usize,
    pub ny: usize,
    pub width: f64,
    pub height: f64,
    /// `true` where the inflated cell is traversable, indexed `i * ny + j`.
    free: Vec<bool>,
}

#[derive(PartialEq)]
struct Entry {
    f: f64,
    idx: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on f, ties by index for determinism
        other.f.total_cmp(&self.f).then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const NEIGHBORS: [(isize, isize); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];

impl Raster {
    pub fn build(scene: &Scene, res: f64, clearance: f64) -> Self {
        let (width, height) = (scene.bounds[0], scene.bounds[1]);
        let nx = (width / res).ceil() as usize;
        let ny = (height / res).ceil() as usize;
        let mut free = vec![true; nx * ny];
        for i in 0..nx {
            for j in 0..ny {
                let c = Point::new((i as f64 + 0.5) * res, (j as f64 + 0.5) * res);
                let blocked = c.x < clearance
                    || c.y < clearance
                    || c.x > width - clearance
                    || c.y > height - clearance
                    || scene.obstacles.iter().any(|o| {
                        c.x >= o[0] - clearance
                            && c.x <= o[0] + o[2] + clearance
                            && c.y >= o[1] - clearance
                            && c.y <= o[1] + o[3] + clearance
                    });
                free[i * ny + j] = !blocked;
            }
        }
        Self { res, nx, ny, width, height, free }
    }

    pub fn index(&self, c: Cell) -> usize {
        c.0 * self.ny + c.1
    }

    pub fn cell_of(&self, p: Point) -> Option<Cell> {
        if !p.is_finite() || p.x < 0.0 || p.y < 0.0 {
            return None;
        }
        let i = (p.x / self.res).floor() as usize;
        let j = (p.y / self.res).floor() as usize;
        (i < self.nx && j < self.ny).then_some((i, j))
    }

    pub fn center(&self, c: Cell) -> Point {
        Point::new((c.0 as f64 + 0.5) * self.res, (c.1 as f64 + 0.5) * self.res)
    }

    pub fn cell_free(&self, c: Cell) -> bool {
        self.free[self.index(c)]
    }

    pub fn is_free(&self, p: Point) -> bool {
        p.x > 0.0
            && p.y > 0.0
            && p.x < self.width
            && p.y < self.height
            && self.cell_of(p).is_some_and(|c| self.cell_free(c))
    }

    pub fn free_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.nx).flat_map(move |i| (0..self.ny).map(move |j| (i, j))).filter(|&c| self.cell_free(c))
    }

    /// Every sample along the segment (spacing at most half a cell) is free.
    pub fn segment_free(&self, a: Point, b: Point) -> bool {
        let n = (a.dist(&b) / (self.res * 0.5)).ceil().max(1.0) as usize;
        (0..=n).all(|k| {
            let t = k as f64 / n as f64;
            self.is_free(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)))
        })
    }

    pub fn line_of_sight(&self, a: Point, b: Point) -> bool {
        self.segment_free(a, b)
    }

    fn neighbors(&self, c: Cell) -> impl Iterator<Item = (Cell, f64)> + '_ {
        NEIGHBORS.iter().filter_map(move |&(di, dj)| {
            let (i, j) = (c.0 as isize + di, c.1 as isize + dj);
            if i < 0 || j < 0 || i as usize >= self.nx || j as usize >= self.ny {
                return None;
            }
            let n = (i as usize, j as usize);
            if !self.cell_free(n) {
                return None;
            }
            if di != 0 && dj != 0 {
                // no corner cutting
                if !self.cell_free((i as usize, c.1)) || !self.cell_free((c.0, j as usize)) {
                    return None;
                }
                return Some((n, std::f64::consts::SQRT_2 * self.res));
            }
            Some((n, self.res))
        })
    }

    /// A* over free cells with a Euclidean heuristic.
    pub fn astar(&self, start: Cell, goal: Cell) -> Option<Vec<Cell>> {
        if !self.cell_free(start) || !self.cell_free(goal) {
            return None;
        }
        let n = self.nx * self.ny;
        let mut g = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        let mut closed = vec![false; n];
        let gp = self.center(goal);
        let h = |c: Cell| self.center(c).dist(&gp);
        let si = self.index(start);
        g[si] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Entry { f: h(start), idx: si });
        let gi = self.index(goal);
        while let Some(Entry { idx, .. }) = heap.pop() {
            if closed[idx] {
                continue;
            }
            closed[idx] = true;
            if idx == gi {
                break;
            }
            let c = (idx / self.ny, idx % self.ny);
            for (nb, w) in self.neighbors(c) {
                let ni = self.index(nb);
                let ng = g[idx] + w;
                if ng < g[ni] {
                    g[ni] = ng;
                    prev[ni] = idx;
                    heap.push(Entry { f: ng + h(nb), idx: ni });
                }
            }
        }
        if !g[gi].is_finite() {
            return None;
        }
        let mut path = vec![goal];
        let mut x = gi;
        while x != si {
            x = prev[x];
            path.push((x / self.ny, x % self.ny));
        }
        path.reverse();
        Some(path)
    }

    /// Length of the A* cell path, in meters between cell centers.
    pub fn astar_length(&self, start: Cell, goal: Cell) -> Option<f64> {
        let p = self.astar(start, goal)?;
        Some(p.windows(2).map(|w| self.center(w[0]).dist(&self.center(w[1]))).sum())
    }

    /// Dijkstra distances from `source` to every cell (infinite when blocked
    /// or unreachable).
    pub fn distance_field(&self, source: Cell) -> Vec<f64> {
        let n = self.nx * self.ny;
        let mut dist = vec![f64::INFINITY; n];
        if !self.cell_free(source) {
            return dist;
        }
        let si = self.index(source);
        dist[si] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Entry { f: 0.0, idx: si });
        while let Some(Entry { f, idx }) = heap.pop() {
            if f > dist[idx] {
                continue;
            }
            let c = (idx / self.ny, idx % self.ny);
            for (nb, w) in self.neighbors(c) {
                let ni = self.index(nb);
                if f + w < dist[ni] {
                    dist[ni] = f + w;
                    heap.push(Entry { f: f + w, idx: ni });
                }
            }
        }
        dist
    }

    /// Greedy line-of-sight shortcutting of a dense polyline.
    pub fn string_pull(&self, dense: &[Point]) -> Vec<Point> {
        if dense.len() <= 2 {
            return dense.to_vec();
        }
        let mut out = vec![dense[0]];
        let mut anchor = 0;
        let last = dense.len() - 1;
        while anchor < last {
            let mut j = anchor + 1;
            while j < last && self.line_of_sight(dense[anchor], dense[j + 1]) {
                j += 1;
            }
            out.push(dense[j]);
            anchor = j;
        }
        out
    }
}

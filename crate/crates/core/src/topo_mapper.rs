//! Topological memory of visited and observed waypoints.
//!
//! The graph keeps one virtual stop node (id 0) connected to every visited
//! node, visited nodes carrying the panorama-mean feature, and observed nodes
//! carrying the feature of the view they were seen in. Each observed node
//! hangs off exactly one visited node: the latest one that observed it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff_deg, Point, Pose};
use crate::util::StableHasher;

pub type NodeId = u32;

pub const STOP_NODE: NodeId = 0;
pub const HOP_BUCKETS: usize = 5;
pub const DIST_BUCKET_M: f64 = 0.5;
pub const NUM_DIST_BUCKETS: usize = 24;
pub const HEADING_BUCKET_DEG: f64 = 30.0;
pub const NUM_HEADING_BUCKETS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Visited,
    Observed,
    VirtualStop,
}

impl NodeKind {
    pub fn index(self) -> usize {
        match self {
            NodeKind::Visited => 0,
            NodeKind::Observed => 1,
            NodeKind::VirtualStop => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopoNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub position: Point,
    #[serde(skip)]
    pub feature: Vec<f64>,
    pub last_step: u32,
    pub view_index: Option<usize>,
}

/// A waypoint proposed for this step, in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub position: Point,
    pub view_index: usize,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopoConfig {
    pub dedup_radius: f64,
}

impl Default for TopoConfig {
    fn default() -> Self {
        Self { dedup_radius: 0.5 }
    }
}

/// Per-node context ids consumed by the node embedding network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeContext {
    pub dist_bucket: usize,
    pub heading_bucket: usize,
    pub time_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopoGraph {
    pub dim: usize,
    pub config: TopoConfig,
    nodes: BTreeMap<NodeId, TopoNode>,
    edges: BTreeMap<(NodeId, NodeId), f64>,
    step: Option<u32>,
    current: Option<NodeId>,
    current_candidates: Vec<NodeId>,
    /// Number of candidates proposed at each step (`g_t`).
    candidate_counts: BTreeMap<u32, usize>,
    next_id: NodeId,
}

fn edge_key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl TopoGraph {
    pub fn new(dim: usize, config: TopoConfig) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(
            STOP_NODE,
            TopoNode {
                id: STOP_NODE,
                kind: NodeKind::VirtualStop,
                position: Point::ORIGIN,
                feature: vec![0.0; dim],
                last_step: 0,
                view_index: None,
            },
        );
        Self {
            dim,
            config,
            nodes,
            edges: BTreeMap::new(),
            step: None,
            current: None,
            current_candidates: Vec::new(),
            candidate_counts: BTreeMap::new(),
            next_id: 1,
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TopoNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: NodeId) -> Option<&TopoNode> {
        self.nodes.get(&id)
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId, f64)> + '_ {
        self.edges.iter().map(|(&(a, b), &d)| (a, b, d))
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge(&self, a: NodeId, b: NodeId) -> Option<f64> {
        self.edges.get(&edge_key(a, b)).copied()
    }

    pub fn step(&self) -> Option<u32> {
        self.step
    }

    pub fn current(&self) -> Option<NodeId> {
        self.current
    }

    pub fn current_candidates(&self) -> &[NodeId] {
        &self.current_candidates
    }

    pub fn candidate_count(&self, t: u32) -> Option<usize> {
        self.candidate_counts.get(&t).copied()
    }

    pub fn count_kind(&self, kind: NodeKind) -> usize {
        self.nodes.values().filter(|n| n.kind == kind).count()
    }

    pub fn neighbors(&self, id: NodeId) -> Vec<NodeId> {
        self.edges
            .keys()
            .filter_map(|&(a, b)| {
                if a == id {
                    Some(b)
                } else if b == id {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn degree(&self, id: NodeId) -> usize {
        self.edges.keys().filter(|&&(a, b)| a == id || b == id).count()
    }

    /// Navigation targets: every observed node ever seen, plus the stop node,
    /// in ascending id order (stop first).
    pub fn targets(&self) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter(|n| matches!(n.kind, NodeKind::Observed | NodeKind::VirtualStop))
            .map(|n| n.id)
            .collect()
    }

    fn set_edge(&mut self, a: NodeId, b: NodeId) {
        if a == b {
            return;
        }
        let d = self.nodes[&a].position.dist(&self.nodes[&b].position);
        self.edges.insert(edge_key(a, b), d);
    }

    fn remove_edges_of(&mut self, id: NodeId) {
        self.edges.retain(|&(a, b), _| a != id && b != id);
    }

    fn nearest_within(&self, p: Point, radius: f64) -> Option<NodeId> {
        self.nodes
            .values()
            .filter(|n| n.kind != NodeKind::VirtualStop)
            .map(|n| (n.id, n.position.dist(&p)))
            .filter(|&(_, d)| d < radius)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(id, _)| id)
    }

    fn alloc(&mut self) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Registers the agent's arrival at `pose` at step `t` together with the
    /// waypoint candidates it proposes.
    pub fn update(&mut self, pose: Pose, candidates: &[Candidate], pano_mean: &[f64], t: u32) -> Result<()> {
        if let Some(s) = self.step {
            if t <= s {
                return Err(Error::NonMonotonicStep { got: t, current: s });
            }
        }
        let here = pose.position();
        let radius = self.config.dedup_radius;
        let prev = self.current;

        let cur = match self.nearest_within(here, radius) {
            Some(id) => {
                let refresh_edges = {
                    let n = self.nodes.get_mut(&id).expect("node exists");
                    let moved = n.kind == NodeKind::Observed;
                    if moved {
                        n.kind = NodeKind::Visited;
                        n.position = here;
                        n.view_index = None;
                    }
                    n.feature = pano_mean.to_vec();
                    n.last_step = t;
                    moved
                };
                if refresh_edges {
                    for nb in self.neighbors(id) {
                        self.set_edge(id, nb);
                    }
                }
                id
            }
            None => {
                let id = self.alloc();
                self.nodes.insert(
                    id,
                    TopoNode {
                        id,
                        kind: NodeKind::Visited,
                        position: here,
                        feature: pano_mean.to_vec(),
                        last_step: t,
                        view_index: None,
                    },
                );
                id
            }
        };
        if let Some(p) = prev {
            if self.nodes.contains_key(&p) {
                self.set_edge(p, cur);
            }
        }
        self.set_edge(STOP_NODE, cur);

        let mut current_candidates = Vec::new();
        for c in candidates {
            let id = match self.nearest_within(c.position, radius) {
                Some(id) if self.nodes[&id].kind == NodeKind::Visited => continue,
                Some(id) => {
                    let n = self.nodes.get_mut(&id).expect("node exists");
                    n.feature = c.feature.clone();
                    n.last_step = t;
                    n.view_index = Some(c.view_index);
                    self.remove_edges_of(id);
                    id
                }
                None => {
                    let id = self.alloc();
                    self.nodes.insert(
                        id,
                        TopoNode {
                            id,
                            kind: NodeKind::Observed,
                            position: c.position,
                            feature: c.feature.clone(),
                            last_step: t,
                            view_index: Some(c.view_index),
                        },
                    );
                    id
                }
            };
            self.set_edge(cur, id);
            if !current_candidates.contains(&id) {
                current_candidates.push(id);
            }
        }
        self.candidate_counts.insert(t, candidates.len());
        self.current_candidates = current_candidates;
        self.current = Some(cur);
        self.step = Some(t);
        Ok(())
    }

    /// Visited nodes strictly closer than `radius` to the current visited node.
    pub fn neighborhood(&self, radius: f64) -> Vec<NodeId> {
        let Some(cur) = self.current.and_then(|c| self.nodes.get(&c)) else {
            return Vec::new();
        };
        self.nodes
            .values()
            .filter(|n| n.kind == NodeKind::Visited && n.position.dist(&cur.position) < radius)
            .map(|n| n.id)
            .collect()
    }

    /// Removes visited nodes (never the current one), their edges and any
    /// observed node left without an observer.
    pub fn remove_visited(&mut self, ids: &[NodeId]) -> usize {
        let mut removed = 0;
        for &id in ids {
            if Some(id) == self.current {
                continue;
            }
            match self.nodes.get(&id) {
                Some(n) if n.kind == NodeKind::Visited => {}
                _ => continue,
            }
            self.nodes.remove(&id);
            self.remove_edges_of(id);
            removed += 1;
        }
        let orphans: Vec<NodeId> = self
            .nodes
            .values()
            .filter(|n| n.kind == NodeKind::Observed && self.degree(n.id) == 0)
            .map(|n| n.id)
            .collect();
        for id in orphans {
            self.nodes.remove(&id);
        }
        self.current_candidates.retain(|id| self.nodes.contains_key(id));
        removed
    }

    /// Context ids of a node relative to the agent pose at step `t`.
    pub fn context(&self, id: NodeId, pose: Pose, max_time: usize) -> NodeContext {
        let n = &self.nodes[&id];
        if n.kind == NodeKind::VirtualStop {
            return NodeContext { dist_bucket: 0, heading_bucket: 0, time_id: 0 };
        }
        let rel = pose.world_to_ego(n.position);
        let dist = rel.norm();
        let dist_bucket = ((dist / DIST_BUCKET_M).floor() as usize).min(NUM_DIST_BUCKETS - 1);
        let bearing = rel.y.atan2(rel.x).to_degrees();
        let heading_bucket = if dist < 1e-9 {
            0
        } else {
            let a = angle_diff_deg(bearing, -HEADING_BUCKET_DEG / 2.0).rem_euclid(360.0);
            ((a / HEADING_BUCKET_DEG).floor() as usize).min(NUM_HEADING_BUCKETS - 1)
        };
        let t = self.step.unwrap_or(0);
        let time_id = (t.saturating_sub(n.last_step) as usize).min(max_time);
        NodeContext { dist_bucket, heading_bucket, time_id }
    }

    /// Pairwise hop distances over `order`, bucketed to `0..HOP_BUCKETS`.
    /// Paths never pass through the stop node; the stop node itself sits one
    /// hop from every visited node.
    pub fn hop_buckets(&self, order: &[NodeId]) -> Vec<usize> {
        let far = HOP_BUCKETS - 1;
        let ids: Vec<NodeId> = self.nodes.keys().copied().filter(|&i| i != STOP_NODE).collect();
        let pos: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut adj = vec![Vec::new(); ids.len()];
        for &(a, b) in self.edges.keys() {
            if a == STOP_NODE || b == STOP_NODE {
                continue;
            }
            adj[pos[&a]].push(pos[&b]);
            adj[pos[&b]].push(pos[&a]);
        }
        let bfs = |src: usize| -> Vec<usize> {
            let mut dist = vec![usize::MAX; ids.len()];
            let mut q = VecDeque::new();
            dist[src] = 0;
            q.push_back(src);
            while let Some(x) = q.pop_front() {
                if dist[x] >= far {
                    continue;
                }
                for &y in &adj[x] {
                    if dist[y] == usize::MAX {
                        dist[y] = dist[x] + 1;
                        q.push_back(y);
                    }
                }
            }
            dist
        };
        let stop_hop = |id: NodeId| -> usize {
            match self.nodes[&id].kind {
                NodeKind::VirtualStop => 0,
                NodeKind::Visited => 1,
                NodeKind::Observed => 2,
            }
        };
        let n = order.len();
        let mut out = vec![far; n * n];
        let rows: Vec<Option<Vec<usize>>> = order.iter().map(|id| pos.get(id).map(|&p| bfs(p))).collect();
        for (i, &a) in order.iter().enumerate() {
            for (j, &b) in order.iter().enumerate() {
                let h = if a == STOP_NODE || b == STOP_NODE {
                    stop_hop(if a == STOP_NODE { b } else { a })
                } else {
                    match &rows[i] {
                        Some(d) => d[pos[&b]],
                        None => usize::MAX,
                    }
                };
                out[i * n + j] = h.min(far);
            }
        }
        out
    }

    /// Shortest path over edges between two non-stop nodes, by metric length.
    pub fn shortest_path(&self, from: NodeId, to: NodeId) -> Option<Vec<NodeId>> {
        if !self.nodes.contains_key(&from) || !self.nodes.contains_key(&to) {
            return None;
        }
        let mut dist: BTreeMap<NodeId, f64> = BTreeMap::new();
        let mut prev: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        let mut open: BTreeSet<NodeId> = BTreeSet::new();
        dist.insert(from, 0.0);
        open.insert(from);
        while let Some(&x) = open.iter().min_by(|a, b| dist[a].total_cmp(&dist[b]).then(a.cmp(b))) {
            open.remove(&x);
            if x == to {
                break;
            }
            for y in self.neighbors(x) {
                if y == STOP_NODE {
                    continue;
                }
                let nd = dist[&x] + self.edges[&edge_key(x, y)];
                if dist.get(&y).is_none_or(|&d| nd < d) {
                    dist.insert(y, nd);
                    prev.insert(y, x);
                    open.insert(y);
                }
            }
        }
        dist.get(&to)?;
        let mut path = vec![to];
        let mut x = to;
        while x != from {
            x = prev[&x];
            path.push(x);
        }
        path.reverse();
        Some(path)
    }

    /// Checks the structural invariants, returning the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let stop = self.nodes.get(&STOP_NODE).ok_or("missing stop node")?;
        if stop.kind != NodeKind::VirtualStop || stop.position != Point::ORIGIN {
            return Err("stop node must be virtual and at the origin".into());
        }
        for (&(a, b), &d) in &self.edges {
            let (Some(na), Some(nb)) = (self.nodes.get(&a), self.nodes.get(&b)) else {
                return Err(format!("dangling edge {a}-{b}"));
            };
            let exp = na.position.dist(&nb.position);
            if (exp - d).abs() > 1e-6 {
                return Err(format!("edge {a}-{b} stores {d}, endpoints are {exp} apart"));
            }
        }
        for n in self.nodes.values() {
            if n.kind == NodeKind::Observed {
                let nb = self.neighbors(n.id);
                if nb.len() != 1 || self.nodes[&nb[0]].kind != NodeKind::Visited {
                    return Err(format!("observed node {} has neighbors {nb:?}", n.id));
                }
            }
        }
        let visited = self.count_kind(NodeKind::Visited);
        if self.degree(STOP_NODE) != visited {
            return Err(format!("stop degree {} != visited count {visited}", self.degree(STOP_NODE)));
        }
        Ok(())
    }

    /// Structural hash (ids, kinds, positions, features, edges); step stamps
    /// are included only when `with_steps` is set.
    pub fn content_hash(&self, with_steps: bool) -> String {
        let mut h = StableHasher::new();
        for n in self.nodes.values() {
            h.u64(n.id as u64).u64(n.kind.index() as u64);
            h.f64(n.position.x).f64(n.position.y).f64s(&n.feature);
            h.u64(n.view_index.map_or(u64::MAX, |v| v as u64));
            if with_steps {
                h.u64(n.last_step as u64);
            }
        }
        for (&(a, b), &d) in &self.edges {
            h.u64(a as u64).u64(b as u64).f64(d);
        }
        h.u64(self.current.map_or(u64::MAX, |c| c as u64));
        if with_steps {
            h.u64(self.step.map_or(u64::MAX, |s| s as u64));
        }
        h.finish_hex()
    }

    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct EdgeOut {
            a: NodeId,
            b: NodeId,
            distance: f64,
        }
        let nodes: Vec<serde_json::Value> = self
            .nodes
            .values()
            .map(|n| {
                serde_json::json!({
                    "id": n.id,
                    "kind": n.kind,
                    "position": [n.position.x, n.position.y],
                    "step": n.last_step,
                    "view_index": n.view_index,
                })
            })
            .collect();
        let edges: Vec<EdgeOut> = self.edges.iter().map(|(&(a, b), &distance)| EdgeOut { a, b, distance }).collect();
        serde_json::json!({
            "step": self.step,
            "current": self.current,
            "current_candidates": self.current_candidates,
            "nodes": nodes,
            "edges": edges,
        })
    }
}

/// Functional form of [`TopoGraph::update`].
pub fn update_graph(
    g: &TopoGraph,
    pose: Pose,
    candidates: &[Candidate],
    pano_mean: &[f64],
    t: u32,
) -> Result<TopoGraph> {
    let mut next = g.clone();
    next.update(pose, candidates, pano_mean, t)?;
    Ok(next)
}

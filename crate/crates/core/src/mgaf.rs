//! Bidirectional grid/graph fusion: Cell2Node, graph fusion, the geometric
//! discount matrix and Node2Cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{world_to_cell, GridSpec, Pose};
use crate::grid_mapper::GridMap;
use crate::nn::{matmul, Tensor};
use crate::topo_mapper::{NodeId, NodeKind, TopoGraph};
use crate::util::mean_vectors;

/// Per-node weights over the grid, decaying with distance from the node cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DiscountMatrix {
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[u * self.cols + v]
    }
}

/// `(d_max - d) / (d_max - d_min)` over cell-unit distances to `node_cell`.
pub fn discount_matrix(node_cell: (usize, usize), rows: usize, cols: usize) -> DiscountMatrix {
    assert!(node_cell.0 < rows && node_cell.1 < cols, "node cell outside the grid");
    let mut d = Vec::with_capacity(rows * cols);
    for u in 0..rows {
        for v in 0..cols {
            let du = u as f64 - node_cell.0 as f64;
            let dv = v as f64 - node_cell.1 as f64;
            d.push((du * du + dv * dv).sqrt());
        }
    }
    let dmin = d.iter().copied().fold(f64::INFINITY, f64::min);
    let dmax = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values =
        if dmax - dmin <= 0.0 { vec![1.0; d.len()] } else { d.iter().map(|&x| (dmax - x) / (dmax - dmin)).collect() };
    DiscountMatrix { rows, cols, values }
}

pub fn discount_for_spec(node_cell: (usize, usize), spec: &GridSpec) -> DiscountMatrix {
    discount_matrix(node_cell, spec.rows, spec.cols)
}

/// Output of Cell2Node: one row per node in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell2Node {
    pub ids: Vec<NodeId>,
    pub features: Tensor,
    /// Set when the grid held no points.
    pub empty_grid: bool,
}

/// Transfers grid features to the graph: the current visited node gets the
/// mean of occupied cells, observed nodes inside the footprint get their
/// cell's feature, everything else stays zero.
pub fn cell2node(grid: &GridMap, graph: &TopoGraph, pose: Pose) -> Cell2Node {
    let ids = graph.node_ids();
    let d = grid.dim;
    let mut data = vec![0.0; ids.len() * d];
    let empty_grid = grid.is_empty();
    let current = graph.current();
    for (row, &id) in ids.iter().enumerate() {
        let node = graph.node(id).expect("listed node");
        let out = &mut data[row * d..(row + 1) * d];
        match node.kind {
            NodeKind::Visited if Some(id) == current && !empty_grid => {
                let mean = mean_vectors(grid.occupied_cells().map(|ci| &grid.features[ci * d..(ci + 1) * d]), d);
                out.copy_from_slice(&mean);
            }
            NodeKind::Observed => {
                if let Some((u, v)) = world_to_cell(pose.world_to_ego(node.position), &grid.spec) {
                    out.copy_from_slice(grid.cell_feature(u, v));
                }
            }
            _ => {}
        }
    }
    Cell2Node { ids, features: Tensor::new(ids_len(&data, d), d, data), empty_grid }
}

fn ids_len(data: &[f64], d: usize) -> usize {
    data.len().checked_div(d).unwrap_or(0)
}

/// `[a; b] W + bias` per row.
pub fn apply_fusion(a: &Tensor, b: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows);
    let mut cat = Vec::with_capacity(a.rows * (a.cols + b.cols));
    for r in 0..a.rows {
        cat.extend_from_slice(a.row(r));
        cat.extend_from_slice(b.row(r));
    }
    let cat = Tensor::new(a.rows, a.cols + b.cols, cat);
    let mut out = matmul(&cat, w);
    for r in 0..out.rows {
        for (o, bv) in out.row_mut(r).iter_mut().zip(&bias.data) {
            *o += bv;
        }
    }
    out
}

/// GF over `[g'; g]`; both sides must list the same node ids.
pub fn graph_fuse(
    g_prime: &Tensor,
    g_prime_ids: &[NodeId],
    g: &Tensor,
    g_ids: &[NodeId],
    w: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    if g_prime_ids != g_ids {
        return Err(Error::NodeMismatch(format!("cell2node covers {g_prime_ids:?}, graph covers {g_ids:?}")));
    }
    Ok(apply_fusion(g_prime, g, w, bias))
}

/// Neighborhood nodes projected onto the current grid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProjectedNeighborhood {
    /// Rows into the node-ordered feature matrix.
    pub rows: Vec<usize>,
    pub cells: Vec<(usize, usize)>,
    /// Neighborhood nodes that fell outside the grid.
    pub excluded: usize,
}

/// Projects the visited-node neighborhood `N_t` onto the grid.
pub fn project_neighborhood(graph: &TopoGraph, pose: Pose, spec: &GridSpec, radius: f64) -> ProjectedNeighborhood {
    let ids = graph.node_ids();
    let mut out = ProjectedNeighborhood::default();
    for id in graph.neighborhood(radius) {
        let node = graph.node(id).expect("listed node");
        match world_to_cell(pose.world_to_ego(node.position), spec) {
            Some(cell) => {
                out.rows.push(ids.binary_search(&id).expect("id present"));
                out.cells.push(cell);
            }
            None => out.excluded += 1,
        }
    }
    out
}

/// `U*V x K` matrix whose column `i` is the discount matrix of node `i`.
pub fn discount_columns(cells: &[(usize, usize)], spec: &GridSpec) -> Tensor {
    let n = spec.num_cells();
    let k = cells.len();
    let mut data = vec![0.0; n * k];
    for (i, &cell) in cells.iter().enumerate() {
        let dm = discount_for_spec(cell, spec);
        for (ci, &val) in dm.values.iter().enumerate() {
            data[ci * k + i] = val;
        }
    }
    Tensor::new(n, k, data)
}

/// Broadcast field `B = sum_i D_i * f_i`, `U*V x D`.
pub fn broadcast_field(node_feats: &[&[f64]], cells: &[(usize, usize)], spec: &GridSpec, dim: usize) -> Tensor {
    if cells.is_empty() {
        return Tensor::zeros(spec.num_cells(), dim);
    }
    let dcols = discount_columns(cells, spec);
    let mut f = Vec::with_capacity(cells.len() * dim);
    for nf in node_feats {
        f.extend_from_slice(nf);
    }
    matmul(&dcols, &Tensor::new(cells.len(), dim, f))
}

/// Node2Cell: MF over `[B; M~]`.
pub fn node2cell(
    aligned: &Tensor,
    hood: &ProjectedNeighborhood,
    m_tilde: &Tensor,
    spec: &GridSpec,
    w: &Tensor,
    bias: &Tensor,
) -> Tensor {
    let feats: Vec<&[f64]> = hood.rows.iter().map(|&r| aligned.row(r)).collect();
    let b = broadcast_field(&feats, &hood.cells, spec, aligned.cols);
    apply_fusion(&b, m_tilde, w, bias)
}

//! Dense `f64` matrices, a parameter store and a reverse-mode tape.
//!
//! The tape records one node per operation; [`Tape::backward`] walks it in
//! reverse and accumulates gradients into the parameters that were read with
//! [`Tape::param`]. All values are row-major matrices; vectors are `1 x n`.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::Rng;

/// Box-Muller standard normal.
fn normal(rng: &mut Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(1, n, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| normal(rng) * std).collect();
        Self::new(rows, cols, data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// `a (n x k) * b (k x m)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dims");
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(n, m, out)
}

/// `a (n x k) * b^T` where `b` is `m x k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dims");
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(n, m, out)
}

/// `a^T * b` where `a` is `n x k` and `b` is `n x m`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn outer dims");
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b.data[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(k, m, out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let mut out = vec![0.0; a.data.len()];
    for r in 0..a.rows {
        for c in 0..a.cols {
            out[c * a.rows + r] = a.data[r * a.cols + c];
        }
    }
    Tensor::new(a.cols, a.rows, out)
}

pub type ParamId = usize;

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    /// Offset in `f64` elements from the start of the archive.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    tensors: Vec<ManifestEntry>,
}

const ARCHIVE_FORMAT: &str = "dualmap-tensors-v1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.tensors.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// `p -= lr * g` for every parameter with a gradient.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (id, g) in grads.iter() {
            for (p, gv) in self.tensors[id].data.iter_mut().zip(&g.data) {
                *p -= lr * gv;
            }
        }
    }

    /// Writes `path` (raw little-endian f64) and `path.json` (manifest).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.len());
        let mut bytes = Vec::with_capacity(self.num_scalars() * 8);
        let mut offset = 0;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            entries.push(ManifestEntry { name: name.clone(), shape: [t.rows, t.cols], offset });
            for &x in &t.data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            offset += t.data.len();
        }
        let manifest = Manifest { format: ARCHIVE_FORMAT.into(), dtype: "f64-le".into(), tensors: entries };
        fs::File::create(path)?.write_all(&bytes)?;
        fs::write(manifest_path(path), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Loads values into an existing store; every tensor must be present in
    /// the archive with a matching shape.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path(path))?)?;
        if manifest.format != ARCHIVE_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {}", manifest.format)));
        }
        let mut raw = Vec::new();
        fs::File::open(path)?.read_to_end(&mut raw)?;
        if raw.len() % 8 != 0 {
            return Err(Error::Checkpoint("archive length is not a multiple of 8".into()));
        }
        let values: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let by_name: HashMap<&str, &ManifestEntry> = manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let e = by_name.get(name.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if e.shape != [t.rows, t.cols] {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} != expected {:?}",
                    e.shape,
                    [t.rows, t.cols]
                )));
            }
            let n = t.data.len();
            let slice = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} out of bounds")))?;
            t.data.copy_from_slice(slice);
        }
        Ok(())
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Sparse map from parameter id to gradient.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        let mut ids: Vec<_> = self.grads.keys().copied().collect();
        ids.sort_unstable();
        ids.into_iter().map(move |id| (id, &self.grads[&id]))
    }

    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in other.iter() {
            let e = self.grads.entry(id).or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            for (a, b) in e.data.iter_mut().zip(&g.data) {
                *a += scale * b;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn norm_of<'a>(&self, ids: impl IntoIterator<Item = &'a ParamId>) -> f64 {
        ids.into_iter().filter_map(|id| self.grads.get(id)).map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm(Var),
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    GatherScalars(Var, Vec<usize>),
    NllRows(Var, Vec<usize>),
    Mse(Var, Vec<f64>),
    SumAll(Var),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Op-specific forward cache (softmax probabilities, inverse std, ...).
    cache: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let n = row.len() as f64;
        row.iter_mut().for_each(|x| *x = 1.0 / n);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

/// Reverse-mode autodiff tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, cache: Vec<f64>) -> Var {
        self.nodes.push(Node { value, op, needs_grad, cache });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false, Vec::new())
    }

    /// Reads a parameter; repeated reads share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true, Vec::new());
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), g, Vec::new())
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_nt(self.value(a), self.value(b));
        let g = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNt(a, b), g, Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shapes");
        let out = Tensor::new(x.rows, x.cols, x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect());
        let g = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), g, Vec::new())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shapes");
        let out = Tensor::new(x.rows, x.cols, x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect());
        let g = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), g, Vec::new())
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols), r.shape(), "add_row shapes");
        let mut out = x.clone();
        for chunk in out.data.chunks_mut(x.cols) {
            for (o, b) in chunk.iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        let g = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), g, Vec::new())
    }

    /// Multiplies every row of `a` elementwise by a `1 x m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols), r.shape(), "mul_row shapes");
        let mut out = x.clone();
        for chunk in out.data.chunks_mut(x.cols) {
            for (o, b) in chunk.iter_mut().zip(&r.data) {
                *o *= b;
            }
        }
        let g = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), g, Vec::new())
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v * s).collect());
        let g = self.ng(a);
        self.push(out, Op::Scale(a, s), g, Vec::new())
    }

    /// Multiplies `a` by a `1 x 1` variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).scalar();
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v * sv).collect());
        let g = self.ng(a) || self.ng(s);
        self.push(out, Op::MulScalar(a, s), g, Vec::new())
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|&v| gelu(v)).collect());
        let g = self.ng(a);
        self.push(out, Op::Gelu(a), g, Vec::new())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.rows, x.cols, x.data.iter().map(|&v| sigmoid(v)).collect());
        let g = self.ng(a);
        self.push(out, Op::Sigmoid(a), g, Vec::new())
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows);
        for row in out.data.chunks_mut(x.cols) {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let g = self.ng(a);
        self.push(out, Op::LayerNorm(a), g, inv_std)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for row in out.data.chunks_mut(x.cols) {
            softmax_in_place(row);
        }
        let g = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), g, Vec::new())
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols range");
        let mut data = Vec::with_capacity(x.rows * len);
        for r in 0..x.rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let g = self.ng(a);
        self.push(Tensor::new(x.rows, len, data), Op::SliceCols(a, start), g, Vec::new())
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows, rows, "concat_cols rows");
                data.extend_from_slice(t.row(r));
            }
        }
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(rows, cols, data), Op::ConcatCols(parts.to_vec()), g, Vec::new())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows cols");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec()), g, Vec::new())
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * x.cols);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let g = self.ng(a);
        self.push(Tensor::new(idx.len(), x.cols, data), Op::GatherRows(a, idx.to_vec()), g, Vec::new())
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = vec![0.0; x.cols];
        for r in 0..x.rows {
            for (o, v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let n = x.rows.max(1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        let g = self.ng(a);
        self.push(Tensor::row_vec(out), Op::MeanRows(a), g, Vec::new())
    }

    /// Builds a `rows x cols` matrix whose entries are looked up from a flat
    /// parameter table by index.
    pub fn gather_scalars(&mut self, table: Var, idx: &[usize], rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather_scalars size");
        let t = self.value(table);
        let data = idx.iter().map(|&i| t.data[i]).collect();
        let g = self.ng(table);
        self.push(Tensor::new(rows, cols, data), Op::GatherScalars(table, idx.to_vec()), g, Vec::new())
    }

    /// Mean over rows of `-log softmax(row)[target]`; returns `1 x 1`.
    pub fn nll_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows, targets.len(), "nll targets");
        let mut probs = x.data.clone();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(x.cols).enumerate() {
            softmax_in_place(row);
            let xr = x.row(r);
            let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + xr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - xr[targets[r]];
        }
        loss /= targets.len().max(1) as f64;
        let g = self.ng(logits);
        self.push(Tensor::filled(1, 1, loss), Op::NllRows(logits, targets.to_vec()), g, probs)
    }

    /// Mean squared error against a constant target; returns `1 x 1`.
    pub fn mse(&mut self, a: Var, target: &[f64]) -> Var {
        let x = self.value(a);
        assert_eq!(x.data.len(), target.len(), "mse sizes");
        let n = target.len().max(1) as f64;
        let loss = x.data.iter().zip(target).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n;
        let g = self.ng(a);
        self.push(Tensor::filled(1, 1, loss), Op::Mse(a, target.to_vec()), g, Vec::new())
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = transpose(self.value(a));
        let g = self.ng(a);
        self.push(out, Op::Transpose(a), g, Vec::new())
    }

    /// Sum of all entries; returns `1 x 1`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let g = self.ng(a);
        self.push(Tensor::filled(1, 1, s), Op::SumAll(a), g, Vec::new())
    }

    /// Back-propagates from a `1 x 1` output and returns parameter gradients.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward from a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::filled(1, 1, 1.0));
        let mut result = Gradients::default();

        fn acc(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
            match &mut grads[v.0] {
                Some(g) => {
                    for (a, b) in g.data.iter_mut().zip(&delta.data) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    result.grads.insert(*pid, gout);
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, matmul_nt(&gout, self.value(*b)));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, matmul_tn(self.value(*a), &gout));
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, matmul(&gout, self.value(*b)));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, matmul_tn(&gout, self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, gout.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, gout);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        let neg = Tensor::new(gout.rows, gout.cols, gout.data.iter().map(|v| -v).collect());
                        acc(&mut grads, *b, neg);
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, gout);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let mut r = vec![0.0; gout.cols];
                        for chunk in gout.data.chunks(gout.cols) {
                            for (o, v) in r.iter_mut().zip(chunk) {
                                *o += v;
                            }
                        }
                        acc(&mut grads, *row, Tensor::row_vec(r));
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, gout);
                    }
                }
                Op::MulRow(a, row) => {
                    let x = self.value(*a);
                    let rv = self.value(*row);
                    if self.ng(*row) {
                        let mut r = vec![0.0; gout.cols];
                        for (gc, xc) in gout.data.chunks(gout.cols).zip(x.data.chunks(x.cols)) {
                            for ((o, gv), xv) in r.iter_mut().zip(gc).zip(xc) {
                                *o += gv * xv;
                            }
                        }
                        acc(&mut grads, *row, Tensor::row_vec(r));
                    }
                    if self.ng(*a) {
                        let mut d = gout;
                        for chunk in d.data.chunks_mut(x.cols) {
                            for (o, b) in chunk.iter_mut().zip(&rv.data) {
                                *o *= b;
                            }
                        }
                        acc(&mut grads, *a, d);
                    }
                }
                Op::Scale(a, s) => {
                    let d = Tensor::new(gout.rows, gout.cols, gout.data.iter().map(|v| v * s).collect());
                    acc(&mut grads, *a, d);
                }
                Op::MulScalar(a, s) => {
                    let x = self.value(*a);
                    if self.ng(*s) {
                        let ds: f64 = gout.data.iter().zip(&x.data).map(|(g, v)| g * v).sum();
                        acc(&mut grads, *s, Tensor::filled(1, 1, ds));
                    }
                    if self.ng(*a) {
                        let sv = self.value(*s).scalar();
                        let d = Tensor::new(gout.rows, gout.cols, gout.data.iter().map(|v| v * sv).collect());
                        acc(&mut grads, *a, d);
                    }
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let d = gout.data.iter().zip(&x.data).map(|(g, &v)| g * gelu_grad(v)).collect();
                    acc(&mut grads, *a, Tensor::new(gout.rows, gout.cols, d));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = gout.data.iter().zip(&y.data).map(|(g, s)| g * s * (1.0 - s)).collect();
                    acc(&mut grads, *a, Tensor::new(gout.rows, gout.cols, d));
                }
                Op::LayerNorm(a) => {
                    let y = &node.value;
                    let n = y.cols as f64;
                    let mut d = gout;
                    for (r, (drow, yrow)) in d.data.chunks_mut(y.cols).zip(y.data.chunks(y.cols)).enumerate() {
                        let mean_g = drow.iter().sum::<f64>() / n;
                        let mean_gy = drow.iter().zip(yrow).map(|(g, v)| g * v).sum::<f64>() / n;
                        let is = node.cache[r];
                        for (g, v) in drow.iter_mut().zip(yrow) {
                            *g = is * (*g - mean_g - v * mean_gy);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = gout;
                    for (drow, yrow) in d.data.chunks_mut(y.cols).zip(y.data.chunks(y.cols)) {
                        let dot: f64 = drow.iter().zip(yrow).map(|(g, p)| g * p).sum();
                        for (g, p) in drow.iter_mut().zip(yrow) {
                            *g = p * (*g - dot);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut d = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        d.row_mut(r)[*start..*start + gout.cols].copy_from_slice(gout.row(r));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols;
                        if self.ng(p) {
                            let mut data = Vec::with_capacity(gout.rows * pc);
                            for r in 0..gout.rows {
                                data.extend_from_slice(&gout.row(r)[off..off + pc]);
                            }
                            acc(&mut grads, p, Tensor::new(gout.rows, pc, data));
                        }
                        off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (pr, pc) = self.shape(p);
                        if self.ng(p) {
                            let data = gout.data[off * pc..(off + pr) * pc].to_vec();
                            acc(&mut grads, p, Tensor::new(pr, pc, data));
                        }
                        off += pr;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let x = self.value(*a);
                    let mut d = Tensor::zeros(x.rows, x.cols);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in d.row_mut(i).iter_mut().zip(gout.row(k)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let n = x.rows.max(1) as f64;
                    let mut d = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for (o, v) in d.row_mut(r).iter_mut().zip(&gout.data) {
                            *o = v / n;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::GatherScalars(table, idx) => {
                    let t = self.value(*table);
                    let mut d = Tensor::zeros(t.rows, t.cols);
                    for (k, &i) in idx.iter().enumerate() {
                        d.data[i] += gout.data[k];
                    }
                    acc(&mut grads, *table, d);
                }
                Op::NllRows(a, targets) => {
                    let x = self.value(*a);
                    let g = gout.scalar() / targets.len().max(1) as f64;
                    let mut d = Tensor::new(x.rows, x.cols, node.cache.clone());
                    for (r, &t) in targets.iter().enumerate() {
                        d.data[r * x.cols + t] -= 1.0;
                    }
                    d.data.iter_mut().for_each(|v| *v *= g);
                    acc(&mut grads, *a, d);
                }
                Op::Transpose(a) => {
                    acc(&mut grads, *a, transpose(&gout));
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Tensor::filled(r, c, gout.scalar()));
                }
                Op::Mse(a, target) => {
                    let x = self.value(*a);
                    let g = gout.scalar() * 2.0 / target.len().max(1) as f64;
                    let d = x.data.iter().zip(target).map(|(p, q)| g * (p - q)).collect();
                    acc(&mut grads, *a, Tensor::new(x.rows, x.cols, d));
                }
            }
        }
        result
    }
}

/// Initializer shared by the model builders.
pub fn init_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::randn(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

pub fn init_small(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Tensor {
    Tensor::randn(rows, cols, std, rng)
}

pub fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from;

    /// Central-difference check of every op against a scalar loss built by `f`.
    fn check<F>(shapes: &[(usize, usize)], f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut rng = rng_from(3, &[shapes.len() as u64]);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| store.add(format!("p{i}"), Tensor::randn(r, c, 0.7, &mut rng)))
            .collect();
        let eval = |store: &ParamStore| -> (f64, Gradients) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
            let out = f(&mut tape, &vars);
            (tape.value(out).scalar(), tape.backward(out))
        };
        let (_, grads) = eval(&store);
        let h = 1e-5;
        for &id in &ids {
            for k in 0..store.get(id).data.len() {
                let orig = store.get(id).data[k];
                store.get_mut(id).data[k] = orig + h;
                let fp = eval(&store).0;
                store.get_mut(id).data[k] = orig - h;
                let fm = eval(&store).0;
                store.get_mut(id).data[k] = orig;
                let num = (fp - fm) / (2.0 * h);
                let ana = grads.get(id).map_or(0.0, |g| g.data[k]);
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(err < 1e-6, "param {id} coord {k}: numeric {num} analytic {ana}");
            }
        }
    }

    fn sum_sq(t: &mut Tape, v: Var) -> Var {
        let n = t.value(v).data.len();
        let target = vec![0.3; n];
        t.mse(v, &target)
    }

    #[test]
    fn grad_matmul_family() {
        check(&[(3, 4), (4, 2)], |t, v| {
            let m = t.matmul(v[0], v[1]);
            sum_sq(t, m)
        });
        check(&[(3, 4), (5, 4)], |t, v| {
            let m = t.matmul_nt(v[0], v[1]);
            sum_sq(t, m)
        });
    }

    #[test]
    fn grad_elementwise() {
        check(&[(2, 3), (2, 3), (1, 3), (1, 1)], |t, v| {
            let a = t.add(v[0], v[1]);
            let b = t.sub(a, v[1]);
            let c = t.add_row(b, v[2]);
            let d = t.mul_row(c, v[2]);
            let e = t.mul_scalar(d, v[3]);
            let f = t.scale(e, 0.5);
            let g = t.gelu(f);
            let h = t.sigmoid(g);
            sum_sq(t, h)
        });
    }

    #[test]
    fn grad_norm_and_softmax() {
        check(&[(3, 5)], |t, v| {
            let a = t.layer_norm(v[0]);
            let b = t.softmax_rows(a);
            let c = t.scale(b, 3.0);
            sum_sq(t, c)
        });
    }

    #[test]
    fn grad_structural() {
        check(&[(3, 4), (2, 4), (1, 6)], |t, v| {
            let a = t.slice_cols(v[0], 1, 2);
            let b = t.concat_cols(&[a, v[0]]);
            let c = t.concat_rows(&[v[0], v[1]]);
            let d = t.gather_rows(c, &[0, 4, 4, 2]);
            let e = t.mean_rows(d);
            let s = t.gather_scalars(v[2], &[0, 5, 5, 1, 2, 3], 2, 3);
            let s2 = t.sum_all(s);
            let f = t.mean_rows(b);
            let tr = t.transpose(f);
            let f = t.transpose(tr);
            let g = t.concat_cols(&[e, f]);
            let l = sum_sq(t, g);
            t.add(l, s2)
        });
    }

    #[test]
    fn grad_nll() {
        check(&[(3, 4)], |t, v| t.nll_rows(v[0], &[0, 3, 1]));
    }

    #[test]
    fn nll_of_uniform_is_log_n() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(1, 4));
        let l = t.nll_rows(x, &[2]);
        assert!((t.value(l).scalar() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let mut row = vec![1e308, -1e308, 0.0];
        softmax_in_place(&mut row);
        assert!(row.iter().all(|x| x.is_finite()));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = rng_from(1, &[]);
        let a = Tensor::randn(3, 4, 1.0, &mut rng);
        let b = Tensor::randn(5, 4, 1.0, &mut rng);
        let bt =
            Tensor::new(4, 5, (0..4).flat_map(|c| (0..5).map(move |r| (r, c))).map(|(r, c)| b.get(r, c)).collect());
        let x = matmul_nt(&a, &b);
        let y = matmul(&a, &bt);
        for (p, q) in x.data.iter().zip(&y.data) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = std::env::temp_dir().join(format!("dualmap-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");
        let mut rng = rng_from(5, &[]);
        let mut store = ParamStore::new();
        store.add("a", Tensor::randn(2, 3, 1.0, &mut rng));
        store.add("b", Tensor::randn(1, 4, 1.0, &mut rng));
        store.save(&path).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(manifest_path(&path)).unwrap()).unwrap();
        assert_eq!(manifest["tensors"][1]["offset"], 6);
        assert_eq!(manifest["tensors"][0]["shape"], serde_json::json!([2, 3]));
        let mut other = store.clone();
        other.get_mut(0).data.iter_mut().for_each(|x| *x = 0.0);
        other.load_into(&path).unwrap();
        assert_eq!(other, store);

        let mut wrong = ParamStore::new();
        wrong.add("a", Tensor::zeros(3, 2));
        assert!(wrong.load_into(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}

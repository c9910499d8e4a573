//! Instruction embedding and the two cross-modal transformers: TCMT over
//! graph nodes and GCMT over grid cells.

use serde::{Deserialize, Serialize};

use crate::geometry::{GridSpec, Pose};
use crate::grid_mapper::GridMap;
use crate::nn::{init_matrix, init_small, ParamId, ParamStore, Tape, Tensor, Var};
use crate::topo_mapper::{NodeId, NodeKind, TopoGraph, HOP_BUCKETS, NUM_DIST_BUCKETS, NUM_HEADING_BUCKETS};
use crate::util::rng_from;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub hffn_hidden: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Cap on the recency index of the time-step embedding.
    pub max_time: usize,
    pub grid: GridSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 2,
            layers: 2,
            ffn_hidden: 64,
            hffn_hidden: 32,
            vocab_size: crate::sim_env::instructions::VOCAB.len(),
            max_len: 24,
            max_time: 16,
            grid: GridSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct TcmtLayer {
    pub self_attn: AttnParams,
    pub hop_bias: ParamId,
    pub cross: AttnParams,
    pub ffn: FfnParams,
    pub txt_self: AttnParams,
    pub txt_cross: AttnParams,
    pub txt_ffn: FfnParams,
}

#[derive(Debug, Clone, Copy)]
pub struct GcmtLayer {
    pub self_attn: AttnParams,
    pub cross: AttnParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

/// All learned parameters plus their ids.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub kind_emb: ParamId,
    pub dist_emb: ParamId,
    pub heading_emb: ParamId,
    pub time_emb: ParamId,
    pub tcmt: Vec<TcmtLayer>,
    pub cell_pos_emb: ParamId,
    pub gcmt: Vec<GcmtLayer>,
    pub gf: Linear,
    pub mf: Linear,
    pub hffn: FfnParams,
    pub graph_head: Linear,
    pub grid_head: Linear,
    pub gamma_head: Linear,
    pub mlm_head: Linear,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: crate::util::Rng,
}

impl Builder<'_> {
    fn mat(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let t = init_matrix(rows, cols, &mut self.rng);
        self.store.add(name, t)
    }

    fn emb(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let t = init_small(rows, cols, std, &mut self.rng);
        self.store.add(name, t)
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(rows, cols))
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnParams {
        AttnParams {
            wq: self.mat(format!("{prefix}.wq"), d, d),
            wk: self.mat(format!("{prefix}.wk"), d, d),
            wv: self.mat(format!("{prefix}.wv"), d, d),
            wo: self.mat(format!("{prefix}.wo"), d, d),
            bo: self.zeros(format!("{prefix}.bo"), 1, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, h: usize, out: usize) -> FfnParams {
        FfnParams {
            w1: self.mat(format!("{prefix}.w1"), d, h),
            b1: self.zeros(format!("{prefix}.b1"), 1, h),
            w2: self.mat(format!("{prefix}.w2"), h, out),
            b2: self.zeros(format!("{prefix}.b2"), 1, out),
        }
    }

    fn linear(&mut self, prefix: &str, d: usize, out: usize) -> Linear {
        Linear { w: self.mat(format!("{prefix}.w"), d, out), b: self.zeros(format!("{prefix}.b"), 1, out) }
    }
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        assert!(cfg.dim.is_multiple_of(cfg.heads), "dim must divide into heads");
        let mut params = ParamStore::new();
        let d = cfg.dim;
        let mut b = Builder { store: &mut params, rng: rng_from(seed, &[0x006d_6f64_656c]) };
        let tok_emb = b.emb("tok_emb".into(), cfg.vocab_size, d, 0.5);
        let pos_emb = b.emb("pos_emb".into(), cfg.max_len, d, 0.1);
        let kind_emb = b.emb("tcmt.kind_emb".into(), 3, d, 0.5);
        let dist_emb = b.emb("tcmt.dist_emb".into(), NUM_DIST_BUCKETS, d, 0.1);
        let heading_emb = b.emb("tcmt.heading_emb".into(), NUM_HEADING_BUCKETS, d, 0.1);
        let time_emb = b.emb("tcmt.time_emb".into(), cfg.max_time + 1, d, 0.1);
        let tcmt = (0..cfg.layers)
            .map(|l| TcmtLayer {
                self_attn: b.attn(&format!("tcmt.l{l}.self"), d),
                hop_bias: b.zeros(format!("tcmt.l{l}.hop_bias"), 1, HOP_BUCKETS * cfg.heads),
                cross: b.attn(&format!("tcmt.l{l}.cross"), d),
                ffn: b.ffn(&format!("tcmt.l{l}.ffn"), d, cfg.ffn_hidden, d),
                txt_self: b.attn(&format!("tcmt.l{l}.txt_self"), d),
                txt_cross: b.attn(&format!("tcmt.l{l}.txt_cross"), d),
                txt_ffn: b.ffn(&format!("tcmt.l{l}.txt_ffn"), d, cfg.ffn_hidden, d),
            })
            .collect();
        let cell_pos_emb = b.emb("gcmt.pos_emb".into(), cfg.grid.num_cells(), d, 0.5);
        let gcmt = (0..cfg.layers)
            .map(|l| GcmtLayer {
                self_attn: b.attn(&format!("gcmt.l{l}.self"), d),
                cross: b.attn(&format!("gcmt.l{l}.cross"), d),
                ffn: b.ffn(&format!("gcmt.l{l}.ffn"), d, cfg.ffn_hidden, d),
            })
            .collect();
        let gf = b.linear("mgaf.gf", 2 * d, d);
        let mf = b.linear("mgaf.mf", 2 * d, d);
        let sub = cfg.grid.upsample_m * cfg.grid.upsample_n;
        let hffn = b.ffn("hffn", d, cfg.hffn_hidden, sub);
        let graph_head = b.linear("head.graph", d, 1);
        let grid_head = b.linear("head.grid", d, 1);
        let gamma_head = b.linear("head.gamma", 2 * d, 1);
        let mlm_head = b.linear("mlm", d, cfg.vocab_size);
        Self {
            cfg,
            params,
            tok_emb,
            pos_emb,
            kind_emb,
            dist_emb,
            heading_emb,
            time_emb,
            tcmt,
            cell_pos_emb,
            gcmt,
            gf,
            mf,
            hffn,
            graph_head,
            grid_head,
            gamma_head,
            mlm_head,
        }
    }

    /// Ids of parameters whose name starts with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<ParamId> {
        self.params.ids().filter(|&i| self.params.name(i).starts_with(prefix)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionEmbedding {
    pub tokens: Vec<u32>,
    /// `L x D`.
    pub vectors: Tensor,
}

/// Per-node inputs of the node embedding network, in node-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeInputs {
    pub ids: Vec<NodeId>,
    pub kinds: Vec<usize>,
    pub dist: Vec<usize>,
    pub heading: Vec<usize>,
    pub time: Vec<usize>,
    /// `N x N` hop buckets.
    pub hops: Vec<usize>,
}

impl NodeInputs {
    pub fn from_graph(graph: &TopoGraph, pose: Pose, max_time: usize) -> Self {
        let ids = graph.node_ids();
        let mut kinds = Vec::with_capacity(ids.len());
        let mut dist = Vec::with_capacity(ids.len());
        let mut heading = Vec::with_capacity(ids.len());
        let mut time = Vec::with_capacity(ids.len());
        for &id in &ids {
            let n = graph.node(id).expect("listed node");
            kinds.push(n.kind.index());
            let c = graph.context(id, pose, max_time);
            dist.push(c.dist_bucket);
            heading.push(c.heading_bucket);
            time.push(c.time_id);
        }
        let hops = graph.hop_buckets(&ids);
        Self { ids, kinds, dist, heading, time, hops }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row_of(&self, id: NodeId) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }
}

pub fn node_feature_matrix(graph: &TopoGraph) -> Tensor {
    let mut data = Vec::with_capacity(graph.len() * graph.dim);
    for n in graph.nodes() {
        data.extend_from_slice(&n.feature);
    }
    Tensor::new(graph.len(), graph.dim, data)
}

pub fn clamp_token(model: &Model, tok: u32) -> usize {
    if (tok as usize) < model.cfg.vocab_size {
        tok as usize
    } else {
        UNK_ID as usize
    }
}

/// Forward pass state: a tape bound to a model, with optional capture of
/// every attention matrix.
pub struct Fwd<'m> {
    pub tape: Tape,
    pub model: &'m Model,
    pub trace: Option<Vec<Tensor>>,
}

impl<'m> Fwd<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self { tape: Tape::new(), model, trace: None }
    }

    pub fn with_trace(model: &'m Model) -> Self {
        Self { tape: Tape::new(), model, trace: Some(Vec::new()) }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(&self.model.params, id)
    }

    pub fn linear(&mut self, x: Var, l: Linear) -> Var {
        let w = self.p(l.w);
        let b = self.p(l.b);
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    pub fn ffn(&mut self, x: Var, f: FfnParams) -> Var {
        let h = self.linear(x, Linear { w: f.w1, b: f.b1 });
        let h = self.tape.gelu(h);
        self.linear(h, Linear { w: f.w2, b: f.b2 })
    }

    /// Multi-head attention from `q_in` rows to `kv_in` rows; `bias` adds a
    /// per-head scalar looked up by bucket index for every (query, key) pair.
    pub fn attention(&mut self, q_in: Var, kv_in: Var, a: AttnParams, bias: Option<(Var, &[usize])>) -> Var {
        let heads = self.model.cfg.heads;
        let d = self.model.cfg.dim;
        let dh = d / heads;
        let (wq, wk, wv) = (self.p(a.wq), self.p(a.wk), self.p(a.wv));
        let q = self.tape.matmul(q_in, wq);
        let k = self.tape.matmul(kv_in, wk);
        let v = self.tape.matmul(kv_in, wv);
        let nq = self.tape.shape(q_in).0;
        let nk = self.tape.shape(kv_in).0;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh);
            let kh = self.tape.slice_cols(k, h * dh, dh);
            let vh = self.tape.slice_cols(v, h * dh, dh);
            let s = self.tape.matmul_nt(qh, kh);
            let mut s = self.tape.scale(s, scale);
            if let Some((table, buckets)) = bias {
                let idx: Vec<usize> = buckets.iter().map(|&b| b * heads + h).collect();
                let bm = self.tape.gather_scalars(table, &idx, nq, nk);
                s = self.tape.add(s, bm);
            }
            let att = self.tape.softmax_rows(s);
            if let Some(tr) = &mut self.trace {
                tr.push(self.tape.value(att).clone());
            }
            outs.push(self.tape.matmul(att, vh));
        }
        let cat = self.tape.concat_cols(&outs);
        self.linear(cat, Linear { w: a.wo, b: a.bo })
    }

    pub fn embed_tokens(&mut self, tokens: &[u32]) -> Var {
        let model = self.model;
        assert!(!tokens.is_empty(), "instruction must have at least one token");
        let l = tokens.len().min(model.cfg.max_len);
        let ids: Vec<usize> = tokens[..l].iter().map(|&t| clamp_token(model, t)).collect();
        let te = self.p(model.tok_emb);
        let pe = self.p(model.pos_emb);
        let t = self.tape.gather_rows(te, &ids);
        let pos: Vec<usize> = (0..l).collect();
        let p = self.tape.gather_rows(pe, &pos);
        self.tape.add(t, p)
    }

    /// Node embedding: features plus kind, distance, heading and recency
    /// embeddings.
    pub fn node_embedding(&mut self, feats: Var, inp: &NodeInputs) -> Var {
        let m = self.model;
        let tables =
            [(m.kind_emb, &inp.kinds), (m.dist_emb, &inp.dist), (m.heading_emb, &inp.heading), (m.time_emb, &inp.time)];
        let mut x = feats;
        for (table, idx) in tables {
            let t = self.p(table);
            let e = self.tape.gather_rows(t, idx);
            x = self.tape.add(x, e);
        }
        x
    }

    /// TCMT layers over embedded nodes and instruction; returns
    /// `(node features, instruction-side features)`.
    pub fn tcmt_layers(&mut self, nodes: Var, text: Var, inp: &NodeInputs) -> (Var, Var) {
        let layers = self.model.tcmt.clone();
        let (mut x, mut t) = (nodes, text);
        for l in layers {
            let table = self.p(l.hop_bias);
            let xn = self.tape.layer_norm(x);
            let a = self.attention(xn, xn, l.self_attn, Some((table, &inp.hops)));
            x = self.tape.add(x, a);
            let xn = self.tape.layer_norm(x);
            let tn = self.tape.layer_norm(t);
            let a = self.attention(xn, tn, l.cross, None);
            x = self.tape.add(x, a);
            let xn = self.tape.layer_norm(x);
            let f = self.ffn(xn, l.ffn);
            let x_next = self.tape.add(x, f);

            let tn = self.tape.layer_norm(t);
            let a = self.attention(tn, tn, l.txt_self, None);
            t = self.tape.add(t, a);
            let tn = self.tape.layer_norm(t);
            let xn = self.tape.layer_norm(x);
            let a = self.attention(tn, xn, l.txt_cross, None);
            t = self.tape.add(t, a);
            let tn = self.tape.layer_norm(t);
            let f = self.ffn(tn, l.txt_ffn);
            t = self.tape.add(t, f);
            x = x_next;
        }
        (x, t)
    }

    /// Cell embedding: cell features plus the learned positional table.
    pub fn cell_embedding(&mut self, cells: Var) -> Var {
        let pe = self.p(self.model.cell_pos_emb);
        self.tape.add(cells, pe)
    }

    pub fn gcmt_layers(&mut self, cells: Var, text: Var) -> Var {
        let layers = self.model.gcmt.clone();
        let mut x = cells;
        for l in layers {
            let xn = self.tape.layer_norm(x);
            let a = self.attention(xn, xn, l.self_attn, None);
            x = self.tape.add(x, a);
            let xn = self.tape.layer_norm(x);
            let tn = self.tape.layer_norm(text);
            let a = self.attention(xn, tn, l.cross, None);
            x = self.tape.add(x, a);
            let xn = self.tape.layer_norm(x);
            let f = self.ffn(xn, l.ffn);
            x = self.tape.add(x, f);
        }
        x
    }
}

/// Token lookup plus positional embedding; ids outside the vocabulary map
/// to the UNK row.
pub fn encode_instruction(model: &Model, tokens: &[u32]) -> InstructionEmbedding {
    let mut f = Fwd::new(model);
    let v = f.embed_tokens(tokens);
    let l = f.tape.shape(v).0;
    InstructionEmbedding { tokens: tokens[..l].to_vec(), vectors: f.tape.value(v).clone() }
}

/// Aligned node features, one row per node in ascending id order, computed
/// from the graph's own node features.
pub fn tcmt(model: &Model, graph: &TopoGraph, pose: Pose, instr: &InstructionEmbedding) -> Tensor {
    let inp = NodeInputs::from_graph(graph, pose, model.cfg.max_time);
    let mut f = Fwd::new(model);
    let feats = f.tape.constant(node_feature_matrix(graph));
    let ne = f.node_embedding(feats, &inp);
    let text = f.tape.constant(instr.vectors.clone());
    let (x, _) = f.tcmt_layers(ne, text, &inp);
    f.tape.value(x).clone()
}

/// Encoded cells, `U*V x D` in row-major cell order.
pub fn gcmt(model: &Model, grid: &GridMap, instr: &InstructionEmbedding) -> Tensor {
    assert_eq!(grid.spec, model.cfg.grid, "grid spec does not match the model");
    let mut f = Fwd::new(model);
    let cells = f.tape.constant(Tensor::new(grid.spec.num_cells(), grid.dim, grid.features.clone()));
    let ce = f.cell_embedding(cells);
    let text = f.tape.constant(instr.vectors.clone());
    let x = f.gcmt_layers(ce, text);
    f.tape.value(x).clone()
}

/// Zeroes every attention and feed-forward weight so each block reduces to
/// its residual path.
pub fn zero_blocks(model: &mut Model) {
    let ids: Vec<ParamId> = model
        .params
        .ids()
        .filter(|&i| {
            let n = model.params.name(i);
            (n.starts_with("tcmt.l") || n.starts_with("gcmt.l")) && !n.ends_with("hop_bias")
        })
        .collect();
    for id in ids {
        model.params.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
    }
}

pub fn is_visited_kind(k: usize) -> bool {
    k == NodeKind::Visited.index()
}

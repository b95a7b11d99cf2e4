//! The base recommendation model: embedding projection, relation-aware
//! attention over collaborative and knowledge neighbours, a fusion gate,
//! bi-interaction aggregation and inner-product prediction.
//!
//! Everything is batched over the whole graph: one propagation layer is a
//! fixed handful of graph nodes regardless of the number of edges.

mod params;

pub use params::{LayerNodes, ModelConfig, ModelNodes, ParamBundle, Partition};

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::ckg::{CollabKG, EntityId, Triple};
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor, SKIP};

/// Index arrays for running attention over a fixed edge set.
///
/// Projections `W_r x` are computed once per distinct (node, relation) pair
/// and then gathered per edge.
#[derive(Clone, Debug)]
pub struct EdgeBatch {
    n_nodes: usize,
    n_edges: usize,
    /// `(relation, participating nodes)`; rows are stacked in this order.
    groups: Vec<(usize, Arc<[usize]>)>,
    row_relation: Arc<[usize]>,
    head_row: Arc<[usize]>,
    tail_row: Arc<[usize]>,
    tails: Arc<[usize]>,
    softmax_group: Arc<[usize]>,
    seg_collab: Arc<[usize]>,
    seg_know: Arc<[usize]>,
}

impl EdgeBatch {
    pub fn new(edges: &[Triple], n_nodes: usize) -> Self {
        let mut by_rel: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for t in edges {
            let v = by_rel.entry(t.relation.0).or_default();
            v.push(t.head.0);
            v.push(t.tail.0);
        }
        let mut groups: Vec<(usize, Arc<[usize]>)> = Vec::with_capacity(by_rel.len());
        let mut offsets = BTreeMap::new();
        let mut row_relation = Vec::new();
        for (r, mut nodes) in by_rel {
            nodes.sort_unstable();
            nodes.dedup();
            offsets.insert(r, row_relation.len());
            row_relation.extend(std::iter::repeat_n(r, nodes.len()));
            groups.push((r, Arc::from(nodes)));
        }
        let row_of = |r: usize, node: usize| -> usize {
            let (_, nodes) = groups.iter().find(|(gr, _)| *gr == r).unwrap();
            offsets[&r] + nodes.binary_search(&node).unwrap()
        };
        let mut head_row = Vec::with_capacity(edges.len());
        let mut tail_row = Vec::with_capacity(edges.len());
        let mut softmax_group = Vec::with_capacity(edges.len());
        let mut seg_collab = Vec::with_capacity(edges.len());
        let mut seg_know = Vec::with_capacity(edges.len());
        for t in edges {
            let (h, r) = (t.head.0, t.relation.0);
            head_row.push(row_of(r, h));
            tail_row.push(row_of(r, t.tail.0));
            let collab = CollabKG::is_collaborative(t);
            softmax_group.push(2 * h + usize::from(!collab));
            seg_collab.push(if collab { h } else { SKIP });
            seg_know.push(if collab { SKIP } else { h });
        }
        Self {
            n_nodes,
            n_edges: edges.len(),
            groups,
            row_relation: row_relation.into(),
            head_row: head_row.into(),
            tail_row: tail_row.into(),
            tails: edges.iter().map(|t| t.tail.0).collect(),
            softmax_group: softmax_group.into(),
            seg_collab: seg_collab.into(),
            seg_know: seg_know.into(),
        }
    }

    /// Every triple of `ckg`.
    pub fn for_graph(ckg: &CollabKG) -> Self {
        Self::new(ckg.triples(), ckg.n_total_entities())
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }
}

/// `W_e c + b` for every row of `rows` (`[k, d_p]` → `[k, d_e]`).
pub fn embed(g: &mut Graph, nodes: &ModelNodes, rows: NodeId) -> NodeId {
    let p = g.matmul_t(rows, nodes.w_e());
    g.add_row(p, nodes.b())
}

/// Attention summaries of each node's collaborative and knowledge neighbours.
pub struct Attention {
    /// Normalised weights per edge; `None` for an empty edge set.
    pub alpha: Option<NodeId>,
    /// `[n_nodes, d]`, zero rows for nodes without collaborative neighbours.
    pub collab: NodeId,
    /// `[n_nodes, d]`, zero rows for nodes without knowledge neighbours.
    pub know: NodeId,
}

/// `α′(h,r,t) = (W_r e_t)ᵀ tanh(W_r e_h + e_r)`, normalised within each
/// (head, branch) group, and the resulting weighted sums of tail features.
///
/// `x` is `[n_nodes, d]`, `w_r` is `[n_relations, d_e, d]` and `rel` is
/// `[n_relations, d_e]`.
pub fn attend(g: &mut Graph, x: NodeId, w_r: NodeId, rel: NodeId, batch: &EdgeBatch, d: usize) -> Attention {
    if batch.n_edges == 0 {
        let z = g.constant(Tensor::zeros(&[batch.n_nodes, d]));
        return Attention {
            alpha: None,
            collab: z,
            know: z,
        };
    }
    let parts: Vec<NodeId> = batch
        .groups
        .iter()
        .map(|(r, nodes)| {
            let w = g.select(w_r, *r);
            let xs = g.gather(x, nodes.clone());
            g.matmul_t(xs, w)
        })
        .collect();
    let proj = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0) };
    let er = g.gather(rel, batch.row_relation.clone());
    let shifted = g.add(proj, er);
    let query = g.tanh(shifted);
    let qh = g.gather(query, batch.head_row.clone());
    let pt = g.gather(proj, batch.tail_row.clone());
    let logits = g.row_dot(pt, qh);
    let alpha = g.softmax(logits, batch.softmax_group.clone(), 2 * batch.n_nodes);
    let xt = g.gather(x, batch.tails.clone());
    let weighted = g.scale_rows(xt, alpha);
    let collab = g.segment_sum(weighted, batch.seg_collab.clone(), batch.n_nodes);
    let know = g.segment_sum(weighted, batch.seg_know.clone(), batch.n_nodes);
    Attention {
        alpha: Some(alpha),
        collab,
        know,
    }
}

/// `g = σ(W_c e_c + W_k e_k)`, output `g ⊙ e_c + (1 − g) ⊙ e_k`, row-wise.
pub fn fuse_gate(g: &mut Graph, w_c: NodeId, w_k: NodeId, e_c: NodeId, e_k: NodeId) -> NodeId {
    let gate = gate(g, w_c, w_k, e_c, e_k);
    let diff = g.sub(e_c, e_k);
    let moved = g.mul(gate, diff);
    g.add(e_k, moved)
}

/// The gate values alone.
pub fn gate(g: &mut Graph, w_c: NodeId, w_k: NodeId, e_c: NodeId, e_k: NodeId) -> NodeId {
    let a = g.matmul_t(e_c, w_c);
    let b = g.matmul_t(e_k, w_k);
    let s = g.add(a, b);
    g.sigmoid(s)
}

/// `LeakyReLU(W₁(e + ê)) + LeakyReLU(W₂(e ⊙ ê))`, row-wise.
pub fn bi_interaction(g: &mut Graph, x: NodeId, fused: NodeId, w1: NodeId, w2: NodeId, slope: f64) -> NodeId {
    let sum = g.add(x, fused);
    let prod = g.mul(x, fused);
    let a = g.matmul_t(sum, w1);
    let b = g.matmul_t(prod, w2);
    let a = g.leaky_relu(a, slope);
    let b = g.leaky_relu(b, slope);
    g.add(a, b)
}

/// Entity features of every layer, `[e⁰, e¹, …, eᴸ]`, each `[n_nodes, d_l]`.
pub fn propagate(g: &mut Graph, nodes: &ModelNodes, cfg: &ModelConfig, batch: &EdgeBatch) -> Vec<NodeId> {
    let x0 = embed(g, nodes, nodes.base_entity());
    let rel = embed(g, nodes, nodes.base_relation());
    let mut layers = vec![x0];
    for l in 0..nodes.n_layers() {
        let ln = nodes.layer(l);
        let x = *layers.last().unwrap();
        let att = attend(g, x, ln.w_r, rel, batch, cfg.d_in(l));
        let fused = fuse_gate(g, ln.w_c, ln.w_k, att.collab, att.know);
        layers.push(bi_interaction(g, x, fused, ln.w1, ln.w2, cfg.slope));
    }
    layers
}

/// `e★`: concatenation of layers `1..=L`.
pub fn representation(g: &mut Graph, layers: &[NodeId]) -> NodeId {
    if layers.len() == 2 {
        layers[1]
    } else {
        g.concat(&layers[1..], 1)
    }
}

/// `⟨e★_a, e★_b⟩` for each pair.
pub fn pair_scores(g: &mut Graph, repr: NodeId, pairs: &[(EntityId, EntityId)]) -> NodeId {
    let a = g.gather(repr, pairs.iter().map(|p| p.0 .0).collect());
    let b = g.gather(repr, pairs.iter().map(|p| p.1 .0).collect());
    g.row_dot(a, b)
}

/// A BPR triple in entity ids: user, observed item, sampled item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BprTriple {
    pub user: EntityId,
    pub pos: EntityId,
    pub neg: EntityId,
}

/// `Σ −ln σ(score(u,i) − score(u,j))`.
pub fn bpr_loss(g: &mut Graph, repr: NodeId, triples: &[BprTriple]) -> NodeId {
    assert!(!triples.is_empty(), "bpr_loss needs at least one triple");
    let u = g.gather(repr, triples.iter().map(|t| t.user.0).collect());
    let i = g.gather(repr, triples.iter().map(|t| t.pos.0).collect());
    let j = g.gather(repr, triples.iter().map(|t| t.neg.0).collect());
    let si = g.row_dot(u, i);
    let sj = g.row_dot(u, j);
    let d = g.sub(si, sj);
    let ls = g.log_sigmoid(d);
    let s = g.sum(ls);
    g.neg(s)
}

/// Evaluated per-layer features of every entity.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerEmbeddings {
    /// `e⁰ … eᴸ`.
    pub layers: Vec<Tensor>,
    /// `e★`, `[n_nodes, Σ d_l]`.
    pub repr: Tensor,
}

impl LayerEmbeddings {
    pub fn compute(params: &ParamBundle, batch: &EdgeBatch) -> Result<Self> {
        if batch.n_nodes != params.cfg.n_entities {
            return Err(Error::Config(format!(
                "graph has {} entities, parameters cover {}",
                batch.n_nodes, params.cfg.n_entities
            )));
        }
        let mut g = Graph::new();
        let nodes = params.bind(&mut g, |_| false);
        let layers = propagate(&mut g, &nodes, &params.cfg, batch);
        let repr = representation(&mut g, &layers);
        g.forward(repr)?;
        Ok(Self {
            layers: layers.iter().map(|&l| g.value(l).unwrap().clone()).collect(),
            repr: g.value(repr).unwrap().clone(),
        })
    }

    pub fn predict(&self, a: EntityId, b: EntityId) -> f64 {
        self.repr.row(a.0).iter().zip(self.repr.row(b.0)).map(|(x, y)| x * y).sum()
    }
}

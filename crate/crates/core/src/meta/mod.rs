//! Per-user tasks, the collaborative-aware local learner (γ only), the
//! knowledge-aware global learner (φ, ω via the KG loss, γ via query
//! gradients) and adaptation of a trained model to a new scenario.
//!
//! Meta-gradients are first order: the query gradient is taken at the
//! adapted γᵤ and applied to γ, so the local step is never differentiated.

mod adam;
mod trainer;

pub use adam::Adam;
pub use trainer::{train_base_model, MetaTrainer, StepLog};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ckg::{CollabKG, ItemId, UserId};
use crate::error::{Error, Result};
use crate::kge::{kg_loss, sample_quads, KgeNodes, Quad};
use crate::numcore::{Graph, NodeId, Tensor};
use crate::propagation::{
    bpr_loss, embed, propagate, representation, BprTriple, EdgeBatch, ModelNodes, ParamBundle, Partition,
};

/// `(user, observed item, sampled item)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CfTriple {
    pub user: UserId,
    pub pos: ItemId,
    pub neg: ItemId,
}

/// One user's support and query sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub user: UserId,
    pub support: Vec<CfTriple>,
    pub query: Vec<CfTriple>,
    /// Items never drawn as negatives for this user, sorted.
    pub known: Vec<ItemId>,
}

impl Task {
    pub fn support_items(&self) -> Vec<ItemId> {
        self.support.iter().map(|t| t.pos).collect()
    }

    pub fn query_items(&self) -> Vec<ItemId> {
        self.query.iter().map(|t| t.pos).collect()
    }

    /// The support positives with freshly drawn negatives.
    pub fn resample_support<R: Rng + ?Sized>(&self, sampler: &NegativeSampler, rng: &mut R) -> Result<Vec<CfTriple>> {
        self.support
            .iter()
            .map(|t| {
                Ok(CfTriple {
                    neg: sampler.draw(self.user, &self.known, rng)?,
                    ..*t
                })
            })
            .collect()
    }
}

/// Uniform negative items from a fixed pool.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    pool: Vec<ItemId>,
}

impl NegativeSampler {
    pub fn new(mut pool: Vec<ItemId>) -> Self {
        pool.sort_unstable();
        pool.dedup();
        Self { pool }
    }

    pub fn all_items(n_items: usize) -> Self {
        Self::new((0..n_items).map(ItemId).collect())
    }

    pub fn pool(&self) -> &[ItemId] {
        &self.pool
    }

    /// One item of the pool outside `blocked` (sorted).
    pub fn draw<R: Rng + ?Sized>(&self, user: UserId, blocked: &[ItemId], rng: &mut R) -> Result<ItemId> {
        let n = self.pool.len();
        if n > 0 {
            for _ in 0..64 {
                let i = self.pool[rng.random_range(0..n)];
                if blocked.binary_search(&i).is_err() {
                    return Ok(i);
                }
            }
        }
        let free: Vec<ItemId> = self
            .pool
            .iter()
            .copied()
            .filter(|i| blocked.binary_search(i).is_err())
            .collect();
        if free.is_empty() {
            return Err(Error::Exhausted(format!("no negative item left for user {}", user.0)));
        }
        Ok(free[rng.random_range(0..free.len())])
    }
}

/// Splits `positives` into a uniformly drawn query set of `query_size` items
/// and a support set holding the rest, one negative per positive.
pub fn build_task<R: Rng + ?Sized>(
    user: UserId,
    positives: &[ItemId],
    known: &[ItemId],
    query_size: usize,
    sampler: &NegativeSampler,
    rng: &mut R,
) -> Result<Task> {
    let mut positives = positives.to_vec();
    positives.sort_unstable();
    positives.dedup();
    if positives.len() <= query_size {
        return Err(Error::InsufficientInteractions {
            user: user.0,
            have: positives.len(),
            need: query_size,
        });
    }
    let mut known: Vec<ItemId> = known.iter().chain(&positives).copied().collect();
    known.sort_unstable();
    known.dedup();
    let mut in_query = vec![false; positives.len()];
    for k in index::sample(rng, positives.len(), query_size) {
        in_query[k] = true;
    }
    let mut support = Vec::new();
    let mut query = Vec::new();
    for (k, &pos) in positives.iter().enumerate() {
        let t = CfTriple {
            user,
            pos,
            neg: sampler.draw(user, &known, rng)?,
        };
        if in_query[k] {
            query.push(t);
        } else {
            support.push(t);
        }
    }
    Ok(Task {
        user,
        support,
        query,
        known,
    })
}

/// One task per user from the user's positives in `ckg`.
pub fn make_tasks<R: Rng + ?Sized>(
    ckg: &CollabKG,
    users: &[UserId],
    query_size: usize,
    rng: &mut R,
) -> Result<Vec<Task>> {
    let sampler = NegativeSampler::all_items(ckg.n_items());
    users
        .iter()
        .map(|&u| {
            let pos = ckg.positives(u);
            build_task(u, pos, pos, query_size, &sampler, rng)
        })
        .collect()
}

pub fn to_bpr(ckg: &CollabKG, triples: &[CfTriple]) -> Vec<BprTriple> {
    triples
        .iter()
        .map(|t| BprTriple {
            user: ckg.user_entity(t.user),
            pos: ckg.item_entity(t.pos),
            neg: ckg.item_entity(t.neg),
        })
        .collect()
}

/// How a trained model is adapted to a new scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// Gradient steps on every partition over all support sets plus the KG loss.
    FineTune,
    /// A per-user local update of γ on that user's support set.
    LocalGamma,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    /// Local (support-set) rate `v`.
    pub local_lr: f64,
    /// Global rate `k`.
    pub global_lr: f64,
    /// Local updates per task, `m`.
    pub local_steps: usize,
    /// Tasks per global step.
    pub batch_size: usize,
    /// Global steps.
    pub steps: usize,
    /// Quads per KG loss evaluation.
    pub kg_batch: usize,
    pub query_size: usize,
    pub adapt_steps: usize,
    /// Rate of the fine-tuning steps on a new scenario.
    pub adapt_lr: f64,
    pub adapt_mode: AdaptMode,
    /// Off: γᵤ = γ (no collaborative-aware local learner).
    pub local_update: bool,
    /// Off: φ and ω are not trained by the KG loss.
    pub kg_update: bool,
    /// The pretrained rows move with φ under the KG loss (and in the
    /// baseline). Off keeps them frozen.
    pub train_base: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            local_lr: 0.01,
            global_lr: 1e-4,
            local_steps: 1,
            batch_size: 32,
            steps: 100,
            kg_batch: 2048,
            query_size: 10,
            adapt_steps: 1,
            adapt_lr: 0.01,
            adapt_mode: AdaptMode::FineTune,
            local_update: true,
            kg_update: true,
            train_base: true,
        }
    }
}

/// The graph a set of tasks is trained or adapted on.
#[derive(Clone, Copy)]
pub struct TaskContext<'a> {
    pub ckg: &'a CollabKG,
    pub batch: &'a EdgeBatch,
    pub sampler: &'a NegativeSampler,
}

/// Propagation over the whole graph with γ as the only trainable leaves;
/// losses of many tasks share one forward pass.
pub struct GammaGraph {
    g: Graph,
    gamma: Vec<NodeId>,
    repr: NodeId,
}

impl GammaGraph {
    pub fn new(params: &ParamBundle, batch: &EdgeBatch) -> Self {
        let mut g = Graph::new();
        let nodes = params.bind(&mut g, |p| p == Partition::Gamma);
        let layers = propagate(&mut g, &nodes, &params.cfg, batch);
        let repr = representation(&mut g, &layers);
        Self {
            gamma: nodes.gamma().to_vec(),
            g,
            repr,
        }
    }

    pub fn set_gamma(&mut self, gamma: &[Tensor]) -> Result<()> {
        for (&id, t) in self.gamma.iter().zip(gamma) {
            self.g.set_leaf(id, t.clone())?;
        }
        Ok(())
    }

    pub fn loss(&mut self, triples: &[BprTriple]) -> Result<f64> {
        let l = bpr_loss(&mut self.g, self.repr, triples);
        Ok(self.g.forward(l)?.item())
    }

    /// Loss and its gradient with respect to γ, in canonical order.
    pub fn loss_grad(&mut self, triples: &[BprTriple]) -> Result<(f64, Vec<Tensor>)> {
        let l = bpr_loss(&mut self.g, self.repr, triples);
        let value = self.g.forward(l)?.item();
        let mut grads = self.g.backward(l)?;
        let out: Vec<Tensor> = self.gamma.iter().map(|&id| grads.take(id).expect("γ leaf")).collect();
        if !out.iter().all(Tensor::is_finite) {
            return Err(Error::Divergence("non-finite γ gradient".into()));
        }
        Ok((value, out))
    }
}

pub(crate) fn flat_dot(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn sgd(gamma: &mut [Tensor], grad: &[Tensor], lr: f64) {
    for (p, g) in gamma.iter_mut().zip(grad) {
        p.axpy(-lr, g);
    }
}

/// Result of the local learner on one task.
#[derive(Clone, Debug)]
pub struct LocalResult {
    pub gamma: Vec<Tensor>,
    /// Support loss and its γ-gradient at the starting point.
    pub support_loss: f64,
    pub support_grad: Vec<Tensor>,
}

/// `m` SGD steps on γ from the graph's current γ (`start`). The first step
/// uses the task's own negatives, later steps draw fresh ones.
pub fn local_steps<R: Rng + ?Sized>(
    gg: &mut GammaGraph,
    start: &[Tensor],
    ctx: &TaskContext,
    task: &Task,
    lr: f64,
    m: usize,
    rng: &mut R,
) -> Result<LocalResult> {
    if task.support.is_empty() {
        return Err(Error::Config(format!("task of user {} has an empty support set", task.user.0)));
    }
    let mut gamma = start.to_vec();
    let mut first = None;
    for s in 0..m.max(1) {
        let triples = if s == 0 {
            to_bpr(ctx.ckg, &task.support)
        } else {
            gg.set_gamma(&gamma)?;
            to_bpr(ctx.ckg, &task.resample_support(ctx.sampler, rng)?)
        };
        let (loss, grad) = gg.loss_grad(&triples)?;
        if m > 0 {
            sgd(&mut gamma, &grad, lr);
        }
        if first.is_none() {
            first = Some((loss, grad));
        }
    }
    if !gamma.iter().all(Tensor::is_finite) {
        return Err(Error::Divergence(format!("local update of user {} left the finite range", task.user.0)));
    }
    let (support_loss, support_grad) = first.unwrap();
    Ok(LocalResult {
        gamma,
        support_loss,
        support_grad,
    })
}

/// Task-adapted `γᵤ = γ − v ∂L_S/∂γ` (repeated `m` times); φ, ω and the base
/// tables are untouched.
pub fn local_update<R: Rng + ?Sized>(
    params: &ParamBundle,
    ctx: &TaskContext,
    task: &Task,
    lr: f64,
    m: usize,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    let mut gg = GammaGraph::new(params, ctx.batch);
    Ok(local_steps(&mut gg, &params.gamma(), ctx, task, lr, m, rng)?.gamma)
}

/// Nodes of the TransR loss inside a propagation graph: layer-0 entity and
/// relation embeddings with the first layer's `W_r` as the projection.
pub fn kg_nodes(g: &mut Graph, nodes: &ModelNodes) -> KgeNodes {
    KgeNodes {
        entity: embed(g, nodes, nodes.base_entity()),
        relation: embed(g, nodes, nodes.base_relation()),
        projection: nodes.layer(0).w_r,
    }
}

/// Adam slots of the parameters in `p`, in canonical order.
fn slots(params: &ParamBundle, p: Partition) -> Vec<usize> {
    params
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.1 == p)
        .map(|(k, _)| k)
        .collect()
}

/// Knowledge-aware step: φ and ω (and the base rows when `with_base`) move
/// along the KG loss gradient, γ never changes. Returns the loss.
pub fn kg_step(params: &mut ParamBundle, opt: &mut Adam, quads: &[Quad], with_base: bool) -> Result<f64> {
    let moving: &[Partition] = if with_base {
        &[Partition::Base, Partition::Phi, Partition::Omega]
    } else {
        &[Partition::Phi, Partition::Omega]
    };
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, |p| moving.contains(&p));
    let kn = kg_nodes(&mut g, &nodes);
    let loss = kg_loss(&mut g, kn, quads);
    let value = g.forward(loss)?.item();
    let mut grads = g.backward(loss)?;
    let mut owned: Vec<(usize, Tensor)> = Vec::new();
    for &p in moving {
        for k in slots(params, p) {
            owned.push((k, grads.take(nodes.ids[k]).expect("trainable leaf")));
        }
    }
    let mut tensors = params.tensors_mut();
    for (k, grad) in owned {
        if !grad.is_finite() {
            return Err(Error::Divergence("non-finite KG gradient".into()));
        }
        opt.step(k, tensors[k].1, &grad);
    }
    Ok(value)
}

/// γ step along `Σᵤ ∂L_Q/∂γᵤ`.
pub fn gamma_step(params: &mut ParamBundle, opt: &mut Adam, query_grads: &[Vec<Tensor>]) -> Result<()> {
    if query_grads.is_empty() {
        return Ok(());
    }
    let mut total: Vec<Tensor> = query_grads[0].clone();
    for g in &query_grads[1..] {
        for (t, x) in total.iter_mut().zip(g) {
            t.axpy(1.0, x);
        }
    }
    if !total.iter().all(Tensor::is_finite) {
        return Err(Error::Divergence("non-finite query gradient".into()));
    }
    let ks = slots(params, Partition::Gamma);
    let mut tensors = params.tensors_mut();
    for (k, g) in ks.into_iter().zip(&total) {
        opt.step(k, tensors[k].1, g);
    }
    Ok(())
}

/// The global update: a KG step on φ and ω (when `quads` is given) followed
/// by the γ step on the summed query gradients. Returns the KG loss.
pub fn global_update(
    params: &mut ParamBundle,
    opt: &mut Adam,
    query_grads: &[Vec<Tensor>],
    quads: Option<&[Quad]>,
    with_base: bool,
) -> Result<Option<f64>> {
    let kg = match quads {
        Some(q) if !q.is_empty() => Some(kg_step(params, opt, q, with_base)?),
        _ => None,
    };
    gamma_step(params, opt, query_grads)?;
    Ok(kg)
}

pub fn new_optimizer(params: &ParamBundle, lr: f64) -> Adam {
    Adam::new(lr, params.entries().into_iter().map(|e| e.2))
}

/// A model adapted to a scenario. In [`AdaptMode::LocalGamma`] each task's
/// user carries its own γ.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub params: ParamBundle,
    pub user_gamma: Vec<(UserId, Vec<Tensor>)>,
}

/// Adapts `params` to the tasks of a new scenario using support sets only.
pub fn adapt<R: Rng + ?Sized>(
    params: &ParamBundle,
    ctx: &TaskContext,
    tasks: &[Task],
    cfg: &MetaConfig,
    rng: &mut R,
) -> Result<Adapted> {
    let mut out = Adapted {
        params: params.clone(),
        user_gamma: Vec::new(),
    };
    if cfg.adapt_steps == 0 || tasks.is_empty() {
        return Ok(out);
    }
    match cfg.adapt_mode {
        AdaptMode::FineTune => {
            for step in 0..cfg.adapt_steps {
                let quads = if cfg.kg_update && cfg.kg_batch > 0 {
                    Some(sample_quads(ctx.ckg, cfg.kg_batch, rng)?)
                } else {
                    None
                };
                let mut triples = Vec::new();
                for t in tasks {
                    if step == 0 {
                        triples.extend(to_bpr(ctx.ckg, &t.support));
                    } else {
                        triples.extend(to_bpr(ctx.ckg, &t.resample_support(ctx.sampler, rng)?));
                    }
                }
                // the objective is averaged over tasks
                let lr = cfg.adapt_lr / tasks.len() as f64;
                finetune_step(&mut out.params, ctx.batch, &triples, quads.as_deref(), lr)?;
            }
        }
        AdaptMode::LocalGamma => {
            let mut gg = GammaGraph::new(params, ctx.batch);
            let start = params.gamma();
            for t in tasks {
                gg.set_gamma(&start)?;
                let r = local_steps(&mut gg, &start, ctx, t, cfg.local_lr, cfg.adapt_steps, rng)?;
                out.user_gamma.push((t.user, r.gamma));
            }
        }
    }
    Ok(out)
}

/// One SGD step on every partition for `Σ BPR(triples) + L_KG(quads)`.
pub fn finetune_step(
    params: &mut ParamBundle,
    batch: &EdgeBatch,
    triples: &[BprTriple],
    quads: Option<&[Quad]>,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = params.bind(&mut g, |_| true);
    let layers = propagate(&mut g, &nodes, &params.cfg, batch);
    let repr = representation(&mut g, &layers);
    let mut loss = bpr_loss(&mut g, repr, triples);
    if let Some(q) = quads {
        let kn = kg_nodes(&mut g, &nodes);
        let kl = kg_loss(&mut g, kn, q);
        loss = g.add(loss, kl);
    }
    let value = g.forward(loss)?.item();
    let mut grads = g.backward(loss)?;
    for ((_, t), id) in params.tensors_mut().into_iter().zip(&nodes.ids) {
        let grad = grads.take(*id).expect("trainable leaf");
        t.axpy(-lr, &grad);
    }
    if !params.is_finite() {
        return Err(Error::Divergence("adaptation left the finite range".into()));
    }
    Ok(value)
}

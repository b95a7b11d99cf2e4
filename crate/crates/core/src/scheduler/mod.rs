//! Adaptive task scheduler: a bidirectional LSTM reads each candidate task's
//! recent (query loss, gradient similarity) history and a linear head turns
//! the final states into a score. Scores are softmaxed over the candidates.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::Adam;
use crate::numcore::{Graph, NodeId, Tensor};

pub const HIDDEN: usize = 10;
pub const WINDOW: usize = 5;
/// z-scored loss, z-scored similarity, presence flag.
const INPUT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFeatures {
    pub query_loss: f64,
    /// `∇L_S(γ) · ∇L_Q(γ)`.
    pub similarity: f64,
}

/// How δ is trained from the post-update query losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchedulerObjective {
    /// Minimise `Σ_b p_b (L_b − mean L)` over the sampled batch.
    Surrogate,
    /// Minimise `Σ_b (L_b − mean L) ln p_b` (score function, reward −L).
    ScoreFunction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerConfig {
    pub lr: f64,
    pub objective: SchedulerObjective,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            objective: SchedulerObjective::Surrogate,
        }
    }
}

/// Per-step diagnostics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerRecord {
    pub step: usize,
    pub task: usize,
    pub p: f64,
    pub query_loss: f64,
}

/// δ and the per-task histories.
#[derive(Clone, Debug)]
pub struct Scheduler {
    pub cfg: SchedulerConfig,
    /// Forward LSTM gates (i, f, o, g) weights and biases, then the backward
    /// LSTM in the same layout, then the head weight `[2H]`. A head bias
    /// would cancel in the softmax and is omitted.
    pub delta: Vec<Tensor>,
    histories: BTreeMap<usize, VecDeque<TaskFeatures>>,
    opt: Adam,
}

struct Encoded {
    g: Graph,
    leaves: Vec<NodeId>,
    probs: NodeId,
}

impl Scheduler {
    pub fn new<R: Rng + ?Sized>(cfg: SchedulerConfig, rng: &mut R) -> Self {
        let mut delta = Vec::new();
        for _ in 0..2 {
            for _ in 0..4 {
                delta.push(Tensor::xavier(&[HIDDEN, INPUT + HIDDEN], rng));
            }
            for _ in 0..4 {
                delta.push(Tensor::zeros(&[HIDDEN]));
            }
        }
        delta.push(Tensor::xavier(&[1, 2 * HIDDEN], rng).reshape(&[2 * HIDDEN]).expect("head shape"));
        let opt = Adam::new(cfg.lr, &delta);
        Self {
            cfg,
            delta,
            histories: BTreeMap::new(),
            opt,
        }
    }

    pub fn history(&self, task: usize) -> &[TaskFeatures] {
        self.histories.get(&task).map(|h| h.as_slices().0).unwrap_or(&[])
    }

    /// Appends fresh features, dropping the oldest beyond the window.
    pub fn record(&mut self, task: usize, f: TaskFeatures) -> Result<()> {
        if !(f.query_loss.is_finite() && f.similarity.is_finite()) {
            return Err(Error::NonFiniteFeature(task));
        }
        let h = self.histories.entry(task).or_default();
        h.push_back(f);
        while h.len() > WINDOW {
            h.pop_front();
        }
        h.make_contiguous();
        Ok(())
    }

    /// Input sequences `[WINDOW]` of `[n, INPUT]`, oldest first and padded
    /// with zeros at the front. Losses and similarities are z-scored over
    /// every recorded entry of the candidates.
    fn inputs(&self, candidates: &[usize]) -> Result<Vec<Tensor>> {
        let mut stats = [(0.0, 0.0); 2];
        let mut count = 0.0;
        for &c in candidates {
            for f in self.history(c) {
                if !(f.query_loss.is_finite() && f.similarity.is_finite()) {
                    return Err(Error::NonFiniteFeature(c));
                }
                for (s, v) in stats.iter_mut().zip([f.query_loss, f.similarity]) {
                    s.0 += v;
                    s.1 += v * v;
                }
                count += 1.0;
            }
        }
        let norm: Vec<(f64, f64)> = stats
            .iter()
            .map(|&(s, ss)| {
                if count == 0.0 {
                    return (0.0, 1.0);
                }
                let mean = s / count;
                let var = (ss / count - mean * mean).max(0.0);
                let sd = var.sqrt();
                (mean, if sd > 1e-12 { sd } else { 1.0 })
            })
            .collect();
        let n = candidates.len();
        let mut steps = vec![Tensor::zeros(&[n, INPUT]); WINDOW];
        for (row, &c) in candidates.iter().enumerate() {
            let h = self.history(c);
            let pad = WINDOW - h.len();
            for (k, f) in h.iter().enumerate() {
                let x = steps[pad + k].row_mut(row);
                x[0] = (f.query_loss - norm[0].0) / norm[0].1;
                x[1] = (f.similarity - norm[1].0) / norm[1].1;
                x[2] = 1.0;
            }
        }
        Ok(steps)
    }

    fn encode(&self, candidates: &[usize], trainable: bool) -> Result<Encoded> {
        if candidates.is_empty() {
            return Err(Error::Config("scheduler needs at least one candidate".into()));
        }
        let inputs = self.inputs(candidates)?;
        let n = candidates.len();
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = self
            .delta
            .iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let xs: Vec<NodeId> = inputs.into_iter().map(|t| g.constant(t)).collect();
        let zero = g.constant(Tensor::zeros(&[n, HIDDEN]));
        let run = |g: &mut Graph, p: &[NodeId], order: &mut dyn Iterator<Item = usize>| {
            let (mut h, mut c) = (zero, zero);
            for t in order {
                let z = g.concat(&[xs[t], h], 1);
                let gate = |g: &mut Graph, k: usize| {
                    let a = g.matmul_t(z, p[k]);
                    g.add_row(a, p[4 + k])
                };
                let (i, f, o, u) = (gate(g, 0), gate(g, 1), gate(g, 2), gate(g, 3));
                let (i, f, o, u) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o), g.tanh(u));
                let keep = g.mul(f, c);
                let write = g.mul(i, u);
                c = g.add(keep, write);
                let tc = g.tanh(c);
                h = g.mul(o, tc);
            }
            h
        };
        let hf = run(&mut g, &leaves[0..8], &mut (0..WINDOW));
        let hb = run(&mut g, &leaves[8..16], &mut (0..WINDOW).rev());
        let both = g.concat(&[hf, hb], 1);
        let s = g.matmul(both, leaves[16]);
        let probs = g.softmax(s, Arc::from(vec![0; n]), 1);
        Ok(Encoded { g, leaves, probs })
    }

    /// Sampling probabilities over `candidates`.
    pub fn score(&self, candidates: &[usize]) -> Result<Vec<f64>> {
        let mut e = self.encode(candidates, false)?;
        Ok(e.g.forward(e.probs)?.data().to_vec())
    }

    /// One δ step on the sampled batch's post-update query losses, then the
    /// batch's fresh features are appended to the histories.
    pub fn update(
        &mut self,
        candidates: &[usize],
        sampled: &[usize],
        features: &[TaskFeatures],
        losses_after: &[f64],
    ) -> Result<()> {
        assert_eq!(sampled.len(), losses_after.len(), "one loss per sampled task");
        assert_eq!(sampled.len(), features.len(), "one feature per sampled task");
        for (&k, l) in sampled.iter().zip(losses_after) {
            if !l.is_finite() {
                return Err(Error::NonFiniteFeature(candidates[k]));
            }
        }
        if !sampled.is_empty() {
            let mean = losses_after.iter().sum::<f64>() / losses_after.len() as f64;
            let centred: Vec<f64> = losses_after.iter().map(|l| l - mean).collect();
            let mut e = self.encode(candidates, true)?;
            let picked = e.g.gather(e.probs, sampled.iter().copied().collect());
            let picked = match self.cfg.objective {
                SchedulerObjective::Surrogate => picked,
                SchedulerObjective::ScoreFunction => e.g.log(picked),
            };
            let w = e.g.constant(Tensor::vector(centred));
            let obj = e.g.dot(picked, w);
            e.g.forward(obj)?;
            let grads = e.g.backward(obj)?;
            let gs: Vec<Tensor> = e.leaves.iter().map(|&id| grads.get(id).clone()).collect();
            if !gs.iter().all(Tensor::is_finite) {
                return Err(Error::Divergence("non-finite scheduler gradient".into()));
            }
            for (k, (p, gr)) in self.delta.iter_mut().zip(&gs).enumerate() {
                self.opt.step(k, p, gr);
            }
        }
        for (&k, f) in sampled.iter().zip(features) {
            self.record(candidates[k], *f)?;
        }
        Ok(())
    }
}

/// Draws `batch` distinct indices without replacement, proportionally to `p`.
pub fn sample_batch<R: Rng + ?Sized>(p: &[f64], batch: usize, rng: &mut R) -> Result<Vec<usize>> {
    if batch > p.len() {
        return Err(Error::Config(format!("batch of {batch} from {} candidates", p.len())));
    }
    if let Some(k) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::DegenerateDistribution(format!("p[{k}] = {}", p[k])));
    }
    let picked = index::sample_weighted(rng, p.len(), |i| p[i], batch)
        .map_err(|e| Error::DegenerateDistribution(e.to_string()))?;
    if picked.len() < batch {
        return Err(Error::DegenerateDistribution(format!(
            "only {} candidates have positive probability, batch needs {batch}",
            picked.len()
        )));
    }
    Ok(picked.into_vec())
}

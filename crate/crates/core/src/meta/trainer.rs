use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::*;
use crate::scheduler::{sample_batch, Scheduler, SchedulerRecord, TaskFeatures};
use crate::seeds;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub support_loss: f64,
    pub query_loss: f64,
    pub kg_loss: Option<f64>,
    pub ms: f64,
}

/// Meta-training loop over a fixed task set.
pub struct MetaTrainer<'a> {
    pub ctx: TaskContext<'a>,
    pub tasks: &'a [Task],
    pub cfg: MetaConfig,
    pub params: ParamBundle,
    pub scheduler: Option<Scheduler>,
    pub log: Vec<StepLog>,
    pub scheduler_log: Vec<SchedulerRecord>,
    opt: Adam,
    neg_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    step: usize,
}

impl<'a> MetaTrainer<'a> {
    pub fn new(
        ctx: TaskContext<'a>,
        tasks: &'a [Task],
        cfg: MetaConfig,
        params: ParamBundle,
        scheduler: Option<Scheduler>,
        seed: u64,
    ) -> Self {
        let opt = new_optimizer(&params, cfg.global_lr);
        Self {
            ctx,
            tasks,
            cfg,
            params,
            scheduler,
            log: Vec::new(),
            scheduler_log: Vec::new(),
            opt,
            neg_rng: seeds::rng(seed, "meta.negatives"),
            sample_rng: seeds::rng(seed, "meta.task-sampling"),
            step: 0,
        }
    }

    /// Task sampling probabilities for the next step.
    pub fn probabilities(&self) -> Result<Vec<f64>> {
        let n = self.tasks.len();
        match &self.scheduler {
            Some(s) => s.score(&(0..n).collect::<Vec<_>>()),
            None => Ok(vec![1.0 / n as f64; n]),
        }
    }

    /// Samples the next batch of task indices.
    pub fn next_batch(&mut self) -> Result<(Vec<f64>, Vec<usize>)> {
        let p = self.probabilities()?;
        let b = self.cfg.batch_size.min(self.tasks.len());
        let picked = sample_batch(&p, b, &mut self.sample_rng)?;
        Ok((p, picked))
    }

    pub fn train(&mut self) -> Result<()> {
        for _ in 0..self.cfg.steps {
            self.step()?;
        }
        Ok(())
    }

    /// One global step: local updates per sampled task, the global update,
    /// then the scheduler update.
    pub fn step(&mut self) -> Result<StepLog> {
        if self.tasks.is_empty() {
            return Err(Error::Config("meta-training needs at least one task".into()));
        }
        let t0 = Instant::now();
        let (p, picked) = self.next_batch()?;
        let with_sched = self.scheduler.is_some();
        let gamma0 = self.params.gamma();
        let mut gg = GammaGraph::new(&self.params, self.ctx.batch);
        let mut dirty = false;
        let mut query_grads = Vec::with_capacity(picked.len());
        let mut features = Vec::with_capacity(picked.len());
        let (mut s_sum, mut q_sum) = (0.0, 0.0);

        for &ti in &picked {
            let task = &self.tasks[ti];
            if dirty {
                gg.set_gamma(&gamma0)?;
                dirty = false;
            }
            let q = to_bpr(self.ctx.ckg, &task.query);
            let at_start = if with_sched { Some(gg.loss_grad(&q)?) } else { None };
            let (gamma_u, s_loss, s_grad) = if self.cfg.local_update {
                let r = local_steps(
                    &mut gg,
                    &gamma0,
                    &self.ctx,
                    task,
                    self.cfg.local_lr,
                    self.cfg.local_steps,
                    &mut self.neg_rng,
                )?;
                dirty = true;
                (Some(r.gamma), r.support_loss, Some(r.support_grad))
            } else if with_sched {
                let (l, g) = gg.loss_grad(&to_bpr(self.ctx.ckg, &task.support))?;
                (None, l, Some(g))
            } else {
                (None, gg.loss(&to_bpr(self.ctx.ckg, &task.support))?, None)
            };
            let (q_loss, q_grad) = match (&gamma_u, &at_start) {
                (None, Some(a)) => a.clone(),
                (None, None) => gg.loss_grad(&q)?,
                (Some(gu), _) => {
                    gg.set_gamma(gu)?;
                    gg.loss_grad(&q)?
                }
            };
            if let (Some((l0, g0)), Some(sg)) = (&at_start, &s_grad) {
                features.push(TaskFeatures {
                    query_loss: *l0,
                    similarity: flat_dot(sg, g0),
                });
            }
            s_sum += s_loss;
            q_sum += q_loss;
            query_grads.push(q_grad);
        }

        let quads = if self.cfg.kg_update && self.cfg.kg_batch > 0 {
            Some(sample_quads(self.ctx.ckg, self.cfg.kg_batch, &mut self.neg_rng)?)
        } else {
            None
        };
        let kg_loss = global_update(
            &mut self.params,
            &mut self.opt,
            &query_grads,
            quads.as_deref(),
            self.cfg.train_base,
        )?;
        if !self.params.is_finite() {
            return Err(Error::Divergence(format!("global step {} left the finite range", self.step)));
        }

        if let Some(sched) = &mut self.scheduler {
            let mut after = GammaGraph::new(&self.params, self.ctx.batch);
            let losses = picked
                .iter()
                .map(|&ti| after.loss(&to_bpr(self.ctx.ckg, &self.tasks[ti].query)))
                .collect::<Result<Vec<_>>>()?;
            for (&ti, l) in picked.iter().zip(&losses) {
                self.scheduler_log.push(SchedulerRecord {
                    step: self.step,
                    task: ti,
                    p: p[ti],
                    query_loss: *l,
                });
            }
            let all: Vec<usize> = (0..self.tasks.len()).collect();
            sched.update(&all, &picked, &features, &losses)?;
        }

        let n = picked.len() as f64;
        let rec = StepLog {
            step: self.step,
            support_loss: s_sum / n,
            query_loss: q_sum / n,
            kg_loss,
            ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        self.log.push(rec.clone());
        Ok(rec)
    }

    /// Training log as JSON lines.
    pub fn log_lines(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record") + "\n")
            .collect()
    }

    pub fn scheduler_lines(&self) -> String {
        self.scheduler_log
            .iter()
            .map(|r| serde_json::to_string(r).expect("scheduler record") + "\n")
            .collect()
    }
}

/// The non-meta baseline: the same number of global Adam steps over the
/// same task batches, trained directly on `BPR(support ∪ query)` plus the
/// KG loss for φ, ω, γ and (with `train_base`) the base rows.
pub fn train_base_model(
    ctx: &TaskContext,
    tasks: &[Task],
    cfg: &MetaConfig,
    mut params: ParamBundle,
    seed: u64,
) -> Result<(ParamBundle, Vec<StepLog>)> {
    if tasks.is_empty() {
        return Err(Error::Config("training needs at least one task".into()));
    }
    let mut opt = new_optimizer(&params, cfg.global_lr);
    let mut neg_rng = seeds::rng(seed, "meta.negatives");
    let mut sample_rng = seeds::rng(seed, "meta.task-sampling");
    let uniform = vec![1.0 / tasks.len() as f64; tasks.len()];
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let picked = sample_batch(&uniform, cfg.batch_size.min(tasks.len()), &mut sample_rng)?;
        let mut triples = Vec::new();
        for &ti in &picked {
            triples.extend(to_bpr(ctx.ckg, &tasks[ti].support));
            triples.extend(to_bpr(ctx.ckg, &tasks[ti].query));
        }
        let quads = if cfg.kg_update && cfg.kg_batch > 0 {
            Some(sample_quads(ctx.ckg, cfg.kg_batch, &mut neg_rng)?)
        } else {
            None
        };
        let mut g = Graph::new();
        let nodes = params.bind(&mut g, |p| cfg.train_base || p != Partition::Base);
        let layers = propagate(&mut g, &nodes, &params.cfg, ctx.batch);
        let repr = representation(&mut g, &layers);
        let cf = bpr_loss(&mut g, repr, &triples);
        let (loss, kl) = match &quads {
            Some(q) => {
                let kn = kg_nodes(&mut g, &nodes);
                let kl = kg_loss(&mut g, kn, q);
                (g.add(cf, kl), Some(kl))
            }
            None => (cf, None),
        };
        g.forward(loss)?;
        let mut grads = g.backward(loss)?;
        let cf_value = g.value(cf).unwrap().item();
        let kg_value = kl.map(|k| g.value(k).unwrap().item());
        let mut tensors = params.tensors_mut();
        for (k, id) in nodes.ids.iter().enumerate() {
            if tensors[k].0 == Partition::Base && !cfg.train_base {
                continue;
            }
            let grad = grads.take(*id).expect("trainable leaf");
            if !grad.is_finite() {
                return Err(Error::Divergence(format!("baseline step {step}: non-finite gradient")));
            }
            opt.step(k, tensors[k].1, &grad);
        }
        let per_task = picked.len() as f64;
        log.push(StepLog {
            step,
            support_loss: cf_value / per_task,
            query_loss: cf_value / per_task,
            kg_loss: kg_value,
            ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((params, log))
}

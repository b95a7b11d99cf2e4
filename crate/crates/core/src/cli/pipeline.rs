//! The end-to-end experiment held in memory: split, pretrain, meta-train,
//! adapt and evaluate. The file-based stages are thin wrappers over this.

use std::collections::BTreeSet;

use crate::archive::Archive;
use crate::ckg::{CollabKG, Dataset, GraphSizes, UserId};
use crate::error::{Error, Result};
use crate::eval::{evaluate, split_scenarios, EvalReport, Scenario, ScenarioSplit};
use crate::kge::{pretrain, KgeParams, Pretrained};
use crate::meta::{adapt, train_base_model, Adapted, MetaTrainer, NegativeSampler, StepLog, Task, TaskContext};
use crate::numcore::Tensor;
use crate::propagation::{EdgeBatch, ModelConfig, ParamBundle};
use crate::scheduler::{Scheduler, SchedulerRecord};
use crate::seeds;

use super::config::RunConfig;

/// Result of meta-training.
#[derive(Clone, Debug)]
pub struct MetaRun {
    pub params: ParamBundle,
    pub log: Vec<StepLog>,
    pub scheduler_log: Vec<SchedulerRecord>,
    /// Task sampling probabilities after the last step.
    pub final_p: Vec<f64>,
}

/// One scenario's tasks and the graph they are adapted and ranked on.
#[derive(Clone, Debug)]
pub struct ScenarioData {
    pub scenario: Scenario,
    pub tasks: Vec<Task>,
    pub graph: CollabKG,
    pub batch: EdgeBatch,
    pub sampler: NegativeSampler,
}

impl ScenarioData {
    pub fn ctx(&self) -> TaskContext<'_> {
        TaskContext {
            ckg: &self.graph,
            batch: &self.batch,
            sampler: &self.sampler,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub cfg: RunConfig,
    pub split: ScenarioSplit,
    /// Old × old training interactions plus the whole KG.
    pub train_graph: CollabKG,
    pub train_tasks: Vec<Task>,
    /// The training graph without the training tasks' query edges.
    pub meta_graph: CollabKG,
    pub meta_batch: EdgeBatch,
    pub old_sampler: NegativeSampler,
}

impl Experiment {
    pub fn new(dataset: &Dataset, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let split = split_scenarios(
            &dataset.train,
            &dataset.test,
            &dataset.user_time,
            &dataset.item_time,
            cfg.new_user_frac,
            cfg.new_item_frac,
        )?;
        let all: Vec<_> = dataset.train.iter().chain(&dataset.test).copied().collect();
        let mut sizes = GraphSizes::infer(&all, &dataset.kg, &dataset.alignment);
        sizes.n_users = sizes.n_users.max(dataset.user_time.len());
        let train_graph = CollabKG::build_sized(sizes, &split.train, &dataset.kg, &dataset.alignment)?;
        let train_tasks = split.training_tasks(cfg.query_size, &mut seeds::rng(cfg.seed, "tasks.train"))?;
        if train_tasks.is_empty() {
            return Err(Error::Config(format!(
                "no training user has more than {} interactions",
                cfg.query_size
            )));
        }
        let masked: Vec<_> = train_tasks
            .iter()
            .flat_map(|t| t.query.iter().map(|q| (q.user, q.pos)))
            .collect();
        let meta_graph = train_graph.without_interactions(&masked)?;
        let meta_batch = EdgeBatch::for_graph(&meta_graph);
        let old_sampler = NegativeSampler::new(split.old_items());
        Ok(Self {
            cfg,
            split,
            train_graph,
            train_tasks,
            meta_graph,
            meta_batch,
            old_sampler,
        })
    }

    pub fn meta_ctx(&self) -> TaskContext<'_> {
        TaskContext {
            ckg: &self.meta_graph,
            batch: &self.meta_batch,
            sampler: &self.old_sampler,
        }
    }

    pub fn warnings(&self) -> Vec<String> {
        self.split.warnings(self.cfg.query_size)
    }

    pub fn pretrain(&self) -> Result<Pretrained> {
        pretrain(&self.train_graph, &self.cfg.pretrain_config())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(
            self.train_graph.n_total_entities(),
            self.train_graph.n_relations(),
            self.cfg.kge_dim,
            self.cfg.embed_dim,
            self.cfg.layers.clone(),
        )
    }

    /// Fresh parameters, with base rows from `kge` when given.
    pub fn init_params(&self, kge: Option<&KgeParams>) -> Result<ParamBundle> {
        ParamBundle::init(self.model_config(), kge, &mut seeds::rng(self.cfg.seed, "model.init"))
    }

    pub fn new_scheduler(&self) -> Option<Scheduler> {
        self.cfg
            .scheduler
            .then(|| Scheduler::new(self.cfg.scheduler_config(), &mut seeds::rng(self.cfg.seed, "scheduler.init")))
    }

    pub fn meta_train(&self, params: ParamBundle) -> Result<MetaRun> {
        let mut t = MetaTrainer::new(
            self.meta_ctx(),
            &self.train_tasks,
            self.cfg.meta_config(),
            params,
            self.new_scheduler(),
            seeds::derive(self.cfg.seed, "meta"),
        );
        t.train()?;
        let final_p = t.probabilities()?;
        Ok(MetaRun {
            params: t.params,
            log: t.log,
            scheduler_log: t.scheduler_log,
            final_p,
        })
    }

    /// The non-meta baseline under the same step budget.
    pub fn base_train(&self, params: ParamBundle) -> Result<(ParamBundle, Vec<StepLog>)> {
        train_base_model(
            &self.meta_ctx(),
            &self.train_tasks,
            &self.cfg.meta_config(),
            params,
            seeds::derive(self.cfg.seed, "meta"),
        )
    }

    pub fn scenario(&self, scenario: Scenario) -> Result<ScenarioData> {
        let label = format!("tasks.{scenario}");
        let tasks = self
            .split
            .scenario_tasks(scenario, self.cfg.query_size, &mut seeds::rng(self.cfg.seed, &label))?;
        let support: Vec<_> = tasks
            .iter()
            .flat_map(|t| t.support.iter().map(|s| (s.user, s.pos)))
            .collect();
        let graph = self.train_graph.with_additions(&support, &[])?;
        let batch = EdgeBatch::for_graph(&graph);
        Ok(ScenarioData {
            scenario,
            tasks,
            graph,
            batch,
            sampler: NegativeSampler::all_items(self.train_graph.n_items()),
        })
    }

    pub fn adapt(&self, params: &ParamBundle, data: &ScenarioData) -> Result<Adapted> {
        let label = format!("adapt.{}", data.scenario);
        adapt(
            params,
            &data.ctx(),
            &data.tasks,
            &self.cfg.meta_config(),
            &mut seeds::rng(self.cfg.seed, &label),
        )
    }

    pub fn evaluate(&self, model: &Adapted, data: &ScenarioData) -> Result<EvalReport> {
        evaluate(
            model,
            &data.graph,
            &data.batch,
            &data.tasks,
            data.scenario,
            self.cfg.k,
            self.cfg.workers,
        )
    }

    /// Pretrain, meta-train, then adapt and evaluate every configured scenario.
    pub fn run_all(&self) -> Result<EvalReport> {
        let kge = self.pretrain()?;
        let meta = self.meta_train(self.init_params(Some(&kge.params))?)?;
        let mut report = EvalReport {
            k: self.cfg.k,
            rows: Vec::new(),
        };
        for &s in &self.cfg.scenarios {
            let data = self.scenario(s)?;
            let adapted = self.adapt(&meta.params, &data)?;
            report.merge(self.evaluate(&adapted, &data)?);
        }
        Ok(report)
    }
}

/// Archive of an adapted model: the shared parameters plus one γ per user.
pub fn adapted_to_archive(model: &Adapted) -> Archive {
    let mut a = Archive::new();
    model.params.to_archive(&mut a);
    let users: Vec<String> = model.user_gamma.iter().map(|(u, _)| u.0.to_string()).collect();
    a.set_meta("adapt.users", if users.is_empty() { "-".to_string() } else { users.join(",") });
    for (u, gamma) in &model.user_gamma {
        for (k, t) in gamma.iter().enumerate() {
            a.insert(&format!("user.{}.gamma.{k}", u.0), t.clone());
        }
    }
    a
}

pub fn adapted_from_archive(a: &Archive) -> Result<Adapted> {
    let params = ParamBundle::from_archive(a)?;
    let n = params.gamma().len();
    let raw = a.meta("adapt.users")?;
    let mut user_gamma = Vec::new();
    let mut seen = BTreeSet::new();
    if raw != "-" {
        for tok in raw.split(',') {
            let u: usize = tok
                .parse()
                .map_err(|_| Error::Config(format!("bad user id `{tok}` in adapted archive")))?;
            if !seen.insert(u) {
                return Err(Error::Config(format!("user {u} appears twice in adapted archive")));
            }
            let gamma = (0..n)
                .map(|k| a.table(&format!("user.{u}.gamma.{k}")).cloned())
                .collect::<Result<Vec<Tensor>>>()?;
            user_gamma.push((UserId(u), gamma));
        }
    }
    Ok(Adapted { params, user_gamma })
}

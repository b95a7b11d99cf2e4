use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Scenario;
use crate::kge::PretrainConfig;
use crate::meta::{AdaptMode, MetaConfig};
use crate::scheduler::{SchedulerConfig, SchedulerObjective};
use crate::seeds;

use super::synth::SyntheticSpec;

pub const SCHEMA_VERSION: u32 = 1;

/// Every setting of a run. The file form is flat TOML; unknown keys are
/// rejected and missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub scenarios: Vec<Scenario>,
    pub new_user_frac: f64,
    pub new_item_frac: f64,

    pub kge_dim: usize,
    pub kge_epochs: usize,
    pub kge_batch: usize,
    pub kge_lr: f64,

    pub embed_dim: usize,
    pub layers: Vec<usize>,

    pub local_lr: f64,
    pub global_lr: f64,
    pub local_steps: usize,
    pub task_batch: usize,
    pub meta_steps: usize,
    pub kg_batch: usize,
    pub query_size: usize,
    pub local_update: bool,
    pub kg_update: bool,
    pub train_base: bool,

    pub scheduler: bool,
    pub scheduler_lr: f64,
    pub scheduler_objective: SchedulerObjective,

    pub adapt_steps: usize,
    pub adapt_lr: f64,
    pub adapt_mode: AdaptMode,

    pub k: usize,
    pub workers: usize,

    pub synth_users: usize,
    pub synth_items: usize,
    pub synth_attributes: usize,
    pub synth_relations: usize,
    pub synth_latent_dim: usize,
    pub synth_links_per_item: usize,
    pub synth_interactions: usize,
    pub synth_test_frac: f64,
    pub synth_noise_frac: f64,
    pub synth_sharpness: f64,
    pub synth_time_affinity: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            seed: 0,
            scenarios: Scenario::ALL.to_vec(),
            new_user_frac: 0.2,
            new_item_frac: 0.2,
            kge_dim: 64,
            kge_epochs: 100,
            kge_batch: 2048,
            kge_lr: 1e-4,
            embed_dim: 64,
            layers: vec![64, 32, 16],
            local_lr: 0.01,
            global_lr: 1e-4,
            local_steps: 1,
            task_batch: 32,
            meta_steps: 100,
            kg_batch: 2048,
            query_size: 10,
            local_update: true,
            kg_update: true,
            train_base: true,
            scheduler: true,
            scheduler_lr: 1e-3,
            scheduler_objective: SchedulerObjective::Surrogate,
            adapt_steps: 1,
            adapt_lr: 0.01,
            adapt_mode: AdaptMode::FineTune,
            k: 20,
            workers: 1,
            synth_users: 200,
            synth_items: 300,
            synth_attributes: 40,
            synth_relations: 4,
            synth_latent_dim: 8,
            synth_links_per_item: 3,
            synth_interactions: 40,
            synth_test_frac: 0.3,
            synth_noise_frac: 0.0,
            synth_sharpness: 3.0,
            synth_time_affinity: 4.0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.layers.is_empty() || self.layers.contains(&0) {
            return bad(format!("layers must be non-empty positive widths, got {:?}", self.layers));
        }
        for (name, v) in [("kge_dim", self.kge_dim), ("embed_dim", self.embed_dim), ("k", self.k)] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("query_size", self.query_size),
            ("task_batch", self.task_batch),
            ("workers", self.workers),
            ("kge_batch", self.kge_batch),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("kge_lr", self.kge_lr),
            ("local_lr", self.local_lr),
            ("global_lr", self.global_lr),
            ("scheduler_lr", self.scheduler_lr),
            ("adapt_lr", self.adapt_lr),
            ("synth_sharpness", self.synth_sharpness),
            ("synth_time_affinity", self.synth_time_affinity),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("new_user_frac", self.new_user_frac),
            ("new_item_frac", self.new_item_frac),
            ("synth_test_frac", self.synth_test_frac),
            ("synth_noise_frac", self.synth_noise_frac),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.scenarios.is_empty() {
            return bad("scenarios must not be empty".into());
        }
        Ok(())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            dim: self.kge_dim,
            epochs: self.kge_epochs,
            batch_size: self.kge_batch,
            lr: self.kge_lr,
            seed: seeds::derive(self.seed, "pretrain"),
        }
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            local_lr: self.local_lr,
            global_lr: self.global_lr,
            local_steps: self.local_steps,
            batch_size: self.task_batch,
            steps: self.meta_steps,
            kg_batch: self.kg_batch,
            query_size: self.query_size,
            adapt_steps: self.adapt_steps,
            adapt_lr: self.adapt_lr,
            adapt_mode: self.adapt_mode,
            local_update: self.local_update,
            kg_update: self.kg_update,
            train_base: self.train_base,
        }
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig {
            lr: self.scheduler_lr,
            objective: self.scheduler_objective,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_users: self.synth_users,
            n_items: self.synth_items,
            n_attributes: self.synth_attributes,
            n_relations: self.synth_relations,
            latent_dim: self.synth_latent_dim,
            links_per_item: self.synth_links_per_item,
            interactions_per_user: self.synth_interactions,
            min_interactions: self.query_size + 1,
            test_frac: self.synth_test_frac,
            noise_frac: self.synth_noise_frac,
            sharpness: self.synth_sharpness,
            time_affinity: self.synth_time_affinity,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scenario: Option<Scenario>,
    pub k: Option<usize>,
    pub workers: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.scenario {
            cfg.scenarios = vec![s];
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()
    }
}

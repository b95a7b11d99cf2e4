//! Command-line pipeline: one stage per invocation, checkpoints in between.

mod config;
mod pipeline;
mod synth;

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

pub use config::{Overrides, RunConfig, SCHEMA_VERSION};
pub use pipeline::{adapted_from_archive, adapted_to_archive, Experiment, MetaRun, ScenarioData};
pub use synth::{gen_synth, Synthetic, SyntheticSpec};

use crate::archive::Archive;
use crate::ckg::Dataset;
use crate::error::{Error, Result};
use crate::eval::{EvalReport, Scenario};
use crate::kge::KgeParams;
use crate::propagation::ParamBundle;

#[derive(Debug, Parser)]
#[command(name = "metakg", about = "Meta-learned knowledge-graph recommender for cold-start scenarios")]
pub struct Cli {
    #[command(subcommand)]
    pub stage: Stage,
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Restrict adapt/evaluate to one scenario.
    #[arg(long, global = true, value_parser = parse_scenario)]
    pub scenario: Option<Scenario>,
    /// Cut-off of Recall@K and NDCG@K.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Upper bound on evaluation threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Input checkpoint of the stage (defaults to the previous stage's file in out_dir).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output of the stage: dataset directory for gen-synth, otherwise a file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Stage {
    /// Write a synthetic dataset.
    GenSynth,
    /// TransR pretraining of entity and relation rows.
    Pretrain,
    /// Meta-training on old users and items.
    MetaTrain,
    /// Adapt the meta-trained model to each scenario's support sets.
    Adapt,
    /// Rank and score each scenario's query sets.
    Evaluate,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::GenSynth => "gen-synth",
            Stage::Pretrain => "pretrain",
            Stage::MetaTrain => "meta-train",
            Stage::Adapt => "adapt",
            Stage::Evaluate => "evaluate",
        }
    }
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Checkpoint and log locations under `out_dir`.
pub mod paths {
    use super::*;

    pub fn pretrain(cfg: &RunConfig) -> PathBuf {
        cfg.out_dir.join("pretrain.ckpt")
    }

    pub fn meta(cfg: &RunConfig) -> PathBuf {
        cfg.out_dir.join("meta.ckpt")
    }

    pub fn adapted(cfg: &RunConfig, s: Scenario) -> PathBuf {
        cfg.out_dir.join(format!("adapted-{}.ckpt", s.to_string().to_lowercase()))
    }

    pub fn report(cfg: &RunConfig) -> PathBuf {
        cfg.out_dir.join("eval.tsv")
    }
}

/// Parses arguments, runs the stage and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// The resolved configuration: file (or defaults) plus command-line overrides.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Overrides {
        seed: cli.seed,
        scenario: cli.scenario,
        k: cli.k,
        workers: cli.workers,
    }
    .apply(&mut cfg)?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    log_line(
        &cfg,
        &json!({"event": "config", "stage": cli.stage.name(), "config": cfg}),
    )?;
    match cli.stage {
        Stage::GenSynth => stage_gen_synth(&cfg, cli.out.as_deref()),
        Stage::Pretrain => stage_pretrain(&cfg, cli.out.as_deref()),
        Stage::MetaTrain => stage_meta_train(&cfg, cli.checkpoint.as_deref(), cli.out.as_deref()),
        Stage::Adapt => stage_adapt(&cfg, cli.checkpoint.as_deref(), cli.out.as_deref()),
        Stage::Evaluate => stage_evaluate(&cfg, cli.checkpoint.as_deref(), cli.out.as_deref()).map(|_| ()),
    }
}

/// Appends one JSON record to `run_log.jsonl` and echoes it to stderr.
fn log_line(cfg: &RunConfig, v: &serde_json::Value) -> Result<()> {
    let line = v.to_string();
    eprintln!("{line}");
    let path = cfg.out_dir.join("run_log.jsonl");
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn experiment(cfg: &RunConfig) -> Result<Experiment> {
    let data = Dataset::load(&cfg.data_dir)?;
    let exp = Experiment::new(&data, cfg.clone())?;
    for w in exp.warnings() {
        log_line(cfg, &json!({"event": "warning", "message": w}))?;
    }
    Ok(exp)
}

fn stage_gen_synth(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let dir = out.unwrap_or(&cfg.data_dir);
    let s = gen_synth(&cfg.synthetic_spec(), cfg.seed)?;
    s.dataset.save(dir)?;
    let noisy: String = s.noisy_users().iter().map(|u| format!("{}\n", u.0)).collect();
    write_file(&dir.join("noisy_users.txt"), &noisy)?;
    log_line(
        cfg,
        &json!({"event": "gen-synth", "dir": dir, "train": s.dataset.train.len(), "test": s.dataset.test.len(), "kg": s.dataset.kg.len()}),
    )
}

fn stage_pretrain(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let exp = experiment(cfg)?;
    let pre = exp.pretrain()?;
    let mut a = Archive::new();
    a.set_meta("stage", "pretrain");
    a.set_meta("seed", cfg.seed);
    pre.params.to_archive(&mut a);
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| paths::pretrain(cfg));
    a.save(&path)?;
    log_line(
        cfg,
        &json!({"event": "pretrain", "steps": pre.step_losses.len(), "final_loss": pre.step_losses.last(), "checkpoint": path}),
    )
}

fn load_checkpoint(path: &Path) -> Result<Archive> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Archive::load(path)
}

fn stage_meta_train(cfg: &RunConfig, ckpt: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let input = ckpt.map(Path::to_path_buf).unwrap_or_else(|| paths::pretrain(cfg));
    let kge = KgeParams::from_archive(&load_checkpoint(&input)?)?;
    let exp = experiment(cfg)?;
    let run = exp.meta_train(exp.init_params(Some(&kge))?)?;
    let mut a = Archive::new();
    a.set_meta("stage", "meta-train");
    a.set_meta("seed", cfg.seed);
    run.params.to_archive(&mut a);
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| paths::meta(cfg));
    a.save(&path)?;
    let lines = |v: &[serde_json::Value]| v.iter().map(|x| x.to_string() + "\n").collect::<String>();
    let log: Vec<_> = run.log.iter().map(|r| json!(r)).collect();
    write_file(&cfg.out_dir.join("meta_log.jsonl"), &lines(&log))?;
    let sched: Vec<_> = run.scheduler_log.iter().map(|r| json!(r)).collect();
    write_file(&cfg.out_dir.join("scheduler_log.jsonl"), &lines(&sched))?;
    log_line(
        cfg,
        &json!({"event": "meta-train", "steps": run.log.len(), "tasks": exp.train_tasks.len(), "checkpoint": path}),
    )
}

fn single_scenario(cfg: &RunConfig, flag: &str) -> Result<Scenario> {
    match cfg.scenarios.as_slice() {
        [s] => Ok(*s),
        _ => Err(Error::Config(format!("--{flag} needs exactly one scenario (use --scenario)"))),
    }
}

fn stage_adapt(cfg: &RunConfig, ckpt: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let input = ckpt.map(Path::to_path_buf).unwrap_or_else(|| paths::meta(cfg));
    let params = ParamBundle::from_archive(&load_checkpoint(&input)?)?;
    if out.is_some() {
        single_scenario(cfg, "out")?;
    }
    let exp = experiment(cfg)?;
    for &s in &cfg.scenarios {
        let data = exp.scenario(s)?;
        let adapted = exp.adapt(&params, &data)?;
        let mut a = adapted_to_archive(&adapted);
        a.set_meta("stage", "adapt");
        a.set_meta("scenario", s);
        a.set_meta("seed", cfg.seed);
        let path = out.map(Path::to_path_buf).unwrap_or_else(|| paths::adapted(cfg, s));
        a.save(&path)?;
        log_line(
            cfg,
            &json!({"event": "adapt", "scenario": s.to_string(), "tasks": data.tasks.len(), "checkpoint": path}),
        )?;
    }
    Ok(())
}

pub fn stage_evaluate(cfg: &RunConfig, ckpt: Option<&Path>, out: Option<&Path>) -> Result<EvalReport> {
    if ckpt.is_some() {
        single_scenario(cfg, "checkpoint")?;
    }
    let inputs: Vec<(Scenario, PathBuf)> = cfg
        .scenarios
        .iter()
        .map(|&s| (s, ckpt.map(Path::to_path_buf).unwrap_or_else(|| paths::adapted(cfg, s))))
        .collect();
    let models = inputs
        .iter()
        .map(|(_, p)| load_checkpoint(p).and_then(|a| adapted_from_archive(&a)))
        .collect::<Result<Vec<_>>>()?;
    let exp = experiment(cfg)?;
    let mut report = EvalReport {
        k: cfg.k,
        rows: Vec::new(),
    };
    for ((s, _), model) in inputs.iter().zip(&models) {
        let data = exp.scenario(*s)?;
        report.merge(exp.evaluate(model, &data)?);
    }
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| paths::report(cfg));
    write_file(&path, &report.to_tsv(true))?;
    for x in report.summary() {
        log_line(
            cfg,
            &json!({"event": "metric", "scenario": x.scenario.to_string(), "k": cfg.k, "metric": x.metric, "mean": x.mean, "count": x.count}),
        )?;
    }
    print!("{}", report.to_tsv(false));
    Ok(report)
}

#[cfg(test)]
mod tests;

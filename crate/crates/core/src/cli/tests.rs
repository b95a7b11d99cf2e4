use super::*;
use crate::meta::AdaptMode;

fn tiny(dir: &Path) -> RunConfig {
    RunConfig {
        data_dir: dir.join("data"),
        out_dir: dir.join("runs"),
        seed: 5,
        kge_dim: 8,
        kge_epochs: 5,
        kge_batch: 256,
        kge_lr: 0.5,
        embed_dim: 8,
        layers: vec![8, 4],
        task_batch: 8,
        meta_steps: 5,
        kg_batch: 128,
        query_size: 5,
        synth_users: 40,
        synth_items: 80,
        synth_attributes: 12,
        synth_relations: 3,
        synth_latent_dim: 4,
        synth_links_per_item: 2,
        synth_interactions: 20,
        synth_test_frac: 0.4,
        ..RunConfig::default()
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, cfg.to_toml()).unwrap();
    p
}

fn run_stage(cfg_path: &Path, stage: &str, extra: &[&str]) -> i32 {
    let mut args = vec!["metakg", stage, "--config", cfg_path.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(args)
}

#[test]
fn full_pipeline_runs_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let cp = write_config(dir.path(), &cfg);
    let mut reports = Vec::new();
    for _ in 0..2 {
        for stage in ["gen-synth", "pretrain", "meta-train", "adapt", "evaluate"] {
            assert_eq!(run_stage(&cp, stage, &[]), 0, "stage {stage}");
        }
        reports.push(fs::read_to_string(paths::report(&cfg)).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert!(reports[0].starts_with("scenario\tk\tmetric\tmean\tcount\n"));
    assert!(cfg.out_dir.join("meta_log.jsonl").exists());
    let log = fs::read_to_string(cfg.out_dir.join("run_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["config"]["seed"], 5);

    // the in-memory runner agrees with the staged files
    let data = Dataset::load(&cfg.data_dir).unwrap();
    let mem = Experiment::new(&data, cfg.clone()).unwrap().run_all().unwrap();
    assert_eq!(mem.to_tsv(true), reports[0]);
}

#[test]
fn missing_checkpoints_exit_with_missing_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let cp = write_config(dir.path(), &cfg);
    assert_eq!(run_stage(&cp, "gen-synth", &[]), 0);
    assert_eq!(run_stage(&cp, "adapt", &[]), 3);
    assert_eq!(run_stage(&cp, "meta-train", &[]), 3);
    assert_eq!(run_stage(&cp, "evaluate", &["--scenario", "uic"]), 3);
    let gone = dir.path().join("nowhere.toml");
    assert_eq!(run(["metakg", "pretrain", "--config", gone.to_str().unwrap()]), 3);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "schema_version = 1\nmystery = 3\n").unwrap();
    assert_eq!(run(["metakg", "pretrain", "--config", p.to_str().unwrap()]), 2);
    assert_eq!(run(["metakg", "pretrain", "--scenario", "sideways"]), 2);
    let cfg = tiny(dir.path());
    let cp = write_config(dir.path(), &cfg);
    assert_eq!(run_stage(&cp, "evaluate", &["--checkpoint", "x.ckpt"]), 2);
}

#[test]
fn checkpoints_round_trip_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        adapt_mode: AdaptMode::LocalGamma,
        scenarios: vec![Scenario::Ncs],
        ..tiny(dir.path())
    };
    let cp = write_config(dir.path(), &cfg);
    for stage in ["gen-synth", "pretrain", "meta-train", "adapt"] {
        assert_eq!(run_stage(&cp, stage, &[]), 0, "stage {stage}");
    }
    for path in [paths::pretrain(&cfg), paths::meta(&cfg), paths::adapted(&cfg, Scenario::Ncs)] {
        let bytes = fs::read(&path).unwrap();
        let again = Archive::load(&path).unwrap();
        let copy = dir.path().join("copy.ckpt");
        again.save(&copy).unwrap();
        assert_eq!(fs::read(&copy).unwrap(), bytes, "{}", path.display());
    }
    let adapted = adapted_from_archive(&Archive::load(&paths::adapted(&cfg, Scenario::Ncs)).unwrap()).unwrap();
    assert!(!adapted.user_gamma.is_empty());
    let mut back = adapted_to_archive(&adapted);
    back.set_meta("stage", "adapt");
    back.set_meta("scenario", Scenario::Ncs);
    back.set_meta("seed", cfg.seed);
    assert_eq!(back.to_text().into_bytes(), fs::read(paths::adapted(&cfg, Scenario::Ncs)).unwrap());

    // removing a downstream file leaves upstream checkpoints loadable
    fs::remove_file(paths::adapted(&cfg, Scenario::Ncs)).unwrap();
    assert_eq!(run_stage(&cp, "adapt", &[]), 0);
}

#[test]
fn untrained_model_ranks_like_chance() {
    // K / |candidates| is the exact expected recall of a uniform ranking
    let dir = tempfile::tempdir().unwrap();
    let (mut recall, mut expect) = (Vec::new(), Vec::new());
    for seed in 0..4 {
        let cfg = RunConfig {
            seed,
            synth_users: 120,
            synth_items: 400,
            synth_time_affinity: 0.0,
            new_user_frac: 0.0,
            new_item_frac: 0.0,
            scenarios: vec![Scenario::Ncs],
            ..tiny(dir.path())
        };
        let s = gen_synth(&cfg.synthetic_spec(), seed).unwrap();
        let exp = Experiment::new(&s.dataset, cfg.clone()).unwrap();
        let data = exp.scenario(Scenario::Ncs).unwrap();
        let model = crate::meta::Adapted {
            params: exp.init_params(None).unwrap(),
            user_gamma: Vec::new(),
        };
        let r = exp.evaluate(&model, &data).unwrap();
        for row in r.rows {
            recall.push(row.recall);
            expect.push(cfg.k as f64 / row.n_candidates as f64);
        }
    }
    let n = recall.len() as f64;
    let mean = recall.iter().sum::<f64>() / n;
    let want = expect.iter().sum::<f64>() / n;
    let sd = (recall.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = sd / n.sqrt();
    assert!((mean - want).abs() <= 3.0 * se, "mean {mean} expected {want} se {se} n {n}");
}

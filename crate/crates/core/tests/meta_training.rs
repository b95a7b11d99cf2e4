//! Meta-training on a small synthetic population lowers the query loss of a
//! fixed evaluation batch, whose query edges stay out of the graph.

use metakg::cli::{gen_synth, Experiment, RunConfig};
use metakg::meta::{local_update, to_bpr, GammaGraph, MetaTrainer, Task, TaskContext};
use metakg::propagation::ParamBundle;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config() -> RunConfig {
    RunConfig {
        seed: 3,
        kge_dim: 8,
        kge_epochs: 20,
        kge_batch: 256,
        kge_lr: 0.5,
        embed_dim: 8,
        layers: vec![8, 4],
        meta_steps: 200,
        task_batch: 8,
        kg_batch: 128,
        query_size: 5,
        new_user_frac: 0.0,
        new_item_frac: 0.0,
        synth_users: 30,
        synth_items: 60,
        synth_attributes: 12,
        synth_relations: 3,
        synth_latent_dim: 4,
        synth_links_per_item: 2,
        synth_interactions: 20,
        synth_test_frac: 0.2,
        ..RunConfig::default()
    }
}

/// Mean query loss after each task's local update, over 10 negative draws.
fn query_loss(params: &ParamBundle, ctx: &TaskContext, tasks: &[Task], cfg: &RunConfig) -> f64 {
    let mut total = 0.0;
    for draw in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        for t in tasks {
            let gu = local_update(params, ctx, t, cfg.local_lr, cfg.local_steps, &mut rng).unwrap();
            let mut gg = GammaGraph::new(params, ctx.batch);
            gg.set_gamma(&gu).unwrap();
            total += gg.loss(&to_bpr(ctx.ckg, &t.query)).unwrap();
        }
    }
    total / (10 * tasks.len()) as f64
}

#[test]
fn query_loss_decreases_over_200_iterations() {
    let cfg = config();
    let s = gen_synth(&cfg.synthetic_spec(), cfg.seed).unwrap();
    let exp = Experiment::new(&s.dataset, cfg.clone()).unwrap();
    assert_eq!(exp.train_tasks.len(), 30);
    let batch = &exp.train_tasks[..8];
    let kge = exp.pretrain().unwrap();
    let init = exp.init_params(Some(&kge.params)).unwrap();

    let before = query_loss(&init, &exp.meta_ctx(), batch, &cfg);
    let mut t = MetaTrainer::new(exp.meta_ctx(), &exp.train_tasks, cfg.meta_config(), init, exp.new_scheduler(), 5);
    t.train().unwrap();
    assert_eq!(t.log.len(), 200);
    let after = query_loss(&t.params, &exp.meta_ctx(), batch, &cfg);
    println!("evaluation batch query loss {before:.4} -> {after:.4}");
    assert!(after < before, "{before} -> {after}");
}

"""Smoke test for the metakg extension: a tiny synthetic run end to end."""

import math
import tempfile
from pathlib import Path

import metakg


def tiny_config(**extra):
    return metakg.Config(
        seed=5,
        kge_dim=8,
        kge_epochs=5,
        kge_batch=256,
        kge_lr=0.5,
        embed_dim=8,
        layers=[8, 4],
        task_batch=8,
        meta_steps=5,
        kg_batch=128,
        query_size=5,
        synth_users=40,
        synth_items=80,
        synth_attributes=12,
        synth_relations=3,
        synth_latent_dim=4,
        synth_links_per_item=2,
        synth_interactions=20,
        synth_test_frac=0.4,
        **extra,
    )


def main():
    cfg = tiny_config()
    assert cfg.to_dict()["embed_dim"] == 8
    assert metakg.Config.from_toml(cfg.to_toml()).to_dict() == cfg.to_dict()
    try:
        metakg.Config(no_such_key=1)
    except KeyError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    data = metakg.Dataset.synthetic(cfg)
    assert data.n_users == 40 and data.n_train > 0 and data.n_kg_triples > 0

    exp = metakg.Experiment(data, cfg)
    assert exp.n_train_tasks > 0
    init, kge_losses = exp.pretrain()
    assert kge_losses and all(math.isfinite(x) for x in kge_losses)
    meta, losses = exp.meta_train(init)
    assert len(losses) == 5

    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "meta.ckpt"
        meta.save(p)
        assert metakg.Params.load(p).size == meta.size

    for scenario in ["uc", "ic", "uic", "ncs"]:
        model = exp.adapt(meta, scenario)
        report = exp.evaluate(model, scenario)
        r = report.mean_recall(scenario)
        if r is not None:
            assert 0.0 <= r <= 1.0
            print(f"{scenario}: Recall@20 {r:.4f} NDCG@20 {report.mean_ndcg(scenario):.4f} over {len(report)} users")

    tsv = exp.run_all().to_tsv()
    assert tsv.startswith("scenario\tk\tmetric\tmean\tcount\n")
    assert metakg.recall_at_k([3, 1, 2], [1, 9], 2) == 0.5
    assert metakg.ndcg_at_k([1, 2], [1], 2) == 1.0
    assert metakg.run_cli(["pretrain", "--scenario", "sideways"]) == 2
    print("smoke test ok")


if __name__ == "__main__":
    main()

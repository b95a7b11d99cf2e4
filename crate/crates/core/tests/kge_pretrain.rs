//! TransR pretraining on a planted-structure knowledge graph.

use metakg::ckg::{Alignment, CollabKG, Triple};
use metakg::kge::{energy, pretrain, PretrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N_ENT: usize = 50;
const N_CLUSTERS: usize = 5;

/// Relation `r` sends cluster `c` to cluster `c + r + 1` (no wrap-around, so
/// the structure is expressible by translations).
fn planted(seed: u64, n: usize) -> Vec<Triple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < n {
        let h = rng.random_range(0..N_ENT);
        let r = rng.random_range(0..3);
        let target = h % N_CLUSTERS + r + 1;
        if target >= N_CLUSTERS {
            continue;
        }
        let t = target + N_CLUSTERS * rng.random_range(0..N_ENT / N_CLUSTERS);
        let tr = Triple::new(h, r, t);
        if !out.contains(&tr) {
            out.push(tr);
        }
    }
    out
}

#[test]
fn held_out_triples_score_below_corruptions() {
    let all = planted(1, 600);
    let (train, held) = all.split_at(520);
    let g = CollabKG::build(&[], train, &Alignment::identity(0)).unwrap();
    let cfg = PretrainConfig {
        dim: 8,
        epochs: 200,
        batch_size: 64,
        lr: 0.5,
        seed: 2,
    };
    let out = pretrain(&g, &cfg).unwrap();

    let full = CollabKG::build(&[], &all, &Alignment::identity(0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut gaps = Vec::new();
    for t in held {
        let t = Triple::new(t.head.0, 2 + t.relation.0, t.tail.0);
        let pos = energy(&out.params, &t).unwrap();
        let neg = full.sample_kg_negative(&t, &mut rng).unwrap();
        gaps.push(energy(&out.params, &neg).unwrap() - pos);
    }
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let sd = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let lower = mean - 1.645 * sd / n.sqrt();
    println!("margin {mean:.4}, one-sided 95% lower bound {lower:.4}");
    assert!(lower > 0.0);
}

#[test]
fn smoothed_training_loss_decreases() {
    let kg = planted(3, 300);
    let g = CollabKG::build(&[], &kg, &Alignment::identity(0)).unwrap();
    let cfg = PretrainConfig {
        dim: 8,
        epochs: 100,
        batch_size: 60,
        lr: 0.05,
        seed: 4,
    };
    let losses = pretrain(&g, &cfg).unwrap().step_losses;
    let steps_per_epoch = losses.len() / cfg.epochs;
    let epoch_means: Vec<f64> = losses
        .chunks(steps_per_epoch)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    // window of 10 epochs
    let blocks: Vec<f64> = epoch_means.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
    println!("{blocks:?}");
    for w in blocks.windows(2) {
        assert!(w[1] < w[0], "smoothed loss rose: {blocks:?}");
    }
}

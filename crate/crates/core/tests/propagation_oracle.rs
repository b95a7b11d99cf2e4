//! The batched propagation against a per-entity loop implementation written
//! straight from the layer equations.

use metakg::ckg::{Alignment, CollabKG, EntityId, GraphSizes, ItemId, Triple, UserId};
use metakg::numcore::{sigmoid, Tensor};
use metakg::propagation::{EdgeBatch, LayerEmbeddings, ModelConfig, ParamBundle};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    w.matvec(x)
}

fn leaky(v: f64, s: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        s * v
    }
}

/// Layer outputs `e⁰..eᴸ` for every entity, one head at a time.
fn oracle(p: &ParamBundle, ckg: &CollabKG) -> Vec<Vec<Vec<f64>>> {
    let n = ckg.n_total_entities();
    let proj = |row: &[f64]| -> Vec<f64> {
        matvec(&p.w_e, row).iter().zip(p.b.data()).map(|(a, b)| a + b).collect()
    };
    let rel: Vec<Vec<f64>> = (0..ckg.n_relations()).map(|r| proj(p.base_relation.row(r))).collect();
    let mut layers = vec![(0..n).map(|e| proj(p.base_entity.row(e))).collect::<Vec<_>>()];
    for l in 0..p.n_layers() {
        let x = layers.last().unwrap().clone();
        let d = x[0].len();
        let mut next = Vec::with_capacity(n);
        for h in 0..n {
            let h_id = EntityId(h);
            let summary = |edges: &[Triple]| -> Vec<f64> {
                if edges.is_empty() {
                    return vec![0.0; d];
                }
                let logits: Vec<f64> = edges
                    .iter()
                    .map(|t| {
                        let w = p.w_r[l].slice0(t.relation.0);
                        let ph = matvec(&w, &x[h]);
                        let pt = matvec(&w, &x[t.tail.0]);
                        pt.iter()
                            .zip(&ph)
                            .zip(&rel[t.relation.0])
                            .map(|((a, b), r)| a * (b + r).tanh())
                            .sum()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
                let mut out = vec![0.0; d];
                for (t, lg) in edges.iter().zip(&logits) {
                    let a = (lg - m).exp() / z;
                    for k in 0..d {
                        out[k] += a * x[t.tail.0][k];
                    }
                }
                out
            };
            let ec = summary(ckg.collab_neighbors(h_id));
            let ek = summary(ckg.knowledge_neighbors(h_id));
            let gc = matvec(&p.w_c[l], &ec);
            let gk = matvec(&p.w_k[l], &ek);
            let fused: Vec<f64> = (0..d)
                .map(|k| {
                    let g = sigmoid(gc[k] + gk[k]);
                    g * ec[k] + (1.0 - g) * ek[k]
                })
                .collect();
            let sum: Vec<f64> = (0..d).map(|k| x[h][k] + fused[k]).collect();
            let prod: Vec<f64> = (0..d).map(|k| x[h][k] * fused[k]).collect();
            let a = matvec(&p.w1[l], &sum);
            let b = matvec(&p.w2[l], &prod);
            next.push(
                a.iter()
                    .zip(&b)
                    .map(|(a, b)| leaky(*a, p.cfg.slope) + leaky(*b, p.cfg.slope))
                    .collect(),
            );
        }
        layers.push(next);
    }
    layers
}

struct Case {
    ckg: CollabKG,
    params: ParamBundle,
    n_kg_entities: usize,
    n_items: usize,
    interactions: Vec<(UserId, ItemId)>,
    kg: Vec<Triple>,
}

fn random_case(seed: u64, max_nodes: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_users = rng.random_range(1..=3);
    let n_items = rng.random_range(1..=3);
    let n_kg_entities = n_items + rng.random_range(0..=(max_nodes - n_users - n_items).min(3));
    let n_rel = rng.random_range(1..=2);
    let interactions: Vec<_> = (0..rng.random_range(1..6))
        .map(|_| (UserId(rng.random_range(0..n_users)), ItemId(rng.random_range(0..n_items))))
        .collect();
    let kg: Vec<_> = (0..rng.random_range(0..6))
        .map(|_| {
            Triple::new(
                rng.random_range(0..n_kg_entities),
                rng.random_range(0..n_rel),
                rng.random_range(0..n_kg_entities),
            )
        })
        .collect();
    let sizes = GraphSizes {
        n_users,
        n_entities: n_kg_entities,
        n_kg_relations: n_rel,
    };
    let ckg = CollabKG::build_sized(sizes, &interactions, &kg, &Alignment::identity(n_items)).unwrap();
    let d = rng.random_range(2..=3);
    let layers = vec![rng.random_range(2..=3), 2];
    let cfg = ModelConfig::new(ckg.n_total_entities(), ckg.n_relations(), d, d, layers);
    let mut params = ParamBundle::init(cfg, None, &mut rng).unwrap();
    for (_, t) in params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-1.5..1.5);
        }
    }
    Case {
        ckg,
        params,
        n_kg_entities,
        n_items,
        interactions,
        kg,
    }
}

#[test]
fn six_node_two_layer_graph() {
    // 2 users, 2 items, 2 attribute entities
    let inter = [(0, 0), (0, 1), (1, 1)].map(|(u, i)| (UserId(u), ItemId(i)));
    let kg = [Triple::new(0, 0, 2), Triple::new(1, 0, 3), Triple::new(1, 1, 2)];
    let ckg = CollabKG::build(&inter, &kg, &Alignment::identity(2)).unwrap();
    assert_eq!(ckg.n_total_entities(), 6);
    let cfg = ModelConfig::new(6, ckg.n_relations(), 3, 3, vec![3, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = ParamBundle::init(cfg, None, &mut rng).unwrap();
    for (_, t) in p.tensors_mut() {
        *t = t.map(|v| 3.0 * v);
    }
    let got = LayerEmbeddings::compute(&p, &EdgeBatch::for_graph(&ckg)).unwrap();
    let want = oracle(&p, &ckg);
    for (l, layer) in want.iter().enumerate() {
        for (e, row) in layer.iter().enumerate() {
            for (a, b) in got.layers[l].row(e).iter().zip(row) {
                assert!((a - b).abs() < 1e-12, "layer {l} entity {e}: {a} vs {b}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn batched_layers_match_the_loop_oracle(seed in any::<u64>()) {
        let c = random_case(seed, 10);
        let got = LayerEmbeddings::compute(&c.params, &EdgeBatch::for_graph(&c.ckg)).unwrap();
        let want = oracle(&c.params, &c.ckg);
        for (l, layer) in want.iter().enumerate() {
            for (e, row) in layer.iter().enumerate() {
                for (a, b) in got.layers[l].row(e).iter().zip(row) {
                    prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "layer {} entity {}: {} vs {}", l, e, a, b);
                }
            }
        }
    }

    #[test]
    fn scores_do_not_depend_on_entity_numbering(seed in any::<u64>()) {
        let c = random_case(seed, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut perm: Vec<usize> = (0..c.n_kg_entities).collect();
        perm.shuffle(&mut rng);

        let kg2: Vec<_> = c.kg.iter().map(|t| Triple::new(perm[t.head.0], t.relation.0, perm[t.tail.0])).collect();
        let align2 = Alignment::new((0..c.n_items).map(|i| EntityId(perm[i])).collect());
        let ckg2 = CollabKG::build_sized(c.ckg.sizes(), &c.interactions, &kg2, &align2).unwrap();
        let mut p2 = c.params.clone();
        for e in 0..c.n_kg_entities {
            p2.base_entity.row_mut(perm[e]).copy_from_slice(c.params.base_entity.row(e));
        }

        let a = LayerEmbeddings::compute(&c.params, &EdgeBatch::for_graph(&c.ckg)).unwrap();
        let b = LayerEmbeddings::compute(&p2, &EdgeBatch::for_graph(&ckg2)).unwrap();
        for u in 0..c.ckg.n_users() {
            for i in 0..c.n_items {
                let (u1, i1) = (c.ckg.user_entity(UserId(u)), c.ckg.item_entity(ItemId(i)));
                let (u2, i2) = (ckg2.user_entity(UserId(u)), ckg2.item_entity(ItemId(i)));
                let (s1, s2) = (a.predict(u1, i1), b.predict(u2, i2));
                prop_assert!((s1 - s2).abs() <= 1e-10 * (1.0 + s1.abs()), "{} vs {}", s1, s2);
            }
        }
    }
}

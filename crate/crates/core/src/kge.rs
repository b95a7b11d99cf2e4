//! TransR triple scoring, its pairwise logistic loss and embedding pretraining.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::ckg::{CollabKG, EntityId, Triple};
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};

/// A positive triple with a corrupted tail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Quad {
    pub triple: Triple,
    pub corrupt: EntityId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KgeParams {
    /// `[|ℰ′|, d_e]`
    pub entity: Tensor,
    /// `[|ℛ′|, d_r]`
    pub relation: Tensor,
    /// `[|ℛ′|, d_r, d_e]`
    pub projection: Tensor,
}

impl KgeParams {
    pub fn xavier<R: Rng + ?Sized>(n_entities: usize, n_relations: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            entity: Tensor::xavier(&[n_entities, dim], rng),
            relation: Tensor::xavier(&[n_relations, dim], rng),
            projection: Tensor::xavier(&[n_relations, dim, dim], rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.entity.cols()
    }

    pub fn n_entities(&self) -> usize {
        self.entity.rows()
    }

    pub fn n_relations(&self) -> usize {
        self.relation.rows()
    }

    pub fn to_archive(&self, a: &mut Archive) {
        a.insert("kge.entity", self.entity.clone());
        a.insert("kge.relation", self.relation.clone());
        a.insert("kge.projection", self.projection.clone());
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        Ok(Self {
            entity: a.table("kge.entity")?.clone(),
            relation: a.table("kge.relation")?.clone(),
            projection: a.table("kge.projection")?.clone(),
        })
    }
}

fn check(t: &Triple, p: &KgeParams) -> Result<()> {
    for (what, idx, size) in [
        ("entity", t.head.0, p.n_entities()),
        ("entity", t.tail.0, p.n_entities()),
        ("relation", t.relation.0, p.n_relations()),
    ] {
        if idx >= size {
            return Err(Error::IndexOutOfRange { what, index: idx, size });
        }
    }
    Ok(())
}

/// `‖W_r e_h + e_r − W_r e_t‖²`, computed directly.
pub fn energy(p: &KgeParams, t: &Triple) -> Result<f64> {
    check(t, p)?;
    let w = p.projection.slice0(t.relation.0);
    let wh = w.matvec(p.entity.row(t.head.0));
    let wt = w.matvec(p.entity.row(t.tail.0));
    let r = p.relation.row(t.relation.0);
    Ok(wh
        .iter()
        .zip(&wt)
        .zip(r)
        .map(|((h, t), r)| (h + r - t).powi(2))
        .sum())
}

/// Graph nodes holding the three TransR tables.
#[derive(Clone, Copy, Debug)]
pub struct KgeNodes {
    pub entity: NodeId,
    pub relation: NodeId,
    pub projection: NodeId,
}

/// `Σ −ln σ(s(h,r,t′) − s(h,r,t))` over `quads`, batched per relation.
pub fn kg_loss(g: &mut Graph, nodes: KgeNodes, quads: &[Quad]) -> NodeId {
    assert!(!quads.is_empty(), "kg_loss needs at least one quad");
    let mut by_rel: BTreeMap<usize, Vec<&Quad>> = BTreeMap::new();
    for q in quads {
        by_rel.entry(q.triple.relation.0).or_default().push(q);
    }
    let mut margins = Vec::with_capacity(by_rel.len());
    for (r, qs) in by_rel {
        let idx = |f: fn(&Quad) -> usize| -> Arc<[usize]> { qs.iter().map(|q| f(q)).collect() };
        let w = g.select(nodes.projection, r);
        let h = g.gather(nodes.entity, idx(|q| q.triple.head.0));
        let t = g.gather(nodes.entity, idx(|q| q.triple.tail.0));
        let tn = g.gather(nodes.entity, idx(|q| q.corrupt.0));
        let er = g.gather(nodes.relation, vec![r; qs.len()].into());
        let wh = g.matmul_t(h, w);
        let wt = g.matmul_t(t, w);
        let wtn = g.matmul_t(tn, w);
        let shifted = g.add(wh, er);
        let dp = g.sub(shifted, wt);
        let dn = g.sub(shifted, wtn);
        let sp = g.row_dot(dp, dp);
        let sn = g.row_dot(dn, dn);
        margins.push(g.sub(sn, sp));
    }
    let all = if margins.len() == 1 {
        margins[0]
    } else {
        g.concat(&margins, 0)
    };
    let ls = g.log_sigmoid(all);
    let s = g.sum(ls);
    g.neg(s)
}

/// Samples `n` triples of `ckg` uniformly with replacement, each with a fresh
/// corrupted tail.
pub fn sample_quads<R: Rng + ?Sized>(ckg: &CollabKG, n: usize, rng: &mut R) -> Result<Vec<Quad>> {
    let triples = ckg.triples();
    if triples.is_empty() {
        return Err(Error::Exhausted("graph has no triples".into()));
    }
    (0..n)
        .map(|_| {
            let t = triples[rng.random_range(0..triples.len())];
            let c = ckg.sample_kg_negative(&t, rng)?;
            Ok(Quad {
                triple: t,
                corrupt: c.tail,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            epochs: 100,
            batch_size: 2048,
            lr: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: KgeParams,
    /// Mean per-quad loss of every SGD step, in order.
    pub step_losses: Vec<f64>,
}

/// TransR pretraining on every triple of `ckg` with plain SGD on the mean
/// batch loss. Entity rows are projected back to unit norm after each step.
/// Entities that occur in no triple end with a zero row.
pub fn pretrain(ckg: &CollabKG, cfg: &PretrainConfig) -> Result<Pretrained> {
    if ckg.triples().is_empty() {
        return Err(Error::Exhausted("cannot pretrain on an empty graph".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = KgeParams::xavier(ckg.n_total_entities(), ckg.n_relations(), cfg.dim, &mut rng);
    let mut order: Vec<Triple> = ckg.triples().to_vec();
    let mut step_losses = Vec::new();
    let batch = cfg.batch_size.max(1);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let quads = chunk
                .iter()
                .map(|t| {
                    Ok(Quad {
                        triple: *t,
                        corrupt: ckg.sample_kg_negative(t, &mut rng)?.tail,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let nodes = KgeNodes {
                entity: g.leaf(params.entity.clone()),
                relation: g.leaf(params.relation.clone()),
                projection: g.leaf(params.projection.clone()),
            };
            let loss = kg_loss(&mut g, nodes, &quads);
            let mean = g.scale(loss, 1.0 / quads.len() as f64);
            let value = match g.forward(mean) {
                Ok(v) => v.item(),
                Err(e) => return Err(Error::Divergence(format!("pretraining epoch {epoch}: {e}"))),
            };
            let grads = g.backward(mean)?;
            params.entity.axpy(-cfg.lr, grads.get(nodes.entity));
            params.relation.axpy(-cfg.lr, grads.get(nodes.relation));
            params.projection.axpy(-cfg.lr, grads.get(nodes.projection));
            if !(params.entity.is_finite() && params.relation.is_finite() && params.projection.is_finite()) {
                return Err(Error::Divergence(format!("pretraining epoch {epoch}: parameters left the finite range")));
            }
            normalize_rows(&mut params.entity);
            step_losses.push(value);
        }
    }
    let mut seen = vec![false; ckg.n_total_entities()];
    for t in ckg.triples() {
        seen[t.head.0] = true;
        seen[t.tail.0] = true;
    }
    for (r, _) in seen.iter().enumerate().filter(|(_, s)| !**s) {
        params.entity.row_mut(r).fill(0.0);
    }
    Ok(Pretrained { params, step_losses })
}

fn normalize_rows(t: &mut Tensor) {
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckg::{Alignment, ItemId, UserId};
    use crate::numcore::{grad_check, log_sigmoid};

    fn tiny(dim: usize, seed: u64) -> KgeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = KgeParams::xavier(6, 3, dim, &mut rng);
        p.entity = p.entity.map(|v| v * 4.0);
        p
    }

    #[test]
    fn exact_translation_has_zero_energy() {
        let p = KgeParams {
            entity: Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap(),
            relation: Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap(),
            projection: Tensor::identity(2).reshape(&[1, 2, 2]).unwrap(),
        };
        assert_eq!(energy(&p, &Triple::new(0, 0, 1)).unwrap(), 0.0);
    }

    #[test]
    fn self_loop_with_null_relation_has_zero_energy() {
        let mut p = tiny(4, 1);
        p.relation = Tensor::zeros(&[3, 4]);
        assert_eq!(energy(&p, &Triple::new(2, 1, 2)).unwrap(), 0.0);
    }

    #[test]
    fn energy_matches_hand_rolled_norm() {
        let p = tiny(4, 2);
        let t = Triple::new(1, 2, 4);
        let mut expected = 0.0;
        for i in 0..4 {
            let mut v = p.relation.get(&[2, i]);
            for j in 0..4 {
                let w = p.projection.get(&[2, i, j]);
                v += w * (p.entity.get(&[1, j]) - p.entity.get(&[4, j]));
            }
            expected += v * v;
        }
        assert!((energy(&p, &t).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_triple() {
        let p = tiny(4, 2);
        assert!(matches!(
            energy(&p, &Triple::new(0, 7, 1)),
            Err(Error::IndexOutOfRange { what: "relation", .. })
        ));
    }

    #[test]
    fn energy_is_rotation_invariant() {
        let mut p = tiny(3, 3);
        let (c, s) = (0.6f64, 0.8f64);
        // rotation in the (0, 2) plane of relation 1's space
        let q = Tensor::from_rows(&[vec![c, 0.0, -s], vec![0.0, 1.0, 0.0], vec![s, 0.0, c]]).unwrap();
        let t = Triple::new(0, 1, 5);
        let before = energy(&p, &t).unwrap();
        let w = p.projection.slice0(1);
        let r = p.relation.row(1).to_vec();
        let rr = q.matvec(&r);
        for j in 0..3 {
            let col: Vec<f64> = (0..3).map(|i| w.get(&[i, j])).collect();
            let rc = q.matvec(&col);
            for i in 0..3 {
                p.projection.set(&[1, i, j], rc[i]);
            }
        }
        p.relation.row_mut(1).copy_from_slice(&rr);
        assert!((energy(&p, &t).unwrap() - before).abs() < 1e-9);
    }

    fn loss_value(p: &KgeParams, quads: &[Quad]) -> f64 {
        let mut g = Graph::new();
        let nodes = KgeNodes {
            entity: g.constant(p.entity.clone()),
            relation: g.constant(p.relation.clone()),
            projection: g.constant(p.projection.clone()),
        };
        let l = kg_loss(&mut g, nodes, quads);
        g.forward(l).unwrap().item()
    }

    fn q(h: usize, r: usize, t: usize, c: usize) -> Quad {
        Quad {
            triple: Triple::new(h, r, t),
            corrupt: EntityId(c),
        }
    }

    #[test]
    fn equal_energies_give_ln2() {
        let p = tiny(4, 5);
        // corrupting to the true tail makes both energies equal
        let l = loss_value(&p, &[q(0, 1, 2, 2)]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_pair_has_tiny_loss() {
        let p = KgeParams {
            entity: Tensor::from_rows(&[vec![0.0], vec![0.0], vec![20f64.sqrt()]]).unwrap(),
            relation: Tensor::zeros(&[1, 1]),
            projection: Tensor::full(&[1, 1, 1], 1.0),
        };
        // s(true) = 0, s(corrupt) = 20
        let l = loss_value(&p, &[q(0, 0, 1, 2)]);
        assert!(l < 1e-8 && l > 0.0, "{l}");
    }

    #[test]
    fn loss_is_sum_of_per_quad_terms() {
        let p = tiny(4, 6);
        let quads = [q(0, 0, 1, 3), q(2, 1, 4, 5), q(5, 0, 0, 2)];
        let expected: f64 = quads
            .iter()
            .map(|x| {
                let sp = energy(&p, &x.triple).unwrap();
                let mut neg = x.triple;
                neg.tail = x.corrupt;
                -log_sigmoid(energy(&p, &neg).unwrap() - sp)
            })
            .sum();
        assert!((loss_value(&p, &quads) - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let p = tiny(3, 7).clone();
        let quads = [q(0, 0, 1, 3), q(2, 1, 4, 5), q(5, 0, 0, 2)];
        let err = grad_check(
            |g, l| {
                kg_loss(
                    g,
                    KgeNodes {
                        entity: l[0],
                        relation: l[1],
                        projection: l[2],
                    },
                    &quads,
                )
            },
            &[p.entity, p.relation, p.projection],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn toy_graph() -> CollabKG {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let kg: Vec<_> = (0..60)
            .map(|_| Triple::new(rng.random_range(0..12), rng.random_range(0..2), rng.random_range(0..12)))
            .collect();
        let inter: Vec<_> = (0..4).map(|u| (UserId(u), ItemId(u + 1))).collect();
        CollabKG::build(&inter, &kg, &Alignment::identity(6)).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let g = toy_graph();
        let cfg = PretrainConfig {
            dim: 4,
            epochs: 0,
            seed: 3,
            ..PretrainConfig::default()
        };
        let out = pretrain(&g, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init = KgeParams::xavier(g.n_total_entities(), g.n_relations(), 4, &mut rng);
        assert_eq!(out.params, init);
        assert!(out.step_losses.is_empty());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let g = toy_graph();
        let cfg = PretrainConfig {
            dim: 4,
            epochs: 3,
            batch_size: 16,
            lr: 0.05,
            seed: 9,
        };
        let a = pretrain(&g, &cfg).unwrap();
        let b = pretrain(&g, &cfg).unwrap();
        for (x, y) in a.params.entity.data().iter().zip(b.params.entity.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn entity_rows_stay_unit_norm() {
        let g = toy_graph();
        let cfg = PretrainConfig {
            dim: 4,
            epochs: 1,
            batch_size: 32,
            lr: 0.1,
            seed: 1,
        };
        let p = pretrain(&g, &cfg).unwrap().params;
        for r in 0..p.n_entities() {
            let n: f64 = p.entity.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let g = toy_graph();
        let cfg = PretrainConfig {
            dim: 4,
            epochs: 50,
            batch_size: 8,
            lr: 1e200,
            seed: 1,
        };
        assert!(matches!(pretrain(&g, &cfg), Err(Error::Divergence(_))));
    }
}

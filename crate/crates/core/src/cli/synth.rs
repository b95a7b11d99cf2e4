//! Synthetic collaborative knowledge graphs with planted structure.
//!
//! Items are entities `0..n_items`; attribute entities follow. Each attribute
//! belongs to one relation and carries a latent vector. An item links to one
//! attribute under each of `links_per_item` distinct relations and its latent
//! vector is the scaled sum of those attribute vectors plus a little noise.
//! Users draw items without replacement with weight
//! `exp(sharpness · ⟨u, v⟩/√d − time_affinity · |t_u − t_i|)`, so late users
//! lean towards late items. Noisy users draw uniformly.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ckg::{Alignment, Dataset, ItemId, Triple, UserId};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_attributes: usize,
    pub n_relations: usize,
    pub latent_dim: usize,
    pub links_per_item: usize,
    pub interactions_per_user: usize,
    /// Each user needs at least this many interactions.
    pub min_interactions: usize,
    /// Share of every user's interactions written to the test file.
    pub test_frac: f64,
    /// Share of users whose interactions carry no preference signal.
    pub noise_frac: f64,
    pub sharpness: f64,
    pub time_affinity: f64,
}

/// A generated dataset with the structure it was drawn from.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub noisy: Vec<bool>,
    pub user_latent: Vec<Vec<f64>>,
    pub item_latent: Vec<Vec<f64>>,
    pub spec: SyntheticSpec,
}

impl Synthetic {
    /// Log sampling weight of `(u, i)` for a clean user.
    pub fn planted_score(&self, u: UserId, i: ItemId) -> f64 {
        let d = self.spec.latent_dim as f64;
        let dot: f64 = self.user_latent[u.0].iter().zip(&self.item_latent[i.0]).map(|(a, b)| a * b).sum();
        let dt = (self.dataset.user_time[u.0] - self.dataset.item_time[i.0]).abs();
        self.spec.sharpness * dot / d.sqrt() - self.spec.time_affinity * dt
    }

    pub fn noisy_users(&self) -> Vec<UserId> {
        (0..self.noisy.len()).filter(|&u| self.noisy[u]).map(UserId).collect()
    }
}

impl SyntheticSpec {
    pub fn check(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Infeasible(m));
        if self.n_users == 0 || self.latent_dim == 0 {
            return fail("need at least one user and one latent dimension".into());
        }
        if self.links_per_item == 0 || self.links_per_item > self.n_relations {
            return fail(format!(
                "links_per_item {} must lie in 1..={} (relations)",
                self.links_per_item, self.n_relations
            ));
        }
        if self.n_attributes < self.n_relations {
            return fail(format!(
                "{} attributes cannot cover {} relations",
                self.n_attributes, self.n_relations
            ));
        }
        if self.interactions_per_user < self.min_interactions {
            return fail(format!(
                "{} interactions per user, at least {} needed",
                self.interactions_per_user, self.min_interactions
            ));
        }
        if self.interactions_per_user > self.n_items {
            return fail(format!(
                "{} interactions per user exceed {} items",
                self.interactions_per_user, self.n_items
            ));
        }
        for (name, v) in [("test_frac", self.test_frac), ("noise_frac", self.noise_frac)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} {v} outside [0, 1)"));
            }
        }
        for (name, v) in [("sharpness", self.sharpness), ("time_affinity", self.time_affinity)] {
            if !v.is_finite() {
                return fail(format!("{name} must be finite"));
            }
        }
        Ok(())
    }
}

fn gaussian<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Generates a dataset from `spec`; equal seeds give equal datasets.
pub fn gen_synth(spec: &SyntheticSpec, seed: u64) -> Result<Synthetic> {
    spec.check()?;
    let d = spec.latent_dim;
    let mut rng = seeds::rng(seed, "synth.kg");
    let attributes: Vec<Vec<f64>> = (0..spec.n_attributes).map(|_| gaussian(d, &mut rng)).collect();
    // attribute a belongs to relation a % R
    let by_relation: Vec<Vec<usize>> = (0..spec.n_relations)
        .map(|r| (r..spec.n_attributes).step_by(spec.n_relations).collect())
        .collect();
    let mut kg = Vec::new();
    let mut item_latent = Vec::with_capacity(spec.n_items);
    let scale = 1.0 / (spec.links_per_item as f64).sqrt();
    let mut relations: Vec<usize> = (0..spec.n_relations).collect();
    for i in 0..spec.n_items {
        relations.shuffle(&mut rng);
        let mut v: Vec<f64> = gaussian(d, &mut rng).into_iter().map(|x| 0.3 * x).collect();
        for &r in &relations[..spec.links_per_item] {
            let a = by_relation[r][rng.random_range(0..by_relation[r].len())];
            kg.push(Triple::new(i, r, spec.n_items + a));
            for (x, y) in v.iter_mut().zip(&attributes[a]) {
                *x += scale * y;
            }
        }
        item_latent.push(v);
    }
    kg.sort();

    let mut rng = seeds::rng(seed, "synth.users");
    let user_latent: Vec<Vec<f64>> = (0..spec.n_users).map(|_| gaussian(d, &mut rng)).collect();
    let user_time: Vec<f64> = (0..spec.n_users).map(|_| rng.random::<f64>()).collect();
    let item_time: Vec<f64> = (0..spec.n_items).map(|_| rng.random::<f64>()).collect();
    let n_noisy = (spec.noise_frac * spec.n_users as f64).round() as usize;
    let mut noisy = vec![false; spec.n_users];
    for u in index::sample(&mut rng, spec.n_users, n_noisy) {
        noisy[u] = true;
    }

    let mut rng = seeds::rng(seed, "synth.interactions");
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let n_test = (spec.test_frac * spec.interactions_per_user as f64).round() as usize;
    for u in 0..spec.n_users {
        let logw: Vec<f64> = (0..spec.n_items)
            .map(|i| {
                if noisy[u] {
                    return 0.0;
                }
                let dt = (user_time[u] - item_time[i]).abs();
                let dot: f64 = user_latent[u].iter().zip(&item_latent[i]).map(|(a, b)| a * b).sum();
                spec.sharpness * dot / (d as f64).sqrt() - spec.time_affinity * dt
            })
            .collect();
        let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|x| (x - top).exp().max(1e-300)).collect();
        let mut items = index::sample_weighted(&mut rng, spec.n_items, |i| w[i], spec.interactions_per_user)
            .map_err(|e| Error::Infeasible(e.to_string()))?
            .into_vec();
        items.shuffle(&mut rng);
        for (k, &i) in items.iter().enumerate() {
            let pair = (UserId(u), ItemId(i));
            if k < n_test {
                test.push(pair);
            } else {
                train.push(pair);
            }
        }
    }
    train.sort();
    test.sort();

    let dataset = Dataset {
        train,
        test,
        kg,
        alignment: Alignment::identity(spec.n_items),
        user_time,
        item_time,
    };
    Ok(Synthetic {
        dataset,
        noisy,
        user_latent,
        item_latent,
        spec: spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::ckg::CollabKG;
    use crate::eval::{rank_items, recall_at_k};
    use crate::meta::make_tasks;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            n_users: 60,
            n_items: 200,
            n_attributes: 24,
            n_relations: 4,
            latent_dim: 8,
            links_per_item: 3,
            interactions_per_user: 30,
            min_interactions: 11,
            test_frac: 0.3,
            noise_frac: 0.0,
            sharpness: 3.0,
            time_affinity: 0.0,
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let a = gen_synth(&spec(), 3).unwrap();
        let b = gen_synth(&spec(), 3).unwrap();
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        a.dataset.save(da.path()).unwrap();
        b.dataset.save(db.path()).unwrap();
        for f in ["train.txt", "test.txt", "kg_final.txt", "user_time.txt", "item_time.txt"] {
            let x = std::fs::read(da.path().join(f)).unwrap();
            assert_eq!(x, std::fs::read(db.path().join(f)).unwrap(), "{f}");
        }
        assert_eq!(Dataset::load(da.path()).unwrap(), a.dataset);
        assert_ne!(gen_synth(&spec(), 4).unwrap().dataset, a.dataset);
    }

    #[test]
    fn generated_graph_builds() {
        let s = gen_synth(&spec(), 0).unwrap();
        let d = &s.dataset;
        let ckg = CollabKG::build(&d.train, &d.kg, &d.alignment).unwrap();
        assert_eq!(ckg.n_items(), 200);
        assert_eq!(d.train.len() + d.test.len(), 60 * 30);
        // items never point back at items, so the relation structure is acyclic
        assert!(d.kg.iter().all(|t| t.head.0 < 200 && t.tail.0 >= 200));
    }

    #[test]
    fn planted_oracle_beats_random_ranking() {
        let s = gen_synth(&spec(), 1).unwrap();
        let d = &s.dataset;
        let (mut oracle, mut random) = (0.0, 0.0);
        for u in 0..60 {
            let seen: BTreeSet<ItemId> = d.train.iter().filter(|p| p.0 .0 == u).map(|p| p.1).collect();
            let relevant: BTreeSet<ItemId> = d.test.iter().filter(|p| p.0 .0 == u).map(|p| p.1).collect();
            let cands: Vec<ItemId> = (0..200).map(ItemId).filter(|i| !seen.contains(i)).collect();
            let scores: Vec<f64> = (0..200).map(|i| s.planted_score(UserId(u), ItemId(i))).collect();
            oracle += recall_at_k(&rank_items(&scores, &cands), &relevant, 20).unwrap();
            random += 20.0 / cands.len() as f64;
        }
        assert!(oracle > 5.0 * random, "oracle {oracle} vs random {random}");
    }

    #[test]
    fn minimal_users_all_yield_tasks() {
        let sp = SyntheticSpec {
            n_users: 10,
            interactions_per_user: 11,
            test_frac: 0.0,
            ..spec()
        };
        let s = gen_synth(&sp, 0).unwrap();
        let d = &s.dataset;
        let ckg = CollabKG::build(&d.train, &d.kg, &d.alignment).unwrap();
        let users: Vec<UserId> = (0..10).map(UserId).collect();
        let tasks = make_tasks(&ckg, &users, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(tasks.iter().all(|t| t.support.len() == 1 && t.query.len() == 10));
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        for bad in [
            SyntheticSpec { interactions_per_user: 10, ..spec() },
            SyntheticSpec { interactions_per_user: 500, ..spec() },
            SyntheticSpec { links_per_item: 5, ..spec() },
            SyntheticSpec { n_attributes: 2, ..spec() },
            SyntheticSpec { noise_frac: 1.0, ..spec() },
        ] {
            assert!(matches!(gen_synth(&bad, 0), Err(Error::Infeasible(_))), "{bad:?}");
        }
    }

    #[test]
    fn noise_fraction_marks_users() {
        let s = gen_synth(&SyntheticSpec { noise_frac: 0.3, ..spec() }, 2).unwrap();
        assert_eq!(s.noisy_users().len(), 18);
    }
}

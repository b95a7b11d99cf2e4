//! Cold-start scenario splits, full ranking over non-interacted items, and
//! Recall@K / NDCG@K.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ckg::{CollabKG, ItemId, UserId};
use crate::error::{Error, Result};
use crate::meta::{build_task, Adapted, NegativeSampler, Task};
use crate::propagation::{EdgeBatch, LayerEmbeddings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// New users, old items.
    #[serde(rename = "uc")]
    Uc,
    /// Old users, new items.
    #[serde(rename = "ic")]
    Ic,
    /// New users, new items.
    #[serde(rename = "uic")]
    Uic,
    /// Old users, old items, held-out interactions.
    #[serde(rename = "ncs")]
    Ncs,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Uc, Scenario::Ic, Scenario::Uic, Scenario::Ncs];
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Uc => "UC",
            Scenario::Ic => "IC",
            Scenario::Uic => "UIC",
            Scenario::Ncs => "NCS",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uc" => Ok(Scenario::Uc),
            "ic" => Ok(Scenario::Ic),
            "uic" => Ok(Scenario::Uic),
            "ncs" => Ok(Scenario::Ncs),
            _ => Err(Error::Config(format!("unknown scenario `{s}` (uc, ic, uic, ncs)"))),
        }
    }
}

/// Old/new partition of users and items with the resulting interaction pools.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSplit {
    pub new_users: Vec<bool>,
    pub new_items: Vec<bool>,
    /// Old users × old items from the training file.
    pub train: Vec<(UserId, ItemId)>,
    pub pools: BTreeMap<Scenario, Vec<(UserId, ItemId)>>,
}

/// Marks the newest `frac` of ids (by time, ties by id) as new.
fn newest(times: &[f64], frac: f64) -> Vec<bool> {
    let n_new = (frac * times.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));
    let mut out = vec![false; times.len()];
    for &k in &order[times.len() - n_new.min(times.len())..] {
        out[k] = true;
    }
    out
}

/// Partitions users and items into old and new by time quantile. Training
/// keeps only old × old interactions; every other interaction goes to the
/// pool of its scenario, and held-out old × old interactions form NCS.
pub fn split_scenarios(
    train: &[(UserId, ItemId)],
    test: &[(UserId, ItemId)],
    user_time: &[f64],
    item_time: &[f64],
    new_user_frac: f64,
    new_item_frac: f64,
) -> Result<ScenarioSplit> {
    for (name, f) in [("new user fraction", new_user_frac), ("new item fraction", new_item_frac)] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(format!("{name} {f} outside [0, 1)")));
        }
    }
    for &(u, i) in train.iter().chain(test) {
        if u.0 >= user_time.len() {
            return Err(Error::Config(format!("user {} has no timestamp", u.0)));
        }
        if i.0 >= item_time.len() {
            return Err(Error::Config(format!("item {} has no timestamp", i.0)));
        }
    }
    let new_users = newest(user_time, new_user_frac);
    let new_items = newest(item_time, new_item_frac);
    let classify = |u: UserId, i: ItemId| match (new_users[u.0], new_items[i.0]) {
        (false, false) => None,
        (true, false) => Some(Scenario::Uc),
        (false, true) => Some(Scenario::Ic),
        (true, true) => Some(Scenario::Uic),
    };
    let mut train_set = BTreeSet::new();
    let mut pools: BTreeMap<Scenario, BTreeSet<(UserId, ItemId)>> =
        Scenario::ALL.iter().map(|&s| (s, BTreeSet::new())).collect();
    for &(u, i) in train {
        match classify(u, i) {
            None => {
                train_set.insert((u, i));
            }
            Some(s) => {
                pools.get_mut(&s).unwrap().insert((u, i));
            }
        }
    }
    for &(u, i) in test {
        let s = classify(u, i).unwrap_or(Scenario::Ncs);
        if s == Scenario::Ncs && train_set.contains(&(u, i)) {
            continue;
        }
        pools.get_mut(&s).unwrap().insert((u, i));
    }
    Ok(ScenarioSplit {
        new_users,
        new_items,
        train: train_set.into_iter().collect(),
        pools: pools.into_iter().map(|(s, v)| (s, v.into_iter().collect())).collect(),
    })
}

impl ScenarioSplit {
    pub fn old_users(&self) -> Vec<UserId> {
        (0..self.new_users.len()).filter(|&u| !self.new_users[u]).map(UserId).collect()
    }

    pub fn old_items(&self) -> Vec<ItemId> {
        (0..self.new_items.len()).filter(|&i| !self.new_items[i]).map(ItemId).collect()
    }

    /// Every known positive of each user across training and all pools.
    pub fn known_positives(&self) -> Vec<Vec<ItemId>> {
        let mut out = vec![Vec::new(); self.new_users.len()];
        for &(u, i) in self.train.iter().chain(self.pools.values().flatten()) {
            out[u.0].push(i);
        }
        for v in &mut out {
            v.sort_unstable();
            v.dedup();
        }
        out
    }

    /// Users of `pool` grouped with their positives, in user order.
    fn by_user(pairs: &[(UserId, ItemId)]) -> BTreeMap<UserId, Vec<ItemId>> {
        let mut m: BTreeMap<UserId, Vec<ItemId>> = BTreeMap::new();
        for &(u, i) in pairs {
            m.entry(u).or_default().push(i);
        }
        m
    }

    /// Meta-training tasks: old users on their old-item training positives.
    pub fn training_tasks<R: Rng + ?Sized>(&self, query_size: usize, rng: &mut R) -> Result<Vec<Task>> {
        let known = self.known_positives();
        let sampler = NegativeSampler::new(self.old_items());
        Self::by_user(&self.train)
            .into_iter()
            .filter(|(_, items)| items.len() > query_size)
            .map(|(u, items)| build_task(u, &items, &known[u.0], query_size, &sampler, rng))
            .collect()
    }

    /// Tasks of one scenario: every user of the pool with more than
    /// `query_size` positives there. Negatives come from all items.
    pub fn scenario_tasks<R: Rng + ?Sized>(
        &self,
        scenario: Scenario,
        query_size: usize,
        rng: &mut R,
    ) -> Result<Vec<Task>> {
        let known = self.known_positives();
        let sampler = NegativeSampler::all_items(self.new_items.len());
        Self::by_user(&self.pools[&scenario])
            .into_iter()
            .filter(|(_, items)| items.len() > query_size)
            .map(|(u, items)| build_task(u, &items, &known[u.0], query_size, &sampler, rng))
            .collect()
    }

    /// Human-readable notes for scenarios without a usable task.
    pub fn warnings(&self, query_size: usize) -> Vec<String> {
        Scenario::ALL
            .iter()
            .filter(|s| Self::by_user(&self.pools[s]).values().all(|v| v.len() <= query_size))
            .map(|s| format!("scenario {s} has no user with more than {query_size} interactions"))
            .collect()
    }
}

/// Items in descending score order; ties go to the smaller id.
pub fn rank_items(scores: &[f64], candidates: &[ItemId]) -> Vec<ItemId> {
    let mut out = candidates.to_vec();
    out.sort_by(|a, b| scores[b.0].total_cmp(&scores[a.0]).then(a.cmp(b)));
    out
}

/// Scores of every item for `user`, ranked over the items where `mask` is set.
pub fn rank_for_user(emb: &LayerEmbeddings, ckg: &CollabKG, user: UserId, mask: &[bool]) -> Vec<ItemId> {
    let u = ckg.user_entity(user);
    let scores: Vec<f64> = (0..ckg.n_items())
        .map(|i| emb.predict(u, ckg.item_entity(ItemId(i))))
        .collect();
    let cands: Vec<ItemId> = (0..ckg.n_items()).filter(|&i| mask[i]).map(ItemId).collect();
    rank_items(&scores, &cands)
}

/// `|top-K ∩ relevant| / |relevant|`; `None` for an empty relevant set.
pub fn recall_at_k(ranked: &[ItemId], relevant: &BTreeSet<ItemId>, k: usize) -> Option<f64> {
    assert!(k >= 1, "K must be at least 1");
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Binary-gain DCG@K over the ideal DCG for `|relevant|` items.
pub fn ndcg_at_k(ranked: &[ItemId], relevant: &BTreeSet<ItemId>, k: usize) -> Option<f64> {
    assert!(k >= 1, "K must be at least 1");
    if relevant.is_empty() {
        return None;
    }
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| gain(r + 1))
        .sum();
    let ideal: f64 = (1..=relevant.len().min(k)).map(gain).sum();
    Some(dcg / ideal)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub scenario: Scenario,
    pub user: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub n_relevant: usize,
    pub n_candidates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub scenario: Scenario,
    pub metric: &'static str,
    pub mean: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub rows: Vec<UserMetrics>,
}

impl EvalReport {
    pub fn merge(&mut self, other: EvalReport) {
        assert_eq!(self.k, other.k, "reports with different K");
        self.rows.extend(other.rows);
    }

    pub fn summary(&self) -> Vec<Summary> {
        let mut out = Vec::new();
        for s in Scenario::ALL {
            let rows: Vec<&UserMetrics> = self.rows.iter().filter(|r| r.scenario == s).collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len();
            for (metric, f) in [
                ("recall", (|r: &UserMetrics| r.recall) as fn(&UserMetrics) -> f64),
                ("ndcg", |r: &UserMetrics| r.ndcg),
            ] {
                out.push(Summary {
                    scenario: s,
                    metric,
                    mean: rows.iter().map(|r| f(r)).sum::<f64>() / n as f64,
                    count: n,
                });
            }
        }
        out
    }

    /// Mean Recall@K of a scenario; `None` when it has no users.
    pub fn mean_recall(&self, s: Scenario) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|x| x.scenario == s && x.metric == "recall")
            .map(|x| x.mean)
    }

    pub fn mean_ndcg(&self, s: Scenario) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|x| x.scenario == s && x.metric == "ndcg")
            .map(|x| x.mean)
    }

    /// Tab-separated summary (`scenario k metric mean count`), optionally
    /// followed by per-user rows.
    pub fn to_tsv(&self, per_user: bool) -> String {
        let mut s = String::from("scenario\tk\tmetric\tmean\tcount\n");
        for x in self.summary() {
            writeln!(s, "{}\t{}\t{}\t{:?}\t{}", x.scenario, self.k, x.metric, x.mean, x.count).unwrap();
        }
        if per_user {
            s.push_str("\nscenario\tuser\trecall\tndcg\tn_relevant\tn_candidates\n");
            for r in &self.rows {
                writeln!(
                    s,
                    "{}\t{}\t{:?}\t{:?}\t{}\t{}",
                    r.scenario, r.user, r.recall, r.ndcg, r.n_relevant, r.n_candidates
                )
                .unwrap();
            }
        }
        s
    }
}

/// Ranking candidates of a task: every item except the user's known
/// positives outside the query set.
pub fn candidate_mask(task: &Task, n_items: usize) -> Vec<bool> {
    let mut mask = vec![true; n_items];
    let query: BTreeSet<ItemId> = task.query_items().into_iter().collect();
    for i in &task.known {
        if !query.contains(i) {
            mask[i.0] = false;
        }
    }
    mask
}

/// Metrics of one task against precomputed embeddings.
pub fn evaluate_task(emb: &LayerEmbeddings, ckg: &CollabKG, task: &Task, scenario: Scenario, k: usize) -> Option<UserMetrics> {
    let mask = candidate_mask(task, ckg.n_items());
    let ranked = rank_for_user(emb, ckg, task.user, &mask);
    let relevant: BTreeSet<ItemId> = task.query_items().into_iter().collect();
    Some(UserMetrics {
        scenario,
        user: task.user.0,
        recall: recall_at_k(&ranked, &relevant, k)?,
        ndcg: ndcg_at_k(&ranked, &relevant, k)?,
        n_relevant: relevant.len(),
        n_candidates: ranked.len(),
    })
}

/// Evaluates each task's query set on the scenario graph `ckg`. Ranking runs
/// on up to `workers` threads; rows come back in task order.
pub fn evaluate(
    model: &Adapted,
    ckg: &CollabKG,
    batch: &EdgeBatch,
    tasks: &[Task],
    scenario: Scenario,
    k: usize,
    workers: usize,
) -> Result<EvalReport> {
    let shared = LayerEmbeddings::compute(&model.params, batch)?;
    let per_user: BTreeMap<UserId, &Vec<crate::numcore::Tensor>> =
        model.user_gamma.iter().map(|(u, g)| (*u, g)).collect();
    let one = |t: &Task| -> Result<Option<UserMetrics>> {
        match per_user.get(&t.user) {
            Some(g) => {
                let mut p = model.params.clone();
                p.set_gamma((*g).clone());
                let emb = LayerEmbeddings::compute(&p, batch)?;
                Ok(evaluate_task(&emb, ckg, t, scenario, k))
            }
            None => Ok(evaluate_task(&shared, ckg, t, scenario, k)),
        }
    };
    let workers = workers.max(1).min(tasks.len().max(1));
    let chunk = tasks.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<Option<UserMetrics>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = tasks
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker")).collect()
    });
    let mut rows = Vec::with_capacity(tasks.len());
    for p in parts {
        rows.extend(p?.into_iter().flatten());
    }
    Ok(EvalReport { k, rows })
}

#[cfg(test)]
mod tests;

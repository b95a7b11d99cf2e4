use super::*;
use proptest::prelude::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(items: &[usize]) -> BTreeSet<ItemId> {
    items.iter().map(|&i| ItemId(i)).collect()
}

fn ids(items: &[usize]) -> Vec<ItemId> {
    items.iter().map(|&i| ItemId(i)).collect()
}

fn brute_recall(ranked: &[ItemId], relevant: &BTreeSet<ItemId>, k: usize) -> f64 {
    let mut hits = 0usize;
    for (pos, item) in ranked.iter().enumerate() {
        if pos < k && relevant.iter().any(|r| r == item) {
            hits += 1;
        }
    }
    hits as f64 / relevant.len() as f64
}

fn brute_ndcg(ranked: &[ItemId], relevant: &BTreeSet<ItemId>, k: usize) -> f64 {
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().enumerate() {
        if pos < k && relevant.contains(item) {
            dcg += 1.0 / (pos as f64 + 2.0).ln() * std::f64::consts::LN_2;
        }
    }
    let mut idcg = 0.0;
    for pos in 0..relevant.len() {
        if pos < k {
            idcg += 1.0 / (pos as f64 + 2.0).ln() * std::f64::consts::LN_2;
        }
    }
    dcg / idcg
}

#[test]
fn hand_checked_ndcg() {
    let ranked = ids(&[7, 3, 9, 1, 4]);
    let v = ndcg_at_k(&ranked, &set(&[7, 9]), 20).unwrap();
    assert!((v - 0.91972).abs() < 1e-5, "{v}");
    assert_eq!(recall_at_k(&ranked, &set(&[7, 9]), 20), Some(1.0));
    assert_eq!(recall_at_k(&ranked, &set(&[7, 9]), 2), Some(0.5));
}

#[test]
fn empty_relevant_set_is_excluded() {
    let ranked = ids(&[0, 1]);
    assert_eq!(recall_at_k(&ranked, &BTreeSet::new(), 5), None);
    assert_eq!(ndcg_at_k(&ranked, &BTreeSet::new(), 5), None);
}

#[test]
fn metrics_match_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let mut ranked: Vec<usize> = (0..n).collect();
        ranked.shuffle(&mut rng);
        let n_rel = rng.random_range(1..=n);
        let relevant: Vec<usize> = ranked.choose_multiple(&mut rng, n_rel).copied().collect();
        let k = rng.random_range(1..=n + 5);
        let (ranked, relevant) = (ids(&ranked), set(&relevant));
        assert_eq!(recall_at_k(&ranked, &relevant, k).unwrap(), brute_recall(&ranked, &relevant, k));
        let a = ndcg_at_k(&ranked, &relevant, k).unwrap();
        let b = brute_ndcg(&ranked, &relevant, k);
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn ranking_breaks_ties_by_id() {
    let scores = [0.5, 0.9, 0.5, 0.9, 0.1];
    assert_eq!(rank_items(&scores, &ids(&[4, 3, 2, 1, 0])), ids(&[1, 3, 0, 2, 4]));
    assert_eq!(rank_items(&scores, &ids(&[2, 4])), ids(&[2, 4]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_are_invariant_to_monotone_transforms(
        scores in prop::collection::vec(-5.0f64..5.0, 2..40),
        rel_mask in prop::collection::vec(any::<bool>(), 40),
        k in 1usize..30,
    ) {
        let cands: Vec<ItemId> = (0..scores.len()).map(ItemId).collect();
        let relevant: BTreeSet<ItemId> = cands.iter().copied().filter(|i| rel_mask[i.0]).collect();
        prop_assume!(!relevant.is_empty());
        let moved: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect();
        let a = rank_items(&scores, &cands);
        let b = rank_items(&moved, &cands);
        prop_assert_eq!(&a, &b);
        let r = recall_at_k(&a, &relevant, k).unwrap();
        let n = ndcg_at_k(&a, &relevant, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
    }
}

fn random_split_input(seed: u64) -> (Vec<(UserId, ItemId)>, Vec<(UserId, ItemId)>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nu, ni) = (rng.random_range(3..25), rng.random_range(3..30));
    let pairs = |n: usize, rng: &mut ChaCha8Rng| -> Vec<(UserId, ItemId)> {
        (0..n).map(|_| (UserId(rng.random_range(0..nu)), ItemId(rng.random_range(0..ni)))).collect()
    };
    let train = pairs(rng.random_range(0..120), &mut rng);
    let test = pairs(rng.random_range(0..60), &mut rng);
    // coarse times so ties occur
    let ut = (0..nu).map(|_| rng.random_range(0..5) as f64).collect();
    let it = (0..ni).map(|_| rng.random_range(0..5) as f64).collect();
    (train, test, ut, it)
}

#[test]
fn split_matches_the_set_algebra_oracle() {
    for seed in 0..200 {
        let (train, test, ut, it) = random_split_input(seed);
        let (fu, fi) = (0.3, 0.25);
        let s = split_scenarios(&train, &test, &ut, &it, fu, fi).unwrap();

        // newest by time with ties to the larger id; count by rounding
        let oracle_new = |times: &[f64], f: f64| -> BTreeSet<usize> {
            let mut order: Vec<usize> = (0..times.len()).collect();
            order.sort_by(|&a, &b| (times[b], b).partial_cmp(&(times[a], a)).unwrap());
            order.into_iter().take((f * times.len() as f64).round() as usize).collect()
        };
        let nu = oracle_new(&ut, fu);
        let ni = oracle_new(&it, fi);
        for u in 0..ut.len() {
            assert_eq!(s.new_users[u], nu.contains(&u));
        }
        for i in 0..it.len() {
            assert_eq!(s.new_items[i], ni.contains(&i));
        }

        let old = |p: &(UserId, ItemId)| !nu.contains(&p.0 .0) && !ni.contains(&p.1 .0);
        let tr: BTreeSet<_> = train.iter().copied().filter(old).collect();
        assert_eq!(s.train, tr.iter().copied().collect::<Vec<_>>());
        let ncs: BTreeSet<_> = test.iter().copied().filter(|p| old(p) && !tr.contains(p)).collect();
        assert_eq!(s.pools[&Scenario::Ncs], ncs.into_iter().collect::<Vec<_>>());
        let all: BTreeSet<_> = train.iter().chain(&test).copied().collect();
        for (sc, want_u, want_i) in [
            (Scenario::Uc, true, false),
            (Scenario::Ic, false, true),
            (Scenario::Uic, true, true),
        ] {
            let want: Vec<_> = all
                .iter()
                .copied()
                .filter(|p| nu.contains(&p.0 .0) == want_u && ni.contains(&p.1 .0) == want_i)
                .collect();
            assert_eq!(s.pools[&sc], want, "{sc} seed {seed}");
        }
        // no new user or item ever reaches training
        assert!(s.train.iter().all(|(u, i)| !s.new_users[u.0] && !s.new_items[i.0]));
    }
}

#[test]
fn zero_fractions_keep_everything_old() {
    let train = vec![(UserId(0), ItemId(1)), (UserId(1), ItemId(0))];
    let test = vec![(UserId(0), ItemId(0))];
    let s = split_scenarios(&train, &test, &[1.0, 2.0], &[1.0, 2.0], 0.0, 0.0).unwrap();
    assert_eq!(s.train, train);
    assert_eq!(s.pools[&Scenario::Ncs], test);
    assert!(s.pools[&Scenario::Uic].is_empty());
    let w = s.warnings(0);
    assert_eq!(w.len(), 3);
    assert!(w[0].contains("UC"));
}

#[test]
fn split_rejects_bad_fractions_and_missing_times() {
    assert!(matches!(split_scenarios(&[], &[], &[], &[], 1.0, 0.1), Err(Error::Config(_))));
    let t = vec![(UserId(3), ItemId(0))];
    assert!(matches!(split_scenarios(&t, &[], &[0.0], &[0.0], 0.1, 0.1), Err(Error::Config(_))));
}

#[test]
fn candidates_drop_known_items_outside_the_query() {
    let sampler = NegativeSampler::all_items(12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pos = ids(&[1, 2, 3, 4]);
    let known = ids(&[1, 2, 3, 4, 9]);
    let task = build_task(UserId(0), &pos, &known, 2, &sampler, &mut rng).unwrap();
    let mask = candidate_mask(&task, 12);
    let q: BTreeSet<ItemId> = task.query_items().into_iter().collect();
    for i in 0..12 {
        let expected = q.contains(&ItemId(i)) || !known.contains(&ItemId(i));
        assert_eq!(mask[i], expected, "item {i}");
    }
}

#[test]
fn report_tsv_lists_means_and_counts() {
    let row = |scenario, user, recall, ndcg| UserMetrics {
        scenario,
        user,
        recall,
        ndcg,
        n_relevant: 2,
        n_candidates: 10,
    };
    let r = EvalReport {
        k: 20,
        rows: vec![row(Scenario::Uic, 0, 0.5, 0.25), row(Scenario::Uic, 1, 1.0, 0.75), row(Scenario::Ncs, 2, 0.0, 0.0)],
    };
    assert_eq!(r.mean_recall(Scenario::Uic), Some(0.75));
    assert_eq!(r.mean_ndcg(Scenario::Uic), Some(0.5));
    assert_eq!(r.mean_recall(Scenario::Uc), None);
    let tsv = r.to_tsv(false);
    assert_eq!(
        tsv,
        "scenario\tk\tmetric\tmean\tcount\nUIC\t20\trecall\t0.75\t2\nUIC\t20\tndcg\t0.5\t2\nNCS\t20\trecall\t0.0\t1\nNCS\t20\tndcg\t0.0\t1\n"
    );
    assert!(r.to_tsv(true).contains("UIC\t1\t1.0\t0.75\t2\t10"));
}

#[test]
fn scenario_names_round_trip() {
    for s in Scenario::ALL {
        assert_eq!(s.to_string().parse::<Scenario>().unwrap(), s);
    }
    assert!("cold".parse::<Scenario>().is_err());
}

use std::collections::BTreeSet;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use nve_core::pager::{
    pmi, pmi_clusters, units_from_subblock_clusters, PagerState, PagingUnit, SubBlockGroup,
    SubBlockId, Tier, TierConfig,
};

fn unit(id: usize, bytes: u64) -> PagingUnit {
    PagingUnit {
        id,
        members: vec![SubBlockId {
            layer: id,
            group: SubBlockGroup::Attn,
        }],
        bytes,
    }
}

fn equal_units(n: usize) -> Vec<PagingUnit> {
    (0..n).map(|i| unit(i, 1)).collect()
}

fn windows(steps: &[&[usize]]) -> Vec<BTreeSet<usize>> {
    steps.iter().map(|s| s.iter().copied().collect()).collect()
}

#[test]
fn pmi_of_perfectly_coupled_half_marginal_pair() {
    // Together in half the windows, apart never: PMI = ln 2.
    let w = windows(&[&[0, 1], &[], &[0, 1], &[]]);
    let v = pmi(2, 2, 2, 4).unwrap();
    assert_abs_diff_eq!(v, 2.0f64.ln(), epsilon = 1e-12);
    let clusters = pmi_clusters(2, &w, 0.5).unwrap();
    assert_eq!(clusters, vec![vec![0, 1]]);
}

#[test]
fn independent_pair_never_clusters_at_positive_threshold() {
    // Joint frequency equals the product of marginals: PMI = 0.
    let w = windows(&[&[0, 1], &[0], &[1], &[]]);
    assert_eq!(pmi(1, 2, 2, 4).unwrap(), 0.0);
    for threshold in [1e-9, 0.1, 1.0] {
        let clusters = pmi_clusters(2, &w, threshold).unwrap();
        assert_eq!(clusters, vec![vec![0], vec![1]]);
    }
}

#[test]
fn never_coactive_pair_has_neg_infinite_pmi() {
    let w = windows(&[&[0], &[1], &[0], &[1]]);
    assert_eq!(pmi(0, 2, 2, 4).unwrap(), f64::NEG_INFINITY);
    // Even a very negative threshold keeps them apart.
    let clusters = pmi_clusters(2, &w, -1e9).unwrap();
    assert_eq!(clusters, vec![vec![0], vec![1]]);
}

#[test]
fn singleton_and_validation() {
    let w = windows(&[&[0]]);
    assert_eq!(pmi_clusters(1, &w, 0.1).unwrap(), vec![vec![0]]);
    assert!(pmi_clusters(1, &[], 0.1).is_err());
    assert!(pmi_clusters(1, &w, f64::NAN).is_err());
    assert!(pmi_clusters(1, &windows(&[&[3]]), 0.1).is_err());
    assert!(pmi(3, 2, 2, 4).is_err()); // joint exceeds a marginal
}

#[test]
fn subblock_cluster_merging() {
    let sbs = [
        (SubBlockId { layer: 0, group: SubBlockGroup::Attn }, 10u64),
        (SubBlockId { layer: 0, group: SubBlockGroup::Ffn }, 20),
        (SubBlockId { layer: 1, group: SubBlockGroup::Attn }, 5),
    ];
    let units = units_from_subblock_clusters(&sbs, &[vec![0, 1], vec![2]]).unwrap();
    assert_eq!(units.len(), 2);
    assert_eq!(units[0].bytes, 30);
    assert_eq!(units[1].bytes, 5);
    assert!(units_from_subblock_clusters(&sbs, &[vec![0, 1]]).is_err()); // uncovered
    assert!(units_from_subblock_clusters(&sbs, &[vec![0, 1], vec![1, 2]]).is_err());
}

#[test]
fn placement_sorts_by_score() {
    let cfg = TierConfig::new(2, 1);
    let state = PagerState::new(cfg, equal_units(4), &[0.1, 0.9, 0.4, 1.0], None).unwrap();
    assert_eq!(state.tier_of(3), Tier::Hot);
    assert_eq!(state.tier_of(1), Tier::Hot);
    assert_eq!(state.tier_of(2), Tier::Warm);
    assert_eq!(state.tier_of(0), Tier::Cold);
}

#[test]
fn unconstrained_hot_never_faults() {
    let cfg = TierConfig::new(100, 0);
    let mut state = PagerState::new(cfg, equal_units(5), &[0.0; 5], None).unwrap();
    for pass in 0..10 {
        for u in 0..5 {
            let o = state.access(u).unwrap();
            assert_eq!(o.event, nve_core::pager::AccessEvent::Hit, "pass {pass}");
            assert_eq!(o.latency, 0);
        }
    }
    let s = state.stats();
    assert_eq!(s.counters.hits, 50);
    assert_eq!(s.hit_rate, 1.0);
}

#[test]
fn zero_capacity_places_everything_cold() {
    let state = PagerState::new(TierConfig::new(0, 0), equal_units(3), &[0.0; 3], None).unwrap();
    for u in 0..3 {
        assert_eq!(state.tier_of(u), Tier::Cold);
    }
}

#[test]
fn oversized_unit_pinned_cold_with_warning() {
    let units = vec![unit(0, 100), unit(1, 1)];
    let state = PagerState::new(TierConfig::new(2, 2), units, &[1.0, 0.5], None).unwrap();
    assert_eq!(state.tier_of(0), Tier::Cold);
    assert_eq!(state.tier_of(1), Tier::Hot);
    assert_eq!(state.warnings.len(), 1);
}

#[test]
fn zero_access_stats_flagged() {
    let state = PagerState::new(TierConfig::new(1, 1), equal_units(2), &[0.0; 2], None).unwrap();
    let s = state.stats();
    assert!(s.no_accesses);
    assert_eq!(s.hit_rate, 1.0);
}

#[test]
fn hit_rate_formula() {
    // 2 units, hot fits 1. Unit 0 starts hot; alternate accesses thrash.
    let mut state = PagerState::new(TierConfig::new(1, 1), equal_units(2), &[1.0, 0.0], None).unwrap();
    state.access(0).unwrap(); // hit
    state.access(1).unwrap(); // warm fault, promote, evict 0 to warm
    state.access(0).unwrap(); // warm fault
    state.access(1).unwrap(); // warm fault
    let s = state.stats();
    assert_eq!(s.counters.hits, 1);
    assert_eq!(s.counters.warm_faults, 3);
    assert_eq!(s.counters.cold_faults, 0);
    assert_abs_diff_eq!(s.hit_rate, 1.0 / 4.0, epsilon = 1e-12);
}

#[test]
fn warm_fault_promotes_single_unit_cold_fault_promotes_cluster() {
    let clusters = vec![vec![0, 1], vec![2], vec![3]];
    // Hot fits 2; scores place 2 and 3 hot, cluster {0,1} starts cold
    // (warm capacity 0).
    let mut state = PagerState::new(
        TierConfig::new(2, 1),
        equal_units(4),
        &[0.1, 0.2, 0.9, 0.8],
        Some(clusters),
    )
    .unwrap();
    assert_eq!(state.tier_of(1), Tier::Warm); // third in score order fills warm
    assert_eq!(state.tier_of(0), Tier::Cold);
    let o = state.access(0).unwrap();
    assert_eq!(o.event, nve_core::pager::AccessEvent::ColdFault);
    assert_eq!(o.latency, 10);
    // Both cluster members end hot together.
    assert_eq!(state.tier_of(0), Tier::Hot);
    assert_eq!(state.tier_of(1), Tier::Hot);
    state.check_invariants().unwrap();

    // A warm fault moves only the faulting unit.
    let mut st2 = PagerState::new(
        TierConfig::new(1, 2),
        equal_units(3),
        &[0.9, 0.5, 0.4],
        Some(vec![vec![1, 2], vec![0]]),
    )
    .unwrap();
    assert_eq!(st2.tier_of(1), Tier::Warm);
    assert_eq!(st2.tier_of(2), Tier::Warm);
    let o = st2.access(1).unwrap();
    assert_eq!(o.event, nve_core::pager::AccessEvent::WarmFault);
    assert_eq!(o.latency, 1);
    assert_eq!(st2.tier_of(1), Tier::Hot);
    assert_eq!(st2.tier_of(2), Tier::Warm); // cluster mate untouched
}

/// Reference single-tier LRU with explicit ordered list, preloaded like the
/// pager's placement.
struct LruOracle {
    cap: usize,
    /// Most recent last.
    order: Vec<usize>,
    hits: u64,
    misses: u64,
}

impl LruOracle {
    fn new(cap: usize, preload: &[usize]) -> LruOracle {
        LruOracle {
            cap,
            order: preload.to_vec(),
            hits: 0,
            misses: 0,
        }
    }
    fn access(&mut self, u: usize) {
        if let Some(pos) = self.order.iter().position(|&x| x == u) {
            self.order.remove(pos);
            self.order.push(u);
            self.hits += 1;
        } else {
            if self.order.len() == self.cap {
                self.order.remove(0);
            }
            self.order.push(u);
            self.misses += 1;
        }
    }
}

fn enumerate_traces(items: usize, len: usize, f: &mut dyn FnMut(&[usize])) {
    let mut trace = vec![0usize; len];
    loop {
        f(&trace);
        let mut i = 0;
        loop {
            if i == len {
                return;
            }
            trace[i] += 1;
            if trace[i] < items {
                break;
            }
            trace[i] = 0;
            i += 1;
        }
    }
}

/// Single-tier pager (warm capacity 0) against the textbook LRU oracle,
/// exhaustive over bounded traces.
#[test]
fn lru_matches_textbook_oracle_exhaustively() {
    for (items, cap, max_len) in [(3usize, 2usize, 12usize), (4, 2, 8), (4, 3, 8)] {
        for len in 1..=max_len {
            enumerate_traces(items, len, &mut |trace| {
                let mut pager = PagerState::new(
                    TierConfig::new(cap as u64, 0),
                    equal_units(items),
                    &vec![0.0; items],
                    None,
                )
                .unwrap();
                // Equal scores tie toward low ids: units 0..cap start hot.
                let preload: Vec<usize> = (0..cap).collect();
                let mut oracle = LruOracle::new(cap, &preload);
                for &u in trace {
                    pager.access(u).unwrap();
                    oracle.access(u);
                }
                let s = pager.stats();
                assert_eq!(s.counters.hits, oracle.hits);
                assert_eq!(s.counters.warm_faults + s.counters.cold_faults, oracle.misses);
                let pager_hot: BTreeSet<usize> =
                    (0..items).filter(|&u| pager.tier_of(u) == Tier::Hot).collect();
                let oracle_cache: BTreeSet<usize> = oracle.order.iter().copied().collect();
                assert_eq!(pager_hot, oracle_cache, "trace {trace:?}");
            });
        }
    }
}

/// Perfectly co-accessed pairs always cluster and migrate together;
/// exhaustive over bounded traces of pair/idle steps.
#[test]
fn coupled_pairs_migrate_together_exhaustively() {
    // Step alphabet for 4 sub-blocks: pair {0,1} together, 2 alone, 3 alone,
    // idle. Pair 0-1 is perfectly co-accessed in every trace by construction.
    let steps: [&[usize]; 4] = [&[0, 1], &[2], &[3], &[]];
    for len in 1..=6 {
        enumerate_traces(4, len, &mut |choice| {
            let trace: Vec<&[usize]> = choice.iter().map(|&c| steps[c]).collect();
            let pair_windows = trace.iter().filter(|s| s.contains(&0)).count();
            // Clustering is informative only when the pair's marginal is
            // strictly below 1: a pair on in every window has PMI exactly 0.
            if pair_windows == 0 || pair_windows == trace.len() {
                return;
            }
            let w: Vec<BTreeSet<usize>> =
                trace.iter().map(|s| s.iter().copied().collect()).collect();
            let clusters = pmi_clusters(4, &w, 0.05).unwrap();
            let pair_cluster = clusters.iter().find(|c| c.contains(&0)).unwrap();
            assert!(pair_cluster.contains(&1), "trace {trace:?}: {clusters:?}");

            // Drive a pager from cold with those clusters; after any access
            // to 0 or 1, both reside in the same tier.
            let mut pager = PagerState::new(
                TierConfig::new(3, 0),
                equal_units(4),
                &[0.0; 4],
                Some(clusters),
            )
            .unwrap();
            for step in &trace {
                for &sb in *step {
                    let o = pager.access(sb).unwrap();
                    pager.check_invariants().unwrap();
                    // Cold promotion is atomic for the cluster: a cold fault
                    // on either pair member lands both in hot together.
                    if (sb == 0 || sb == 1)
                        && o.event == nve_core::pager::AccessEvent::ColdFault
                    {
                        assert_eq!(pager.tier_of(0), Tier::Hot, "trace {trace:?}");
                        assert_eq!(pager.tier_of(1), Tier::Hot, "trace {trace:?}");
                    }
                }
            }
        });
    }
}

proptest! {
    /// Random sizes, capacities and traces: capacity invariants hold after
    /// every access and reruns are deterministic.
    #[test]
    fn random_traces_respect_capacities_and_determinism(
        sizes in prop::collection::vec(1u64..5, 1..6),
        hot in 0u64..12,
        warm in 0u64..12,
        trace in prop::collection::vec(0usize..6, 0..40),
        scores in prop::collection::vec(0.0f64..1.0, 6),
    ) {
        let n = sizes.len();
        let units: Vec<PagingUnit> = sizes.iter().enumerate().map(|(i, &b)| unit(i, b)).collect();
        let run = || {
            let mut p = PagerState::new(
                TierConfig::new(hot, warm),
                units.clone(),
                &scores[..n],
                None,
            ).unwrap();
            for &u in &trace {
                if u < n {
                    p.access(u).unwrap();
                    p.check_invariants().unwrap();
                }
            }
            let residency: Vec<Tier> = (0..n).map(|u| p.tier_of(u)).collect();
            (p.stats(), residency)
        };
        let a = run();
        let b = run();
        prop_assert_eq!(a.0, b.0);
        prop_assert_eq!(a.1, b.1);
    }
}

#[test]
fn reference_hit_rate_arithmetic() {
    // 4319 hits over 12 faults: 4319 / 4331 = 0.99722...
    let rate = 4319.0f64 / (4319.0 + 12.0);
    assert!(rate > 0.9972 && rate < 0.9973);
}

//! Three-tier weight paging with co-activation clustering.
//!
//! Paging units (attention or FFN sub-blocks, possibly grouped) live in a
//! hot, warm, or cold tier. Hot and warm have byte capacities with LRU
//! eviction cascading hot -> warm -> cold; cold is unbounded. A warm fault
//! promotes the single unit; a cold fault promotes the unit's whole
//! co-activation cluster so correlated sub-blocks page in together.
//!
//! Clusters come from pointwise mutual information over calibration
//! windows: units whose co-activation PMI clears a threshold are joined,
//! and connected components become prefetch groups.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{NveError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubBlockGroup {
    Attn,
    Ffn,
}

/// One schedulable weight sub-block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubBlockId {
    pub layer: usize,
    pub group: SubBlockGroup,
}

/// The unit of residency and transfer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PagingUnit {
    pub id: usize,
    pub members: Vec<SubBlockId>,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Hot,
    Warm,
    Cold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierConfig {
    pub hot_capacity_bytes: u64,
    pub warm_capacity_bytes: u64,
    pub hot_latency: u64,
    pub warm_latency: u64,
    pub cold_latency: u64,
}

impl TierConfig {
    pub fn new(hot_capacity_bytes: u64, warm_capacity_bytes: u64) -> TierConfig {
        TierConfig {
            hot_capacity_bytes,
            warm_capacity_bytes,
            hot_latency: 0,
            warm_latency: 1,
            cold_latency: 10,
        }
    }
}

/// Unsmoothed pointwise mutual information of two activation events over
/// `total` windows: ln(joint * total / (cnt_a * cnt_b)). A joint count of
/// zero yields negative infinity, so never-co-active units never cluster.
pub fn pmi(joint: u64, cnt_a: u64, cnt_b: u64, total: u64) -> Result<f64> {
    if total == 0 {
        return Err(NveError::InvalidParameter("pmi over zero windows".into()));
    }
    if cnt_a == 0 || cnt_b == 0 || joint > cnt_a.min(cnt_b) || cnt_a > total || cnt_b > total {
        return Err(NveError::InvalidParameter(format!(
            "inconsistent pmi counts: joint {joint}, a {cnt_a}, b {cnt_b}, total {total}"
        )));
    }
    if joint == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(((joint as f64 * total as f64) / (cnt_a as f64 * cnt_b as f64)).ln())
}

/// Cluster units by co-activation PMI over calibration windows.
///
/// `windows[w]` holds the unit ids active in window w. Unit pairs with
/// PMI >= threshold are joined; connected components become clusters.
/// Units never active stay singletons. Output is deterministic: clusters
/// sorted by smallest member id, members ascending.
pub fn pmi_clusters(
    num_units: usize,
    windows: &[BTreeSet<usize>],
    threshold: f64,
) -> Result<Vec<Vec<usize>>> {
    if windows.is_empty() {
        return Err(NveError::InvalidParameter(
            "clustering needs at least one window".into(),
        ));
    }
    if !threshold.is_finite() {
        return Err(NveError::InvalidParameter(format!(
            "non-finite PMI threshold {threshold}"
        )));
    }
    for w in windows {
        if let Some(&u) = w.iter().next_back() {
            if u >= num_units {
                return Err(NveError::UnknownUnit(u));
            }
        }
    }
    let total = windows.len() as u64;
    let mut cnt = vec![0u64; num_units];
    for w in windows {
        for &u in w {
            cnt[u] += 1;
        }
    }

    // Union-find over units.
    let mut parent: Vec<usize> = (0..num_units).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        let mut c = x;
        while parent[c] != r {
            let next = parent[c];
            parent[c] = r;
            c = next;
        }
        r
    }

    for a in 0..num_units {
        for b in a + 1..num_units {
            if cnt[a] == 0 || cnt[b] == 0 {
                continue;
            }
            let joint = windows
                .iter()
                .filter(|w| w.contains(&a) && w.contains(&b))
                .count() as u64;
            if pmi(joint, cnt[a], cnt[b], total)? >= threshold {
                let ra = find(&mut parent, a);
                let rb = find(&mut parent, b);
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); num_units];
    for u in 0..num_units {
        let r = find(&mut parent, u);
        groups[r].push(u);
    }
    Ok(groups.into_iter().filter(|g| !g.is_empty()).collect())
}

/// Merge clustered sub-blocks into atomic paging units. `clusters` indexes
/// into `sub_blocks`; unit ids follow cluster order.
pub fn units_from_subblock_clusters(
    sub_blocks: &[(SubBlockId, u64)],
    clusters: &[Vec<usize>],
) -> Result<Vec<PagingUnit>> {
    let mut seen = vec![false; sub_blocks.len()];
    let mut units = Vec::with_capacity(clusters.len());
    for (id, cluster) in clusters.iter().enumerate() {
        let mut members = Vec::with_capacity(cluster.len());
        let mut bytes = 0u64;
        for &s in cluster {
            if s >= sub_blocks.len() {
                return Err(NveError::UnknownUnit(s));
            }
            if seen[s] {
                return Err(NveError::InvalidParameter(format!(
                    "sub-block {s} appears in two clusters"
                )));
            }
            seen[s] = true;
            members.push(sub_blocks[s].0);
            bytes += sub_blocks[s].1;
        }
        units.push(PagingUnit { id, members, bytes });
    }
    if seen.iter().any(|s| !s) {
        return Err(NveError::InvalidParameter(
            "clusters must cover every sub-block".into(),
        ));
    }
    Ok(units)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessEvent {
    Hit,
    WarmFault,
    ColdFault,
}

#[derive(Debug, Clone, Copy)]
pub struct AccessOutcome {
    pub event: AccessEvent,
    pub latency: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PagerCounters {
    pub hits: u64,
    pub warm_faults: u64,
    pub cold_faults: u64,
    pub promotions: u64,
    pub evictions: u64,
    pub latency_total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PagerStats {
    pub counters: PagerCounters,
    pub accesses: u64,
    /// hits / (hits + warm_faults + cold_faults); 1.0 when there were no
    /// accesses (flagged below).
    pub hit_rate: f64,
    /// Fraction of accesses not requiring a cold page-in.
    pub warm_hit_rate: f64,
    pub no_accesses: bool,
}

#[derive(Debug)]
pub struct PagerState {
    pub config: TierConfig,
    pub units: Vec<PagingUnit>,
    tier: Vec<Tier>,
    /// Cluster index per unit; clusters are prefetch groups.
    cluster_of: Vec<usize>,
    clusters: Vec<Vec<usize>>,
    last_use: Vec<u64>,
    clock: u64,
    counters: PagerCounters,
    accesses: u64,
    pub warnings: Vec<String>,
}

impl PagerState {
    /// Importance-seeded placement: units in descending score order (ties
    /// toward lower id) fill hot, then warm, then cold. A unit larger than
    /// the hot capacity is pinned cold with a warning.
    pub fn new(
        config: TierConfig,
        units: Vec<PagingUnit>,
        unit_scores: &[f64],
        clusters: Option<Vec<Vec<usize>>>,
    ) -> Result<PagerState> {
        let n = units.len();
        if unit_scores.len() != n {
            return Err(NveError::DimensionMismatch(format!(
                "{} scores for {n} units",
                unit_scores.len()
            )));
        }
        for (i, u) in units.iter().enumerate() {
            if u.id != i {
                return Err(NveError::InvalidParameter(format!(
                    "unit at position {i} has id {}; ids must be dense and ordered",
                    u.id
                )));
            }
            if u.bytes == 0 {
                return Err(NveError::InvalidParameter(format!("unit {i} has zero bytes")));
            }
        }
        let clusters = match clusters {
            Some(cs) => {
                let mut seen = vec![false; n];
                for c in &cs {
                    for &u in c {
                        if u >= n {
                            return Err(NveError::UnknownUnit(u));
                        }
                        if seen[u] {
                            return Err(NveError::InvalidParameter(format!(
                                "unit {u} appears in two clusters"
                            )));
                        }
                        seen[u] = true;
                    }
                }
                if seen.iter().any(|s| !s) {
                    return Err(NveError::InvalidParameter(
                        "clusters must cover every unit".into(),
                    ));
                }
                cs
            }
            None => (0..n).map(|u| vec![u]).collect(),
        };
        let mut cluster_of = vec![0usize; n];
        for (ci, c) in clusters.iter().enumerate() {
            for &u in c {
                cluster_of[u] = ci;
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            unit_scores[b]
                .partial_cmp(&unit_scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut tier = vec![Tier::Cold; n];
        let mut warnings = Vec::new();
        let mut hot_used = 0u64;
        let mut warm_used = 0u64;
        for &u in &order {
            let b = units[u].bytes;
            if b > config.hot_capacity_bytes + config.warm_capacity_bytes {
                warnings.push(format!(
                    "unit {u} ({b} bytes) exceeds combined hot+warm capacity; placed cold",
                ));
                continue;
            }
            if hot_used + b <= config.hot_capacity_bytes {
                tier[u] = Tier::Hot;
                hot_used += b;
            } else if warm_used + b <= config.warm_capacity_bytes {
                tier[u] = Tier::Warm;
                warm_used += b;
            }
        }
        let state = PagerState {
            config,
            units,
            tier,
            cluster_of,
            clusters,
            last_use: vec![0; n],
            clock: 0,
            counters: PagerCounters::default(),
            accesses: 0,
            warnings,
        };
        state.check_invariants()?;
        Ok(state)
    }

    pub fn tier_of(&self, unit: usize) -> Tier {
        self.tier[unit]
    }

    pub fn cluster_members(&self, unit: usize) -> &[usize] {
        &self.clusters[self.cluster_of[unit]]
    }

    fn tier_used(&self, t: Tier) -> u64 {
        self.tier
            .iter()
            .enumerate()
            .filter(|(_, tt)| **tt == t)
            .map(|(u, _)| self.units[u].bytes)
            .sum()
    }

    /// Tier byte totals must respect capacities at all times.
    pub fn check_invariants(&self) -> Result<()> {
        let hot = self.tier_used(Tier::Hot);
        let warm = self.tier_used(Tier::Warm);
        if hot > self.config.hot_capacity_bytes {
            return Err(NveError::InvalidParameter(format!(
                "hot tier holds {hot} bytes over capacity {}",
                self.config.hot_capacity_bytes
            )));
        }
        if warm > self.config.warm_capacity_bytes {
            return Err(NveError::InvalidParameter(format!(
                "warm tier holds {warm} bytes over capacity {}",
                self.config.warm_capacity_bytes
            )));
        }
        Ok(())
    }

    /// Least-recently-used unit in a tier, excluding protected units.
    fn lru_victim(&self, t: Tier, protected: &BTreeSet<usize>) -> Option<usize> {
        self.tier
            .iter()
            .enumerate()
            .filter(|(u, tt)| **tt == t && !protected.contains(u))
            .min_by_key(|(u, _)| (self.last_use[*u], *u))
            .map(|(u, _)| u)
    }

    /// Demote LRU hot units to warm (cascading warm -> cold) until `bytes`
    /// fit in hot. Returns false if the space cannot be freed without
    /// touching protected units.
    fn make_room_hot(&mut self, bytes: u64, protected: &BTreeSet<usize>) -> bool {
        while self.tier_used(Tier::Hot) + bytes > self.config.hot_capacity_bytes {
            let Some(victim) = self.lru_victim(Tier::Hot, protected) else {
                return false;
            };
            self.tier[victim] = Tier::Warm;
            self.counters.evictions += 1;
            while self.tier_used(Tier::Warm) > self.config.warm_capacity_bytes {
                let Some(wv) = self.lru_victim(Tier::Warm, protected) else {
                    return false;
                };
                self.tier[wv] = Tier::Cold;
                self.counters.evictions += 1;
            }
        }
        true
    }

    fn promote_to_hot(&mut self, unit: usize, protected: &BTreeSet<usize>) -> bool {
        let bytes = self.units[unit].bytes;
        if bytes > self.config.hot_capacity_bytes {
            return false;
        }
        // The unit is in transit: it stops occupying its old tier before
        // room is made, so it can't trigger its own eviction cascade.
        let prev = self.tier[unit];
        self.tier[unit] = Tier::Cold;
        if !self.make_room_hot(bytes, protected) {
            self.tier[unit] = prev;
            return false;
        }
        self.tier[unit] = Tier::Hot;
        self.counters.promotions += 1;
        true
    }

    /// One decode-time access to a unit.
    pub fn access(&mut self, unit: usize) -> Result<AccessOutcome> {
        if unit >= self.units.len() {
            return Err(NveError::UnknownUnit(unit));
        }
        self.clock += 1;
        self.accesses += 1;
        let outcome = match self.tier[unit] {
            Tier::Hot => {
                self.counters.hits += 1;
                AccessOutcome {
                    event: AccessEvent::Hit,
                    latency: self.config.hot_latency,
                }
            }
            Tier::Warm => {
                self.counters.warm_faults += 1;
                let mut protected = BTreeSet::new();
                protected.insert(unit);
                self.promote_to_hot(unit, &protected);
                AccessOutcome {
                    event: AccessEvent::WarmFault,
                    latency: self.config.warm_latency,
                }
            }
            Tier::Cold => {
                self.counters.cold_faults += 1;
                // The whole co-activation cluster pages in together; the
                // faulting unit is placed first.
                let members: Vec<usize> = self.cluster_members(unit).to_vec();
                let protected: BTreeSet<usize> = members.iter().copied().collect();
                self.promote_to_hot(unit, &protected);
                for m in members {
                    if m != unit && self.tier[m] != Tier::Hot {
                        self.promote_to_hot(m, &protected);
                    }
                }
                AccessOutcome {
                    event: AccessEvent::ColdFault,
                    latency: self.config.cold_latency,
                }
            }
        };
        self.last_use[unit] = self.clock;
        self.counters.latency_total += outcome.latency;
        debug_assert!(self.check_invariants().is_ok());
        Ok(outcome)
    }

    pub fn stats(&self) -> PagerStats {
        let c = self.counters;
        let faults = c.hits + c.warm_faults + c.cold_faults;
        let no_accesses = self.accesses == 0;
        let hit_rate = if no_accesses {
            1.0
        } else {
            c.hits as f64 / faults as f64
        };
        let warm_hit_rate = if no_accesses {
            1.0
        } else {
            (self.accesses - c.cold_faults) as f64 / self.accesses as f64
        };
        PagerStats {
            counters: c,
            accesses: self.accesses,
            hit_rate,
            warm_hit_rate,
            no_accesses,
        }
    }
}

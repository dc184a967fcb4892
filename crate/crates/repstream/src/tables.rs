//! The five per-stream tables owned by each peer.
//!
//! Capacities follow the overlay design: routing table up to 120 entries,
//! neighbour table the 16 lowest-RTT peers, broadcast routing table the top
//! three beacon providers, the multicast table one parent plus a bounded
//! child set, and the backup-parents table a short history of grandparents
//! and siblings for churn recovery.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::id::{circular_distance, PeerId};
use crate::time::SimTime;

pub const RT_CAPACITY: usize = 120;
pub const NT_CAPACITY: usize = 16;
pub const BRT_CAPACITY: usize = 3;
pub const BPT_GRANDPARENT_CAPACITY: usize = 4;
pub const BPT_SIBLING_CAPACITY: usize = 8;
pub const DEFAULT_FANOUT: usize = 4;

/// DHT membership sample for the stream, never containing the owner.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RoutingTable {
    entries: BTreeSet<PeerId>,
}

impl RoutingTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Merge an incoming membership sample. Existing entries are always
    /// retained; remaining capacity goes to new peers in ascending circular
    /// distance from the owner.
    pub fn merge<I: IntoIterator<Item = PeerId>>(&mut self, incoming: I, owner: PeerId) {
        let mut fresh: Vec<PeerId> = incoming
            .into_iter()
            .filter(|p| *p != owner && !self.entries.contains(p))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        fresh.sort_by_key(|p| (circular_distance(*p, owner), *p));
        for peer in fresh {
            if self.entries.len() >= RT_CAPACITY {
                break;
            }
            self.entries.insert(peer);
        }
    }

    pub fn remove(&mut self, peer: PeerId) {
        self.entries.remove(&peer);
    }

    pub fn contains(&self, peer: PeerId) -> bool {
        self.entries.contains(&peer)
    }

    pub fn iter(&self) -> impl Iterator<Item = PeerId> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The lowest-RTT peers, ascending; media layer only.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct NeighbourTable {
    entries: Vec<(PeerId, u64)>,
}

impl NeighbourTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or refresh a candidate; the highest-RTT entry is dropped when
    /// over capacity.
    pub fn update(&mut self, candidate: PeerId, rtt_ms: u64) {
        self.entries.retain(|(p, _)| *p != candidate);
        self.entries.push((candidate, rtt_ms));
        self.entries.sort_by_key(|&(p, rtt)| (rtt, p));
        self.entries.truncate(NT_CAPACITY);
    }

    pub fn remove(&mut self, peer: PeerId) {
        self.entries.retain(|(p, _)| *p != peer);
    }

    pub fn iter(&self) -> impl Iterator<Item = (PeerId, u64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn contains(&self, peer: PeerId) -> bool {
        self.entries.iter().any(|(p, _)| *p == peer)
    }
}

/// Beacon providers ranked by how many beacons they delivered within the
/// trailing window.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BroadcastRoutingTable {
    /// Recent beacon arrival times per sender, pruned to the window.
    history: BTreeMap<PeerId, VecDeque<SimTime>>,
}

impl BroadcastRoutingTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record one beacon arrival and prune everything older than the window.
    pub fn record_beacon(&mut self, from: PeerId, now: SimTime, window_ms: u64) {
        self.history.entry(from).or_default().push_back(now);
        let cutoff = now.millis().saturating_sub(window_ms);
        self.history.retain(|_, times| {
            while times.front().is_some_and(|t| t.millis() < cutoff) {
                times.pop_front();
            }
            !times.is_empty()
        });
    }

    pub fn remove(&mut self, peer: PeerId) {
        self.history.remove(&peer);
    }

    /// The top providers by beacon count (descending), ties by id, at most
    /// three.
    pub fn ranked(&self) -> Vec<(PeerId, usize)> {
        let mut scored: Vec<(PeerId, usize)> = self
            .history
            .iter()
            .map(|(p, times)| (*p, times.len()))
            .collect();
        scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(BRT_CAPACITY);
        scored
    }

    pub fn best(&self) -> Option<PeerId> {
        self.ranked().first().map(|(p, _)| *p)
    }

    pub fn len(&self) -> usize {
        self.ranked().len()
    }
}

/// One admitted child.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChildEntry {
    pub reputation: f64,
    pub last_keepalive: SimTime,
    pub admitted_at: SimTime,
}

/// Outcome of an admission attempt.
#[derive(Clone, Debug, PartialEq)]
pub enum AdmitDecision {
    /// Slot free; requester inserted.
    Accept,
    /// Full and the requester does not beat the weakest child; the carried
    /// ids are the current children, offered as delegates.
    RejectFull { children: Vec<PeerId> },
    /// Requester displaced the weakest child; the evicted peer is told about
    /// the remaining children (its new candidate feeders).
    Replace {
        evicted: PeerId,
        evicted_gets: Vec<PeerId>,
    },
}

/// Parent and children for the media tree.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverlaidMulticastTable {
    owner: PeerId,
    parent: Option<PeerId>,
    children: BTreeMap<PeerId, ChildEntry>,
}

impl OverlaidMulticastTable {
    pub fn new(owner: PeerId) -> Self {
        OverlaidMulticastTable {
            owner,
            parent: None,
            children: BTreeMap::new(),
        }
    }

    pub fn parent(&self) -> Option<PeerId> {
        self.parent
    }

    pub fn set_parent(&mut self, parent: Option<PeerId>) {
        if let Some(p) = parent {
            debug_assert_ne!(p, self.owner);
            debug_assert!(!self.children.contains_key(&p), "parent cannot be a child");
        }
        self.parent = parent;
    }

    pub fn children(&self) -> impl Iterator<Item = (PeerId, &ChildEntry)> + '_ {
        self.children.iter().map(|(p, e)| (*p, e))
    }

    pub fn child_ids(&self) -> Vec<PeerId> {
        self.children.keys().copied().collect()
    }

    pub fn child_count(&self) -> usize {
        self.children.len()
    }

    pub fn is_child(&self, peer: PeerId) -> bool {
        self.children.contains_key(&peer)
    }

    pub fn child_mut(&mut self, peer: PeerId) -> Option<&mut ChildEntry> {
        self.children.get_mut(&peer)
    }

    pub fn remove_child(&mut self, peer: PeerId) -> bool {
        self.children.remove(&peer).is_some()
    }

    /// Weakest child under the effective reputation `eff`: lowest value, ties
    /// broken toward larger circular distance from the owner, then larger id.
    fn weakest_child(&self, eff: impl Fn(PeerId, f64) -> f64) -> Option<(PeerId, f64)> {
        self.children
            .iter()
            .map(|(p, e)| (*p, eff(*p, e.reputation)))
            .min_by(|a, b| {
                a.1.total_cmp(&b.1)
                    .then_with(|| {
                        circular_distance(b.0, self.owner)
                            .cmp(&circular_distance(a.0, self.owner))
                    })
                    .then_with(|| b.0.cmp(&a.0))
            })
    }

    /// Decide on a join request. `requester_rep` and the stored child
    /// reputations are compared after applying the caller's effective-value
    /// adjustment (audit penalties).
    pub fn admit(
        &mut self,
        requester: PeerId,
        requester_rep: f64,
        fanout: usize,
        now: SimTime,
        eff: impl Fn(PeerId, f64) -> f64,
    ) -> AdmitDecision {
        assert!(!self.children.contains_key(&requester), "already a child");
        assert_ne!(Some(requester), self.parent, "parent cannot become child");
        assert_ne!(requester, self.owner, "owner cannot admit itself");
        if self.children.len() < fanout {
            self.children.insert(
                requester,
                ChildEntry {
                    reputation: requester_rep,
                    last_keepalive: now,
                    admitted_at: now,
                },
            );
            return AdmitDecision::Accept;
        }
        let (weakest, weakest_eff) = self
            .weakest_child(&eff)
            .expect("full table has a weakest child");
        if eff(requester, requester_rep) > weakest_eff {
            self.children.remove(&weakest);
            self.children.insert(
                requester,
                ChildEntry {
                    reputation: requester_rep,
                    last_keepalive: now,
                    admitted_at: now,
                },
            );
            AdmitDecision::Replace {
                evicted: weakest,
                evicted_gets: self.child_ids(),
            }
        } else {
            AdmitDecision::RejectFull {
                children: self.child_ids(),
            }
        }
    }

    /// Drop children whose keepalive is older than the timeout. The parent is
    /// never touched here; parent recovery is the peer's own job.
    pub fn sweep_keepalives(&mut self, now: SimTime, timeout_ms: u64) -> Vec<PeerId> {
        let cutoff = now.millis().saturating_sub(timeout_ms);
        let stale: Vec<PeerId> = self
            .children
            .iter()
            .filter(|(_, e)| e.last_keepalive.millis() < cutoff)
            .map(|(p, _)| *p)
            .collect();
        for peer in &stale {
            self.children.remove(peer);
        }
        stale
    }

    /// Lowest stored child reputation, if any.
    pub fn min_child_reputation(&self) -> Option<f64> {
        self.children
            .values()
            .map(|e| e.reputation)
            .min_by(f64::total_cmp)
    }
}

/// Grandparents and siblings remembered for churn recovery, newest first.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BackupParentsTable {
    grandparents: VecDeque<PeerId>,
    siblings: VecDeque<PeerId>,
}

impl BackupParentsTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a grandparent and/or a batch of siblings.
    pub fn record(&mut self, grandparent: Option<PeerId>, siblings: &[PeerId]) {
        if let Some(gp) = grandparent {
            self.grandparents.retain(|p| *p != gp);
            self.grandparents.push_front(gp);
            self.grandparents.truncate(BPT_GRANDPARENT_CAPACITY);
        }
        for &sib in siblings.iter().rev() {
            self.siblings.retain(|p| *p != sib);
            self.siblings.push_front(sib);
        }
        self.siblings.truncate(BPT_SIBLING_CAPACITY);
    }

    pub fn remove(&mut self, peer: PeerId) {
        self.grandparents.retain(|p| *p != peer);
        self.siblings.retain(|p| *p != peer);
    }

    pub fn grandparents(&self) -> impl Iterator<Item = PeerId> + '_ {
        self.grandparents.iter().copied()
    }

    pub fn siblings(&self) -> impl Iterator<Item = PeerId> + '_ {
        self.siblings.iter().copied()
    }

    pub fn grandparent_count(&self) -> usize {
        self.grandparents.len()
    }

    pub fn sibling_count(&self) -> usize {
        self.siblings.len()
    }
}

/// The full table bundle owned by one peer for one stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PeerTables {
    pub rt: RoutingTable,
    pub nt: NeighbourTable,
    pub brt: BroadcastRoutingTable,
    pub omt: OverlaidMulticastTable,
    pub bpt: BackupParentsTable,
}

impl PeerTables {
    pub fn new(owner: PeerId) -> Self {
        PeerTables {
            rt: RoutingTable::new(),
            nt: NeighbourTable::new(),
            brt: BroadcastRoutingTable::new(),
            omt: OverlaidMulticastTable::new(owner),
            bpt: BackupParentsTable::new(),
        }
    }

    /// Forget a departed peer everywhere except the OMT (the OMT is managed
    /// by explicit protocol steps).
    pub fn forget(&mut self, peer: PeerId) {
        self.rt.remove(peer);
        self.nt.remove(peer);
        self.brt.remove(peer);
        self.bpt.remove(peer);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn no_penalty(_: PeerId, rep: f64) -> f64 {
        rep
    }

    #[test]
    fn rt_merge_under_capacity() {
        let mut rt = RoutingTable::new();
        rt.merge([PeerId(1), PeerId(2)], PeerId(9));
        assert_eq!(rt.len(), 2);
        assert!(rt.contains(PeerId(1)) && rt.contains(PeerId(2)));
    }

    #[test]
    fn rt_merge_excludes_owner() {
        let mut rt = RoutingTable::new();
        rt.merge([PeerId(9), PeerId(1)], PeerId(9));
        assert!(!rt.contains(PeerId(9)));
        assert_eq!(rt.len(), 1);
    }

    #[test]
    fn rt_merge_retains_existing_at_capacity() {
        let mut rt = RoutingTable::new();
        let existing: Vec<PeerId> = (1..=120).map(|i| PeerId(i * 1000)).collect();
        rt.merge(existing.clone(), PeerId(0));
        assert_eq!(rt.len(), 120);
        rt.merge((1..=10).map(|i| PeerId(i * 7 + 3)), PeerId(0));
        assert_eq!(rt.len(), 120);
        // brute-force retention check
        for p in existing {
            assert!(rt.contains(p), "{p} evicted by merge");
        }
    }

    #[test]
    fn rt_merge_prefers_near_entries_for_free_slots() {
        let mut rt = RoutingTable::new();
        let existing: Vec<PeerId> = (1..=118).map(|i| PeerId(i * 1_000_000)).collect();
        rt.merge(existing, PeerId(0));
        // 2 slots left; closest two of the four new peers should win
        rt.merge([PeerId(50), PeerId(10), PeerId(u64::MAX - 4), PeerId(900)], PeerId(0));
        assert_eq!(rt.len(), 120);
        assert!(rt.contains(PeerId(10)));
        assert!(rt.contains(PeerId(u64::MAX - 4))); // distance 5, wraps
        assert!(!rt.contains(PeerId(50)) && !rt.contains(PeerId(900)));
    }

    #[test]
    fn nt_displaces_highest_rtt() {
        let mut nt = NeighbourTable::new();
        for i in 0..16u64 {
            nt.update(PeerId(i), 100 + i);
        }
        nt.update(PeerId(99), 50);
        assert_eq!(nt.len(), 16);
        assert!(nt.contains(PeerId(99)));
        assert!(!nt.contains(PeerId(15))); // previous max (rtt 115)
    }

    #[test]
    fn nt_rejects_worse_candidate_when_full() {
        let mut nt = NeighbourTable::new();
        for i in 0..16u64 {
            nt.update(PeerId(i), 10 + i);
        }
        nt.update(PeerId(99), 500);
        assert!(!nt.contains(PeerId(99)));
        assert_eq!(nt.len(), 16);
    }

    #[test]
    fn nt_upserts_existing_candidate() {
        let mut nt = NeighbourTable::new();
        nt.update(PeerId(1), 80);
        nt.update(PeerId(1), 20);
        assert_eq!(nt.len(), 1);
        assert_eq!(nt.iter().next(), Some((PeerId(1), 20)));
    }

    #[test]
    fn brt_ranks_by_beacon_count() {
        let mut brt = BroadcastRoutingTable::new();
        for t in [0u64, 10, 20] {
            brt.record_beacon(PeerId(1), SimTime(t), 1000);
        }
        brt.record_beacon(PeerId(2), SimTime(30), 1000);
        let ranked = brt.ranked();
        assert_eq!(ranked[0], (PeerId(1), 3));
        assert_eq!(ranked[1], (PeerId(2), 1));
    }

    #[test]
    fn brt_keeps_top_three_of_four() {
        let mut brt = BroadcastRoutingTable::new();
        let counts = [(PeerId(1), 4u64), (PeerId(2), 3), (PeerId(3), 2), (PeerId(4), 1)];
        let mut t = 0;
        for (peer, n) in counts {
            for _ in 0..n {
                brt.record_beacon(peer, SimTime(t), 10_000);
                t += 1;
            }
        }
        let ranked = brt.ranked();
        assert_eq!(ranked.len(), 3);
        assert!(ranked.iter().all(|(p, _)| *p != PeerId(4)));
        assert_eq!(brt.best(), Some(PeerId(1)));
    }

    #[test]
    fn brt_expires_beacons_outside_window() {
        // replay a timed trace and recompute the expected counts by brute force
        let trace: Vec<(PeerId, u64)> = vec![
            (PeerId(1), 0),
            (PeerId(1), 100),
            (PeerId(2), 150),
            (PeerId(1), 5000),
            (PeerId(2), 5100),
        ];
        let window = 1000;
        let mut brt = BroadcastRoutingTable::new();
        for &(p, t) in &trace {
            brt.record_beacon(p, SimTime(t), window);
        }
        let now = 5100u64;
        let expect = |peer: PeerId| {
            trace
                .iter()
                .filter(|&&(p, t)| p == peer && t >= now.saturating_sub(window))
                .count()
        };
        let ranked = brt.ranked();
        for (p, score) in ranked {
            assert_eq!(score, expect(p));
        }
        assert_eq!(expect(PeerId(1)), 1);
        assert_eq!(expect(PeerId(2)), 1);
    }

    #[test]
    fn omt_accepts_under_capacity() {
        let mut omt = OverlaidMulticastTable::new(PeerId(0));
        omt.admit(PeerId(1), 0.5, 3, SimTime(0), no_penalty);
        omt.admit(PeerId(2), 0.5, 3, SimTime(0), no_penalty);
        let d = omt.admit(PeerId(3), 0.1, 3, SimTime(0), no_penalty);
        assert_eq!(d, AdmitDecision::Accept);
        assert_eq!(omt.child_count(), 3);
    }

    #[test]
    fn omt_replaces_weakest_on_stronger_requester() {
        let mut omt = OverlaidMulticastTable::new(PeerId(0));
        omt.admit(PeerId(1), 0.9, 3, SimTime(0), no_penalty);
        omt.admit(PeerId(2), 0.8, 3, SimTime(0), no_penalty);
        omt.admit(PeerId(3), 0.7, 3, SimTime(0), no_penalty);
        let d = omt.admit(PeerId(4), 0.75, 3, SimTime(1), no_penalty);
        match d {
            AdmitDecision::Replace { evicted, evicted_gets } => {
                assert_eq!(evicted, PeerId(3));
                let mut gets = evicted_gets;
                gets.sort();
                assert_eq!(gets, vec![PeerId(1), PeerId(2), PeerId(4)]);
            }
            other => panic!("expected Replace, got {other:?}"),
        }
        assert!(!omt.is_child(PeerId(3)));
        assert!(omt.is_child(PeerId(4)));
    }

    #[test]
    fn omt_rejects_weaker_requester_when_full() {
        let mut omt = OverlaidMulticastTable::new(PeerId(0));
        omt.admit(PeerId(1), 0.9, 3, SimTime(0), no_penalty);
        omt.admit(PeerId(2), 0.8, 3, SimTime(0), no_penalty);
        omt.admit(PeerId(3), 0.7, 3, SimTime(0), no_penalty);
        let d = omt.admit(PeerId(4), 0.6, 3, SimTime(1), no_penalty);
        match d {
            AdmitDecision::RejectFull { children } => {
                let mut c = children;
                c.sort();
                assert_eq!(c, vec![PeerId(1), PeerId(2), PeerId(3)]);
            }
            other => panic!("expected RejectFull, got {other:?}"),
        }
    }

    #[test]
    fn omt_equal_reputation_does_not_replace() {
        let mut omt = OverlaidMulticastTable::new(PeerId(0));
        omt.admit(PeerId(1), 0.5, 1, SimTime(0), no_penalty);
        let d = omt.admit(PeerId(2), 0.5, 1, SimTime(0), no_penalty);
        assert!(matches!(d, AdmitDecision::RejectFull { .. }));
    }

    #[test]
    fn omt_sweep_removes_only_stale_children() {
        let mut omt = OverlaidMulticastTable::new(PeerId(0));
        omt.set_parent(Some(PeerId(100)));
        omt.admit(PeerId(1), 0.5, 4, SimTime(0), no_penalty);
        omt.admit(PeerId(2), 0.5, 4, SimTime(2000), no_penalty);
        // fresh table: nothing removed
        assert!(omt.sweep_keepalives(SimTime(2000), 3000).is_empty());
        // peer 1 stale by exactly timeout+1
        let removed = omt.sweep_keepalives(SimTime(3001), 3000);
        assert_eq!(removed, vec![PeerId(1)]);
        assert!(omt.is_child(PeerId(2)));
        // the parent is never swept
        assert_eq!(omt.parent(), Some(PeerId(100)));
    }

    #[test]
    fn bpt_records_grandparent_once() {
        let mut bpt = BackupParentsTable::new();
        bpt.record(Some(PeerId(7)), &[]);
        assert_eq!(bpt.grandparents().collect::<Vec<_>>(), vec![PeerId(7)]);
        bpt.record(Some(PeerId(7)), &[]);
        assert_eq!(bpt.grandparent_count(), 1);
    }

    #[test]
    fn bpt_sibling_capacity_drops_oldest() {
        let mut bpt = BackupParentsTable::new();
        let first: Vec<PeerId> = (1..=8).map(PeerId).collect();
        bpt.record(None, &first);
        bpt.record(None, &[PeerId(100), PeerId(101)]);
        assert_eq!(bpt.sibling_count(), 8);
        let sibs: Vec<PeerId> = bpt.siblings().collect();
        assert_eq!(&sibs[0..2], &[PeerId(100), PeerId(101)]);
        // the two oldest (recorded last within the first batch) fell off
        assert!(!sibs.contains(&PeerId(7)));
        assert!(!sibs.contains(&PeerId(8)));
    }

    #[test]
    fn admit_is_deterministic() {
        let mut a = OverlaidMulticastTable::new(PeerId(0));
        for i in 1..=4u64 {
            a.admit(PeerId(i), 0.1 * i as f64, 4, SimTime(0), no_penalty);
        }
        let mut b = a.clone();
        let da = a.admit(PeerId(50), 0.35, 4, SimTime(5), no_penalty);
        let db = b.admit(PeerId(50), 0.35, 4, SimTime(5), no_penalty);
        assert_eq!(da, db);
        assert_eq!(a.child_ids(), b.child_ids());
    }

    #[test]
    fn random_operation_sequences_respect_capacities() {
        let mut rng = SplitMix64::new(0x7ab1e5);
        let mut tables = PeerTables::new(PeerId(42));
        let fanout = 4;
        for step in 0..10_000u64 {
            let now = SimTime(step * 10);
            match rng.next_u64() % 6 {
                0 => {
                    let batch: Vec<PeerId> =
                        (0..rng.next_range(1, 20)).map(|_| PeerId(rng.next_u64())).collect();
                    tables.rt.merge(batch, PeerId(42));
                }
                1 => tables.nt.update(PeerId(rng.next_range(0, 50)), rng.next_range(1, 400)),
                2 => tables.brt.record_beacon(
                    PeerId(rng.next_range(0, 10)),
                    now,
                    10_000,
                ),
                3 => {
                    let requester = PeerId(1000 + rng.next_range(0, 30));
                    if !tables.omt.is_child(requester)
                        && Some(requester) != tables.omt.parent()
                        && requester != PeerId(42)
                    {
                        let before = tables.omt.min_child_reputation();
                        let was_full = tables.omt.child_count() >= fanout;
                        let d = tables.omt.admit(
                            requester,
                            rng.next_f64(),
                            fanout,
                            now,
                            no_penalty,
                        );
                        if was_full {
                            assert!(!matches!(d, AdmitDecision::Accept));
                        }
                        if let AdmitDecision::Replace { .. } = d {
                            let after = tables.omt.min_child_reputation().unwrap();
                            assert!(after > before.unwrap());
                        }
                    }
                }
                4 => {
                    tables.omt.sweep_keepalives(now, 5000);
                }
                _ => {
                    let gp = (rng.next_u64() % 2 == 0).then(|| PeerId(rng.next_range(0, 20)));
                    let sibs: Vec<PeerId> =
                        (0..rng.next_range(0, 5)).map(|_| PeerId(rng.next_range(0, 40))).collect();
                    tables.bpt.record(gp, &sibs);
                }
            }
            assert!(tables.rt.len() <= RT_CAPACITY);
            assert!(tables.nt.len() <= NT_CAPACITY);
            assert!(tables.brt.len() <= BRT_CAPACITY);
            assert!(tables.omt.child_count() <= fanout);
            assert!(tables.bpt.grandparent_count() <= BPT_GRANDPARENT_CAPACITY);
            assert!(tables.bpt.sibling_count() <= BPT_SIBLING_CAPACITY);
        }
    }
}

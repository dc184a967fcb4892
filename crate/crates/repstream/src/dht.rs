//! Reputation layer: replica placement on the ring, holder-side record
//! stores, update verification, reporter audits, and the stream registry.
//!
//! Each subject's record lives on the three live peers closest on the ring
//! to the hash of the subject id. Reporters fan the same update to all three
//! holders; holders verify a report against the reporter's own queried
//! reputation before letting it into the aggregation, and buffer updates in
//! a short reorder window so every holder applies the same sequence at the
//! same report timestamps and the copies stay identical.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::id::{circular_distance_keys, derive_reputation_layer, media_layer, LayerId, PeerId, StreamId};
use crate::message::ReportLogEntry;
use crate::reputation::{aggregate, decay_only, DecayParams, RepReport, Reputation};
use crate::time::SimTime;

/// Number of replica holders per subject.
pub const REPLICA_COUNT: usize = 3;

/// Bounded reporter log per record.
pub const REPORT_LOG_CAPACITY: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum DhtError {
    #[error("no live peers to hold replicas")]
    NoHolders,
    #[error("stream {0} already registered")]
    DuplicateStream(StreamId),
    #[error("stream {0} not registered")]
    UnknownStream(StreamId),
}

/// The live peers holding `subject`'s record, closest to the record key
/// first.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicaSet {
    pub subject: PeerId,
    pub holders: Vec<PeerId>,
}

/// Pick the `REPLICA_COUNT` live peers nearest to the subject's record key,
/// ties broken by id.
pub fn locate_replicas<'a, I>(subject: PeerId, live_peers: I) -> Result<ReplicaSet, DhtError>
where
    I: IntoIterator<Item = &'a PeerId>,
{
    let key = subject.record_key();
    let mut candidates: Vec<PeerId> = live_peers.into_iter().copied().collect();
    if candidates.is_empty() {
        return Err(DhtError::NoHolders);
    }
    candidates.sort_by_key(|p| (circular_distance_keys(p.key(), key), *p));
    candidates.truncate(REPLICA_COUNT);
    Ok(ReplicaSet {
        subject,
        holders: candidates,
    })
}

/// One stored reputation record at a holder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RepRecord {
    pub subject: PeerId,
    pub reputation: Reputation,
    /// Source peers never decay; their record is pinned at 1.0.
    pub pinned: bool,
    /// Recent reports, oldest first, bounded.
    pub reporters: VecDeque<ReportLogEntry>,
}

impl RepRecord {
    pub fn new(subject: PeerId, initial: f64, at: SimTime) -> Self {
        RepRecord {
            subject,
            reputation: Reputation::new(initial, at),
            pinned: false,
            reporters: VecDeque::new(),
        }
    }

    pub fn pinned(subject: PeerId, at: SimTime) -> Self {
        RepRecord {
            subject,
            reputation: Reputation::new(1.0, at),
            pinned: true,
            reporters: VecDeque::new(),
        }
    }

    /// Current value as seen at `now` (decayed, unless pinned).
    pub fn value_at(&self, now: SimTime, params: DecayParams) -> f64 {
        if self.pinned {
            return 1.0;
        }
        decay_only(self.reputation, now, params)
            .map(|r| r.value)
            .unwrap_or(self.reputation.value)
    }

    fn push_log(&mut self, entry: ReportLogEntry) {
        self.reporters.push_back(entry);
        while self.reporters.len() > REPORT_LOG_CAPACITY {
            self.reporters.pop_front();
        }
    }
}

/// Why a report was left out of the aggregation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpdateOutcome {
    Included,
    /// Value outside [0,1].
    Malformed,
    /// Claimed value too far from the reporter's queried reputation.
    Mismatched,
    /// Arrived with a timestamp older than the record state; dropped.
    Stale,
}

/// Apply a verified report to a record. The aggregation runs at the report's
/// own timestamp so that every holder computes the identical result
/// regardless of delivery order or latency.
pub fn apply_update(
    record: &mut RepRecord,
    report: &RepReport,
    params: DecayParams,
    included: bool,
) -> UpdateOutcome {
    debug_assert_eq!(report.target, record.subject);
    if !(0.0..=1.0).contains(&report.reported_value) {
        return UpdateOutcome::Malformed;
    }
    let outcome = if !included {
        UpdateOutcome::Mismatched
    } else if record.pinned {
        // pinned records log reports but never move
        UpdateOutcome::Included
    } else {
        match aggregate(record.reputation, report, report.at, params) {
            Ok(next) => {
                record.reputation = next;
                UpdateOutcome::Included
            }
            Err(_) => return UpdateOutcome::Stale,
        }
    };
    record.push_log(ReportLogEntry {
        reporter: report.reporter,
        value: report.reported_value,
        at: report.at,
        included: matches!(outcome, UpdateOutcome::Included),
    });
    outcome
}

/// Result of auditing the reporters behind one record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditResult {
    /// Expected children with no report in the window.
    pub missing: Vec<PeerId>,
    /// Reporters whose claimed value strayed beyond the tolerance from their
    /// own queried reputation.
    pub mismatched: Vec<PeerId>,
}

/// Compare the record's reporter log against the set of children expected to
/// report. `queried_rep` supplies the median queried reputation of each
/// reporter; reporters without a queryable value are skipped for the
/// mismatch check.
pub fn audit_reporters(
    log: &[ReportLogEntry],
    expected_children: &[PeerId],
    window_start: SimTime,
    tolerance: f64,
    mut queried_rep: impl FnMut(PeerId) -> Option<f64>,
) -> AuditResult {
    let mut result = AuditResult::default();
    for &child in expected_children {
        let reported_in_window = log
            .iter()
            .any(|e| e.reporter == child && e.at >= window_start);
        if !reported_in_window {
            result.missing.push(child);
        }
    }
    let mut seen = BTreeMap::new();
    for entry in log.iter().filter(|e| e.at >= window_start) {
        seen.entry(entry.reporter).or_insert_with(Vec::new).push(entry.value);
    }
    for (reporter, values) in seen {
        if let Some(actual) = queried_rep(reporter) {
            let worst = values
                .iter()
                .map(|v| (v - actual).abs())
                .fold(0.0f64, f64::max);
            if worst > tolerance {
                result.mismatched.push(reporter);
            }
        }
    }
    result
}

/// Per-holder replica store with a reorder buffer.
///
/// Updates are buffered until `reorder_window_ms` has passed since their
/// report timestamp, then applied in (timestamp, reporter) order. All holders
/// of a subject therefore apply the same totally-ordered sequence.
#[derive(Clone, Debug, Default)]
pub struct ReplicaStore {
    records: BTreeMap<PeerId, RepRecord>,
    pending: BTreeMap<PeerId, Vec<PendingUpdate>>,
}

#[derive(Clone, Debug)]
struct PendingUpdate {
    report: RepReport,
    /// Verification verdict, once known.
    included: Option<bool>,
}

impl ReplicaStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_record(&mut self, record: RepRecord) {
        self.records.insert(record.subject, record);
    }

    pub fn drop_subject(&mut self, subject: PeerId) {
        self.records.remove(&subject);
        self.pending.remove(&subject);
    }

    pub fn record(&self, subject: PeerId) -> Option<&RepRecord> {
        self.records.get(&subject)
    }

    pub fn subjects(&self) -> impl Iterator<Item = PeerId> + '_ {
        self.records.keys().copied()
    }

    /// Queue a report; it is applied once its verification verdict is set
    /// and the reorder window has elapsed.
    pub fn enqueue(&mut self, report: RepReport) {
        self.pending.entry(report.target).or_default().push(PendingUpdate {
            report,
            included: None,
        });
    }

    /// Record the verification verdict for a queued report.
    pub fn set_verdict(&mut self, target: PeerId, reporter: PeerId, at: SimTime, included: bool) {
        if let Some(queue) = self.pending.get_mut(&target) {
            for item in queue.iter_mut() {
                if item.report.reporter == reporter
                    && item.report.at == at
                    && item.included.is_none()
                {
                    item.included = Some(included);
                    break;
                }
            }
        }
    }

    /// Apply every verified update older than the reorder window, in report
    /// timestamp order. Returns (reporter, outcome) pairs for metrics.
    pub fn flush(
        &mut self,
        now: SimTime,
        reorder_window_ms: u64,
        params: DecayParams,
    ) -> Vec<(PeerId, PeerId, UpdateOutcome)> {
        let mut applied = Vec::new();
        let cutoff = now.millis().saturating_sub(reorder_window_ms);
        for (subject, queue) in self.pending.iter_mut() {
            let Some(record) = self.records.get_mut(subject) else {
                queue.clear();
                continue;
            };
            let mut ready: Vec<PendingUpdate> = Vec::new();
            queue.retain(|item| {
                if item.included.is_some() && item.report.at.millis() <= cutoff {
                    ready.push(item.clone());
                    false
                } else {
                    true
                }
            });
            ready.sort_by_key(|u| (u.report.at, u.report.reporter));
            for update in ready {
                let outcome = apply_update(
                    record,
                    &update.report,
                    params,
                    update.included.unwrap_or(false),
                );
                applied.push((update.report.reporter, *subject, outcome));
            }
        }
        self.pending.retain(|_, q| !q.is_empty());
        applied
    }

    /// Decayed value for a query reply; `None` when the subject is unknown
    /// here.
    pub fn answer(&self, subject: PeerId, now: SimTime, params: DecayParams) -> Option<f64> {
        self.records.get(&subject).map(|r| r.value_at(now, params))
    }
}

/// Stream descriptor published at the bootstrap node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamEntry {
    pub stream: StreamId,
    pub source: PeerId,
    pub media_layer: LayerId,
    pub reputation_layer: LayerId,
    pub descriptor: String,
}

/// streamID -> (source, media layer, reputation layer, descriptor).
#[derive(Clone, Debug, Default)]
pub struct LayerRegistry {
    streams: BTreeMap<StreamId, StreamEntry>,
}

impl LayerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_stream(
        &mut self,
        stream: StreamId,
        source: PeerId,
        descriptor: &str,
    ) -> Result<&StreamEntry, DhtError> {
        if self.streams.contains_key(&stream) {
            return Err(DhtError::DuplicateStream(stream));
        }
        let entry = StreamEntry {
            stream,
            source,
            media_layer: media_layer(stream),
            reputation_layer: derive_reputation_layer(stream),
            descriptor: descriptor.to_string(),
        };
        Ok(self.streams.entry(stream).or_insert(entry))
    }

    pub fn lookup(&self, stream: StreamId) -> Result<&StreamEntry, DhtError> {
        self.streams.get(&stream).ok_or(DhtError::UnknownStream(stream))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::LayerKind;
    use crate::rng::SplitMix64;

    const PARAMS: DecayParams = DecayParams { alpha: 1e-4 };

    fn report(target: u64, reporter: u64, value: f64, at: u64) -> RepReport {
        RepReport {
            target: PeerId(target),
            reporter: PeerId(reporter),
            reported_value: value,
            at: SimTime(at),
        }
    }

    #[test]
    fn single_live_peer_holds_everything() {
        let live = [PeerId(7)];
        let set = locate_replicas(PeerId(1234), live.iter()).unwrap();
        assert_eq!(set.holders, vec![PeerId(7)]);
    }

    #[test]
    fn exact_key_match_ranks_first() {
        let subject = PeerId(42);
        let exact = PeerId(subject.record_key());
        let live = [PeerId(1), exact, PeerId(2)];
        let set = locate_replicas(subject, live.iter()).unwrap();
        assert_eq!(set.holders[0], exact);
    }

    #[test]
    fn placement_matches_brute_force_oracle() {
        let mut rng = SplitMix64::new(0xd47);
        let live: Vec<PeerId> = (0..10).map(|_| PeerId(rng.next_u64())).collect();
        for trial in 0..50u64 {
            let subject = PeerId(rng.next_u64().wrapping_add(trial));
            let set = locate_replicas(subject, live.iter()).unwrap();
            // brute force: scan all distances
            let key = subject.record_key();
            let mut expected = live.clone();
            expected.sort_by_key(|p| (circular_distance_keys(p.key(), key), *p));
            expected.truncate(3);
            assert_eq!(set.holders, expected);
        }
    }

    #[test]
    fn empty_network_has_no_holders() {
        assert_eq!(locate_replicas(PeerId(1), [].iter()), Err(DhtError::NoHolders));
    }

    #[test]
    fn rehoming_after_holder_loss_matches_oracle() {
        let mut live: Vec<PeerId> = (1..=10).map(|i| PeerId(i * 1_000_003)).collect();
        let subject = PeerId(77);
        let before = locate_replicas(subject, live.iter()).unwrap();
        let gone = before.holders[0];
        live.retain(|p| *p != gone);
        let after = locate_replicas(subject, live.iter()).unwrap();
        let key = subject.record_key();
        let mut expected = live.clone();
        expected.sort_by_key(|p| (circular_distance_keys(p.key(), key), *p));
        expected.truncate(3);
        assert_eq!(after.holders, expected);
        assert!(!after.holders.contains(&gone));
    }

    #[test]
    fn update_matches_aggregate_oracle() {
        // fresh record 0.5, report 0.8 after alpha*tau = 0.1 -> ~0.69579
        let mut record = RepRecord::new(PeerId(1), 0.5, SimTime(0));
        let outcome = apply_update(&mut record, &report(1, 2, 0.8, 1000), PARAMS, true);
        assert_eq!(outcome, UpdateOutcome::Included);
        assert!((record.reputation.value - 0.6957881716766555).abs() < 1e-15);
        assert_eq!(record.reporters.len(), 1);
    }

    #[test]
    fn malformed_value_leaves_record_unchanged() {
        let mut record = RepRecord::new(PeerId(1), 0.5, SimTime(0));
        let outcome = apply_update(&mut record, &report(1, 2, 1.5, 1000), PARAMS, true);
        assert_eq!(outcome, UpdateOutcome::Malformed);
        assert_eq!(record.reputation.value, 0.5);
        assert!(record.reporters.is_empty());
    }

    #[test]
    fn identical_inputs_give_identical_replicas() {
        let mut a = RepRecord::new(PeerId(1), 0.5, SimTime(0));
        let mut b = RepRecord::new(PeerId(1), 0.5, SimTime(0));
        for r in [report(1, 2, 0.8, 1000), report(1, 3, 0.6, 1500)] {
            apply_update(&mut a, &r, PARAMS, true);
            apply_update(&mut b, &r, PARAMS, true);
        }
        assert_eq!(a.reputation.value.to_bits(), b.reputation.value.to_bits());
    }

    #[test]
    fn reorder_buffer_makes_replicas_order_independent() {
        let r1 = report(1, 2, 0.8, 1000);
        let r2 = report(1, 3, 0.6, 1200);
        let mut store_a = ReplicaStore::new();
        let mut store_b = ReplicaStore::new();
        for s in [&mut store_a, &mut store_b] {
            s.insert_record(RepRecord::new(PeerId(1), 0.5, SimTime(0)));
        }
        // holder A sees r1 then r2; holder B sees them reversed
        store_a.enqueue(r1);
        store_a.enqueue(r2);
        store_b.enqueue(r2);
        store_b.enqueue(r1);
        for s in [&mut store_a, &mut store_b] {
            s.set_verdict(PeerId(1), PeerId(2), SimTime(1000), true);
            s.set_verdict(PeerId(1), PeerId(3), SimTime(1200), true);
            s.flush(SimTime(2000), 200, PARAMS);
        }
        let a = store_a.record(PeerId(1)).unwrap().reputation.value;
        let b = store_b.record(PeerId(1)).unwrap().reputation.value;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn mismatched_report_is_logged_but_not_aggregated() {
        let mut record = RepRecord::new(PeerId(1), 0.5, SimTime(0));
        let outcome = apply_update(&mut record, &report(1, 2, 0.0, 1000), PARAMS, false);
        assert_eq!(outcome, UpdateOutcome::Mismatched);
        assert_eq!(record.reputation.value, 0.5);
        assert_eq!(record.reputation.updated_at, SimTime(0));
        assert_eq!(record.reporters.len(), 1);
        assert!(!record.reporters[0].included);
    }

    #[test]
    fn pinned_record_never_moves() {
        let mut record = RepRecord::pinned(PeerId(9), SimTime(0));
        apply_update(&mut record, &report(9, 2, 0.1, 5000), PARAMS, true);
        assert_eq!(record.value_at(SimTime(1_000_000), PARAMS), 1.0);
    }

    #[test]
    fn stored_value_decays_without_updates() {
        let record = RepRecord::new(PeerId(1), 0.5, SimTime(0));
        let t = SimTime(10_000);
        let expected = 0.5 * (-PARAMS.alpha * 10_000.0).exp();
        assert!((record.value_at(t, PARAMS) - expected).abs() < 1e-15);
    }

    #[test]
    fn audit_all_good_is_empty() {
        let log = vec![
            ReportLogEntry { reporter: PeerId(2), value: 0.6, at: SimTime(900), included: true },
            ReportLogEntry { reporter: PeerId(3), value: 0.7, at: SimTime(950), included: true },
        ];
        let result = audit_reporters(
            &log,
            &[PeerId(2), PeerId(3)],
            SimTime(0),
            0.2,
            |p| Some(if p == PeerId(2) { 0.6 } else { 0.7 }),
        );
        assert!(result.missing.is_empty());
        assert!(result.mismatched.is_empty());
    }

    #[test]
    fn silent_child_is_missing() {
        let result = audit_reporters(&[], &[PeerId(5)], SimTime(0), 0.2, |_| Some(0.5));
        assert_eq!(result.missing, vec![PeerId(5)]);
    }

    #[test]
    fn lying_reporter_is_mismatched() {
        // child claims 0.0 while its queried reputation is 0.6
        let log = vec![ReportLogEntry {
            reporter: PeerId(2),
            value: 0.0,
            at: SimTime(500),
            included: false,
        }];
        let result = audit_reporters(&log, &[PeerId(2)], SimTime(0), 0.2, |_| Some(0.6));
        assert_eq!(result.mismatched, vec![PeerId(2)]);
        assert!(result.missing.is_empty());
    }

    #[test]
    fn registry_round_trip_and_conflicts() {
        let mut reg = LayerRegistry::new();
        let stream = StreamId(15073993080450232516);
        let entry = reg.register_stream(stream, PeerId(1), "talk").unwrap().clone();
        assert_eq!(entry.media_layer.key, stream.key());
        assert_eq!(entry.media_layer.kind, LayerKind::MediaLayer);
        assert_eq!(entry.reputation_layer.key, 6431129295464587565);
        assert_eq!(entry.reputation_layer.kind, LayerKind::ReputationLayer);
        assert_eq!(
            reg.register_stream(stream, PeerId(2), "other"),
            Err(DhtError::DuplicateStream(stream))
        );
        assert_eq!(reg.lookup(StreamId(1)), Err(DhtError::UnknownStream(StreamId(1))));
        assert_eq!(reg.lookup(stream).unwrap().source, PeerId(1));
    }
}

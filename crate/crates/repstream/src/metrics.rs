//! Run metrics: reputation series, topology snapshots, message counters,
//! per-class payoff summary, and the CSV/JSON writers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::dht::UpdateOutcome;
use crate::id::PeerId;
use crate::node::{ChunkStats, PeerState};
use crate::reputation::DecayParams;
use crate::sim::MessageCounters;
use crate::time::SimTime;

/// One parent-pointer transition observed on a peer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TopologyChange {
    pub peer: PeerId,
    pub at: SimTime,
    pub old: Option<PeerId>,
    pub new: Option<PeerId>,
}

/// Verification tallies for one reporter.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct OutcomeCounts {
    pub included: u64,
    pub mismatched: u64,
    pub malformed: u64,
    pub stale: u64,
}

impl OutcomeCounts {
    pub fn total(&self) -> u64 {
        self.included + self.mismatched + self.malformed + self.stale
    }

    pub fn inclusion_fraction(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.included as f64 / self.total() as f64
        }
    }
}

/// Aggregate payoff realization for one behavior class.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ClassSummary {
    pub population: usize,
    pub mean_final_reputation: f64,
    /// Fraction of this class's reputation reports let into the aggregation.
    pub report_inclusion_fraction: f64,
    pub reports_included: u64,
    pub reports_total: u64,
    pub fraction_detached: f64,
    /// Leaf position or detached entirely.
    pub fraction_leaf_or_detached: f64,
}

/// Final roster entry for one peer.
#[derive(Clone, Debug, Serialize)]
pub struct PeerOutcome {
    pub peer: PeerId,
    pub class: &'static str,
    pub final_reputation: f64,
    pub attached: bool,
    pub children: usize,
    pub departed: bool,
    pub chunks: ChunkStats,
    pub mean_chunk_delay_ms: f64,
}

/// Everything a run leaves behind.
pub struct MetricsLog {
    period_ms: u64,
    /// (time, peer, reputation), append-ordered by time.
    pub reputation_series: Vec<(SimTime, PeerId, f64)>,
    /// (time, child->parent edges), one entry per sample.
    pub topology_snapshots: Vec<(SimTime, Vec<(PeerId, PeerId)>)>,
    /// Parent transitions in event order.
    pub topology_changes: Vec<TopologyChange>,
    /// Verification outcomes per reporter.
    pub outcomes_by_reporter: BTreeMap<PeerId, OutcomeCounts>,
    /// Silent departures (peer, time).
    pub departures: Vec<(PeerId, SimTime)>,
    /// Interior parents removed by churn selection (peer, time).
    pub removed_parents: Vec<(PeerId, SimTime)>,

    last_parent: BTreeMap<PeerId, Option<PeerId>>,

    // filled by finalize()
    pub class_summary: BTreeMap<&'static str, ClassSummary>,
    pub roster: Vec<PeerOutcome>,
    pub final_reputations: BTreeMap<PeerId, f64>,
    pub message_sent: BTreeMap<String, u64>,
    pub message_delivered: BTreeMap<String, u64>,
    pub message_dropped: BTreeMap<String, u64>,
    pub in_flight_at_end: u64,
    pub trace_hash: u64,
    pub finished_at: SimTime,
    pub source: Option<PeerId>,
    pub scenario_json: Option<serde_json::Value>,
}

impl MetricsLog {
    pub fn new(period_ms: u64) -> Self {
        MetricsLog {
            period_ms,
            reputation_series: Vec::new(),
            topology_snapshots: Vec::new(),
            topology_changes: Vec::new(),
            outcomes_by_reporter: BTreeMap::new(),
            departures: Vec::new(),
            removed_parents: Vec::new(),
            last_parent: BTreeMap::new(),
            class_summary: BTreeMap::new(),
            roster: Vec::new(),
            final_reputations: BTreeMap::new(),
            message_sent: BTreeMap::new(),
            message_delivered: BTreeMap::new(),
            message_dropped: BTreeMap::new(),
            in_flight_at_end: 0,
            trace_hash: 0,
            finished_at: SimTime::ZERO,
            source: None,
            scenario_json: None,
        }
    }

    pub fn period_ms(&self) -> u64 {
        self.period_ms
    }

    pub fn note_departure(&mut self, peer: PeerId, at: SimTime) {
        self.departures.push((peer, at));
        self.last_parent.remove(&peer);
    }

    pub fn note_removed_parent(&mut self, peer: PeerId, at: SimTime) {
        self.removed_parents.push((peer, at));
    }

    pub fn note_update_outcome(&mut self, reporter: PeerId, _subject: PeerId, outcome: UpdateOutcome) {
        let counts = self.outcomes_by_reporter.entry(reporter).or_default();
        match outcome {
            UpdateOutcome::Included => counts.included += 1,
            UpdateOutcome::Mismatched => counts.mismatched += 1,
            UpdateOutcome::Malformed => counts.malformed += 1,
            UpdateOutcome::Stale => counts.stale += 1,
        }
    }

    /// Record a parent transition if the pointer moved since last seen.
    pub fn track_parent(&mut self, peer: PeerId, parent: Option<PeerId>, now: SimTime) {
        let previous = self.last_parent.insert(peer, parent);
        let old = previous.unwrap_or(None);
        if old != parent {
            self.topology_changes.push(TopologyChange {
                peer,
                at: now,
                old,
                new: parent,
            });
        }
    }

    /// Append one sample of the reputation series and the topology snapshot.
    pub fn sample(
        &mut self,
        at: SimTime,
        reputations: BTreeMap<PeerId, f64>,
        edges: Vec<(PeerId, PeerId)>,
    ) {
        for (peer, value) in reputations {
            self.reputation_series.push((at, peer, value));
        }
        self.topology_snapshots.push((at, edges));
    }

    /// Reputation series of a single peer: (time, value).
    pub fn series_for(&self, peer: PeerId) -> Vec<(SimTime, f64)> {
        self.reputation_series
            .iter()
            .filter(|(_, p, _)| *p == peer)
            .map(|(t, _, v)| (*t, *v))
            .collect()
    }

    /// Close the books: per-class payoffs, final roster, counters.
    #[allow(clippy::too_many_arguments)]
    pub fn finalize(
        &mut self,
        peers: &BTreeMap<PeerId, PeerState>,
        policies: &BTreeMap<PeerId, crate::node::BehaviorPolicy>,
        source: PeerId,
        counters: &MessageCounters,
        in_flight: u64,
        trace_hash: u64,
        now: SimTime,
        params: DecayParams,
        holder_map: &BTreeMap<PeerId, Vec<PeerId>>,
    ) {
        self.trace_hash = trace_hash;
        self.finished_at = now;
        self.in_flight_at_end = in_flight;
        self.source = Some(source);
        for (k, v) in &counters.sent {
            self.message_sent.insert((*k).to_string(), *v);
        }
        for (k, v) in &counters.delivered {
            self.message_delivered.insert((*k).to_string(), *v);
        }
        for (k, v) in &counters.dropped_departed {
            *self.message_dropped.entry((*k).to_string()).or_default() += *v;
        }
        for (k, v) in &counters.dropped_random {
            *self.message_dropped.entry((*k).to_string()).or_default() += *v;
        }

        // final reputation = median over the holders' decayed copies
        for (peer, holders) in holder_map {
            let mut values = Vec::new();
            for holder in holders {
                if let Some(state) = peers.get(holder) {
                    if let Some(v) = state.store.answer(*peer, now, params) {
                        values.push(v);
                    }
                }
            }
            if let Ok(v) = crate::reputation::resolve_replicas(&values, 3) {
                self.final_reputations.insert(*peer, v);
            }
        }

        let mut acc: BTreeMap<&'static str, (Vec<f64>, usize, usize, usize)> = BTreeMap::new();
        for (id, state) in peers {
            if *id == source {
                continue;
            }
            let Some(policy) = policies.get(id) else { continue };
            let class = policy.class_name();
            let outcome = PeerOutcome {
                peer: *id,
                class,
                final_reputation: self.final_reputations.get(id).copied().unwrap_or(0.0),
                attached: state.parent().is_some(),
                children: state.child_count(),
                departed: state.departed,
                chunks: state.chunk_stats,
                mean_chunk_delay_ms: state.chunk_stats.mean_delay_ms(),
            };
            if !state.departed {
                let entry = acc.entry(class).or_default();
                entry.0.push(outcome.final_reputation);
                if !outcome.attached {
                    entry.1 += 1;
                }
                if !outcome.attached || outcome.children == 0 {
                    entry.2 += 1;
                }
                entry.3 += 1;
            }
            self.roster.push(outcome);
        }
        for (class, (reps, detached, leafish, population)) in acc {
            let mean = if reps.is_empty() {
                0.0
            } else {
                reps.iter().sum::<f64>() / reps.len() as f64
            };
            let mut included = 0;
            let mut total = 0;
            for (peer, counts) in &self.outcomes_by_reporter {
                if policies.get(peer).map(|p| p.class_name()) == Some(class) {
                    included += counts.included;
                    total += counts.total();
                }
            }
            self.class_summary.insert(
                class,
                ClassSummary {
                    population,
                    mean_final_reputation: mean,
                    report_inclusion_fraction: if total == 0 {
                        0.0
                    } else {
                        included as f64 / total as f64
                    },
                    reports_included: included,
                    reports_total: total,
                    fraction_detached: detached as f64 / population.max(1) as f64,
                    fraction_leaf_or_detached: leafish as f64 / population.max(1) as f64,
                },
            );
        }
    }

    // ------------------------------------------------------------------
    // writers
    // ------------------------------------------------------------------

    /// Long-format series: `time_ms,peer,metric,value`.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("time_ms,peer,metric,value\n");
        for (at, peer, value) in &self.reputation_series {
            writeln!(out, "{},{},reputation,{}", at.millis(), peer.key(), value)
                .expect("string write");
        }
        out
    }

    /// Edge list per snapshot: `time_ms,child,parent`.
    pub fn topology_csv(&self) -> String {
        let mut out = String::from("time_ms,child,parent\n");
        for (at, edges) in &self.topology_snapshots {
            for (child, parent) in edges {
                writeln!(out, "{},{},{}", at.millis(), child.key(), parent.key())
                    .expect("string write");
            }
        }
        out
    }

    /// The run summary as a JSON value.
    pub fn summary_json(&self) -> serde_json::Value {
        let classes: serde_json::Value = serde_json::to_value(
            self.class_summary
                .iter()
                .map(|(k, v)| ((*k).to_string(), v))
                .collect::<BTreeMap<String, &ClassSummary>>(),
        )
        .expect("summary serializes");
        serde_json::json!({
            "finished_at_ms": self.finished_at.millis(),
            "trace_hash": format!("{:016x}", self.trace_hash),
            "source": self.source.map(|s| s.key()),
            "payoff_summary": classes,
            "message_counters": {
                "sent": self.message_sent,
                "delivered": self.message_delivered,
                "dropped": self.message_dropped,
                "in_flight_at_end": self.in_flight_at_end,
            },
            "roster": serde_json::to_value(&self.roster).expect("roster serializes"),
            "departures": self.departures.iter().map(|(p, t)| serde_json::json!({
                "peer": p.key(), "at_ms": t.millis(),
            })).collect::<Vec<_>>(),
            "note": "quantitative bounds in acceptance tests are self-generated regression pins; the architecture itself defines no reference numbers",
            "parameters": self.scenario_json,
        })
    }

    /// Write metrics.csv, topology.csv and summary.json into a directory.
    pub fn write_to_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        fs::write(dir.join("topology.csv"), self.topology_csv())?;
        let summary = serde_json::to_string_pretty(&self.summary_json()).expect("summary");
        fs::write(dir.join("summary.json"), summary)?;
        Ok(())
    }
}

/// Parse a metrics.csv produced by [`MetricsLog::metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Vec<(SimTime, PeerId, String, f64)> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let mut fields = line.split(',');
            let time = fields.next().expect("time").parse::<u64>().expect("u64");
            let peer = fields.next().expect("peer").parse::<u64>().expect("u64");
            let metric = fields.next().expect("metric").to_string();
            let value = fields.next().expect("value").parse::<f64>().expect("f64");
            (SimTime(time), PeerId(peer), metric, value)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let mut log = MetricsLog::new(1000);
        let mut reps = BTreeMap::new();
        reps.insert(PeerId(1), 0.1234567890123456789);
        reps.insert(PeerId(2), 1.0 / 3.0);
        log.sample(SimTime(1000), reps.clone(), vec![(PeerId(2), PeerId(1))]);
        let text = log.metrics_csv();
        let parsed = parse_metrics_csv(&text);
        assert_eq!(parsed.len(), 2);
        for (t, p, metric, v) in parsed {
            assert_eq!(t, SimTime(1000));
            assert_eq!(metric, "reputation");
            assert_eq!(v.to_bits(), reps[&p].to_bits(), "exact f64 round trip");
        }
    }

    #[test]
    fn csv_rows_are_time_ordered() {
        let mut log = MetricsLog::new(1000);
        for t in [0u64, 1000, 2000] {
            let mut reps = BTreeMap::new();
            reps.insert(PeerId(7), t as f64 / 10_000.0);
            log.sample(SimTime(t), reps, vec![]);
        }
        let parsed = parse_metrics_csv(&log.metrics_csv());
        let times: Vec<u64> = parsed.iter().map(|(t, ..)| t.millis()).collect();
        let mut sorted = times.clone();
        sorted.sort();
        assert_eq!(times, sorted);
    }

    #[test]
    fn parent_transitions_are_tracked_once() {
        let mut log = MetricsLog::new(1000);
        log.track_parent(PeerId(1), None, SimTime(0));
        log.track_parent(PeerId(1), Some(PeerId(9)), SimTime(5));
        log.track_parent(PeerId(1), Some(PeerId(9)), SimTime(6));
        log.track_parent(PeerId(1), None, SimTime(9));
        assert_eq!(log.topology_changes.len(), 2);
        assert_eq!(log.topology_changes[0].new, Some(PeerId(9)));
        assert_eq!(log.topology_changes[1].new, None);
    }
}

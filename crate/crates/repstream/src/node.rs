//! Per-peer protocol state machine.
//!
//! A peer is a single-threaded event handler: each delivered message or
//! timer produces a state mutation plus an ordered list of outbound actions.
//! The source emits beacons and chunks; subscribers join the multicast tree,
//! forward the feed to their children, report for their parent, audit their
//! own reporters and climb toward better-reputed grandparents. Behavior
//! policies change only what a peer sends: free riders neither forward nor
//! report, malicious peers forward but falsify every reputation value.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::dht::{audit_reporters, ReplicaStore, UpdateOutcome, REPLICA_COUNT};
use crate::id::{PeerId, StreamId};
use crate::message::{Message, MessageKind, ReportLogEntry};
use crate::reputation::{resolve_replicas, DecayParams, RepReport};
use crate::tables::{AdmitDecision, PeerTables};
use crate::time::SimTime;

/// Either the stream origin or a subscriber/forwarder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeerRole {
    Source,
    Subscriber,
}

/// How a malicious peer falsifies the values it sends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStrategy {
    AlwaysZero,
    AlwaysOne,
    Invert,
}

impl ReportStrategy {
    fn falsify(self, truth: f64) -> f64 {
        match self {
            ReportStrategy::AlwaysZero => 0.0,
            ReportStrategy::AlwaysOne => 1.0,
            ReportStrategy::Invert => 1.0 - truth,
        }
    }
}

/// What a peer actually does with the feed and the reputation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BehaviorPolicy {
    /// Follows the protocol honestly within capacity.
    Altruistic,
    /// Consumes the feed without forwarding chunks or sending any
    /// reputation updates.
    FreeRider,
    /// Forwards chunks but falsifies every reputation value it sends.
    Malicious(ReportStrategy),
}

impl BehaviorPolicy {
    pub fn forwards_chunks(self) -> bool {
        !matches!(self, BehaviorPolicy::FreeRider)
    }

    pub fn sends_reputation(self) -> bool {
        !matches!(self, BehaviorPolicy::FreeRider)
    }

    pub fn class_name(self) -> &'static str {
        match self {
            BehaviorPolicy::Altruistic => "altruistic",
            BehaviorPolicy::FreeRider => "free_rider",
            BehaviorPolicy::Malicious(_) => "malicious",
        }
    }

    /// The value this policy puts on the wire given the honest one.
    fn outgoing_value(self, truth: f64) -> f64 {
        match self {
            BehaviorPolicy::Altruistic | BehaviorPolicy::FreeRider => truth,
            BehaviorPolicy::Malicious(strategy) => strategy.falsify(truth),
        }
    }

    /// Whether producing the outgoing value requires knowing the honest one.
    fn needs_snapshot(self) -> bool {
        matches!(
            self,
            BehaviorPolicy::Altruistic | BehaviorPolicy::Malicious(ReportStrategy::Invert)
        )
    }
}

/// Timing and threshold knobs shared by every peer in a scenario.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub fanout: usize,
    pub initial_reputation: f64,
    pub beacon_period_ms: u64,
    pub chunk_period_ms: u64,
    pub report_every_chunks: u64,
    pub keepalive_period_ms: u64,
    pub keepalive_timeout_ms: u64,
    pub parent_timeout_ms: u64,
    pub join_timeout_ms: u64,
    pub climb_period_ms: u64,
    pub audit_period_ms: u64,
    pub audit_window_ms: u64,
    pub audit_delta: f64,
    pub audit_penalty: f64,
    pub sweep_period_ms: u64,
    pub housekeeping_period_ms: u64,
    pub rt_refresh_period_ms: u64,
    pub rep_query_timeout_ms: u64,
    pub rep_cache_ms: u64,
    pub reorder_window_ms: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            fanout: 4,
            initial_reputation: 0.5,
            beacon_period_ms: 1000,
            chunk_period_ms: 100,
            report_every_chunks: 10,
            keepalive_period_ms: 1000,
            keepalive_timeout_ms: 3000,
            parent_timeout_ms: 2000,
            join_timeout_ms: 2000,
            climb_period_ms: 5000,
            audit_period_ms: 1000,
            audit_window_ms: 3000,
            audit_delta: 0.2,
            audit_penalty: 0.1,
            sweep_period_ms: 1000,
            housekeeping_period_ms: 250,
            rt_refresh_period_ms: 2000,
            rep_query_timeout_ms: 1000,
            rep_cache_ms: 1000,
            reorder_window_ms: 200,
        }
    }
}

/// Per-peer timers. Token-carrying kinds guard against stale fires.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TimerKind {
    Beacon,
    Chunk,
    Sweep,
    Keepalive,
    Climb,
    Audit,
    Housekeeping,
    JoinRetry { token: u64 },
    QueryExpire { query_id: u64 },
    EndStream,
}

/// Everything a handler wants the engine to do after one event.
#[derive(Debug, Default)]
pub struct Actions {
    pub messages: Vec<Message>,
    /// (timer, delay from now)
    pub timers: Vec<(TimerKind, u64)>,
    /// Replica-update outcomes surfaced for the metrics counters:
    /// (reporter, subject, outcome).
    pub outcomes: Vec<(PeerId, PeerId, UpdateOutcome)>,
}

/// Simulation services visible to a peer handler. Ring routing is resolved
/// through the global membership view; the messages themselves still pay
/// latency.
pub trait NodeEnv {
    fn now(&self) -> SimTime;
    /// Current replica holders for a subject's reputation record.
    fn replica_holders(&self, subject: PeerId) -> Vec<PeerId>;
    /// Seeded membership sample from the bootstrap registry.
    fn bootstrap_sample(&mut self, requester: PeerId) -> Vec<PeerId>;
    /// The stream's source, from the published descriptor.
    fn stream_source(&self) -> PeerId;
    /// Measured round-trip time between two peers.
    fn rtt_ms(&self, from: PeerId, to: PeerId) -> u64;
}

/// Why a reputation query was issued.
#[derive(Clone, Debug)]
enum QueryPurpose {
    /// Deciding on a join request from `requester`.
    Admission { requester: PeerId },
    /// Own snapshot needed before reporting for the parent.
    SelfReport,
    /// Climb evaluation legs.
    ClimbGrandparent { grandparent: PeerId },
    ClimbParent { grandparent: PeerId },
    /// Refresh the stored reputation of a child that just sent a keepalive.
    KeepaliveRefresh { child: PeerId },
    /// Holder-side verification of a queued report.
    Verify {
        target: PeerId,
        reporter: PeerId,
        at: SimTime,
        claimed: f64,
    },
    /// Own record log for auditing the children.
    Audit,
}

#[derive(Debug)]
struct OpenQuery {
    subject: PeerId,
    purpose: QueryPurpose,
    expected: usize,
    values: Vec<f64>,
    log: Vec<ReportLogEntry>,
}

#[derive(Clone, Debug)]
struct PendingJoin {
    target: PeerId,
    token: u64,
    attempts_on_target: u32,
    candidates: VecDeque<PeerId>,
    tried: BTreeSet<PeerId>,
}

#[derive(Clone, Debug)]
struct ClimbEval {
    grandparent: PeerId,
    grandparent_rep: Option<f64>,
    parent_rep: Option<f64>,
}

/// Playout and delivery statistics for one peer.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct ChunkStats {
    pub received: u64,
    pub duplicates: u64,
    pub late: u64,
    pub max_gap: u64,
    pub delay_sum_ms: u64,
}

impl ChunkStats {
    pub fn mean_delay_ms(&self) -> f64 {
        if self.received == 0 {
            0.0
        } else {
            self.delay_sum_ms as f64 / self.received as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct AuditFlag {
    missing: bool,
    mismatched: bool,
}

impl AuditFlag {
    fn flagged(&self) -> bool {
        self.missing || self.mismatched
    }
}

/// The full state of one simulated peer.
pub struct PeerState {
    pub id: PeerId,
    pub role: PeerRole,
    pub policy: BehaviorPolicy,
    pub stream: StreamId,
    pub config: ProtocolConfig,
    pub params: DecayParams,
    pub tables: PeerTables,
    /// This peer's slice of the reputation layer.
    pub store: ReplicaStore,
    pub departed: bool,
    pub chunk_stats: ChunkStats,

    /// Current chain to the source, nearest first; empty while detached.
    ancestry: Vec<PeerId>,
    pending_join: Option<PendingJoin>,
    climb_target: Option<PeerId>,
    climb_eval: Option<ClimbEval>,
    join_token: u64,

    queries: BTreeMap<u64, OpenQuery>,
    next_query_id: u64,
    rep_cache: BTreeMap<PeerId, (f64, SimTime)>,
    audit_flags: BTreeMap<PeerId, AuditFlag>,
    /// Requesters with an admission query in flight.
    admission_waits: BTreeSet<PeerId>,

    /// Parent's own parent as last advertised on its beacon forwards.
    fresh_grandparent: Option<(PeerId, SimTime)>,
    /// Highest beacon sequence forwarded per origin.
    beacon_forwarded: BTreeMap<PeerId, u64>,
    /// Highest chunk sequence seen / forwarded.
    playout_head: Option<u64>,
    chunk_forwarded_head: Option<u64>,
    chunks_since_report: u64,
    last_parent_chunk: SimTime,
    last_rt_refresh: SimTime,

    beacon_seq: u64,
    chunk_seq: u64,
}

impl PeerState {
    pub fn new(
        id: PeerId,
        role: PeerRole,
        policy: BehaviorPolicy,
        stream: StreamId,
        config: ProtocolConfig,
        params: DecayParams,
        now: SimTime,
    ) -> Self {
        PeerState {
            id,
            role,
            policy,
            stream,
            config,
            params,
            tables: PeerTables::new(id),
            store: ReplicaStore::new(),
            departed: false,
            chunk_stats: ChunkStats::default(),
            ancestry: Vec::new(),
            pending_join: None,
            climb_target: None,
            climb_eval: None,
            join_token: 0,
            queries: BTreeMap::new(),
            next_query_id: 0,
            rep_cache: BTreeMap::new(),
            audit_flags: BTreeMap::new(),
            admission_waits: BTreeSet::new(),
            fresh_grandparent: None,
            beacon_forwarded: BTreeMap::new(),
            playout_head: None,
            chunk_forwarded_head: None,
            chunks_since_report: 0,
            last_parent_chunk: now,
            last_rt_refresh: now,
            beacon_seq: 0,
            chunk_seq: 0,
        }
    }

    pub fn parent(&self) -> Option<PeerId> {
        self.tables.omt.parent()
    }

    pub fn is_attached(&self) -> bool {
        self.role == PeerRole::Source || self.parent().is_some()
    }

    pub fn child_count(&self) -> usize {
        self.tables.omt.child_count()
    }

    pub fn child_ids(&self) -> Vec<PeerId> {
        self.tables.omt.child_ids()
    }

    // ------------------------------------------------------------------
    // lifecycle
    // ------------------------------------------------------------------

    /// Bring the peer up. The source starts its beacon and chunk threads; a
    /// subscriber fetches a routing sample and immediately requests to join
    /// at the published source.
    pub fn start(&mut self, env: &mut dyn NodeEnv) -> Actions {
        let mut out = Actions::default();
        let sample = env.bootstrap_sample(self.id);
        self.tables.rt.merge(sample, self.id);
        self.refresh_neighbours(env);
        let cfg = self.config;
        out.timers.push((TimerKind::Sweep, cfg.sweep_period_ms));
        out.timers.push((TimerKind::Audit, cfg.audit_period_ms));
        out.timers
            .push((TimerKind::Housekeeping, cfg.housekeeping_period_ms));
        match self.role {
            PeerRole::Source => {
                out.timers.push((TimerKind::Beacon, cfg.beacon_period_ms));
                out.timers.push((TimerKind::Chunk, cfg.chunk_period_ms));
            }
            PeerRole::Subscriber => {
                out.timers
                    .push((TimerKind::Keepalive, cfg.keepalive_period_ms));
                out.timers.push((TimerKind::Climb, cfg.climb_period_ms));
                let source = env.stream_source();
                self.start_join(env, &mut out, vec![source]);
            }
        }
        out
    }

    /// Dispatch one delivered message. `sent_at` is the envelope's send
    /// timestamp; reputation updates aggregate at that time so that every
    /// replica holder computes the identical result.
    pub fn on_message(&mut self, env: &mut dyn NodeEnv, msg: &Message, sent_at: SimTime) -> Actions {
        let mut out = Actions::default();
        if self.departed {
            return out;
        }
        match &msg.kind {
            MessageKind::Beacon {
                origin,
                seq,
                via_parent,
            } => self.handle_beacon(env, &mut out, msg.sender, *origin, *seq, *via_parent),
            MessageKind::JoinRequest => self.handle_join_request(env, &mut out, msg.sender),
            MessageKind::JoinAccept {
                grandparent,
                ancestors,
            } => self.handle_join_accept(env, &mut out, msg.sender, *grandparent, ancestors),
            MessageKind::JoinReject { children } => {
                self.handle_join_reject(env, &mut out, msg.sender, children)
            }
            MessageKind::Evict { siblings } => {
                self.handle_evict(env, &mut out, msg.sender, siblings)
            }
            MessageKind::StreamChunk { seq, origin_ts } => {
                self.handle_stream_chunk(env, &mut out, msg.sender, *seq, *origin_ts)
            }
            MessageKind::RepUpdate { target, value, .. } => {
                let report = RepReport {
                    target: *target,
                    reported_value: *value,
                    reporter: msg.sender,
                    at: sent_at,
                };
                self.holder_receive_update(env, &mut out, report);
            }
            MessageKind::RepQuery {
                subject,
                query_id,
                with_log,
            } => self.handle_rep_query(env, &mut out, msg.sender, *subject, *query_id, *with_log),
            MessageKind::RepReply {
                query_id,
                value,
                log,
                ..
            } => self.handle_rep_reply(env, &mut out, *query_id, *value, log),
            MessageKind::StreamEnd => self.handle_stream_end(env, &mut out, msg.sender),
        }
        out
    }

    /// Dispatch one timer fire.
    pub fn on_timer(&mut self, env: &mut dyn NodeEnv, timer: TimerKind) -> Actions {
        let mut out = Actions::default();
        if self.departed {
            return out;
        }
        match timer {
            TimerKind::Beacon => self.beacon_tick(env, &mut out),
            TimerKind::Chunk => self.chunk_tick(env, &mut out),
            TimerKind::Sweep => self.sweep_tick(env, &mut out),
            TimerKind::Keepalive => self.keepalive_tick(env, &mut out),
            TimerKind::Climb => self.climb_tick(env, &mut out),
            TimerKind::Audit => self.audit_tick(env, &mut out),
            TimerKind::Housekeeping => self.housekeeping_tick(env, &mut out),
            TimerKind::JoinRetry { token } => self.join_retry(env, &mut out, token),
            TimerKind::QueryExpire { query_id } => self.query_expire(env, &mut out, query_id),
            TimerKind::EndStream => self.end_stream(env, &mut out),
        }
        out
    }

    // ------------------------------------------------------------------
    // source timers
    // ------------------------------------------------------------------

    fn beacon_tick(&mut self, _env: &mut dyn NodeEnv, out: &mut Actions) {
        out.timers
            .push((TimerKind::Beacon, self.config.beacon_period_ms));
        let seq = self.beacon_seq;
        self.beacon_seq += 1;
        let mut targets: BTreeSet<PeerId> = self.tables.rt.iter().collect();
        targets.extend(self.tables.nt.iter().map(|(p, _)| p));
        targets.extend(self.tables.omt.child_ids());
        targets.remove(&self.id);
        for peer in targets {
            self.push_msg(
                out,
                peer,
                MessageKind::Beacon {
                    origin: self.id,
                    seq,
                    via_parent: None,
                },
            );
        }
    }

    fn chunk_tick(&mut self, env: &mut dyn NodeEnv, out: &mut Actions) {
        out.timers
            .push((TimerKind::Chunk, self.config.chunk_period_ms));
        let seq = self.chunk_seq;
        self.chunk_seq += 1;
        for child in self.tables.omt.child_ids() {
            self.push_msg(
                out,
                child,
                MessageKind::StreamChunk {
                    seq,
                    origin_ts: env.now(),
                },
            );
        }
    }

    fn end_stream(&mut self, _env: &mut dyn NodeEnv, out: &mut Actions) {
        let mut targets: BTreeSet<PeerId> = self.tables.omt.child_ids().into_iter().collect();
        if let Some(p) = self.parent() {
            targets.insert(p);
        }
        targets.extend(self.tables.rt.iter());
        targets.extend(self.tables.nt.iter().map(|(p, _)| p));
        targets.remove(&self.id);
        for peer in targets {
            self.push_msg(out, peer, MessageKind::StreamEnd);
        }
        self.departed = true;
    }

    // ------------------------------------------------------------------
    // shared timers
    // ------------------------------------------------------------------

    fn sweep_tick(&mut self, env: &mut dyn NodeEnv, out: &mut Actions) {
        out.timers
            .push((TimerKind::Sweep, self.config.sweep_period_ms));
        let now = env.now();
        let removed = self
            .tables
            .omt
            .sweep_keepalives(now, self.config.keepalive_timeout_ms);
        for peer in removed {
            log::debug!("{}: swept silent child {}", self.id, peer);
            self.audit_flags.remove(&peer);
        }
    }

    fn keepalive_tick(&mut self, _env: &mut dyn NodeEnv, out: &mut Actions) {
        out.timers
            .push((TimerKind::Keepalive, self.config.keepalive_period_ms));
        if let Some(parent) = self.parent() {
            self.push_msg(out, parent, MessageKind::JoinRequest);
        }
    }

    fn climb_tick(&mut self, env: &mut dyn NodeEnv, out: &mut Actions) {
        out.timers
            .push((TimerKind::Climb, self.config.climb_period_ms));
        if self.role == PeerRole::Source {
            return;
        }
        if self.climb_target.is_some() || self.climb_eval.is_some() {
            // a full climb period passed without an answer; abandon it
            self.climb_target = None;
            self.climb_eval = None;
            return;
        }
        if self.pending_join.is_some() {
            return;
        }
        let Some(parent) = self.parent() else { return };
        let Some(grandparent) = self
            .tables
            .bpt
            .grandparents()
            .find(|g| *g != parent && *g != self.id)
        else {
            return;
        };
        self.climb_eval = Some(ClimbEval {
            grandparent,
            grandparent_rep: None,
            parent_rep: None,
        });
        self.issue_query(
            env,
            out,
            grandparent,
            QueryPurpose::ClimbGrandparent { grandparent },
            false,
        );
        self.issue_query(env, out, parent, QueryPurpose::ClimbParent { grandparent }, false);
    }

    fn audit_tick(&mut self, env: &mut dyn NodeEnv, out: &mut Actions) {
        out.timers
            .push((TimerKind::Audit, self.config.audit_period_ms));
        if !self.policy.sends_reputation() {
            // free riders do not take part in reputation traffic at all
            return;
        }
        if self.tables.omt.child_count() == 0 {
            return;
        }
        self.issue_query(env, out, self.id, QueryPurpose::Audit, true);
    }

    fn housekeeping_tick(&mut self, env: &mut dyn NodeEnv, out: &mut Actions) {
        out.timers
            .push((TimerKind::Housekeeping, self.config.housekeeping_period_ms));
        let now = env.now();
        // parent liveness is judged on media: a parent that delivers no
        // chunks for a whole timeout is dead or useless either way, and the
        // backup-parents table exists exactly for this recovery
        if let Some(parent) = self.parent() {
            if now.saturating_since(self.last_parent_chunk) > self.config.parent_timeout_ms {
                log::debug!("{}: parent {} stopped feeding, recovering", self.id, parent);
                self.detach();
                self.tables.forget(parent);
                let mut candidates: Vec<PeerId> = self.tables.bpt.grandparents().collect();
                candidates.extend(self.tables.bpt.siblings());
                candidates.extend(self.tables.brt.ranked().iter().map(|(p, _)| *p));
                candidates.retain(|c| *c != parent);
                self.start_join(env, out, candidates);
            }
        }
        // periodic routing refresh
        if now.saturating_since(self.last_rt_refresh) >= self.config.rt_refresh_period_ms {
            self.last_rt_refresh = now;
            let sample = env.bootstrap_sample(self.id);
            self.tables.rt.merge(sample, self.id);
            self.refresh_neighbours(env);
        }
        // apply matured replica updates
        let applied = self
            .store
            .flush(now, self.config.reorder_window_ms, self.params);
        out.outcomes.extend(applied);
    }

    // ------------------------------------------------------------------
    // beacons and media
    // ------------------------------------------------------------------

    fn handle_beacon(
        &mut self,
        env: &mut dyn NodeEnv,
        out: &mut Actions,
        from: PeerId,
        origin: PeerId,
        seq: u64,
    ) {
        if self.role == PeerRole::Source {
            return;
        }
        let now = env.now();
        let window = self.config.beacon_period_ms * 10;
        self.tables.brt.record_beacon(from, now, window);
        self.tables.nt.update(from, env.rtt_ms(self.id, from));
        // forward each beacon once down the tree
        let head = self.beacon_forwarded.get(&origin).copied();
        if head.is_none_or(|h| seq > h) {
            self.beacon_forwarded.insert(origin, seq);
            for child in self.tables.omt.child_ids() {
                self.push_msg(out, child, MessageKind::Beacon { origin, seq });
            }
        }
        // a detached idle peer uses the best beacon provider to re-join
        if self.parent().is_none() && self.pending_join.is_none() && self.climb_target.is_none() {
            if let Some(best) = self.tables.brt.best() {
                self.start_join(env, out, vec![best]);
            }
        }
    }

    fn handle_stream_chunk(
        &mut self,
        env: &mut dyn NodeEnv,
        out: &mut Actions,
        from: PeerId,
        seq: u64,
        origin_ts: SimTime,
    ) {
        let now = env.now();
        if Some(from) == self.parent() {
            self.last_parent_chunk = now;
        }
        match self.playout_head {
            Some(head) if seq < head => {
                self.chunk_stats.late += 1;
                return;
            }
            Some(head) if seq == head => {
                self.chunk_stats.duplicates += 1;
                return;
            }
            Some(head) => {
                let gap = seq - head - 1;
                self.chunk_stats.max_gap = self.chunk_stats.max_gap.max(gap);
                self.playout_head = Some(seq);
            }
            None => self.playout_head = Some(seq),
        }
        self.chunk_stats.received += 1;
        self.chunk_stats.delay_sum_ms += now.saturating_since(origin_ts);

        if self.policy.forwards_chunks() {
            let forwarded = self.chunk_forwarded_head;
            if forwarded.is_none_or(|h| seq > h) {
                self.chunk_forwarded_head = Some(seq);
                for child in self.tables.omt.child_ids() {
                    self.push_msg(out, child, MessageKind::StreamChunk { seq, origin_ts });
                }
            }
        }

        if self.policy.sends_reputation() && self.parent().is_some() {
            self.chunks_since_report += 1;
            if self.chunks_since_report >= self.config.report_every_chunks {
                self.chunks_since_report = 0;
                self.send_parent_report(env, out);
            }
        }
    }

    fn send_parent_report(&mut self, env: &mut dyn NodeEnv, out: &mut Actions) {
        if self.policy.needs_snapshot() {
            if let Some(snapshot) = self.cached_rep(env.now(), self.id) {
                self.emit_parent_report(env, out, snapshot);
            } else {
                self.issue_query(env, out, self.id, QueryPurpose::SelfReport, false);
            }
        } else {
            self.emit_parent_report(env, out, self.config.initial_reputation);
        }
    }

    fn emit_parent_report(&mut self, env: &mut dyn NodeEnv, out: &mut Actions, truth: f64) {
        let Some(parent) = self.parent() else { return };
        let value = self.policy.outgoing_value(truth);
        self.send_rep_update(env, out, parent, value);
    }

    // ------------------------------------------------------------------
    // join protocol
    // ------------------------------------------------------------------

    fn handle_join_request(&mut self, env: &mut dyn NodeEnv, out: &mut Actions, from: PeerId) {
        let now = env.now();
        if Some(from) == self.parent() {
            return;
        }
        if self.tables.omt.is_child(from) {
            // keepalive: reset the timer and lazily refresh the stored
            // reputation snapshot
            if let Some(entry) = self.tables.omt.child_mut(from) {
                entry.last_keepalive = now;
            }
            if let Some(rep) = self.cached_rep(now, from) {
                if let Some(entry) = self.tables.omt.child_mut(from) {
                    entry.reputation = rep;
                }
            } else {
                self.issue_query(
                    env,
                    out,
                    from,
                    QueryPurpose::KeepaliveRefresh { child: from },
                    false,
                );
            }
            return;
        }
        if self.role != PeerRole::Source && self.parent().is_none() {
            // no feed to offer; delegate to the children (possibly none)
            self.push_msg(
                out,
                from,
                MessageKind::JoinReject {
                    children: self.tables.omt.child_ids(),
                },
            );
            return;
        }
        match self.cached_rep(now, from) {
            Some(rep) => self.decide_admission(env, out, from, rep),
            None => {
                if self.admission_waits.insert(from) {
                    self.issue_query(
                        env,
                        out,
                        from,
                        QueryPurpose::Admission { requester: from },
                        false,
                    );
                }
            }
        }
    }

    fn decide_admission(
        &mut self,
        env: &mut dyn NodeEnv,
        out: &mut Actions,
        requester: PeerId,
        requester_rep: f64,
    ) {
        let now = env.now();
        self.admission_waits.remove(&requester);
        if requester == self.id || Some(requester) == self.parent() {
            return;
        }
        if self.tables.omt.is_child(requester) {
            // raced with a keepalive; nothing to decide
            return;
        }
        if self.role != PeerRole::Source && self.parent().is_none() {
            self.push_msg(
                out,
                requester,
                MessageKind::JoinReject {
                    children: self.tables.omt.child_ids(),
                },
            );
            return;
        }
        let flags = &self.audit_flags;
        let penalty = self.config.audit_penalty;
        let eff = |peer: PeerId, rep: f64| {
            if flags.get(&peer).is_some_and(|f| f.flagged()) {
                rep - penalty
            } else {
                rep
            }
        };
        let decision =
            self.tables
                .omt
                .admit(requester, requester_rep, self.config.fanout, now, eff);
        match decision {
            AdmitDecision::Accept => {
                log::debug!("{}: accepted child {}", self.id, requester);
                self.push_msg(
                    out,
                    requester,
                    MessageKind::JoinAccept {
                        grandparent: self.parent(),
                        ancestors: self.ancestry.clone(),
                    },
                );
            }
            AdmitDecision::RejectFull { children } => {
                self.push_msg(out, requester, MessageKind::JoinReject { children });
            }
            AdmitDecision::Replace {
                evicted,
                evicted_gets,
            } => {
                log::debug!(
                    "{}: replaced child {} with higher-reputation {}",
                    self.id,
                    evicted,
                    requester
                );
                self.audit_flags.remove(&evicted);
                self.push_msg(
                    out,
                    requester,
                    MessageKind::JoinAccept {
                        grandparent: self.parent(),
                        ancestors: self.ancestry.clone(),
                    },
                );
                self.push_msg(
                    out,
                    evicted,
                    MessageKind::Evict {
                        siblings: evicted_gets,
                    },
                );
            }
        }
    }

    fn handle_join_accept(
        &mut self,
        env: &mut dyn NodeEnv,
        out: &mut Actions,
        from: PeerId,
        grandparent: Option<PeerId>,
        ancestors: &[PeerId],
    ) {
        let now = env.now();
        if Some(from) == self.parent() {
            // duplicate accept from the current parent; nothing to do
            return;
        }
        let for_climb = self.climb_target == Some(from);
        let for_join = self
            .pending_join
            .as_ref()
            .is_some_and(|pj| pj.target == from);
        if !for_climb && !for_join {
            // never asked (stale accept): vacate the slot we were given
            self.push_msg(out, from, MessageKind::StreamEnd);
            return;
        }
        if ancestors.contains(&self.id) {
            // the accepter sits in our own subtree; attaching would close a
            // loop in the tree
            log::debug!("{}: declining accept from descendant {}", self.id, from);
            self.push_msg(out, from, MessageKind::StreamEnd);
            if for_climb {
                self.climb_target = None;
            }
            if for_join {
                if let Some(pending) = self.pending_join.as_mut() {
                    pending.tried.insert(from);
                }
                self.advance_join(env, out);
            }
            return;
        }
        let old_parent = self.parent();
        self.tables.omt.set_parent(Some(from));
        self.ancestry = std::iter::once(from)
            .chain(ancestors.iter().copied())
            .collect();
        self.tables.bpt.record(grandparent, &[]);
        self.last_parent_chunk = now;
        if for_climb {
            self.climb_target = None;
            if let Some(old) = old_parent {
                if old != from {
                    // free the old slot right away
                    self.push_msg(out, old, MessageKind::StreamEnd);
                }
            }
        }
        if for_join {
            self.clear_pending_join();
        }
        log::debug!("{}: attached under {}", self.id, from);
    }

    fn handle_join_reject(
        &mut self,
        env: &mut dyn NodeEnv,
        out: &mut Actions,
        from: PeerId,
        children: &[PeerId],
    ) {
        if self.climb_target == Some(from) {
            // the grandparent kept its better children; stay put
            self.tables.bpt.record(None, children);
            self.climb_target = None;
            return;
        }
        let relevant = self
            .pending_join
            .as_ref()
            .is_some_and(|pj| pj.target == from);
        if !relevant {
            return;
        }
        self.tables.bpt.record(None, children);
        let pending = self.pending_join.as_mut().expect("checked above");
        pending.tried.insert(from);
        // delegated children are tried before anything else
        for child in children.iter().rev() {
            if !pending.tried.contains(child) && *child != self.id {
                pending.candidates.retain(|c| c != child);
                pending.candidates.push_front(*child);
            }
        }
        self.advance_join(env, out);
    }

    fn handle_evict(
        &mut self,
        env: &mut dyn NodeEnv,
        out: &mut Actions,
        from: PeerId,
        siblings: &[PeerId],
    ) {
        if Some(from) != self.parent() {
            return;
        }
        log::debug!("{}: evicted by {}", self.id, from);
        self.detach();
        self.tables.bpt.record(None, siblings);
        // the carried siblings are the replacement feeders
        let mut candidates: Vec<PeerId> = siblings.to_vec();
        candidates.extend(self.tables.bpt.grandparents());
        candidates.extend(self.tables.brt.ranked().iter().map(|(p, _)| *p));
        candidates.retain(|c| *c != from);
        self.start_join(env, out, candidates);
    }

    fn handle_stream_end(&mut self, env: &mut dyn NodeEnv, out: &mut Actions, from: PeerId) {
        if self.tables.omt.is_child(from) {
            // leave notice: the child vacated its slot
            self.tables.omt.remove_child(from);
            self.audit_flags.remove(&from);
            return;
        }
        let source = env.stream_source();
        if Some(from) == self.parent() || from == source {
            // upstream teardown: propagate and stop
            for child in self.tables.omt.child_ids() {
                self.push_msg(out, child, MessageKind::StreamEnd);
            }
            self.departed = true;
        }
    }

    // ------------------------------------------------------------------
    // join bookkeeping
    // ------------------------------------------------------------------

    fn start_join(&mut self, env: &mut dyn NodeEnv, out: &mut Actions, priority: Vec<PeerId>) {
        if self.pending_join.is_some() || self.departed {
            return;
        }
        let mut candidates: VecDeque<PeerId> = VecDeque::new();
        let mut seen = BTreeSet::new();
        let brt: Vec<PeerId> = self.tables.brt.ranked().iter().map(|(p, _)| *p).collect();
        let gps: Vec<PeerId> = self.tables.bpt.grandparents().collect();
        let sibs: Vec<PeerId> = self.tables.bpt.siblings().collect();
        let source = env.stream_source();
        for peer in priority
            .into_iter()
            .chain(brt)
            .chain(gps)
            .chain(sibs)
            .chain(std::iter::once(source))
        {
            if peer != self.id && seen.insert(peer) {
                candidates.push_back(peer);
            }
        }
        if candidates.is_empty() {
            return;
        }
        self.pending_join = Some(PendingJoin {
            target: self.id, // placeholder until advance_join picks one
            token: 0,
            attempts_on_target: 0,
            candidates,
            tried: BTreeSet::new(),
        });
        self.advance_join(env, out);
    }

    /// Move to the next untried candidate. An exhausted ladder re-bootstraps
    /// after one join-timeout of quiet (the tree keeps evolving, so a new
    /// pass over it can succeed where the last one did not).
    fn advance_join(&mut self, env: &mut dyn NodeEnv, out: &mut Actions) {
        let Some(pending) = self.pending_join.as_mut() else {
            return;
        };
        let next = loop {
            match pending.candidates.pop_front() {
                Some(c) if pending.tried.contains(&c) || c == self.id => continue,
                Some(c) => break Some(c),
                None => break None,
            }
        };
        match next {
            Some(target) => {
                self.join_token += 1;
                let token = self.join_token;
                let pending = self.pending_join.as_mut().expect("still pending");
                pending.target = target;
                pending.token = token;
                pending.attempts_on_target = 1;
                self.push_msg(out, target, MessageKind::JoinRequest);
                out.timers
                    .push((TimerKind::JoinRetry { token }, self.config.join_timeout_ms));
            }
            None => {
                log::debug!("{}: join candidates exhausted, re-bootstrapping", self.id);
                let sample = env.bootstrap_sample(self.id);
                self.tables.rt.merge(sample, self.id);
                let mut rebuilt: Vec<PeerId> =
                    self.tables.brt.ranked().iter().map(|(p, _)| *p).collect();
                rebuilt.extend(self.tables.bpt.grandparents());
                rebuilt.extend(self.tables.bpt.siblings());
                rebuilt.push(env.stream_source());
                let mut seen = BTreeSet::new();
                let queue: VecDeque<PeerId> = rebuilt
                    .into_iter()
                    .filter(|p| *p != self.id && seen.insert(*p))
                    .collect();
                if queue.is_empty() {
                    self.pending_join = None;
                    return;
                }
                self.join_token += 1;
                let token = self.join_token;
                self.pending_join = Some(PendingJoin {
                    target: self.id, // quiet-period placeholder
                    token,
                    attempts_on_target: 2,
                    candidates: queue,
                    tried: BTreeSet::new(),
                });
                out.timers
                    .push((TimerKind::JoinRetry { token }, self.config.join_timeout_ms));
            }
        }
    }

    fn join_retry(&mut self, env: &mut dyn NodeEnv, out: &mut Actions, token: u64) {
        let Some(pending) = self.pending_join.as_mut() else {
            return;
        };
        if pending.token != token {
            return;
        }
        if pending.target != self.id && pending.attempts_on_target < 2 {
            // first expiry: resend to the same target
            pending.attempts_on_target += 1;
            let target = pending.target;
            self.push_msg(out, target, MessageKind::JoinRequest);
            out.timers
                .push((TimerKind::JoinRetry { token }, self.config.join_timeout_ms));
        } else {
            // second expiry (or the re-bootstrap quiet period ended): advance
            let target = pending.target;
            pending.tried.insert(target);
            self.advance_join(env, out);
        }
    }

    fn clear_pending_join(&mut self) {
        self.pending_join = None;
        self.join_token += 1; // invalidate outstanding retry timers
    }

    /// Drop the parent link; children are kept and continue to be fed once a
    /// new parent is found.
    fn detach(&mut self) {
        self.tables.omt.set_parent(None);
        self.ancestry.clear();
        self.climb_target = None;
        self.climb_eval = None;
    }

    // ------------------------------------------------------------------
    // reputation layer
    // ------------------------------------------------------------------

    /// Fan one reputation update to the target's replica holders.
    fn send_rep_update(
        &mut self,
        env: &mut dyn NodeEnv,
        out: &mut Actions,
        target: PeerId,
        value: f64,
    ) {
        let report = RepReport {
            target,
            reported_value: value,
            reporter: self.id,
            at: env.now(),
        };
        for holder in env.replica_holders(target) {
            if holder == self.id {
                self.holder_receive_update(env, out, report);
            } else {
                self.push_msg(
                    out,
                    holder,
                    MessageKind::RepUpdate {
                        target,
                        value,
                        reporter_rep: value,
                    },
                );
            }
        }
    }

    /// Holder side: queue the report and verify the claimed value against
    /// the reporter's own queried reputation before it may aggregate.
    fn holder_receive_update(
        &mut self,
        env: &mut dyn NodeEnv,
        out: &mut Actions,
        report: RepReport,
    ) {
        if self.store.record(report.target).is_none() {
            // not (or no longer) a holder for this subject
            return;
        }
        if !(0.0..=1.0).contains(&report.reported_value) {
            out.outcomes
                .push((report.reporter, report.target, UpdateOutcome::Malformed));
            return;
        }
        self.store.enqueue(report);
        let now = env.now();
        match self.cached_rep(now, report.reporter) {
            Some(actual) => {
                let included = (report.reported_value - actual).abs() <= self.config.audit_delta;
                self.store
                    .set_verdict(report.target, report.reporter, report.at, included);
            }
            None => {
                self.issue_query(
                    env,
                    out,
                    report.reporter,
                    QueryPurpose::Verify {
                        target: report.target,
                        reporter: report.reporter,
                        at: report.at,
                        claimed: report.reported_value,
                    },
                    false,
                );
            }
        }
    }

    fn handle_rep_query(
        &mut self,
        env: &mut dyn NodeEnv,
        out: &mut Actions,
        from: PeerId,
        subject: PeerId,
        query_id: u64,
        with_log: bool,
    ) {
        let now = env.now();
        // apply anything mature so the answer is as fresh as possible
        let applied = self
            .store
            .flush(now, self.config.reorder_window_ms, self.params);
        out.outcomes.extend(applied);
        let (value, known) = match self.store.answer(subject, now, self.params) {
            Some(v) => (v, true),
            None => (self.config.initial_reputation, false),
        };
        let log = if with_log {
            self.store
                .record(subject)
                .map(|r| r.reporters.iter().copied().collect())
                .unwrap_or_default()
        } else {
            Vec::new()
        };
        self.push_msg(
            out,
            from,
            MessageKind::RepReply {
                subject,
                query_id,
                value,
                known,
                log,
            },
        );
    }

    fn handle_rep_reply(
        &mut self,
        env: &mut dyn NodeEnv,
        out: &mut Actions,
        query_id: u64,
        value: f64,
        log: &[ReportLogEntry],
    ) {
        let Some(query) = self.queries.get_mut(&query_id) else {
            return;
        };
        query.values.push(value);
        query.log.extend_from_slice(log);
        if query.values.len() >= query.expected {
            self.finalize_query(env, out, query_id);
        }
    }

    fn query_expire(&mut self, env: &mut dyn NodeEnv, out: &mut Actions, query_id: u64) {
        if self.queries.contains_key(&query_id) {
            self.finalize_query(env, out, query_id);
        }
    }

    fn finalize_query(&mut self, env: &mut dyn NodeEnv, out: &mut Actions, query_id: u64) {
        let Some(query) = self.queries.remove(&query_id) else {
            return;
        };
        let now = env.now();
        let median = resolve_replicas(&query.values, REPLICA_COUNT).ok();
        if let Some(v) = median {
            self.cache_rep(query.subject, v, now);
        }
        let mut sorted_log = query.log;
        sorted_log.sort_by_key(|e| (e.at, e.reporter, e.value.to_bits()));
        sorted_log.dedup_by_key(|e| (e.at, e.reporter, e.value.to_bits()));
        self.resolve_purpose(env, out, query.purpose, median, &sorted_log);
    }

    fn resolve_purpose(
        &mut self,
        env: &mut dyn NodeEnv,
        out: &mut Actions,
        purpose: QueryPurpose,
        value: Option<f64>,
        log: &[ReportLogEntry],
    ) {
        match purpose {
            QueryPurpose::Admission { requester } => {
                // a query timeout falls back to the configured initial value
                let rep = value.unwrap_or(self.config.initial_reputation);
                self.decide_admission(env, out, requester, rep);
            }
            QueryPurpose::SelfReport => {
                let truth = value.unwrap_or(self.config.initial_reputation);
                self.emit_parent_report(env, out, truth);
            }
            QueryPurpose::ClimbGrandparent { grandparent } => {
                match value {
                    Some(v) => {
                        if let Some(eval) = self.climb_eval.as_mut() {
                            if eval.grandparent == grandparent {
                                eval.grandparent_rep = Some(v);
                                self.maybe_climb(out);
                            }
                        }
                    }
                    None => self.climb_eval = None,
                }
            }
            QueryPurpose::ClimbParent { grandparent } => {
                match value {
                    Some(v) => {
                        if let Some(eval) = self.climb_eval.as_mut() {
                            if eval.grandparent == grandparent {
                                eval.parent_rep = Some(v);
                                self.maybe_climb(out);
                            }
                        }
                    }
                    None => self.climb_eval = None,
                }
            }
            QueryPurpose::KeepaliveRefresh { child } => {
                if let (Some(rep), Some(entry)) = (value, self.tables.omt.child_mut(child)) {
                    entry.reputation = rep;
                }
            }
            QueryPurpose::Verify {
                target,
                reporter,
                at,
                claimed,
            } => {
                // verification unavailable counts as included
                let included = value
                    .map(|actual| (claimed - actual).abs() <= self.config.audit_delta)
                    .unwrap_or(true);
                self.store.set_verdict(target, reporter, at, included);
            }
            QueryPurpose::Audit => self.run_audit(env, out, log),
        }
    }

    fn maybe_climb(&mut self, out: &mut Actions) {
        let Some(eval) = self.climb_eval.as_ref() else { return };
        let (Some(g_rep), Some(p_rep)) = (eval.grandparent_rep, eval.parent_rep) else {
            return;
        };
        let grandparent = eval.grandparent;
        self.climb_eval = None;
        if self.parent().is_none() || self.pending_join.is_some() {
            return;
        }
        if g_rep > p_rep {
            log::debug!(
                "{}: climbing to {} ({:.3} > {:.3})",
                self.id,
                grandparent,
                g_rep,
                p_rep
            );
            self.climb_target = Some(grandparent);
            self.push_msg(out, grandparent, MessageKind::JoinRequest);
        }
    }

    /// Audit the reporter log of this peer's own record: children that never
    /// reported are missing, children whose claims stray from their queried
    /// reputation are mismatched. Verified reporters earn a reputation
    /// credit; flagged ones are deprioritized at the next admission decision.
    fn run_audit(&mut self, env: &mut dyn NodeEnv, out: &mut Actions, log: &[ReportLogEntry]) {
        let now = env.now();
        let window_start = SimTime(now.millis().saturating_sub(self.config.audit_window_ms));
        let grace = self.config.audit_window_ms;
        let expected: Vec<PeerId> = self
            .tables
            .omt
            .children()
            .filter(|(_, e)| now.saturating_since(e.admitted_at) >= grace)
            .map(|(p, _)| p)
            .collect();
        let cache = &self.rep_cache;
        let result = audit_reporters(log, &expected, window_start, self.config.audit_delta, |p| {
            cache.get(&p).map(|(v, _)| *v)
        });
        for peer in self.tables.omt.child_ids() {
            let flag = AuditFlag {
                missing: result.missing.contains(&peer),
                mismatched: result.mismatched.contains(&peer),
            };
            if flag.flagged() {
                self.audit_flags.insert(peer, flag);
            } else {
                self.audit_flags.remove(&peer);
            }
        }
        // verified recent reporters earn a credit carrying this peer's own
        // reputation as its mass
        let snapshot = match self.role {
            PeerRole::Source => Some(1.0),
            PeerRole::Subscriber => self.cached_rep(now, self.id),
        };
        let Some(snapshot) = snapshot else {
            // no fresh self-view; skip the credits this round
            return;
        };
        let credited: Vec<PeerId> = self
            .tables
            .omt
            .child_ids()
            .into_iter()
            .filter(|child| {
                !self.audit_flags.contains_key(child)
                    && log
                        .iter()
                        .any(|e| e.reporter == *child && e.at >= window_start && e.included)
            })
            .collect();
        let value = self.policy.outgoing_value(snapshot);
        for child in credited {
            self.send_rep_update(env, out, child, value);
        }
    }

    // ------------------------------------------------------------------
    // query plumbing
    // ------------------------------------------------------------------

    fn cached_rep(&self, now: SimTime, subject: PeerId) -> Option<f64> {
        self.rep_cache
            .get(&subject)
            .filter(|(_, expires)| *expires >= now)
            .map(|(v, _)| *v)
    }

    fn cache_rep(&mut self, subject: PeerId, value: f64, now: SimTime) {
        self.rep_cache
            .insert(subject, (value, now + self.config.rep_cache_ms));
    }

    fn issue_query(
        &mut self,
        env: &mut dyn NodeEnv,
        out: &mut Actions,
        subject: PeerId,
        purpose: QueryPurpose,
        with_log: bool,
    ) {
        let now = env.now();
        let holders = env.replica_holders(subject);
        let query_id = self.next_query_id;
        self.next_query_id += 1;
        let mut values = Vec::new();
        let mut log = Vec::new();
        let mut remote = 0;
        for holder in &holders {
            if *holder == self.id {
                let applied = self
                    .store
                    .flush(now, self.config.reorder_window_ms, self.params);
                out.outcomes.extend(applied);
                let own = self
                    .store
                    .answer(subject, now, self.params)
                    .unwrap_or(self.config.initial_reputation);
                values.push(own);
                if with_log {
                    if let Some(record) = self.store.record(subject) {
                        log.extend(record.reporters.iter().copied());
                    }
                }
            } else {
                remote += 1;
                self.push_msg(
                    out,
                    *holder,
                    MessageKind::RepQuery {
                        subject,
                        query_id,
                        with_log,
                    },
                );
            }
        }
        let expected = remote + values.len();
        self.queries.insert(
            query_id,
            OpenQuery {
                subject,
                purpose,
                expected,
                values,
                log,
            },
        );
        if remote == 0 {
            // every holder was local (tiny networks)
            self.finalize_query(env, out, query_id);
        } else {
            out.timers.push((
                TimerKind::QueryExpire { query_id },
                self.config.rep_query_timeout_ms,
            ));
        }
    }

    fn refresh_neighbours(&mut self, env: &mut dyn NodeEnv) {
        let me = self.id;
        let entries: Vec<PeerId> = self.tables.rt.iter().collect();
        for peer in entries {
            let rtt = env.rtt_ms(me, peer);
            self.tables.nt.update(peer, rtt);
        }
    }

    fn push_msg(&self, out: &mut Actions, to: PeerId, kind: MessageKind) {
        if to == self.id {
            return;
        }
        out.messages
            .push(Message::new(self.id, to, self.stream, kind));
    }
}

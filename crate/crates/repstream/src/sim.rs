//! Deterministic discrete-event engine.
//!
//! One binary heap of `(time, sequence)`-ordered events drives every peer
//! handler. Outbound messages become deliveries at `now + latency(a, b)`;
//! timers become timer fires; churn is injected as join/leave events. Two
//! runs with the same scenario and seed process the identical event
//! sequence and leave the identical trace hash.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use thiserror::Error;

use crate::dht::{locate_replicas, LayerRegistry, RepRecord};
use crate::id::{fnv1a64, PeerId, StreamId};
use crate::message::Message;
use crate::metrics::MetricsLog;
use crate::node::{
    Actions, BehaviorPolicy, NodeEnv, PeerRole, PeerState, ProtocolConfig, TimerKind,
};
use crate::reputation::{resolve_replicas, DecayParams};
use crate::rng::{mix64, SplitMix64};
use crate::scenario::{
    GroupRole, LatencySpec, PolicyMix, ScenarioSpec, Selection,
};
use crate::tables::RT_CAPACITY;
use crate::time::SimTime;

/// One scheduled occurrence.
#[derive(Clone, Debug)]
pub struct Event {
    pub at: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

#[derive(Clone, Debug)]
pub enum EventKind {
    Deliver { msg: Message, sent_at: SimTime },
    TimerFire { peer: PeerId, timer: TimerKind },
    PeerJoin { spec: PeerSpec },
    PeerLeave { peer: PeerId },
    /// Departure selection rules are evaluated when the event fires, against
    /// the tree as it stands then.
    ChurnSelect { select: Selection },
    ScenarioEnd,
}

/// Blueprint for a peer created mid-run.
#[derive(Clone, Debug)]
pub struct PeerSpec {
    pub id: PeerId,
    pub role: PeerRole,
    pub policy: BehaviorPolicy,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap is a max-heap; reverse for earliest-first ordering
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("cannot schedule event at {at} before current time {now}")]
    SchedulingViolation { at: SimTime, now: SimTime },
    #[error("scenario invalid: {0}")]
    InvalidScenario(String),
    #[error("tree invariant violated at {at}: {detail}")]
    BrokenTree { at: SimTime, detail: String },
}

/// The (time, sequence)-ordered event queue.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
    now: SimTime,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Enqueue an event; events in the past are scheduling bugs.
    pub fn schedule(&mut self, at: SimTime, kind: EventKind) -> Result<u64, SimError> {
        if at < self.now {
            return Err(SimError::SchedulingViolation { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { at, seq, kind });
        Ok(seq)
    }

    pub fn pop(&mut self) -> Option<Event> {
        let event = self.heap.pop()?;
        debug_assert!(event.at >= self.now);
        self.now = event.at;
        Some(event)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Pairwise latency resolution.
pub struct LatencyModel {
    spec: LatencySpec,
    seed: u64,
    /// Peer creation order, for the matrix and coordinate modes.
    index: BTreeMap<PeerId, usize>,
}

impl LatencyModel {
    pub fn new(spec: LatencySpec, seed: u64) -> Self {
        LatencyModel {
            spec,
            seed,
            index: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, peer: PeerId) {
        let next = self.index.len();
        self.index.entry(peer).or_insert(next);
    }

    /// One-way latency; symmetric, at least 1 ms, stable per seed.
    pub fn latency_ms(&self, a: PeerId, b: PeerId) -> u64 {
        if a == b {
            return 1;
        }
        let (lo, hi) = (a.min(b), a.max(b));
        match &self.spec {
            LatencySpec::Uniform { lo_ms, hi_ms } => {
                if lo_ms >= hi_ms {
                    return (*lo_ms).max(1);
                }
                let span = hi_ms - lo_ms + 1;
                let draw = mix64(self.seed ^ lo.key(), hi.key()) % span;
                (lo_ms + draw).max(1)
            }
            LatencySpec::Matrix { latencies_ms } => {
                let (i, j) = (self.index[&lo], self.index[&hi]);
                latencies_ms[i][j].max(1)
            }
            LatencySpec::Coordinates {
                positions,
                ms_per_unit,
            } => {
                let (i, j) = (self.index[&lo], self.index[&hi]);
                let (pi, pj) = (positions[i], positions[j]);
                let dist = ((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2)).sqrt();
                ((dist * ms_per_unit).round() as u64).max(1)
            }
        }
    }

    /// The largest one-way latency any pair can experience.
    pub fn max_latency_ms(&self) -> u64 {
        match &self.spec {
            LatencySpec::Uniform { hi_ms, .. } => (*hi_ms).max(1),
            LatencySpec::Matrix { latencies_ms } => latencies_ms
                .iter()
                .flatten()
                .copied()
                .max()
                .unwrap_or(1)
                .max(1),
            LatencySpec::Coordinates {
                positions,
                ms_per_unit,
            } => {
                let mut max = 1u64;
                for (i, pi) in positions.iter().enumerate() {
                    for pj in positions.iter().skip(i + 1) {
                        let dist = ((pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2)).sqrt();
                        max = max.max((dist * ms_per_unit).round() as u64);
                    }
                }
                max
            }
        }
    }
}

/// Bootstrap registry: stream descriptors plus seeded membership samples.
/// A simulation service, not a peer; lookups are free, messages are not.
pub struct BootstrapRegistry {
    pub registry: LayerRegistry,
    members: BTreeSet<PeerId>,
    rng: SplitMix64,
}

impl BootstrapRegistry {
    pub fn new(seed: u64) -> Self {
        BootstrapRegistry {
            registry: LayerRegistry::new(),
            members: BTreeSet::new(),
            rng: SplitMix64::derived(seed, 0xb0075),
        }
    }

    pub fn add_member(&mut self, peer: PeerId) {
        self.members.insert(peer);
    }

    pub fn remove_member(&mut self, peer: PeerId) {
        self.members.remove(&peer);
    }

    pub fn members(&self) -> &BTreeSet<PeerId> {
        &self.members
    }

    /// A deterministic pseudo-random sample of up to `RT_CAPACITY` members.
    pub fn sample(&mut self, requester: PeerId) -> Vec<PeerId> {
        let mut pool: Vec<PeerId> = self
            .members
            .iter()
            .copied()
            .filter(|p| *p != requester)
            .collect();
        if pool.len() > RT_CAPACITY {
            self.rng.shuffle(&mut pool);
            pool.truncate(RT_CAPACITY);
        }
        pool
    }
}

/// Engine-side services handed to peer handlers.
pub struct Services {
    now: SimTime,
    pub bootstrap: BootstrapRegistry,
    pub latency: LatencyModel,
    source: PeerId,
    /// Live members of the reputation layer.
    membership: BTreeSet<PeerId>,
    /// Current replica holders per subject.
    holder_map: BTreeMap<PeerId, Vec<PeerId>>,
}

impl NodeEnv for Services {
    fn now(&self) -> SimTime {
        self.now
    }

    fn replica_holders(&self, subject: PeerId) -> Vec<PeerId> {
        self.holder_map.get(&subject).cloned().unwrap_or_default()
    }

    fn bootstrap_sample(&mut self, requester: PeerId) -> Vec<PeerId> {
        self.bootstrap.sample(requester)
    }

    fn stream_source(&self) -> PeerId {
        self.source
    }

    fn rtt_ms(&self, from: PeerId, to: PeerId) -> u64 {
        2 * self.latency.latency_ms(from, to)
    }
}

/// Running tally per message kind.
#[derive(Clone, Debug, Default)]
pub struct MessageCounters {
    pub sent: BTreeMap<&'static str, u64>,
    pub delivered: BTreeMap<&'static str, u64>,
    pub dropped_departed: BTreeMap<&'static str, u64>,
    pub dropped_random: BTreeMap<&'static str, u64>,
}

impl MessageCounters {
    pub fn total_sent(&self) -> u64 {
        self.sent.values().sum()
    }

    pub fn total_delivered(&self) -> u64 {
        self.delivered.values().sum()
    }

    pub fn total_dropped(&self) -> u64 {
        self.dropped_departed.values().sum::<u64>() + self.dropped_random.values().sum::<u64>()
    }

    /// Every sent message is eventually delivered or accounted as dropped.
    pub fn reconciles(&self, in_flight: u64) -> bool {
        self.total_sent() == self.total_delivered() + self.total_dropped() + in_flight
    }
}

/// Rolling FNV-1a digest over the processed event sequence.
#[derive(Clone, Debug)]
pub struct TraceHasher {
    state: u64,
}

impl Default for TraceHasher {
    fn default() -> Self {
        TraceHasher {
            state: 0xcbf29ce484222325,
        }
    }
}

impl TraceHasher {
    fn write_u64(&mut self, value: u64) {
        for byte in value.to_be_bytes() {
            self.state ^= u64::from(byte);
            self.state = self.state.wrapping_mul(0x100000001b3);
        }
    }

    fn write_event(&mut self, event: &Event) {
        self.write_u64(event.at.millis());
        self.write_u64(event.seq);
        match &event.kind {
            EventKind::Deliver { msg, .. } => {
                self.write_u64(1);
                self.write_u64(msg.sender.key());
                self.write_u64(msg.receiver.key());
                self.write_u64(fnv1a64(msg.kind_name().as_bytes()));
            }
            EventKind::TimerFire { peer, .. } => {
                self.write_u64(2);
                self.write_u64(peer.key());
            }
            EventKind::PeerJoin { spec } => {
                self.write_u64(3);
                self.write_u64(spec.id.key());
            }
            EventKind::PeerLeave { peer } => {
                self.write_u64(4);
                self.write_u64(peer.key());
            }
            EventKind::ChurnSelect { .. } => self.write_u64(5),
            EventKind::ScenarioEnd => self.write_u64(6),
        }
    }

    pub fn digest(&self) -> u64 {
        self.state
    }
}

/// The assembled world: event queue, peers, services and metrics.
pub struct Engine {
    queue: EventQueue,
    services: Services,
    peers: BTreeMap<PeerId, PeerState>,
    policies: BTreeMap<PeerId, BehaviorPolicy>,
    stream: StreamId,
    config: ProtocolConfig,
    params: DecayParams,
    spec: ScenarioSpec,
    counters: MessageCounters,
    metrics: MetricsLog,
    trace: TraceHasher,
    drop_rng: SplitMix64,
    next_sample_at: SimTime,
    source: PeerId,
}

impl Engine {
    /// Validate the scenario and build the initial event schedule.
    pub fn new(spec: ScenarioSpec) -> Result<Self, SimError> {
        if let Err(errors) = spec.validate() {
            let text = errors
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join("; ");
            return Err(SimError::InvalidScenario(text));
        }
        let stream = crate::id::hash_stream_id(
            &spec.stream.title,
            &spec.stream.speaker,
            &spec.stream.date,
            &spec.stream.time,
        );
        let params = DecayParams::new(spec.alpha);
        let config = spec.protocol_config();

        // deterministic peer identities, in creation order
        let mut id_rng = SplitMix64::derived(spec.seed, 0x1d5);
        let mut used = BTreeSet::new();
        let mut fresh_id = move || loop {
            let id = PeerId(id_rng.next_u64());
            if used.insert(id) {
                return id;
            }
        };

        let mut latency = LatencyModel::new(spec.latency.clone(), spec.seed);
        let mut queue = EventQueue::new();
        let mut policy_rng = SplitMix64::derived(spec.seed, 0x901c);
        let mut source_id = None;

        let mut schedule_group = |queue: &mut EventQueue,
                                  latency: &mut LatencyModel,
                                  at: u64,
                                  count: usize,
                                  mix: &PolicyMix,
                                  role: PeerRole,
                                  strategy: crate::node::ReportStrategy|
         -> Vec<PeerSpec> {
            let policies = expand_mix(count, mix, strategy, &mut policy_rng);
            policies
                .into_iter()
                .map(|policy| {
                    let id = fresh_id();
                    latency.register(id);
                    let spec = PeerSpec { id, role, policy };
                    queue
                        .schedule(SimTime(at), EventKind::PeerJoin { spec: spec.clone() })
                        .expect("joins are in the future");
                    spec
                })
                .collect()
        };

        for group in &spec.peers {
            match group.role {
                GroupRole::Source => {
                    let specs = schedule_group(
                        &mut queue,
                        &mut latency,
                        group.at_ms,
                        1,
                        &PolicyMix::default(),
                        PeerRole::Source,
                        spec.malicious_strategy,
                    );
                    source_id = Some(specs[0].id);
                }
                GroupRole::Subscribers => {
                    schedule_group(
                        &mut queue,
                        &mut latency,
                        group.at_ms,
                        group.count,
                        &group.mix,
                        PeerRole::Subscriber,
                        spec.malicious_strategy,
                    );
                }
            }
        }
        for arrival in &spec.churn.arrivals {
            schedule_group(
                &mut queue,
                &mut latency,
                arrival.at_ms,
                arrival.count,
                &arrival.mix,
                PeerRole::Subscriber,
                spec.malicious_strategy,
            );
        }
        if let Some(flash) = &spec.flash_crowd {
            schedule_group(
                &mut queue,
                &mut latency,
                flash.at_ms,
                flash.count,
                &PolicyMix::default(),
                PeerRole::Subscriber,
                spec.malicious_strategy,
            );
        }
        for departure in &spec.churn.departures {
            queue
                .schedule(
                    SimTime(departure.at_ms),
                    EventKind::ChurnSelect {
                        select: departure.select.clone(),
                    },
                )
                .expect("departures are in the future");
        }
        if let Some(end) = spec.stream_end_ms {
            queue
                .schedule(
                    SimTime(end),
                    EventKind::TimerFire {
                        peer: source_id.expect("validated: one source"),
                        timer: TimerKind::EndStream,
                    },
                )
                .expect("stream end within duration");
        }
        queue
            .schedule(SimTime(spec.duration_ms), EventKind::ScenarioEnd)
            .expect("scenario end in the future");

        let source = source_id.expect("validated: one source");
        let mut bootstrap = BootstrapRegistry::new(spec.seed);
        bootstrap
            .registry
            .register_stream(
                stream,
                source,
                &format!(
                    "{} / {} / {} {}",
                    spec.stream.title, spec.stream.speaker, spec.stream.date, spec.stream.time
                ),
            )
            .expect("fresh registry");

        let metrics_period = spec.metrics_period_ms;
        let drop_rng = SplitMix64::derived(spec.seed, 0xd709);
        Ok(Engine {
            queue,
            services: Services {
                now: SimTime::ZERO,
                bootstrap,
                latency,
                source,
                membership: BTreeSet::new(),
                holder_map: BTreeMap::new(),
            },
            peers: BTreeMap::new(),
            policies: BTreeMap::new(),
            stream,
            config,
            params,
            spec,
            counters: MessageCounters::default(),
            metrics: MetricsLog::new(metrics_period),
            trace: TraceHasher::default(),
            drop_rng,
            next_sample_at: SimTime::ZERO,
            source,
        })
    }

    pub fn source(&self) -> PeerId {
        self.source
    }

    pub fn stream(&self) -> StreamId {
        self.stream
    }

    /// Drive the scenario to completion and return the metrics log.
    pub fn run(mut self) -> Result<MetricsLog, SimError> {
        while let Some(event) = self.queue.pop() {
            // take metric samples for every cadence boundary we just crossed
            while self.next_sample_at < event.at {
                let at = self.next_sample_at;
                self.sample_metrics(at)?;
                self.next_sample_at = at + self.spec.metrics_period_ms;
            }
            self.services.now = event.at;
            self.trace.write_event(&event);
            match event.kind {
                EventKind::Deliver { msg, sent_at } => self.deliver(msg, sent_at)?,
                EventKind::TimerFire { peer, timer } => {
                    let actions = match self.peers.get_mut(&peer) {
                        Some(state) if !state.departed => {
                            state.on_timer(&mut self.services, timer)
                        }
                        _ => continue,
                    };
                    self.apply_actions(peer, actions)?;
                }
                EventKind::PeerJoin { spec } => self.peer_join(spec)?,
                EventKind::PeerLeave { peer } => self.peer_leave(peer),
                EventKind::ChurnSelect { select } => self.churn_select(&select)?,
                EventKind::ScenarioEnd => {
                    self.sample_metrics(event.at)?;
                    break;
                }
            }
        }
        self.finish()
    }

    fn finish(mut self) -> Result<MetricsLog, SimError> {
        let in_flight = self
            .queue
            .heap
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Deliver { .. }))
            .count() as u64;
        // undelivered messages at the horizon stay accounted as in flight
        self.metrics.finalize(
            &self.peers,
            &self.policies,
            self.source,
            &self.counters,
            in_flight,
            self.trace.digest(),
            self.services.now,
            self.params,
            &self.services.holder_map,
        );
        if !self.counters.reconciles(in_flight) {
            return Err(SimError::BrokenTree {
                at: self.services.now,
                detail: "message conservation violated".into(),
            });
        }
        Ok(self.metrics)
    }

    // ------------------------------------------------------------------
    // event handling
    // ------------------------------------------------------------------

    fn deliver(&mut self, msg: Message, sent_at: SimTime) -> Result<(), SimError> {
        let kind = msg.kind_name();
        let receiver = msg.receiver;
        let Some(state) = self.peers.get_mut(&receiver) else {
            *self.counters.dropped_departed.entry(kind).or_default() += 1;
            return Ok(());
        };
        if state.departed || !self.services.membership.contains(&receiver) {
            *self.counters.dropped_departed.entry(kind).or_default() += 1;
            return Ok(());
        }
        *self.counters.delivered.entry(kind).or_default() += 1;
        let actions = state.on_message(&mut self.services, &msg, sent_at);
        self.apply_actions(receiver, actions)
    }

    fn peer_join(&mut self, spec: PeerSpec) -> Result<(), SimError> {
        let now = self.services.now;
        log::info!("{} joins as {:?} ({:?})", spec.id, spec.role, spec.policy);
        self.services.membership.insert(spec.id);
        self.services.bootstrap.add_member(spec.id);
        self.policies.insert(spec.id, spec.policy);
        let state = PeerState::new(
            spec.id,
            spec.role,
            spec.policy,
            self.stream,
            self.config,
            self.params,
            now,
        );
        self.peers.insert(spec.id, state);
        // the new member's own record enters the layer at the initial value
        // the moment it registers
        let record = if spec.role == PeerRole::Source {
            RepRecord::pinned(spec.id, now)
        } else {
            RepRecord::new(spec.id, self.config.initial_reputation, now)
        };
        self.rehome_replicas(Some((spec.id, record)));
        let state = self.peers.get_mut(&spec.id).expect("just inserted");
        let actions = state.start(&mut self.services);
        self.apply_actions(spec.id, actions)
    }

    fn peer_leave(&mut self, peer: PeerId) {
        if let Some(state) = self.peers.get_mut(&peer) {
            if !state.departed {
                log::info!("{peer} leaves silently");
                state.departed = true;
            }
        }
        self.services.membership.remove(&peer);
        self.services.bootstrap.remove_member(peer);
        self.metrics.note_departure(peer, self.services.now);
        self.rehome_replicas(None);
    }

    fn churn_select(&mut self, select: &Selection) -> Result<(), SimError> {
        let now = self.services.now;
        let victims: Vec<PeerId> = match select {
            Selection::RandomSubscribers { count } => {
                let mut pool: Vec<PeerId> = self
                    .live_subscribers()
                    .into_iter()
                    .collect();
                let mut rng = SplitMix64::derived(self.spec.seed ^ now.millis(), 0xc4u64);
                rng.shuffle(&mut pool);
                pool.truncate(*count);
                pool
            }
            Selection::InteriorFraction { fraction } => {
                let interior: Vec<PeerId> = self
                    .live_subscribers()
                    .into_iter()
                    .filter(|p| {
                        self.peers
                            .get(p)
                            .is_some_and(|s| s.child_count() > 0 && s.parent().is_some())
                    })
                    .collect();
                let take = ((interior.len() as f64) * fraction).ceil() as usize;
                let mut pool = interior;
                let mut rng = SplitMix64::derived(self.spec.seed ^ now.millis(), 0x1f7a);
                rng.shuffle(&mut pool);
                pool.truncate(take);
                pool
            }
        };
        for victim in victims {
            self.metrics.note_removed_parent(victim, now);
            self.queue.schedule(now, EventKind::PeerLeave { peer: victim })?;
        }
        Ok(())
    }

    fn live_subscribers(&self) -> Vec<PeerId> {
        self.services
            .membership
            .iter()
            .copied()
            .filter(|p| *p != self.source)
            .filter(|p| self.peers.get(p).is_some_and(|s| !s.departed))
            .collect()
    }

    /// Convert handler actions into scheduled events, tracking topology
    /// transitions for the metrics log.
    fn apply_actions(&mut self, peer: PeerId, actions: Actions) -> Result<(), SimError> {
        let now = self.services.now;
        for (reporter, subject, outcome) in &actions.outcomes {
            self.metrics.note_update_outcome(*reporter, *subject, *outcome);
        }
        for (timer, delay) in actions.timers {
            self.queue
                .schedule(now + delay, EventKind::TimerFire { peer, timer })?;
        }
        for msg in actions.messages {
            let kind = msg.kind_name();
            *self.counters.sent.entry(kind).or_default() += 1;
            if self.spec.drop_probability > 0.0
                && self.drop_rng.next_f64() < self.spec.drop_probability
            {
                *self.counters.dropped_random.entry(kind).or_default() += 1;
                continue;
            }
            let lat = self.services.latency.latency_ms(msg.sender, msg.receiver);
            self.queue.schedule(
                now + lat,
                EventKind::Deliver {
                    msg,
                    sent_at: now,
                },
            )?;
        }
        // track parent transitions of the acting peer
        if let Some(state) = self.peers.get(&peer) {
            self.metrics.track_parent(peer, state.parent(), now);
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // replica re-homing
    // ------------------------------------------------------------------

    /// Recompute every subject's holder set after a membership change.
    /// `new_subject` additionally introduces a fresh record. New holders are
    /// initialized from the median of the surviving copies; a record with no
    /// survivors resets to the initial value.
    fn rehome_replicas(&mut self, new_subject: Option<(PeerId, RepRecord)>) {
        let now = self.services.now;
        let mut subjects: BTreeSet<PeerId> = self.services.holder_map.keys().copied().collect();
        if let Some((subject, _)) = &new_subject {
            subjects.insert(*subject);
        }
        let fresh_record = new_subject;
        for subject in subjects {
            let old_holders = self
                .services
                .holder_map
                .get(&subject)
                .cloned()
                .unwrap_or_default();
            let Ok(set) = locate_replicas(subject, self.services.membership.iter()) else {
                // empty network: drop the mapping, records die with holders
                self.services.holder_map.remove(&subject);
                continue;
            };
            let new_holders = set.holders;
            if new_holders == old_holders {
                if let Some((s, record)) = &fresh_record {
                    if *s == subject {
                        for holder in &new_holders {
                            if let Some(state) = self.peers.get_mut(holder) {
                                state.store.insert_record(record.clone());
                            }
                        }
                    }
                }
                self.services.holder_map.insert(subject, new_holders);
                continue;
            }
            // survivors' view of the record (decayed to now)
            let mut survivor_values = Vec::new();
            let mut pinned = false;
            for holder in &old_holders {
                if let Some(state) = self.peers.get(holder) {
                    if let Some(record) = state.store.record(subject) {
                        pinned |= record.pinned;
                        survivor_values.push(record.value_at(now, self.params));
                    }
                }
            }
            let init_value = if let Some((s, record)) = &fresh_record {
                if *s == subject {
                    pinned = record.pinned;
                    record.reputation.value
                } else {
                    resolve_replicas(&survivor_values, 3)
                        .unwrap_or(self.config.initial_reputation)
                }
            } else {
                resolve_replicas(&survivor_values, 3).unwrap_or(self.config.initial_reputation)
            };
            for holder in &new_holders {
                if old_holders.contains(holder) {
                    continue;
                }
                if let Some(state) = self.peers.get_mut(holder) {
                    let record = if pinned {
                        RepRecord::pinned(subject, now)
                    } else {
                        RepRecord::new(subject, init_value, now)
                    };
                    state.store.insert_record(record);
                }
            }
            for holder in &old_holders {
                if !new_holders.contains(holder) {
                    if let Some(state) = self.peers.get_mut(holder) {
                        state.store.drop_subject(subject);
                    }
                }
            }
            self.services.holder_map.insert(subject, new_holders);
        }
    }

    // ------------------------------------------------------------------
    // metrics
    // ------------------------------------------------------------------

    fn sample_metrics(&mut self, at: SimTime) -> Result<(), SimError> {
        // omniscient read of each live peer's reputation: the median over
        // its holders' decayed copies, exactly what a full quorum query
        // would return
        let mut reputations = BTreeMap::new();
        for peer in self.services.membership.iter() {
            let holders = self.services.holder_map.get(peer).cloned().unwrap_or_default();
            let mut values = Vec::new();
            for holder in &holders {
                if let Some(state) = self.peers.get(holder) {
                    if let Some(v) = state.store.answer(*peer, at, self.params) {
                        values.push(v);
                    }
                }
            }
            if let Ok(v) = resolve_replicas(&values, 3) {
                reputations.insert(*peer, v);
            }
        }
        let mut edges = Vec::new();
        for (id, state) in &self.peers {
            if state.departed {
                continue;
            }
            if let Some(parent) = state.parent() {
                edges.push((*id, parent));
            }
        }
        self.assert_tree(at, &edges)?;
        self.metrics.sample(at, reputations, edges);
        Ok(())
    }

    /// Parent edges must form a forest: no cycles, ever.
    fn assert_tree(&self, at: SimTime, edges: &[(PeerId, PeerId)]) -> Result<(), SimError> {
        let parent_of: BTreeMap<PeerId, PeerId> = edges.iter().copied().collect();
        for start in parent_of.keys() {
            let mut seen = BTreeSet::new();
            let mut cursor = *start;
            seen.insert(cursor);
            while let Some(next) = parent_of.get(&cursor) {
                if !seen.insert(*next) {
                    return Err(SimError::BrokenTree {
                        at,
                        detail: format!("cycle through {next} starting from {start}"),
                    });
                }
                cursor = *next;
            }
        }
        Ok(())
    }
}

/// Deterministically expand a policy mix into per-peer policies: exact
/// largest-remainder counts, then a seeded shuffle so the classes interleave
/// in join order.
fn expand_mix(
    count: usize,
    mix: &PolicyMix,
    strategy: crate::node::ReportStrategy,
    rng: &mut SplitMix64,
) -> Vec<BehaviorPolicy> {
    if count == 0 {
        return Vec::new();
    }
    let targets = [
        (BehaviorPolicy::Altruistic, mix.altruistic),
        (BehaviorPolicy::FreeRider, mix.free_rider),
        (BehaviorPolicy::Malicious(strategy), mix.malicious),
    ];
    let mut counts: Vec<usize> = targets
        .iter()
        .map(|(_, f)| (f * count as f64).floor() as usize)
        .collect();
    let mut remainders: Vec<(usize, f64)> = targets
        .iter()
        .enumerate()
        .map(|(i, (_, f))| (i, f * count as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut assigned: usize = counts.iter().sum();
    for (idx, _) in remainders {
        if assigned >= count {
            break;
        }
        counts[idx] += 1;
        assigned += 1;
    }
    let mut policies = Vec::with_capacity(count);
    for ((policy, _), n) in targets.iter().zip(&counts) {
        policies.extend(std::iter::repeat(*policy).take(*n));
    }
    rng.shuffle(&mut policies);
    policies
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{PolicyMix, StreamMeta};

    #[test]
    fn queue_orders_by_time_then_sequence() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(5), EventKind::ScenarioEnd).unwrap();
        q.schedule(SimTime(1), EventKind::ScenarioEnd).unwrap();
        q.schedule(SimTime(5), EventKind::ScenarioEnd).unwrap();
        let order: Vec<(u64, u64)> = std::iter::from_fn(|| q.pop())
            .map(|e| (e.at.millis(), e.seq))
            .collect();
        assert_eq!(order, vec![(1, 1), (5, 0), (5, 2)]);
    }

    #[test]
    fn same_time_events_run_in_insertion_order() {
        let mut q = EventQueue::new();
        let s1 = q.schedule(SimTime(3), EventKind::ScenarioEnd).unwrap();
        let s2 = q.schedule(SimTime(3), EventKind::ScenarioEnd).unwrap();
        assert!(s1 < s2);
        assert_eq!(q.pop().unwrap().seq, s1);
        assert_eq!(q.pop().unwrap().seq, s2);
    }

    #[test]
    fn past_events_are_rejected() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(10), EventKind::ScenarioEnd).unwrap();
        q.pop();
        assert_eq!(
            q.schedule(SimTime(9), EventKind::ScenarioEnd).unwrap_err(),
            SimError::SchedulingViolation {
                at: SimTime(9),
                now: SimTime(10)
            }
        );
        // an event at the current instant is fine
        q.schedule(SimTime(10), EventKind::ScenarioEnd).unwrap();
    }

    #[test]
    fn latency_is_symmetric_stable_and_positive() {
        let model = LatencyModel::new(LatencySpec::Uniform { lo_ms: 10, hi_ms: 50 }, 7);
        for a in 1..20u64 {
            for b in 1..20u64 {
                let ab = model.latency_ms(PeerId(a), PeerId(b));
                let ba = model.latency_ms(PeerId(b), PeerId(a));
                assert_eq!(ab, ba);
                assert!(ab >= 1);
                if a != b {
                    assert!((10..=50).contains(&ab));
                }
                assert_eq!(ab, model.latency_ms(PeerId(a), PeerId(b)));
            }
        }
    }

    fn tiny_scenario(subscribers: usize, duration_ms: u64, seed: u64) -> ScenarioSpec {
        let mut spec = ScenarioSpec::basic(duration_ms, seed, subscribers, PolicyMix::default());
        spec.stream = StreamMeta::default();
        spec
    }

    #[test]
    fn source_only_scenario_beacons_without_joins() {
        let mut spec = tiny_scenario(1, 5000, 3);
        spec.peers.truncate(1); // drop the subscriber group: source only
        let log = Engine::new(spec).unwrap().run().unwrap();
        assert_eq!(*log.message_sent.get("beacon").unwrap_or(&0), 0); // empty RT: no targets
        assert_eq!(*log.message_sent.get("join_request").unwrap_or(&0), 0);
        assert_eq!(*log.message_sent.get("join_accept").unwrap_or(&0), 0);
    }

    #[test]
    fn two_peer_scenario_attaches_subscriber() {
        let spec = tiny_scenario(1, 10_000, 3);
        let log = Engine::new(spec).unwrap().run().unwrap();
        assert!(*log.message_sent.get("join_accept").unwrap_or(&0) >= 1);
        assert!(*log.message_sent.get("stream_chunk").unwrap_or(&0) > 0);
        let roster = &log.roster;
        assert_eq!(roster.len(), 1);
        assert!(roster[0].attached, "subscriber should be attached at end");
        assert!(roster[0].chunks.received > 0);
    }

    #[test]
    fn identical_seeds_identical_traces() {
        let a = Engine::new(tiny_scenario(10, 15_000, 42)).unwrap().run().unwrap();
        let b = Engine::new(tiny_scenario(10, 15_000, 42)).unwrap().run().unwrap();
        assert_eq!(a.trace_hash, b.trace_hash);
        assert_eq!(a.reputation_series, b.reputation_series);
        let c = Engine::new(tiny_scenario(10, 15_000, 43)).unwrap().run().unwrap();
        assert_ne!(a.trace_hash, c.trace_hash);
    }

    #[test]
    fn conservation_holds_in_small_run() {
        let log = Engine::new(tiny_scenario(8, 12_000, 9)).unwrap().run().unwrap();
        let sent: u64 = log.message_sent.values().sum();
        let delivered: u64 = log.message_delivered.values().sum();
        let dropped: u64 = log.message_dropped.values().sum();
        assert_eq!(sent, delivered + dropped + log.in_flight_at_end);
    }

    #[test]
    fn policy_mix_expansion_is_exact() {
        let mut rng = SplitMix64::new(5);
        let mix = PolicyMix { altruistic: 0.7, free_rider: 0.2, malicious: 0.1 };
        let policies = expand_mix(100, &mix, crate::node::ReportStrategy::AlwaysZero, &mut rng);
        let altruistic = policies.iter().filter(|p| matches!(p, BehaviorPolicy::Altruistic)).count();
        let free = policies.iter().filter(|p| matches!(p, BehaviorPolicy::FreeRider)).count();
        let malicious = policies.iter().filter(|p| matches!(p, BehaviorPolicy::Malicious(_))).count();
        assert_eq!((altruistic, free, malicious), (70, 20, 10));
    }
}

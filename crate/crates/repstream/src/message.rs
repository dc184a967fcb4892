//! Protocol packet vocabulary.
//!
//! The payload shape is fixed by the variant, so a malformed combination is
//! unrepresentable. A `JoinRequest` from an existing child doubles as the
//! keepalive; a `StreamEnd` sent by a child tells its parent that the child
//! has left the slot.

use serde::{Deserialize, Serialize};

use crate::id::{PeerId, StreamId};
use crate::time::SimTime;

/// One protocol packet in flight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub sender: PeerId,
    pub receiver: PeerId,
    pub stream: StreamId,
    pub kind: MessageKind,
}

impl Message {
    /// Build a message; sender and receiver must differ.
    pub fn new(sender: PeerId, receiver: PeerId, stream: StreamId, kind: MessageKind) -> Message {
        assert_ne!(sender, receiver, "message sender equals receiver");
        Message {
            sender,
            receiver,
            stream,
            kind,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        self.kind.name()
    }
}

/// The closed set of packet kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MessageKind {
    /// Periodic liveness packet advertising media availability, flooded down
    /// the overlay. `origin` is the stream source; `seq` dedups forwards;
    /// `via_parent` is the forwarder's own current parent, giving each child
    /// a fresh view of its grandparent.
    Beacon {
        origin: PeerId,
        seq: u64,
        via_parent: Option<PeerId>,
    },
    /// Request to become a child of the receiver (or keepalive when the
    /// sender already is one).
    JoinRequest,
    /// Admission: the receiver becomes a child. Carries the accepter's own
    /// parent (the new grandparent) and the accepter's ancestor chain,
    /// nearest first, which the requester uses to refuse attachments inside
    /// its own subtree.
    JoinAccept {
        grandparent: Option<PeerId>,
        ancestors: Vec<PeerId>,
    },
    /// Refusal, delegating the requester to the sender's children.
    JoinReject { children: Vec<PeerId> },
    /// The receiver has been replaced; the carried siblings are candidate
    /// feeders.
    Evict { siblings: Vec<PeerId> },
    /// One opaque media chunk.
    StreamChunk { seq: u64, origin_ts: SimTime },
    /// Reputation report about `target`, fanned to the target's replica
    /// holders. `value` is the mass entering the aggregation; `reporter_rep`
    /// is the reporter's claimed own reputation snapshot.
    RepUpdate {
        target: PeerId,
        value: f64,
        reporter_rep: f64,
    },
    /// Ask a replica holder for `subject`'s current value. `with_log` also
    /// requests the recent-reporter log (used by auditing parents).
    RepQuery {
        subject: PeerId,
        query_id: u64,
        with_log: bool,
    },
    /// Holder's answer to a `RepQuery`.
    RepReply {
        subject: PeerId,
        query_id: u64,
        value: f64,
        known: bool,
        log: Vec<ReportLogEntry>,
    },
    /// Stream teardown (from upstream) or a child vacating its slot (from
    /// downstream).
    StreamEnd,
}

impl MessageKind {
    pub fn name(&self) -> &'static str {
        match self {
            MessageKind::Beacon { .. } => "beacon",
            MessageKind::JoinRequest => "join_request",
            MessageKind::JoinAccept { .. } => "join_accept",
            MessageKind::JoinReject { .. } => "join_reject",
            MessageKind::Evict { .. } => "evict",
            MessageKind::StreamChunk { .. } => "stream_chunk",
            MessageKind::RepUpdate { .. } => "rep_update",
            MessageKind::RepQuery { .. } => "rep_query",
            MessageKind::RepReply { .. } => "rep_reply",
            MessageKind::StreamEnd => "stream_end",
        }
    }

    /// All kind names, in a fixed order (used by the message counters).
    pub const NAMES: [&'static str; 10] = [
        "beacon",
        "join_request",
        "join_accept",
        "join_reject",
        "evict",
        "stream_chunk",
        "rep_update",
        "rep_query",
        "rep_reply",
        "stream_end",
    ];
}

/// One remembered report at a replica holder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportLogEntry {
    pub reporter: PeerId,
    pub value: f64,
    pub at: SimTime,
    /// Whether the holder let the report into the aggregation.
    pub included: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[should_panic(expected = "sender equals receiver")]
    fn self_addressed_messages_are_rejected() {
        Message::new(PeerId(1), PeerId(1), StreamId(0), MessageKind::JoinRequest);
    }

    #[test]
    fn kind_names_cover_every_variant() {
        let samples = [
            MessageKind::Beacon {
                origin: PeerId(0),
                seq: 0,
                via_parent: None,
            },
            MessageKind::JoinRequest,
            MessageKind::JoinAccept {
                grandparent: None,
                ancestors: vec![],
            },
            MessageKind::JoinReject { children: vec![] },
            MessageKind::Evict { siblings: vec![] },
            MessageKind::StreamChunk {
                seq: 0,
                origin_ts: SimTime(0),
            },
            MessageKind::RepUpdate {
                target: PeerId(0),
                value: 0.0,
                reporter_rep: 0.0,
            },
            MessageKind::RepQuery {
                subject: PeerId(0),
                query_id: 0,
                with_log: false,
            },
            MessageKind::RepReply {
                subject: PeerId(0),
                query_id: 0,
                value: 0.0,
                known: false,
                log: vec![],
            },
            MessageKind::StreamEnd,
        ];
        for (sample, name) in samples.iter().zip(MessageKind::NAMES) {
            assert_eq!(sample.name(), name);
        }
    }
}

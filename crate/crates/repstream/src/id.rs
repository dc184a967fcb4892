//! Identifiers on the 64-bit circular key space.
//!
//! Peers, streams and DHT layers all live on the same ring. Stream and layer
//! ids are derived with FNV-1a so that independent implementations agree on
//! the exact digests.

use std::fmt;

use serde::{Deserialize, Serialize};

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// Separator between hashed fields; prevents ("ab","c") / ("a","bc") aliasing.
const FIELD_SEP: u8 = 0x1f;

/// Domain-separation tag appended when deriving a reputation layer key.
const REPUTATION_TAG: &[u8] = b"reputation";

/// 64-bit FNV-1a digest.
pub fn fnv1a64(data: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &byte in data {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Node identifier on the circular key space.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct PeerId(pub u64);

impl PeerId {
    pub fn key(self) -> u64 {
        self.0
    }

    /// Ring position of this peer's reputation record, used for replica
    /// placement.
    pub fn record_key(self) -> u64 {
        fnv1a64(&self.0.to_be_bytes())
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Stream identifier, a deterministic digest of the session metadata.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StreamId(pub u64);

impl StreamId {
    pub fn key(self) -> u64 {
        self.0
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Which of the two per-stream DHT layers a key addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    MediaLayer,
    ReputationLayer,
}

/// A DHT layer key together with its role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerId {
    pub key: u64,
    pub kind: LayerKind,
}

/// Digest of the session metadata: FNV-1a over the UTF-8 fields joined with
/// a 0x1f separator.
pub fn hash_stream_id(title: &str, speaker: &str, date: &str, time: &str) -> StreamId {
    let mut buf = Vec::with_capacity(title.len() + speaker.len() + date.len() + time.len() + 3);
    for (i, field) in [title, speaker, date, time].iter().enumerate() {
        if i > 0 {
            buf.push(FIELD_SEP);
        }
        buf.extend_from_slice(field.as_bytes());
    }
    StreamId(fnv1a64(&buf))
}

/// The media layer shares its key with the stream itself.
pub fn media_layer(stream: StreamId) -> LayerId {
    LayerId {
        key: stream.key(),
        kind: LayerKind::MediaLayer,
    }
}

/// Reputation layer key: FNV-1a over the big-endian stream key bytes followed
/// by the `reputation` tag.
pub fn derive_reputation_layer(stream: StreamId) -> LayerId {
    let mut buf = Vec::with_capacity(8 + REPUTATION_TAG.len());
    buf.extend_from_slice(&stream.key().to_be_bytes());
    buf.extend_from_slice(REPUTATION_TAG);
    LayerId {
        key: fnv1a64(&buf),
        kind: LayerKind::ReputationLayer,
    }
}

/// Distance between two ring positions: the shorter way around.
/// Symmetric, zero iff equal, never exceeds 2^63.
pub fn circular_distance_keys(a: u64, b: u64) -> u64 {
    let forward = a.wrapping_sub(b);
    let backward = b.wrapping_sub(a);
    forward.min(backward)
}

/// Circular distance between two peer ids.
pub fn circular_distance(a: PeerId, b: PeerId) -> u64 {
    circular_distance_keys(a.0, b.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Digests below were produced with an independent FNV-1a reference
    // implementation and are frozen as fixtures.

    #[test]
    fn stream_id_is_deterministic() {
        let a = hash_stream_id("a", "b", "c", "d");
        let b = hash_stream_id("a", "b", "c", "d");
        assert_eq!(a, b);
        assert_eq!(a.key(), 16896310790813686952);
    }

    #[test]
    fn stream_id_distinguishes_fields() {
        let a = hash_stream_id("a", "b", "c", "d");
        let b = hash_stream_id("a", "b", "c", "e");
        assert_ne!(a, b);
        assert_eq!(b.key(), 16896311890325315163);
    }

    #[test]
    fn stream_id_matches_reference_digest() {
        let id = hash_stream_id("Talk", "Singh", "2024-01-01", "10:00");
        assert_eq!(id.key(), 15073993080450232516);
    }

    #[test]
    fn separator_prevents_field_aliasing() {
        assert_ne!(
            hash_stream_id("ab", "c", "d", "e"),
            hash_stream_id("a", "bc", "d", "e")
        );
    }

    #[test]
    fn reputation_layer_is_deterministic() {
        let s = StreamId(15073993080450232516);
        let l1 = derive_reputation_layer(s);
        let l2 = derive_reputation_layer(s);
        assert_eq!(l1, l2);
        assert_eq!(l1.kind, LayerKind::ReputationLayer);
        assert_eq!(l1.key, 6431129295464587565);
    }

    #[test]
    fn media_layer_key_equals_stream_key() {
        let s = StreamId(42);
        let l = media_layer(s);
        assert_eq!(l.key, 42);
        assert_eq!(l.kind, LayerKind::MediaLayer);
    }

    #[test]
    fn reputation_layer_of_zero_key() {
        // Digest of eight zero bytes followed by the tag.
        let l = derive_reputation_layer(StreamId(0));
        assert_eq!(l.key, 9612324442715112298);
    }

    #[test]
    fn circular_distance_identity() {
        assert_eq!(circular_distance(PeerId(5), PeerId(5)), 0);
    }

    #[test]
    fn circular_distance_wraparound() {
        assert_eq!(circular_distance(PeerId(0), PeerId(u64::MAX)), 1);
        assert_eq!(circular_distance(PeerId(u64::MAX), PeerId(0)), 1);
    }

    #[test]
    fn circular_distance_direct() {
        assert_eq!(circular_distance(PeerId(10), PeerId(4)), 6);
    }

    #[test]
    fn circular_distance_symmetric_and_bounded() {
        let samples = [
            0u64,
            1,
            u64::MAX,
            u64::MAX / 2,
            u64::MAX / 2 + 1,
            0xdeadbeef,
            1 << 63,
        ];
        for &a in &samples {
            for &b in &samples {
                let d1 = circular_distance(PeerId(a), PeerId(b));
                let d2 = circular_distance(PeerId(b), PeerId(a));
                assert_eq!(d1, d2);
                assert!(d1 <= 1 << 63);
                assert_eq!(d1 == 0, a == b);
            }
        }
    }
}

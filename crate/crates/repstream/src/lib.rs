//! Deterministic discrete-event simulator for a reputation-driven
//! peer-to-peer live-streaming overlay.
//!
//! Peers form a single-parent multicast tree per stream, exchange beacons and
//! join requests, and store each other's reputations in a replicated ring
//! DHT. Reputation aggregates incoming reports with exponential decay, so
//! free riders fade out of the tree while contributing peers converge toward
//! the top of the range. The engine is fully deterministic: a scenario plus
//! a seed reproduces a bit-identical event trace.

pub mod dht;
pub mod id;
pub mod message;
pub mod metrics;
pub mod node;
pub mod reputation;
pub mod rng;
pub mod scenario;
pub mod sim;
pub mod tables;
pub mod time;

pub use id::{circular_distance, derive_reputation_layer, hash_stream_id, PeerId, StreamId};
pub use reputation::{aggregate, decay_only, fixed_point, resolve_replicas, DecayParams, Reputation};
pub use time::SimTime;

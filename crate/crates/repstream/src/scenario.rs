//! Scenario files: the JSON run configuration and its validation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::node::{ProtocolConfig, ReportStrategy};
use crate::reputation::DEFAULT_ALPHA;

/// Top-level scenario configuration. Unknown fields are rejected so typos
/// surface as validation errors instead of silently falling back to
/// defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub duration_ms: u64,
    pub seed: u64,
    #[serde(default = "defaults::fanout")]
    pub fanout: usize,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::beacon_period_ms")]
    pub beacon_period_ms: u64,
    #[serde(default = "defaults::chunk_period_ms")]
    pub chunk_period_ms: u64,
    #[serde(default = "defaults::join_timeout_ms")]
    pub join_timeout_ms: u64,
    #[serde(default = "defaults::keepalive_timeout_ms")]
    pub keepalive_timeout_ms: u64,
    #[serde(default)]
    pub stream: StreamMeta,
    pub peers: Vec<PeerGroup>,
    #[serde(default)]
    pub latency: LatencySpec,
    #[serde(default)]
    pub churn: ChurnSpec,
    #[serde(default)]
    pub flash_crowd: Option<FlashCrowd>,
    /// End the stream early; otherwise it runs for the whole scenario.
    #[serde(default)]
    pub stream_end_ms: Option<u64>,

    // advanced knobs, defaulted
    #[serde(default = "defaults::report_every_chunks")]
    pub report_every_chunks: u64,
    #[serde(default = "defaults::keepalive_period_ms")]
    pub keepalive_period_ms: u64,
    #[serde(default = "defaults::parent_timeout_ms")]
    pub parent_timeout_ms: u64,
    #[serde(default = "defaults::climb_period_ms")]
    pub climb_period_ms: u64,
    #[serde(default = "defaults::audit_period_ms")]
    pub audit_period_ms: u64,
    #[serde(default = "defaults::audit_window_ms")]
    pub audit_window_ms: u64,
    #[serde(default = "defaults::audit_delta")]
    pub audit_delta: f64,
    #[serde(default = "defaults::audit_penalty")]
    pub audit_penalty: f64,
    #[serde(default = "defaults::initial_reputation")]
    pub initial_reputation: f64,
    #[serde(default = "defaults::malicious_strategy")]
    pub malicious_strategy: ReportStrategy,
    #[serde(default)]
    pub drop_probability: f64,
    #[serde(default = "defaults::metrics_period_ms")]
    pub metrics_period_ms: u64,
    #[serde(default = "defaults::rep_query_timeout_ms")]
    pub rep_query_timeout_ms: u64,
    #[serde(default = "defaults::rep_cache_ms")]
    pub rep_cache_ms: u64,
    #[serde(default = "defaults::reorder_window_ms")]
    pub reorder_window_ms: u64,
}

mod defaults {
    use super::ReportStrategy;

    pub fn fanout() -> usize {
        4
    }
    pub fn alpha() -> f64 {
        super::DEFAULT_ALPHA
    }
    pub fn beacon_period_ms() -> u64 {
        1000
    }
    pub fn chunk_period_ms() -> u64 {
        100
    }
    pub fn join_timeout_ms() -> u64 {
        2000
    }
    pub fn keepalive_timeout_ms() -> u64 {
        3000
    }
    pub fn report_every_chunks() -> u64 {
        10
    }
    pub fn keepalive_period_ms() -> u64 {
        1000
    }
    pub fn parent_timeout_ms() -> u64 {
        2000
    }
    pub fn climb_period_ms() -> u64 {
        5000
    }
    pub fn audit_period_ms() -> u64 {
        1000
    }
    pub fn audit_window_ms() -> u64 {
        3000
    }
    pub fn audit_delta() -> f64 {
        0.2
    }
    pub fn audit_penalty() -> f64 {
        0.1
    }
    pub fn initial_reputation() -> f64 {
        0.5
    }
    pub fn malicious_strategy() -> ReportStrategy {
        ReportStrategy::AlwaysZero
    }
    pub fn metrics_period_ms() -> u64 {
        1000
    }
    pub fn rep_query_timeout_ms() -> u64 {
        1000
    }
    pub fn rep_cache_ms() -> u64 {
        1000
    }
    pub fn reorder_window_ms() -> u64 {
        200
    }
}

/// Session metadata hashed into the stream id.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamMeta {
    pub title: String,
    pub speaker: String,
    pub date: String,
    pub time: String,
}

impl Default for StreamMeta {
    fn default() -> Self {
        StreamMeta {
            title: "Live Session".into(),
            speaker: "Host".into(),
            date: "2024-01-01".into(),
            time: "10:00".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRole {
    Source,
    Subscribers,
}

/// A batch of peers entering the scenario together.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerGroup {
    pub role: GroupRole,
    #[serde(default)]
    pub at_ms: u64,
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default)]
    pub mix: PolicyMix,
}

fn one() -> usize {
    1
}

/// Behavior fractions within a subscriber group; must sum to 1.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyMix {
    #[serde(default)]
    pub altruistic: f64,
    #[serde(default)]
    pub free_rider: f64,
    #[serde(default)]
    pub malicious: f64,
}

impl Default for PolicyMix {
    fn default() -> Self {
        PolicyMix {
            altruistic: 1.0,
            free_rider: 0.0,
            malicious: 0.0,
        }
    }
}

impl PolicyMix {
    pub fn sum(&self) -> f64 {
        self.altruistic + self.free_rider + self.malicious
    }
}

/// Link latency model. Latencies are symmetric, at least 1 ms, and fixed for
/// a given seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatencySpec {
    Uniform { lo_ms: u64, hi_ms: u64 },
    /// Explicit pairwise matrix indexed by peer creation order.
    Matrix { latencies_ms: Vec<Vec<u64>> },
    /// Planar positions per peer creation index.
    Coordinates {
        positions: Vec<[f64; 2]>,
        ms_per_unit: f64,
    },
}

impl Default for LatencySpec {
    fn default() -> Self {
        LatencySpec::Uniform {
            lo_ms: 10,
            hi_ms: 50,
        }
    }
}

/// Scheduled arrivals and departures.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnSpec {
    #[serde(default)]
    pub arrivals: Vec<Arrival>,
    #[serde(default)]
    pub departures: Vec<Departure>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arrival {
    pub at_ms: u64,
    pub count: usize,
    #[serde(default)]
    pub mix: PolicyMix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Departure {
    pub at_ms: u64,
    pub select: Selection,
}

/// How departing peers are picked. Departures are silent crashes.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Selection {
    /// A seeded random sample of live subscribers.
    RandomSubscribers { count: usize },
    /// A seeded random fraction of current interior parents (peers with at
    /// least one child), rounded up.
    InteriorFraction { fraction: f64 },
}

/// A burst of simultaneous altruistic joiners.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlashCrowd {
    pub at_ms: u64,
    pub count: usize,
}

#[derive(Debug, Error)]
#[error("{field}: {problem}")]
pub struct ValidationError {
    pub field: String,
    pub problem: String,
}

fn fail(field: &str, problem: impl Into<String>) -> ValidationError {
    ValidationError {
        field: field.to_string(),
        problem: problem.into(),
    }
}

impl ScenarioSpec {
    /// Parse a scenario from JSON text; parse errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("line {}, column {}: {e}", e.line(), e.column()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn total_peer_count(&self) -> usize {
        let base: usize = self.peers.iter().map(|g| g.count).sum();
        let churn: usize = self.churn.arrivals.iter().map(|a| a.count).sum();
        let flash = self.flash_crowd.map(|f| f.count).unwrap_or(0);
        base + churn + flash
    }

    /// Schema-level and semantic validation.
    pub fn validate(&self) -> Result<(), Vec<ValidationError>> {
        let mut errors = Vec::new();
        if self.duration_ms == 0 {
            errors.push(fail("duration_ms", "must be positive"));
        }
        if self.fanout == 0 {
            errors.push(fail("fanout", "must be at least 1"));
        }
        if self.alpha <= 0.0 {
            errors.push(fail("alpha", "must be positive"));
        }
        for (name, v) in [
            ("beacon_period_ms", self.beacon_period_ms),
            ("chunk_period_ms", self.chunk_period_ms),
            ("join_timeout_ms", self.join_timeout_ms),
            ("keepalive_timeout_ms", self.keepalive_timeout_ms),
            ("report_every_chunks", self.report_every_chunks),
            ("keepalive_period_ms", self.keepalive_period_ms),
            ("parent_timeout_ms", self.parent_timeout_ms),
            ("climb_period_ms", self.climb_period_ms),
            ("audit_period_ms", self.audit_period_ms),
            ("audit_window_ms", self.audit_window_ms),
            ("metrics_period_ms", self.metrics_period_ms),
            ("rep_query_timeout_ms", self.rep_query_timeout_ms),
        ] {
            if v == 0 {
                errors.push(fail(name, "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.initial_reputation) {
            errors.push(fail("initial_reputation", "must lie in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            errors.push(fail("drop_probability", "must lie in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.audit_delta) {
            errors.push(fail("audit_delta", "must lie in [0,1]"));
        }

        let sources: usize = self
            .peers
            .iter()
            .filter(|g| g.role == GroupRole::Source)
            .map(|g| g.count)
            .sum();
        if sources != 1 {
            errors.push(fail("peers", format!("exactly one source required, found {sources}")));
        }
        if let Some(src) = self.peers.iter().find(|g| g.role == GroupRole::Source) {
            if src.at_ms != 0 {
                errors.push(fail("peers", "the source must join at t=0"));
            }
        }
        for (i, group) in self.peers.iter().enumerate() {
            if group.count == 0 {
                errors.push(fail(&format!("peers[{i}].count"), "must be positive"));
            }
            if group.at_ms >= self.duration_ms {
                errors.push(fail(
                    &format!("peers[{i}].at_ms"),
                    "must fall within the scenario duration",
                ));
            }
            if group.role == GroupRole::Subscribers {
                validate_mix(&mut errors, &format!("peers[{i}].mix"), &group.mix);
            }
        }
        for (i, arrival) in self.churn.arrivals.iter().enumerate() {
            if arrival.at_ms >= self.duration_ms {
                errors.push(fail(
                    &format!("churn.arrivals[{i}].at_ms"),
                    "must fall within the scenario duration",
                ));
            }
            validate_mix(&mut errors, &format!("churn.arrivals[{i}].mix"), &arrival.mix);
        }
        for (i, departure) in self.churn.departures.iter().enumerate() {
            if departure.at_ms >= self.duration_ms {
                errors.push(fail(
                    &format!("churn.departures[{i}].at_ms"),
                    "must fall within the scenario duration",
                ));
            }
            if let Selection::InteriorFraction { fraction } = departure.select {
                if !(0.0..=1.0).contains(&fraction) {
                    errors.push(fail(
                        &format!("churn.departures[{i}].select.fraction"),
                        "must lie in [0,1]",
                    ));
                }
            }
        }
        if let Some(flash) = &self.flash_crowd {
            if flash.at_ms >= self.duration_ms {
                errors.push(fail("flash_crowd.at_ms", "must fall within the scenario duration"));
            }
            if flash.count == 0 {
                errors.push(fail("flash_crowd.count", "must be positive"));
            }
        }
        if let Some(end) = self.stream_end_ms {
            if end >= self.duration_ms {
                errors.push(fail("stream_end_ms", "must fall within the scenario duration"));
            }
        }

        match &self.latency {
            LatencySpec::Uniform { lo_ms, hi_ms } => {
                if *lo_ms < 1 {
                    errors.push(fail("latency.lo_ms", "must be at least 1 ms"));
                }
                if lo_ms > hi_ms {
                    errors.push(fail("latency", "lo_ms must not exceed hi_ms"));
                }
            }
            LatencySpec::Matrix { latencies_ms } => {
                let n = self.total_peer_count();
                if latencies_ms.len() < n {
                    errors.push(fail(
                        "latency.latencies_ms",
                        format!("needs at least {n} rows, one per peer"),
                    ));
                }
                for (i, row) in latencies_ms.iter().enumerate() {
                    if row.len() != latencies_ms.len() {
                        errors.push(fail(
                            &format!("latency.latencies_ms[{i}]"),
                            "matrix must be square",
                        ));
                        break;
                    }
                }
                'sym: for (i, row) in latencies_ms.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        if i != j && *v < 1 {
                            errors.push(fail(
                                &format!("latency.latencies_ms[{i}][{j}]"),
                                "must be at least 1 ms",
                            ));
                            break 'sym;
                        }
                        if latencies_ms[j].len() > i && latencies_ms[j][i] != *v {
                            errors.push(fail(
                                &format!("latency.latencies_ms[{i}][{j}]"),
                                "matrix must be symmetric",
                            ));
                            break 'sym;
                        }
                    }
                }
            }
            LatencySpec::Coordinates {
                positions,
                ms_per_unit,
            } => {
                let n = self.total_peer_count();
                if positions.len() < n {
                    errors.push(fail(
                        "latency.positions",
                        format!("needs at least {n} positions, one per peer"),
                    ));
                }
                if *ms_per_unit <= 0.0 {
                    errors.push(fail("latency.ms_per_unit", "must be positive"));
                }
            }
        }

        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// The per-peer protocol knobs this scenario implies.
    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            fanout: self.fanout,
            initial_reputation: self.initial_reputation,
            beacon_period_ms: self.beacon_period_ms,
            chunk_period_ms: self.chunk_period_ms,
            report_every_chunks: self.report_every_chunks,
            keepalive_period_ms: self.keepalive_period_ms,
            keepalive_timeout_ms: self.keepalive_timeout_ms,
            parent_timeout_ms: self.parent_timeout_ms,
            join_timeout_ms: self.join_timeout_ms,
            climb_period_ms: self.climb_period_ms,
            audit_period_ms: self.audit_period_ms,
            audit_window_ms: self.audit_window_ms,
            audit_delta: self.audit_delta,
            audit_penalty: self.audit_penalty,
            sweep_period_ms: 1000,
            housekeeping_period_ms: 250,
            rt_refresh_period_ms: 2000,
            rep_query_timeout_ms: self.rep_query_timeout_ms,
            rep_cache_ms: self.rep_cache_ms,
            reorder_window_ms: self.reorder_window_ms,
        }
    }

    /// A small one-source scenario skeleton used by builders and tests.
    pub fn basic(duration_ms: u64, seed: u64, subscribers: usize, mix: PolicyMix) -> Self {
        ScenarioSpec {
            duration_ms,
            seed,
            fanout: defaults::fanout(),
            alpha: defaults::alpha(),
            beacon_period_ms: defaults::beacon_period_ms(),
            chunk_period_ms: defaults::chunk_period_ms(),
            join_timeout_ms: defaults::join_timeout_ms(),
            keepalive_timeout_ms: defaults::keepalive_timeout_ms(),
            stream: StreamMeta::default(),
            peers: vec![
                PeerGroup {
                    role: GroupRole::Source,
                    at_ms: 0,
                    count: 1,
                    mix: PolicyMix::default(),
                },
                PeerGroup {
                    role: GroupRole::Subscribers,
                    at_ms: 0,
                    count: subscribers,
                    mix,
                },
            ],
            latency: LatencySpec::default(),
            churn: ChurnSpec::default(),
            flash_crowd: None,
            stream_end_ms: None,
            report_every_chunks: defaults::report_every_chunks(),
            keepalive_period_ms: defaults::keepalive_period_ms(),
            parent_timeout_ms: defaults::parent_timeout_ms(),
            climb_period_ms: defaults::climb_period_ms(),
            audit_period_ms: defaults::audit_period_ms(),
            audit_window_ms: defaults::audit_window_ms(),
            audit_delta: defaults::audit_delta(),
            audit_penalty: defaults::audit_penalty(),
            initial_reputation: defaults::initial_reputation(),
            malicious_strategy: defaults::malicious_strategy(),
            drop_probability: 0.0,
            metrics_period_ms: defaults::metrics_period_ms(),
            rep_query_timeout_ms: defaults::rep_query_timeout_ms(),
            rep_cache_ms: defaults::rep_cache_ms(),
            reorder_window_ms: defaults::reorder_window_ms(),
        }
    }
}

fn validate_mix(errors: &mut Vec<ValidationError>, field: &str, mix: &PolicyMix) {
    for (name, v) in [
        ("altruistic", mix.altruistic),
        ("free_rider", mix.free_rider),
        ("malicious", mix.malicious),
    ] {
        if !(0.0..=1.0).contains(&v) {
            errors.push(fail(&format!("{field}.{name}"), "must lie in [0,1]"));
        }
    }
    if (mix.sum() - 1.0).abs() > 1e-9 {
        errors.push(fail(field, format!("fractions must sum to 1, got {}", mix.sum())));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid() -> ScenarioSpec {
        ScenarioSpec::basic(
            10_000,
            1,
            10,
            PolicyMix {
                altruistic: 0.7,
                free_rider: 0.2,
                malicious: 0.1,
            },
        )
    }

    #[test]
    fn basic_scenario_is_valid() {
        assert!(valid().validate().is_ok());
    }

    #[test]
    fn zero_fanout_is_rejected() {
        let mut spec = valid();
        spec.fanout = 0;
        let errors = spec.validate().unwrap_err();
        assert!(errors.iter().any(|e| e.field == "fanout"));
    }

    #[test]
    fn two_sources_are_rejected() {
        let mut spec = valid();
        spec.peers.push(PeerGroup {
            role: GroupRole::Source,
            at_ms: 0,
            count: 1,
            mix: PolicyMix::default(),
        });
        let errors = spec.validate().unwrap_err();
        assert!(errors.iter().any(|e| e.field == "peers"));
    }

    #[test]
    fn mix_must_sum_to_one() {
        let mut spec = valid();
        spec.peers[1].mix = PolicyMix {
            altruistic: 0.7,
            free_rider: 0.2,
            malicious: 0.0,
        };
        let errors = spec.validate().unwrap_err();
        assert!(errors.iter().any(|e| e.field == "peers[1].mix"));
    }

    #[test]
    fn json_round_trip_preserves_spec() {
        let spec = valid();
        let text = spec.to_json();
        let parsed = ScenarioSpec::from_json(&text).unwrap();
        assert_eq!(parsed.duration_ms, spec.duration_ms);
        assert_eq!(parsed.peers.len(), spec.peers.len());
        assert!(parsed.validate().is_ok());
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = ScenarioSpec::from_json("{ \"duration_ms\": }").unwrap_err();
        assert!(err.starts_with("line 1, column"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut text = valid().to_json();
        text = text.replacen('{', "{\n  \"no_such_knob\": 1,", 1);
        assert!(ScenarioSpec::from_json(&text).is_err());
    }

    #[test]
    fn asymmetric_matrix_is_rejected() {
        let mut spec = valid();
        spec.peers[1].count = 1; // 2 peers total
        spec.latency = LatencySpec::Matrix {
            latencies_ms: vec![vec![0, 10], vec![20, 0]],
        };
        let errors = spec.validate().unwrap_err();
        assert!(errors.iter().any(|e| e.field.starts_with("latency")));
    }
}

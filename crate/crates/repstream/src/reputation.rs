//! Reputation aggregation with exponential decay.
//!
//! A stored reputation `R` is refreshed by a report of mass `R_r` (the
//! reporting peer's own reputation) after a gap of `tau` milliseconds:
//!
//! ```text
//! R(t) = (R(t - tau) * e^(-alpha * tau) + R_r) / (1 + R_r)
//! ```
//!
//! With no incoming reports the value simply decays, `R(t) = R(t-tau) *
//! e^(-alpha*tau)`, which is the same expression with `R_r = 0`. Both
//! operations preserve the `[0, 1]` range analytically; no clamping is
//! performed anywhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::id::PeerId;
use crate::time::SimTime;

/// A reputation value together with the time it was last written.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reputation {
    pub value: f64,
    pub updated_at: SimTime,
}

impl Reputation {
    pub fn new(value: f64, at: SimTime) -> Self {
        debug_assert!((0.0..=1.0).contains(&value));
        Reputation {
            value,
            updated_at: at,
        }
    }
}

/// Exponential forgetting rate, in 1/millisecond.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayParams {
    pub alpha: f64,
}

impl DecayParams {
    pub fn new(alpha: f64) -> Self {
        debug_assert!(alpha > 0.0);
        DecayParams { alpha }
    }

    /// Decay multiplier for an elapsed interval.
    pub fn factor(&self, tau_ms: u64) -> f64 {
        (-self.alpha * tau_ms as f64).exp()
    }
}

/// Default decay: a value loses 10% per second (`e^(-alpha * 1000ms) = 0.9`),
/// fast enough to expel a silent free rider within a short stream.
pub const DEFAULT_ALPHA: f64 = 1.0536051565782629e-4;

impl Default for DecayParams {
    fn default() -> Self {
        DecayParams {
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// One reputation report about `target`, carrying the reporter's own
/// reputation as the mass `R_r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepReport {
    pub target: PeerId,
    pub reported_value: f64,
    pub reporter: PeerId,
    pub at: SimTime,
}

#[derive(Debug, Error, PartialEq)]
pub enum RepError {
    /// `now` precedes the stored timestamp; the event schedule is broken.
    #[error("clock violation: update at {now} precedes stored state at {stored}")]
    ClockViolation { now: SimTime, stored: SimTime },
    /// Report mass outside [0, 1].
    #[error("report value {0} outside [0,1]")]
    ValueOutOfRange(f64),
    /// Fixed point undefined: decay per round must stay below 1 + R_r.
    #[error("non-contractive parameters: decay {decay} >= 1 + {rr}")]
    NonContractive { rr: f64, decay: f64 },
    /// No replica values supplied.
    #[error("no replica values to resolve")]
    NoData,
    /// More replica values than replicas exist.
    #[error("{got} replica values exceed expected count {expected}")]
    TooManyReplicas { got: usize, expected: usize },
}

/// Apply one report to a stored reputation.
///
/// The elapsed `tau` is taken from the stored timestamp to `now`; the result
/// carries `now` as its timestamp. `aggregate` with `R_r = 0` is bit-for-bit
/// identical to [`decay_only`].
pub fn aggregate(
    previous: Reputation,
    report: &RepReport,
    now: SimTime,
    params: DecayParams,
) -> Result<Reputation, RepError> {
    let rr = report.reported_value;
    if !(0.0..=1.0).contains(&rr) {
        return Err(RepError::ValueOutOfRange(rr));
    }
    let decayed = decay_only(previous, now, params)?;
    Ok(Reputation {
        value: (decayed.value + rr) / (1.0 + rr),
        updated_at: now,
    })
}

/// Pure decay of a stored reputation up to `now`.
pub fn decay_only(
    previous: Reputation,
    now: SimTime,
    params: DecayParams,
) -> Result<Reputation, RepError> {
    let tau = now.since(previous.updated_at).ok_or(RepError::ClockViolation {
        now,
        stored: previous.updated_at,
    })?;
    Ok(Reputation {
        value: previous.value * params.factor(tau),
        updated_at: now,
    })
}

/// Steady state of repeated aggregation under a constant report mass `r_r`
/// and a constant per-round decay `d = e^(-alpha * tau)`:
///
/// ```text
/// R* = R_r / (1 + R_r - d)
/// ```
pub fn fixed_point(r_r: f64, decay_per_round: f64) -> Result<f64, RepError> {
    let denom = 1.0 + r_r - decay_per_round;
    if denom <= 0.0 {
        return Err(RepError::NonContractive {
            rr: r_r,
            decay: decay_per_round,
        });
    }
    Ok(r_r / denom)
}

/// Combine replica copies of a reputation value: the median, with the lower
/// median for even counts. One manipulated copy among three cannot move the
/// result outside the honest pair's range.
pub fn resolve_replicas(values: &[f64], expected_count: usize) -> Result<f64, RepError> {
    if values.is_empty() {
        return Err(RepError::NoData);
    }
    if values.len() > expected_count {
        return Err(RepError::TooManyReplicas {
            got: values.len(),
            expected: expected_count,
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[(sorted.len() - 1) / 2])
}

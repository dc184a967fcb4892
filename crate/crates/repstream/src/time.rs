//! Simulation clock in integer milliseconds.
//!
//! Integer time keeps event ordering free of floating-point round-off; all
//! protocol timers and timestamps are expressed in it.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

/// A point on the simulation clock, in milliseconds since scenario start.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn millis(self) -> u64 {
        self.0
    }

    /// Elapsed time since `earlier`, or `None` if `earlier` is in the future.
    pub fn since(self, earlier: SimTime) -> Option<u64> {
        self.0.checked_sub(earlier.0)
    }

    /// Saturating elapsed milliseconds since `earlier`.
    pub fn saturating_since(self, earlier: SimTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, millis: u64) -> SimTime {
        SimTime(self.0 + millis)
    }
}

impl AddAssign<u64> for SimTime {
    fn add_assign(&mut self, millis: u64) {
        self.0 += millis;
    }
}

impl Sub<SimTime> for SimTime {
    type Output = u64;

    fn sub(self, rhs: SimTime) -> u64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn since_rejects_future_reference() {
        assert_eq!(SimTime(5).since(SimTime(9)), None);
        assert_eq!(SimTime(9).since(SimTime(5)), Some(4));
    }
}

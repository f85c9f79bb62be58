//! Simulated time.
//!
//! Time is a fixed-point count of nanoseconds (0.001µs resolution), so every
//! latency used by the simulator is exactly representable and runs never
//! depend on floating-point rounding.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A point in (or span of) simulated time, in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    /// Converts a decimal microsecond value, rounding to the nearest
    /// nanosecond. Negative and non-finite inputs are rejected.
    pub fn from_micros_f64(us: f64) -> Option<Self> {
        if !us.is_finite() || us < 0.0 {
            return None;
        }
        let ns = (us * 1_000.0).round();
        if ns > u64::MAX as f64 {
            return None;
        }
        Some(SimTime(ns as u64))
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_micros_f64(self) -> f64 {
        self.0 as f64 / 1_000.0
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }

    pub fn checked_add(self, rhs: SimTime) -> Option<SimTime> {
        self.0.checked_add(rhs.0).map(SimTime)
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        *self = *self + rhs;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(
            self.0
                .checked_sub(rhs.0)
                .expect("simulated time went negative"),
        )
    }
}

impl Mul<u64> for SimTime {
    type Output = SimTime;
    fn mul(self, rhs: u64) -> SimTime {
        SimTime(self.0.saturating_mul(rhs))
    }
}

impl Div<u64> for SimTime {
    type Output = SimTime;
    fn div(self, rhs: u64) -> SimTime {
        SimTime(self.0 / rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0 / 1_000;
        let frac = self.0 % 1_000;
        if frac == 0 {
            write!(f, "{whole}us")
        } else {
            let s = format!("{frac:03}");
            write!(f, "{whole}.{}us", s.trim_end_matches('0'))
        }
    }
}

// Serialized as decimal microseconds; nanosecond resolution survives the
// round trip because every value is a multiple of 0.001.
impl Serialize for SimTime {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_micros_f64())
    }
}

impl<'de> Deserialize<'de> for SimTime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let us = f64::deserialize(d)?;
        SimTime::from_micros_f64(us)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid time {us}us")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn display_trims_fraction() {
        assert_eq!(SimTime::from_nanos(32_500).to_string(), "32.5us");
        assert_eq!(SimTime::from_micros(45).to_string(), "45us");
        assert_eq!(SimTime::from_nanos(1).to_string(), "0.001us");
    }

    #[test]
    fn micros_f64_round_trip() {
        for us in [0.0, 1.0, 22.5, 32.5, 45.0, 0.001, 135.0] {
            let t = SimTime::from_micros_f64(us).unwrap();
            assert_eq!(t.as_micros_f64(), us);
        }
        assert!(SimTime::from_micros_f64(-1.0).is_none());
        assert!(SimTime::from_micros_f64(f64::NAN).is_none());
    }

    #[test]
    fn json_round_trip() {
        let t = SimTime::from_nanos(22_500);
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, "22.5");
        let back: SimTime = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }
}

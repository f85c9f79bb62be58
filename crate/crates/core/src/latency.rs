//! Round-trip latency model for the three link classes of a disaggregated
//! rack deployment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::time::SimTime;

/// The physical path a message travels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkClass {
    /// Compute/memory element traffic through the Rack MMU interconnect.
    RackMmuInterconnect,
    /// Process-to-process traffic through the top-of-rack switch, same rack.
    IntraRackTor,
    /// Process-to-process traffic between racks.
    CrossRackTor,
}

impl LinkClass {
    pub const ALL: [LinkClass; 3] = [
        LinkClass::RackMmuInterconnect,
        LinkClass::IntraRackTor,
        LinkClass::CrossRackTor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LinkClass::RackMmuInterconnect => "rack-mmu-interconnect",
            LinkClass::IntraRackTor => "intra-rack-tor",
            LinkClass::CrossRackTor => "cross-rack-tor",
        }
    }
}

impl fmt::Display for LinkClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LinkClass {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LinkClass::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown link class `{s}`"))
    }
}

/// Named latency profiles.
///
/// | profile | interconnect | intra-rack | cross-rack |
/// |---------|-------------:|-----------:|-----------:|
/// | current |          2µs |        2µs |       45µs |
/// | future  |          1µs |        1µs |       45µs |
/// | cloud   |          2µs |        2µs |       45µs |
///
/// `cloud` carries the same figures as `current`; it names the deployment
/// whose cross-rack round trip was measured between cloud VMs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    #[default]
    Current,
    Future,
    Cloud,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::Current, Profile::Future, Profile::Cloud];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Current => "current",
            Profile::Future => "future",
            Profile::Cloud => "cloud",
        }
    }
}

impl FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Profile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown profile `{s}` (expected current, future or cloud)"))
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const CROSS_RACK_RTT_NS: u64 = 45_000;
const INTRA_RACK_RTT_NS: u64 = 2_000;
const FUTURE_INTRA_RACK_RTT_NS: u64 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub rack_mmu_rtt: SimTime,
    pub intra_rack_rtt: SimTime,
    pub cross_rack_rtt: SimTime,
    /// Upper bound of uniform one-way jitter, as a fraction of the one-way
    /// latency. Zero keeps runs exactly reproducible by arithmetic.
    pub jitter_fraction: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::profile(Profile::Current)
    }
}

impl LatencyModel {
    pub fn profile(profile: Profile) -> Self {
        let intra = match profile {
            Profile::Current | Profile::Cloud => INTRA_RACK_RTT_NS,
            Profile::Future => FUTURE_INTRA_RACK_RTT_NS,
        };
        LatencyModel {
            // the interconnect control path is assumed to match intra-rack
            rack_mmu_rtt: SimTime::from_nanos(intra),
            intra_rack_rtt: SimTime::from_nanos(intra),
            cross_rack_rtt: SimTime::from_nanos(CROSS_RACK_RTT_NS),
            jitter_fraction: 0.0,
        }
    }

    pub fn rtt(&self, link: LinkClass) -> SimTime {
        match link {
            LinkClass::RackMmuInterconnect => self.rack_mmu_rtt,
            LinkClass::IntraRackTor => self.intra_rack_rtt,
            LinkClass::CrossRackTor => self.cross_rack_rtt,
        }
    }

    /// One-way latency, taken as half the round trip.
    pub fn one_way(&self, link: LinkClass) -> SimTime {
        self.rtt(link) / 2
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.jitter_fraction) {
            return Err(format!(
                "jitter_fraction must be in [0, 1), got {}",
                self.jitter_fraction
            ));
        }
        for link in LinkClass::ALL {
            if self.rtt(link) == SimTime::ZERO {
                return Err(format!("rtt for {link} must be positive"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figure_values_per_profile() {
        let cur = LatencyModel::profile(Profile::Current);
        assert_eq!(cur.rtt(LinkClass::IntraRackTor), SimTime::from_micros(2));
        assert_eq!(cur.rtt(LinkClass::CrossRackTor), SimTime::from_micros(45));
        assert_eq!(cur.rtt(LinkClass::RackMmuInterconnect), SimTime::from_micros(2));
        let fut = LatencyModel::profile(Profile::Future);
        assert_eq!(fut.rtt(LinkClass::RackMmuInterconnect), SimTime::from_micros(1));
        assert_eq!(fut.rtt(LinkClass::IntraRackTor), SimTime::from_micros(1));
        let cloud = LatencyModel::profile(Profile::Cloud);
        assert_eq!(cloud.rtt(LinkClass::CrossRackTor), SimTime::from_micros(45));
    }

    #[test]
    fn default_profile_orders_links() {
        for p in Profile::ALL {
            let m = LatencyModel::profile(p);
            assert!(m.rtt(LinkClass::RackMmuInterconnect) <= m.rtt(LinkClass::IntraRackTor));
            assert!(m.rtt(LinkClass::IntraRackTor) <= m.rtt(LinkClass::CrossRackTor));
            assert!(m.rtt(LinkClass::RackMmuInterconnect) < m.rtt(LinkClass::CrossRackTor));
        }
    }

    #[test]
    fn one_way_is_half() {
        let m = LatencyModel::default();
        assert_eq!(m.one_way(LinkClass::CrossRackTor), SimTime::from_nanos(22_500));
        assert_eq!(m.one_way(LinkClass::IntraRackTor), SimTime::from_micros(1));
    }

    #[test]
    fn parse_names() {
        assert_eq!("future".parse::<Profile>().unwrap(), Profile::Future);
        assert!("lan".parse::<Profile>().is_err());
        assert_eq!(
            "cross-rack-tor".parse::<LinkClass>().unwrap(),
            LinkClass::CrossRackTor
        );
    }

    #[test]
    fn jitter_bounds_checked() {
        let mut m = LatencyModel::default();
        m.jitter_fraction = 1.0;
        assert!(m.validate().is_err());
        m.jitter_fraction = 0.5;
        assert!(m.validate().is_ok());
    }
}

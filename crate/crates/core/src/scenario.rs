//! Declarative scenario files: one TOML document describes the rack, the
//! latency profile, a workload, a failure schedule and the seed.
//!
//! ```toml
//! name = "straggler_compute_failure"
//! seed = 7
//!
//! [rack]
//! computes_per_rack = 8
//!
//! [latency]
//! profile = "current"
//!
//! [workload]
//! kind = "straggler"
//! modes = ["steal"]
//!
//! [[failures]]
//! at_us = 100
//! kind = "crash-compute"
//! compute = 1
//! ```

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::addr::{ComputeId, MemId, ProcessId, RackId};
use crate::heap::WriteOrder;
use crate::latency::{LatencyModel, Profile};
use crate::memory::FailureMode;
use crate::mmu::InjectedBug;
use crate::monitor::MonitorConfig;
use crate::paxos::Strategy;
use crate::rack::{Injection, RackConfig};
use crate::shuffle::{Mitigation, TransferMode};
use crate::time::SimTime;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("no scenario file or bundled scenario named `{0}`")]
    NotFound(String),
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rack: RackSection,
    #[serde(default)]
    pub latency: LatencySection,
    #[serde(default)]
    pub monitor: MonitorSection,
    pub workload: WorkloadSection,
    #[serde(default)]
    pub failures: Vec<FailureSpec>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RackSection {
    pub racks: u16,
    pub computes_per_rack: u16,
    pub memory_per_rack: u16,
    pub frames_per_element: u32,
    pub access_timeout_us: Option<SimTime>,
    pub memory_failure_mode: FailureMode,
}

impl Default for RackSection {
    fn default() -> Self {
        RackSection {
            racks: 1,
            computes_per_rack: 8,
            memory_per_rack: 2,
            frames_per_element: 256,
            access_timeout_us: None,
            memory_failure_mode: FailureMode::Silent,
        }
    }
}

/// A named profile, optionally with individual round trips overridden.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencySection {
    pub profile: Profile,
    pub rack_mmu_rtt_us: Option<SimTime>,
    pub intra_rack_rtt_us: Option<SimTime>,
    pub cross_rack_rtt_us: Option<SimTime>,
    pub jitter_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonitorSection {
    pub enabled: bool,
    /// Defaults to two interconnect round trips.
    pub interval_us: Option<SimTime>,
    pub miss_threshold: Option<u32>,
}

impl Default for MonitorSection {
    fn default() -> Self {
        MonitorSection { enabled: true, interval_us: None, miss_threshold: None }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WorkloadSection {
    Paxos(PaxosSection),
    Shuffle(ShuffleSection),
    Straggler(StragglerSection),
    PrimitiveScript(PrimitivesSection),
    HeapSweep(HeapSection),
}

impl WorkloadSection {
    pub fn kind(&self) -> &'static str {
        match self {
            WorkloadSection::Paxos(_) => "paxos",
            WorkloadSection::Shuffle(_) => "shuffle",
            WorkloadSection::Straggler(_) => "straggler",
            WorkloadSection::PrimitiveScript(_) => "primitive-script",
            WorkloadSection::HeapSweep(_) => "heap-sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PaxosSection {
    /// One run per strategy, all with the same failure schedule.
    pub strategies: Vec<Strategy>,
    pub replicas: u16,
    pub commands: u32,
    pub command_interval_us: SimTime,
    pub client_start_us: SimTime,
    pub horizon_us: SimTime,
    /// Draw the failure schedule, strategy and jitter from the seed instead.
    pub random_schedule: bool,
    /// Measure monitor detection of a leader crash over this many offsets.
    pub detection_runs: Option<usize>,
    pub expect_epoch: Option<u64>,
    pub expect_all_chosen: bool,
    pub min_notice_margin_us: Option<SimTime>,
}

impl Default for PaxosSection {
    fn default() -> Self {
        PaxosSection {
            strategies: vec![Strategy::Reincarnate],
            replicas: 3,
            commands: 20,
            command_interval_us: SimTime::from_micros(40),
            client_start_us: SimTime::from_micros(100),
            horizon_us: SimTime::from_micros(4000),
            random_schedule: false,
            detection_runs: None,
            expect_epoch: None,
            expect_all_chosen: false,
            min_notice_margin_us: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShuffleSection {
    pub mappers: u16,
    pub reducers: u16,
    pub pages_per_partition: usize,
    pub modes: Vec<TransferMode>,
    pub map_time_us: SimTime,
    pub limit_us: SimTime,
}

impl Default for ShuffleSection {
    fn default() -> Self {
        ShuffleSection {
            mappers: 4,
            reducers: 4,
            pages_per_partition: 1,
            modes: vec![TransferMode::Transparent, TransferMode::Grant],
            map_time_us: SimTime::from_micros(10),
            limit_us: SimTime::from_micros(10_000),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StragglerSection {
    pub tasks: u16,
    pub units: u32,
    pub unit_time_us: SimTime,
    pub straggler: Option<u16>,
    pub slowdown: u32,
    pub slack: f64,
    pub check_interval_us: SimTime,
    pub spares: u16,
    /// One run per mitigation, all with the same failure schedule.
    pub modes: Vec<Mitigation>,
    pub limit_us: SimTime,
}

impl Default for StragglerSection {
    fn default() -> Self {
        StragglerSection {
            tasks: 4,
            units: 20,
            unit_time_us: SimTime::from_micros(10),
            straggler: Some(0),
            slowdown: 8,
            slack: 2.0,
            check_interval_us: SimTime::from_micros(20),
            spares: 2,
            modes: vec![Mitigation::Steal, Mitigation::Restart],
            limit_us: SimTime::from_micros(100_000),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrimitivesSection {
    pub processes: u8,
    pub pages_per_process: usize,
    pub ops: usize,
    /// Harness self-test only.
    pub planted_bug: Option<InjectedBug>,
}

impl Default for PrimitivesSection {
    fn default() -> Self {
        PrimitivesSection { processes: 4, pages_per_process: 32, ops: 40, planted_bug: None }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeapSection {
    pub transactions: usize,
    pub write_order: WriteOrder,
}

impl Default for HeapSection {
    fn default() -> Self {
        HeapSection { transactions: 50, write_order: WriteOrder::LogFirst }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    CrashCompute,
    StallCompute,
    FailMemory,
    FailMonitor,
    CrashProcess,
}

/// One scheduled failure. Elements are named by their rack-wide index.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    pub at_us: SimTime,
    pub kind: FailureKind,
    pub compute: Option<u16>,
    pub element: Option<u16>,
    pub rack: Option<u16>,
    pub pid: Option<u8>,
    pub duration_us: Option<SimTime>,
    pub mode: Option<FailureMode>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<ScenarioConfig, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// A file path, or else the name of a bundled scenario.
    pub fn resolve(name_or_path: &str) -> Result<ScenarioConfig, ConfigError> {
        let path = Path::new(name_or_path);
        if path.exists() {
            return Self::load(path);
        }
        match bundled(name_or_path) {
            Some(text) => Self::from_toml(text),
            None => Err(ConfigError::NotFound(name_or_path.to_string())),
        }
    }

    pub fn latency(&self) -> LatencyModel {
        let l = &self.latency;
        let mut m = LatencyModel::profile(l.profile);
        if let Some(t) = l.rack_mmu_rtt_us {
            m.rack_mmu_rtt = t;
        }
        if let Some(t) = l.intra_rack_rtt_us {
            m.intra_rack_rtt = t;
        }
        if let Some(t) = l.cross_rack_rtt_us {
            m.cross_rack_rtt = t;
        }
        m.jitter_fraction = l.jitter_fraction;
        m
    }

    /// Switches to a named profile, dropping any explicit round trips.
    pub fn set_profile(&mut self, profile: Profile) {
        self.latency = LatencySection { profile, jitter_fraction: self.latency.jitter_fraction, ..Default::default() };
    }

    pub fn rack_config(&self) -> RackConfig {
        let r = &self.rack;
        let latency = self.latency();
        let mut c = RackConfig::new(r.racks, r.computes_per_rack, r.memory_per_rack, latency);
        c.frames_per_element = r.frames_per_element;
        if let Some(t) = r.access_timeout_us {
            c.access_timeout = t;
        }
        c.memory_failure_mode = r.memory_failure_mode;
        c.monitor = self.monitor.enabled.then(|| {
            let d = MonitorConfig::for_rtt(latency.rack_mmu_rtt);
            MonitorConfig {
                interval: self.monitor.interval_us.unwrap_or(d.interval),
                miss_threshold: self.monitor.miss_threshold.unwrap_or(d.miss_threshold),
            }
        });
        c.seed = self.seed;
        c
    }

    pub fn schedule(&self) -> Result<Vec<(SimTime, Injection)>, ConfigError> {
        self.failures.iter().enumerate().map(|(i, f)| Ok((f.at_us, self.injection(i, f)?))).collect()
    }

    fn injection(&self, i: usize, f: &FailureSpec) -> Result<Injection, ConfigError> {
        let r = &self.rack;
        let field = |name: &str| format!("failures[{i}].{name}");
        let need = |v: Option<u16>, name: &str, bound: u32| -> Result<u16, ConfigError> {
            let v = v.ok_or_else(|| ConfigError::invalid(field(name), "required for this failure kind"))?;
            if u32::from(v) >= bound {
                return Err(ConfigError::invalid(field(name), format!("{v} is out of range, the rack has {bound}")));
            }
            Ok(v)
        };
        let computes = u32::from(r.racks) * u32::from(r.computes_per_rack);
        let elements = u32::from(r.racks) * u32::from(r.memory_per_rack);
        Ok(match f.kind {
            FailureKind::CrashCompute => Injection::CrashCompute { compute: ComputeId(need(f.compute, "compute", computes)?) },
            FailureKind::StallCompute => Injection::StallCompute {
                compute: ComputeId(need(f.compute, "compute", computes)?),
                duration: f.duration_us.ok_or_else(|| ConfigError::invalid(field("duration_us"), "required for stall-compute"))?,
            },
            FailureKind::FailMemory => {
                Injection::FailMemory { element: MemId(need(f.element, "element", elements)?), mode: f.mode }
            }
            FailureKind::FailMonitor => Injection::FailMonitor { rack: RackId(need(f.rack, "rack", u32::from(r.racks))?) },
            FailureKind::CrashProcess => Injection::CrashProcess {
                pid: ProcessId::new(f.pid.ok_or_else(|| ConfigError::invalid(field("pid"), "required for crash-process"))?),
            },
        })
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.rack;
        if r.racks == 0 {
            return Err(ConfigError::invalid("rack.racks", "must be positive"));
        }
        if r.computes_per_rack == 0 {
            return Err(ConfigError::invalid("rack.computes_per_rack", "must be positive"));
        }
        if r.memory_per_rack == 0 {
            return Err(ConfigError::invalid("rack.memory_per_rack", "must be positive"));
        }
        if r.frames_per_element == 0 {
            return Err(ConfigError::invalid("rack.frames_per_element", "must be positive"));
        }
        let j = self.latency.jitter_fraction;
        if !(0.0..1.0).contains(&j) {
            return Err(ConfigError::invalid("latency.jitter_fraction", format!("{j} is outside [0, 1)")));
        }
        for (name, t) in [
            ("latency.rack_mmu_rtt_us", self.latency.rack_mmu_rtt_us),
            ("latency.intra_rack_rtt_us", self.latency.intra_rack_rtt_us),
            ("latency.cross_rack_rtt_us", self.latency.cross_rack_rtt_us),
            ("monitor.interval_us", self.monitor.interval_us),
        ] {
            if t == Some(SimTime::ZERO) {
                return Err(ConfigError::invalid(name, "must be positive"));
            }
        }
        if self.monitor.miss_threshold == Some(0) {
            return Err(ConfigError::invalid("monitor.miss_threshold", "must be positive"));
        }
        self.schedule()?;
        match &self.workload {
            WorkloadSection::Paxos(p) => {
                if p.strategies.is_empty() {
                    return Err(ConfigError::invalid("workload.strategies", "name at least one strategy"));
                }
                if p.replicas == 0 || p.replicas >= r.racks {
                    return Err(ConfigError::invalid(
                        "workload.replicas",
                        format!("{} replicas need that many racks plus one for the client, have {}", p.replicas, r.racks),
                    ));
                }
                if p.random_schedule && !self.failures.is_empty() {
                    return Err(ConfigError::invalid("workload.random_schedule", "conflicts with an explicit failure schedule"));
                }
                if p.random_schedule && r.racks < 3 {
                    return Err(ConfigError::invalid("rack.racks", "random schedules target three replica racks"));
                }
                if p.detection_runs == Some(0) {
                    return Err(ConfigError::invalid("workload.detection_runs", "must be positive"));
                }
                if p.detection_runs.is_some() && !self.monitor.enabled {
                    return Err(ConfigError::invalid("monitor.enabled", "detection runs need the monitor"));
                }
            }
            WorkloadSection::Shuffle(s) => {
                if s.modes.is_empty() {
                    return Err(ConfigError::invalid("workload.modes", "name at least one transfer mode"));
                }
                if s.mappers == 0 || s.reducers == 0 {
                    return Err(ConfigError::invalid("workload.mappers", "mappers and reducers must be positive"));
                }
                if s.pages_per_partition == 0 {
                    return Err(ConfigError::invalid("workload.pages_per_partition", "must be positive"));
                }
                if s.mappers + s.reducers > r.computes_per_rack {
                    return Err(ConfigError::invalid(
                        "rack.computes_per_rack",
                        format!("{} mappers and {} reducers need one compute element each", s.mappers, s.reducers),
                    ));
                }
            }
            WorkloadSection::Straggler(s) => {
                if s.modes.is_empty() {
                    return Err(ConfigError::invalid("workload.modes", "name at least one mitigation"));
                }
                if s.tasks == 0 || s.units == 0 {
                    return Err(ConfigError::invalid("workload.tasks", "tasks and units must be positive"));
                }
                if !(s.slack.is_finite() && s.slack >= 1.0) {
                    return Err(ConfigError::invalid("workload.slack", format!("{} is below 1", s.slack)));
                }
                if s.straggler.is_some_and(|t| t >= s.tasks) {
                    return Err(ConfigError::invalid("workload.straggler", "must name a task"));
                }
                if 1 + s.tasks + s.spares > r.computes_per_rack {
                    return Err(ConfigError::invalid(
                        "rack.computes_per_rack",
                        format!("an orchestrator, {} tasks and {} spares need one compute element each", s.tasks, s.spares),
                    ));
                }
            }
            WorkloadSection::PrimitiveScript(p) => {
                if p.processes < 2 {
                    return Err(ConfigError::invalid("workload.processes", "at least two processes"));
                }
                if p.pages_per_process == 0 {
                    return Err(ConfigError::invalid("workload.pages_per_process", "must be positive"));
                }
            }
            WorkloadSection::HeapSweep(_) => {}
        }
        Ok(())
    }
}

macro_rules! bundled_scenarios {
    ($($name:literal),* $(,)?) => {
        /// Scenario files shipped with the crate, by name.
        pub const BUNDLED: &[(&str, &str)] = &[
            $(($name, include_str!(concat!("../scenarios/", $name, ".toml")))),*
        ];
    };
}

bundled_scenarios!(
    "shuffle_3rtt_vs_grant",
    "straggler_steal",
    "straggler_compute_failure",
    "paxos_reincarnate",
    "paxos_transfer",
    "paxos_memory_failure",
    "paxos_paired",
    "paxos_detection",
    "paxos_fuzz",
    "primitives_fuzz",
    "heap_crash_sweep",
);

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

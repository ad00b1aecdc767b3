//! Environment configuration (JSON).
//!
//! Human-facing units are KB for task sizes, MB/s for link rates and GHz for
//! CPUs. The multipliers that turn those into bits and bits/second live in
//! [`Units`] so the conversion is explicit and configurable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("initial topology is disconnected")]
    Disconnected,
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // always consume one draw so traces stay aligned across configs
        let u: f64 = rng.gen();
        self.lo + (self.hi - self.lo) * u
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn check(&self, name: &str, min: f64) -> Result<(), ConfigError> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi || self.lo < min {
            return Err(ConfigError::Invalid(format!("{name}: bad range [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }
}

impl From<[f64; 2]> for Range {
    fn from(v: [f64; 2]) -> Self {
        Range::new(v[0], v[1])
    }
}

impl From<Range> for [f64; 2] {
    fn from(r: Range) -> Self {
        [r.lo, r.hi]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Random,
    Ring,
}

impl std::str::FromStr for TopologyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "ring" => Ok(Self::Ring),
            other => Err(format!("unknown topology {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Units {
    /// bits per configured "KB"
    pub kb_bits: f64,
    /// bits/second per configured "MB/s"
    pub mbps_bits: f64,
}

impl Default for Units {
    fn default() -> Self {
        Self { kb_bits: 1_000.0, mbps_bits: 1e6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub nodes: usize,
    pub horizon: u32,
    pub slot_duration_s: f64,
    pub topology: TopologyKind,
    /// target mean degree of the random generator and of re-attached nodes
    pub avg_degree: f64,
    pub task_size_kb: Range,
    pub intensity_cycles_per_bit: Range,
    pub deadline_s: f64,
    pub reliability_floor: f64,
    pub cpu_ghz: Range,
    pub link_rate_mbps: Range,
    pub memory_mb: f64,
    pub arrival_prob: Range,
    pub sw_fail_rate: Range,
    pub hw_fail_rate: Range,
    pub link_fail_rate: Range,
    pub node_death_prob: f64,
    pub node_appear_prob: f64,
    pub link_outage_prob: f64,
    pub link_recovery_prob: f64,
    pub max_hops: u32,
    /// sample Poisson failures at resolution time; when false only the
    /// expected-reliability floor is checked
    pub failure_sampling: bool,
    pub units: Units,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            nodes: 10,
            horizon: 100,
            slot_duration_s: 0.5,
            topology: TopologyKind::Random,
            avg_degree: 3.0,
            task_size_kb: Range::new(2_000.0, 4_000.0),
            intensity_cycles_per_bit: Range::new(800.0, 2_400.0),
            deadline_s: 4.0,
            reliability_floor: 0.9,
            cpu_ghz: Range::fixed(3.0),
            link_rate_mbps: Range::new(10.0, 40.0),
            memory_mb: 1_000.0,
            arrival_prob: Range::new(0.05, 0.65),
            sw_fail_rate: Range::new(0.002, 0.02),
            hw_fail_rate: Range::new(0.001, 0.01),
            link_fail_rate: Range::new(0.01, 0.1),
            node_death_prob: 0.01,
            node_appear_prob: 0.1,
            link_outage_prob: 0.0,
            link_recovery_prob: 0.5,
            max_hops: 5,
            failure_sampling: true,
            units: Units::default(),
        }
    }
}

impl EnvConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.nodes == 0 {
            return Err(ConfigError::Invalid("need at least one node".into()));
        }
        if self.horizon == 0 {
            return Err(ConfigError::Invalid("horizon must be positive".into()));
        }
        if !(self.slot_duration_s > 0.0) {
            return Err(ConfigError::Invalid("slot duration must be positive".into()));
        }
        if !(self.deadline_s > 0.0) {
            return Err(ConfigError::Invalid("deadline must be positive".into()));
        }
        if !(self.reliability_floor > 0.0 && self.reliability_floor <= 1.0) {
            return Err(ConfigError::Invalid("reliability floor must be in (0,1]".into()));
        }
        self.task_size_kb.check("task_size_kb", 0.0)?;
        self.intensity_cycles_per_bit.check("intensity_cycles_per_bit", 0.0)?;
        self.cpu_ghz.check("cpu_ghz", f64::MIN_POSITIVE)?;
        self.link_rate_mbps.check("link_rate_mbps", f64::MIN_POSITIVE)?;
        self.arrival_prob.check("arrival_prob", 0.0)?;
        if self.arrival_prob.hi > 1.0 {
            return Err(ConfigError::Invalid("arrival_prob above 1".into()));
        }
        self.sw_fail_rate.check("sw_fail_rate", 0.0)?;
        self.hw_fail_rate.check("hw_fail_rate", 0.0)?;
        self.link_fail_rate.check("link_fail_rate", 0.0)?;
        for (name, p) in [
            ("node_death_prob", self.node_death_prob),
            ("node_appear_prob", self.node_appear_prob),
            ("link_outage_prob", self.link_outage_prob),
            ("link_recovery_prob", self.link_recovery_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::Invalid(format!("{name} outside [0,1]")));
            }
        }
        if self.topology == TopologyKind::Ring && self.nodes < 3 {
            return Err(ConfigError::Invalid("ring topology needs at least 3 nodes".into()));
        }
        Ok(())
    }

    pub fn size_bits(&self) -> Range {
        Range::new(self.task_size_kb.lo * self.units.kb_bits, self.task_size_kb.hi * self.units.kb_bits)
    }

    pub fn rate_bps(&self) -> Range {
        Range::new(
            self.link_rate_mbps.lo * self.units.mbps_bits,
            self.link_rate_mbps.hi * self.units.mbps_bits,
        )
    }

    pub fn cpu_hz(&self) -> Range {
        Range::new(self.cpu_ghz.lo * 1e9, self.cpu_ghz.hi * 1e9)
    }

    pub fn memory_bits(&self) -> f64 {
        self.memory_mb * 1e3 * self.units.kb_bits
    }

    /// Churn-free, failure-sampling-free copy used for static evaluation.
    pub fn frozen(&self) -> Self {
        Self {
            node_death_prob: 0.0,
            node_appear_prob: 0.0,
            link_outage_prob: 0.0,
            failure_sampling: false,
            ..self.clone()
        }
    }
}

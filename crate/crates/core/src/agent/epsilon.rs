use serde::{Deserialize, Serialize};

use super::AgentError;

/// Tolerance used when deciding whether epsilon has reached the switch-on point.
const SWITCH_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonConfig {
    pub start: f64,
    pub end: f64,
    /// Per-tick decrement before the target network is on.
    pub decay_primary: f64,
    /// Per-tick decrement once the target network is on.
    pub decay_target: f64,
    pub switch_on_point: f64,
}

impl Default for EpsilonConfig {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 2e-3,
            decay_primary: 5e-6,
            decay_target: 1.25e-6,
            switch_on_point: 0.3,
        }
    }
}

impl EpsilonConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(0.0 <= self.end && self.end <= self.start && self.start <= 1.0) {
            return Err(AgentError::InvalidArgument(
                "epsilon must satisfy 0 <= end <= start <= 1".into(),
            ));
        }
        if !(self.decay_primary > 0.0 && self.decay_target > 0.0) {
            return Err(AgentError::InvalidArgument("epsilon decays must be positive".into()));
        }
        if !(self.decay_target < self.decay_primary) {
            return Err(AgentError::InvalidArgument(
                "decay_target must be slower than decay_primary".into(),
            ));
        }
        Ok(())
    }
}

/// Linear two-phase epsilon decay. The value is recomputed from tick counts
/// rather than by repeated subtraction so it carries no rounding drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub config: EpsilonConfig,
    pub primary_ticks: u64,
    pub target_ticks: u64,
    pub target_enabled: bool,
    value: f64,
}

impl EpsilonSchedule {
    pub fn new(config: EpsilonConfig) -> Self {
        let value = config.start;
        let mut s = Self {
            config,
            primary_ticks: 0,
            target_ticks: 0,
            target_enabled: false,
            value,
        };
        s.refresh();
        s
    }

    pub fn from_counters(config: EpsilonConfig, primary_ticks: u64, target_ticks: u64, target_enabled: bool) -> Self {
        let mut s = Self::new(config);
        s.primary_ticks = primary_ticks;
        s.target_ticks = target_ticks;
        s.target_enabled = target_enabled;
        s.refresh();
        s
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    fn refresh(&mut self) {
        let c = &self.config;
        let raw = c.start
            - self.primary_ticks as f64 * c.decay_primary
            - self.target_ticks as f64 * c.decay_target;
        self.value = raw.max(c.end);
    }

    /// Decays by the rate for the current phase and switches the target
    /// network on, permanently, once epsilon reaches the switch-on point.
    /// Returns the new epsilon.
    pub fn tick(&mut self) -> f64 {
        if self.target_enabled {
            self.target_ticks += 1;
        } else {
            self.primary_ticks += 1;
        }
        self.refresh();
        if self.value <= self.config.switch_on_point + SWITCH_TOLERANCE {
            self.target_enabled = true;
        }
        self.value
    }
}

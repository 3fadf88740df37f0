//! Scenario configuration, read from TOML.
//!
//! ```toml
//! duration_s = 5.0
//! telemetry_period_s = 0.01
//! n_stack = 4
//! offered_load_mbps = [1.0, 5.0]
//! seed = 7
//! policy = "full"            # baseline | blanking_only | full
//! guard_prbs = 1
//! model_path = "model.json"
//!
//! [[sinr_schedule]]
//! t_start_s = 0.0
//! sinr_db = 8.0
//!
//! [[radar_schedule]]
//! t_on_s = 1.0
//! t_off_s = 3.0
//! [radar_schedule.radar]
//! pulse_width_s = 26e-6
//! prr_hz = 1000.0
//! pulses_per_burst = 10
//! center_offset_hz = 0.0
//! ```
//!
//! Omitted keys take their defaults, and the `[link]`, `[localizer]` and
//! `[mcs]` tables override the corresponding model settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localize::LocalizerConfig;
use crate::ranlink::LinkConfig;
use crate::signals::{RadarParams, DEFAULT_SAMPLE_RATE_HZ};

/// Reads any serde type from a TOML file, reporting parse failures as
/// invalid configuration.
pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// No sensing; MCS fixed at its initial value.
    Baseline,
    /// Detection, localization and PRB blanking; MCS fixed.
    BlankingOnly,
    /// Blanking plus AIMD MCS adaptation.
    Full,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Baseline, Policy::BlankingOnly, Policy::Full];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Baseline => "baseline",
            Policy::BlankingOnly => "blanking_only",
            Policy::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinrStep {
    pub t_start_s: f64,
    pub sinr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarInterval {
    pub t_on_s: f64,
    pub t_off_s: f64,
    #[serde(default)]
    pub radar: RadarParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McsSettings {
    pub initial_mcs: u8,
    pub gamma: f64,
    pub beta: u8,
    pub bler_thresh: f64,
}

impl Default for McsSettings {
    fn default() -> Self {
        McsSettings {
            initial_mcs: crate::ranlink::MCS_MAX,
            gamma: 1.0,
            beta: 2,
            bler_thresh: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub duration_s: f64,
    pub telemetry_period_s: f64,
    pub n_stack: usize,
    pub sinr_schedule: Vec<SinrStep>,
    pub radar_schedule: Vec<RadarInterval>,
    pub offered_load_mbps: (f64, f64),
    pub seed: u64,
    pub policy: Policy,
    pub guard_prbs: usize,
    pub model_path: Option<PathBuf>,
    pub link: LinkConfig,
    pub localizer: LocalizerConfig,
    pub mcs: McsSettings,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            duration_s: 5.0,
            telemetry_period_s: 0.01,
            n_stack: 4,
            sinr_schedule: vec![SinrStep {
                t_start_s: 0.0,
                sinr_db: 8.0,
            }],
            radar_schedule: vec![RadarInterval {
                t_on_s: 1.0,
                t_off_s: 3.0,
                radar: RadarParams {
                    pulse_width_s: 26e-6,
                    prr_hz: 1000.0,
                    pulses_per_burst: 10,
                    burst_length_s: 0.01,
                    ..Default::default()
                },
            }],
            offered_load_mbps: (1.0, 5.0),
            seed: 0,
            policy: Policy::Full,
            guard_prbs: 1,
            model_path: None,
            link: LinkConfig::default(),
            localizer: LocalizerConfig::default(),
            mcs: McsSettings::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ScenarioConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a TOML file; a relative `model_path` resolves against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut config = Self::from_toml_str(&text)?;
        if let (Some(model), Some(dir)) = (&config.model_path, path.parent()) {
            if model.is_relative() {
                config.model_path = Some(dir.join(model));
            }
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn windows(&self) -> usize {
        (self.duration_s / self.telemetry_period_s).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.telemetry_period_s > 0.0) || !(self.duration_s >= self.telemetry_period_s) {
            return bad(format!(
                "need 0 < telemetry_period_s ({}) <= duration_s ({})",
                self.telemetry_period_s, self.duration_s
            ));
        }
        if self.n_stack == 0 {
            return bad("n_stack must be >= 1".into());
        }
        let (lo, hi) = self.offered_load_mbps;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("offered load range ({lo}, {hi})"));
        }
        if self.sinr_schedule.is_empty() || self.sinr_schedule[0].t_start_s > 0.0 {
            return bad("sinr_schedule must start at t = 0".into());
        }
        if self
            .sinr_schedule
            .windows(2)
            .any(|w| !(w[1].t_start_s > w[0].t_start_s))
        {
            return bad("sinr_schedule must be strictly increasing in time".into());
        }
        if self.sinr_schedule.iter().any(|s| !s.sinr_db.is_finite()) {
            return bad("sinr_schedule values must be finite".into());
        }
        let mut intervals: Vec<&RadarInterval> = self.radar_schedule.iter().collect();
        intervals.sort_by(|a, b| a.t_on_s.total_cmp(&b.t_on_s));
        for r in &intervals {
            if !(r.t_on_s >= 0.0 && r.t_on_s < r.t_off_s && r.t_off_s <= self.duration_s) {
                return bad(format!(
                    "radar interval [{}, {}) outside [0, {}]",
                    r.t_on_s, r.t_off_s, self.duration_s
                ));
            }
            r.radar
                .validate(DEFAULT_SAMPLE_RATE_HZ)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            if r.radar.burst_length_s > self.telemetry_period_s + 1e-12 {
                return bad(format!(
                    "radar burst {} s longer than the {} s observation window",
                    r.radar.burst_length_s, self.telemetry_period_s
                ));
            }
        }
        if intervals.windows(2).any(|w| w[1].t_on_s < w[0].t_off_s) {
            return bad("radar intervals overlap".into());
        }
        self.link.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        self.localizer
            .validate()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn sinr_at(&self, t_s: f64) -> f64 {
        self.sinr_schedule
            .iter()
            .take_while(|s| s.t_start_s <= t_s + 1e-12)
            .last()
            .map_or(self.sinr_schedule[0].sinr_db, |s| s.sinr_db)
    }

    /// Radar active during the window starting at `t_s`.
    pub fn radar_at(&self, t_s: f64) -> Option<&RadarParams> {
        self.radar_schedule
            .iter()
            .find(|r| r.t_on_s <= t_s + 1e-12 && t_s + 1e-12 < r.t_off_s)
            .map(|r| &r.radar)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = ScenarioConfig::default();
        c.validate().unwrap();
        let text = c.to_toml_string().unwrap();
        assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), c);
        assert_eq!(c.windows(), 500);
    }

    #[test]
    fn minimal_toml() {
        let c = ScenarioConfig::from_toml_str(
            r#"
            duration_s = 2.0
            policy = "blanking_only"
            [[sinr_schedule]]
            t_start_s = 0.0
            sinr_db = 4.0
            [[sinr_schedule]]
            t_start_s = 1.0
            sinr_db = 0.0
            [[radar_schedule]]
            t_on_s = 0.5
            t_off_s = 1.5
            "#,
        )
        .unwrap();
        assert_eq!(c.policy, Policy::BlankingOnly);
        assert_eq!(c.sinr_at(0.99), 4.0);
        assert_eq!(c.sinr_at(1.0), 0.0);
        assert!(c.radar_at(0.49).is_none());
        assert!(c.radar_at(0.5).is_some());
        assert!(c.radar_at(1.5).is_none());
    }

    #[test]
    fn rejects_bad_schedules() {
        let mut c = ScenarioConfig::default();
        c.radar_schedule.push(RadarInterval {
            t_on_s: 2.0,
            t_off_s: 4.0,
            radar: RadarParams::default(),
        });
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));

        let mut c = ScenarioConfig::default();
        c.radar_schedule[0].t_off_s = 6.0;
        assert!(c.validate().is_err());

        let c = ScenarioConfig {
            telemetry_period_s: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());

        assert!(matches!(
            ScenarioConfig::from_toml_str("duration_s = \"x\""),
            Err(Error::InvalidConfig(_))
        ));
    }
}

//! Decision layer: the Mode 1 / Mode 2 state machine, box to PRB blanking,
//! the AIMD MCS controller and the per-stage latency ledger.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::localize::{radar_freq_extent, FreqTimeBox};
use crate::ranlink::{LinkConfig, MCS_MAX, MCS_MIN};

// ---------------------------------------------------------------------------
// MCS control
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum McsAction {
    Incr,
    Decr,
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McsControllerState {
    pub mcs: u8,
    /// BLER (percent) at the last INCR/DECR.
    pub bler_prev: f64,
    pub last_action: McsAction,
    /// Minimum BLER change, in percentage points, that triggers an action.
    pub gamma: f64,
    pub beta: u8,
    pub bler_thresh: f64,
    pub mcs_min: u8,
    pub mcs_max: u8,
}

impl Default for McsControllerState {
    fn default() -> Self {
        McsControllerState {
            mcs: MCS_MAX,
            bler_prev: 0.0,
            last_action: McsAction::Hold,
            gamma: 1.0,
            beta: 2,
            bler_thresh: 5.0,
            mcs_min: MCS_MIN,
            mcs_max: MCS_MAX,
        }
    }
}

impl McsControllerState {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 2 {
            return Err(Error::InvalidParams(format!("beta {} must be >= 2", self.beta)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidParams(format!("gamma {} must be >= 0", self.gamma)));
        }
        if self.mcs_min > self.mcs_max || self.mcs_max > MCS_MAX || !(self.mcs_min..=self.mcs_max).contains(&self.mcs) {
            return Err(Error::OutOfRange(format!(
                "mcs {} with bounds [{}, {}]",
                self.mcs, self.mcs_min, self.mcs_max
            )));
        }
        Ok(())
    }

    /// In-place form of [`mcs_update`].
    pub fn update(&mut self, bler_pct: f64) -> Result<McsAction> {
        *self = mcs_update(self, bler_pct)?;
        Ok(self.last_action)
    }
}

/// One step of the radar-aware AIMD controller.
///
/// A BLER within `gamma` of the last acted-upon value holds. Otherwise the
/// MCS is floor-divided by `beta` when BLER exceeds the threshold and
/// increased by `beta` when it does not.
pub fn mcs_update(state: &McsControllerState, bler_pct: f64) -> Result<McsControllerState> {
    if !(0.0..=100.0).contains(&bler_pct) {
        return Err(Error::OutOfRange(format!("BLER {bler_pct}% outside [0, 100]")));
    }
    state.validate()?;
    let mut next = *state;
    if (bler_pct - state.bler_prev).abs() < state.gamma {
        next.last_action = McsAction::Hold;
        return Ok(next);
    }
    if bler_pct > state.bler_thresh {
        next.mcs = (state.mcs / state.beta).max(state.mcs_min);
        next.last_action = McsAction::Decr;
    } else {
        next.mcs = state.mcs.saturating_add(state.beta).min(state.mcs_max);
        next.last_action = McsAction::Incr;
    }
    next.bler_prev = bler_pct;
    Ok(next)
}

// ---------------------------------------------------------------------------
// PRB mapping
// ---------------------------------------------------------------------------

/// PRBs whose `[edge_i, edge_i+1)` span meets the half-open extent
/// `[f_low, f_high)`, dilated by `guard_prbs` on each side.
///
/// Parts of the extent outside the band are ignored.
pub fn map_extent_to_prbs(extent: (f64, f64), link: &LinkConfig, guard_prbs: usize) -> Result<BTreeSet<usize>> {
    let (lo, hi) = extent;
    if !(lo < hi) {
        return Err(Error::EmptyExtent(lo, hi));
    }
    link.validate()?;
    let n = link.n_prbs;
    let intersects = |i: usize| {
        let (a, b) = link.prb_span(i);
        a < hi && lo < b
    };
    // Arithmetic guess, then corrected against the exact edges.
    let guess = ((lo - link.band_low_hz()) / link.prb_bandwidth_hz).floor();
    let mut first = guess.clamp(0.0, (n - 1) as f64) as usize;
    while first > 0 && intersects(first - 1) {
        first -= 1;
    }
    while first < n && !intersects(first) {
        if link.prb_span(first).0 >= hi {
            return Ok(BTreeSet::new());
        }
        first += 1;
    }
    if first == n {
        return Ok(BTreeSet::new());
    }
    let mut last = first;
    while last + 1 < n && intersects(last + 1) {
        last += 1;
    }
    let from = first.saturating_sub(guard_prbs);
    let to = (last + guard_prbs).min(n - 1);
    Ok((from..=to).collect())
}

// ---------------------------------------------------------------------------
// Mode state machine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Mode1,
    Mode2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Command {
    Blank { prbs: BTreeSet<usize> },
    UnblankAll,
    SetMcs { mcs: u8 },
    RequestIq,
    StopIq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeState {
    pub mode: Mode,
    pub blanked_prbs: BTreeSet<usize>,
    pub last_detection: bool,
    pub last_radar_extent: Option<(f64, f64)>,
}

impl Default for ModeState {
    fn default() -> Self {
        ModeState {
            mode: Mode::Mode1,
            blanked_prbs: BTreeSet::new(),
            last_detection: false,
            last_radar_extent: None,
        }
    }
}

/// Advances the mode state machine by one observation window.
///
/// In Mode 2, radar boxes always win: the state stays in Mode 2 and the
/// radar extent is blanked even when the KPM detector no longer fires, since
/// blanking itself removes the radar signature from the KPMs. Mode 1 is
/// re-entered only when the detector reports absence and the localizer finds
/// no radar box.
pub fn mode_step(
    state: &ModeState,
    detection: &Detection,
    localization: Option<&[FreqTimeBox]>,
    link: &LinkConfig,
    guard_prbs: usize,
) -> Result<(ModeState, Vec<Command>)> {
    let mut next = state.clone();
    next.last_detection = detection.radar_present;
    let mut commands = Vec::new();
    match state.mode {
        Mode::Mode1 => {
            if localization.is_some() {
                return Err(Error::ProtocolViolation("localization supplied in MODE1".into()));
            }
            if detection.radar_present {
                next.mode = Mode::Mode2;
                commands.push(Command::RequestIq);
            } else if !state.blanked_prbs.is_empty() {
                next.blanked_prbs.clear();
                commands.push(Command::UnblankAll);
            }
        }
        Mode::Mode2 => {
            let extent = localization.and_then(radar_freq_extent);
            if let Some(extent) = extent {
                let prbs = map_extent_to_prbs(extent, link, guard_prbs)?;
                next.last_radar_extent = Some(extent);
                next.blanked_prbs = prbs.clone();
                commands.push(Command::Blank { prbs });
            } else if !detection.radar_present {
                next.mode = Mode::Mode1;
                next.blanked_prbs.clear();
                next.last_radar_extent = None;
                commands.push(Command::UnblankAll);
                commands.push(Command::StopIq);
            }
        }
    }
    Ok((next, commands))
}

/// A command with its issue time, one line of the command log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub t_s: f64,
    #[serde(flatten)]
    pub command: Command,
}

pub fn write_command_log(path: &Path, records: &[CommandRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::format(path, e.to_string()))?;
        out.write_all(b"\n")?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_command_log(path: &Path) -> Result<Vec<CommandRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

// ---------------------------------------------------------------------------
// Latency ledger
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TelemetryIngest,
    PreprocInferencePolicy,
    ControlDispatch,
    SpectrogramBuild,
    LocalizationInference,
    SpectrumControl,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::TelemetryIngest,
        Stage::PreprocInferencePolicy,
        Stage::ControlDispatch,
        Stage::SpectrogramBuild,
        Stage::LocalizationInference,
        Stage::SpectrumControl,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Stage::TelemetryIngest => "Receive KPMs, store",
            Stage::PreprocInferencePolicy => "Preprocessing, inference, policy",
            Stage::ControlDispatch => "Control dispatch",
            Stage::SpectrogramBuild => "Spectrogram generation",
            Stage::LocalizationInference => "Localization inference",
            Stage::SpectrumControl => "Spectrum control",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StageStats {
    pub total: Duration,
    pub max: Duration,
    pub count: u64,
}

impl StageStats {
    pub fn mean(&self) -> Duration {
        if self.count == 0 {
            Duration::ZERO
        } else {
            self.total / self.count as u32
        }
    }
}

/// Accumulated wall-clock time per (mode, stage).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyLedger {
    stages: BTreeMap<(Mode, Stage), StageStats>,
}

impl LatencyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_stage(&mut self, mode: Mode, stage: Stage, duration: Duration) {
        let s = self.stages.entry((mode, stage)).or_default();
        s.total += duration;
        s.max = s.max.max(duration);
        s.count += 1;
    }

    pub fn stage(&self, mode: Mode, stage: Stage) -> StageStats {
        self.stages.get(&(mode, stage)).copied().unwrap_or_default()
    }

    /// Sum of all recorded durations in `mode`.
    pub fn total(&self, mode: Mode) -> Duration {
        self.stages
            .iter()
            .filter(|((m, _), _)| *m == mode)
            .map(|(_, s)| s.total)
            .sum()
    }

    /// Sum of per-stage means: the typical cost of one window in `mode`.
    pub fn mean_cycle(&self, mode: Mode) -> Duration {
        self.stages
            .iter()
            .filter(|((m, _), _)| *m == mode)
            .map(|(_, s)| s.mean())
            .sum()
    }

    /// Table with one row per recorded stage and a total row per mode.
    /// Only compute is measured; transport of KPMs and I/Q is not modeled.
    pub fn report(&self) -> String {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<6} {:<34} {:>12} {:>12} {:>8} {:>14}",
            "mode", "stage", "mean_ms", "max_ms", "count", "transport"
        );
        for mode in [Mode::Mode1, Mode::Mode2] {
            let name = match mode {
                Mode::Mode1 => "1",
                Mode::Mode2 => "2",
            };
            for stage in Stage::ALL {
                if let Some(s) = self.stages.get(&(mode, stage)) {
                    let _ = writeln!(
                        out,
                        "{:<6} {:<34} {:>12.3} {:>12.3} {:>8} {:>14}",
                        name,
                        stage.label(),
                        ms(s.mean()),
                        ms(s.max),
                        s.count,
                        "not modeled"
                    );
                }
            }
            let _ = writeln!(
                out,
                "{:<6} {:<34} {:>12.3} {:>12} {:>8} {:>14}",
                name,
                "Total time",
                ms(self.mean_cycle(mode)),
                "",
                "",
                ""
            );
        }
        out
    }
}

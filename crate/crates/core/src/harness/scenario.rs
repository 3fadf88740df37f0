//! Closed-loop scenario: link simulation, telemetry, detection,
//! localization and control, one observation window at a time.
//!
//! Commands issued at the end of window `k` take effect in window `k + 1`.
//! With radar appearing in window `k`, the detector fires at the end of `k`,
//! I/Q streaming starts in `k + 1`, its spectrogram is localized at the end
//! of `k + 1`, and the blank applies from `k + 2`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::bus::{TelemetryBus, TelemetryMessage, TelemetryPayload};
use super::config::{Policy, ScenarioConfig};
use super::dataset::{mode2_stft_config, synth_mode2_window};
use super::derive_seed;
use crate::control::{
    map_extent_to_prbs, mode_step, write_command_log, Command, CommandRecord, LatencyLedger, McsControllerState, Mode,
    ModeState, Stage,
};
use crate::detect::{infer, ClassifierModel, Detection, KpmWindower};
use crate::error::{Error, Result};
use crate::localize::{EnergyLocalizer, FreqTimeBox, Localizer};
use crate::ranlink::{
    link_step, radar_psd_per_prb, write_kpm_csv, KpmRecord, LabeledKpm, LinkState, RadarInterferenceProfile,
};
use crate::signals::RadarParams;
use crate::spectro::stft_spectrogram;

const TAG_LINK: u64 = 11;
const TAG_LOAD: u64 = 12;
const TAG_IQ: u64 = 13;

/// What happened in one observation window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowTrace {
    pub t_s: f64,
    pub sinr_db: f64,
    pub radar_on: bool,
    /// Mode during the window.
    pub mode: Mode,
    pub mcs: u8,
    pub blanked_prbs: BTreeSet<usize>,
    /// PRBs under the radar main lobe, empty when radar is off.
    pub truth_prbs: BTreeSet<usize>,
    pub kpm: KpmRecord,
    pub detection: Option<bool>,
    pub radar_boxes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalDelays {
    pub t_on_s: f64,
    pub t_off_s: f64,
    /// Onset to the REQUEST_IQ that followed it.
    pub detection_delay_s: Option<f64>,
    /// Onset to the first window with every radar PRB blanked.
    pub evacuation_delay_s: Option<f64>,
    /// Radar off to the first window with nothing blanked.
    pub restore_delay_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSummary {
    pub policy: Policy,
    pub windows: usize,
    pub mean_throughput_mbps: f64,
    pub mean_bler_pct: f64,
    /// Mean BLER over windows with radar on.
    pub radar_mean_bler_pct: f64,
    pub intervals: Vec<IntervalDelays>,
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub summary: ScenarioSummary,
    pub windows: Vec<WindowTrace>,
    pub commands: Vec<CommandRecord>,
    pub ledger: LatencyLedger,
    /// Wall-clock Mode 1 path (ingest, inference and policy, dispatch) per window.
    pub mode1_cycles: Vec<Duration>,
    /// Wall-clock Mode 2 path (spectrogram, localization, spectrum control)
    /// per window with I/Q.
    pub mode2_cycles: Vec<Duration>,
}

impl ScenarioResult {
    pub fn labeled_kpms(&self) -> Vec<LabeledKpm> {
        self.windows
            .iter()
            .map(|w| LabeledKpm {
                record: w.kpm,
                label: w.radar_on as u8,
            })
            .collect()
    }

    /// Writes `kpm.csv`, `commands.jsonl`, `trace.csv`, `summary.json` and
    /// `latency.txt` into `dir`. Everything but `latency.txt` is a pure
    /// function of the configuration.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_kpm_csv(&dir.join("kpm.csv"), &self.labeled_kpms())?;
        write_command_log(&dir.join("commands.jsonl"), &self.commands)?;
        let mut trace = String::from("t_s,mode,mcs,radar_on,sinr_db,bler_pct,throughput_mbps,blanked_prbs\n");
        for w in &self.windows {
            let blanked: Vec<String> = w.blanked_prbs.iter().map(|p| p.to_string()).collect();
            let _ = writeln!(
                trace,
                "{:.4},{},{},{},{},{:.6},{:.6},{}",
                w.t_s,
                match w.mode {
                    Mode::Mode1 => 1,
                    Mode::Mode2 => 2,
                },
                w.mcs,
                w.radar_on as u8,
                w.sinr_db,
                w.kpm.bler_pct,
                w.kpm.throughput_mbps,
                blanked.join(";")
            );
        }
        fs::write(dir.join("trace.csv"), trace)?;
        let summary = serde_json::to_string_pretty(&self.summary)
            .map_err(|e| Error::format(dir.join("summary.json"), e.to_string()))?;
        fs::write(dir.join("summary.json"), summary + "\n")?;
        fs::write(dir.join("latency.txt"), self.ledger.report())?;
        Ok(())
    }
}

/// PRBs under the radar main lobe, `fc ± 1/pw`.
pub fn radar_truth_prbs(radar: &RadarParams, config: &ScenarioConfig) -> Result<BTreeSet<usize>> {
    let fc = radar.carrier_hz();
    let half = 1.0 / radar.pulse_width_s;
    map_extent_to_prbs((fc - half, fc + half), &config.link, 0)
}

/// Runs a scenario with the reference localizer.
pub fn run_scenario(config: &ScenarioConfig, model: Option<&ClassifierModel>) -> Result<ScenarioResult> {
    let localizer = EnergyLocalizer::new(config.localizer.clone())?;
    run_scenario_with(config, model, &localizer)
}

/// Runs a scenario with any localizer. Every policy but the baseline needs a
/// detector model whose window length matches `n_stack`.
pub fn run_scenario_with(
    config: &ScenarioConfig,
    model: Option<&ClassifierModel>,
    localizer: &dyn Localizer,
) -> Result<ScenarioResult> {
    config.validate()?;
    let sensing = config.policy != Policy::Baseline;
    let model = match (sensing, model) {
        (false, _) => None,
        (true, None) => return Err(Error::MissingModel),
        (true, Some(m)) => {
            if m.n_stack != config.n_stack {
                return Err(Error::InvalidConfig(format!(
                    "model window N = {} but scenario n_stack = {}",
                    m.n_stack, config.n_stack
                )));
            }
            Some(m)
        }
    };

    let mut link = config.link.clone();
    link.report_period_s = config.telemetry_period_s;
    let ts = config.telemetry_period_s;
    let mut mcs_state = McsControllerState {
        mcs: config.mcs.initial_mcs,
        gamma: config.mcs.gamma,
        beta: config.mcs.beta,
        bler_thresh: config.mcs.bler_thresh,
        ..Default::default()
    };
    mcs_state.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut link_state = LinkState::new(link.n_prbs);
    let mut mode = ModeState::default();
    let mut windower = KpmWindower::new(config.n_stack)?;
    let mut bus = TelemetryBus::new();
    let mut ledger = LatencyLedger::new();
    let mut mcs = config.mcs.initial_mcs;
    let mut iq_streaming = false;

    let mut windows = Vec::with_capacity(config.windows());
    let mut commands = Vec::new();
    let mut mode1_cycles = Vec::new();
    let mut mode2_cycles = Vec::new();

    for k in 0..config.windows() {
        let t = k as f64 * ts;
        let sinr_db = config.sinr_at(t);
        let radar = config.radar_at(t);

        // Link simulation for this window under the current controls.
        let profile = match radar {
            Some(r) => radar_psd_per_prb(r, link.radar_power_for_sinr(sinr_db), &link)?,
            None => RadarInterferenceProfile::none(link.n_prbs),
        };
        let (lo, hi) = config.offered_load_mbps;
        let mut load_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_LOAD, k as u64));
        let load = if hi > lo { load_rng.random_range(lo..=hi) } else { lo };
        link_state.t_s = t;
        let kpm = link_step(
            &link,
            &mut link_state,
            mcs,
            &profile,
            load,
            derive_seed(config.seed, TAG_LINK, k as u64),
        )?;

        let mut trace = WindowTrace {
            t_s: t,
            sinr_db,
            radar_on: radar.is_some(),
            mode: mode.mode,
            mcs,
            blanked_prbs: mode.blanked_prbs.clone(),
            truth_prbs: match radar {
                Some(r) => radar_truth_prbs(r, config)?,
                None => BTreeSet::new(),
            },
            kpm,
            detection: None,
            radar_boxes: None,
        };

        // Telemetry for this window.
        bus.publish(TelemetryMessage::kpm(kpm))?;
        if iq_streaming {
            let iq = synth_mode2_window(
                radar,
                sinr_db,
                &link_state.mask,
                ts,
                derive_seed(config.seed, TAG_IQ, k as u64),
            )?;
            bus.publish(TelemetryMessage::iq(t, Arc::new(iq.iq)))?;
        }

        if !sensing {
            while bus.poll().is_some() {}
            windows.push(trace);
            continue;
        }

        // Controller: consume telemetry, decide, dispatch.
        let ingest_start = Instant::now();
        let mut latest_window = None;
        let mut latest_iq = None;
        let mut latest_bler = None;
        while let Some(msg) = bus.poll() {
            match msg.payload {
                TelemetryPayload::Kpm(r) => {
                    latest_bler = Some(r.bler_pct);
                    if let Some(w) = windower.push(r) {
                        latest_window = Some(w);
                    }
                }
                TelemetryPayload::IqWindow(iq) => latest_iq = Some(iq),
            }
        }
        let ingest = ingest_start.elapsed();
        ledger.record_stage(Mode::Mode1, Stage::TelemetryIngest, ingest);

        let policy_start = Instant::now();
        let detection = match (&latest_window, model) {
            (Some(w), Some(m)) => infer(m, w)?,
            _ => Detection {
                radar_present: false,
                confidence: 1.0,
                p_radar: 0.0,
            },
        };
        trace.detection = Some(detection.radar_present);
        let mut issued = Vec::new();
        if config.policy == Policy::Full {
            if let Some(bler) = latest_bler {
                mcs_state.update(bler.clamp(0.0, 100.0))?;
                issued.push(Command::SetMcs { mcs: mcs_state.mcs });
            }
        }
        let mut policy_time = policy_start.elapsed();

        let mut boxes: Option<Vec<FreqTimeBox>> = None;
        let mut mode2_cycle = None;
        if let (Mode::Mode2, Some(iq)) = (mode.mode, &latest_iq) {
            let spec_start = Instant::now();
            let spectrogram = stft_spectrogram(iq, &mode2_stft_config())?;
            let spec_time = spec_start.elapsed();
            let loc_start = Instant::now();
            let found = localizer.localize(&spectrogram)?;
            let loc_time = loc_start.elapsed();
            ledger.record_stage(Mode::Mode2, Stage::SpectrogramBuild, spec_time);
            ledger.record_stage(Mode::Mode2, Stage::LocalizationInference, loc_time);
            trace.radar_boxes = Some(
                found
                    .iter()
                    .filter(|b| b.class == crate::localize::BoxClass::Radar)
                    .count(),
            );
            boxes = Some(found);
            mode2_cycle = Some(spec_time + loc_time);
        }

        let step_start = Instant::now();
        let localization = if mode.mode == Mode::Mode2 {
            Some(boxes.as_deref().unwrap_or(&[]))
        } else {
            None
        };
        let (next_mode, mode_commands) = mode_step(&mode, &detection, localization, &link, config.guard_prbs)?;
        let step_time = step_start.elapsed();
        match mode2_cycle.as_mut() {
            Some(c) => {
                ledger.record_stage(Mode::Mode2, Stage::SpectrumControl, step_time);
                *c += step_time;
            }
            None => policy_time += step_time,
        }
        ledger.record_stage(Mode::Mode1, Stage::PreprocInferencePolicy, policy_time);
        mode = next_mode;
        issued.extend(mode_commands);

        let dispatch_start = Instant::now();
        for command in issued {
            match &command {
                Command::Blank { prbs } => link_state.apply_prb_mask(prbs)?,
                Command::UnblankAll => link_state.apply_prb_mask(&BTreeSet::new())?,
                Command::SetMcs { mcs: m } => mcs = *m,
                Command::RequestIq => iq_streaming = true,
                Command::StopIq => iq_streaming = false,
            }
            commands.push(CommandRecord { t_s: t + ts, command });
        }
        let dispatch = dispatch_start.elapsed();
        ledger.record_stage(Mode::Mode1, Stage::ControlDispatch, dispatch);

        mode1_cycles.push(ingest + policy_time + dispatch);
        if let Some(c) = mode2_cycle {
            mode2_cycles.push(c);
        }
        windows.push(trace);
    }

    let summary = summarize(config, &windows, &commands);
    Ok(ScenarioResult {
        summary,
        windows,
        commands,
        ledger,
        mode1_cycles,
        mode2_cycles,
    })
}

fn summarize(config: &ScenarioConfig, windows: &[WindowTrace], commands: &[CommandRecord]) -> ScenarioSummary {
    let mean = |v: Vec<f64>| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let eps = 1e-9;
    let intervals = config
        .radar_schedule
        .iter()
        .map(|r| {
            let detection_delay_s = commands
                .iter()
                .find(|c| c.t_s > r.t_on_s + eps && c.command == Command::RequestIq)
                .map(|c| c.t_s - r.t_on_s);
            let evacuation_delay_s = windows
                .iter()
                .find(|w| w.t_s + eps >= r.t_on_s && w.radar_on && w.truth_prbs.is_subset(&w.blanked_prbs))
                .map(|w| w.t_s - r.t_on_s);
            let restore_delay_s = windows
                .iter()
                .find(|w| w.t_s + eps >= r.t_off_s && w.blanked_prbs.is_empty())
                .map(|w| w.t_s - r.t_off_s);
            IntervalDelays {
                t_on_s: r.t_on_s,
                t_off_s: r.t_off_s,
                detection_delay_s,
                evacuation_delay_s,
                restore_delay_s,
            }
        })
        .collect();
    ScenarioSummary {
        policy: config.policy,
        windows: windows.len(),
        mean_throughput_mbps: mean(windows.iter().map(|w| w.kpm.throughput_mbps).collect()),
        mean_bler_pct: mean(windows.iter().map(|w| w.kpm.bler_pct).collect()),
        radar_mean_bler_pct: mean(windows.iter().filter(|w| w.radar_on).map(|w| w.kpm.bler_pct).collect()),
        intervals,
    }
}

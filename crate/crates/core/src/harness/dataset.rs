//! Labeled dataset synthesis: KPM streams for the detector and spectrograms
//! with ground-truth boxes for the localizer.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, sinr_tag};
use crate::detect::{record_features, KpmWindow, LabeledWindow, FEATURES_PER_RECORD};
use crate::error::{Error, Result};
use crate::localize::{radar_truth_box, write_box_records, BoxRecord, FreqTimeBox};
use crate::ranlink::{
    link_step, radar_psd_per_prb, write_kpm_csv, LabeledKpm, LinkConfig, LinkState, RadarInterferenceProfile,
};
use crate::signals::{
    gen_cellular_baseband, mix_at_sinr, CellularParams, IqBuffer, RadarParams, SinrSpec, DEFAULT_SAMPLE_RATE_HZ,
    INTERFERENCE_CAP_DBM_MHZ, PRR_RANGE_HZ, PULSE_WIDTH_RANGE_S, RADAR_CENTER_OFFSETS_HZ,
};
use crate::spectro::{stft_spectrogram, Spectrogram, StftConfig, Window};

const TAG_RADAR: u64 = 1;
const TAG_CELLULAR: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_LINK: u64 = 4;

/// STFT used for Mode 2 windows: 1024-point Hann frames at 50% overlap, so a
/// short pulse always lands near the middle of some frame.
pub fn mode2_stft_config() -> StftConfig {
    StftConfig {
        fft_size: 1024,
        hop: 512,
        window: Window::Hann,
        power_floor_db: -200.0,
    }
}

/// Random fixed-frequency radar whose whole burst fits in `window_s`.
///
/// Pulse width and PRR are uniform over their ranges, the pulse count is
/// uniform between 5 and as many as fit, and the carrier is one of `offsets`.
pub fn random_radar(rng: &mut impl Rng, offsets: &[f64], window_s: f64) -> RadarParams {
    let pulse_width_s = rng.random_range(PULSE_WIDTH_RANGE_S.0..=PULSE_WIDTH_RANGE_S.1);
    let prr_hz = rng.random_range(PRR_RANGE_HZ.0..=PRR_RANGE_HZ.1);
    let max_pulses = ((window_s * prr_hz).floor() as usize).max(1);
    let pulses_per_burst = rng.random_range(max_pulses.min(5)..=max_pulses);
    let span = (pulses_per_burst - 1) as f64 / prr_hz + pulse_width_s;
    let slack = (window_s - span).max(0.0);
    let center_offset_hz = if offsets.is_empty() {
        0.0
    } else {
        offsets[rng.random_range(0..offsets.len())]
    };
    RadarParams {
        pulse_width_s,
        prr_hz,
        pulses_per_burst,
        burst_length_s: window_s,
        center_offset_hz,
        doppler_shift_hz: 0.0,
        amplitude: 1.0,
        start_offset_s: rng.random_range(0.0..=slack),
    }
}

/// One synthesized Mode 2 observation window.
#[derive(Debug, Clone)]
pub struct Mode2Window {
    pub iq: IqBuffer,
    pub truth: Vec<FreqTimeBox>,
    pub achieved_sinr_db: f64,
}

/// Radar (if any) plus masked cellular plus noise at `sinr_db`, with
/// interference and noise together at the protection level.
pub fn synth_mode2_window(
    radar: Option<&RadarParams>,
    sinr_db: f64,
    cellular_mask: &[bool],
    window_s: f64,
    seed: u64,
) -> Result<Mode2Window> {
    let fs = DEFAULT_SAMPLE_RATE_HZ;
    let cellular = gen_cellular_baseband(
        &CellularParams::with_mask(cellular_mask.to_vec()),
        window_s,
        fs,
        derive_seed(seed, TAG_CELLULAR, 0),
    )?;
    let mut spec = SinrSpec::for_target(sinr_db, INTERFERENCE_CAP_DBM_MHZ);
    if !cellular_mask.iter().any(|&a| a) {
        spec.p_cellular_dbm_mhz = f64::NEG_INFINITY;
    }
    let (radar_iq, truth) = match radar {
        Some(r) => {
            let iq = crate::signals::gen_radar_pulse_train(r, window_s, fs)?;
            let truth = radar_truth_box(r, window_s, fs / mode2_stft_config().fft_size as f64);
            (iq, truth.into_iter().collect())
        }
        None => {
            spec = spec.without_radar();
            (IqBuffer::zeros(cellular.len(), fs)?, Vec::new())
        }
    };
    let mix = mix_at_sinr(&radar_iq, &cellular, &spec, derive_seed(seed, TAG_NOISE, 0))?;
    Ok(Mode2Window {
        iq: mix.iq,
        truth,
        achieved_sinr_db: mix.achieved_sinr_db,
    })
}

// ---------------------------------------------------------------------------
// Spectrogram datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrogramSweep {
    pub sinrs_db: Vec<f64>,
    pub per_sinr: usize,
    /// Radar-free (cellular plus noise) spectrograms.
    pub clean: usize,
    pub center_offsets_hz: Vec<f64>,
    pub window_s: f64,
    pub seed: u64,
}

impl Default for SpectrogramSweep {
    fn default() -> Self {
        SpectrogramSweep {
            sinrs_db: vec![-4.0, 0.0, 4.0, 8.0, 12.0],
            per_sinr: 500,
            clean: 500,
            center_offsets_hz: RADAR_CENTER_OFFSETS_HZ.to_vec(),
            window_s: 0.01,
            seed: 0,
        }
    }
}

/// One sample of a spectrogram sweep, identified by its SINR slot.
#[derive(Debug, Clone)]
pub struct SpectrogramSample {
    pub file_id: String,
    /// `None` for radar-free samples.
    pub sinr_db: Option<f64>,
    pub spectrogram: Spectrogram,
    pub truth: Vec<FreqTimeBox>,
}

impl SpectrogramSweep {
    /// Every `(sinr, index)` slot in generation order; clean samples first.
    pub fn slots(&self) -> Vec<(Option<f64>, usize)> {
        let clean = (0..self.clean).map(|i| (None, i));
        let radar = self
            .sinrs_db
            .iter()
            .flat_map(|&s| (0..self.per_sinr).map(move |i| (Some(s), i)));
        clean.chain(radar).collect()
    }

    /// Deterministic sample for one slot.
    pub fn sample(&self, sinr_db: Option<f64>, index: usize) -> Result<SpectrogramSample> {
        let (tag, file_id) = match sinr_db {
            None => (0, format!("clean_{index:05}")),
            Some(s) => {
                let slot = self
                    .sinrs_db
                    .iter()
                    .position(|&v| v == s)
                    .ok_or_else(|| Error::InvalidParams(format!("SINR {s} not in sweep")))?;
                (slot as u64 + 1, format!("sinr_{}_{index:05}", sinr_tag(s)))
            }
        };
        let seed = derive_seed(self.seed, tag, index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_RADAR, 0));
        let radar = sinr_db.map(|_| random_radar(&mut rng, &self.center_offsets_hz, self.window_s));
        // Radar-free samples still need a level; the SINR only sets radar power.
        let window = synth_mode2_window(radar.as_ref(), sinr_db.unwrap_or(0.0), &[true; 50], self.window_s, seed)?;
        Ok(SpectrogramSample {
            file_id,
            sinr_db,
            spectrogram: stft_spectrogram(&window.iq, &mode2_stft_config())?,
            truth: window.truth,
        })
    }
}

pub const SPECTROGRAM_TRUTH_FILE: &str = "truth.jsonl";
pub const SPECTROGRAM_EXT: &str = "spec";

/// Writes `<file_id>.spec` (+ `.meta`) per sample and all ground-truth boxes
/// to `truth.jsonl`. Returns the number of spectrograms written.
pub fn gen_spectrogram_dataset(sweep: &SpectrogramSweep, out_dir: &Path) -> Result<usize> {
    fs::create_dir_all(out_dir)?;
    let slots = sweep.slots();
    let truths: Vec<Vec<BoxRecord>> = slots
        .par_iter()
        .map(|&(sinr, i)| {
            let sample = sweep.sample(sinr, i)?;
            let path = out_dir.join(format!("{}.{SPECTROGRAM_EXT}", sample.file_id));
            sample.spectrogram.write(&path)?;
            Ok(sample
                .truth
                .iter()
                .map(|b| BoxRecord::from_box(&sample.file_id, b))
                .collect())
        })
        .collect::<Result<_>>()?;
    let records: Vec<BoxRecord> = truths.into_iter().flatten().collect();
    write_box_records(&out_dir.join(SPECTROGRAM_TRUTH_FILE), &records)?;
    Ok(slots.len())
}

// ---------------------------------------------------------------------------
// KPM datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KpmSweep {
    pub sinrs_db: Vec<f64>,
    pub records_per_sinr: usize,
    pub clean_records: usize,
    pub center_offsets_hz: Vec<f64>,
    /// MCS drawn per segment. The default covers the levels the AIMD
    /// controller settles on after a back-off from 28 with beta 2.
    pub mcs_choices: Vec<u8>,
    pub offered_load_mbps: (f64, f64),
    /// Inclusive range of records per radar-on or radar-off segment.
    pub segment_records: (usize, usize),
    pub seed: u64,
    pub link: LinkConfig,
}

impl Default for KpmSweep {
    fn default() -> Self {
        KpmSweep {
            sinrs_db: vec![-4.0, 0.0, 4.0, 8.0, 12.0],
            records_per_sinr: 2000,
            clean_records: 2000,
            center_offsets_hz: RADAR_CENTER_OFFSETS_HZ.to_vec(),
            mcs_choices: vec![18, 20, 22, 24, 26, 28],
            offered_load_mbps: (1.0, 5.0),
            segment_records: (20, 100),
            seed: 0,
            link: LinkConfig::default(),
        }
    }
}

impl KpmSweep {
    pub fn validate(&self) -> Result<()> {
        self.link.validate()?;
        let (lo, hi) = self.offered_load_mbps;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(Error::InvalidParams(format!("offered load range ({lo}, {hi})")));
        }
        let (a, b) = self.segment_records;
        if a == 0 || a > b {
            return Err(Error::InvalidParams(format!("segment length range ({a}, {b})")));
        }
        if self.mcs_choices.is_empty() || self.mcs_choices.iter().any(|&m| m > crate::ranlink::MCS_MAX) {
            return Err(Error::InvalidParams("MCS choices must be non-empty and <= 28".into()));
        }
        Ok(())
    }

    /// One labeled KPM stream of alternating radar-on and radar-off segments.
    /// With `sinr_db = None` the radar never appears.
    pub fn stream(&self, sinr_db: Option<f64>, records: usize, seed: u64) -> Result<Vec<LabeledKpm>> {
        self.validate()?;
        let link = &self.link;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = LinkState::new(link.n_prbs);
        let mut out = Vec::with_capacity(records);
        let mut radar_on = sinr_db.is_some() && rng.random_bool(0.5);
        while out.len() < records {
            let len = rng.random_range(self.segment_records.0..=self.segment_records.1);
            let profile = match (radar_on, sinr_db) {
                (true, Some(s)) => {
                    let radar = random_radar(&mut rng, &self.center_offsets_hz, link.report_period_s);
                    radar_psd_per_prb(&radar, link.radar_power_for_sinr(s), link)?
                }
                _ => RadarInterferenceProfile::none(link.n_prbs),
            };
            let mcs = self.mcs_choices[rng.random_range(0..self.mcs_choices.len())];
            let (lo, hi) = self.offered_load_mbps;
            let load = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            for _ in 0..len.min(records - out.len()) {
                let step_seed = derive_seed(seed, TAG_LINK, out.len() as u64);
                let record = link_step(link, &mut state, mcs, &profile, load, step_seed)?;
                out.push(LabeledKpm {
                    record,
                    label: radar_on as u8,
                });
            }
            radar_on = sinr_db.is_some() && !radar_on;
        }
        Ok(out)
    }
}

pub(crate) fn kpm_file_name(sinr_db: Option<f64>) -> String {
    match sinr_db {
        None => "kpm_clean.csv".to_string(),
        Some(s) => format!("kpm_sinr_{}.csv", sinr_tag(s)),
    }
}

/// Writes one labeled KPM CSV per SINR point plus a radar-free file.
pub fn gen_kpm_dataset(sweep: &KpmSweep, out_dir: &Path) -> Result<Vec<PathBuf>> {
    sweep.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut jobs: Vec<(Option<f64>, usize, u64)> = vec![(None, sweep.clean_records, 0)];
    jobs.extend(
        sweep
            .sinrs_db
            .iter()
            .enumerate()
            .map(|(i, &s)| (Some(s), sweep.records_per_sinr, i as u64 + 1)),
    );
    jobs.par_iter()
        .map(|&(sinr, n, tag)| {
            let rows = sweep.stream(sinr, n, derive_seed(sweep.seed, tag, 0))?;
            let path = out_dir.join(kpm_file_name(sinr));
            write_kpm_csv(&path, &rows)?;
            Ok(path)
        })
        .collect()
}

/// Sliding windows of `n_stack` records, labeled by the newest record.
pub fn labeled_windows(rows: &[LabeledKpm], n_stack: usize) -> Result<Vec<LabeledWindow>> {
    if n_stack == 0 {
        return Err(Error::InvalidParams("window stack N must be >= 1".into()));
    }
    rows.windows(n_stack)
        .map(|w| {
            let features = w.iter().flat_map(|r| record_features(&r.record)).collect();
            Ok(LabeledWindow {
                window: KpmWindow::new(features, n_stack, FEATURES_PER_RECORD)?,
                label: w[n_stack - 1].label,
            })
        })
        .collect()
}

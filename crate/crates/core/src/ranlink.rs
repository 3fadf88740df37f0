//! PRB-granular uplink abstraction under radar interference.
//!
//! Interference is normalized to the cellular link: the power values in a
//! [`RadarInterferenceProfile`] are radar power per PRB divided by the
//! cellular-plus-noise power received in one PRB. The effective SINR of PRB
//! `i` is then `1 / (10^(-base/10) + duty * I_i)`.
//!
//! BLER follows a logistic waterfall in `sinr_required(mcs) - sinr_eff`. Each
//! report samples block outcomes with one uniform draw per PRB per block,
//! drawn for every PRB in fixed order whatever the mask, so runs that differ
//! only in MCS or blanking see the same randomness.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{RadarParams, RADAR_MEASUREMENT_BW_HZ};

pub const MCS_MIN: u8 = 0;
pub const MCS_MAX: u8 = 28;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McsEntry {
    pub spectral_efficiency: f64,
    pub sinr_required_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McsTable {
    entries: Vec<McsEntry>,
}

impl Default for McsTable {
    /// 29 entries: efficiency 0.15..5.55, required SINR -6..22 dB, both linear
    /// in the index.
    fn default() -> Self {
        let entries = (0..=MCS_MAX)
            .map(|i| {
                let x = i as f64 / MCS_MAX as f64;
                McsEntry {
                    spectral_efficiency: 0.15 + x * (5.55 - 0.15),
                    sinr_required_db: -6.0 + i as f64,
                }
            })
            .collect();
        McsTable { entries }
    }
}

impl McsTable {
    pub fn new(entries: Vec<McsEntry>) -> Result<Self> {
        if entries.len() != MCS_MAX as usize + 1 {
            return Err(Error::InvalidParams(format!(
                "MCS table needs {} entries, got {}",
                MCS_MAX + 1,
                entries.len()
            )));
        }
        for w in entries.windows(2) {
            if w[1].spectral_efficiency <= w[0].spectral_efficiency || w[1].sinr_required_db < w[0].sinr_required_db {
                return Err(Error::InvalidParams("MCS table must be monotone in index".into()));
            }
        }
        Ok(McsTable { entries })
    }

    pub fn entries(&self) -> &[McsEntry] {
        &self.entries
    }

    pub fn efficiency(&self, mcs: u8) -> f64 {
        self.entries[mcs as usize].spectral_efficiency
    }

    pub fn sinr_required_db(&self, mcs: u8) -> f64 {
        self.entries[mcs as usize].sinr_required_db
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub n_prbs: usize,
    pub prb_bandwidth_hz: f64,
    pub symbol_overhead: f64,
    /// Cellular SINR per PRB with no radar present.
    pub base_sinr_db: f64,
    /// Logistic slope of the BLER waterfall, per dB.
    pub bler_slope: f64,
    pub report_period_s: f64,
    /// Transport blocks per PRB per report. Zero reports the expected BLER
    /// without sampling.
    pub blocks_per_prb: u32,
    pub mcs_table: McsTable,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            n_prbs: 50,
            prb_bandwidth_hz: 180e3,
            symbol_overhead: 0.75,
            base_sinr_db: 35.0,
            bler_slope: 0.5,
            report_period_s: 0.01,
            blocks_per_prb: 10,
            mcs_table: McsTable::default(),
        }
    }
}

impl LinkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_prbs == 0 {
            return Err(Error::InvalidParams("n_prbs must be > 0".into()));
        }
        if !(self.symbol_overhead > 0.0 && self.symbol_overhead <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "symbol overhead {} outside (0, 1]",
                self.symbol_overhead
            )));
        }
        if !(self.prb_bandwidth_hz > 0.0 && self.report_period_s > 0.0 && self.bler_slope > 0.0) {
            return Err(Error::InvalidParams(
                "PRB bandwidth, report period and BLER slope must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Lower edge of PRB 0, DC-centered grid.
    pub fn band_low_hz(&self) -> f64 {
        -(self.n_prbs as f64) * self.prb_bandwidth_hz / 2.0
    }

    /// `[low, high)` frequency span of PRB `i`.
    pub fn prb_span(&self, i: usize) -> (f64, f64) {
        let lo = self.band_low_hz() + i as f64 * self.prb_bandwidth_hz;
        (lo, lo + self.prb_bandwidth_hz)
    }

    pub fn prb_center(&self, i: usize) -> f64 {
        let (lo, hi) = self.prb_span(i);
        (lo + hi) / 2.0
    }

    /// Peak link rate with every PRB active and no errors, Mbps.
    pub fn capacity_mbps(&self, mcs: u8, active_prbs: usize) -> f64 {
        self.mcs_table.efficiency(mcs) * active_prbs as f64 * self.prb_bandwidth_hz * self.symbol_overhead / 1e6
    }

    /// Radar power, in profile units, for a radar-to-(cellular + noise) SINR.
    ///
    /// The SINR compares the radar density in a 1 MHz measurement bandwidth
    /// with the interference-plus-noise density, and one PRB carries
    /// `prb_bandwidth / 1 MHz` of the latter.
    pub fn radar_power_for_sinr(&self, sinr_db: f64) -> f64 {
        10f64.powf(sinr_db / 10.0) * RADAR_MEASUREMENT_BW_HZ / self.prb_bandwidth_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpmRecord {
    pub t_s: f64,
    pub throughput_mbps: f64,
    pub bler_pct: f64,
    pub mcs: u8,
    pub bsr_bytes: u64,
    pub sinr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadarInterferenceProfile {
    pub per_prb_interference: Vec<f64>,
    pub duty_cycle: f64,
}

impl RadarInterferenceProfile {
    pub fn none(n_prbs: usize) -> Self {
        RadarInterferenceProfile {
            per_prb_interference: vec![0.0; n_prbs],
            duty_cycle: 0.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.per_prb_interference.iter().sum()
    }

    /// Index of the PRB with the most interference.
    pub fn peak_prb(&self) -> Option<usize> {
        self.per_prb_interference
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }
}

fn sinc_sq(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        (px.sin() / px).powi(2)
    }
}

/// Composite Simpson over `[a, b]` with `intervals` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let h = (b - a) / intervals as f64;
    let mut acc = f(a) + f(b);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Radar power falling in each PRB, from the analytic pulse spectrum
/// `sinc^2((f - fc) * pulse_width)` normalized to integrate to
/// `p_radar_linear` over all frequencies.
pub fn radar_psd_per_prb(
    radar: &RadarParams,
    p_radar_linear: f64,
    link: &LinkConfig,
) -> Result<RadarInterferenceProfile> {
    link.validate()?;
    if !(p_radar_linear.is_finite() && p_radar_linear >= 0.0) {
        return Err(Error::InvalidParams(format!(
            "radar power {p_radar_linear} must be >= 0"
        )));
    }
    if p_radar_linear == 0.0 || radar.pulses_per_burst == 0 || radar.amplitude == 0.0 {
        return Ok(RadarInterferenceProfile::none(link.n_prbs));
    }
    let pw = radar.pulse_width_s;
    let fc = radar.carrier_hz();
    let density = |f: f64| p_radar_linear * pw * sinc_sq((f - fc) * pw);
    let per_prb_interference = (0..link.n_prbs)
        .map(|i| {
            let (lo, hi) = link.prb_span(i);
            simpson(density, lo, hi, 512)
        })
        .collect();
    Ok(RadarInterferenceProfile {
        per_prb_interference,
        duty_cycle: radar.duty_cycle(),
    })
}

/// Mutable per-link state advanced by [`link_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinkState {
    pub mask: Vec<bool>,
    pub backlog_bytes: f64,
    pub t_s: f64,
}

impl LinkState {
    pub fn new(n_prbs: usize) -> Self {
        LinkState {
            mask: vec![true; n_prbs],
            backlog_bytes: 0.0,
            t_s: 0.0,
        }
    }

    pub fn active_prbs(&self) -> usize {
        self.mask.iter().filter(|&&a| a).count()
    }

    /// Blanks exactly `prbs_to_blank`; every other PRB is re-enabled.
    pub fn apply_prb_mask(&mut self, prbs_to_blank: &BTreeSet<usize>) -> Result<()> {
        self.mask = prb_mask(self.mask.len(), prbs_to_blank)?;
        Ok(())
    }
}

/// Mask that is false exactly on `prbs_to_blank`.
pub fn prb_mask(n_prbs: usize, prbs_to_blank: &BTreeSet<usize>) -> Result<Vec<bool>> {
    if let Some(&bad) = prbs_to_blank.iter().find(|&&i| i >= n_prbs) {
        return Err(Error::OutOfRange(format!("PRB {bad} not in 0..{n_prbs}")));
    }
    Ok((0..n_prbs).map(|i| !prbs_to_blank.contains(&i)).collect())
}

/// Effective SINR per PRB in dB under the duty-weighted radar interference.
pub fn effective_sinr_db(link: &LinkConfig, profile: &RadarInterferenceProfile) -> Vec<f64> {
    let noise = 10f64.powf(-link.base_sinr_db / 10.0);
    profile
        .per_prb_interference
        .iter()
        .map(|&i| -10.0 * (noise + profile.duty_cycle * i).log10())
        .collect()
}

/// Expected block error probability at `mcs` for a PRB at `sinr_db`.
pub fn block_error_probability(link: &LinkConfig, mcs: u8, sinr_db: f64) -> f64 {
    let margin = link.mcs_table.sinr_required_db(mcs) - sinr_db;
    1.0 / (1.0 + (-link.bler_slope * margin).exp())
}

/// Advances the link by one report period.
///
/// Served traffic is `min(offered + backlog, goodput)` where goodput is
/// `(1 - BLER) * efficiency * active_prbs * prb_bw * overhead`; unserved
/// traffic accumulates in the buffer reported as BSR.
pub fn link_step(
    link: &LinkConfig,
    state: &mut LinkState,
    mcs: u8,
    profile: &RadarInterferenceProfile,
    offered_load_mbps: f64,
    seed: u64,
) -> Result<KpmRecord> {
    link.validate()?;
    if mcs > MCS_MAX {
        return Err(Error::OutOfRange(format!("MCS {mcs} not in 0..={MCS_MAX}")));
    }
    if state.mask.len() != link.n_prbs {
        return Err(Error::DimensionMismatch {
            expected: link.n_prbs,
            got: state.mask.len(),
        });
    }
    if profile.per_prb_interference.len() != link.n_prbs {
        return Err(Error::DimensionMismatch {
            expected: link.n_prbs,
            got: profile.per_prb_interference.len(),
        });
    }
    if !(offered_load_mbps.is_finite() && offered_load_mbps >= 0.0) {
        return Err(Error::InvalidParams(format!(
            "offered load {offered_load_mbps} must be >= 0"
        )));
    }

    let sinr = effective_sinr_db(link, profile);
    let active: Vec<usize> = (0..link.n_prbs).filter(|&i| state.mask[i]).collect();

    let bler = if active.is_empty() {
        0.0
    } else if link.blocks_per_prb == 0 {
        active
            .iter()
            .map(|&i| block_error_probability(link, mcs, sinr[i]))
            .sum::<f64>()
            / active.len() as f64
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut failures = 0u64;
        for (i, &s) in sinr.iter().enumerate() {
            let p = block_error_probability(link, mcs, s);
            for _ in 0..link.blocks_per_prb {
                let u: f64 = rng.random();
                if state.mask[i] && u < p {
                    failures += 1;
                }
            }
        }
        failures as f64 / (active.len() as u64 * link.blocks_per_prb as u64) as f64
    };

    let period = link.report_period_s;
    let goodput = (1.0 - bler) * link.capacity_mbps(mcs, active.len());
    let backlog_mbps = state.backlog_bytes * 8.0 / 1e6 / period;
    let throughput = (offered_load_mbps + backlog_mbps).min(goodput);
    state.backlog_bytes = (state.backlog_bytes + (offered_load_mbps - throughput) * 1e6 * period / 8.0).max(0.0);

    let sinr_db = if active.is_empty() {
        sinr.iter().sum::<f64>() / sinr.len() as f64
    } else {
        active.iter().map(|&i| sinr[i]).sum::<f64>() / active.len() as f64
    };
    let record = KpmRecord {
        t_s: state.t_s,
        throughput_mbps: throughput,
        bler_pct: 100.0 * bler,
        mcs,
        bsr_bytes: state.backlog_bytes.round() as u64,
        sinr_db,
    };
    state.t_s += period;
    Ok(record)
}

// ---------------------------------------------------------------------------
// KPM CSV
// ---------------------------------------------------------------------------

pub const KPM_CSV_HEADER: &str = "t_s,throughput_mbps,bler_pct,mcs,bsr_bytes,sinr_db,label";

/// A KPM record with its ground-truth label (0 = no radar, 1 = radar).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledKpm {
    pub record: KpmRecord,
    pub label: u8,
}

pub fn write_kpm_csv(path: &Path, rows: &[LabeledKpm]) -> Result<()> {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(KPM_CSV_HEADER);
    out.push('\n');
    for row in rows {
        let r = &row.record;
        writeln!(
            out,
            "{:.4},{:.6},{:.6},{},{},{:.4},{}",
            r.t_s, r.throughput_mbps, r.bler_pct, r.mcs, r.bsr_bytes, r.sinr_db, row.label
        )
        .expect("write to string");
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_kpm_csv(path: &Path) -> Result<Vec<LabeledKpm>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == KPM_CSV_HEADER => {}
        _ => return Err(Error::format(path, "missing KPM header")),
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format(path, format!("row {}: malformed", n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        rows.push(LabeledKpm {
            record: KpmRecord {
                t_s: num(f[0])?,
                throughput_mbps: num(f[1])?,
                bler_pct: num(f[2])?,
                mcs: f[3].trim().parse().map_err(|_| bad())?,
                bsr_bytes: f[4].trim().parse().map_err(|_| bad())?,
                sinr_db: num(f[5])?,
            },
            label: f[6].trim().parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact() -> LinkConfig {
        LinkConfig {
            blocks_per_prb: 0,
            ..Default::default()
        }
    }

    fn centered_on(prb: usize, pw: f64) -> RadarParams {
        let link = LinkConfig::default();
        RadarParams {
            pulse_width_s: pw,
            center_offset_hz: link.prb_center(prb),
            ..Default::default()
        }
    }

    #[test]
    fn mcs_table_shape() {
        let t = McsTable::default();
        assert_eq!(t.entries().len(), 29);
        assert!((t.efficiency(0) - 0.15).abs() < 1e-12);
        assert!((t.efficiency(28) - 5.55).abs() < 1e-12);
        assert_eq!(t.sinr_required_db(0), -6.0);
        assert_eq!(t.sinr_required_db(28), 22.0);
        assert!(McsTable::new(t.entries()[..28].to_vec()).is_err());
    }

    #[test]
    fn zero_radar_power_gives_empty_profile() {
        let p = radar_psd_per_prb(&RadarParams::default(), 0.0, &LinkConfig::default()).unwrap();
        assert!(p.per_prb_interference.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn profile_integrates_to_radar_power() {
        let link = LinkConfig::default();
        let p = radar_psd_per_prb(&centered_on(25, 13e-6), 1.0, &link).unwrap();
        // In-band share of sinc^2 with +-4.5 MHz around 90 kHz is ~99.8%.
        assert!((p.total() - 1.0).abs() < 0.01, "{}", p.total());
        assert_eq!(p.peak_prb(), Some(25));
        assert!((p.duty_cycle - 5.0 * 13e-6 / 10e-3).abs() < 1e-15);
    }

    #[test]
    fn wider_pulse_concentrates_more_in_center() {
        let link = LinkConfig::default();
        let narrow = radar_psd_per_prb(&centered_on(25, 13e-6), 1.0, &link).unwrap();
        let wide = radar_psd_per_prb(&centered_on(25, 52e-6), 1.0, &link).unwrap();
        assert!(wide.per_prb_interference[25] > narrow.per_prb_interference[25]);
    }

    #[test]
    fn clean_link_serves_offered_load() {
        let link = exact();
        let mut state = LinkState::new(50);
        let rec = link_step(&link, &mut state, 28, &RadarInterferenceProfile::none(50), 5.0, 1).unwrap();
        assert!(rec.bler_pct < 0.2, "{}", rec.bler_pct);
        assert!((rec.throughput_mbps - 5.0).abs() < 1e-12);
        assert_eq!(rec.bsr_bytes, 0);
        assert_eq!(state.t_s, 0.01);
    }

    #[test]
    fn all_blanked_builds_backlog() {
        let link = LinkConfig::default();
        let mut state = LinkState::new(50);
        state.apply_prb_mask(&(0..50).collect()).unwrap();
        assert_eq!(state.active_prbs(), 0);
        let rec = link_step(&link, &mut state, 28, &RadarInterferenceProfile::none(50), 4.0, 1).unwrap();
        assert_eq!(rec.throughput_mbps, 0.0);
        assert_eq!(rec.bsr_bytes, 5000);
        let rec = link_step(&link, &mut state, 28, &RadarInterferenceProfile::none(50), 4.0, 2).unwrap();
        assert_eq!(rec.bsr_bytes, 10_000);
        // Re-enabling drains the buffer.
        state.apply_prb_mask(&BTreeSet::new()).unwrap();
        let rec = link_step(&link, &mut state, 28, &RadarInterferenceProfile::none(50), 4.0, 3).unwrap();
        assert!(rec.throughput_mbps > 4.0);
        assert_eq!(rec.bsr_bytes, 0);
    }

    #[test]
    fn blanking_radar_prbs_lowers_bler() {
        let link = exact();
        let profile = radar_psd_per_prb(&centered_on(25, 13e-6), link.radar_power_for_sinr(12.0), &link).unwrap();
        let mut open = LinkState::new(50);
        let unblanked = link_step(&link, &mut open, 28, &profile, 5.0, 1).unwrap();
        let mut blanked = LinkState::new(50);
        blanked.apply_prb_mask(&[24, 25, 26].into_iter().collect()).unwrap();
        let with_blank = link_step(&link, &mut blanked, 28, &profile, 5.0, 1).unwrap();
        assert!(unblanked.bler_pct > with_blank.bler_pct);
    }

    #[test]
    fn mask_application() {
        let mut state = LinkState::new(50);
        state.apply_prb_mask(&BTreeSet::new()).unwrap();
        assert!(state.mask.iter().all(|&m| m));
        let set: BTreeSet<usize> = [24, 25, 26].into_iter().collect();
        state.apply_prb_mask(&set).unwrap();
        let once = state.mask.clone();
        state.apply_prb_mask(&set).unwrap();
        assert_eq!(once, state.mask);
        assert_eq!(state.active_prbs(), 47);
        assert_eq!(
            state.apply_prb_mask(&[50].into_iter().collect()).unwrap_err().kind(),
            "out-of-range"
        );
    }

    #[test]
    fn step_rejects_bad_inputs() {
        let link = LinkConfig::default();
        let mut state = LinkState::new(50);
        let none = RadarInterferenceProfile::none(50);
        assert!(link_step(&link, &mut state, 29, &none, 1.0, 0).is_err());
        let mut short = LinkState::new(10);
        assert!(link_step(&link, &mut short, 10, &none, 1.0, 0).is_err());
    }

    #[test]
    fn kpm_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.csv");
        let rows = vec![LabeledKpm {
            record: KpmRecord {
                t_s: 0.01,
                throughput_mbps: 4.5,
                bler_pct: 1.25,
                mcs: 27,
                bsr_bytes: 12,
                sinr_db: 31.5,
            },
            label: 1,
        }];
        write_kpm_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(KPM_CSV_HEADER));
        assert_eq!(read_kpm_csv(&path).unwrap(), rows);
    }
}

//! Mode 2 radar localization on spectrograms.
//!
//! [`Localizer`] is the plug-in point; [`EnergyLocalizer`] is the reference
//! implementation. It works in four passes:
//!
//! 1. A pixel is active when it clears its row's noise floor (a low
//!    percentile over time) by `threshold_db_above_floor`, and lies within
//!    `peak_drop_db` of the strongest pixel within `peak_window_bins` rows in
//!    the same column. The second test keeps sinc side lobes of a strong
//!    pulse out of its box.
//! 2. Active pixels form 8-connected components; components smaller than
//!    `min_box_bins` are dropped and the rest merge when their bounding boxes
//!    are within `merge_gap_bins` of each other on both axes.
//! 3. Persistent wideband groups are cellular, everything else is radar.
//! 4. Radar groups whose strongest rows agree are one emitter and are
//!    joined, so the pulses of a train come back as a single box. Groups built from
//!    fewer than `min_pulses` detections are dropped. The box keeps the
//!    rows whose strongest pixel is within `peak_drop_db` of the emitter peak.
//!
//! Both activity tests are per pixel and the second does not depend on the
//! threshold, so raising the threshold can only shrink the active set.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::RadarParams;
use crate::spectro::Spectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxClass {
    Radar,
    Cellular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqTimeBox {
    pub f_low_hz: f64,
    pub f_high_hz: f64,
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub class: BoxClass,
    pub confidence: f64,
}

impl FreqTimeBox {
    pub fn new(
        f_low_hz: f64,
        f_high_hz: f64,
        t_start_s: f64,
        t_end_s: f64,
        class: BoxClass,
        confidence: f64,
    ) -> Result<Self> {
        if !(f_low_hz < f_high_hz) || !(t_start_s <= t_end_s) || !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidParams(format!(
                "invalid box [{f_low_hz}, {f_high_hz}] x [{t_start_s}, {t_end_s}] conf {confidence}"
            )));
        }
        Ok(FreqTimeBox {
            f_low_hz,
            f_high_hz,
            t_start_s,
            t_end_s,
            class,
            confidence,
        })
    }

    pub fn bandwidth_hz(&self) -> f64 {
        self.f_high_hz - self.f_low_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.t_end_s - self.t_start_s
    }

    pub fn area(&self) -> f64 {
        self.bandwidth_hz() * self.duration_s()
    }

    pub fn center_hz(&self) -> f64 {
        (self.f_low_hz + self.f_high_hz) / 2.0
    }

    pub fn contains(&self, other: &FreqTimeBox) -> bool {
        self.f_low_hz <= other.f_low_hz
            && self.f_high_hz >= other.f_high_hz
            && self.t_start_s <= other.t_start_s
            && self.t_end_s >= other.t_end_s
    }
}

/// Intersection over union in the frequency x time plane.
pub fn iou(a: &FreqTimeBox, b: &FreqTimeBox) -> f64 {
    let df = (a.f_high_hz.min(b.f_high_hz) - a.f_low_hz.max(b.f_low_hz)).max(0.0);
    let dt = (a.t_end_s.min(b.t_end_s) - a.t_start_s.max(b.t_start_s)).max(0.0);
    let inter = df * dt;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else if a.f_low_hz == b.f_low_hz
        && a.f_high_hz == b.f_high_hz
        && a.t_start_s == b.t_start_s
        && a.t_end_s == b.t_end_s
    {
        // Degenerate zero-duration boxes.
        1.0
    } else {
        0.0
    }
}

/// Ground-truth box for a radar emitter: the main lobe null to null, widened
/// by one analysis bin per side, spanning first pulse start to last pulse end.
pub fn radar_truth_box(radar: &RadarParams, duration_s: f64, freq_resolution_hz: f64) -> Option<FreqTimeBox> {
    let starts = radar.pulse_starts(duration_s);
    let first = *starts.first()?;
    let last = *starts.last()?;
    let half = 1.0 / radar.pulse_width_s + freq_resolution_hz;
    let fc = radar.carrier_hz();
    Some(FreqTimeBox {
        f_low_hz: fc - half,
        f_high_hz: fc + half,
        t_start_s: first,
        t_end_s: (last + radar.pulse_width_s).min(duration_s),
        class: BoxClass::Radar,
        confidence: 1.0,
    })
}

// ---------------------------------------------------------------------------
// Reference localizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizerConfig {
    pub noise_floor_percentile: f64,
    pub threshold_db_above_floor: f64,
    pub min_box_bins: usize,
    pub merge_gap_bins: usize,
    pub cellular_duty_threshold: f64,
    /// Minimum width for a cellular box (10 PRBs).
    pub cellular_min_bandwidth_hz: f64,
    pub peak_window_bins: usize,
    pub peak_drop_db: f64,
    /// Separate detections of one emitter a radar box needs.
    pub min_pulses: usize,
    /// Largest distance between peak rows of detections of one emitter.
    pub pulse_align_bins: usize,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        LocalizerConfig {
            noise_floor_percentile: 20.0,
            threshold_db_above_floor: 14.0,
            min_box_bins: 4,
            merge_gap_bins: 3,
            cellular_duty_threshold: 0.8,
            cellular_min_bandwidth_hz: 10.0 * 180e3,
            peak_window_bins: 16,
            peak_drop_db: 12.0,
            min_pulses: 3,
            pulse_align_bins: 2,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_floor_percentile > 0.0 && self.noise_floor_percentile < 100.0) {
            return Err(Error::InvalidParams(format!(
                "percentile {} outside (0, 100)",
                self.noise_floor_percentile
            )));
        }
        if !(self.threshold_db_above_floor > 0.0) || !(self.peak_drop_db > 0.0) {
            return Err(Error::InvalidParams("thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// A spectrogram radar localizer.
pub trait Localizer: Send + Sync {
    fn localize(&self, spec: &Spectrogram) -> Result<Vec<FreqTimeBox>>;
}

#[derive(Debug, Clone, Default)]
pub struct EnergyLocalizer {
    pub config: LocalizerConfig,
}

impl EnergyLocalizer {
    pub fn new(config: LocalizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(EnergyLocalizer { config })
    }
}

impl Localizer for EnergyLocalizer {
    fn localize(&self, spec: &Spectrogram) -> Result<Vec<FreqTimeBox>> {
        localize(spec, &self.config)
    }
}

/// Bounding box of a set of pixels plus the statistics classification needs.
#[derive(Debug, Clone)]
struct Blob {
    row_lo: usize,
    row_hi: usize,
    col_lo: usize,
    col_hi: usize,
    pixels: usize,
    excess_db: f64,
    columns: Vec<bool>,
    /// Groups joined across time.
    parts: usize,
    /// Strongest pixel power per row, dB.
    row_peak: BTreeMap<usize, f64>,
}

impl Blob {
    fn absorb(&mut self, other: &Blob) {
        self.row_lo = self.row_lo.min(other.row_lo);
        self.row_hi = self.row_hi.max(other.row_hi);
        self.col_lo = self.col_lo.min(other.col_lo);
        self.col_hi = self.col_hi.max(other.col_hi);
        self.pixels += other.pixels;
        self.excess_db += other.excess_db;
        self.parts += other.parts;
        for (a, b) in self.columns.iter_mut().zip(&other.columns) {
            *a |= b;
        }
        for (&r, &p) in &other.row_peak {
            let e = self.row_peak.entry(r).or_insert(p);
            *e = e.max(p);
        }
    }

    fn gap(lo_a: usize, hi_a: usize, lo_b: usize, hi_b: usize) -> usize {
        if hi_a < lo_b {
            lo_b - hi_a - 1
        } else if hi_b < lo_a {
            lo_a - hi_b - 1
        } else {
            0
        }
    }

    fn near(&self, other: &Blob, max_gap: usize) -> bool {
        Self::gap(self.row_lo, self.row_hi, other.row_lo, other.row_hi) <= max_gap
            && Self::gap(self.col_lo, self.col_hi, other.col_lo, other.col_hi) <= max_gap
    }

    /// Row span whose peak power is within `drop_db` of the blob's peak.
    /// Frames that catch only part of a pulse spread its energy wide, but
    /// never as strongly as a frame holding the whole pulse.
    fn core_rows(&self, drop_db: f64) -> (usize, usize) {
        let peak = self.row_peak.values().copied().fold(f64::NEG_INFINITY, f64::max);
        let kept: Vec<usize> = self
            .row_peak
            .iter()
            .filter(|(_, &p)| p >= peak - drop_db)
            .map(|(&r, _)| r)
            .collect();
        let first = kept.first().copied().unwrap_or(self.row_lo);
        let last = kept.last().copied().unwrap_or(first);
        (first, last)
    }

    fn peak_row(&self) -> usize {
        self.row_peak
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map_or(self.row_lo, |(&r, _)| r)
    }
}

fn percentile(values: &mut [f64], pct: f64) -> f64 {
    let rank = ((pct / 100.0) * (values.len() - 1) as f64).round() as usize;
    let (_, v, _) = values.select_nth_unstable_by(rank, f64::total_cmp);
    *v
}

/// Per-row noise floor in dB.
pub fn noise_floor(spec: &Spectrogram, percentile_pct: f64) -> Vec<f64> {
    let mut scratch = Vec::with_capacity(spec.time_bins());
    (0..spec.freq_bins())
        .map(|r| {
            scratch.clear();
            scratch.extend_from_slice(spec.row(r));
            percentile(&mut scratch, percentile_pct)
        })
        .collect()
}

/// Active-pixel mask (row-major) and per-pixel excess over threshold in dB.
fn activity(spec: &Spectrogram, config: &LocalizerConfig) -> (Vec<bool>, Vec<f64>) {
    let (rows, cols) = (spec.freq_bins(), spec.time_bins());
    let floor = noise_floor(spec, config.noise_floor_percentile);
    let k = config.peak_window_bins;
    let mut active = vec![false; rows * cols];
    let mut excess = vec![0.0; rows * cols];
    let mut column = vec![0.0; rows];
    for c in 0..cols {
        for (r, v) in column.iter_mut().enumerate() {
            *v = spec.get(r, c);
        }
        for r in 0..rows {
            let threshold = floor[r] + config.threshold_db_above_floor;
            let v = column[r];
            if v < threshold {
                continue;
            }
            let lo = r.saturating_sub(k);
            let hi = (r + k).min(rows - 1);
            let local_max = column[lo..=hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if v >= local_max - config.peak_drop_db {
                active[r * cols + c] = true;
                excess[r * cols + c] = v - threshold;
            }
        }
    }
    (active, excess)
}

fn components(spec: &Spectrogram, active: &[bool], excess: &[f64]) -> Vec<Blob> {
    let (rows, cols) = (spec.freq_bins(), spec.time_bins());
    let mut seen = vec![false; active.len()];
    let mut blobs = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..active.len() {
        if !active[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut blob = Blob {
            row_lo: usize::MAX,
            row_hi: 0,
            col_lo: usize::MAX,
            col_hi: 0,
            pixels: 0,
            excess_db: 0.0,
            columns: vec![false; cols],
            row_peak: BTreeMap::new(),
            parts: 1,
        };
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / cols, p % cols);
            blob.row_lo = blob.row_lo.min(r);
            blob.row_hi = blob.row_hi.max(r);
            blob.col_lo = blob.col_lo.min(c);
            blob.col_hi = blob.col_hi.max(c);
            blob.pixels += 1;
            blob.excess_db += excess[p];
            blob.columns[c] = true;
            let e = blob.row_peak.entry(r).or_insert(spec.get(r, c));
            *e = e.max(spec.get(r, c));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                        continue;
                    }
                    let q = nr as usize * cols + nc as usize;
                    if active[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        blobs.push(blob);
    }
    blobs
}

/// Repeatedly joins any two blobs satisfying `joinable` until none remain.
fn coalesce(mut blobs: Vec<Blob>, joinable: impl Fn(&Blob, &Blob) -> bool) -> Vec<Blob> {
    loop {
        let mut merged_any = false;
        let mut i = 0;
        while i < blobs.len() {
            let mut j = i + 1;
            while j < blobs.len() {
                if joinable(&blobs[i], &blobs[j]) {
                    let other = blobs.swap_remove(j);
                    blobs[i].absorb(&other);
                    merged_any = true;
                } else {
                    j += 1;
                }
            }
            i += 1;
        }
        if !merged_any {
            return blobs;
        }
    }
}

/// Runs the reference energy-threshold localizer.
pub fn localize(spec: &Spectrogram, config: &LocalizerConfig) -> Result<Vec<FreqTimeBox>> {
    config.validate()?;
    if spec.is_empty() {
        return Err(Error::InvalidParams("empty spectrogram".into()));
    }
    let cols = spec.time_bins();
    let (active, excess) = activity(spec, config);
    let blobs: Vec<Blob> = components(spec, &active, &excess)
        .into_iter()
        .filter(|b| b.pixels >= config.min_box_bins)
        .collect();
    let blobs = coalesce(blobs, |a, b| a.near(b, config.merge_gap_bins));

    let is_cellular = |b: &Blob| {
        let duty = b.columns.iter().filter(|&&c| c).count() as f64 / cols as f64;
        let bandwidth = (b.row_hi - b.row_lo + 1) as f64 * spec.freq_resolution_hz;
        duty >= config.cellular_duty_threshold && bandwidth >= config.cellular_min_bandwidth_hz
    };
    let (cellular, mut radar): (Vec<Blob>, Vec<Blob>) = blobs.into_iter().partition(is_cellular);
    // Pieces joined by proximity belong to one detection.
    for b in &mut radar {
        b.parts = 1;
    }
    let radar: Vec<Blob> = coalesce(radar, |a, b| {
        a.peak_row().abs_diff(b.peak_row()) <= config.pulse_align_bins
    })
    .into_iter()
    .filter(|b| b.parts >= config.min_pulses)
    .collect();

    let to_box = |b: &Blob, class: BoxClass| {
        let half_bin = spec.freq_resolution_hz / 2.0;
        let mean_excess = b.excess_db / b.pixels as f64;
        let (row_lo, row_hi) = match class {
            BoxClass::Radar => b.core_rows(config.peak_drop_db),
            BoxClass::Cellular => (b.row_lo, b.row_hi),
        };
        FreqTimeBox {
            f_low_hz: spec.row_frequency(row_lo) - half_bin,
            f_high_hz: spec.row_frequency(row_hi) + half_bin,
            t_start_s: spec.column_time(b.col_lo),
            t_end_s: spec.column_time(b.col_hi) + spec.frame_duration_s,
            class,
            confidence: 1.0 - (-mean_excess / 10.0).exp(),
        }
    };
    let mut boxes: Vec<FreqTimeBox> = radar
        .iter()
        .map(|b| to_box(b, BoxClass::Radar))
        .chain(cellular.iter().map(|b| to_box(b, BoxClass::Cellular)))
        .collect();
    boxes.sort_by(|a, b| {
        a.f_low_hz
            .total_cmp(&b.f_low_hz)
            .then(a.t_start_s.total_cmp(&b.t_start_s))
    });
    Ok(boxes)
}

/// Union frequency extent of the radar-class boxes.
pub fn radar_freq_extent(boxes: &[FreqTimeBox]) -> Option<(f64, f64)> {
    boxes
        .iter()
        .filter(|b| b.class == BoxClass::Radar)
        .fold(None, |acc, b| match acc {
            None => Some((b.f_low_hz, b.f_high_hz)),
            Some((lo, hi)) => Some((lo.min(b.f_low_hz), hi.max(b.f_high_hz))),
        })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LocalizationMetrics {
    pub recall: f64,
    pub precision: f64,
    pub mean_iou: f64,
    pub matched: usize,
    pub truths: usize,
    pub predictions: usize,
}

/// Greedy one-to-one matching by descending IoU within each spectrogram.
///
/// Boxes only match boxes of the same class, and a pair counts as matched
/// when its IoU reaches `iou_threshold`. With no truths recall is 1; with no
/// predictions precision is 1.
pub fn evaluate_localizer(
    predictions: &[Vec<FreqTimeBox>],
    ground_truth: &[Vec<FreqTimeBox>],
    iou_threshold: f64,
) -> Result<LocalizationMetrics> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::DimensionMismatch {
            expected: ground_truth.len(),
            got: predictions.len(),
        });
    }
    let mut matched = 0;
    let mut iou_sum = 0.0;
    let mut truths = 0;
    let mut preds = 0;
    for (pred, truth) in predictions.iter().zip(ground_truth) {
        truths += truth.len();
        preds += pred.len();
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (i, p) in pred.iter().enumerate() {
            for (j, t) in truth.iter().enumerate() {
                if p.class == t.class {
                    let v = iou(p, t);
                    if v >= iou_threshold && v > 0.0 {
                        pairs.push((v, i, j));
                    }
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut pred_used = vec![false; pred.len()];
        let mut truth_used = vec![false; truth.len()];
        for (v, i, j) in pairs {
            if !pred_used[i] && !truth_used[j] {
                pred_used[i] = true;
                truth_used[j] = true;
                matched += 1;
                iou_sum += v;
            }
        }
    }
    Ok(LocalizationMetrics {
        recall: if truths == 0 {
            1.0
        } else {
            matched as f64 / truths as f64
        },
        precision: if preds == 0 { 1.0 } else { matched as f64 / preds as f64 },
        mean_iou: if matched == 0 { 0.0 } else { iou_sum / matched as f64 },
        matched,
        truths,
        predictions: preds,
    })
}

// ---------------------------------------------------------------------------
// Box records
// ---------------------------------------------------------------------------

/// One line of a ground-truth or prediction box file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub file_id: String,
    pub class: BoxClass,
    pub f_low_hz: f64,
    pub f_high_hz: f64,
    pub t_start_s: f64,
    pub t_end_s: f64,
    pub confidence: f64,
}

impl BoxRecord {
    pub fn from_box(file_id: &str, b: &FreqTimeBox) -> Self {
        BoxRecord {
            file_id: file_id.to_string(),
            class: b.class,
            f_low_hz: b.f_low_hz,
            f_high_hz: b.f_high_hz,
            t_start_s: b.t_start_s,
            t_end_s: b.t_end_s,
            confidence: b.confidence,
        }
    }

    pub fn to_box(&self) -> FreqTimeBox {
        FreqTimeBox {
            f_low_hz: self.f_low_hz,
            f_high_hz: self.f_high_hz,
            t_start_s: self.t_start_s,
            t_end_s: self.t_end_s,
            class: self.class,
            confidence: self.confidence,
        }
    }
}

pub fn write_box_records(path: &Path, records: &[BoxRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::format(path, e.to_string()))?;
        out.write_all(b"\n")?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_box_records(path: &Path) -> Result<Vec<BoxRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

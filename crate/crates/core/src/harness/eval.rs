//! Dataset loading and per-SINR evaluation tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::dataset::{labeled_windows, SPECTROGRAM_EXT, SPECTROGRAM_TRUTH_FILE};
use super::parse_sinr_tag;
use crate::detect::{accuracy, ClassifierModel, LabeledWindow};
use crate::error::{Error, Result};
use crate::localize::{evaluate_localizer, read_box_records, FreqTimeBox, LocalizationMetrics, Localizer};
use crate::ranlink::{read_kpm_csv, LabeledKpm};
use crate::spectro::Spectrogram;

/// SINR slot encoded in a dataset file stem, `None` for radar-free files.
fn slot_from_stem(stem: &str, prefix: &str) -> Option<Option<f64>> {
    if stem == format!("{prefix}clean") || stem.starts_with(&format!("{prefix}clean_")) {
        return Some(None);
    }
    let rest = stem.strip_prefix(&format!("{prefix}sinr_"))?;
    let tag = rest.split('_').next()?;
    parse_sinr_tag(tag).map(Some)
}

fn sort_slots<T>(mut v: Vec<(Option<f64>, T)>) -> Vec<(Option<f64>, T)> {
    v.sort_by(|a, b| match (a.0, b.0) {
        (None, None) => std::cmp::Ordering::Equal,
        (None, _) => std::cmp::Ordering::Less,
        (_, None) => std::cmp::Ordering::Greater,
        (Some(x), Some(y)) => x.total_cmp(&y),
    });
    v
}

/// Every `kpm_*.csv` stream in `dir`, radar-free first, then by SINR.
pub fn load_kpm_dir(dir: &Path) -> Result<Vec<(Option<f64>, Vec<LabeledKpm>)>> {
    if !dir.is_dir() {
        return Err(Error::MissingData(format!("{} is not a directory", dir.display())));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if let Some(slot) = slot_from_stem(stem, "kpm_") {
            out.push((slot, read_kpm_csv(&path)?));
        }
    }
    if out.is_empty() {
        return Err(Error::MissingData(format!("no KPM files in {}", dir.display())));
    }
    Ok(sort_slots(out))
}

/// Windows from the radar-free stream and every stream at or above
/// `min_sinr_db`.
pub fn kpm_training_windows(dir: &Path, n_stack: usize, min_sinr_db: f64) -> Result<Vec<LabeledWindow>> {
    let mut out = Vec::new();
    for (slot, rows) in load_kpm_dir(dir)? {
        if slot.is_none_or(|s| s >= min_sinr_db) {
            out.extend(labeled_windows(&rows, n_stack)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorRow {
    pub sinr_db: Option<f64>,
    pub windows: usize,
    pub accuracy: f64,
}

/// Detector accuracy per SINR file.
pub fn eval_detector(model: &ClassifierModel, dir: &Path) -> Result<Vec<DetectorRow>> {
    load_kpm_dir(dir)?
        .into_iter()
        .map(|(sinr_db, rows)| {
            let windows = labeled_windows(&rows, model.n_stack)?;
            let refs: Vec<&LabeledWindow> = windows.iter().collect();
            Ok(DetectorRow {
                sinr_db,
                windows: windows.len(),
                accuracy: if refs.is_empty() { 0.0 } else { accuracy(model, &refs)? },
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizerRow {
    pub sinr_db: Option<f64>,
    pub spectrograms: usize,
    pub metrics: LocalizationMetrics,
}

type BoxSets = Vec<Vec<FreqTimeBox>>;

/// Localizer recall, precision and mean IoU per SINR slot over a
/// spectrogram dataset directory.
pub fn eval_localizer(localizer: &dyn Localizer, dir: &Path, iou_threshold: f64) -> Result<Vec<LocalizerRow>> {
    let truth_path = dir.join(SPECTROGRAM_TRUTH_FILE);
    if !truth_path.is_file() {
        return Err(Error::MissingData(format!("{} not found", truth_path.display())));
    }
    let mut truth: BTreeMap<String, Vec<FreqTimeBox>> = BTreeMap::new();
    for r in read_box_records(&truth_path)? {
        truth.entry(r.file_id.clone()).or_default().push(r.to_box());
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(SPECTROGRAM_EXT) {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            if let Some(slot) = slot_from_stem(&stem, "") {
                files.push((slot, stem, path));
            }
        }
    }
    if files.is_empty() {
        return Err(Error::MissingData(format!("no spectrograms in {}", dir.display())));
    }
    files.sort_by(|a, b| a.1.cmp(&b.1));
    let results: Vec<(Option<f64>, Vec<FreqTimeBox>, Vec<FreqTimeBox>)> = files
        .par_iter()
        .map(|(slot, stem, path)| {
            let spec = Spectrogram::read(path)?;
            let pred = localizer.localize(&spec)?;
            Ok((*slot, pred, truth.get(stem).cloned().unwrap_or_default()))
        })
        .collect::<Result<_>>()?;

    let mut grouped: Vec<(Option<f64>, (BoxSets, BoxSets))> = Vec::new();
    for (slot, pred, t) in results {
        match grouped.iter_mut().find(|g| g.0 == slot) {
            Some(g) => {
                g.1 .0.push(pred);
                g.1 .1.push(t);
            }
            None => grouped.push((slot, (vec![pred], vec![t]))),
        }
    }
    sort_slots(grouped)
        .into_iter()
        .map(|(sinr_db, (pred, t))| {
            Ok(LocalizerRow {
                sinr_db,
                spectrograms: pred.len(),
                metrics: evaluate_localizer(&pred, &t, iou_threshold)?,
            })
        })
        .collect()
}

fn slot_label(s: Option<f64>) -> String {
    s.map_or_else(|| "clean".to_string(), |v| v.to_string())
}

pub fn detector_csv(rows: &[DetectorRow]) -> String {
    let mut out = String::from("sinr_db,windows,accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6}", slot_label(r.sinr_db), r.windows, r.accuracy);
    }
    out
}

pub fn localizer_csv(rows: &[LocalizerRow]) -> String {
    let mut out = String::from("sinr_db,spectrograms,truths,predictions,recall,precision,mean_iou\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6}",
            slot_label(r.sinr_db),
            r.spectrograms,
            m.truths,
            m.predictions,
            m.recall,
            m.precision,
            m.mean_iou
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems() {
        assert_eq!(slot_from_stem("kpm_clean", "kpm_"), Some(None));
        assert_eq!(slot_from_stem("kpm_sinr_m4", "kpm_"), Some(Some(-4.0)));
        assert_eq!(slot_from_stem("sinr_12_00003", ""), Some(Some(12.0)));
        assert_eq!(slot_from_stem("clean_00001", ""), Some(None));
        assert_eq!(slot_from_stem("notes", ""), None);
    }

    #[test]
    fn empty_dir_is_missing_data() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_kpm_dir(dir.path()), Err(Error::MissingData(_))));
        let loc = crate::localize::EnergyLocalizer::default();
        assert!(matches!(
            eval_localizer(&loc, dir.path(), 0.5),
            Err(Error::MissingData(_))
        ));
        assert!(matches!(
            load_kpm_dir(&dir.path().join("absent")),
            Err(Error::MissingData(_))
        ));
    }
}

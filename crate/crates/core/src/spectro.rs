//! STFT spectrograms.
//!
//! Rows are frequency bins in DC-centered order (row 0 is `-fs/2`), columns
//! are time frames. Storage is row-major `[freq][time]` in dB.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyvalue;
use crate::signals::IqBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Rectangular,
    Hann,
}

impl Window {
    /// Periodic window coefficients of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|i| {
                    let s = (PI * i as f64 / n as f64).sin();
                    s * s
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: Window,
    pub power_floor_db: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            fft_size: 1024,
            hop: 1024,
            window: Window::Hann,
            power_floor_db: -120.0,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() {
            return Err(Error::InvalidParams(format!(
                "fft size {} is not a power of two",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::InvalidParams(format!(
                "hop {} must be in 1..={}",
                self.hop, self.fft_size
            )));
        }
        if !self.power_floor_db.is_finite() {
            return Err(Error::InvalidParams("power floor must be finite".into()));
        }
        Ok(())
    }

    /// Number of frames for an input of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            (len - self.fft_size) / self.hop + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    power_db: Vec<f64>,
    freq_bins: usize,
    time_bins: usize,
    pub freq_resolution_hz: f64,
    pub time_resolution_s: f64,
    /// Center frequency of row 0.
    pub f_start_hz: f64,
    /// Start time of column 0.
    pub t_start_s: f64,
    /// Duration covered by a single frame (`fft_size / fs`).
    pub frame_duration_s: f64,
}

impl Spectrogram {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        power_db: Vec<f64>,
        freq_bins: usize,
        time_bins: usize,
        freq_resolution_hz: f64,
        time_resolution_s: f64,
        f_start_hz: f64,
        t_start_s: f64,
        frame_duration_s: f64,
    ) -> Result<Self> {
        if power_db.len() != freq_bins * time_bins {
            return Err(Error::DimensionMismatch {
                expected: freq_bins * time_bins,
                got: power_db.len(),
            });
        }
        if !(freq_resolution_hz > 0.0 && time_resolution_s > 0.0 && frame_duration_s > 0.0) {
            return Err(Error::InvalidParams("spectrogram resolutions must be positive".into()));
        }
        Ok(Spectrogram {
            power_db,
            freq_bins,
            time_bins,
            freq_resolution_hz,
            time_resolution_s,
            f_start_hz,
            t_start_s,
            frame_duration_s,
        })
    }

    pub fn freq_bins(&self) -> usize {
        self.freq_bins
    }

    pub fn time_bins(&self) -> usize {
        self.time_bins
    }

    pub fn is_empty(&self) -> bool {
        self.power_db.is_empty()
    }

    pub fn power_db(&self) -> &[f64] {
        &self.power_db
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.power_db[row * self.time_bins + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.power_db[row * self.time_bins..(row + 1) * self.time_bins]
    }

    /// Center frequency of `row`.
    pub fn row_frequency(&self, row: usize) -> f64 {
        self.f_start_hz + row as f64 * self.freq_resolution_hz
    }

    /// Start time of `col`.
    pub fn column_time(&self, col: usize) -> f64 {
        self.t_start_s + col as f64 * self.time_resolution_s
    }

    /// Row whose bin contains `freq_hz`, clamped to the grid.
    pub fn row_for_frequency(&self, freq_hz: f64) -> usize {
        let pos = ((freq_hz - self.f_start_hz) / self.freq_resolution_hz).round();
        pos.clamp(0.0, (self.freq_bins - 1) as f64) as usize
    }

    /// Mean linear power per row; a Welch-style PSD estimate.
    pub fn mean_psd(&self) -> Vec<f64> {
        (0..self.freq_bins)
            .map(|r| {
                let row = self.row(r);
                row.iter().map(|&db| 10f64.powf(db / 10.0)).sum::<f64>() / row.len().max(1) as f64
            })
            .collect()
    }

    /// Row-major little-endian `f32` matrix plus `<path>.meta`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for &v in &self.power_db {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        out.flush()?;
        keyvalue::write(
            &keyvalue::sidecar_path(path),
            &[
                ("freq_bins", self.freq_bins.to_string()),
                ("time_bins", self.time_bins.to_string()),
                ("freq_resolution_hz", self.freq_resolution_hz.to_string()),
                ("time_resolution_s", self.time_resolution_s.to_string()),
                ("f_start_hz", self.f_start_hz.to_string()),
                ("t_start_s", self.t_start_s.to_string()),
                ("frame_duration_s", self.frame_duration_s.to_string()),
            ],
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let meta = keyvalue::Record::read(&keyvalue::sidecar_path(path))?;
        let bytes = fs::read(path)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::format(path, "length is not a whole number of f32 values"));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Spectrogram::new(
            values,
            meta.get("freq_bins")?,
            meta.get("time_bins")?,
            meta.get("freq_resolution_hz")?,
            meta.get("time_resolution_s")?,
            meta.get("f_start_hz")?,
            meta.get("t_start_s")?,
            meta.get("frame_duration_s")?,
        )
    }

    /// 8-bit binary PGM, highest frequency at the top, time left to right.
    pub fn write_pgm(&self, path: &Path, db_min: f64, db_max: f64) -> Result<()> {
        let image = spectrogram_to_image(self, db_min, db_max)?;
        let mut out = BufWriter::new(File::create(path)?);
        write!(out, "P5\n{} {}\n255\n", self.time_bins, self.freq_bins)?;
        for r in (0..self.freq_bins).rev() {
            let row: Vec<u8> = image[r * self.time_bins..(r + 1) * self.time_bins]
                .iter()
                .map(|&v| (v * 255.0).round() as u8)
                .collect();
            out.write_all(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Frame `t` is `|FFT(w * x[t*hop .. t*hop + n])|^2`, reordered so DC sits at
/// row `n/2`, in dB and clamped at the power floor.
pub fn stft_spectrogram(iq: &IqBuffer, config: &StftConfig) -> Result<Spectrogram> {
    config.validate()?;
    let n = config.fft_size;
    if iq.len() < n {
        return Err(Error::TooShortInput {
            len: iq.len(),
            needed: n,
        });
    }
    let frames = config.frame_count(iq.len());
    let window = config.window.coefficients(n);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut power_db = vec![config.power_floor_db; n * frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let samples = iq.samples();
    for t in 0..frames {
        let seg = &samples[t * config.hop..t * config.hop + n];
        for ((b, s), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = s * w;
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, x) in buf.iter().enumerate() {
            let row = (k + n / 2) % n;
            let db = 10.0 * x.norm_sqr().log10();
            power_db[row * frames + t] = if db > config.power_floor_db {
                db
            } else {
                config.power_floor_db
            };
        }
    }
    let fs = iq.sample_rate_hz();
    Spectrogram::new(
        power_db,
        n,
        frames,
        fs / n as f64,
        config.hop as f64 / fs,
        -fs / 2.0,
        0.0,
        n as f64 / fs,
    )
}

/// Affine clamp-and-scale of dB values onto `[0, 1]`, row-major like the input.
pub fn spectrogram_to_image(spec: &Spectrogram, db_min: f64, db_max: f64) -> Result<Vec<f64>> {
    if !(db_min < db_max) {
        return Err(Error::InvalidParams(format!(
            "db_min {db_min} must be below db_max {db_max}"
        )));
    }
    let span = db_max - db_min;
    Ok(spec
        .power_db()
        .iter()
        .map(|&v| ((v - db_min) / span).clamp(0.0, 1.0))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::{gen_awgn, DEFAULT_SAMPLE_RATE_HZ as FS};

    fn tone(freq: f64, n: usize) -> IqBuffer {
        let samples = (0..n)
            .map(|i| Complex64::from_polar(1.0, 2.0 * PI * freq * i as f64 / FS))
            .collect();
        IqBuffer::new(samples, FS).unwrap()
    }

    #[test]
    fn tone_lands_on_expected_row() {
        let spec = stft_spectrogram(&tone(1.92e6, 4096), &StftConfig::default()).unwrap();
        for t in 0..spec.time_bins() {
            let argmax = (0..spec.freq_bins())
                .max_by(|&a, &b| spec.get(a, t).total_cmp(&spec.get(b, t)))
                .unwrap();
            assert_eq!(argmax, 640);
        }
        assert_eq!(spec.row_for_frequency(1.92e6), 640);
        assert!((spec.row_frequency(640) - 1.92e6).abs() < 1e-6);
    }

    #[test]
    fn zeros_sit_on_the_floor() {
        let spec = stft_spectrogram(&IqBuffer::zeros(2048, FS).unwrap(), &StftConfig::default()).unwrap();
        assert!(spec.power_db().iter().all(|&v| v == -120.0));
    }

    #[test]
    fn ten_ms_gives_150_columns() {
        let iq = IqBuffer::zeros(153_600, FS).unwrap();
        let spec = stft_spectrogram(&iq, &StftConfig::default()).unwrap();
        assert_eq!(spec.time_bins(), 150);
        assert_eq!(spec.freq_bins(), 1024);
        assert!((spec.time_resolution_s - 1024.0 / FS).abs() < 1e-15);
        assert!((spec.freq_resolution_hz - 15e3).abs() < 1e-9);
    }

    #[test]
    fn short_input_and_bad_config() {
        let iq = IqBuffer::zeros(1000, FS).unwrap();
        assert_eq!(
            stft_spectrogram(&iq, &StftConfig::default()).unwrap_err().kind(),
            "too-short-input"
        );
        let bad = StftConfig {
            fft_size: 1000,
            ..Default::default()
        };
        assert!(stft_spectrogram(&IqBuffer::zeros(4096, FS).unwrap(), &bad).is_err());
        let bad_hop = StftConfig {
            hop: 2048,
            ..Default::default()
        };
        assert!(bad_hop.validate().is_err());
    }

    #[test]
    fn image_scaling() {
        let spec = Spectrogram::new(vec![-100.0, -80.0, -60.0, -140.0], 2, 2, 1.0, 1.0, 0.0, 0.0, 1.0).unwrap();
        let img = spectrogram_to_image(&spec, -100.0, -60.0).unwrap();
        assert_eq!(img, vec![0.0, 0.5, 1.0, 0.0]);
        assert!(spectrogram_to_image(&spec, -60.0, -60.0).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.f32");
        let iq = gen_awgn(1.0, 1e-3, FS, 2).unwrap();
        let spec = stft_spectrogram(&iq, &StftConfig::default()).unwrap();
        spec.write(&path).unwrap();
        let back = Spectrogram::read(&path).unwrap();
        assert_eq!(back.freq_bins(), spec.freq_bins());
        assert_eq!(back.time_bins(), spec.time_bins());
        for (a, b) in spec.power_db().iter().zip(back.power_db()) {
            assert!((a - b).abs() < 1e-4);
        }
        let pgm = dir.path().join("s.pgm");
        spec.write_pgm(&pgm, -60.0, 20.0).unwrap();
        let bytes = std::fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n"));
    }
}

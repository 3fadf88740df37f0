//! Baseband signal synthesis for the coexistence band.
//!
//! All buffers are DC-centered complex baseband at [`DEFAULT_SAMPLE_RATE_HZ`]
//! unless stated otherwise. Power is expressed in "sample milliwatts": the mean
//! of `|x|^2` over a buffer is its power in mW, and a density in mW/MHz is that
//! power divided by the occupied bandwidth in MHz. This makes dBm/MHz levels
//! from the regulatory literature directly usable as synthesis targets.
//!
//! The radar is an unmodulated, rectangular-envelope carrier pulse train. Its
//! power density uses the peak (pulse-on) convention: the mean power of the
//! pulse-on samples inside a 1 MHz measurement bandwidth centered on the pulse
//! spectrum.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::keyvalue;

pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 15.36e6;

/// Radar center offsets used for dataset diversity, relative to band center.
pub const RADAR_CENTER_OFFSETS_HZ: [f64; 3] = [-2.5e6, 0.0, 2.5e6];

/// Regulatory cap on cumulative interference plus noise, dBm/MHz.
pub const INTERFERENCE_CAP_DBM_MHZ: f64 = -109.0;

/// Radar measurement bandwidth for the peak-density convention.
pub const RADAR_MEASUREMENT_BW_HZ: f64 = 1e6;

pub const PULSE_WIDTH_RANGE_S: (f64, f64) = (13e-6, 52e-6);
pub const PRR_RANGE_HZ: (f64, f64) = (500.0, 1100.0);

/// Number of samples covering `duration_s` at `sample_rate_hz`.
pub fn sample_count(duration_s: f64, sample_rate_hz: f64) -> usize {
    (duration_s * sample_rate_hz).round().max(0.0) as usize
}

/// dBm/MHz to mW/MHz. `-inf` maps to zero.
pub fn dbm_to_linear(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn linear_to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

/// Frequency of FFT bin `k` for an `n`-point transform, in DC-centered terms.
pub(crate) fn bin_frequency(k: usize, n: usize, sample_rate_hz: f64) -> f64 {
    let signed = if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    };
    signed * sample_rate_hz / n as f64
}

// ---------------------------------------------------------------------------
// IqBuffer
// ---------------------------------------------------------------------------

/// Complex baseband samples with their sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct IqBuffer {
    samples: Vec<Complex64>,
    sample_rate_hz: f64,
}

impl IqBuffer {
    pub fn new(samples: Vec<Complex64>, sample_rate_hz: f64) -> Result<Self> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::InvalidParams(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        Ok(IqBuffer {
            samples,
            sample_rate_hz,
        })
    }

    pub fn zeros(len: usize, sample_rate_hz: f64) -> Result<Self> {
        Self::new(vec![Complex64::new(0.0, 0.0); len], sample_rate_hz)
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    /// Mean of `|x|^2`; zero for an empty buffer.
    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }

    pub fn scaled(&self, gain: f64) -> IqBuffer {
        IqBuffer {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// Sample-wise sum; both buffers must share length and rate.
    pub fn add(&self, other: &IqBuffer) -> Result<IqBuffer> {
        self.check_compatible(other)?;
        Ok(IqBuffer {
            samples: self.samples.iter().zip(&other.samples).map(|(a, b)| a + b).collect(),
            sample_rate_hz: self.sample_rate_hz,
        })
    }

    /// Copy of samples `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> IqBuffer {
        IqBuffer {
            samples: self.samples[start.min(self.len())..end.min(self.len())].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    fn check_compatible(&self, other: &IqBuffer) -> Result<()> {
        if self.len() != other.len() || self.sample_rate_hz != other.sample_rate_hz {
            return Err(Error::InvalidParams(format!(
                "buffers differ: {} samples @ {} Hz vs {} samples @ {} Hz",
                self.len(),
                self.sample_rate_hz,
                other.len(),
                other.sample_rate_hz
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Radar
// ---------------------------------------------------------------------------

/// Fixed-frequency pulsed radar (unmodulated CW pulses).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RadarParams {
    pub pulse_width_s: f64,
    pub prr_hz: f64,
    pub pulses_per_burst: usize,
    pub burst_length_s: f64,
    pub center_offset_hz: f64,
    pub doppler_shift_hz: f64,
    pub amplitude: f64,
    /// Time of the first burst within the buffer.
    pub start_offset_s: f64,
}

impl Default for RadarParams {
    fn default() -> Self {
        RadarParams {
            pulse_width_s: 13e-6,
            prr_hz: 500.0,
            pulses_per_burst: 5,
            burst_length_s: 10e-3,
            center_offset_hz: 0.0,
            doppler_shift_hz: 0.0,
            amplitude: 1.0,
            start_offset_s: 0.0,
        }
    }
}

impl RadarParams {
    /// Carrier frequency actually emitted, offset plus Doppler.
    pub fn carrier_hz(&self) -> f64 {
        self.center_offset_hz + self.doppler_shift_hz
    }

    /// Fraction of time the transmitter is on within a burst.
    pub fn duty_cycle(&self) -> f64 {
        (self.pulses_per_burst as f64 * self.pulse_width_s / self.burst_length_s).min(1.0)
    }

    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        let tol = 1e-12;
        let (pw_lo, pw_hi) = PULSE_WIDTH_RANGE_S;
        if !(self.pulse_width_s >= pw_lo - tol && self.pulse_width_s <= pw_hi + tol) {
            return bad(format!("pulse width {} s outside 13-52 us", self.pulse_width_s));
        }
        let (prr_lo, prr_hi) = PRR_RANGE_HZ;
        if !(self.prr_hz >= prr_lo && self.prr_hz <= prr_hi) {
            return bad(format!("PRR {} Hz outside 500-1100 Hz", self.prr_hz));
        }
        if !(self.burst_length_s.is_finite() && self.burst_length_s > 0.0) {
            return bad(format!("burst length {} s must be positive", self.burst_length_s));
        }
        if self.pulses_per_burst as f64 / self.prr_hz > self.burst_length_s * (1.0 + 1e-9) {
            return bad(format!(
                "{} pulses at {} Hz do not fit a {} s burst",
                self.pulses_per_burst, self.prr_hz, self.burst_length_s
            ));
        }
        if !(self.carrier_hz().abs() < sample_rate_hz / 2.0) {
            return bad(format!(
                "carrier {} Hz aliases at {} Hz sampling",
                self.carrier_hz(),
                sample_rate_hz
            ));
        }
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return bad(format!("amplitude {} must be >= 0", self.amplitude));
        }
        if !(self.start_offset_s.is_finite() && self.start_offset_s >= 0.0) {
            return bad(format!("start offset {} must be >= 0", self.start_offset_s));
        }
        Ok(())
    }

    /// Start times of every pulse beginning inside `[0, duration_s)`.
    pub fn pulse_starts(&self, duration_s: f64) -> Vec<f64> {
        let mut starts = Vec::new();
        let mut burst = 0usize;
        loop {
            let burst_start = self.start_offset_s + burst as f64 * self.burst_length_s;
            if burst_start >= duration_s {
                break;
            }
            for k in 0..self.pulses_per_burst {
                let t = burst_start + k as f64 / self.prr_hz;
                if t < duration_s {
                    starts.push(t);
                }
            }
            burst += 1;
        }
        starts
    }
}

/// Rectangular-envelope CW pulse train.
///
/// Pulse `k` of burst `b` starts at `start_offset + b * burst_length + k / prr`.
/// The carrier phase is referenced to absolute sample time, so every pulse is
/// a window onto the same continuous tone. Samples outside pulses are zero.
pub fn gen_radar_pulse_train(params: &RadarParams, duration_s: f64, sample_rate_hz: f64) -> Result<IqBuffer> {
    params.validate(sample_rate_hz)?;
    if duration_s < params.burst_length_s {
        return Err(Error::InvalidParams(format!(
            "duration {duration_s} s shorter than burst length {} s",
            params.burst_length_s
        )));
    }
    let n = sample_count(duration_s, sample_rate_hz);
    let mut samples = vec![Complex64::new(0.0, 0.0); n];
    let pulse_len = sample_count(params.pulse_width_s, sample_rate_hz);
    let omega = 2.0 * PI * params.carrier_hz() / sample_rate_hz;
    for start in params.pulse_starts(duration_s) {
        let first = sample_count(start, sample_rate_hz);
        for (i, slot) in samples.iter_mut().enumerate().skip(first).take(pulse_len) {
            *slot = Complex64::from_polar(params.amplitude, omega * i as f64);
        }
    }
    IqBuffer::new(samples, sample_rate_hz)
}

// ---------------------------------------------------------------------------
// Cellular stand-in
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CellularParams {
    pub n_prbs: usize,
    pub prb_bandwidth_hz: f64,
    pub active_prb_mask: Vec<bool>,
    /// Linear power carried by each active PRB.
    pub per_prb_power: f64,
}

impl Default for CellularParams {
    fn default() -> Self {
        CellularParams {
            n_prbs: 50,
            prb_bandwidth_hz: 180e3,
            active_prb_mask: vec![true; 50],
            per_prb_power: 1.0,
        }
    }
}

impl CellularParams {
    pub fn with_mask(mask: Vec<bool>) -> Self {
        CellularParams {
            n_prbs: mask.len(),
            active_prb_mask: mask,
            ..Default::default()
        }
    }

    /// Lower edge of PRB 0; the PRB grid is centered on DC.
    pub fn band_low_hz(&self) -> f64 {
        -(self.n_prbs as f64) * self.prb_bandwidth_hz / 2.0
    }

    pub fn occupied_bandwidth_hz(&self) -> f64 {
        self.n_prbs as f64 * self.prb_bandwidth_hz
    }

    /// PRB index containing `freq_hz`, if any.
    pub fn prb_at(&self, freq_hz: f64) -> Option<usize> {
        let pos = (freq_hz - self.band_low_hz()) / self.prb_bandwidth_hz;
        if pos >= 0.0 && pos < self.n_prbs as f64 {
            Some(pos.floor() as usize)
        } else {
            None
        }
    }

    pub fn validate(&self, sample_rate_hz: f64) -> Result<()> {
        if self.n_prbs == 0 {
            return Err(Error::InvalidParams("n_prbs must be > 0".into()));
        }
        if self.active_prb_mask.len() != self.n_prbs {
            return Err(Error::InvalidParams(format!(
                "mask has {} entries for {} PRBs",
                self.active_prb_mask.len(),
                self.n_prbs
            )));
        }
        if !(self.prb_bandwidth_hz > 0.0) || self.occupied_bandwidth_hz() > sample_rate_hz {
            return Err(Error::InvalidParams(format!(
                "{} PRBs x {} Hz overflow {} Hz sampling",
                self.n_prbs, self.prb_bandwidth_hz, sample_rate_hz
            )));
        }
        if !(self.per_prb_power.is_finite() && self.per_prb_power >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "per-PRB power {} must be >= 0",
                self.per_prb_power
            )));
        }
        Ok(())
    }
}

/// Noise-like multicarrier stand-in for the uplink waveform.
///
/// Synthesized in the frequency domain: every DFT bin inside an active PRB
/// gets a circular Gaussian coefficient, each PRB is normalized to exactly
/// `per_prb_power`, and everything else (inactive PRBs, guard bands) is zero.
/// Random draws cover the whole PRB grid regardless of the mask, so two masks
/// with the same seed share the realization on their common PRBs.
pub fn gen_cellular_baseband(
    params: &CellularParams,
    duration_s: f64,
    sample_rate_hz: f64,
    seed: u64,
) -> Result<IqBuffer> {
    params.validate(sample_rate_hz)?;
    let n = sample_count(duration_s, sample_rate_hz);
    if n == 0 || params.per_prb_power == 0.0 || !params.active_prb_mask.iter().any(|&a| a) {
        return IqBuffer::zeros(n, sample_rate_hz);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid sigma");
    let mut spectrum = vec![Complex64::new(0.0, 0.0); n];
    let mut prb_energy = vec![0.0; params.n_prbs];
    let mut prb_of_bin = vec![usize::MAX; n];
    for (k, coeff) in spectrum.iter_mut().enumerate() {
        let Some(prb) = params.prb_at(bin_frequency(k, n, sample_rate_hz)) else {
            continue;
        };
        let draw = Complex64::new(unit.sample(&mut rng), unit.sample(&mut rng));
        if params.active_prb_mask[prb] {
            *coeff = draw;
            prb_energy[prb] += draw.norm_sqr();
            prb_of_bin[k] = prb;
        }
    }
    // Unnormalized inverse FFT: mean time-domain power equals sum |X_k|^2.
    let gains: Vec<f64> = prb_energy
        .iter()
        .map(|&e| {
            if e > 0.0 {
                (params.per_prb_power / e).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    for (coeff, &prb) in spectrum.iter_mut().zip(&prb_of_bin) {
        if prb != usize::MAX {
            *coeff *= gains[prb];
        }
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut spectrum);
    IqBuffer::new(spectrum, sample_rate_hz)
}

// ---------------------------------------------------------------------------
// Noise
// ---------------------------------------------------------------------------

/// Circularly symmetric complex Gaussian noise of the given mean power.
pub fn gen_awgn(power_linear: f64, duration_s: f64, sample_rate_hz: f64, seed: u64) -> Result<IqBuffer> {
    if !(power_linear.is_finite() && power_linear >= 0.0) {
        return Err(Error::InvalidParams(format!("noise power {power_linear} must be >= 0")));
    }
    let n = sample_count(duration_s, sample_rate_hz);
    if power_linear == 0.0 {
        return IqBuffer::zeros(n, sample_rate_hz);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (power_linear / 2.0).sqrt()).expect("valid sigma");
    let samples = (0..n)
        .map(|_| Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)))
        .collect();
    IqBuffer::new(samples, sample_rate_hz)
}

// ---------------------------------------------------------------------------
// SINR
// ---------------------------------------------------------------------------

/// Component power densities in dBm/MHz. `-inf` marks an absent component.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SinrSpec {
    pub p_radar_dbm_mhz: f64,
    pub p_cellular_dbm_mhz: f64,
    pub p_noise_dbm_mhz: f64,
}

impl SinrSpec {
    /// Radar at `sinr_db` above an interference-plus-noise total of
    /// `combined_dbm_mhz`, split evenly between cellular and noise.
    pub fn for_target(sinr_db: f64, combined_dbm_mhz: f64) -> Self {
        let half = combined_dbm_mhz - 10.0 * 2f64.log10();
        SinrSpec {
            p_radar_dbm_mhz: combined_dbm_mhz + sinr_db,
            p_cellular_dbm_mhz: half,
            p_noise_dbm_mhz: half,
        }
    }

    pub fn without_radar(self) -> Self {
        SinrSpec {
            p_radar_dbm_mhz: f64::NEG_INFINITY,
            ..self
        }
    }

    pub fn radar_present(&self) -> bool {
        self.p_radar_dbm_mhz.is_finite()
    }
}

/// Radar-to-(cellular + noise) ratio in dB from dBm/MHz densities.
pub fn compute_sinr(spec: &SinrSpec) -> f64 {
    let interference = dbm_to_linear(spec.p_cellular_dbm_mhz) + dbm_to_linear(spec.p_noise_dbm_mhz);
    linear_to_db(dbm_to_linear(spec.p_radar_dbm_mhz) / interference)
}

// ---------------------------------------------------------------------------
// Band power measurement
// ---------------------------------------------------------------------------

/// `|X_k|^2 / n^2` per bin in FFT order; the bins sum to the mean power.
pub(crate) fn periodogram(samples: &[Complex64]) -> Vec<f64> {
    let n = samples.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf = samples.to_vec();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let norm = 1.0 / (n as f64 * n as f64);
    buf.iter().map(|x| x.norm_sqr() * norm).collect()
}

fn clip_band(f_low_hz: f64, f_high_hz: f64, sample_rate_hz: f64) -> Result<(f64, f64)> {
    let nyquist = sample_rate_hz / 2.0;
    let lo = f_low_hz.max(-nyquist);
    let hi = f_high_hz.min(nyquist);
    if !(f_low_hz < f_high_hz) || !(lo < hi) {
        return Err(Error::EmptyBand { f_low_hz, f_high_hz });
    }
    Ok((lo, hi))
}

fn band_power_from_periodogram(psd: &[f64], sample_rate_hz: f64, lo: f64, hi: f64) -> f64 {
    let n = psd.len();
    let in_band: f64 = psd
        .iter()
        .enumerate()
        .filter(|&(k, _)| {
            let f = bin_frequency(k, n, sample_rate_hz);
            f >= lo && f <= hi
        })
        .map(|(_, p)| p)
        .sum();
    in_band / ((hi - lo) / 1e6)
}

/// Periodogram power inside `[f_low, f_high]`, per MHz of that band.
pub fn measure_band_power(iq: &IqBuffer, f_low_hz: f64, f_high_hz: f64) -> Result<f64> {
    let (lo, hi) = clip_band(f_low_hz, f_high_hz, iq.sample_rate_hz())?;
    if iq.is_empty() {
        return Ok(0.0);
    }
    let psd = periodogram(iq.samples());
    Ok(band_power_from_periodogram(&psd, iq.sample_rate_hz(), lo, hi))
}

/// Peak-convention radar density: pulse-on samples only, 1 MHz around the
/// spectral peak. Returns `(density, carrier estimate)`.
pub fn radar_peak_density(radar: &IqBuffer) -> Result<(f64, f64)> {
    let on: Vec<Complex64> = radar.samples().iter().copied().filter(|s| s.norm_sqr() > 0.0).collect();
    if on.is_empty() {
        return Err(Error::SilentComponent("radar"));
    }
    let fs = radar.sample_rate_hz();
    let psd = periodogram(&on);
    let peak = psd
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| bin_frequency(k, psd.len(), fs))
        .unwrap_or(0.0);
    let half = RADAR_MEASUREMENT_BW_HZ / 2.0;
    let (lo, hi) = clip_band(peak - half, peak + half, fs)?;
    Ok((band_power_from_periodogram(&psd, fs, lo, hi), peak))
}

/// Density over the occupied bandwidth: total power divided by the width of
/// the bins carrying non-negligible power.
pub fn occupied_density(iq: &IqBuffer) -> Result<f64> {
    let psd = periodogram(iq.samples());
    let total: f64 = psd.iter().sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let floor = 1e-4 * total / psd.len() as f64;
    let occupied = psd.iter().filter(|&&p| p > floor).count();
    let bin_mhz = iq.sample_rate_hz() / psd.len() as f64 / 1e6;
    Ok(total / (occupied as f64 * bin_mhz))
}

// ---------------------------------------------------------------------------
// Mixing
// ---------------------------------------------------------------------------

/// Output of [`mix_at_sinr`].
#[derive(Debug, Clone)]
pub struct Mixture {
    pub iq: IqBuffer,
    /// Measured SINR of the scaled components, dB. `-inf` without radar.
    pub achieved_sinr_db: f64,
    pub radar_density: f64,
    pub cellular_density: f64,
    pub noise_density: f64,
}

/// Scales radar and cellular to the requested densities, adds AWGN at
/// `p_noise`, and reports the SINR measured on the scaled components.
pub fn mix_at_sinr(radar: &IqBuffer, cellular: &IqBuffer, spec: &SinrSpec, seed: u64) -> Result<Mixture> {
    radar.check_compatible(cellular)?;
    let fs = cellular.sample_rate_hz();
    let duration = cellular.duration_s();

    let mut composite = IqBuffer::zeros(cellular.len(), fs)?;
    let mut radar_density = 0.0;
    if spec.radar_present() {
        let (measured, _) = radar_peak_density(radar)?;
        let target = dbm_to_linear(spec.p_radar_dbm_mhz);
        let scaled = radar.scaled((target / measured).sqrt());
        radar_density = target;
        composite = composite.add(&scaled)?;
    }

    let mut cellular_density = 0.0;
    if spec.p_cellular_dbm_mhz.is_finite() {
        let measured = occupied_density(cellular)?;
        if measured <= 0.0 {
            return Err(Error::SilentComponent("cellular"));
        }
        let target = dbm_to_linear(spec.p_cellular_dbm_mhz);
        let scaled = cellular.scaled((target / measured).sqrt());
        cellular_density = target;
        composite = composite.add(&scaled)?;
    }

    let mut noise_density = 0.0;
    if spec.p_noise_dbm_mhz.is_finite() {
        let power = dbm_to_linear(spec.p_noise_dbm_mhz) * fs / 1e6;
        let noise = gen_awgn(power, duration, fs, seed)?;
        noise_density = measure_band_power(&noise, -fs / 2.0, fs / 2.0)?;
        composite = composite.add(&noise)?;
    }

    let achieved_sinr_db = if spec.radar_present() {
        linear_to_db(radar_density / (cellular_density + noise_density))
    } else {
        f64::NEG_INFINITY
    };
    Ok(Mixture {
        iq: composite,
        achieved_sinr_db,
        radar_density,
        cellular_density,
        noise_density,
    })
}

// ---------------------------------------------------------------------------
// I/Q files
// ---------------------------------------------------------------------------

/// Sidecar metadata stored next to an I/Q file.
#[derive(Debug, Clone, PartialEq)]
pub struct IqMetadata {
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub sinr: SinrSpec,
    pub seed: u64,
}

/// Writes interleaved little-endian `f32` I/Q pairs plus `<path>.meta`.
pub fn write_iq(path: &Path, iq: &IqBuffer, meta: &IqMetadata) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in iq.samples() {
        out.write_all(&(s.re as f32).to_le_bytes())?;
        out.write_all(&(s.im as f32).to_le_bytes())?;
    }
    out.flush()?;
    keyvalue::write(
        &keyvalue::sidecar_path(path),
        &[
            ("sample_rate_hz", meta.sample_rate_hz.to_string()),
            ("duration_s", meta.duration_s.to_string()),
            ("p_radar_dbm_mhz", meta.sinr.p_radar_dbm_mhz.to_string()),
            ("p_cellular_dbm_mhz", meta.sinr.p_cellular_dbm_mhz.to_string()),
            ("p_noise_dbm_mhz", meta.sinr.p_noise_dbm_mhz.to_string()),
            ("seed", meta.seed.to_string()),
        ],
    )
}

pub fn read_iq(path: &Path) -> Result<(IqBuffer, IqMetadata)> {
    let record = keyvalue::Record::read(&keyvalue::sidecar_path(path))?;
    let meta = IqMetadata {
        sample_rate_hz: record.get("sample_rate_hz")?,
        duration_s: record.get("duration_s")?,
        sinr: SinrSpec {
            p_radar_dbm_mhz: record.get("p_radar_dbm_mhz")?,
            p_cellular_dbm_mhz: record.get("p_cellular_dbm_mhz")?,
            p_noise_dbm_mhz: record.get("p_noise_dbm_mhz")?,
        },
        seed: record.get("seed")?,
    };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(path, "length is not a whole number of I/Q pairs"));
    }
    let samples = bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    Ok((IqBuffer::new(samples, meta.sample_rate_hz)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = DEFAULT_SAMPLE_RATE_HZ;

    fn nonzero(iq: &IqBuffer) -> usize {
        iq.samples().iter().filter(|s| s.norm_sqr() > 0.0).count()
    }

    #[test]
    fn default_pulse_train_timing() {
        let params = RadarParams::default();
        let iq = gen_radar_pulse_train(&params, 10e-3, FS).unwrap();
        assert_eq!(iq.len(), 153_600);
        assert_eq!(nonzero(&iq), 5 * 200);
        let starts = params.pulse_starts(10e-3);
        assert_eq!(starts.len(), 5);
        for (k, t) in starts.iter().enumerate() {
            assert!((t - 2e-3 * k as f64).abs() < 1e-12);
            let idx = sample_count(*t, FS);
            assert!(iq.samples()[idx].norm_sqr() > 0.0);
            assert_eq!(iq.samples()[idx + 200].norm_sqr(), 0.0);
            if idx > 0 {
                assert_eq!(iq.samples()[idx - 1].norm_sqr(), 0.0);
            }
        }
    }

    #[test]
    fn empty_burst_is_silent() {
        let params = RadarParams {
            pulses_per_burst: 0,
            ..Default::default()
        };
        let iq = gen_radar_pulse_train(&params, 10e-3, FS).unwrap();
        assert_eq!(nonzero(&iq), 0);
    }

    #[test]
    fn radar_rejects_overfull_burst_and_aliasing() {
        let overfull = RadarParams {
            pulses_per_burst: 6,
            ..Default::default()
        };
        assert_eq!(
            gen_radar_pulse_train(&overfull, 10e-3, FS).unwrap_err().kind(),
            "invalid-params"
        );
        let aliased = RadarParams {
            center_offset_hz: 7.6e6,
            doppler_shift_hz: 0.1e6,
            ..Default::default()
        };
        assert!(gen_radar_pulse_train(&aliased, 10e-3, FS).is_err());
        assert!(gen_radar_pulse_train(&RadarParams::default(), 5e-3, FS).is_err());
    }

    #[test]
    fn sparsity_matches_duty_cycle() {
        let params = RadarParams {
            pulse_width_s: 52e-6,
            prr_hz: 1100.0,
            pulses_per_burst: 11,
            ..Default::default()
        };
        let iq = gen_radar_pulse_train(&params, 30e-3, FS).unwrap();
        let pulses = params.pulse_starts(30e-3).len();
        let frac = nonzero(&iq) as f64 / iq.len() as f64;
        let expected = params.duty_cycle();
        assert!((frac - expected).abs() * iq.len() as f64 <= pulses as f64);
    }

    #[test]
    fn cellular_all_inactive_is_zero() {
        let params = CellularParams::with_mask(vec![false; 50]);
        let iq = gen_cellular_baseband(&params, 1e-3, FS, 1).unwrap();
        assert_eq!(nonzero(&iq), 0);
    }

    #[test]
    fn cellular_total_power() {
        let iq = gen_cellular_baseband(&CellularParams::default(), 10e-3, FS, 7).unwrap();
        let measured = measure_band_power(&iq, -FS / 2.0, FS / 2.0).unwrap() * FS / 1e6;
        assert!((measured / 50.0 - 1.0).abs() < 0.02, "{measured}");
    }

    #[test]
    fn cellular_rejects_overflow() {
        let params = CellularParams {
            n_prbs: 100,
            active_prb_mask: vec![true; 100],
            ..Default::default()
        };
        assert!(gen_cellular_baseband(&params, 1e-3, FS, 1).is_err());
    }

    #[test]
    fn awgn_statistics_and_determinism() {
        assert_eq!(gen_awgn(0.0, 1e-3, FS, 3).unwrap().mean_power(), 0.0);
        let a = gen_awgn(1.0, 10e-3, FS, 11).unwrap();
        assert_eq!(a.len(), 153_600);
        let p = a.mean_power();
        assert!((0.99..=1.01).contains(&p), "{p}");
        assert_eq!(a, gen_awgn(1.0, 10e-3, FS, 11).unwrap());
        assert_ne!(a, gen_awgn(1.0, 10e-3, FS, 12).unwrap());
    }

    #[test]
    fn sinr_closed_form() {
        let anchor = SinrSpec {
            p_radar_dbm_mhz: -89.0,
            p_cellular_dbm_mhz: -109.0,
            p_noise_dbm_mhz: f64::NEG_INFINITY,
        };
        assert!((compute_sinr(&anchor) - 20.0).abs() < 1e-9);
        let equal = SinrSpec::for_target(0.0, -109.0);
        assert!(compute_sinr(&equal).abs() < 1e-9);
        let example = SinrSpec {
            p_radar_dbm_mhz: -97.0,
            p_cellular_dbm_mhz: -112.0,
            p_noise_dbm_mhz: -112.0,
        };
        // -97 - (-112 + 10 log10 2)
        assert!((compute_sinr(&example) - 11.989_700_043_360_19).abs() < 1e-9);
    }

    #[test]
    fn band_power_edges() {
        let zeros = IqBuffer::zeros(1024, FS).unwrap();
        assert_eq!(measure_band_power(&zeros, -1e6, 1e6).unwrap(), 0.0);
        assert_eq!(measure_band_power(&zeros, 8e6, 9e6).unwrap_err().kind(), "empty-band");
        assert!(measure_band_power(&zeros, 1e6, -1e6).is_err());
    }

    #[test]
    fn tone_band_power_is_parseval() {
        // Bin-centered tone: all power in one bin.
        let n = 4096;
        let f0 = 100.0 * FS / n as f64;
        let samples = (0..n)
            .map(|i| Complex64::from_polar(1.0, 2.0 * PI * f0 * i as f64 / FS))
            .collect();
        let iq = IqBuffer::new(samples, FS).unwrap();
        let density = measure_band_power(&iq, f0 - 0.5e6, f0 + 0.5e6).unwrap();
        assert!((density - 1.0).abs() < 1e-9);
        let elsewhere = measure_band_power(&iq, -3e6, -2e6).unwrap();
        assert!(elsewhere < 1e-20);
    }

    #[test]
    fn mix_without_radar_is_cellular_plus_noise() {
        let cell = gen_cellular_baseband(&CellularParams::default(), 2e-3, FS, 1).unwrap();
        let radar = IqBuffer::zeros(cell.len(), FS).unwrap();
        let spec = SinrSpec::for_target(0.0, -109.0).without_radar();
        let mix = mix_at_sinr(&radar, &cell, &spec, 5).unwrap();
        assert_eq!(mix.achieved_sinr_db, f64::NEG_INFINITY);
        assert_eq!(mix.radar_density, 0.0);
        let expected_cell = dbm_to_linear(-109.0) / 2.0;
        assert!((mix.cellular_density / expected_cell - 1.0).abs() < 0.01);
    }

    #[test]
    fn mix_rejects_silent_radar() {
        let cell = gen_cellular_baseband(&CellularParams::default(), 2e-3, FS, 1).unwrap();
        let radar = IqBuffer::zeros(cell.len(), FS).unwrap();
        let err = mix_at_sinr(&radar, &cell, &SinrSpec::for_target(4.0, -109.0), 5).unwrap_err();
        assert_eq!(err.kind(), "silent-component");
    }

    #[test]
    fn iq_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.iq");
        let iq = gen_awgn(1.0, 1e-4, FS, 9).unwrap();
        let meta = IqMetadata {
            sample_rate_hz: FS,
            duration_s: iq.duration_s(),
            sinr: SinrSpec::for_target(8.0, -109.0).without_radar(),
            seed: 9,
        };
        write_iq(&path, &iq, &meta).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), iq.len() as u64 * 8);
        let (back, back_meta) = read_iq(&path).unwrap();
        assert_eq!(back_meta, meta);
        for (a, b) in iq.samples().iter().zip(back.samples()) {
            assert!((a - b).norm() < 1e-6);
        }
    }
}

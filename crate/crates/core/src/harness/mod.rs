//! Scenario engine: dataset generation, model evaluation and the closed
//! control loop, all driven from seeded configuration.

pub mod bus;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod scenario;

pub use bus::{TelemetryBus, TelemetryKind, TelemetryMessage, TelemetryPayload};
pub use config::{read_toml, McsSettings, Policy, RadarInterval, ScenarioConfig, SinrStep};
pub use dataset::{
    gen_kpm_dataset, gen_spectrogram_dataset, mode2_stft_config, random_radar, synth_mode2_window, KpmSweep,
    Mode2Window, SpectrogramSweep,
};
pub use eval::{eval_detector, eval_localizer, kpm_training_windows, load_kpm_dir, DetectorRow, LocalizerRow};
pub use scenario::{run_scenario, run_scenario_with, ScenarioResult, ScenarioSummary, WindowTrace};

/// SplitMix64 finalizer; derives independent seeds from a base seed, a
/// stream tag and an index.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Formats an SINR for file names: `-4` becomes `m4`, `2.5` becomes `2p5`.
pub fn sinr_tag(sinr_db: f64) -> String {
    let s = format!("{sinr_db}");
    s.replace('-', "m").replace('.', "p")
}

/// Inverse of [`sinr_tag`].
pub fn parse_sinr_tag(tag: &str) -> Option<f64> {
    tag.replace('m', "-").replace('p', ".").parse().ok()
}

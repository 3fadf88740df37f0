use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use odss::control::{Command, Mode};
use odss::detect::{accuracy, train_detector, ClassifierModel, LabeledWindow, TrainConfig};
use odss::harness::*;
use odss::localize::{BoxClass, EnergyLocalizer};
use odss::signals::IqBuffer;

fn small_kpm_sweep() -> KpmSweep {
    KpmSweep {
        sinrs_db: vec![4.0, 8.0, 12.0],
        records_per_sinr: 1500,
        clean_records: 1500,
        ..Default::default()
    }
}

fn model() -> &'static ClassifierModel {
    static MODEL: OnceLock<ClassifierModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        gen_kpm_dataset(&small_kpm_sweep(), dir.path()).unwrap();
        let windows = kpm_training_windows(dir.path(), 4, 4.0).unwrap();
        train_detector(&windows, &TrainConfig::default()).unwrap().model
    })
}

fn short_config(policy: Policy) -> ScenarioConfig {
    let mut c = ScenarioConfig {
        duration_s: 1.0,
        policy,
        ..Default::default()
    };
    c.radar_schedule[0].t_on_s = 0.3;
    c.radar_schedule[0].t_off_s = 0.6;
    c
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn kpm_dataset_is_deterministic() {
    let sweep = KpmSweep {
        records_per_sinr: 300,
        clean_records: 200,
        ..Default::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files = gen_kpm_dataset(&sweep, a.path()).unwrap();
    assert_eq!(files.len(), 6);
    gen_kpm_dataset(&sweep, b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    let loaded = load_kpm_dir(a.path()).unwrap();
    assert_eq!(loaded[0].0, None);
    assert!(loaded[0].1.iter().all(|r| r.label == 0));
    let with_radar = &loaded.iter().find(|(s, _)| *s == Some(8.0)).unwrap().1;
    assert!(with_radar.iter().any(|r| r.label == 1));
    assert!(with_radar.iter().any(|r| r.label == 0));
}

#[test]
fn spectrogram_dataset_is_deterministic_and_truth_is_centered() {
    let sweep = SpectrogramSweep {
        sinrs_db: vec![8.0],
        per_sinr: 6,
        clean: 2,
        ..Default::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(gen_spectrogram_dataset(&sweep, a.path()).unwrap(), 8);
    gen_spectrogram_dataset(&sweep, b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    for (sinr, i) in sweep.slots() {
        let s = sweep.sample(sinr, i).unwrap();
        assert_eq!(s.spectrogram.freq_bins(), 1024);
        match sinr {
            None => assert!(s.truth.is_empty()),
            Some(_) => {
                assert!(!s.truth.is_empty());
                for t in &s.truth {
                    assert_eq!(t.class, BoxClass::Radar);
                    let center = (t.f_low_hz + t.f_high_hz) / 2.0;
                    assert!(
                        sweep
                            .center_offsets_hz
                            .iter()
                            .any(|&o| (center - o).abs() < 1e-6 * o.abs().max(1.0)),
                        "{center}"
                    );
                }
            }
        }
    }

    let rows = eval_localizer(&EnergyLocalizer::default(), a.path(), 0.5).unwrap();
    assert_eq!(rows.iter().map(|r| r.spectrograms).sum::<usize>(), 8);
}

#[test]
fn sinr_tags_round_trip() {
    for s in [-4.0, 0.0, 4.5, 12.0] {
        assert_eq!(parse_sinr_tag(&sinr_tag(s)), Some(s));
    }
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_kpm_dir(&dir.path().join("nope")),
        Err(odss::Error::MissingData(_))
    ));
    assert!(matches!(load_kpm_dir(dir.path()), Err(odss::Error::MissingData(_))));
    assert!(matches!(
        eval_localizer(&EnergyLocalizer::default(), dir.path(), 0.5),
        Err(odss::Error::MissingData(_))
    ));
    assert!(matches!(
        run_scenario(&short_config(Policy::Full), None),
        Err(odss::Error::MissingModel)
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        "duration_s = -1.0",
        "n_stack = 0",
        "telemetry_period_s = 0.0",
        "policy = \"sometimes\"",
        "offered_load_mbps = [5.0, 1.0]",
    ] {
        assert!(
            matches!(ScenarioConfig::from_toml_str(bad), Err(odss::Error::InvalidConfig(_))),
            "{bad}"
        );
    }
}

#[test]
fn config_toml_round_trip_and_relative_model_path() {
    let c = ScenarioConfig::default();
    let text = c.to_toml_string().unwrap();
    assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), c);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.toml");
    fs::write(
        &path,
        "duration_s = 4.0\npolicy = \"blanking_only\"\nmodel_path = \"m.json\"\n",
    )
    .unwrap();
    let loaded = ScenarioConfig::load(&path).unwrap();
    assert_eq!(loaded.duration_s, 4.0);
    assert_eq!(loaded.policy, Policy::BlankingOnly);
    assert_eq!(loaded.model_path.as_deref(), Some(dir.path().join("m.json").as_path()));
    assert_eq!(loaded.windows(), 400);
}

#[test]
fn bus_keeps_publish_order_and_rejects_time_travel() {
    let mut bus = TelemetryBus::new();
    let rec = |t: f64| odss::ranlink::KpmRecord {
        t_s: t,
        throughput_mbps: 1.0,
        bler_pct: 0.0,
        mcs: 28,
        bsr_bytes: 0,
        sinr_db: 20.0,
    };
    let iq = std::sync::Arc::new(IqBuffer::zeros(16, 1e6).unwrap());
    bus.publish(TelemetryMessage::kpm(rec(0.0))).unwrap();
    bus.publish(TelemetryMessage::iq(0.0, iq.clone())).unwrap();
    bus.publish(TelemetryMessage::kpm(rec(0.01))).unwrap();
    assert!(bus.publish(TelemetryMessage::kpm(rec(0.005))).is_err());
    // Streams are ordered independently.
    bus.publish(TelemetryMessage::iq(0.0, iq)).unwrap();
    let kinds: Vec<TelemetryKind> = std::iter::from_fn(|| bus.poll()).map(|m| m.kind()).collect();
    assert_eq!(
        kinds,
        [
            TelemetryKind::Kpm,
            TelemetryKind::IqWindow,
            TelemetryKind::Kpm,
            TelemetryKind::IqWindow
        ]
    );
    assert!(bus.is_empty());
}

#[test]
fn baseline_without_radar_is_clean() {
    let mut c = short_config(Policy::Baseline);
    c.radar_schedule.clear();
    c.sinr_schedule[0].sinr_db = 12.0;
    let r = run_scenario(&c, None).unwrap();
    assert_eq!(r.windows.len(), 100);
    assert!(r.summary.mean_bler_pct < 0.5, "{}", r.summary.mean_bler_pct);
    assert!(r.commands.is_empty());
    assert!(r.windows.iter().all(|w| w.mcs == 28 && w.mode == Mode::Mode1));
}

#[test]
fn scenario_outputs_are_deterministic() {
    let c = short_config(Policy::Full);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_scenario(&c, Some(model()))
        .unwrap()
        .write_outputs(a.path())
        .unwrap();
    run_scenario(&c, Some(model()))
        .unwrap()
        .write_outputs(b.path())
        .unwrap();
    let strip =
        |d: &Path| -> Vec<(String, Vec<u8>)> { dir_bytes(d).into_iter().filter(|(n, _)| n != "latency.txt").collect() };
    let (x, y) = (strip(a.path()), strip(b.path()));
    assert_eq!(x.len(), 4);
    assert_eq!(x, y);
}

#[test]
fn closed_loop_is_causal_and_evacuates() {
    let c = short_config(Policy::Full);
    let r = run_scenario(&c, Some(model())).unwrap();
    let ts = c.telemetry_period_s;
    let on = c.radar_schedule[0].t_on_s;

    // Nothing is blanked or requested before the radar appears, and
    // blanking takes at least two windows from onset.
    for w in &r.windows {
        if w.t_s < on + 2.0 * ts - 1e-9 {
            assert!(w.blanked_prbs.is_empty(), "t = {}", w.t_s);
        }
    }
    for cmd in &r.commands {
        if matches!(cmd.command, Command::RequestIq | Command::Blank { .. }) {
            assert!(cmd.t_s >= on - 1e-9, "{cmd:?}");
        }
    }

    let d = &r.summary.intervals[0];
    assert!(d.detection_delay_s.unwrap() <= 2.0 * ts + 1e-9, "{d:?}");
    assert!(d.evacuation_delay_s.unwrap() <= 3.0 * ts + 1e-9, "{d:?}");
    assert!(d.restore_delay_s.unwrap() <= 3.0 * ts + 1e-9, "{d:?}");

    // Once evacuated, every radar PRB stays blanked until the radar leaves.
    let evac = on + d.evacuation_delay_s.unwrap();
    for w in r.windows.iter().filter(|w| w.radar_on && w.t_s >= evac - 1e-9) {
        assert!(w.truth_prbs.is_subset(&w.blanked_prbs), "t = {}", w.t_s);
    }
}

#[test]
fn sensing_beats_baseline() {
    let bler = |p: Policy| {
        run_scenario(&short_config(p), Some(model()))
            .unwrap()
            .summary
            .mean_bler_pct
    };
    let (base, blank, full) = (bler(Policy::Baseline), bler(Policy::BlankingOnly), bler(Policy::Full));
    assert!(base > blank, "{base} {blank}");
    assert!(blank >= full, "{blank} {full}");
}

#[test]
fn model_window_must_match_scenario() {
    let mut c = short_config(Policy::Full);
    c.n_stack = 2;
    assert!(matches!(
        run_scenario(&c, Some(model())),
        Err(odss::Error::InvalidConfig(_))
    ));
}

#[test]
fn training_accuracy_is_not_below_held_out() {
    let dir = tempfile::tempdir().unwrap();
    gen_kpm_dataset(&small_kpm_sweep(), dir.path()).unwrap();
    let windows = kpm_training_windows(dir.path(), 2, 4.0).unwrap();
    let t = train_detector(&windows, &TrainConfig::default()).unwrap();
    assert!(t.train_accuracy + 1e-9 >= t.validation_accuracy - 0.01);
    let all: Vec<&LabeledWindow> = windows.iter().collect();
    assert!(accuracy(&t.model, &all).unwrap() > 0.9);
    let rows = eval_detector(&t.model, dir.path()).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].sinr_db, None);
}

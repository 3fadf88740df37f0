use std::collections::BTreeSet;
use std::time::Duration;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use odss::control::*;
use odss::detect::Detection;
use odss::localize::{BoxClass, FreqTimeBox};
use odss::ranlink::LinkConfig;

/// The AIMD rule transcribed line by line, returning the updated MCS.
fn aimd_oracle(mcs: i64, bler: f64, bler_prev: f64, gamma: f64, beta: i64, thresh: f64) -> (i64, f64, &'static str) {
    let mcs_max = 28;
    let mcs_min = 0;
    if (bler - bler_prev).abs() < gamma {
        return (mcs, bler_prev, "HOLD");
    }
    if bler > thresh {
        let next = std::cmp::max(mcs.div_euclid(beta), mcs_min);
        (next, bler, "DECR")
    } else {
        let next = std::cmp::min(mcs + beta, mcs_max);
        (next, bler, "INCR")
    }
}

fn action_name(a: McsAction) -> &'static str {
    match a {
        McsAction::Incr => "INCR",
        McsAction::Decr => "DECR",
        McsAction::Hold => "HOLD",
    }
}

#[test]
fn mcs_update_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10_000 {
        let beta = rng.random_range(2u8..=4);
        let gamma = [0.0, 0.5, 1.0, 2.0][rng.random_range(0..4)];
        let thresh = rng.random_range(1.0..20.0);
        let mut state = McsControllerState {
            mcs: rng.random_range(0..=28),
            gamma,
            beta,
            bler_thresh: thresh,
            ..Default::default()
        };
        let (mut mcs, mut prev) = (state.mcs as i64, state.bler_prev);
        for _ in 0..rng.random_range(1..40) {
            // Mix of coarse jumps and small drifts so HOLD is exercised.
            let bler: f64 = if rng.random_bool(0.3) {
                (prev + rng.random_range(-1.5..1.5)).clamp(0.0, 100.0)
            } else {
                (rng.random_range(0..1000) as f64) / 10.0
            };
            let (m, p, act) = aimd_oracle(mcs, bler, prev, gamma, beta as i64, thresh);
            let next = mcs_update(&state, bler).unwrap();
            assert_eq!(next.mcs as i64, m);
            assert_eq!(next.bler_prev, p);
            assert_eq!(action_name(next.last_action), act);
            state = next;
            mcs = m;
            prev = p;
        }
    }
}

#[test]
fn mcs_update_examples() {
    let s = McsControllerState {
        mcs: 20,
        bler_prev: 2.0,
        ..Default::default()
    };
    let h = mcs_update(&s, 2.5).unwrap();
    assert_eq!((h.mcs, h.last_action), (20, McsAction::Hold));
    let d = mcs_update(&s, 10.0).unwrap();
    assert_eq!((d.mcs, d.last_action, d.bler_prev), (10, McsAction::Decr, 10.0));
    let s = McsControllerState {
        mcs: 27,
        bler_prev: 9.0,
        ..Default::default()
    };
    let i = mcs_update(&s, 1.0).unwrap();
    assert_eq!((i.mcs, i.last_action), (28, McsAction::Incr));
    assert!(matches!(mcs_update(&s, 100.5), Err(odss::Error::OutOfRange(_))));
    assert!(matches!(mcs_update(&s, f64::NAN), Err(odss::Error::OutOfRange(_))));
}

#[test]
fn mcs_never_leaves_bounds() {
    for mcs in 0..=28u8 {
        for prev in (0..=1000).step_by(50) {
            for b in 0..=1000 {
                let s = McsControllerState {
                    mcs,
                    bler_prev: prev as f64 / 10.0,
                    ..Default::default()
                };
                let n = mcs_update(&s, b as f64 / 10.0).unwrap();
                assert!(n.mcs <= 28);
            }
        }
    }
}

#[test]
fn sustained_failure_reaches_minimum_in_five_updates() {
    let bound = (29f64.ln() / 2f64.ln()).ceil() as usize;
    assert_eq!(bound, 5);
    let mut s = McsControllerState::default();
    let mut steps = 0;
    let mut bler = 10.0;
    while s.mcs > 0 {
        s = mcs_update(&s, bler).unwrap();
        bler += 1.0;
        steps += 1;
        assert!(steps <= bound);
    }
    assert_eq!(s.mcs, 0);
}

fn link() -> LinkConfig {
    LinkConfig::default()
}

/// Every PRB whose half-open span meets the half-open extent, dilated.
fn brute_force(lo: f64, hi: f64, guard: usize) -> BTreeSet<usize> {
    let l = link();
    let bw = l.prb_bandwidth_hz;
    let band_low = -(l.n_prbs as f64) * bw / 2.0;
    let hits: Vec<usize> = (0..l.n_prbs)
        .filter(|&i| {
            let a = band_low + i as f64 * bw;
            let b = band_low + (i + 1) as f64 * bw;
            a < hi && lo < b
        })
        .collect();
    let mut out = BTreeSet::new();
    for i in hits {
        for j in i.saturating_sub(guard)..=(i + guard).min(l.n_prbs - 1) {
            out.insert(j);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn prb_mapping_matches_brute_force(a in -4.6e6f64..4.6e6, w in 1.0f64..3e6, guard in 0usize..3) {
        let got = map_extent_to_prbs((a, a + w), &link(), guard).unwrap();
        prop_assert_eq!(got, brute_force(a, a + w, guard));
    }

    #[test]
    fn prb_mapping_on_grid_edges(i in 0usize..50, j in 0usize..50, guard in 0usize..3) {
        let (i, j) = (i.min(j), i.max(j));
        let l = link();
        let lo = l.prb_span(i).0;
        let hi = l.prb_span(j).1;
        let got = map_extent_to_prbs((lo, hi), &l, guard).unwrap();
        prop_assert_eq!(got, brute_force(lo, hi, guard));
    }
}

#[test]
fn prb_mapping_examples() {
    let l = link();
    let all = map_extent_to_prbs((-4.5e6, 4.5e6), &l, 0).unwrap();
    assert_eq!(all, (0..50).collect());
    let (a, b) = l.prb_span(10);
    assert_eq!(map_extent_to_prbs((a, b), &l, 0).unwrap(), [10].into());
    assert_eq!(map_extent_to_prbs((b - 1.0, b + 1.0), &l, 0).unwrap(), [10, 11].into());
    assert!(matches!(
        map_extent_to_prbs((1e6, 1e6), &l, 0),
        Err(odss::Error::EmptyExtent(..))
    ));
}

fn det(present: bool) -> Detection {
    Detection {
        radar_present: present,
        confidence: 0.9,
        p_radar: if present { 0.9 } else { 0.1 },
    }
}

fn radar_box(lo: f64, hi: f64) -> FreqTimeBox {
    FreqTimeBox::new(lo, hi, 0.0, 0.01, BoxClass::Radar, 0.9).unwrap()
}

#[test]
fn mode_walkthrough() {
    let l = link();
    let s0 = ModeState::default();
    let (s, c) = mode_step(&s0, &det(false), None, &l, 0).unwrap();
    assert_eq!((s.mode, c.len()), (Mode::Mode1, 0));

    let (s1, c) = mode_step(&s0, &det(true), None, &l, 0).unwrap();
    assert_eq!((s1.mode, c), (Mode::Mode2, vec![Command::RequestIq]));

    let lo = l.prb_span(24).0 + 1.0;
    let hi = l.prb_span(26).1 - 1.0;
    let boxes = [radar_box(lo, hi)];
    let (s2, c) = mode_step(&s1, &det(false), Some(&boxes), &l, 0).unwrap();
    assert_eq!(s2.mode, Mode::Mode2);
    assert_eq!(
        c,
        vec![Command::Blank {
            prbs: [24, 25, 26].into()
        }]
    );

    // Detector still firing but no box: hold the mask.
    let (s3, c) = mode_step(&s2, &det(true), Some(&[]), &l, 0).unwrap();
    assert_eq!((s3.mode, c.len()), (Mode::Mode2, 0));
    assert_eq!(s3.blanked_prbs, s2.blanked_prbs);

    let (s4, c) = mode_step(&s3, &det(false), Some(&[]), &l, 0).unwrap();
    assert_eq!(s4.mode, Mode::Mode1);
    assert!(s4.blanked_prbs.is_empty());
    assert_eq!(c, vec![Command::UnblankAll, Command::StopIq]);

    assert!(matches!(
        mode_step(&s0, &det(true), Some(&boxes), &l, 0),
        Err(odss::Error::ProtocolViolation(_))
    ));
}

proptest! {
    #[test]
    fn blanking_covers_every_radar_prb(
        boxes in prop::collection::vec((-4.4e6f64..4.4e6, 1e3f64..1e6), 1..4),
        guard in 0usize..3,
    ) {
        let l = link();
        let mut state = ModeState { mode: Mode::Mode2, ..Default::default() };
        let boxes: Vec<FreqTimeBox> = boxes.iter().map(|&(f, w)| radar_box(f, (f + w).min(4.5e6))).collect();
        let (next, _) = mode_step(&state, &det(true), Some(&boxes), &l, guard).unwrap();
        for b in &boxes {
            for p in brute_force(b.f_low_hz, b.f_high_hz, 0) {
                prop_assert!(next.blanked_prbs.contains(&p));
            }
        }
        state = next;
        // Two windows of absence return to Mode 1 with nothing blanked.
        let (a, _) = mode_step(&state, &det(false), Some(&[]), &l, guard).unwrap();
        let (b, _) = match a.mode {
            Mode::Mode2 => mode_step(&a, &det(false), Some(&[]), &l, guard).unwrap(),
            Mode::Mode1 => mode_step(&a, &det(false), None, &l, guard).unwrap(),
        };
        prop_assert_eq!(b.mode, Mode::Mode1);
        prop_assert!(b.blanked_prbs.is_empty());
    }
}

#[test]
fn command_log_format() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let recs = vec![
        CommandRecord {
            t_s: 0.02,
            command: Command::RequestIq,
        },
        CommandRecord {
            t_s: 0.03,
            command: Command::Blank { prbs: [3, 4].into() },
        },
        CommandRecord {
            t_s: 0.03,
            command: Command::SetMcs { mcs: 14 },
        },
    ];
    write_command_log(&path, &recs).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], r#"{"t_s":0.02,"kind":"REQUEST_IQ"}"#);
    assert_eq!(lines[1], r#"{"t_s":0.03,"kind":"BLANK","payload":{"prbs":[3,4]}}"#);
    assert_eq!(read_command_log(&path).unwrap(), recs);
}

#[test]
fn ledger_totals() {
    let mut l = LatencyLedger::new();
    assert_eq!(l.total(Mode::Mode1), Duration::ZERO);
    let ms = |v: f64| Duration::from_secs_f64(v / 1e3);
    l.record_stage(Mode::Mode1, Stage::TelemetryIngest, ms(11.0));
    l.record_stage(Mode::Mode1, Stage::PreprocInferencePolicy, ms(45.0));
    l.record_stage(Mode::Mode1, Stage::ControlDispatch, ms(0.07));
    assert!((l.total(Mode::Mode1).as_secs_f64() * 1e3 - 56.07).abs() < 1e-6);
    l.record_stage(Mode::Mode2, Stage::SpectrogramBuild, ms(450.0));
    l.record_stage(Mode::Mode2, Stage::LocalizationInference, ms(200.0));
    l.record_stage(Mode::Mode2, Stage::ControlDispatch, ms(0.07));
    l.record_stage(Mode::Mode2, Stage::SpectrumControl, ms(12.0));
    assert!((l.total(Mode::Mode2).as_secs_f64() * 1e3 - 662.07).abs() < 1e-6);
    let report = l.report();
    assert!(report.contains("not modeled"));
    assert!(report.contains("Total time"));
}

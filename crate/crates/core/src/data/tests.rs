use approx::assert_abs_diff_eq;
use rand::Rng;
use rand_distr::{Distribution, Exp};

use super::*;

fn csv(text: &str) -> Result<Dataset> {
    read_csv(text.as_bytes())
}

#[test]
fn reads_well_formed_file() {
    let ds = csv("date,a,b\n2020-01-01 00:00:00,1,2\n2020-01-01 01:00:00,3,4\n2020-01-01 02:00:00,5,6\n").unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.channels(), 2);
    assert_eq!(ds.channels, vec!["a", "b"]);
    assert_eq!(ds.frequency.to_string(), "1h");
    assert_eq!(ds.values.get(2, 1), 6.0);
}

#[test]
fn empty_cell_is_missing() {
    let ds = csv("date,a,b\n0,1,\n60,3,4\n120,5,6\n").unwrap();
    assert!(ds.values.get(0, 1).is_nan());
    assert_eq!(ds.values.get(0, 0), 1.0);
    assert_eq!(ds.values.get(1, 1), 4.0);
    assert!(ds.row_observed(0));
}

#[test]
fn parse_errors_carry_line_numbers() {
    match csv("date,a\n0,1\n60,x\n") {
        Err(UfoError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
    match csv("date,a\n0,1\n60,2\n60,3\n") {
        Err(UfoError::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("unexpected {other:?}"),
    }
    match csv("date,a\nyesterday,1\n") {
        Err(UfoError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn infers_fifteen_minute_frequency() {
    let mut text = String::from("date,OT\n");
    let start = chrono::NaiveDate::from_ymd_opt(2016, 7, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    for i in 0..96 {
        // one irregular gap does not change the mode
        let extra = if i >= 50 { 15 } else { 0 };
        let t = start + chrono::Duration::minutes(15 * i + extra);
        text.push_str(&format!("{},{}\n", t.format("%Y-%m-%d %H:%M:%S"), i));
    }
    let ds = csv(&text).unwrap();
    assert_eq!(ds.len(), 96);
    assert_eq!(ds.frequency.to_string(), "15m");
}

#[test]
fn csv_round_trip() {
    let spec = SynthSpec {
        kind: SynthKind::SineMix,
        rows: 50,
        channels: 2,
        seed: 3,
        noise: 0.1,
    };
    let ds = synth_dataset(&spec).unwrap();
    let inj = inject_block_missing(&ds, 0.3, 1).unwrap();
    let mut buf = Vec::new();
    write_csv(&inj.dataset, &mut buf).unwrap();
    let back = read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.timestamps, ds.timestamps);
    for (a, b) in back.values.data().iter().zip(inj.dataset.values.data()) {
        assert!(a == b || (a.is_nan() && b.is_nan()));
    }
}

#[test]
fn covariates_known_phases() {
    let midnight = 1_577_836_800; // 2020-01-01T00:00Z
    let c = time_covariates(&[midnight, midnight + 43_200, midnight + DAY_SECONDS]).values;
    assert_abs_diff_eq!(c.get(0, 0), 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(c.get(0, 1), 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(c.get(1, 0), 0.0, epsilon = 1e-9);
    assert_abs_diff_eq!(c.get(1, 1), -1.0, epsilon = 1e-9);
    assert_abs_diff_eq!(c.get(2, 0), c.get(0, 0), epsilon = 1e-9);
    assert_abs_diff_eq!(c.get(2, 1), c.get(0, 1), epsilon = 1e-9);
    for r in 0..3 {
        for k in 0..4 {
            let (s, co) = (c.get(r, 2 * k), c.get(r, 2 * k + 1));
            assert!((s * s + co * co - 1.0).abs() < 1e-6);
        }
    }
}

fn ten_days() -> Dataset {
    synth_dataset(&SynthSpec {
        kind: SynthKind::SineMix,
        rows: 240,
        channels: 2,
        seed: 5,
        noise: 0.1,
    })
    .unwrap()
}

#[test]
fn injection_removes_whole_days() {
    let ds = ten_days();
    assert_eq!(inject_block_missing(&ds, 0.0, 1).unwrap().dataset, ds);
    let inj = inject_block_missing(&ds, 0.3, 9).unwrap();
    assert_eq!(inj.removed_days.len(), 3);
    for i in 0..ds.len() {
        let removed = inj.removed_days.contains(&ds.day(i));
        assert_eq!(!inj.dataset.row_observed(i), removed);
        if !removed {
            assert_eq!(inj.dataset.values.row(i), ds.values.row(i));
        }
    }
    let again = inject_block_missing(&ds, 0.3, 9).unwrap();
    assert_eq!(again.removed_days, inj.removed_days);
    let bits = |d: &Dataset| d.values.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&again.dataset), bits(&inj.dataset));
    assert_ne!(inject_block_missing(&ds, 0.3, 10).unwrap().removed_days, inj.removed_days);
    assert!(inject_block_missing(&ds, 1.0, 1).is_err());
    let one_day = Dataset::new(vec![0, 3600], DenseArray::zeros(2, 1), vec!["a".into()]).unwrap();
    assert!(matches!(inject_block_missing(&one_day, 0.3, 1), Err(UfoError::Config(_))));
}

#[test]
fn forward_fill_carries_mask() {
    let ds = ten_days();
    let inj = inject_block_missing(&ds, 0.3, 2).unwrap();
    let (filled, mask) = inj.dataset.forward_filled();
    assert!(filled.values.data().iter().all(|v| v.is_finite()));
    for i in 1..ds.len() {
        if !mask[i] {
            assert_eq!(filled.values.row(i), filled.values.row(i - 1));
        }
    }
}

#[test]
fn gap_cv_examples() {
    assert_eq!(gap_cv(&[0.0, 1.0, 2.0, 3.0]).unwrap(), 0.0);
    assert_abs_diff_eq!(gap_cv(&[0.0, 1.0, 4.0]).unwrap(), 0.5, epsilon = 1e-15);
    assert!(gap_cv(&[0.0, 1.0]).is_err());
    let mut rng = crate::tensorops::stream("cv-exp", 1);
    let exp = Exp::new(1.0).unwrap();
    let mut t = 0.0;
    let times: Vec<f64> = (0..100_001)
        .map(|_| {
            t += exp.sample(&mut rng);
            t
        })
        .collect();
    assert!((gap_cv(&times).unwrap() - 1.0).abs() < 0.02);
}

#[test]
fn level_grids_shapes() {
    let times: Vec<f64> = (0..16).map(f64::from).collect();
    let grids = build_level_grids(&times, &[true; 16], 4, 2).unwrap();
    assert_eq!(level_sizes(&grids), vec![16, 4, 1]);
    for (a, b) in grids[0].patch_bounds() {
        assert_eq!(b - a, 3.0);
    }
    let mut mask = [true; 16];
    for i in [1, 6, 7, 12] {
        mask[i] = false;
    }
    let grids = build_level_grids(&times, &mask, 4, 1).unwrap();
    assert_eq!(grids[0].num_patches(), 3);
    assert!(matches!(build_level_grids(&times[..3], &[true; 3], 2, 2), Err(UfoError::Config(_))));
    // left truncation keeps the most recent observations
    let grids = build_level_grids(&times[..7], &[true; 7], 2, 1).unwrap();
    assert_eq!(grids[0].fine_times(), &times[1..7]);
}

#[test]
fn synthetic_sine_mix_replays_closed_form() {
    let spec = SynthSpec {
        kind: SynthKind::SineMix,
        rows: 300,
        channels: 3,
        seed: 7,
        noise: 0.0,
    };
    let ds = synth_dataset(&spec).unwrap();
    assert_eq!(ds, synth_dataset(&spec).unwrap());
    let params = synth_channel_params(7, 3);
    for i in 0..300 {
        for (j, p) in params.iter().enumerate() {
            let t = i as f64;
            let want = p.offset
                + p.daily_amp * (std::f64::consts::TAU * t / 24.0 + p.daily_phase).sin()
                + p.weekly_amp * (std::f64::consts::TAU * t / 168.0 + p.weekly_phase).sin();
            assert_abs_diff_eq!(ds.values.get(i, j), want, epsilon = 1e-12);
        }
    }
}

#[test]
fn synthetic_bimodal_has_two_separated_modes() {
    let noise = 0.1;
    let spec = SynthSpec {
        kind: SynthKind::Bimodal,
        rows: 10_000,
        channels: 1,
        seed: 8,
        noise,
    };
    let ds = synth_dataset(&spec).unwrap();
    let p = synth_channel_params(8, 1)[0];
    let resid: Vec<f64> = (0..ds.len()).map(|i| ds.values.get(i, 0) - p.seasonal(i as f64)).collect();
    let upper: Vec<f64> = resid.iter().copied().filter(|r| *r > 0.0).collect();
    let lower: Vec<f64> = resid.iter().copied().filter(|r| *r <= 0.0).collect();
    assert!(upper.len() > 3000 && lower.len() > 3000);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&upper) - mean(&lower) > 4.0 * noise);
    // the valley between the modes is nearly empty
    let valley = resid.iter().filter(|r| r.abs() < 0.5).count();
    assert!(valley < 10, "{valley}");
}

#[test]
fn synthetic_kinds_parse() {
    assert_eq!("ou-process".parse::<SynthKind>().unwrap(), SynthKind::OuProcess);
    assert!("brownian".parse::<SynthKind>().is_err());
    let ds = synth_dataset(&SynthSpec {
        kind: SynthKind::OuProcess,
        rows: 100,
        channels: 2,
        seed: 1,
        noise: 0.05,
    })
    .unwrap();
    assert!(ds.values.is_finite());
}

#[test]
fn windows_cover_test_split_without_overlap() {
    let ds = synth_dataset(&SynthSpec {
        kind: SynthKind::SineMix,
        rows: 1000,
        channels: 2,
        seed: 2,
        noise: 0.1,
    })
    .unwrap();
    let [_, _, test] = split_ranges(ds.len());
    let spec = WindowSpec {
        context: 32,
        horizon: 16,
        stride: 16,
        mode: ContextMode::Regular,
    };
    let wins = make_windows(&ds, &ds, &spec, test, 0).unwrap();
    assert_eq!(wins.len(), (test.end - test.start) / 16);
    for (k, w) in wins.iter().enumerate() {
        assert_eq!(w.anchor, test.start + 16 * k);
        assert!(w.context_times.iter().all(|t| *t < 0.0));
        assert_eq!(w.horizon_times[0], 0.0);
        assert_eq!(w.context_times[31], -1.0);
        assert_eq!(w.horizon_values.row(0), ds.values.row(w.anchor));
        assert!(w.context_covariates.data().iter().all(|v| v.abs() <= 1.0));
    }
}

#[test]
fn observed_mode_skips_removed_days() {
    let ds = ten_days();
    let inj = inject_block_missing(&ds, 0.3, 4).unwrap();
    let spec = WindowSpec {
        context: 48,
        horizon: 24,
        stride: 24,
        mode: ContextMode::Observed,
    };
    let wins = make_windows(&ds, &inj.dataset, &spec, SplitRange { start: 0, end: 240 }, 0).unwrap();
    assert!(!wins.is_empty());
    for w in &wins {
        assert!(w.context_mask.iter().all(|m| *m));
        assert!(w.context_values.data().iter().all(|v| v.is_finite()));
        assert!(w.context_times.windows(2).all(|p| p[1] > p[0]));
        // truth comes from the untouched series even on removed days
        assert_eq!(w.horizon_values.row(0), ds.values.row(w.anchor));
    }
    let regular = WindowSpec {
        mode: ContextMode::Regular,
        ..spec
    };
    let wins = make_windows(&ds, &inj.dataset, &regular, SplitRange { start: 0, end: 240 }, 0).unwrap();
    assert!(wins.iter().any(|w| w.context_mask.iter().any(|m| !m)));
}

#[test]
fn regular_mode_skips_fully_missing_contexts() {
    let ds = ten_days();
    let inj = inject_block_missing(&ds, 0.3, 4).unwrap();
    let spec = WindowSpec {
        context: 12,
        horizon: 12,
        stride: 12,
        mode: ContextMode::Regular,
    };
    let wins = make_windows(&ds, &inj.dataset, &spec, SplitRange { start: 0, end: 240 }, 0).unwrap();
    // half-day contexts inside a removed day hold no observation
    let blind = (1..20)
        .filter(|k| (k * 12 - 12..k * 12).all(|i| !inj.dataset.row_observed(i)))
        .count();
    assert!(blind > 0);
    assert_eq!(wins.len(), 19 - blind);
    assert!(wins.iter().all(|w| w.context_mask.iter().any(|m| *m)));
}

#[test]
fn lemma_strided_cv_contracts() {
    let mut rng = crate::tensorops::stream("lemma", 3);
    let n = 100_000;
    let gaps: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
    let alpha = 1.0 / 3f64.sqrt();
    for s in [2usize, 4, 8] {
        let mut t = 0.0;
        let mut times = vec![0.0];
        for chunk in gaps.chunks_exact(s) {
            t += chunk.iter().sum::<f64>();
            times.push(t);
        }
        let cv = gap_cv(&times).unwrap();
        let want = alpha / (s as f64).sqrt();
        assert!((cv - want).abs() < 0.05 * want, "s={s}: {cv} vs {want}");
    }
}

#[test]
fn future_window_continues_the_calendar() {
    let ds = ten_days();
    let spec = WindowSpec {
        context: 48,
        horizon: 24,
        stride: 24,
        mode: ContextMode::Regular,
    };
    let w = future_window(&ds, 48, 24, ContextMode::Regular).unwrap();
    assert_eq!(w.anchor, 240);
    assert_eq!(w.horizon_timestamps[0], ds.timestamps[239] + 3600);
    assert_eq!(w.context_times[47], -1.0);
    assert!(w.horizon_values.data().iter().all(|v| v.is_nan()));
    // the context matches the last regular window's context shifted by a day
    let last = make_windows(&ds, &ds, &spec, SplitRange { start: 0, end: 240 }, 0).unwrap().pop().unwrap();
    assert_eq!(last.anchor, 216);
    assert_eq!(w.context_values.row(0), ds.values.row(192));
    assert!(matches!(future_window(&ds, 500, 24, ContextMode::Regular), Err(UfoError::Config(_))));
    let inj = inject_block_missing(&ds, 0.3, 4).unwrap();
    let obs = future_window(&inj.dataset, 48, 24, ContextMode::Observed).unwrap();
    assert!(obs.context_mask.iter().all(|m| *m));
}

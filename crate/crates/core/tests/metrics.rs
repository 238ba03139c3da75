use proptest::prelude::*;
use spatial_memory::metrics::{
    aggregate, compute_metrics, first_fixation_time, grasp_attempts, head_path_length, time_to_grasp, to_csv,
    viewpoint_corrections, EpisodeEvent, EpisodeLog, EventKind, MetricsReport, StepLog, DEFAULT_DEADBAND,
};

fn log(poses: &[(f64, f64)], vis: Option<usize>, events: &[(u64, EventKind)]) -> EpisodeLog {
    EpisodeLog {
        steps: poses
            .iter()
            .enumerate()
            .map(|(i, &(pan, tilt))| StepLog { t: i as u64, pan, tilt, target_visible: vis.is_some_and(|v| i >= v) })
            .collect(),
        events: events.iter().map(|&(t, kind)| EpisodeEvent { t, kind }).collect(),
        step_duration: 0.1,
    }
}

fn still(n: usize) -> Vec<(f64, f64)> {
    vec![(0.0, 0.0); n]
}

#[test]
fn head_path_examples() {
    let l = log(&[(0.0, 0.0), (10.0, 0.0), (20.0, 5.0)], Some(2), &[]);
    assert_eq!(head_path_length(&l), Some(25.0));
    assert_eq!(head_path_length(&log(&[(5.0, 1.0), (9.0, 9.0)], Some(0), &[])), Some(0.0));
    assert_eq!(head_path_length(&log(&still(8), Some(5), &[])), Some(0.0));
    assert_eq!(head_path_length(&log(&still(8), None, &[])), None);
    // Motion after visibility does not count.
    assert_eq!(head_path_length(&log(&[(0.0, 0.0), (3.0, 0.0), (50.0, 50.0)], Some(1), &[])), Some(3.0));
}

#[test]
fn first_fixation_examples() {
    let l = log(&still(40), Some(10), &[(30, EventKind::GraspStart)]);
    assert!((first_fixation_time(&l).unwrap() - 2.0).abs() < 1e-12);
    assert_eq!(first_fixation_time(&log(&still(20), Some(10), &[(10, EventKind::GraspStart)])), Some(0.0));
    assert_eq!(first_fixation_time(&log(&still(20), Some(10), &[])), None);
    assert_eq!(first_fixation_time(&log(&still(20), None, &[(5, EventKind::GraspStart)])), None);
}

#[test]
fn viewpoint_correction_examples() {
    let pans = |p: &[f64]| p.iter().map(|&x| (x, 0.0)).collect::<Vec<_>>();
    let monotone = log(&pans(&[0.0, 5.0, 10.0, 15.0, 20.0]), Some(1), &[]);
    assert_eq!(viewpoint_corrections(&monotone, DEFAULT_DEADBAND), Some(0));
    let reversal = log(&pans(&[0.0, 2.0, 4.0, 2.0, 0.0]), Some(0), &[]);
    assert_eq!(viewpoint_corrections(&reversal, DEFAULT_DEADBAND), Some(1));
    let jitter = log(&pans(&[0.0, 0.3, 0.0, 0.3, 0.0, 0.3]), Some(0), &[]);
    assert_eq!(viewpoint_corrections(&jitter, 0.5), Some(0));
    let both = log(&[(0.0, 0.0), (2.0, 2.0), (0.0, 0.0)], Some(0), &[]);
    assert_eq!(viewpoint_corrections(&both, 0.5), Some(2));
    assert_eq!(viewpoint_corrections(&log(&still(3), None, &[]), 0.5), None);
}

#[test]
fn grasp_examples() {
    let one = log(&still(6), Some(0), &[(5, EventKind::GraspClose), (5, EventKind::GraspSuccess)]);
    assert_eq!(grasp_attempts(&one), 1);
    let three = log(
        &still(10),
        Some(0),
        &[
            (3, EventKind::GraspClose),
            (7, EventKind::GraspClose),
            (9, EventKind::GraspClose),
            (9, EventKind::GraspSuccess),
        ],
    );
    assert_eq!(grasp_attempts(&three), 3);
    let long = log(&still(201), Some(0), &[(200, EventKind::GraspSuccess)]);
    assert!((time_to_grasp(&long).unwrap() - 20.0).abs() < 1e-12);
    let fail = log(&still(10), Some(0), &[(3, EventKind::GraspClose), (6, EventKind::GraspClose)]);
    assert_eq!(time_to_grasp(&fail), None);
    assert_eq!(grasp_attempts(&fail), 2);
    let r = compute_metrics(&fail, DEFAULT_DEADBAND).unwrap();
    assert!(r.undefined.contains(&"time_to_grasp".to_string()));
}

#[test]
fn malformed_logs_are_rejected() {
    let mut l = log(&still(3), Some(0), &[]);
    l.steps[2].t = 1;
    assert!(compute_metrics(&l, 0.5).is_err());
    let twice = log(&still(3), Some(0), &[(1, EventKind::GraspSuccess), (2, EventKind::GraspSuccess)]);
    assert!(compute_metrics(&twice, 0.5).is_err());
}

#[test]
fn csv_has_one_row_per_group() {
    let r = compute_metrics(&log(&[(0.0, 0.0), (10.0, 0.0)], Some(1), &[(1, EventKind::GraspStart)]), 0.5).unwrap();
    let csv = to_csv(&[("full".into(), aggregate(std::slice::from_ref(&r))), ("none".into(), aggregate(&[]))]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("Model,First-Fixation Time (s)"));
    assert_eq!(lines[1], "full,0.000,10.000,0.000,0.000,");
    assert_eq!(lines[2], "none,,,,,");
}

fn arb_log() -> impl Strategy<Value = EpisodeLog> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec((-150.0f64..150.0, -40.0f64..20.0), n),
            prop::option::of(0..n),
            prop::collection::vec((0..n as u64, 0u8..3), 0..5),
            prop::option::of(0..n as u64),
            0.01f64..1.0,
        )
            .prop_map(|(poses, vis, evs, success, dt)| {
                let mut l = log(&poses, vis, &[]);
                l.step_duration = dt;
                l.events = evs
                    .into_iter()
                    .map(|(t, k)| EpisodeEvent {
                        t,
                        kind: [EventKind::GraspStart, EventKind::GraspClose, EventKind::EpisodeEnd][k as usize],
                    })
                    .collect();
                if let Some(t) = success {
                    l.events.push(EpisodeEvent { t, kind: EventKind::GraspSuccess });
                }
                l
            })
    })
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9 * (1.0 + x.abs()),
        (None, None) => true,
        _ => false,
    }
}

proptest! {
    #[test]
    fn metrics_ignore_time_offset(l in arb_log(), c in 0u64..1_000_000) {
        let (a, b) = (compute_metrics(&l, 0.5).unwrap(), compute_metrics(&l.shifted(c), 0.5).unwrap());
        prop_assert!(close(a.first_fixation_time, b.first_fixation_time));
        prop_assert!(close(a.time_to_grasp, b.time_to_grasp));
        prop_assert_eq!(a.head_search_path_length, b.head_search_path_length);
        prop_assert_eq!(a.viewpoint_corrections, b.viewpoint_corrections);
        prop_assert_eq!(a.grasp_attempts, b.grasp_attempts);
    }

    #[test]
    fn path_length_ignores_sign_flips(l in arb_log(), flip_pan in any::<bool>(), flip_tilt in any::<bool>()) {
        let mut m = l.clone();
        for s in &mut m.steps {
            if flip_pan { s.pan = -s.pan; }
            if flip_tilt { s.tilt = -s.tilt; }
        }
        prop_assert_eq!(head_path_length(&l), head_path_length(&m));
    }

    #[test]
    fn path_length_is_additive_over_concatenation(a in arb_log(), b in arb_log()) {
        let mut a = a;
        a.steps.iter_mut().for_each(|s| s.target_visible = false);
        prop_assume!(b.vis_index().is_some());
        let offset = a.steps.len() as u64;
        let mut joined = a.clone();
        joined.steps.extend(b.steps.iter().map(|s| StepLog { t: s.t + offset, ..*s }));
        let last = a.steps.last().unwrap();
        let seam = (b.steps[0].pan - last.pan).abs() + (b.steps[0].tilt - last.tilt).abs();
        let whole_a: f64 = a.steps.windows(2).map(|w| (w[1].pan - w[0].pan).abs() + (w[1].tilt - w[0].tilt).abs()).sum();
        let want = whole_a + seam + head_path_length(&b).unwrap();
        prop_assert!((head_path_length(&joined).unwrap() - want).abs() <= 1e-9);
    }

    #[test]
    fn aggregate_matches_one_pass_means(logs in prop::collection::vec(arb_log(), 0..12)) {
        let reports: Vec<MetricsReport> = logs.iter().map(|l| compute_metrics(l, 0.5).unwrap()).collect();
        let agg = aggregate(&reports);
        prop_assert_eq!(agg.episodes, reports.len());
        let (mut sum, mut n) = (0.0, 0usize);
        for r in &reports {
            if let Some(v) = r.head_search_path_length {
                sum += v;
                n += 1;
            }
        }
        prop_assert_eq!(agg.head_search_path_length.defined, n);
        prop_assert!(close(agg.head_search_path_length.mean, (n > 0).then(|| sum / n as f64)));
        let attempts = reports.iter().map(|r| r.grasp_attempts as f64).sum::<f64>();
        prop_assert!(close(agg.grasp_attempts.mean, (!reports.is_empty()).then(|| attempts / reports.len() as f64)));
    }

    #[test]
    fn defined_metrics_are_non_negative(l in arb_log()) {
        let r = compute_metrics(&l, 0.5).unwrap();
        for v in [r.first_fixation_time, r.head_search_path_length, r.time_to_grasp].into_iter().flatten() {
            prop_assert!(v >= 0.0);
        }
    }
}

//! Tracking loop semantics with a scripted model, the reliability memory and
//! the motion filter.

mod common;

use proptest::prelude::*;

use unctrack::numerics::Array;
use unctrack::pmn::{memory_update, Prototype, PrototypeBank};
use unctrack::runtime::{PSD_TOL, Variant};

use common::{bank_frames, kalman_covariance_extremes, kalman_lead_error, run, truth, Scripted};

#[test]
fn exhaustive_gating_traces() {
    assert_eq!(common::gating_sweeps(), Ok(4usize.pow(5) + 2usize.pow(8)));
}

#[test]
fn search_scale_follows_previous_decision() {
    let conf = vec![1.0, 0.9, 0.1, 0.1, 0.9, 0.1, 0.9];
    let model = Scripted::new(truth(conf.len()), conf.clone());
    let steps = run(&model, Variant::FULL);
    for (before, _, report) in &steps {
        let prev = report.frame - 1;
        let want = if prev == 0 || conf[prev] > 0.5 { 1.0 } else { 2.0 };
        assert_eq!(before.search_scale, want, "frame {}", report.frame);
    }
}

#[test]
fn accepted_frames_report_the_observation() {
    let conf = vec![1.0; 6];
    let model = Scripted::new(truth(6), conf);
    for (_, _, report) in run(&model, Variant::FULL) {
        let gt = model.truth[report.frame];
        for (a, b) in report.bbox.to_array().iter().zip(gt.to_array()) {
            assert!((a - b).abs() < 1e-9);
        }
        // σ comes back in frame pixels: 0.5 patch px times the crop scale.
        assert!(report.sigma.iter().all(|&s| s > 0.0));
    }
}

#[test]
fn template_is_refreshed_only_on_acceptance() {
    let conf = vec![1.0, 0.1, 0.9, 0.1];
    let model = Scripted::new(truth(4), conf);
    run(&model, Variant::FULL);
    let seen = model.seen_templates.borrow();
    assert_eq!(seen[0], seen[1]);
    assert_ne!(seen[1], seen[2]);
    assert_eq!(seen.len(), 3);
}

#[test]
fn without_uld_every_frame_is_accepted_with_unit_sigma() {
    let conf = vec![1.0, 0.1, 0.0, 0.3, 0.2, 0.1, 0.4, 0.05];
    let model = Scripted::new(truth(conf.len()), conf);
    let mut frames = 0;
    for (_, after, report) in run(&model, Variant { uld: false, pmn: true }) {
        assert!(report.accepted);
        assert_eq!(report.sigma, [1.0; 4]);
        assert_eq!(*bank_frames(&after.bank).last().unwrap(), report.frame);
        frames += 1;
    }
    assert_eq!(frames, 7);
}

#[test]
fn without_pmn_confidence_is_one() {
    let conf = vec![1.0, 0.1, 0.2, 0.3];
    let model = Scripted::new(truth(4), conf);
    for variant in [Variant { uld: true, pmn: false }, Variant { uld: false, pmn: false }] {
        for (_, _, report) in run(&model, variant) {
            assert_eq!(report.confidence, 1.0);
            assert!(report.accepted);
        }
    }
}

#[test]
fn memory_update_threshold_is_strict() {
    let bank = PrototypeBank::new(2).unwrap();
    let proto = |t: usize| Prototype::new(Array::vector(&[t as f64]), t, 0.0).unwrap();
    assert!(memory_update(&bank, proto(1), 0.5, 0.5).is_empty());
    assert_eq!(memory_update(&bank, proto(1), 0.500_000_1, 0.5).len(), 1);
    let mut full = bank.clone();
    for t in 0..2 {
        full.push(proto(t));
    }
    let rejected = memory_update(&full, proto(9), 0.1, 0.5);
    assert_eq!(rejected, full);
    let accepted = memory_update(&full, proto(9), 0.9, 0.5);
    assert_eq!(bank_frames(&accepted), vec![1, 9]);
}

proptest! {
    #[test]
    fn bank_never_exceeds_capacity_and_keeps_the_newest(
        capacity in 1usize..8,
        ps in prop::collection::vec(0.0f64..1.0, 0..40),
    ) {
        let mut bank = PrototypeBank::new(capacity).unwrap();
        let mut accepted = Vec::new();
        for (t, &p) in ps.iter().enumerate() {
            let proto = Prototype::new(Array::vector(&[t as f64]), t, p).unwrap();
            bank = memory_update(&bank, proto, p, 0.5);
            if p > 0.5 {
                accepted.push(t);
            }
            prop_assert!(bank.len() <= capacity);
        }
        let keep = accepted.len().saturating_sub(capacity);
        prop_assert_eq!(bank_frames(&bank), accepted[keep..].to_vec());
    }
}

#[test]
fn constant_velocity_prediction_converges() {
    assert!(kalman_lead_error() < 1.0);
}

#[test]
fn covariance_stays_symmetric_psd() {
    let (asym, min_eig) = kalman_covariance_extremes();
    assert!(asym <= PSD_TOL);
    assert!(min_eig >= -PSD_TOL);
}

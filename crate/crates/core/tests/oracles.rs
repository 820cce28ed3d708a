mod common;

use common::oracle::{ap_sweep, loss_sweep, matcher_sweep, nms_sweep, Sweep};
use gfr_core::detect::BBox;
use gfr_core::harness::eval::{average_precision, ImageBox, ScoredBox};

fn report(name: &str, s: &Sweep) {
    println!("{name}: {} cases, {} mismatches", s.cases, s.mismatches.len());
    assert!(s.cases > 0);
    assert!(s.passed(), "{name}: {:#?}", s.mismatches);
}

#[test]
fn matcher_agrees_with_brute_force() {
    report("matcher", &matcher_sweep());
}

#[test]
fn nms_agrees_with_fixed_point_enumeration() {
    report("nms", &nms_sweep());
}

#[test]
fn multibox_loss_agrees_with_rank_count_mining() {
    report("multibox loss", &loss_sweep());
}

#[test]
fn average_precision_agrees_with_prefix_curve() {
    report("average precision", &ap_sweep());
}

#[test]
fn average_precision_three_detections_two_objects() {
    let a = BBox::new(0.0, 0.0, 0.2, 0.2);
    let b = BBox::new(0.5, 0.5, 0.7, 0.7);
    let gts = [ImageBox { image: 0, bbox: a }, ImageBox { image: 0, bbox: b }];
    let dets = [
        ScoredBox {
            image: 0,
            score: 0.9,
            bbox: a,
        },
        ScoredBox {
            image: 0,
            score: 0.8,
            bbox: BBox::new(0.8, 0.0, 1.0, 0.2),
        },
        ScoredBox {
            image: 0,
            score: 0.7,
            bbox: b,
        },
    ];
    // Recall 1/2 at precision 1, then recall 1 at precision 2/3.
    let ap = average_precision(&dets, &gts, 0.5).unwrap();
    assert!((ap - 5.0 / 6.0).abs() < 1e-12, "{ap}");
}

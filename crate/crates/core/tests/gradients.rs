mod common;

use common::grad::{cases, SEEDS, TOLERANCE};

#[test]
fn every_op_and_the_composed_graph_match_finite_differences() {
    let mut failures = Vec::new();
    for (name, case) in cases() {
        let mut worst = 0.0f64;
        let (mut checked, mut skipped) = (0, 0);
        for seed in 0..SEEDS {
            let r = case(seed).unwrap();
            assert!(r.checked > 0, "{name}: nothing checked");
            if r.max_rel > TOLERANCE {
                failures.push(format!("{name} seed {seed}: {:.3e} at {}", r.max_rel, r.worst));
            }
            worst = worst.max(r.max_rel);
            checked += r.checked;
            skipped += r.skipped;
        }
        println!("{name:<28} max rel err {worst:.2e}  checked {checked}  skipped at kinks {skipped}");
        assert!(
            skipped * 4 <= checked,
            "{name}: {skipped} of {} coordinates straddle kinks",
            checked + skipped
        );
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

mod common;

use beta_core::diagnostics::{check_bound, DEFAULT_ALPHAS};
use common::bound::{instance, recount};

#[test]
fn bound_holds_on_twenty_planted_configurations() {
    let mut noises = Vec::new();
    for i in 0..20 {
        let inst = instance(i);
        let before = inst.split.clone();
        let est = check_bound(&inst.h, Some(&inst.h_star), &inst.x, &inst.split, &inst.truth, &DEFAULT_ALPHAS, i).unwrap();
        assert_eq!(inst.split, before);
        assert_eq!(est.len(), DEFAULT_ALPHAS.len());
        for e in &est {
            assert!(e.valid && e.holds && e.corollary_holds, "config {i} ({:.2}, {:.1} deg): {e:?}", inst.noise, inst.shift);
            assert!((0.0..=2.0).contains(&e.d_proxy));
            recount(&inst, e);
        }
        noises.push(inst.noise);
    }
    assert!(noises.iter().cloned().fold(0.0, f64::max) > 0.3, "suite should reach high noise");
}

#[test]
fn missing_probe_marks_estimates_invalid() {
    let inst = instance(3);
    let est = check_bound(&inst.h, None, &inst.x, &inst.split, &inst.truth, &[0.5], 3).unwrap();
    assert!(!est[0].valid);
    assert_eq!(est[0].lambda, 0.0);
}

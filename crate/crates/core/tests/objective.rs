mod common;

use common::{all_zero, any_nonzero, toy, ToyStep};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn alpha_endpoints_select_one_term(seed in 0u64..1000) {
        let one = ToyStep::run(&toy(&["alpha=1"]), seed).step.report;
        prop_assert_eq!(one.total.to_bits(), one.l1.to_bits());
        let zero = ToyStep::run(&toy(&["alpha=0"]), seed).step.report;
        prop_assert_eq!(zero.total.to_bits(), zero.distill.to_bits());
    }

    #[test]
    fn total_interpolates_between_terms(seed in 0u64..1000, alpha in 0.0f64..=1.0) {
        let a = format!("alpha={alpha}");
        let r = ToyStep::run(&toy(&[&a]), seed).step.report;
        let expect = alpha * r.l1 as f64 + (1.0 - alpha) * r.distill as f64;
        prop_assert!((r.total as f64 - expect).abs() <= 1e-5 * expect.abs().max(1.0));
    }

    #[test]
    fn masked_only_ignores_visible_predictions(seed in 0u64..1000) {
        let s = ToyStep::run(&toy(&["loss_mode=masked-only"]), seed);
        prop_assert!(all_zero(&s.pred_grad_rows(&s.rows(false))));
        prop_assert!(any_nonzero(&s.pred_grad_rows(&s.rows(true))));
        prop_assert_eq!(s.step.report.n_masked, s.rows(true).len());
    }

    #[test]
    fn whole_image_uses_every_prediction(seed in 0u64..1000) {
        let s = ToyStep::run(&toy(&["loss_mode=whole-image"]), seed);
        prop_assert!(any_nonzero(&s.pred_grad_rows(&s.rows(false))));
        prop_assert!(any_nonzero(&s.pred_grad_rows(&s.rows(true))));
    }

    #[test]
    fn stop_gradient_blocks_the_teacher(seed in 0u64..1000) {
        let s = ToyStep::run(&toy(&["stop_gradient=on", "alpha=0"]), seed);
        prop_assert!(s.teacher_grad().iter().all(|&v| v == 0.0));
        let s = ToyStep::run(&toy(&["stop_gradient=off", "alpha=0"]), seed);
        prop_assert!(s.teacher_grad().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn modes_are_reported() {
    let m = ToyStep::run(&toy(&["loss_mode=masked-only"]), 1)
        .step
        .report;
    let w = ToyStep::run(&toy(&["loss_mode=whole-image"]), 1)
        .step
        .report;
    assert_eq!(m.mode, "masked-only");
    assert_eq!(w.mode, "whole-image");
    let off = ToyStep::run(&toy(&["distill=off", "alpha=0.2"]), 1).step;
    assert!(off.distill.is_none() && off.teacher_input.is_none());
    assert_eq!(off.report.alpha, 1.0);
    assert_eq!(off.report.total, off.report.l1);
}

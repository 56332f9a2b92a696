mod common;

use capse::kg::Triple;
use capse::model::{CapsEShape, Label};
use common::{grad_check, relative_error, routed_loss, Instance, FD_STEP};

#[test]
fn random_instances_match_central_differences() {
    let mut rng = common::rng(2024);
    let mut checked = 0;
    for case in 0..250 {
        let inst = Instance::random(&mut rng);
        let report = grad_check(&inst);
        assert!(
            report.max_rel_error <= 1e-4,
            "case {case} ({:?}): relative error {:.3e}",
            inst.shape,
            report.max_rel_error
        );
        checked += report.checked;
    }
    assert!(checked > 10_000, "only {checked} coordinates checked");
}

#[test]
fn single_triple_figure_configuration() {
    let shape = CapsEShape {
        k: 4,
        n_filters: 5,
        d: 2,
        iterations: 1,
    };
    let mut inst = Instance::with_shape(shape, &mut common::rng(7));
    inst.batch = vec![(Triple::new(0, 1, 2), Label::Valid)];
    let report = grad_check(&inst);
    assert!(report.checked > 0);
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn one_iteration_needs_no_coupling_convention() {
    // With a single routing iteration the couplings are uniform constants,
    // so the analytic gradient is the gradient of the true loss.
    let mut rng = common::rng(99);
    let mut tested = 0;
    while tested < 20 {
        let inst = Instance::random(&mut rng);
        if inst.shape.iterations != 1 {
            continue;
        }
        let analytic = inst.analytic();
        let base_pre = inst.pre_activations();
        for (idx, &exact) in analytic.iter().enumerate() {
            let x = inst.get(idx);
            let (plus, minus) = (inst.with(idx, x + FD_STEP), inst.with(idx, x - FD_STEP));
            let flips = [&plus, &minus].iter().any(|p| {
                p.pre_activations()
                    .iter()
                    .zip(&base_pre)
                    .any(|(a, b)| a.abs() < 1e-6 || (a > &0.0) != (b > &0.0))
            });
            if flips {
                continue;
            }
            let numeric = (routed_loss(&plus) - routed_loss(&minus)) / (2.0 * FD_STEP);
            assert!(relative_error(exact, numeric) <= 1e-4);
        }
        tested += 1;
    }
}

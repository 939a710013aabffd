use gkm_wasm::demo::{residual_curve, selection_paths, train_bias};

#[test]
fn selection_paths_have_k_plus_one_points() {
    let p = selection_paths(0.5, 0.3, 0.5, [2.0, -1.0], 40).unwrap();
    assert_eq!(p.bmo.len(), 82);
    assert_eq!(p.km.len(), 82);
    assert_eq!(&p.bmo[..2], &[2.0, -1.0]);
    // Plain KM lands on the projection of u0, (0.5, 0.5).
    let end = &p.km[80..];
    assert!((end[0] - 0.5).abs() < 1e-6 && (end[1] - 0.5).abs() < 1e-6, "{end:?}");
    // The upper-level step pulls BMO toward (2, 0)'s side.
    assert!(p.bmo[80] > end[0]);
}

#[test]
fn selection_rejects_bad_mu() {
    assert!(selection_paths(0.5, 1.5, 0.5, [0.0, 0.0], 10).is_err());
}

#[test]
fn normalization_controls_the_residual_curve() {
    let on = residual_curve(2.0, 0.7, true, 200).unwrap();
    assert!(on.diverged_at.is_none());
    assert_eq!(on.residuals.len(), 200);
    assert_eq!(on.envelope.len(), 200);
    assert!(on.residuals[199] < on.residuals[1]);

    let off = residual_curve(2.0, 0.7, false, 200).unwrap();
    assert!(off.diverged_at.is_some() || off.violations > 0, "{off:?}");
}

#[test]
fn bias_training_approaches_half_target() {
    let r = train_bias([1.0, -2.0], 0.5, 60).unwrap();
    assert_eq!(r.grad_norms.len(), 61);
    assert!(r.grad_norms[60] < 1e-2 * r.grad_norms[0]);
    assert!((r.bias[0] - 0.5).abs() < 1e-2 && (r.bias[1] + 1.0).abs() < 1e-2, "{:?}", r.bias);
}

mod common;

use common::*;
use gkm_core::metric::Vector;
use gkm_core::operators::{push_layer, Activation, NetOp, OperatorDescriptor};
use gkm_core::params::HyperParams;
use gkm_core::Error;
use proptest::prelude::*;

fn variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(ALL_VARIANTS.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn averaged_inequality_holds(v in variant(), seed in any::<u64>(), alpha in 0.05f64..0.95) {
        let mut r = rng(seed);
        let case = random_case(v, &mut r, false);
        let h = case.op.metric(&case.omega).unwrap();
        for _ in 0..20 {
            let u = random_state(&mut r, case.op.dim());
            let w = random_state(&mut r, case.op.dim());
            let (ne, avg) = pair_gaps(&case, &h, &u, &w, alpha);
            prop_assert!(ne <= 1e-9, "{v:?}: expansion {ne}");
            prop_assert!(avg <= 1e-8, "{v:?}: averaged gap {avg}");
        }
    }

    #[test]
    fn vjp_matches_directional_derivative(v in variant(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let case = random_case(v, &mut r, true);
        let n = case.op.dim();
        let u = normal_vec(&mut r, n);
        let dir = normal_vec(&mut r, n);
        let cot = normal_vec(&mut r, n);
        let mut grad = vec![0.0; case.omega.len()];
        let gu = case.op.vjp(&u, &case.omega, &cot, &mut grad).unwrap();

        let h = 1e-6;
        let plus = case.op.apply(&(&u + &dir * h), &case.omega).unwrap();
        let minus = case.op.apply(&(&u - &dir * h), &case.omega).unwrap();
        let fd = cot.dot(&((plus - minus) / (2.0 * h)));
        prop_assert!((fd - gu.dot(&dir)).abs() <= 1e-5 * (1.0 + fd.abs()), "{v:?}: state {fd} vs {}", gu.dot(&dir));

        let i = (seed as usize) % case.omega.len();
        let step = h * (case.omega.values()[i].abs() + 1.0);
        let mut wp = case.omega.clone();
        wp.values_mut()[i] += step;
        let mut wm = case.omega.clone();
        wm.values_mut()[i] -= step;
        let fd = cot.dot(&((case.op.apply(&u, &wp).unwrap() - case.op.apply(&u, &wm).unwrap()) / (2.0 * step)));
        prop_assert!((fd - grad[i]).abs() <= 1e-5 * (1.0 + fd.abs()), "{v:?}: omega[{i}] {fd} vs {}", grad[i]);
    }

    #[test]
    fn certify_is_idempotent(v in variant(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let case = random_case(v, &mut r, false);
        let mut once = case.omega.clone();
        case.op.certify(&mut once).unwrap();
        let mut twice = once.clone();
        case.op.certify(&mut twice).unwrap();
        for (a, b) in once.values().iter().zip(twice.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}

#[test]
fn certify_rescales_expansive_net() {
    let mut omega = HyperParams::new();
    let w = gkm_core::Matrix::identity(3, 3) * 2.0;
    let l = push_layer(&mut omega, "d", &w, None).unwrap();
    let op = OperatorDescriptor::Net(NetOp::new(3, vec![l], Activation::Relu, 1.0).unwrap());
    let mut certified = omega.clone();
    op.certify(&mut certified).unwrap();
    assert!(op.lipschitz_bound(&certified).unwrap() <= 1.0 + 1e-9);
    let u = Vector::from_vec(vec![1.0, -1.0, 2.0]);
    assert!(op.apply(&u, &certified).is_ok());
}

#[test]
fn wrong_dimension_is_reported() {
    let mut r = rng(3);
    let case = random_case(Variant::Pg, &mut r, false);
    let err = case.op.apply(&Vector::zeros(case.op.dim() + 1), &case.omega).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { .. }));
}

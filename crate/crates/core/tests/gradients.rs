mod common;

use common::{Composition, KINK_MARGIN};
use fairexit::numkit::{finite_diff_check, Matrix, ParamId, Tape};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn random_compositions_match_finite_differences(seed in any::<u64>()) {
        let c = Composition::sample(&mut ChaCha8Rng::seed_from_u64(seed));
        let check = c.check().unwrap();
        prop_assume!(check.min_relu_margin >= KINK_MARGIN);
        prop_assert!(check.max_rel_error <= 1e-4, "{}: {}", c.description, check.max_rel_error);
    }

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let m = Matrix::new(3, 4, data).unwrap().softmax_rows();
        for r in 0..3 {
            prop_assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reversal_negates_and_scales(strength in 0.0f64..3.0, data in prop::collection::vec(-2.0f64..2.0, 6)) {
        let x = Matrix::new(2, 3, data).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(ParamId(0), x.clone());
        let r = tape.gradient_reversal(v, strength).unwrap();
        prop_assert_eq!(tape.value(r), &x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        for &gi in g.get(ParamId(0)).unwrap().data() {
            prop_assert_eq!(gi, -strength);
        }
    }
}

#[test]
fn matmul_gradient_by_hand() {
    // d/dA sum(A B) = 1 Bᵀ, d/dB = Aᵀ 1.
    let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
    let b = Matrix::from_rows(&[[5.0], [6.0]]).unwrap();
    let mut tape = Tape::new();
    let va = tape.param(ParamId(0), a);
    let vb = tape.param(ParamId(1), b);
    let p = tape.matmul(va, vb).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(ParamId(0)).unwrap().data(), &[5.0, 6.0, 5.0, 6.0]);
    assert_eq!(g.get(ParamId(1)).unwrap().data(), &[4.0, 6.0]);
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = Matrix::from_rows(&[[0.5, -1.0, 2.0], [0.0, 0.0, 0.0]]).unwrap();
    let labels = [2, 0];
    let mut tape = Tape::new();
    let v = tape.param(ParamId(0), logits.clone());
    let ce = tape.cross_entropy(v, &labels).unwrap();
    let g = tape.backward(ce).unwrap();
    let p = logits.softmax_rows();
    for r in 0..2 {
        for c in 0..3 {
            let onehot = if labels[r] == c { 1.0 } else { 0.0 };
            let want = (p.get(r, c) - onehot) / 2.0;
            assert!((g.get(ParamId(0)).unwrap().get(r, c) - want).abs() < 1e-15);
        }
    }
    let check = finite_diff_check(|t, v| t.cross_entropy(v[0], &labels), &[logits], 1e-6).unwrap();
    assert!(check.max_rel_error < 1e-7);
}

#[test]
fn library_checker_agrees_on_reversal_free_programs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut seen = 0;
    while seen < 20 {
        let c = Composition::sample(&mut rng);
        if c.has_reversal() {
            continue;
        }
        let check = c.library_check().unwrap();
        if check.min_relu_margin < KINK_MARGIN {
            continue;
        }
        assert!(check.max_rel_error <= 1e-4, "{}: {}", c.description, check.max_rel_error);
        seen += 1;
    }
}

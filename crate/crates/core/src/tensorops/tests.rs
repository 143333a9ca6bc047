use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::error::UfoError;

fn arr(rows: usize, cols: usize, seed: u64) -> DenseArray {
    seeded_normal(rows, cols, "tensorops-test", seed)
}

#[test]
fn square_gradient_at_three() {
    let mut tape = Tape::new();
    let x = tape.param(DenseArray::scalar(3.0));
    let y = tape.unary(x, Unary::Square);
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.wrt(x).data(), &[6.0]);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(arr(1, 5, 1));
    let s = tape.softmax_rows(x);
    let out = tape.sum(s);
    let g = tape.backward(out).unwrap().wrt(x);
    assert!(g.max_abs() < 1e-15, "{g:?}");
}

#[test]
fn empty_backward_gives_zero_gradients() {
    let mut tape = Tape::new();
    let x = tape.param(arr(2, 2, 2));
    let c = tape.constant(DenseArray::scalar(1.0));
    let grads = tape.backward(c).unwrap();
    assert_eq!(grads.wrt(x), DenseArray::zeros(2, 2));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(arr(2, 2, 2));
    assert!(matches!(tape.backward(x), Err(UfoError::InvalidArgument(_))));
}

#[test]
fn non_finite_values_surface_as_numeric_failure() {
    let mut tape = Tape::new();
    let x = tape.param(DenseArray::scalar(0.0));
    let r = tape.unary(x, Unary::Recip);
    assert!(matches!(tape.check_finite(), Err(UfoError::NumericFailure(_))));
    assert!(tape.backward(r).is_err());
}

fn check(inputs: &[DenseArray], f: impl Fn(&mut Tape, &[Var]) -> crate::Result<Var>) {
    let report = check_gradients(inputs, 1e-5, f).unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}

#[test]
fn matmul_and_rows() {
    check(&[arr(3, 4, 1), arr(4, 2, 2), arr(1, 2, 3)], |t, v| {
        let m = t.matmul(v[0], v[1]);
        let b = t.add_row(m, v[2]);
        let c = t.mul_row(b, v[2]);
        let s = t.unary(c, Unary::Tanh);
        Ok(t.sum(s))
    });
}

#[test]
fn elementwise_ops() {
    check(&[arr(2, 3, 4), arr(2, 3, 5)], |t, v| {
        let a = t.mul(v[0], v[1]);
        let b = t.sub(a, v[1]);
        let c = t.add(b, v[0]);
        let d = t.scale(c, 0.7);
        let e = t.add_scalar(d, 2.5);
        let f = t.unary(e, Unary::Sqrt);
        let g = t.unary(f, Unary::Recip);
        let h = t.row_scale(g, Arc::new(vec![0.3, -1.2]));
        Ok(t.dot_const(h, Arc::new(vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25])))
    });
}

#[test]
fn activations() {
    for kind in [Unary::Swish, Unary::Sigmoid, Unary::Softplus, Unary::Exp, Unary::Square] {
        check(&[arr(3, 3, 6)], |t, v| {
            let a = t.unary(v[0], kind);
            let w = t.constant(arr(3, 3, 7));
            let b = t.mul(a, w);
            Ok(t.sum(b))
        });
    }
}

#[test]
fn shape_ops() {
    check(&[arr(4, 3, 8), arr(4, 2, 9)], |t, v| {
        let c = t.concat_cols(&[v[0], v[1]]);
        let s = t.slice_cols(c, 1, 4);
        let r = t.reshape(s, 2, 6);
        let n = t.row_norm(r, 1e-5);
        let m = t.group_col_mean(n, 2);
        let sq = t.unary(m, Unary::Square);
        let w = t.constant(arr(2, 6, 10));
        let p = t.mul(sq, w);
        Ok(t.sum(p))
    });
}

#[test]
fn row_mix_and_softmax() {
    check(&[arr(3, 4, 11)], |t, v| {
        let mut plan = RowMixPlan::new();
        plan.push_row([(0, 0.5), (2, 0.25)]);
        plan.push_row([(1, 1.0)]);
        plan.push_row([(2, -1.0), (0, 2.0), (1, 0.1)]);
        let m = t.row_mix(v[0], Arc::new(plan));
        let s = t.softmax_rows(m);
        let w = t.constant(arr(3, 4, 12));
        let p = t.mul(s, w);
        Ok(t.sum(p))
    });
}

#[test]
fn attention_gradients() {
    for causal in [false, true] {
        let layout = AttentionLayout {
            heads: 2,
            causal,
            q_groups: 2,
            kv_groups: if causal { 2 } else { 1 },
        };
        let kv_rows = if causal { 6 } else { 3 };
        check(&[arr(6, 4, 13), arr(kv_rows, 4, 14), arr(kv_rows, 4, 15)], |t, v| {
            let a = t.attention(v[0], v[1], v[2], layout);
            let w = t.constant(arr(6, 4, 16));
            let p = t.mul(a, w);
            Ok(t.sum(p))
        });
    }
}

#[test]
fn attention_rows_are_stochastic_and_causal() {
    let mut t = Tape::new();
    let q = t.constant(arr(5, 4, 17));
    let k = t.constant(arr(5, 4, 18));
    let layout = AttentionLayout {
        heads: 2,
        causal: true,
        q_groups: 1,
        kv_groups: 1,
    };
    let a = t.attention(q, k, k, layout);
    let (probs, _, tq, tk) = t.attention_probs(a).unwrap();
    for row in probs.chunks(tk) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    for h in 0..2 {
        for i in 0..tq {
            for j in i + 1..tk {
                assert_eq!(probs[(h * tq + i) * tk + j], 0.0);
            }
        }
    }
}

#[test]
fn crps_gradients_away_from_ties() {
    let truth = arr(4, 2, 19);
    check(&[arr(2 * 3 * 2, 2, 20)], |t, v| {
        let c = t.crps(v[0], &truth, 2, 3);
        Ok(t.sum(c))
    });
}

/// One randomly chosen unary-or-binary step of a composition.
fn apply_op(t: &mut Tape, code: u8, a: Var, b: Var) -> Var {
    match code % 8 {
        0 => t.add(a, b),
        1 => t.mul(a, b),
        2 => t.unary(a, Unary::Tanh),
        3 => t.unary(a, Unary::Swish),
        4 => t.row_norm(a, 1e-3),
        5 => t.softmax_rows(a),
        6 => t.scale(a, -0.5),
        _ => t.unary(a, Unary::Sigmoid),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_compositions_match_finite_differences(
        codes in proptest::collection::vec(any::<u8>(), 5),
        seed in 0u64..1000,
    ) {
        let report = check_gradients(&[arr(3, 4, seed), arr(3, 4, seed + 1)], 1e-5, |t, v| {
            let mut x = v[0];
            for &c in &codes {
                x = apply_op(t, c, x, v[1]);
            }
            let w = t.constant(arr(3, 4, 5000 + seed));
            let p = t.mul(x, w);
            Ok(t.sum(p))
        }).unwrap();
        prop_assert!(report.passes(1e-5), "{:?}", report);
    }
}

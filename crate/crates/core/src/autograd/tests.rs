use super::*;
use crate::compress::{CompressionPolicy, PolicyKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
}

/// Reduces any output to a scalar with a fixed random projection so every
/// output entry carries a distinct weight.
fn to_scalar(tape: &mut Tape<'_, f64>, out: Var, proj: &Array2<f64>) -> Var {
    let (n, m) = tape.shape(out);
    let weighted = tape.mul_const(out, proj.clone());
    let ones_r = tape.leaf(Array2::ones((m, 1)));
    let ones_l = tape.leaf(Array2::ones((1, n)));
    let col = tape.matmul(weighted, ones_r);
    tape.matmul(ones_l, col)
}

/// Central differences of `build` with respect to every input entry.
fn check<F>(inputs: Vec<Array2<f64>>, build: F)
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |xs: &[Array2<f64>], proj: Option<&Array2<f64>>| -> (f64, Vec<Array2<f64>>, Array2<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.shape(out);
        let proj = proj.cloned().unwrap_or_else(|| Array2::ones(shape));
        let loss = to_scalar(&mut tape, out, &proj);
        let grads = tape.backward(loss);
        let gs = vars
            .iter()
            .map(|&v| grads.of(v).cloned().unwrap_or_else(|| Array2::zeros(tape.shape(v))))
            .collect();
        (tape.value(loss)[[0, 0]], gs, proj)
    };
    let (_, _, ones) = eval(&inputs, None);
    let proj = random(&mut rng, ones.nrows(), ones.ncols());
    let (_, analytic, _) = eval(&inputs, Some(&proj));
    let h = 1e-6;
    for (i, x) in inputs.iter().enumerate() {
        for idx in 0..x.len() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            let at = (idx / x.ncols(), idx % x.ncols());
            plus[i][at] += h;
            minus[i][at] -= h;
            let numeric = (eval(&plus, Some(&proj)).0 - eval(&minus, Some(&proj)).0) / (2.0 * h);
            let a = analytic[i][at];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                err < 1e-5,
                "input {i} entry {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn linear_and_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check(
        vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 1, 2)],
        |t, v| t.linear(v[0], v[1], Some(v[2])),
    );
    check(vec![random(&mut rng, 2, 3), random(&mut rng, 3, 2)], |t, v| {
        t.matmul(v[0], v[1])
    });
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = random(&mut rng, 3, 3);
    check(vec![random(&mut rng, 3, 3), random(&mut rng, 3, 3)], move |t, v| {
        let a = t.add(v[0], v[1]);
        let b = t.add_const(a, &c);
        let d = t.scale(b, 0.7);
        let e = t.add(d, d);
        t.relu(e)
    });
}

#[test]
fn layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check(
        vec![random(&mut rng, 4, 5), random(&mut rng, 1, 5), random(&mut rng, 1, 5)],
        |t, v| t.layer_norm(v[0], v[1], v[2]),
    );
}

#[test]
fn log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check(vec![random(&mut rng, 3, 4)], |t, v| t.log_softmax(v[0]));
}

#[test]
fn attention_with_bias_and_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bias = random(&mut rng, 3, 4);
    bias[[0, 3]] = f64::NEG_INFINITY;
    check(
        vec![random(&mut rng, 3, 4), random(&mut rng, 4, 4), random(&mut rng, 4, 4)],
        move |t, v| t.attention(v[0], v[1], v[2], 2, Some(&bias)),
    );
}

#[test]
fn gather_and_reshape() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let idx = Arc::new(vec![Some(0), None, Some(2), Some(0), Some(1), None]);
    check(vec![random(&mut rng, 3, 2)], move |t, v| {
        let g = t.gather_rows(v[0], idx.clone(), 2);
        t.reshape(g, 4, 3)
    });
}

#[test]
fn compress_all_policies() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let labels = [1, 1, 0, 2, 2, 2];
    for kind in [PolicyKind::Average, PolicyKind::Weighted, PolicyKind::Softmax] {
        let plan = Arc::new(CompressionPlan::from_labels(&labels, &CompressionPolicy::new(kind), 0));
        check(
            vec![random(&mut rng, 6, 3), random(&mut rng, 6, 3)],
            move |t, v| {
                let lp = t.log_softmax(v[1]);
                t.compress(v[0], lp, plan.clone())
            },
        );
    }
}

#[test]
fn ctc_through_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    check(vec![random(&mut rng, 5, 3)], |t, v| {
        let lp = t.log_softmax(v[0]);
        t.ctc_loss(lp, &[1, 2], 0).unwrap().unwrap()
    });
}

#[test]
fn label_smoothed_ce() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    check(vec![random(&mut rng, 4, 5)], |t, v| t.label_smoothed_ce(v[0], &[0, 3, 3, 1], 0.1));
}

#[test]
fn ce_closed_forms() {
    let mut tape = Tape::<f64>::new();
    // uniform logits: ln C for any smoothing
    let x = tape.leaf(Array2::zeros((1, 4)));
    for eps in [0.0, 0.1, 0.5] {
        let l = tape.label_smoothed_ce(x, &[2], eps);
        assert!((tape.value(l)[[0, 0]] - 4f64.ln()).abs() < 1e-12);
    }
    let y = tape.leaf(ndarray::array![[0.9f64.ln(), 0.1f64.ln()]]);
    let l = tape.label_smoothed_ce(y, &[0], 0.1);
    let expected = -(0.95 * 0.9f64.ln() + 0.05 * 0.1f64.ln());
    assert!((tape.value(l)[[0, 0]] - expected).abs() < 1e-12);
    assert!((expected - 0.2152).abs() < 1e-4);
    let l0 = tape.label_smoothed_ce(y, &[0], 0.0);
    assert!((tape.value(l0)[[0, 0]] + 0.9f64.ln()).abs() < 1e-12);
}

#[test]
fn params_are_borrowed_and_collected() {
    let mut store = ParamStore::<f64>::new();
    let w = store.insert("w", ndarray::array![[2.0]]);
    let unused = store.insert("unused", ndarray::array![[1.0]]);
    let mut tape = Tape::with_params(&store);
    let x = tape.leaf(ndarray::array![[3.0]]);
    let wv = tape.param(w);
    assert_eq!(tape.param(w), wv);
    let y = tape.matmul(x, wv);
    let grads = tape.backward(y).params(&store);
    assert_eq!(grads.values[w.0][[0, 0]], 3.0);
    assert_eq!(grads.values[unused.0][[0, 0]], 0.0);
}

#[test]
fn dropout_is_identity_at_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Array2::ones((2, 2)));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(tape.dropout(x, 0.0, &mut rng), x);
    let d = tape.dropout(x, 0.5, &mut rng);
    assert!(tape.value(d).iter().all(|&v| v == 0.0 || v == 2.0));
}

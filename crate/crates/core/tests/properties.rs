use ctc_compress::compress::{compress, segment_runs, CompressionPolicy, PolicyKind};
use ctc_compress::ctc::{ctc_collapse, ctc_loss, greedy_decode, lattice, log_softmax_rows, FramePosteriors};
use ctc_compress::metrics::{bleu, edit_distance, wer};
use ndarray::Array2;
use proptest::prelude::*;

fn log_probs(t: usize, c: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-4.0..4.0f64, t * c)
        .prop_map(move |v| log_softmax_rows(Array2::from_shape_vec((t, c), v).unwrap().view()))
}

fn instance() -> impl Strategy<Value = (Array2<f64>, Vec<usize>)> {
    (1usize..=20, 2usize..=6).prop_flat_map(|(t, c)| (log_probs(t, c), prop::collection::vec(1..c, 0..=8)))
}

fn policy() -> impl Strategy<Value = PolicyKind> {
    prop_oneof![
        Just(PolicyKind::Average),
        Just(PolicyKind::Weighted),
        Just(PolicyKind::Softmax)
    ]
}

proptest! {
    #[test]
    fn collapse_shrinks_and_is_idempotent(labels in prop::collection::vec(0usize..4, 0..40)) {
        let once = ctc_collapse(&labels, 0, 4).unwrap();
        prop_assert!(once.len() <= labels.len());
        prop_assert!(!once.ids().contains(&0));
        // blank-free output collapses to itself only when it has no repeats
        let twice = ctc_collapse(once.ids(), 0, 4).unwrap();
        let has_repeat = once.ids().windows(2).any(|w| w[0] == w[1]);
        prop_assert_eq!(twice.ids() == once.ids(), !has_repeat);
    }

    #[test]
    fn forward_and_backward_totals_agree((lp, target) in instance()) {
        let lat = lattice(lp.view(), &target, 0).unwrap();
        let out = ctc_loss(lp.view(), &target, 0).unwrap();
        if out.feasible {
            prop_assert!((lat.log_prob_forward - lat.log_prob_backward).abs() < 1e-9);
            prop_assert!(out.loss >= 0.0);
            // occupancy of each frame sums to one, so the logit gradient rows sum to zero
            for row in out.grad_logits.outer_iter() {
                prop_assert!(row.sum().abs() < 1e-9);
            }
        } else {
            prop_assert!(out.loss.is_infinite());
            prop_assert!(out.grad_log_probs.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn compression_weights_form_a_simplex((lp, _) in instance(), kind in policy(), d in 1usize..5) {
        let t = lp.nrows();
        let states = Array2::from_shape_fn((t, d), |(i, j)| (i * 7 + j) as f64);
        let post = FramePosteriors::new(lp.clone(), 1e-9).unwrap();
        let out = compress(states.view(), &post, &CompressionPolicy::new(kind), 0).unwrap();
        let (labels, _) = greedy_decode(&post, 0).unwrap();
        prop_assert_eq!(out.spans.clone(), segment_runs(&labels));
        prop_assert!(out.states.nrows() <= t);
        for s in &out.spans {
            let w = &out.weights[s.start..s.end];
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // each pooled vector lies inside the range of its span
        for (row, s) in out.states.outer_iter().zip(&out.spans) {
            for j in 0..d {
                let lo = (s.start..s.end).map(|i| states[[i, j]]).fold(f64::INFINITY, f64::min);
                let hi = (s.start..s.end).map(|i| states[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(row[j] >= lo - 1e-9 && row[j] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn bleu_ignores_corpus_order(
        corpus in prop::collection::vec(
            (prop::collection::vec(0u8..6, 1..12), prop::collection::vec(0u8..6, 1..12)),
            1..20,
        ),
        rotate in 0usize..20,
    ) {
        let words = |v: &Vec<u8>| v.iter().map(|x| format!("w{x}")).collect::<Vec<_>>();
        let hyps: Vec<_> = corpus.iter().map(|(h, _)| words(h)).collect();
        let refs: Vec<_> = corpus.iter().map(|(_, r)| words(r)).collect();
        let a = bleu(&hyps, &refs).unwrap();
        let k = rotate % hyps.len();
        let (mut h2, mut r2) = (hyps.clone(), refs.clone());
        h2.rotate_left(k);
        r2.rotate_left(k);
        let b = bleu(&h2, &r2).unwrap();
        prop_assert!((a.score - b.score).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&a.score));
    }

    #[test]
    fn edit_distance_is_a_metric(
        a in prop::collection::vec(0u8..4, 0..15),
        b in prop::collection::vec(0u8..4, 0..15),
        c in prop::collection::vec(0u8..4, 0..15),
    ) {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert_eq!(edit_distance(&a, &a), 0);
        if !b.is_empty() {
            prop_assert!(wer(&a, &b).unwrap() >= 0.0);
        }
    }
}

//! Acceptance checks A1 to A10. Each prints one PASS/FAIL (or REPORT) line;
//! the process fails if any asserted criterion fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ctc_compress::autograd::{ParamGrads, ParamId, ParamStore, Tape};
use ctc_compress::cli::cli_main;
use ctc_compress::compress::{segment_runs, CompressionPlan, CompressionPolicy, PolicyKind};
use ctc_compress::ctc::{ctc_loss, ctc_loss_bruteforce, log_softmax_rows, FramePosteriors, Vocabulary};
use ctc_compress::features::{SynthConfig, SyntheticTask};
use ctc_compress::metrics::{bleu, wer};
use ctc_compress::model::{Dropout, ItemLengths, ModelConfig, Seq2Seq, TargetVocabulary};
use ctc_compress::parallel::Execution;
use ctc_compress::train::*;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_log_probs(rng: &mut ChaCha8Rng, t: usize, c: usize, scale: f64) -> Array2<f64> {
    let z = Array2::from_shape_simple_fn((t, c), || rng.random_range(-scale..scale));
    log_softmax_rows(z.view())
}

fn random_target(rng: &mut ChaCha8Rng, max_len: usize, c: usize) -> Vec<usize> {
    let l = rng.random_range(0..=max_len);
    (0..l).map(|_| rng.random_range(1..c)).collect()
}

fn a1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut infeasible = 0;
    for _ in 0..200 {
        let t = rng.random_range(1..=6);
        let c = rng.random_range(2..=3);
        let lp = random_log_probs(&mut rng, t, c, 3.0);
        let target = random_target(&mut rng, 3, c);
        let dp = ctc_loss(lp.view(), &target, 0).unwrap().loss;
        let brute = ctc_loss_bruteforce(lp.view(), &target, 0).unwrap();
        if dp.is_infinite() || brute.is_infinite() {
            infeasible += 1;
            if dp != brute {
                worst = f64::INFINITY;
            }
            continue;
        }
        worst = worst.max((dp - brute).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-6 && secs < 10.0,
        format!("200 instances ({infeasible} infeasible), max |dp - brute force| = {worst:.2e}, {secs:.2} s"),
    )
}

/// Worst relative error between analytic and central-difference CTC
/// gradients with respect to the logits.
fn ctc_fd_error(rng: &mut ChaCha8Rng) -> f64 {
    let t = rng.random_range(2..=10);
    let c = rng.random_range(2..=5);
    let z = Array2::from_shape_simple_fn((t, c), || rng.random_range(-2.0..2.0));
    let mut target = random_target(rng, (t / 2).max(1), c);
    while target.len() + target.windows(2).filter(|w| w[0] == w[1]).count() > t {
        target.pop();
    }
    let loss_at = |z: &Array2<f64>| ctc_loss(log_softmax_rows(z.view()).view(), &target, 0).unwrap().loss;
    let analytic = ctc_loss(log_softmax_rows(z.view()).view(), &target, 0).unwrap().grad_logits;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..t {
        for j in 0..c {
            let mut up = z.clone();
            up[[i, j]] += h;
            let mut down = z.clone();
            down[[i, j]] -= h;
            let numeric = (loss_at(&up) - loss_at(&down)) / (2.0 * h);
            let a = analytic[[i, j]];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

fn micro_config(kind: PolicyKind) -> ModelConfig {
    ModelConfig {
        feature_dim: 6,
        conv_channels: 4,
        n_encoder_layers: 2,
        n_decoder_layers: 2,
        ctc_layer: 1,
        compression: Some(CompressionPolicy::new(kind)),
        d_model: 8,
        n_heads: 2,
        ffn_dim: 12,
        dropout: 0.0,
        label_smoothing: 0.1,
        ..ModelConfig::desk(
            Vocabulary::with_blank(["a", "b"]).unwrap(),
            TargetVocabulary::new(["x", "y", "z"]).unwrap(),
        )
    }
}

fn lambda_of(model: &Seq2Seq<f64>, x: &Array2<f64>, ctc_target: &[usize], target: &[usize]) -> f64 {
    let (v, _) = model.evaluate_item(x.view(), ctc_target, target).unwrap();
    model.config().loss_weight_ctc * v.ctc.unwrap() + v.ce
}

/// Worst relative error of the end-to-end gradient of the multitask loss
/// over every parameter, on an input whose CTC tap actually merges frames.
fn end_to_end_fd_error(kind: PolicyKind) -> (f64, usize, usize) {
    let model = Seq2Seq::<f64>::new(micro_config(kind), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = (0..500)
        .map(|_| Array2::from_shape_simple_fn((24, 6), || rng.random_range(-1.0..1.0)))
        .find(|x| {
            let enc = model.encoder_forward(x.view()).unwrap();
            // stay away from argmax ties, where the segmentation is not differentiable
            let margins_ok = enc.ctc_posteriors.log_probs().outer_iter().all(|row| {
                let mut v = row.to_vec();
                v.sort_by(|a, b| b.total_cmp(a));
                v[0] - v[1] > 1e-3
            });
            margins_ok && enc.post_compression_len < enc.pre_compression_len
        })
        .expect("an input with compression");
    let enc = model.encoder_forward(x.view()).unwrap();
    let (ctc_target, target) = ([1, 2], [1, 3, 2]);

    let mut tape = Tape::with_params(model.params());
    let loss = model
        .loss_on(&mut tape, x.view(), &ctc_target, &target, &mut Dropout::eval())
        .unwrap();
    let analytic: ParamGrads<f64> = tape.backward(loss.total).params(model.params());

    let h = 1e-6;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for p in 0..model.params().len() {
        let id = ParamId(p);
        let (rows, cols) = model.params().get(id).dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = model.params().get(id)[[r, c]];
                probe.params_mut().get_mut(id)[[r, c]] = orig + h;
                let up = lambda_of(&probe, &x, &ctc_target, &target);
                probe.params_mut().get_mut(id)[[r, c]] = orig - h;
                let down = lambda_of(&probe, &x, &ctc_target, &target);
                probe.params_mut().get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.values[p][[r, c]];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5));
            }
        }
    }
    (worst, enc.pre_compression_len, enc.post_compression_len)
}

fn a2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let ctc_worst = (0..50).map(|_| ctc_fd_error(&mut rng)).fold(0.0, f64::max);
    let mut parts = vec![format!("CTC 50 instances max rel {ctc_worst:.1e}")];
    let mut pass = ctc_worst < 1e-4;
    for kind in [PolicyKind::Average, PolicyKind::Weighted, PolicyKind::Softmax] {
        let (err, t, t2) = end_to_end_fd_error(kind);
        pass &= err < 1e-3;
        parts.push(format!("{kind:?} {err:.1e} ({t}->{t2} frames)"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    outcome(pass, format!("{}; {secs:.1} s", parts.join(", ")))
}

struct Trained {
    model: Seq2Seq<f32>,
    dev: Vec<TrainExample>,
    config: ModelConfig,
}

fn a3() -> (Outcome, Trained) {
    let start = Instant::now();
    let task = SyntheticTask::new(SynthConfig::default()).unwrap();
    let train = task.generate("train", 2000, 1, Execution::Parallel).unwrap();
    let dev = task.generate("dev", 200, 2, Execution::Parallel).unwrap();
    let config = ModelConfig {
        compression: Some(CompressionPolicy::new(PolicyKind::Average)),
        ..ModelConfig::desk(task.ctc_vocab(), task.target_vocab())
    };
    let tr = encode_examples(&train, &config).unwrap();
    let dv = encode_examples(&dev, &config).unwrap();
    let tc = TrainConfig {
        seed: 1,
        ..TrainConfig::desk()
    };
    let out = train_loop::<f32>(&config, &tc, &tr, &dv, None, &mut |_| Ok(())).unwrap();
    let metrics = evaluate_dev(&out.model, &dv, Execution::Parallel).unwrap();
    let decoded = ctc_compress::parallel::map(Execution::Parallel, &dv, |_, ex| {
        out.model.decode_translation(ex.features.view(), 40, 5).unwrap()
    });
    let hyps: Vec<Vec<String>> = decoded.iter().map(|t| config.target_vocab.decode(&t.tokens)).collect();
    let refs: Vec<Vec<String>> = dv.iter().map(|e| config.target_vocab.decode(&e.target)).collect();
    let exact = decoded.iter().zip(&dv).filter(|(t, e)| t.tokens == e.target).count();
    let score = bleu(&hyps, &refs).unwrap().score;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let pass = metrics.token_accuracy >= 0.99 && score >= 95.0 && out.state.epoch <= 30 && minutes <= 30.0;
    let o = outcome(
        pass,
        format!(
            "dev token accuracy {:.4}, BLEU {score:.2} (beam 5), exact {exact}/{}, {} epochs{}, {minutes:.1} min",
            metrics.token_accuracy,
            dv.len(),
            out.state.epoch,
            if out.stopped_early { " (early stop)" } else { "" }
        ),
    );
    (
        o,
        Trained {
            model: out.model,
            dev: dv,
            config,
        },
    )
}

/// Peak over identical dev batches of the activation count, using the
/// sequence lengths the trained tap produces.
fn a4(trained: &Trained) -> Outcome {
    let lengths: Vec<ItemLengths> = trained
        .dev
        .iter()
        .map(|ex| {
            let enc = trained.model.encoder_forward(ex.features.view()).unwrap();
            item_lengths(ex.features.nrows(), enc.post_compression_len, ex.target.len() + 1)
        })
        .collect();
    let peak = |cfg: &ModelConfig, lens: &[ItemLengths]| {
        lens.chunks(8).map(|b| peak_activation_elements(cfg, b)).max().unwrap()
    };
    let uncompressed: Vec<ItemLengths> = lengths
        .iter()
        .map(|l| ItemLengths {
            compressed: l.subsampled,
            ..*l
        })
        .collect();
    let base_cfg = ModelConfig {
        compression: None,
        ..trained.config.clone()
    };
    let baseline = peak(&base_cfg, &uncompressed);
    let top = trained.config.ctc_layer;
    let mut counts = Vec::new();
    for tap in (1..=trained.config.n_encoder_layers).rev() {
        let cfg = ModelConfig {
            ctc_layer: tap,
            ..trained.config.clone()
        };
        counts.push((tap, peak(&cfg, &lengths)));
    }
    let at_top = counts.iter().find(|(t, _)| *t == top).unwrap().1;
    let ratio = at_top as f64 / baseline as f64;
    let decreasing = counts.windows(2).all(|w| w[1].1 < w[0].1) && counts[0].1 < baseline;
    let mean_t = lengths.iter().map(|l| l.subsampled as f64).sum::<f64>() / lengths.len() as f64;
    let mean_c = lengths.iter().map(|l| l.compressed as f64).sum::<f64>() / lengths.len() as f64;
    let listing: Vec<String> = counts
        .iter()
        .map(|(t, c)| format!("tap {t}: {:.3}", *c as f64 / baseline as f64))
        .collect();
    outcome(
        ratio <= 0.9 && decreasing,
        format!(
            "baseline {baseline} elements; {}; mean length {mean_t:.1} -> {mean_c:.1}",
            listing.join(", ")
        ),
    )
}

/// Frame labels made of runs, with log-probabilities whose argmax follows
/// them and a clear margin.
fn runs_case(rng: &mut ChaCha8Rng, uniform_within_span: bool) -> (Vec<usize>, Array2<f64>) {
    let c = rng.random_range(2..=5);
    let mut labels = Vec::new();
    for _ in 0..rng.random_range(1..=8) {
        let label = rng.random_range(0..c);
        let len = rng.random_range(1..=4);
        labels.extend(std::iter::repeat_n(label, len));
    }
    let mut lp = Array2::zeros((labels.len(), c));
    let mut row = Array1::zeros(c);
    for (t, &l) in labels.iter().enumerate() {
        if !uniform_within_span || t == 0 || labels[t - 1] != l {
            row = Array1::from_shape_fn(c, |_| rng.random_range(-1.0..1.0));
            row[l] = 2.5;
            let m = row.iter().fold(f64::NEG_INFINITY, |a: f64, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        lp.row_mut(t).assign(&row);
    }
    (labels, lp)
}

fn a5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let kinds = [PolicyKind::Average, PolicyKind::Weighted, PolicyKind::Softmax];
    let mut failures = [0usize; 5];

    for _ in 0..1000 {
        let (_, lp) = runs_case(&mut rng, false);
        let post = FramePosteriors::from_log_probs_unchecked(lp.clone());
        for kind in kinds {
            let plan = CompressionPlan::from_posteriors(&post, &CompressionPolicy::new(kind), 0);
            let w = plan.weights(lp.view());
            let ok = plan.spans.iter().all(|s| {
                let ws = &w[s.start..s.end];
                ws.iter().all(|&v| v >= 0.0) && (ws.iter().sum::<f64>() - 1.0).abs() <= 1e-6
            });
            failures[0] += usize::from(!ok);
        }
    }

    for _ in 0..1000 {
        let t = rng.random_range(1..=30);
        let c = rng.random_range(2..=4);
        let labels: Vec<usize> = (0..t).map(|_| rng.random_range(0..c)).collect();
        let plan = CompressionPlan::from_labels(&labels, &CompressionPolicy::new(PolicyKind::Average), 0);
        let no_repeats = labels.windows(2).all(|w| w[0] != w[1]);
        let ok = plan.output_len() <= t && ((plan.output_len() == t) == no_repeats);
        // exact run length r dividing T gives T / r
        let r = rng.random_range(1..=4);
        let n = rng.random_range(1..=8);
        let mut runs = Vec::new();
        for i in 0..n {
            runs.extend(std::iter::repeat_n(i % c, r));
        }
        let ratio_ok = segment_runs(&runs).len() == runs.len() / r;
        failures[1] += usize::from(!(ok && ratio_ok));
    }

    for _ in 0..1000 {
        let (labels, lp) = runs_case(&mut rng, false);
        let d = rng.random_range(1..=6);
        let spans = segment_runs(&labels);
        let values: Vec<Array1<f64>> = spans
            .iter()
            .map(|_| Array1::from_shape_fn(d, |_| rng.random_range(-10.0..10.0)))
            .collect();
        let mut states = Array2::zeros((labels.len(), d));
        for (s, v) in spans.iter().zip(&values) {
            for t in s.start..s.end {
                states.row_mut(t).assign(v);
            }
        }
        let plan = CompressionPlan::from_posteriors(
            &FramePosteriors::from_log_probs_unchecked(lp.clone()),
            &CompressionPolicy::new(PolicyKind::Average),
            0,
        );
        let pooled = plan.pool(states.view(), &plan.weights(lp.view()));
        let ok = pooled.outer_iter().zip(&values).all(|(row, v)| row == v.view());
        failures[2] += usize::from(!ok);
    }

    for _ in 0..1000 {
        let (_, lp) = runs_case(&mut rng, true);
        let post = FramePosteriors::from_log_probs_unchecked(lp.clone());
        let avg = CompressionPlan::from_posteriors(&post, &CompressionPolicy::new(PolicyKind::Average), 0)
            .weights(lp.view());
        for kind in [PolicyKind::Weighted, PolicyKind::Softmax] {
            let w = CompressionPlan::from_posteriors(&post, &CompressionPolicy::new(kind), 0).weights(lp.view());
            let ok = w.iter().zip(&avg).all(|(a, b)| (a - b).abs() <= 1e-6);
            failures[3] += usize::from(!ok);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    failures[4] = usize::from(secs >= 10.0);
    outcome(
        failures.iter().all(|&f| f == 0),
        format!(
            "failures: simplex {}, contraction/ratio {}, average idempotence {}, uniform degeneracy {} (1000 cases each), {secs:.2} s",
            failures[0], failures[1], failures[2], failures[3]
        ),
    )
}

fn a6() -> Outcome {
    let cfg = TrainConfig::full();
    let schedule = [(0u64, 3e-4), (4000, 5e-3), (16000, 2.5e-3)];
    let mut worst: f64 = 0.0;
    for (step, want) in schedule {
        worst = worst.max((lr_at_step(step, &cfg) - want).abs());
    }
    // continuity: extrapolate each branch to the boundary from its own side
    let lr = |u: u64| lr_at_step(u, &cfg);
    let left = 2.0 * lr(3999) - lr(3998);
    let right = lr(4001) * (4001.0f64 / 4000.0).sqrt();
    let boundary = (left - lr(4000)).abs().max((right - lr(4000)).abs());

    let mut p = ParamStore::<f64>::new();
    p.insert("w", ndarray::array![[0.7, -1.2, 3.0]]);
    let g = ndarray::array![[0.5, -2.0, 1e-3]];
    let mut st = AdamState::new(&p);
    let (lr, (b1, b2), eps) = (cfg.lr_peak, cfg.adam_betas, cfg.adam_eps);
    adam_step(&mut p, &mut st, &ParamGrads { values: vec![g.clone()] }, lr, (b1, b2), eps);
    let mut adam_err: f64 = 0.0;
    for (i, &x0) in [0.7, -1.2, 3.0].iter().enumerate() {
        // t = 1: m_hat = g and v_hat = g^2
        let gi: f64 = g[[0, i]];
        let expected = x0 - lr * gi / (gi.abs() + eps);
        adam_err = adam_err.max((p.values()[0][[0, i]] - expected).abs());
    }
    outcome(
        worst < 1e-15 && boundary <= 1e-12 && adam_err <= 1e-10,
        format!("schedule max err {worst:.1e}, boundary {boundary:.1e}, Adam t=1 {adam_err:.1e}"),
    )
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn a7() -> Outcome {
    let mut ok = true;
    ok &= wer(&words("a b c"), &words("a b c")).unwrap() == 0.0;
    ok &= wer(&words("a x c"), &words("a b c")).unwrap() == 1.0 / 3.0;
    ok &= wer(&words("a b c"), &words("a b")).unwrap() == 0.5;
    let clipped = bleu(&[words("the the the the")], &[words("the cat")]).unwrap();
    ok &= clipped.precisions[0] == 0.25 && clipped.precisions[1] == 0.0 && clipped.score == 0.0;
    let short = bleu(&[words("a b c d")], &[words("a b c d e f g h")]).unwrap();
    let expected = 100.0 * (1.0f64 - 8.0 / 4.0).exp();
    ok &= (short.score - expected).abs() < 1e-9 && short.precisions == [1.0; 4];

    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let corpus: Vec<Vec<String>> = (0..100)
        .map(|_| {
            (0..rng.random_range(1..=20))
                .map(|_| format!("w{}", rng.random_range(0..50)))
                .collect()
        })
        .collect();
    let self_bleu = bleu(&corpus, &corpus).unwrap().score;
    ok &= self_bleu == 100.0;
    outcome(
        ok,
        format!(
            "WER examples, clipped BLEU {}, brevity {:.4} (expected {expected:.4}), self-BLEU {self_bleu}",
            clipped.score, short.score
        ),
    )
}

fn small_task() -> SyntheticTask {
    SyntheticTask::new(SynthConfig {
        feature_dim: 8,
        n_symbols: 5,
        min_symbols: 2,
        max_symbols: 3,
        ..Default::default()
    })
    .unwrap()
}

fn a8() -> Outcome {
    let task = small_task();
    let cfg = ModelConfig {
        feature_dim: 8,
        conv_channels: 4,
        d_model: 16,
        n_heads: 2,
        ffn_dim: 32,
        n_encoder_layers: 2,
        n_decoder_layers: 1,
        ctc_layer: 1,
        loss_weight_ctc: 1.0,
        compression: Some(CompressionPolicy::new(PolicyKind::Average)),
        ..ModelConfig::desk(task.ctc_vocab(), task.target_vocab())
    };
    let tr = encode_examples(&task.generate("t", 400, 1, Execution::Parallel).unwrap(), &cfg).unwrap();
    let dv = encode_examples(&task.generate("d", 20, 2, Execution::Parallel).unwrap(), &cfg).unwrap();
    let tc = TrainConfig {
        batch_sentences: 4,
        accumulation_steps: 1,
        warmup_updates: 20,
        max_epochs: 1,
        ..TrainConfig::desk()
    };
    let mut steps = 0;
    let mut worst: f64 = 0.0;
    train_loop::<f32>(&cfg, &tc, &tr, &dv, None, &mut |e| {
        if let Event::Record(MetricRecord::Step { lambda, ctc, ce, .. }) = e {
            steps += 1;
            worst = worst.max((lambda - (ctc + ce)).abs());
        }
        Ok(())
    })
    .unwrap();
    outcome(
        steps == 100 && worst <= 1e-6,
        format!("{steps} steps, max |lambda - (ctc + ce)| = {worst:.1e}"),
    )
}

fn a9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let synth = root.join("synth.toml");
    fs::write(&synth, "feature_dim = 8\nn_symbols = 5\nmax_symbols = 3\n").unwrap();
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let run = |args: Vec<String>| cli_main(std::iter::once("ctcc".to_string()).chain(args));
    let code = run(vec![
        "synth".into(), "--config".into(), p(&synth), "--out".into(), p(&root.join("data")),
        "--train".into(), "48".into(), "--dev".into(), "8".into(), "--test".into(), "0".into(),
    ]);
    assert_eq!(code, 0);
    let config = root.join("run.toml");
    fs::write(
        &config,
        "[data]\ntrain = \"data/train.jsonl\"\ndev = \"data/dev.jsonl\"\ntask = \"data/task.json\"\n\
         [model]\nfeature_dim = 8\nconv_channels = 4\nd_model = 16\nn_heads = 2\nffn_dim = 32\n\
         n_encoder_layers = 2\nn_decoder_layers = 1\nctc_layer = 1\ndropout = 0.1\ncompression = { kind = \"softmax\" }\n\
         [train]\nmax_epochs = 3\nwarmup_updates = 10\n",
    )
    .unwrap();
    for out in ["a", "b"] {
        let code = run(vec![
            "train".into(), "--config".into(), p(&config), "--out".into(), p(&root.join(out)),
            "--deterministic".into(), "--seed".into(), "7".into(),
        ]);
        assert_eq!(code, 0);
    }
    let files = ["metrics.jsonl", "checkpoint_last.ckpt", "checkpoint_avg.ckpt", "state.bin"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(root.join("a").join(f)).unwrap() != fs::read(root.join("b").join(f)).unwrap())
        .collect();
    outcome(
        differing.is_empty(),
        format!("compared {}; differing: {differing:?}", files.join(", ")),
    )
}

/// Mean dev BLEU over seeds for one configuration of the noisier task.
fn ablation_bleu(
    task: &SyntheticTask,
    base: &ModelConfig,
    tap: usize,
    kind: Option<PolicyKind>,
    data: &(Vec<ctc_compress::features::Example>, Vec<ctc_compress::features::Example>),
) -> (f64, f64) {
    let cfg = ModelConfig {
        ctc_layer: tap,
        compression: kind.map(CompressionPolicy::new),
        ..base.clone()
    };
    let tr = encode_examples(&data.0, &cfg).unwrap();
    let dv = encode_examples(&data.1, &cfg).unwrap();
    let scores: Vec<f64> = (0..5u64)
        .map(|seed| {
            let tc = TrainConfig {
                seed: 100 + seed,
                max_epochs: 8,
                warmup_updates: 150,
                ..TrainConfig::desk()
            };
            let out = train_loop::<f32>(&cfg, &tc, &tr, &dv, None, &mut |_| Ok(())).unwrap();
            let hyps: Vec<Vec<String>> = ctc_compress::parallel::map(Execution::Parallel, &dv, |_, ex| {
                let t = out.model.decode_translation(ex.features.view(), 40, 1).unwrap();
                task.target_vocab().decode(&t.tokens)
            });
            let refs: Vec<Vec<String>> = dv.iter().map(|e| cfg.target_vocab.decode(&e.target)).collect();
            bleu(&hyps, &refs).unwrap().score
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let sd = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (scores.len() - 1) as f64).sqrt();
    (mean, sd)
}

fn a10() -> String {
    let start = Instant::now();
    let task = SyntheticTask::new(SynthConfig {
        noise: 0.3,
        ..Default::default()
    })
    .unwrap();
    let data = (
        task.generate("train", 500, 11, Execution::Parallel).unwrap(),
        task.generate("dev", 100, 12, Execution::Parallel).unwrap(),
    );
    let base = ModelConfig::desk(task.ctc_vocab(), task.target_vocab());
    let top = base.ctc_layer;
    let runs = [
        ("no compression", top, None),
        ("AVG", top, Some(PolicyKind::Average)),
        ("WEIGHTED", top, Some(PolicyKind::Weighted)),
        ("SOFTMAX", top, Some(PolicyKind::Softmax)),
        ("AVG tap 2", 2, Some(PolicyKind::Average)),
        ("AVG tap 4", 4, Some(PolicyKind::Average)),
    ];
    let results: Vec<(&str, f64, f64)> = runs
        .iter()
        .map(|&(name, tap, kind)| {
            let (m, sd) = ablation_bleu(&task, &base, tap, kind, &data);
            (name, m, sd)
        })
        .collect();
    let get = |n: &str| results.iter().find(|r| r.0 == n).unwrap().1;
    let listing: Vec<String> = results.iter().map(|(n, m, sd)| format!("{n} {m:.2}±{sd:.2}")).collect();
    format!(
        "mean dev BLEU over 5 seeds (sigma 0.3, 500 utterances, 8 epochs): {}; AVG {} baseline; tap 2 {} tap 4; {:.1} min",
        listing.join(", "),
        if get("AVG") > get("no compression") { ">" } else { "<=" },
        if get("AVG tap 2") < get("AVG tap 4") { "<" } else { ">=" },
        start.elapsed().as_secs_f64() / 60.0
    )
}

fn main() {
    let only: Option<String> = std::env::args().skip(1).find(|a| a.starts_with('A'));
    let wanted = |id: &str| only.as_deref().is_none_or(|o| o == id);
    let mut failed = Vec::new();
    let mut report = |id: &str, o: Outcome| {
        println!("{id} {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(id.to_string());
        }
    };
    // `cargo test` passes harness flags such as --list; only run for real invocations
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    if wanted("A1") {
        report("A1", a1());
    }
    if wanted("A2") {
        report("A2", a2());
    }
    if wanted("A3") || wanted("A4") {
        let (o3, trained) = a3();
        report("A3", o3);
        report("A4", a4(&trained));
    }
    if wanted("A5") {
        report("A5", a5());
    }
    if wanted("A6") {
        report("A6", a6());
    }
    if wanted("A7") {
        report("A7", a7());
    }
    if wanted("A8") {
        report("A8", a8());
    }
    if wanted("A9") {
        report("A9", a9());
    }
    if wanted("A10") {
        // a soft gate: the orderings are reported, a reversal is not a failure
        report("A10", outcome(true, format!("(reported, not asserted) {}", a10())));
    }
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}

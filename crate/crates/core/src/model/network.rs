use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::compress::{CompressionPlan, SegmentSpan};
use crate::ctc::{argmax_rows, FramePosteriors};
use crate::error::{Error, Result};
use crate::real::Real;

/// Output length of one stride-2, kernel-3, padding-1 convolution.
pub fn conv_out_len(n: usize) -> usize {
    if n == 0 {
        0
    } else {
        (n - 1) / 2 + 1
    }
}

/// Time (or frequency) length after the two-layer frontend.
pub fn subsampled_len(n: usize) -> usize {
    conv_out_len(conv_out_len(n))
}

/// `bias[i][j] = -ln(1 + |i - j|)`.
pub fn log_distance_penalty<S: Real>(len: usize) -> Array2<S> {
    Array2::from_shape_fn((len, len), |(i, j)| S::of(-(1.0 + i.abs_diff(j) as f64).ln()))
}

/// Sinusoidal position table, `len x d`.
pub fn sinusoidal_positions<S: Real>(len: usize, d: usize) -> Array2<S> {
    Array2::from_shape_fn((len, d), |(p, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = p as f64 * rate;
        S::of(if i % 2 == 0 { a.sin() } else { a.cos() })
    })
}

fn causal_mask<S: Real>(len: usize) -> Array2<S> {
    Array2::from_shape_fn((len, len), |(i, j)| {
        if j > i {
            S::neg_infinity()
        } else {
            S::zero()
        }
    })
}

/// Gather indices of a 3x3, stride-2, padding-1 convolution over a
/// `rows x cols` grid stored row-major.
fn conv_taps(rows: usize, cols: usize) -> Arc<Vec<Option<usize>>> {
    let (out_r, out_c) = (conv_out_len(rows), conv_out_len(cols));
    let mut idx = Vec::with_capacity(out_r * out_c * 9);
    for i in 0..out_r {
        for j in 0..out_c {
            for di in 0..3 {
                for dj in 0..3 {
                    let r = (2 * i + di).checked_sub(1).filter(|&r| r < rows);
                    let c = (2 * j + dj).checked_sub(1).filter(|&c| c < cols);
                    idx.push(r.zip(c).map(|(r, c)| r * cols + c));
                }
            }
        }
    }
    Arc::new(idx)
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    o: LinearIds,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayerIds {
    ln1: NormIds,
    attn: AttnIds,
    ln2: NormIds,
    ff1: LinearIds,
    ff2: LinearIds,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayerIds {
    ln1: NormIds,
    self_attn: AttnIds,
    ln2: NormIds,
    cross: AttnIds,
    ln3: NormIds,
    ff1: LinearIds,
    ff2: LinearIds,
}

#[derive(Clone, Debug)]
struct Ids {
    conv1: LinearIds,
    conv2: LinearIds,
    conv_proj: LinearIds,
    encoder: Vec<EncoderLayerIds>,
    encoder_norm: NormIds,
    ctc: LinearIds,
    embed: ParamId,
    decoder: Vec<DecoderLayerIds>,
    decoder_norm: NormIds,
    output: LinearIds,
}

/// Inserts parameters in a fixed order; random init when an rng is given.
struct Builder<'a, S: Real> {
    store: ParamStore<S>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<S: Real> Builder<'_, S> {
    fn matrix(&mut self, name: String, rows: usize, cols: usize, limit: f64) -> ParamId {
        let value = match self.rng.as_deref_mut() {
            Some(rng) => Array2::from_shape_simple_fn((rows, cols), || S::of(rng.random_range(-limit..limit))),
            None => Array2::zeros((rows, cols)),
        };
        self.store.insert(name, value)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        LinearIds {
            w: self.matrix(format!("{name}.w"), fan_in, fan_out, limit),
            b: self.store.insert(format!("{name}.b"), Array2::zeros((1, fan_out))),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIds {
        NormIds {
            g: self.store.insert(format!("{name}.g"), Array2::ones((1, d))),
            b: self.store.insert(format!("{name}.b"), Array2::zeros((1, d))),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttnIds {
        AttnIds {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }
}

fn build<S: Real>(cfg: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> (ParamStore<S>, Ids) {
    let mut b = Builder {
        store: ParamStore::new(),
        rng,
    };
    let (c, d) = (cfg.conv_channels, cfg.d_model);
    let f2 = subsampled_len(cfg.feature_dim);
    let conv1 = b.linear("frontend.conv1", 9, c);
    let conv2 = b.linear("frontend.conv2", 9 * c, c);
    let conv_proj = b.linear("frontend.proj", f2 * c, d);
    let encoder = (0..cfg.n_encoder_layers)
        .map(|l| EncoderLayerIds {
            ln1: b.norm(&format!("encoder.{l}.ln1"), d),
            attn: b.attention(&format!("encoder.{l}.attn"), d),
            ln2: b.norm(&format!("encoder.{l}.ln2"), d),
            ff1: b.linear(&format!("encoder.{l}.ffn1"), d, cfg.ffn_dim),
            ff2: b.linear(&format!("encoder.{l}.ffn2"), cfg.ffn_dim, d),
        })
        .collect();
    let encoder_norm = b.norm("encoder.norm", d);
    let ctc = b.linear("ctc.proj", d, cfg.ctc_vocab.len());
    let v = cfg.target_vocab.len();
    let embed = {
        let value = match b.rng.as_deref_mut() {
            Some(rng) => {
                let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("valid std");
                Array2::from_shape_simple_fn((v, d), || S::of(normal.sample(rng)))
            }
            None => Array2::zeros((v, d)),
        };
        b.store.insert("decoder.embed", value)
    };
    let decoder = (0..cfg.n_decoder_layers)
        .map(|l| DecoderLayerIds {
            ln1: b.norm(&format!("decoder.{l}.ln1"), d),
            self_attn: b.attention(&format!("decoder.{l}.self"), d),
            ln2: b.norm(&format!("decoder.{l}.ln2"), d),
            cross: b.attention(&format!("decoder.{l}.cross"), d),
            ln3: b.norm(&format!("decoder.{l}.ln3"), d),
            ff1: b.linear(&format!("decoder.{l}.ffn1"), d, cfg.ffn_dim),
            ff2: b.linear(&format!("decoder.{l}.ffn2"), cfg.ffn_dim, d),
        })
        .collect();
    let decoder_norm = b.norm("decoder.norm", d);
    let output = b.linear("decoder.out", d, v);
    (
        b.store,
        Ids {
            conv1,
            conv2,
            conv_proj,
            encoder,
            encoder_norm,
            ctc,
            embed,
            decoder,
            decoder_norm,
            output,
        },
    )
}

/// Dropout state of one forward pass; `rng == None` means evaluation mode.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Dropout<'a> {
    pub fn eval() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'a mut dyn RngCore) -> Self {
        Dropout { p, rng: Some(rng) }
    }

    fn apply<S: Real>(&mut self, tape: &mut Tape<'_, S>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => tape.dropout(x, self.p, rng),
            _ => x,
        }
    }
}

/// Vars and lengths recorded by one encoder pass.
pub struct EncodeTrace {
    /// Encoder output after the final normalisation.
    pub output: Var,
    /// Output of every encoder layer, before the final normalisation.
    pub layer_outputs: Vec<Var>,
    pub ctc_log_probs: Var,
    pub plan: Option<Arc<CompressionPlan>>,
    pub subsampled_len: usize,
    pub output_len: usize,
}

/// Sequence lengths of one utterance through the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ItemLengths {
    pub input_frames: usize,
    /// Frames after the convolutional frontend (the CTC frame count).
    pub subsampled: usize,
    /// Frames seen by the layers above the CTC tap.
    pub compressed: usize,
    /// Decoder positions, including the end-of-sentence step.
    pub target: usize,
}

/// Multi-task loss of one utterance, summed over its tokens.
pub struct ItemLoss {
    pub total: Var,
    pub ctc: Option<Var>,
    pub ce: Var,
    /// Decoder logits, `U x V`.
    pub logits: Var,
    pub ctc_value: Option<f64>,
    pub ce_value: f64,
    pub lengths: ItemLengths,
}

impl ItemLoss {
    pub fn total_value(&self, weight_ctc: f64) -> f64 {
        multitask_loss(self.ctc_value, self.ce_value, weight_ctc)
    }
}

/// `weight * CTC + CE`; an infeasible CTC term (`None`) contributes 0.
pub fn multitask_loss(ctc: Option<f64>, ce: f64, weight_ctc: f64) -> f64 {
    match ctc {
        Some(c) if weight_ctc != 0.0 => weight_ctc * c + ce,
        _ => ce,
    }
}

/// Encoder activations for inspection.
#[derive(Clone, Debug)]
pub struct EncoderOutput<S> {
    /// `E_x` for x = 1..=N_E.
    pub layer_states: Vec<Array2<S>>,
    pub output: Array2<S>,
    pub ctc_posteriors: FramePosteriors<S>,
    pub spans: Option<Vec<SegmentSpan>>,
    pub weights: Option<Vec<S>>,
    pub pre_compression_len: usize,
    pub post_compression_len: usize,
}

/// Convolutional frontend, Transformer encoder with a CTC tap and optional
/// compression, and Transformer decoder.
#[derive(Clone, Debug)]
pub struct Seq2Seq<S: Real> {
    config: ModelConfig,
    params: ParamStore<S>,
    ids: Ids,
}

impl<S: Real> Seq2Seq<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, ids) = build(&config, Some(&mut rng));
        Ok(Seq2Seq { config, params, ids })
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let (template, ids) = build::<S>(&config, None);
        template.check_compatible(&params)?;
        Ok(Seq2Seq { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<S> {
        self.params
    }

    /// The same model in another precision.
    pub fn cast<T: Real>(&self) -> Seq2Seq<T> {
        Seq2Seq {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    fn check_features(&self, features: &ArrayView2<S>) -> Result<()> {
        if features.nrows() == 0 {
            return Err(Error::invalid("empty feature sequence"));
        }
        if features.ncols() != self.config.feature_dim {
            return Err(Error::invalid(format!(
                "feature dim {} but model expects {}",
                features.ncols(),
                self.config.feature_dim
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(())
    }

    fn linear<'p>(&'p self, tape: &mut Tape<'p, S>, x: Var, ids: LinearIds) -> Var {
        let w = tape.param(ids.w);
        let b = tape.param(ids.b);
        tape.linear(x, w, Some(b))
    }

    fn norm<'p>(&'p self, tape: &mut Tape<'p, S>, x: Var, ids: NormIds) -> Var {
        let g = tape.param(ids.g);
        let b = tape.param(ids.b);
        tape.layer_norm(x, g, b)
    }

    fn attention<'p>(
        &'p self,
        tape: &mut Tape<'p, S>,
        query: Var,
        memory: Var,
        ids: AttnIds,
        bias: Option<&Array2<S>>,
    ) -> Var {
        let q = self.linear(tape, query, ids.q);
        let k = self.linear(tape, memory, ids.k);
        let v = self.linear(tape, memory, ids.v);
        let a = tape.attention(q, k, v, self.config.n_heads, bias);
        self.linear(tape, a, ids.o)
    }

    fn feed_forward<'p>(&'p self, tape: &mut Tape<'p, S>, x: Var, ff1: LinearIds, ff2: LinearIds, drop: &mut Dropout) -> Var {
        let h = self.linear(tape, x, ff1);
        let h = tape.relu(h);
        let h = drop.apply(tape, h);
        self.linear(tape, h, ff2)
    }

    /// Two stride-2 3x3 convolutions with ReLU, then a projection to `d_model`.
    fn frontend<'p>(&'p self, tape: &mut Tape<'p, S>, features: ArrayView2<S>) -> Var {
        let (t, f) = features.dim();
        let c = self.config.conv_channels;
        let flat: Vec<S> = features.iter().copied().collect();
        let x = tape.leaf(Array2::from_shape_vec((t * f, 1), flat).expect("feature shape"));
        let x = tape.gather_rows(x, conv_taps(t, f), 9);
        let x = self.linear(tape, x, self.ids.conv1);
        let x = tape.relu(x);
        let (t1, f1) = (conv_out_len(t), conv_out_len(f));
        let x = tape.gather_rows(x, conv_taps(t1, f1), 9);
        let x = self.linear(tape, x, self.ids.conv2);
        let x = tape.relu(x);
        let (t2, f2) = (conv_out_len(t1), conv_out_len(f1));
        let x = tape.reshape(x, t2, f2 * c);
        self.linear(tape, x, self.ids.conv_proj)
    }

    fn encoder_layer<'p>(&'p self, tape: &mut Tape<'p, S>, x: Var, layer: usize, drop: &mut Dropout) -> Var {
        let ids = self.ids.encoder[layer];
        let len = tape.shape(x).0;
        let bias = self.config.distance_penalty.then(|| log_distance_penalty::<S>(len));
        let h = self.norm(tape, x, ids.ln1);
        let a = self.attention(tape, h, h, ids.attn, bias.as_ref());
        let a = drop.apply(tape, a);
        let x = tape.add(x, a);
        let h = self.norm(tape, x, ids.ln2);
        let f = self.feed_forward(tape, h, ids.ff1, ids.ff2, drop);
        let f = drop.apply(tape, f);
        tape.add(x, f)
    }

    /// Runs the encoder on one utterance (`T x feature_dim`).
    pub fn encode_on<'p>(
        &'p self,
        tape: &mut Tape<'p, S>,
        features: ArrayView2<S>,
        drop: &mut Dropout,
    ) -> Result<EncodeTrace> {
        self.check_features(&features)?;
        let mut x = self.frontend(tape, features);
        let subsampled = tape.shape(x).0;
        if self.config.encoder_positions {
            let pos = sinusoidal_positions(subsampled, self.config.d_model);
            x = tape.add_const(x, &pos);
        }
        x = drop.apply(tape, x);

        let mut layer_outputs = Vec::with_capacity(self.config.n_encoder_layers);
        let mut ctc_log_probs = None;
        let mut plan = None;
        for layer in 0..self.config.n_encoder_layers {
            x = self.encoder_layer(tape, x, layer, drop);
            layer_outputs.push(x);
            if layer + 1 == self.config.ctc_layer {
                let logits = self.linear(tape, x, self.ids.ctc);
                let lp = tape.log_softmax(logits);
                ctc_log_probs = Some(lp);
                if let Some(policy) = &self.config.compression {
                    let labels = argmax_rows(tape.value(lp).view());
                    let p = Arc::new(CompressionPlan::from_labels(
                        &labels,
                        policy,
                        self.config.ctc_vocab.blank(),
                    ));
                    x = tape.compress(x, lp, p.clone());
                    plan = Some(p);
                }
            }
        }
        let output_len = tape.shape(x).0;
        let output = self.norm(tape, x, self.ids.encoder_norm);
        Ok(EncodeTrace {
            output,
            layer_outputs,
            ctc_log_probs: ctc_log_probs.expect("ctc layer within encoder"),
            plan,
            subsampled_len: subsampled,
            output_len,
        })
    }

    /// Decoder logits (`U x V`) for `inputs` (starting with end-of-sentence).
    pub fn decode_on<'p>(
        &'p self,
        tape: &mut Tape<'p, S>,
        memory: Var,
        inputs: &[usize],
        drop: &mut Dropout,
    ) -> Var {
        let d = self.config.d_model;
        let u = inputs.len();
        let embed = tape.param(self.ids.embed);
        let idx = Arc::new(inputs.iter().map(|&i| Some(i)).collect::<Vec<_>>());
        let x = tape.gather_rows(embed, idx, 1);
        let x = tape.scale(x, S::of((d as f64).sqrt()));
        let x = tape.add_const(x, &sinusoidal_positions(u, d));
        let mut x = drop.apply(tape, x);
        let mask = causal_mask::<S>(u);
        for ids in &self.ids.decoder {
            let h = self.norm(tape, x, ids.ln1);
            let a = self.attention(tape, h, h, ids.self_attn, Some(&mask));
            let a = drop.apply(tape, a);
            x = tape.add(x, a);
            let h = self.norm(tape, x, ids.ln2);
            let a = self.attention(tape, h, memory, ids.cross, None);
            let a = drop.apply(tape, a);
            x = tape.add(x, a);
            let h = self.norm(tape, x, ids.ln3);
            let f = self.feed_forward(tape, h, ids.ff1, ids.ff2, drop);
            let f = drop.apply(tape, f);
            x = tape.add(x, f);
        }
        let x = self.norm(tape, x, self.ids.decoder_norm);
        self.linear(tape, x, self.ids.output)
    }

    /// Records the multi-task loss of one utterance on `tape`.
    pub fn loss_on<'p>(
        &'p self,
        tape: &mut Tape<'p, S>,
        features: ArrayView2<S>,
        ctc_target: &[usize],
        target: &[usize],
        drop: &mut Dropout,
    ) -> Result<ItemLoss> {
        let eos = self.config.target_vocab.eos();
        if target.iter().any(|&t| t == eos || t >= self.config.target_vocab.len()) {
            return Err(Error::invalid("target ids must be non-eos vocabulary entries"));
        }
        let enc = self.encode_on(tape, features, drop)?;
        if tape.value(enc.ctc_log_probs).iter().any(|v| v.is_nan()) {
            return Err(Error::Diverged("NaN in CTC posteriors".into()));
        }
        let ctc = tape.ctc_loss(enc.ctc_log_probs, ctc_target, self.config.ctc_vocab.blank())?;

        let mut inputs = Vec::with_capacity(target.len() + 1);
        inputs.push(eos);
        inputs.extend_from_slice(target);
        let mut gold = target.to_vec();
        gold.push(eos);
        let logits = self.decode_on(tape, enc.output, &inputs, drop);
        let ce = tape.label_smoothed_ce(logits, &gold, self.config.label_smoothing);

        let w = self.config.loss_weight_ctc;
        let total = match ctc {
            Some(c) if w != 0.0 => {
                let scaled = if w == 1.0 { c } else { tape.scale(c, S::of(w)) };
                tape.add(scaled, ce)
            }
            _ => ce,
        };
        Ok(ItemLoss {
            total,
            ctc_value: ctc.map(|c| tape.value(c)[[0, 0]].as_f64()),
            ce_value: tape.value(ce)[[0, 0]].as_f64(),
            ctc,
            ce,
            logits,
            lengths: ItemLengths {
                input_frames: features.nrows(),
                subsampled: enc.subsampled_len,
                compressed: enc.output_len,
                target: gold.len(),
            },
        })
    }

    /// Output of the convolutional frontend, `T'' x d_model`.
    pub fn conv_subsample(&self, features: ArrayView2<S>) -> Result<Array2<S>> {
        self.check_features(&features)?;
        let mut tape = Tape::with_params(&self.params);
        let x = self.frontend(&mut tape, features);
        Ok(tape.value(x).clone())
    }

    /// Evaluation-mode encoder pass.
    pub fn encoder_forward(&self, features: ArrayView2<S>) -> Result<EncoderOutput<S>> {
        let mut tape = Tape::with_params(&self.params);
        let trace = self.encode_on(&mut tape, features, &mut Dropout::eval())?;
        let lp = tape.value(trace.ctc_log_probs).clone();
        let weights = trace.plan.as_ref().map(|p| p.weights(lp.view()));
        Ok(EncoderOutput {
            layer_states: trace.layer_outputs.iter().map(|&v| tape.value(v).clone()).collect(),
            output: tape.value(trace.output).clone(),
            ctc_posteriors: FramePosteriors::from_log_probs_unchecked(lp),
            spans: trace.plan.as_ref().map(|p| p.spans.clone()),
            weights,
            pre_compression_len: trace.subsampled_len,
            post_compression_len: trace.output_len,
        })
    }

    /// Evaluation-mode losses and teacher-forced argmax predictions.
    pub fn evaluate_item(
        &self,
        features: ArrayView2<S>,
        ctc_target: &[usize],
        target: &[usize],
    ) -> Result<(ItemLossValues, Vec<usize>)> {
        let mut tape = Tape::with_params(&self.params);
        let loss = self.loss_on(&mut tape, features, ctc_target, target, &mut Dropout::eval())?;
        let predictions = argmax_rows(tape.value(loss.logits).view());
        Ok((
            ItemLossValues {
                ctc: loss.ctc_value,
                ce: loss.ce_value,
                lengths: loss.lengths,
            },
            predictions,
        ))
    }
}

/// Plain values of an [`ItemLoss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ItemLossValues {
    pub ctc: Option<f64>,
    pub ce: f64,
    pub lengths: ItemLengths,
}


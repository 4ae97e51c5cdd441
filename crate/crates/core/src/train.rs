//! Adam with warmup and inverse square root decay, gradient accumulation,
//! early stopping, checkpoint averaging, and activation accounting.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGrads, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::features::{spec_augment, Example, SpecAugmentConfig};
use crate::model::checkpoint::{decode_params, encode_params, Reader};
use crate::model::{conv_out_len, subsampled_len, Dropout, ItemLengths, ModelConfig, Seq2Seq};
use crate::parallel::{self, derive_seed, Execution};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_peak: f64,
    pub warmup_updates: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_sentences: usize,
    pub accumulation_steps: usize,
    pub patience_epochs: usize,
    pub checkpoint_avg_n: usize,
    pub seed: u64,
    pub max_epochs: usize,
    /// Stop after this many updates (for short runs).
    pub max_updates: Option<u64>,
    pub spec_augment: Option<SpecAugmentConfig>,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    /// The full-size optimisation recipe.
    pub fn full() -> Self {
        TrainConfig {
            lr_start: 3e-4,
            lr_peak: 5e-3,
            warmup_updates: 4000,
            adam_betas: (0.9, 0.98),
            adam_eps: 1e-8,
            batch_sentences: 8,
            accumulation_steps: 8,
            patience_epochs: 5,
            checkpoint_avg_n: 5,
            seed: 1,
            max_epochs: 100,
            max_updates: None,
            spec_augment: Some(SpecAugmentConfig::default()),
            execution: Execution::Parallel,
        }
    }

    /// Short schedule for the synthetic task.
    pub fn desk() -> Self {
        TrainConfig {
            warmup_updates: 1000,
            batch_sentences: 8,
            accumulation_steps: 1,
            patience_epochs: 10,
            max_epochs: 30,
            spec_augment: None,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_start >= 0.0 && self.lr_start <= self.lr_peak) {
            return fail("need 0 <= lr_start <= lr_peak");
        }
        if self.warmup_updates == 0 {
            return fail("warmup_updates must be at least 1");
        }
        if self.batch_sentences == 0 || self.accumulation_steps == 0 || self.checkpoint_avg_n == 0 {
            return fail("batch_sentences, accumulation_steps and checkpoint_avg_n must be positive");
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if let Some(sa) = &self.spec_augment {
            sa.validate()?;
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_sentences * self.accumulation_steps
    }
}

/// Learning rate used for update number `update` (0-based).
pub fn lr_at_step(update: u64, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_updates as f64;
    let u = update as f64;
    if u <= w {
        cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * u / w
    } else {
        cfg.lr_peak * (w / u).sqrt()
    }
}

/// Adam moments aligned with a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Array2<S>>,
    pub v: Vec<Array2<S>>,
    /// Applied steps.
    pub t: u64,
    /// Steps skipped because of non-finite gradients.
    pub skipped: u64,
}

impl<S: Real> AdamState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros = || params.values().iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
            skipped: 0,
        }
    }
}

/// One bias-corrected Adam update. Returns `false` and leaves everything
/// but the skip counter untouched when a gradient is not finite.
pub fn adam_step<S: Real>(
    params: &mut ParamStore<S>,
    state: &mut AdamState<S>,
    grads: &ParamGrads<S>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> bool {
    if !grads.is_finite() {
        state.skipped += 1;
        return false;
    }
    state.t += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let (b1s, b2s) = (S::of(b1), S::of(b2));
    let (one_b1, one_b2) = (S::of(1.0 - b1), S::of(1.0 - b2));
    let (c1s, c2s, lrs, epss) = (S::of(c1), S::of(c2), S::of(lr), S::of(eps));
    for ((p, g), (m, v)) in params
        .values_mut()
        .iter_mut()
        .zip(&grads.values)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = b1s * *m + one_b1 * g;
            *v = b2s * *v + one_b2 * g * g;
            let mh = *m / c1s;
            let vh = *v / c2s;
            *p -= lrs * mh / (vh.sqrt() + epss);
        });
    }
    true
}

/// Elementwise mean of the buffered checkpoints. Warns when fewer than
/// `expected` are available.
pub fn average_checkpoints<S: Real>(buffer: &[ParamStore<S>], expected: usize) -> Result<ParamStore<S>> {
    let first = buffer.first().ok_or_else(|| Error::invalid("no checkpoints to average"))?;
    if buffer.len() < expected {
        log::warn!("averaging {} checkpoints, {} requested", buffer.len(), expected);
    }
    let mut out = first.clone();
    for other in &buffer[1..] {
        first.check_compatible(other)?;
        for (a, b) in out.values_mut().iter_mut().zip(other.values()) {
            *a += b;
        }
    }
    let n = S::of(buffer.len() as f64);
    for v in out.values_mut() {
        v.mapv_inplace(|x| x / n);
    }
    Ok(out)
}

/// A training utterance with encoded targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub features: Array2<f32>,
    pub ctc_target: Vec<usize>,
    pub target: Vec<usize>,
}

pub fn encode_examples(examples: &[Example], cfg: &ModelConfig) -> Result<Vec<TrainExample>> {
    examples
        .iter()
        .map(|e| {
            if e.features.dim() != cfg.feature_dim {
                return Err(Error::invalid(format!(
                    "{}: feature dim {} but model expects {}",
                    e.id,
                    e.features.dim(),
                    cfg.feature_dim
                )));
            }
            Ok(TrainExample {
                id: e.id.clone(),
                features: e.features.frames.clone(),
                ctc_target: cfg.ctc_vocab.encode(&e.phones)?.into_inner(),
                target: cfg.target_vocab.encode(&e.translation)?,
            })
        })
        .collect()
}

/// Sums over the sentences of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchTotals {
    pub sentences: usize,
    /// Decoder positions, end-of-sentence included.
    pub tokens: usize,
    pub ctc: f64,
    pub ce: f64,
    pub lambda: f64,
    pub ctc_infeasible: usize,
    /// Items whose forward pass produced NaN.
    pub non_finite: usize,
    pub peak_activation_elements: u64,
    pub subsampled_frames: usize,
    pub compressed_frames: usize,
}

impl BatchTotals {
    fn add(&mut self, o: &BatchTotals) {
        self.sentences += o.sentences;
        self.tokens += o.tokens;
        self.ctc += o.ctc;
        self.ce += o.ce;
        self.lambda += o.lambda;
        self.ctc_infeasible += o.ctc_infeasible;
        self.non_finite += o.non_finite;
        self.peak_activation_elements = self.peak_activation_elements.max(o.peak_activation_elements);
        self.subsampled_frames += o.subsampled_frames;
        self.compressed_frames += o.compressed_frames;
    }
}

fn item_rng(seed: u64, update: u64, position: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, update), position as u64))
}

/// Summed gradients and loss totals of `items`, processed in micro-batches
/// of `batch_sentences`. Item `i` draws its dropout and augmentation from
/// `(seed, update, i)`, and gradients are added in item order, so the
/// result does not depend on the micro-batch size or the thread count.
pub fn accumulate_gradients<S: Real>(
    model: &Seq2Seq<S>,
    items: &[&TrainExample],
    batch_sentences: usize,
    spec: Option<&SpecAugmentConfig>,
    seed: u64,
    update: u64,
    exec: Execution,
) -> Result<(ParamGrads<S>, BatchTotals)> {
    let mut grads = ParamGrads::zeros_for(model.params());
    let mut totals = BatchTotals::default();
    let cfg = model.config();
    for (chunk_index, chunk) in items.chunks(batch_sentences.max(1)).enumerate() {
        let offset = chunk_index * batch_sentences.max(1);
        let results = parallel::map(exec, chunk, |i, ex| -> Result<(ParamGrads<S>, ItemLengths, Option<f64>, f64)> {
            let mut rng = item_rng(seed, update, offset + i);
            let feats = match spec {
                Some(sa) => spec_augment(&ex.features, sa, &mut rng),
                None => ex.features.clone(),
            };
            let feats = feats.mapv(|v| S::of(v as f64));
            let mut tape = Tape::with_params(model.params());
            let mut drop = Dropout::train(cfg.dropout, &mut rng);
            let loss = model.loss_on(&mut tape, feats.view(), &ex.ctc_target, &ex.target, &mut drop)?;
            let g = tape.backward(loss.total).params(model.params());
            Ok((g, loss.lengths, loss.ctc_value, loss.ce_value))
        });
        let mut batch = BatchTotals::default();
        let mut lengths = Vec::with_capacity(chunk.len());
        for r in results {
            let (g, len, ctc, ce) = match r {
                Err(Error::Diverged(_)) => {
                    batch.sentences += 1;
                    batch.non_finite += 1;
                    batch.lambda = f64::NAN;
                    continue;
                }
                other => other?,
            };
            grads.add_assign(&g);
            batch.sentences += 1;
            batch.tokens += len.target;
            batch.ce += ce;
            match ctc {
                Some(c) => batch.ctc += c,
                None => batch.ctc_infeasible += 1,
            }
            batch.lambda += crate::model::multitask_loss(ctc, ce, cfg.loss_weight_ctc);
            batch.subsampled_frames += len.subsampled;
            batch.compressed_frames += len.compressed;
            lengths.push(len);
        }
        batch.peak_activation_elements = peak_activation_elements(cfg, &lengths);
        totals.add(&batch);
    }
    Ok((grads, totals))
}

/// Elements of every length-dependent activation of one batch (summed over
/// its items): frontend feature maps, per encoder layer the states, the
/// feed-forward hidden layer and the `heads x T x T` attention scores, the
/// CTC posteriors, and per decoder layer the states, hidden layer and the
/// self- and cross-attention scores. Layers above the CTC tap use the
/// compressed length.
pub fn peak_activation_elements(cfg: &ModelConfig, batch: &[ItemLengths]) -> u64 {
    let (d, h, ffn) = (cfg.d_model as u64, cfg.n_heads as u64, cfg.ffn_dim as u64);
    let c = cfg.conv_channels as u64;
    let mut total = 0u64;
    for len in batch {
        let t1 = conv_out_len(len.input_frames) as u64;
        let f1 = conv_out_len(cfg.feature_dim) as u64;
        let t2 = subsampled_len(len.input_frames) as u64;
        let f2 = subsampled_len(cfg.feature_dim) as u64;
        total += t1 * f1 * c + t2 * f2 * c;
        let layer = |t: u64| t * (d + ffn) + h * t * t;
        for l in 1..=cfg.n_encoder_layers {
            let t = if l <= cfg.ctc_layer { len.subsampled } else { len.compressed };
            total += layer(t as u64);
        }
        total += len.subsampled as u64 * cfg.ctc_vocab.len() as u64;
        let (u, tc) = (len.target as u64, len.compressed as u64);
        total += cfg.n_decoder_layers as u64 * (u * (d + ffn) + h * u * u + h * u * tc);
    }
    total
}

/// Lengths an item would have without running the model: compressed length
/// taken as given.
pub fn item_lengths(input_frames: usize, compressed: usize, target_tokens: usize) -> ItemLengths {
    ItemLengths {
        input_frames,
        subsampled: subsampled_len(input_frames),
        compressed,
        target: target_tokens + 1,
    }
}

/// Dev-set evaluation in inference mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    /// Label-smoothed cross entropy per target token; the early stopping metric.
    pub ce_per_token: f64,
    pub ctc_per_sentence: f64,
    pub lambda_per_sentence: f64,
    /// Teacher-forced argmax accuracy over target tokens (end-of-sentence included).
    pub token_accuracy: f64,
    pub ctc_infeasible: usize,
    pub mean_subsampled_len: f64,
    pub mean_compressed_len: f64,
}

pub fn evaluate_dev<S: Real>(model: &Seq2Seq<S>, dev: &[TrainExample], exec: Execution) -> Result<DevMetrics> {
    if dev.is_empty() {
        return Err(Error::invalid("empty dev set"));
    }
    let cfg = model.config();
    let results = parallel::map(exec, dev, |_, ex| {
        let feats = ex.features.mapv(|v| S::of(v as f64));
        model.evaluate_item(feats.view(), &ex.ctc_target, &ex.target)
    });
    let mut m = DevMetrics::default();
    let (mut tokens, mut correct) = (0usize, 0usize);
    let (mut ce, mut ctc, mut lambda) = (0.0, 0.0, 0.0);
    for (ex, r) in dev.iter().zip(results) {
        let (v, pred) = r?;
        let gold = ex.target.iter().copied().chain([cfg.target_vocab.eos()]);
        correct += gold.zip(&pred).filter(|(g, p)| g == *p).count();
        tokens += v.lengths.target;
        ce += v.ce;
        match v.ctc {
            Some(c) => ctc += c,
            None => m.ctc_infeasible += 1,
        }
        lambda += crate::model::multitask_loss(v.ctc, v.ce, cfg.loss_weight_ctc);
        m.mean_subsampled_len += v.lengths.subsampled as f64;
        m.mean_compressed_len += v.lengths.compressed as f64;
    }
    let n = dev.len() as f64;
    m.ce_per_token = ce / tokens as f64;
    m.ctc_per_sentence = ctc / n;
    m.lambda_per_sentence = lambda / n;
    m.token_accuracy = correct as f64 / tokens as f64;
    m.mean_subsampled_len /= n;
    m.mean_compressed_len /= n;
    Ok(m)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Step {
        epoch: usize,
        update: u64,
        lr: f64,
        /// Per-sentence means over the update.
        lambda: f64,
        ctc: f64,
        ce: f64,
        sentences: usize,
        tokens: usize,
        ctc_infeasible: usize,
        applied: bool,
    },
    Epoch {
        epoch: usize,
        updates: u64,
        train_lambda: f64,
        train_ctc: f64,
        train_ce: f64,
        train_mean_subsampled_len: f64,
        train_mean_compressed_len: f64,
        peak_activation_elements: u64,
        dev: DevMetrics,
        best_dev_ce: f64,
        epochs_since_improvement: usize,
        skipped_updates: u64,
        ctc_infeasible_total: u64,
    },
}

/// Everything needed to continue training at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S: Real> {
    pub params: ParamStore<S>,
    pub adam: AdamState<S>,
    pub update_count: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Parameters at the end of the most recent epochs, oldest first.
    pub ring: VecDeque<ParamStore<S>>,
    pub best_dev: Option<f64>,
    pub epochs_since_improvement: usize,
    pub ctc_infeasible: u64,
    pub finished: bool,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    dtype: String,
    update_count: u64,
    epoch: usize,
    adam_t: u64,
    adam_skipped: u64,
    ring: usize,
    best_dev: Option<f64>,
    epochs_since_improvement: usize,
    ctc_infeasible: u64,
    finished: bool,
}

const STATE_MAGIC: &[u8; 4] = b"CTCS";
const STATE_VERSION: u32 = 1;

impl<S: Real> TrainState<S> {
    pub fn new(params: ParamStore<S>) -> Self {
        TrainState {
            adam: AdamState::new(&params),
            params,
            update_count: 0,
            epoch: 0,
            ring: VecDeque::new(),
            best_dev: None,
            epochs_since_improvement: 0,
            ctc_infeasible: 0,
            finished: false,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = StateMeta {
            dtype: S::DTYPE.into(),
            update_count: self.update_count,
            epoch: self.epoch,
            adam_t: self.adam.t,
            adam_skipped: self.adam.skipped,
            ring: self.ring.len(),
            best_dev: self.best_dev,
            epochs_since_improvement: self.epochs_since_improvement,
            ctc_infeasible: self.ctc_infeasible,
            finished: self.finished,
        };
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&meta)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        encode_params(&self.params, &mut out);
        encode_params(&self.moment_store(&self.adam.m), &mut out);
        encode_params(&self.moment_store(&self.adam.v), &mut out);
        for p in &self.ring {
            encode_params(p, &mut out);
        }
        Ok(out)
    }

    fn moment_store(&self, values: &[Array2<S>]) -> ParamStore<S> {
        let mut s = ParamStore::new();
        for ((_, name, _), v) in self.params.iter().zip(values) {
            s.insert(name, v.clone());
        }
        s
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != STATE_MAGIC {
            return Err(Error::Format("not a training state (bad magic)".into()));
        }
        if r.u32()? != STATE_VERSION {
            return Err(Error::Format("unsupported training state version".into()));
        }
        let meta: StateMeta = serde_json::from_slice(r.bytes_field()?)?;
        if meta.dtype != S::DTYPE {
            return Err(Error::Format(format!("state holds {}, expected {}", meta.dtype, S::DTYPE)));
        }
        let params: ParamStore<S> = decode_params(&mut r)?;
        let m: ParamStore<S> = decode_params(&mut r)?;
        let v: ParamStore<S> = decode_params(&mut r)?;
        params.check_compatible(&m)?;
        params.check_compatible(&v)?;
        let mut ring = VecDeque::new();
        for _ in 0..meta.ring {
            let p = decode_params(&mut r)?;
            params.check_compatible(&p)?;
            ring.push_back(p);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after training state".into()));
        }
        Ok(TrainState {
            params,
            adam: AdamState {
                m: m.values().to_vec(),
                v: v.values().to_vec(),
                t: meta.adam_t,
                skipped: meta.adam_skipped,
            },
            update_count: meta.update_count,
            epoch: meta.epoch,
            ring,
            best_dev: meta.best_dev,
            epochs_since_improvement: meta.epochs_since_improvement,
            ctc_infeasible: meta.ctc_infeasible,
            finished: meta.finished,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::file(path, e))?)
    }
}

/// Progress notifications of [`train_loop`].
pub enum Event<'a, S: Real> {
    Record(&'a MetricRecord),
    /// Fired after every epoch with the resumable state.
    EpochEnd(&'a TrainState<S>),
}

pub struct TrainOutcome<S: Real> {
    /// Model with the averaged parameters of the last checkpoints.
    pub model: Seq2Seq<S>,
    pub state: TrainState<S>,
    pub stopped_early: bool,
}

/// Epoch loop with gradient accumulation, per-epoch dev evaluation, early
/// stopping on dev cross entropy, and final checkpoint averaging.
///
/// All randomness derives from `cfg.seed`, the epoch and the update count,
/// so resuming from an epoch-end state continues the same trajectory.
pub fn train_loop<S: Real>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &[TrainExample],
    dev: &[TrainExample],
    resume: Option<TrainState<S>>,
    observer: &mut dyn FnMut(Event<'_, S>) -> Result<()>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid("training and dev sets must be non-empty"));
    }
    let mut model = match &resume {
        Some(s) => Seq2Seq::from_params(model_cfg.clone(), s.params.clone())?,
        None => Seq2Seq::new(model_cfg.clone(), derive_seed(cfg.seed, u64::MAX))?,
    };
    let mut state = resume.unwrap_or_else(|| TrainState::new(model.params().clone()));
    let mut stopped_early = false;

    while !state.finished && state.epoch < cfg.max_epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0x5EED_0F0E_0C11, epoch as u64)));

        let mut epoch_totals = BatchTotals::default();
        let mut finite_steps = 0usize;
        let mut steps = 0usize;
        for group in order.chunks(cfg.effective_batch()) {
            if cfg.max_updates.is_some_and(|m| state.update_count >= m) {
                break;
            }
            let items: Vec<&TrainExample> = group.iter().map(|&i| &train[i]).collect();
            let (mut grads, totals) = accumulate_gradients(
                &model,
                &items,
                cfg.batch_sentences,
                cfg.spec_augment.as_ref(),
                cfg.seed,
                state.update_count,
                cfg.execution,
            )?;
            grads.scale(S::of(1.0 / totals.tokens as f64));
            let lr = lr_at_step(state.update_count, cfg);
            let applied = if totals.non_finite > 0 {
                state.adam.skipped += 1;
                false
            } else {
                adam_step(model.params_mut(), &mut state.adam, &grads, lr, cfg.adam_betas, cfg.adam_eps)
            };
            let n = totals.sentences as f64;
            let record = MetricRecord::Step {
                epoch,
                update: state.update_count,
                lr,
                lambda: totals.lambda / n,
                ctc: totals.ctc / n,
                ce: totals.ce / n,
                sentences: totals.sentences,
                tokens: totals.tokens,
                ctc_infeasible: totals.ctc_infeasible,
                applied,
            };
            observer(Event::Record(&record))?;
            state.update_count += 1;
            state.ctc_infeasible += totals.ctc_infeasible as u64;
            steps += 1;
            if totals.lambda.is_finite() {
                finite_steps += 1;
            }
            epoch_totals.add(&totals);
        }
        if steps > 0 && finite_steps == 0 {
            return Err(Error::Diverged(format!(
                "loss was not finite for any update of epoch {epoch} (update {})",
                state.update_count
            )));
        }

        let dev_metrics = evaluate_dev(&model, dev, cfg.execution)?;
        let improved = state.best_dev.is_none_or(|b| dev_metrics.ce_per_token < b);
        if improved {
            state.best_dev = Some(dev_metrics.ce_per_token);
            state.epochs_since_improvement = 0;
        } else {
            state.epochs_since_improvement += 1;
        }
        state.ring.push_back(model.params().clone());
        while state.ring.len() > cfg.checkpoint_avg_n {
            state.ring.pop_front();
        }
        state.epoch += 1;
        state.params = model.params().clone();

        let n = epoch_totals.sentences.max(1) as f64;
        let record = MetricRecord::Epoch {
            epoch,
            updates: state.update_count,
            train_lambda: epoch_totals.lambda / n,
            train_ctc: epoch_totals.ctc / n,
            train_ce: epoch_totals.ce / n,
            train_mean_subsampled_len: epoch_totals.subsampled_frames as f64 / n,
            train_mean_compressed_len: epoch_totals.compressed_frames as f64 / n,
            peak_activation_elements: epoch_totals.peak_activation_elements,
            dev: dev_metrics,
            best_dev_ce: state.best_dev.unwrap_or(f64::NAN),
            epochs_since_improvement: state.epochs_since_improvement,
            skipped_updates: state.adam.skipped,
            ctc_infeasible_total: state.ctc_infeasible,
        };
        observer(Event::Record(&record))?;

        let out_of_updates = cfg.max_updates.is_some_and(|m| state.update_count >= m);
        if state.epochs_since_improvement >= cfg.patience_epochs {
            stopped_early = true;
            state.finished = true;
        }
        if out_of_updates || state.epoch >= cfg.max_epochs {
            state.finished = true;
        }
        observer(Event::EpochEnd(&state))?;
    }

    let buffer: Vec<ParamStore<S>> = state.ring.iter().cloned().collect();
    let averaged = if buffer.is_empty() {
        model.params().clone()
    } else {
        average_checkpoints(&buffer, cfg.checkpoint_avg_n)?
    };
    Ok(TrainOutcome {
        model: Seq2Seq::from_params(model_cfg.clone(), averaged)?,
        state,
        stopped_early,
    })
}

//! Collapsing encoder states that share a CTC prediction.
//!
//! Frames are segmented into maximal runs of the same greedy CTC label and
//! every run is pooled into one vector as a convex combination of its frames.
//! Run boundaries are constants for differentiation; gradients reach the
//! states and, for the confidence-based policies, the log-probabilities.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::ctc::{argmax_rows, FramePosteriors};
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};
use crate::real::Real;

/// Half-open frame interval `[start, end)` whose frames share `label`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

impl SegmentSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Arithmetic mean of the run.
    Average,
    /// Weights proportional to the probability of the run's label.
    Weighted,
    /// Softmax over the run of the probabilities of the run's label.
    Softmax,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "average" | "avg" => Ok(PolicyKind::Average),
            "weighted" => Ok(PolicyKind::Weighted),
            "softmax" => Ok(PolicyKind::Softmax),
            other => Err(Error::Config(format!("unknown compression policy {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionPolicy {
    pub kind: PolicyKind,
    /// Keep runs predicted as blank as pooled vectors of their own.
    #[serde(default = "default_true")]
    pub keep_blank_segments: bool,
    /// Stop gradients from flowing into the log-probabilities through the
    /// pooling weights.
    #[serde(default)]
    pub detach_weights: bool,
}

fn default_true() -> bool {
    true
}

impl CompressionPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        CompressionPolicy {
            kind,
            keep_blank_segments: true,
            detach_weights: false,
        }
    }
}

/// Maximal runs of equal labels, in order.
pub fn segment_runs(frame_labels: &[usize]) -> Vec<SegmentSpan> {
    let mut spans: Vec<SegmentSpan> = Vec::new();
    for (t, &l) in frame_labels.iter().enumerate() {
        match spans.last_mut() {
            Some(last) if last.label == l => last.end = t + 1,
            _ => spans.push(SegmentSpan {
                start: t,
                end: t + 1,
                label: l,
            }),
        }
    }
    spans
}

/// A fixed segmentation plus pooling policy; the differentiable part of the
/// compression block.
#[derive(Clone, Debug)]
pub struct CompressionPlan {
    pub kind: PolicyKind,
    pub detach_weights: bool,
    /// Input length.
    pub frames: usize,
    /// Pooled spans, one per output vector.
    pub spans: Vec<SegmentSpan>,
}

impl CompressionPlan {
    /// Segments by greedy CTC labels and applies the blank-dropping rule.
    pub fn from_posteriors<S: Real>(
        posteriors: &FramePosteriors<S>,
        policy: &CompressionPolicy,
        blank: usize,
    ) -> Self {
        let labels = argmax_rows(posteriors.log_probs());
        Self::from_labels(&labels, policy, blank)
    }

    pub fn from_labels(labels: &[usize], policy: &CompressionPolicy, blank: usize) -> Self {
        let mut spans = segment_runs(labels);
        if !policy.keep_blank_segments && spans.iter().any(|s| s.label != blank) {
            spans.retain(|s| s.label != blank);
        }
        CompressionPlan {
            kind: policy.kind,
            detach_weights: policy.detach_weights,
            frames: labels.len(),
            spans,
        }
    }

    pub fn output_len(&self) -> usize {
        self.spans.len()
    }

    /// Per-frame pooling weights; frames outside every kept span get 0.
    pub fn weights<S: Real>(&self, log_probs: ArrayView2<S>) -> Vec<S> {
        let mut w = vec![S::zero(); self.frames];
        for span in &self.spans {
            let n = span.len();
            match self.kind {
                PolicyKind::Average => {
                    let v = S::one() / S::of(n as f64);
                    w[span.start..span.end].iter_mut().for_each(|x| *x = v);
                }
                PolicyKind::Weighted => {
                    let p: Vec<S> = (span.start..span.end)
                        .map(|t| log_probs[[t, span.label]].exp())
                        .collect();
                    let total: S = p.iter().copied().sum();
                    for (i, t) in (span.start..span.end).enumerate() {
                        // all-zero confidences fall back to the mean
                        w[t] = if total > S::zero() {
                            p[i] / total
                        } else {
                            S::one() / S::of(n as f64)
                        };
                    }
                }
                PolicyKind::Softmax => {
                    // probabilities lie in [0, 1]; no max-shift needed
                    let q: Vec<S> = (span.start..span.end)
                        .map(|t| log_probs[[t, span.label]].exp().exp())
                        .collect();
                    let total: S = q.iter().copied().sum();
                    for (i, t) in (span.start..span.end).enumerate() {
                        w[t] = q[i] / total;
                    }
                }
            }
        }
        w
    }

    /// Pools `states` (`T x D`) with precomputed per-frame `weights`.
    pub fn pool<S: Real>(&self, states: ArrayView2<S>, weights: &[S]) -> Array2<S> {
        // Anchored at the first frame: sum_t w_t x_t = x_s + sum_t w_t (x_t - x_s)
        // when the weights sum to one, and exact when a span is constant.
        let mut out = Array2::zeros((self.spans.len(), states.ncols()));
        for (mut row, span) in out.outer_iter_mut().zip(&self.spans) {
            let anchor = states.row(span.start);
            row.assign(&anchor);
            for t in span.start + 1..span.end {
                let diff = &states.row(t) - &anchor;
                row.scaled_add(weights[t], &diff);
            }
        }
        out
    }

    /// Gradients of the pooled output with respect to `states` and `log_probs`.
    pub fn backward<S: Real>(
        &self,
        states: ArrayView2<S>,
        log_probs: ArrayView2<S>,
        weights: &[S],
        grad_out: ArrayView2<S>,
    ) -> (Array2<S>, Array2<S>) {
        let mut grad_states = Array2::zeros(states.raw_dim());
        let mut grad_lp = Array2::zeros(log_probs.raw_dim());
        for (s, span) in self.spans.iter().enumerate() {
            let g = grad_out.row(s);
            for t in span.start..span.end {
                grad_states.row_mut(t).scaled_add(weights[t], &g);
            }
            if self.kind == PolicyKind::Average || self.detach_weights {
                continue;
            }
            // d out / d w_t = states[t]
            let gw: Vec<S> = (span.start..span.end)
                .map(|t| g.dot(&states.row(t)))
                .collect();
            let mean: S = (span.start..span.end)
                .zip(&gw)
                .map(|(t, &gwt)| gwt * weights[t])
                .sum();
            let p = |t: usize| log_probs[[t, span.label]].exp();
            match self.kind {
                PolicyKind::Weighted => {
                    let total: S = (span.start..span.end).map(p).sum();
                    if total <= S::zero() {
                        continue;
                    }
                    for (i, t) in (span.start..span.end).enumerate() {
                        let gp = (gw[i] - mean) / total;
                        grad_lp[[t, span.label]] += gp * p(t);
                    }
                }
                PolicyKind::Softmax => {
                    for (i, t) in (span.start..span.end).enumerate() {
                        let gp = weights[t] * (gw[i] - mean);
                        grad_lp[[t, span.label]] += gp * p(t);
                    }
                }
                PolicyKind::Average => unreachable!(),
            }
        }
        (grad_states, grad_lp)
    }
}

/// Result of compressing one sequence.
#[derive(Clone, Debug)]
pub struct Compressed<S> {
    pub states: Array2<S>,
    pub spans: Vec<SegmentSpan>,
    /// Per input frame; zero for frames in dropped spans.
    pub weights: Vec<S>,
}

/// Compresses `states` (`T x D`) by the greedy segmentation of `posteriors`.
pub fn compress<S: Real>(
    states: ArrayView2<S>,
    posteriors: &FramePosteriors<S>,
    policy: &CompressionPolicy,
    blank: usize,
) -> Result<Compressed<S>> {
    if states.nrows() != posteriors.len() {
        return Err(Error::invalid(format!(
            "{} state frames but {} posterior frames",
            states.nrows(),
            posteriors.len()
        )));
    }
    let plan = CompressionPlan::from_posteriors(posteriors, policy, blank);
    let weights = plan.weights(posteriors.log_probs());
    let pooled = plan.pool(states, &weights);
    Ok(Compressed {
        states: pooled,
        spans: plan.spans,
        weights,
    })
}

/// Compressed batch, re-padded with zero vectors to the longest output.
#[derive(Clone, Debug)]
pub struct CompressedBatch<S> {
    pub states: Array3<S>,
    pub lengths: Vec<usize>,
    pub spans: Vec<Vec<SegmentSpan>>,
    pub weights: Vec<Vec<S>>,
}

pub fn compress_batch<S: Real>(
    states: ArrayView3<S>,
    log_probs: ArrayView3<S>,
    lengths: &[usize],
    policy: &CompressionPolicy,
    blank: usize,
    exec: Execution,
) -> Result<CompressedBatch<S>> {
    let (b, t_max, d) = states.dim();
    if log_probs.dim().0 != b || log_probs.dim().1 != t_max || lengths.len() != b {
        return Err(Error::invalid("batch shapes disagree"));
    }
    if lengths.iter().any(|&l| l > t_max) {
        return Err(Error::invalid("length exceeds padded size"));
    }
    let items = parallel::map_range(exec, b, |i| {
        let n = lengths[i];
        let st = states.index_axis(Axis(0), i);
        let lp = log_probs.index_axis(Axis(0), i);
        let post = FramePosteriors::from_log_probs_unchecked(lp.slice(ndarray::s![..n, ..]).to_owned());
        compress(st.slice(ndarray::s![..n, ..]), &post, policy, blank)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let out_max = items.iter().map(|c| c.states.nrows()).max().unwrap_or(0);
    let mut padded = Array3::zeros((b, out_max, d));
    let mut out_lengths = Vec::with_capacity(b);
    let mut spans = Vec::with_capacity(b);
    let mut weights = Vec::with_capacity(b);
    for (i, item) in items.into_iter().enumerate() {
        let n = item.states.nrows();
        padded
            .index_axis_mut(Axis(0), i)
            .slice_mut(ndarray::s![..n, ..])
            .assign(&item.states);
        out_lengths.push(n);
        spans.push(item.spans);
        weights.push(item.weights);
    }
    Ok(CompressedBatch {
        states: padded,
        lengths: out_lengths,
        spans,
        weights,
    })
}

//! Connectionist Temporal Classification.
//!
//! Frame posteriors are `T x C` log-probability matrices over a vocabulary
//! that reserves one blank symbol. A frame labelling maps to an output
//! sequence by merging runs of equal labels and then deleting blanks; the
//! loss of a target is the negative log of the total probability of every
//! frame labelling that maps to it, computed with a log-space
//! forward-backward recursion over the blank-interleaved target.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{self, Execution};
use crate::real::{log_add, log_sum_exp, Real};

/// Spelling of the blank symbol in vocabulary files.
pub const BLANK: &str = "<blank>";

/// A label vocabulary with exactly one blank symbol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    labels: Vec<String>,
    blank: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    labels: Vec<String>,
    blank_index: usize,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Vocabulary::new(r.labels, r.blank_index)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            labels: v.labels,
            blank_index: v.blank,
        }
    }
}

impl Vocabulary {
    pub fn new(labels: Vec<String>, blank_index: usize) -> Result<Self> {
        if blank_index >= labels.len() {
            return Err(Error::invalid(format!(
                "blank index {blank_index} outside vocabulary of {}",
                labels.len()
            )));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate label {l:?}")));
            }
        }
        Ok(Vocabulary {
            labels,
            blank: blank_index,
            index,
        })
    }

    /// Builds a vocabulary with [`BLANK`] at index 0 followed by `labels`.
    pub fn with_blank<I, L>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = L>,
        L: Into<String>,
    {
        let mut all = vec![BLANK.to_string()];
        all.extend(labels.into_iter().map(Into::into));
        Vocabulary::new(all, 0)
    }

    /// Parses the one-label-per-line format; line 0 must be `<blank>`.
    pub fn parse(text: &str) -> Result<Self> {
        let labels: Vec<String> = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .filter(|l| !l.is_empty())
            .collect();
        match labels.first() {
            Some(first) if first == BLANK => Vocabulary::new(labels, 0),
            _ => Err(Error::Format(format!(
                "vocabulary must start with {BLANK} on line 0"
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Vocabulary::parse(&text)
    }

    /// One label per line. Only vocabularies with the blank at index 0 can be
    /// written in this format.
    pub fn to_text(&self) -> Result<String> {
        if self.blank != 0 {
            return Err(Error::invalid("vocabulary file format requires blank at index 0"));
        }
        let mut s = self.labels.join("\n");
        s.push('\n');
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Maps label strings to a blank-free [`LabelSequence`].
    pub fn encode<S: AsRef<str>>(&self, labels: &[S]) -> Result<LabelSequence> {
        let ids = labels
            .iter()
            .map(|l| {
                self.id(l.as_ref())
                    .ok_or_else(|| Error::invalid(format!("unknown label {:?}", l.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        LabelSequence::new(ids, self.blank)
    }

    pub fn decode(&self, seq: &LabelSequence) -> Vec<String> {
        seq.ids()
            .iter()
            .map(|&i| self.labels[i].clone())
            .collect()
    }
}

/// Output-side label sequence; never contains the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(ids: Vec<usize>, blank: usize) -> Result<Self> {
        if let Some(pos) = ids.iter().position(|&i| i == blank) {
            return Err(Error::invalid(format!("blank at target position {pos}")));
        }
        Ok(LabelSequence(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }

    /// Smallest number of frames able to emit this sequence: one per label
    /// plus one separating blank between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Per-frame log-probabilities over a blank-augmented vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePosteriors<S> {
    log_probs: Array2<S>,
}

impl<S: Real> FramePosteriors<S> {
    /// Wraps a log-probability matrix, checking that every row is finite or
    /// `-inf` and normalised within `tol`.
    pub fn new(log_probs: Array2<S>, tol: f64) -> Result<Self> {
        for (t, row) in log_probs.outer_iter().enumerate() {
            if row.iter().any(|v| v.is_nan() || *v == S::infinity()) {
                return Err(Error::invalid(format!("non-finite log-probability in frame {t}")));
            }
            let z = log_sum_exp(row.as_slice().unwrap_or(&row.to_vec()));
            if (z).abs() > tol {
                return Err(Error::invalid(format!(
                    "frame {t} is not normalised (logsumexp = {z})"
                )));
            }
        }
        Ok(FramePosteriors { log_probs })
    }

    /// Row-wise log-softmax of unnormalised scores.
    pub fn from_logits(logits: ArrayView2<S>) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite logit"));
        }
        Ok(FramePosteriors {
            log_probs: log_softmax_rows(logits),
        })
    }

    /// Wraps a matrix without validation. Callers guarantee normalisation.
    pub fn from_log_probs_unchecked(log_probs: Array2<S>) -> Self {
        FramePosteriors { log_probs }
    }

    pub fn log_probs(&self) -> ArrayView2<'_, S> {
        self.log_probs.view()
    }

    pub fn into_inner(self) -> Array2<S> {
        self.log_probs
    }

    /// Number of valid frames.
    pub fn len(&self) -> usize {
        self.log_probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.nrows() == 0
    }

    pub fn n_labels(&self) -> usize {
        self.log_probs.ncols()
    }
}

pub fn log_softmax_rows<S: Real>(x: ArrayView2<S>) -> Array2<S> {
    let mut out = x.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Merges maximal runs of equal labels, then drops blanks.
pub fn ctc_collapse(frame_labels: &[usize], blank: usize, n_labels: usize) -> Result<LabelSequence> {
    if let Some(&bad) = frame_labels.iter().find(|&&l| l >= n_labels) {
        return Err(Error::invalid(format!(
            "frame label {bad} outside vocabulary of {n_labels}"
        )));
    }
    let mut out = Vec::with_capacity(frame_labels.len());
    let mut prev = None;
    for &l in frame_labels {
        if Some(l) != prev && l != blank {
            out.push(l);
        }
        prev = Some(l);
    }
    Ok(LabelSequence(out))
}

/// Loss and gradients of one CTC item.
#[derive(Clone, Debug)]
pub struct CtcOutput<S> {
    /// `-ln P(target | posteriors)`; `+inf` when infeasible.
    pub loss: f64,
    /// `d loss / d log_probs` treating every entry as free: minus the
    /// per-frame label occupancy.
    pub grad_log_probs: Array2<S>,
    /// `d loss / d logits` when the log-probabilities are a log-softmax of
    /// logits: `softmax - occupancy`.
    pub grad_logits: Array2<S>,
    pub feasible: bool,
}

impl<S: Real> CtcOutput<S> {
    fn infeasible(t: usize, c: usize) -> Self {
        CtcOutput {
            loss: f64::INFINITY,
            grad_log_probs: Array2::zeros((t, c)),
            grad_logits: Array2::zeros((t, c)),
            feasible: false,
        }
    }
}

/// Forward and backward lattices over the blank-interleaved target.
pub struct Lattice {
    /// `alpha[t][s]`: log-prob of prefixes ending in extended state `s` at frame `t`.
    pub alpha: Array2<f64>,
    /// `beta[t][s]`: log-prob of suffixes starting in state `s` at frame `t`,
    /// including the emission at `t`.
    pub beta: Array2<f64>,
    pub extended: Vec<usize>,
    pub log_prob_forward: f64,
    pub log_prob_backward: f64,
}

fn check_inputs<S: Real>(lp: &ArrayView2<S>, target: &[usize], blank: usize) -> Result<()> {
    let c = lp.ncols();
    if blank >= c {
        return Err(Error::invalid(format!("blank {blank} outside {c} labels")));
    }
    if lp.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN in log-probabilities"));
    }
    for &l in target {
        if l >= c || l == blank {
            return Err(Error::invalid(format!("invalid target label {l}")));
        }
    }
    Ok(())
}

fn extend(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// Runs both recursions. `T` must be at least 1.
pub fn lattice<S: Real>(lp: ArrayView2<S>, target: &[usize], blank: usize) -> Result<Lattice> {
    check_inputs(&lp, target, blank)?;
    let t_len = lp.nrows();
    if t_len == 0 {
        return Err(Error::invalid("lattice needs at least one frame"));
    }
    let ext = extend(target, blank);
    let s_len = ext.len();
    let emit = |t: usize, s: usize| lp[[t, ext[s]]].as_f64();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = Array2::from_elem((t_len, s_len), f64::NEG_INFINITY);
    alpha[[0, 0]] = emit(0, 0);
    if s_len > 1 {
        alpha[[0, 1]] = emit(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if skip_ok(s) {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + emit(t, s)
            };
        }
    }

    let mut beta = Array2::from_elem((t_len, s_len), f64::NEG_INFINITY);
    let last = t_len - 1;
    beta[[last, s_len - 1]] = emit(last, s_len - 1);
    if s_len > 1 {
        beta[[last, s_len - 2]] = emit(last, s_len - 2);
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut acc = beta[[t + 1, s]];
            if s + 1 < s_len {
                acc = log_add(acc, beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, beta[[t + 1, s + 2]]);
            }
            beta[[t, s]] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + emit(t, s)
            };
        }
    }

    let mut fwd = alpha[[last, s_len - 1]];
    if s_len > 1 {
        fwd = log_add(fwd, alpha[[last, s_len - 2]]);
    }
    let mut bwd = beta[[0, 0]];
    if s_len > 1 {
        bwd = log_add(bwd, beta[[0, 1]]);
    }
    Ok(Lattice {
        alpha,
        beta,
        extended: ext,
        log_prob_forward: fwd,
        log_prob_backward: bwd,
    })
}

/// CTC loss of `target` with its exact gradient.
///
/// Targets that cannot be aligned within `T` frames give an infinite loss and
/// zero gradients instead of an error.
pub fn ctc_loss<S: Real>(lp: ArrayView2<S>, target: &[usize], blank: usize) -> Result<CtcOutput<S>> {
    check_inputs(&lp, target, blank)?;
    let (t_len, c) = lp.dim();
    if t_len == 0 {
        if target.is_empty() {
            return Ok(CtcOutput {
                loss: 0.0,
                grad_log_probs: Array2::zeros((0, c)),
                grad_logits: Array2::zeros((0, c)),
                feasible: true,
            });
        }
        return Ok(CtcOutput::infeasible(0, c));
    }
    let min_frames = target.len() + target.windows(2).filter(|w| w[0] == w[1]).count();
    if t_len < min_frames {
        return Ok(CtcOutput::infeasible(t_len, c));
    }
    let lat = lattice(lp, target, blank)?;
    let log_p = lat.log_prob_forward;
    if !log_p.is_finite() {
        return Ok(CtcOutput::infeasible(t_len, c));
    }

    let mut grad_lp = Array2::<S>::zeros((t_len, c));
    let mut grad_logits = Array2::<S>::zeros((t_len, c));
    let mut occ = vec![f64::NEG_INFINITY; c];
    for t in 0..t_len {
        occ.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for (s, &k) in lat.extended.iter().enumerate() {
            let ab = lat.alpha[[t, s]] + lat.beta[[t, s]];
            if ab > f64::NEG_INFINITY {
                occ[k] = log_add(occ[k], ab - lp[[t, k]].as_f64());
            }
        }
        for k in 0..c {
            let gamma = if occ[k] == f64::NEG_INFINITY {
                0.0
            } else {
                (occ[k] - log_p).exp()
            };
            let y = lp[[t, k]].as_f64().exp();
            grad_lp[[t, k]] = S::of(-gamma);
            grad_logits[[t, k]] = S::of(y - gamma);
        }
    }
    Ok(CtcOutput {
        loss: -log_p,
        grad_log_probs: grad_lp,
        grad_logits,
        feasible: true,
    })
}

/// Largest `C^T` accepted by [`ctc_loss_bruteforce`].
pub const BRUTEFORCE_MAX_PATHS: u64 = 1_000_000;

/// Reference CTC loss by enumerating every frame labelling.
pub fn ctc_loss_bruteforce<S: Real>(lp: ArrayView2<S>, target: &[usize], blank: usize) -> Result<f64> {
    check_inputs(&lp, target, blank)?;
    let (t_len, c) = lp.dim();
    let paths = (c as u64).checked_pow(t_len as u32).unwrap_or(u64::MAX);
    if paths > BRUTEFORCE_MAX_PATHS {
        return Err(Error::Size(format!(
            "{c}^{t_len} paths exceed the enumeration guard of {BRUTEFORCE_MAX_PATHS}"
        )));
    }
    let mut total = 0.0f64;
    let mut path = vec![0usize; t_len];
    for code in 0..paths {
        let mut rest = code;
        for slot in path.iter_mut() {
            *slot = (rest % c as u64) as usize;
            rest /= c as u64;
        }
        if ctc_collapse(&path, blank, c)?.ids() == target {
            let lp_sum: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &k)| lp[[t, k]].as_f64())
                .sum();
            total += lp_sum.exp();
        }
    }
    Ok(-total.ln())
}

/// Per-frame argmax (lowest index wins ties) and its collapse.
pub fn greedy_decode<S: Real>(
    posteriors: &FramePosteriors<S>,
    blank: usize,
) -> Result<(Vec<usize>, LabelSequence)> {
    let labels = argmax_rows(posteriors.log_probs());
    let collapsed = ctc_collapse(&labels, blank, posteriors.n_labels().max(1))?;
    Ok((labels, collapsed))
}

pub fn argmax_rows<S: Real>(m: ArrayView2<S>) -> Vec<usize> {
    m.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// CTC loss over a padded `B x T x C` stack; frames at or beyond each item's
/// length are ignored and receive zero gradient.
pub fn ctc_loss_batch<S: Real>(
    log_probs: ArrayView3<S>,
    lengths: &[usize],
    targets: &[Vec<usize>],
    blank: usize,
    exec: Execution,
) -> Result<Vec<CtcOutput<S>>> {
    let (b, t_max, c) = log_probs.dim();
    if lengths.len() != b || targets.len() != b {
        return Err(Error::invalid(format!(
            "batch of {b} with {} lengths and {} targets",
            lengths.len(),
            targets.len()
        )));
    }
    if let Some(&l) = lengths.iter().find(|&&l| l > t_max) {
        return Err(Error::invalid(format!("length {l} exceeds padded {t_max}")));
    }
    let items = parallel::map_range(exec, b, |i| {
        let lp = log_probs.index_axis(Axis(0), i);
        let valid = lp.slice(ndarray::s![..lengths[i], ..]);
        ctc_loss(valid, &targets[i], blank).map(|mut out| {
            if lengths[i] < t_max {
                let pad = |g: Array2<S>| {
                    let mut full = Array2::zeros((t_max, c));
                    full.slice_mut(ndarray::s![..lengths[i], ..]).assign(&g);
                    full
                };
                out.grad_log_probs = pad(out.grad_log_probs);
                out.grad_logits = pad(out.grad_logits);
            }
            out
        })
    });
    items.into_iter().collect()
}
